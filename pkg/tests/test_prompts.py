import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigaze.prompts import (
    PersonOutputRecord,
    align_records,
    build_prompt,
    parse_output,
    render_records,
    serialize_targets,
    to_grid,
)
from multigaze.scene import PersonAnnotation, Scene
from multigaze.tokenizer import default_tokenizer, system_prompt

TOK = default_tokenizer()


def make_scene(persons, size=(448, 448)):
    return Scene(image=None, persons=persons, size=size, image_ref="x.png")


def test_system_prompt_assets_are_pinned():
    digests = {
        "localize": "ef25d806328fab098c0f31c682ffb32d5ffd5526ca2a722bdbf41909f18ff7b0",
        "semantic": "d85dfcf57423ec90e453c0632efcbdbafe6b8bea78b33ab011322231a46b3212",
    }
    for mode, digest in digests.items():
        assert hashlib.sha256(system_prompt(mode).encode()).hexdigest() == digest


def test_box_scaling():
    plan = build_prompt(make_scene([PersonAnnotation((112, 112, 224, 224), "outside")]))
    assert '{"bbox_2d": [250, 250, 500, 500]}' in plan.text


def test_full_image_box_clamps_to_999():
    plan = build_prompt(make_scene([PersonAnnotation((0, 0, 448, 448), "outside")]))
    assert '{"bbox_2d": [0, 0, 999, 999]}' in plan.text


def test_axes_scale_independently():
    plan = build_prompt(make_scene([PersonAnnotation((100, 50, 200, 100), "outside")], size=(200, 400)))
    assert '[250, 250, 500, 500]' in plan.text


def test_placeholders_ordered_and_tagged():
    scene = make_scene([PersonAnnotation((0, 0, 10, 10), "outside"), PersonAnnotation((20, 20, 40, 40), "outside")])
    plan = build_prompt(scene)
    assert len(plan.gaze_pad_index) == 2
    assert plan.gaze_pad_index[0] < plan.gaze_pad_index[1]
    assert all(plan.token_ids[g] == TOK.gaze_pad_id for g in plan.gaze_pad_index)
    for (a, b), g in zip(plan.person_slot_spans, plan.gaze_pad_index):
        assert a <= g < b
    assert plan.text.startswith(system_prompt("localize"))


@pytest.mark.parametrize("mode", ["localize", "localize+semantic"])
def test_prompt_tokenizer_round_trip(mode):
    scene = make_scene([PersonAnnotation((10 * k, 5, 10 * k + 9, 30), "outside") for k in range(4)])
    plan = build_prompt(scene, mode)
    assert TOK.encode(TOK.decode(plan.token_ids)) == plan.token_ids


def test_outside_target_text():
    tg = serialize_targets(make_scene([PersonAnnotation((0, 0, 10, 10), "outside")]))
    assert TOK.decode(tg.token_ids[:-1]) == 'P0: {"status": "outside"}'
    assert tg.token_ids[-1] == TOK.eos_id


def test_inside_point_scaling():
    scene = make_scene([PersonAnnotation((0, 0, 10, 10), "inside", [(0.5, 0.25)], "cup")], size=(123, 77))
    text = TOK.decode(serialize_targets(scene).token_ids)
    assert '"point_2d": [500, 250]' in text
    assert "category" not in text
    text = TOK.decode(serialize_targets(scene, "localize+semantic").token_ids)
    assert '"category": "cup"' in text


def test_unknown_person_fully_masked():
    scene = make_scene([
        PersonAnnotation((0, 0, 10, 10), "inside", [(0.1, 0.2)]),
        PersonAnnotation((20, 0, 30, 10), "unknown"),
        PersonAnnotation((40, 0, 50, 10), "outside"),
    ])
    tg = serialize_targets(scene)
    a1, a2 = tg.anchor_offsets[1], tg.anchor_offsets[2]
    assert all(w == 0.0 for w in tg.mask[a1:a2])
    assert all(w == 1.0 for w in tg.mask[:a1] + tg.mask[a2:])
    assert TOK.decode(tg.token_ids[a1:a2]) == 'P1: {"status": "outside"}\n'


def test_inside_without_targets_rejected():
    p = PersonAnnotation((0, 0, 10, 10), "outside")
    p.gaze_status = "inside"
    with pytest.raises(ValueError):
        serialize_targets(make_scene([p]))


def test_parse_examples():
    (r,) = parse_output('P0: {"status": "inside", "point_2d": [500, 250]}')
    assert (r.status, r.point, r.valid) == ("inside", (0.5, 0.25), True)
    (r,) = parse_output('P0: {"status": "outside"}')
    assert r.status == "outside" and r.point is None and r.category is None


def test_parse_degrades_per_person():
    text = 'P0: {"status": "ins\nP1: {"status": "outside"}\nP2: {"status": "inside", "point_2d": [1]}'
    recs = parse_output(text)
    assert [r.valid for r in recs] == [False, True, False]
    assert all(r.status == "outside" for r in recs)
    assert recs[0].error


def test_anchor_index_points_at_p_token():
    scene = make_scene([PersonAnnotation((0, 0, 10, 10), "inside", [(0.3, 0.3)], "cup"),
                        PersonAnnotation((20, 0, 30, 10), "outside")])
    tg = serialize_targets(scene, "localize+semantic")
    recs = parse_output(tg.token_ids, start=100)
    assert [r.anchor_index - 100 for r in recs] == tg.anchor_offsets
    for r in recs:
        assert TOK.token_bytes(tg.token_ids[r.anchor_index - 100]) == b"P"


def test_align_fills_missing_persons():
    recs = align_records(parse_output('P1: {"status": "outside"}'), 3)
    assert [r.valid for r in recs] == [False, True, False]


records = st.lists(
    st.builds(
        lambda status, gx, gy, cat: (status, gx, gy, cat),
        st.sampled_from(["inside", "outside", "unknown"]),
        st.integers(0, 999),
        st.integers(0, 999),
        st.one_of(st.none(), st.text(min_size=1, max_size=12)),
    ),
    min_size=1,
    max_size=5,
)


def scene_from(recs):
    persons = []
    for status, gx, gy, cat in recs:
        if status == "inside":
            persons.append(PersonAnnotation((0, 0, 10, 10), "inside", [(gx / 1000, gy / 1000)], cat))
        else:
            persons.append(PersonAnnotation((0, 0, 10, 10), status))
    return make_scene(persons)


@settings(max_examples=200, deadline=None)
@given(records)
def test_serialize_parse_round_trip(recs):
    tg = serialize_targets(scene_from(recs), "localize+semantic")
    parsed = parse_output(tg.token_ids)
    assert len(parsed) == len(recs)
    for (status, gx, gy, cat), r in zip(recs, parsed):
        assert r.valid
        if status == "inside":
            assert (r.status, r.grid_point, r.category) == ("inside", (gx, gy), cat)
        else:
            assert (r.status, r.grid_point, r.category) == ("outside", None, None)


@settings(max_examples=100, deadline=None)
@given(records)
def test_mask_weight_sum(recs):
    scene = scene_from(recs)
    tg = serialize_targets(scene)
    known = sum(
        len(tg.token_ids[a:b])
        for a, b, p in zip(tg.anchor_offsets, tg.anchor_offsets[1:] + [len(tg.token_ids)], scene.persons)
        if p.gaze_status != "unknown"
    )
    assert sum(tg.mask) == known


@settings(max_examples=100, deadline=None)
@given(records)
def test_render_parse_round_trip(recs):
    rs = [
        PersonOutputRecord(person=k, status="inside" if s == "inside" else "outside",
                           point=(gx / 1000, gy / 1000) if s == "inside" else None,
                           grid_point=(gx, gy) if s == "inside" else None,
                           category=c if s == "inside" else None)
        for k, (s, gx, gy, c) in enumerate(recs)
    ]
    parsed = parse_output(render_records(rs))
    assert [(r.person, r.status, r.point, r.grid_point, r.category) for r in parsed] == \
           [(r.person, r.status, r.point, r.grid_point, r.category) for r in rs]


def test_to_grid_rounding():
    assert to_grid(0.5) == 500
    assert to_grid(0.0) == 0
    assert to_grid(1.0) == 999
    assert to_grid(0.0004) == 0 and to_grid(0.0005) == 1
