import hashlib
import json
import math

import numpy as np
import pytest

from multigaze.scene import (
    PersonAnnotation,
    Scene,
    SceneFormatError,
    SynthConfig,
    _ray_exit,
    decode_head_direction,
    derive_pair_labels,
    generate_synthetic_scene,
    load_canonical,
    save_canonical,
    scene_to_record,
)


def label_digest(scene):
    rec = scene_to_record(scene, "x")
    return hashlib.sha256(json.dumps(rec, sort_keys=True).encode()).hexdigest()


def test_generator_is_deterministic():
    a, b = generate_synthetic_scene(7), generate_synthetic_scene(7)
    assert np.array_equal(a.image, b.image)
    assert label_digest(a) == label_digest(b)
    assert label_digest(a) != label_digest(generate_synthetic_scene(8))


def test_single_person_in_bounds_is_inside():
    cfg = SynthConfig(min_persons=1, max_persons=1, p_outside=0.0)
    seen_inside = 0
    for seed in range(20):
        scene = generate_synthetic_scene(seed, cfg)
        (p,) = scene.persons
        (theta,) = scene.meta["angles"]
        cx, cy = (p.head_box[0] + p.head_box[2]) / 2, (p.head_box[1] + p.head_box[3]) / 2
        room = _ray_exit(cx, cy, theta, cfg.width, cfg.height) - cfg.marker_size
        if room < cfg.min_distance * max(cfg.width, cfg.height):
            assert p.gaze_status == "outside"
            continue
        seen_inside += 1
        assert p.gaze_status == "inside"
        assert len(p.targets) == 1
        x, y = p.targets[0]
        px = scene.image[int(y * cfg.height), int(x * cfg.width)]
        assert np.allclose(px, np.rint(np.array(cfg.palette[p.category]) * 255) / 255)
    assert seen_inside > 10


def test_mutual_gaze_gives_laeo():
    cfg = SynthConfig(min_persons=2, max_persons=2, p_mutual=1.0)
    scene = generate_synthetic_scene(3, cfg)
    assert scene.pair_labels[(0, 1)].lah and scene.pair_labels[(1, 0)].lah
    assert scene.pair_labels[(0, 1)].laeo and scene.pair_labels[(1, 0)].laeo
    assert all(p.category == "person" for p in scene.persons)


def test_identical_targets_share_attention():
    persons = [
        PersonAnnotation((0, 0, 10, 10), "inside", [(0.5, 0.5)]),
        PersonAnnotation((80, 80, 90, 90), "inside", [(0.5, 0.5)]),
    ]
    labels = derive_pair_labels(persons, 100, 100)
    assert labels[(0, 1)].sa and labels[(1, 0)].sa
    assert not labels[(0, 1)].lah


def test_unknown_members_have_no_pair_labels():
    persons = [
        PersonAnnotation((0, 0, 10, 10), "inside", [(0.85, 0.85)]),
        PersonAnnotation((80, 80, 90, 90), "unknown"),
        PersonAnnotation((40, 0, 50, 10), "outside"),
    ]
    labels = derive_pair_labels(persons, 100, 100)
    assert set(labels) == {(0, 2), (2, 0)}


@pytest.mark.parametrize("seed", range(40))
def test_pixels_encode_labels(seed):
    cfg = SynthConfig()
    scene = generate_synthetic_scene(seed, cfg)
    for p, theta in zip(scene.persons, scene.meta["angles"]):
        got = decode_head_direction(scene.image, p.head_box, cfg.border)
        err = abs((got - theta + math.pi) % (2 * math.pi) - math.pi)
        assert math.degrees(err) < 1.0
    assert derive_pair_labels(scene.persons, scene.width, scene.height, cfg.sa_eps) == scene.pair_labels


def test_head_larger_than_image_rejected():
    with pytest.raises(ValueError):
        generate_synthetic_scene(0, SynthConfig(width=20, height=20, head_size=24))


def test_person_invariants():
    with pytest.raises(SceneFormatError):
        PersonAnnotation((5, 5, 5, 10), "outside")
    with pytest.raises(SceneFormatError):
        PersonAnnotation((0, 0, 5, 5), "inside")
    with pytest.raises(SceneFormatError):
        PersonAnnotation((0, 0, 5, 5), "outside", [(0.1, 0.1)])


def test_boxes_clamped_to_image():
    scene = Scene(image=np.zeros((10, 20, 3)), persons=[PersonAnnotation((-5, 2, 25, 8), "outside")])
    assert scene.persons[0].head_box == (0.0, 2.0, 20.0, 8.0)


def _write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))


def test_load_outside_person(tmp_path):
    p = tmp_path / "s.jsonl"
    _write_lines(p, [{"image": "a.png", "size": [10, 10],
                      "persons": [{"bbox": [0, 0, 4, 4], "status": "outside", "points": [], "category": None}],
                      "pairs": []}])
    (scene,) = load_canonical(str(p))
    assert scene.persons[0].targets == []
    assert scene.image is None and scene.size == (10, 10)


def test_pair_index_out_of_range(tmp_path):
    p = tmp_path / "s.jsonl"
    _write_lines(p, [{"image": "a.png", "size": [10, 10],
                      "persons": [{"bbox": [0, 0, 4, 4], "status": "outside"}],
                      "pairs": [{"i": 0, "j": 1, "lah": True, "laeo": False, "sa": False}]}])
    with pytest.raises(SceneFormatError, match="line 1"):
        load_canonical(str(p))


def test_malformed_line_names_line_and_field(tmp_path):
    p = tmp_path / "s.jsonl"
    good = {"image": "a.png", "size": [10, 10], "persons": [], "pairs": []}
    _write_lines(p, [good, {"image": "a.png", "size": [10, 10], "persons": [{"status": "inside"}]}])
    with pytest.raises(SceneFormatError, match=r"line 2.*'bbox'"):
        load_canonical(str(p))


def test_unknown_fields_ignored(tmp_path):
    p = tmp_path / "s.jsonl"
    _write_lines(p, [{"image": "a.png", "size": [10, 10], "persons": [], "pairs": [], "extra": 1}])
    assert len(load_canonical(str(p))) == 1


@pytest.mark.parametrize("inline", [False, True])
def test_canonical_round_trip(tmp_path, inline):
    scenes = [generate_synthetic_scene(s, SynthConfig(p_unknown=0.2)) for s in range(6)]
    first = tmp_path / "a.jsonl"
    save_canonical(scenes, str(first), inline=inline)
    loaded = load_canonical(str(first))
    for a, b in zip(scenes, loaded):
        assert np.array_equal(a.image, b.image)
        assert a.persons == b.persons
        assert a.pair_labels == b.pair_labels
    second = tmp_path / "b.jsonl"
    save_canonical(loaded, str(second), inline=inline)
    assert first.read_bytes() == second.read_bytes()
