import hashlib
import json
import os

import pytest

from multigaze.cli import main
from multigaze.metrics import read_predictions
from multigaze.scene import load_canonical
from multigaze.training import TrainConfig, build_model, save_checkpoint

TINY = {"model": {"backbone": dict(hidden_dim=32, n_layers=1, n_heads=4, image_side=56, patch_size=14,
                                   max_text_len=512), "max_new_tokens": 30}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "3", "--count", "3", "--out", str(d / "data")]) == 0
    ckpt = str(d / "tiny.ckpt")
    save_checkpoint(ckpt, build_model(TrainConfig.from_dict(TINY)))
    return d, ckpt


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "0", "--count", "4", "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a" / "scenes.jsonl", tmp_path / "b" / "scenes.jsonl"
    assert len(a.read_text().splitlines()) == 4
    assert digest(a) == digest(b)


def test_synth_zero_count(tmp_path):
    assert main(["synth", "--count", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "scenes.jsonl").read_text() == ""


def test_synth_bad_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--count", "1", "--out", str(blocker / "sub")]) == 2


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 1


def test_train_missing_config(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.yaml")]) == 2


def test_train_then_resume(tmp_path):
    cfg = tmp_path / "run.yaml"
    body = {"preset": "overfit", "total_steps": 4, "n_scenes": 2, **TINY}
    cfg.write_text(json.dumps(body))
    assert main(["train", "--config", str(cfg)]) == 0
    log = [json.loads(line) for line in (tmp_path / "run.log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [0, 1, 2, 3]
    assert (tmp_path / "run.log.png").exists()
    cfg2 = tmp_path / "more.yaml"
    cfg2.write_text(json.dumps({**body, "total_steps": 6, "resume_from": str(tmp_path / "run.ckpt")}))
    assert main(["train", "--config", str(cfg2)]) == 0
    log2 = [json.loads(line) for line in (tmp_path / "more.log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log2] == [4, 5]


def test_eval_outputs_and_determinism(workdir, tmp_path):
    d, ckpt = workdir
    data = str(d / "data" / "scenes.jsonl")
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        assert main(["eval", "--checkpoint", ckpt, "--data", data, "--tasks", "gaze,social", "--out", str(out)]) == 0
        outs.append(out)
    metrics = json.loads((outs[0] / "metrics.json").read_text())
    assert {"avg_dist", "min_dist", "inout_ap"} <= set(metrics)
    assert digest(outs[0] / "metrics.json") == digest(outs[1] / "metrics.json")
    assert len(read_predictions(str(outs[0] / "predictions.jsonl"))) == 3
    assert (outs[0] / "metrics.png").exists()


def test_eval_social_absent_without_pairs(workdir, tmp_path):
    d, ckpt = workdir
    data = tmp_path / "one.jsonl"
    rec = json.loads((d / "data" / "scenes.jsonl").read_text().splitlines()[0])
    rec["pairs"] = []
    rec["image"] = os.path.join(str(d / "data"), rec["image"])
    data.write_text(json.dumps(rec) + "\n")
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--tasks", "social", "--out", str(out)]) == 0
    assert json.loads((out / "metrics.json").read_text()) == {}


def test_eval_bad_inputs(workdir, tmp_path):
    d, ckpt = workdir
    data = str(d / "data" / "scenes.jsonl")
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", data]) == 2
    assert main(["eval", "--checkpoint", ckpt, "--data", data, "--tasks", "dance"]) == 1


def test_predict_records_and_overlays(workdir, tmp_path, capsys):
    d, ckpt = workdir
    scene = load_canonical(str(d / "data" / "scenes.jsonl"))[0]
    image = os.path.join(str(d / "data"), scene.image_ref)
    vis = tmp_path / "vis"
    code = main(["predict", "--checkpoint", ckpt, "--image", image, "--heads", "10,10,40,40;100,100,130,130",
                 "--visualize-out", str(vis)])
    assert code == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(rec["persons"]) == 2 and len(rec["pairs"]) == 2
    assert sorted(os.listdir(vis)) == ["person_0.png", "person_1.png"]
    with open(vis / "person_0.png", "rb") as fh:
        assert fh.read(8) == b"\x89PNG\r\n\x1a\n"


def test_predict_clamps_head_box(workdir, caplog):
    d, ckpt = workdir
    scene = load_canonical(str(d / "data" / "scenes.jsonl"))[0]
    image = os.path.join(str(d / "data"), scene.image_ref)
    with caplog.at_level("WARNING"):
        assert main(["predict", "--checkpoint", ckpt, "--image", image, "--heads=-10,-10,30,30"]) == 0
    assert "clamped" in caplog.text


def test_predict_bad_heads(workdir):
    d, ckpt = workdir
    scene = load_canonical(str(d / "data" / "scenes.jsonl"))[0]
    image = os.path.join(str(d / "data"), scene.image_ref)
    assert main(["predict", "--checkpoint", ckpt, "--image", image, "--heads", "1,2,3"]) == 1
