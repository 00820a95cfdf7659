import json
import re

import numpy as np
import pytest

from rangevit.cli import main
from rangevit.config import load_config, parse_config
from rangevit.data_io import (
    SceneSpec,
    generate_scene,
    read_labels,
    read_pgm,
    read_range_image,
    read_weight_archive,
    write_labels,
    write_point_cloud,
)
from rangevit.model import ConfigError
from rangevit.projection import SensorFov

TINY = {
    "model": {"preset": "toy"},
    "train": {"epochs": 2, "batch_size": 2, "peak_lr": 0.003, "warmup_epochs": 1.0},
    "sensor": {"f_up": 2.0, "f_down": -20.0},
    "projection": {"height": 8, "width": 64},
    "data": {"scene": {"seed": 0, "train_scans": 2, "val_scans": 1}},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def with_changes(base, **sections):
    cfg = json.loads(json.dumps(base))
    for key, value in sections.items():
        if value is None:
            cfg.pop(key, None)
        else:
            cfg[key] = value
    return cfg


# -- configuration errors -> exit 2 ------------------------------------------------------


@pytest.mark.parametrize("change, key", [
    ({"bogus": {}}, "bogus"),
    ({"model": {"preset": "toy", "embed_dim": "wide"}}, "model.embed_dim"),
    ({"model": {"preset": "toy", "num_heads": 5}}, "model"),
    ({"model": {"preset": "huge"}}, "model.preset"),
    ({"train": {"epochs": 2, "warmup_epochs": 5.0}}, "train.warmup_epochs"),
    ({"train": {"finetune_policy": "most"}}, "train.finetune_policy"),
    ({"projection": {"height": 16, "width": 64}}, "projection.height"),
    ({"projection": {"height": 8, "width": 64, "mode": "cylindrical"}}, "projection.mode"),
    ({"data": {}}, "data"),
    ({"data": {"scene": {}, "paths": {"train": []}}}, "data"),
    ({"data": {"scene": {"num_boxes": -1}}}, "data.scene"),
    ({"data": {"scene": {"colour": 1}}}, "data.scene.colour"),
    ({"inference": {"postprocess": "knn"}}, "inference.postprocess"),
    ({"inference": {"stride": 0}}, "inference.stride"),
    ({"sensor": {"f_up": 0.0, "f_down": 0.0}}, "sensor"),
    ({"classes": {"map": {"x": 1}}}, "classes.map.x"),
])
def test_config_errors_exit_2_with_key(tmp_path, capsys, change, key):
    path = write_config(tmp_path, with_changes(TINY, **change))
    assert main(["params", "--config", path]) == 2
    err = capsys.readouterr().err
    assert f"config error: {key}" in err


def test_knn_needs_refiner_disabled():
    cfg = with_changes(TINY, model={"preset": "toy", "use_refiner": False}, inference={"postprocess": "knn"})
    run = parse_config(cfg)
    assert run.postprocess == "knn"
    with pytest.raises(ConfigError, match="inference.postprocess"):
        parse_config(with_changes(TINY, inference={"postprocess": "knn"}))


def test_missing_and_malformed_config(tmp_path, capsys):
    assert main(["params", "--config", str(tmp_path / "absent.json")]) == 2
    (tmp_path / "bad.json").write_text("{ not json")
    assert main(["params", "--config", str(tmp_path / "bad.json")]) == 2
    assert "invalid JSON at line 1" in capsys.readouterr().err


def test_bad_policy_flag(tmp_path, capsys):
    assert main(["train", "--config", write_config(tmp_path, TINY), "--policy", "ALL", "--out", str(tmp_path)]) == 2
    assert "--policy" in capsys.readouterr().err


# -- subcommands ---------------------------------------------------------------------------


def test_params_vit_small(tmp_path, capsys):
    cfg = with_changes(TINY, model={"preset": "vit_small", "hidden_dim": 256},
                       projection={"height": 32, "width": 2048})
    assert main(["params", "--config", write_config(tmp_path, cfg)]) == 0
    out = capsys.readouterr().out
    total = int(re.search(r"total\s+([\d,]+)", out).group(1).replace(",", ""))
    assert abs(total - 27.1e6) / 27.1e6 < 0.10
    assert re.search(r"encoder\s+21,590,016", out)
    for part in ("stem", "decoder", "refiner"):
        assert part in out


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "end_to_end" in out


def test_runtime_failure_exit_1(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "nothing")]) == 1
    assert "no weights" in capsys.readouterr().err


def test_project_artifacts_readable(tmp_path):
    cfg = write_config(tmp_path, TINY)
    assert main(["project", "--config", cfg, "--out", str(tmp_path / "p")]) == 0
    images = sorted((tmp_path / "p").rglob("*.rvri"))
    assert len(images) == 3
    for path in images:
        img = read_range_image(path)
        assert img.features.shape == (5, 8, 64)
        np.testing.assert_array_equal(read_pgm(path.with_suffix(".pgm")) > 0, img.occupancy)


def test_train_eval_infer_round_trip(tmp_path):
    cfg = write_config(tmp_path, TINY)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out), "--seed", "4"]) == 0
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,lr,train_loss,val_miou" and len(metrics) == 3
    weights = read_weight_archive(out / "last.rvwt")
    assert "encoder.pos_embed" in weights and "input.mean" in weights

    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "iou.csv").read_text().splitlines()
    assert rows[0] == "class_id,name,iou" and rows[1].startswith("1,ground,") and rows[-1].startswith("mean,,")

    assert main(["infer", "--config", cfg, "--out", str(out), "--split", "train"]) == 0
    preds = sorted((out / "predictions" / "train").glob("*.label"))
    assert [p.stem for p in preds] == ["scene_00000", "scene_00001"]
    n = len(generate_scene(SceneSpec(seed=0, beams=8, width=64, fov=SensorFov(2.0, -20.0))))
    labels = read_labels(preds[0], n)
    assert labels.min() >= 1 and labels.max() <= 4


def test_train_is_deterministic_per_seed(tmp_path):
    cfg = write_config(tmp_path, TINY)
    for run in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / run), "--seed", "11"]) == 0
    assert (tmp_path / "a" / "last.rvwt").read_bytes() == (tmp_path / "b" / "last.rvwt").read_bytes()
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "12"]) == 0
    assert (tmp_path / "a" / "last.rvwt").read_bytes() != (tmp_path / "c" / "last.rvwt").read_bytes()


def test_file_dataset_with_class_map(tmp_path):
    spec = SceneSpec(seed=2, beams=8, width=64, fov=SensorFov(2.0, -20.0))
    raw_ids = {1: 40, 2: 10, 3: 71, 4: 80}  # arbitrary dataset ids, upper bits carry instance ids
    entries = []
    for i in range(2):
        cloud = generate_scene(spec.with_seed(i))
        write_point_cloud(tmp_path / f"s{i}.bin", cloud)
        ids = np.vectorize(raw_ids.get)(cloud.labels) | (7 << 16)
        write_labels(tmp_path / f"s{i}.label", ids)
        entries.append({"scan": f"s{i}.bin", "labels": f"s{i}.label"})
    cfg = with_changes(TINY, data={"paths": {"train": entries}},
                       classes={"names": {"1": "road"}, "map": {str(v): k for k, v in raw_ids.items()}})
    path = write_config(tmp_path, cfg)
    run = load_config(path)
    loaded = run.load_split("train")
    np.testing.assert_array_equal(loaded[0].labels, generate_scene(spec.with_seed(0)).labels)
    assert main(["train", "--config", path, "--out", str(tmp_path / "r")]) == 0
    assert main(["eval", "--config", path, "--out", str(tmp_path / "r")]) == 0
    assert "1,road," in (tmp_path / "r" / "iou.csv").read_text()


def test_overfit_model_infers_its_training_scan(tmp_path, capsys):
    cfg = {
        "model": {"preset": "toy", "crop_height": 32, "crop_width": 256},
        "train": {"epochs": 40, "batch_size": 1, "peak_lr": 0.003, "warmup_epochs": 10.0,
                  "flip_prob": 0.0, "rotate_prob": 0.0, "translate_prob": 0.0},
        "projection": {"height": 32, "width": 256},
        "data": {"scene": {"seed": 0, "enclosure": True, "train_scans": 1}},
    }
    path = write_config(tmp_path, cfg)
    out = tmp_path / "o"
    assert main(["train", "--config", path, "--out", str(out)]) == 0
    assert main(["infer", "--config", path, "--out", str(out), "--split", "train"]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", path, "--out", str(out), "--split", "train"]) == 0
    mean = float((out / "iou.csv").read_text().splitlines()[-1].split(",")[2])
    assert mean >= 0.95
    truth = generate_scene(SceneSpec(seed=0, enclosure=True)).labels
    pred = read_labels(out / "predictions" / "train" / "scene_00000.label", truth.size)
    assert (pred == truth).mean() >= 0.95
