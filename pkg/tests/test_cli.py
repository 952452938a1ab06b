import json

import numpy as np
import pytest

from fusionseg.cli import main
from fusionseg.data import Raster, ScenePair, load_scene
from fusionseg.metrics import overall_accuracy
from fusionseg.models import build_network
from fusionseg.optim import make_rng
from fusionseg.pipeline import RunConfig, evaluate_scenes, predict_scene
from fusionseg.tensor import load_tensor


def _bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    assert main(["synth", "--out", str(root), "--seed", "3", "--count", "2", "--vnir-size", "64"]) == 0
    return root / "scene_000", root / "scene_001"


def _train_args(scenes, ckpt, *extra):
    return ["train", "--train-scenes", str(scenes[0]), "--val-scenes", str(scenes[1]), "--epochs", "2",
            "--patches", "8", "--val-patches", "4", "--batch-size", "4", "--patch-size", "8",
            "--lr-start", "1e-5", "--lr-end", "1e-6", "--checkpoint-dir", str(ckpt), *extra]


def test_dump_config_defaults(capsys, monkeypatch):
    monkeypatch.delenv("FUSIONSEG_SEED", raising=False)
    assert main(["train", "--dump-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg == RunConfig().to_dict()
    assert (cfg["epochs"], cfg["batch_size"], cfg["patch_size"]) == (50, 32, 50)
    assert (cfg["train_patches"], cfg["val_patches"]) == (2000, 500)
    assert (cfg["lr_start"], cfg["lr_end"], cfg["momentum"], cfg["weight_decay"]) == (1e-6, 1e-7, 0.9, 5e-4)


def test_config_file_and_overrides(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FUSIONSEG_SEED", "41")
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 7, "network": "fcn_swir"}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--epochs", "3", "--dump-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert (cfg["epochs"], cfg["network"], cfg["seed"]) == (3, "fcn_swir", 41)
    (tmp_path / "bad.json").write_text(json.dumps({"epochz": 7}))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--dump-config"]) == 2


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert main(["train"]) == 1


def test_missing_files_exit_2(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--scenes", str(tmp_path)]) == 2
    assert main(["stats", "--scenes", str(tmp_path / "none")]) == 2


def test_synth_is_byte_reproducible(tmp_path):
    main(["synth", "--out", str(tmp_path / "a"), "--seed", "7", "--vnir-size", "32"])
    main(["synth", "--out", str(tmp_path / "b"), "--seed", "7", "--vnir-size", "32"])
    assert _bytes(tmp_path / "a") == _bytes(tmp_path / "b")


def test_train_smoke_and_determinism(scenes, tmp_path):
    assert main(_train_args(scenes, tmp_path / "r1")) == 0
    assert main(_train_args(scenes, tmp_path / "r2")) == 0
    lines = (tmp_path / "r1" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"epoch", "lr", "train_loss", "val_loss", "val_oa"} <= set(rec)
    for part in ("train_log.jsonl", "best", "final"):
        a, b = tmp_path / "r1" / part, tmp_path / "r2" / part
        assert (_bytes(a) == _bytes(b)) if a.is_dir() else (a.read_bytes() == b.read_bytes())
    assert (tmp_path / "r1" / "best" / "network.json").exists()
    assert (tmp_path / "r1" / "final" / "norm.json").exists()


def test_divergence_exits_3(scenes, tmp_path, capsys):
    code = main(_train_args(scenes, tmp_path / "nan", "--lr-start", "1e3", "--lr-end", "1e3"))
    assert code == 3
    err = capsys.readouterr().err
    assert "epoch=" in err and "step=" in err and "layer=" in err


def test_eval_and_predict(scenes, tmp_path, capsys):
    main(_train_args(scenes, tmp_path / "run"))
    capsys.readouterr()
    report = tmp_path / "rep.json"
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "best"), "--scenes", str(scenes[1]),
                 "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert sum(rep["column_totals"]) == 64 * 64
    for name in ("clouds", "snow", "shadows", "rest"):
        assert set(rep["per_class"][name]) == {"precision", "recall", "f1"}
    assert "OA" in capsys.readouterr().out
    assert main(["predict", "--checkpoint", str(tmp_path / "run" / "final"), "--scene", str(scenes[1]),
                 "--out", str(tmp_path / "pred")]) == 0
    lab = load_tensor(tmp_path / "pred")
    assert lab.dtype == np.uint8 and lab.shape == (64, 64) and lab.max() <= 3


def test_oracle_predictor_scores_one(scenes):
    s = load_scene(scenes[0])
    cm = evaluate_scenes(None, [s], None, 8, predictor=lambda sc: sc.labels)
    assert overall_accuracy(cm) == 1.0


def test_window_stitching_on_constant_scene():
    net = build_network("cloudsnet", rng=make_rng(0))
    def const(h):
        return ScenePair(Raster(np.full((1, 3, 4 * h, 4 * h), 0.3, np.float32)),
                         Raster(np.full((1, 1, h, h), -0.2, np.float32)), np.zeros((4 * h, 4 * h), np.uint8))
    M = 4
    pred = predict_scene(net, const(3 * M), M)
    tile = pred[:4 * M, :4 * M]
    np.testing.assert_array_equal(pred, np.tile(tile, (3, 3)))
    # a scene that is not a whole number of windows is padded, labelled and cropped back
    odd = predict_scene(net, const(3 * M - 1), M)
    assert odd.shape == (4 * (3 * M - 1),) * 2
    np.testing.assert_array_equal(odd[:8 * M, :8 * M], pred[:8 * M, :8 * M])


def test_resample_and_stats(scenes, tmp_path, capsys):
    assert main(["resample", "--in", str(scenes[0] / "swir"), "--out", str(tmp_path / "up"),
                 "--pixel-size", "20", "--target", "5"]) == 0
    assert load_tensor(tmp_path / "up").shape == (1, 1, 64, 64)
    assert main(["stats", "--scenes", str(scenes[0]), "--out", str(tmp_path / "n.json")]) == 0
    assert json.loads((tmp_path / "n.json").read_text())["version"] == 1


def test_rf_commands(scenes, tmp_path):
    model = tmp_path / "f.json"
    assert main(["rf-train", "--scenes", str(scenes[0]), "--out", str(model), "--pixels", "500",
                 "--batches", "2", "--trees-per-batch", "3", "--seed", "1"]) == 0
    assert json.loads(model.read_text())["version"] == 1
    assert main(["rf-predict", "--model", str(model), "--scene", str(scenes[1]), "--out", str(tmp_path / "p")]) == 0
    assert load_tensor(tmp_path / "p").shape == (64, 64)
    model.write_text("{not json")
    assert main(["rf-predict", "--model", str(model), "--scene", str(scenes[1]), "--out", str(tmp_path / "p")]) == 2


def test_verify(capsys):
    assert main(["verify", "--seeds", "1", "--layers-only"]) == 0
    assert "pass" in capsys.readouterr().out
    assert main(["verify", "--seeds", "1", "--layers-only", "--tolerance", "-1"]) != 0
