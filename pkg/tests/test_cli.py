import json
import shutil

import numpy as np
import pytest
from PIL import Image

from awcc.cli import main
from awcc.config import RunConfig
from awcc.evaluation import load_density
from awcc.training import init_train_state, save_checkpoint

from conftest import zero_biases


def write_config(path, **kw):
    base = {"preset": "tiny", "crop_size": 64, "steps": 4, "seed": 0,
            "lr": 1e-3, "out_dir": str(path.parent / "run")}
    base.update(kw)
    path.write_text(json.dumps(base), encoding="utf-8")
    return path


def read_log(out_dir):
    lines = (out_dir / "train_log.jsonl").read_text().strip().splitlines()
    return [json.loads(line) for line in lines]


@pytest.fixture()
def trained_checkpoint(tmp_path, synthetic_dataset):
    cfg = write_config(tmp_path / "cfg.json", annotations=str(synthetic_dataset),
                       steps=4, out_dir=str(tmp_path / "run"))
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp_path / "run" / "final.ckpt"


@pytest.fixture()
def zero_bias_checkpoint(tmp_path):
    cfg = RunConfig.from_dict({"preset": "tiny", "crop_size": 64})
    state = init_train_state(cfg)
    zero_biases(state.model)
    path = tmp_path / "zb.ckpt"
    save_checkpoint(state, path)
    return path


class TestTrain:
    def test_smoke(self, tmp_path, synthetic_dataset, capsys):
        cfg = write_config(tmp_path / "cfg.json", annotations=str(synthetic_dataset),
                           steps=10, out_dir=str(tmp_path / "run"))
        assert main(["train", "--config", str(cfg)]) == 0
        log = read_log(tmp_path / "run")
        assert len(log) == 10
        assert [entry["step"] for entry in log] == list(range(1, 11))
        for entry in log:
            assert set(entry) == {"step", "l_cc", "l_con", "l_cp", "total", "queue_len"}
        assert (tmp_path / "run" / "final.ckpt").exists()
        stdout_lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
        assert len(stdout_lines) == 10

    def test_unknown_key_exit_2(self, tmp_path, synthetic_dataset, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"preset": "tiny", "annotatoins": "x"}))
        assert main(["train", "--config", str(cfg)]) == 2
        assert "annotatoins" in capsys.readouterr().err

    def test_missing_annotations_exit_3(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", annotations=str(tmp_path / "no.jsonl"))
        assert main(["train", "--config", str(cfg)]) == 3

    def test_resume_runs_remaining_steps_only(self, tmp_path, synthetic_dataset):
        out = tmp_path / "run"
        cfg_half = write_config(tmp_path / "half.json", annotations=str(synthetic_dataset),
                                steps=6, out_dir=str(out))
        assert main(["train", "--config", str(cfg_half)]) == 0
        assert [e["step"] for e in read_log(out)] == list(range(1, 7))

        cfg_full = write_config(tmp_path / "full.json", annotations=str(synthetic_dataset),
                                steps=12, out_dir=str(out))
        assert main(["train", "--config", str(cfg_full),
                     "--resume", str(out / "final.ckpt")]) == 0
        assert [e["step"] for e in read_log(out)] == list(range(1, 13))

    def test_data_root_env(self, tmp_path, synthetic_dataset, monkeypatch):
        monkeypatch.setenv("AWCC_DATA_ROOT", str(synthetic_dataset.parent))
        cfg = write_config(tmp_path / "cfg.json", annotations=synthetic_dataset.name,
                           steps=2, out_dir=str(tmp_path / "run"))
        assert main(["train", "--config", str(cfg)]) == 0

    def test_contrast_weight_zero_removes_term_from_trace(self, tmp_path, synthetic_dataset):
        cfg = write_config(tmp_path / "cfg.json", annotations=str(synthetic_dataset),
                           steps=5, out_dir=str(tmp_path / "run"), contrast_weight=0.0)
        assert main(["train", "--config", str(cfg)]) == 0
        for entry in read_log(tmp_path / "run"):
            assert entry["l_con"] is None
            assert entry["l_cp"] is not None

    def test_compact_weight_zero_removes_term_from_trace(self, tmp_path, synthetic_dataset):
        cfg = write_config(tmp_path / "cfg.json", annotations=str(synthetic_dataset),
                           steps=5, out_dir=str(tmp_path / "run"), compact_weight=0.0)
        assert main(["train", "--config", str(cfg)]) == 0
        for entry in read_log(tmp_path / "run"):
            assert entry["l_cp"] is None


class TestEvaluate:
    def test_report_structure(self, trained_checkpoint, synthetic_dataset, capsys):
        assert main(["evaluate", "--checkpoint", str(trained_checkpoint),
                     "--annotations", str(synthetic_dataset)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["overall"]["num_images"] == 8
        assert len(report["per_image"]) == 8

    def test_subset_grouping(self, trained_checkpoint, synthetic_dataset, capsys):
        assert main(["evaluate", "--checkpoint", str(trained_checkpoint),
                     "--annotations", str(synthetic_dataset),
                     "--subset", "weather"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report["subsets"]) == {"clear", "adverse"}
        assert report["subsets"]["clear"]["num_images"] == 2
        assert report["subsets"]["adverse"]["num_images"] == 6

    def test_missing_checkpoint_exit_2(self, tmp_path, synthetic_dataset):
        assert main(["evaluate", "--checkpoint", str(tmp_path / "absent.ckpt"),
                     "--annotations", str(synthetic_dataset)]) == 2


class TestPredict:
    def test_zero_image_zero_bias_prints_zero(self, tmp_path, zero_bias_checkpoint, capsys):
        img = tmp_path / "black.png"
        Image.fromarray(np.zeros((120, 96, 3), dtype=np.uint8)).save(img)
        assert main(["predict", "--checkpoint", str(zero_bias_checkpoint),
                     "--image", str(img)]) == 0
        assert capsys.readouterr().out.strip() == "0.0"

    def test_density_file_dims_with_padding(self, tmp_path, zero_bias_checkpoint, capsys):
        img = tmp_path / "big.png"
        Image.fromarray(np.zeros((500, 500, 3), dtype=np.uint8)).save(img)
        out = tmp_path / "density.bin"
        assert main(["predict", "--checkpoint", str(zero_bias_checkpoint),
                     "--image", str(img), "--out", str(out)]) == 0
        grid = load_density(out)
        assert grid.shape == (63, 63)
        capsys.readouterr()

    def test_render_flag(self, tmp_path, zero_bias_checkpoint, capsys):
        img = tmp_path / "img.png"
        Image.fromarray((np.random.default_rng(0).random((64, 64, 3)) * 255)
                        .astype(np.uint8)).save(img)
        render = tmp_path / "render.png"
        assert main(["predict", "--checkpoint", str(zero_bias_checkpoint),
                     "--image", str(img), "--render", str(render)]) == 0
        assert render.exists()
        capsys.readouterr()

    def test_unreadable_image_exit_3(self, tmp_path, zero_bias_checkpoint):
        assert main(["predict", "--checkpoint", str(zero_bias_checkpoint),
                     "--image", str(tmp_path / "missing.png")]) == 3


class TestProbe:
    def test_default_topk_is_four(self, trained_checkpoint, synthetic_dataset, capsys):
        assert main(["probe", "--checkpoint", str(trained_checkpoint),
                     "--annotations", str(synthetic_dataset),
                     "--query-id", "img0.png"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert len(out["neighbors"]) == 4
        assert all({"image_id", "distance", "weather"} <= set(n)
                   for n in out["neighbors"])
        dists = [n["distance"] for n in out["neighbors"]]
        assert dists == sorted(dists)

    def test_duplicate_image_at_distance_zero(self, tmp_path, trained_checkpoint,
                                              synthetic_dataset, capsys):
        root = synthetic_dataset.parent
        dup_dir = tmp_path / "dup"
        dup_dir.mkdir()
        for i in range(4):
            shutil.copy(root / f"img{i}.png", dup_dir / f"img{i}.png")
        shutil.copy(root / "img0.png", dup_dir / "twin.png")
        lines = [json.dumps({"image": f"img{i}.png", "points": []}) for i in range(4)]
        lines.append(json.dumps({"image": "twin.png", "points": []}))
        ann = dup_dir / "ann.jsonl"
        ann.write_text("\n".join(lines))
        assert main(["probe", "--checkpoint", str(trained_checkpoint),
                     "--annotations", str(ann), "--query-id", "img0.png",
                     "--topk", "1"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["neighbors"][0]["image_id"] == "twin.png"
        assert abs(out["neighbors"][0]["distance"]) < 1e-6

    def test_absent_id_exit_2(self, trained_checkpoint, synthetic_dataset):
        assert main(["probe", "--checkpoint", str(trained_checkpoint),
                     "--annotations", str(synthetic_dataset),
                     "--query-id", "ghost.png"]) == 2

    def test_topk_too_large_exit_2(self, trained_checkpoint, synthetic_dataset):
        assert main(["probe", "--checkpoint", str(trained_checkpoint),
                     "--annotations", str(synthetic_dataset),
                     "--query-id", "img0.png", "--topk", "8"]) == 2


class TestLabelConditionedVariant:
    def test_trains_and_evaluates(self, tmp_path, synthetic_dataset, capsys):
        cfg = write_config(tmp_path / "cfg.json", annotations=str(synthetic_dataset),
                           steps=5, out_dir=str(tmp_path / "run"),
                           label_conditioned=True)
        assert main(["train", "--config", str(cfg)]) == 0
        log = read_log(tmp_path / "run")
        assert len(log) == 5
        assert all(np.isfinite(e["total"]) for e in log)
        assert main(["evaluate", "--checkpoint", str(tmp_path / "run" / "final.ckpt"),
                     "--annotations", str(synthetic_dataset)]) == 0
        capsys.readouterr()
