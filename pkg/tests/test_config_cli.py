import json

import numpy as np
import pytest

from splatseg.cli import COMMANDS, main, parse_overrides, UsageError
from splatseg.config import (SEED_ENV, ConfigError, RunConfig, build_config, dump_config, parse_text,
                             read_config_file)
from splatseg.imageio import read_pfm, read_pgm


# -- config files ---------------------------------------------------------------------

def test_parse_text_comments_and_blanks():
    text = "# header\n\nseed = 3   # trailing\n  width=64\nscenes = a, b ,c\n"
    assert parse_text(text) == {"seed": "3", "width": "64", "scenes": "a, b ,c"}


def test_parse_text_reports_line_number():
    with pytest.raises(ConfigError, match=r"x\.cfg:2"):
        parse_text("seed = 1\njust words\n", "x.cfg")


def test_coercion_of_each_type():
    cfg = build_config({"seed": "7", "sem_lr": "2e-3", "use_z": "off", "skips": "YES",
                        "holdout": "3, 7", "scenes": "a,b", "mode": "joint"})
    assert cfg.seed == 7 and cfg.sem_lr == 2e-3
    assert cfg.use_z is False and cfg.skips is True
    assert cfg.holdout == [3, 7] and cfg.scenes == ["a", "b"] and cfg.mode == "joint"
    assert build_config({"seed": "none"}).seed is None


def test_overrides_win_and_dashes_allowed():
    cfg = build_config({"width": "64"}, {"width": "32", "sem-lr": "0.5"})
    assert cfg.width == 32 and cfg.sem_lr == 0.5


def test_unknown_key_suggests_close_match():
    with pytest.raises(ConfigError, match="did you mean 'sem_lr'"):
        build_config({"sem_lrr": "1"})


@pytest.mark.parametrize("kv", [{"mode": "sideways"}, {"width": "30"}, {"tau": "0"}, {"n_classes": "1"},
                                {"overlap_lo": "0.9"}, {"eps_lsr": "1.0"}, {"use_z": "maybe"},
                                {"holdout": "1,x"}, {"ablate_rows": "full,no_foo"}, {"k": "0"}])
def test_invalid_values_rejected(kv):
    with pytest.raises(ConfigError):
        build_config(kv)


def test_seed_falls_back_to_environment(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    assert RunConfig().resolved_seed() == 42
    assert RunConfig(seed=5).resolved_seed() == 5
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError, match=SEED_ENV):
        RunConfig().resolved_seed()
    monkeypatch.delenv(SEED_ENV)
    assert RunConfig().resolved_seed() == 0


def test_dump_round_trip(tmp_path):
    cfg = build_config({"holdout": "1,2", "use_image": "false", "scenes": "p,q", "sem_lr": "0.003"})
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert build_config(read_config_file(path)) == cfg


def test_manifest_json_is_a_config(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"command": "x", "config": {"width": 48, "holdout": [1]}}))
    cfg = build_config(read_config_file(path))
    assert cfg.width == 48 and cfg.holdout == [1]


def test_parse_overrides_forms():
    assert parse_overrides(["--a", "1", "--b-c=2"]) == {"a": "1", "b_c": "2"}
    with pytest.raises(UsageError):
        parse_overrides(["--a"])
    with pytest.raises(UsageError):
        parse_overrides(["stray"])


# -- command line ---------------------------------------------------------------------

def test_unknown_command_exit_one(capsys):
    assert main(["trian-vi"]) == 1
    assert "did you mean 'train-vi'" in capsys.readouterr().err


def test_unknown_key_exit_one(capsys, tmp_path):
    assert main(["mine-pairs", "--scen", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "usage error" in err and "did you mean" in err


def test_missing_files_exit_two(capsys, tmp_path):
    assert main(["mine-pairs", "--scene", str(tmp_path / "nope"), "--out_dir", str(tmp_path / "o")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_missing_required_argument_is_usage(tmp_path):
    assert main(["eval", "--out_dir", str(tmp_path)]) == 1
    assert set(COMMANDS) >= {"make-synthetic", "train-vi", "train-sem", "eval", "bench"}


TINY = ["--hidden", "8", "--layers", "1", "--k", "4", "--feat_dim", "4"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """make-synthetic then train-vi then train-sem on a very small problem."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "scene"
    assert main(["make-synthetic", "--out_dir", str(data), "--n_classes", "3", "--count", "600",
                 "--n_views", "8", "--width", "32", "--height", "32", "--seed", "1"]) == 0
    vi = root / "vi"
    assert main(["train-vi", "--scene", str(data), "--out_dir", str(vi), "--vi_max_steps", "3",
                 "--epochs", "1", "--n_corr", "128", "--seed", "1", *TINY]) == 0
    sem = root / "sem"
    assert main(["train-sem", "--scene", str(data), "--out_dir", str(sem), "--encoder",
                 str(vi / "encoder.ckpt"), "--sem_steps", "3", "--n_classes", "3", "--c", "4",
                 "--holdout", "3,7", "--seed", "1", *TINY]) == 0
    return root, data, vi, sem


def test_synthetic_dataset_layout(pipeline):
    _, data, *_ = pipeline
    for sub, ext in (("images", "ppm"), ("masks", "pgm"), ("depth", "pfm")):
        assert sorted(p.name for p in (data / sub).iterdir()) == [f"{j:03d}.{ext}" for j in range(8)]
    assert (data / "scene.ply").is_file() and (data / "cameras.json").is_file()


def test_manifest_fields(pipeline):
    _, data, vi, _ = pipeline
    m = json.loads((vi / "manifest_train-vi.json").read_text())
    for key in ("command", "argv", "config", "seed", "git_describe", "version", "outputs", "metrics"):
        assert key in m
    assert m["command"] == "train-vi" and m["seed"] == 1 and m["metrics"]["steps"] == 3
    assert (vi / "vi_loss.csv").read_text().startswith("step,loss_per_pair\n")
    assert any((vi / "checkpoints").iterdir())


def test_rerun_from_manifest_is_byte_identical(pipeline, tmp_path):
    _, _, vi, _ = pipeline
    again = tmp_path / "again"
    assert main(["train-vi", "--config", str(vi / "manifest_train-vi.json"), "--out_dir", str(again)]) == 0
    for name in ("encoder.ckpt", "vi_loss.csv"):
        assert (again / name).read_bytes() == (vi / name).read_bytes()


def test_mine_pairs_prints_overlaps(pipeline, tmp_path, capsys):
    _, data, *_ = pipeline
    assert main(["mine-pairs", "--scene", str(data), "--out_dir", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.split("\n")
    pairs = [ln.split() for ln in lines if ln.strip()]
    assert pairs
    for m, n, ov in pairs:
        assert int(m) < int(n) and 0.3 <= float(ov) <= 0.8


def test_eval_of_ground_truth_is_perfect(pipeline, tmp_path, capsys):
    _, data, *_ = pipeline
    assert main(["eval", "--scene", str(data), "--pred_dir", str(data / "masks"), "--n_classes", "3",
                 "--out_dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "1.000" in out
    m = json.loads((tmp_path / "manifest_eval.json").read_text())
    assert m["metrics"]["mIoU"] == 1.0


def test_eval_model_runs_encoder_once(pipeline, tmp_path):
    _, data, _, sem = pipeline
    assert main(["eval", "--scene", str(data), "--model", str(sem / "model.ckpt"), "--n_classes", "3",
                 "--eval_split", "all", "--out_dir", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest_eval.json").read_text())
    assert m["metrics"]["encoder_calls"] == 1
    assert 0.0 <= m["metrics"]["mIoU"] <= 1.0
    assert (tmp_path / "metrics.csv").read_text().count("\n") == 8 + 2


def test_bench_and_render_outputs(pipeline, tmp_path):
    _, data, _, sem = pipeline
    model = str(sem / "model.ckpt")
    b = tmp_path / "b"
    assert main(["bench", "--scene", str(data), "--model", model, "--eval_split", "all",
                 "--warmup_frames", "1", "--bench_frames", "3", "--out_dir", str(b)]) == 0
    assert json.loads((b / "manifest_bench.json").read_text())["metrics"]["encoder_calls"] == 1
    assert json.loads((b / "bench.json").read_text())["threads=1"]["frames"] == 3
    r = tmp_path / "r"
    assert main(["render", "--scene", str(data), "--model", model, "--holdout", "3,7",
                 "--out_dir", str(r)]) == 0
    assert sorted(p.name for p in (r / "pred").iterdir()) == ["003.pgm", "007.pgm"]
    mask = read_pgm(r / "pred" / "003.pgm")
    logits = np.stack([read_pfm(r / "logits" / f"003_c{c}.pfm") for c in range(3)], -1)
    assert np.array_equal(mask, np.argmax(logits, -1))


def test_model_mismatch_is_data_error(pipeline, tmp_path, capsys):
    _, data, vi, _ = pipeline
    assert main(["train-sem", "--scene", str(data), "--encoder", str(vi / "encoder.ckpt"),
                 "--sem_steps", "1", "--out_dir", str(tmp_path)]) == 2
    assert "does not match" in capsys.readouterr().err
