import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from repdib import cli
from repdib.cli import main, summarize_run
from repdib.metrics import read_embeddings, read_matrix_csv
from repdib.pipeline import RunConfig, Trainer

from conftest import tiny_config


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    tiny_config().save(path)
    return path


def run_dir_of(out, **kw):
    return out / tiny_config(**kw).run_name


def test_run_all_writes_artifacts(tmp_path, cfg_file):
    out = tmp_path / "runs"
    assert main(["run-all", "--config", str(cfg_file), "--out", str(out)]) == 0
    d = run_dir_of(out)
    for name in ("metrics.csv", "eval.csv", "config.json", "trajectory.csv", "checkpoint.bin",
                 "checkpoint_stage1.bin", "checkpoint_stage2.bin", "learning_curves.svg",
                 "eval_returns.svg", "coverage.svg"):
        assert (d / name).exists(), name
    data = json.loads((d / "config.json").read_text())
    assert set(data) == set(RunConfig.field_names())
    assert RunConfig.from_dict(data) == tiny_config()
    assert (d / "learning_curves.svg").read_text().lstrip().startswith("<?xml")


def test_rerun_is_noop_and_force_redoes(tmp_path, cfg_file, capsys):
    out = tmp_path / "runs"
    main(["run-all", "--config", str(cfg_file), "--out", str(out)])
    d = run_dir_of(out)
    stamp = (d / "checkpoint.bin").stat().st_mtime_ns
    metrics = (d / "metrics.csv").read_bytes()
    assert main(["run-all", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert "already complete" in capsys.readouterr().out
    assert (d / "checkpoint.bin").stat().st_mtime_ns == stamp
    assert main(["run-all", "--config", str(cfg_file), "--out", str(out), "--force"]) == 0
    # a forced redo starts from a clean directory, so logs are not appended twice
    assert (d / "metrics.csv").read_bytes() == metrics


def test_stagewise_matches_run_all(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run-all", "--config", str(cfg_file), "--out", str(a)])
    for cmd in ("pretrain-bottleneck", "pretrain-encoder", "finetune"):
        assert main([cmd, "--config", str(cfg_file), "--out", str(b)]) == 0
    for name in ("metrics.csv", "eval.csv", "trajectory.csv"):
        assert (run_dir_of(a) / name).read_bytes() == (run_dir_of(b) / name).read_bytes(), name


def test_missing_checkpoint_names_path(tmp_path, cfg_file, capsys):
    out = tmp_path / "runs"
    assert main(["finetune", "--config", str(cfg_file), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    expected = run_dir_of(out) / "checkpoint_stage2.bin"
    assert "stage 2 checkpoint not found" in err and str(expected) in err


def test_unknown_key_rejected(tmp_path, capsys):
    assert main(["run-all", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "unknown config key 'bogus'" in err and "batch_size" in err


def test_set_and_seed_precedence(tmp_path, cfg_file):
    ns = cli.build_parser().parse_args(["eval", "--config", str(cfg_file), "--set", "groups=2",
                                        "--set", "seed=4", "--seed", "9"])
    cfg = cli.resolve_config(ns)
    assert cfg.groups == 2 and cfg.seed == 9 and cfg.batch_size == 16


def test_repdib_out_env(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("REPDIB_OUT", str(tmp_path / "envout"))
    assert main(["pretrain-bottleneck", "--config", str(cfg_file)]) == 0
    assert (run_dir_of(tmp_path / "envout") / "checkpoint_stage1.bin").exists()


def test_analysis_commands(tmp_path, cfg_file):
    out = tmp_path / "runs"
    base = ["--config", str(cfg_file), "--out", str(out)]
    main(["run-all"] + base)
    d = run_dir_of(out)
    assert main(["eval"] + base) == 0
    with open(d / "eval_final.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert main(["export-embeddings"] + base) == 0
    cells, codes, z = read_embeddings(d / "embeddings.csv")
    assert len(cells) == 36 and codes.shape[1] == 4
    assert (d / "codebook.csv").exists()
    assert main(["distance-map", "--anchor", "0,0"] + base) == 0
    m = read_matrix_csv(d / "distance_map.csv")
    assert m.shape == (6, 6) and m[0, 0] == 0.0
    t = Trainer.load(d / "checkpoint.bin")
    from repdib.metrics import distance_map
    np.testing.assert_array_equal(m, distance_map(t.model, t.pre_spec, (0, 0)))
    assert main(["plot", "--force"] + base) == 0
    assert (d / "distance_map.svg").exists()


def test_ablate_summary_matches_runs(tmp_path, cfg_file):
    out = tmp_path / "abl"
    rc = main(["ablate", "use_vib=true,false", "--seeds", "0,1", "--config", str(cfg_file), "--out", str(out)])
    assert rc == 0
    with open(out / "ablate_summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["use_vib"] for r in rows] == ["true", "false"]
    for row in rows:
        runs = []
        for seed in (0, 1):
            cfg = tiny_config(use_vib=row["use_vib"] == "true", seed=seed)
            run_dir = out / "ablate" / f"use_vib-{row['use_vib']}" / cfg.run_name
            runs.append(summarize_run(run_dir, cfg))
            # recompute the final-eval mean directly from eval.csv
            with open(run_dir / "eval.csv", newline="") as fh:
                ev = list(csv.DictReader(fh))
            last = max(int(r["step"]) for r in ev)
            assert runs[-1]["return"] == np.mean([float(r["return"]) for r in ev if int(r["step"]) == last])
        assert int(row["n_seeds"]) == 2
        assert float(row["mean_return"]) == pytest.approx(np.mean([r["return"] for r in runs]))
        assert float(row["std_return"]) == pytest.approx(np.std([r["return"] for r in runs]))
        assert float(row["coverage"]) == pytest.approx(np.mean([r["coverage"] for r in runs]))


def test_ablate_guard(tmp_path, capsys):
    rc = main(["ablate", "groups=1,2,4,8,16", "codes=2,4,8,16", "--seeds", "0,1,2,3",
               "--out", str(tmp_path)])
    assert rc == 2
    assert "80 runs" in capsys.readouterr().err
    assert not (tmp_path / "ablate").exists()


def test_console_script_entry(tmp_path):
    env = dict(os.environ, REPDIB_OUT=str(tmp_path))
    res = subprocess.run([sys.executable, "-m", "repdib", "finetune", "--set", "stage3_end=20000"],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 2
    assert "checkpoint not found" in res.stderr
