import inspect
import json
import os

import numpy as np
import pytest

from topicsynth import pipeline
from topicsynth.cli import main
from topicsynth.core import read_sequences
from topicsynth.pipeline import (
    ConfigError,
    PipelineConfig,
    RunManifest,
    run_pipeline,
    verify_manifest,
)

TINY = {
    "taxonomy_size": 10, "users": 300, "types": 4, "epochs": 20, "batch_size": 256,
    "lr": 0.05, "queries": 100, "trials": 2, "archetypes": 10, "eval_every": 10,
}


def tiny(tmp_path, name="run", **extra):
    return PipelineConfig.from_dict({**TINY, "out_dir": str(tmp_path / name), **extra})


def tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            full = os.path.join(base, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = PipelineConfig.from_dict({**TINY, "out_dir": str(root / "run")})
    return cfg, run_pipeline(cfg)


def test_pipeline_runs_all_stages(tiny_run):
    cfg, man = tiny_run
    assert [s.name for s in man.stages] == ["simulate", "extract-stats", "fit", "sample", "attack", "validate"]
    for rel in ("population.jsonl", "traces.jsonl", "stats/stats.json", "model.bin", "train_log.csv",
                "synthetic.jsonl", "attack/real_hamming.json", "attack/synthetic_asymmetric.json",
                "validation/summary.json", "manifest.json"):
        assert os.path.exists(os.path.join(cfg.out_dir, rel)), rel
    assert len(read_sequences(os.path.join(cfg.out_dir, "synthetic.jsonl"))) == cfg.users
    assert all(s.wall_time is None for s in man.stages)
    assert man.stages[1].info["kind"] == "dp"
    assert verify_manifest(os.path.join(cfg.out_dir, "manifest.json")) == []


def test_pipeline_replay_is_byte_identical(tiny_run, tmp_path):
    cfg, _ = tiny_run
    again = PipelineConfig.from_dict({**cfg.to_dict(), "out_dir": str(tmp_path / "again")})
    run_pipeline(again)
    assert tree_bytes(cfg.out_dir) == tree_bytes(again.out_dir)


def test_manifest_detects_single_byte_corruption(tiny_run, tmp_path):
    cfg, _ = tiny_run
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(cfg.out_dir, copy)
    target = copy / "stats" / "q_single.csv"
    data = bytearray(target.read_bytes())
    data[-2] ^= 0x01
    target.write_bytes(bytes(data))
    assert verify_manifest(str(copy / "manifest.json")) == ["stats/q_single.csv"]


def test_manifest_roundtrip(tiny_run):
    cfg, man = tiny_run
    back = RunManifest.read(os.path.join(cfg.out_dir, "manifest.json"))
    assert back.to_dict() == json.loads(json.dumps(man.to_dict()))
    assert "out_dir" not in back.config


def test_config_rejects_unknown_and_invalid(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"userz": 5})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"p": 1.5})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"weeks": 1})
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        PipelineConfig.from_json(bad)


def test_config_json_with_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    cfg = PipelineConfig.from_json(path, seed=7)
    assert cfg.seed == 7 and cfg.users == 300
    assert cfg.train_config().seed != PipelineConfig.from_json(path, seed=8).train_config().seed


def test_boundary_audit_of_fit_and_sample_sources():
    # Neither stage may read sequence files.
    for fn in (pipeline.fit_stage, pipeline.sample_stage, pipeline.load_private_statistics):
        src = inspect.getsource(fn)
        assert "read_sequences" not in src and "GroundTruthPopulation" not in src


# --------------------------------------------------------------------------
# CLI


def cli(*args):
    return main([str(a) for a in args])


def tiny_flags():
    return ["--taxonomy-size", 10, "--k", 5]


def test_cli_stage_by_stage(tmp_path, capsys):
    pop, stats, model, synth = tmp_path / "pop.jsonl", tmp_path / "stats", tmp_path / "m.bin", tmp_path / "s.jsonl"
    assert cli("simulate", "--users", 200, "--archetypes", 5, *tiny_flags(), "--weeks", 3,
               "--out-sequences", pop, "--out-traces", tmp_path / "tr.jsonl") == 0
    assert cli("extract-stats", "--in-sequences", pop, *tiny_flags(), "--out-dir", stats) == 0
    assert cli("fit", "--stats-dir", stats, "--out-model", model, *tiny_flags(), "--weeks", 3,
               "--types", 3, "--epochs", 5, "--batch-size", 64, "--lr", 0.05,
               "--target-loss", 1e-30, "--eval-size", 50) == 0
    assert (tmp_path / "m.bin.log.csv").read_text().startswith("epoch,batch_loss,objective\n")
    assert cli("sample", "--model", model, "--n", 50, "--out-sequences", synth) == 0
    capsys.readouterr()
    assert cli("attack", "--in-sequences", synth, "--attack", "hamming", *tiny_flags(), "--weeks", 3,
               "--queries", 50, "--trials", 2, "--out-report", tmp_path / "r.json") == 0
    assert json.loads(capsys.readouterr().out)["attack"] == "hamming"
    assert cli("validate", "--in-a", pop, "--in-b", synth, "--stats-dir", stats, *tiny_flags(),
               "--weeks", 3, "--out-dir", tmp_path / "val") == 0
    summary = json.loads(capsys.readouterr().out)
    assert {"stationarity_min", "distinct_topics_pearson", "abs_error_below_0.005"} <= set(summary)


def test_cli_dp_boundary_exit_code(tmp_path):
    pop = tmp_path / "pop.jsonl"
    assert cli("simulate", "--users", 50, *tiny_flags(), "--out-sequences", pop) == 0
    assert cli("fit", "--stats-dir", pop, "--out-model", tmp_path / "m.bin", *tiny_flags()) == 4
    assert cli("sample", "--model", pop, "--n", 5, "--out-sequences", tmp_path / "s.jsonl") == 4
    # A copy without its sidecar is still recognised by content.
    bare = tmp_path / "bare.jsonl"
    bare.write_bytes(pop.read_bytes())
    assert cli("fit", "--stats-dir", bare, "--out-model", tmp_path / "m.bin", *tiny_flags()) == 4
    assert cli("sample", "--model", bare, "--n", 5, "--out-sequences", tmp_path / "s.jsonl") == 4
    assert not (tmp_path / "m.bin").exists() and not (tmp_path / "s.jsonl").exists()


def test_cli_noiseless_statistics_need_opt_in(tmp_path):
    pop, stats = tmp_path / "pop.jsonl", tmp_path / "stats"
    assert cli("simulate", "--users", 50, *tiny_flags(), "--out-sequences", pop) == 0
    assert cli("extract-stats", "--in-sequences", pop, "--no-noise", *tiny_flags(), "--out-dir", stats) == 0
    args = ["fit", "--stats-dir", stats, "--out-model", tmp_path / "m.bin", *tiny_flags(),
            "--types", 2, "--epochs", 1]
    assert cli(*args) == 4
    assert cli(*args, "--allow-non-private") == 0


def test_cli_corrupt_checkpoint_is_stage_error(tmp_path):
    bad = tmp_path / "m.bin"
    bad.write_bytes(b"not a checkpoint\n\x00\x01")
    assert cli("sample", "--model", bad, "--n", 5, "--out-sequences", tmp_path / "s.jsonl") == 3


def test_cli_sample_zero_users(tmp_path):
    pop, stats, model = tmp_path / "pop.jsonl", tmp_path / "stats", tmp_path / "m.bin"
    cli("simulate", "--users", 40, *tiny_flags(), "--out-sequences", pop)
    cli("extract-stats", "--in-sequences", pop, *tiny_flags(), "--out-dir", stats)
    cli("fit", "--stats-dir", stats, "--out-model", model, *tiny_flags(), "--types", 2, "--epochs", 1)
    out = tmp_path / "empty.jsonl"
    assert cli("sample", "--model", model, "--n", 0, "--out-sequences", out) == 0
    assert out.read_bytes() == b""
    meta = json.loads((tmp_path / "empty.jsonl.manifest.json").read_text())
    assert meta["kind"] == "synthetic" and meta["users"] == 0


def test_cli_config_errors(tmp_path):
    assert cli("simulate", "--users", "many", "--out-sequences", tmp_path / "x") == 2
    assert cli("simulate", "--p", 2, "--out-sequences", tmp_path / "x") == 2
    assert cli("fit", "--stats-dir", tmp_path, "--out-model", tmp_path / "m.bin") == 2
    cfg = tmp_path / "c.json"
    cfg.write_text('{"unknown_key": 1}')
    assert cli("pipeline", "--config", cfg) == 2
    assert cli("--log-level", "LOUD", "pipeline", "--config", cfg) == 2


def test_cli_pipeline_replay(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "users": 150, "epochs": 5, "queries": 40}))
    assert cli("pipeline", "--config", cfg, "--out-dir", tmp_path / "a", "--seed", 3) == 0
    assert cli("pipeline", "--config", cfg, "--out-dir", tmp_path / "b", "--seed", 3) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert cli("pipeline", "--config", cfg, "--out-dir", tmp_path / "c", "--seed", 4) == 0
    a = np.array([json.loads(l)["sets"] for l in open(tmp_path / "a" / "population.jsonl")])
    c = np.array([json.loads(l)["sets"] for l in open(tmp_path / "c" / "population.jsonl")])
    assert not np.array_equal(a, c)
