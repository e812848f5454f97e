import csv

import numpy as np
import pytest

from sfa_lab.checkpoint import Checkpoint, Provenance, load_checkpoint, load_fisher, save_checkpoint
from sfa_lab.cli import main
from sfa_lab.config import ExperimentConfig
from sfa_lab.errors import ConfigError, DomainError
from sfa_lab.experiment import OUT_ENV, merge_command, run_experiment, run_sweep
from sfa_lab.merge import task_vector, ties_merge
from sfa_lab.nnet import MlpSpec, init_params

SMALL = """
name = t
stream.source = synthetic
stream.num_tasks = 2
stream.classes_per_task = 3
stream.dim = 6
stream.n_per_class = 30
stream.separation = 5
model.hidden = 12
strategy.kind = sfa
strategy.p = 0.25
strategy.beta = 0.5
sgd.batch_size = 16
sgd.steps_per_task = 40
run.seeds = 0,1
"""


@pytest.fixture
def cfg():
    return ExperimentConfig.parse(SMALL)


def read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_config_parsing_and_errors(cfg):
    assert cfg["strategy.p"] == 0.25 and cfg["model.hidden"] == (12,)
    assert cfg.strategy().config.cadence(40) == 10
    assert ExperimentConfig.parse("stream.groups = 0,2 | 1,3\n")["stream.groups"] == ((0, 2), (1, 3))
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.parse("strategy.beta_final = 0.3\n")
    assert e.value.key == "strategy.beta_final"
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.parse("sgd.batch_size = many\n")
    assert e.value.key == "sgd.batch_size"
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("name = a\nname = b\n")
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.parse("strategy.kind = sfa\nstrategy.beta = 2\n")
    assert e.value.key == "strategy.kind"
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("stream.source = idx\n")
    assert cfg.override("strategy.p", 0.5)["strategy.p"] == 0.5


def test_byte_identical_outputs(cfg, tmp_path):
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for run in ("t-sfa-s0", "t-sfa-s1"):
        for name in ("history.csv", "task0.sfac", "task1.sfac", "config.txt"):
            assert (a.parent / run / name).read_bytes() == (b.parent / run / name).read_bytes()


def test_summary_recomputable_from_history(cfg, tmp_path):
    summary = read(run_experiment(cfg, tmp_path))
    assert [r["run_id"] for r in summary] == ["t-sfa-s0", "t-sfa-s1"]
    for row in summary:
        hist = read(tmp_path / row["run_id"] / "history.csv")
        last = {}
        for h in hist:
            last[h["eval_task"]] = float(h["accuracy"])
        finals = [last["0"], last["1"]]
        assert abs(float(row["final_avg_accuracy"]) - np.mean(finals)) <= 1e-6
        assert abs(float(row["final_task0"]) - finals[0]) <= 1e-6
        # task 0's accuracy at its boundary step
        boundary = max(int(h["global_step"]) for h in hist if h["train_task"] == "0")
        at = [float(h["accuracy"]) for h in hist if h["global_step"] == str(boundary) and h["eval_task"] == "0"]
        assert abs(float(row["forgetting_task0"]) - (at[-1] - finals[0])) <= 1e-6


def test_checkpoint_chain(cfg, tmp_path):
    run_experiment(cfg, tmp_path, seeds=[0])
    c0 = load_checkpoint(tmp_path / "t-sfa-s0" / "task0.sfac")
    c1 = load_checkpoint(tmp_path / "t-sfa-s0" / "task1.sfac")
    assert c0.provenance.parents == () and c1.provenance.parents == (c0.digest,)
    assert c1.provenance.tasks == ("task0", "task1") and c1.provenance.strategy == "sfa"


def test_sweep_matches_single_runs(cfg, tmp_path):
    sweep = read(run_sweep(cfg, "p", ["1", "0.25"], tmp_path / "sw", seeds=[0]))
    single = read(run_experiment(cfg.override("strategy.p", "1"), tmp_path / "one", seeds=[0]))
    assert [r["value"] for r in sweep] == ["1", "0.25"]
    assert sweep[0]["final_avg_accuracy"] == single[0]["final_avg_accuracy"]
    assert sweep[0]["l2_to_anchor"] == single[0]["l2_to_anchor"]
    with pytest.raises(ConfigError):
        run_sweep(cfg, "gamma", ["1"], tmp_path)


def test_sweep_beta_endpoints(cfg, tmp_path):
    rows = read(run_sweep(cfg, "beta", ["0", "1"], tmp_path, seeds=[0]))
    seq = read(run_experiment(cfg.override("strategy.kind", "sequential"), tmp_path / "seq", seeds=[0]))
    assert rows[0]["final_avg_accuracy"] == seq[0]["final_avg_accuracy"]
    # beta = 1 pins the second task to the end of the first one
    assert float(rows[1]["l2_to_anchor"]) == 0.0


def test_parallel_jobs_match_serial(cfg, tmp_path):
    a = run_experiment(cfg, tmp_path / "a", jobs=1)
    b = run_experiment(cfg, tmp_path / "b", jobs=2)
    assert a.read_bytes() == b.read_bytes()


def test_out_precedence(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert run_experiment(cfg, seeds=[0]).parent == tmp_path / "env"
    assert run_experiment(cfg, tmp_path / "flag", seeds=[0]).parent == tmp_path / "flag"


def _ckpt(path, flat, spec):
    return save_checkpoint(Checkpoint(spec, flat, Provenance("x", (path.stem,))), path)


def test_merge_command(tmp_path):
    spec = MlpSpec((3, 4, 2))
    base = init_params(spec, 0).flat.astype(np.float32).astype(np.float64)
    rng = np.random.default_rng(1)
    tuned = [(base + rng.normal(size=len(base))).astype(np.float32).astype(np.float64) for _ in range(2)]
    pb = _ckpt(tmp_path / "base.sfac", base, spec)
    pt = [_ckpt(tmp_path / f"t{i}.sfac", t, spec) for i, t in enumerate(tuned)]

    out = load_checkpoint(merge_command([pb, pb], "average", tmp_path / "avg.sfac"))
    assert np.array_equal(out.flat, base)
    assert out.provenance.strategy == "merge:average"
    assert out.provenance.parents == (load_checkpoint(pb).digest,) * 2

    out = load_checkpoint(merge_command([pb, *pt], "task_arithmetic", tmp_path / "ta.sfac", [0.0, 0.0]))
    assert np.array_equal(out.flat, base)

    out = load_checkpoint(merge_command([pb, *pt], "ties", tmp_path / "ties.sfac", density=0.5))
    expect = ties_merge(base, [task_vector(base, t) for t in tuned], 0.5, [1.0, 1.0])
    assert np.array_equal(out.flat, expect.astype(np.float32).astype(np.float64))

    with pytest.raises(DomainError, match="Fisher"):
        merge_command([pb, *pt], "fisher", tmp_path / "f.sfac")
    with pytest.raises(DomainError):
        merge_command([pb, *pt], "average", tmp_path / "x.sfac", [1.0])
    other = _ckpt(tmp_path / "other.sfac", np.zeros(MlpSpec((3, 2)).num_params), MlpSpec((3, 2)))
    with pytest.raises(DomainError, match="architecture"):
        merge_command([pb, other], "average", tmp_path / "x.sfac")


def test_cli_end_to_end(tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text(SMALL + "run.out = " + str(tmp_path / "res") + "\n")
    assert main(["train", "--config", str(conf), "--seed", "3"]) == 0
    run_dir = tmp_path / "res" / "t-sfa-s3"
    assert (run_dir / "history.csv").exists()
    ck = run_dir / "task1.sfac"

    assert main(["eval", str(ck), "--config", str(conf)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-3] == "task,masked_accuracy,global_accuracy"
    assert [l.split(",")[0] for l in lines[-2:]] == ["task0", "task1"]

    for k in (0, 1):
        assert main(["fisher", str(run_dir / f"task{k}.sfac"), "--config", str(conf), "--task", str(k)]) == 0
        assert load_fisher(run_dir / f"task{k}.sfac") is not None
    merged = tmp_path / "m.sfac"
    assert main(["merge", "--mode", "fisher", str(run_dir / "task0.sfac"), str(ck), "-o", str(merged)]) == 0
    assert load_checkpoint(merged).provenance.strategy == "merge:fisher"

    assert main(["sweep", "--config", str(conf), "--axis", "beta", "--values", "0,0.5", "--seed", "0"]) == 0
    assert (tmp_path / "res" / "sweep.csv").exists()

    bad = tmp_path / "bad.conf"
    bad.write_text("strategy.beta_final = 1\n")
    assert main(["train", "--config", str(bad)]) == 1
    assert "beta_final" in capsys.readouterr().err
    ck.write_bytes(b"")
    assert main(["eval", str(ck), "--config", str(conf)]) == 1
