import dataclasses
import os

import numpy as np
import pytest

from gradplan.cli import main
from gradplan.config import ExperimentConfig, PlannerConfig, TrainConfig
from gradplan.harness import (CSV_HEADER, AblationReport, EvalRow, RunError, RunRecord, ablate_candidates,
                              compare_planners, competition_ranks, load_actor_critic, read_csv, run_seed,
                              run_training)
from gradplan.world_model import load_rssm

SMALL_PLANNER = PlannerConfig(horizon=12, iterations=5, candidates=50)
TINY_TRAIN = TrainConfig(belief_size=4, state_size=2, hidden_size=4, embedding_size=4, batch_size=2,
                         chunk_length=4, collect_interval=2, imagination_horizon=3)


def _lqr(**kw):
    base = dict(env="lqr", planner="grad-mpc", model="true", seed_episodes=1, total_steps=12 * 3, eval_episodes=3,
                eval_interval=1, seeds=(0,), planner_cfg=SMALL_PLANNER, wall_clock=False)
    base.update(kw)
    return ExperimentConfig(**base)


def test_csv_format_and_roundtrip(tmp_path):
    rec = RunRecord([EvalRow(0, 5, 60, -1.25, 0.1, 0.0), EvalRow(1, 5, 60, 1 / 3, 0.0, 2.5)])
    text = rec.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert "0.33333333333333331" in text
    (tmp_path / "r.csv").write_text(text)
    assert read_csv(tmp_path / "r.csv") == rec


def test_check_flags_bad_records():
    good = RunRecord([EvalRow(0, 1, 10, 0.0, 0.0, 0.0), EvalRow(0, 2, 20, 0.0, 0.0, 0.0)])
    assert good.check() == []
    bad = RunRecord([EvalRow(0, 1, 10, 0.0, 0.0, 0.0), EvalRow(0, 2, 10, float("nan"), 0.0, 0.0)])
    assert len(bad.check()) == 2


def test_zero_planner_episodes():
    cfg = _lqr(seed_episodes=2, total_steps=24)
    rec = run_training(cfg)
    assert [(r.episode, r.steps) for r in rec.rows] == [(2, 24)]
    assert rec.check() == []


def test_step_accounting():
    cfg = _lqr(env="point_reacher", episode_length=40, total_steps=40 * 4, eval_interval=2, seed_episodes=1,
               eval_episodes=1, planner_cfg=PlannerConfig(horizon=3, iterations=2, candidates=10))
    rec = run_training(cfg)
    assert [(r.episode, r.steps) for r in rec.rows] == [(3, 120), (4, 160)]


def test_determinism_and_worker_independence(tmp_path):
    cfg = _lqr(seeds=(0, 1))
    a = run_training(cfg, tmp_path / "a", workers=1)
    b = run_training(cfg, tmp_path / "b", workers=2)
    assert a.to_csv() == b.to_csv()
    assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()
    assert (tmp_path / "a" / "seed_1.csv").exists()


def test_total_steps_must_cover_seed_episodes():
    with pytest.raises(ValueError):
        run_seed(_lqr(seed_episodes=5, total_steps=12), 0)


def test_unwritable_output_reports_run(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(RunError, match="lqr/grad-mpc/seed0"):
        run_seed(_lqr(), 0, blocker / "sub")


def test_competition_ranks():
    assert competition_ranks([3.0, 1.0, 3.0, 2.0]) == [1, 4, 1, 3]
    assert competition_ranks([0.5]) == [1]


def test_compare_single_and_identical():
    report = compare_planners([_lqr()])
    assert len(report.rows) == 1 and report.rows[0].rank == 1
    twin = compare_planners([_lqr(), _lqr()], ["a", "b"])
    assert twin.rows[0].mean == twin.rows[1].mean and twin.rows[0].rank == twin.rows[1].rank == 1
    assert "a" in twin.table()


def test_compare_rejects_mismatch():
    with pytest.raises(ValueError, match="environments"):
        compare_planners([_lqr(), _lqr(env="point_reacher")])
    with pytest.raises(ValueError, match="budget"):
        compare_planners([_lqr(), _lqr(total_steps=48)])


def test_compare_lqr_random_last():
    configs = [_lqr(planner=p, seeds=(0, 1)) for p in ("grad-mpc", "cem", "random")]
    report = compare_planners(configs)
    ranks = {r.label: r.rank for r in report.rows}
    assert ranks["random"] == 3


def test_ablation_edge_cases():
    cfg = _lqr(planner_cfg=PlannerConfig(horizon=12, iterations=3, candidates=10))
    one = ablate_candidates(cfg, [10], seeds=range(3))
    assert isinstance(one, AblationReport) and one.monotone
    dup = ablate_candidates(cfg, [10, 10], seeds=range(3))
    assert dup.medians[0] == dup.medians[1] and dup.monotone
    with pytest.raises(ValueError, match="sorted"):
        ablate_candidates(cfg, [100, 10])


def test_learned_model_run_writes_checkpoints(tmp_path):
    cfg = _lqr(model="learned", train=TINY_TRAIN, planner_cfg=PlannerConfig(horizon=3, iterations=2, candidates=5),
               total_steps=24, eval_episodes=1)
    rec = run_training(cfg, tmp_path)
    assert rec.check() == []
    model = load_rssm(tmp_path / "seed_0_rssm.gpck")
    assert model.config.belief_size == 4


@pytest.mark.parametrize("planner", ["policy", "policy-grad-mpc"])
def test_policy_planners_run(tmp_path, planner):
    cfg = _lqr(model="learned", planner=planner, train=TINY_TRAIN, total_steps=24, eval_episodes=1,
               planner_cfg=PlannerConfig(horizon=1, iterations=2, candidates=1))
    rec = run_training(cfg, tmp_path)
    assert rec.check() == []
    ac = load_actor_critic(tmp_path / "seed_0_actor_critic.gpck")
    assert ac.policy.n_layers == 3


def test_policy_planners_need_learned_model():
    with pytest.raises(ValueError, match="learned"):
        run_seed(_lqr(planner="policy"), 0)


# --- command line ---------------------------------------------------------------


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    assert "gru_cell" in capsys.readouterr().out


def test_cli_config_error(capsys):
    assert main(["train", "--out", "x", "--candidates", "lots"]) == 2
    assert "config error" in capsys.readouterr().err


def _write_config(tmp_path, extra=""):
    path = tmp_path / "lqr.cfg"
    path.write_text("env lqr\nmodel true\nseed-episodes 1\ntotal-steps 36\neval-episodes 2\neval-interval 1\n"
                    "seeds 0\nplanning-horizon 12\noptimisation-iters 3\ncandidates 20\nwall-clock false\n" + extra)
    return path


def test_cli_train_and_flags_override(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--total-steps", "24"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(CSV_HEADER)
    rec = read_csv(tmp_path / "run" / "run.csv")
    assert rec.rows[-1].steps == 24
    assert "total-steps 24" in (tmp_path / "run" / "config.txt").read_text()


def test_cli_eval_learned_checkpoint(tmp_path, capsys):
    cfg = _write_config(tmp_path, "model learned\nbelief-size 4\nstate-size 2\nhidden-size 4\nembedding-size 4\n"
                                  "batch-size 2\nchunk-length 4\ncollect-interval 2\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--total-steps", "24"]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "run")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "seed,return_mean,return_std,random_mean" and len(lines) == 2


def test_cli_compare_json(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "cmp.json"
    assert main(["compare", "--config", str(cfg), "--planners", "grad-mpc,random", "--json", str(out)]) == 0
    assert "grad-mpc" in capsys.readouterr().out
    assert out.exists()


def test_cli_ablate(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["ablate-candidates", "--config", str(cfg), "--candidates-list", "5,20", "--n-seeds", "3"]) == 0
    assert "monotone: True" in capsys.readouterr().out


def test_workers_env_var(monkeypatch):
    from gradplan.planners import worker_count
    monkeypatch.setenv("GRADPLAN_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("GRADPLAN_WORKERS", "junk")
    assert worker_count() == 1
    monkeypatch.delenv("GRADPLAN_WORKERS")
    assert worker_count() == 1
    assert os.environ.get("GRADPLAN_WORKERS") is None


def test_experiment_config_replace_keeps_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(_lqr(), eval_episodes=0)
