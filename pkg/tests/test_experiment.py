import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cgrpo.errors import ArgumentError, CheckpointError, FormatError
from cgrpo.models.config import Variant, build_config, with_overrides
from cgrpo.models.metrics import CSV_COLUMNS
from cgrpo.models.numerics import policy_to_vector
from cgrpo.services.checkpoint_service import load_checkpoint
from cgrpo.services.experiment_service import (
    COMPARISON_FILE,
    CONFIG_FILE,
    PLOT_FILE,
    REPORT_FILE,
    MetricsWriter,
    curve_statistics,
    run_compare,
    run_eval,
    train,
)


def _moved(config, tmp_path, name, **overrides):
    return with_overrides(config, output_dir=str(tmp_path / name), **overrides)


def test_training_writes_every_artifact(tiny_config):
    outcome = train(tiny_config)
    out = outcome.out_dir
    frame = pd.read_csv(outcome.metrics_csv)
    assert tuple(frame.columns) == CSV_COLUMNS
    assert len(frame) == tiny_config.iterations * tiny_config.n_policies
    assert frame["iteration"].tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    assert (out / "checkpoint_000002.ckpt").exists()
    assert outcome.final_checkpoint == out / "checkpoint_000004.ckpt"
    assert "n_policies = 2\n" in (out / CONFIG_FILE).read_text()
    assert (out / PLOT_FILE).read_text().count("<polyline") == 2
    report = json.loads((out / REPORT_FILE).read_text())
    assert report["reward_violations"] == 0
    assert report["step_violations"] == 0
    assert len(report["grad_norms"]) == 4
    assert report["schedule"]["robbins_monro"] is True


def test_same_seed_gives_byte_identical_metrics(tiny_config, tmp_path):
    a = train(_moved(tiny_config, tmp_path, "a"))
    b = train(_moved(tiny_config, tmp_path, "b", rollout_workers=4))
    assert a.metrics_csv.read_bytes() == b.metrics_csv.read_bytes()


def test_different_seeds_diverge(tiny_config, tmp_path):
    a = train(_moved(tiny_config, tmp_path, "a", iterations=1))
    b = train(_moved(tiny_config, tmp_path, "b", iterations=1, seed=1))
    assert a.metrics_csv.read_bytes() != b.metrics_csv.read_bytes()


def test_resume_matches_an_uninterrupted_run(tiny_config, tmp_path):
    straight = train(_moved(tiny_config, tmp_path, "straight"))
    first_half = _moved(tiny_config, tmp_path, "halves", iterations=2)
    train(first_half)
    resumed = train(with_overrides(first_half, iterations=4), resume=tmp_path / "halves" / "checkpoint_000002.ckpt")

    assert resumed.metrics_csv.read_bytes() == straight.metrics_csv.read_bytes()
    assert (resumed.out_dir / REPORT_FILE).read_text() == (straight.out_dir / REPORT_FILE).read_text()
    a, b = load_checkpoint(straight.final_checkpoint), load_checkpoint(resumed.final_checkpoint)
    for p, q in zip(a.state.policies, b.state.policies):
        np.testing.assert_array_equal(policy_to_vector(p), policy_to_vector(q))


def test_resume_drops_rows_past_the_checkpoint(tiny_config, tmp_path):
    config = _moved(tiny_config, tmp_path, "run", iterations=3)
    train(config)
    resumed = train(with_overrides(config, iterations=4), resume=tmp_path / "run" / "checkpoint_000002.ckpt")
    frame = pd.read_csv(resumed.metrics_csv)
    assert frame["iteration"].tolist() == [0, 0, 1, 1, 2, 2, 3, 3]


def test_resume_refuses_a_changed_configuration(tiny_config, tmp_path):
    config = _moved(tiny_config, tmp_path, "run", iterations=2)
    train(config)
    with pytest.raises(CheckpointError, match="gamma"):
        train(with_overrides(config, gamma=0.9), resume=tmp_path / "run" / "checkpoint_000002.ckpt")


def test_minimal_run(tiny_config, tmp_path):
    config = _moved(tiny_config, tmp_path, "minimal", n_policies=1, n_groups=1, iterations=1)
    outcome = train(config)
    assert len(pd.read_csv(outcome.metrics_csv)) == 1
    assert outcome.final_checkpoint.exists()
    svg = (outcome.out_dir / PLOT_FILE).read_text()
    assert "<circle" in svg and "<polyline" not in svg


def test_metrics_writer_rejects_foreign_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        MetricsWriter(path, start=1)


def test_metrics_writer_rejects_a_corrupt_row(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text(",".join(CSV_COLUMNS) + "\n0,0\nx,1\n")
    with pytest.raises(FormatError, match="line 3") as info:
        MetricsWriter(path, start=1)
    assert info.value.exit_code == 3


def test_evaluation_is_deterministic(tiny_config):
    outcome = train(with_overrides(tiny_config, iterations=2))
    first = run_eval(outcome.final_checkpoint, episodes=3, seed=5)
    again = run_eval(outcome.final_checkpoint, episodes=3, seed=5)
    assert first == again
    assert first.iteration == 2
    assert [p.episodes for p in first.policies] == [3, 3]
    assert run_eval(outcome.final_checkpoint, episodes=3, seed=6) != first


def test_evaluation_needs_an_episode(tiny_config):
    outcome = train(with_overrides(tiny_config, iterations=2))
    with pytest.raises(ArgumentError):
        run_eval(outcome.final_checkpoint, episodes=0, seed=0)


def test_evaluation_defaults_to_configured_episodes(tiny_config):
    outcome = train(with_overrides(tiny_config, iterations=2, eval_episodes=3))
    summary = run_eval(outcome.final_checkpoint, episodes=None, seed=5)
    assert [p.episodes for p in summary.policies] == [3, 3]
    assert summary == run_eval(outcome.final_checkpoint, episodes=3, seed=5)


def test_perturbed_evaluation_reports_the_drop(tiny_config):
    outcome = train(with_overrides(tiny_config, iterations=2))
    nominal = run_eval(outcome.final_checkpoint, episodes=4, seed=5)
    assert nominal.perturbation == 1.0
    assert all(p.return_drop is None for p in nominal.policies)

    heavier = run_eval(outcome.final_checkpoint, episodes=4, seed=5, perturbation=2.0)
    assert heavier.perturbation == 2.0
    for base, moved in zip(nominal.policies, heavier.policies):
        assert moved.nominal_mean_return == base.mean_return
        assert moved.return_drop == pytest.approx(base.mean_return - moved.mean_return)
    with pytest.raises(ArgumentError):
        run_eval(outcome.final_checkpoint, episodes=4, seed=5, perturbation=0.0)


def test_curve_statistics_average_policies_then_iterations():
    frame = pd.DataFrame(
        {"iteration": [0, 0, 1, 1, 2, 2], "policy_index": [0, 1] * 3, "mean_return": [1.0, 3.0, 2.0, 4.0, 5.0, 7.0]}
    )
    assert curve_statistics(frame, window=2) == (3, pytest.approx(4.5), pytest.approx(2.25))
    assert curve_statistics(frame, window=10)[1] == pytest.approx((2.0 + 3.0 + 6.0) / 3)


def test_compare_runs_every_variant_and_seed(tiny_config):
    config = with_overrides(tiny_config, iterations=3)
    report = run_compare(config, [0, 1])
    assert [(c.variant, c.seed) for c in report.cells] == [
        ("full", 0), ("simple", 0), ("full", 1), ("simple", 1)
    ]
    assert all(c.status == "ok" and c.iterations == 3 for c in report.cells)

    for summary in report.summaries:
        finals = []
        for cell in report.cells:
            if cell.variant != summary.variant:
                continue
            frame = pd.read_csv(cell.metrics_csv)
            finals.append(frame.groupby("iteration")["mean_return"].mean().mean())
        assert summary.runs == 2
        assert summary.mean_final_return == pytest.approx(np.mean(finals))
        assert summary.std_final_return == pytest.approx(np.std(finals))
        assert summary.std_trailing_variance >= 0.0

    written = json.loads((Path(config.output_dir) / COMPARISON_FILE).read_text())
    assert written["seeds"] == [0, 1]
    assert 0.0 <= report.full_win_rate <= 1.0


def test_compare_needs_two_seeds(tiny_config):
    with pytest.raises(ArgumentError):
        run_compare(tiny_config, [0])


@pytest.mark.slow
@pytest.mark.parametrize("variant", [Variant.FULL, Variant.SIMPLE])
@pytest.mark.parametrize("seed", range(5))
def test_point_mass_learns(variant, seed, tmp_path):
    config = with_overrides(
        _learning_config(tmp_path),
        variant=variant,
        seed=seed,
        output_dir=str(tmp_path / f"{variant.value}_{seed}"),
    )
    outcome = train(config)
    curve = pd.read_csv(outcome.metrics_csv).groupby("iteration")["mean_return"].mean()
    assert curve.tail(20).mean() > curve.head(20).mean()
    assert outcome.report.stationary is True
    assert outcome.report.passed


@pytest.mark.slow
def test_pendulum_smoke(tmp_path):
    improved = 0
    for seed in range(5):
        config = with_overrides(
            _learning_config(tmp_path),
            env="pendulum",
            iterations=100,
            seed=seed,
            output_dir=str(tmp_path / f"pendulum_{seed}"),
        )
        outcome = train(config)
        report = outcome.report
        # the whole run is one trend window here, so only the runtime checks are required
        assert report.reward_violations == report.step_violations == report.advantage_violations == 0
        curve = pd.read_csv(outcome.metrics_csv).groupby("iteration")["mean_return"].mean()
        improved += curve.iloc[-10:].mean() > curve.iloc[0]
    assert improved >= 4


def _learning_config(tmp_path):
    return build_config(
        {
            "env": "point_mass",
            "batch_timesteps": 1024,
            "iterations": 200,
            "alpha0": 5e-3,
            "checkpoint_every": 100,
            "record_wall_time": False,
            "output_dir": str(tmp_path),
        }
    )
