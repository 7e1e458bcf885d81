"""Training runs, evaluation and variant comparison on top of GrpoAgent."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..agents.grpo_agent import GrpoAgent, Stream, stream
from ..errors import ArgumentError, DivergenceError, FormatError, GrpoError, StorageError
from ..models.config import RunConfig, Variant, dump_config, with_overrides
from ..models.envs import make_env_spec, perturb_env_spec, rollout_batch
from ..models.metrics import (
    CSV_COLUMNS,
    ComparisonCell,
    ComparisonReport,
    ConvergenceReport,
    EvaluationSummary,
    IterationMetrics,
    PolicyEvaluation,
    VariantSummary,
)
from .checkpoint_service import checkpoint_path, load_checkpoint, save_checkpoint, verify_resumable
from .plot_service import emit_plot, read_metrics

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
REPORT_FILE = "convergence_report.json"
CONFIG_FILE = "config.txt"
PLOT_FILE = "training_curve.svg"
DIVERGENCE_FILE = "divergence.json"
COMPARISON_FILE = "comparison.json"
COMPARE_WINDOW = 100


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


class MetricsWriter:
    """Single writer for metrics.csv, flushed after every iteration.

    When resuming at iteration ``start``, rows from iteration ``start`` on are
    dropped first so a run interrupted after its last checkpoint continues cleanly.
    """

    def __init__(self, path: Union[str, Path], start: int = 0):
        self.path = Path(path)
        kept: List[List[str]] = []
        if start > 0 and self.path.exists():
            kept = self._rows_before(start)
        try:
            self._file = self.path.open("w", newline="", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open {self.path}: {exc}") from exc
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(CSV_COLUMNS)
        self._writer.writerows(kept)
        self._file.flush()

    def _rows_before(self, start: int) -> List[List[str]]:
        try:
            with self.path.open(newline="", encoding="utf-8") as handle:
                rows = list(csv.reader(handle))
        except OSError as exc:
            raise StorageError(f"cannot read {self.path}: {exc}") from exc
        if not rows or tuple(rows[0]) != CSV_COLUMNS:
            raise FormatError(f"{self.path} does not carry the metrics header")
        kept = []
        for number, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            try:
                iteration = int(row[0])
            except ValueError:
                raise FormatError(f"{self.path} line {number}: bad iteration '{row[0]}'") from None
            if iteration < start:
                kept.append(row)
        return kept

    def write(self, metrics: IterationMetrics) -> None:
        self._writer.writerows(metrics.csv_rows())
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


@dataclass(frozen=True)
class TrainingOutcome:
    out_dir: Path
    metrics_csv: Path
    final_checkpoint: Optional[Path]
    report: ConvergenceReport


def train(config: RunConfig, resume: Optional[Union[str, Path]] = None) -> TrainingOutcome:
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc}") from exc

    spec = make_env_spec(config.env, config.horizon)
    agent = GrpoAgent(config, spec, workers=config.rollout_workers, record_wall_time=config.record_wall_time)
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        verify_resumable(checkpoint, config)
        agent.restore(checkpoint.state)
        logger.info("resuming from %s at iteration %d", resume, agent.iteration)
    start = agent.iteration

    _write_text(out / CONFIG_FILE, dump_config(config))
    metrics_csv = out / METRICS_FILE
    final_checkpoint = None
    with MetricsWriter(metrics_csv, start) as writer:
        for k in range(start, config.iterations):
            try:
                metrics = agent.train_iteration(k)
            except DivergenceError as exc:
                payload = {"detail": exc.detail, "diagnostics": exc.diagnostics}
                _write_text(out / DIVERGENCE_FILE, json.dumps(payload, indent=2, default=str))
                logger.error("training diverged at iteration %d: %s", k, exc.detail)
                raise
            writer.write(metrics)
            done = k + 1
            if done % config.checkpoint_every == 0 or done == config.iterations:
                final_checkpoint = save_checkpoint(checkpoint_path(out, done), config, agent.snapshot())

    report = agent.monitor.finalize(config.alpha0, config.lr_decay, config.iterations)
    _write_text(out / REPORT_FILE, report.model_dump_json(indent=2))
    if report.grad_norms:
        emit_plot(metrics_csv, out / PLOT_FILE)
    if not report.passed:
        logger.warning(
            "diagnostics flagged violations: reward %d, advantage %d, step %d, normalization %d, stationary %s",
            report.reward_violations, report.advantage_violations,
            report.step_violations, report.normalization_violations, report.stationary,
        )
    return TrainingOutcome(out_dir=out, metrics_csv=metrics_csv, final_checkpoint=final_checkpoint, report=report)


def run_train(config: RunConfig, resume: Optional[Union[str, Path]] = None) -> int:
    train(config, resume)
    return 0


def _evaluate(policy, spec, seed: int, index: int, episodes: int) -> np.ndarray:
    rng = stream(seed, Stream.EVAL, index)
    trajectories = rollout_batch(policy, spec, rng, episodes, policy_index=index, deterministic=True)
    return np.array([t.episode_return for t in trajectories])


def run_eval(
    checkpoint: Union[str, Path],
    episodes: Optional[int],
    seed: int,
    perturbation: float = 1.0,
) -> EvaluationSummary:
    """Mean-action rollouts of every stored policy; the seed only drives episode starts.

    ``episodes`` defaults to the checkpoint's ``eval_episodes``. A ``perturbation`` other
    than 1 scales the task's inertia and also reports the drop from the nominal return
    over the same starts.
    """
    if episodes is not None and episodes < 1:
        raise ArgumentError(f"episodes must be at least 1, got {episodes}")
    loaded = load_checkpoint(checkpoint)
    episodes = episodes or loaded.config.eval_episodes
    nominal = make_env_spec(loaded.config.env, loaded.config.horizon)
    spec = perturb_env_spec(nominal, perturbation) if perturbation != 1.0 else nominal
    evaluations = []
    for i, policy in enumerate(loaded.state.policies):
        returns = _evaluate(policy, spec, seed, i, episodes)
        evaluation = PolicyEvaluation(
            policy_index=i, mean_return=float(returns.mean()), std_return=float(returns.std()), episodes=episodes
        )
        if spec is not nominal:
            baseline = float(_evaluate(policy, nominal, seed, i, episodes).mean())
            evaluation.nominal_mean_return = baseline
            evaluation.return_drop = baseline - evaluation.mean_return
        evaluations.append(evaluation)
        logger.info("policy %d: %.3f +/- %.3f over %d episodes", i + 1, returns.mean(), returns.std(), episodes)
    return EvaluationSummary(
        env=spec.name, seed=seed, iteration=loaded.state.iteration, perturbation=perturbation, policies=evaluations
    )


def curve_statistics(frame: pd.DataFrame, window: int = COMPARE_WINDOW) -> Tuple[int, float, float]:
    """(iterations, mean, population variance) of the policy-averaged return over the trailing window."""
    curve = frame.groupby("iteration")["mean_return"].mean().sort_index()
    tail = curve.tail(min(window, len(curve)))
    return len(curve), float(tail.mean()), float(tail.var(ddof=0))


def _summaries(cells: Sequence[ComparisonCell]) -> List[VariantSummary]:
    table = pd.DataFrame([c.model_dump() for c in cells if c.status == "ok"])
    summaries = []
    for variant in Variant:
        rows = table[table["variant"] == variant.value] if not table.empty else table
        summaries.append(
            VariantSummary(
                variant=variant.value,
                runs=len(rows),
                mean_final_return=float(rows["final_mean_return"].mean()) if len(rows) else None,
                mean_trailing_variance=float(rows["trailing_variance"].mean()) if len(rows) else None,
                std_final_return=float(rows["final_mean_return"].std(ddof=0)) if len(rows) else None,
                std_trailing_variance=float(rows["trailing_variance"].std(ddof=0)) if len(rows) else None,
            )
        )
    return summaries


def _pairwise_rates(cells: Sequence[ComparisonCell]) -> Tuple[Optional[float], Optional[float]]:
    by_key: Dict[Tuple[str, int], ComparisonCell] = {(c.variant, c.seed): c for c in cells if c.status == "ok"}
    seeds = sorted({seed for _, seed in by_key})
    pairs = [
        (by_key[(Variant.FULL.value, s)], by_key[(Variant.SIMPLE.value, s)])
        for s in seeds
        if (Variant.FULL.value, s) in by_key and (Variant.SIMPLE.value, s) in by_key
    ]
    if not pairs:
        return None, None
    wins = sum(full.final_mean_return >= simple.final_mean_return for full, simple in pairs)
    steadier = sum(full.trailing_variance <= simple.trailing_variance for full, simple in pairs)
    return wins / len(pairs), steadier / len(pairs)


def run_compare(config: RunConfig, seeds: Sequence[int]) -> ComparisonReport:
    if len(seeds) < 2:
        raise ArgumentError("compare needs at least two seeds")
    base = Path(config.output_dir)
    cells: List[ComparisonCell] = []
    for seed in seeds:
        for variant in Variant:
            cell_dir = base / f"{variant.value}_seed{seed}"
            try:
                cell_config = with_overrides(config, seed=seed, variant=variant, output_dir=str(cell_dir))
                outcome = train(cell_config)
                iterations, final_mean, variance = curve_statistics(read_metrics(outcome.metrics_csv))
                cells.append(
                    ComparisonCell(
                        variant=variant.value, seed=seed, iterations=iterations, final_mean_return=final_mean,
                        trailing_variance=variance, metrics_csv=str(outcome.metrics_csv),
                    )
                )
            except GrpoError as exc:
                logger.warning("%s seed %d failed: %s", variant.value, seed, exc.detail)
                cells.append(ComparisonCell(variant=variant.value, seed=seed, status="failed", error=exc.detail))

    full_win_rate, steadier_rate = _pairwise_rates(cells)
    report = ComparisonReport(
        seeds=list(seeds),
        window=COMPARE_WINDOW,
        cells=cells,
        summaries=_summaries(cells),
        full_win_rate=full_win_rate,
        full_lower_variance_rate=steadier_rate,
    )
    try:
        base.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {base}: {exc}") from exc
    _write_text(base / COMPARISON_FILE, report.model_dump_json(indent=2))
    return report
