"""Monte Carlo and exact evaluation of deployed controllers.

The harness rolls batches of closed-loop episodes on the true online
dynamics and reports three per-time curves:

* instantaneous safety — fraction of trajectories safe at time t;
* cumulative safety    — fraction safe at every time up to t;
* long-term safety     — probability that the remainder of the episode stays
  safe when the deployed controller runs up to t and the evaluation policy
  takes over, with the state frozen at the first failure (the quantity the
  certificate's induction controls; at t = 0 it is the plain policy value,
  at t = H the cumulative safety of the deployed controller).

Long-term safety is estimated two ways: pure Monte Carlo tail rollouts, and
a hybrid that replaces the tail with the exact value function (zero variance
at t = 0, lower everywhere). The same quantity is also computed exactly by
propagating the state distribution through the absorbing kernel, which is
the reference the Monte Carlo estimates are checked against.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .control import DeterministicController
from .errors import ConfigurationError
from .mdp import ConfoundedMdpModel, TabularPolicy, absorbing_online_matrix, p_online_matrix
from .oracle import TabularV, value_dp
from .seeding import derive_rng

Z_95 = 1.959963984540054  # two-sided 95% normal quantile

METRIC_INSTANTANEOUS = "instantaneous"
METRIC_CUMULATIVE = "cumulative"
METRIC_LONGTERM_HYBRID = "longterm_hybrid"
METRIC_LONGTERM_PURE = "longterm_pure"
METRIC_LONGTERM_EXACT = "longterm_exact"


@dataclass(frozen=True)
class CurveStats:
    """Per-time mean and 95% confidence band across simulation batches."""

    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray

    @property
    def half_width(self) -> np.ndarray:
        return (self.ci_hi - self.ci_lo) / 2.0


@dataclass
class ExperimentResult:
    """Curves and metadata of one controller's evaluation run."""

    env_id: str
    controller_id: str
    horizon: int
    epsilon: float
    batches: int
    trajs_per_batch: int
    x0: int
    seed: int
    curves: dict[str, CurveStats] = field(default_factory=dict)
    exact_longterm: Optional[np.ndarray] = None


def _batch_curves(
    model: ConfoundedMdpModel,
    controller: DeterministicController,
    value: TabularV,
    tail_cum: np.ndarray,
    online_cum: np.ndarray,
    trajs: int,
    x0: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Curves of one batch of closed-loop rollouts (fixed draw order)."""
    h = model.horizon
    n_last = model.n_states - 1
    path = np.empty((h + 1, trajs), dtype=np.int64)
    path[0] = x0
    states = path[0].copy()
    for t in range(h):
        actions = controller.action_table[t, states]
        rows = online_cum[states, actions]
        draws = rng.random(trajs)
        states = np.minimum((draws[:, None] >= rows).sum(axis=1), n_last)
        path[t + 1] = states
    safe_path = model.safe[path]  # (h+1, trajs)
    prefix_safe = np.logical_and.accumulate(safe_path, axis=0)
    instantaneous = safe_path.mean(axis=1)
    cumulative = prefix_safe.mean(axis=1)
    hybrid = np.empty(h + 1)
    pure = np.empty(h + 1)
    for t in range(h + 1):
        hybrid[t] = float(np.mean(prefix_safe[t] * value.values[h - t, path[t]]))
        tail_ok = np.ones(trajs, dtype=bool)
        tail_states = path[t].copy()
        for _ in range(h - t):
            draws = rng.random(trajs)
            tail_states = np.minimum(
                (draws[:, None] >= tail_cum[tail_states]).sum(axis=1), n_last
            )
            tail_ok &= model.safe[tail_states]
        pure[t] = float(np.mean(prefix_safe[t] & tail_ok))
    return {
        METRIC_INSTANTANEOUS: instantaneous,
        METRIC_CUMULATIVE: cumulative,
        METRIC_LONGTERM_HYBRID: hybrid,
        METRIC_LONGTERM_PURE: pure,
    }


def run_experiment(
    model: ConfoundedMdpModel,
    controller: DeterministicController,
    policy: TabularPolicy,
    x0: int,
    seed: int,
    epsilon: float,
    batches: int = 100,
    trajs_per_batch: int = 100,
    env_id: str = "",
    value: Optional[TabularV] = None,
    max_workers: int = 1,
) -> ExperimentResult:
    """Roll ``batches`` x ``trajs_per_batch`` episodes and aggregate curves.

    Batch b draws from the derived stream (seed, b) and batches are reduced
    in index order, so the result is identical for any worker count.
    """
    model.check_state(x0)
    if policy.table.ndim != 2:
        raise ConfigurationError("the evaluation policy must be stationary")
    if value is None:
        value = value_dp(model, policy)
    online = p_online_matrix(model)
    online_cum = np.cumsum(online, axis=-1)
    tail_rows = np.einsum("xu,xuy->xy", policy.table, online)
    tail_cum = np.cumsum(tail_rows, axis=-1)

    def one_batch(b: int) -> dict[str, np.ndarray]:
        rng = derive_rng(seed, b)
        return _batch_curves(
            model, controller, value, tail_cum, online_cum, trajs_per_batch, x0, rng
        )

    results: list[Optional[dict]] = [None] * batches
    if max_workers <= 1:
        for b in range(batches):
            results[b] = one_batch(b)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for b, out in enumerate(pool.map(one_batch, range(batches))):
                results[b] = out
    curves: dict[str, CurveStats] = {}
    for metric in (
        METRIC_INSTANTANEOUS,
        METRIC_CUMULATIVE,
        METRIC_LONGTERM_HYBRID,
        METRIC_LONGTERM_PURE,
    ):
        stacked = np.stack([r[metric] for r in results])  # (batches, h+1)
        mean = stacked.mean(axis=0)
        if batches > 1:
            half = Z_95 * stacked.std(axis=0, ddof=1) / np.sqrt(batches)
        else:
            half = np.zeros_like(mean)
        curves[metric] = CurveStats(mean=mean, ci_lo=mean - half, ci_hi=mean + half)
    return ExperimentResult(
        env_id=env_id,
        controller_id=controller.controller_id,
        horizon=model.horizon,
        epsilon=epsilon,
        batches=batches,
        trajs_per_batch=trajs_per_batch,
        x0=int(x0),
        seed=int(seed),
        curves=curves,
    )


def exact_long_term_curve(
    model: ConfoundedMdpModel,
    controller: DeterministicController,
    policy: TabularPolicy,
    x0: int,
    value: Optional[TabularV] = None,
) -> np.ndarray:
    """Exact long-term safety at every switch time t, no sampling error.

    Propagates the state distribution through the absorbing online kernel
    under the controller's (marginalized) action law, then takes the value
    of the evaluation policy over the remaining time.
    """
    model.check_state(x0)
    if value is None:
        value = value_dp(model, policy)
    absorbing = absorbing_online_matrix(model)
    h = model.horizon
    dist = np.zeros(model.n_states)
    dist[x0] = 1.0
    curve = np.empty(h + 1)
    for t in range(h + 1):
        curve[t] = float(dist @ value.values[h - t])
        if t < h:
            nxt = np.zeros(model.n_states)
            for x in np.flatnonzero(dist > 0.0):
                action_dist = controller.action_distribution(int(x), t)
                nxt += dist[x] * (action_dist @ absorbing[x])
            dist = nxt
    return curve


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def emit_report(results: list[ExperimentResult], out_dir, epsilon: float, extra: Optional[dict] = None) -> dict:
    """Write curves.csv and summary.json; returns the summary dictionary.

    The CSV layout is one (t, metric, mean, ci_lo, ci_hi, controller) row per
    curve point, exact curves included with a zero-width band. Field order
    and float formatting are fixed, so identical results produce identical
    bytes.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    curves_path = os.path.join(out_dir, "curves.csv")
    threshold = 1.0 - epsilon
    with open(curves_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "metric", "mean", "ci_lo", "ci_hi", "controller"])
        for result in results:
            metrics = dict(result.curves)
            if result.exact_longterm is not None:
                metrics[METRIC_LONGTERM_EXACT] = CurveStats(
                    mean=result.exact_longterm,
                    ci_lo=result.exact_longterm,
                    ci_hi=result.exact_longterm,
                )
            for metric in sorted(metrics):
                stats = metrics[metric]
                for t in range(len(stats.mean)):
                    writer.writerow(
                        [
                            t,
                            metric,
                            repr(float(stats.mean[t])),
                            repr(float(stats.ci_lo[t])),
                            repr(float(stats.ci_hi[t])),
                            result.controller_id,
                        ]
                    )
    summary: dict = {
        "threshold": threshold,
        "epsilon": epsilon,
        "controllers": {},
    }
    for result in results:
        entry: dict = {
            "env": result.env_id,
            "horizon": result.horizon,
            "batches": result.batches,
            "trajs_per_batch": result.trajs_per_batch,
            "x0": result.x0,
            "seed": result.seed,
        }
        if result.exact_longterm is not None:
            exact = result.exact_longterm
            entry["longterm_exact_min"] = float(exact.min())
            entry["meets_threshold_at_all_t"] = bool((exact >= threshold).all())
            hybrid = result.curves.get(METRIC_LONGTERM_HYBRID)
            if hybrid is not None:
                within = np.abs(hybrid.mean - exact) <= hybrid.half_width + 1e-12
                entry["mc_within_ci_of_exact"] = bool(within.all())
        summary["controllers"][result.controller_id] = entry
    if extra:
        summary.update(extra)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def parse_curves_csv(path) -> dict[tuple[str, str], dict[str, np.ndarray]]:
    """Read a curves.csv back into {(controller, metric): {column: array}}."""
    rows: dict[tuple[str, str], dict[str, list]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["controller"], rec["metric"])
            bucket = rows.setdefault(key, {"t": [], "mean": [], "ci_lo": [], "ci_hi": []})
            bucket["t"].append(int(rec["t"]))
            bucket["mean"].append(float(rec["mean"]))
            bucket["ci_lo"].append(float(rec["ci_lo"]))
            bucket["ci_hi"].append(float(rec["ci_hi"]))
    return {
        key: {col: np.array(vals) for col, vals in bucket.items()}
        for key, bucket in rows.items()
    }
