"""Scoring: MSE against truth, leave-one-out MSPE, relative reductions."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeError

MOE_Z = 1.645


def delta_log_variance(estimate, moe, moe_z: float = MOE_Z, pre_scale: float = 1.0):
    """Delta-method variance of ``log(pre_scale * estimate)``.

    ``Var(log(c X)) ≈ Var(X) / X^2`` with ``Var(X) = (moe / moe_z)^2``; the
    multiplicative ``pre_scale`` only shifts the log and drops out.
    """
    est = np.asarray(estimate, dtype=float)
    if np.any(est <= 0):
        raise ValueError("delta_log_variance needs a positive estimate")
    if not pre_scale > 0:
        raise ValueError("pre_scale must be positive")
    out = (np.asarray(moe, dtype=float) / moe_z) ** 2 / est ** 2
    return float(out) if out.ndim == 0 else out


@dataclass
class MseResult:
    mse: np.ndarray          # (m,)
    sq_error: np.ndarray     # (n, m)
    estimate: np.ndarray     # (n, m) point estimate used


def posterior_mse(theta_draws, truth, expected: bool = False) -> MseResult:
    """Per-outcome MSE of the posterior-mean estimate against ``truth``.

    ``theta_draws`` has shape ``(..., n, m)`` (any number of leading draw
    axes).  With ``expected=True`` the per-location error is the posterior
    expectation of the squared error instead.
    """
    th = np.asarray(theta_draws, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if truth.ndim == 1:
        truth = truth[:, None]
    if th.ndim < 2 or th.shape[-2:] != truth.shape:
        raise ValueError(f"draws {th.shape} do not match truth {truth.shape}")
    th = th.reshape((-1,) + truth.shape)
    if th.shape[0] == 0:
        raise ValueError("empty chains")
    est = th.mean(axis=0)
    if expected:
        sq = ((th - truth) ** 2).mean(axis=0)
    else:
        sq = (est - truth) ** 2
    return MseResult(mse=sq.mean(axis=0), sq_error=sq, estimate=est)


def relative_reduction(mse_a, mse_b) -> np.ndarray:
    """``(a - b) / (a/2 + b/2)`` per location; positive favors ``b``."""
    a = np.asarray(mse_a, dtype=float)
    b = np.asarray(mse_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("squared errors must be nonnegative")
    if np.any((a == 0) & (b == 0)):
        raise ValueError("relative reduction undefined where both errors are zero")
    return (a - b) / (0.5 * a + 0.5 * b)


def percent_better(err_a, err_b) -> tuple[float, float]:
    """Percentage of locations where ``a < b`` strictly, and percentage tied."""
    a = np.asarray(err_a, dtype=float)
    b = np.asarray(err_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    if a.size == 0:
        raise ValueError("no locations")
    return 100.0 * np.count_nonzero(a < b) / a.size, 100.0 * np.count_nonzero(a == b) / a.size


def workers_from_env(n_jobs: int | None = None) -> int:
    if n_jobs is not None:
        return max(1, int(n_jobs))
    return max(1, int(os.environ.get("SPATIALFH_WORKERS", "1")))


@dataclass
class LooResult:
    mspe: np.ndarray         # (m,)
    sq_error: np.ndarray     # (n, m)
    prediction: np.ndarray   # (n, m) posterior-mean predictions of theta_i


def _loo_one(args):
    from .sampler import predict_holdout

    data, model, cfg, i = args
    return predict_holdout(data, model, cfg, i)["theta"].mean(axis=0)


def loo_mspe(data, model, cfg, n_jobs: int | None = None) -> LooResult:
    """Leave-one-out MSPE against the observed ``Y`` at each held-out area."""
    for i in range(data.n):
        # fail before any sampling if some hold-out would isolate a neighbor
        for j in data.adj.neighbors[i]:
            if data.adj.neighbors[j] == (i,):
                raise LatticeError(f"holding out {data.ids[i]!r} isolates {data.ids[j]!r}")
    jobs = [(data, model, cfg, i) for i in range(data.n)]
    workers = workers_from_env(n_jobs)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            preds = list(ex.map(_loo_one, jobs))
    else:
        preds = [_loo_one(j) for j in jobs]
    pred = np.array(preds)
    sq = (pred - data.y) ** 2
    return LooResult(mspe=sq.mean(axis=0), sq_error=sq, prediction=pred)


def _pairs(models):
    return [(a, b) for k, a in enumerate(models) for b in models[k + 1:]]


@dataclass
class EvaluationReport:
    """Per-model, per-outcome error summaries and pairwise comparisons.

    ``per_location[model]`` is ``(n, m)``; pair keys are ``"a_vs_b"`` with
    ``a`` the baseline, so positive relative reductions favor ``b``.
    """

    metric: str
    ids: list
    outcomes: list
    models: list
    overall: dict
    per_location: dict
    relative: dict = field(default_factory=dict)
    percent_better: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, metric, ids, outcomes, per_location: dict, metadata=None):
        models = list(per_location)
        overall = {k: np.asarray(v).mean(axis=0) for k, v in per_location.items()}
        rel, pb = {}, {}
        for a, b in _pairs(models):
            ea, eb = np.asarray(per_location[a]), np.asarray(per_location[b])
            key = f"{a}_vs_{b}"
            with np.errstate(invalid="ignore", divide="ignore"):
                r = np.where((ea == 0) & (eb == 0), 0.0, (ea - eb) / (0.5 * ea + 0.5 * eb))
            rel[key] = r
            pb[key] = {}
            for j, o in enumerate(outcomes):
                b_better, ties = percent_better(eb[:, j], ea[:, j])
                a_better, _ = percent_better(ea[:, j], eb[:, j])
                pb[key][o] = {f"{b}_better": b_better, f"{a}_better": a_better, "ties": ties}
        return cls(metric=metric, ids=list(ids), outcomes=list(outcomes), models=models,
                   overall=overall, per_location=per_location, relative=rel,
                   percent_better=pb, metadata=dict(metadata or {}))

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "outcomes": self.outcomes,
            "models": self.models,
            "overall": {k: dict(zip(self.outcomes, map(float, v))) for k, v in self.overall.items()},
            "percent_better": self.percent_better,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_long_csv(self) -> str:
        """``area_id,outcome,metric,value`` rows for choropleth plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["area_id", "outcome", "metric", "value"])
        tables = [(f"{self.metric}_{k}", v) for k, v in self.per_location.items()]
        tables += [(f"relative_reduction_{k}", v) for k, v in self.relative.items()]
        for name, arr in tables:
            arr = np.asarray(arr)
            for i, a in enumerate(self.ids):
                for j, o in enumerate(self.outcomes):
                    w.writerow([a, o, name, repr(float(arr[i, j]))])
        return buf.getvalue()
