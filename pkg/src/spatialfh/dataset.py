"""Survey data container and the long-format CSV schema used by the CLI.

CSV schema (one row per area and outcome)::

    area_id,outcome,estimate,moe_or_var,var_flag,covariate_1,...,covariate_p

``var_flag`` is ``moe`` (published margin of error on the original scale,
converted with the delta method) or ``var`` (sampling variance already on the
model scale).  An intercept column is prepended to the covariates.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lattice import Adjacency, LatticeError

HEADER_PREFIX = ["area_id", "outcome", "estimate", "moe_or_var", "var_flag"]


class DataError(ValueError):
    """Malformed or inconsistent survey data."""


@dataclass(frozen=True)
class Transform:
    """Scale the model works on: ``log(pre_scale * x)`` or identity."""

    kind: str = "log"
    pre_scale: float = 100.0

    def __post_init__(self):
        if self.kind not in ("log", "none"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind == "log" and not self.pre_scale > 0:
            raise ValueError("pre_scale must be positive")

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "none":
            return x
        if np.any(x <= 0):
            raise DataError("log transform requires positive values")
        return np.log(self.pre_scale * x)

    def variance_from_moe(self, estimate, moe, moe_z: float):
        if self.kind == "none":
            return (np.asarray(moe, dtype=float) / moe_z) ** 2
        from .evaluate import delta_log_variance  # evaluate imports the sampler

        return delta_log_variance(estimate, moe, moe_z, self.pre_scale)

    @property
    def label(self) -> str:
        return "identity" if self.kind == "none" else f"log({self.pre_scale:g}*x)"


@dataclass
class SurveyDataset:
    """Direct estimates with known sampling covariances.

    Attributes
    ----------
    adj : Adjacency
        Lattice the areas live on; row ``i`` of every array is area ``i``.
    y : ndarray, shape (n, m)
        Direct estimates on the model scale.
    sampling_cov : ndarray, shape (n, m, m)
        Known sampling covariance per area.
    X : list of ndarray
        Per-outcome design matrices, each ``(n, p_j)`` including an intercept.
    """

    adj: Adjacency
    y: np.ndarray
    sampling_cov: np.ndarray
    X: list
    covariate_names: list = field(default=None)
    outcomes: list = field(default=None)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        n, m = self.y.shape
        if n != self.adj.n:
            raise DataError(f"data has {n} areas but lattice has {self.adj.n}")
        if not np.all(np.isfinite(self.y)):
            raise DataError("missing or non-finite direct estimates")
        S = np.asarray(self.sampling_cov, dtype=float)
        if S.ndim == 2 and S.shape == (n, m):
            S = np.einsum("ij,jk->ijk", S, np.eye(m))
        if S.shape != (n, m, m):
            raise DataError(f"sampling_cov has shape {S.shape}, expected {(n, m, m)}")
        if not np.allclose(S, np.swapaxes(S, 1, 2)):
            raise DataError("sampling covariances must be symmetric")
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            bad = [self.adj.ids[i] for i in range(n) if np.any(np.linalg.eigvalsh(S[i]) <= 0)]
            raise DataError(f"sampling covariance not positive definite at {bad}") from None
        self.sampling_cov = S
        if len(self.X) != m:
            raise DataError(f"need one design matrix per outcome ({m}), got {len(self.X)}")
        Xs = []
        for j, Xj in enumerate(self.X):
            Xj = np.asarray(Xj, dtype=float)
            if Xj.ndim == 1:
                Xj = Xj[:, None]
            if Xj.shape[0] != n or Xj.shape[1] < 1:
                raise DataError(f"design matrix for outcome {j + 1} has shape {Xj.shape}")
            Xs.append(Xj)
        self.X = Xs
        if self.outcomes is None:
            self.outcomes = [str(j + 1) for j in range(m)]
        elif len(self.outcomes) != m:
            raise DataError("outcome labels do not match the number of outcomes")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.y.shape[1]

    @property
    def ids(self) -> tuple:
        return self.adj.ids

    @property
    def sampling_precision(self) -> np.ndarray:
        return np.linalg.inv(self.sampling_cov)

    def subset(self, keep: Sequence[int]) -> "SurveyDataset":
        keep = np.asarray(list(keep), dtype=int)
        return SurveyDataset(
            adj=self.adj.subset(keep),
            y=self.y[keep],
            sampling_cov=self.sampling_cov[keep],
            X=[Xj[keep] for Xj in self.X],
            covariate_names=self.covariate_names,
            outcomes=self.outcomes,
        )

    def drop(self, i: int) -> "SurveyDataset":
        """Remove area ``i`` (and its edges)."""
        try:
            return self.subset([k for k in range(self.n) if k != i])
        except LatticeError as err:
            raise LatticeError(f"holding out {self.adj.ids[i]!r}: {err}") from None


def read_data_csv(
    text: str,
    adj: Adjacency,
    transform: Transform = Transform(),
    moe_z: float = 1.645,
) -> SurveyDataset:
    """Parse the long-format data CSV against a lattice.

    Every lattice area must appear exactly once per outcome.  Outcomes are
    ordered by first appearance.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty data file") from None
    ncov = len(header) - len(HEADER_PREFIX)
    expected = HEADER_PREFIX + [f"covariate_{k + 1}" for k in range(ncov)]
    if header != expected:
        raise DataError(f"bad header {header}; expected {expected}")
    rows = {}
    outcomes: list[str] = []
    for lineno, row in enumerate(reader, 2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields")
        area, outcome, est, mv, flag, *covs = (c.strip() for c in row)
        i = adj.index_of(area)
        if outcome not in outcomes:
            outcomes.append(outcome)
        if (i, outcome) in rows:
            raise DataError(f"line {lineno}: duplicate row for {area}/{outcome}")
        if flag not in ("moe", "var"):
            raise DataError(f"line {lineno}: var_flag must be 'moe' or 'var', got {flag!r}")
        try:
            rows[i, outcome] = (float(est), float(mv), flag, [float(c) for c in covs])
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric field") from None
    n, m = adj.n, len(outcomes)
    missing = [f"{adj.ids[i]}/{o}" for i in range(n) for o in outcomes if (i, o) not in rows]
    if missing:
        raise DataError(f"missing rows: {', '.join(missing[:5])}{' ...' if len(missing) > 5 else ''}")
    raw = np.empty((n, m))
    var = np.empty((n, m))
    X = [np.ones((n, ncov + 1)) for _ in range(m)]
    for (i, o), (est, mv, flag, covs) in rows.items():
        j = outcomes.index(o)
        raw[i, j] = est
        var[i, j] = transform.variance_from_moe(est, mv, moe_z) if flag == "moe" else mv
        X[j][i, 1:] = covs
    return SurveyDataset(adj=adj, y=transform.apply(raw), sampling_cov=var, X=X,
                         covariate_names=["intercept"] + expected[len(HEADER_PREFIX):],
                         outcomes=outcomes)


def write_data_csv(ds: SurveyDataset, outcomes: Sequence[str] | None = None) -> str:
    """Serialize on the model scale with ``var_flag=var``.

    Only diagonal sampling variances and a shared covariate set
    (intercept + the same columns for every outcome) can be represented.
    """
    outcomes = list(outcomes or ds.outcomes)
    p = ds.X[0].shape[1] - 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER_PREFIX + [f"covariate_{k + 1}" for k in range(p)])
    for i, area in enumerate(ds.ids):
        for j, o in enumerate(outcomes):
            w.writerow([area, o, repr(float(ds.y[i, j])), repr(float(ds.sampling_cov[i, j, j])), "var"]
                       + [repr(float(v)) for v in ds.X[j][i, 1:]])
    return buf.getvalue()


def read_truth_csv(text: str, adj: Adjacency, outcomes: Sequence[str],
                   transform: Transform = Transform()) -> np.ndarray:
    """Truth table ``area_id,outcome,value`` -> ``(n, m)`` array on the model scale."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["area_id", "outcome", "value"]:
        raise DataError("truth file header must be area_id,outcome,value")
    out = np.full((adj.n, len(outcomes)), np.nan)
    for row in reader:
        o = row["outcome"].strip()
        if o not in outcomes:
            raise DataError(f"truth file has unknown outcome {o!r}")
        out[adj.index_of(row["area_id"].strip()), list(outcomes).index(o)] = float(row["value"])
    if np.isnan(out).any():
        i, j = np.argwhere(np.isnan(out))[0]
        raise DataError(f"truth missing for {adj.ids[i]}/{outcomes[j]}")
    return transform.apply(out)


def write_truth_csv(theta: np.ndarray, ids: Sequence[str], outcomes: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["area_id", "outcome", "value"])
    for i, a in enumerate(ids):
        for j, o in enumerate(outcomes):
            w.writerow([a, o, repr(float(theta[i, j]))])
    return buf.getvalue()
