"""Synthetic GMCAR-FH data and replicated simulation studies.

The shipped default protocol runs on a 10x12 rook grid with sampling
variances and a covariate frozen in ``data/grid10x12.csv`` (regenerate with
``scripts/make_fixtures.py``).  Generation parameters other than ``eta0`` and
``eta1`` are fixture choices.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.linalg import solve_triangular

from .covstruct import GmcarParams
from .dataset import SurveyDataset
from .evaluate import EvaluationReport, percent_better, posterior_mse, workers_from_env
from .lattice import Adjacency, car_matrix, grid_lattice, read_neighbor_list
from .sampler import MODELS, McmcConfig, ModelSpec, fit

FIXTURE = "grid10x12.csv"
DEFAULT_GMCAR = dict(tau1=0.3, tau2=0.3, rho1=0.9, rho2=0.9, eta0=0.26, eta1=-0.04)
DEFAULT_BETA = ((1.0, 0.01), (1.0, 0.01))


class SimulationError(RuntimeError):
    def __init__(self, message, replicate=None, model=None):
        self.replicate, self.model = replicate, model
        super().__init__(message)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _car_chol(adj: Adjacency, rho: float) -> np.ndarray:
    try:
        return np.linalg.cholesky(car_matrix(adj, rho).toarray())
    except np.linalg.LinAlgError:
        raise SimulationError(f"CAR factorization failed for rho={rho}") from None


def draw_gmcar_field(g: GmcarParams, adj: Adjacency, seed=None, size: int | None = None) -> np.ndarray:
    """Draw ``u = (u1', u2')'`` (outcome-major) by the conditional construction.

    ``u2 ~ N(0, Q2^-1)`` then ``u1 | u2 ~ N(A u2, Q1^-1)``, each through the
    Cholesky factor of ``D - rho_k W``.  Returns shape ``(2n,)`` or
    ``(size, 2n)``.
    """
    rng = _rng(seed)
    n = adj.n
    k = 1 if size is None else size
    L1 = _car_chol(adj, g.rho1)
    L2 = _car_chol(adj, g.rho2)
    z = rng.standard_normal((2, n, k))
    u2 = np.sqrt(g.tau2_2) * solve_triangular(L2, z[1], lower=True, trans="T")
    A = g.link(adj)
    u1 = A @ u2 + np.sqrt(g.tau1_2) * solve_triangular(L1, z[0], lower=True, trans="T")
    u = np.concatenate([u1, u2], axis=0).T
    return u[0] if size is None else u


def synthetic_covariate(adj: Adjacency, seed: int, mean: float = 45.0, sd: float = 8.0) -> np.ndarray:
    """Spatially smooth covariate (CAR draw, rho=0.99) rescaled to ``mean``/``sd``."""
    rng = np.random.default_rng(seed)
    x = solve_triangular(_car_chol(adj, 0.99), rng.standard_normal(adj.n), lower=True, trans="T")
    x = (x - x.mean()) / x.std()
    return mean + sd * x


def synthetic_variances(n: int, m: int, seed: int, low: float = 0.02, high: float = 0.3) -> np.ndarray:
    """Log-uniform sampling variances on ``[low, high]``."""
    rng = np.random.default_rng(seed)
    return np.exp(rng.uniform(np.log(low), np.log(high), size=(n, m)))


def load_fixture(name: str = FIXTURE):
    """``(ids, covariate, variances)`` from a packaged fixture CSV."""
    text = resources.files("spatialfh").joinpath("data", name).read_text()
    return read_fixture_csv(text)


def read_fixture_csv(text: str):
    rows = list(csv.DictReader(io.StringIO(text)))
    ids = [r["area_id"] for r in rows]
    cov = np.array([float(r["covariate"]) for r in rows])
    vcols = sorted((k for k in rows[0] if k.startswith("var")), key=lambda k: int(k[3:]))
    var = np.array([[float(r[k]) for k in vcols] for r in rows])
    return ids, cov, var


@dataclass
class SimProtocol:
    adj: Adjacency
    gmcar: GmcarParams
    beta: tuple
    covariate: np.ndarray        # (n,) or (n, p) without intercept, shared by both outcomes
    sampling_vars: np.ndarray    # (n, 2)
    seed: int = 2013
    replicates: int = 10

    def __post_init__(self):
        n = self.adj.n
        self.covariate = np.asarray(self.covariate, dtype=float)
        if self.covariate.ndim == 1:
            self.covariate = self.covariate[:, None]
        self.sampling_vars = np.broadcast_to(np.asarray(self.sampling_vars, float), (n, 2)).copy()
        if self.covariate.shape[0] != n:
            raise ValueError(f"covariate has {self.covariate.shape[0]} rows, lattice has {n}")
        if np.any(self.sampling_vars < 0):
            raise ValueError("sampling variances must be nonnegative")
        self.beta = tuple(tuple(float(v) for v in b) for b in self.beta)
        if len(self.beta) != 2 or any(len(b) != self.covariate.shape[1] + 1 for b in self.beta):
            raise ValueError("beta needs two vectors of length 1 + number of covariates")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    @property
    def X(self) -> list:
        Xc = np.column_stack([np.ones(self.adj.n), self.covariate])
        return [Xc, Xc]

    def to_dict(self) -> dict:
        g = self.gmcar
        return {
            "n": self.adj.n, "edges": self.adj.n_edges,
            "gmcar": {"tau1": float(np.sqrt(g.tau1_2)), "tau2": float(np.sqrt(g.tau2_2)),
                      "rho1": g.rho1, "rho2": g.rho2, "eta0": g.eta0, "eta1": g.eta1},
            "beta": [list(b) for b in self.beta], "seed": self.seed, "replicates": self.replicates,
        }


def default_protocol(eta1: float = -0.04, eta0: float = 0.26, seed: int = 2013,
                     replicates: int = 10) -> SimProtocol:
    """Fixture protocol: 10x12 grid, frozen variances and covariate."""
    adj = grid_lattice(10, 12)
    ids, cov, var = load_fixture()
    if list(ids) != list(adj.ids):
        raise SimulationError("fixture areas do not match the 10x12 grid")
    g = GmcarParams.from_sd(**{**DEFAULT_GMCAR, "eta0": eta0, "eta1": eta1})
    return SimProtocol(adj=adj, gmcar=g, beta=DEFAULT_BETA, covariate=cov, sampling_vars=var,
                       seed=seed, replicates=replicates)


PROTOCOL_KEYS = {
    "lattice", "gmcar.eta0", "gmcar.eta1", "gmcar.rho1", "gmcar.rho2", "gmcar.tau1", "gmcar.tau2",
    "beta.1", "beta.2", "variances.path", "variances.constant", "covariates.path",
    "covariates.synthetic", "seed", "replicates",
}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _read_column_file(path: str, adj: Adjacency, columns: list[str]) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != adj.n:
        raise ValueError(f"{path}: {len(rows)} rows but lattice has {adj.n} areas")
    out = np.empty((adj.n, len(columns)))
    seen = set()
    for r in rows:
        i = adj.index_of(r["area_id"])
        seen.add(i)
        out[i] = [float(r[c]) for c in columns]
    if len(seen) != adj.n:
        raise ValueError(f"{path}: duplicate area rows")
    return out


def protocol_from_mapping(cfg: dict, base_dir: str = ".") -> SimProtocol:
    """Build a protocol from a nested key/value mapping (unknown keys raise).

    ``lattice`` is ``"grid:RxC"``, ``"default"`` or a neighbor-list path.
    ``variances.path`` / ``covariates.path`` point at CSVs keyed by
    ``area_id`` (columns ``var1,var2`` and ``covariate``); ``covariates.synthetic``
    is an integer seed.  Missing keys fall back to the fixture defaults.
    """
    flat = _flatten(cfg)
    unknown = sorted(set(flat) - PROTOCOL_KEYS)
    if unknown:
        raise ValueError(f"unknown protocol keys: {', '.join(unknown)}")

    def path(p):
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    lattice = str(flat.get("lattice", "default"))
    if lattice == "default":
        base = default_protocol()
        adj, cov, var = base.adj, base.covariate, base.sampling_vars
    else:
        if lattice.startswith("grid:"):
            r, c = lattice[5:].lower().split("x")
            adj = grid_lattice(int(r), int(c))
        else:
            adj = read_neighbor_list(path(lattice))
        cov = synthetic_covariate(adj, 1)
        var = synthetic_variances(adj.n, 2, 2)
    if "covariates.path" in flat and "covariates.synthetic" in flat:
        raise ValueError("give covariates.path or covariates.synthetic, not both")
    if "covariates.path" in flat:
        cov = _read_column_file(path(flat["covariates.path"]), adj, ["covariate"])
    elif "covariates.synthetic" in flat:
        cov = synthetic_covariate(adj, int(flat["covariates.synthetic"]))
    if "variances.path" in flat and "variances.constant" in flat:
        raise ValueError("give variances.path or variances.constant, not both")
    if "variances.path" in flat:
        var = _read_column_file(path(flat["variances.path"]), adj, ["var1", "var2"])
    elif "variances.constant" in flat:
        var = np.full((adj.n, 2), float(flat["variances.constant"]))
    g = {k: float(flat.get(f"gmcar.{k}", v)) for k, v in DEFAULT_GMCAR.items()}
    beta = (flat.get("beta.1", DEFAULT_BETA[0]), flat.get("beta.2", DEFAULT_BETA[1]))
    return SimProtocol(adj=adj, gmcar=GmcarParams.from_sd(**g), beta=beta, covariate=cov,
                       sampling_vars=var, seed=int(flat.get("seed", 2013)),
                       replicates=int(flat.get("replicates", 10)))


def load_protocol(path: str) -> SimProtocol:
    """Read a YAML or JSON protocol file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        cfg = json.loads(text)
    else:
        import yaml

        cfg = yaml.safe_load(text) or {}
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: protocol must be a mapping")
    return protocol_from_mapping(cfg, os.path.dirname(os.path.abspath(path)))


@dataclass
class SimReplicate:
    """One generated dataset with its truth.  Arrays are ``(n, 2)``."""

    adj: Adjacency
    X: list
    y: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    sampling_vars: np.ndarray
    replicate: int

    def to_dataset(self) -> SurveyDataset:
        return SurveyDataset(adj=self.adj, y=self.y, sampling_cov=self.sampling_vars, X=self.X)


def replicate_seed(seed: int, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, replicate])


def make_dataset(protocol: SimProtocol, replicate: int = 0) -> SimReplicate:
    """Generate replicate ``replicate``: ``theta = X beta + u``, ``Y = theta + eps``."""
    field_ss, noise_ss = replicate_seed(protocol.seed, replicate).spawn(2)
    n = protocol.adj.n
    u = draw_gmcar_field(protocol.gmcar, protocol.adj, np.random.default_rng(field_ss))
    U = u.reshape(2, n).T
    X = protocol.X
    xb = np.column_stack([X[j] @ np.asarray(protocol.beta[j]) for j in range(2)])
    theta = xb + U
    U = theta - xb  # stored so that theta - X beta == u holds bitwise
    eps = np.sqrt(protocol.sampling_vars) * np.random.default_rng(noise_ss).standard_normal((n, 2))
    return SimReplicate(adj=protocol.adj, X=X, y=theta + eps, theta=theta, u=U,
                        sampling_vars=protocol.sampling_vars.copy(), replicate=replicate)


def fit_seed(seed: int, replicate: int, kind: str) -> int:
    """Seed for fitting ``kind`` to replicate ``replicate`` (shared with the CLI)."""
    return int(np.random.SeedSequence([seed, replicate, 1 + MODELS.index(kind)]).generate_state(1)[0])


def _as_spec(model) -> ModelSpec:
    return model if isinstance(model, ModelSpec) else ModelSpec(str(model))


def _sim_job(args):
    protocol, r, model, cfg = args
    rep = make_dataset(protocol, r)
    try:
        draws = fit(rep.to_dataset(), model, replace(cfg, seed=fit_seed(cfg.seed, r, model.kind)))
    except Exception as err:
        raise SimulationError(f"replicate {r}, model {model.kind}: {err}", r, model.kind) from err
    return posterior_mse(draws.theta, rep.theta).sq_error


@dataclass
class SimStudyReport:
    """Squared errors per replicate: ``sq_error[model]`` is ``(R, n, 2)``."""

    models: list
    ids: list
    sq_error: dict
    protocol: dict
    mcmc: dict
    outcomes: list = field(default_factory=lambda: ["1", "2"])

    def mse(self, model) -> np.ndarray:
        """``(R, 2)`` per-replicate overall MSE."""
        return self.sq_error[model].mean(axis=1)

    def replicate_report(self, r: int) -> EvaluationReport:
        return EvaluationReport.build("mse", self.ids, self.outcomes,
                                      {k: self.sq_error[k][r] for k in self.models})

    def percent_better(self, a, b) -> np.ndarray:
        """``(R, 2)``: percent of locations where ``a`` has lower error than ``b``."""
        ea, eb = self.sq_error[a], self.sq_error[b]
        return np.array([[percent_better(ea[r, :, j], eb[r, :, j])[0] for j in range(2)]
                         for r in range(ea.shape[0])])

    def wins(self, a, b) -> np.ndarray:
        """Per outcome: replicates in which ``a`` has lower overall MSE than ``b``."""
        return (self.mse(a) < self.mse(b)).sum(axis=0)

    def lowest(self, a) -> np.ndarray:
        """Per outcome: replicates in which ``a`` beats every other model."""
        others = [self.mse(b) for b in self.models if b != a]
        if not others:
            return np.full(2, self.mse(a).shape[0])
        return np.all([self.mse(a) < o for o in others], axis=0).sum(axis=0)

    def to_dict(self) -> dict:
        pairs = [(a, b) for a in self.models for b in self.models if a != b]
        return {
            "protocol": self.protocol,
            "mcmc": self.mcmc,
            "models": self.models,
            "mean_mse": {k: dict(zip(self.outcomes, self.mse(k).mean(axis=0).tolist())) for k in self.models},
            "replicate_mse": {k: self.mse(k).tolist() for k in self.models},
            "lowest_mse_count": {k: dict(zip(self.outcomes, self.lowest(k).tolist())) for k in self.models},
            "wins": {f"{a}_over_{b}": dict(zip(self.outcomes, self.wins(a, b).tolist())) for a, b in pairs},
            "mean_percent_better": {
                f"{a}_over_{b}": dict(zip(self.outcomes, self.percent_better(a, b).mean(axis=0).tolist()))
                for a, b in pairs},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "model", "outcome", "mse"])
        for k in self.models:
            for r, row in enumerate(self.mse(k)):
                for o, v in zip(self.outcomes, row):
                    w.writerow([r, k, o, repr(float(v))])
        return buf.getvalue()


def run_sim_study(protocol: SimProtocol, models, cfg: McmcConfig,
                  n_jobs: int | None = None) -> SimStudyReport:
    """Fit every model to every replicate and score against the truth."""
    specs = [_as_spec(m) for m in models]
    if not specs:
        raise ValueError("need at least one model")
    names = [s.kind for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate models")
    jobs = [(protocol, r, s, cfg) for r in range(protocol.replicates) for s in specs]
    workers = workers_from_env(n_jobs)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            out = list(ex.map(_sim_job, jobs))
    else:
        out = [_sim_job(j) for j in jobs]
    R, K = protocol.replicates, len(specs)
    sq = {names[k]: np.stack([out[r * K + k] for r in range(R)]) for k in range(K)}
    return SimStudyReport(models=names, ids=list(protocol.adj.ids), sq_error=sq,
                          protocol=protocol.to_dict(), mcmc=asdict(cfg))
