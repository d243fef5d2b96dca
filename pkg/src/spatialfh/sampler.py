"""Metropolis-within-Gibbs samplers for multivariate Fay-Herriot models.

Data model: ``Y_i | theta_i ~ N(theta_i, Sigma_i)`` independently over areas,
``theta_ij = x_ij' beta_j + u_ij`` with the latent field ``u`` following one
of three structures (``iw``, ``separable``, ``gmcar``; see
:mod:`spatialfh.covstruct`).

One sweep updates, in order: ``beta`` (conjugate Gaussian), ``u`` (one joint
Gaussian block), ``Sigma_IW`` (conjugate inverse-Wishart, IW and separable
models), then every scalar structure parameter by univariate random-walk
Metropolis on a transformed scale (logit for ``rho``, log for ``tau``,
identity for ``eta``).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, stats

from .covstruct import GmcarParams, IwStructure, SeparableStructure
from .dataset import SurveyDataset
from .diagnostics import ess, split_rhat
from .lattice import Adjacency

MODELS = ("iw", "separable", "gmcar")
RHAT_WARN = 1.05


class SamplerError(RuntimeError):
    """Numerical failure inside the sampler (carries the iteration index)."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


@dataclass
class PriorSpec:
    """Prior hyperparameters.

    The inverse-Wishart convention is ``p(S) ∝ |S|^{-(df+m+1)/2} exp(-tr(scale S^-1)/2)``.
    ``iw_scale=None`` means ``I_m`` and ``iw_df=None`` means ``m``.
    ``tau_bounds`` bound the conditional standard deviations (not variances).
    ``beta_sd=None`` gives the flat improper prior on ``beta``.
    """

    iw_scale: np.ndarray | None = None
    iw_df: float | None = None
    rho_bounds: tuple = (0.0, 1.0)
    tau_bounds: tuple = (0.001, 100.0)
    eta_sd: float = 10.0
    beta_sd: float | None = None

    def __post_init__(self):
        lo, hi = self.rho_bounds
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"rho_bounds must satisfy 0 <= lo < hi <= 1, got {self.rho_bounds}")
        lo, hi = self.tau_bounds
        if not 0.0 < lo < hi:
            raise ValueError(f"tau_bounds must satisfy 0 < lo < hi, got {self.tau_bounds}")
        if not self.eta_sd > 0:
            raise ValueError("eta_sd must be positive")
        if self.beta_sd is not None and not self.beta_sd > 0:
            raise ValueError("beta_sd must be positive")

    def iw(self, m: int) -> tuple[np.ndarray, float]:
        scale = np.eye(m) if self.iw_scale is None else np.atleast_2d(np.asarray(self.iw_scale, float))
        df = float(m if self.iw_df is None else self.iw_df)
        if scale.shape != (m, m):
            raise ValueError(f"iw_scale must be {m}x{m}")
        if df < m:
            raise ValueError(f"iw_df must be >= m ({m}), got {df}")
        return scale, df


@dataclass
class ModelSpec:
    """Which latent structure to fit, plus priors.

    ``fixed`` pins parameters at given values for the whole run (``beta`` as a
    list of per-outcome vectors, ``sigma_iw`` as a matrix, scalars by name:
    ``rho``, ``rho1``, ``rho2``, ``tau1``, ``tau2``, ``eta0``, ``eta1``).
    ``init`` overrides starting values with the same keys.
    """

    kind: str
    prior: PriorSpec = field(default_factory=PriorSpec)
    fixed: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ValueError(f"unknown model {self.kind!r}; choose from {MODELS}")
        allowed = {"beta", "sigma_iw", "rho", "rho1", "rho2", "tau1", "tau2", "eta0", "eta1"}
        for d in (self.fixed, self.init):
            bad = set(d) - allowed
            if bad:
                raise ValueError(f"unknown parameter names {sorted(bad)}")


@dataclass
class McmcConfig:
    """Run length and proposal settings.

    Draws kept per chain: iterations ``t`` in ``[burn_in, iterations)`` with
    ``(t - burn_in + 1) % thin == 0``, i.e. ``(iterations - burn_in) // thin``.
    ``prior_only`` drops the latent-field likelihood from the structure
    updates, so their chains target the priors (a sampler self-check).
    """

    iterations: int = 5000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 2013
    chains: int = 1
    proposal_sds: dict = field(default_factory=dict)
    adapt: bool = True
    target_accept: float = 0.44
    prior_only: bool = False

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1 or self.chains < 1:
            raise ValueError("thin and chains must be >= 1")
        if any(not v > 0 for v in self.proposal_sds.values()):
            raise ValueError("proposal_sds must be positive")

    @property
    def n_keep(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


DEFAULT_PROPOSAL_SD = {"rho": 0.5, "rho1": 0.5, "rho2": 0.5,
                       "tau1": 0.2, "tau2": 0.2, "eta0": 0.1, "eta1": 0.1}


class _Walker:
    """Univariate random-walk Metropolis on a transformed scale."""

    def __init__(self, name, kind, bounds, sd, prior_sd=None):
        self.name, self.kind = name, kind
        self.lo, self.hi = bounds
        self.log_sd = math.log(sd)
        self.prior_sd = prior_sd
        self.n_prop = self.n_acc = 0

    def _to_z(self, x):
        if self.kind == "logit":
            p = (x - self.lo) / (self.hi - self.lo)
            return math.log(p) - math.log1p(-p)
        if self.kind == "log":
            return math.log(x)
        return x

    def _from_z(self, z):
        if self.kind == "logit":
            return self.lo + (self.hi - self.lo) / (1.0 + math.exp(-z))
        if self.kind == "log":
            return math.exp(z)
        return z

    def _log_prior_jac(self, x):
        if self.kind == "logit":
            if not self.lo < x < self.hi:
                return -math.inf
            return math.log(x - self.lo) + math.log(self.hi - x)
        if self.kind == "log":
            if not self.lo <= x <= self.hi:
                return -math.inf
            return math.log(x)
        return -0.5 * (x / self.prior_sd) ** 2

    def step(self, x: float, logtarget: Callable[[float], float], rng, gamma=None, target=0.44, it=None):
        cur = logtarget(x)
        if not math.isfinite(cur):
            raise SamplerError(f"non-finite log-density for {self.name}={x!r}", it)
        z = self._to_z(x) + math.exp(self.log_sd) * rng.standard_normal()
        try:
            xp = self._from_z(z)
        except OverflowError:
            xp = math.nan
        lpj = self._log_prior_jac(xp) if math.isfinite(xp) else -math.inf
        if lpj == -math.inf or (self.kind == "logit" and not self.lo < xp < self.hi):
            accept = False
        else:
            prop = logtarget(xp)
            log_r = prop + lpj - cur - self._log_prior_jac(x)
            accept = math.log(rng.uniform()) < log_r
        if gamma is None:
            self.n_prop += 1
            self.n_acc += accept
        else:
            self.log_sd += gamma * ((1.0 if accept else 0.0) - target)
        return xp if accept else x

    @property
    def acceptance(self) -> float:
        return self.n_acc / self.n_prop if self.n_prop else math.nan


def _sym_names(m):
    return [(j, k) for j in range(m) for k in range(j, m)]


def _draw_iw(df, scale, rng) -> np.ndarray:
    S = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    return np.atleast_2d(S)


class _Latent:
    """Per-structure state and updates; subclasses fill in the details."""

    block_diagonal = False
    mh_names: tuple = ()

    def __init__(self, data: SurveyDataset, spec: ModelSpec, cfg: McmcConfig):
        self.adj = data.adj
        self.n, self.m = data.n, data.m
        self.deg = data.adj.degrees
        self.W = data.adj.W
        self.Wd = data.adj.W.toarray()
        self.spec, self.prior, self.cfg = spec, spec.prior, cfg
        self.walkers = {}
        for name in self.mh_names:
            if name in spec.fixed:
                continue
            sd = cfg.proposal_sds.get(name, DEFAULT_PROPOSAL_SD[name])
            if name.startswith("rho"):
                self.walkers[name] = _Walker(name, "logit", self.prior.rho_bounds, sd)
            elif name.startswith("tau"):
                self.walkers[name] = _Walker(name, "log", self.prior.tau_bounds, sd)
            else:
                self.walkers[name] = _Walker(name, "identity", (-math.inf, math.inf), sd, self.prior.eta_sd)

    def car(self, rho):
        return np.diag(self.deg) - rho * self.Wd

    def _value(self, name, default):
        if name in self.spec.fixed:
            return self.spec.fixed[name]
        return self.spec.init.get(name, default)

    def _mh(self, name, logtarget, rng, it):
        w = self.walkers.get(name)
        if w is None:
            return
        gamma = None
        if it < self.cfg.burn_in:
            if not self.cfg.adapt:
                gamma = 0.0
            else:
                gamma = (it + 1) ** -0.6
        self.p[name] = w.step(self.p[name], logtarget, rng, gamma, self.cfg.target_accept, it)


class _IwLatent(_Latent):
    block_diagonal = True

    def init(self, v0):
        S = self._value("sigma_iw", np.diag(v0))
        self.sigma = np.atleast_2d(np.asarray(S, float))
        IwStructure(self.sigma)
        self.p = {}

    def block_precision(self):
        return np.linalg.inv(self.sigma)

    def update(self, U, rng, it):
        if "sigma_iw" in self.spec.fixed:
            return
        scale, df = self.prior.iw(self.m)
        if not self.cfg.prior_only:
            scale = scale + U.T @ U
            df = df + self.n
        self.sigma = _draw_iw(df, scale, rng)

    def scalars(self):
        return {f"sigma_iw[{j + 1}][{k + 1}]": self.sigma[j, k] for j, k in _sym_names(self.m)}

    def structure(self):
        return IwStructure(self.sigma)


class _SeparableLatent(_Latent):
    mh_names = ("rho",)

    def init(self, v0):
        self.p = {"rho": float(self._value("rho", 0.5))}
        S = self._value("sigma_iw", np.diag(v0) * self.deg.mean() * 0.5)
        self.sigma = np.atleast_2d(np.asarray(S, float))
        SeparableStructure(self.p["rho"], self.sigma)

    def dense_precision(self):
        return np.kron(self.car(self.p["rho"]), np.linalg.inv(self.sigma))

    def update(self, U, rng, it):
        if "sigma_iw" not in self.spec.fixed:
            scale, df = self.prior.iw(self.m)
            if not self.cfg.prior_only:
                scale = scale + U.T @ (self.car(self.p["rho"]) @ U)
                df = df + self.n
            self.sigma = _draw_iw(df, scale, rng)
        if self.cfg.prior_only:
            self._mh("rho", lambda r: 0.0, rng, it)
            return
        sinv = np.linalg.inv(self.sigma)
        a = np.sum(sinv * (U.T @ (self.deg[:, None] * U)))
        b = np.sum(sinv * (U.T @ (self.W @ U)))
        m, adj = self.m, self.adj
        self._mh("rho", lambda r: 0.5 * (m * adj.logdet_car(r) - a + r * b), rng, it)

    def scalars(self):
        out = {"rho": self.p["rho"]}
        out.update({f"sigma_iw[{j + 1}][{k + 1}]": self.sigma[j, k] for j, k in _sym_names(self.m)})
        return out

    def structure(self):
        return SeparableStructure(self.p["rho"], self.sigma)


class _GmcarLatent(_Latent):
    mh_names = ("rho1", "tau1", "eta0", "eta1", "rho2", "tau2")

    def init(self, v0):
        lo, hi = self.prior.tau_bounds
        tau = np.clip(np.sqrt(v0 * self.deg.mean() * 0.5), lo * 1.01, hi * 0.99)
        self.p = {
            "tau1": float(self._value("tau1", tau[0])),
            "tau2": float(self._value("tau2", tau[1])),
            "rho1": float(self._value("rho1", 0.5)),
            "rho2": float(self._value("rho2", 0.5)),
            "eta0": float(self._value("eta0", 0.0)),
            "eta1": float(self._value("eta1", 0.0)),
        }
        self.structure()

    def structure(self):
        p = self.p
        return GmcarParams.from_sd(p["tau1"], p["tau2"], p["rho1"], p["rho2"], p["eta0"], p["eta1"])

    def dense_precision(self):
        p, n = self.p, self.n
        Q1 = self.car(p["rho1"]) / p["tau1"] ** 2
        Q2 = self.car(p["rho2"]) / p["tau2"] ** 2
        A = p["eta1"] * self.Wd
        A[np.diag_indices(n)] += p["eta0"]
        Q1A = Q1 @ A
        P = np.empty((2 * n, 2 * n))
        P[0::2, 0::2] = Q1
        P[0::2, 1::2] = -Q1A
        P[1::2, 0::2] = -Q1A.T
        P[1::2, 1::2] = Q2 + A @ Q1A
        return P

    def _car_term(self, x, tau, rho):
        """``log N(x; 0, tau^2 (D - rho W)^-1)`` without the 2*pi constant."""
        q = x @ (self.deg * x) - rho * (x @ (self.W @ x))
        return 0.5 * (self.adj.logdet_car(rho) - 2 * self.n * math.log(tau) - q / tau ** 2)

    def update(self, U, rng, it):
        p = self.p
        if self.cfg.prior_only:
            for name in self.mh_names:
                self._mh(name, lambda v: 0.0, rng, it)
            return
        u1, u2 = U[:, 0], U[:, 1]
        Wu2 = self.W @ u2

        def resid():
            return u1 - p["eta0"] * u2 - p["eta1"] * Wu2

        r = resid()
        self._mh("rho1", lambda v: self._car_term(r, p["tau1"], v), rng, it)
        self._mh("tau1", lambda v: self._car_term(r, v, p["rho1"]), rng, it)
        self._mh("eta0", lambda v: self._car_term(u1 - v * u2 - p["eta1"] * Wu2, p["tau1"], p["rho1"]), rng, it)
        self._mh("eta1", lambda v: self._car_term(u1 - p["eta0"] * u2 - v * Wu2, p["tau1"], p["rho1"]), rng, it)
        self._mh("rho2", lambda v: self._car_term(u2, p["tau2"], v), rng, it)
        self._mh("tau2", lambda v: self._car_term(u2, v, p["rho2"]), rng, it)

    def scalars(self):
        p = self.p
        return {**p, "tau1_sq": p["tau1"] ** 2, "tau2_sq": p["tau2"] ** 2}


_LATENT = {"iw": _IwLatent, "separable": _SeparableLatent, "gmcar": _GmcarLatent}


def _initial_fit(data: SurveyDataset):
    """Per-outcome OLS starting values and a moment guess of the latent variance."""
    betas, v0 = [], np.empty(data.m)
    for j, Xj in enumerate(data.X):
        b, *_ = np.linalg.lstsq(Xj, data.y[:, j], rcond=None)
        r = data.y[:, j] - Xj @ b
        s2 = r.var() if data.n > 1 else 1.0
        v0[j] = max(s2 - data.sampling_cov[:, j, j].mean(), 0.1 * s2, 1e-6)
        betas.append(b)
    return betas, v0


class _Chain:
    def __init__(self, data: SurveyDataset, spec: ModelSpec, cfg: McmcConfig, rng):
        self.data, self.spec, self.cfg, self.rng = data, spec, cfg, rng
        n, m = data.n, data.m
        self.n, self.m = n, m
        self.Prec = data.sampling_precision
        self.sizes = [Xj.shape[1] for Xj in data.X]
        self.offsets = np.r_[0, np.cumsum(self.sizes)]
        P = self.offsets[-1]
        Pb = np.zeros((P, P))
        for j in range(m):
            for k in range(m):
                Pb[self.offsets[j]:self.offsets[j + 1], self.offsets[k]:self.offsets[k + 1]] = (
                    data.X[j].T @ (self.Prec[:, j, k][:, None] * data.X[k]))
        if spec.prior.beta_sd is not None:
            Pb += np.eye(P) / spec.prior.beta_sd ** 2
        try:
            self.Lb = np.linalg.cholesky(Pb)
        except np.linalg.LinAlgError:
            raise SamplerError("beta full conditional is improper (rank-deficient design)") from None
        rows = (np.arange(n)[:, None, None] * m + np.arange(m)[None, :, None]) * np.ones((1, 1, m), int)
        cols = (np.arange(n)[:, None, None] * m + np.arange(m)[None, None, :]) * np.ones((1, m, 1), int)
        self.bd_rows, self.bd_cols = rows.ravel(), cols.ravel()

        betas, v0 = _initial_fit(data)
        if "beta" in spec.fixed:
            betas = [np.asarray(b, float) for b in spec.fixed["beta"]]
        elif "beta" in spec.init:
            betas = [np.asarray(b, float) for b in spec.init["beta"]]
        if [len(b) for b in betas] != self.sizes:
            raise ValueError(f"beta must have per-outcome lengths {self.sizes}")
        self.beta = np.concatenate(betas)
        self.U = np.zeros((n, m))
        self.latent = _LATENT[spec.kind](data, spec, cfg)
        self.latent.init(v0)

    def XB(self, beta):
        return np.column_stack([Xj @ beta[self.offsets[j]:self.offsets[j + 1]]
                                for j, Xj in enumerate(self.data.X)])

    def update_beta(self):
        if "beta" in self.spec.fixed:
            return
        w = np.einsum("ijk,ik->ij", self.Prec, self.data.y - self.U)
        b = np.concatenate([Xj.T @ w[:, j] for j, Xj in enumerate(self.data.X)])
        mean = linalg.cho_solve((self.Lb, True), b, check_finite=False)
        z = self.rng.standard_normal(len(b))
        self.beta = mean + linalg.solve_triangular(self.Lb, z, lower=True, trans="T", check_finite=False)

    def update_u(self, it):
        rhs = np.einsum("ijk,ik->ij", self.Prec, self.data.y - self.XB(self.beta))
        z = self.rng.standard_normal((self.n, self.m))
        lat = self.latent
        try:
            if lat.block_diagonal:
                Pi = lat.block_precision()[None, :, :] + self.Prec
                L = np.linalg.cholesky(Pi)
                mean = np.linalg.solve(Pi, rhs[..., None])[..., 0]
                noise = np.linalg.solve(np.swapaxes(L, 1, 2), z[..., None])[..., 0]
                self.U = mean + noise
            else:
                P = lat.dense_precision()
                P[self.bd_rows, self.bd_cols] += self.Prec.ravel()
                L = np.linalg.cholesky(P)
                mean = linalg.cho_solve((L, True), rhs.ravel(), check_finite=False)
                noise = linalg.solve_triangular(L, z.ravel(), lower=True, trans="T", check_finite=False)
                self.U = (mean + noise).reshape(self.n, self.m)
        except np.linalg.LinAlgError:
            raise SamplerError("Cholesky of the latent full conditional failed", it) from None
        if not np.all(np.isfinite(self.U)):
            raise SamplerError("non-finite latent draw", it)

    def run(self):
        cfg = self.cfg
        S = cfg.n_keep
        out_beta = np.empty((S, len(self.beta)))
        out_u = np.empty((S, self.n, self.m))
        names = list(self.latent.scalars())
        out_p = np.empty((S, len(names)))
        s = 0
        for it in range(cfg.iterations):
            self.update_beta()
            self.update_u(it)
            self.latent.update(self.U, self.rng, it)
            if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0 and s < S:
                out_beta[s] = self.beta
                out_u[s] = self.U
                out_p[s] = list(self.latent.scalars().values())
                s += 1
        acc = {k: w.acceptance for k, w in self.latent.walkers.items()}
        sds = {k: math.exp(w.log_sd) for k, w in self.latent.walkers.items()}
        return out_beta, out_u, dict(zip(names, out_p.T)), acc, sds


@dataclass
class PosteriorDraws:
    """Retained draws with a leading ``(chain, draw)`` axis pair.

    ``u`` and ``theta`` are ``(chains, draws, n, m)``; ``beta[j]`` is
    ``(chains, draws, p_j)``; ``params`` maps scalar structure parameters to
    ``(chains, draws)`` arrays.
    """

    model: str
    ids: tuple
    outcomes: list
    beta: list
    u: np.ndarray
    theta: np.ndarray
    params: dict
    acceptance: dict
    proposal_sds: dict
    config: dict
    warnings: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.u.shape[0]

    @property
    def n_draws(self) -> int:
        return self.u.shape[1]

    def theta_mean(self) -> np.ndarray:
        return self.theta.mean(axis=(0, 1))

    def flat(self, include_theta: bool = False) -> tuple[list, np.ndarray]:
        """Column names and a ``(chains*draws, K)`` matrix of scalar draws."""
        names, cols = [], []
        for j, b in enumerate(self.beta):
            for k in range(b.shape[-1]):
                names.append(f"beta[{j + 1}][{k + 1}]")
                cols.append(b[..., k])
        for name, v in self.params.items():
            names.append(name)
            cols.append(v)
        n, m = self.u.shape[2:]
        blocks = [("u", self.u)] + ([("theta", self.theta)] if include_theta else [])
        for label, arr in blocks:
            for i in range(n):
                for j in range(m):
                    names.append(f"{label}[{i + 1}][{j + 1}]")
                    cols.append(arr[:, :, i, j])
        mat = np.stack([c.reshape(-1) for c in cols], axis=1)
        return names, mat

    def to_csv(self, header_comment: str | None = None, include_theta: bool = False) -> str:
        names, mat = self.flat(include_theta)
        C, S = self.n_chains, self.n_draws
        lines = [f"# {header_comment}"] if header_comment else []
        lines.append(",".join(["chain", "draw"] + names))
        for r in range(C * S):
            lines.append(",".join([str(r // S + 1), str(r % S + 1)] + [repr(float(v)) for v in mat[r]]))
        return "\n".join(lines) + "\n"

    def structure_at(self, chain: int, draw: int):
        """Latent structure object for one retained draw."""
        return structure_from_params(self.model, {k: v[chain, draw] for k, v in self.params.items()},
                                     self.u.shape[3])


def structure_from_params(kind: str, p: dict, m: int):
    def sigma():
        S = np.empty((m, m))
        for j, k in _sym_names(m):
            S[j, k] = S[k, j] = p[f"sigma_iw[{j + 1}][{k + 1}]"]
        return S

    if kind == "iw":
        return IwStructure(sigma())
    if kind == "separable":
        return SeparableStructure(float(p["rho"]), sigma())
    return GmcarParams.from_sd(p["tau1"], p["tau2"], p["rho1"], p["rho2"], p["eta0"], p["eta1"])


def _check_fit_inputs(data: SurveyDataset, model: ModelSpec):
    if model.kind == "gmcar" and data.m != 2:
        raise ValueError(f"the GMCAR model needs exactly 2 outcomes, data has {data.m}")
    if model.kind in ("iw", "separable"):
        model.prior.iw(data.m)
    if "beta" in model.fixed and len(model.fixed["beta"]) != data.m:
        raise ValueError("fixed beta needs one vector per outcome")


def chain_seeds(seed: int, chains: int) -> list:
    return np.random.SeedSequence(seed).spawn(chains)


def fit(data: SurveyDataset, model: ModelSpec, cfg: McmcConfig) -> PosteriorDraws:
    """Run ``cfg.chains`` independent chains and collect retained draws.

    Deterministic given ``cfg.seed``.  Raises :class:`SamplerError` on
    numerical failure and ``ValueError`` on inconsistent inputs.
    """
    _check_fit_inputs(data, model)
    results = []
    for ss in chain_seeds(cfg.seed, cfg.chains):
        results.append(_Chain(data, model, cfg, np.random.default_rng(ss)).run())
    beta_all = np.stack([r[0] for r in results])
    u = np.stack([r[1] for r in results])
    params = {k: np.stack([r[2][k] for r in results]) for k in results[0][2]}
    acc = {k: float(np.mean([r[3][k] for r in results])) for k in results[0][3]}
    sds = {k: [r[4][k] for r in results] for k in results[0][4]}
    offsets = np.r_[0, np.cumsum([Xj.shape[1] for Xj in data.X])]
    beta = [beta_all[..., offsets[j]:offsets[j + 1]] for j in range(data.m)]
    theta = np.empty_like(u)
    for j, Xj in enumerate(data.X):
        theta[..., j] = beta[j] @ Xj.T + u[..., j]
    draws = PosteriorDraws(
        model=model.kind, ids=data.ids, outcomes=list(data.outcomes), beta=beta, u=u,
        theta=theta, params=params, acceptance=acc, proposal_sds=sds,
        config={"mcmc": _jsonable(asdict(cfg)), "model": model.kind,
                "prior": _jsonable(asdict(model.prior)), "fixed": _jsonable(model.fixed)},
    )
    _convergence_warnings(draws)
    return draws


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _convergence_warnings(draws: PosteriorDraws):
    checks = {name: v for name, v in draws.params.items()}
    for j, b in enumerate(draws.beta):
        for k in range(b.shape[-1]):
            checks[f"beta[{j + 1}][{k + 1}]"] = b[..., k]
    for name, v in checks.items():
        if draws.n_draws < 8 or np.all(v == v.flat[0]):
            continue
        r = split_rhat(v)
        if r > RHAT_WARN:
            msg = f"{draws.model}: split R-hat {r:.3f} > {RHAT_WARN} for {name}"
            draws.warnings.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)


def _summ(v: np.ndarray) -> dict:
    x = v.reshape(-1)
    q05, med, q95 = np.quantile(x, [0.05, 0.5, 0.95])
    chains = v if v.ndim == 2 else v[None]
    return {
        "mean": float(x.mean()), "median": float(med), "sd": float(x.std(ddof=0)),
        "q05": float(q05), "q95": float(q95),
        "rhat": split_rhat(chains) if chains.shape[1] >= 4 else None,
        "ess": ess(chains),
    }


def posterior_summary(draws: PosteriorDraws, include_latent: bool = True) -> dict:
    """Mean, median, sd, 90% central interval, split-R-hat and ESS per scalar."""
    if draws.n_draws == 0:
        raise ValueError("empty chains")
    out = {}
    for j, b in enumerate(draws.beta):
        for k in range(b.shape[-1]):
            out[f"beta[{j + 1}][{k + 1}]"] = _summ(b[..., k])
    for name, v in draws.params.items():
        out[name] = _summ(v)
        if name in draws.acceptance:
            out[name]["acceptance"] = draws.acceptance[name]
    if include_latent:
        n, m = draws.u.shape[2:]
        for label, arr in (("u", draws.u), ("theta", draws.theta)):
            for i in range(n):
                for j in range(m):
                    out[f"{label}[{i + 1}][{j + 1}]"] = _summ(arr[:, :, i, j])
    return out


def precision_rows(kind: str, structure, adj: Adjacency, i: int) -> np.ndarray:
    """Rows of the area-major latent precision belonging to area ``i``.

    Returns ``R`` with ``R[a, j, b] = Q[(i, a), (j, b)]``, shape ``(m, n, m)``.
    Only local (neighborhood) terms are formed.
    """
    n = adj.n
    e = np.zeros(n)
    e[i] = 1.0

    def car_row(rho):
        row = -rho * (adj.W @ e)
        row[i] += adj.degrees[i]
        return row

    if kind == "iw":
        m = structure.m
        R = np.zeros((m, n, m))
        R[:, i, :] = np.linalg.inv(structure.sigma_iw)
        return R
    if kind == "separable":
        c = car_row(structure.rho)
        return c[None, :, None] * np.linalg.inv(structure.sigma_iw)[:, None, :]
    g = structure
    a_i = g.eta0 * e + g.eta1 * (adj.W @ e)           # row i of A (A symmetric)

    def q1_times(v):                                  # Q1 v
        return (adj.degrees * v - g.rho1 * (adj.W @ v)) / g.tau1_2

    def a_times(v):                                   # A v
        return g.eta0 * v + g.eta1 * (adj.W @ v)

    q1_row = car_row(g.rho1) / g.tau1_2
    q2_row = car_row(g.rho2) / g.tau2_2
    aq1_row = q1_times(a_i)                           # row i of A Q1
    R = np.empty((2, n, 2))
    R[0, :, 0] = q1_row
    R[0, :, 1] = -a_times(q1_row)                     # row i of Q1 A
    R[1, :, 0] = -aq1_row
    R[1, :, 1] = q2_row + a_times(aq1_row)            # row i of Q2 + A Q1 A
    return R


def conditional_latent(kind: str, structure, adj: Adjacency, U: np.ndarray, i: int):
    """Mean and covariance of ``u_i | u_{-i}`` under the full-lattice model."""
    R = precision_rows(kind, structure, adj, i)
    Uo = np.array(U, dtype=float, copy=True)
    Uo[i] = 0.0
    s = np.einsum("ajb,jb->a", R, Uo)
    Qii = R[:, i, :]
    cov = np.linalg.inv(Qii)
    return -cov @ s, cov


def holdout_from_draws(draws: PosteriorDraws, data: SurveyDataset, i: int, rng,
                       with_noise: bool = False) -> dict:
    """Predictive draws at area ``i`` from a fit on ``data`` with ``i`` removed."""
    n, m = data.n, data.m
    keep = np.array([k for k in range(n) if k != i])
    C, S = draws.n_chains, draws.n_draws
    theta = np.empty((C * S, m))
    y = np.empty((C * S, m)) if with_noise else None
    U = np.zeros((n, m))
    L_eps = np.linalg.cholesky(data.sampling_cov[i]) if with_noise else None
    r = 0
    for c in range(C):
        for s in range(S):
            U[keep] = draws.u[c, s]
            mean, cov = conditional_latent(draws.model, draws.structure_at(c, s), data.adj, U, i)
            ui = mean + np.linalg.cholesky(cov) @ rng.standard_normal(m)
            theta[r] = [data.X[j][i] @ draws.beta[j][c, s] + ui[j] for j in range(m)]
            if with_noise:
                y[r] = theta[r] + L_eps @ rng.standard_normal(m)
            r += 1
    out = {"theta": theta}
    if with_noise:
        out["y"] = y
    return out


def predict_holdout(data: SurveyDataset, model: ModelSpec, cfg: McmcConfig, i: int,
                    with_noise: bool = False) -> dict:
    """Refit without ``Y_i`` and draw ``theta_i`` from the model conditional.

    Raises :class:`~spatialfh.lattice.LatticeError` if removing area ``i``
    isolates one of its neighbors.
    """
    sub = data.drop(i)
    draws = fit(sub, model, cfg)
    rng = np.random.default_rng([cfg.seed, 104729, i])
    return holdout_from_draws(draws, data, i, rng, with_noise)
