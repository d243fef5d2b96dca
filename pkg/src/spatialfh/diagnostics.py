"""Chain diagnostics (split-R-hat, ESS, MCSE) and exploratory OLS checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .lattice import MORAN_SEED, MoranResult, morans_i


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return x


def autocorr(x: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation of a 1-d series via FFT."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    x = x - x.mean()
    f = np.fft.rfft(x, n=2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    if acov[0] <= 0:
        return np.r_[1.0, np.zeros(n - 1)]
    return acov / acov[0]


def ess(chains) -> float:
    """Effective sample size with Geyer's initial monotone sequence.

    ``chains`` is ``(n_chains, n_draws)`` or a single 1-d chain.
    """
    x = _as_chains(chains)
    c, s = x.shape
    if s < 4:
        return float(c * s)
    if np.all(x.var(axis=1) == 0):
        return float(c * s)
    rho = np.mean([autocorr(ch) for ch in x], axis=0)
    # pair sums, truncated at the first negative and made monotone
    pairs = rho[:-1:2] + rho[1::2]
    k = np.argmax(pairs < 0) if np.any(pairs < 0) else len(pairs)
    pairs = np.minimum.accumulate(pairs[:k])
    tau = -1.0 + 2.0 * pairs.sum()
    return float(c * s / max(tau, 1.0 / np.log10(c * s + 10)))


def mcse(chains) -> float:
    """Monte-Carlo standard error of the mean."""
    x = _as_chains(chains)
    return float(x.std(ddof=1) / np.sqrt(ess(x))) if x.size > 1 else np.inf


def split_rhat(chains) -> float:
    """Split-R-hat of Gelman et al. (each chain halved)."""
    x = _as_chains(chains)
    s = x.shape[1] // 2
    if s < 2:
        return np.nan
    halves = np.concatenate([x[:, :s], x[:, -s:]], axis=0)
    w = halves.var(axis=1, ddof=1).mean()
    b = s * halves.mean(axis=1).var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else np.inf
    var_plus = (s - 1) / s * w + b / s
    return float(np.sqrt(var_plus / w))


@dataclass
class OlsFit:
    coef: np.ndarray
    se: np.ndarray
    p_values: np.ndarray
    residuals: np.ndarray
    r2: float


def ols(y: np.ndarray, X: np.ndarray) -> OlsFit:
    n, p = X.shape
    if n <= p:
        raise ValueError(f"OLS needs n > p (n={n}, p={p})")
    if np.linalg.matrix_rank(X) < p:
        raise ValueError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = n - p
    s2 = resid @ resid / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    pv = 2 * stats.t.sf(np.abs(t), dof)
    tss = ((y - y.mean()) ** 2).sum()
    r2 = 1 - (resid @ resid) / tss if tss > 0 else 1.0
    return OlsFit(coef=coef, se=se, p_values=pv, residuals=resid, r2=float(r2))


@dataclass
class OlsDiagnostics:
    fits: list
    residual_correlation: np.ndarray  # (m, m) Pearson r
    correlation_p_values: np.ndarray
    moran: list

    def to_dict(self, outcomes=None) -> dict:
        m = len(self.fits)
        outcomes = outcomes or [str(j + 1) for j in range(m)]
        return {
            "outcomes": {
                o: {
                    "coef": f.coef.tolist(),
                    "se": f.se.tolist(),
                    "p_values": f.p_values.tolist(),
                    "r2": f.r2,
                    "moran_I": mr.I,
                    "moran_p_value": mr.p_value,
                    "moran_permutations": mr.permutations,
                }
                for o, f, mr in zip(outcomes, self.fits, self.moran)
            },
            "residual_correlation": self.residual_correlation.tolist(),
            "residual_correlation_p_values": self.correlation_p_values.tolist(),
        }


def ols_diagnostics(data, permutations: int = 9999, seed: int = MORAN_SEED) -> OlsDiagnostics:
    """Per-outcome OLS, Pearson correlation of residuals and Moran's I.

    Raises ``ValueError`` for rank-deficient designs or when a residual
    vector is identically zero (correlation and Moran's I undefined).
    """
    fits = [ols(data.y[:, j], Xj) for j, Xj in enumerate(data.X)]
    m = len(fits)
    scale = max(1.0, float(np.abs(data.y).max()))
    for j, f in enumerate(fits):
        if np.allclose(f.residuals, 0.0, atol=1e-12 * scale):
            raise ValueError(f"outcome {j + 1} is fitted exactly; residual diagnostics undefined")
    r = np.eye(m)
    pv = np.zeros((m, m))
    for a in range(m):
        for b in range(a + 1, m):
            res = stats.pearsonr(fits[a].residuals, fits[b].residuals)
            r[a, b] = r[b, a] = res.statistic
            pv[a, b] = pv[b, a] = res.pvalue
    moran: list[MoranResult] = [
        morans_i(f.residuals, data.adj, permutations=permutations, seed=seed) for f in fits
    ]
    return OlsDiagnostics(fits=fits, residual_correlation=r, correlation_p_values=pv, moran=moran)

