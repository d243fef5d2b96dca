"""Latent covariance structures for the multivariate Fay-Herriot variants.

Ordering conventions
--------------------
IW and separable structures are *area-major*: ``u = (u_11, .., u_1m, u_21, ..)``.
GMCAR is *outcome-major*: ``u = (u_1', u_2')'`` with ``u_j`` the length-n
field of outcome ``j``.  :func:`outcome_to_area_major` and
:func:`area_to_outcome_major` convert between the two.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.sparse as sp
from scipy import linalg

from .lattice import Adjacency, car_matrix


def _check_spd(S: np.ndarray, name: str) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None
    return S


def _check_rho(rho: float, name: str = "rho") -> None:
    if not 0.0 < rho < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {rho}")


@dataclass(frozen=True)
class IwStructure:
    sigma_iw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma_iw", _check_spd(self.sigma_iw, "sigma_iw"))

    @property
    def m(self) -> int:
        return self.sigma_iw.shape[0]


@dataclass(frozen=True)
class SeparableStructure:
    rho: float
    sigma_iw: np.ndarray

    def __post_init__(self):
        _check_rho(self.rho)
        object.__setattr__(self, "sigma_iw", _check_spd(self.sigma_iw, "sigma_iw"))

    @property
    def m(self) -> int:
        return self.sigma_iw.shape[0]


@dataclass(frozen=True)
class GmcarParams:
    """Bivariate GMCAR: ``u1 | u2 ~ N(A u2, tau1^2 (D - rho1 W)^-1)``,
    ``u2 ~ N(0, tau2^2 (D - rho2 W)^-1)``, ``A = eta0 I + eta1 W``.

    ``tau1_2`` and ``tau2_2`` are variances (squared SD scales).
    """

    tau1_2: float
    tau2_2: float
    rho1: float
    rho2: float
    eta0: float = 0.0
    eta1: float = 0.0

    def __post_init__(self):
        for name in ("tau1_2", "tau2_2"):
            v = getattr(self, name)
            if not v > 0.0:
                raise ValueError(f"{name} must be positive, got {v}")
        _check_rho(self.rho1, "rho1")
        _check_rho(self.rho2, "rho2")
        if not (np.isfinite(self.eta0) and np.isfinite(self.eta1)):
            raise ValueError("eta0 and eta1 must be finite")

    m = 2

    @classmethod
    def from_sd(cls, tau1, tau2, rho1, rho2, eta0=0.0, eta1=0.0) -> "GmcarParams":
        return cls(tau1 ** 2, tau2 ** 2, rho1, rho2, eta0, eta1)

    def link(self, adj: Adjacency) -> sp.csr_matrix:
        """``A = eta0 I + eta1 W``."""
        return (self.eta0 * sp.identity(adj.n, format="csr") + self.eta1 * adj.W).tocsr()


Structure = Union[IwStructure, SeparableStructure, GmcarParams]


def area_to_outcome_major(n: int, m: int) -> np.ndarray:
    """Index array ``p`` with ``u_outcome_major = u_area_major[p]``."""
    return np.arange(n * m).reshape(n, m).T.ravel()


def outcome_to_area_major(n: int, m: int) -> np.ndarray:
    """Index array ``p`` with ``u_area_major = u_outcome_major[p]``."""
    return np.arange(n * m).reshape(m, n).T.ravel()


def iw_covariance(s: IwStructure, n: int) -> np.ndarray:
    """``I_n kron sigma_iw`` (area-major)."""
    return np.kron(np.eye(n), s.sigma_iw)


def iw_precision(s: IwStructure, n: int) -> sp.csr_matrix:
    return sp.kron(sp.identity(n), np.linalg.inv(s.sigma_iw), format="csr")


def separable_precision(s: SeparableStructure, adj: Adjacency) -> sp.csr_matrix:
    """``(D - rho W) kron sigma_iw^-1`` (area-major)."""
    try:
        sinv = linalg.inv(s.sigma_iw)
    except linalg.LinAlgError:
        raise ValueError("sigma_iw is singular") from None
    return sp.kron(car_matrix(adj, s.rho), sinv, format="csr")


def separable_covariance(s: SeparableStructure, adj: Adjacency) -> np.ndarray:
    return np.kron(np.linalg.inv(car_matrix(adj, s.rho).toarray()), s.sigma_iw)


def gmcar_blocks(g: GmcarParams, adj: Adjacency):
    """Return ``(Q1, Q2, A)`` as sparse matrices."""
    Q1 = (car_matrix(adj, g.rho1) / g.tau1_2).tocsr()
    Q2 = (car_matrix(adj, g.rho2) / g.tau2_2).tocsr()
    return Q1, Q2, g.link(adj)


def gmcar_covariance(g: GmcarParams, adj: Adjacency) -> np.ndarray:
    """Dense joint covariance of ``(u1', u2')'`` (outcome-major).

    ``[[S1 + A S2 A', A S2], [S2 A', S2]]`` with ``S_k = Q_k^-1``.  ``A`` is
    symmetric here, so this is the same matrix as the ``A' S2 A`` form.
    """
    Q1, Q2, A = gmcar_blocks(g, adj)
    S1 = np.linalg.inv(Q1.toarray())
    S2 = np.linalg.inv(Q2.toarray())
    A = A.toarray()
    AS2 = A @ S2
    return np.block([[S1 + AS2 @ A.T, AS2], [AS2.T, S2]])


def gmcar_precision(g: GmcarParams, adj: Adjacency) -> sp.csr_matrix:
    """Sparse joint precision ``[[Q1, -Q1 A], [-A' Q1, Q2 + A' Q1 A]]`` (outcome-major)."""
    Q1, Q2, A = gmcar_blocks(g, adj)
    Q1A = Q1 @ A
    return sp.bmat([[Q1, -Q1A], [-Q1A.T, Q2 + A.T @ Q1A]], format="csr")


def latent_precision(structure: Structure, adj: Adjacency) -> sp.csr_matrix:
    """Precision of the latent field in the structure's native ordering."""
    if isinstance(structure, IwStructure):
        return iw_precision(structure, adj.n)
    if isinstance(structure, SeparableStructure):
        return separable_precision(structure, adj)
    if isinstance(structure, GmcarParams):
        return gmcar_precision(structure, adj)
    raise TypeError(f"unknown structure {type(structure).__name__}")


def latent_covariance(structure: Structure, adj: Adjacency) -> np.ndarray:
    if isinstance(structure, IwStructure):
        return iw_covariance(structure, adj.n)
    if isinstance(structure, SeparableStructure):
        return separable_covariance(structure, adj)
    if isinstance(structure, GmcarParams):
        return gmcar_covariance(structure, adj)
    raise TypeError(f"unknown structure {type(structure).__name__}")


def logdet_precision(structure: Structure, adj: Adjacency) -> float:
    """Closed-form ``log det`` of the latent precision.

    Uses ``log det(D - rho W)`` from the lattice spectrum and the Kronecker /
    block-triangular factorizations of each structure.
    """
    n = adj.n
    if isinstance(structure, IwStructure):
        return -n * np.linalg.slogdet(structure.sigma_iw)[1]
    if isinstance(structure, SeparableStructure):
        m = structure.m
        return m * adj.logdet_car(structure.rho) - n * np.linalg.slogdet(structure.sigma_iw)[1]
    if isinstance(structure, GmcarParams):
        # det of the block-triangular factorization is det(Q1) det(Q2)
        return (adj.logdet_car(structure.rho1) - n * np.log(structure.tau1_2)
                + adj.logdet_car(structure.rho2) - n * np.log(structure.tau2_2))
    raise TypeError(f"unknown structure {type(structure).__name__}")


def sparse_logdet(Q: sp.spmatrix) -> float:
    """``log det`` of an SPD sparse matrix via Cholesky of its dense form.

    Raises ``numpy.linalg.LinAlgError`` when ``Q`` is not positive definite.
    """
    L = np.linalg.cholesky(Q.toarray())
    return 2.0 * float(np.log(np.diag(L)).sum())


def latent_logdensity(u: np.ndarray, structure: Structure, adj: Adjacency) -> float:
    """``log N(u; 0, Sigma_u)`` including the normalizing constant.

    ``u`` is in the structure's native ordering (see module docstring).
    """
    u = np.asarray(u, dtype=float).ravel()
    nm = adj.n * structure.m
    if u.shape[0] != nm:
        raise ValueError(f"latent vector has length {u.shape[0]}, expected {nm}")
    Q = latent_precision(structure, adj)
    quad = float(u @ (Q @ u))
    return 0.5 * (logdet_precision(structure, adj) - nm * np.log(2 * np.pi) - quad)
