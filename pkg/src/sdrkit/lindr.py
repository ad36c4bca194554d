"""Linear dimensionality reduction: PCA, PLS, CCA and regularised CCA.

All fits re-standardise their inputs and return a :class:`ProjectionBasis`
whose direction columns have unit norm. Each direction is signed so that
its largest-magnitude X loading is positive (paired Y directions flip
with it).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh

__all__ = [
    "METHODS",
    "ConvergenceError",
    "ProjectionBasis",
    "RccaConfig",
    "UndersampledError",
    "cca_fit",
    "fit",
    "pca_fit",
    "pls_fit",
    "project",
    "rcca_fit",
]

METHODS = ("pca", "pls", "cca", "rcca")


class ConvergenceError(RuntimeError):
    """Power iteration did not converge within the iteration budget."""

    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


class UndersampledError(ValueError):
    """A covariance matrix that must be inverted is singular."""


@dataclass
class ProjectionBasis:
    method: str
    w_x: NDArray
    w_y: NDArray | None
    criteria: NDArray
    iterations: list[int] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.w_x.shape[1]

    def truncate(self, k: int) -> "ProjectionBasis":
        """First ``k`` directions. Deflation makes these identical to a k-fit."""
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot truncate a {self.k}-direction basis to {k}")
        w_y = None if self.w_y is None else self.w_y[:, :k]
        return ProjectionBasis(self.method, self.w_x[:, :k], w_y, self.criteria[:k],
                               self.iterations[:k])


@dataclass(frozen=True)
class RccaConfig:
    c_x: float = 0.1
    c_y: float = 0.1
    nipals_tolerance: float = 1e-4
    max_iterations: int = 5000

    def __post_init__(self) -> None:
        for c in (self.c_x, self.c_y):
            if not 0 <= c <= 1:
                raise ValueError("regularisation must lie in [0, 1]")
        if self.nipals_tolerance <= 0 or self.max_iterations < 1:
            raise ValueError("tolerance and iteration budget must be positive")


def _standardize(a: NDArray) -> NDArray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError("data must be a 2-d (samples, features) matrix")
    a = a - a.mean(axis=0)
    std = a.std(axis=0)
    return a / np.where(std > 0, std, 1.0)


def _check_k(k: int, limit: int) -> None:
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} must lie between 1 and {limit}")


def _sign_fix(w_x: NDArray, w_y: NDArray | None = None) -> None:
    """In place: make the largest-|loading| entry of each x column positive."""
    idx = np.argmax(np.abs(w_x), axis=0)
    signs = np.sign(w_x[idx, np.arange(w_x.shape[1])])
    signs[signs == 0] = 1.0
    w_x *= signs
    if w_y is not None:
        w_y *= signs


def _unit_columns(w: NDArray) -> NDArray:
    norms = np.linalg.norm(w, axis=0)
    return w / np.where(norms > 0, norms, 1.0)


def _complement(previous: list[NDArray], dim: int) -> NDArray:
    """First standard basis vector made orthogonal to ``previous`` (unit norm)."""
    for j in range(dim):
        v = np.zeros(dim)
        v[j] = 1.0
        for p in previous:
            v -= (p @ v) * p
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n
    return np.zeros(dim)


def _nipals(m: NDArray, k: int, tol: float, max_iter: int) -> tuple[NDArray, NDArray, NDArray, list[int]]:
    """Successive singular triplets of ``m`` by power iteration and rank-one
    deflation m <- m - s u vᵀ.

    Each power iteration starts from the largest-norm column of the current
    matrix, normalised; it stops when ‖u_new - u_old‖ < tol.
    """
    m = np.array(m, dtype=float)
    p, q = m.shape
    scale = np.linalg.norm(m)
    us, vs, ss, iters = [], [], [], []
    for i in range(k):
        col_norms = np.linalg.norm(m, axis=0)
        if scale == 0 or col_norms.max() <= 1e-12 * scale:
            u = _complement(us, p)
            v = _complement(vs, q)
            us.append(u)
            vs.append(v)
            ss.append(0.0)
            iters.append(0)
            continue
        u = m[:, np.argmax(col_norms)] / col_norms.max()
        for it in range(1, max_iter + 1):
            v = m.T @ u
            v /= np.linalg.norm(v)
            u_new = m @ v
            s = np.linalg.norm(u_new)
            u_new /= s
            done = np.linalg.norm(u_new - u) < tol
            u = u_new
            if done:
                break
        else:
            raise ConvergenceError(
                f"direction {i} did not converge in {max_iter} iterations", max_iter
            )
        v = m.T @ u
        s = np.linalg.norm(v)
        v /= s
        m -= s * np.outer(u, v)
        us.append(u)
        vs.append(v)
        ss.append(s)
        iters.append(it)
    return np.array(us).T, np.array(vs).T, np.array(ss), iters


def pca_fit(x: NDArray, k: int) -> ProjectionBasis:
    """Top-k principal directions by repeated exact argmax and deflation."""
    x = _standardize(x)
    t, n = x.shape
    _check_k(k, min(t, n))
    xd = x.copy()
    ws, crit = [], []
    for _ in range(k):
        cov = xd.T @ xd / t
        val, vec = eigh(cov, subset_by_index=[n - 1, n - 1])
        w = vec[:, 0]
        xd -= np.outer(xd @ w, w)
        ws.append(w)
        crit.append(max(val[0], 0.0))
    w_x = np.array(ws).T
    _sign_fix(w_x)
    return ProjectionBasis("pca", w_x, None, np.array(crit), [1] * k)


def pls_fit(x: NDArray, y: NDArray, k: int, cfg: RccaConfig | None = None) -> ProjectionBasis:
    """Successive singular pairs of the cross-covariance (1/T) XᵀY."""
    cfg = cfg or RccaConfig()
    x, y = _standardize(x), _standardize(y)
    _check_pair(x, y)
    _check_k(k, min(x.shape[1], y.shape[1]))
    c_xy = x.T @ y / len(x)
    u, v, s, iters = _nipals(c_xy, k, cfg.nipals_tolerance, cfg.max_iterations)
    _sign_fix(u, v)
    return ProjectionBasis("pls", u, v, s, iters)


def _check_pair(x: NDArray, y: NDArray) -> None:
    if len(x) != len(y):
        raise ValueError(f"x has {len(x)} rows but y has {len(y)}")


def _inv_sqrt(c: NDArray, name: str) -> NDArray:
    vals, vecs = np.linalg.eigh(c)
    if vals.min() <= 1e-10 * max(vals.max(), 1e-300):
        raise UndersampledError(
            f"covariance of {name} is singular (T too small for its dimension); "
            "use rcca with c > 0"
        )
    return (vecs / np.sqrt(vals)) @ vecs.T


def cca_fit(x: NDArray, y: NDArray, k: int) -> ProjectionBasis:
    """Canonical directions from a dense SVD of C_xx^-1/2 C_xy C_yy^-1/2."""
    x, y = _standardize(x), _standardize(y)
    _check_pair(x, y)
    t = len(x)
    _check_k(k, min(x.shape[1], y.shape[1]))
    if t <= max(x.shape[1], y.shape[1]):
        raise UndersampledError(
            f"CCA needs more samples ({t}) than features ({x.shape[1]}, {y.shape[1]})"
        )
    wx_half = _inv_sqrt(x.T @ x / t, "x")
    wy_half = _inv_sqrt(y.T @ y / t, "y")
    m = wx_half @ (x.T @ y / t) @ wy_half
    u, s, vt = np.linalg.svd(m)
    w_x = _unit_columns(wx_half @ u[:, :k])
    w_y = _unit_columns(wy_half @ vt[:k].T)
    _sign_fix(w_x, w_y)
    return ProjectionBasis("cca", w_x, w_y, np.clip(s[:k], 0.0, 1.0), [0] * k)


def rcca_fit(x: NDArray, y: NDArray, k: int, cfg: RccaConfig | None = None) -> ProjectionBasis:
    """Regularised CCA.

    Each direction pair maximises wₓᵀC_xy w_y over the regularised norms
    wᵀ((1-c) C + c I) w = 1, with deflation between directions. c=1 is PLS and
    c=0 is CCA.
    """
    cfg = cfg or RccaConfig()
    x, y = _standardize(x), _standardize(y)
    _check_pair(x, y)
    t = len(x)
    _check_k(k, min(x.shape[1], y.shape[1]))
    kx = (1 - cfg.c_x) * (x.T @ x / t) + cfg.c_x * np.eye(x.shape[1])
    ky = (1 - cfg.c_y) * (y.T @ y / t) + cfg.c_y * np.eye(y.shape[1])
    kx_half = _inv_sqrt(kx, "x")
    ky_half = _inv_sqrt(ky, "y")
    m = kx_half @ (x.T @ y / t) @ ky_half
    u, v, s, iters = _nipals(m, k, cfg.nipals_tolerance, cfg.max_iterations)
    w_x = _unit_columns(kx_half @ u)
    w_y = _unit_columns(ky_half @ v)
    _sign_fix(w_x, w_y)
    return ProjectionBasis("rcca", w_x, w_y, s, iters)


def fit(method: str, x: NDArray, y: NDArray, k: int, cfg: RccaConfig | None = None) -> ProjectionBasis:
    """Dispatch on ``method``. For PCA, X and Y are reduced independently and
    the returned basis holds both direction sets."""
    if method == "pca":
        bx, by = pca_fit(x, k), pca_fit(y, k)
        return ProjectionBasis("pca", bx.w_x, by.w_x, bx.criteria, bx.iterations)
    if method == "pls":
        return pls_fit(x, y, k, cfg)
    if method == "cca":
        return cca_fit(x, y, k)
    if method == "rcca":
        return rcca_fit(x, y, k, cfg)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def project(basis: ProjectionBasis, x_test: NDArray, y_test: NDArray | None = None):
    """Z = X_test W (and Z_Y = Y_test W_Y when ``y_test`` is given)."""
    if x_test.shape[1] != basis.w_x.shape[0]:
        raise ValueError(
            f"x_test has {x_test.shape[1]} columns, basis expects {basis.w_x.shape[0]}"
        )
    z_x = x_test @ basis.w_x
    if y_test is None:
        return z_x
    if basis.w_y is None:
        raise ValueError("basis has no Y directions")
    if y_test.shape[1] != basis.w_y.shape[0]:
        raise ValueError(
            f"y_test has {y_test.shape[1]} columns, basis expects {basis.w_y.shape[0]}"
        )
    return z_x, y_test @ basis.w_y
