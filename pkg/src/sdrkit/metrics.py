"""Reconstruction and information metrics for paired latent projections."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray

from .lindr import RccaConfig, pca_fit, project, rcca_fit

__all__ = [
    "DiagnosticTable",
    "RcReport",
    "cross_correlation",
    "gaussian_mi_from_data",
    "informative_columns",
    "latent_dim_diagnostic",
    "linear_readout_r2",
    "rc_prime",
    "total_correlation",
]


def cross_correlation(a: NDArray, b: NDArray) -> NDArray:
    """Pearson correlations between every column of ``a`` and every column of ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) != len(b):
        raise ValueError(f"row counts differ: {len(a)} vs {len(b)}")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    sa = np.sqrt((a * a).sum(axis=0))
    sb = np.sqrt((b * b).sum(axis=0))
    for name, s in (("z_x", sa), ("z_y", sb)):
        bad = np.flatnonzero(~(s > 0))
        if bad.size:
            raise ValueError(f"column {bad[0]} of {name} has zero variance")
    return (a / sa).T @ (b / sb)


def total_correlation(z_x: NDArray, z_y: NDArray) -> float:
    """Frobenius norm of the cross-correlation matrix between the two blocks."""
    return float(np.linalg.norm(cross_correlation(z_x, z_y)))


@dataclass(frozen=True)
class RcReport:
    rc: float
    rc0: float
    rc0_std: float
    rc_prime: float
    m_shared_assumed: int
    trials: int

    def to_dict(self) -> dict:
        return asdict(self)


def rc_prime(
    z_x_test: NDArray,
    z_y_test: NDArray,
    m_shared: int,
    trials: int = 10,
    seed: int = 0,
) -> RcReport:
    """Reconstruction quality corrected for the random-matrix baseline.

    RC0 is the mean total correlation of independent standard normal
    matrices of the same shapes, divided by ``m_shared`` like RC.
    """
    if m_shared < 1:
        raise ValueError("m_shared must be at least 1")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    z_x_test = np.atleast_2d(np.asarray(z_x_test, dtype=float).T).T
    z_y_test = np.atleast_2d(np.asarray(z_y_test, dtype=float).T).T
    rc = total_correlation(z_x_test, z_y_test) / m_shared
    rng = np.random.default_rng(seed)
    null = np.array(
        [
            total_correlation(
                rng.standard_normal(z_x_test.shape), rng.standard_normal(z_y_test.shape)
            )
            / m_shared
            for _ in range(trials)
        ]
    )
    rc0 = float(null.mean())
    return RcReport(
        rc=rc,
        rc0=rc0,
        rc0_std=float(null.std()),
        rc_prime=rc - rc0,
        m_shared_assumed=int(m_shared),
        trials=int(trials),
    )


def _log_pdet(c: NDArray, threshold: float) -> float:
    s = np.linalg.svd(c, compute_uv=False)
    return float(np.sum(np.log(s[s > threshold])))


def informative_columns(a: NDArray, rel_tol: float = 1e-10) -> NDArray:
    """Mask of columns whose std exceeds ``rel_tol`` times the largest std.

    Projections onto directions outside the span of the data carry only
    round-off; standardising them would turn that round-off into noise.
    """
    std = np.asarray(a, dtype=float).std(axis=0)
    top = std.max() if std.size else 0.0
    return std > rel_tol * top if top > 0 else np.zeros(std.shape, dtype=bool)


def gaussian_mi_from_data(x: NDArray, y: NDArray, threshold: float = 1e-8) -> float:
    """MI (nats) of a Gaussian with the empirical correlation structure of (x, y).

    Uses ½ ln(|C_XX| |C_YY| / |C|), where each determinant is the product of
    the singular values above ``threshold``. This handles rank-deficient
    (replicated or over-embedded) data. Constant columns, including those
    constant up to round-off, are ignored.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if len(x) != len(y):
        raise ValueError(f"row counts differ: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("need at least 2 samples")
    x = x[:, informative_columns(x)]
    y = y[:, informative_columns(y)]
    if x.shape[1] == 0 or y.shape[1] == 0:
        return 0.0
    c = np.corrcoef(np.hstack([x, y]), rowvar=False)
    kx = x.shape[1]
    mi = 0.5 * (
        _log_pdet(c[:kx, :kx], threshold)
        + _log_pdet(c[kx:, kx:], threshold)
        - _log_pdet(c, threshold)
    )
    return max(float(mi), 0.0)


@dataclass
class DiagnosticTable:
    k: list[int]
    rc_prime_pca: list[float]
    rc_prime_rcca: list[float]
    rc0: list[float]
    rc0_std: list[float]

    @property
    def peak_k_pca(self) -> int:
        return self.k[int(np.argmax(self.rc_prime_pca))]

    @property
    def peak_k_rcca(self) -> int:
        return self.k[int(np.argmax(self.rc_prime_rcca))]

    def rows(self) -> list[dict]:
        return [
            {"k": k, "rc_prime_pca": a, "rc_prime_rcca": b, "rc0": c, "rc0_std": d}
            for k, a, b, c, d in zip(
                self.k, self.rc_prime_pca, self.rc_prime_rcca, self.rc0, self.rc0_std
            )
        ]


def latent_dim_diagnostic(
    x: NDArray,
    y: NDArray,
    k_grid,
    cfg: RccaConfig | None = None,
    x_test: NDArray | None = None,
    y_test: NDArray | None = None,
    m_shared: int = 1,
    trials: int = 10,
    seed: int = 0,
) -> DiagnosticTable:
    """RC' of PCA-then-correlate and of rCCA as the latent dimension grows.

    Fits on (x, y) and scores on (x_test, y_test); without a test set the
    rows are split in half. The rCCA curve peaks near the number of shared
    signals and the PCA curve near the number of shared plus self signals.
    The normalisation ``m_shared`` only rescales the curves.
    """
    k_grid = [int(k) for k in k_grid]
    if not k_grid or any(b <= a for a, b in zip(k_grid[:-1], k_grid[1:])):
        raise ValueError("k_grid must be non-empty and strictly ascending")
    if x_test is None or y_test is None:
        half = len(x) // 2
        x, x_test = x[:half], x[half:]
        y, y_test = y[:half], y[half:]
    k_max = k_grid[-1]
    pca_x, pca_y = pca_fit(x, k_max), pca_fit(y, k_max)
    rcca = rcca_fit(x, y, k_max, cfg)
    table = DiagnosticTable([], [], [], [], [])
    for k in k_grid:
        zx_p = project(pca_x.truncate(k), x_test)
        zy_p = project(pca_y.truncate(k), y_test)
        zx_r, zy_r = project(rcca.truncate(k), x_test, y_test)
        rep_p = rc_prime(zx_p, zy_p, m_shared, trials, seed)
        rep_r = rc_prime(zx_r, zy_r, m_shared, trials, seed)
        table.k.append(k)
        table.rc_prime_pca.append(rep_p.rc_prime)
        table.rc_prime_rcca.append(rep_r.rc_prime)
        table.rc0.append(rep_r.rc0)
        table.rc0_std.append(rep_r.rc0_std)
    return table


def linear_readout_r2(features: NDArray, targets: NDArray) -> float:
    """Variance-weighted R² of an affine least-squares map features -> targets."""
    features = np.atleast_2d(np.asarray(features, dtype=float).T).T
    targets = np.atleast_2d(np.asarray(targets, dtype=float).T).T
    design = np.hstack([features, np.ones((len(features), 1))])
    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
    resid = targets - design @ coef
    total = ((targets - targets.mean(axis=0)) ** 2).sum()
    return float(1.0 - (resid**2).sum() / total)
