"""Synthetic paired datasets with known structure.

Every generator returns a :class:`DataMatrixPair`. Matrices are (samples,
features). Generators standardise each column to zero mean and unit
empirical standard deviation; ``true_mi`` carries the population mutual
information in nats when it is known in closed form.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

__all__ = [
    "DataMatrixPair",
    "GaussianPairSpec",
    "GenerationError",
    "IntegratorError",
    "LinearModelSpec",
    "PendulumData",
    "PendulumSpec",
    "apply_cubic",
    "gaussian_mi",
    "generate_gaussian_pair",
    "generate_linear_model",
    "pendulum_energy",
    "random_features_embed",
    "replicate_embed",
    "rho_for_target_mi",
    "simulate_pendulum",
    "spread_information_pair",
    "standardize",
]


class GenerationError(ValueError):
    """Invalid generator parameters or a degenerate generated matrix."""


class IntegratorError(RuntimeError):
    """The pendulum integrator drifted in energy beyond its guard."""


@dataclass
class DataMatrixPair:
    x: NDArray
    y: NDArray
    provenance: dict = field(default_factory=dict)
    true_mi: float | None = None
    shared: NDArray | None = None

    def __post_init__(self) -> None:
        if self.x.ndim != 2 or self.y.ndim != 2 or len(self.x) != len(self.y):
            raise GenerationError(
                f"x {self.x.shape} and y {self.y.shape} must be 2-d with equal row counts"
            )

    @property
    def t(self) -> int:
        return self.x.shape[0]

    def take(self, rows: NDArray) -> "DataMatrixPair":
        """Row subset, keeping metadata. Rows are not re-standardised."""
        shared = None if self.shared is None else self.shared[rows]
        return replace(self, x=self.x[rows], y=self.y[rows], shared=shared)


def standardize(a: NDArray, name: str = "x") -> NDArray:
    """Centre columns and divide by their empirical std (ddof=0).

    Raises ``GenerationError`` naming the first column with zero variance.
    """
    a = a - a.mean(axis=0)
    std = a.std(axis=0)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise GenerationError(f"column {name}[:, {bad[0]}] has zero variance")
    return a / std


# ---------------------------------------------------------------- linear model


@dataclass(frozen=True)
class LinearModelSpec:
    """X = R_X + U_X V_X + P Q_X, and likewise for Y with the same P.

    R is per-feature noise, U are self signals private to one view and P are
    shared signals. V and Q are the quenched projections, drawn from
    ``seed_projections``; R, U and P are drawn from ``seed_samples``.
    """

    n_x: int
    n_y: int
    t: int
    m_shared: int = 1
    m_self_x: int = 0
    m_self_y: int = 0
    sigma2_r_x: float = 1.0
    sigma2_r_y: float = 1.0
    sigma2_u_x: float = 0.0
    sigma2_u_y: float = 0.0
    sigma2_v_x: float = 1.0
    sigma2_v_y: float = 1.0
    sigma2_p: float = 0.0
    sigma2_q_x: float = 1.0
    sigma2_q_y: float = 1.0
    seed_projections: int = 0
    seed_samples: int = 1

    def __post_init__(self) -> None:
        for name in ("n_x", "n_y", "t"):
            if int(getattr(self, name)) < 1:
                raise GenerationError(f"{name} must be a positive integer")
        for name in ("m_shared", "m_self_x", "m_self_y"):
            if int(getattr(self, name)) < 0:
                raise GenerationError(f"{name} must be non-negative")
        for name, value in asdict(self).items():
            if name.startswith("sigma2") and not (np.isfinite(value) and value >= 0):
                raise GenerationError(f"{name} must be a finite non-negative variance")
        for view in ("x", "y"):
            if self.total_variance(view) <= 0:
                raise GenerationError(f"view {view} has no variance from any source")

    @classmethod
    def from_snr(
        cls,
        n_x: int,
        n_y: int,
        t: int,
        m_shared: int,
        m_self: int,
        gamma_shared: float,
        gamma_self: float,
        **kwargs,
    ) -> "LinearModelSpec":
        """Fix the noise and projection variances to 1 and set the signal
        variances so that the requested signal-to-noise ratios hold."""
        return cls(
            n_x=n_x,
            n_y=n_y,
            t=t,
            m_shared=m_shared,
            m_self_x=m_self,
            m_self_y=m_self,
            sigma2_u_x=gamma_self,
            sigma2_u_y=gamma_self,
            sigma2_p=gamma_shared,
            **kwargs,
        )

    def _view(self, view: str) -> tuple[int, float, float, float, float]:
        s = view
        return (
            getattr(self, f"m_self_{s}"),
            getattr(self, f"sigma2_r_{s}"),
            getattr(self, f"sigma2_u_{s}"),
            getattr(self, f"sigma2_v_{s}"),
            getattr(self, f"sigma2_q_{s}"),
        )

    def total_variance(self, view: str = "x") -> float:
        """Expected variance of one unstandardised column."""
        m_self, r, u, v, q = self._view(view)
        return r + m_self * u * v + self.m_shared * self.sigma2_p * q

    def gamma_self(self, view: str = "x") -> float:
        _, r, u, v, _ = self._view(view)
        return u * v / r if r > 0 else np.inf

    def gamma_shared(self, view: str = "x") -> float:
        _, r, _, _, q = self._view(view)
        return self.sigma2_p * q / r if r > 0 else np.inf

    def to_dict(self) -> dict:
        return asdict(self)


def generate_linear_model(spec: LinearModelSpec, standardized: bool = True) -> DataMatrixPair:
    """Sample the linear self/shared model.

    The shared latent P is returned in ``DataMatrixPair.shared``.
    """
    prng = np.random.default_rng(spec.seed_projections)
    v_x = prng.normal(0, np.sqrt(spec.sigma2_v_x), (spec.m_self_x, spec.n_x))
    v_y = prng.normal(0, np.sqrt(spec.sigma2_v_y), (spec.m_self_y, spec.n_y))
    q_x = prng.normal(0, np.sqrt(spec.sigma2_q_x), (spec.m_shared, spec.n_x))
    q_y = prng.normal(0, np.sqrt(spec.sigma2_q_y), (spec.m_shared, spec.n_y))

    srng = np.random.default_rng(spec.seed_samples)
    t = spec.t
    p = srng.normal(0, np.sqrt(spec.sigma2_p), (t, spec.m_shared))
    u_x = srng.normal(0, np.sqrt(spec.sigma2_u_x), (t, spec.m_self_x))
    u_y = srng.normal(0, np.sqrt(spec.sigma2_u_y), (t, spec.m_self_y))
    r_x = srng.normal(0, np.sqrt(spec.sigma2_r_x), (t, spec.n_x))
    r_y = srng.normal(0, np.sqrt(spec.sigma2_r_y), (t, spec.n_y))

    x = r_x + u_x @ v_x + p @ q_x
    y = r_y + u_y @ v_y + p @ q_y
    if standardized:
        x, y = standardize(x, "x"), standardize(y, "y")
    return DataMatrixPair(
        x,
        y,
        provenance={"generator": "linear_model", "spec": spec.to_dict()},
        shared=p,
    )


# ------------------------------------------------------------ gaussian pairs


def gaussian_mi(rho) -> float:
    """MI in nats of a Gaussian pair with per-component correlations ``rho``."""
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    return float(-0.5 * np.sum(np.log1p(-(rho**2))))


def rho_for_target_mi(k: int, target_mi: float) -> NDArray:
    """Uniform per-component correlation giving ``target_mi`` nats over k components."""
    if k < 1:
        raise GenerationError("k must be positive")
    if not target_mi >= 0:
        raise GenerationError("target MI must be non-negative")
    return np.full(k, np.sqrt(-np.expm1(-2.0 * target_mi / k)))


@dataclass(frozen=True)
class GaussianPairSpec:
    k: int
    rho: tuple[float, ...]
    n: int
    seed: int = 0

    def __post_init__(self) -> None:
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        object.__setattr__(self, "rho", tuple(float(r) for r in rho))
        if len(self.rho) == 1 and self.k > 1:
            object.__setattr__(self, "rho", self.rho * self.k)
        if len(self.rho) != self.k:
            raise GenerationError(f"rho has {len(self.rho)} entries for k={self.k}")
        if any(not (0 <= r < 1) for r in self.rho):
            raise GenerationError("every correlation must lie in [0, 1)")
        if self.n < 2:
            raise GenerationError("need at least 2 samples")

    @property
    def true_mi(self) -> float:
        return gaussian_mi(self.rho)


def generate_gaussian_pair(spec: GaussianPairSpec) -> DataMatrixPair:
    """Component i of X correlates only with component i of Y, at rho_i."""
    rng = np.random.default_rng(spec.seed)
    rho = np.asarray(spec.rho)
    a = rng.standard_normal((spec.n, spec.k))
    b = rng.standard_normal((spec.n, spec.k))
    x = a
    y = rho * a + np.sqrt(1 - rho**2) * b
    return DataMatrixPair(
        standardize(x, "x"),
        standardize(y, "y"),
        provenance={"generator": "gaussian_pair", "spec": asdict(spec)},
        true_mi=spec.true_mi,
    )


def _derived(pair: DataMatrixPair, x: NDArray, y: NDArray, step: dict) -> DataMatrixPair:
    prov = dict(pair.provenance)
    prov["transforms"] = list(prov.get("transforms", [])) + [step]
    return DataMatrixPair(x, y, provenance=prov, true_mi=pair.true_mi, shared=pair.shared)


def apply_cubic(pair: DataMatrixPair) -> DataMatrixPair:
    """Y -> Y**3 elementwise. MI is unchanged by this invertible map."""
    return _derived(pair, pair.x, pair.y**3, {"transform": "cubic"})


def replicate_embed(pair: DataMatrixPair, copies: int) -> DataMatrixPair:
    """Concatenate ``copies`` identical copies of each view's columns."""
    if copies < 1:
        raise GenerationError("copies must be at least 1")
    return _derived(
        pair,
        np.tile(pair.x, (1, copies)),
        np.tile(pair.y, (1, copies)),
        {"transform": "replicate", "copies": copies},
    )


def _teacher(a: NDArray, out_dim: int, hidden: int, rng: np.random.Generator) -> NDArray:
    def dense(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)

    w1, b1 = dense(a.shape[1], hidden)
    w2, b2 = dense(hidden, out_dim)
    return expit(a @ w1 + b1) @ w2 + b2


def random_features_embed(
    pair: DataMatrixPair, out_dim: int = 100, hidden: int = 1024, seed: int = 0
) -> DataMatrixPair:
    """Pass each view through its own frozen one-hidden-layer sigmoid network.

    Outputs are standardised per column.
    """
    if out_dim < 1 or hidden < 1:
        raise GenerationError("out_dim and hidden must be positive")
    rng = np.random.default_rng(seed)
    x = _teacher(pair.x, out_dim, hidden, rng)
    y = _teacher(pair.y, out_dim, hidden, rng)
    step = {"transform": "random_features", "out_dim": out_dim, "hidden": hidden, "seed": seed}
    return _derived(pair, standardize(x, "x"), standardize(y, "y"), step)


def spread_information_pair(
    ambient_dim: int, k_signal: int, total_mi: float, n: int, seed: int = 0
) -> DataMatrixPair:
    """Gaussian pair whose MI is split equally over the first ``k_signal``
    components; the remaining ambient components are independent noise."""
    if not 1 <= k_signal <= ambient_dim:
        raise GenerationError("need 1 <= k_signal <= ambient_dim")
    if not (np.isfinite(total_mi) and total_mi >= 0):
        raise GenerationError("total MI must be finite and non-negative")
    rho_signal = rho_for_target_mi(k_signal, total_mi)
    if np.any(rho_signal >= 1):
        raise GenerationError(
            f"{total_mi} nats over {k_signal} components needs correlation 1"
        )
    rho = np.zeros(ambient_dim)
    rho[:k_signal] = rho_signal
    pair = generate_gaussian_pair(GaussianPairSpec(ambient_dim, tuple(rho), n, seed))
    pair.provenance = {
        "generator": "spread_information",
        "ambient_dim": ambient_dim,
        "k_signal": k_signal,
        "total_mi": total_mi,
        "n": n,
        "seed": seed,
    }
    pair.true_mi = float(total_mi)
    return pair


# ---------------------------------------------------------------- pendulum


@dataclass(frozen=True)
class PendulumSpec:
    mass: float = 1.0
    length: float = 0.5
    gravity: float = 9.81
    sample_rate: float = 60.0
    frames_per_experiment: int = 60
    n_experiments: int = 100
    obs_dim: int = 784
    frames_per_window: int = 2
    substeps: int = 8
    feature_scale: float = 2.0
    max_energy_factor: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.mass, self.length, self.gravity, self.sample_rate) <= 0:
            raise GenerationError("physical constants and sample rate must be positive")
        if self.frames_per_experiment < 2 * self.frames_per_window:
            raise GenerationError("an experiment must hold at least one X/Y window pair")
        if min(self.n_experiments, self.obs_dim, self.frames_per_window, self.substeps) < 1:
            raise GenerationError("counts must be positive")


@dataclass
class PendulumData:
    theta: NDArray  # (experiments, frames), wrapped to (-pi, pi]
    omega: NDArray  # (experiments, frames)
    frames: NDArray  # (experiments, frames, obs_dim)
    x: NDArray  # (windows, frames_per_window * obs_dim)
    y: NDArray  # (windows, frames_per_window * obs_dim)
    state: NDArray  # (windows, 2): theta, omega at the last frame of the X window
    experiment: NDArray  # (windows,) experiment index of each window
    spec: PendulumSpec


def pendulum_energy(theta: NDArray, omega: NDArray, spec: PendulumSpec) -> NDArray:
    """Kinetic plus potential energy, zero at rest at the bottom."""
    m, L, g = spec.mass, spec.length, spec.gravity
    return 0.5 * m * L**2 * omega**2 + m * g * L * (1 - np.cos(theta))


def _wrap(theta: NDArray) -> NDArray:
    # Maps onto (-pi, pi]; -pi itself goes to pi.
    return np.pi - np.mod(np.pi - theta, 2 * np.pi)


def _integrate(theta0: NDArray, omega0: NDArray, spec: PendulumSpec) -> tuple[NDArray, NDArray]:
    k = spec.gravity / spec.length
    h = 1.0 / (spec.sample_rate * spec.substeps)

    def f(th, om):
        return om, -k * np.sin(th)

    frames = spec.frames_per_experiment
    theta = np.empty((len(theta0), frames))
    omega = np.empty_like(theta)
    th, om = theta0.astype(float), omega0.astype(float)
    theta[:, 0], omega[:, 0] = th, om
    for i in range(1, frames):
        for _ in range(spec.substeps):
            k1t, k1o = f(th, om)
            k2t, k2o = f(th + 0.5 * h * k1t, om + 0.5 * h * k1o)
            k3t, k3o = f(th + 0.5 * h * k2t, om + 0.5 * h * k2o)
            k4t, k4o = f(th + h * k3t, om + h * k3o)
            th = th + h / 6 * (k1t + 2 * k2t + 2 * k3t + k4t)
            om = om + h / 6 * (k1o + 2 * k2o + 2 * k3o + k4o)
        theta[:, i], omega[:, i] = th, om
    return theta, omega


def simulate_pendulum(
    spec: PendulumSpec,
    theta0: NDArray | None = None,
    omega0: NDArray | None = None,
) -> PendulumData:
    """Simulate frictionless pendulum experiments and their observations.

    Initial conditions default to theta0 uniform on (-pi, pi] and total energy
    uniform between the potential at theta0 and ``max_energy_factor`` times
    the separatrix energy, so both swinging and rotating motion occur.
    Observations are a frozen random-feature map of (sin theta, cos theta).
    """
    rng = np.random.default_rng(spec.seed)
    m, L, g = spec.mass, spec.length, spec.gravity
    n = spec.n_experiments
    if theta0 is None:
        theta0 = rng.uniform(-np.pi, np.pi, n)
        potential = m * g * L * (1 - np.cos(theta0))
        e_top = spec.max_energy_factor * 2 * m * g * L
        energy = rng.uniform(potential, np.maximum(potential, e_top))
        sign = rng.choice([-1.0, 1.0], n)
        omega0 = sign * np.sqrt(2 * (energy - potential) / (m * L**2))
    else:
        theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
        omega0 = np.zeros_like(theta0) if omega0 is None else np.atleast_1d(omega0)
        if theta0.shape != omega0.shape:
            raise GenerationError("theta0 and omega0 must have the same shape")

    theta, omega = _integrate(theta0, omega0, spec)
    energy = pendulum_energy(theta, omega, spec)
    e0 = energy[:, :1]
    scale = np.where(e0[:, 0] > 0, e0[:, 0], 1.0)
    drift = np.abs(energy - e0).max(axis=1) / scale
    if np.any(drift > 0.01):
        worst = int(np.argmax(drift))
        raise IntegratorError(
            f"experiment {worst} drifted {drift[worst]:.3g} in relative energy; "
            "increase substeps"
        )
    theta = _wrap(theta)

    frng = np.random.default_rng([spec.seed, 1])
    proj = frng.normal(0, spec.feature_scale, (2, spec.obs_dim))
    offset = frng.normal(0, 1, spec.obs_dim)
    feats = np.stack([np.sin(theta), np.cos(theta)], axis=-1)
    frames = expit(feats @ proj + offset)

    w = spec.frames_per_window
    n_win = spec.frames_per_experiment - 2 * w + 1
    starts = np.arange(n_win)
    xs, ys, states, exps = [], [], [], []
    for e in range(n):
        fx = np.stack([frames[e, starts + j] for j in range(w)], axis=1)
        fy = np.stack([frames[e, starts + w + j] for j in range(w)], axis=1)
        xs.append(fx.reshape(n_win, -1))
        ys.append(fy.reshape(n_win, -1))
        last = starts + w - 1
        states.append(np.stack([theta[e, last], omega[e, last]], axis=1))
        exps.append(np.full(n_win, e))
    return PendulumData(
        theta=theta,
        omega=omega,
        frames=frames,
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        state=np.concatenate(states),
        experiment=np.concatenate(exps),
        spec=spec,
    )
