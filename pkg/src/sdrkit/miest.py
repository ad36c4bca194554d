"""Neural mutual-information estimation.

Critics score every (x_i, y_j) pair of a batch: the diagonal of the score
matrix holds samples from the joint distribution and the off-diagonal
entries stand in for the product of marginals. The MINE, SMILE and
InfoNCE objectives turn a score matrix into an MI estimate (nats) plus a
gradient signal for the critic. Training loops record the per-step train
estimate and periodic held-out estimates, from which the max-test
heuristic picks the reported value.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logsumexp

from .datagen import DataMatrixPair, rho_for_target_mi
from .lindr import RccaConfig, project, rcca_fit
from .metrics import gaussian_mi_from_data, informative_columns
from .nncore import (
    MlpNet,
    TrainingError,
    _activate,
    _activation_grad,
    adam_init,
    adam_step,
    backward,
    forward,
)

__all__ = [
    "CRITIC_KINDS",
    "OBJECTIVES",
    "BilinearCritic",
    "ConcatenatedCritic",
    "CriticSpec",
    "EstimatorConfig",
    "GuidelinesConfig",
    "ObjectiveError",
    "ObjectiveResult",
    "RunRecord",
    "SeparableCritic",
    "StaircaseSource",
    "SweepRow",
    "build_critic",
    "embedding_sweep",
    "guidelines_protocol",
    "infonce_objective",
    "mine_objective",
    "pairwise_scores",
    "score_batch",
    "smile_objective",
    "staircase_summary",
    "train_estimator",
]

CRITIC_KINDS = ("separable", "concatenated", "bilinear")
OBJECTIVES = ("mine", "smile", "infonce")


class ObjectiveError(ValueError):
    """A score matrix is malformed or produced a non-finite estimate."""


# ------------------------------------------------------------------- critics


@dataclass(frozen=True)
class CriticSpec:
    kind: str = "separable"
    hidden_layers: int = 2
    hidden_width: int = 256
    embed_dim: int = 16
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.kind not in CRITIC_KINDS:
            raise ValueError(f"unknown critic kind {self.kind!r}; choose from {CRITIC_KINDS}")
        if self.hidden_layers < 0 or self.hidden_width < 1 or self.embed_dim < 1:
            raise ValueError("critic sizes must be positive")

    def widths(self, n_in: int, n_out: int) -> list[int]:
        return [n_in] + [self.hidden_width] * self.hidden_layers + [n_out]


def _pairwise_forward(net: MlpNet, a: NDArray, b: NDArray):
    """Evaluate ``net`` on every concatenated pair (a_i, b_j).

    The first layer is split into its a- and b-blocks so the n x m x width
    pre-activation is a broadcast sum rather than a matmul over n*m rows.
    """
    first = net.layers[0]
    da = a.shape[1]
    if da + b.shape[1] != first.n_in:
        raise ValueError(f"pair width {da + b.shape[1]} does not match critic input {first.n_in}")
    pre = (a @ first.weight[:da] + first.bias)[:, None, :] + (b @ first.weight[da:])[None, :, :]
    h = _activate(first.activation, pre)
    n, m = len(a), len(b)
    flat = h.reshape(n * m, -1)
    if len(net.layers) > 1:
        out, tape = forward(net, flat, start=1)
    else:
        out, tape = flat, None
    return out.reshape(n, m), (a, b, pre, h, tape)


def _pairwise_backward(net: MlpNet, cache, d_scores: NDArray):
    a, b, pre, h, tape = cache
    n, m = d_scores.shape
    first = net.layers[0]
    da = a.shape[1]
    g = d_scores.reshape(n * m, 1).astype(pre.dtype, copy=False)
    if tape is not None:
        grads, g_h = backward(tape, g)
    else:
        grads, g_h = [np.zeros_like(first.weight), np.zeros_like(first.bias)], g
    g_pre = _activation_grad(first.activation, pre, h, g_h.reshape(n, m, -1),
                             inplace=tape is not None)
    g_a = g_pre.sum(axis=1)
    g_b = g_pre.sum(axis=0)
    grads[0] = np.vstack([a.T @ g_a, b.T @ g_b])
    grads[1] = g_a.sum(axis=0)
    return grads, g_a @ first.weight[:da].T, g_b @ first.weight[da:].T


def pairwise_scores(net: MlpNet, a: NDArray, b: NDArray, max_elements: int = 1 << 22) -> NDArray:
    """All-pairs scores without a tape, in row chunks to bound memory."""
    width = max(layer.n_out for layer in net.layers)
    rows = max(1, max_elements // max(1, len(b) * width))
    out = np.empty((len(a), len(b)), dtype=np.result_type(a, net.layers[0].weight))
    for i in range(0, len(a), rows):
        out[i : i + rows] = _pairwise_forward(net, a[i : i + rows], b)[0]
    return out


class Critic(Protocol):
    kind: str

    def params(self) -> list[NDArray]: ...
    def scores(self, x: NDArray, y: NDArray): ...
    def backward(self, cache, d_scores: NDArray): ...
    def evaluate(self, x: NDArray, y: NDArray) -> NDArray: ...


class SeparableCritic:
    """T(x, y) = g(x) · h(y)."""

    kind = "separable"

    def __init__(self, g: MlpNet, h: MlpNet):
        if g.n_out != h.n_out:
            raise ValueError("embedding nets must share an output width")
        self.g, self.h = g, h

    def params(self) -> list[NDArray]:
        return self.g.params() + self.h.params()

    def scores(self, x, y):
        gx, tg = forward(self.g, x)
        hy, th = forward(self.h, y)
        return gx @ hy.T, (gx, hy, tg, th)

    def backward(self, cache, d_scores):
        gx, hy, tg, th = cache
        d_scores = d_scores.astype(gx.dtype, copy=False)
        grads_g, d_x = backward(tg, d_scores @ hy)
        grads_h, d_y = backward(th, d_scores.T @ gx)
        return grads_g + grads_h, d_x, d_y

    def evaluate(self, x, y):
        return self.g(x) @ self.h(y).T


class ConcatenatedCritic:
    """T(x, y) = f([x, y]) for every pair."""

    kind = "concatenated"

    def __init__(self, f: MlpNet):
        if f.n_out != 1:
            raise ValueError("a concatenated critic needs a scalar output")
        self.f = f

    def params(self) -> list[NDArray]:
        return self.f.params()

    def scores(self, x, y):
        return _pairwise_forward(self.f, x, y)

    def backward(self, cache, d_scores):
        return _pairwise_backward(self.f, cache, d_scores)

    def evaluate(self, x, y):
        return pairwise_scores(self.f, x, y)


class BilinearCritic:
    """T(x, y) = f([g(x), h(y)]): embeddings feeding a scalar combiner."""

    kind = "bilinear"

    def __init__(self, g: MlpNet, h: MlpNet, f: MlpNet):
        if f.n_in != g.n_out + h.n_out or f.n_out != 1:
            raise ValueError("combiner widths do not match the embeddings")
        self.g, self.h, self.f = g, h, f

    def params(self) -> list[NDArray]:
        return self.g.params() + self.h.params() + self.f.params()

    def scores(self, x, y):
        gx, tg = forward(self.g, x)
        hy, th = forward(self.h, y)
        s, cache = _pairwise_forward(self.f, gx, hy)
        return s, (tg, th, cache)

    def backward(self, cache, d_scores):
        tg, th, pair_cache = cache
        grads_f, d_gx, d_hy = _pairwise_backward(self.f, pair_cache, d_scores)
        grads_g, d_x = backward(tg, d_gx)
        grads_h, d_y = backward(th, d_hy)
        return grads_g + grads_h + grads_f, d_x, d_y

    def evaluate(self, x, y):
        return pairwise_scores(self.f, self.g(x), self.h(y))


def build_critic(spec: CriticSpec, x_dim: int, y_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
    act = spec.activation

    def net(n_in, n_out):
        return MlpNet.build(spec.widths(n_in, n_out), rng, hidden_activation=act, dtype=dtype)

    if spec.kind == "separable":
        return SeparableCritic(net(x_dim, spec.embed_dim), net(y_dim, spec.embed_dim))
    if spec.kind == "concatenated":
        return ConcatenatedCritic(net(x_dim + y_dim, 1))
    return BilinearCritic(
        net(x_dim, spec.embed_dim), net(y_dim, spec.embed_dim), net(2 * spec.embed_dim, 1)
    )


def score_batch(critic, x: NDArray, y: NDArray) -> NDArray:
    """n x n matrix of critic scores T(x_i, y_j)."""
    if len(x) != len(y):
        raise ValueError("x and y batches must have equal sizes")
    if len(x) < 2:
        raise ValueError("need a batch of at least 2 pairs")
    return critic.evaluate(x, y)


# ---------------------------------------------------------------- objectives


@dataclass
class ObjectiveResult:
    """``grad`` is the ascent direction of the training surrogate w.r.t. the
    scores. For MINE ``log_denominator`` is the updated running average."""

    estimate: float
    grad: NDArray
    log_denominator: float | None = None


def _checked(scores: NDArray) -> NDArray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ObjectiveError(f"score matrix must be square, got {scores.shape}")
    if scores.shape[0] < 2:
        raise ObjectiveError("need at least 2 pairs")
    if not np.all(np.isfinite(scores)):
        raise ObjectiveError("score matrix has non-finite entries")
    return scores


def _offdiag_logmeanexp(scores: NDArray) -> float:
    n = len(scores)
    masked = scores.copy()
    np.fill_diagonal(masked, -np.inf)
    return float(logsumexp(masked) - math.log(n * (n - 1)))


def _dv_value(scores: NDArray, denominator_scores: NDArray) -> float:
    value = float(np.mean(np.diag(scores))) - _offdiag_logmeanexp(denominator_scores)
    if not math.isfinite(value):
        raise ObjectiveError("estimate is not finite")
    return value


def mine_objective(scores: NDArray, log_ema: float | None = None,
                   ema_rate: float = 0.99) -> ObjectiveResult:
    """Donsker-Varadhan bound: mean joint score - ln mean off-diagonal e^T.

    The gradient divides by a running average of the off-diagonal mean of
    e^T (kept in log space) instead of the batch value, which reduces the
    bias of minibatch gradients. Pass ``log_ema=None`` for the exact
    gradient of the batch value.
    """
    s = _checked(scores)
    n = len(s)
    lme = _offdiag_logmeanexp(s)
    estimate = _dv_value(s, s)
    if log_ema is None:
        log_den = lme
    else:
        log_den = float(np.logaddexp(math.log(ema_rate) + log_ema, math.log1p(-ema_rate) + lme))
    grad = -np.exp(s - log_den) / (n * (n - 1))
    np.fill_diagonal(grad, 1.0 / n)
    return ObjectiveResult(estimate, grad, log_den)


def smile_objective(scores: NDArray, tau: float = 5.0) -> ObjectiveResult:
    """DV bound with scores clipped to [-tau, tau] inside the partition term.

    Clipping e^T to [e^-tau, e^tau] equals clipping T to [-tau, tau]. The
    gradient signal is that of the Jensen-Shannon bound, which trains the
    critic towards the log density ratio that the clipping assumes.
    ``tau=inf`` gives exactly the MINE value.
    """
    if not tau > 0:
        raise ObjectiveError("tau must be positive")
    s = _checked(scores)
    n = len(s)
    clipped = s if math.isinf(tau) else np.clip(s, -tau, tau)
    estimate = _dv_value(s, clipped)
    grad = -expit(s) / (n * (n - 1))
    np.fill_diagonal(grad, expit(-np.diag(s)) / n)
    return ObjectiveResult(estimate, grad)


def js_surrogate(scores: NDArray) -> float:
    """Jensen-Shannon f-GAN bound whose gradient ``smile_objective`` returns."""
    s = _checked(scores)
    n = len(s)
    sp = np.logaddexp(0.0, s)
    off = (sp.sum() - np.trace(sp)) / (n * (n - 1))
    return float(-np.mean(np.logaddexp(0.0, -np.diag(s))) - off)


def infonce_objective(scores: NDArray) -> ObjectiveResult:
    """Contrastive bound (1/n) Σ_i [s_ii - ln (1/n) Σ_j e^{s_ij}], at most ln n."""
    s = _checked(scores)
    n = len(s)
    lse = logsumexp(s, axis=1)
    estimate = float(np.mean(np.diag(s) - lse) + math.log(n))
    grad = -np.exp(s - lse[:, None])
    grad[np.diag_indices(n)] += 1.0
    return ObjectiveResult(estimate, grad / n)


def _objective_value(objective: str, scores: NDArray, tau: float) -> float:
    if objective == "infonce":
        return infonce_objective(scores).estimate
    if objective == "smile":
        return smile_objective(scores, tau).estimate
    return mine_objective(scores).estimate


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class EstimatorConfig:
    objective: str = "infonce"
    tau: float = 5.0
    batch_size: int = 128
    steps: int = 2000
    epochs: int = 20
    learning_rate: float = 5e-4
    smoothing_window: int = 100
    seed: int = 0
    ema_rate: float = 0.99
    eval_interval: int = 100
    eval_batches: int = 1
    test_fraction: float = 0.1
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if not self.tau > 0:
            raise ValueError("tau must be positive (inf allowed)")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test fraction must lie in (0, 1)")
        if not 0 <= self.ema_rate < 1:
            raise ValueError("ema rate must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


@dataclass
class RunRecord:
    objective: str
    train: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    test: list[float] = field(default_factory=list)
    train_eval: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)
    true_mi: list[float] | None = None
    step_of_max_test: int | None = None
    reported: float = float("nan")
    collapsed: bool = False
    message: str = ""
    critic: object = field(default=None, repr=False, compare=False)

    def finalize(self, window: int) -> "RunRecord":
        self.smoothed = _trailing_mean(self.train, window)
        if self.test:
            best = int(np.nanargmax(self.test))
            self.step_of_max_test = self.eval_steps[best]
            self.reported = self.train_eval[best]
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("critic")
        return out


def _trailing_mean(values: list[float], window: int) -> list[float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return []
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return ((c[idx] - c[lo]) / (idx - lo)).tolist()


class StreamingSource(Protocol):
    x_dim: int
    y_dim: int
    total_steps: int

    def sample(self, n: int, rng: np.random.Generator, step: int) -> tuple[NDArray, NDArray]: ...
    def true_mi(self, step: int) -> float: ...


@dataclass
class StaircaseSource:
    """Correlated Gaussians whose MI steps through ``levels`` (nats), holding
    each level for ``steps_per_level`` steps. ``cubic`` maps Y to Y**3."""

    k: int = 10
    levels: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0, 10.0)
    steps_per_level: int = 2000
    cubic: bool = False

    @property
    def x_dim(self) -> int:
        return self.k

    @property
    def y_dim(self) -> int:
        return self.k

    @property
    def total_steps(self) -> int:
        return len(self.levels) * self.steps_per_level

    def level_index(self, step: int) -> int:
        return min(step // self.steps_per_level, len(self.levels) - 1)

    def true_mi(self, step: int) -> float:
        return float(self.levels[self.level_index(step)])

    def sample(self, n, rng, step):
        rho = rho_for_target_mi(self.k, self.true_mi(step))
        a = rng.standard_normal((n, self.k))
        y = rho * a + np.sqrt(1 - rho**2) * rng.standard_normal((n, self.k))
        return a, (y**3 if self.cubic else y)


def _split(n: int, fraction: float, rng: np.random.Generator) -> tuple[NDArray, NDArray]:
    perm = rng.permutation(n)
    n_test = max(2, int(round(fraction * n)))
    return perm[n_test:], perm[:n_test]


def _evaluate(critic, x, y, cfg: EstimatorConfig) -> float:
    """Mean objective value over consecutive batches of the training size."""
    b = cfg.batch_size
    values = []
    for i in range(0, len(x) - 1, b):
        xb, yb = x[i : i + b], y[i : i + b]
        if len(xb) < 2:
            continue
        values.append(_objective_value(cfg.objective, critic.evaluate(xb, yb), cfg.tau))
    return float(np.mean(values))


class _Trainer:
    def __init__(self, critic, cfg: EstimatorConfig):
        self.critic = critic
        self.cfg = cfg
        self.params = critic.params()
        self.opt = adam_init(self.params, cfg.learning_rate)
        self.log_ema: float | None = None

    def step(self, x: NDArray, y: NDArray) -> float:
        cfg = self.cfg
        s, cache = self.critic.scores(x, y)
        if cfg.objective == "mine":
            res = mine_objective(s, self.log_ema, cfg.ema_rate)
            self.log_ema = res.log_denominator
        elif cfg.objective == "smile":
            res = smile_objective(s, cfg.tau)
        else:
            res = infonce_objective(s)
            if res.estimate > math.log(len(s)):
                raise AssertionError("InfoNCE estimate exceeded ln(batch size)")
        grads, _, _ = self.critic.backward(cache, -res.grad)
        adam_step(self.params, grads, self.opt)
        return res.estimate


_FAILURES = (ObjectiveError, TrainingError, FloatingPointError)


def train_estimator(
    source,
    critic_spec: CriticSpec,
    cfg: EstimatorConfig,
    test: DataMatrixPair | None = None,
    critic=None,
) -> RunRecord:
    """Train a critic and record its MI estimates.

    ``source`` is either a :class:`DataMatrixPair` (finite data: ``cfg.epochs``
    passes over the training rows, held-out evaluation after each epoch) or
    a streaming source with ``sample(n, rng, step)`` (fresh batches every
    step, evaluation on fresh batches every ``cfg.eval_interval`` steps).
    Without ``test``, finite data are split by ``cfg.test_fraction``.
    Non-finite objectives or gradients stop training and set ``collapsed``.
    """
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    finite = isinstance(source, DataMatrixPair)
    x_dim = source.x.shape[1] if finite else source.x_dim
    y_dim = source.y.shape[1] if finite else source.y_dim
    if critic is None:
        critic = build_critic(critic_spec, x_dim, y_dim, rng, dtype)
    trainer = _Trainer(critic, cfg)
    record = RunRecord(cfg.objective, critic=critic)
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            if finite:
                _train_finite(trainer, source, test, cfg, rng, record, dtype)
            else:
                _train_streaming(trainer, source, cfg, rng, record, dtype)
        except _FAILURES as exc:
            record.collapsed = True
            record.message = f"{type(exc).__name__}: {exc}"
    return record.finalize(cfg.smoothing_window)


def _train_finite(trainer, data, test, cfg, rng, record, dtype) -> None:
    if test is None:
        train_idx, test_idx = _split(data.t, cfg.test_fraction, rng)
        x_tr, y_tr = data.x[train_idx], data.y[train_idx]
        x_te, y_te = data.x[test_idx], data.y[test_idx]
    else:
        x_tr, y_tr, x_te, y_te = data.x, data.y, test.x, test.y
    x_tr, y_tr, x_te, y_te = (a.astype(dtype) for a in (x_tr, y_tr, x_te, y_te))
    if len(x_tr) < cfg.batch_size:
        raise ValueError(f"{len(x_tr)} training rows cannot fill a batch of {cfg.batch_size}")
    probe = rng.choice(len(x_tr), size=min(len(x_tr), len(x_te)), replace=False)
    b = cfg.batch_size
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(x_tr))
        for i in range(0, len(perm) - b + 1, b):
            rows = perm[i : i + b]
            record.train.append(trainer.step(x_tr[rows], y_tr[rows]))
            step += 1
        record.eval_steps.append(step)
        record.test.append(_evaluate(trainer.critic, x_te, y_te, cfg))
        record.train_eval.append(_evaluate(trainer.critic, x_tr[probe], y_tr[probe], cfg))


def _train_streaming(trainer, source, cfg, rng, record, dtype) -> None:
    total = getattr(source, "total_steps", None) or cfg.steps
    record.true_mi = []
    eval_rng = np.random.default_rng([cfg.seed, 1])
    for step in range(total):
        x, y = source.sample(cfg.batch_size, rng, step)
        record.train.append(trainer.step(x.astype(dtype), y.astype(dtype)))
        record.true_mi.append(source.true_mi(step))
        if (step + 1) % cfg.eval_interval == 0:
            values = []
            for _ in range(cfg.eval_batches):
                xe, ye = source.sample(cfg.batch_size, eval_rng, step)
                s = trainer.critic.evaluate(xe.astype(dtype), ye.astype(dtype))
                values.append(_objective_value(cfg.objective, s, cfg.tau))
            record.eval_steps.append(step + 1)
            record.test.append(float(np.mean(values)))
            window = record.train[-cfg.eval_interval :]
            record.train_eval.append(float(np.mean(window)))


def staircase_summary(record: RunRecord, source: StaircaseSource) -> list[dict]:
    """Per level: truth, mean of the smoothed series over the second half of
    the level, raw-estimate variance over that half, and the maximum raw
    estimate over the whole level."""
    out = []
    train = np.asarray(record.train)
    smooth = np.asarray(record.smoothed)
    for i, level in enumerate(source.levels):
        lo = i * source.steps_per_level
        hi = min(lo + source.steps_per_level, len(train))
        mid = lo + source.steps_per_level // 2
        if hi <= mid:
            break
        out.append(
            {
                "true_mi": float(level),
                "smoothed_mean": float(smooth[mid:hi].mean()),
                "variance": float(train[mid:hi].var()),
                "max_estimate": float(train[lo:hi].max()),
            }
        )
    return out


# ------------------------------------------------------------ sweeps, protocol


@dataclass
class SweepRow:
    k_z: int
    mean: float
    std: float
    values: list[float]
    n: int
    seeds: list[int]
    steps_of_max_test: list[int | None]


def _run_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def embedding_sweep(
    data: DataMatrixPair,
    k_grid,
    spec: CriticSpec,
    cfg: EstimatorConfig,
    repeats: int = 5,
) -> list[SweepRow]:
    """Max-test MI estimate versus embedding dimension, over independent seeds."""
    if spec.kind == "concatenated":
        raise ValueError("embedding sweeps need a separable or bilinear critic")
    rows = []
    for k in k_grid:
        values, seeds, steps = [], [], []
        for r in range(repeats):
            seed = _run_seed(cfg.seed, int(k), r)
            rec = train_estimator(data, replace(spec, embed_dim=int(k)), replace(cfg, seed=seed))
            values.append(rec.reported)
            seeds.append(seed)
            steps.append(rec.step_of_max_test)
        rows.append(
            SweepRow(int(k), float(np.mean(values)), float(np.std(values)), values,
                     data.t, seeds, steps)
        )
    return rows


@dataclass(frozen=True)
class GuidelinesConfig:
    linear_k_grid: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    rcca: RccaConfig = RccaConfig()
    null_trials: int = 5
    saturation_rel: float = 0.05
    saturation_abs: float = 0.05
    nn_k_grid: tuple[int, ...] = (1, 2, 4, 8)
    n_fractions: tuple[float, ...] = (0.5, 1.0)
    seeds: int = 3
    critic: CriticSpec = CriticSpec("separable", 2, 64)
    estimator: EstimatorConfig = EstimatorConfig(epochs=20)
    stability_sigma: float = 1.0
    stability_abs: float = 0.05
    seed: int = 0


def _effective_rank(z: NDArray, threshold: float = 1e-8) -> int:
    """Rank of the correlation matrix, counted as ``gaussian_mi_from_data`` does."""
    z = z[:, informative_columns(z)]
    if z.shape[1] == 0:
        return 0
    c = np.atleast_2d(np.corrcoef(z, rowvar=False))
    return int(np.sum(np.linalg.svd(c, compute_uv=False) > threshold))


def _null_gaussian_mi(n: int, kx: int, ky: int, trials: int, rng) -> tuple[float, float]:
    """Mean and std of the correlation MI of independent Gaussian blocks."""
    if kx == 0 or ky == 0:
        return 0.0, 0.0
    vals = [
        gaussian_mi_from_data(rng.standard_normal((n, kx)), rng.standard_normal((n, ky)))
        for _ in range(trials)
    ]
    return float(np.mean(vals)), float(np.std(vals))


def _linear_step(data: DataMatrixPair, cfg: GuidelinesConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    train_idx, test_idx = _split(data.t, cfg.estimator.test_fraction, rng)
    k_cap = min(data.x.shape[1], data.y.shape[1])
    grid = [k for k in cfg.linear_k_grid if k <= k_cap] or [k_cap]
    basis = rcca_fit(data.x[train_idx], data.y[train_idx], grid[-1], cfg.rcca)
    curve = []
    for k in grid:
        zx, zy = project(basis.truncate(k), data.x[test_idx], data.y[test_idx])
        raw = gaussian_mi_from_data(zx, zy)
        # Directions past the rank of the data add no columns to the null.
        null, null_std = _null_gaussian_mi(len(test_idx), _effective_rank(zx),
                                           _effective_rank(zy), cfg.null_trials, rng)
        curve.append({"k": k, "mi": raw, "null": null, "null_std": null_std,
                      "corrected": raw - null})
    top = curve[-max(2, math.ceil(len(curve) / 3)):] if len(curve) >= 2 else curve
    vals = np.array([c["corrected"] for c in top])
    level = float(vals[-1])
    tol = max(cfg.saturation_rel * abs(level), cfg.saturation_abs,
              3 * max(c["null_std"] for c in top))
    saturated = len(curve) >= 2 and float(vals.max() - vals.min()) <= tol
    return {"curve": curve, "saturated": bool(saturated), "estimate": max(level, 0.0),
            "tolerance": tol}


def guidelines_protocol(data: DataMatrixPair, cfg: GuidelinesConfig | None = None) -> dict:
    """Decide whether paired data admit a reliable MI estimate.

    Step 1 fits rCCA and checks whether the bias-corrected correlation MI of
    the held-out projections saturates with the latent dimension; if so,
    that value is reported. Otherwise a neural estimator is trained with the
    max-test heuristic for every (embedding dimension, subsample size, seed)
    and an estimate is reported only when a plateau in the embedding
    dimension exists and is stable under subsampling.
    """
    from .harness import subsample_without_replacement

    cfg = cfg or GuidelinesConfig()
    report: dict = {"linear": _linear_step(data, cfg)}
    if report["linear"]["saturated"]:
        report.update(verdict="reliable", method="rcca", estimate=report["linear"]["estimate"],
                      std=0.0, k_hat=None)
        return report

    sizes = sorted({max(cfg.estimator.batch_size * 2, int(f * data.t)) for f in cfg.n_fractions})
    sizes = [min(n, data.t) for n in sizes]
    table = []
    stats: dict[tuple[int, int], tuple[float, float]] = {}
    for n in sizes:
        sub = subsample_without_replacement(data, n, cfg.seed)
        for k in cfg.nn_k_grid:
            vals = []
            for s in range(cfg.seeds):
                seed = _run_seed(cfg.seed, n, k, s)
                rec = train_estimator(sub, replace(cfg.critic, embed_dim=k),
                                      replace(cfg.estimator, seed=seed))
                vals.append(rec.reported)
                table.append({"k_z": k, "n": n, "seed": seed, "reported_mi": rec.reported,
                              "step_of_max_test": rec.step_of_max_test})
            stats[(k, n)] = (float(np.mean(vals)), float(np.std(vals)))
    report["neural"] = table

    def close(a, b):
        (ma, sa), (mb, sb) = a, b
        tol = cfg.stability_sigma * math.hypot(sa, sb) + cfg.stability_abs + 0.05 * abs(ma)
        return abs(ma - mb) <= tol

    n_full = sizes[-1]
    ks = sorted(cfg.nn_k_grid)
    k_hat = None
    for i, k in enumerate(ks[:-1]):
        if all(close(stats[(k, n_full)], stats[(k2, n_full)]) for k2 in ks[i + 1 :]):
            k_hat = k
            break
    stable_n = k_hat is not None and all(
        close(stats[(k_hat, n_full)], stats[(k_hat, n)]) for n in sizes[:-1]
    )
    if k_hat is None or not stable_n:
        report.update(verdict="unreliable", method="neural", estimate=None, std=None,
                      k_hat=k_hat)
    else:
        mean, std = stats[(k_hat, n_full)]
        report.update(verdict="reliable", method="neural", estimate=mean, std=std, k_hat=k_hat)
    return report
