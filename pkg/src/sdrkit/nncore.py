"""Feed-forward networks with explicit reverse-mode gradients.

Networks are plain stacks of dense layers. ``forward`` records a tape of
intermediate values and ``backward`` consumes it, returning gradients for
every parameter array in ``MlpNet.params()`` order plus the gradient with
respect to the network input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

__all__ = [
    "ACTIVATIONS",
    "AdamState",
    "Dense",
    "GaussianPosterior",
    "MlpNet",
    "Tape",
    "TapeError",
    "TrainingError",
    "adam_init",
    "adam_step",
    "backward",
    "forward",
    "gaussian_posterior",
    "kl_standard_normal",
    "kl_standard_normal_grad",
    "load_checkpoint",
    "reparameterized_backward",
    "reparameterized_sample",
    "save_checkpoint",
]

ACTIVATIONS = ("relu", "sigmoid", "linear", "tanh")
HEADS = ("scalar", "vector", "gaussian")
CHECKPOINT_FORMAT = "sdrkit.mlp/1"


class TapeError(RuntimeError):
    """Raised when a tape is used for a second backward pass."""


class TrainingError(RuntimeError):
    """Raised when an optimizer step receives a non-finite gradient."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def _activate(name: str, z: NDArray) -> NDArray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        # scipy's expit is evaluated in the stable branch form.
        return expit(z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, z: NDArray, a: NDArray, g: NDArray,
                     inplace: bool = False) -> NDArray:
    """Chain ``g`` (gradient w.r.t. the activation) through the activation.

    With ``inplace`` the result overwrites ``g``, which saves a full-size
    temporary on the wide pairwise layers.
    """
    out = g if inplace else None
    if name == "relu":
        # relu'(0) is taken to be 0.
        return np.multiply(g, z > 0, out=out)
    if name == "sigmoid":
        return np.multiply(g, a * (1 - a), out=out)
    if name == "tanh":
        return np.multiply(g, 1 - a * a, out=out)
    return g


@dataclass
class Dense:
    weight: NDArray
    bias: NDArray
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("dense layer needs weight (n_in, n_out) and bias (n_out,)")

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpNet:
    """A stack of dense layers.

    ``head`` only describes how the output is meant to be read:
    ``"gaussian"`` nets emit ``2k`` columns, the mean followed by the
    log-variance of a diagonal Gaussian.
    """

    layers: list[Dense]
    head: str = "vector"

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError("consecutive layer widths do not match")
        if self.head == "gaussian" and self.layers[-1].n_out % 2:
            raise ValueError("a gaussian head needs an even output width")
        if self.head == "scalar" and self.layers[-1].n_out != 1:
            raise ValueError("a scalar head needs output width 1")

    @classmethod
    def build(
        cls,
        widths: list[int] | tuple[int, ...],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "linear",
        head: str = "vector",
        dtype: type | str = np.float64,
    ) -> "MlpNet":
        """Xavier-uniform weights, zero biases.

        For a gaussian head the last entry of ``widths`` is the latent
        dimension k and the output layer has 2k units.
        """
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid widths {widths}")
        if head == "gaussian":
            widths = widths[:-1] + [2 * widths[-1]]
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
            act = output_activation if i == len(widths) - 2 else hidden_activation
            layers.append(Dense(w, np.zeros(n_out, dtype=dtype), act))
        return cls(layers, head)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[NDArray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def __call__(self, x: NDArray) -> NDArray:
        out, _ = forward(self, x)
        return out


@dataclass
class Tape:
    net: MlpNet
    start: int
    inputs: list[NDArray]
    pre: list[NDArray]
    post: list[NDArray]
    consumed: bool = False


def forward(net: MlpNet, x: NDArray, start: int = 0) -> tuple[NDArray, Tape]:
    """Run ``net`` from layer ``start`` on a batch ``x`` of shape (n, width)."""
    layer0 = net.layers[start]
    if x.ndim != 2 or x.shape[1] != layer0.n_in:
        raise ValueError(
            f"input of shape {x.shape} does not match layer {start} width {layer0.n_in}"
        )
    inputs, pre, post = [], [], []
    h = x
    for layer in net.layers[start:]:
        inputs.append(h)
        z = h @ layer.weight + layer.bias
        h = _activate(layer.activation, z)
        pre.append(z)
        post.append(h)
    return h, Tape(net, start, inputs, pre, post)


def backward(tape: Tape, grad_out: NDArray) -> tuple[list[NDArray], NDArray]:
    """Reverse pass.

    Returns gradients aligned with ``tape.net.params()`` (zeros for layers
    before ``tape.start``) and the gradient with respect to the input.
    """
    if tape.consumed:
        raise TapeError("tape was already consumed by a backward pass")
    tape.consumed = True
    layers = tape.net.layers
    grads: list[NDArray] = []
    for layer in layers[: tape.start]:
        grads.extend((np.zeros_like(layer.weight), np.zeros_like(layer.bias)))
    tail: list[NDArray] = []
    g = grad_out
    for i in range(len(layers) - 1, tape.start - 1, -1):
        layer = layers[i]
        j = i - tape.start
        # Only the caller's array is off limits; later g are our own temporaries.
        g = _activation_grad(layer.activation, tape.pre[j], tape.post[j], g,
                             inplace=g is not grad_out)
        tail.append(g.sum(axis=0))
        tail.append(tape.inputs[j].T @ g)
        g = g @ layer.weight.T
    grads.extend(reversed(tail))
    return grads, g


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over a batch: ``mu`` and ``log_var`` are (n, k)."""

    mu: NDArray
    log_var: NDArray

    def __post_init__(self) -> None:
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu and log_var must have the same shape")

    @property
    def variance(self) -> NDArray:
        return np.exp(self.log_var)

    @property
    def k(self) -> int:
        return self.mu.shape[-1]


def gaussian_posterior(out: NDArray) -> GaussianPosterior:
    """Split a gaussian-head output into mean and log-variance."""
    k = out.shape[1] // 2
    return GaussianPosterior(out[:, :k], out[:, k:])


def reparameterized_sample(post: GaussianPosterior, eta: NDArray) -> NDArray:
    """z = mu + sqrt(var) * eta."""
    return post.mu + np.exp(0.5 * post.log_var) * eta


def reparameterized_backward(
    post: GaussianPosterior, eta: NDArray, grad_z: NDArray
) -> tuple[NDArray, NDArray]:
    """Gradients of a loss w.r.t. (mu, log_var) given its gradient w.r.t. z."""
    return grad_z, grad_z * eta * 0.5 * np.exp(0.5 * post.log_var)


def kl_standard_normal(post: GaussianPosterior) -> NDArray:
    """Per-row KL(N(mu, diag var) || N(0, I)) in nats."""
    if not (np.all(np.isfinite(post.mu)) and np.all(np.isfinite(post.log_var))):
        raise ValueError("posterior has non-finite entries")
    lv = post.log_var
    # expm1 keeps e^lv - 1 - lv non-negative near lv = 0.
    return 0.5 * np.sum(np.expm1(lv) - lv + post.mu**2, axis=-1)


def kl_standard_normal_grad(post: GaussianPosterior) -> tuple[NDArray, NDArray]:
    """Per-row gradients of ``kl_standard_normal`` w.r.t. mu and log_var."""
    return post.mu, 0.5 * (np.exp(post.log_var) - 1.0)


@dataclass
class AdamState:
    lr: float
    m: list[NDArray]
    v: list[NDArray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def adam_init(params: list[NDArray], lr: float = 5e-4, **kwargs) -> AdamState:
    return AdamState(
        lr=lr,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        **kwargs,
    )


def adam_step(params: list[NDArray], grads: list[NDArray], state: AdamState) -> AdamState:
    """One bias-corrected Adam descent step, updating ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    step = state.step + 1
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at step {step}", step)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = step
    return state


def save_checkpoint(nets: dict[str, MlpNet], path: str | Path, meta: dict | None = None) -> None:
    """Write ``path.bin`` (row-major float64 tensors) and ``path.json`` (topology)."""
    path = Path(path)
    header: dict = {"format": CHECKPOINT_FORMAT, "nets": {}, "meta": meta or {}}
    chunks = []
    offset = 0
    for name, net in nets.items():
        layers = []
        for layer in net.layers:
            layers.append(
                {
                    "n_in": layer.n_in,
                    "n_out": layer.n_out,
                    "activation": layer.activation,
                    "offset": offset,
                }
            )
            for p in (layer.weight, layer.bias):
                chunks.append(np.ascontiguousarray(p, dtype="<f8").ravel())
                offset += p.size
        header["nets"][name] = {"head": net.head, "layers": layers}
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    path.with_suffix(".bin").write_bytes(blob.tobytes())
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> dict[str, MlpNet]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    nets = {}
    for name, spec in header["nets"].items():
        layers = []
        for ls in spec["layers"]:
            o, n_in, n_out = ls["offset"], ls["n_in"], ls["n_out"]
            w = blob[o : o + n_in * n_out].reshape(n_in, n_out).copy()
            b = blob[o + n_in * n_out : o + n_in * n_out + n_out].copy()
            layers.append(Dense(w, b, ls["activation"]))
        nets[name] = MlpNet(layers, spec["head"])
    return nets
