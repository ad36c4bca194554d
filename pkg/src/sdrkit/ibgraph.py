"""Variational information-bottleneck losses compiled from graph descriptions.

A loss is described by two Bayesian networks over observed and latent
nodes. The encoder graph says which latents compress which observations;
each encoder edge becomes a KL term. The decoder graph says what the
latents must explain; edges into observed nodes become Gaussian
reconstruction terms and edges between latents become neural MI terms.
The compiled loss is

    L = Σ KL terms - beta · Σ decoder terms

Grammar (one statement per line or separated by ``;``, ``#`` starts a
comment)::

    statement := decl | edge | tie | beta | dim
    decl      := ("observed" | "latent") NAME ([","] NAME)*
    edge      := ["encode" | "decode"] group "->" group
    group     := NAME | "(" NAME ("," NAME)* ")"
    tie       := "tie" NAME NAME+
    beta      := "beta" "=" NUMBER
    dim       := "dim" NAME "=" INTEGER

When no node is declared, names starting with ``Z`` or ``W`` are latent
and all others observed. An edge without a keyword is an encoder edge when
its sources are observed and a decoder edge when they are latent. Encoder
edges between observed nodes are accepted and dropped: they do not depend
on any trainable quantity.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import NDArray

from .datagen import DataMatrixPair
from .miest import (
    ConcatenatedCritic,
    mine_objective,
    infonce_objective,
    smile_objective,
    _objective_value,
)
from .nncore import (
    MlpNet,
    adam_init,
    adam_step,
    backward,
    forward,
    gaussian_posterior,
    kl_standard_normal,
    kl_standard_normal_grad,
    reparameterized_backward,
    reparameterized_sample,
)

__all__ = [
    "GRAPH_LIBRARY",
    "ArchitectureConfig",
    "CompileError",
    "CompiledLoss",
    "CompositeRecord",
    "CompositeTrainConfig",
    "Edge",
    "GraphSyntaxError",
    "LossGraphSpec",
    "LossTerm",
    "classify_terms",
    "compile_loss",
    "parse_graph",
    "term_multiset",
    "train_composite",
]


class GraphSyntaxError(ValueError):
    """A graph description failed to parse or validate."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CompileError(ValueError):
    """Network widths or tie constraints are inconsistent."""


@dataclass(frozen=True)
class Edge:
    sources: tuple[str, ...]
    target: str
    graph: str  # "encoder" | "decoder"
    line: int = 0
    column: int = 0


@dataclass
class LossGraphSpec:
    nodes: dict[str, str]
    encoder: list[Edge]
    decoder: list[Edge]
    beta: float = 1.0
    ties: list[tuple[str, ...]] = field(default_factory=list)
    dims: dict[str, int] = field(default_factory=dict)

    @property
    def observed(self) -> list[str]:
        return [n for n, k in self.nodes.items() if k == "observed"]

    @property
    def latent(self) -> list[str]:
        return [n for n, k in self.nodes.items() if k == "latent"]


_TOKEN = re.compile(r"(->)|([A-Za-z_][A-Za-z0-9_]*)|([-+]?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)|([(),=])")
_TOKEN_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_KEYWORDS = {"observed", "latent", "encode", "decode", "tie", "beta", "dim"}


def _tokenize(text: str, line: int, col0: int) -> list[tuple[str, int]]:
    """Tokens of one statement with 1-based columns."""
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if not m:
            raise GraphSyntaxError(f"unexpected character {text[pos]!r}", line, col0 + pos + 1)
        tokens.append((m.group(0), col0 + pos + 1))
        pos = m.end()
    return tokens


def _is_latent_name(name: str) -> bool:
    return name[0] in "ZW"


def parse_graph(text: str) -> LossGraphSpec:
    """Parse and validate a graph description."""
    statements = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        col = 0
        for part in body.split(";"):
            toks = _tokenize(part, lineno, col)
            if toks:
                statements.append((lineno, toks))
            col += len(part) + 1

    declared: dict[str, str] = {}
    mentions: dict[str, tuple[int, int]] = {}
    raw_edges = []  # (keyword, sources[(name, col)], targets[(name, col)], line, col)
    ties = []
    beta = 1.0
    dims: dict[str, int] = {}

    def group(toks, i, line):
        if i >= len(toks):
            raise GraphSyntaxError("expected a node name", line, toks[-1][1] if toks else 1)
        word, col = toks[i]
        if word == "(":
            names = []
            i += 1
            while True:
                if i >= len(toks):
                    raise GraphSyntaxError("unclosed '('", line, col)
                name, c = toks[i]
                if not _TOKEN_NAME.fullmatch(name):
                    raise GraphSyntaxError(f"expected a node name, got {name!r}", line, c)
                names.append((name, c))
                i += 1
                if i < len(toks) and toks[i][0] == ",":
                    i += 1
                    continue
                if i < len(toks) and toks[i][0] == ")":
                    return names, i + 1
                raise GraphSyntaxError("expected ',' or ')'", line, toks[min(i, len(toks) - 1)][1])
        if not _TOKEN_NAME.fullmatch(word) or word in _KEYWORDS:
            raise GraphSyntaxError(f"expected a node name, got {word!r}", line, col)
        return [(word, col)], i + 1

    for line, toks in statements:
        head, col = toks[0]
        if head in ("observed", "latent"):
            for name, c in toks[1:]:
                if name == ",":
                    continue
                if not _TOKEN_NAME.fullmatch(name) or name in _KEYWORDS:
                    raise GraphSyntaxError(f"invalid node name {name!r}", line, c)
                if name in declared and declared[name] != head:
                    raise GraphSyntaxError(f"node {name} declared twice with different kinds",
                                           line, c)
                declared[name] = head
                mentions.setdefault(name, (line, c))
        elif head == "tie":
            names = [(n, c) for n, c in toks[1:] if n != ","]
            if len(names) < 2:
                raise GraphSyntaxError("tie needs at least two nodes", line, col)
            ties.append((line, names))
            for n, c in names:
                mentions.setdefault(n, (line, c))
        elif head == "beta":
            if len(toks) != 3 or toks[1][0] != "=":
                raise GraphSyntaxError("expected 'beta = NUMBER'", line, col)
            try:
                beta = float(toks[2][0])
            except ValueError:
                raise GraphSyntaxError("beta must be a number", line, toks[2][1]) from None
            if not beta > 0:
                raise GraphSyntaxError("beta must be positive", line, toks[2][1])
        elif head == "dim":
            if len(toks) != 4 or toks[2][0] != "=" or not toks[3][0].isdigit():
                raise GraphSyntaxError("expected 'dim NAME = INTEGER'", line, col)
            dims[toks[1][0]] = int(toks[3][0])
            mentions.setdefault(toks[1][0], (line, toks[1][1]))
        else:
            keyword = None
            i = 0
            if head in ("encode", "decode"):
                keyword = head
                i = 1
            sources, i = group(toks, i, line)
            if i >= len(toks) or toks[i][0] != "->":
                raise GraphSyntaxError("expected '->'", line,
                                       toks[min(i, len(toks) - 1)][1])
            targets, i = group(toks, i + 1, line)
            if i != len(toks):
                raise GraphSyntaxError(f"unexpected {toks[i][0]!r}", line, toks[i][1])
            for n, c in sources + targets:
                mentions.setdefault(n, (line, c))
            raw_edges.append((keyword, sources, targets, line, col))

    explicit = bool(declared)
    nodes: dict[str, str] = {}
    for name, (line, c) in mentions.items():
        if name in declared:
            nodes[name] = declared[name]
        elif explicit:
            raise GraphSyntaxError(f"unknown node {name}", line, c)
        else:
            nodes[name] = "latent" if _is_latent_name(name) else "observed"
    for name, kind in declared.items():
        nodes.setdefault(name, kind)

    encoder, decoder = [], []
    for keyword, sources, targets, line, col in raw_edges:
        kinds = {nodes[n] for n, _ in sources}
        if keyword is None:
            if len(kinds) > 1:
                raise GraphSyntaxError("edge mixes observed and latent sources", line, col)
            keyword = "encode" if kinds == {"observed"} else "decode"
        names = tuple(n for n, _ in sources)
        for tname, tcol in targets:
            if keyword == "encode":
                if "latent" in kinds:
                    bad = next(c for n, c in sources if nodes[n] == "latent")
                    raise GraphSyntaxError("encoder sources must be observed nodes", line, bad)
                encoder.append(Edge(names, tname, "encoder", line, tcol))
            else:
                if "observed" in kinds:
                    bad = next(c for n, c in sources if nodes[n] == "observed")
                    raise GraphSyntaxError("decoder sources must be latent nodes", line, bad)
                decoder.append(Edge(names, tname, "decoder", line, tcol))

    for graph in (encoder, decoder):
        _check_acyclic(graph)
    encoded = {e.target for e in encoder}
    for name in nodes:
        if nodes[name] == "latent" and name not in encoded:
            line, c = mentions.get(name, (0, 0))
            raise GraphSyntaxError(f"latent {name} has no encoder", line, c)
    tie_groups = []
    for line, names in ties:
        for n, c in names:
            if nodes.get(n) != "latent":
                raise GraphSyntaxError(f"only latent nodes can be tied, not {n}", line, c)
        tie_groups.append(tuple(n for n, _ in names))
    return LossGraphSpec(nodes, encoder, decoder, beta, tie_groups, dims)



def _check_acyclic(edges: list[Edge]) -> None:
    children: dict[str, list[Edge]] = {}
    for e in edges:
        for s in e.sources:
            children.setdefault(s, []).append(e)
    state: dict[str, int] = {}

    def visit(node: str) -> None:
        state[node] = 1
        for e in children.get(node, []):
            if state.get(e.target) == 1:
                raise GraphSyntaxError(
                    f"cycle through {node} -> {e.target} in the {e.graph} graph", e.line, e.column
                )
            if state.get(e.target) is None:
                visit(e.target)
        state[node] = 2

    for node in list(children):
        if state.get(node) is None:
            visit(node)


@dataclass(frozen=True)
class LossTerm:
    """One information term. ``sign`` is ``"+"`` for encoder terms and
    ``"-beta"`` for decoder terms."""

    kind: str  # encoder-kl | decoder-gaussian-recon | decoder-latent-mine
    sources: tuple[str, ...]
    target: str
    sign: str

    @property
    def label(self) -> str:
        src = self.sources[0] if len(self.sources) == 1 else "(" + ",".join(self.sources) + ")"
        if self.kind == "encoder-kl":
            return f"KL({src};{self.target})"
        if self.kind == "decoder-gaussian-recon":
            return f"RECON({self.target}|{src})"
        return f"MINE({src};{self.target})"

    def __str__(self) -> str:
        return ("+" if self.sign == "+" else "-beta*") + self.label


def classify_terms(spec: LossGraphSpec) -> list[LossTerm]:
    """Map graph edges onto loss terms.

    Encoder edges into a latent are merged into one KL term (several
    parents form a joint encoder); decoder edges are merged by target into
    one reconstruction term (observed target) or one MI term (latent
    target). Node order follows the declaration order.
    """
    order = {n: i for i, n in enumerate(spec.nodes)}

    def merged(edges, target):
        names = {s for e in edges if e.target == target for s in e.sources}
        return tuple(sorted(names, key=order.get))

    terms = []
    for z in spec.latent:
        srcs = merged(spec.encoder, z)
        if srcs:
            terms.append(LossTerm("encoder-kl", srcs, z, "+"))
    targets = []
    for e in spec.decoder:
        if e.target not in targets:
            targets.append(e.target)
    for t in targets:
        kind = "decoder-gaussian-recon" if spec.nodes[t] == "observed" else "decoder-latent-mine"
        terms.append(LossTerm(kind, merged(spec.decoder, t), t, "-beta"))
    return terms


def term_multiset(terms: list[LossTerm]) -> Counter:
    return Counter(str(t) for t in terms)


GRAPH_LIBRARY: dict[str, str] = {
    "beta-vae": """
        observed X
        latent Zx
        encode X -> Zx
        decode Zx -> X
    """,
    "dvib": """
        observed X, Y
        latent Zx
        encode X -> Zx
        decode Zx -> Y
    """,
    "beta-dvcca": """
        observed X, Y
        latent Zx
        encode X -> Zx
        decode Zx -> X
        decode Zx -> Y
    """,
    "joint-dvcca": """
        observed X, Y
        latent Z
        encode (X, Y) -> Z
        decode Z -> X
        decode Z -> Y
    """,
    "dvsib": """
        observed X, Y
        latent Zx, Zy
        encode X -> Zx
        encode Y -> Zy
        decode Zx -> X
        decode Zy -> Y
        decode Zx -> Zy
    """,
    "dvsib-private": """
        observed X, Y
        latent Zx, Zy, Wx, Wy
        encode X -> Zx
        encode X -> Wx
        encode Y -> Zy
        encode Y -> Wy
        decode (Zx, Wx) -> X
        decode (Zy, Wy) -> Y
        decode Zx -> Zy
    """,
    "dvsib-dynamics": """
        # past window X and future window Y share one encoder
        observed X, Y
        latent Zx, Zy
        encode X -> Zx
        encode Y -> Zy
        decode Zx -> Zy
        tie Zx Zy
        beta = 256
    """,
}


# ----------------------------------------------------------------- compiling


@dataclass
class ArchitectureConfig:
    """Widths and training-time choices for a compiled loss.

    ``widths`` maps every node to its dimension (observed data width or
    latent dimension). ``latent_objective`` selects the MI bound used for
    decoder terms between latents.
    """

    widths: dict[str, int]
    encoder_hidden: tuple[int, ...] = (256, 256)
    decoder_hidden: tuple[int, ...] = (256, 256)
    critic_hidden: tuple[int, ...] = (256,)
    activation: str = "relu"
    decoder_output: str = "linear"
    latent_objective: str = "mine"
    tau: float = 5.0
    ema_rate: float = 0.99
    samples_per_datum: int = 1
    dtype: str = "float64"


@dataclass
class LossEval:
    loss: float
    parts: dict[str, float]
    grads: list[NDArray] | None


class CompiledLoss:
    """Executable loss with parameters for every encoder, decoder and critic."""

    def __init__(self, spec: LossGraphSpec, arch: ArchitectureConfig, seed: int = 0):
        self.spec = spec
        self.arch = arch
        self.beta = spec.beta
        self.terms = classify_terms(spec)
        rng = np.random.default_rng(seed)
        dtype = np.dtype(arch.dtype)
        widths = dict(spec.dims)
        widths.update(arch.widths)
        missing = [n for n in spec.nodes if n not in widths]
        if missing:
            raise CompileError(f"no width bound for nodes {missing}")
        self.widths = widths
        if arch.latent_objective not in ("mine", "smile", "infonce"):
            raise CompileError(f"unknown latent objective {arch.latent_objective!r}")
        if arch.samples_per_datum < 1:
            raise CompileError("samples_per_datum must be at least 1")

        def width(names):
            return sum(widths[n] for n in names)

        tie_of = {}
        for group in spec.ties:
            for n in group:
                tie_of[n] = group[0]
        self.encoders: dict[str, MlpNet] = {}
        enc_inputs: dict[str, int] = {}
        for term in self.encoder_terms:
            z = term.target
            n_in = width(term.sources)
            leader = tie_of.get(z, z)
            if leader in enc_inputs and leader != z:
                if enc_inputs[leader] != n_in or widths[leader] != widths[z]:
                    raise CompileError(
                        f"tied nodes {leader} and {z} have different widths"
                    )
                self.encoders[z] = self.encoders[leader]
                continue
            if leader != z:
                raise CompileError(f"tie leader {leader} must be encoded before {z}")
            enc_inputs[z] = n_in
            self.encoders[z] = MlpNet.build(
                [n_in, *arch.encoder_hidden, widths[z]], rng,
                hidden_activation=arch.activation, head="gaussian", dtype=dtype,
            )
        for group in spec.ties:
            for n in group[1:]:
                if n not in self.encoders:
                    raise CompileError(f"tied node {n} has no encoder")

        self.decoders: dict[str, MlpNet] = {}
        self.critics: dict[str, ConcatenatedCritic] = {}
        self._log_ema: dict[str, float | None] = {}
        for term in self.terms:
            if term.kind == "decoder-gaussian-recon":
                self.decoders[term.label] = MlpNet.build(
                    [width(term.sources), *arch.decoder_hidden, widths[term.target]], rng,
                    hidden_activation=arch.activation,
                    output_activation=arch.decoder_output, dtype=dtype,
                )
            elif term.kind == "decoder-latent-mine":
                n_in = width(term.sources) + widths[term.target]
                self.critics[term.label] = ConcatenatedCritic(
                    MlpNet.build([n_in, *arch.critic_hidden, 1], rng,
                                 hidden_activation=arch.activation, dtype=dtype)
                )
                self._log_ema[term.label] = None

    @property
    def encoder_terms(self) -> list[LossTerm]:
        return [t for t in self.terms if t.kind == "encoder-kl"]

    @property
    def mi_terms(self) -> list[LossTerm]:
        return [t for t in self.terms if t.kind == "decoder-latent-mine"]

    def nets(self) -> dict[str, MlpNet]:
        """Every distinct network, named by role."""
        out: dict[str, MlpNet] = {}
        seen: set[int] = set()
        for z, net in self.encoders.items():
            if id(net) not in seen:
                out[f"encoder:{z}"] = net
                seen.add(id(net))
        for label, net in self.decoders.items():
            out[f"decoder:{label}"] = net
        for label, critic in self.critics.items():
            out[f"critic:{label}"] = critic.f
        return out

    def params(self) -> list[NDArray]:
        out = []
        for net in self.nets().values():
            out.extend(net.params())
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def _inputs(self, batch: dict[str, NDArray], names) -> NDArray:
        return np.hstack([batch[n] for n in names])

    def encode(self, batch: dict[str, NDArray]) -> dict[str, NDArray]:
        """Posterior means of every latent whose sources are all in ``batch``."""
        dtype = np.dtype(self.arch.dtype)
        out = {}
        for term in self.encoder_terms:
            if not all(s in batch for s in term.sources):
                continue
            inp = self._inputs({k: np.asarray(v, dtype) for k, v in batch.items()}, term.sources)
            out[term.target] = gaussian_posterior(self.encoders[term.target](inp)).mu
        return out

    def _mi(self, label: str, scores: NDArray, use_ema: bool):
        obj = self.arch.latent_objective
        if obj == "mine":
            res = mine_objective(scores, self._log_ema[label] if use_ema else None,
                                 self.arch.ema_rate)
            if use_ema:
                self._log_ema[label] = res.log_denominator
            return res
        if obj == "smile":
            return smile_objective(scores, self.arch.tau)
        return infonce_objective(scores)

    def evaluate(
        self,
        batch: dict[str, NDArray],
        rng: np.random.Generator | None = None,
        noise: dict[str, NDArray] | None = None,
        grad: bool = True,
        use_ema: bool = True,
    ) -> LossEval:
        """Loss value, per-term values and (optionally) parameter gradients.

        ``noise`` fixes the reparameterisation noise per latent (shape
        (n * samples_per_datum, k)); otherwise it is drawn from ``rng``.
        """
        dtype = np.dtype(self.arch.dtype)
        m = self.arch.samples_per_datum
        data = {
            k: np.tile(np.asarray(v, dtype=dtype), (m, 1)) for k, v in batch.items()
            if k in self.spec.nodes
        }
        if rng is None:
            rng = np.random.default_rng()
        beta = self.beta
        parts: dict[str, float] = {}
        acc: dict[int, NDArray] = {}

        def add(net: MlpNet, grads: list[NDArray]) -> None:
            for p, g in zip(net.params(), grads):
                if id(p) in acc:
                    acc[id(p)] += g
                else:
                    acc[id(p)] = g.copy()

        enc_cache = {}
        z: dict[str, NDArray] = {}
        n = None
        for term in self.encoder_terms:
            inp = self._inputs(data, term.sources)
            n = len(inp)
            out, tape = forward(self.encoders[term.target], inp)
            post = gaussian_posterior(out)
            if noise is not None and term.target in noise:
                eta = np.asarray(noise[term.target], dtype=dtype)
            else:
                eta = rng.standard_normal(post.mu.shape).astype(dtype)
            z[term.target] = reparameterized_sample(post, eta)
            parts[term.label] = float(kl_standard_normal(post).mean())
            enc_cache[term.target] = (post, tape, eta)
        dz = {k: np.zeros_like(v) for k, v in z.items()}

        def spread(names, g_in):
            col = 0
            for name in names:
                w = z[name].shape[1]
                dz[name] += g_in[:, col : col + w]
                col += w

        for term in self.terms:
            if term.kind == "decoder-gaussian-recon":
                net = self.decoders[term.label]
                out, tape = forward(net, self._inputs(z, term.sources))
                diff = data[term.target] - out
                parts[term.label] = float(-0.5 * np.mean(np.sum(diff * diff, axis=1)))
                if grad:
                    g, g_in = backward(tape, -beta * diff / len(diff))
                    add(net, g)
                    spread(term.sources, g_in)
            elif term.kind == "decoder-latent-mine":
                critic = self.critics[term.label]
                src = self._inputs(z, term.sources)
                if grad:
                    s, cache = critic.scores(src, z[term.target])
                    res = self._mi(term.label, s, use_ema)
                    g, g_src, g_tgt = critic.backward(cache, -beta * res.grad)
                    add(critic.f, g)
                    spread(term.sources, g_src)
                    dz[term.target] += g_tgt
                    parts[term.label] = res.estimate
                else:
                    s = critic.evaluate(src, z[term.target])
                    parts[term.label] = _objective_value(self.arch.latent_objective, s,
                                                         self.arch.tau)

        loss = sum(v for k, v in parts.items() if k.startswith("KL(")) - beta * sum(
            v for k, v in parts.items() if not k.startswith("KL(")
        )
        if not grad:
            return LossEval(float(loss), parts, None)
        for term in self.encoder_terms:
            post, tape, eta = enc_cache[term.target]
            d_mu, d_lv = reparameterized_backward(post, eta, dz[term.target])
            k_mu, k_lv = kl_standard_normal_grad(post)
            d_out = np.hstack([d_mu + k_mu / n, d_lv + k_lv / n])
            g, _ = backward(tape, d_out)
            add(self.encoders[term.target], g)
        grads = [acc.get(id(p), np.zeros_like(p)) for p in self.params()]
        return LossEval(float(loss), parts, grads)


def compile_loss(spec: LossGraphSpec, arch: ArchitectureConfig, seed: int = 0) -> CompiledLoss:
    return CompiledLoss(spec, arch, seed)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class CompositeTrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-4
    seed: int = 0
    test_fraction: float = 0.1
    eval_size: int = 1000
    collapse_threshold: float = 1e-6
    spike_drop: float = 0.5


@dataclass
class CompositeRecord:
    mi_label: str | None
    epochs: list[int] = field(default_factory=list)
    train_mi: list[float] = field(default_factory=list)
    test_mi: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    mu_variance: list[float] = field(default_factory=list)
    collapsed: bool = False
    collapse_epochs: list[int] = field(default_factory=list)
    spikes: list[int] = field(default_factory=list)
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _as_node_data(loss: CompiledLoss, data) -> dict[str, NDArray]:
    if isinstance(data, DataMatrixPair):
        observed = loss.spec.observed
        if len(observed) != 2:
            raise CompileError("a data pair needs a graph with exactly two observed nodes")
        return {observed[0]: data.x, observed[1]: data.y}
    return dict(data)


def train_composite(
    loss: CompiledLoss,
    data,
    config: CompositeTrainConfig | None = None,
    test=None,
) -> CompositeRecord:
    """Adam training of every network in ``loss``.

    After each epoch the first latent-latent MI term is evaluated on a fixed
    probe of the training rows and on the held-out rows, and the variance of
    the posterior means across the held-out rows is checked for collapse.
    """
    config = config or CompositeTrainConfig()
    rng = np.random.default_rng(config.seed)
    nodes = _as_node_data(loss, data)
    t = len(next(iter(nodes.values())))
    if test is None:
        perm = rng.permutation(t)
        n_test = max(2, int(round(config.test_fraction * t)))
        test_nodes = {k: v[perm[:n_test]] for k, v in nodes.items()}
        nodes = {k: v[perm[n_test:]] for k, v in nodes.items()}
    else:
        test_nodes = _as_node_data(loss, test)
    t = len(next(iter(nodes.values())))
    b = config.batch_size
    if t < b:
        raise ValueError(f"{t} training rows cannot fill a batch of {b}")
    params = loss.params()
    opt = adam_init(params, config.learning_rate)
    mi_label = loss.mi_terms[0].label if loss.mi_terms else None
    record = CompositeRecord(mi_label)
    n_probe = min(config.eval_size, t, len(next(iter(test_nodes.values()))))
    probe = rng.choice(t, size=n_probe, replace=False)
    probe_nodes = {k: v[probe] for k, v in nodes.items()}
    test_probe = {k: v[:n_probe] for k, v in test_nodes.items()}

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            perm = rng.permutation(t)
            losses = []
            try:
                for i in range(0, t - b + 1, b):
                    rows = perm[i : i + b]
                    res = loss.evaluate({k: v[rows] for k, v in nodes.items()}, rng)
                    adam_step(params, res.grads, opt)
                    losses.append(res.loss)
            except (ValueError, RuntimeError, FloatingPointError) as exc:
                record.collapsed = True
                record.message = f"{type(exc).__name__}: {exc}"
                record.train_loss.extend(losses)
                break
            record.train_loss.extend(losses)
            record.epochs.append(epoch)
            record.epoch_loss.append(float(np.mean(losses)))
            if mi_label is not None:
                tr = loss.evaluate(probe_nodes, np.random.default_rng([config.seed, 7]),
                                   grad=False)
                te = loss.evaluate(test_probe, np.random.default_rng([config.seed, 8]),
                                   grad=False)
                record.train_mi.append(tr.parts[mi_label])
                record.test_mi.append(te.parts[mi_label])
            mus = loss.encode(test_probe)
            var = min(float(mu.var(axis=0).mean()) for mu in mus.values()) if mus else np.inf
            record.mu_variance.append(var)
            if var < config.collapse_threshold:
                record.collapsed = True
                record.collapse_epochs.append(epoch)
    record.spikes = _spikes(record.train_mi, record.epochs, config.spike_drop)
    return record


def _spikes(series: list[float], epochs: list[int], drop: float) -> list[int]:
    """Epochs whose MI fell by more than ``drop`` nats (or 25 %) below the
    previous epoch."""
    out = []
    for prev, cur, ep in zip(series[:-1], series[1:], epochs[1:]):
        if prev - cur > max(drop, 0.25 * abs(prev)):
            out.append(ep)
    return out
