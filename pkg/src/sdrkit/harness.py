"""Declarative experiment sweeps with per-cell seeds, caching and result files.

A sweep is the Cartesian product of the axis grids in an
:class:`ExperimentConfig`. Each cell runs ``trials`` independent trials and
every trial has its own seed derived from (master seed, cell, trial), so
results do not depend on execution order or worker count. With an output
directory, finished cells are cached under ``cells/`` and skipped on rerun.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .datagen import (
    DataMatrixPair,
    GaussianPairSpec,
    LinearModelSpec,
    apply_cubic,
    generate_gaussian_pair,
    generate_linear_model,
    replicate_embed,
    rho_for_target_mi,
)
from .fileio import read_csv, to_jsonable, write_csv
from .lindr import RccaConfig, fit, project
from .metrics import gaussian_mi_from_data, rc_prime

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "ExperimentConfig",
    "ResultTable",
    "cell_seed",
    "emit_results",
    "geometric_schedule",
    "projection_seed",
    "read_results",
    "run_dynamics",
    "run_linear_trial",
    "run_sweep",
    "subsample_without_replacement",
]

SCHEMA_VERSION = 1
KINDS = ("linear", "gaussian_mi")
LINEAR_KEYS = (
    "n_x", "n_y", "n", "t", "t_test", "m_shared", "m_self", "gamma_shared", "gamma_self",
    "gamma_ratio", "m_ratio", "q_ratio", "k", "c",
)
GAUSSIAN_KEYS = ("k", "mi", "n", "copies", "cubic", "k_z", "c", "threshold")
METRICS = {"linear": ["rc", "rc0", "rc0_std", "rc_prime"], "gaussian_mi": ["true_mi", "estimate"]}
PRIMARY = {"linear": "rc_prime", "gaussian_mi": "estimate"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """``generator`` holds base parameters; ``axes`` maps parameter names to
    grids that override them cell by cell.

    Linear parameters: n_x, n_y (or n for both), t, t_test, m_shared,
    m_self, gamma_shared, gamma_self, k (latent dimension), c (rCCA
    regularisation), plus derived axes gamma_ratio (gamma_shared /
    gamma_self), m_ratio (m_shared / m_self) and q_ratio (t / k).
    Gaussian-MI parameters: k, mi, n, copies, cubic, k_z (rCCA dimension,
    0 for the direct estimate), c, threshold.
    """

    kind: str = "linear"
    generator: dict = field(default_factory=dict)
    methods: list[str] = field(default_factory=lambda: ["pca", "rcca"])
    axes: dict[str, list] = field(default_factory=dict)
    trials: int = 10
    rc0_trials: int = 10
    output_dir: str | None = None
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; choose from {KINDS}")
        keys = LINEAR_KEYS if self.kind == "linear" else GAUSSIAN_KEYS
        for name in list(self.generator) + list(self.axes):
            if name not in keys:
                raise ConfigError(f"unknown parameter {name!r} for kind {self.kind}")
        for name, grid in self.axes.items():
            if not isinstance(grid, list) or not grid:
                raise ConfigError(f"axis {name!r} needs a non-empty list")
        if self.trials < 1 or self.rc0_trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.kind == "linear":
            bad = [m for m in self.methods if m not in ("pca", "pls", "cca", "rcca")]
            if bad or not self.methods:
                raise ConfigError(f"invalid methods {self.methods}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.axes.values())]


def cell_seed(master: int, cell: int, trial: int, stream: int = 0) -> int:
    """Seed derived from (master seed, cell index, trial index, stream)."""
    return int(np.random.SeedSequence([master, cell, trial, stream]).generate_state(1)[0])


def projection_seed(master: int) -> int:
    """Seed of the projection matrices, shared by every cell and trial."""
    return int(np.random.SeedSequence([master]).generate_state(1)[0])


def _linear_params(p: dict) -> dict:
    p = dict(p)
    if "n" in p:
        p.setdefault("n_x", p["n"])
        p.setdefault("n_y", p["n"])
    p.setdefault("n_x", 200)
    p.setdefault("n_y", p["n_x"])
    p.setdefault("t", 300)
    p.setdefault("t_test", p["t"])
    p.setdefault("m_shared", 1)
    p.setdefault("m_self", 0)
    p.setdefault("gamma_self", 1.0)
    if "m_ratio" in p:
        p["m_self"] = int(round(p["m_shared"] / p["m_ratio"]))
    if "gamma_ratio" in p:
        p["gamma_shared"] = p["gamma_ratio"] * p["gamma_self"]
    p.setdefault("gamma_shared", 1.0)
    if "q_ratio" in p:
        p["k"] = max(1, int(round(p["t"] / p["q_ratio"])))
    p.setdefault("k", 1)
    p.setdefault("c", 0.1)
    return p


def run_linear_trial(params: dict, methods: list[str], seeds: tuple[int, int, int],
                     rc0_trials: int = 10) -> list[dict]:
    """Generate train/test sets, fit each method, score the test projections."""
    p = _linear_params(params)
    seed_proj, seed_train, seed_test = seeds
    spec = LinearModelSpec.from_snr(
        p["n_x"], p["n_y"], p["t"], p["m_shared"], p["m_self"], p["gamma_shared"],
        p["gamma_self"], seed_projections=seed_proj, seed_samples=seed_train,
    )
    train = generate_linear_model(spec)
    test_spec = LinearModelSpec.from_snr(
        p["n_x"], p["n_y"], p["t_test"], p["m_shared"], p["m_self"], p["gamma_shared"],
        p["gamma_self"], seed_projections=seed_proj, seed_samples=seed_test,
    )
    test = generate_linear_model(test_spec)
    cfg = RccaConfig(p["c"], p["c"])
    out = []
    for method in methods:
        row = {"method": method}
        try:
            basis = fit(method, train.x, train.y, p["k"], cfg)
            zx, zy = project(basis, test.x, test.y)
            rep = rc_prime(zx, zy, max(1, p["m_shared"]), rc0_trials, seed=seed_test)
            row.update(rc=rep.rc, rc0=rep.rc0, rc0_std=rep.rc0_std, rc_prime=rep.rc_prime)
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        out.append(row)
    return out


def run_gaussian_trial(params: dict, seed: int) -> list[dict]:
    p = {"k": 10, "mi": 1.0, "n": 10000, "copies": 1, "cubic": False, "k_z": 0, "c": 0.1,
         "threshold": 1e-8}
    p.update(params)
    pair = generate_gaussian_pair(
        GaussianPairSpec(p["k"], tuple(rho_for_target_mi(p["k"], p["mi"])), p["n"], seed)
    )
    if p["cubic"]:
        pair = apply_cubic(pair)
    if p["copies"] > 1:
        pair = replicate_embed(pair, p["copies"])
    x, y = pair.x, pair.y
    method = "direct"
    if p["k_z"]:
        method = "rcca"
        basis = fit("rcca", x, y, p["k_z"], RccaConfig(p["c"], p["c"]))
        x, y = project(basis, x, y)
    est = gaussian_mi_from_data(x, y, p["threshold"])
    return [{"method": method, "true_mi": pair.true_mi, "estimate": est}]


def _run_cell(payload: dict) -> list[dict]:
    kind, params, cell, trials = (payload[k] for k in ("kind", "params", "cell", "trials"))
    master = payload["master_seed"]
    rows = []
    for trial in range(trials):
        try:
            if kind == "linear":
                seeds = (projection_seed(master), cell_seed(master, cell, trial, 1),
                         cell_seed(master, cell, trial, 2))
                results = run_linear_trial(params, payload["methods"], seeds,
                                           payload["rc0_trials"])
                seed = seeds[1]
            else:
                seed = cell_seed(master, cell, trial)
                results = run_gaussian_trial(params, seed)
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            results = [{"method": m, "error": f"{type(exc).__name__}: {exc}"}
                       for m in payload["methods"]]
            seed = None
        for r in results:
            rows.append({"cell": cell, "trial": trial, "seed": seed, **params, **r})
    return rows


@dataclass
class ResultTable:
    columns: list[str]
    rows: list[dict]

    @property
    def trial_rows(self) -> list[dict]:
        return [r for r in self.rows if r.get("row_type") == "trial"]

    @property
    def aggregate_rows(self) -> list[dict]:
        return [r for r in self.rows if r.get("row_type") == "aggregate"]


def _aggregate(kind: str, axis_names: list[str], trial_rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in trial_rows:
        groups.setdefault((r["cell"], r["method"]), []).append(r)
    out = []
    metrics = METRICS[kind]
    primary = PRIMARY[kind]
    for (cell, method), rows in groups.items():
        ok = [r for r in rows if r.get("error") is None]
        agg = {"row_type": "aggregate", "cell": cell, "trial": None, "method": method,
               "seed": None, "n_trials": len(ok)}
        for a in axis_names:
            agg[a] = rows[0].get(a)
        for m in metrics:
            vals = [r[m] for r in ok]
            agg[m] = float(np.mean(vals)) if vals else None
        vals = [r[primary] for r in ok]
        agg[f"{primary}_std"] = float(np.std(vals)) if vals else None
        errors = sorted({r["error"] for r in rows if r.get("error")})
        agg["error"] = "; ".join(errors) if errors else None
        out.append(agg)
    return out


def _columns(kind: str, axis_names: list[str]) -> list[str]:
    return (["schema_version", "row_type", "cell", "trial", "method", *axis_names, "seed",
             "n_trials", *METRICS[kind], f"{PRIMARY[kind]}_std", "error"])


def _cell_key(payload: dict) -> str:
    blob = json.dumps(to_jsonable(payload), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_sweep(config: ExperimentConfig, workers: int | None = None,
              output_dir: str | Path | None = None) -> ResultTable:
    """Run every cell (cached cells are loaded instead of recomputed)."""
    workers = workers or config.workers
    out = output_dir or config.output_dir
    cache = Path(out) / "cells" if out else None
    axis_names = list(config.axes)
    payloads = []
    for i, params in enumerate(config.cells()):
        merged = {**config.generator, **params}
        payloads.append({
            "kind": config.kind, "params": merged, "cell": i, "trials": config.trials,
            "methods": config.methods if config.kind == "linear" else ["direct"],
            "rc0_trials": config.rc0_trials, "master_seed": config.master_seed,
        })
    results: dict[int, list[dict]] = {}
    todo = []
    for p in payloads:
        path = cache / f"{_cell_key(p)}.json" if cache else None
        if path is not None and path.exists():
            results[p["cell"]] = json.loads(path.read_text())
        else:
            todo.append(p)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            computed = list(pool.map(_run_cell, todo))
    else:
        computed = [_run_cell(p) for p in todo]
    for p, rows in zip(todo, computed):
        rows = to_jsonable(rows)
        results[p["cell"]] = rows
        if cache is not None:
            cache.mkdir(parents=True, exist_ok=True)
            (cache / f"{_cell_key(p)}.json").write_text(json.dumps(rows, sort_keys=True))

    trial_rows = []
    for cell in sorted(results):
        for r in results[cell]:
            row = {"row_type": "trial", "n_trials": 1, **r}
            row.setdefault("error", None)
            trial_rows.append(row)
    rows = trial_rows + _aggregate(config.kind, axis_names, trial_rows)
    for r in rows:
        r["schema_version"] = SCHEMA_VERSION
    return ResultTable(_columns(config.kind, axis_names), rows)


def emit_results(table: ResultTable, out_dir: str | Path, formats=("csv", "json"),
                 config: ExperimentConfig | None = None, stem: str = "results") -> list[Path]:
    """Write ``results.csv`` and/or ``results.json`` (summary with a timestamp)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(write_csv(out_dir / f"{stem}.csv", table.rows, table.columns))
    if "json" in formats:
        summary = {
            "schema_version": SCHEMA_VERSION,
            "generated_at": datetime.now(timezone.utc).isoformat(),
            "config": config.to_dict() if config else None,
            "columns": table.columns,
            "aggregates": [{c: r.get(c) for c in table.columns} for r in table.aggregate_rows],
        }
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(to_jsonable(summary), indent=2, sort_keys=True))
        written.append(path)
    return written


def read_results(path: str | Path) -> ResultTable:
    columns, rows = read_csv(path)
    return ResultTable(columns, rows)


def subsample_without_replacement(data, n: int, seed: int):
    """First ``n`` rows of a seeded permutation.

    Subsamples with the same seed are nested: the rows for n1 < n2 are a
    subset of the rows for n2. Accepts a DataMatrixPair or an array.
    """
    t = data.t if isinstance(data, DataMatrixPair) else len(data)
    if not 1 <= n <= t:
        raise ValueError(f"cannot draw {n} rows from {t}")
    rows = np.random.default_rng(seed).permutation(t)[:n]
    return data.take(rows) if isinstance(data, DataMatrixPair) else data[rows]


def geometric_schedule(start: int = 256, stop: int = 55996, count: int = 20) -> list[int]:
    """Geometrically spaced sample sizes, rounded down: 256, 339, 451, ..."""
    if count < 1 or start < 1 or stop < start:
        raise ValueError("need count >= 1 and 1 <= start <= stop")
    sizes = np.floor(np.geomspace(start, stop, count) + 1e-9).astype(int)
    return sorted(set(int(s) for s in sizes))


def run_dynamics(
    spec,
    k_z: int = 2,
    beta: float = 256.0,
    epochs: int = 200,
    learning_rate: float = 5e-5,
    encoder_hidden: tuple[int, ...] = (1024, 1024),
    critic_hidden: tuple[int, ...] = (32,),
    batch_size: int = 128,
    test_fraction: float = 0.1,
    seed: int = 0,
) -> dict:
    """Simulate pendulum experiments and train the tied-encoder dynamics loss.

    Train and test windows come from disjoint experiments. Returns the
    training record, held-out embeddings of the past windows and the R² of
    a linear readout of (sin theta, cos theta) from those embeddings.
    """
    from .datagen import simulate_pendulum
    from .ibgraph import (GRAPH_LIBRARY, ArchitectureConfig, CompositeTrainConfig,
                          compile_loss, parse_graph, train_composite)
    from .metrics import linear_readout_r2

    data = simulate_pendulum(spec)
    n_test_exp = max(1, int(round(test_fraction * spec.n_experiments)))
    test_mask = data.experiment >= spec.n_experiments - n_test_exp
    graph = parse_graph(GRAPH_LIBRARY["dvsib-dynamics"])
    graph.beta = beta
    obs = data.x.shape[1]
    arch = ArchitectureConfig(
        widths={"X": obs, "Y": obs, "Zx": k_z, "Zy": k_z},
        encoder_hidden=tuple(encoder_hidden),
        critic_hidden=tuple(critic_hidden),
        latent_objective="smile",
    )
    loss = compile_loss(graph, arch, seed=seed)
    train = DataMatrixPair(data.x[~test_mask], data.y[~test_mask])
    test = DataMatrixPair(data.x[test_mask], data.y[test_mask])
    record = train_composite(
        loss, train,
        CompositeTrainConfig(epochs=epochs, batch_size=batch_size,
                             learning_rate=learning_rate, seed=seed),
        test=test,
    )
    emb = loss.encode({"X": test.x})["Zx"]
    theta = data.state[test_mask, 0]
    r2 = linear_readout_r2(emb, np.stack([np.sin(theta), np.cos(theta)], axis=1))
    return {"record": record, "loss": loss, "embeddings": emb, "state": data.state[test_mask],
            "readout_r2": r2}
