"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 the guidelines
protocol found no reliable MI estimate. The default output directory is
taken from ``SDRKIT_OUTPUT_DIR`` (falling back to ``./sdrkit-out``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen, harness, ibgraph, lindr, metrics, miest
from .fileio import read_matrix, read_pair, to_jsonable, write_csv, write_matrix, write_pair

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNRELIABLE = 3
OUTPUT_ENV = "SDRKIT_OUTPUT_DIR"


class CliError(Exception):
    """Reported to stderr with exit code 2."""


def _out_dir(args, sub: str) -> Path:
    base = args.out or os.environ.get(OUTPUT_ENV) or "sdrkit-out"
    path = Path(base) if args.out else Path(base) / sub
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True))


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    out = _out_dir(args, "data")
    if args.kind == "linear":
        spec = datagen.LinearModelSpec.from_snr(
            args.n_x, args.n_y or args.n_x, args.t, args.m_shared, args.m_self,
            args.gamma_shared, args.gamma_self,
            seed_projections=args.seed_projections, seed_samples=args.seed,
        )
        pair = datagen.generate_linear_model(spec)
    elif args.kind == "gaussian":
        rho = datagen.rho_for_target_mi(args.k, args.mi)
        pair = datagen.generate_gaussian_pair(
            datagen.GaussianPairSpec(args.k, tuple(rho), args.n, args.seed))
    elif args.kind == "spread":
        pair = datagen.spread_information_pair(args.ambient, args.k_signal, args.mi, args.n,
                                               args.seed)
    else:
        spec = datagen.PendulumSpec(n_experiments=args.experiments, obs_dim=args.obs_dim,
                                    seed=args.seed)
        sim = datagen.simulate_pendulum(spec)
        pair = datagen.DataMatrixPair(sim.x, sim.y, provenance={
            "generator": "pendulum", "spec": spec.__dict__})
        write_matrix(out / "state", sim.state, {"columns": ["theta", "omega"]})
    if args.kind in ("gaussian", "spread"):
        if args.cubic:
            pair = datagen.apply_cubic(pair)
        if args.copies > 1:
            pair = datagen.replicate_embed(pair, args.copies)
        if args.random_features:
            pair = datagen.random_features_embed(pair, args.random_features, seed=args.seed)
    write_pair(out, pair)
    if args.csv:
        np.savetxt(out / "x.csv", pair.x, delimiter=",")
        np.savetxt(out / "y.csv", pair.y, delimiter=",")
    print(f"wrote {pair.x.shape} and {pair.y.shape} matrices to {out}")
    return EXIT_OK


def cmd_reduce(args) -> int:
    pair = read_pair(args.data)
    cfg = lindr.RccaConfig(args.c, args.c)
    basis = lindr.fit(args.method, pair.x, pair.y, args.k, cfg)
    out = _out_dir(args, "basis")
    meta = {"method": basis.method, "criteria": basis.criteria, "iterations": basis.iterations,
            "c": args.c}
    write_matrix(out / "w_x", basis.w_x, meta)
    if basis.w_y is not None:
        write_matrix(out / "w_y", basis.w_y, meta)
    print(f"{basis.method} basis with k={basis.k} written to {out}")
    return EXIT_OK


def _load_basis(directory: Path) -> lindr.ProjectionBasis:
    w_x, meta = read_matrix(directory / "w_x")
    w_y = read_matrix(directory / "w_y")[0] if (directory / "w_y.bin").exists() else None
    return lindr.ProjectionBasis(meta["method"], w_x, w_y, np.asarray(meta["criteria"]),
                                 list(meta.get("iterations", [])))


def cmd_evaluate(args) -> int:
    out = _out_dir(args, "evaluate")
    test = read_pair(args.data)
    result = {}
    if args.basis:
        basis = _load_basis(Path(args.basis))
        zx, zy = lindr.project(basis, test.x, test.y)
        rep = metrics.rc_prime(zx, zy, args.m_shared, args.trials, args.seed)
        result["rc_report"] = rep.to_dict()
        _dump(out / "rc_report.json", rep.to_dict())
    if args.k_grid:
        if not args.train:
            raise CliError("--k-grid needs --train DATA to fit on")
        train = read_pair(args.train)
        table = metrics.latent_dim_diagnostic(
            train.x, train.y, args.k_grid, lindr.RccaConfig(args.c, args.c),
            test.x, test.y, args.m_shared, args.trials, args.seed)
        write_csv(out / "diagnostic.csv", table.rows(),
                  ["k", "rc_prime_pca", "rc_prime_rcca", "rc0", "rc0_std"])
        result["peak_k_pca"] = table.peak_k_pca
        result["peak_k_rcca"] = table.peak_k_rcca
    if args.mi:
        result["gaussian_mi"] = metrics.gaussian_mi_from_data(test.x, test.y, args.threshold)
        result["true_mi"] = test.true_mi
    if not result:
        raise CliError("nothing to evaluate: pass --basis, --k-grid or --mi")
    _dump(out / "evaluate.json", result)
    print(json.dumps(to_jsonable(result), indent=2, sort_keys=True))
    return EXIT_OK


def _estimator_config(args) -> miest.EstimatorConfig:
    return miest.EstimatorConfig(
        objective=args.objective, tau=args.tau, batch_size=args.batch, steps=args.steps,
        epochs=args.epochs, learning_rate=args.lr, seed=args.seed, dtype=args.dtype,
    )


def cmd_mi(args) -> int:
    out = _out_dir(args, "mi")
    cfg = _estimator_config(args)
    spec = miest.CriticSpec(args.critic, args.hidden_layers, args.hidden_width, args.kz)
    if args.staircase:
        source = miest.StaircaseSource(args.k, tuple(args.staircase), args.steps, args.cubic)
        rec = miest.train_estimator(source, spec, cfg)
        _dump(out / "run_record.json", rec.to_dict())
        _dump(out / "staircase.json", miest.staircase_summary(rec, source))
        print(json.dumps(miest.staircase_summary(rec, source), indent=2))
        return EXIT_OK
    if not args.data:
        raise CliError("pass --data DIR or --staircase LEVELS")
    data = read_pair(args.data)
    if args.kz_grid:
        rows = miest.embedding_sweep(data, args.kz_grid, spec, cfg, args.repeats)
        flat = [
            {"k_z": r.k_z, "n": r.n, "seed": s, "reported_mi": v, "step_of_max_test": st}
            for r in rows for v, s, st in zip(r.values, r.seeds, r.steps_of_max_test)
        ]
        write_csv(out / "sweep.csv", flat, ["k_z", "n", "seed", "reported_mi",
                                            "step_of_max_test"])
        for r in rows:
            print(f"k_z={r.k_z:4d}  mi={r.mean:.4f} +/- {r.std:.4f}")
        return EXIT_OK
    rec = miest.train_estimator(data, spec, cfg)
    _dump(out / "run_record.json", rec.to_dict())
    print(f"reported MI {rec.reported:.4f} nats (max test at step {rec.step_of_max_test})")
    return EXIT_OK


def cmd_ib(args) -> int:
    out = _out_dir(args, "ib")
    if args.graph:
        text = Path(args.graph).read_text()
    else:
        text = ibgraph.GRAPH_LIBRARY[args.preset]
    graph = ibgraph.parse_graph(text)
    if args.beta is not None:
        graph.beta = args.beta
    pair = read_pair(args.data)
    observed = graph.observed
    if len(observed) != 2:
        raise CliError("the ib command needs a graph with exactly two observed nodes")
    widths = {observed[0]: pair.x.shape[1], observed[1]: pair.y.shape[1]}
    widths.update({z: graph.dims.get(z, args.kz) for z in graph.latent})
    arch = ibgraph.ArchitectureConfig(
        widths=widths, encoder_hidden=tuple(args.hidden), decoder_hidden=tuple(args.hidden),
        critic_hidden=tuple(args.critic_hidden), latent_objective=args.objective,
    )
    loss = ibgraph.compile_loss(graph, arch, seed=args.seed)
    rec = ibgraph.train_composite(
        loss, pair, ibgraph.CompositeTrainConfig(epochs=args.epochs, batch_size=args.batch,
                                                 learning_rate=args.lr, seed=args.seed))
    from .nncore import save_checkpoint

    save_checkpoint(loss.nets(), out / "checkpoint", {"graph": text, "beta": graph.beta})
    emb = loss.encode({observed[0]: pair.x, observed[1]: pair.y})
    for z, mu in emb.items():
        write_matrix(out / f"embedding_{z}", mu, {"latent": z})
    trace = [{"epoch": e, "train_mi": a, "test_mi": b, "loss": c}
             for e, a, b, c in zip(rec.epochs, rec.train_mi or [None] * len(rec.epochs),
                                   rec.test_mi or [None] * len(rec.epochs), rec.epoch_loss)]
    write_csv(out / "trace.csv", trace, ["epoch", "train_mi", "test_mi", "loss"])
    _dump(out / "record.json", rec.to_dict())
    print(f"terms: {', '.join(str(t) for t in loss.terms)}; collapsed={rec.collapsed}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = harness.ExperimentConfig.from_json(args.config)
    overrides = {}
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.master_seed is not None:
        overrides["master_seed"] = args.master_seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    out = Path(args.out or cfg.output_dir or os.environ.get(OUTPUT_ENV) or "sdrkit-out")
    table = harness.run_sweep(cfg, output_dir=out)
    paths = harness.emit_results(table, out, config=cfg)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_guidelines(args) -> int:
    out = _out_dir(args, "guidelines")
    data = read_pair(args.data)
    cfg = miest.GuidelinesConfig(
        linear_k_grid=tuple(args.linear_k_grid), nn_k_grid=tuple(args.kz_grid),
        n_fractions=tuple(args.fractions), seeds=args.seeds,
        critic=miest.CriticSpec("separable", args.hidden_layers, args.hidden_width),
        estimator=miest.EstimatorConfig(objective=args.objective, batch_size=args.batch,
                                        epochs=args.epochs, learning_rate=args.lr),
        seed=args.seed,
    )
    report = miest.guidelines_protocol(data, cfg)
    _dump(out / "report.json", report)
    print(f"verdict: {report['verdict']} (method {report['method']}, "
          f"estimate {report['estimate']})")
    return EXIT_UNRELIABLE if report["verdict"] == "unreliable" else EXIT_OK


def cmd_dynamics(args) -> int:
    out = _out_dir(args, "dynamics")
    spec = datagen.PendulumSpec(n_experiments=args.experiments, obs_dim=args.obs_dim,
                                seed=args.seed)
    res = harness.run_dynamics(
        spec, k_z=args.kz, beta=args.beta, epochs=args.epochs, learning_rate=args.lr,
        encoder_hidden=tuple(args.hidden), critic_hidden=tuple(args.critic_hidden),
        batch_size=args.batch, seed=args.seed)
    rec = res["record"]
    write_csv(out / "trace.csv",
              [{"epoch": e, "train_mi": a, "test_mi": b}
               for e, a, b in zip(rec.epochs, rec.train_mi, rec.test_mi)],
              ["epoch", "train_mi", "test_mi"])
    write_matrix(out / "embeddings", res["embeddings"], {"latent": "Zx"})
    write_matrix(out / "state", res["state"], {"columns": ["theta", "omega"]})
    summary = {"readout_r2": res["readout_r2"], "collapsed": rec.collapsed,
               "final_train_mi": rec.train_mi[-1] if rec.train_mi else None,
               "final_test_mi": rec.test_mi[-1] if rec.test_mi else None,
               "spikes": rec.spikes}
    _dump(out / "summary.json", summary)
    print(json.dumps(to_jsonable(summary), indent=2))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdrkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<command>)")
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    g = add("generate", cmd_generate, "generate a synthetic data pair")
    g.add_argument("--kind", choices=["linear", "gaussian", "spread", "pendulum"],
                   default="linear")
    g.add_argument("--n-x", type=int, default=200)
    g.add_argument("--n-y", type=int, default=None)
    g.add_argument("--t", type=int, default=300)
    g.add_argument("--m-shared", type=int, default=1)
    g.add_argument("--m-self", type=int, default=1)
    g.add_argument("--gamma-shared", type=float, default=5.0)
    g.add_argument("--gamma-self", type=float, default=5.0)
    g.add_argument("--seed-projections", type=int, default=0)
    g.add_argument("--k", type=int, default=10)
    g.add_argument("--mi", type=float, default=1.0)
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--ambient", type=int, default=128)
    g.add_argument("--k-signal", type=int, default=1)
    g.add_argument("--cubic", action="store_true")
    g.add_argument("--copies", type=int, default=1)
    g.add_argument("--random-features", type=int, default=0, metavar="OUT_DIM")
    g.add_argument("--experiments", type=int, default=100)
    g.add_argument("--obs-dim", type=int, default=784)
    g.add_argument("--csv", action="store_true", help="also write x.csv and y.csv")

    r = add("reduce", cmd_reduce, "fit a linear reduction basis")
    r.add_argument("--data", required=True)
    r.add_argument("--method", choices=list(lindr.METHODS), required=True)
    r.add_argument("--k", type=int, required=True)
    r.add_argument("--c", type=float, default=0.1)

    e = add("evaluate", cmd_evaluate, "RC' report, latent-dimension diagnostic, Gaussian MI")
    e.add_argument("--data", required=True, help="test pair directory")
    e.add_argument("--basis")
    e.add_argument("--train", help="training pair for --k-grid")
    e.add_argument("--k-grid", type=_ints)
    e.add_argument("--m-shared", type=int, default=1)
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--c", type=float, default=0.1)
    e.add_argument("--mi", action="store_true")
    e.add_argument("--threshold", type=float, default=1e-8)

    def estimator_args(sp):
        sp.add_argument("--objective", choices=list(miest.OBJECTIVES), default="infonce")
        sp.add_argument("--critic", choices=list(miest.CRITIC_KINDS), default="separable")
        sp.add_argument("--kz", type=int, default=16)
        sp.add_argument("--hidden-layers", type=int, default=2)
        sp.add_argument("--hidden-width", type=int, default=256)
        sp.add_argument("--batch", type=int, default=128)
        sp.add_argument("--steps", type=int, default=2000, help="steps per staircase level")
        sp.add_argument("--epochs", type=int, default=20)
        sp.add_argument("--tau", type=float, default=5.0)
        sp.add_argument("--lr", type=float, default=5e-4)
        sp.add_argument("--dtype", choices=["float64", "float32"], default="float64")

    m = add("mi", cmd_mi, "train a neural MI estimator")
    m.add_argument("--data")
    estimator_args(m)
    m.add_argument("--heuristic", choices=["max-test"], default="max-test")
    m.add_argument("--repeats", type=int, default=5)
    m.add_argument("--kz-grid", type=_ints)
    m.add_argument("--staircase", type=_floats, help="MI levels in nats, e.g. 2,4,6")
    m.add_argument("--k", type=int, default=10, help="staircase dimension")
    m.add_argument("--cubic", action="store_true")

    i = add("ib", cmd_ib, "train a compiled information-bottleneck loss")
    grp = i.add_mutually_exclusive_group(required=True)
    grp.add_argument("--graph", help="graph description file")
    grp.add_argument("--preset", choices=sorted(ibgraph.GRAPH_LIBRARY))
    i.add_argument("--data", required=True)
    i.add_argument("--beta", type=float)
    i.add_argument("--kz", type=int, default=2)
    i.add_argument("--epochs", type=int, default=100)
    i.add_argument("--batch", type=int, default=128)
    i.add_argument("--lr", type=float, default=1e-4)
    i.add_argument("--hidden", type=_ints, default=[256, 256])
    i.add_argument("--critic-hidden", type=_ints, default=[256])
    i.add_argument("--objective", choices=list(miest.OBJECTIVES), default="mine")

    s = sub.add_parser("sweep", help="run an experiment sweep from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--master-seed", type=int)
    s.set_defaults(func=cmd_sweep)

    gl = add("guidelines", cmd_guidelines, "run the MI reliability protocol")
    gl.add_argument("--data", required=True)
    gl.add_argument("--linear-k-grid", type=_ints, default=[1, 2, 4, 8, 16, 32])
    gl.add_argument("--kz-grid", type=_ints, default=[1, 2, 4, 8])
    gl.add_argument("--fractions", type=_floats, default=[0.5, 1.0])
    gl.add_argument("--seeds", type=int, default=3)
    gl.add_argument("--hidden-layers", type=int, default=2)
    gl.add_argument("--hidden-width", type=int, default=64)
    gl.add_argument("--objective", choices=list(miest.OBJECTIVES), default="infonce")
    gl.add_argument("--batch", type=int, default=128)
    gl.add_argument("--epochs", type=int, default=20)
    gl.add_argument("--lr", type=float, default=5e-4)

    d = add("dynamics", cmd_dynamics, "simulate the pendulum and learn dynamics embeddings")
    d.add_argument("--experiments", type=int, default=1000)
    d.add_argument("--obs-dim", type=int, default=784)
    d.add_argument("--kz", type=int, default=2)
    d.add_argument("--beta", type=float, default=256.0)
    d.add_argument("--lr", type=float, default=5e-5)
    d.add_argument("--epochs", type=int, default=200)
    d.add_argument("--batch", type=int, default=128)
    d.add_argument("--hidden", type=_ints, default=[1024, 1024])
    d.add_argument("--critic-hidden", type=_ints, default=[32])
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, harness.ConfigError, datagen.GenerationError, ibgraph.GraphSyntaxError,
            ibgraph.CompileError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
