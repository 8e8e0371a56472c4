"""Command-line entry points: run experiments, verify properties, solve references."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import algorithms as alg
from . import compressors as comp
from . import harness
from .dataset import partition
from .problem import COMPOSITE, SMOOTH, DualProblem, PrimalProblem, compute_constants
from .rng import split_rng


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="LIBSVM file to load")
    parser.add_argument(
        "--synth",
        help="synthetic data as N,d,sparsity (default 200,50,0.3 when --data absent)",
    )
    parser.add_argument("--synth-scale", type=float, default=1.0, help="column norm of synthetic examples")
    parser.add_argument("--n", type=int, default=4, help="number of simulated nodes")
    parser.add_argument("--normalize", action="store_true", help="scale examples to unit norm")
    parser.add_argument("--shuffle-seed", type=int, default=None, help="shuffle examples before partitioning")
    parser.add_argument("--lambda1", type=float, default=1e-3)
    parser.add_argument("--lambda2", type=float, default=1e-3)
    parser.add_argument("--mode", choices=[COMPOSITE, SMOOTH], default=COMPOSITE)
    parser.add_argument("--seed", type=int, default=0, help="master seed (ECVR_SEED overrides)")


def _resolve_seed(args) -> int:
    env = os.environ.get("ECVR_SEED")
    return int(env) if env else args.seed


def _parse_synth(text: str | None) -> tuple[int, int, float] | None:
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 3:
        raise SystemExit(f"--synth expects N,d,sparsity; got {text!r}")
    return (int(parts[0]), int(parts[1]), float(parts[2]))


def _config_from_args(args) -> harness.RunConfig:
    synth = _parse_synth(getattr(args, "synth", None))
    data = getattr(args, "data", None)
    if data is None and synth is None:
        synth = (200, 50, 0.3)
    return harness.RunConfig(
        algo=getattr(args, "algo", "ec_lsvrg"),
        data=data,
        synth=None if data is not None else synth,
        synth_scale=args.synth_scale,
        n=args.n,
        compressor=getattr(args, "compressor", "identity"),
        compressor_q1=getattr(args, "compressor_q1", None),
        eta=getattr(args, "eta", "theory"),
        theta=getattr(args, "theta", None),
        p=getattr(args, "p", None),
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        mode=args.mode,
        epochs=getattr(args, "epochs", 10.0),
        seed=_resolve_seed(args),
        cadence=getattr(args, "cadence", None),
        normalize=args.normalize,
        shuffle_seed=args.shuffle_seed,
        gap_target=getattr(args, "gap_target", None),
        out_csv=getattr(args, "out", None),
        out_json=None,
    )


def cmd_run(args) -> int:
    config = _config_from_args(args)
    if config.out_csv:
        stem, _, _ = config.out_csv.rpartition(".")
        config.out_json = (stem or config.out_csv) + ".json"
    if args.eta != "theory":
        config.eta = float(args.eta)
    result = harness.run_experiment(config)
    for rec in result.records:
        gap = "" if rec.dual_gap is None else f" dual_gap={rec.dual_gap:.3e}"
        print(
            f"k={rec.k} epoch={rec.epoch:.2f} bits={rec.bits:.3e}"
            f" primal_gap={rec.primal_gap:.3e}{gap} err={rec.err_norm:.3e}"
        )
    target = f" bits_to_target={result.bits_to_target:.3e}" if result.bits_to_target else ""
    print(
        f"done algo={config.algo} compressor={config.compressor} steps={result.steps}"
        f" best_gap={result.best_gap:.3e} final_gap={result.final_gap:.3e}{target}"
    )
    if config.out_csv:
        print(f"trace written to {config.out_csv} and {config.out_json}")
    return 0


def cmd_verify(args) -> int:
    seed = _resolve_seed(args)
    ok = True
    if args.what == "compressors":
        d = args.d
        streams = iter(split_rng(seed, "verify", i) for i in range(64))
        specs = [
            comp.top_k(1),
            comp.top_k(5),
            comp.rand_k(1),
            comp.rand_k(5),
            comp.scaled(comp.dithering()),
            comp.scaled(comp.natural()),
            comp.ntop_k(5),
            comp.rtop_k(5),
            comp.identity(),
        ]
        for spec in specs:
            rep = comp.verify_contraction(spec, d, args.trials, next(streams))
            ok &= rep.passed
            print(
                f"contraction {rep.spec:>10} d={d}: mean={rep.mean_ratio:.4f}"
                f" (se {rep.std_error:.1e}) max={rep.max_ratio:.4f}"
                f" allowed={rep.allowed:.4f} -> {'ok' if rep.passed else 'FAIL'}"
            )
        # Coordinate-wise 3-SE checks have a ~0.3% false-alarm rate per
        # coordinate, so the mean checks run at a modest dimension.
        dm = min(d, 25)
        for spec in (comp.dithering(), comp.natural()):
            rep = comp.verify_unbiasedness(spec, dm, args.trials, next(streams))
            ok &= rep.passed
            print(
                f"unbiased   {rep.spec:>11} d={dm}: mean dev={rep.max_mean_deviation:.2e}"
                f" second={rep.second_moment:.3f} <= {rep.second_moment_bound:.3f}"
                f" -> {'ok' if rep.passed else 'FAIL'}"
            )
        for spec in (comp.rand_k(2), comp.scaled(comp.dithering())):
            rep = comp.verify_mean_scaling(spec, dm, args.trials, next(streams))
            ok &= rep.passed
            print(
                f"mean scale {rep.spec:>11} d={dm}: factor={rep.factor:.4f}"
                f" max dev={rep.max_abs_deviation:.2e} -> {'ok' if rep.passed else 'FAIL'}"
            )
    elif args.what == "eso":
        rng = split_rng(seed, "verify")
        for trial in range(args.instances):
            a = rng.standard_normal((10, 20))
            rep = harness.eso_check(a, n=4, trials=args.trials, rng=rng)
            ok &= rep.passed
            print(
                f"eso instance {trial}: ratio={rep.ratio:.4f} (se {rep.ratio_se:.1e})"
                f" -> {'ok' if rep.passed else 'FAIL'}"
            )
    elif args.what == "invariants":
        ds = harness.synth_dataset(80, 20, 0.4, seed, scale=0.5)
        part = partition(ds, 4)
        primal = PrimalProblem(ds, part, lam1=1e-3, lam2=1e-3, mode=COMPOSITE)
        opt = alg.EcLsvrg(
            primal, comp.top_k(1), comp.top_k(1), eta=0.05, p=0.05, seed=seed
        )
        for _ in range(200):
            opt.step()
        print("ec_lsvrg: 200 steps, per-step identities held")
        dual = DualProblem.from_regularization(ds, part, 1e-3, 1e-3)
        c = compute_constants(primal)
        theta = alg.theoretical_theta(c, part.m, part.n, dual.lam, dual.gamma, 0.05)
        dopt = alg.EcDual(dual, comp.top_k(1), theta=theta, seed=seed)
        for _ in range(200):
            dopt.step()
        print(f"ec_quartz: 200 steps at theta={theta:.3e}, per-step identities held")
    else:
        raise SystemExit(f"unknown verify target {args.what!r}")
    print("all checks passed" if ok else "FAILURES above")
    return 0 if ok else 1


def cmd_reference(args) -> int:
    config = _config_from_args(args)
    ds = harness.load_dataset(config)
    part = partition(ds, config.n)
    primal = PrimalProblem(ds, part, lam1=config.lambda1, lam2=config.lambda2, mode=config.mode)
    x_star, p_star = harness.solve_reference(primal, tol=args.tol)
    print(f"P* = {p_star!r}  (||x*|| = {np.linalg.norm(x_star):.6f}, d = {primal.d})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecvr",
        description="Simulate error-compensated variance-reduced distributed optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one optimizer trial and emit its trace")
    _add_data_args(run)
    run.add_argument("--algo", choices=list(harness.ALGOS), default="ec_lsvrg")
    run.add_argument("--compressor", default="identity", help="e.g. top_k:1, rand_k:5, dither, natural")
    run.add_argument("--compressor-q1", dest="compressor_q1", default=None)
    run.add_argument("--eta", default="theory", help="step size or 'theory'")
    run.add_argument("--theta", type=float, default=None, help="dual step parameter (default: theory)")
    run.add_argument("--p", type=float, default=None, help="reference refresh probability (default: delta)")
    run.add_argument("--epochs", type=float, default=10.0)
    run.add_argument("--cadence", type=int, default=None, help="steps between records")
    run.add_argument("--gap-target", type=float, default=None)
    run.add_argument("--out", default=None, help="CSV trace path (JSON written alongside)")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="run statistical/invariant verifiers")
    verify.add_argument("what", choices=["compressors", "eso", "invariants"])
    verify.add_argument("--d", type=int, default=100)
    verify.add_argument("--trials", type=int, default=10_000)
    verify.add_argument("--instances", type=int, default=20)
    verify.add_argument("--seed", type=int, default=0)
    verify.set_defaults(func=cmd_verify)

    ref = sub.add_parser("reference", help="solve the problem to high accuracy")
    _add_data_args(ref)
    ref.add_argument("--tol", type=float, default=1e-10)
    ref.set_defaults(func=cmd_reference)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
