"""Command-line front end: calibrate | randomize | eval | audit | check.

Exit codes: 0 success, 1 failed assertion suite (eval/audit/check),
2 usage or schema errors (with the offending line for CSVs), 3
degenerate calibration data. Numeric output uses 17 significant digits;
identical inputs and seeds produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings

import numpy as np

from . import report
from .dataio import read_feature_csv, read_json, write_feature_csv, write_json
from .errors import DegenerateDataWarning, SchemaError
from .harness import ExperimentConfig, run_sweep, parse_rank_rule, write_sweep_outputs
from .mechanisms import PrivacyBudget, ldp_audit
from .models import MlpModel, jacobian, load_model
from .pipeline import PipelineConfig, calibrate, privatize_batch
from .rng import derive_rng
from .subspace import ReshapeTransform, load_transform, save_transform


def _require_files(*paths):
    for path in paths:
        if not os.path.exists(path):
            raise SchemaError(f"{path}: no such file")


# --- calibrate ---------------------------------------------------------------


def _cmd_calibrate(args):
    _require_files(args.model, args.public_csv)
    model = load_model(args.model)
    _, public = read_feature_csv(args.public_csv)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        config, cal_report = calibrate(
            public,
            model,
            rank_rule=parse_rank_rule(args.rank),
            percentile=args.percentile,
            jacobian_sample_count=min(args.samples, public.shape[0]),
            mechanism=args.mechanism,
            null_mode=args.null_mode,
            null_constant=args.null_constant,
            reshape=not args.no_reshape,
        )
    degenerate = any(issubclass(w.category, DegenerateDataWarning) for w in caught)
    if degenerate:
        print("error: public data is degenerate (no variation); nothing written", file=sys.stderr)
        return 3

    os.makedirs(args.out, exist_ok=True)
    effective = {
        "mechanism": args.mechanism,
        "percentile": args.percentile,
        "rank": args.rank,
        "samples": min(args.samples, public.shape[0]),
        "null_mode": args.null_mode,
        "null_constant": args.null_constant,
        "reshape": not args.no_reshape,
    }
    provenance = dict(config.provenance)
    provenance["coord_ranges"] = config.coord_ranges.tolist()
    provenance["config"] = effective
    transform_path = os.path.join(args.out, "transform.json")
    save_transform(transform_path, config.transform, config.rho, provenance)
    write_json(
        os.path.join(args.out, "calibration_report.json"),
        {
            "singular_values": cal_report.singular_values.tolist(),
            "rank": cal_report.rank,
            "rho": cal_report.rho,
            "clip_coverage": cal_report.clip_coverage,
            "config": effective,
        },
    )
    report.render_spectrum_figure(
        cal_report.singular_values, cal_report.rank, os.path.join(args.out, "spectrum.png")
    )
    print(f"wrote {transform_path} (rho = {cal_report.rho:.6g}, rank = {cal_report.rank})")
    return 0


# --- randomize ---------------------------------------------------------------


def _cmd_randomize(args):
    _require_files(args.transform, args.private_csv)
    transform, rho, provenance = load_transform(args.transform)
    header, records = read_feature_csv(args.private_csv)
    if records.shape[1] != transform.dim:
        print(
            f"error: csv width {records.shape[1]} does not match transform dim {transform.dim}",
            file=sys.stderr,
        )
        return 2
    bound_norm = args.bound_norm or ("l1" if args.mechanism in ("laplace", "cw") else "l2")
    coord_ranges = provenance.get("coord_ranges")
    config = PipelineConfig(
        transform=transform,
        rho=rho,
        bound_norm=bound_norm,
        mechanism=args.mechanism,
        budget=PrivacyBudget(args.epsilon, args.delta),
        clip=not (args.no_clip or args.mechanism == "cw"),
        sensitivity_convention="paper" if args.paper_sensitivity else "worst_pair",
        budget_split=args.budget_split,
        coord_ranges=None if coord_ranges is None else np.asarray(coord_ranges),
    )
    rng = derive_rng(args.seed, "randomize")
    privatized, clip_fraction = privatize_batch(records, config, rng)
    write_feature_csv(args.out, header, privatized)
    write_json(
        args.out + ".config.json",
        {
            "transform": args.transform,
            "mechanism": args.mechanism,
            "epsilon": args.epsilon,
            "delta": args.delta,
            "seed": args.seed,
            "bound_norm": bound_norm,
            "clip": config.clip,
            "clip_fraction": clip_fraction,
        },
    )
    print(f"wrote {args.out} ({records.shape[0]} rows, clip fraction {clip_fraction:.4f})")
    return 0


# --- eval --------------------------------------------------------------------


def _cmd_eval(args):
    _require_files(args.config)
    doc = read_json(args.config)
    if args.master_seed is not None:
        doc["master_seed"] = args.master_seed
    if args.workers is not None:
        doc["workers"] = args.workers
    config = ExperimentConfig.from_dict(doc)
    result = run_sweep(config)
    paths = write_sweep_outputs(result, args.out)
    report.render_sweep_figures(result, args.out)
    print(open(paths["summary_txt"], encoding="utf-8").read())
    if result.failures:
        for row in result.failures:
            print(
                f"failed cell: {row.mechanism} eps={row.epsilon:g} seed={row.seed}: {row.error}",
                file=sys.stderr,
            )
        return 1
    print(f"wrote {paths['results']}")
    return 0


# --- audit -------------------------------------------------------------------


def _audit_transform():
    """Fixed non-trivial m=2 transform exercised by the composed audit."""
    angle = np.pi / 6.0
    rotation = np.array(
        [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
    )
    return ReshapeTransform(
        rotation=rotation, lam=np.array([0.25, 4.0]), offset=np.array([0.5, -0.3])
    )


def _cmd_audit(args):
    if args.mechanism != "laplace":
        print("error: only the Laplace mechanism is auditable from the CLI", file=sys.stderr)
        return 2
    rho = args.rho
    epsilon = args.epsilon
    b = 2.0 * rho / epsilon
    rng = derive_rng(args.seed, "audit")
    if args.composed:
        transform = _audit_transform()
        config = PipelineConfig(
            transform=transform,
            rho=rho,
            bound_norm="l1",
            mechanism="laplace",
            budget=PrivacyBudget(epsilon),
        )
        t_a, t_b = np.array([rho, 0.0]), np.array([-rho, 0.0])
        z_a = transform.factor @ t_a + transform.offset
        z_b = transform.factor @ t_b + transform.offset
        inverse, offset = transform.inverse_factor, transform.offset

        def sample_fn(z, stream, count):
            batch = np.tile(z, (count, 1))
            out, _ = privatize_batch(batch, config, stream)
            return out

        def statistic(outputs):
            pulled = (outputs - offset) @ inverse.T
            return (
                np.abs(pulled - t_b).sum(axis=1) - np.abs(pulled - t_a).sum(axis=1)
            ) / b

        pair = (z_a, z_b)
    else:

        def sample_fn(z, stream, count):
            return z + stream.laplace(0.0, b, size=count)

        def statistic(outputs):
            # Likelihood-ratio statistic; its extremes sit exactly at
            # +/- epsilon, matching the analytic density ratio.
            return (np.abs(outputs + rho) - np.abs(outputs - rho)) / b

        pair = (rho, -rho)

    audit = ldp_audit(
        sample_fn, pair[0], pair[1], trials=args.trials, bins=args.bins, rng=rng,
        statistic=statistic,
    )
    passed = audit.passes(epsilon, slack=args.slack)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_json(
            os.path.join(args.out, "audit_report.json"),
            {
                "mechanism": args.mechanism,
                "composed": args.composed,
                "epsilon": epsilon,
                "trials": args.trials,
                "bins": args.bins,
                "max_loss": audit.max_loss,
                "bound": epsilon + args.slack,
                "passed": passed,
            },
        )
        report.render_audit_figure(audit, epsilon, os.path.join(args.out, "audit.png"))
    label = "composed pipeline" if args.composed else "bare mechanism"
    print(
        f"{label}: max empirical loss {audit.max_loss:.4f} "
        f"vs bound {epsilon + args.slack:.4f} -> {'PASS' if passed else 'FAIL'}"
    )
    return 0 if passed else 1


# --- check -------------------------------------------------------------------


def _finite_difference(model, z, step, mode):
    m = z.shape[0]
    columns = []
    for j in range(m):
        up, down = z.copy(), z.copy()
        up[j] += step
        down[j] -= step
        if mode == "softmax":
            from .models import _softmax

            f_up, f_dn = _softmax(model.forward(up)), _softmax(model.forward(down))
        else:
            f_up, f_dn = model.forward(up), model.forward(down)
        columns.append((f_up - f_dn) / (2.0 * step))
    return np.stack(columns, axis=1)


def _cmd_check(args):
    _require_files(args.model, args.csv)
    model = load_model(args.model)
    _, records = read_feature_csv(args.csv)
    if records.shape[1] != model.input_dim:
        print(
            f"error: csv width {records.shape[1]} does not match model input {model.input_dim}",
            file=sys.stderr,
        )
        return 2
    points = records[: args.points]
    relu = isinstance(model, MlpModel) and model.activation == "relu"
    errors, kept = [], 0
    for z in points:
        if relu:
            pre = model.pre_activations(z)
            if min(np.abs(a).min() for a in pre) <= 0.1:
                continue  # skip kink-adjacent points where FD is unreliable
        kept += 1
        jac = jacobian(model, z, mode=args.mode)
        fd = _finite_difference(model, z, args.step, args.mode)
        scale = max(np.abs(fd).max(), 1e-12)
        errors.append(float(np.abs(jac - fd).max() / scale))
    threshold = 1e-6 if relu else 1e-5
    max_error = max(errors) if errors else float("nan")
    print(
        f"jacobian check: {kept}/{len(points)} points, "
        f"max relative error {max_error:.3e} (threshold {threshold:g})"
    )
    if not errors:
        print("error: no usable points (all near activation kinks)", file=sys.stderr)
        return 1
    return 0 if max_error <= threshold else 1


# --- parser ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aniso-ldp",
        description="Task-aligned anisotropic noise reshaping for local DP.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="derive the reshaping transform from public data")
    p.add_argument("model", help="model JSON")
    p.add_argument("public_csv", help="public feature CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--percentile", type=float, default=0.9)
    p.add_argument("--rank", default=None, help="fixed:R or energy:TAU")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--null-mode", choices=["floor", "fixed"], default="floor")
    p.add_argument("--null-constant", type=float, default=100.0)
    p.add_argument("--mechanism", default="laplace",
                   choices=["laplace", "agm", "privunit2", "privunitg", "cw"])
    p.add_argument("--no-reshape", action="store_true",
                   help="identity-transform baseline calibration")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("randomize", help="privatize a private feature CSV")
    p.add_argument("transform", help="transform JSON from calibrate")
    p.add_argument("private_csv", help="private feature CSV")
    p.add_argument("--out", required=True, help="privatized CSV path")
    p.add_argument("--mechanism", default="laplace",
                   choices=["laplace", "agm", "privunit2", "privunitg", "cw"])
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bound-norm", choices=["l1", "l2", "linf"], default=None)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--budget-split", type=float, default=None)
    p.add_argument("--paper-sensitivity", action="store_true",
                   help="use the radius (not diameter) sensitivity convention")
    p.set_defaults(func=_cmd_randomize)

    p = sub.add_parser("eval", help="run an epsilon-sweep experiment")
    p.add_argument("config", help="experiment JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--master-seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("audit", help="empirical privacy-loss audit")
    p.add_argument("mechanism", choices=["laplace"])
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--trials", type=int, default=10**6)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--composed", action="store_true",
                   help="audit the full pre/mechanism/post pipeline")
    p.add_argument("--slack", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional report directory")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("check", help="finite-difference Jacobian report")
    p.add_argument("model", help="model JSON")
    p.add_argument("csv", help="feature CSV supplying evaluation points")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--mode", choices=["logits", "softmax"], default="logits")
    p.set_defaults(func=_cmd_check)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
