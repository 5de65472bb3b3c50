"""Command-line interface.

Subcommands: simulate, partition, decompose, estimate, mc, bounds.
Global flags: --config <path>, --seed <u64>, --out <dir>, --threads <n>.
Exit codes: 0 success, 2 config/usage error, 3 I/O error.

All numeric output is CSV/JSON with '.' decimals and no locale formatting;
runs are pure functions of (config, seed), so re-running a command with the
same inputs reproduces the files byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from mwdml import bounds as bounds_mod
from mwdml import harness
from mwdml._rng import derive_key
from mwdml.arrays import (
    ArrayError,
    Shape,
    generate_latent,
    mask_str,
    materialize,
    nonzero_masks,
    parse_mask,
    write_sample_csv,
)
from mwdml.gmm import GmmSettings, WeightingSpec, solve_gmm
from mwdml.harness import DGP_BUNDLES, HarnessError, McConfig, load_config
from mwdml.models import evaluate_score
from mwdml.partition import build_transversal_partition, write_partition_csv
from mwdml.projections import hoeffding_decompose
from mwdml.variance import confidence_interval, variance_report


def _parse_shape(text: str) -> Shape:
    sep = "x" if "x" in text else ","
    try:
        return Shape(tuple(int(t) for t in text.split(sep)))
    except Exception as exc:
        raise HarnessError(f"cannot parse shape {text!r}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mwdml",
        description="Multiway-clustered estimation toolkit: simulate, decompose, estimate, sweep.",
    )
    parser.add_argument("--config", help="path to the JSON config document")
    parser.add_argument("--seed", type=int, help="override the config base seed")
    parser.add_argument("--out", default=".", help="output directory (default: current)")
    parser.add_argument("--threads", type=int, help="worker processes for the mc sweep")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw one sample and write it as CSV")
    p_sim.add_argument("--shape", help="override shape, e.g. 50x50")

    p_part = sub.add_parser("partition", help="write a transversal partition of the index lattice")
    p_part.add_argument("--shape", required=True, help="lattice shape, e.g. 3x2")
    p_part.add_argument("--mask", required=True, help="mask bits, e.g. 11")

    p_dec = sub.add_parser("decompose", help="projection components of a field over all masks")
    p_dec.add_argument("--shape", help="override shape")
    p_dec.add_argument("--field", help="observed field to decompose (default: first field)")

    p_est = sub.add_parser("estimate", help="single-sample GMM estimate with cluster-robust CI")
    p_est.add_argument("--shape", help="override shape")

    sub.add_parser("mc", help="Monte Carlo sweep over the configured shapes")

    sub.add_parser("bounds", help="empirical maximal-inequality check (config `bounds` block)")
    return parser


def _require_config(args) -> McConfig:
    if not args.config:
        raise HarnessError("this command needs --config")
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=int(args.seed))
    if args.threads is not None:
        config = dataclasses.replace(config, threads=int(args.threads))
    return config


def _sample_from_config(config: McConfig, shape_arg: str | None, *, stream: int = 0):
    bundle = DGP_BUNDLES[config.dgp_kind]
    shape = _parse_shape(shape_arg) if shape_arg else Shape(config.shapes[0])
    spec = bundle.build_spec(shape, config.dgp_params)
    seed = derive_key(config.seed, 0, stream)
    return bundle, spec, materialize(generate_latent(spec, seed), spec)


def _cmd_simulate(args) -> int:
    config = _require_config(args)
    _bundle, _spec, sample = _sample_from_config(config, args.shape)
    path = Path(args.out) / "sample.csv"
    write_sample_csv(sample, path)
    print(f"wrote {path} ({sample.n_cells} cells, fields: {', '.join(sorted(sample.fields))})")
    return 0


def _cmd_partition(args) -> int:
    shape = _parse_shape(args.shape)
    mask = parse_mask(args.mask, shape.K)
    part = build_transversal_partition(shape, mask)
    path = Path(args.out) / "partition.csv"
    write_partition_csv(part, path)
    print(f"wrote {path} ({len(part.groups)} groups of size {len(part.groups[0]) if part.groups else 0})")
    return 0


def _cmd_decompose(args) -> int:
    config = _require_config(args)
    _bundle, _spec, sample = _sample_from_config(config, args.shape)
    name = args.field or sorted(sample.fields)[0]
    if name not in sample.fields:
        raise HarnessError(f"field {name!r} not in sample (have {sorted(sample.fields)})")

    def f(fields):
        return np.asarray(fields[name], dtype=np.float64)

    comps = hoeffding_decompose(f, sample)
    path = Path(args.out) / "decompose.csv"
    lines = ["mask,lattice_size,h_value"]
    for e in comps.masks:
        lines.append(f"{mask_str(e)},{comps.sizes[e]},{float(comps.h[e][0])!r}")
    path.write_text("\n".join(lines) + "\n")
    print(
        f"wrote {path}; field={name} sample_mean={float(comps.sample_mean[0])!r} "
        f"population_mean={float(comps.population_mean[0])!r} max_residual={comps.max_residual!r}"
    )
    return 0


def _cmd_estimate(args) -> int:
    config = _require_config(args)
    bundle, spec, sample = _sample_from_config(config, args.shape)
    model = bundle.build_model(config.dgp_params)
    eta = harness._fit_nuisance(config, bundle, sample, model)
    settings = GmmSettings(
        theta_start=config.theta_start if len(config.theta_start) == model.d_dim else (0.0,) * model.d_dim,
        box=config.box,
        weighting=WeightingSpec(mode=config.weighting_mode, ridge=config.ridge),
        tol=config.gmm_tol,
        max_iter=config.gmm_max_iter,
    )
    fit = solve_gmm(model, sample, eta, settings)
    scores = evaluate_score(model, sample, fit.theta, eta)
    result = variance_report(fit, scores, sample.shape, mode=config.variance_mode)
    lo, hi = confidence_interval(fit.theta, result.se, config.level)
    payload = {
        "shape": list(sample.shape.dims),
        "theta_hat": [float(t) for t in fit.theta],
        "se": [float(s) for s in result.se],
        "ci_lo": [float(x) for x in lo],
        "ci_hi": [float(x) for x in hi],
        "level": config.level,
        "converged": fit.converged,
        "boundary": fit.boundary,
        "foc_norm": fit.foc_norm,
        "n_iter": fit.n_iter,
        "variance_mode": config.variance_mode,
        "weighting": fit.meta,
        "middle_eigenvalues": [float(x) for x in result.eig_psi],
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    path = Path(args.out) / "estimate.json"
    path.write_text(text)
    print(text, end="")
    return 0


def _cmd_mc(args) -> int:
    config = _require_config(args)
    result = harness.run_monte_carlo(config)
    paths = harness.emit_reports(result, args.out)
    for s in result.summaries:
        line = (
            f"shape {harness._shape_id(s.shape)}: used {s.n_used}/{s.r_total}"
            f" coverage={s.coverage[0]:.4f} bias={s.bias[0]:+.5f} rmse={s.rmse[0]:.5f}"
            f" ks={s.ks_stat:.4f} ({s.ks_standardizer})"
        )
        if s.degenerate:
            line += " [degenerate]"
        if s.unbalanced:
            line += " [unbalanced]"
        print(line)
    print(f"wrote {paths['replications']} and {paths['summary']}")
    return 0


def _cmd_bounds(args) -> int:
    if not args.config:
        raise HarnessError("this command needs --config")
    raw = json.loads(Path(args.config).read_text())
    block = raw.get("bounds")
    if not block:
        raise HarnessError("config has no `bounds` block")
    config = _require_config(args)
    bundle = DGP_BUNDLES[config.dgp_kind]
    base_shape = Shape(config.shapes[0])
    spec = bundle.build_spec(base_shape, config.dgp_params)
    field = block.get("field")
    if not field:
        raise HarnessError("bounds block needs a `field` to threshold")
    thresholds = block.get("thresholds")
    if not thresholds:
        raise HarnessError("bounds block needs a `thresholds` list")
    grid = bounds_mod.ThresholdGrid(field, tuple(float(t) for t in thresholds))
    grid = bounds_mod.center_grid(grid, spec)
    K = base_shape.K
    masks = [parse_mask(m, K) for m in block.get("masks", [])] or nonzero_masks(K)
    n_grid = tuple(int(n) for n in block.get("n_grid", (10, 20, 40)))
    mode = block.get("mode") or ("exact" if spec.all_finite else "mc")
    report = bounds_mod.bound_check(
        grid,
        spec,
        masks,
        n_grid,
        q=float(block.get("q", 4.0)),
        replications=int(block.get("replications", 300)),
        seed=config.seed,
        mode=mode,
        draws=block.get("draws"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "bounds.csv"
    report.to_csv(csv_path)
    meta_path = out / "bounds_meta.json"
    meta = dict(report.meta)
    meta["per_mask"] = {
        mask_str(e): {
            "max_ratio": s.max_ratio,
            "median_ratio": s.median_ratio,
            "max_over_median": s.max_over_median,
            "slope_lhs": s.slope_lhs,
            "slope_ratio": s.slope_ratio,
            "degenerate": s.degenerate,
        }
        for e, s in report.per_mask.items()
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for e, s in report.per_mask.items():
        print(
            f"mask {mask_str(e)}: max_ratio={s.max_ratio:.4g} median={s.median_ratio:.4g}"
            f" slope(lhs)={s.slope_lhs:+.3f}{' [degenerate]' if s.degenerate else ''}"
        )
    print(f"wrote {csv_path} and {meta_path}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "partition": _cmd_partition,
    "decompose": _cmd_decompose,
    "estimate": _cmd_estimate,
    "mc": _cmd_mc,
    "bounds": _cmd_bounds,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (HarnessError, ArrayError, ValueError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
