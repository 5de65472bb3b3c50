"""Monte Carlo driver: config ingestion, replication loop, reports.

One replication = generate a clustered sample -> fit nuisances on the *same*
full sample (no cross-fitting) -> solve GMM -> cluster-robust variance ->
confidence interval -> compare to the DGP truth.  Per-replication seeds are
derived from (base seed, shape index, rep index) through the keyed counter,
so results are a pure function of the config no matter how replications are
scheduled across workers.

Replications that fail to converge, land on the parameter box boundary, or
raise are recorded with flags and excluded from the moment summaries; the
counts are always reported so discards cannot silently bias a table.

The normality diagnostic standardizes sqrt(n)(theta_hat - theta0) by the
oracle asymptotic variance when the DGP supports exact enumeration and is
non-degenerate, and by each replication's own sandwich otherwise; the choice
is recorded in the summary.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import kstest

from mwdml import arrays
from mwdml._rng import derive_key
from mwdml.arrays import ClusteredSample, DgpSpec, Shape, generate_latent, materialize, parse_mask
from mwdml.gmm import GmmSettings, WeightingSpec, solve_gmm
from mwdml.learners import fit_plr_nuisance
from mwdml.models import (
    MomentModel,
    Nuisance,
    evaluate_score,
    linear_iv_model,
    location_model,
    oracle_psi0,
    plr_control_oracle_nuisance,
    plr_model,
    plr_nonorth_model,
    plr_oracle_nuisance,
)
from mwdml.projections import population_mean
from mwdml.variance import confidence_interval, variance_report

_UNBALANCED_RATIO = 0.2


class HarnessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# DGP bundles: data law + matching score + ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DgpBundle:
    kind: str
    build_spec: Callable[[Shape, dict], DgpSpec]
    build_model: Callable[[dict], MomentModel]
    oracle_nuisance: Callable[[dict], Nuisance] | None
    theta0: Callable[[DgpSpec, dict], np.ndarray]


def _location_theta0(spec: DgpSpec, params: dict) -> np.ndarray:
    name = params.get("field_name", "x")
    return population_mean(lambda fields: np.asarray(fields[name], dtype=np.float64), spec)


def _additive_from_params(shape: Shape, params: dict) -> DgpSpec:
    kw = dict(params)
    if "include" in kw:
        kw["include"] = [parse_mask(m, shape.K) for m in kw["include"]]
    if "atoms" in kw:
        kw["atoms"] = tuple(kw["atoms"])
    if "probs" in kw:
        kw["probs"] = tuple(kw["probs"])
    return arrays.additive_spec(shape, **kw)


DGP_BUNDLES: dict[str, DgpBundle] = {
    "plr": DgpBundle(
        "plr",
        lambda shape, params: arrays.plr_spec(shape, **params),
        lambda params: plr_model(),
        plr_oracle_nuisance,
        lambda spec, params: np.asarray([float(params.get("theta0", 1.0))]),
    ),
    "plr_nonorth": DgpBundle(
        "plr_nonorth",
        lambda shape, params: arrays.plr_spec(shape, **params),
        lambda params: plr_nonorth_model(),
        plr_control_oracle_nuisance,
        lambda spec, params: np.asarray([float(params.get("theta0", 1.0))]),
    ),
    "iv": DgpBundle(
        "iv",
        lambda shape, params: arrays.iv_spec(shape, **params),
        lambda params: linear_iv_model(),
        None,
        lambda spec, params: np.asarray([float(params.get("theta0", 1.0))]),
    ),
    "location": DgpBundle(
        "location",
        _additive_from_params,
        lambda params: location_model(params.get("field_name", "x")),
        None,
        _location_theta0,
    ),
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McConfig:
    dgp_kind: str
    dgp_params: dict
    nuisance: str                      # "oracle" | "lasso" | "none"
    shapes: tuple[tuple[int, ...], ...]
    replications: int
    seed: int
    level: float = 0.95
    variance_mode: str = "psihat"
    theta_start: tuple[float, ...] = (0.0,)
    box: tuple[tuple[float, float], ...] | None = None
    weighting_mode: str = "two-step"
    ridge: float = 1e-10
    gmm_tol: float = 1e-10
    gmm_max_iter: int = 100
    lasso_penalty: float | None = None
    threads: int = 1
    oracle_mode: str = "auto"          # "auto" | "exact" | "mc" | "off"
    oracle_draws: int = 200_000

    @classmethod
    def from_dict(cls, raw: dict) -> "McConfig":
        if not isinstance(raw, dict):
            raise HarnessError("config must be a JSON object")
        problems: list[str] = []
        dgp = raw.get("dgp", {})
        kind = dgp.get("kind")
        if kind not in DGP_BUNDLES:
            problems.append(f"dgp.kind must be one of {sorted(DGP_BUNDLES)}, got {kind!r}")
        nuisance = raw.get("nuisance", {"kind": "oracle"})
        if isinstance(nuisance, str):
            nuisance = {"kind": nuisance}
        nkind = nuisance.get("kind", "oracle")
        if nkind not in ("oracle", "lasso", "none"):
            problems.append(f"nuisance.kind must be oracle|lasso|none, got {nkind!r}")
        shapes = raw.get("shapes")
        if not shapes:
            problems.append("shapes must be a non-empty list of dimension lists")
            shapes = []
        parsed_shapes = []
        for s in shapes:
            try:
                parsed_shapes.append(tuple(Shape.coerce(s).dims))
            except Exception as exc:
                problems.append(f"invalid shape {s!r}: {exc}")
        reps = raw.get("replications", 0)
        if not (isinstance(reps, int) and reps >= 1):
            problems.append(f"replications must be an integer >= 1, got {reps!r}")
        level = float(raw.get("level", 0.95))
        if not 0.0 < level < 1.0:
            problems.append(f"level must lie in (0,1), got {level}")
        vmode = raw.get("variance_mode", "psihat")
        if vmode not in ("psihat", "cgm"):
            problems.append(f"variance_mode must be psihat|cgm, got {vmode!r}")
        est = raw.get("estimation", {})
        wmode = est.get("weighting", "two-step")
        if wmode not in ("identity", "two-step"):
            problems.append(f"estimation.weighting must be identity|two-step, got {wmode!r}")
        box = est.get("box")
        if box is not None:
            try:
                box = tuple((float(lo), float(hi)) for lo, hi in box)
            except Exception:
                problems.append(f"estimation.box must be a list of [lo, hi] pairs, got {box!r}")
                box = None
        omode = raw.get("oracle_mode", "auto")
        if omode not in ("auto", "exact", "mc", "off"):
            problems.append(f"oracle_mode must be auto|exact|mc|off, got {omode!r}")
        if problems:
            raise HarnessError("invalid config: " + "; ".join(problems))
        return cls(
            dgp_kind=kind,
            dgp_params=dict(dgp.get("params", {})),
            nuisance=nkind,
            shapes=tuple(parsed_shapes),
            replications=reps,
            seed=int(raw.get("seed", 0)),
            level=level,
            variance_mode=vmode,
            theta_start=tuple(float(t) for t in est.get("theta_start", (0.0,))),
            box=box,
            weighting_mode=wmode,
            ridge=float(est.get("ridge", 1e-10)),
            gmm_tol=float(est.get("tol", 1e-10)),
            gmm_max_iter=int(est.get("max_iter", 100)),
            lasso_penalty=(None if nuisance.get("penalty") is None else float(nuisance["penalty"])),
            threads=int(raw.get("threads", 1)),
            oracle_mode=omode,
            oracle_draws=int(raw.get("oracle_draws", 200_000)),
        )

    def to_dict(self) -> dict:
        return {
            "dgp": {"kind": self.dgp_kind, "params": self.dgp_params},
            "nuisance": {"kind": self.nuisance, "penalty": self.lasso_penalty},
            "shapes": [list(s) for s in self.shapes],
            "replications": self.replications,
            "seed": self.seed,
            "level": self.level,
            "variance_mode": self.variance_mode,
            "estimation": {
                "theta_start": list(self.theta_start),
                "box": None if self.box is None else [list(b) for b in self.box],
                "weighting": self.weighting_mode,
                "ridge": self.ridge,
                "tol": self.gmm_tol,
                "max_iter": self.gmm_max_iter,
            },
            "oracle_mode": self.oracle_mode,
            "oracle_draws": self.oracle_draws,
        }


def load_config(path) -> McConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise HarnessError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HarnessError(f"config is not valid JSON: {exc}") from exc
    return McConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# single replication
# ---------------------------------------------------------------------------


@dataclass
class RepRecord:
    shape_idx: int
    shape: tuple[int, ...]
    rep: int
    theta: list[float]
    se: list[float]
    covered: list[bool]
    z_vhat: list[float]
    v: list[list[float]]
    flags: list[str]
    discard: bool


def _bundle(config: McConfig) -> DgpBundle:
    return DGP_BUNDLES[config.dgp_kind]


def _fit_nuisance(config: McConfig, bundle: DgpBundle, sample: ClusteredSample, model: MomentModel):
    if config.nuisance == "none" or not model.nuisance_names:
        return None
    if config.nuisance == "oracle":
        if bundle.oracle_nuisance is None:
            raise HarnessError(f"dgp {bundle.kind!r} has no oracle nuisance")
        return bundle.oracle_nuisance(config.dgp_params)
    if config.nuisance == "lasso":
        if set(model.nuisance_names) != {"l", "m"}:
            raise HarnessError(
                f"lasso nuisance supports the (l, m) residual score, model wants {model.nuisance_names}"
            )
        eta, _fits = fit_plr_nuisance(sample, penalty=config.lasso_penalty)
        return eta
    raise HarnessError(f"unknown nuisance kind {config.nuisance!r}")


def run_replication(config: McConfig, shape_idx: int, rep: int) -> RepRecord:
    """One seeded replication; failures become flags, never exceptions."""
    bundle = _bundle(config)
    shape = Shape(config.shapes[shape_idx])
    model = bundle.build_model(config.dgp_params)
    d = model.d_dim
    nan = [math.nan] * d
    try:
        spec = bundle.build_spec(shape, config.dgp_params)
        theta0 = np.asarray(bundle.theta0(spec, config.dgp_params), dtype=np.float64).reshape(-1)
        seed = derive_key(config.seed, shape_idx, rep)
        sample = materialize(generate_latent(spec, seed), spec)
        eta = _fit_nuisance(config, bundle, sample, model)
        settings = GmmSettings(
            theta_start=config.theta_start if len(config.theta_start) == d else (0.0,) * d,
            box=config.box,
            weighting=WeightingSpec(mode=config.weighting_mode, ridge=config.ridge),
            tol=config.gmm_tol,
            max_iter=config.gmm_max_iter,
        )
        fit = solve_gmm(model, sample, eta, settings)
        flags = []
        if not fit.converged:
            flags.append("nonconverged")
        if fit.boundary:
            flags.append("boundary")
        if fit.rank_deficient:
            flags.append("rank_deficient")
        scores = evaluate_score(model, sample, fit.theta, eta)
        result = variance_report(fit, scores, shape, mode=config.variance_mode)
        lo, hi = confidence_interval(fit.theta, result.se, config.level)
        covered = [bool(lo[j] <= theta0[j] <= hi[j]) for j in range(d)]
        z = [
            float((fit.theta[j] - theta0[j]) / result.se[j]) if result.se[j] > 0 else math.nan
            for j in range(d)
        ]
        return RepRecord(
            shape_idx=shape_idx,
            shape=shape.dims,
            rep=rep,
            theta=[float(t) for t in fit.theta],
            se=[float(s) for s in result.se],
            covered=covered,
            z_vhat=z,
            v=[[float(x) for x in row] for row in np.atleast_2d(result.v)],
            flags=flags or ["ok"],
            discard=bool(flags),
        )
    except Exception as exc:  # noqa: BLE001 - flagged, never aborts the sweep
        return RepRecord(
            shape_idx=shape_idx,
            shape=shape.dims,
            rep=rep,
            theta=list(nan),
            se=list(nan),
            covered=[False] * d,
            z_vhat=list(nan),
            v=[list(nan) for _ in range(d)],
            flags=[f"error:{type(exc).__name__}"],
            discard=True,
        )


def _replication_task(payload: tuple[dict, int, int]) -> RepRecord:
    raw, shape_idx, rep = payload
    return run_replication(McConfig.from_dict(raw), shape_idx, rep)


# ---------------------------------------------------------------------------
# oracle reference per shape
# ---------------------------------------------------------------------------


@dataclass
class OracleInfo:
    v: np.ndarray | None
    degenerate: bool
    mode: str


def shape_oracle(config: McConfig, shape_idx: int) -> OracleInfo:
    if config.oracle_mode == "off":
        return OracleInfo(None, False, "off")
    bundle = _bundle(config)
    shape = Shape(config.shapes[shape_idx])
    spec = bundle.build_spec(shape, config.dgp_params)
    model = bundle.build_model(config.dgp_params)
    theta0 = bundle.theta0(spec, config.dgp_params)
    eta0 = bundle.oracle_nuisance(config.dgp_params) if bundle.oracle_nuisance else None
    if eta0 is None and model.nuisance_names:
        return OracleInfo(None, False, "unavailable")
    mode = config.oracle_mode
    if mode == "auto":
        mode = "exact" if spec.all_finite else "mc"
    try:
        ov = oracle_psi0(
            model, spec, theta0, eta0,
            mode=mode, draws=config.oracle_draws, seed=derive_key(config.seed, 9, shape_idx),
        )
    except Exception:
        return OracleInfo(None, False, "failed")
    return OracleInfo(ov.v, ov.degenerate, mode)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


@dataclass
class ShapeSummary:
    shape: tuple[int, ...]
    n_min: int
    mu: list[float]
    r_total: int
    n_used: int
    n_nonconverged: int
    n_boundary: int
    n_error: int
    theta0: list[float]
    bias: list[float]
    rmse: list[float]
    mean_se: list[float]
    sd_theta: list[float]
    coverage: list[float]
    coverage_se: list[float]
    ks_stat: float
    ks_standardizer: str
    degenerate: bool
    unbalanced: bool
    oracle_mode: str
    v_oracle: list[list[float]] | None
    v_hat_mean: list[list[float]] | None
    v_rel_err: float | None          # ||mean V_hat - V0|| / ||V0||
    v_mean_rel_err: float | None     # mean over reps of ||V_hat - V0|| / ||V0||

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class McResult:
    config: McConfig
    records: list[RepRecord]
    summaries: list[ShapeSummary]
    meta: dict


def _shape_id(dims: Sequence[int]) -> str:
    return "x".join(str(d) for d in dims)


def summarize_shape(
    config: McConfig, shape_idx: int, records: list[RepRecord], oracle: OracleInfo
) -> ShapeSummary:
    shape = Shape(config.shapes[shape_idx])
    bundle = _bundle(config)
    spec = bundle.build_spec(shape, config.dgp_params)
    theta0 = np.asarray(bundle.theta0(spec, config.dgp_params), dtype=np.float64).reshape(-1)
    d = theta0.shape[0]
    used = [r for r in records if not r.discard]
    n_used = len(used)
    n_nonc = sum(1 for r in records if "nonconverged" in r.flags)
    n_bound = sum(1 for r in records if "boundary" in r.flags)
    n_err = sum(1 for r in records if any(f.startswith("error:") for f in r.flags))

    if n_used:
        thetas = np.asarray([r.theta for r in used])
        ses = np.asarray([r.se for r in used])
        cov = np.asarray([r.covered for r in used], dtype=np.float64)
        bias = (thetas - theta0).mean(axis=0)
        rmse = np.sqrt(((thetas - theta0) ** 2).mean(axis=0))
        mean_se = ses.mean(axis=0)
        sd_theta = thetas.std(axis=0, ddof=1) if n_used > 1 else np.zeros(d)
        coverage = cov.mean(axis=0)
        coverage_se = np.sqrt(coverage * (1.0 - coverage) / n_used)
        vs = np.asarray([r.v for r in used])
        v_mean = vs.mean(axis=0)
    else:
        bias = rmse = mean_se = sd_theta = coverage = coverage_se = np.full(d, math.nan)
        v_mean = None

    use_oracle = oracle.v is not None and not oracle.degenerate and n_used > 0
    if use_oracle:
        denom = np.sqrt(np.clip(np.diag(np.atleast_2d(oracle.v)), 1e-300, None))
        zs = (math.sqrt(shape.n_min) * (np.asarray([r.theta for r in used]) - theta0) / denom)[:, 0]
        standardizer = "oracle"
    elif n_used:
        zs = np.asarray([r.z_vhat[0] for r in used])
        standardizer = "vhat"
    else:
        zs = np.asarray([])
        standardizer = "none"
    zs = zs[np.isfinite(zs)]
    ks = float(kstest(zs, "norm").statistic) if zs.size else math.nan

    v_rel = v_mean_rel = None
    if oracle.v is not None and v_mean is not None:
        v0 = np.atleast_2d(oracle.v)
        denom_n = float(np.linalg.norm(v0))
        if denom_n > 0:
            v_rel = float(np.linalg.norm(v_mean - v0) / denom_n)
            vs = np.asarray([r.v for r in used])
            v_mean_rel = float(np.mean([np.linalg.norm(v - v0) / denom_n for v in vs]))

    return ShapeSummary(
        shape=shape.dims,
        n_min=shape.n_min,
        mu=[shape.n_min / dd for dd in shape.dims],
        r_total=len(records),
        n_used=n_used,
        n_nonconverged=n_nonc,
        n_boundary=n_bound,
        n_error=n_err,
        theta0=[float(t) for t in theta0],
        bias=[float(x) for x in bias],
        rmse=[float(x) for x in rmse],
        mean_se=[float(x) for x in mean_se],
        sd_theta=[float(x) for x in sd_theta],
        coverage=[float(x) for x in coverage],
        coverage_se=[float(x) for x in coverage_se],
        ks_stat=ks,
        ks_standardizer=standardizer,
        degenerate=oracle.degenerate,
        unbalanced=min(shape.dims) / max(shape.dims) < _UNBALANCED_RATIO,
        oracle_mode=oracle.mode,
        v_oracle=None if oracle.v is None else [[float(x) for x in row] for row in np.atleast_2d(oracle.v)],
        v_hat_mean=None if v_mean is None else [[float(x) for x in row] for row in v_mean],
        v_rel_err=v_rel,
        v_mean_rel_err=v_mean_rel,
    )


def run_monte_carlo(config: McConfig, *, threads: int | None = None) -> McResult:
    """All replications over the shape sweep; output independent of scheduling."""
    threads = config.threads if threads is None else threads
    tasks = [
        (config.to_dict(), si, rep)
        for si in range(len(config.shapes))
        for rep in range(config.replications)
    ]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_replication_task, tasks, chunksize=16))
    else:
        records = [_replication_task(t) for t in tasks]
    records.sort(key=lambda r: (r.shape_idx, r.rep))

    summaries = []
    for si in range(len(config.shapes)):
        oracle = shape_oracle(config, si)
        summaries.append(
            summarize_shape(config, si, [r for r in records if r.shape_idx == si], oracle)
        )
    from mwdml._backend import backend_name

    meta = {"backend": backend_name(), "n_tasks": len(tasks)}
    return McResult(config=config, records=records, summaries=summaries, meta=meta)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def replications_csv_text(result: McResult) -> str:
    d = len(result.records[0].theta) if result.records else len(result.config.theta_start)
    cols = ["shape_id", "rep"]
    cols += [f"theta_hat_{j + 1}" for j in range(d)]
    cols += [f"se_{j + 1}" for j in range(d)]
    cols += [f"covered_{j + 1}" for j in range(d)]
    cols.append("flags")
    lines = [",".join(cols)]
    for r in result.records:
        row = [_shape_id(r.shape), str(r.rep)]
        row += [_fmt(t) for t in r.theta]
        row += [_fmt(s) for s in r.se]
        row += ["1" if c else "0" for c in r.covered]
        row.append(";".join(r.flags))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def summary_json_text(result: McResult) -> str:
    obj = {
        "config": result.config.to_dict(),
        "meta": result.meta,
        "shapes": [s.to_dict() for s in result.summaries],
    }
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def emit_reports(result: McResult, out_dir) -> dict[str, Path]:
    """Write replications.csv + summary.json; byte-stable for fixed inputs."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "replications": out / "replications.csv",
            "summary": out / "summary.json",
        }
        paths["replications"].write_text(replications_csv_text(result))
        paths["summary"].write_text(summary_json_text(result))
    except OSError as exc:
        raise OSError(f"cannot write reports under {out}: {exc}") from exc
    return paths
