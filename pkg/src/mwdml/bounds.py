"""Function grids and Monte Carlo checks of the maximal inequalities.

The empirical objects are the per-mask components H_N^e of the Hoeffding-type
decomposition; the scaled quantity under test is

    LHS(e, n) = |I_{N,e}|^{1/2} * ( E sup_{f in grid} |H_N^e(f)|^q )^{1/q},

simulated over replications, against two theoretical right-hand sides:

    global:  J_e(1) * ||F||_{P, q v 2}
    local:   sigma_e * (v log(A v Nbar))^{k/2}
             + n^{-1/2} ||M_e||_{P,2} * (v log(A v Nbar))^k

with sigma_e the exact sup of ||P_e f||_{P,2} over the grid (clipped to
[tiny, ||P_e F||_{P,2}]) and M_e the diagonal maximum of the projected
envelope, simulated along cells (t,...,t) & e.  The inequalities carry
unspecified universal constants, so acceptance is about boundedness of the
ratio (max within 2x of its median) and its non-increasing trend in n, not
about absolute levels.
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from mwdml._rng import derive_key
from mwdml.arrays import (
    DgpSpec,
    Mask,
    generate_latent,
    lattice_size,
    mask_id,
    mask_leq,
    mask_str,
    mask_weight,
    materialize,
    nonzero_masks,
)
from mwdml.entropy import (
    entropy_integral_vc,
    vc_log_factor,
    vc_threshold_floor,
    vc_threshold_floor_strong,
)
from mwdml.projections import (
    conditional_mean_at,
    draw_family_values,
    pi_lattice,
    population_conditional_cov,
    population_mean,
)

_TAG_SUP = 5
_TAG_SUP_MC = 6
_TAG_BOUND = 7
_TAG_DIAG = 8


class BoundsError(ValueError):
    pass


class UncenteredGridError(BoundsError):
    """The sup-process estimator refuses uncentered grids."""


# ---------------------------------------------------------------------------
# function grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VcDecl:
    """Declared covering-number characteristics (A, v)."""

    A: float
    v: float

    def __post_init__(self) -> None:
        if self.A < math.e - 1e-12:
            raise BoundsError(f"declared A must be >= e, got {self.A}")
        if self.v < 1.0:
            raise BoundsError(f"declared v must be >= 1, got {self.v}")


@dataclass(frozen=True)
class ThresholdGrid:
    """Indicator functions x -> 1{x <= t} over a threshold ladder.

    VC dimension 1; the default declaration uses v=1 with A=2e (a standard
    covering constant for half-lines; the bound checks fold constants into
    fitted ratios anyway).
    """

    field_name: str
    thresholds: tuple[float, ...]
    vc: VcDecl | None = field(default_factory=lambda: VcDecl(2.0 * math.e, 1.0))

    @property
    def size(self) -> int:
        return len(self.thresholds)

    @property
    def labels(self) -> list[str]:
        return [f"1{{{self.field_name}<={t:g}}}" for t in self.thresholds]

    def evaluate(self, fields: Mapping[str, np.ndarray]) -> np.ndarray:
        x = np.asarray(fields[self.field_name], dtype=np.float64)
        thr = np.asarray(self.thresholds, dtype=np.float64).reshape((-1,) + (1,) * x.ndim)
        return (x[None, ...] <= thr).astype(np.float64)

    def envelope(self, fields: Mapping[str, np.ndarray]) -> np.ndarray:
        x = np.asarray(fields[self.field_name], dtype=np.float64)
        return np.ones_like(x)


@dataclass(frozen=True)
class IdentityGrid:
    """The singleton grid {x -> x}; envelope |x|.  No VC declaration."""

    field_name: str
    vc: VcDecl | None = None

    size = 1

    @property
    def labels(self) -> list[str]:
        return [self.field_name]

    def evaluate(self, fields: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.asarray(fields[self.field_name], dtype=np.float64)[None, ...]

    def envelope(self, fields: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.abs(np.asarray(fields[self.field_name], dtype=np.float64))


@dataclass(frozen=True)
class CenteredGrid:
    """A grid with exact population means subtracted; envelope widened to match."""

    base: ThresholdGrid | IdentityGrid
    offsets: tuple[float, ...]

    @property
    def size(self) -> int:
        return self.base.size

    @property
    def vc(self) -> VcDecl | None:
        return self.base.vc

    @property
    def labels(self) -> list[str]:
        return [f"{lab} - mean" for lab in self.base.labels]

    def evaluate(self, fields: Mapping[str, np.ndarray]) -> np.ndarray:
        vals = self.base.evaluate(fields)
        off = np.asarray(self.offsets, dtype=np.float64).reshape((-1,) + (1,) * (vals.ndim - 1))
        return vals - off

    def envelope(self, fields: Mapping[str, np.ndarray]) -> np.ndarray:
        pad = max(abs(o) for o in self.offsets) if self.offsets else 0.0
        return self.base.envelope(fields) + pad


def center_grid(grid, spec: DgpSpec, *, mode: str = "exact", draws=None, seed=None) -> CenteredGrid:
    """Subtract exact (or fixed-draw) population means from every grid member."""
    means = population_mean(grid, spec, mode=mode, draws=draws, seed=seed)
    return CenteredGrid(grid, tuple(float(m) for m in means))


# ---------------------------------------------------------------------------
# sup-process simulation
# ---------------------------------------------------------------------------


@dataclass
class SupProcessResult:
    mask: Mask
    scale: float                 # |I_{N,e}|^{1/2}
    scaled_sups: np.ndarray      # (R,), scale * sup_f |H_N^e(f)| per replication
    estimate: float              # mean of scaled sups
    se: float                    # Monte Carlo standard error of the mean

    def moment(self, q: float) -> tuple[float, float]:
        """(E[sup^q])^{1/q} of the scaled sups, with a delta-method se."""
        s = self.scaled_sups
        mq = float(np.mean(s**q))
        if mq <= 0.0:
            return 0.0, 0.0
        se_mq = float(np.std(s**q, ddof=1)) / math.sqrt(len(s))
        val = mq ** (1.0 / q)
        return val, val * se_mq / (q * mq)


def empirical_sup_process(
    grid,
    spec: DgpSpec,
    e: Mask,
    replications: int,
    seed: int,
    *,
    mode: str = "exact",
    draws: int | None = None,
    center_tol: float = 1e-9,
) -> SupProcessResult:
    """Simulate |I_{N,e}|^{1/2} * sup_f |H_N^e(f)| over fresh samples.

    Requires a centered grid (max |P f| <= center_tol, checked exactly when
    the spec is finite) and at least 100 replications.
    """
    if replications < 100:
        raise BoundsError("sup-process simulation needs at least 100 replications")
    e = tuple(int(b) for b in e)
    pop = population_mean(grid, spec, mode=mode, draws=draws, seed=None if seed is None else derive_key(seed, _TAG_SUP_MC, 0))
    worst = float(np.max(np.abs(pop)))
    if worst > center_tol:
        raise UncenteredGridError(
            f"grid is not centered (max |P f| = {worst:.3e}); wrap it with center_grid()"
        )
    sups = np.empty(replications)
    for r in range(replications):
        rep_seed = derive_key(seed, _TAG_SUP, r)
        sample = materialize(generate_latent(spec, rep_seed), spec)
        pi = pi_lattice(
            grid,
            sample,
            e,
            mode=mode,
            draws=draws,
            seed=derive_key(rep_seed, _TAG_SUP_MC),
        )
        h = pi.mean(axis=tuple(range(1, pi.ndim)))
        sups[r] = float(np.max(np.abs(h)))
    scale = math.sqrt(lattice_size(spec.shape, e))
    scaled = scale * sups
    est = float(scaled.mean())
    se = float(scaled.std(ddof=1)) / math.sqrt(replications)
    return SupProcessResult(e, scale, scaled, est, se)


# ---------------------------------------------------------------------------
# bound report
# ---------------------------------------------------------------------------


@dataclass
class BoundRow:
    mask: Mask
    n: int
    lhs: float
    lhs_se: float
    rhs_global: float
    rhs_local: float
    ratio: float
    sigma: float
    m_norm: float
    envelope_norm: float


@dataclass
class MaskSummary:
    mask: Mask
    ratios: list[float]
    max_ratio: float
    median_ratio: float
    max_over_median: float
    slope_lhs: float | None       # log-log slope of LHS vs n
    slope_ratio: float | None     # log-log slope of LHS/RHS_local vs n
    fitted_constant_global: float
    fitted_constant_local: float
    degenerate: bool              # all LHS at numerical zero


@dataclass
class BoundReport:
    rows: list[BoundRow]
    per_mask: dict[Mask, MaskSummary]
    meta: dict

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["mask", "n", "lhs", "lhs_se", "rhs_global", "rhs_local", "ratio"])
            for row in self.rows:
                writer.writerow(
                    [mask_str(row.mask), row.n]
                    + [repr(float(x)) for x in (row.lhs, row.lhs_se, row.rhs_global, row.rhs_local, row.ratio)]
                )


def _loglog_slope(ns: Sequence[int], ys: Sequence[float]) -> float | None:
    if any(y <= 0 for y in ys) or len(ys) < 2:
        return None
    coef = np.polyfit(np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(ys)), 1)
    return float(coef[0])


def bound_check(
    grid,
    spec: DgpSpec,
    masks: Sequence[Mask],
    n_grid: Sequence[int],
    *,
    q: float = 2.0,
    replications: int = 300,
    seed: int = 0,
    mode: str = "exact",
    draws: int | None = None,
    diag_reps: int = 200,
    degenerate_tol: float = 1e-8,
) -> BoundReport:
    """Simulated LHS vs. global and local-VC RHS on balanced shapes (n,)*K.

    The grid must declare (A, v); A is floored at the admissibility threshold
    for the spec's K before use, and the report records both threshold
    readings (see ``vc_threshold_floor``).
    """
    if grid.vc is None:
        raise BoundsError("bound_check needs a grid with declared VC characteristics")
    K = spec.shape.K
    A_eff = max(grid.vc.A, vc_threshold_floor(K))
    v = grid.vc.v
    rows: list[BoundRow] = []
    env_ev = _EnvelopeEval(grid)
    r_mom = max(q, 2.0)
    env_pow = _PowerEval(env_ev, r_mom)

    for n in n_grid:
        spec_n = spec.with_shape((n,) * K)
        nbar = spec_n.shape.n_max
        n_min = spec_n.shape.n_min
        fq = float(
            population_mean(env_pow, spec_n, mode=mode, draws=draws, seed=derive_key(seed, _TAG_BOUND, 1, n))[0]
        ) ** (1.0 / r_mom)
        for e in masks:
            e = tuple(int(b) for b in e)
            k = mask_weight(e)
            sup = empirical_sup_process(
                grid,
                spec_n,
                e,
                replications,
                derive_key(seed, _TAG_BOUND, n, mask_id(e)),
                mode=mode,
                draws=draws,
            )
            lhs, lhs_se = sup.moment(q)

            cm_env = population_conditional_cov(env_ev, spec_n, e, mode=mode, draws=draws, seed=derive_key(seed, _TAG_BOUND, 2, n))
            pef2 = math.sqrt(max(float(cm_env.second_moment[0]), 0.0))
            cm_grid = population_conditional_cov(grid, spec_n, e, mode=mode, draws=draws, seed=derive_key(seed, _TAG_BOUND, 3, n))
            sigma = math.sqrt(max(float(np.max(cm_grid.second_moment)), 0.0))
            sigma = min(max(sigma, 1e-12), max(pef2, 1e-12))

            cond_masks = [m for m in nonzero_masks(K) if mask_leq(m, e)]
            values = draw_family_values(
                spec_n, cond_masks, diag_reps * n_min, derive_key(seed, _TAG_DIAG, n, mask_id(e))
            )
            proj_env = conditional_mean_at(env_ev, spec_n, e, values, mode=mode, draws=draws, seed=derive_key(seed, _TAG_DIAG, 9, n))
            diag_max = proj_env.reshape(diag_reps, n_min).max(axis=1)
            m_norm = math.sqrt(float(np.mean(diag_max**2)))

            base = vc_log_factor(A_eff, v, nbar)
            rhs_global = entropy_integral_vc(A_eff, v, k, 1.0) * fq
            rhs_local = sigma * base ** (k / 2.0) + (m_norm / math.sqrt(n_min)) * base**k
            ratio = lhs / rhs_local if rhs_local > 0 else math.inf
            rows.append(
                BoundRow(e, int(n), lhs, lhs_se, rhs_global, rhs_local, ratio, sigma, m_norm, fq)
            )

    per_mask: dict[Mask, MaskSummary] = {}
    for e in {tuple(int(b) for b in m) for m in masks}:
        sub = sorted((r for r in rows if r.mask == e), key=lambda r: r.n)
        ns = [r.n for r in sub]
        ratios = [r.ratio for r in sub]
        med = statistics.median(ratios)
        degenerate = all(r.lhs <= degenerate_tol for r in sub)
        per_mask[e] = MaskSummary(
            mask=e,
            ratios=ratios,
            max_ratio=max(ratios),
            median_ratio=med,
            max_over_median=(max(ratios) / med) if med > 0 else (0.0 if degenerate else math.inf),
            slope_lhs=_loglog_slope(ns, [r.lhs for r in sub]),
            slope_ratio=_loglog_slope(ns, ratios),
            fitted_constant_global=max((r.lhs / r.rhs_global) for r in sub if r.rhs_global > 0),
            fitted_constant_local=max(ratios),
            degenerate=degenerate,
        )
    meta = {
        "q": q,
        "replications": replications,
        "seed": seed,
        "declared_A": grid.vc.A,
        "effective_A": A_eff,
        "v": v,
        "floor_weak": vc_threshold_floor(K),
        "floor_strong": vc_threshold_floor_strong(K),
        "mode": mode,
        "diag_reps": diag_reps,
    }
    return BoundReport(rows, per_mask, meta)


class _EnvelopeEval:
    """Adapter: grid envelope as a single-output evaluator."""

    size = 1

    def __init__(self, grid):
        self._grid = grid

    def evaluate(self, fields):
        return np.asarray(self._grid.envelope(fields), dtype=np.float64)[None, ...]


class _PowerEval:
    size = 1

    def __init__(self, inner, power: float):
        self._inner = inner
        self._power = power

    def evaluate(self, fields):
        return np.abs(self._inner.evaluate(fields)) ** self._power
