"""Hoeffding-type projections for separately exchangeable arrays.

For a mask ``e``, the conditional projection P_e f evaluates
``E[f(X_i) | {U_{i&e'}}_{e' <= e}]``.  With finite-support latent factors this
is computed *exactly* by enumerating the joint support of the complementary
factors with probability weights; a Monte Carlo mode (fresh keyed draws,
explicit budget) covers continuous factors.  The engine never silently
approximates: exact mode raises on continuous support.

The centered projections are defined by the recursion

    pi_{e} f = P_e f - sum_{e' < e} pi_{e'} f        (pi_0 f = P f),

equivalently the Moebius closed form
``pi_e f = sum_{e' <= e} (-1)^{|e|_0 - |e'|_0} P_{e'} f``.  Averaging pi_e
over the masked sub-lattice gives the components H_N^e whose sum reconstructs
the centered empirical mean exactly — the identity the acceptance tests pin
at 1e-10.

All engines are vectorized over (a) an output axis, so vector-valued scores
ride the same code path as function grids, and (b) the masked sub-lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from mwdml._backend import uniform_block
from mwdml._rng import derive_key
from mwdml.arrays import (
    ClusteredSample,
    DgpSpec,
    Mask,
    apply_observation,
    mask_id,
    mask_leq,
    mask_str,
    mask_support,
    mask_weight,
    nonzero_masks,
    submasks,
)

_TAG_MC = 2
_TAG_POP = 3
_TAG_DIAG = 4
_MAX_COMBOS = 4_000_000

Evaluator = Callable[[Mapping[str, np.ndarray]], np.ndarray]


class ProjectionError(ValueError):
    """Exact mode unavailable, reconstruction failure, or bad projection input."""


def as_evaluator(obj) -> tuple[Evaluator, int]:
    """Normalize a function grid or scalar callable to (evaluate, n_out).

    Grids expose ``.evaluate(fields) -> (size, *batch)``; a bare callable is
    treated as one scalar function of the observation record.
    """
    size = getattr(obj, "size", None)
    ev = getattr(obj, "evaluate", None)
    if ev is not None and size is not None:
        return ev, int(size)
    if callable(obj):
        def wrapped(fields, _f=obj):
            return np.asarray(_f(fields), dtype=np.float64)[None]

        return wrapped, 1
    raise ProjectionError(f"cannot interpret {obj!r} as a function or grid")


# ---------------------------------------------------------------------------
# support enumeration / draws for a set of latent families
# ---------------------------------------------------------------------------


def _family_blocks(
    spec: DgpSpec,
    masks: Sequence[Mask],
    *,
    mode: str,
    draws: int | None,
    seed: int | None,
    tag: int,
) -> tuple[dict[Mask, np.ndarray], np.ndarray]:
    """Joint support (exact) or keyed draws (mc) of the given families.

    Returns ``(values, weights)`` with ``values[e]`` of shape (B, C_e).
    The exact branch enumerates the product of all component supports and
    multiplies atom probabilities; B is the product of support sizes.
    """
    comps = []
    for e in masks:
        for c, dist in enumerate(spec.factors[e]):
            comps.append((e, c, dist))
    if mode == "exact":
        for e, c, dist in comps:
            if not dist.is_finite:
                raise ProjectionError(
                    f"factor {mask_str(e)}[{c}] has continuous support; "
                    "exact mode is unavailable — pass mode='mc' with draws and seed"
                )
        supports = [dist.support() for _, _, dist in comps]
        sizes = [len(a) for a, _ in supports]
        B = math.prod(sizes) if sizes else 1
        if B > _MAX_COMBOS:
            raise ProjectionError(
                f"joint support has {B} combinations (> {_MAX_COMBOS}); use mode='mc'"
            )
        weights = np.ones(B)
        cols: list[np.ndarray] = []
        stride = B
        for (atoms, probs), size in zip(supports, sizes):
            stride //= size
            idx = (np.arange(B) // stride) % size
            cols.append(np.asarray(atoms)[idx])
            weights = weights * np.asarray(probs)[idx]
    elif mode == "mc":
        if not draws or draws < 1 or seed is None:
            raise ProjectionError("mode='mc' needs draws >= 1 and a seed")
        B = int(draws)
        weights = np.full(B, 1.0 / B)
        cols = []
        for e, c, dist in comps:
            key = derive_key(seed, tag, mask_id(e), c)
            cols.append(dist.from_uniform(uniform_block(key, B)))
    else:
        raise ProjectionError(f"unknown mode {mode!r}")

    values: dict[Mask, np.ndarray] = {}
    j = 0
    for e in masks:
        width = len(spec.factors[e])
        fam = np.stack(cols[j : j + width], axis=-1) if width else np.zeros((B, 0))
        values[e] = fam
        j += width
    return values, weights


def _expand(vals: np.ndarray, n_out: int, batch: tuple[int, ...]) -> np.ndarray:
    """Right-align `vals` after its output axis and broadcast to (n_out, *batch)."""
    target = (n_out,) + batch
    if vals.ndim > len(target):
        raise ProjectionError(
            f"evaluator returned rank {vals.ndim}, expected at most {len(target)}"
        )
    pad = len(target) - vals.ndim
    vals = vals.reshape(vals.shape[:1] + (1,) * pad + vals.shape[1:])
    return np.broadcast_to(vals, target)


# ---------------------------------------------------------------------------
# conditional projections on the masked sub-lattice
# ---------------------------------------------------------------------------


def conditional_mean_lattice(
    func,
    sample: ClusteredSample,
    cond_mask: Mask,
    *,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """P_e f at every masked index: array of shape (n_out, *dims[supp(e)]).

    Conditions on the realized families e' <= cond_mask from the sample's
    latent table and integrates the rest out (enumeration or keyed draws).
    """
    evaluate, n_out = as_evaluator(func)
    if sample.spec is None or sample.latents is None:
        raise ProjectionError("sample must carry its spec and latent table")
    spec = sample.spec
    dims = spec.shape.dims
    c = tuple(int(b) for b in cond_mask)
    if len(c) != spec.shape.K:
        raise ProjectionError(f"mask length {len(c)} != K={spec.shape.K}")
    ks = mask_support(c)
    sub_dims = tuple(dims[k] for k in ks)

    realized = [e for e in nonzero_masks(spec.shape.K) if mask_leq(e, c)]
    complement = [e for e in nonzero_masks(spec.shape.K) if not mask_leq(e, c)]

    blocks, weights = _family_blocks(
        spec, complement, mode=mode, draws=draws, seed=seed, tag=_TAG_MC
    )
    B = weights.shape[0]

    latents: dict[Mask, np.ndarray] = {}
    for e in realized:
        fam = sample.latents.families[e]
        aligned = tuple(dims[k] if e[k] else 1 for k in ks)
        latents[e] = fam.reshape((1,) + aligned + (fam.shape[-1],))
    ones = (1,) * len(ks)
    for e in complement:
        fam = blocks[e]
        latents[e] = fam.reshape((B,) + ones + (fam.shape[-1],))

    fields = apply_observation(spec.observe, latents)
    vals = _expand(np.asarray(evaluate(fields), dtype=np.float64), n_out, (B,) + sub_dims)
    return np.tensordot(vals, weights, axes=([1], [0]))


def population_mean(
    func,
    spec: DgpSpec,
    *,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """P f = E[f(X)] over all latent families; shape (n_out,)."""
    evaluate, n_out = as_evaluator(func)
    masks = nonzero_masks(spec.shape.K)
    blocks, weights = _family_blocks(spec, masks, mode=mode, draws=draws, seed=seed, tag=_TAG_POP)
    B = weights.shape[0]
    latents = {e: blocks[e].reshape(B, -1) if blocks[e].ndim != 2 else blocks[e] for e in masks}
    fields = apply_observation(spec.observe, latents)
    vals = _expand(np.asarray(evaluate(fields), dtype=np.float64), n_out, (B,))
    return vals @ weights


def conditional_projection(
    f, sample: ClusteredSample, cell: Sequence[int], e: Mask, **kw
) -> float:
    """P_e f at one cell (1-based multi-index); scalar functions only."""
    arr = conditional_mean_lattice(f, sample, e, **kw)
    idx = tuple(int(cell[k]) - 1 for k in mask_support(tuple(e)))
    return float(arr[(0,) + idx])


# ---------------------------------------------------------------------------
# centered projections: Moebius form and recursion
# ---------------------------------------------------------------------------


def _align_sub(arr: np.ndarray, e_src: Mask, e_dst: Mask) -> np.ndarray:
    """Reshape (n_out, *sub(e_src)) for broadcasting over sub(e_dst)."""
    ks_dst = mask_support(e_dst)
    src_sizes = iter(arr.shape[1:])
    shape = [arr.shape[0]]
    for k in ks_dst:
        shape.append(next(src_sizes) if e_src[k] else 1)
    return arr.reshape(shape)


def pi_lattice(
    func,
    sample: ClusteredSample,
    e: Mask,
    *,
    p_cache: dict | None = None,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """Moebius form of pi_e f on the supp(e) sub-lattice: (n_out, *dims[supp])."""
    e = tuple(int(b) for b in e)
    if not any(e):
        raise ProjectionError("pi projection needs a nonzero mask")
    cache = p_cache if p_cache is not None else {}

    def P(mask: Mask) -> np.ndarray:
        if mask not in cache:
            if any(mask):
                cache[mask] = conditional_mean_lattice(
                    func, sample, mask, mode=mode, draws=draws, seed=seed
                )
            else:
                pm = population_mean(func, sample.spec, mode=mode, draws=draws, seed=seed)
                cache[mask] = pm.reshape(pm.shape[0])
        return cache[mask]

    w_e = mask_weight(e)
    total: np.ndarray | None = None
    for e_sub in submasks(e, include_zero=True):
        sign = -1.0 if (w_e - mask_weight(e_sub)) % 2 else 1.0
        arr = P(e_sub)
        if not any(e_sub):
            arr = arr.reshape((arr.shape[0],) + (1,) * w_e)
        else:
            arr = _align_sub(arr, e_sub, e)
        total = sign * arr if total is None else total + sign * arr
    ks = mask_support(e)
    target = (total.shape[0],) + tuple(sample.shape.dims[k] for k in ks)
    return np.broadcast_to(total, target)


def pi_lattice_recursive(
    func,
    sample: ClusteredSample,
    e: Mask,
    *,
    pi_cache: dict | None = None,
    p_cache: dict | None = None,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """Recursive form: pi_e = P_e - sum over strict submasks (incl. the mean)."""
    e = tuple(int(b) for b in e)
    pis = pi_cache if pi_cache is not None else {}
    ps = p_cache if p_cache is not None else {}

    def rec(mask: Mask) -> np.ndarray:
        if mask in pis:
            return pis[mask]
        if not any(mask):
            pm = population_mean(func, sample.spec, mode=mode, draws=draws, seed=seed)
            pis[mask] = pm
            return pm
        if mask not in ps:
            ps[mask] = conditional_mean_lattice(
                func, sample, mask, mode=mode, draws=draws, seed=seed
            )
        total = ps[mask].copy()
        for e_sub in submasks(mask, include_zero=True, strict=True):
            arr = rec(e_sub)
            if not any(e_sub):
                arr = arr.reshape((arr.shape[0],) + (1,) * mask_weight(mask))
            else:
                arr = _align_sub(arr, e_sub, mask)
            total = total - arr
        pis[mask] = total
        return total

    out = rec(e)
    ks = mask_support(e)
    target = (out.shape[0],) + tuple(sample.shape.dims[k] for k in ks)
    return np.broadcast_to(out, target)


def pi_projection(
    f,
    sample: ClusteredSample,
    cell: Sequence[int],
    e: Mask,
    *,
    tol: float = 1e-12,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
) -> float:
    """pi_e f at one cell, computed by both routes; raises if they disagree.

    The Moebius and recursive forms must match within ``tol`` in exact mode
    (they are algebraically identical; the check guards the implementation).
    """
    kw = dict(mode=mode, draws=draws, seed=seed)
    a = pi_lattice(f, sample, e, **kw)
    b = pi_lattice_recursive(f, sample, e, **kw)
    gap = float(np.max(np.abs(a - b)))
    if mode == "exact" and gap > tol:
        raise ProjectionError(f"Moebius and recursive pi_e disagree by {gap:.3e}")
    idx = tuple(int(cell[k]) - 1 for k in mask_support(tuple(e)))
    return float(a[(0,) + idx])


# ---------------------------------------------------------------------------
# decomposition and Hajek projection
# ---------------------------------------------------------------------------


@dataclass
class HoeffdingComponents:
    """Per-mask averages H_N^e(f) plus the reconstruction bookkeeping."""

    masks: list[Mask]
    h: dict[Mask, np.ndarray]          # (n_out,) per mask
    sizes: dict[Mask, int]             # |I_{N,e}|
    sample_mean: np.ndarray            # Ebar_N f, (n_out,)
    population_mean: np.ndarray        # P f, (n_out,)
    residual: np.ndarray               # sum_e H^e - (Ebar - P), (n_out,)

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual))) if self.residual.size else 0.0


def hoeffding_decompose(
    func,
    sample: ClusteredSample,
    *,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
    tol: float = 1e-10,
) -> HoeffdingComponents:
    """All components H_N^e(f) = |I_{N,e}|^{-1} sum_i pi_e f(i & e).

    In exact mode the reconstruction identity
    ``sum_e H_N^e = Ebar_N f - P f`` is enforced to ``tol``.
    """
    spec = sample.spec
    if spec is None:
        raise ProjectionError("sample must carry its spec")
    masks = nonzero_masks(spec.shape.K)
    kw = dict(mode=mode, draws=draws, seed=seed)
    p_cache: dict = {}
    h: dict[Mask, np.ndarray] = {}
    sizes: dict[Mask, int] = {}
    for e in masks:
        pi = pi_lattice(func, sample, e, p_cache=p_cache, **kw)
        h[e] = pi.mean(axis=tuple(range(1, pi.ndim)))
        sizes[e] = int(np.prod(pi.shape[1:]))
    full = (1,) * spec.shape.K
    sample_mean = p_cache[full].mean(axis=tuple(range(1, p_cache[full].ndim)))
    pop = p_cache[(0,) * spec.shape.K]
    residual = sum(h.values()) - (sample_mean - pop)
    comps = HoeffdingComponents(masks, h, sizes, sample_mean, pop, residual)
    if mode == "exact" and comps.max_residual > tol:
        raise ProjectionError(
            f"Hoeffding reconstruction residual {comps.max_residual:.3e} exceeds {tol:.1e}"
        )
    return comps


@dataclass
class CondMoments:
    """Population moments of m(U) = E[f(X) | U_{e' <= e}]."""

    mean: np.ndarray          # (n_out,)
    cov: np.ndarray           # (n_out, n_out)
    second_moment: np.ndarray  # (n_out,), E[m(U)^2]


def population_conditional_cov(
    func,
    spec: DgpSpec,
    e: Mask,
    *,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
) -> CondMoments:
    """Moments of the conditional mean given all families below ``e``.

    Exact mode enumerates both the conditioning block and its complement;
    MC mode uses ``draws`` keyed draws for each side (reported budget).
    """
    evaluate, n_out = as_evaluator(func)
    e = tuple(int(b) for b in e)
    masks = nonzero_masks(spec.shape.K)
    cond = [m for m in masks if mask_leq(m, e)]
    rest = [m for m in masks if not mask_leq(m, e)]
    cond_blocks, wc = _family_blocks(spec, cond, mode=mode, draws=draws, seed=seed, tag=_TAG_POP)
    rest_blocks, wm = _family_blocks(
        spec, rest, mode=mode, draws=draws, seed=None if seed is None else seed + 1, tag=_TAG_MC
    )
    Bc, Bm = wc.shape[0], wm.shape[0]
    latents: dict[Mask, np.ndarray] = {}
    for m in cond:
        fam = cond_blocks[m]
        latents[m] = fam.reshape(Bc, 1, fam.shape[-1])
    for m in rest:
        fam = rest_blocks[m]
        latents[m] = fam.reshape(1, Bm, fam.shape[-1])
    fields = apply_observation(spec.observe, latents)
    vals = _expand(np.asarray(evaluate(fields), dtype=np.float64), n_out, (Bc, Bm))
    m_of_u = vals @ wm                      # (n_out, Bc)
    mean = m_of_u @ wc
    ctr = m_of_u - mean[:, None]
    cov = (ctr * wc) @ ctr.T
    cov = 0.5 * (cov + cov.T)
    second = (m_of_u * m_of_u) @ wc
    return CondMoments(mean, cov, second)


def conditional_mean_at(
    func,
    spec: DgpSpec,
    e: Mask,
    cond_values: Mapping[Mask, np.ndarray],
    *,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """P_e f evaluated at supplied conditioning-family values.

    ``cond_values[e']`` must be (B, C_{e'}) for every nonzero e' <= e; the
    complement is integrated out.  Returns (n_out, B).  Used for simulating
    the diagonal envelope maximum M_e.
    """
    evaluate, n_out = as_evaluator(func)
    e = tuple(int(b) for b in e)
    masks = nonzero_masks(spec.shape.K)
    cond = [m for m in masks if mask_leq(m, e)]
    rest = [m for m in masks if not mask_leq(m, e)]
    B = None
    for m in cond:
        fam = np.asarray(cond_values[m], dtype=np.float64)
        if fam.ndim != 2 or fam.shape[1] != len(spec.factors[m]):
            raise ProjectionError(f"cond_values[{mask_str(m)}] must be (B, {len(spec.factors[m])})")
        B = fam.shape[0] if B is None else B
        if fam.shape[0] != B:
            raise ProjectionError("conditioning blocks disagree on batch size")
    if B is None:
        B = 1
    rest_blocks, wm = _family_blocks(spec, rest, mode=mode, draws=draws, seed=seed, tag=_TAG_MC)
    Bm = wm.shape[0]
    latents: dict[Mask, np.ndarray] = {}
    for m in cond:
        fam = np.asarray(cond_values[m], dtype=np.float64)
        latents[m] = fam.reshape(B, 1, fam.shape[-1])
    for m in rest:
        fam = rest_blocks[m]
        latents[m] = fam.reshape(1, Bm, fam.shape[-1])
    fields = apply_observation(spec.observe, latents)
    vals = _expand(np.asarray(evaluate(fields), dtype=np.float64), n_out, (B, Bm))
    return vals @ wm


def draw_family_values(
    spec: DgpSpec, masks: Sequence[Mask], count: int, seed: int
) -> dict[Mask, np.ndarray]:
    """``count`` i.i.d. keyed draws of each requested family: (count, C_e)."""
    blocks, _ = _family_blocks(spec, list(masks), mode="mc", draws=count, seed=seed, tag=_TAG_DIAG)
    return blocks


@dataclass
class HajekResult:
    """First-order projection onto single-dimension factors."""

    per_dim: dict[int, np.ndarray]   # k -> (n_out, N_k): E[f|U_{e_k}] - P f on the axis
    total: np.ndarray                # (n_out,): H_n f
    gn: np.ndarray                   # (n_out,): sqrt(n) (Ebar_N f - P f)
    remainder: np.ndarray            # gn - total
    var_terms: np.ndarray            # (K, n_out): Var(E[f|U_{e_k}])
    mu: tuple[float, ...]            # (n/N_1, ..., n/N_K)


def hajek_projection(
    func,
    sample: ClusteredSample,
    *,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
) -> HajekResult:
    """H_n f = sum_k (sqrt(n)/N_k) sum_{i_k} (E[f|U_{i_k e_k}] - P f).

    Also reports the per-dimension population variances Var(E[f|U_{e_k}])
    that enter the oracle middle matrix.
    """
    spec = sample.spec
    if spec is None:
        raise ProjectionError("sample must carry its spec")
    dims = spec.shape.dims
    K = spec.shape.K
    n = spec.shape.n_min
    kw = dict(mode=mode, draws=draws, seed=seed)
    p0 = population_mean(func, spec, **kw)
    per_dim: dict[int, np.ndarray] = {}
    total = None
    var_terms = []
    for k in range(K):
        e_k = tuple(1 if j == k else 0 for j in range(K))
        g = conditional_mean_lattice(func, sample, e_k, **kw) - p0[:, None]
        per_dim[k] = g
        contrib = (math.sqrt(n) / dims[k]) * g.sum(axis=1)
        total = contrib if total is None else total + contrib
        var_terms.append(np.diag(population_conditional_cov(func, spec, e_k, **kw).cov))
    evaluate, n_out = as_evaluator(func)
    full_vals = _expand(
        np.asarray(evaluate(sample.fields), dtype=np.float64), n_out, dims
    )
    sample_mean = full_vals.reshape(n_out, -1).mean(axis=1)
    gn = math.sqrt(n) * (sample_mean - p0)
    mu = tuple(n / d for d in dims)
    return HajekResult(per_dim, total, gn, gn - total, np.asarray(var_terms), mu)
