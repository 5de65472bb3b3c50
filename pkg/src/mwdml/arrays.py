"""Separately exchangeable array generation via latent factor tables.

A K-way clustered sample is represented through its Aldous–Hoover–Kallenberg
form: every cell ``i = (i_1, ..., i_K)`` carries one latent draw
``U_{i & e}`` for each nonzero 0/1 mask ``e`` (``&`` the coordinatewise
product), and the observed record is a fixed map ``tau`` of those draws.
Separate exchangeability and dissociation hold by construction because the
latent families are i.i.d. within and independent across masks.

Latent values are keyed by ``(seed, mask, masked index, component)`` through a
counter-based generator, so generation is order-independent and reproducible
under any parallel schedule.  Finite-support factors (atoms + probabilities)
are first-class: they are what makes exact conditional expectations, and hence
the exact Hoeffding-type decomposition, possible downstream.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from mwdml._backend import uniform_block
from mwdml._rng import derive_key

Mask = tuple[int, ...]

_STREAM_LATENT = 1


class ArrayError(ValueError):
    """Invalid shape, mask, factor table, or observation map input."""


# ---------------------------------------------------------------------------
# shapes and masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Shape:
    """Dimensions (N_1, ..., N_K) of the index lattice [N]."""

    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 1:
            raise ArrayError("shape needs at least one dimension")
        if any(d < 1 for d in dims):
            raise ArrayError(f"dimension sizes must be >= 1, got {dims}")

    @classmethod
    def coerce(cls, obj: "Shape | Sequence[int]") -> "Shape":
        if isinstance(obj, Shape):
            return obj
        return cls(tuple(int(d) for d in obj))

    @property
    def K(self) -> int:
        return len(self.dims)

    @property
    def n_cells(self) -> int:
        """Total cell count N = prod_k N_k."""
        return math.prod(self.dims)

    @property
    def n_min(self) -> int:
        """Effective sample size n = min_k N_k (the rate-determining size)."""
        return min(self.dims)

    @property
    def n_max(self) -> int:
        return max(self.dims)


def all_masks(K: int) -> list[Mask]:
    """All 0/1 masks of length K ordered by (weight, lexicographic)."""
    masks = list(itertools.product((0, 1), repeat=K))
    masks.sort(key=lambda e: (sum(e), e))
    return masks


def nonzero_masks(K: int) -> list[Mask]:
    return all_masks(K)[1:]


def mask_weight(e: Mask) -> int:
    return sum(e)


def mask_support(e: Mask) -> tuple[int, ...]:
    return tuple(k for k, b in enumerate(e) if b)


def mask_leq(a: Mask, b: Mask) -> bool:
    return all(x <= y for x, y in zip(a, b))


def submasks(e: Mask, *, include_zero: bool = False, strict: bool = False) -> list[Mask]:
    """Masks e' <= e in canonical order; optionally dropping 0 and/or e."""
    out = [m for m in all_masks(len(e)) if mask_leq(m, e)]
    if not include_zero:
        out = [m for m in out if any(m)]
    if strict:
        out = [m for m in out if m != e]
    return out


def mask_id(e: Mask) -> int:
    """1-based position of a nonzero mask in canonical order (RNG stream tag)."""
    return nonzero_masks(len(e)).index(tuple(e)) + 1


def mask_str(e: Mask) -> str:
    return "".join("1" if b else "0" for b in e)


def parse_mask(text: str, K: int | None = None) -> Mask:
    s = text.replace(",", "").strip()
    if not s or any(ch not in "01" for ch in s):
        raise ArrayError(f"mask must be 0/1 digits, got {text!r}")
    e = tuple(int(ch) for ch in s)
    if K is not None and len(e) != K:
        raise ArrayError(f"mask {text!r} has length {len(e)}, expected {K}")
    return e


def masked_index(cell: Sequence[int], e: Mask) -> tuple[int, ...]:
    """Hadamard product i & e: coordinates outside supp(e) set to 0."""
    return tuple(int(i) * int(b) for i, b in zip(cell, e))


def lattice_size(shape: Shape, e: Mask) -> int:
    """|I_{N,e}| = prod_{k in supp(e)} N_k."""
    return math.prod(shape.dims[k] for k in mask_support(e))


def enumerate_cells(shape: Shape) -> Iterator[tuple[int, ...]]:
    """All 1-based multi-indices of [N] in row-major order."""
    return itertools.product(*(range(1, d + 1) for d in shape.dims))


# ---------------------------------------------------------------------------
# latent factor distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Finite:
    """Discrete distribution on real atoms with the given probabilities."""

    atoms: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        atoms = tuple(float(a) for a in self.atoms)
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)
        if len(atoms) != len(probs) or not atoms:
            raise ArrayError("atoms and probs must be equal-length and nonempty")
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise ArrayError("probabilities must be nonnegative and sum to 1")

    is_finite = True

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        cum = np.cumsum(np.asarray(self.probs))
        cum[-1] = 1.0
        idx = np.searchsorted(cum, u, side="left")
        return np.asarray(self.atoms, dtype=np.float64)[idx]

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.atoms), np.asarray(self.probs)

    def mean(self) -> float:
        return float(np.dot(self.atoms, self.probs))


@dataclass(frozen=True)
class Degenerate:
    """Point mass; the target of the degeneracy switch."""

    value: float = 0.0

    is_finite = True

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return np.full_like(np.asarray(u, dtype=np.float64), float(self.value))

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray([float(self.value)]), np.asarray([1.0])

    def mean(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class Gaussian:
    mean_: float = 0.0
    sd: float = 1.0

    is_finite = False

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return self.mean_ + self.sd * ndtri(u)

    def support(self):  # pragma: no cover - guarded by is_finite checks
        raise ArrayError("continuous factor has no finite support")

    def mean(self) -> float:
        return float(self.mean_)


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0

    is_finite = False

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return self.low + (self.high - self.low) * u

    def support(self):  # pragma: no cover
        raise ArrayError("continuous factor has no finite support")

    def mean(self) -> float:
        return 0.5 * (self.low + self.high)


Dist = Finite | Degenerate | Gaussian | Uniform


def rademacher() -> Finite:
    return Finite((-1.0, 1.0), (0.5, 0.5))


def dist_to_json(d: Dist) -> dict:
    if isinstance(d, Finite):
        return {"kind": "finite", "atoms": list(d.atoms), "probs": list(d.probs)}
    if isinstance(d, Degenerate):
        return {"kind": "constant", "value": d.value}
    if isinstance(d, Gaussian):
        return {"kind": "normal", "mean": d.mean_, "sd": d.sd}
    if isinstance(d, Uniform):
        return {"kind": "uniform", "low": d.low, "high": d.high}
    raise ArrayError(f"unknown distribution {d!r}")


def dist_from_json(obj: Mapping) -> Dist:
    kind = obj.get("kind")
    if kind == "finite":
        return Finite(tuple(obj["atoms"]), tuple(obj["probs"]))
    if kind == "constant":
        return Degenerate(float(obj.get("value", 0.0)))
    if kind == "normal":
        return Gaussian(float(obj.get("mean", 0.0)), float(obj.get("sd", 1.0)))
    if kind == "uniform":
        return Uniform(float(obj.get("low", 0.0)), float(obj.get("high", 1.0)))
    raise ArrayError(f"unknown distribution kind {kind!r}")


# ---------------------------------------------------------------------------
# DGP specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationMap:
    """Named composition rule turning latent families into observed fields."""

    kind: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DgpSpec:
    """Shape + per-mask latent factor components + observation map.

    ``factors`` maps every nonzero mask to a tuple of component
    distributions (possibly empty when the map ignores that mask).
    """

    shape: Shape
    factors: Mapping[Mask, tuple[Dist, ...]]
    observe: ObservationMap

    def __post_init__(self) -> None:
        shape = Shape.coerce(self.shape)
        object.__setattr__(self, "shape", shape)
        fixed: dict[Mask, tuple[Dist, ...]] = {}
        for e in nonzero_masks(shape.K):
            fam = tuple(self.factors.get(e, ()))
            fixed[e] = fam
        for e in self.factors:
            if tuple(e) not in fixed:
                raise ArrayError(f"factor mask {e} does not match shape arity {shape.K}")
        object.__setattr__(self, "factors", fixed)

    @property
    def all_finite(self) -> bool:
        return all(d.is_finite for fam in self.factors.values() for d in fam)

    def with_shape(self, dims: Shape | Sequence[int]) -> "DgpSpec":
        return replace(self, shape=Shape.coerce(dims))

    def freeze_factors(self, masks: Sequence[Mask]) -> "DgpSpec":
        """Degeneracy switch: pin every component of the given masks at its mean."""
        masks = {tuple(m) for m in masks}
        factors = {
            e: tuple(Degenerate(d.mean()) for d in fam) if e in masks else fam
            for e, fam in self.factors.items()
        }
        return replace(self, factors=factors)


# ---------------------------------------------------------------------------
# observation maps
# ---------------------------------------------------------------------------


def _comp(latents: Mapping[Mask, np.ndarray], e: Mask, c: int) -> np.ndarray:
    fam = latents.get(tuple(e))
    if fam is None or fam.shape[-1] <= c:
        raise ArrayError(f"observation map needs component {c} of factor {mask_str(e)}")
    return fam[..., c]


def _obs_additive(latents, params):
    K = len(next(iter(latents)))
    name = params.get("field", "x")
    total = np.asarray(float(params.get("offset", 0.0)))
    weights = params.get("weights", {})
    for e in nonzero_masks(K):
        fam = latents[e]
        if fam.shape[-1] == 0:
            continue
        w = float(weights.get(mask_str(e), 1.0))
        if w == 0.0:
            continue
        total = total + w * fam[..., 0]
    return {name: total}


def _obs_multiplicative(latents, params):
    K = len(next(iter(latents)))
    name = params.get("field", "x")
    prod = np.asarray(1.0)
    for k in range(K):
        e = tuple(1 if j == k else 0 for j in range(K))
        prod = prod * _comp(latents, e, 0)
    w = float(params.get("interaction_weight", 0.0))
    if w != 0.0:
        full = (1,) * K
        prod = prod + w * _comp(latents, full, 0)
    return {name: prod}


def plr_coefficients(params) -> tuple[np.ndarray, np.ndarray, float]:
    """(g0, m0, theta0) coefficient vectors of the partially linear design."""
    p = int(params.get("p", 10))
    s = int(params.get("s", 2))
    cg = float(params.get("coef_g", 1.0))
    cm = float(params.get("coef_m", 0.5))
    g = np.where(np.arange(p) < s, cg, 0.0)
    m = np.where(np.arange(p) < s, cm, 0.0)
    return g, m, float(params.get("theta0", 1.0))


def _obs_plr(latents, params):
    """Partially linear design: y = theta0*d + g0(x) + row/col/cell noise,
    d = m0(x) + row/col/cell noise, covariates x cell-i.i.d."""
    K = len(next(iter(latents)))
    g, m, theta0 = plr_coefficients(params)
    p = g.shape[0]
    sd_y_dims = params.get("sd_y_dims", [1.0] * K)
    sd_d_dims = params.get("sd_d_dims", [1.0] * K)
    sy_cell = float(params.get("sd_y_cell", 0.5))
    sd_cell = float(params.get("sd_d_cell", 0.5))
    full = (1,) * K

    xs = [_comp(latents, full, 2 + c) for c in range(p)]
    g0 = sum(g[c] * xs[c] for c in range(p)) if p else np.asarray(0.0)
    m0 = sum(m[c] * xs[c] for c in range(p)) if p else np.asarray(0.0)
    u_d = sd_cell * _comp(latents, full, 1)
    u_y = sy_cell * _comp(latents, full, 0)
    for k in range(K):
        e = tuple(1 if j == k else 0 for j in range(K))
        u_y = u_y + float(sd_y_dims[k]) * _comp(latents, e, 0)
        u_d = u_d + float(sd_d_dims[k]) * _comp(latents, e, 1)
    d = m0 + u_d
    y = theta0 * d + g0 + u_y
    out = {"y": y, "d": d}
    for c in range(p):
        out[f"x{c + 1}"] = xs[c]
    return out


def _obs_iv(latents, params):
    """Endogenous regressor with an exogenous cell-level instrument."""
    K = len(next(iter(latents)))
    theta0 = float(params.get("theta0", 1.0))
    pi = float(params.get("pi", 1.0))
    kappa_d = float(params.get("kappa_d", 1.0))
    kappa_y = float(params.get("kappa_y", 0.5))
    sd_y_dims = params.get("sd_y_dims", [0.5] * K)
    sd_d_dims = params.get("sd_d_dims", [0.5] * K)
    full = (1,) * K
    z = _comp(latents, full, 0)
    u_sh = _comp(latents, full, 1)
    d = pi * z + kappa_d * u_sh + _comp(latents, full, 2)
    y_noise = kappa_y * u_sh + _comp(latents, full, 3)
    for k in range(K):
        e = tuple(1 if j == k else 0 for j in range(K))
        y_noise = y_noise + float(sd_y_dims[k]) * _comp(latents, e, 0)
        d = d + float(sd_d_dims[k]) * _comp(latents, e, 1)
    return {"y": theta0 * d + y_noise, "d": d, "z": z}


OBS_MAPS: dict[str, Callable[[Mapping[Mask, np.ndarray], Mapping], dict[str, np.ndarray]]] = {
    "additive": _obs_additive,
    "multiplicative": _obs_multiplicative,
    "plr": _obs_plr,
    "iv": _obs_iv,
}


# ---------------------------------------------------------------------------
# spec builders
# ---------------------------------------------------------------------------


def additive_spec(
    shape: Shape | Sequence[int],
    *,
    atoms: Sequence[float] = (-1.0, 1.0),
    probs: Sequence[float] = (0.5, 0.5),
    weights: Mapping[str, float] | None = None,
    include: Sequence[Mask] | None = None,
    field_name: str = "x",
    offset: float = 0.0,
) -> DgpSpec:
    """x = offset + sum_e w_e u_e with one finite-support component per mask.

    ``include`` restricts which masks carry a factor (default: all nonzero);
    an additive spec without the full-interaction mask has pi_full(linear f)
    identically zero, which the degeneracy checks rely on.
    """
    shape = Shape.coerce(shape)
    dist = Finite(tuple(atoms), tuple(probs))
    masks = [tuple(m) for m in include] if include is not None else nonzero_masks(shape.K)
    factors = {e: (dist,) for e in masks}
    params: dict = {"field": field_name, "offset": offset}
    if weights:
        params["weights"] = dict(weights)
    return DgpSpec(shape, factors, ObservationMap("additive", params))


def multiplicative_spec(
    shape: Shape | Sequence[int],
    *,
    atoms: Sequence[float] = (-1.0, 1.0),
    probs: Sequence[float] = (0.5, 0.5),
    interaction_weight: float = 0.0,
    field_name: str = "x",
) -> DgpSpec:
    """x = prod_k u_{e_k} (+ optional weight * full-interaction factor)."""
    shape = Shape.coerce(shape)
    dist = Finite(tuple(atoms), tuple(probs))
    factors: dict[Mask, tuple[Dist, ...]] = {}
    for k in range(shape.K):
        factors[tuple(1 if j == k else 0 for j in range(shape.K))] = (dist,)
    if interaction_weight != 0.0:
        factors[(1,) * shape.K] = (dist,)
    params = {"field": field_name, "interaction_weight": float(interaction_weight)}
    return DgpSpec(shape, factors, ObservationMap("multiplicative", params))


def plr_spec(shape: Shape | Sequence[int], **params) -> DgpSpec:
    """Rademacher-factor partially linear DGP; see ``_obs_plr``.

    Keyword params: theta0, p, s, coef_g, coef_m, sd_y_dims, sd_d_dims,
    sd_y_cell, sd_d_cell.  All factors are +-1 atoms so population moments
    are exactly enumerable.
    """
    shape = Shape.coerce(shape)
    p = int(params.get("p", 10))
    r = rademacher()
    factors: dict[Mask, tuple[Dist, ...]] = {(1,) * shape.K: (r, r) + (r,) * p}
    for k in range(shape.K):
        factors[tuple(1 if j == k else 0 for j in range(shape.K))] = (r, r)
    return DgpSpec(shape, factors, ObservationMap("plr", dict(params)))


def iv_spec(shape: Shape | Sequence[int], **params) -> DgpSpec:
    """Rademacher-factor endogenous-regressor DGP; see ``_obs_iv``."""
    shape = Shape.coerce(shape)
    r = rademacher()
    factors: dict[Mask, tuple[Dist, ...]] = {(1,) * shape.K: (r, r, r, r)}
    for k in range(shape.K):
        factors[tuple(1 if j == k else 0 for j in range(shape.K))] = (r, r)
    return DgpSpec(shape, factors, ObservationMap("iv", dict(params)))


SPEC_BUILDERS: dict[str, Callable[..., DgpSpec]] = {
    "additive": additive_spec,
    "multiplicative": multiplicative_spec,
    "plr": plr_spec,
    "iv": iv_spec,
}


# ---------------------------------------------------------------------------
# generation and materialization
# ---------------------------------------------------------------------------


@dataclass
class LatentTable:
    """All latent families for one (spec, seed): families[e] has shape
    (*dims[supp(e)], n_components)."""

    shape: Shape
    seed: int
    families: dict[Mask, np.ndarray]

    def family(self, e: Mask) -> np.ndarray:
        return self.families[tuple(e)]


def generate_latent(spec: DgpSpec, seed: int) -> LatentTable:
    """Draw every latent family for the spec under the given seed.

    Component c of mask e is stream ``derive_key(seed, 1, mask_id(e), c)``
    indexed by the row-major position of the masked index, so any single
    entry is reproducible in isolation.
    """
    dims = spec.shape.dims
    families: dict[Mask, np.ndarray] = {}
    for e in nonzero_masks(spec.shape.K):
        supp_dims = tuple(dims[k] for k in mask_support(e))
        count = math.prod(supp_dims)
        dists = spec.factors[e]
        if not dists:
            families[e] = np.zeros(supp_dims + (0,))
            continue
        cols = []
        for c, dist in enumerate(dists):
            key = derive_key(seed, _STREAM_LATENT, mask_id(e), c)
            cols.append(dist.from_uniform(uniform_block(key, count)))
        families[e] = np.stack(cols, axis=-1).reshape(supp_dims + (len(dists),))
    return LatentTable(spec.shape, int(seed), families)


@dataclass
class ClusteredSample:
    """Observed fields on the full lattice plus the latent table they came from."""

    shape: Shape
    fields: dict[str, np.ndarray]
    spec: DgpSpec | None = None
    latents: LatentTable | None = None

    @property
    def n_cells(self) -> int:
        return self.shape.n_cells

    def flat(self, name: str) -> np.ndarray:
        return self.fields[name].reshape(-1)

    def feature_matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.column_stack([self.flat(n) for n in names])


def broadcast_family(fam: np.ndarray, e: Mask, dims: tuple[int, ...]) -> np.ndarray:
    """View of a (supp-lattice, C) family expanded to (*dims, C)."""
    newshape = tuple(dims[k] if e[k] else 1 for k in range(len(dims))) + (fam.shape[-1],)
    return np.broadcast_to(fam.reshape(newshape), tuple(dims) + (fam.shape[-1],))


def apply_observation(
    observe: ObservationMap, latents: Mapping[Mask, np.ndarray]
) -> dict[str, np.ndarray]:
    try:
        fn = OBS_MAPS[observe.kind]
    except KeyError:
        raise ArrayError(f"unknown observation map {observe.kind!r}") from None
    return fn(latents, observe.params)


def materialize(table: LatentTable, spec: DgpSpec) -> ClusteredSample:
    """Evaluate the observation map at every cell: X_i = tau({U_{i&e}}_e)."""
    if table.shape != spec.shape:
        raise ArrayError(f"table shape {table.shape.dims} != spec shape {spec.shape.dims}")
    dims = spec.shape.dims
    latents = {e: broadcast_family(fam, e, dims) for e, fam in table.families.items()}
    raw = apply_observation(spec.observe, latents)
    fields: dict[str, np.ndarray] = {}
    for name, arr in raw.items():
        full = np.ascontiguousarray(np.broadcast_to(np.asarray(arr, dtype=np.float64), dims))
        if not np.isfinite(full).all():
            bad = np.argwhere(~np.isfinite(full))[0]
            cell = tuple(int(b) + 1 for b in bad)
            raise ArrayError(f"non-finite value in field {name!r} at cell {cell}")
        fields[name] = full
    return ClusteredSample(spec.shape, fields, spec, table)


def permute(sample: ClusteredSample, perms: Sequence[Sequence[int]]) -> ClusteredSample:
    """Relabel indices: cell (i_1,...,i_K) moves to (pi_1(i_1),...,pi_K(i_K))."""
    dims = sample.shape.dims
    if len(perms) != len(dims):
        raise ArrayError(f"need {len(dims)} permutations, got {len(perms)}")
    invs = []
    for k, perm in enumerate(perms):
        p = np.asarray(list(perm), dtype=np.int64)
        if p.shape[0] != dims[k] or not np.array_equal(np.sort(p), np.arange(1, dims[k] + 1)):
            raise ArrayError(f"permutation {k + 1} is not a permutation of 1..{dims[k]}")
        inv = np.empty(dims[k], dtype=np.int64)
        inv[p - 1] = np.arange(dims[k])
        invs.append(inv)
    fields = {name: arr[np.ix_(*invs)].copy() for name, arr in sample.fields.items()}
    latents = None
    if sample.latents is not None:
        fams = {}
        for e, fam in sample.latents.families.items():
            sel = [invs[k] for k in mask_support(e)]
            fams[e] = fam[np.ix_(*sel)].copy() if sel else fam.copy()
        latents = LatentTable(sample.shape, sample.latents.seed, fams)
    return ClusteredSample(sample.shape, fields, sample.spec, latents)


def write_sample_csv(sample: ClusteredSample, path) -> None:
    """Rows in row-major cell order, columns (i_1..i_K, field...)."""
    dims = sample.shape.dims
    names = list(sample.fields)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"i_{k + 1}" for k in range(len(dims))] + names)
        flats = [sample.fields[n].reshape(-1) for n in names]
        for row, cell in enumerate(enumerate_cells(sample.shape)):
            writer.writerow(list(cell) + [repr(float(f[row])) for f in flats])
