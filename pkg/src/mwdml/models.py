"""Moment models, nuisance parameters, orthogonality and oracle variance.

A moment model supplies a score psi(x, theta, eta) in R^q (q >= d) evaluated
on vectorized observation records.  Bundled models:

* ``location``      psi = y - theta                       (no nuisance)
* ``iv``            psi = (y - theta*d) * z               (no nuisance)
* ``plr``           psi = (y - l(x) - theta*(d - m(x))) * (d - m(x))
                    the Neyman-orthogonal residual-product score
* ``plr_nonorth``   psi = (y - theta*d - g(x)) * d
                    a deliberately non-orthogonal control score, kept as the
                    contrast case for the orthogonality checker

Population quantities (Gateaux derivatives, oracle J_0 / Psi_0 / V) are
computed by exact latent-support enumeration whenever the DGP is finite, or
by fixed-seed draws otherwise; the choice and budget are recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from mwdml.arrays import ClusteredSample, DgpSpec, plr_coefficients
from mwdml.projections import population_conditional_cov, population_mean

FieldMap = Mapping[str, np.ndarray]


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# nuisance parameters
# ---------------------------------------------------------------------------


@dataclass
class Nuisance:
    """Named real-valued functions of the observation record."""

    funcs: dict[str, Callable[[FieldMap], np.ndarray]]
    meta: dict = field(default_factory=dict)

    def predict(self, name: str, fields: FieldMap) -> np.ndarray:
        try:
            fn = self.funcs[name]
        except KeyError:
            raise ModelError(f"nuisance has no component {name!r}") from None
        return np.asarray(fn(fields), dtype=np.float64)

    def shifted(self, deltas: Mapping[str, Callable[[FieldMap], np.ndarray]], tau: float) -> "Nuisance":
        """eta + tau * delta along the given named directions."""
        out = dict(self.funcs)
        for name, dfn in deltas.items():
            base = self.funcs.get(name)
            if base is None:
                raise ModelError(f"direction perturbs unknown nuisance {name!r}")
            def moved(fields, _b=base, _d=dfn, _t=tau):
                return np.asarray(_b(fields), dtype=np.float64) + _t * np.asarray(
                    _d(fields), dtype=np.float64
                )
            out[name] = moved
        return Nuisance(out, dict(self.meta))


def nuisance_distance(
    a: Nuisance, b: Nuisance, sample: ClusteredSample, names: Sequence[str] | None = None, *, kind: str = "rms"
) -> float:
    """||a - b|| over the realized sample: root-mean-square by default, sup otherwise."""
    names = list(names) if names is not None else sorted(set(a.funcs) & set(b.funcs))
    if not names:
        raise ModelError("no common nuisance components to compare")
    sq = 0.0
    sup = 0.0
    count = 0
    for name in names:
        diff = np.broadcast_to(
            a.predict(name, sample.fields) - b.predict(name, sample.fields), sample.shape.dims
        )
        sq += float(np.sum(diff * diff))
        sup = max(sup, float(np.max(np.abs(diff))))
        count += diff.size
    if kind == "rms":
        return math.sqrt(sq / count)
    if kind == "sup":
        return sup
    raise ModelError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# moment models
# ---------------------------------------------------------------------------


@dataclass
class MomentModel:
    """Score psi: fields x theta x eta -> (q, *batch), with optional analytic
    theta-Jacobian d psi / d theta -> (q, d, *batch)."""

    name: str
    d_dim: int
    q_dim: int
    nuisance_names: tuple[str, ...]
    score_fn: Callable
    jac_fn: Callable | None = None
    holder: tuple[float, float] | None = None  # (B, alpha) smoothness descriptor

    def score(self, fields: FieldMap, theta: np.ndarray, eta: Nuisance | None) -> np.ndarray:
        return np.asarray(self.score_fn(fields, np.atleast_1d(theta), eta), dtype=np.float64)

    def jacobian_pointwise(self, fields: FieldMap, theta: np.ndarray, eta: Nuisance | None) -> np.ndarray:
        if self.jac_fn is None:
            raise ModelError(f"model {self.name!r} has no analytic Jacobian")
        return np.asarray(self.jac_fn(fields, np.atleast_1d(theta), eta), dtype=np.float64)


class ScoreEvaluator:
    """Adapter exposing a model score as a (q,)-output grid evaluator."""

    def __init__(self, model: MomentModel, theta, eta: Nuisance | None):
        self._model = model
        self._theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        self._eta = eta
        self.size = model.q_dim

    def evaluate(self, fields: FieldMap) -> np.ndarray:
        return self._model.score(fields, self._theta, self._eta)


def evaluate_score(
    model: MomentModel, sample: ClusteredSample | FieldMap, theta, eta: Nuisance | None = None
) -> np.ndarray:
    """Pointwise score over the sample, (q, *dims); non-finite cells raise."""
    fields = sample.fields if isinstance(sample, ClusteredSample) else sample
    vals = model.score(fields, np.atleast_1d(theta), eta)
    if isinstance(sample, ClusteredSample):
        vals = np.broadcast_to(vals, (model.q_dim,) + sample.shape.dims)
    if not np.isfinite(vals).all():
        bad = np.argwhere(~np.isfinite(vals))[:3]
        cells = [tuple(int(x) + 1 for x in b[1:]) for b in bad]
        raise ModelError(f"non-finite score values at cells {cells}")
    return np.ascontiguousarray(vals)


def score_jacobian(
    model: MomentModel,
    sample: ClusteredSample,
    theta,
    eta: Nuisance | None = None,
    *,
    method: str = "auto",
    fd_step: float = 1e-6,
) -> np.ndarray:
    """Empirical Jacobian J_N(theta) = -d/dtheta Ebar_N psi, shape (q, d)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if method == "auto":
        method = "analytic" if model.jac_fn is not None else "fd"
    if method == "analytic":
        jac = model.jacobian_pointwise(sample.fields, theta, eta)
        jac = np.broadcast_to(jac, (model.q_dim, model.d_dim) + sample.shape.dims)
        return -jac.reshape(model.q_dim, model.d_dim, -1).mean(axis=2)
    if method != "fd":
        raise ModelError(f"unknown jacobian method {method!r}")
    out = np.empty((model.q_dim, model.d_dim))
    for j in range(model.d_dim):
        h = fd_step * max(1.0, abs(float(theta[j])))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        up = evaluate_score(model, sample, tp, eta).reshape(model.q_dim, -1).mean(axis=1)
        dn = evaluate_score(model, sample, tm, eta).reshape(model.q_dim, -1).mean(axis=1)
        out[:, j] = (up - dn) / (2.0 * h)
    return -out


# ---------------------------------------------------------------------------
# model zoo
# ---------------------------------------------------------------------------


def location_model(field_name: str = "y") -> MomentModel:
    def score(fields, theta, eta):
        return (np.asarray(fields[field_name], dtype=np.float64) - theta[0])[None]

    def jac(fields, theta, eta):
        y = np.asarray(fields[field_name], dtype=np.float64)
        return -np.ones_like(y)[None, None]

    return MomentModel("location", 1, 1, (), score, jac, holder=(0.0, 1.0))


def linear_iv_model() -> MomentModel:
    def score(fields, theta, eta):
        y = np.asarray(fields["y"], dtype=np.float64)
        d = np.asarray(fields["d"], dtype=np.float64)
        z = np.asarray(fields["z"], dtype=np.float64)
        return ((y - theta[0] * d) * z)[None]

    def jac(fields, theta, eta):
        d = np.asarray(fields["d"], dtype=np.float64)
        z = np.asarray(fields["z"], dtype=np.float64)
        return (-(d * z))[None, None]

    return MomentModel("iv", 1, 1, (), score, jac, holder=(0.0, 1.0))


def plr_model() -> MomentModel:
    """Orthogonal partially-linear score (y - l - theta*(d-m)) * (d-m)."""

    def score(fields, theta, eta):
        y = np.asarray(fields["y"], dtype=np.float64)
        d = np.asarray(fields["d"], dtype=np.float64)
        resid = d - eta.predict("m", fields)
        return ((y - eta.predict("l", fields) - theta[0] * resid) * resid)[None]

    def jac(fields, theta, eta):
        d = np.asarray(fields["d"], dtype=np.float64)
        resid = d - eta.predict("m", fields)
        return (-(resid * resid))[None, None]

    return MomentModel("plr", 1, 1, ("l", "m"), score, jac, holder=(0.0, 1.0))


def plr_nonorth_model() -> MomentModel:
    """Non-orthogonal control score (y - theta*d - g) * d."""

    def score(fields, theta, eta):
        y = np.asarray(fields["y"], dtype=np.float64)
        d = np.asarray(fields["d"], dtype=np.float64)
        return ((y - theta[0] * d - eta.predict("g", fields)) * d)[None]

    def jac(fields, theta, eta):
        d = np.asarray(fields["d"], dtype=np.float64)
        return (-(d * d))[None, None]

    return MomentModel("plr_nonorth", 1, 1, ("g",), score, jac, holder=(0.0, 1.0))


MODEL_BUILDERS: dict[str, Callable[..., MomentModel]] = {
    "location": lambda **_: location_model(),
    "iv": lambda **_: linear_iv_model(),
    "plr": lambda **_: plr_model(),
    "plr_nonorth": lambda **_: plr_nonorth_model(),
}


def _linear_predictor(coefs: np.ndarray) -> Callable[[FieldMap], np.ndarray]:
    def predict(fields: FieldMap) -> np.ndarray:
        total = None
        for c, w in enumerate(coefs):
            if w == 0.0:
                continue
            x = np.asarray(fields[f"x{c + 1}"], dtype=np.float64)
            total = w * x if total is None else total + w * x
        if total is None:
            if coefs.size:
                return np.zeros_like(np.asarray(fields["x1"], dtype=np.float64))
            return np.asarray(0.0)
        return total

    return predict


def plr_oracle_nuisance(params: Mapping) -> Nuisance:
    """True (l0, m0) of the bundled partially linear DGP."""
    g, m, theta0 = plr_coefficients(params)
    return Nuisance(
        {"l": _linear_predictor(theta0 * m + g), "m": _linear_predictor(m)},
        meta={"kind": "oracle"},
    )


def plr_control_oracle_nuisance(params: Mapping) -> Nuisance:
    """True g0 for the non-orthogonal control score."""
    g, _m, _t = plr_coefficients(params)
    return Nuisance({"g": _linear_predictor(g)}, meta={"kind": "oracle"})


def linear_direction(coefs: Sequence[float]) -> Callable[[FieldMap], np.ndarray]:
    """Direction delta(x) = sum_c coefs[c] * x_{c+1} for perturbation tests."""
    return _linear_predictor(np.asarray(coefs, dtype=np.float64))


# ---------------------------------------------------------------------------
# orthogonality check
# ---------------------------------------------------------------------------


def _neville_at_zero(xs: Sequence[float], ys: list[np.ndarray]) -> np.ndarray:
    """Polynomial extrapolation of (xs, ys) to x=0 (xs distinct, ys vectors)."""
    tbl = [y.copy() for y in ys]
    m = len(xs)
    for level in range(1, m):
        for i in range(m - level):
            x0, x1 = xs[i], xs[i + level]
            tbl[i] = (x0 * tbl[i + 1] - x1 * tbl[i]) / (x0 - x1)
    return tbl[0]


@dataclass
class OrthogonalityReport:
    max_abs: float
    per_direction: list[float]
    derivatives: list[np.ndarray]
    steps: tuple[float, ...]
    mode: str
    normalized: bool


def orthogonality_check(
    model: MomentModel,
    spec: DgpSpec,
    theta0,
    eta0: Nuisance,
    directions: Sequence[Mapping[str, Callable[[FieldMap], np.ndarray]]],
    *,
    steps: Sequence[float] = (0.2, 0.1, 0.05),
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
    normalize: bool = True,
) -> OrthogonalityReport:
    """Gateaux derivative of E[psi(X, theta0, eta0 + tau*delta)] at tau = 0.

    Central differences over the step grid, Richardson-extrapolated in h^2;
    reports the max absolute derivative across directions.  Directions are
    normalized to unit population root-mean-square size unless disabled.
    """
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=np.float64))
    steps = tuple(float(h) for h in steps)
    if len(set(steps)) != len(steps) or any(h <= 0 for h in steps):
        raise ModelError("steps must be distinct positive values")
    pop_kw = dict(mode=mode, draws=draws, seed=seed)

    results: list[np.ndarray] = []
    for delta in directions:
        if normalize:
            def sq_norm(fields, _d=delta):
                total = None
                for fn in _d.values():
                    v = np.asarray(fn(fields), dtype=np.float64)
                    total = v * v if total is None else total + v * v
                return total

            rms = math.sqrt(max(float(population_mean(sq_norm, spec, **pop_kw)[0]), 0.0))
            scale = 1.0 / rms if rms > 0 else 1.0
        else:
            scale = 1.0

        def g(tau: float) -> np.ndarray:
            eta_tau = eta0.shifted(delta, tau * scale)
            return population_mean(ScoreEvaluator(model, theta0, eta_tau), spec, **pop_kw)

        diffs = [(g(h) - g(-h)) / (2.0 * h) for h in steps]
        deriv = _neville_at_zero([h * h for h in steps], diffs) if len(steps) > 1 else diffs[0]
        if not np.isfinite(deriv).all():
            raise ModelError("orthogonality extrapolation produced non-finite values")
        results.append(deriv)

    per_dir = [float(np.max(np.abs(d))) for d in results]
    return OrthogonalityReport(
        max_abs=max(per_dir) if per_dir else 0.0,
        per_direction=per_dir,
        derivatives=results,
        steps=steps,
        mode=mode,
        normalized=normalize,
    )


# ---------------------------------------------------------------------------
# oracle variance
# ---------------------------------------------------------------------------


@dataclass
class OracleVariance:
    """Population sandwich pieces at (theta0, eta0) for a given shape."""

    j0: np.ndarray                  # (q, d)
    upsilon: np.ndarray             # (q, q)
    psi0: np.ndarray                # (q, q), sum_k mu_k Var(E[psi | U_{e_k}])
    per_dim: np.ndarray             # (K, q, q), the mu_k-scaled pieces
    mu: tuple[float, ...]           # (n/N_1, ..., n/N_K)
    v: np.ndarray                   # (d, d)
    degenerate: bool
    mode: str


def oracle_V(j0: np.ndarray, upsilon: np.ndarray, psi0: np.ndarray) -> np.ndarray:
    """V = (J'UJ)^{-1} J'U Psi0 U J (J'UJ)^{-1}, symmetrized."""
    j0 = np.atleast_2d(np.asarray(j0, dtype=np.float64))
    ju = j0.T @ upsilon
    bread = np.linalg.inv(ju @ j0)
    v = bread @ ju @ psi0 @ ju.T @ bread.T
    return 0.5 * (v + v.T)


def oracle_psi0(
    model: MomentModel,
    spec: DgpSpec,
    theta0,
    eta0: Nuisance | None,
    *,
    upsilon: np.ndarray | None = None,
    mode: str = "exact",
    draws: int | None = None,
    seed: int | None = None,
    degenerate_tol: float = 1e-12,
) -> OracleVariance:
    """Per-dimension Var(E[psi|U_{e_k}]) scaled by mu_k = n/N_k, plus J_0 and V.

    A degenerate Psi0 (every dimension variance ~ 0) is flagged, not raised:
    it signals failure of the non-degeneracy condition, which the sandwich
    tests treat as the conservative regime.
    """
    K = spec.shape.K
    dims = spec.shape.dims
    n = spec.shape.n_min
    q, d = model.q_dim, model.d_dim
    ev = ScoreEvaluator(model, theta0, eta0)
    per_dim = np.empty((K, q, q))
    degenerate = True
    for k in range(K):
        e_k = tuple(1 if j == k else 0 for j in range(K))
        cm = population_conditional_cov(
            ev, spec, e_k, mode=mode, draws=draws, seed=None if seed is None else seed + k
        )
        if float(np.max(np.abs(cm.cov))) > degenerate_tol:
            degenerate = False
        per_dim[k] = (n / dims[k]) * cm.cov
    psi0 = per_dim.sum(axis=0)
    psi0 = 0.5 * (psi0 + psi0.T)

    theta0 = np.atleast_1d(np.asarray(theta0, dtype=np.float64))
    if model.jac_fn is not None:
        class _JacEval:
            size = q * d

            def evaluate(self, fields):
                jac = model.jacobian_pointwise(fields, theta0, eta0)
                return jac.reshape((q * d,) + jac.shape[2:])

        j0 = -population_mean(_JacEval(), spec, mode=mode, draws=draws, seed=seed).reshape(q, d)
    else:
        j0 = np.empty((q, d))
        for j in range(d):
            h = 1e-6 * max(1.0, abs(float(theta0[j])))
            tp, tm = theta0.copy(), theta0.copy()
            tp[j] += h
            tm[j] -= h
            gp = population_mean(ScoreEvaluator(model, tp, eta0), spec, mode=mode, draws=draws, seed=seed)
            gm = population_mean(ScoreEvaluator(model, tm, eta0), spec, mode=mode, draws=draws, seed=seed)
            j0[:, j] = -(gp - gm) / (2.0 * h)

    ups = np.eye(q) if upsilon is None else np.asarray(upsilon, dtype=np.float64)
    v = oracle_V(j0, ups, psi0)
    return OracleVariance(
        j0=j0,
        upsilon=ups,
        psi0=psi0,
        per_dim=per_dim,
        mu=tuple(n / dd for dd in dims),
        v=v,
        degenerate=degenerate,
        mode=mode,
    )
