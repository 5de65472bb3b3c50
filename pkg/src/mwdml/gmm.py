"""Full-sample debiased GMM: moments, weighting, and FOC solution.

No cross-fitting anywhere: nuisances are fitted on the same sample the
moments average over.  The estimator minimizes psi_bar(theta)' W psi_bar(theta)
via damped Gauss-Newton on the quadratic form; the reported solution must
satisfy ||J_N(theta)' W psi_bar(theta)|| <= tol.  Default weighting is
two-step: an identity-weighted first pass supplies theta_init, then
W = (Psi_hat(theta_init) + ridge*I)^{-1}.  The parameter space is an optional
config box; a solution pinned to the box boundary is flagged (interiority is
an assumption of the asymptotics, so the harness discards such draws with a
count rather than reporting them as estimates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from mwdml.arrays import ClusteredSample
from mwdml.models import MomentModel, Nuisance, evaluate_score, score_jacobian
from mwdml.variance import psi_hat

_BOUNDARY_RTOL = 1e-8


class GmmError(ValueError):
    pass


@dataclass(frozen=True)
class WeightingSpec:
    mode: str = "two-step"          # "identity" | "two-step"
    ridge: float = 0.0
    theta_init: tuple[float, ...] | None = None  # None -> identity-weighted first step

    def __post_init__(self):
        if self.mode not in ("identity", "two-step"):
            raise GmmError(f"unknown weighting mode {self.mode!r}")
        if self.ridge < 0:
            raise GmmError(f"ridge must be >= 0, got {self.ridge}")


@dataclass(frozen=True)
class GmmSettings:
    theta_start: tuple[float, ...]
    box: tuple[tuple[float, float], ...] | None = None
    weighting: WeightingSpec = field(default_factory=WeightingSpec)
    tol: float = 1e-10
    max_iter: int = 100
    max_halvings: int = 30

    def __post_init__(self):
        if self.box is not None:
            if len(self.box) != len(self.theta_start):
                raise GmmError("box must give one (lo, hi) pair per parameter")
            for lo, hi in self.box:
                if not lo < hi:
                    raise GmmError(f"empty box side ({lo}, {hi})")


@dataclass
class GmmFit:
    theta: np.ndarray          # (d,)
    j_hat: np.ndarray          # (q, d) at theta
    upsilon: np.ndarray        # (q, q)
    psi_bar: np.ndarray        # (q,) at theta
    foc_norm: float
    objective: float
    n_iter: int
    converged: bool
    boundary: bool
    rank_deficient: bool
    trace: list[tuple[int, float, float]]   # (iteration, foc_norm, objective)
    meta: dict


def empirical_moment(
    model: MomentModel, sample: ClusteredSample, theta, eta: Nuisance | None = None
) -> np.ndarray:
    """psi_bar_N(theta) = N^{-1} sum over cells of psi(X_i, theta, eta)."""
    return evaluate_score(model, sample, theta, eta).reshape(model.q_dim, -1).mean(axis=1)


def weighting_matrix(
    model: MomentModel,
    sample: ClusteredSample,
    theta_init,
    eta: Nuisance | None,
    spec: WeightingSpec,
) -> np.ndarray:
    """Upsilon_hat: identity, or the ridge-stabilized inverse of Psi_hat(theta_init)."""
    q = model.q_dim
    if spec.mode == "identity":
        return np.eye(q)
    scores = evaluate_score(model, sample, theta_init, eta)
    middle = psi_hat(scores, sample.shape) + spec.ridge * np.eye(q)
    eigs = np.linalg.eigvalsh(middle)
    if eigs.min() <= 0 or eigs.max() / eigs.min() > 1e14:
        raise GmmError(
            f"cluster-robust weighting target is singular (eigenvalues {eigs}); "
            "increase the ridge"
        )
    w = np.linalg.inv(middle)
    return 0.5 * (w + w.T)


def _clip_to_box(theta: np.ndarray, box) -> np.ndarray:
    if box is None:
        return theta
    lo = np.asarray([b[0] for b in box])
    hi = np.asarray([b[1] for b in box])
    return np.clip(theta, lo, hi)


def _on_boundary(theta: np.ndarray, box) -> bool:
    if box is None:
        return False
    for t, (lo, hi) in zip(theta, box):
        tol = _BOUNDARY_RTOL * max(1.0, hi - lo)
        if t - lo <= tol or hi - t <= tol:
            return True
    return False


def _foc(model, sample, eta, w, theta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(g, j, psi) with g = J' W psi_bar at theta."""
    psi = empirical_moment(model, sample, theta, eta)
    j = score_jacobian(model, sample, theta, eta)
    return j.T @ w @ psi, j, psi


def _bracket_root_1d(fn, center: float, box) -> float | None:
    """Scan a geometric grid around ``center`` for a sign change of fn, then brentq."""
    lo, hi = (-np.inf, np.inf) if box is None else box[0]
    h0 = max(1e-3, 1e-3 * abs(center))
    pts = [center]
    for i in range(42):
        step = h0 * 2.0**i
        pts.extend((center - step, center + step))
    pts = sorted(p for p in pts if lo <= p <= hi) if box is not None else sorted(pts)
    vals = []
    for p in pts:
        try:
            vals.append(float(fn(p)))
        except FloatingPointError:
            vals.append(math.nan)
    for (a, fa), (b, fb) in zip(zip(pts, vals), zip(pts[1:], vals[1:])):
        if math.isfinite(fa) and math.isfinite(fb) and fa * fb < 0:
            return float(brentq(fn, a, b, xtol=1e-13, maxiter=200))
    return None


def _solve_newton(model, sample, eta, w, theta0, settings: GmmSettings):
    theta = _clip_to_box(np.asarray(theta0, dtype=np.float64).copy(), settings.box)
    trace: list[tuple[int, float, float]] = []
    converged = False
    it = 0
    for it in range(1, settings.max_iter + 1):
        g, j, psi = _foc(model, sample, eta, w, theta)
        obj = float(psi @ w @ psi)
        foc_norm = float(np.linalg.norm(g))
        trace.append((it, foc_norm, obj))
        if foc_norm <= settings.tol:
            converged = True
            break
        h = j.T @ w @ j
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        # damped update: halve on objective increase
        moved = False
        for _ in range(settings.max_halvings + 1):
            cand = _clip_to_box(theta + step, settings.box)
            psi_c = empirical_moment(model, sample, cand, eta)
            if float(psi_c @ w @ psi_c) <= obj + 1e-15 * (1.0 + abs(obj)):
                if np.allclose(cand, theta, rtol=0.0, atol=1e-15):
                    break
                theta = cand
                moved = True
                break
            step = 0.5 * step
        if not moved:
            break  # stalled
    g, j, psi = _foc(model, sample, eta, w, theta)
    foc_norm = float(np.linalg.norm(g))
    if foc_norm <= settings.tol:
        converged = True
    if not converged and theta.shape[0] == 1:
        # bracketing fallback on the scalar FOC
        def g1(t: float) -> float:
            return float(_foc(model, sample, eta, w, np.asarray([t]))[0][0])

        root = _bracket_root_1d(g1, float(theta[0]), settings.box)
        if root is not None:
            cand = np.asarray([root])
            g, j, psi = _foc(model, sample, eta, w, cand)
            if float(np.linalg.norm(g)) < foc_norm:
                theta, foc_norm = cand, float(np.linalg.norm(g))
                trace.append((it + 1, foc_norm, float(psi @ w @ psi)))
        converged = foc_norm <= settings.tol
    return theta, g, j, psi, foc_norm, it, converged, trace


def solve_gmm(
    model: MomentModel,
    sample: ClusteredSample,
    eta: Nuisance | None,
    settings: GmmSettings,
) -> GmmFit:
    """Solve the FOC J_N' Upsilon psi_bar = 0 with the configured weighting."""
    if len(settings.theta_start) != model.d_dim:
        raise GmmError(
            f"theta_start has {len(settings.theta_start)} entries, model expects {model.d_dim}"
        )
    wspec = settings.weighting
    meta = {"weighting": wspec.mode, "ridge": wspec.ridge}
    if wspec.mode == "identity":
        w = np.eye(model.q_dim)
        start = np.asarray(settings.theta_start, dtype=np.float64)
        meta["theta_init"] = "config"
    else:
        if wspec.theta_init is not None:
            init = np.asarray(wspec.theta_init, dtype=np.float64)
            meta["theta_init"] = "config"
        else:
            first = _solve_newton(
                model, sample, eta, np.eye(model.q_dim), settings.theta_start, settings
            )
            init = first[0]
            meta["theta_init"] = "first-step-identity"
            if not first[6]:
                meta["first_step_converged"] = False
        w = weighting_matrix(model, sample, init, eta, wspec)
        start = init
    theta, g, j, psi, foc_norm, n_iter, converged, trace = _solve_newton(
        model, sample, eta, w, start, settings
    )
    return GmmFit(
        theta=theta,
        j_hat=j,
        upsilon=w,
        psi_bar=psi,
        foc_norm=foc_norm,
        objective=float(psi @ w @ psi),
        n_iter=n_iter,
        converged=converged,
        boundary=_on_boundary(theta, settings.box),
        rank_deficient=bool(np.linalg.matrix_rank(j) < model.d_dim),
        trace=trace,
        meta=meta,
    )
