"""First-stage learners and complexity/rate calculators.

Two nuisance learners are bundled, both deliberately small and deterministic:

* an l1-penalized generalized linear fit (identity or logistic link) driven
  by cyclic coordinate descent with soft-thresholding, columns standardized
  internally and the intercept left unpenalized;
* an axis-aligned regression tree grown best-first by variance reduction.

The calculators turn a learner's structural parameters into the (A_n, v_n)
complexity pair of its realized function class, and evaluate the two-branch
rate rho_{n,k} used by the maximal-inequality reports.  Penalty selection is
not prescribed by the estimation theory; the default here is the quantile
rule lambda = sd(target) * Phi^{-1}(1 - 1/n_max) / sqrt(n_cells), chosen
for determinism and recorded on every fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri

from mwdml import _backend
from mwdml.arrays import ClusteredSample, Shape
from mwdml.bounds import VcDecl
from mwdml.entropy import vc_threshold_floor

_MIN_IRLS_WEIGHT = 1e-6


class LearnerError(ValueError):
    pass


# ---------------------------------------------------------------------------
# l1-penalized GLM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LassoSpec:
    penalty: float
    link: str = "identity"
    max_iter: int = 1000
    tol: float = 1e-8

    def __post_init__(self):
        if not (self.penalty >= 0.0):
            raise LearnerError(f"penalty must be >= 0, got {self.penalty}")
        if self.link not in ("identity", "logistic"):
            raise LearnerError(f"unknown link {self.link!r}")


@dataclass
class LassoFit:
    spec: LassoSpec
    intercept: float
    coef: np.ndarray
    n_sweeps: int
    converged: bool
    objective: np.ndarray  # per-sweep penalized objective (outer loop for IRLS)

    def predict(self, X: np.ndarray) -> np.ndarray:
        eta = self.intercept + np.asarray(X, dtype=np.float64) @ self.coef
        return expit(eta) if self.spec.link == "logistic" else eta

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=np.float64) @ self.coef

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coef != 0.0)


def default_penalty(target: np.ndarray | float, shape: Shape) -> float:
    """Quantile-rule penalty: sd(target) * Phi^{-1}(1 - 1/n_max) / sqrt(n_cells)."""
    sd = float(target) if np.isscalar(target) else float(np.std(np.asarray(target, dtype=np.float64)))
    if sd < 0:
        raise LearnerError("target scale must be nonnegative")
    return sd * float(ndtri(1.0 - 1.0 / shape.n_max)) / math.sqrt(shape.n_cells)


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    return (X - mu) / safe, mu, sd


def fit_lasso(
    spec: LassoSpec,
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: np.ndarray | None = None,
) -> LassoFit:
    """Coordinate-descent l1 fit; logistic link runs IRLS around the same core."""
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64).reshape(-1))
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise LearnerError(f"feature/target shape mismatch: {X.shape} vs {y.shape}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise LearnerError("non-finite values in learner inputs")
    n, p = X.shape
    w = (
        np.ones(n)
        if sample_weight is None
        else np.ascontiguousarray(np.asarray(sample_weight, dtype=np.float64))
    )
    Xs, mu, sd = _standardize(X)
    Xs = np.ascontiguousarray(Xs)
    scale = np.where(sd > 0, sd, 1.0)

    if spec.link == "identity":
        b0, beta_s, sweeps, ok, trace = _backend.lasso_cd(
            Xs, y, w, spec.penalty, spec.tol, spec.max_iter
        )
        beta = beta_s / scale
        beta[sd == 0] = 0.0
        return LassoFit(
            spec=spec,
            intercept=float(b0 - float(mu @ beta)),
            coef=beta,
            n_sweeps=int(sweeps),
            converged=bool(ok),
            objective=np.asarray(trace, dtype=np.float64),
        )

    # logistic: iteratively reweighted least squares over the gaussian core
    ybar = min(max(float(y.mean()), 1e-6), 1.0 - 1e-6)
    b0 = math.log(ybar / (1.0 - ybar))
    beta_s = np.zeros(p)
    trace = []
    converged = False
    total_sweeps = 0
    for _ in range(spec.max_iter):
        eta = b0 + Xs @ beta_s
        probs = expit(eta)
        irls_w = np.maximum(probs * (1.0 - probs), _MIN_IRLS_WEIGHT) * w
        z = eta + (y - probs) / np.maximum(probs * (1.0 - probs), _MIN_IRLS_WEIGHT)
        nb0, nbeta, sweeps, _ok, _tr = _backend.lasso_cd(
            Xs, np.ascontiguousarray(z), np.ascontiguousarray(irls_w),
            spec.penalty, spec.tol, spec.max_iter,
        )
        total_sweeps += int(sweeps)
        nll = -float(np.mean(w * (y * eta - np.logaddexp(0.0, eta)))) / max(float(w.mean()), 1e-300)
        trace.append(nll + spec.penalty * float(np.abs(nbeta).sum()))
        delta = max(abs(nb0 - b0), float(np.max(np.abs(nbeta - beta_s))) if p else 0.0)
        b0, beta_s = float(nb0), nbeta
        if delta < spec.tol:
            converged = True
            break
    beta = beta_s / scale
    beta[sd == 0] = 0.0
    return LassoFit(
        spec=spec,
        intercept=float(b0 - float(mu @ beta)),
        coef=beta,
        n_sweeps=total_sweeps,
        converged=converged,
        objective=np.asarray(trace, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# regression tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeSpec:
    max_leaves: int
    min_leaf: int = 1

    def __post_init__(self):
        if self.max_leaves < 1:
            raise LearnerError(f"max_leaves must be >= 1, got {self.max_leaves}")
        if self.min_leaf < 1:
            raise LearnerError(f"min_leaf must be >= 1, got {self.min_leaf}")


@dataclass
class TreeFit:
    spec: TreeSpec
    feature: np.ndarray    # (n_nodes,), -1 on leaves
    threshold: np.ndarray  # (n_nodes,), nan on leaves
    children: np.ndarray   # (n_nodes, 2), -1 on leaves
    value: np.ndarray      # (n_nodes,), leaf/interior means

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        depths = np.zeros(self.feature.shape[0], dtype=np.int64)
        for node in range(self.feature.shape[0]):
            if self.feature[node] >= 0:
                for child in self.children[node]:
                    depths[child] = depths[node] + 1
        return int(depths.max()) if depths.size else 0

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        out = np.empty(X.shape[0])
        for i in range(X.shape[0]):
            node = 0
            while self.feature[node] >= 0:
                go_left = X[i, self.feature[node]] <= self.threshold[node]
                node = self.children[node, 0 if go_left else 1]
            out[i] = self.value[node]
        return out


def _best_split(X: np.ndarray, y: np.ndarray, rows: np.ndarray, min_leaf: int):
    """Best (gain, feature, threshold, left_rows, right_rows) over features; None if no valid split."""
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[rows, j], kind="stable")
        xs = np.ascontiguousarray(X[rows[order], j])
        ys = np.ascontiguousarray(y[rows[order]])
        gain, pos = _backend.split_scan(xs, ys, min_leaf)
        if pos < 0 or not (gain > 1e-12):
            continue
        if best is None or gain > best[0] + 1e-15:
            thr = 0.5 * (xs[pos - 1] + xs[pos])
            best = (float(gain), j, float(thr), rows[order[:pos]], rows[order[pos:]])
    return best


def fit_tree(spec: TreeSpec, X: np.ndarray, y: np.ndarray) -> TreeFit:
    """Best-first CART greedy on variance reduction; deterministic tie-breaks
    (lowest feature index, then earliest-created leaf)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise LearnerError(f"feature/target shape mismatch: {X.shape} vs {y.shape}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise LearnerError("non-finite values in learner inputs")

    feature = [-1]
    threshold = [math.nan]
    children = [[-1, -1]]
    value = [float(y.mean())]
    # open leaves: (node_id, rows, cached best split or None)
    frontier = [(0, np.arange(y.shape[0]), _best_split(X, y, np.arange(y.shape[0]), spec.min_leaf))]
    n_leaves = 1
    while n_leaves < spec.max_leaves:
        pick = -1
        for idx, (_nid, _rows, cand) in enumerate(frontier):
            if cand is None:
                continue
            if pick < 0 or cand[0] > frontier[pick][2][0] + 1e-15:
                pick = idx
        if pick < 0:
            break
        nid, _rows, (gain, j, thr, lrows, rrows) = frontier.pop(pick)
        lid, rid = len(feature), len(feature) + 1
        feature[nid] = j
        threshold[nid] = thr
        children[nid] = [lid, rid]
        for rows_side in (lrows, rrows):
            feature.append(-1)
            threshold.append(math.nan)
            children.append([-1, -1])
            value.append(float(y[rows_side].mean()))
            frontier.append((len(feature) - 1, rows_side, _best_split(X, y, rows_side, spec.min_leaf)))
        n_leaves += 1
    return TreeFit(
        spec=spec,
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        children=np.asarray(children, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# complexity and rate calculators
# ---------------------------------------------------------------------------


def vc_characteristics(
    case: str,
    *,
    K: int,
    C: float = 1.0,
    s: int | None = None,
    p: int | None = None,
    L: int | None = None,
    W: int | None = None,
    U: float | None = None,
) -> VcDecl:
    """(A_n, v_n) of the realized learner class, A_n floored at e^{2(K-1)/16} v e.

    glm:  v = s,              A = C*e*p/s
    tree: v = 2*C*L*log(2Lp), A = C
    dnn:  v = 2*C*L*W*log(pU), A = C
    """
    if C <= 0:
        raise LearnerError(f"C must be positive, got {C}")
    floor = vc_threshold_floor(K)
    if case == "glm":
        if s is None or p is None or s < 1 or p < 1:
            raise LearnerError("glm case needs sparsity s >= 1 and dimension p >= 1")
        return VcDecl(A=max(C * math.e * p / s, floor), v=float(s))
    if case == "tree":
        if L is None or p is None or L < 1 or p < 1:
            raise LearnerError("tree case needs leaves L >= 1 and dimension p >= 1")
        return VcDecl(A=max(C, floor), v=2.0 * C * L * math.log(2.0 * L * p))
    if case == "dnn":
        if L is None or W is None or p is None or U is None or min(L, W, p) < 1 or U <= 1:
            raise LearnerError("dnn case needs depth L, width W, dimension p >= 1 and U > 1")
        return VcDecl(A=max(C, floor), v=2.0 * C * L * W * math.log(p * U))
    raise LearnerError(f"unknown learner case {case!r}")


@dataclass(frozen=True)
class RateInputs:
    v: float
    A: float
    nbar: int
    n: int
    envelope_norm: float
    q: float
    k: int

    def __post_init__(self):
        if self.A < math.e - 1e-12:
            raise LearnerError(f"A must be >= e, got {self.A}")
        if self.v < 1.0:
            raise LearnerError(f"v must be >= 1, got {self.v}")
        if not (self.q > 2.0):
            raise LearnerError(f"moment order q must exceed 2, got {self.q}")
        if self.k < 1:
            raise LearnerError(f"interaction order k must be >= 1, got {self.k}")
        if self.n < 1 or self.nbar < 1:
            raise LearnerError("index sizes must be positive")
        if self.envelope_norm < 0:
            raise LearnerError("envelope norm must be nonnegative")


@dataclass(frozen=True)
class RhoRate:
    rho: float
    branch_variance: float
    branch_envelope: float
    active: str
    log_factor: float  # v * log(A v nbar)


def rho_rate(inputs: RateInputs) -> RhoRate:
    """rho_{n,k} = max{ (v log(A v nbar)/n)^{k/2},
                        (||F|| v log(A v nbar) / n^{1/2 - 1/q})^k }."""
    lf = inputs.v * math.log(max(inputs.A, inputs.nbar))
    b1 = (lf / inputs.n) ** (inputs.k / 2.0)
    b2 = (inputs.envelope_norm * lf / inputs.n ** (0.5 - 1.0 / inputs.q)) ** inputs.k
    return RhoRate(
        rho=max(b1, b2),
        branch_variance=b1,
        branch_envelope=b2,
        active="variance" if b1 >= b2 else "envelope",
        log_factor=lf,
    )


# ---------------------------------------------------------------------------
# sample-level nuisance fitting for the partially linear design
# ---------------------------------------------------------------------------


def plr_feature_names(sample: ClusteredSample) -> list[str]:
    names = sorted(
        (n for n in sample.fields if n.startswith("x") and n[1:].isdigit()),
        key=lambda n: int(n[1:]),
    )
    if not names:
        raise LearnerError("sample has no x1..xp covariate fields")
    return names


def fit_plr_nuisance(
    sample: ClusteredSample,
    *,
    penalty: float | None = None,
    max_iter: int = 2000,
    tol: float = 1e-9,
):
    """Lasso fits of E[y|x] and E[d|x] on the realized cells.

    Returns a Nuisance with components ``l`` and ``m`` plus the two fits.
    """
    from mwdml.models import Nuisance  # local import: models does not need learners

    names = plr_feature_names(sample)
    X = sample.feature_matrix(names)
    fits = {}
    for comp, target in (("l", "y"), ("m", "d")):
        yv = sample.flat(target)
        lam = default_penalty(yv, sample.shape) if penalty is None else penalty
        fits[comp] = fit_lasso(LassoSpec(penalty=lam, max_iter=max_iter, tol=tol), X, yv)

    def _predictor(fit: LassoFit):
        def predict(fields):
            pred = fit.intercept
            for j, name in enumerate(names):
                if fit.coef[j] != 0.0:
                    pred = pred + fit.coef[j] * np.asarray(fields[name], dtype=np.float64)
            return np.asarray(pred, dtype=np.float64)

        return predict

    eta = Nuisance(
        {comp: _predictor(fit) for comp, fit in fits.items()},
        meta={
            "kind": "lasso",
            "penalty": {comp: fit.spec.penalty for comp, fit in fits.items()},
            "support": {comp: fit.support.tolist() for comp, fit in fits.items()},
        },
    )
    return eta, fits
