"""Multiway cluster-robust variance: middle matrices, sandwich, intervals.

The middle matrix sums per-dimension terms

    Psi_hat_{N,k} = (n / N^2) * sum_{i,j : i_k = j_k} psi_i psi_j'

computed in O(N q^2) from per-cluster sums S_c = sum_{i: i_k = c} psi_i, so
that Psi_hat_{N,k} = (n/N^2) sum_c S_c S_c'  — positive semi-definite by
construction.  The inclusion-exclusion variant removes double counting over
joint clusters and is *not* guaranteed PSD; its eigenvalues are reported.
No small-sample (Bessel-style) correction is applied to the cluster sums.

Scaling uses n = min_k N_k throughout; standard errors are sqrt(diag(V)/n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from mwdml.arrays import Shape, mask_str, nonzero_masks
from mwdml.models import oracle_V as _sandwich


class VarianceError(ValueError):
    pass


def _scores_matrix(scores: np.ndarray, shape: Shape) -> np.ndarray:
    """Validate and reshape scores to (q, *dims)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == len(shape.dims):  # scalar score given without q axis
        scores = scores[None]
    if scores.shape[1:] != shape.dims:
        raise VarianceError(
            f"scores shaped {scores.shape} do not cover one vector per cell of {shape.dims}"
        )
    return scores


def _joint_cluster_sums(scores: np.ndarray, e: tuple[int, ...]) -> np.ndarray:
    """S_c over joint clusters c in the supp(e) sub-lattice, shape (q, n_clusters)."""
    drop = tuple(k + 1 for k, bit in enumerate(e) if not bit)
    s = scores.sum(axis=drop) if drop else scores
    return s.reshape(scores.shape[0], -1)


def psi_hat_k(scores: np.ndarray, shape: Shape, k: int) -> np.ndarray:
    """(n/N^2) sum over pairs sharing the k-th index, via per-cluster sums."""
    if not 0 <= k < shape.K:
        raise VarianceError(f"dimension index {k} out of range for K={shape.K}")
    scores = _scores_matrix(scores, shape)
    e = tuple(1 if j == k else 0 for j in range(shape.K))
    s = _joint_cluster_sums(scores, e)
    out = (shape.n_min / shape.n_cells**2) * (s @ s.T)
    return 0.5 * (out + out.T)


def psi_hat(scores: np.ndarray, shape: Shape) -> np.ndarray:
    """Psi_hat_N = sum_k Psi_hat_{N,k}; PSD as a sum of PSD terms."""
    total = sum(psi_hat_k(scores, shape, k) for k in range(shape.K))
    return 0.5 * (total + total.T)


def cgm_psi(scores: np.ndarray, shape: Shape) -> np.ndarray:
    """Inclusion-exclusion middle matrix sum_e (-1)^{|e|+1} Psi_tilde_{N,e}.

    Each Psi_tilde_{N,e} aggregates cells sharing *all* indices in supp(e).
    Not guaranteed PSD; callers should inspect eigenvalues.
    """
    scores = _scores_matrix(scores, shape)
    q = scores.shape[0]
    total = np.zeros((q, q))
    for e in nonzero_masks(shape.K):
        s = _joint_cluster_sums(scores, e)
        sign = -1.0 if sum(e) % 2 == 0 else 1.0
        total += sign * (s @ s.T)
    total *= shape.n_min / shape.n_cells**2
    return 0.5 * (total + total.T)


@dataclass
class ClusterVarianceResult:
    shape: Shape
    per_dim: np.ndarray            # (K, q, q)
    psi: np.ndarray                # (q, q) additive total
    cgm: np.ndarray | None         # (q, q) inclusion-exclusion total, if requested
    middle_used: str               # "psihat" | "cgm"
    v: np.ndarray                  # (d, d)
    se: np.ndarray                 # (d,)
    eig_psi: np.ndarray            # eigenvalues of the additive total
    eig_cgm: np.ndarray | None

    @property
    def n(self) -> int:
        return self.shape.n_min


def v_hat(fit, psi: np.ndarray, shape: Shape) -> np.ndarray:
    """Sandwich V = (J'UJ)^{-1} J'U Psi U J (J'UJ)^{-1} from a solved fit."""
    j = np.atleast_2d(np.asarray(fit.j_hat, dtype=np.float64))
    if np.linalg.matrix_rank(j) < j.shape[1]:
        raise VarianceError("rank-deficient Jacobian at the solution")
    return _sandwich(j, np.asarray(fit.upsilon, dtype=np.float64), psi)


def standard_errors(v: np.ndarray, shape: Shape) -> np.ndarray:
    diag = np.clip(np.diag(np.atleast_2d(v)), 0.0, None)
    return np.sqrt(diag / shape.n_min)


def confidence_interval(theta: np.ndarray, se: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric normal interval theta_j +/- z_{(1+level)/2} * se_j."""
    if not 0.0 < level < 1.0:
        raise VarianceError(f"level must lie in (0,1), got {level}")
    z = float(ndtri(0.5 * (1.0 + level)))
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    se = np.atleast_1d(np.asarray(se, dtype=np.float64))
    return theta - z * se, theta + z * se


def variance_report(fit, scores: np.ndarray, shape: Shape, *, mode: str = "psihat") -> ClusterVarianceResult:
    """Full variance pipeline at given per-cell scores (usually psi(theta_hat))."""
    if mode not in ("psihat", "cgm"):
        raise VarianceError(f"unknown variance mode {mode!r}")
    scores = _scores_matrix(scores, shape)
    q = scores.shape[0]
    per_dim = np.empty((shape.K, q, q))
    for k in range(shape.K):
        per_dim[k] = psi_hat_k(scores, shape, k)
        min_eig = float(np.linalg.eigvalsh(per_dim[k]).min())
        if min_eig < -1e-10:
            raise VarianceError(
                f"per-dimension middle matrix for k={k} lost PSD: min eigenvalue {min_eig}"
            )
    psi = per_dim.sum(axis=0)
    psi = 0.5 * (psi + psi.T)
    cgm = cgm_psi(scores, shape) if mode == "cgm" else None
    middle = cgm if mode == "cgm" else psi
    v = v_hat(fit, middle, shape)
    return ClusterVarianceResult(
        shape=shape,
        per_dim=per_dim,
        psi=psi,
        cgm=cgm,
        middle_used=mode,
        v=v,
        se=standard_errors(v, shape),
        eig_psi=np.linalg.eigvalsh(psi),
        eig_cgm=None if cgm is None else np.linalg.eigvalsh(cgm),
    )


def mask_cluster_terms(scores: np.ndarray, shape: Shape) -> dict[str, np.ndarray]:
    """Per-mask Psi_tilde_{N,e} pieces of the inclusion-exclusion sum (diagnostic)."""
    scores = _scores_matrix(scores, shape)
    out: dict[str, np.ndarray] = {}
    for e in nonzero_masks(shape.K):
        s = _joint_cluster_sums(scores, e)
        m = (shape.n_min / shape.n_cells**2) * (s @ s.T)
        out[mask_str(e)] = 0.5 * (m + m.T)
    return out
