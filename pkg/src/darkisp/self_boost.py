"""Self-Boost regularization.

The nonlinear output U is explained by the best global linear map of the
Bayer input I (least squares through the 4x4 Gram matrix I I^T); the linear
stage's pooled matrix is then pulled towards that map row by row with a cosine
distance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateImageWarning, NotSymmetric, ShapeMismatch
from .raw_io import BayerImage, RgbImage
from .tensor import Tensor

DEFAULT_KAPPA_THRESHOLD = 1e10
DEFAULT_RTOL = 1e-12
DEFAULT_LAMBDA = 1e-2
DEFAULT_WARMUP = 10


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, BayerImage):
        return x.planes
    if isinstance(x, RgbImage):
        return x.channels
    return np.asarray(x, dtype=np.float64)


def flatten_pixels(img) -> np.ndarray:
    """C x H x W -> C x (H W)."""
    a = _as_array(img)
    return a.reshape(a.shape[0], -1)


def condition_number(gram: np.ndarray, sym_tol: float = 1e-12) -> float:
    """lambda_max / lambda_min of a symmetric matrix; +inf when lambda_min is not positive."""
    g = np.asarray(gram, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeMismatch(f"condition_number expects a square matrix, got {g.shape}")
    scale = max(np.abs(g).max(initial=0.0), 1.0)
    if np.abs(g - g.T).max(initial=0.0) > sym_tol * scale:
        raise NotSymmetric("Gram matrix is not symmetric")
    eig = np.linalg.eigvalsh(g)
    lmin, lmax = eig[0], eig[-1]
    if lmax <= 0 or lmin <= lmax * g.shape[0] * np.finfo(float).eps:
        return float("inf")
    return float(lmax / lmin)


@dataclass
class PseudoTarget:
    p_tilde: np.ndarray
    kappa: float
    used_pinv: bool
    truncated_rank: int
    degenerate: bool = False
    # right factor R with p_tilde = U_flat @ R; lets the target stay differentiable in U
    right: np.ndarray | None = None


def _right_factor(i_flat: np.ndarray, kappa_threshold: float, rtol: float):
    gram = i_flat @ i_flat.T
    if not np.any(gram):
        return gram, float("inf"), None, True, 0
    kappa = condition_number(gram)
    if kappa <= kappa_threshold:
        try:
            inv = np.linalg.inv(gram)
            return gram, kappa, inv, False, gram.shape[0]
        except np.linalg.LinAlgError:
            pass
    u, s, vt = np.linalg.svd(gram)
    keep = s > rtol * s[0]
    inv = (vt[keep].T / s[keep]) @ u[:, keep].T
    return gram, kappa, inv, True, int(keep.sum())


def solve_pseudo_target(u_img, i_img, kappa_threshold: float = DEFAULT_KAPPA_THRESHOLD,
                        rtol: float = DEFAULT_RTOL) -> PseudoTarget:
    """Least-squares 3x4 map explaining U from I: U I^T (I I^T)^-1.

    Ill-conditioned or singular Gram matrices go through a truncated SVD
    pseudoinverse instead of the direct inverse.
    """
    u = flatten_pixels(u_img)
    i = flatten_pixels(i_img)
    if u.shape[1] != i.shape[1]:
        raise ShapeMismatch(f"U has {u.shape[1]} pixels, I has {i.shape[1]}")
    if i.shape[1] < i.shape[0]:
        raise ShapeMismatch(f"need at least {i.shape[0]} pixels, got {i.shape[1]}")
    gram, kappa, ginv, used_pinv, rank = _right_factor(i, kappa_threshold, rtol)
    if ginv is None:
        warnings.warn("all-zero Bayer input; pseudo-target set to zero", DegenerateImageWarning, stacklevel=2)
        return PseudoTarget(np.zeros((u.shape[0], i.shape[0])), kappa, True, 0, True, np.zeros((i.shape[1], i.shape[0])))
    right = i.T @ ginv
    return PseudoTarget((u @ i.T) @ ginv, kappa, used_pinv, rank, False, right)


def closed_form_optimal(u_star, i_img, kappa_threshold: float = DEFAULT_KAPPA_THRESHOLD,
                        rtol: float = DEFAULT_RTOL) -> np.ndarray:
    """Best linear 3x4 map from a reference image U* (same computation as the pseudo-target)."""
    return solve_pseudo_target(u_star, i_img, kappa_threshold, rtol).p_tilde


def pseudo_target_tensor(u: Tensor, target: PseudoTarget) -> Tensor:
    """P~ as a differentiable function of U (I is data, so the right factor is constant)."""
    c = u.shape[0]
    flat = T.reshape(u, (c, u.size // c))
    return T.matmul(flat, Tensor(target.right))


def zero_rows(a, b) -> list[int]:
    a, b = _as_array(a), _as_array(b)
    return [r for r in range(a.shape[0]) if not np.any(a[r]) or not np.any(b[r])]


def sb_loss(effective_pooled: Tensor, p_tilde) -> Tensor:
    """Sum over rows of (1 - cos(p'_i, p~_i)).

    A zero row on either side has cosine 0 and so contributes exactly 1; see
    :func:`zero_rows` to detect it.
    """
    target = p_tilde if isinstance(p_tilde, Tensor) else Tensor(p_tilde)
    if effective_pooled.shape != target.shape:
        raise ShapeMismatch(f"sb_loss: {effective_pooled.shape} vs {target.shape}")
    cos = T.cosine_rows(effective_pooled, target)
    return T.sum(1.0 - cos)


@dataclass
class LossReport:
    l_sb: float | Tensor
    l_task: float | Tensor
    total: float | Tensor
    lam: float
    active: bool
    zero_rows: tuple[int, ...] = ()

    def as_floats(self) -> dict:
        def f(v):
            return float(v.data) if isinstance(v, Tensor) else float(v)

        return {"l_sb": f(self.l_sb), "l_task": f(self.l_task), "total": f(self.total),
                "lambda": self.lam, "active": self.active}


def compound_loss(l_task, l_sb, lam: float = DEFAULT_LAMBDA, epoch: int = 0,
                  warmup: int = DEFAULT_WARMUP) -> LossReport:
    """total = l_task + lam * l_sb once epoch >= warmup, else l_task itself.

    Works on floats or Tensors; with the gate closed (or lam == 0) ``total`` is
    the very same object as ``l_task``.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    active = epoch >= warmup
    if active and lam != 0:
        total = l_task + l_sb * lam
    else:
        total = l_task
    return LossReport(l_sb, l_task, total, lam, active)


@dataclass
class Diagnostics:
    residual_mean: float
    residual_grad_norm: float


def diagnostics(u_img, i_img, effective_pooled) -> Diagnostics:
    """Mean |U - P' I| and the norm of d||U - P' I||^2 / dP' = -2 (U - P' I) I^T."""
    u = flatten_pixels(u_img)
    i = flatten_pixels(i_img)
    p = _as_array(effective_pooled)
    r = u - p @ i
    return Diagnostics(float(np.abs(r).mean()), float(np.linalg.norm(-2.0 * r @ i.T)))
