"""Training losses with analytic gradients.

Every loss returns its scalar value followed by the gradients with respect to
its array inputs. Computation runs in float64 regardless of input dtype;
gradients are cast back to the input dtype.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from dinspoof.errors import DataError

log = logging.getLogger(__name__)

BONAFIDE, TTS, VC = 0, 1, 2
GROUP_NAMES = {"bonafide": BONAFIDE, "TTS": TTS, "VC": VC}

# number of angles clamped into [0, pi] by phi(); diagnostic only
phi_clamp_count = 0


@dataclass
class AngularMarginParams:
    m: int = 4
    s: float = 30.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"margin m must be a positive integer, got {self.m}")
        if self.s <= 0:
            raise ValueError("scale s must be positive")
        self.m = int(self.m)


@dataclass
class ContrastiveParams:
    tau: float = 0.01
    include_bonafide: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.4
    gamma: float = 0.4

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class CenterState:
    c: np.ndarray
    last_refresh_epoch: int = -1
    refresh_interval: int = 5
    mode: str = "hybrid"  # "hybrid": per-batch mean between global refreshes; "global": refreshes only
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if self.mode not in ("hybrid", "global"):
            raise ValueError(f"unknown center mode {self.mode!r}")


# --- angular margin ------------------------------------------------------

def _chebyshev(x: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """T_m(x) = cos(m*arccos x) and its derivative m*U_{m-1}(x)."""
    t_prev, t = np.ones_like(x), x.copy()
    u_prev, u = np.zeros_like(x), np.ones_like(x)  # U_{-1}, U_0
    if m == 0:
        return t_prev, np.zeros_like(x)
    for _ in range(m - 1):
        t_prev, t = t, 2 * x * t - t_prev
        u_prev, u = u, 2 * x * u - u_prev
    return t, m * u


def _margin_k(theta: np.ndarray, m: int) -> np.ndarray:
    return np.clip(np.floor(theta * m / math.pi), 0, m - 1)


def phi(theta, m: int):
    """(-1)^k cos(m theta) - 2k with k = floor(m theta / pi) clamped to [0, m-1]."""
    global phi_clamp_count
    theta = np.asarray(theta, dtype=np.float64)
    outside = (theta < 0) | (theta > math.pi)
    if np.any(outside):
        phi_clamp_count += int(np.count_nonzero(outside))
        theta = np.clip(theta, 0.0, math.pi)
    k = _margin_k(theta, m)
    return np.where(k % 2 == 0, 1.0, -1.0) * np.cos(m * theta) - 2 * k


def _normalize_rows(a: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError(f"degenerate embedding: zero-norm row in {what}")
    return a / norms, norms


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    return (d_unit - unit * np.sum(unit * d_unit, axis=1, keepdims=True)) / norms


def a_softmax_loss(Y: np.ndarray, labels, W: np.ndarray, p: AngularMarginParams | None = None):
    """Angular-margin softmax on cosine similarities to class weights.

    ``W`` is (d_y, n_classes); its columns and the rows of ``Y`` are normalized
    internally. Returns (loss, dY, dW).
    """
    p = p or AngularMarginParams()
    dtype_y, dtype_w = Y.dtype, W.dtype
    Y = np.asarray(Y, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, n_cls = Y.shape[0], W.shape[1]
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= n_cls:
        raise DataError(f"labels must be {n} ints in [0, {n_cls})")
    yhat, ynorm = _normalize_rows(Y, "Y")
    what, wnorm = _normalize_rows(W.T, "class weights")
    cos = np.clip(yhat @ what.T, -1.0, 1.0)
    rows = np.arange(n)
    cos_c = cos[rows, labels]
    theta_c = np.arccos(cos_c)
    k = _margin_k(theta_c, p.m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    t_m, dt_m = _chebyshev(cos_c, p.m)
    phi_c = sign * t_m - 2 * k

    logits = p.s * cos
    logits[rows, labels] = p.s * phi_c
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[rows, labels]))

    dlogits = np.exp(logits - lse[:, None])
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    dcos = p.s * dlogits
    dcos[rows, labels] = p.s * dlogits[rows, labels] * sign * dt_m
    d_yhat = dcos @ what
    d_what = dcos.T @ yhat
    dY = _normalize_backward(yhat, ynorm, d_yhat)
    dW = _normalize_backward(what, wnorm, d_what).T
    return loss, dY.astype(dtype_y), dW.astype(dtype_w)


# --- contrastive ---------------------------------------------------------

def contrastive_loss(Z: np.ndarray, group_labels, p: ContrastiveParams | None = None):
    """Per-anchor contrastive loss with one positive per numerator/denominator pair.

    Anchors without a positive are skipped, as are zero-norm rows.
    Returns (loss, dZ, n_skipped).
    """
    p = p or ContrastiveParams()
    dtype = Z.dtype
    Z = np.asarray(Z, dtype=np.float64)
    groups = np.asarray(group_labels, dtype=np.int64)
    n = Z.shape[0]
    znorm = np.linalg.norm(Z, axis=1, keepdims=True)
    alive = znorm[:, 0] > 0  # an all-zero row has no direction; it sits the batch out
    active = alive if p.include_bonafide else alive & (groups != BONAFIDE)
    znorm = np.where(alive[:, None], znorm, 1.0)
    zhat = Z / znorm
    S = zhat @ zhat.T / p.tau
    same = groups[:, None] == groups[None, :]
    both = active[:, None] & active[None, :]
    pos = same & both & ~np.eye(n, dtype=bool)
    neg = ~same & both
    n_pos = pos.sum(axis=1)
    anchors = active & (n_pos > 0)
    n_skipped = int(np.count_nonzero(active & (n_pos == 0))) + int(np.count_nonzero(~alive))
    dZ = np.zeros_like(Z)
    if not anchors.any():
        return 0.0, dZ.astype(dtype), n_skipped
    if not neg.any():
        log.warning("contrastive batch has a single group: no negatives, loss is 0")

    neg_lse = logsumexp(np.where(neg, S, -np.inf), axis=1)  # -inf for anchors without negatives
    a = neg_lse[:, None] - S  # log(sum_j e^{s_nj}) - s_nc
    # -log(e^s / (e^s + sum e^{s_j})) = softplus(a)
    softplus = np.logaddexp(0.0, a)
    sig = np.exp(-np.logaddexp(0.0, -a))  # sigmoid(a), -inf safe
    weight = np.zeros(n)
    weight[anchors] = 1.0 / (n_pos[anchors] * anchors.sum())
    pos_w = np.where(pos, weight[:, None], 0.0)
    loss = float(np.sum(np.where(pos, softplus, 0.0) * pos_w))

    dS = -pos_w * sig
    with np.errstate(invalid="ignore", over="ignore"):
        neg_soft = np.where(neg, np.exp(S - neg_lse[:, None]), 0.0)
    dS += neg_soft * np.sum(pos_w * sig, axis=1, keepdims=True)
    d_zhat = (dS + dS.T) @ zhat / p.tau
    dZ = _normalize_backward(zhat, znorm, d_zhat)
    return loss, dZ.astype(dtype), n_skipped


# --- center / combined / cross-entropy ------------------------------------

def center_loss(X: np.ndarray, bonafide_mask, c: np.ndarray):
    """Mean squared distance of bonafide rows to the (constant) center.

    Returns (loss, dX); rows outside the mask get zero gradient.
    """
    mask = np.asarray(bonafide_mask, dtype=bool)
    dX = np.zeros_like(X)
    k = int(mask.sum())
    if k == 0:
        return 0.0, dX
    diff = X[mask].astype(np.float64) - np.asarray(c, dtype=np.float64)
    loss = float(np.sum(diff * diff) / k)
    dX[mask] = (2.0 / k) * diff
    return loss, dX


def combined_loss(l1: float, l2: float, l3: float, w: LossWeights | None = None) -> float:
    w = w or LossWeights()
    return w.alpha * l1 + w.beta * l2 + w.gamma * l3


def cross_entropy(logits: np.ndarray, labels):
    """Mean negative log-softmax at the label. Returns (loss, dlogits)."""
    dtype = logits.dtype
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    lse = logsumexp(z, axis=1)
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    d = np.exp(z - lse[:, None])
    d[rows, labels] -= 1.0
    return loss, (d / n).astype(dtype)
