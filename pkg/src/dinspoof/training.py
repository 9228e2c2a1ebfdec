"""Three-stage contrastive training strategy.

Stage 1 trains backbone + softmax/contrastive heads on the weighted sum of the
angular-margin, contrastive and center losses. Stage 2 swaps in a two-class
entropy head and fine-tunes with split learning rates. Stage 3 fits a
Gaussian to backbone embeddings of bonafide training segments.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np
from scipy import linalg

from dinspoof import losses
from dinspoof.errors import ConfigError, DataError, NumericalError
from dinspoof.frontend import SpecAugParams, SpectrogramTensor, segment_rng, spec_augment
from dinspoof.layers import GradientTape, ParameterStore
from dinspoof.losses import AngularMarginParams, CenterState, ContrastiveParams, LossWeights
from dinspoof.network import DinModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_stage1: int = 50
    epochs_stage2: int = 10
    batch_size: int = 64
    lr_stage1: float = 1e-4
    lr_stage2_head: float = 1e-3
    lr_stage2_backbone: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    angular: AngularMarginParams = field(default_factory=AngularMarginParams)
    contrastive: ContrastiveParams = field(default_factory=ContrastiveParams)
    center_refresh_interval: int = 5
    center_mode: str = "hybrid"
    seed: int = 0
    min_bonafide_per_batch: int = 8
    checkpoint_interval: int = 5

    def __post_init__(self):
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if min(self.lr_stage1, self.lr_stage2_head, self.lr_stage2_backbone) < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.center_refresh_interval < 1:
            raise ConfigError("center_refresh_interval must be >= 1")
        if self.center_mode not in ("hybrid", "global"):
            raise ConfigError(f"center_mode must be 'hybrid' or 'global', got {self.center_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for key, typ in (("weights", LossWeights), ("angular", AngularMarginParams),
                         ("contrastive", ContrastiveParams)):
            if isinstance(d.get(key), dict):
                sub = d[key]
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ConfigError(f"unknown train.{key} keys: {sorted(bad)}")
                d[key] = typ(**sub)
        return cls(**d)


@dataclass
class TrainLogRecord:
    stage: int
    epoch: int
    step: int
    l1: float
    l2: float
    l3: float
    loss: float
    grad_norm: float
    seconds: float

    def tsv(self) -> str:
        def f(v):
            return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))
        return "\t".join([str(self.epoch), str(self.step), f(self.l1), f(self.l2), f(self.l3),
                          f(self.loss), f(self.grad_norm), f"{self.seconds:.3f}"])


@dataclass
class TrainingSet:
    """Segment-level training data; features are un-augmented (M, 3, F, T)."""

    features: np.ndarray
    labels: np.ndarray  # stage-1 class: 0 = bonafide, 1.. = generators
    groups: np.ndarray  # 0 bonafide, 1 TTS, 2 VC
    utt_ids: list[str]
    segment_index: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        self.segment_index = np.asarray(self.segment_index, dtype=np.int64)
        if not (len(self.labels) == len(self.groups) == len(self.utt_ids) == len(self.segment_index) == n):
            raise DataError("training set arrays have mismatched lengths")

    def __len__(self):
        return len(self.features)

    @property
    def bonafide(self) -> np.ndarray:
        return self.groups == losses.BONAFIDE

    def batch(self, idx: np.ndarray, specaug: SpecAugParams | None, seed: int, epoch: int) -> np.ndarray:
        x = self.features[idx]
        if specaug is None or not specaug.enabled:
            return x
        out = np.empty_like(x)
        for row, i in enumerate(idx):
            t = SpectrogramTensor(x[row], self.utt_ids[i], int(self.segment_index[i]))
            out[row] = spec_augment(t, specaug, segment_rng(seed, self.utt_ids[i], int(self.segment_index[i]), epoch)).data
        return out


# --- batching / optimizer -------------------------------------------------

def balanced_batches(is_bonafide, batch_size: int, min_bonafide: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of index batches, each holding >= ``min_bonafide`` bonafide items.

    The first ``min_bonafide`` slots of a batch cycle through shuffled bonafide
    indices; the rest walk a shuffled permutation of the whole set, so every
    index appears at least once per epoch.
    """
    is_bonafide = np.asarray(is_bonafide, dtype=bool)
    total = is_bonafide.size
    bona = np.flatnonzero(is_bonafide)
    if bona.size < min_bonafide or bona.size == 0:
        raise DataError(f"need at least {max(min_bonafide, 1)} bonafide items, dataset has {bona.size}")
    n = min(batch_size, total)
    k = min(min_bonafide, n - 1) if n > 1 else min_bonafide
    free = n - k

    bona_pool: list[int] = []

    def take_bonafide(count):
        nonlocal bona_pool
        out = []
        while len(out) < count:
            if not bona_pool:
                bona_pool = list(rng.permutation(bona))
            out.append(bona_pool.pop())
        return out

    order = list(rng.permutation(total))
    batches = []
    pos = 0
    while pos < total:
        rest = order[pos:pos + free]
        pos += free
        if len(rest) < free:
            extra = rng.permutation(total)[: free - len(rest)]
            rest = rest + list(extra)
        batches.append(np.array(take_bonafide(k) + rest, dtype=np.int64))
    return batches


class Adam:
    """Adam with bias correction; moments kept in float64, keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: ParameterStore, tape: GradientTape, lr: float | dict[str, float]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p in store.trainable():
            g = tape.get(p.name)
            if g is None:
                continue
            g = g.astype(np.float64)
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(g)
                self.v[p.name] = np.zeros_like(g)
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            rate = lr[p.group] if isinstance(lr, dict) else lr
            if rate == 0:
                continue
            update = rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = (p.value - update).astype(p.value.dtype)


def adam_step(store, tape, state: Adam, lr) -> None:
    state.step(store, tape, lr)


# --- center ---------------------------------------------------------------

def embed_dataset(model: DinModel, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-mode backbone embeddings, no augmentation."""
    return model.embed_many(features, batch_size).astype(np.float64)


def refresh_center(model: DinModel, data: TrainingSet, st: CenterState | None, epoch: int,
                   batch_X: np.ndarray | None = None) -> CenterState:
    """Epoch-boundary refresh (epoch % interval == 0: mean over every bonafide
    training item) or, with ``batch_X``, the per-batch update."""
    if batch_X is not None:
        if st.mode == "hybrid" and len(batch_X):
            st.c = np.asarray(batch_X, dtype=np.float64).mean(axis=0)
            st.events.append(("batch", epoch))
        return st
    if st is not None and epoch % st.refresh_interval:
        return st
    bona = data.features[data.bonafide]
    if len(bona) == 0:
        log.warning("no bonafide items: center left unchanged")
        return st if st is not None else CenterState(np.zeros(model.cfg.embedding_dim))
    c = embed_dataset(model, bona).mean(axis=0)
    if st is None:
        st = CenterState(c)
    st.c = c
    st.last_refresh_epoch = epoch
    st.events.append(("global", epoch))
    return st


# --- stages ---------------------------------------------------------------

StepCallback = Callable[[dict], None]


def _check_finite(value: float, what: str, stage: int, epoch: int, step: int):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what} at stage {stage} epoch {epoch} step {step}")


def train_stage1(model: DinModel, data: TrainingSet, cfg: TrainConfig, specaug: SpecAugParams | None = None,
                 center: CenterState | None = None, optimizer: Adam | None = None, start_epoch: int = 0,
                 on_record: Callable[[TrainLogRecord], None] | None = None,
                 on_step: StepCallback | None = None,
                 on_epoch: Callable[[int, Adam, CenterState], None] | None = None) -> tuple[CenterState, Adam]:
    if model.heads != "stage1":
        raise ConfigError("stage 1 needs a model with softmax and contrastive heads")
    opt = optimizer or Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if center is None:
        center = refresh_center(model, data, None, 0)
        center.refresh_interval, center.mode = cfg.center_refresh_interval, cfg.center_mode
    bona_all = data.bonafide
    for epoch in range(start_epoch + 1, cfg.epochs_stage1 + 1):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        for step, idx in enumerate(balanced_batches(bona_all, cfg.batch_size, cfg.min_bonafide_per_batch, rng)):
            t0 = time.perf_counter()
            x = data.batch(idx, specaug, cfg.seed, epoch)
            bona = bona_all[idx]
            X = model.embed(x, training=True)
            Y, Z = model.forward_heads(X, training=True)
            l1, dY, dW = losses.a_softmax_loss(Y, data.labels[idx], model.class_weight.value, cfg.angular)
            l2, dZ, _ = losses.contrastive_loss(Z, data.groups[idx], cfg.contrastive)
            c_before = center.c.copy()
            l3, dX3 = losses.center_loss(X, bona, center.c)
            w = cfg.weights
            total = losses.combined_loss(l1, l2, l3, w)
            _check_finite(total, "loss", 1, epoch, step)

            tape = GradientTape()
            tape.add(model.class_weight, w.alpha * dW)
            dX = model.backward_heads(tape, dY=w.alpha * dY, dZ=w.beta * dZ)
            model.backward(dX + w.gamma * dX3, tape)
            gnorm = tape.global_norm()
            _check_finite(gnorm, "gradient", 1, epoch, step)
            if on_step is not None:
                on_step({"stage": 1, "epoch": epoch, "step": step, "center_before": c_before,
                         "center_after_backward": center.c.copy(), "tape": tape, "model": model})
            opt.step(model.store, tape, cfg.lr_stage1)
            model.renormalize_class_weight()
            refresh_center(model, data, center, epoch, batch_X=X[bona])
            if on_record is not None:
                on_record(TrainLogRecord(1, epoch, step, l1, l2, l3, total, gnorm, time.perf_counter() - t0))
        refresh_center(model, data, center, epoch)
        if on_epoch is not None:
            on_epoch(epoch, opt, center)
    return center, opt


def train_stage2(model: DinModel, data: TrainingSet, cfg: TrainConfig, specaug: SpecAugParams | None = None,
                 optimizer: Adam | None = None, start_epoch: int = 0,
                 on_record: Callable[[TrainLogRecord], None] | None = None,
                 on_step: StepCallback | None = None,
                 on_epoch: Callable[[int, Adam], None] | None = None) -> Adam:
    if model.heads != "entropy":
        model.swap_to_entropy_head(seed=cfg.seed + 2)
    opt = optimizer or Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    lrs = {"head": cfg.lr_stage2_head, "backbone": cfg.lr_stage2_backbone}
    targets = (~data.bonafide).astype(np.int64)  # 0 bonafide, 1 fake
    for epoch in range(start_epoch + 1, cfg.epochs_stage2 + 1):
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        for step, idx in enumerate(balanced_batches(data.bonafide, cfg.batch_size, cfg.min_bonafide_per_batch, rng)):
            t0 = time.perf_counter()
            x = data.batch(idx, specaug, cfg.seed, 1000 + epoch)
            X = model.embed(x, training=True)
            logits = model.forward_heads(X, training=True)
            loss, dlogits = losses.cross_entropy(logits, targets[idx])
            _check_finite(loss, "loss", 2, epoch, step)
            tape = GradientTape()
            dX = model.backward_heads(tape, dlogits=dlogits)
            if cfg.lr_stage2_backbone > 0 or on_step is not None:
                model.backward(dX, tape)
            gnorm = tape.global_norm()
            _check_finite(gnorm, "gradient", 2, epoch, step)
            if on_step is not None:
                on_step({"stage": 2, "epoch": epoch, "step": step, "tape": tape, "model": model})
            opt.step(model.store, tape, lrs)
            if on_record is not None:
                on_record(TrainLogRecord(2, epoch, step, math.nan, math.nan, math.nan, loss, gnorm,
                                         time.perf_counter() - t0))
        if on_epoch is not None:
            on_epoch(epoch, opt)
    return opt


# --- stage 3: bonafide Gaussian -------------------------------------------

@dataclass
class BonafideGaussian:
    mu: np.ndarray
    sigma: np.ndarray
    precision: np.ndarray
    eps: float
    n_samples: int = 0

    @property
    def dim(self) -> int:
        return self.mu.size

    @classmethod
    def from_moments(cls, mu, sigma, eps: float = 0.0, n_samples: int = 0) -> "BonafideGaussian":
        mu = np.asarray(mu, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        d = mu.size
        try:
            factor = linalg.cho_factor(sigma + eps * np.eye(d), lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"covariance not positive definite with shrinkage {eps:g}; "
                                 "increase the shrinkage") from exc
        precision = linalg.cho_solve(factor, np.eye(d))
        precision = 0.5 * (precision + precision.T)
        return cls(mu, sigma, precision, float(eps), n_samples)

    def cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.sigma + self.eps * np.eye(self.dim))


def fit_gaussian(embeddings: np.ndarray, eps: float | None = None) -> BonafideGaussian:
    """Sample mean, unbiased covariance and shrunk precision.

    Default shrinkage is 1e-3 * trace(Sigma) / D (floored at 1e-12).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n, d = x.shape
    if n < 1:
        raise DataError("cannot fit a Gaussian to zero embeddings")
    if n < d + 1:
        log.warning("fitting a %d-dim Gaussian on %d samples; relying on shrinkage", d, n)
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / max(n - 1, 1)
    sigma = 0.5 * (sigma + sigma.T)
    if eps is None:
        eps = max(1e-3 * float(np.trace(sigma)) / d, 1e-12)
    return BonafideGaussian.from_moments(mu, sigma, eps, n)


def fit_bonafide_gaussian(model: DinModel, bonafide_features: np.ndarray, eps: float | None = None) -> BonafideGaussian:
    return fit_gaussian(embed_dataset(model, bonafide_features), eps)
