"""Mahalanobis scoring and detection metrics.

Score polarity: a larger distance means "more likely fake".
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import softmax
from scipy.stats import rankdata

from dinspoof.errors import DataError
from dinspoof.frontend import AudioClip, Frontend
from dinspoof.network import DinModel
from dinspoof.training import BonafideGaussian

BONAFIDE_KEY, SPOOF_KEY = "bonafide", "spoof"


@dataclass
class ScoreRecord:
    utt_id: str
    distance: float
    n_segments: int = 1
    label: str | None = None  # "bonafide" | "spoof"
    generator_id: str | None = None

    def __post_init__(self):
        if not np.isfinite(self.distance) or self.distance < 0:
            raise DataError(f"{self.utt_id}: invalid distance {self.distance!r}")
        if self.n_segments < 1:
            raise DataError(f"{self.utt_id}: n_segments must be >= 1")
        if self.label not in (None, BONAFIDE_KEY, SPOOF_KEY):
            raise DataError(f"{self.utt_id}: unknown label {self.label!r}")


def mahalanobis(x: np.ndarray, g: BonafideGaussian) -> float | np.ndarray:
    """Distance of one embedding (D,) or a batch (N, D) to the bonafide Gaussian."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != g.dim:
        raise DataError(f"embedding dimension {x.shape[-1]} != Gaussian dimension {g.dim}")
    r = x - g.mu
    q = np.einsum("...i,ij,...j->...", r, g.precision, r)
    d = np.sqrt(np.maximum(q, 0.0))
    return float(d) if d.ndim == 0 else d


def aggregate(distances: np.ndarray, how: str = "mean") -> float:
    if how == "mean":
        return float(np.mean(distances))
    if how == "max":
        return float(np.max(distances))
    raise ValueError(f"unknown aggregation {how!r}")


def score_utterance(clip: AudioClip, model: DinModel, g: BonafideGaussian, frontend: Frontend,
                    aggregation: str = "mean", label: str | None = None,
                    generator_id: str | None = None) -> ScoreRecord:
    feats = np.stack([t.data for t in frontend.extract(clip, training=False)])
    return score_segments(clip.utt_id, feats, model, g, aggregation, label, generator_id)


def score_segments(utt_id: str, features: np.ndarray, model: DinModel, g: BonafideGaussian,
                   aggregation: str = "mean", label: str | None = None,
                   generator_id: str | None = None) -> ScoreRecord:
    X = model.embed_many(features)
    d = mahalanobis(X.astype(np.float64), g)
    return ScoreRecord(utt_id, aggregate(np.atleast_1d(d), aggregation), len(features), label, generator_id)


def fake_probability_segments(utt_id: str, features: np.ndarray, model: DinModel, aggregation: str = "mean",
                              label: str | None = None, generator_id: str | None = None) -> ScoreRecord:
    """Alternative score: the entropy head's P(fake), in [0, 1] with the same polarity as a distance."""
    if model.heads != "entropy":
        raise DataError("softmax scoring needs a stage-2 checkpoint")
    logits = model.forward_heads(model.embed_many(features)).astype(np.float64)
    p_fake = softmax(logits, axis=1)[:, 1]
    return ScoreRecord(utt_id, aggregate(p_fake, aggregation), len(features), label, generator_id)


# --- metrics ----------------------------------------------------------------

def _split(records) -> tuple[np.ndarray, np.ndarray]:
    bona = np.array([r.distance for r in records if r.label == BONAFIDE_KEY], dtype=np.float64)
    fake = np.array([r.distance for r in records if r.label == SPOOF_KEY], dtype=np.float64)
    if bona.size == 0 or fake.size == 0:
        raise DataError("metrics need at least one bonafide and one spoof record")
    return bona, fake


def eer_from_scores(bona: np.ndarray, fake: np.ndarray) -> tuple[float, float]:
    """EER and its threshold.

    FAR(t): fraction of fakes with d <= t; FRR(t): fraction of bonafide with
    d > t. Thresholds sweep every midpoint between distinct scores plus one
    point beyond each end; the crossing is linearly interpolated.
    """
    bona = np.sort(np.asarray(bona, dtype=np.float64))
    fake = np.sort(np.asarray(fake, dtype=np.float64))
    uniq = np.unique(np.concatenate([bona, fake]))
    pad = max(1.0, float(uniq[-1] - uniq[0]))
    thr = np.concatenate([[uniq[0] - pad], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + pad]])
    # integer counts keep the sweep exactly mirror-symmetric under label swap + negation
    far = np.searchsorted(fake, thr, side="right") / fake.size
    frr = (bona.size - np.searchsorted(bona, thr, side="right")) / bona.size
    diff = far - frr  # non-decreasing, starts at -1, ends at +1
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return float(far[i]), float(thr[i])
    f0, f1, r0, r1 = far[i - 1], far[i], frr[i - 1], frr[i]
    span = (f1 - f0) + (r0 - r1)
    eer = (f1 * r0 - f0 * r1) / span
    a = (r0 - f0) / span
    return float(eer), float(thr[i - 1] + a * (thr[i] - thr[i - 1]))


def compute_eer(records) -> tuple[float, float]:
    return eer_from_scores(*_split(records))


def auc_from_scores(bona: np.ndarray, fake: np.ndarray) -> float:
    """P(bonafide distance < fake distance), ties counted 1/2 (rank-sum form)."""
    ranks = rankdata(np.concatenate([bona, fake]))
    nb, nf = len(bona), len(fake)
    return float((ranks[nb:].sum() - nf * (nf + 1) / 2) / (nb * nf))


def compute_auc(records) -> float:
    return auc_from_scores(*_split(records))


def accuracy_f1(records, threshold: float, positive: str = SPOOF_KEY) -> tuple[float, float]:
    """Predict spoof iff d > threshold; F1 for the ``positive`` class."""
    labels = [r.label for r in records]
    if any(lab is None for lab in labels) or not labels:
        raise DataError("accuracy/F1 need labelled records")
    truth = np.array([lab == SPOOF_KEY for lab in labels])
    pred = np.array([r.distance > threshold for r in records])
    if positive == BONAFIDE_KEY:
        truth, pred = ~truth, ~pred
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    acc = float(np.mean(truth == pred))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, float(f1)


def calibrate_threshold(dev_records) -> float:
    return compute_eer(dev_records)[1]


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    auc: float
    accuracy: float
    f1: float
    threshold_used: float
    counts: dict = field(default_factory=dict)
    positive_class: str = SPOOF_KEY

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def text(self) -> str:
        c = ", ".join(f"{k}={v}" for k, v in sorted(self.counts.items()))
        return (f"EER       {100 * self.eer:6.2f} %  (threshold {self.eer_threshold:.6g})\n"
                f"AUC       {100 * self.auc:6.2f} %\n"
                f"Accuracy  {100 * self.accuracy:6.2f} %  (threshold {self.threshold_used:.6g})\n"
                f"F1        {100 * self.f1:6.2f} %  (positive class: {self.positive_class})\n"
                f"Counts    {c}")


def evaluate(records, threshold: float | None = None, positive: str = SPOOF_KEY) -> EvalReport:
    eer, eer_thr = compute_eer(records)
    auc = compute_auc(records)
    used = eer_thr if threshold is None else float(threshold)
    acc, f1 = accuracy_f1(records, used, positive)
    counts = {BONAFIDE_KEY: sum(r.label == BONAFIDE_KEY for r in records),
              SPOOF_KEY: sum(r.label == SPOOF_KEY for r in records)}
    return EvalReport(eer, eer_thr, auc, acc, f1, used, counts, positive)
