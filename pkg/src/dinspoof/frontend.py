"""Spectrogram front-end: segmentation, STFT power, linear filterbank, deltas, SpecAug.

All arrays are float64 until the final tensor, which is emitted as float32
(the dtype stored in the feature cache and fed to the network).
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from dinspoof.errors import ConfigError, DataError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    utt_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate_hz <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise DataError(f"non-finite samples in {self.utt_id or 'clip'}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class SpecAugParams:
    n_freq_masks: int = 2
    max_freq_mask: int = 16
    n_time_masks: int = 2
    max_time_mask: int = 20
    enabled: bool = True

    def validate(self, n_rows: int, n_cols: int) -> None:
        if min(self.n_freq_masks, self.n_time_masks, self.max_freq_mask, self.max_time_mask) < 0:
            raise ConfigError("SpecAug mask counts and widths must be >= 0")
        if self.max_freq_mask > n_rows or self.max_time_mask > n_cols:
            raise ConfigError(
                f"SpecAug mask widths ({self.max_freq_mask}, {self.max_time_mask}) exceed "
                f"spectrogram shape ({n_rows}, {n_cols})"
            )


@dataclass(frozen=True)
class FrontendConfig:
    segment_seconds: float = 4.0
    window_size: int = 1024
    hop_size: int = 512
    n_filters: int = 128
    target_frames: int = 128
    log_floor: float = 1e-10
    delta_width: int = 9
    sample_rate_hz: int = SAMPLE_RATE
    min_tail_fraction: float = 0.25
    specaug: SpecAugParams = field(default_factory=SpecAugParams)

    def __post_init__(self):
        w = self.window_size
        if w < 2 or w & (w - 1):
            raise ConfigError(f"window_size must be a power of two, got {w}")
        if not 1 <= self.hop_size <= w:
            raise ConfigError(f"hop_size must be in [1, window_size], got {self.hop_size}")
        if self.n_filters < 2:
            raise ConfigError("n_filters must be >= 2")
        if self.target_frames < 1:
            raise ConfigError("target_frames must be >= 1")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.delta_width < 3 or self.delta_width % 2 == 0:
            raise ConfigError(f"delta_width must be odd and >= 3, got {self.delta_width}")
        if self.segment_seconds <= 0:
            raise ConfigError("segment_seconds must be positive")
        if self.specaug.enabled:
            self.specaug.validate(self.n_filters, self.target_frames)

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate_hz))

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1


@dataclass(frozen=True)
class FilterBank:
    weights: np.ndarray  # n_filters x n_bins
    band_edges: np.ndarray  # n_filters + 2, Hz

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


@dataclass
class SpectrogramTensor:
    data: np.ndarray  # 3 x F x T: log energy, delta, delta-delta
    source_utt: str = ""
    segment_index: int = 0

    @property
    def shape(self):
        return self.data.shape


def segment_audio(clip: AudioClip, cfg: FrontendConfig) -> list[np.ndarray]:
    """Split a clip into consecutive, non-overlapping fixed-length windows.

    A trailing remainder is tiled up to full length when it covers at least
    ``cfg.min_tail_fraction`` of a segment and dropped otherwise. Clips shorter
    than one segment are always tiled.
    """
    x = clip.samples
    if x.size == 0:
        raise DataError("empty audio")
    seg = cfg.segment_samples
    if x.size <= seg:
        return [np.resize(x, seg)]
    n_full = x.size // seg
    windows = [x[i * seg:(i + 1) * seg].copy() for i in range(n_full)]
    tail = x[n_full * seg:]
    if tail.size and tail.size >= cfg.min_tail_fraction * seg:
        windows.append(np.resize(tail, seg))
    return windows


def _fix_frames(spec: np.ndarray, n_frames: int) -> np.ndarray:
    t = spec.shape[1]
    if t >= n_frames:
        return spec[:, :n_frames]
    return np.pad(spec, ((0, 0), (0, n_frames - t)), mode="edge")


def stft_power(window: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """|DFT|^2 of Hann-windowed, reflection-centred frames, (n_bins, target_frames)."""
    x = np.asarray(window, dtype=np.float64)
    n = cfg.window_size
    if x.size < n:
        raise DataError(f"window has {x.size} samples, need at least {n}")
    xp = np.pad(x, n // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, n)[:: cfg.hop_size]
    hann = np.hanning(n + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * hann, axis=-1)
    power = (spec.real ** 2 + spec.imag ** 2).T
    return _fix_frames(power, cfg.target_frames)


def build_linear_filterbank(cfg: FrontendConfig, sample_rate_hz: int | None = None) -> FilterBank:
    sr = cfg.sample_rate_hz if sample_rate_hz is None else sample_rate_hz
    edges = np.linspace(0.0, sr / 2.0, cfg.n_filters + 2)
    freqs = np.arange(cfg.n_bins) * sr / cfg.window_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"{cfg.n_filters} filters too many for FFT size {cfg.window_size}: "
            f"filters {empty.tolist()[:5]} cover no FFT bin"
        )
    return FilterBank(weights=weights, band_edges=edges)


def apply_filterbank_log(power: np.ndarray, fb: FilterBank, log_floor: float) -> np.ndarray:
    if power.ndim != 2 or power.shape[0] != fb.weights.shape[1]:
        raise DataError(
            f"power spectrogram shape {power.shape} does not match filterbank {fb.weights.shape}"
        )
    return np.log(fb.weights @ power + log_floor)


def compute_delta(m: np.ndarray, width: int = 9) -> np.ndarray:
    """Regression delta along the last (time) axis with edge replication."""
    if width < 3 or width % 2 == 0:
        raise ConfigError(f"delta width must be odd and >= 3, got {width}")
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 1:
        raise DataError("compute_delta needs a matrix with at least one frame")
    half = width // 2
    t = m.shape[1]
    padded = np.pad(m, ((0, 0), (half, half)), mode="edge")
    out = np.zeros_like(m)
    for d in range(1, half + 1):
        out += d * (padded[:, half + d:half + d + t] - padded[:, half - d:half - d + t])
    return out / (2.0 * sum(d * d for d in range(1, half + 1)))


def spec_augment(t: SpectrogramTensor, p: SpecAugParams, rng: np.random.Generator) -> SpectrogramTensor:
    """Frequency masks first, then time masks; each fills with the per-channel mean.

    Per mask: width ~ U{0..max}, then start ~ U{0..axis-width}.
    """
    if not p.enabled:
        return t
    _, n_rows, n_cols = t.data.shape
    p.validate(n_rows, n_cols)
    out = t.data.copy()
    fill = t.data.mean(axis=(1, 2), keepdims=True).astype(out.dtype)
    for _ in range(p.n_freq_masks):
        w = int(rng.integers(0, p.max_freq_mask + 1))
        s = int(rng.integers(0, n_rows - w + 1))
        out[:, s:s + w, :] = fill
    for _ in range(p.n_time_masks):
        w = int(rng.integers(0, p.max_time_mask + 1))
        s = int(rng.integers(0, n_cols - w + 1))
        out[:, :, s:s + w] = fill
    return SpectrogramTensor(out, t.source_utt, t.segment_index)


def segment_rng(seed: int, utt_id: str, segment_index: int, epoch: int = 0) -> np.random.Generator:
    """Per-segment stream, independent of processing order."""
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8")), segment_index, epoch])


class Frontend:
    """Caches the filterbank for repeated extraction with one config."""

    def __init__(self, cfg: FrontendConfig | None = None):
        self.cfg = cfg or FrontendConfig()
        self.fb = build_linear_filterbank(self.cfg)

    def segment_features(self, window: np.ndarray) -> np.ndarray:
        base = apply_filterbank_log(stft_power(window, self.cfg), self.fb, self.cfg.log_floor)
        d1 = compute_delta(base, self.cfg.delta_width)
        d2 = compute_delta(d1, self.cfg.delta_width)
        return np.stack([base, d1, d2]).astype(np.float32)

    def extract(self, clip: AudioClip, training: bool = False, seed: int = 0, epoch: int = 0) -> list[SpectrogramTensor]:
        if clip.sample_rate_hz != self.cfg.sample_rate_hz:
            raise DataError(
                f"{clip.utt_id or 'clip'}: sample rate {clip.sample_rate_hz} Hz, "
                f"expected {self.cfg.sample_rate_hz} Hz (no resampling)"
            )
        out = []
        for i, window in enumerate(segment_audio(clip, self.cfg)):
            t = SpectrogramTensor(self.segment_features(window), clip.utt_id, i)
            if training:
                t = spec_augment(t, self.cfg.specaug, segment_rng(seed, clip.utt_id, i, epoch))
            out.append(t)
        return out


def extract_features(
    clip: AudioClip,
    cfg: FrontendConfig | None = None,
    training: bool = False,
    seed: int = 0,
    epoch: int = 0,
) -> list[SpectrogramTensor]:
    return Frontend(cfg).extract(clip, training=training, seed=seed, epoch=epoch)


def without_specaug(cfg: FrontendConfig) -> FrontendConfig:
    return replace(cfg, specaug=replace(cfg.specaug, enabled=False))
