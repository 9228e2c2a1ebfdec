"""Synthetic three-class corpus for desk-scale end-to-end runs.

bonafide: harmonic stack with vibrato, pitch drift, moving formant envelope
          and syllabic amplitude contour, plus a little breath noise.
TTS proxy: band-limited noise with sinusoidal amplitude modulation.
VC proxy:  constant-pitch harmonic stack, zero-phase partials, static envelope.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from dinspoof.errors import ConfigError
from dinspoof.io import ManifestEntry, write_manifest, write_wav

SR = 16000
CLASSES = (("bonafide", "-", "bonafide", "B"),
           ("spoof", "SYN_TTS", "TTS", "T"),
           ("spoof", "SYN_VC", "VC", "V"))
SYNTH_GROUP_MAP = {"SYN_TTS": "TTS", "SYN_VC": "VC"}
SPLITS = ("train", "dev", "eval")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_per_class: int = 200
    duration_s: float = 4.0
    seed: int = 7

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")


def _formant_gain(freqs: np.ndarray, formants, bandwidths) -> np.ndarray:
    g = np.zeros_like(freqs)
    for f, b in zip(formants, bandwidths):
        g += np.exp(-0.5 * ((freqs - f) / b) ** 2)
    return 0.05 + g


def bonafide_like(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.arange(n) / SR
    f0_base = rng.uniform(95, 230)
    drift = np.cumsum(rng.standard_normal(n)) / np.sqrt(n) * 0.08
    vib = rng.uniform(0.01, 0.03) * np.sin(2 * np.pi * rng.uniform(4, 7) * t + rng.uniform(0, 2 * np.pi))
    f0 = f0_base * (1 + vib + drift)
    phase = 2 * np.pi * np.cumsum(f0) / SR
    formants = np.array([rng.uniform(450, 850), rng.uniform(1000, 2000), rng.uniform(2300, 3200)])
    wander = 1 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t)[None, :]
    out = np.zeros(n)
    n_harm = int(7800 // (f0_base * 1.1))
    for h in range(1, n_harm + 1):
        fh = h * f0
        gain = _formant_gain(fh[None, :], formants[:, None] * wander, (80, 120, 160))[0]
        out += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / np.sqrt(h)
    syllables = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(3, 5) * t + rng.uniform(0, 2 * np.pi)) ** 2
    out *= syllables
    out += 0.02 * rng.standard_normal(n) * syllables
    return out


def tts_like(rng: np.random.Generator, n: int) -> np.ndarray:
    lo = rng.uniform(200, 1500)
    hi = min(lo + rng.uniform(1500, 4000), 7500)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=SR, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    t = np.arange(n) / SR
    am = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2, 8) * t + rng.uniform(0, 2 * np.pi))
    return noise * am


def vc_like(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.arange(n) / SR
    f0 = rng.uniform(95, 230) * rng.uniform(1.25, 1.5)
    formants = (rng.uniform(450, 850), rng.uniform(1000, 2000), rng.uniform(2300, 3200))
    out = np.zeros(n)
    for h in range(1, int(7800 // f0) + 1):
        gain = _formant_gain(np.array([h * f0]), formants, (80, 120, 160))[0]
        out += gain * np.cos(2 * np.pi * h * f0 * t) / np.sqrt(h)
    return out


RECIPES = {"B": bonafide_like, "T": tts_like, "V": vc_like}


def synth_clip(tag: str, index: int, spec: SyntheticDatasetSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, ord(tag), index])
    x = RECIPES[tag](rng, int(round(spec.duration_s * SR)))
    return 0.5 * x / (np.max(np.abs(x)) + 1e-12)


def split_indices(n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    perm = rng.permutation(n)
    n_train, n_dev = int(round(0.6 * n)), int(round(0.2 * n))
    return {"train": np.sort(perm[:n_train]), "dev": np.sort(perm[n_train:n_train + n_dev]),
            "eval": np.sort(perm[n_train + n_dev:])}


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, out_dir) -> dict[str, list[ManifestEntry]]:
    """Write WAVs under ``out_dir/wav`` and one manifest per split (plus ``manifest_all.tsv``).

    Manifest wav paths are relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    splits: dict[str, list[ManifestEntry]] = {s: [] for s in SPLITS}
    everything = []
    for key, gen, group, tag in CLASSES:
        assign = split_indices(spec.n_per_class, np.random.default_rng([spec.seed, ord(tag), 10**6]))
        which = {int(i): s for s, idx in assign.items() for i in idx}
        for i in range(spec.n_per_class):
            utt = f"SYN_{tag}_{i:04d}"
            rel = f"wav/{utt}.wav"
            write_wav(out_dir / rel, synth_clip(tag, i, spec), SR)
            entry = ManifestEntry(rel, utt, key, gen, group)
            splits[which[i]].append(entry)
            everything.append(entry)
    for s in SPLITS:
        write_manifest(out_dir / f"manifest_{s}.tsv", splits[s])
    write_manifest(out_dir / "manifest_all.tsv", everything)
    return splits
