"""File formats: WAV, manifests, CM protocols, feature cache, checkpoints,
Gaussian stats, score and log TSVs. All binary formats are little-endian and
every write goes through a temp file + rename."""
from __future__ import annotations

import json
import os
import struct
import tempfile
import wave
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dinspoof.errors import DataError
from dinspoof.frontend import AudioClip
from dinspoof.training import BonafideGaussian

FEATURE_MAGIC, CHECKPOINT_MAGIC, GAUSSIAN_MAGIC = b"DINF", b"DINC", b"DING"
FORMAT_VERSION = 1

DEFAULT_GROUP_MAP = {"A01": "TTS", "A02": "TTS", "A03": "TTS", "A04": "TTS", "A05": "VC", "A06": "VC"}
GROUPS = ("bonafide", "TTS", "VC")


@contextmanager
def atomic_write(path, mode="wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": "\n"})) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- WAV --------------------------------------------------------------------

def read_wav(path, utt_id: str | None = None) -> AudioClip:
    """16-bit PCM mono WAV -> AudioClip with samples scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getcomptype() != "NONE":
                raise DataError(f"{path}: expected 16-bit PCM mono WAV")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate, utt_id or Path(path).stem)


def write_wav(path, samples: np.ndarray, sample_rate_hz: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with atomic_write(path) as f:
        with wave.open(f, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(sample_rate_hz)
            w.writeframes(pcm.tobytes())


# --- manifests / protocols --------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    wav_path: str
    utt_id: str
    key: str  # bonafide | spoof
    generator_id: str = "-"
    group: str = "bonafide"

    def __post_init__(self):
        if self.key == "bonafide":
            if self.generator_id != "-" or self.group != "bonafide":
                raise DataError(f"{self.utt_id}: bonafide entries need generator '-' and group bonafide")
        elif self.key == "spoof":
            if self.group not in ("TTS", "VC", "unknown"):
                raise DataError(f"{self.utt_id}: spoof entries need group TTS or VC, got {self.group!r}")
        else:
            raise DataError(f"{self.utt_id}: key must be bonafide or spoof, got {self.key!r}")


MANIFEST_HEADER = "utt_id\twav_path\tkey\tgenerator_id\tgroup"


def write_manifest(path, entries) -> None:
    with atomic_write(path, "w") as f:
        f.write(MANIFEST_HEADER + "\n")
        for e in entries:
            f.write(f"{e.utt_id}\t{e.wav_path}\t{e.key}\t{e.generator_id}\t{e.group}\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Read a manifest TSV; relative wav paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line == MANIFEST_HEADER or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            utt, wav, key, gen, group = parts
            if not os.path.isabs(wav):
                wav = str(path.parent / wav)
            out.append(ManifestEntry(wav, utt, key, gen, group))
    return out


def parse_cm_protocol(path, group_map: dict[str, str] | None = None, wav_dir=None,
                      require_groups: bool = True) -> list[ManifestEntry]:
    """ASVspoof CM protocol lines: ``speaker utt_id - system_id key``.

    Unknown spoof systems raise unless ``require_groups`` is off (eval-side
    generators), in which case their group is ``unknown``.
    """
    group_map = DEFAULT_GROUP_MAP if group_map is None else group_map
    entries, missing = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 whitespace-separated fields, got {len(parts)}")
            _, utt, _, system, key = parts
            if key not in ("bonafide", "spoof"):
                raise DataError(f"{path}:{lineno}: key must be bonafide or spoof, got {key!r}")
            wav = str(Path(wav_dir) / f"{utt}.wav") if wav_dir is not None else f"{utt}.wav"
            if key == "bonafide":
                entries.append(ManifestEntry(wav, utt, "bonafide", "-", "bonafide"))
                continue
            group = group_map.get(system)
            if group is None:
                if require_groups:
                    missing.append(system)
                    continue
                group = "unknown"
            entries.append(ManifestEntry(wav, utt, "spoof", system, group))
    if missing:
        raise DataError(f"{path}: no TTS/VC group for system ids {sorted(set(missing))}")
    return entries


# --- feature cache ----------------------------------------------------------

def write_features(path, segments: np.ndarray) -> None:
    """(S, 3, F, T) -> DINF file."""
    segments = np.asarray(segments, dtype="<f4")
    _, c, f_, t = segments.shape
    if c != 3:
        raise DataError("feature cache stores 3-channel tensors")
    with atomic_write(path) as f:
        f.write(FEATURE_MAGIC + struct.pack("<III", FORMAT_VERSION, f_, t))
        f.write(np.ascontiguousarray(segments).tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature cache file")
    version, f_, t = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported feature cache version {version}")
    payload = np.frombuffer(data, dtype="<f4", offset=16)
    per = 3 * f_ * t
    if payload.size % per:
        raise DataError(f"{path}: truncated feature cache")
    return payload.reshape(-1, 3, f_, t).astype(np.float32)


def feature_path(feature_dir, utt_id: str) -> Path:
    return Path(feature_dir) / f"{utt_id}.dinf"


# --- checkpoints ------------------------------------------------------------

def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """DINC: header, tensors (f32 payload), then u32 length + JSON trailer."""
    with atomic_write(path) as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())
        trailer = json.dumps(meta, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(trailer)) + trailer)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
        (tlen,) = struct.unpack_from("<I", data, pos)
        meta = json.loads(data[pos + 4:pos + 4 + tlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    return tensors, meta


# --- Gaussian stats ---------------------------------------------------------

def write_gaussian(path, g: BonafideGaussian) -> None:
    d = g.dim
    with atomic_write(path) as f:
        f.write(GAUSSIAN_MAGIC + struct.pack("<IId", FORMAT_VERSION, d, g.eps))
        for arr in (g.mu, g.sigma, g.precision):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_gaussian(path) -> BonafideGaussian:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Gaussian stats not found: {path}")
    data = path.read_bytes()
    if data[:4] != GAUSSIAN_MAGIC:
        raise DataError(f"{path}: not a Gaussian stats file")
    version, d, eps = struct.unpack_from("<IId", data, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported stats version {version}")
    body = np.frombuffer(data, dtype="<f8", offset=20)
    if body.size != d + 2 * d * d:
        raise DataError(f"{path}: truncated Gaussian stats")
    mu = body[:d].copy()
    sigma = body[d:d + d * d].reshape(d, d).copy()
    precision = body[d + d * d:].reshape(d, d).copy()
    return BonafideGaussian(mu, sigma, precision, eps)


# --- score files ------------------------------------------------------------

def write_scores(path, records) -> None:
    with atomic_write(path, "w") as f:
        for r in sorted(records, key=lambda r: r.utt_id):
            fields = [r.utt_id, repr(float(r.distance)), str(r.n_segments)]
            if r.label is not None:
                fields.append(r.label)
                if r.generator_id is not None:
                    fields.append(r.generator_id)
            f.write("\t".join(fields) + "\n")


def read_scores(path):
    from dinspoof.scoring import ScoreRecord

    path = Path(path)
    if not path.exists():
        raise DataError(f"scores file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if not 3 <= len(parts) <= 5:
                raise DataError(f"{path}:{lineno}: expected 3-5 fields, got {len(parts)}")
            try:
                out.append(ScoreRecord(parts[0], float(parts[1]), int(parts[2]),
                                       parts[3] if len(parts) > 3 else None,
                                       parts[4] if len(parts) > 4 else None))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


# --- model checkpoints ------------------------------------------------------

def save_model(path, model, extras: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Model tensors (incl. BN running stats) + optional extras, config in the trailer."""
    tensors = {name: p.value for name, p in model.store.items()}
    for name, arr in (extras or {}).items():
        arr = np.asarray(arr)
        hi = arr.astype(np.float32)
        tensors[f"extra.{name}"] = hi
        if arr.dtype == np.float64:
            # f32 payload only: keep the rounding residue so f64 state survives a resume
            tensors[f"extra_lo.{name}"] = (arr - hi).astype(np.float32)
    trailer = {"din_config": model.cfg.to_dict(), "heads": model.heads, **(meta or {})}
    write_checkpoint(path, tensors, trailer)


def load_model(path, dtype=np.float32):
    """-> (model, extras, meta)."""
    from dinspoof.network import DinConfig, DinModel

    tensors, meta = read_checkpoint(path)
    cfg = DinConfig.from_dict(meta["din_config"])
    model = DinModel(cfg, dtype=dtype, heads=meta.get("heads", "stage1"))
    missing = [n for n in model.store.names() if n not in tensors]
    if missing:
        raise DataError(f"{path}: checkpoint lacks tensors {missing[:3]}...")
    for name, p in model.store.items():
        if tensors[name].shape != p.value.shape:
            raise DataError(f"{path}: {name} has shape {tensors[name].shape}, expected {p.value.shape}")
        p.value = tensors[name].astype(dtype)
    extras = {}
    for n, a in tensors.items():
        if n.startswith("extra."):
            lo = tensors.get("extra_lo." + n[len("extra."):])
            extras[n[len("extra."):]] = a if lo is None else a.astype(np.float64) + lo
    return model, extras, meta
