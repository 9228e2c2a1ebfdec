import numpy as np
import pytest

from dinspoof import io
from dinspoof.errors import ConfigError
from dinspoof.frontend import FrontendConfig, build_linear_filterbank, stft_power
from dinspoof.synth import SyntheticDatasetSpec, generate_synthetic_dataset, synth_clip


def _bytes_of(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_counts_and_split(tmp_path):
    splits = generate_synthetic_dataset(SyntheticDatasetSpec(n_per_class=10, duration_s=0.5), tmp_path)
    assert len(list((tmp_path / "wav").glob("*.wav"))) == 30
    assert len(io.read_manifest(tmp_path / "manifest_all.tsv")) == 30
    assert {k: len(v) for k, v in splits.items()} == {"train": 18, "dev": 6, "eval": 6}
    for name, entries in splits.items():
        assert len(io.read_manifest(tmp_path / f"manifest_{name}.tsv")) == len(entries)
        # stratified: each class split 6/2/2
        for gen in ("-", "SYN_TTS", "SYN_VC"):
            assert sum(e.generator_id == gen for e in entries) == len(entries) // 3
    ids = [e.utt_id for s in splits.values() for e in s]
    assert len(set(ids)) == 30


def test_seed_determinism(tmp_path):
    spec = SyntheticDatasetSpec(n_per_class=3, duration_s=0.5, seed=7)
    generate_synthetic_dataset(spec, tmp_path / "a")
    generate_synthetic_dataset(spec, tmp_path / "b")
    assert _bytes_of(tmp_path / "a") == _bytes_of(tmp_path / "b")
    generate_synthetic_dataset(SyntheticDatasetSpec(n_per_class=3, duration_s=0.5, seed=8), tmp_path / "c")
    assert _bytes_of(tmp_path / "a") != _bytes_of(tmp_path / "c")


def _mean_log_spectrum(tag, n=8):
    spec = SyntheticDatasetSpec(n_per_class=n, duration_s=1.0)
    cfg = FrontendConfig(segment_seconds=1.0, target_frames=32)
    fb = build_linear_filterbank(cfg)
    rows = []
    for i in range(n):
        P = stft_power(synth_clip(tag, i, spec), cfg)
        rows.append(np.log(fb.weights @ P + 1e-10).mean(axis=1))
    return np.mean(rows, axis=0), np.std(rows, axis=0).mean()


def test_class_spectra_differ():
    b, sb = _mean_log_spectrum("B")
    t, st = _mean_log_spectrum("T")
    v, _ = _mean_log_spectrum("V")
    margin = np.linalg.norm(b - t)
    # the class gap dwarfs the within-class spread
    assert margin > 5 * max(sb, st)
    assert np.linalg.norm(b - v) > 0


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticDatasetSpec(n_per_class=0)
    with pytest.raises(ConfigError):
        SyntheticDatasetSpec(duration_s=0)
