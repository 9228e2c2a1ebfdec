"""Workflow glue between manifests, the front-end, training and scoring."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from dinspoof import io
from dinspoof.config import RunConfig
from dinspoof.errors import ConfigError, DataError, NumericalError
from dinspoof.frontend import Frontend, FrontendConfig, without_specaug
from dinspoof.losses import GROUP_NAMES, CenterState
from dinspoof.network import DinModel
from dinspoof.scoring import ScoreRecord, fake_probability_segments, score_segments
from dinspoof.training import (
    Adam,
    BonafideGaussian,
    TrainingSet,
    TrainLogRecord,
    fit_bonafide_gaussian,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)


# --- features ---------------------------------------------------------------

def _extract_one(args):
    cfg, wav, utt = args
    clip = io.read_wav(wav, utt)
    return np.stack([t.data for t in Frontend(without_specaug(cfg)).extract(clip)])


def load_features(entries, frontend_cfg: FrontendConfig, feature_dir=None, workers: int = 1) -> dict[str, np.ndarray]:
    """utt_id -> (S, 3, F, T) un-augmented features, served from the cache when present."""
    out: dict[str, np.ndarray] = {}
    todo = []
    for e in entries:
        cached = io.feature_path(feature_dir, e.utt_id) if feature_dir else None
        if cached is not None and cached.exists():
            feats = io.read_features(cached)
            if feats.shape[2:] != (frontend_cfg.n_filters, frontend_cfg.target_frames):
                raise DataError(f"{cached}: cached shape {feats.shape[2:]} does not match the front-end config")
            out[e.utt_id] = feats
        else:
            todo.append(e)
    jobs = [(frontend_cfg, e.wav_path, e.utt_id) for e in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_extract_one, jobs, chunksize=8))
    else:
        results = [_extract_one(j) for j in jobs]
    for e, feats in zip(todo, results):
        out[e.utt_id] = feats
        if feature_dir:
            io.write_features(io.feature_path(feature_dir, e.utt_id), feats)
    return out


def class_names_for(entries) -> list[str]:
    return ["bonafide"] + sorted({e.generator_id for e in entries if e.key == "spoof"})


def build_training_set(entries, features: dict[str, np.ndarray], class_names: list[str],
                       group_map: dict[str, str]) -> TrainingSet:
    index = {name: i for i, name in enumerate(class_names)}
    feats, labels, groups, utts, segs = [], [], [], [], []
    for e in entries:
        if e.key == "bonafide":
            label, group = 0, "bonafide"
        else:
            if e.generator_id not in index:
                raise DataError(f"{e.utt_id}: generator {e.generator_id} not among training classes")
            group = group_map.get(e.generator_id, e.group)
            if group not in ("TTS", "VC"):
                raise ConfigError(f"generator {e.generator_id} has no TTS/VC group mapping")
            label = index[e.generator_id]
        for s, seg in enumerate(features[e.utt_id]):
            feats.append(seg)
            labels.append(label)
            groups.append(GROUP_NAMES[group])
            utts.append(e.utt_id)
            segs.append(s)
    if not feats:
        raise DataError("empty training manifest")
    return TrainingSet(np.stack(feats), np.array(labels), np.array(groups), utts, np.array(segs))


# --- checkpoints ------------------------------------------------------------

def _optimizer_extras(opt: Adam) -> dict[str, np.ndarray]:
    out = {}
    for name in opt.m:
        out[f"adam.m.{name}"] = opt.m[name]
        out[f"adam.v.{name}"] = opt.v[name]
    return out


def _optimizer_from(extras: dict, meta: dict, cfg) -> Adam:
    opt = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    opt.t = int(meta.get("adam_t", 0))
    for key, arr in extras.items():
        if key.startswith("adam.m."):
            opt.m[key[len("adam.m."):]] = arr.astype(np.float64)
        elif key.startswith("adam.v."):
            opt.v[key[len("adam.v."):]] = arr.astype(np.float64)
    return opt


def save_training_state(path, model, stage: int, epoch: int, class_names, opt: Adam | None = None,
                        center: CenterState | None = None) -> None:
    extras = _optimizer_extras(opt) if opt is not None else {}
    meta = {"stage": stage, "epoch": epoch, "class_names": list(class_names), "adam_t": opt.t if opt else 0}
    if center is not None:
        extras["center.c"] = center.c
        meta["center_last_refresh"] = center.last_refresh_epoch
    io.save_model(path, model, extras, meta)


class LogWriter:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, rec: TrainLogRecord):
        log.info("stage %d epoch %d step %d loss %.5f", rec.stage, rec.epoch, rec.step, rec.loss)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(rec.tsv() + "\n")


def run_training(cfg: RunConfig, stage: str = "all", resume=None, seed: int | None = None) -> Path:
    """Stages 1 and/or 2 of the training strategy; returns the final checkpoint path."""
    manifest = cfg.path("train_manifest")
    ckdir = cfg.path("checkpoint_dir")
    if manifest is None or ckdir is None:
        raise ConfigError("paths.train_manifest and paths.checkpoint_dir are required for training")
    tcfg = cfg.train
    entries = io.read_manifest(manifest)
    feats = load_features(entries, cfg.frontend, cfg.path("feature_dir"))
    names = class_names_for(entries)
    if len(names) != cfg.model.n_classes_stage1:
        raise ConfigError(f"model.n_classes_stage1 is {cfg.model.n_classes_stage1} but the training "
                          f"manifest has {len(names)} classes {names}")
    data = build_training_set(entries, feats, names, cfg.generator_group_map)
    specaug = cfg.frontend.specaug
    logger = LogWriter(cfg.path("log_file"))

    model, opt, center, start_stage, start_epoch = None, None, None, 1, 0
    if resume is not None:
        model, extras, meta = io.load_model(resume)
        start_stage, start_epoch = int(meta.get("stage", 1)), int(meta.get("epoch", 0))
        opt = _optimizer_from(extras, meta, tcfg)
        if "center.c" in extras:
            center = CenterState(extras["center.c"].astype(np.float64), meta.get("center_last_refresh", -1),
                                 tcfg.center_refresh_interval, tcfg.center_mode)
    stages = {"1": [1], "2": [2], "all": [1, 2]}[str(stage)]
    if model is None:
        if 1 not in stages:
            raise ConfigError("stage 2 needs --resume with a stage-1 checkpoint")
        model = DinModel(cfg.model, seed=tcfg.seed)
    ckdir.mkdir(parents=True, exist_ok=True)
    final = None

    if 1 in stages and start_stage == 1:
        def on_epoch1(epoch, o, c):
            if epoch % tcfg.checkpoint_interval == 0 or epoch == tcfg.epochs_stage1:
                save_training_state(ckdir / f"stage1_epoch{epoch:03d}.dinc", model, 1, epoch, names, o, c)

        try:
            center, _ = train_stage1(model, data, tcfg, specaug, center, opt, start_epoch,
                                     on_record=logger, on_epoch=on_epoch1)
        except NumericalError:
            save_training_state(ckdir / "diagnostic.dinc", model, 1, -1, names)
            raise
        final = ckdir / "stage1_final.dinc"
        save_training_state(final, model, 1, tcfg.epochs_stage1, names, None, center)
        opt, start_epoch = None, 0
    if 2 in stages:
        if start_stage == 1:
            start_epoch, opt = 0, None

        def on_epoch2(epoch, o):
            if epoch % tcfg.checkpoint_interval == 0 or epoch == tcfg.epochs_stage2:
                save_training_state(ckdir / f"stage2_epoch{epoch:03d}.dinc", model, 2, epoch, names, o)

        try:
            train_stage2(model, data, tcfg, specaug, opt, start_epoch, on_record=logger, on_epoch=on_epoch2)
        except NumericalError:
            save_training_state(ckdir / "diagnostic.dinc", model, 2, -1, names)
            raise
        final = ckdir / "stage2_final.dinc"
        save_training_state(final, model, 2, tcfg.epochs_stage2, names)
    return final


# --- stage 3 / scoring -------------------------------------------------------

def run_fit_gaussian(cfg: RunConfig, checkpoint, manifest, eps: float | None = None) -> BonafideGaussian:
    model, _, _ = io.load_model(checkpoint)
    entries = [e for e in io.read_manifest(manifest) if e.key == "bonafide"]
    if not entries:
        raise DataError(f"{manifest}: no bonafide entries to fit")
    feats = load_features(entries, cfg.frontend, cfg.path("feature_dir"))
    stacked = np.concatenate([feats[e.utt_id] for e in entries])
    return fit_bonafide_gaussian(model, stacked, eps)


def run_score(cfg: RunConfig, checkpoint, stats, manifest, aggregation: str = "mean",
              workers: int = 1, method: str = "mahalanobis") -> list[ScoreRecord]:
    model, _, meta = io.load_model(checkpoint)
    if meta.get("heads") != "entropy":
        log.warning("scoring with a stage-1 checkpoint; the stage-2 model is expected")
    if method == "mahalanobis":
        if stats is None:
            raise ConfigError("mahalanobis scoring needs --stats")
        g = io.read_gaussian(stats)
        score = partial(score_segments, model=model, g=g, aggregation=aggregation)
    elif method == "softmax":
        score = partial(fake_probability_segments, model=model, aggregation=aggregation)
    else:
        raise ConfigError(f"unknown scoring method {method!r}")
    entries = io.read_manifest(manifest)
    feats = load_features(entries, cfg.frontend, cfg.path("feature_dir"), workers)
    return [score(e.utt_id, feats[e.utt_id], label=e.key,
                  generator_id=e.generator_id if e.key == "spoof" else None) for e in entries]


def run_export_embeddings(frontend_cfg: FrontendConfig, checkpoint, manifest, out, feature_dir=None) -> int:
    """One line per utterance: utt_id and the mean backbone embedding over its segments."""
    model, _, _ = io.load_model(checkpoint)
    entries = io.read_manifest(manifest)
    feats = load_features(entries, frontend_cfg, feature_dir)
    with io.atomic_write(out, "w") as f:
        for e in sorted(entries, key=lambda e: e.utt_id):
            x = model.embed_many(feats[e.utt_id]).astype(np.float64).mean(axis=0)
            f.write(e.utt_id + "\t" + "\t".join(repr(float(v)) for v in x) + "\n")
    return len(entries)
