"""Command-line entry point: ``dinspoof <command> ...``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
Failures print a single ``error:<kind>: <reason>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from dinspoof import io, pipeline
from dinspoof.config import RunConfig, load_config
from dinspoof.errors import ConfigError, DataError, DinError, NumericalError
from dinspoof.network import complexity_report
from dinspoof.scoring import calibrate_threshold, evaluate
from dinspoof.synth import SyntheticDatasetSpec, generate_synthetic_dataset

log = logging.getLogger("dinspoof")


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def cmd_synth(args):
    data = {}
    if args.spec:
        data = yaml.safe_load(Path(args.spec).read_text(encoding="utf-8")) or {}
        unknown = set(data) - {"n_per_class", "duration_s", "seed"}
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
    for key in ("n_per_class", "duration_s", "seed"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    spec = SyntheticDatasetSpec(**data)
    splits = generate_synthetic_dataset(spec, args.out)
    print(json.dumps({k: len(v) for k, v in splits.items()}, sort_keys=True))


def cmd_manifest(args):
    cfg = _config(args)
    entries = io.parse_cm_protocol(args.protocol, cfg.generator_group_map, args.wav_dir,
                                   require_groups=not args.allow_unmapped)
    io.write_manifest(args.out, entries)
    print(f"{len(entries)} entries -> {args.out}")


def cmd_extract(args):
    cfg = _config(args)
    entries = io.read_manifest(args.manifest)
    pipeline.load_features(entries, cfg.frontend, args.out, workers=args.workers)
    print(f"{len(entries)} utterances -> {args.out}")


def cmd_train(args):
    cfg = _config(args)
    final = pipeline.run_training(cfg, args.stage, args.resume)
    print(f"checkpoint: {final}")


def cmd_fit_gaussian(args):
    cfg = _config(args)
    g = pipeline.run_fit_gaussian(cfg, args.checkpoint, args.manifest, args.eps)
    io.write_gaussian(args.out, g)
    print(f"D={g.dim} n={g.n_samples} eps={g.eps:.6g} -> {args.out}")


def cmd_score(args):
    cfg = _config(args)
    records = pipeline.run_score(cfg, args.checkpoint, args.stats, args.manifest, args.aggregation,
                                 args.workers, args.method)
    io.write_scores(args.out, records)
    print(f"{len(records)} scores -> {args.out}")


def cmd_evaluate(args):
    records = io.read_scores(args.scores)
    threshold = args.threshold
    if args.calibrate:
        threshold = calibrate_threshold(io.read_scores(args.calibrate))
        if args.stats:
            with io.atomic_write(Path(str(args.stats) + ".threshold.json"), "w") as f:
                f.write(json.dumps({"threshold": threshold}) + "\n")
    report = evaluate(records, threshold, args.positive)
    print(report.text())
    print(report.to_json())
    if args.json:
        with io.atomic_write(args.json, "w") as f:
            f.write(report.to_json() + "\n")


def cmd_export_embeddings(args):
    cfg = _config(args)
    n = pipeline.run_export_embeddings(cfg.frontend, args.checkpoint, args.manifest, args.out,
                                       cfg.path("feature_dir"))
    print(f"{n} embeddings -> {args.out}")


def cmd_count(args):
    cfg = _config(args)
    r = complexity_report(cfg.model)
    print(f"parameters        {r['parameters']:,} ({r['parameters'] / 1e6:.2f} M, backbone + entropy head)")
    print(f"parameters stage1 {r['parameters_stage1']:,} ({r['parameters_stage1'] / 1e6:.2f} M, with training heads)")
    print(f"FLOPs             {r['flops']:,} ({r['flops'] / 1e6:.0f} M per {cfg.model.in_channels}x"
          f"{cfg.model.input_height}x{cfg.model.input_width} input)")
    print(json.dumps(r, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dinspoof", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic three-class corpus")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int)
    s.add_argument("--duration-s", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("manifest", help="convert an ASVspoof CM protocol into a manifest")
    s.add_argument("--config")
    s.add_argument("--protocol", required=True)
    s.add_argument("--wav-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--allow-unmapped", action="store_true", help="keep spoof systems without a TTS/VC group")
    s.set_defaults(func=cmd_manifest)

    s = sub.add_parser("extract", help="write feature cache files")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="training stages 1 and/or 2")
    s.add_argument("--config", required=True)
    s.add_argument("--stage", choices=["1", "2", "all"], default="all")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit-gaussian", help="stage 3: fit the bonafide Gaussian")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eps", type=float)
    s.set_defaults(func=cmd_fit_gaussian)

    s = sub.add_parser("score", help="Mahalanobis scores for a manifest")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stats", help="Gaussian stats (required for the mahalanobis method)")
    s.add_argument("--method", choices=["mahalanobis", "softmax"], default="mahalanobis",
                   help="softmax: entropy-head P(fake) instead of a distance")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--aggregation", choices=["mean", "max"], default="mean")
    s.add_argument("--workers", type=int, default=1, help="processes for feature extraction")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("evaluate", help="EER / AUC / accuracy / F1 from a scores file")
    s.add_argument("--scores", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float)
    g.add_argument("--calibrate", help="dev scores file; use its EER threshold")
    s.add_argument("--stats", help="with --calibrate, persist the threshold next to these stats")
    s.add_argument("--positive", choices=["spoof", "bonafide"], default="spoof")
    s.add_argument("--json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-embeddings", help="utterance embeddings for external plotting")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_embeddings)

    s = sub.add_parser("count", help="parameter and FLOP report")
    s.add_argument("--config")
    s.set_defaults(func=cmd_count)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DinError as exc:
        kind = {ConfigError: "config", DataError: "data", NumericalError: "numerical"}.get(type(exc), "error")
        print(f"error:{kind}: {exc}".replace("\n", " "), file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error:data: {exc}".replace("\n", " "), file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
