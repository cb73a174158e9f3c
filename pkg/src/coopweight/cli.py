"""Command line entry point.

Exit codes: 0 success, 2 bad configuration, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, nn
from .config import ConfigError, RunConfig, dump_config, load_config
from .perception import write_scenes

log = logging.getLogger("coopweight")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


def backbone_path(cfg: RunConfig, scheme: int) -> Path:
    return cfg.out / f"backbone_scheme{scheme}.ckpt"


def weighting_path(cfg: RunConfig) -> Path:
    return cfg.out / "weighting.ckpt"


def _eval_artifacts(cfg: RunConfig, modes):
    scheme = 2 if cfg.scheme == 3 else cfg.scheme
    backbone = Path(cfg.backbone_checkpoint) if cfg.backbone_checkpoint else backbone_path(cfg, scheme)
    model = harness.load_backbone(cfg, backbone)
    net = None
    if "weighted" in modes:
        net = harness.load_weighting(cfg.weighting_checkpoint or weighting_path(cfg))
    return harness.Evaluator(model, harness.test_scenes(cfg), seed=cfg.seed, draws=cfg.eval_draws,
                             weighting=net, scheme=scheme)


def cmd_train(args, cfg: RunConfig) -> None:
    cfg = replace(cfg, scheme=args.scheme)
    if args.from_checkpoint:
        cfg.backbone_checkpoint = args.from_checkpoint
    elif cfg.scheme == 3 and not cfg.backbone_checkpoint:
        cfg.backbone_checkpoint = str(backbone_path(cfg, 2))
    cfg.validate()
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.scheme == 3:
        _, net = harness.run_scheme3(cfg, on_epoch=lambda *r: rows.append(r))
        nn.save_checkpoint(weighting_path(cfg), net.store.state())
    else:
        run = harness.run_scheme1 if cfg.scheme == 1 else harness.run_scheme2
        model = run(cfg, on_epoch=lambda *r: rows.append(r))
        nn.save_checkpoint(backbone_path(cfg, cfg.scheme), model.store.state())
    harness.write_train_log(cfg.out / "train_log.csv", cfg.scheme, rows)
    (cfg.out / f"config_scheme{cfg.scheme}.txt").write_text(dump_config(cfg))


def cmd_sweep(args, cfg: RunConfig) -> None:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in harness.MODES:
            raise ConfigError(f"unknown mode {m!r}; choose from {', '.join(harness.MODES)}")
    points = harness.axis_points(cfg, args.axis)
    ev = _eval_artifacts(cfg, modes)
    records = harness.sweep(ev, points, modes)
    cfg.out.mkdir(parents=True, exist_ok=True)
    harness.write_metrics(args.output or cfg.out / "metrics.csv", records)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    modes = ["ego", "unweighted"]
    if cfg.weighting_checkpoint or weighting_path(cfg).exists():
        modes.append("weighted")
    ev = _eval_artifacts(cfg, modes)
    records = harness.sweep(ev, [harness.config_point(cfg)], modes)
    cfg.out.mkdir(parents=True, exist_ok=True)
    harness.write_metrics(args.output or cfg.out / "metrics.csv", records)


def cmd_gen_scenes(args, cfg: RunConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    scenes = harness.test_scenes(replace(cfg, test_scenes=None))
    write_scenes(args.output or cfg.out / "test_scenes.jsonl", scenes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coopweight", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one scheme and write its checkpoint")
    p.add_argument("--scheme", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--from-checkpoint", help="scheme-2 backbone for scheme 3")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="evaluate every point of one axis")
    p.add_argument("--axis", choices=("snr", "pathloss", "pilots"), required=True)
    p.add_argument("--modes", default="ego,unweighted,weighted")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="evaluate the channel point in the config")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-scenes", help="write the test scenes as JSON lines")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_gen_scenes)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
