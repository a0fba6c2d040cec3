"""Command line entry point: ``forgelab <verb> [--config PATH] [--seed N] [--out DIR] [--jobs N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..core import RngStream, read_image, write_image
from ..watermark import extract, load_scheme, save_scheme
from .experiments import (ExperimentConfig, ExperimentReport, StageError, ablate, check_report, make_scheme,
                          run, stage, target_message)
from .synth import DOMAINS, synth_dataset

SCENARIO_VERBS = ("train", "attack", "baseline", "robustness", "defense", "detectability")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _summary(report: ExperimentReport) -> str:
    lines = [f"scenario {report.scenario}  config {report.config_hash}  c={report.threshold_c}  "
             f"wall {report.wall_time:.1f}s"]
    for group, agg in report.aggregates.items():
        vals = "  ".join(f"{k}={v:.4g}" for k, v in agg.items() if isinstance(v, (int, float)))
        lines.append(f"  [{group}] {vals}")
    for name, r in report.extras.get("roc", {}).items():
        lines.append(f"  roc {name}: auc={r['auc']:.4f}")
    return "\n".join(lines)


def cmd_synth(cfg, args):
    out = Path(cfg.out)
    with stage("synth"):
        images = synth_dataset(args.n or cfg.n_attack, cfg.size, RngStream(cfg.seed).child("synth"),
                               cfg.channels, args.domain)
    with stage("write-images"):
        (out / "images").mkdir(parents=True, exist_ok=True)
        ext = "ppm" if cfg.channels == 3 else "pgm"
        for i, img in enumerate(images):
            write_image(img, out / "images" / f"synth_{i:04d}.{ext}")
    print(f"wrote {len(images)} images to {out / 'images'}")


def cmd_embed(cfg, args):
    out = Path(cfg.out)
    with stage("scheme"):
        scheme = load_scheme(args.scheme) if args.scheme else make_scheme(cfg)
        m = target_message(cfg)
    with stage("embed"):
        (out / "images").mkdir(parents=True, exist_ok=True)
        paths = sorted(Path(args.input).glob("*.p[gp]m"))
        if not paths:
            raise FileNotFoundError(f"no .pgm/.ppm images in {args.input}")
        accs = []
        for p in paths:
            y = scheme.embed(read_image(p), m)
            write_image(y, out / "images" / p.name)
            accs.append(float(np.mean(extract(scheme, read_image(out / "images" / p.name)) == m)))
        save_scheme(scheme, out / "scheme.json")
        (out / "message.txt").write_text("".join(map(str, m.tolist())) + "\n")
    print(f"embedded {len(paths)} images; mean extraction accuracy after 8-bit save {np.mean(accs):.4f}")


def cmd_scenario(cfg, args):
    report = run(cfg.replace(scenario=args.verb))
    print(_summary(report))


def cmd_ablate(cfg, args):
    values = [_parse_value(v) for v in args.values.split(",")]
    rows = ablate(cfg, args.param, values)
    print(f"{args.param:>8} {'psnr':>10} {'bit_acc':>10} {'fpr':>8}")
    for v, p, a, f in rows:
        print(f"{v!s:>8} {p:>10.3f} {a:>10.4f} {f:>8.3f}")


def cmd_report(cfg, args):
    with stage("read-report"):
        report = ExperimentReport.load(args.report or cfg.out)
    print(_summary(report))
    if not check_report(report):
        raise StageError("check-report", ValueError("aggregates do not match the per-image records"))
    print("aggregates verified against records")


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON experiment config")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--jobs", type=int, help="worker processes for per-image work")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field; VALUE is parsed as JSON when possible")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="forgelab", description="Desk-scale watermark forgery lab.")
    sub = ap.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("synth", parents=[common], help="write procedural images")
    p.add_argument("--n", type=int, help="number of images (default: n_attack)")
    p.add_argument("--domain", choices=sorted(DOMAINS), default="generated")
    p.set_defaults(fn=cmd_synth)
    p = sub.add_parser("embed", parents=[common], help="watermark a directory of PGM/PPM images")
    p.add_argument("input", help="directory of .pgm/.ppm images")
    p.add_argument("--scheme", help="scheme JSON (default: from the config)")
    p.set_defaults(fn=cmd_embed)
    for verb in SCENARIO_VERBS:
        p = sub.add_parser(verb, parents=[common], help=f"run the {verb} scenario")
        p.set_defaults(fn=cmd_scenario)
    p = sub.add_parser("ablate", parents=[common], help="sweep refinement iterations or lambda")
    p.add_argument("--param", choices=("L", "lam"), required=True)
    p.add_argument("--values", required=True, help="comma separated values")
    p.set_defaults(fn=cmd_ablate)
    p = sub.add_parser("report", parents=[common], help="print and check a stored report")
    p.add_argument("report", nargs="?", help="report.json or its directory (default: --out)")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with stage("config"):
            cfg = build_config(args)
        args.fn(cfg, args)
    except StageError as exc:
        print(f"forgelab {args.verb}: error in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
