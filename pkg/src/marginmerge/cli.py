"""Command-line driver.

Exit codes: 0 success, 2 config/validation, 3 IO or corrupt file, 4 protocol,
5 numeric.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, metrics
from .config import backbone_config, load_config
from .datagen import SyntheticSpec, generate, load_fixture, save_fixture
from .errors import CorruptionError, InputError, MarginMergeError, ProtocolError
from .protocol import MERGED, PRETRAIN_EPOCHS, PRETRAIN_LR, build_stream, pretrain_from_fixture, run_sessions, train_complementary
from .numerics import SeededRng

log = logging.getLogger("marginmerge")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 2, 3, 4, 5


def _fixture_path(args, cfg):
    path = args.fixture or cfg.get("paths", {}).get("fixture")
    if not path:
        raise InputError("no fixture given (use --fixture or paths.fixture in the config)")
    return path


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON ({exc})") from exc


def cmd_gen_data(args):
    spec = SyntheticSpec.from_dict(_read_json(args.spec))
    manifest = save_fixture(generate(spec, args.seed), args.out)
    print(json.dumps(manifest["checksums"], sort_keys=True))


def cmd_pretrain(args):
    cfg = load_config(args.config)
    fixture = load_fixture(_fixture_path(args, cfg))
    rng = SeededRng(cfg["seed"]).substream("pretrain")
    backbone = pretrain_from_fixture(fixture, cfg, rng, epochs=args.epochs, lr=args.lr)
    manifest = checkpoint.save_backbone(args.out, backbone, {"seed": cfg["seed"], "fixture_seed": fixture.seed})
    print(manifest["content_hash"])


def cmd_train_base(args):
    cfg = load_config(args.config)
    if args.margin is not None:
        cfg = copy.deepcopy(cfg)
        cfg["train"]["m"] = args.margin
    fixture = load_fixture(_fixture_path(args, cfg))
    backbone = checkpoint.load_backbone(args.backbone)
    expected = backbone_config(cfg, fixture.spec.patch_dim)
    if backbone.config != expected:
        raise InputError(f"backbone checkpoint config {backbone.config} does not match run config {expected}")
    root = SeededRng(cfg["seed"])
    stream = build_stream(fixture, cfg["stream"], root.substream("stream"))
    result = train_complementary(backbone, stream.sessions[0], cfg, root.substream("base"), merge=not args.no_merge)
    manifest = checkpoint.save_model(args.out, backbone, result, {"seed": cfg["seed"], "train": cfg["train"], "merge": not args.no_merge})
    print(manifest["content_hash"])


def cmd_run_fscil(args):
    cfg = load_config(args.config)
    fixture = load_fixture(_fixture_path(args, cfg))
    backbone, base, manifest = checkpoint.load_model(args.model)
    if checkpoint.backbone_hash(backbone) != manifest["backbone_hash"]:
        raise CorruptionError("backbone weights do not match the checkpoint's recorded hash")
    root = SeededRng(cfg["seed"])
    stream = build_stream(fixture, cfg["stream"], root.substream("stream"))
    if list(stream.base_classes) != list(base.base_classes):
        raise ProtocolError(
            f"checkpoint was trained on base classes {base.base_classes}, stream starts with {stream.base_classes}"
        )
    mpcc_on = {"on": True, "off": False, None: cfg["mpcc"]["enabled"]}[args.mpcc]
    ms, _ = run_sessions(backbone, base, stream, cfg, root.substream("sessions"), MERGED, mpcc_on)
    echo = dict(cfg, mpcc=dict(cfg["mpcc"], enabled=mpcc_on))
    echo.pop("paths", None)
    merge_ref = str(Path(args.model) / "merge_report.json") if base.merge_report else None
    report = metrics.build_report([m.accuracy for m in ms], ms[-1].records, cfg["seed"], echo, merge_ref)
    metrics.validate_report(report)
    out = args.report or cfg.get("paths", {}).get("report_out")
    text = metrics.dumps_report(report)
    if out:
        Path(out).write_text(text)
    print(metrics.render_table(report))


def cmd_report(args):
    path = Path(args.input)
    if not path.is_file():
        raise FileNotFoundError(f"no report at {path}")
    try:
        report = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: {exc}") from exc
    metrics.validate_report(report)
    print(metrics.render_csv(report) if args.format == "csv" else metrics.render_table(report), end="")
    if args.format != "csv":
        print()


def build_parser():
    p = argparse.ArgumentParser(prog="marginmerge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic fixture")
    g.add_argument("--spec", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="pretrain the frozen backbone on the pretext split")
    g.add_argument("--config", required=True)
    g.add_argument("--fixture")
    g.add_argument("--out", required=True)
    g.add_argument("--epochs", type=int, default=PRETRAIN_EPOCHS)
    g.add_argument("--lr", type=float, default=PRETRAIN_LR)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("train-base", help="train, score and merge the two adapter sets")
    g.add_argument("--config", required=True)
    g.add_argument("--backbone", required=True)
    g.add_argument("--fixture")
    g.add_argument("--out", required=True)
    g.add_argument("--margin", type=float, help="override train.m")
    g.add_argument("--no-merge", action="store_true", help="train a single adapter set and use it directly")
    g.set_defaults(func=cmd_train_base)

    g = sub.add_parser("run-fscil", help="run all incremental sessions and write a report")
    g.add_argument("--config", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--fixture")
    g.add_argument("--mpcc", choices=("on", "off"))
    g.add_argument("--report")
    g.set_defaults(func=cmd_run_fscil)

    g = sub.add_parser("report", help="render a run report")
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--format", choices=("table", "csv"), default="table")
    g.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except MarginMergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
