"""Command-line entry point.

Exit codes: 0 ok, 1 failed check, 2 usage or configuration error, 3 I/O
failure, 4 numeric fault. Every subcommand validates all of its inputs
before writing anything.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import fields, fileio, metrics, synthdata
from .errors import ConfigError, ContractViolation, NumericFault, VolumeFormatError
from .losses import LossConfig
from .network import VARIANTS, ArchitectureConfig, load_checkpoint
from .trainer import ABLATION_VARIANTS, TrainConfig, default_sweep_grid, evaluate_model, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
CONFIG_VERSION = 1

log = logging.getLogger("daffnet")

_NUM = {"type": "number"}
CONFIG_SCHEMA = {
    "type": "object",
    "required": ["corpus", "output_dir"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "corpus": {"type": "string", "minLength": 1},
        "output_dir": {"type": "string", "minLength": 1},
        "variant": {"enum": list(VARIANTS)},
        "architecture": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variant": {"enum": list(VARIANTS)},
                "encoder_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "seg_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "fusion_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "integration_steps": {"type": "integer", "minimum": 0},
                "gaussian_sigma": {"type": "number", "exclusiveMinimum": 0},
                "gaussian_ksize": {"type": "integer", "minimum": 1},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_njd": _NUM,
                "lambda_seg": _NUM,
                "lambda_fuse": _NUM,
                "ncc_window": {"type": "integer"},
                "focal_gamma": _NUM,
                "focal_alpha": _NUM,
                "num_classes": {"type": "integer"},
            },
        },
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "iterations": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "checkpoint_interval": {"type": "integer", "minimum": 1},
        "grad_clip": {"type": ["number", "null"]},
        "ablation_variants": {"type": "array", "items": {"enum": list(VARIANTS)}, "minItems": 1},
        "sweep_grid": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        },
    },
}


def load_config(path) -> tuple[TrainConfig, dict]:
    """Parse and validate a run config; returns the training config and the raw document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    arch = dict(doc.get("architecture", {}))
    if "variant" in doc:
        arch.setdefault("variant", doc["variant"])
    keys = ("learning_rate", "batch_size", "iterations", "seed", "checkpoint_interval", "grad_clip")
    cfg = TrainConfig(
        architecture=ArchitectureConfig.from_dict(arch),
        loss=LossConfig(**doc.get("loss", {})),
        corpus=doc["corpus"],
        output_dir=doc["output_dir"],
        **{k: doc[k] for k in keys if k in doc},
    )
    if not (Path(cfg.corpus) / "manifest.json").is_file() and not Path(cfg.corpus).is_file():
        raise ConfigError(f"corpus manifest not found under {cfg.corpus}")
    return cfg, doc


def _dims(values: list[int]) -> tuple[int, int, int]:
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise ConfigError("--dims takes one or three integers")


def cmd_gen(args) -> int:
    dims = _dims(args.dims)
    synthdata._check_dims(dims)
    if args.max_disp < 0 or args.max_disp > min(dims) / 8:
        raise ContractViolation(f"--max-disp must lie in [0, {min(dims) / 8}]")
    path = synthdata.write_corpus(
        args.out, args.pairs, dims, args.seed, args.max_disp, args.held_out, labels=not args.no_labels
    )
    print(f"wrote {args.pairs} pairs to {path}")
    return EXIT_OK


def _evaluate_into(cfg: TrainConfig, corpus: synthdata.Corpus, checkpoint: Path) -> None:
    if not corpus.has_labels or not corpus.ids("test"):
        return
    model, *_ = load_checkpoint(checkpoint)
    report = evaluate_model(model, corpus, "test", cfg.variant)
    out = Path(cfg.output_dir)
    (out / "eval_report.jsonl").write_text(report.to_jsonl())
    table = metrics.format_table([report.summary_row()])
    (out / "eval_table.txt").write_text(table)
    print(table, end="")


def cmd_train(args) -> int:
    cfg, _ = load_config(args.config)
    corpus = synthdata.Corpus(cfg.corpus)
    result = train(cfg, corpus)
    print(f"final checkpoint: {result.checkpoint}")
    _evaluate_into(cfg, corpus, result.checkpoint)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import run_ablation

    cfg, doc = load_config(args.config)
    corpus = synthdata.Corpus(cfg.corpus)
    if not corpus.has_labels:
        raise ConfigError("ablation needs a corpus with label files")
    out = run_ablation(cfg, tuple(doc.get("ablation_variants", ABLATION_VARIANTS)), corpus)
    print(out["table"], end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .trainer import run_lambda_sweep

    cfg, doc = load_config(args.config)
    corpus = synthdata.Corpus(cfg.corpus)
    if not corpus.has_labels:
        raise ConfigError("the loss-weight sweep needs a corpus with label files")
    grid = [tuple(c) for c in doc.get("sweep_grid", default_sweep_grid())]
    out = run_lambda_sweep(cfg, grid, corpus)
    print(out["table"], end="")
    return EXIT_OK


def _read(path, kind: str) -> fileio.VolumeRecord:
    rec = fileio.read_volume(path)
    if rec.kind != kind:
        raise ConfigError(f"{path}: expected a {kind} volume, found {rec.kind}")
    return rec


def cmd_register(args) -> int:
    if (args.labels is None) != (args.out_warped_labels is None):
        raise ConfigError("--labels and --out-warped-labels must be given together")
    model, *_ = load_checkpoint(args.model)
    fixed = _read(args.fixed, "intensity")
    moving = _read(args.moving, "intensity")
    labels = _read(args.labels, "labels") if args.labels else None
    expected = fixed.data.shape
    for name, rec in (("moving", moving), ("labels", labels)):
        if rec is not None and rec.data.shape != expected:
            raise ContractViolation(f"dim mismatch: {name} has dims {rec.data.shape}, expected {expected} (fixed)")
    model.config.check_input(expected)

    dtype = torch.get_default_dtype()
    m = torch.from_numpy(moving.data).to(dtype)[None, None]
    f = torch.from_numpy(fixed.data).to(dtype)[None, None]
    model.eval()
    with torch.no_grad():
        u = model(m, f, mode="infer").field
        warped = fields.warp(m, u) if args.out_warped else None
        warped_labels = None
        if labels is not None:
            lab = torch.from_numpy(labels.data).to(dtype)[None, None]
            warped_labels = fields.warp(lab, u, interp="nearest")
    fileio.write_volume(args.out_field, u[0].numpy(), "field", fixed.spacing)
    if warped is not None:
        fileio.write_volume(args.out_warped, warped[0, 0].numpy(), "intensity", fixed.spacing)
    if warped_labels is not None:
        out = np.rint(warped_labels[0, 0].numpy()).astype(np.int64)
        fileio.write_volume(args.out_warped_labels, out, "labels", fixed.spacing)
    print(f"NJD%: {metrics.njd_percent(u):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, *_ = load_checkpoint(args.model)
    corpus = synthdata.Corpus(args.manifest)
    if not corpus.has_labels:
        raise ConfigError("evaluation needs label files in the corpus")
    model.config.check_input(corpus.manifest["dims"])
    split = args.split if args.split != "all" else None
    if not corpus.ids(split):
        raise ConfigError(f"corpus has no pairs in split {args.split!r}")
    report = metrics.MetricsReport(label=model.variant)
    for pid in corpus.ids(split):
        b = corpus.tensors(pid, labels=True)
        report.pairs.append(
            metrics.evaluate_pair(model, b["moving"], b["fixed"], b["moving_labels"], b["fixed_labels"], pid)
        )
    path = Path(args.report)
    path.write_text(report.to_jsonl())
    table = metrics.format_table([report.summary_row()])
    path.with_name(path.name + ".table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import CHECKS, run_checks

    names = args.only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {unknown}; available: {', '.join(CHECKS)}")
    failed = []
    for r in run_checks(names):
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:20s} {r.detail}  ({r.seconds:.1f}s)", flush=True)
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"failed properties: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="daffnet", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic pair corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=45)
    g.add_argument("--dims", type=int, nargs="+", default=[32])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-disp", type=float, default=4.0)
    g.add_argument("--held-out", type=int, default=None, help="evaluation pairs (default pairs // 9)")
    g.add_argument("--no-labels", action="store_true", help="omit label files (image-only corpus)")
    g.set_defaults(func=cmd_gen)

    for name, func, text in (
        ("train", cmd_train, "train one variant"),
        ("ablate", cmd_ablate, "train and compare the ablation variants"),
        ("sweep", cmd_sweep, "loss-weight sweep of the full model"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.set_defaults(func=func)

    r = sub.add_parser("register", help="register one moving volume to a fixed volume")
    r.add_argument("--model", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--out-field", required=True)
    r.add_argument("--out-warped")
    r.add_argument("--labels")
    r.add_argument("--out-warped-labels")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the embedded verification suite")
    c.add_argument("--only", nargs="+", metavar="NAME")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VolumeFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
