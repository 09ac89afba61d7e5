"""Command-line front end: train, fuse, verify, count, spectrum, gradcheck.

Run configs are strict JSON documents with sections ``backbone``, ``arc``,
``train``, ``task`` and ``io``; unknown sections or keys are rejected so a
typo can never silently fall back to a default. Every command echoes the
fully-defaulted effective config it ran with.

Exit codes: 0 success, 1 a verification failed, 2 configuration error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import accounting, analysis, checkpoint, model, reparam, training
from .adapters import AdapterBank, ArcConfig, init_adapters, resolve_hooks
from .autodiff import gradcheck
from .errors import CheckpointError, ConfigError, NumericalError, ShapeError, TrainingAborted
from .kernel import Rng
from .model import BackboneConfig
from .training import SyntheticTask, TrainConfig

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_SECTIONS = {
    "backbone": BackboneConfig,
    "arc": ArcConfig,
    "train": TrainConfig,
    "task": SyntheticTask,
}

_BACKBONE_DEFAULTS = dict(image_size=8, patch_size=4, channels=1, embed_dim=16,
                          layers=3, heads=2, classes=4)
_TRAIN_DEFAULTS = dict(lr=0.01, epochs=25, batch_size=8, warmup_epochs=2)
_TASK_DEFAULTS = dict(classes=4, image_size=8, channels=1)


@dataclasses.dataclass
class RunConfig:
    backbone: BackboneConfig
    arc: ArcConfig
    train: TrainConfig
    task: SyntheticTask
    seed: int
    out_dir: str | None

    def as_dict(self) -> dict:
        doc = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        doc["io"] = {"seed": self.seed, "out_dir": self.out_dir}
        return doc

    def digest(self) -> bytes:
        doc = self.as_dict()
        doc["io"] = {"seed": self.seed, "out_dir": None}  # out_dir is not identity
        return checkpoint.config_digest(doc)


def _build_section(name: str, cls, data: dict, defaults: dict):
    unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section {name!r}")
    merged = dict(defaults)
    merged.update(data)
    for key in ("positions", "insertion_layers"):
        if isinstance(merged.get(key), list):
            merged[key] = tuple(merged[key])
    return cls(**merged)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(doc) - (set(_SECTIONS) | {"io"}))
    if unknown:
        raise ConfigError(f"unknown section {unknown[0]!r}")
    io = doc.get("io", {})
    io_unknown = sorted(set(io) - {"seed", "out_dir"})
    if io_unknown:
        raise ConfigError(f"unknown key {io_unknown[0]!r} in section 'io'")
    sections = {}
    section_defaults = {"backbone": _BACKBONE_DEFAULTS, "train": _TRAIN_DEFAULTS,
                        "task": _TASK_DEFAULTS, "arc": {}}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(name, cls, doc.get(name, {}), section_defaults[name])
    cfg = RunConfig(seed=int(io.get("seed", 0)), out_dir=io.get("out_dir"), **sections)
    if cfg.task.image_size != cfg.backbone.image_size or cfg.task.channels != cfg.backbone.channels:
        raise ConfigError(
            f"task images {cfg.task.image_size}x{cfg.task.image_size}x{cfg.task.channels} "
            f"do not match backbone input "
            f"{cfg.backbone.image_size}x{cfg.backbone.image_size}x{cfg.backbone.channels}"
        )
    if cfg.task.classes != cfg.backbone.classes:
        raise ConfigError(
            f"task classes {cfg.task.classes} do not match backbone head {cfg.backbone.classes}"
        )
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2, sort_keys=True) + "\n")


def _sidecar_config(args) -> Path:
    if args.config:
        return Path(args.config)
    return Path(args.checkpoint).parent / "config.json"


def _load_with_config(ckpt_path, config_path):
    cfg = load_run_config(config_path)
    header, tensors = checkpoint.load(ckpt_path)
    if header.config_digest != cfg.digest():
        raise CheckpointError(
            f"checkpoint {ckpt_path} was not produced by config {config_path}"
        )
    backbone_tensors = {k: v for k, v in tensors.items() if not k.startswith("arc.")}
    bank_tensors = {k: v for k, v in tensors.items() if k.startswith("arc.")}
    model.validate_weights(cfg.backbone, backbone_tensors)
    bank = None
    if bank_tensors:
        bank = _bank_from_tensors(cfg, bank_tensors)
    return cfg, header, backbone_tensors, bank


def _bank_from_tensors(cfg: RunConfig, tensors: dict) -> AdapterBank:
    reference = init_adapters(cfg.arc, cfg.backbone, Rng(0))
    missing = sorted(set(reference.tensors) - set(tensors))
    extra = sorted(set(tensors) - set(reference.tensors))
    if missing or extra:
        raise CheckpointError(f"adapter tensors mismatch: missing {missing}, unexpected {extra}")
    for name, arr in tensors.items():
        if arr.shape != reference.tensors[name].shape:
            raise CheckpointError(
                f"adapter tensor {name!r}: shape {arr.shape}, "
                f"expected {reference.tensors[name].shape}"
            )
    reference.tensors.update(tensors)
    return reference


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = Path(args.out or cfg.out_dir or "runs/latest")
    _echo_config(cfg, out_dir)
    weights = model.init_backbone(cfg.backbone, Rng(cfg.seed))
    bank = init_adapters(cfg.arc, cfg.backbone, Rng(cfg.seed + 2))
    data = training.make_task(cfg.task, Rng(cfg.seed + 1))
    before = model.frozen_checksum(weights)
    result = training.train(cfg.backbone, weights, bank, data, cfg.train)
    after = model.frozen_checksum(weights)
    if before != after:  # pragma: no cover - would be a trainer bug
        raise NumericalError("frozen backbone changed during training")
    tensors = dict(weights)
    tensors.update(bank.tensors)
    checkpoint.save(out_dir / "checkpoint.arcl", tensors, cfg.digest())
    training.write_loss_csv(result.curve, out_dir / "loss.csv")
    train_loss, train_acc = training.evaluate(
        cfg.backbone, weights, bank, data.train_images, data.train_labels)
    eval_loss, eval_acc = training.evaluate(
        cfg.backbone, weights, bank, data.eval_images, data.eval_labels)
    print(f"steps {result.steps}  final_loss {result.final_loss:.6g}")
    print(f"train_loss {train_loss:.6g}  train_acc {train_acc:.4f}")
    print(f"eval_loss {eval_loss:.6g}  eval_acc {eval_acc:.4f}")
    print(f"wrote {out_dir / 'checkpoint.arcl'}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg, header, weights, bank = _load_with_config(args.checkpoint, _sidecar_config(args))
    if header.fused:
        raise ConfigError("checkpoint is already fused")
    if bank is None:
        raise ConfigError("checkpoint holds no adapter tensors to fuse")
    fused = reparam.fuse(weights, bank, cfg.backbone)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out, fused.tensors, cfg.digest(), fused=True)
    print(f"fused {fused.sites_fused} adapter sites into {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg, header, weights, bank = _load_with_config(args.checkpoint, _sidecar_config(args))
    if bank is None:
        raise ConfigError("unfused checkpoint holds no adapter tensors")
    fused_header, fused_tensors = checkpoint.load(args.fused)
    if not fused_header.fused:
        raise ConfigError(f"{args.fused} does not carry the fused flag")
    model.validate_weights(cfg.backbone, fused_tensors)
    fused = reparam.FusedWeights(tensors=fused_tensors)
    deviation = reparam.verify_fusion(weights, bank, cfg.backbone, fused,
                                      trials=args.trials, rng=Rng(args.seed))
    passed = deviation <= 1e-10
    print(f"max_logit_deviation {deviation:.6e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAILED


def cmd_count(args) -> int:
    knobs = {}
    if args.Dprime is not None:
        knobs["bottleneck"] = args.Dprime
    if args.m is not None:
        knobs["prompts"] = args.m
    if args.w is not None:
        knobs["attn_matrices"] = args.w
    if args.o is not None:
        knobs["operations"] = args.o
    spec = accounting.MethodSpec(args.method, **knobs)
    if args.sweep == "layers":
        rows = accounting.scaling_table(spec, layer_range=range(1, args.L + 1),
                                        embed_dim=args.D)
    elif args.sweep == "backbones":
        rows = accounting.scaling_table(spec, backbones=accounting.DEFAULT_BACKBONES)
    else:
        rows = accounting.scaling_table(
            spec, backbones=[(f"D={args.D}", args.D, args.L)])
    print(accounting.format_rows(rows, args.method))
    if args.csv:
        accounting.write_rows_csv(rows, args.method, args.csv)
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    cfg, header, weights, bank = _load_with_config(args.checkpoint, _sidecar_config(args))
    if bank is None:
        raise ConfigError("checkpoint holds no adapter tensors")
    reports = analysis.rank_sweep(bank, bins=args.bins)
    paths = analysis.write_spectrum_csvs(reports, args.out)
    summary = analysis.sweep_summary(reports)
    print(f"analyzed {summary['reports']} matrices  "
          f"median_effective_rank {summary['median_effective_rank']:.6g}")
    print(f"wrote {len(paths)} files under {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config)
    weights = model.init_backbone(cfg.backbone, Rng(cfg.seed))
    bank = init_adapters(cfg.arc, cfg.backbone, Rng(cfg.seed + 2))
    hooks = resolve_hooks(cfg.arc, cfg.backbone)
    perturb = Rng(cfg.seed + 3)
    live = {name: perturb.normals(arr.shape, 0.3) for name, arr in bank.tensors.items()}
    shape = (cfg.backbone.image_size, cfg.backbone.image_size, cfg.backbone.channels)
    image = Rng(cfg.seed + 4).normals(shape)
    label = np.array([0])

    def build(tape, values):
        vals = {n: tape.parameter(n, a, trainable=False) for n, a in weights.items()}
        for name, base in live.items():
            vals[name] = tape.parameter(name, values.get(name, base),
                                        trainable=name in values)
        logits = model.forward(tape, cfg.backbone, vals, image, hooks=hooks)
        return tape.cross_entropy(logits, label)

    report = gradcheck(build, live, tol=args.tol)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arclab",
                                     description="adapter re-composition laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train adapters + head on a synthetic task")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default: io.out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fold trained adapters into the backbone")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None,
                   help="run config (default: config.json next to the checkpoint)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify", help="compare adapted-unfused vs fused forward")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--trials", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("count", help="closed-form parameter counts")
    p.add_argument("--method", required=True, choices=accounting.METHODS)
    p.add_argument("--D", type=int, default=768)
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--Dprime", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--w", type=int, default=None)
    p.add_argument("--o", type=int, default=None)
    p.add_argument("--sweep", choices=("layers", "backbones"), default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("spectrum", help="singular-value spectra of a full-rank bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("gradcheck", help="finite-difference check of adapter gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, CheckpointError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NumericalError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()
