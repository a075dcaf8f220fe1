"""``synthreid`` command line: generate, analyze, select, train, eval, report, pipeline."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import (DIMENSIONS, SCHEMA, GeneratorConfig, generate_manifest, illumination_range,
                      load_manifest, parse_viewpoint, persist_manifest)
from .errors import BadConfig, SynthReIDError
from .evaluation import EvalReport
from .fileio import read_text as _read_text, write_text as _write_text
from .features import ExtractorConfig, init_extractor, load_weights, persist_weights
from .model import (ErasingParams, ModelConfig, TrainConfig, init_model, load_model, persist_model,
                    train)
from .pipeline import derive_seed, evaluate_model
from .report import emit_report
from .style import DEFAULT_K, DEFAULT_SAMPLE_CAP, AttributeSelection, LossTable, apply_selection
from .style import attribute_loss_table, select_attributes

SEED_ENV = "GPR_SEED"

_GEN_KEYS = {"background": "backgrounds", "weather": "weathers",
             "illumination": "illuminations", "viewpoint": "viewpoints"}


class UsageError(Exception):
    """Bad command-line usage; exits with status 2."""


# -- helpers ----------------------------------------------------------------------------------

def _seed(explicit: int | None, configured: int | None = None) -> int:
    """Seed precedence: --seed flag, then $GPR_SEED, then the config file, then 0."""
    if explicit is not None:
        return explicit
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0 if configured is None else int(configured)


def _split(value: str | None) -> list[str] | None:
    if value is None:
        return None
    return [v.strip() for v in value.split(",") if v.strip()]


def _illuminations(values: Sequence[str]) -> tuple[str, ...]:
    """Accept band labels and hour ranges such as ``06~18`` spanning several bands."""
    out = []
    for v in values:
        if v in SCHEMA.illumination_bands:
            out.append(v)
        else:
            try:
                start, end = (int(t) for t in v.split("~"))
            except ValueError:
                raise BadConfig(f"unknown illumination {v!r}") from None
            out.extend(illumination_range(start, end))
    return tuple(dict.fromkeys(out))


def _parse_k(text: str | None) -> dict[str, int]:
    if not text:
        return dict(DEFAULT_K)
    k = dict(DEFAULT_K)
    for item in _split(text):
        dim, _, num = item.partition("=")
        if dim not in DIMENSIONS or not num.strip().lstrip("-").isdigit():
            raise UsageError(f"bad --k item {item!r}; use e.g. background=3,weather=2")
        k[dim] = int(num)
    return k


def _generator_config(data: dict, seed: int) -> GeneratorConfig:
    data = dict(data)
    data.setdefault("master_seed", seed)
    if "illuminations" in data:
        data["illuminations"] = list(_illuminations([str(v) for v in data["illuminations"]]))
    config = GeneratorConfig.from_dict(data)
    config.validate()
    return config


def _load_selection(path) -> AttributeSelection:
    return AttributeSelection.from_json(_read_text(path))


# -- pipeline config ----------------------------------------------------------------------------

_NARROW_TARGET = {
    "num_identities": 4,
    "backgrounds": ["#1", "#4", "#6"],
    "weathers": ["clear", "neutral"],
    "illuminations": ["06~18"],
    "viewpoints": [60, 90, 180, 210, 240, 270],
}


@dataclass
class PipelineConfig:
    seed: int | None = None
    source: dict = field(default_factory=lambda: {"num_identities": 8})
    target: dict = field(default_factory=lambda: dict(_NARROW_TARGET))
    extractor: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=lambda: {"sample_cap": 64})
    selection: dict = field(default_factory=lambda: {"k": dict(DEFAULT_K)})
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: {"epochs": 3})

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise BadConfig(f"unknown pipeline config keys: {sorted(unknown)}")
        base = cls()
        for key, value in data.items():
            if key != "seed" and not isinstance(value, dict):
                raise BadConfig(f"pipeline config section {key!r} must be an object")
            setattr(base, key, value)
        return base


def _extractor_config(data: dict, seed: int) -> ExtractorConfig:
    data = dict(data)
    data.setdefault("weight_seed", seed)
    if "layers" in data:
        from .features import LayerSpec
        data["layers"] = tuple(LayerSpec(**spec) if isinstance(spec, dict) else LayerSpec(int(spec))
                               for spec in data["layers"])
    try:
        config = ExtractorConfig(**data)
    except TypeError as err:
        raise BadConfig(f"bad extractor config: {err}") from None
    config.validate()
    return config


def _train_config(data: dict, seed: int) -> TrainConfig:
    data = dict(data)
    data.setdefault("seed", seed)
    if "erasing" in data:
        e = data["erasing"]
        data["erasing"] = ErasingParams(e.get("probability", 0.5), tuple(e.get("area", (0.02, 0.4))),
                                        tuple(e.get("aspect", (0.3, 3.3))))
    try:
        config = TrainConfig(**data)
    except TypeError as err:
        raise BadConfig(f"bad train config: {err}") from None
    config.validate()
    return config


def _model_config(data: dict, num_identities: int, seed: int) -> ModelConfig:
    data = dict(data)
    data["num_identities"] = num_identities
    data.setdefault("init_seed", seed)
    try:
        config = ModelConfig(**data)
    except TypeError as err:
        raise BadConfig(f"bad model config: {err}") from None
    config.validate()
    return config


# -- subcommands -------------------------------------------------------------------------------

def cmd_generate(args) -> None:
    data = {"num_identities": args.ids, "image_width": args.width, "image_height": args.height}
    for dim, key in _GEN_KEYS.items():
        values = _split(getattr(args, key))
        if values is not None:
            data[key] = values
    config = _generator_config(data, _seed(args.seed))
    persist_manifest(generate_manifest(config), args.out)


def _analyze(source, target, extractor, sample_cap: int, seed: int, workers: int) -> LossTable:
    return attribute_loss_table(extractor, source, target, sample_cap=sample_cap, seed=seed,
                                workers=workers)


def cmd_analyze(args) -> None:
    seed = _seed(args.seed)
    source, target = load_manifest(args.source), load_manifest(args.target)
    if args.weights:
        extractor = load_weights(args.weights)
    else:
        extractor = init_extractor(ExtractorConfig(
            weight_seed=seed if args.extractor_seed is None else args.extractor_seed,
            input_height=source.generator_config.image_height,
            input_width=source.generator_config.image_width))
    table = _analyze(source, target, extractor, args.sample_cap, seed, args.workers)
    _write_text(args.out, table.to_csv())


def cmd_select(args) -> None:
    k = _parse_k(args.k)
    table = LossTable.from_csv(_read_text(args.table))
    _write_text(args.out, select_attributes(table, k).to_json())


def cmd_train(args) -> None:
    seed = _seed(args.seed)
    manifest = load_manifest(args.manifest)
    if args.selection:
        manifest = apply_selection(manifest, _load_selection(args.selection))
    tcfg = _train_config({"epochs": args.epochs, "p": args.batch_p, "k": args.batch_k,
                          "lr": args.lr, "margin": args.margin}, seed)
    mcfg = _model_config({"embedding_dim": args.embedding_dim}, len(manifest.identities()), seed)
    model, log = train(init_model(mcfg), manifest, tcfg)
    persist_model(model, args.out)
    if args.log:
        _write_text(args.log, log.to_csv())


def cmd_eval(args) -> None:
    report = evaluate_model(load_model(args.model), load_manifest(args.manifest), _seed(args.seed))
    _write_text(args.out, report.to_csv())


def cmd_report(args) -> None:
    if args.selection and args.k:
        raise UsageError("--selection and --k are mutually exclusive")
    k = None if args.selection else _parse_k(args.k)
    table = LossTable.from_csv(_read_text(args.table))
    report = EvalReport.from_csv(_read_text(args.eval)) if args.eval else None
    if args.selection:
        k = _load_selection(args.selection).k
    emit_report(table, report, args.out, k)


def run_pipeline(config: PipelineConfig, seed: int, out_dir, workers: int = 1) -> None:
    """generate -> analyze -> select -> train -> eval -> report, every stage through files."""
    out = Path(out_dir)
    seeds = {name: derive_seed(seed, name)
             for name in ("source", "target", "extractor", "analysis", "model", "train", "eval")}
    source_cfg = _generator_config(config.source, seeds["source"])
    target_cfg = _generator_config(config.target, seeds["target"])
    persist_manifest(generate_manifest(source_cfg), out / "source_manifest.txt")
    persist_manifest(generate_manifest(target_cfg), out / "target_manifest.txt")

    ex_cfg = _extractor_config({"input_height": source_cfg.image_height,
                                "input_width": source_cfg.image_width, **config.extractor},
                               seeds["extractor"])
    persist_weights(init_extractor(ex_cfg), out / "extractor.gprw")

    source = load_manifest(out / "source_manifest.txt")
    target = load_manifest(out / "target_manifest.txt")
    sample_cap = int(config.analysis.get("sample_cap", DEFAULT_SAMPLE_CAP))
    table = _analyze(source, target, load_weights(out / "extractor.gprw"), sample_cap,
                     seeds["analysis"], workers)
    _write_text(out / "loss_table.csv", table.to_csv())

    k = {**DEFAULT_K, **config.selection.get("k", {})}
    selection = select_attributes(LossTable.from_csv(_read_text(out / "loss_table.csv")), k)
    _write_text(out / "selection.json", selection.to_json())

    train_set = apply_selection(source, _load_selection(out / "selection.json"))
    tcfg = _train_config(config.train, seeds["train"])
    mcfg = _model_config(config.model, len(train_set.identities()), seeds["model"])
    model, log = train(init_model(mcfg), train_set, tcfg)
    persist_model(model, out / "model.gprm")
    _write_text(out / "train_log.csv", log.to_csv())

    report = evaluate_model(load_model(out / "model.gprm"), target, seeds["eval"])
    _write_text(out / "eval.csv", report.to_csv())

    metadata = {
        "version": __version__,
        "numpy": np.__version__,
        "seed": seed,
        "stage_seeds": seeds,
        "config": {
            "source": source_cfg.to_dict(),
            "target": target_cfg.to_dict(),
            "extractor": asdict(ex_cfg),
            "analysis": {"sample_cap": sample_cap},
            "model": asdict(mcfg),
            "train": asdict(tcfg),
        },
        "selection": {d: list(v) for d, v in selection.values.items()},
    }
    emit_report(LossTable.from_csv(_read_text(out / "loss_table.csv")),
                EvalReport.from_csv(_read_text(out / "eval.csv")), out / "report", k, metadata)


def cmd_pipeline(args) -> None:
    data = {}
    if args.config:
        try:
            data = json.loads(_read_text(args.config))
        except json.JSONDecodeError as err:
            raise BadConfig(f"{args.config}: invalid JSON ({err.msg}, line {err.lineno})") from None
        if not isinstance(data, dict):
            raise BadConfig(f"{args.config}: top level must be an object")
    config = PipelineConfig.from_dict(data)
    run_pipeline(config, _seed(args.seed, config.seed), args.out, args.workers)


# -- argument parsing ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="synthreid", description=__doc__)
    parser.add_argument("--version", action="version", version=f"synthreid {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="write a factorial dataset manifest")
    p.add_argument("--ids", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--backgrounds")
    p.add_argument("--weathers")
    p.add_argument("--illuminations", help="bands or hour ranges, e.g. 06~18")
    p.add_argument("--viewpoints")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=64)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="attribute-style loss table of source slices vs target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="extractor weights file; default: seeded init")
    p.add_argument("--extractor-seed", type=int)
    p.add_argument("--sample-cap", type=int, default=DEFAULT_SAMPLE_CAP)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("select", help="top-k smallest-loss values per dimension")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", help="e.g. background=3,weather=2,illumination=4,viewpoint=6")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="train the embedding model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--selection")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-p", type=int, default=4)
    p.add_argument("--batch-k", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--margin", type=float, default=0.3)
    p.add_argument("--embedding-dim", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mAP / CMC of a model on a target manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="CSV + SVG report bundle")
    p.add_argument("--table", required=True)
    p.add_argument("--eval")
    p.add_argument("--selection")
    p.add_argument("--k")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every stage from one JSON config")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        args.func(args)
    except UsageError as err:
        print(f"UsageError: {err}", file=sys.stderr)
        return 2
    except SynthReIDError as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
