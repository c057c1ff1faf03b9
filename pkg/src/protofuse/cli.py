"""Command-line entry points: ingest, meta-train, evaluate, report.

One flat dotted-key config file covers every module; each config key has
exactly one flag of the same name (a few carry short aliases), and flags
override the file. Exit codes: 0 success, 2 usage/validation, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .corpus import collapse_binary, load_dataset, load_domain, save_dataset
from .encoder import EncoderConfig
from .evaluation import (
    RECIPES,
    EvaluationReport,
    CellResult,
    ProtocolSpec,
    emit_report,
    make_recipe,
    run_protocol,
)
from .fusion import FusionStrategy
from .metalearn import MetaConfig, load_checkpoint, meta_train, save_checkpoint

USAGE_ERROR = 2
RUNTIME_ERROR = 3

# key -> (type tag, default, help). Types: int, float, str, ints (csv list).
CONFIG_SCHEMA = {
    "paths.data": ("str", "", "dataset file or directory of dataset JSON files"),
    "paths.out": ("str", "", "output directory (defaults to $PROTOFUSE_OUT or '.')"),
    "paths.checkpoint": ("str", "", "checkpoint file to load"),
    "run.seed": ("int", 0, "global seed"),
    "run.jobs": ("int", 1, "parallel (k, seed) cells during evaluate"),
    "encoder.d_model": ("int", 64, "hidden width (use 48 with 3-head joint fusion)"),
    "encoder.n_layers": ("int", 2, "transformer blocks"),
    "encoder.n_heads": ("int", 4, "self-attention heads"),
    "encoder.max_len": ("int", 64, "padded sequence length"),
    "encoder.dropout": ("float", 0.1, "dropout probability"),
    "encoder.vocab_size": ("int", 8192, "max base vocabulary size"),
    "meta.algorithm": ("str", "protonet", "protonet | protomaml | mldg"),
    "meta.epochs": ("int", 5, "meta epochs"),
    "meta.tasks": ("int", 300, "tasks per meta epoch"),
    "meta.k_choices": ("ints", [16, 32, 64, 128], "episode shot counts"),
    "meta.inner_lr": ("float", 0.01, "inner/virtual step rate"),
    "meta.outer_lr": ("float", 1e-4, "fallback outer rate"),
    "meta.beta": ("float", 1.0, "meta-test loss weight"),
    "meta.inner_steps": ("int", 5, "inner adaptation steps"),
    "meta.distance": ("str", "euclidean", "euclidean | squared_euclidean"),
    "meta.lr_encoder": ("float", 5e-5, "outer rate, encoder"),
    "meta.lr_attention": ("float", 2e-5, "outer rate, joint attention"),
    "meta.lr_head": ("float", 1e-4, "outer rate, head"),
    "fusion.kind": ("str", "none", "none | token | label | full | joint"),
    "fusion.joint_heads": ("int", 3, "joint attention heads"),
    "fusion.joint_variant": ("str", "literal", "literal | standard"),
    "finetune.epochs": ("int", -1, "fine-tune epochs (-1 = recipe default)"),
    "finetune.batch_size": ("int", 16, "fine-tune batch size"),
    "finetune.lr_floor": ("float", 1e-5, "cosine schedule minimum rate"),
    "eval.recipe": ("str", "untrained", "recipe name"),
    "eval.k": ("ints", [16, 32, 64, 128, 256], "K values"),
    "eval.seeds": ("ints", [1, 2, 3, 4, 5], "fine-tune seeds"),
    "eval.holdout_fraction": ("float", 0.2, "held-out fraction of the test domain"),
    "mlm.epochs": ("int", 5, "masked-token pretraining epochs"),
    "mlm.mask_rate": ("float", 0.15, "masking rate"),
    "mlm.lr": ("float", 2e-5, "masked-token pretraining rate"),
}

# Short aliases; each still maps 1:1 onto a schema key.
ALIASES = {
    "run.seed": "seed",
    "paths.out": "out",
    "run.jobs": "jobs",
    "meta.algorithm": "algo",
    "meta.epochs": "epochs",
    "meta.tasks": "tasks",
    "fusion.kind": "fusion",
    "eval.recipe": "recipe",
    "eval.k": "k",
    "eval.seeds": "seeds",
}


def _parse_value(key: str, raw: str):
    kind = CONFIG_SCHEMA[key][0]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "ints":
            return [int(v) for v in str(raw).split(",") if v != ""]
        return str(raw)
    except ValueError as exc:
        raise ValueError(f"config key {key}: cannot parse {raw!r} as {kind}") from exc


def load_config(path: str | Path | None) -> dict:
    """Flat `key = value` file with dotted sections; unknown keys rejected."""
    config = {k: v for k, (_, v, _) in CONFIG_SCHEMA.items()}
    if not path:
        return config
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        config[key] = _parse_value(key, raw)
    return config


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="config file")
    for key, (kind, default, help_text) in CONFIG_SCHEMA.items():
        names = [f"--{key}"]
        if key in ALIASES:
            names.append(f"--{ALIASES[key]}")
        parser.add_argument(
            *names, dest=key, metavar=kind.upper(), default=None,
            help=f"{help_text} (default: {default})",
        )


def resolve_config(args: argparse.Namespace) -> dict:
    config = load_config(getattr(args, "config", None))
    for key in CONFIG_SCHEMA:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            config[key] = _parse_value(key, flag_value)
    if not config["paths.out"]:
        config["paths.out"] = os.environ.get("PROTOFUSE_OUT", ".")
    return config


def _encoder_config(config: dict) -> EncoderConfig:
    return EncoderConfig(
        d_model=config["encoder.d_model"],
        n_layers=config["encoder.n_layers"],
        n_heads=config["encoder.n_heads"],
        max_len=config["encoder.max_len"],
        dropout=config["encoder.dropout"],
        seed=config["run.seed"],
    )


def _fusion_strategy(config: dict) -> FusionStrategy:
    return FusionStrategy(
        kind=config["fusion.kind"],
        joint_heads=config["fusion.joint_heads"],
        joint_variant=config["fusion.joint_variant"],
    )


def _meta_config(config: dict) -> MetaConfig:
    return MetaConfig(
        meta_epochs=config["meta.epochs"],
        tasks_per_epoch=config["meta.tasks"],
        k_choices=tuple(config["meta.k_choices"]),
        inner_lr=config["meta.inner_lr"],
        outer_lr=config["meta.outer_lr"],
        mldg_beta=config["meta.beta"],
        inner_steps=config["meta.inner_steps"],
        distance=config["meta.distance"],
        lr_encoder=config["meta.lr_encoder"],
        lr_attention=config["meta.lr_attention"],
        lr_head=config["meta.lr_head"],
        seed=config["run.seed"],
    )


def _load_datasets(path: str) -> list:
    if not path:
        raise ValueError("no dataset path given (use --data or paths.data)")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such dataset path: {p}")
    if p.is_dir():
        files = sorted(p.glob("*.json"))
        if not files:
            raise FileNotFoundError(f"no dataset files in {p}")
        return [load_dataset(f) for f in files]
    return [load_dataset(p)]


def cmd_ingest(args: argparse.Namespace) -> int:
    try:
        dataset = load_domain(args.manifest, args.records)
        if args.binary:
            dataset = collapse_binary(dataset, set(args.neutral or []))
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"ingest: {exc}", file=sys.stderr)
        return USAGE_ERROR
    out = Path(args.out or os.environ.get("PROTOFUSE_OUT", "."))
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"{dataset.manifest.domain_id}.json"
    save_dataset(dataset, target)
    counts = ", ".join(
        f"{name}={n}" for name, n in zip(dataset.manifest.label_names, dataset.class_counts())
    )
    print(f"wrote {target} ({len(dataset)} examples; {counts})")
    return 0


def cmd_meta_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    algo = config["meta.algorithm"]
    try:
        domains = _load_datasets(args.data or config["paths.data"])
        out = Path(config["paths.out"])
        out.mkdir(parents=True, exist_ok=True)
        state = meta_train(
            algo,
            domains,
            _meta_config(config),
            _fusion_strategy(config),
            encoder_config=_encoder_config(config),
            log_path=out / f"meta_{algo}_loss.jsonl",
        )
    except (ValueError, FileNotFoundError) as exc:
        print(f"meta-train: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    # The checkpoint carries the best epoch's parameters (monitored meta-loss).
    if state.best_model_state is not None:
        state.model.load_state_dict(state.best_model_state["model"])
        if state.mldg_hidden is not None and state.best_model_state["hidden"] is not None:
            state.mldg_hidden.load_state_dict(state.best_model_state["hidden"])
    ckpt = out / f"{algo}_{config['fusion.kind']}.ckpt"
    save_checkpoint(state, ckpt)
    mean_loss = (
        sum(r["loss"] for r in state.trace) / len(state.trace) if state.trace else float("nan")
    )
    print(f"wrote {ckpt} (best epoch {state.best_epoch}; mean loss {mean_loss:.4f})")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    recipe_name = config["eval.recipe"]
    if recipe_name not in RECIPES:
        print(
            f"evaluate: unknown recipe {recipe_name!r}; valid recipes: {', '.join(RECIPES)}",
            file=sys.stderr,
        )
        return USAGE_ERROR
    try:
        test_domain = _load_datasets(args.data or config["paths.data"])[0]
        overrides = {}
        if config["finetune.epochs"] >= 0:
            overrides["finetune_epochs"] = config["finetune.epochs"]
        recipe = make_recipe(
            recipe_name,
            encoder_config=_encoder_config(config),
            joint_heads=config["fusion.joint_heads"],
            joint_variant=config["fusion.joint_variant"],
            batch_size=config["finetune.batch_size"],
            lr_floor=config["finetune.lr_floor"],
            mlm_epochs=config["mlm.epochs"],
            mlm_mask_rate=config["mlm.mask_rate"],
            mlm_lr=config["mlm.lr"],
            vocab_size=config["encoder.vocab_size"],
            **overrides,
        )
        pretrained = None
        ckpt_path = args.checkpoint or config["paths.checkpoint"]
        if ckpt_path:
            pretrained = load_checkpoint(ckpt_path)
        train_domains = tuple(_load_datasets(args.train_data)) if args.train_data else ()
        spec = ProtocolSpec(
            test_domain=test_domain,
            recipe=recipe,
            k_values=tuple(config["eval.k"]),
            seeds=tuple(config["eval.seeds"]),
            holdout_fraction=config["eval.holdout_fraction"],
            split_seed=config["run.seed"],
            train_domains=train_domains,
        )
        report = run_protocol(spec, pretrained, jobs=config["run.jobs"])
        paths = emit_report(report, config["paths.out"])
    except (ValueError, FileNotFoundError) as exc:
        print(f"evaluate: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    for row in report.summary:
        mean = "n/a" if row["mean"] is None else f"{row['mean']:.4f}"
        std = "n/a" if row["std"] is None else f"{row['std']:.4f}"
        print(f"k={row['k']}: macro-F1 {mean} +- {std} ({row['missing']} missing)")
    print(f"wrote {paths['json']}, {paths['csv']}, {paths['plot']}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    try:
        payload = json.loads(Path(args.report).read_text())
        cells = [
            CellResult(k=c["k"], seed=c["seed"], f1=c["f1"], error=c.get("error"))
            for c in payload["cells"]
        ]
        report = EvaluationReport(
            recipe=payload["recipe"],
            domain_id=payload["config"]["domain_id"],
            config=payload["config"],
            cells=cells,
            summary=payload["summary"],
            finetune_count=len(cells),
            created_at="",
        )
        out = args.out or os.environ.get("PROTOFUSE_OUT", ".")
        paths = emit_report(report, out)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"report: {exc}", file=sys.stderr)
        return USAGE_ERROR
    print(f"wrote {paths['json']}, {paths['csv']}, {paths['plot']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofuse",
        description="Few-shot multi-domain text classification with "
        "prototype-based meta-learning and label-definition fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="validate and preprocess one domain")
    p_ingest.add_argument("manifest", help="manifest JSON file")
    p_ingest.add_argument("records", help="line-delimited JSON records file")
    p_ingest.add_argument("--out", help="output directory")
    p_ingest.add_argument("--binary", action="store_true", help="collapse labels to binary")
    p_ingest.add_argument(
        "--neutral", action="append", metavar="LABEL",
        help="label mapped to Not Offensive (repeatable)",
    )
    p_ingest.set_defaults(func=cmd_ingest)

    p_meta = sub.add_parser("meta-train", help="meta-train over training domains")
    p_meta.add_argument("--data", help="directory of dataset JSON files")
    _add_config_flags(p_meta)
    p_meta.set_defaults(func=cmd_meta_train)

    p_eval = sub.add_parser("evaluate", help="run the K-shot protocol on a test domain")
    p_eval.add_argument("--data", help="test domain dataset file")
    p_eval.add_argument("--checkpoint", help="meta-trained checkpoint")
    p_eval.add_argument("--train-data", help="training-domain datasets (binary recipe)")
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_report = sub.add_parser("report", help="re-render CSV and plot from a report JSON")
    p_report.add_argument("--report", required=True, help="report JSON file")
    p_report.add_argument("--out", help="output directory")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return args.func(args)
    except Exception as exc:  # anything unplanned is a runtime failure
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
