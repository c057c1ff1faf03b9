"""End-to-end K-shot protocol: holdout, fine-tune grid, macro-F1, reports.

A recipe names a full model pipeline (initialization, fusion, fine-tune
head and rates). run_protocol holds out part of a test domain once, then
for every (K, seed) cell draws a K-shot sample, fine-tunes a private copy
of the initial state, and scores the holdout with macro-F1.
"""

from __future__ import annotations

import copy
import csv
import datetime
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .corpus import Dataset, collapse_binary, holdout_split, kshot_sample
from .encoder import EncoderConfig, mlm_pretrain
from .fusion import FusionStrategy
from .metalearn import (
    LearnerState,
    build_model,
    load_checkpoint,
    predict,
    supervised_finetune,
)

RECIPES = (
    "untrained",
    "retrained",
    "binary",
    "protonet",
    "protomaml",
    "mldg",
    "protonet_token",
    "protonet_label",
    "protonet_full",
    "je_protonet",
    "je_protonet_untrained",
    "je_protonet_cls",
)


def macro_f1(predictions: Sequence[int], golds: Sequence[int], n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all n_classes.

    Per class, F1 = 2TP / (2TP + FP + FN), which equals 2PR/(P+R) with the
    0/0 -> 0 convention for precision and recall. Computed in exact rational
    arithmetic and converted to float once at the end.
    """
    if len(predictions) != len(golds):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds"
        )
    for seq, name in ((predictions, "prediction"), (golds, "gold")):
        for v in seq:
            if not 0 <= v < n_classes:
                raise ValueError(f"{name} index {v} out of range for {n_classes} classes")
    tp = [0] * n_classes
    fp = [0] * n_classes
    fn = [0] * n_classes
    for p, g in zip(predictions, golds):
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    total = Fraction(0)
    for c in range(n_classes):
        denom = 2 * tp[c] + fp[c] + fn[c]
        if denom:
            total += Fraction(2 * tp[c], denom)
    return float(total / n_classes)


@dataclass(frozen=True)
class Recipe:
    """A named model pipeline: initialization, fusion, head, and rates."""

    name: str
    fusion: FusionStrategy
    head: str
    finetune_epochs: int
    lr_encoder: float
    lr_attention: float | None = None
    head_lr_by_k: dict = field(default_factory=dict)  # K -> peak head lr; -1 is default
    needs_checkpoint: bool = False
    uses_mlm: bool = False
    uses_binary: bool = False
    mlm_epochs: int = 5
    mlm_mask_rate: float = 0.15
    mlm_lr: float = 2e-5
    binary_epochs: int = 3
    batch_size: int = 16
    lr_floor: float = 1e-5
    distance: str = "euclidean"
    encoder_config: EncoderConfig = EncoderConfig()
    vocab_size: int = 8192

    def head_lr(self, k: int) -> float:
        return self.head_lr_by_k.get(k, self.head_lr_by_k.get(-1, 1e-4))

    def rates(self, k: int) -> dict[str, float]:
        out = {"encoder": self.lr_encoder, "head": self.head_lr(k)}
        if self.lr_attention is not None:
            out["attention"] = self.lr_attention
        return out


def make_recipe(name: str, *, encoder_config: EncoderConfig | None = None, **overrides) -> Recipe:
    """Recipe with its published default hyperparameters; overrides win."""
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; valid recipes: {', '.join(RECIPES)}")
    cfg = encoder_config or EncoderConfig()
    none = FusionStrategy("none")
    joint = FusionStrategy(
        "joint",
        joint_heads=overrides.pop("joint_heads", 3),
        joint_variant=overrides.pop("joint_variant", "literal"),
    )
    base = dict(encoder_config=cfg)
    table = {
        "untrained": dict(
            fusion=none, head="softmax_head", finetune_epochs=3,
            lr_encoder=2e-5, head_lr_by_k={-1: 2e-5},
        ),
        "retrained": dict(
            fusion=none, head="softmax_head", finetune_epochs=3,
            lr_encoder=2e-5, head_lr_by_k={-1: 2e-5}, uses_mlm=True,
        ),
        "binary": dict(
            fusion=none, head="softmax_head", finetune_epochs=3,
            lr_encoder=2e-5, head_lr_by_k={-1: 2e-5}, uses_binary=True,
        ),
        "protonet": dict(
            fusion=none, head="prototype", finetune_epochs=2,
            lr_encoder=1e-5, needs_checkpoint=True,
        ),
        "protomaml": dict(
            fusion=none, head="protomaml", finetune_epochs=4, lr_encoder=2e-5,
            head_lr_by_k={-1: 1e-3, 16: 1e-4, 32: 1e-4}, needs_checkpoint=True,
        ),
        "mldg": dict(
            fusion=none, head="mldg", finetune_epochs=3, lr_encoder=2e-5,
            head_lr_by_k={-1: 5e-3, 16: 5e-3, 32: 5e-3, 64: 7e-3, 128: 7e-3, 256: 5e-4},
            needs_checkpoint=True,
        ),
        "protonet_token": dict(
            fusion=FusionStrategy("token"), head="prototype", finetune_epochs=2,
            lr_encoder=1e-5, needs_checkpoint=True,
        ),
        "protonet_label": dict(
            fusion=FusionStrategy("label"), head="prototype", finetune_epochs=2,
            lr_encoder=1e-5, needs_checkpoint=True,
        ),
        "protonet_full": dict(
            fusion=FusionStrategy("full"), head="prototype", finetune_epochs=2,
            lr_encoder=1e-5, needs_checkpoint=True,
        ),
        "je_protonet": dict(
            fusion=joint, head="prototype", finetune_epochs=3,
            lr_encoder=2e-5, lr_attention=2e-5, needs_checkpoint=True,
        ),
        "je_protonet_untrained": dict(
            fusion=joint, head="prototype", finetune_epochs=3,
            lr_encoder=2e-5, lr_attention=2e-5,
        ),
        "je_protonet_cls": dict(
            fusion=joint, head="ffn", finetune_epochs=3,
            lr_encoder=2e-5, lr_attention=2e-5, head_lr_by_k={-1: 1e-4},
        ),
    }
    spec = {**base, **table[name], **overrides}
    return Recipe(name=name, **spec)


@dataclass(frozen=True)
class ProtocolSpec:
    """One full evaluation: a test domain, a recipe, and the (K, seed) grid."""

    test_domain: Dataset
    recipe: Recipe
    k_values: tuple[int, ...] = (16, 32, 64, 128, 256)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    holdout_fraction: float = 0.2
    split_seed: int = 0
    train_domains: tuple[Dataset, ...] = ()

    def __post_init__(self):
        if list(self.k_values) != sorted(self.k_values):
            raise ValueError("k_values must be sorted ascending")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")


@dataclass
class CellResult:
    k: int
    seed: int
    f1: float | None
    error: str | None = None


@dataclass
class EvaluationReport:
    recipe: str
    domain_id: str
    config: dict
    cells: list[CellResult]
    summary: list[dict]
    finetune_count: int
    created_at: str

    def to_json_dict(self) -> dict:
        """The emitted report schema; deterministic for fixed inputs."""
        cells = []
        for c in self.cells:
            row = {"k": c.k, "seed": c.seed, "f1": c.f1}
            if c.error is not None:
                row["error"] = c.error
            cells.append(row)
        return {
            "recipe": self.recipe,
            "config": self.config,
            "cells": cells,
            "summary": self.summary,
        }


def _population_std(values: list[float]) -> float:
    mean = sum(values) / len(values)
    return (sum((v - mean) ** 2 for v in values) / len(values)) ** 0.5


def initial_state(
    recipe: Recipe,
    finetune_domain: Dataset,
    pretrained: LearnerState | None = None,
    train_domains: Sequence[Dataset] = (),
    prep_seed: int = 0,
) -> LearnerState:
    """The shared starting state for every (K, seed) cell of a protocol.

    Meta-trained recipes consume `pretrained`; retrained runs masked-token
    pretraining on the fine-tune side; binary runs supervised pretraining on
    the pooled binary-collapsed training domains.
    """
    if recipe.needs_checkpoint:
        if pretrained is None:
            raise ValueError(f"recipe {recipe.name!r} needs a meta-trained checkpoint")
        return pretrained
    if recipe.name == "je_protonet_cls" and pretrained is not None:
        return pretrained
    vocab_sources = [finetune_domain, *train_domains]
    model = build_model(vocab_sources, recipe.fusion, recipe.encoder_config,
                        vocab_size=recipe.vocab_size)
    state = LearnerState(model=model, encoder_config=recipe.encoder_config)
    if recipe.uses_mlm:
        mlm_pretrain(
            model.encoder,
            model.vocab,
            finetune_domain,
            epochs=recipe.mlm_epochs,
            mask_rate=recipe.mlm_mask_rate,
            seed=prep_seed,
            lr=recipe.mlm_lr,
            batch_size=recipe.batch_size,
        )
    if recipe.uses_binary:
        if not train_domains:
            raise ValueError("binary recipe needs training domains")
        pooled = _pool_binary(train_domains)
        state = supervised_finetune(
            state,
            pooled,
            recipe.binary_epochs,
            {"encoder": recipe.lr_encoder, "head": recipe.head_lr(-1)},
            "softmax_head",
            seed=prep_seed,
            batch_size=recipe.batch_size,
            lr_floor=recipe.lr_floor,
        )
        state.head = None  # the binary head is discarded; the encoder transfers
        state.head_kind = None
    return state


def _pool_binary(train_domains: Sequence[Dataset]) -> Dataset:
    """Binary-collapse each training domain and pool into one dataset."""
    collapsed = [collapse_binary(d, _neutral_guess(d)) for d in train_domains]
    manifest = replace(collapsed[0].manifest, domain_id="binary_union", source_meta={
        "pooled_from": ",".join(d.manifest.domain_id for d in train_domains)
    })
    examples = []
    for d in collapsed:
        for ex in d.examples:
            examples.append(replace(ex, domain_id="binary_union"))
    return Dataset(manifest=manifest, examples=tuple(examples), split_tag="train")


_NEUTRAL_NAMES = {"normal", "benign", "neutral", "none", "not offensive", "not hate",
                  "no", "neither", "clean"}


def _neutral_guess(d: Dataset) -> set[str]:
    """Labels treated as not-offensive when pooling; name-based heuristic."""
    found = {
        name
        for name in d.manifest.label_names
        if name.lower() in _NEUTRAL_NAMES or name.lower().startswith("not ")
        or name.lower().startswith("non")
    }
    return found


def _score(tuned: LearnerState, recipe: Recipe, kshot: Dataset, texts: list[str]) -> list[int]:
    """Predict classes; with no trained head (epochs=0) fall back to
    nearest-prototype over the raw representations of the K-shot set."""
    head = recipe.head
    if head != "prototype" and tuned.head is None:
        head = "prototype"
    support = kshot if head == "prototype" else None
    return predict(tuned, texts, head, support=support, distance=recipe.distance)


def _run_cell(args) -> CellResult:
    state0, recipe, train_side, holdout, k, seed = args
    try:
        kshot, _ = kshot_sample(train_side, k, seed)
        tuned = supervised_finetune(
            state0.clone(),
            kshot,
            recipe.finetune_epochs,
            recipe.rates(k),
            recipe.head,
            seed=seed,
            batch_size=recipe.batch_size,
            lr_floor=recipe.lr_floor,
            distance=recipe.distance,
        )
        preds = _score(tuned, recipe, kshot, holdout.texts())
        golds = [e.label_index for e in holdout.examples]
        f1 = macro_f1(preds, golds, holdout.manifest.n_classes)
        return CellResult(k=k, seed=seed, f1=f1)
    except Exception as exc:  # the cell is recorded as missing, never imputed
        return CellResult(k=k, seed=seed, f1=None, error=f"{type(exc).__name__}: {exc}")


def run_protocol(
    spec: ProtocolSpec,
    pretrained: LearnerState | None = None,
    jobs: int = 1,
) -> EvaluationReport:
    """Hold out once, then fine-tune and score every (K, seed) cell.

    Deterministic given the spec; failed cells carry their error string.
    With jobs > 1 the independent cells run in a process pool.
    """
    recipe = spec.recipe
    train_side, holdout = holdout_split(
        spec.test_domain, spec.holdout_fraction, spec.split_seed
    )
    state0 = initial_state(
        recipe, train_side, pretrained, spec.train_domains, prep_seed=spec.split_seed
    )
    grid = [(k, seed) for k in spec.k_values for seed in spec.seeds]
    work = [(state0, recipe, train_side, holdout, k, seed) for k, seed in grid]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, work))
    else:
        cells = [_run_cell(w) for w in work]
    summary = []
    for k in spec.k_values:
        scores = [c.f1 for c in cells if c.k == k and c.f1 is not None]
        summary.append(
            {
                "k": k,
                "mean": sum(scores) / len(scores) if scores else None,
                "std": _population_std(scores) if scores else None,
                "missing": sum(1 for c in cells if c.k == k and c.f1 is None),
            }
        )
    config = {
        "domain_id": spec.test_domain.manifest.domain_id,
        "k_values": list(spec.k_values),
        "seeds": list(spec.seeds),
        "holdout_fraction": spec.holdout_fraction,
        "split_seed": spec.split_seed,
        "finetune_epochs": recipe.finetune_epochs,
        "lr_encoder": recipe.lr_encoder,
        "lr_attention": recipe.lr_attention,
        "head": recipe.head,
        "fusion": recipe.fusion.kind,
        "joint_variant": recipe.fusion.joint_variant if recipe.fusion.kind == "joint" else None,
        "distance": recipe.distance,
        "batch_size": recipe.batch_size,
        "encoder": {
            "d_model": recipe.encoder_config.d_model,
            "n_layers": recipe.encoder_config.n_layers,
            "n_heads": recipe.encoder_config.n_heads,
            "max_len": recipe.encoder_config.max_len,
            "dropout": recipe.encoder_config.dropout,
            "seed": recipe.encoder_config.seed,
        },
    }
    return EvaluationReport(
        recipe=recipe.name,
        domain_id=spec.test_domain.manifest.domain_id,
        config=config,
        cells=cells,
        summary=summary,
        finetune_count=len(grid),
        created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )


def select_hyperparams(
    candidates: Sequence[Recipe],
    domain: Dataset,
    seed: int,
    k: int = 64,
    pretrained: LearnerState | None = None,
) -> Recipe:
    """Pick the candidate with the best validation macro-F1.

    Each candidate is fine-tuned on a K-shot slice and scored on a 64-per-
    class validation slice drawn from the remainder with the same seed
    stream. Ties break by candidate order.
    """
    if not candidates:
        raise ValueError("no candidate configurations")
    kshot, rest = kshot_sample(domain, k, seed)
    val, _ = kshot_sample(rest, 64, seed)
    best_idx, best_score = 0, -1.0
    for i, cand in enumerate(candidates):
        state = initial_state(cand, domain, pretrained, prep_seed=seed)
        tuned = supervised_finetune(
            state.clone(),
            kshot,
            cand.finetune_epochs,
            cand.rates(k),
            cand.head,
            seed=seed,
            batch_size=cand.batch_size,
            lr_floor=cand.lr_floor,
            distance=cand.distance,
        )
        preds = _score(tuned, cand, kshot, val.texts())
        golds = [e.label_index for e in val.examples]
        score = macro_f1(preds, golds, val.manifest.n_classes)
        if score > best_score:
            best_idx, best_score = i, score
    return candidates[best_idx]


def emit_report(report: EvaluationReport, out_dir: str | Path) -> dict[str, Path]:
    """Write the JSON report, the (k, seed, f1) CSV, and the mean+-std plot.

    Filenames share the stem {domain}_{recipe}. Returns the written paths.
    """
    if not report.cells:
        raise ValueError("report has no cells")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{report.domain_id}_{report.recipe}"
    paths = {
        "json": out / f"{stem}.json",
        "csv": out / f"{stem}.csv",
        "plot": out / f"{stem}.png",
    }
    paths["json"].write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "seed", "macro_f1"])
        for c in report.cells:
            writer.writerow([c.k, c.seed, "" if c.f1 is None else repr(c.f1)])
    _plot_summary(report, paths["plot"])
    return paths


def _plot_summary(report: EvaluationReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = [row["k"] for row in report.summary if row["mean"] is not None]
    means = [row["mean"] for row in report.summary if row["mean"] is not None]
    stds = [row["std"] for row in report.summary if row["mean"] is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    if ks:
        ax.errorbar(ks, means, yerr=stds, marker="o", capsize=4)
        ax.set_xscale("log", base=2)
        ax.set_xticks(ks)
        ax.set_xticklabels([str(k) for k in ks])
    ax.set_xlabel("K (shots per class)")
    ax.set_ylabel("macro F1")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(f"{report.domain_id}: {report.recipe}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
