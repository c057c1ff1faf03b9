"""Label-information fusion: build model inputs under five strategies.

Strategies: none (bare text), token (a minted per-label token), label (label
text appended), full (label plus its definition in one frame), and joint
(cross-attention between text hidden states and definition hidden states).
Support/training inputs carry their gold label; query and test inputs never
do -- they get an empty label region, or a blank definition for joint.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .corpus import DomainManifest, Example, LabelDef, preprocess_text
from .encoder import (
    EncoderConfig,
    HiddenStates,
    MultiHeadAttention,
    TransformerEncoder,
    Vocab,
    add_label_token,
    frame_ids,
    tokenize,
)

FUSION_KINDS = ("none", "token", "label", "full", "joint")
JOINT_VARIANTS = ("literal", "standard")

# Printed between a label name and its definition in fused frames.
LABEL_DEF_SEPARATOR = ":"


@dataclass(frozen=True)
class FusionStrategy:
    """Which label information enters the input, and how."""

    kind: str = "none"
    joint_heads: int = 3
    joint_variant: str = "literal"

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"kind must be one of {FUSION_KINDS}, got {self.kind!r}")
        if self.joint_variant not in JOINT_VARIANTS:
            raise ValueError(
                f"joint_variant must be one of {JOINT_VARIANTS}, got {self.joint_variant!r}"
            )
        if self.joint_heads < 1:
            raise ValueError("joint_heads must be >= 1")


def label_text(label: LabelDef) -> str:
    return preprocess_text(label.name)

def definition_text(label: LabelDef) -> str:
    """The 'name : definition' sequence encoded for the joint strategy."""
    return f"{label_text(label)} {LABEL_DEF_SEPARATOR} {preprocess_text(label.definition)}".strip()


def fuse_input(
    text: str,
    label: LabelDef | None,
    strategy: FusionStrategy,
    vocab: Vocab,
    max_len: int,
    manifest: DomainManifest | None = None,
    model: TransformerEncoder | None = None,
) -> list[int]:
    """Token ids for kinds none/token/label/full.

    An absent label yields the bare [CLS] text [SEP] frame for every kind, so
    query/test sequences are independent of any label content. For kind
    token, `model` must be given so the label token can be minted.
    """
    if strategy.kind == "joint":
        raise ValueError("joint fusion encodes two sequences; use a FusionModel")
    if label is not None and manifest is not None:
        if label.name not in manifest.label_names:
            raise ValueError(
                f"label {label.name!r} does not belong to manifest {manifest.domain_id!r}"
            )
    if label is None or strategy.kind == "none":
        return tokenize(text, vocab, max_len)
    body = [vocab.id(t) for t in text.split()]
    if strategy.kind == "token":
        if model is None:
            raise ValueError("token fusion requires the encoder to mint label tokens")
        body = body + [vocab.sep_id, add_label_token(label.name, vocab, model)]
    elif strategy.kind == "label":
        body = body + [vocab.id(t) for t in label_text(label).split()]
    elif strategy.kind == "full":
        tail = f"{label_text(label)} {LABEL_DEF_SEPARATOR} {preprocess_text(label.definition)}"
        body = body + [vocab.sep_id] + [vocab.id(t) for t in tail.split()]
    return frame_ids(body, vocab, max_len)


class JointAttention(nn.Module):
    """Cross-attention mixing text hidden states with definition hidden states.

    Queries always come from the text. Keys come from the definition. The
    value source depends on the variant: "literal" reads values from the text
    states (positions aligned by the shared padded length), "standard" reads
    them from the definition states. No residual path or layer norm.
    """

    def __init__(self, d_model: int, n_heads: int = 3, seed: int = 0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(
                f"joint_heads must divide d_model ({n_heads} does not divide {d_model}); "
                "use e.g. d_model=48 or override joint_heads"
            )
        self.attn = MultiHeadAttention(d_model, n_heads, bias=False)
        g = torch.Generator().manual_seed(seed)
        bound = (6.0 / (2 * d_model)) ** 0.5
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-bound, bound, generator=g)

    def forward(
        self, h_text: HiddenStates, h_def: HiddenStates, variant: str = "literal"
    ) -> tuple[HiddenStates, torch.Tensor]:
        if variant not in JOINT_VARIANTS:
            raise ValueError(f"unknown joint variant {variant!r}")
        if h_text.states.shape != h_def.states.shape:
            raise ValueError(
                f"text and definition states must share the padded shape: "
                f"{tuple(h_text.states.shape)} vs {tuple(h_def.states.shape)}"
            )
        if not bool(h_def.mask.any(dim=1).all()):
            raise ValueError("definition input has a row with zero valid key positions")
        value = h_text.states if variant == "literal" else h_def.states
        out, attn = self.attn(h_text.states, h_def.states, value, h_def.mask)
        return HiddenStates(states=out, cls=out[:, 0], mask=h_text.mask), attn


def joint_embed(
    h_text: HiddenStates,
    h_def: HiddenStates,
    params: JointAttention,
    variant: str = "literal",
) -> HiddenStates:
    """Cross-attend text states (queries) against definition states (keys)."""
    hidden, _ = params(h_text, h_def, variant)
    return hidden


class FusionModel(nn.Module):
    """Encoder plus fusion wiring; produces the classifier-ready vector.

    For sequence strategies the vector is the [CLS] state of the fused frame;
    for joint it is the [CLS] position of the cross-attention output. Query
    rows pass label=None and get the blank/empty label region.
    """

    def __init__(
        self,
        encoder: TransformerEncoder,
        vocab: Vocab,
        strategy: FusionStrategy,
        joint: JointAttention | None = None,
    ):
        super().__init__()
        self.encoder = encoder
        self.vocab = vocab
        self.strategy = strategy
        if strategy.kind == "joint":
            if joint is None:
                joint = JointAttention(
                    encoder.config.d_model, strategy.joint_heads, seed=encoder.config.seed
                )
            self.joint = joint
        else:
            self.joint = None

    @property
    def d_model(self) -> int:
        return self.encoder.config.d_model

    @property
    def max_len(self) -> int:
        return self.encoder.config.max_len

    def register_labels(self, manifests: list[DomainManifest]) -> None:
        """Mint label tokens up front (token fusion), before optimizers exist."""
        if self.strategy.kind != "token":
            return
        for m in manifests:
            for label in m.labels:
                add_label_token(label.name, self.vocab, self.encoder)

    def forward(
        self,
        texts: list[str],
        labels: list[LabelDef | None] | None = None,
        manifest: DomainManifest | None = None,
    ) -> torch.Tensor:
        """Representation vectors, one per text: (B, d_model)."""
        if labels is None:
            labels = [None] * len(texts)
        if len(labels) != len(texts):
            raise ValueError("texts and labels must have equal length")
        if self.strategy.kind != "joint":
            rows = [
                fuse_input(
                    t, l, self.strategy, self.vocab, self.max_len, manifest, self.encoder
                )
                for t, l in zip(texts, labels)
            ]
            ids = torch.tensor(rows, dtype=torch.long)
            return self.encoder(ids).cls
        return self._joint_states(texts, labels).cls

    def _joint_states(self, texts, labels) -> HiddenStates:
        text_ids = torch.tensor(
            [tokenize(t, self.vocab, self.max_len) for t in texts], dtype=torch.long
        )
        h_text = self.encoder(text_ids)
        # Blank definition at query/inference time; deduplicate def encodings.
        def_texts = [definition_text(l) if l is not None else "" for l in labels]
        unique = sorted(set(def_texts))
        def_ids = torch.tensor(
            [tokenize(s, self.vocab, self.max_len) for s in unique], dtype=torch.long
        )
        h_unique = self.encoder(def_ids)
        sel = torch.tensor([unique.index(s) for s in def_texts], dtype=torch.long)
        h_def = HiddenStates(
            states=h_unique.states[sel], cls=h_unique.cls[sel], mask=h_unique.mask[sel]
        )
        hidden, _ = self.joint(h_text, h_def, self.strategy.joint_variant)
        return hidden


def represent(
    example: Example,
    gold_label: LabelDef | None,
    model: FusionModel,
    manifest: DomainManifest | None = None,
) -> torch.Tensor:
    """Single-example representation vector (d_model,)."""
    return model([example.text], [gold_label], manifest)[0]
