"""Small trainable transformer encoder with a whitespace tokenizer.

Stands in for a large pretrained backbone at desk scale: learned absolute
position embeddings, post-norm transformer blocks, a [CLS] summary vector,
masked-token pretraining, and dynamically minted label tokens whose
embeddings are the mean of their constituent word embeddings.
"""

from __future__ import annotations

import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

SPECIALS = ("[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]")


class Vocab:
    """Token/id map: specials first, then base tokens, then label tokens.

    The base portion is frozen after construction; label tokens are the only
    tokens that may be appended later, and an identical label string always
    maps back to the same id.
    """

    def __init__(self, base_tokens: list[str]):
        self._tokens: list[str] = list(SPECIALS) + list(base_tokens)
        if len(set(self._tokens)) != len(self._tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        self._n_frozen = len(self._tokens)
        self._label_ids: dict[str, int] = {}

    cls_id = property(lambda self: self._ids["[CLS]"])
    sep_id = property(lambda self: self._ids["[SEP]"])
    pad_id = property(lambda self: self._ids["[PAD]"])
    mask_id = property(lambda self: self._ids["[MASK]"])
    unk_id = property(lambda self: self._ids["[UNK]"])

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        """Token id, falling back to [UNK] for out-of-vocabulary tokens."""
        return self._ids.get(token, self._ids["[UNK]"])

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._ids[t] for t in SPECIALS)

    @property
    def label_tokens(self) -> dict[str, int]:
        return dict(self._label_ids)

    def label_token_id(self, label: str) -> int | None:
        return self._label_ids.get(_normalize_label(label))

    def register_label(self, label: str) -> int:
        """Append a fresh token for `label`; id() of a repeat stays stable."""
        key = _normalize_label(label)
        if key in self._label_ids:
            return self._label_ids[key]
        token = f"[label:{key}]"
        new_id = len(self._tokens)
        self._tokens.append(token)
        self._ids[token] = new_id
        self._label_ids[key] = new_id
        return new_id

    def save(self, path: str | Path) -> None:
        """One token per line, specials first; label tokens keep their tag form."""
        Path(path).write_text("\n".join(self._tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        return cls.from_token_list(lines)

    @classmethod
    def from_token_list(cls, tokens: list[str]) -> "Vocab":
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("token list must start with the special tokens")
        base, labels = [], []
        for t in tokens[len(SPECIALS) :]:
            (labels if t.startswith("[label:") else base).append(t)
        vocab = cls(base)
        for t in labels:
            vocab.register_label(t[len("[label:") : -1])
        return vocab


def _normalize_label(label: str) -> str:
    return " ".join(label.strip().lower().split())


def build_vocab(corpus: list[str], max_size: int = 8192) -> Vocab:
    """Frequency-ranked whitespace vocabulary, truncated to `max_size` tokens.

    Ties broken lexicographically so the result is deterministic.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    counts = Counter()
    for text in corpus:
        counts.update(text.split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in ranked[:max_size]])


def tokenize(text: str, vocab: Vocab, max_len: int) -> list[int]:
    """[CLS] + body + [SEP], truncated keeping the head, padded to max_len."""
    body = [vocab.id(t) for t in text.split()]
    return frame_ids(body, vocab, max_len)


def frame_ids(body: list[int], vocab: Vocab, max_len: int) -> list[int]:
    """Wrap pre-built body ids in [CLS]...[SEP] and pad; keeps the trailing [SEP]."""
    body = body[: max_len - 2]
    ids = [vocab.cls_id] + body + [vocab.sep_id]
    ids.extend([vocab.pad_id] * (max_len - len(ids)))
    return ids


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 64
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_len < 8:
            raise ValueError(f"max_len must be >= 8, got {self.max_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class HiddenStates:
    """Per-token vectors plus the [CLS] summary; batch-first tensors.

    states: (B, max_len, d_model); cls: (B, d_model) == states[:, 0];
    mask: (B, max_len) bool, True at valid (attended) positions.
    """

    states: torch.Tensor
    cls: torch.Tensor
    mask: torch.Tensor
    attentions: list[torch.Tensor] | None = None


class MultiHeadAttention(nn.Module):
    """Plain scaled dot-product attention with separate Q/K/V sources.

    Key padding is applied with -inf before the softmax so masked keys get
    exactly zero weight.
    """

    def __init__(self, d_model: int, n_heads: int, bias: bool = True):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model, bias=bias)
        self.k_proj = nn.Linear(d_model, d_model, bias=bias)
        self.v_proj = nn.Linear(d_model, d_model, bias=bias)
        self.o_proj = nn.Linear(d_model, d_model, bias=bias)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.n_heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        key_mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (output (B, Lq, d), attention weights (B, heads, Lq, Lk))."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) * (self.d_head**-0.5)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = attn @ v
        b, _, lq, _ = out.shape
        out = out.transpose(1, 2).reshape(b, lq, self.n_heads * self.d_head)
        return self.o_proj(out), attn


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        attn_out, attn = self.attn(x, x, x, mask)
        x = self.norm1(x + self.dropout(attn_out))
        x = self.norm2(x + self.dropout(self.ff(x)))
        return x, attn


class TransformerEncoder(nn.Module):
    """Token + learned position embeddings into `n_layers` post-norm blocks.

    forward() takes padded id batches and returns :class:`HiddenStates`;
    [PAD] positions (or explicitly masked ones) are excluded from attention,
    so valid states are independent of whatever ids sit in the padding.
    """

    def __init__(self, config: EncoderConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_len, config.d_model)
        self.emb_norm = nn.LayerNorm(config.d_model)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.dropout)
            for _ in range(config.n_layers)
        )
        self.mlm_bias = nn.Parameter(torch.zeros(vocab_size))
        self._init_parameters(config.seed)

    def _init_parameters(self, seed: int) -> None:
        # Embeddings get the usual 0.02 normal; block weights use width-scaled
        # (Xavier) bounds so attention and FFN carry input signal at init even
        # at small d_model.
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "emb" in name and p.dim() >= 2:
                    p.normal_(0.0, 0.02, generator=g)
                elif p.dim() >= 2:
                    bound = math.sqrt(6.0 / (p.size(0) + p.size(1)))
                    p.uniform_(-bound, bound, generator=g)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    @property
    def pad_id(self) -> int:
        # Position of [PAD] in SPECIALS; vocab always places specials first.
        return SPECIALS.index("[PAD]")

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.num_embeddings

    def forward(
        self,
        ids: torch.Tensor,
        mask: torch.Tensor | None = None,
        collect_attention: bool = False,
    ) -> HiddenStates:
        if ids.dim() != 2 or ids.size(1) != self.config.max_len:
            raise ValueError(f"ids must be (batch, {self.config.max_len}), got {tuple(ids.shape)}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(
                f"token id out of range [0, {self.vocab_size}): "
                f"{int(ids.min())}..{int(ids.max())}"
            )
        if mask is None:
            mask = ids != self.pad_id
        positions = torch.arange(self.config.max_len, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(positions)[None, :, :]
        x = self.emb_dropout(self.emb_norm(x))
        attentions = [] if collect_attention else None
        for layer in self.layers:
            x, attn = layer(x, mask)
            if collect_attention:
                attentions.append(attn)
        return HiddenStates(states=x, cls=x[:, 0], mask=mask, attentions=attentions)

    def mlm_logits(self, states: torch.Tensor) -> torch.Tensor:
        """Vocabulary logits via weight tying with the token embedding."""
        return states @ self.tok_emb.weight.T + self.mlm_bias

    def append_embedding_row(self, row: torch.Tensor) -> int:
        """Grow the embedding (and tied MLM bias) by one row; returns its id.

        Existing rows are copied bitwise, never perturbed.
        """
        with torch.no_grad():
            weight = torch.cat([self.tok_emb.weight.detach(), row.reshape(1, -1)], dim=0)
            bias = torch.cat([self.mlm_bias.detach(), torch.zeros(1, dtype=weight.dtype)])
        new_emb = nn.Embedding(weight.size(0), weight.size(1))
        new_emb.weight = nn.Parameter(weight)
        self.tok_emb = new_emb
        self.mlm_bias = nn.Parameter(bias)
        return weight.size(0) - 1


def add_label_token(label: str, vocab: Vocab, model: TransformerEncoder) -> int:
    """Mint (or fetch) a dedicated token for a label string.

    A new token's embedding is the arithmetic mean of the embeddings of the
    label's constituent word tokens; repeated calls with the same label
    string (across domains) return the existing id.
    """
    if not label.strip():
        raise ValueError("label must be non-empty")
    existing = vocab.label_token_id(label)
    if existing is not None:
        return existing
    parts = _normalize_label(label).split()
    part_ids = torch.tensor([vocab.id(p) for p in parts], dtype=torch.long)
    with torch.no_grad():
        mean_vec = model.tok_emb.weight[part_ids].mean(dim=0)
    new_id = vocab.register_label(label)
    grown = model.append_embedding_row(mean_vec)
    if grown != new_id:
        raise RuntimeError(f"vocab id {new_id} and embedding row {grown} diverged")
    return new_id


def mlm_pretrain(
    model: TransformerEncoder,
    vocab: Vocab,
    dataset,
    epochs: int,
    mask_rate: float,
    seed: int,
    lr: float = 2e-5,
    batch_size: int = 16,
    weight_decay: float = 0.01,
) -> dict:
    """Masked-token pretraining; mutates `model` and reports the loss history.

    Per sample, max(1, floor(mask_rate * maskable)) non-special positions are
    replaced by [MASK]; cross-entropy is computed on masked positions only.
    Returns {"final_loss": mean masked-token loss over the last epoch,
    "history": per-epoch means}.
    """
    if not 0.0 < mask_rate <= 1.0:
        raise ValueError(
            "mask_rate must be in (0, 1]: at least one maskable position is required"
        )
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    texts = [t for t in dataset.texts()]
    if not any(t.split() for t in texts):
        raise ValueError("dataset has no maskable text (all texts empty)")
    torch.manual_seed(seed)
    rng = random.Random(seed)
    max_len = model.config.max_len
    encoded = [tokenize(t, vocab, max_len) for t in texts]
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    specials = vocab.special_ids
    history: list[float] = []
    model.train()
    for _ in range(epochs):
        order = list(range(len(encoded)))
        rng.shuffle(order)
        epoch_loss, epoch_terms = 0.0, 0
        for start in range(0, len(order), batch_size):
            rows = [encoded[i] for i in order[start : start + batch_size]]
            ids = torch.tensor(rows, dtype=torch.long)
            inputs, targets = _mask_batch(ids, mask_rate, specials, vocab.mask_id, rng)
            if (targets >= 0).sum() == 0:
                continue
            hidden = model(inputs)
            logits = model.mlm_logits(hidden.states)
            loss = F.cross_entropy(
                logits.view(-1, logits.size(-1)), targets.view(-1), ignore_index=-100
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            n_terms = int((targets >= 0).sum())
            epoch_loss += float(loss.detach()) * n_terms
            epoch_terms += n_terms
        history.append(epoch_loss / max(epoch_terms, 1))
    model.eval()
    return {"final_loss": history[-1], "history": history}


def _mask_batch(ids, mask_rate, special_ids, mask_id, rng):
    """Replace sampled non-special positions with [MASK]; -100 marks unmasked."""
    inputs = ids.clone()
    targets = torch.full_like(ids, -100)
    for r in range(ids.size(0)):
        maskable = [
            j for j in range(ids.size(1)) if int(ids[r, j]) not in special_ids
        ]
        if not maskable:
            continue
        n_mask = max(1, math.floor(mask_rate * len(maskable)))
        for j in rng.sample(maskable, n_mask):
            targets[r, j] = ids[r, j]
            inputs[r, j] = mask_id
    return inputs, targets


def masked_accuracy(model, inputs: torch.Tensor, targets: torch.Tensor) -> float:
    """Fraction of masked positions predicted correctly (fixed masking)."""
    model.eval()
    with torch.no_grad():
        logits = model.mlm_logits(model(inputs).states)
    sel = targets >= 0
    if int(sel.sum()) == 0:
        raise ValueError("no masked positions to score")
    preds = logits.argmax(dim=-1)
    return float((preds[sel] == targets[sel]).float().mean())
