"""Episodic samplers, prototype classification, and the meta-learners.

Three meta-training algorithms over encoder+fusion representations:
prototypical networks, first-order proto-initialized MAML, and the
domain-generalization meta-update (meta-train/meta-test domain split with a
first-order virtual step). Plus supervised K-shot fine-tuning with a
cosine-annealed learning rate, and prediction heads.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Dataset, DomainManifest, Example, LabelDef
from .encoder import EncoderConfig, TransformerEncoder, Vocab, build_vocab
from .fusion import FusionModel, FusionStrategy, JointAttention, definition_text

logger = logging.getLogger(__name__)

DISTANCES = ("euclidean", "squared_euclidean")
ALGORITHMS = ("protonet", "protomaml", "mldg")

# Guards sqrt backward at coincident points; inactive for distances > 1e-6.
_DIST_EPS = 1e-12


@dataclass(frozen=True)
class MetaConfig:
    meta_epochs: int = 5
    tasks_per_epoch: int = 300
    k_choices: tuple[int, ...] = (16, 32, 64, 128)
    inner_lr: float = 0.01
    outer_lr: float = 1e-4
    mldg_beta: float = 1.0
    inner_steps: int = 5
    distance: str = "euclidean"
    lr_encoder: float = 5e-5
    lr_attention: float = 2e-5
    lr_head: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def __post_init__(self):
        if not self.k_choices:
            raise ValueError("k_choices must be non-empty")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if min(self.inner_lr, self.outer_lr, self.lr_encoder, self.lr_head) <= 0:
            raise ValueError("learning rates must be positive")
        if self.mldg_beta < 0:
            raise ValueError("mldg_beta must be >= 0")


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task: disjoint support and query sets from one domain."""

    domain_id: str
    n_way: int
    k_shot: int
    support: tuple[tuple[Example, int], ...]
    query: tuple[tuple[Example, int], ...]
    manifest: DomainManifest

    def __post_init__(self):
        if self.n_way != self.manifest.n_classes:
            raise ValueError("n_way must equal the domain's full class count")
        sup_ids = {id(ex) for ex, _ in self.support}
        qry_ids = {id(ex) for ex, _ in self.query}
        if sup_ids & qry_ids:
            raise ValueError("support and query sets must be disjoint")
        for name, part in (("support", self.support), ("query", self.query)):
            counts = [0] * self.n_way
            for ex, c in part:
                if ex.domain_id != self.domain_id:
                    raise ValueError("episode mixes domains")
                counts[c] += 1
            if any(c != self.k_shot for c in counts):
                raise ValueError(f"{name} set must hold exactly k examples per class")


def sample_episode(
    domains: Sequence[Dataset],
    k: int | None = None,
    *,
    rng: random.Random,
    k_choices: Sequence[int] = (16, 32, 64, 128),
) -> Episode:
    """Draw an episode: uniform over domains that can furnish 2k per class.

    When k is None it is drawn uniformly from the feasible entries of
    k_choices (a domain needs 2k examples in every class to supply disjoint
    support and query sets of k each).
    """

    def eligible(kk: int) -> list[Dataset]:
        return [d for d in domains if min(d.class_counts()) >= 2 * kk]

    if k is None:
        feasible = [kk for kk in k_choices if eligible(kk)]
        if not feasible:
            raise ValueError(
                f"no domain can furnish 2k examples per class for any k in {tuple(k_choices)}"
            )
        k = feasible[rng.randrange(len(feasible))]
    pool = eligible(k)
    if not pool:
        raise ValueError(f"no domain can furnish 2k={2 * k} examples per class")
    domain = pool[rng.randrange(len(pool))]
    support, query = [], []
    for c, idxs in enumerate(domain.class_indices()):
        picked = rng.sample(idxs, 2 * k)
        support.extend((domain.examples[i], c) for i in picked[:k])
        query.extend((domain.examples[i], c) for i in picked[k:])
    return Episode(
        domain_id=domain.manifest.domain_id,
        n_way=domain.manifest.n_classes,
        k_shot=k,
        support=tuple(support),
        query=tuple(query),
        manifest=domain.manifest,
    )


@dataclass
class Prototypes:
    """Per-class centroid vectors; row order follows the class order."""

    vectors: torch.Tensor  # (C, d)
    classes: tuple[int, ...]

    def __post_init__(self):
        if not bool(torch.isfinite(self.vectors.detach()).all()):
            raise ValueError("prototype vectors must be finite")


def compute_prototypes(
    pairs: Sequence[tuple[torch.Tensor, int]], n_classes: int | None = None
) -> Prototypes:
    """Arithmetic mean of each class's vectors. Differentiable."""
    if not pairs:
        raise ValueError("no support vectors")
    classes = sorted({c for _, c in pairs})
    if n_classes is not None:
        missing = set(range(n_classes)) - set(classes)
        if missing:
            raise ValueError(f"empty class(es): {sorted(missing)}")
        classes = list(range(n_classes))
    rows = []
    for c in classes:
        members = [v for v, cc in pairs if cc == c]
        if not members:
            raise ValueError(f"empty class: {c}")
        rows.append(torch.stack(members).mean(dim=0))
    return Prototypes(vectors=torch.stack(rows), classes=tuple(classes))


def _distances(queries: torch.Tensor, protos: torch.Tensor, distance: str) -> torch.Tensor:
    """(B, C) distances from each query row to each prototype row."""
    if distance not in DISTANCES:
        raise ValueError(f"distance must be one of {DISTANCES}")
    diff = queries[:, None, :] - protos[None, :, :]
    sq = (diff * diff).sum(dim=-1)
    if distance == "squared_euclidean":
        return sq
    return torch.sqrt(torch.clamp(sq, min=_DIST_EPS))


def proto_classify(
    q: torch.Tensor, protos: Prototypes, distance: str = "euclidean"
) -> tuple[torch.Tensor, int]:
    """Class distribution softmax(-d(q, v_c)) and the nearest-prototype class.

    Ties in distance resolve to the lowest class index.
    """
    d = _distances(q[None, :], protos.vectors, distance)[0]
    if not bool(torch.isfinite(d).all()):
        raise ValueError("non-finite distance between query and prototypes")
    probs = torch.softmax(-d, dim=0)
    nearest = int(torch.nonzero(d == d.min())[0])
    return probs, protos.classes[nearest]


def prototype_nll(
    support_vecs: torch.Tensor,
    support_classes: Sequence[int],
    query_vecs: torch.Tensor,
    query_classes: Sequence[int],
    distance: str = "euclidean",
    n_classes: int | None = None,
) -> torch.Tensor:
    """Mean negative log-likelihood of gold classes under softmax(-distance)."""
    pairs = [(support_vecs[i], int(c)) for i, c in enumerate(support_classes)]
    protos = compute_prototypes(pairs, n_classes=n_classes)
    d = _distances(query_vecs, protos.vectors, distance)
    logp = F.log_softmax(-d, dim=1)
    target = torch.tensor([protos.classes.index(int(c)) for c in query_classes])
    return F.nll_loss(logp, target)


def _episode_inputs(ep: Episode):
    s_texts = [ex.text for ex, _ in ep.support]
    s_labels = [ep.manifest.labels[c] for _, c in ep.support]
    s_classes = [c for _, c in ep.support]
    q_texts = [ex.text for ex, _ in ep.query]
    q_classes = [c for _, c in ep.query]
    return s_texts, s_labels, s_classes, q_texts, q_classes


def proto_episode_loss(
    ep: Episode, model: FusionModel, distance: str = "euclidean"
) -> torch.Tensor:
    """Episode loss: gold-fused support builds prototypes, label-blind queries score.

    Gradients flow into all trainable parameters, including through the
    prototypes.
    """
    s_texts, s_labels, s_classes, q_texts, q_classes = _episode_inputs(ep)
    s_reps = model(s_texts, s_labels, ep.manifest)
    q_reps = model(q_texts, None, ep.manifest)
    return prototype_nll(s_reps, s_classes, q_reps, q_classes, distance, ep.n_way)


def protomaml_head_init(protos: Prototypes) -> tuple[torch.Tensor, torch.Tensor]:
    """Linear head (W, b) with W rows = 2 v_c and b_c = -||v_c||^2.

    softmax(Wx + b) then equals the squared-distance prototype distribution
    for every x.
    """
    W = 2.0 * protos.vectors
    b = -(protos.vectors * protos.vectors).sum(dim=1)
    return W, b


def fo_adapt_and_grad(
    params: Mapping[str, torch.Tensor],
    support_loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    query_loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    alpha: float,
    steps: int,
) -> tuple[dict[str, torch.Tensor], float]:
    """First-order inner adaptation: SGD on the support loss, then the query
    gradient evaluated at the adapted point (never differentiating through
    the updates). Returns (gradients keyed like `params`, query loss value).
    """
    fast = {n: p.detach().clone().requires_grad_(True) for n, p in params.items()}
    for _ in range(steps):
        loss = support_loss_fn(fast)
        if not bool(torch.isfinite(loss.detach())):
            raise FloatingPointError("non-finite inner loss")
        grads = torch.autograd.grad(loss, list(fast.values()), allow_unused=True)
        fast = {
            n: (p - alpha * g if g is not None else p).detach().requires_grad_(True)
            for (n, p), g in zip(fast.items(), grads)
        }
    qloss = query_loss_fn(fast)
    grads = torch.autograd.grad(qloss, list(fast.values()), allow_unused=True)
    out = {
        n: (g if g is not None else torch.zeros_like(p))
        for (n, p), g in zip(fast.items(), grads)
    }
    return out, float(qloss.detach())


def fo_protomaml_step(
    ep: Episode, model: FusionModel, config: MetaConfig
) -> tuple[dict[str, torch.Tensor], float] | None:
    """One first-order episode step with a prototype-initialized linear head.

    Returns gradients for the model's persistent parameters plus the query
    loss, or None when the inner loss went non-finite (episode skipped).
    """
    s_texts, s_labels, s_classes, q_texts, q_classes = _episode_inputs(ep)
    with torch.no_grad():
        s_reps = model(s_texts, s_labels, ep.manifest)
        protos = compute_prototypes(
            [(s_reps[i], c) for i, c in enumerate(s_classes)], n_classes=ep.n_way
        )
    W0, b0 = protomaml_head_init(protos)
    params = {f"model.{n}": p for n, p in model.named_parameters()}
    params["head.weight"] = W0
    params["head.bias"] = b0
    s_target = torch.tensor(s_classes)
    q_target = torch.tensor(q_classes)

    def split(fast):
        model_part = {n[len("model.") :]: p for n, p in fast.items() if n.startswith("model.")}
        return model_part, fast["head.weight"], fast["head.bias"]

    def support_loss(fast):
        model_part, W, b = split(fast)
        reps = torch.func.functional_call(model, model_part, (s_texts, s_labels, ep.manifest))
        return F.cross_entropy(reps @ W.T + b, s_target)

    def query_loss(fast):
        model_part, W, b = split(fast)
        reps = torch.func.functional_call(model, model_part, (q_texts, None, ep.manifest))
        return F.cross_entropy(reps @ W.T + b, q_target)

    try:
        grads, qloss = fo_adapt_and_grad(
            params, support_loss, query_loss, config.inner_lr, config.inner_steps
        )
    except FloatingPointError:
        logger.warning("skipping episode from %s: non-finite inner loss", ep.domain_id)
        return None
    model_grads = {n[len("model.") :]: g for n, g in grads.items() if n.startswith("model.")}
    return model_grads, qloss


class MldgHead(nn.Module):
    """Shared hidden layer plus per-episode zero-initialized class outputs.

    The hidden layer persists and trains across episodes; the output layers
    are duplicated to the episode's class count with weights set to zero at
    each episode start.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.hidden = nn.Linear(d_model, d_model)

    def new_outputs(self, n_classes: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Fresh zero weights (n_classes, d_model) and biases (n_classes,)."""
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        d = self.hidden.out_features
        dtype = self.hidden.weight.dtype
        return torch.zeros(n_classes, d, dtype=dtype), torch.zeros(n_classes, dtype=dtype)

    def forward(self, reps: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.hidden(reps) @ W.T + b


def mldg_head_build(n_classes: int, d_model: int) -> tuple[MldgHead, torch.Tensor, torch.Tensor]:
    """An MldgHead plus a zero-initialized output stack for `n_classes`."""
    head = MldgHead(d_model)
    W, b = head.new_outputs(n_classes)
    return head, W, b


def mldg_update(
    params: Mapping[str, torch.Tensor],
    train_loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    test_loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    alpha: float,
    beta: float,
    gamma: float,
) -> dict[str, torch.Tensor]:
    """First-order domain-generalization update on arbitrary loss closures.

    theta' = theta - alpha * grad F(theta); new theta = theta - gamma *
    (grad F(theta) + beta * grad G(theta')), with grad G taken at theta' and
    applied first-order (no second derivatives).
    """
    grads = mldg_gradients(params, train_loss_fn, test_loss_fn, alpha, beta)[0]
    return {n: (params[n] - gamma * grads[n]).detach() for n in params}


def mldg_gradients(
    params: Mapping[str, torch.Tensor],
    train_loss_fn,
    test_loss_fn,
    alpha: float,
    beta: float,
) -> tuple[dict[str, torch.Tensor], float, float]:
    theta = {n: p.detach().clone().requires_grad_(True) for n, p in params.items()}
    f_loss = train_loss_fn(theta)
    gf = torch.autograd.grad(f_loss, list(theta.values()), allow_unused=True)
    gf = [g if g is not None else torch.zeros_like(p) for g, p in zip(gf, theta.values())]
    g_value = 0.0
    if beta > 0:
        virtual = {
            n: (p - alpha * g).detach().requires_grad_(True)
            for (n, p), g in zip(theta.items(), gf)
        }
        g_loss = test_loss_fn(virtual)
        gg = torch.autograd.grad(g_loss, list(virtual.values()), allow_unused=True)
        gg = [g if g is not None else torch.zeros_like(p) for g, p in zip(gg, virtual.values())]
        g_value = float(g_loss.detach())
    else:
        gg = [torch.zeros_like(p) for p in theta.values()]
    combined = {
        n: (f + beta * g).detach() for (n, f, g) in zip(theta.keys(), gf, gg)
    }
    return combined, float(f_loss.detach()), g_value


def _mldg_episode_loss(
    fast: Mapping[str, torch.Tensor],
    model: FusionModel,
    head: MldgHead,
    ep: Episode,
    inner_lr: float,
    inner_steps: int,
) -> torch.Tensor:
    """Task loss: adapt the zero-init output layer on support, score the query.

    The adaptation is first-order (support representations detached), so the
    query loss is what carries gradient into the encoder and hidden layer.
    """
    s_texts, s_labels, s_classes, q_texts, q_classes = _episode_inputs(ep)
    model_part = {n[len("model.") :]: p for n, p in fast.items() if n.startswith("model.")}
    head_part = {n[len("head.") :]: p for n, p in fast.items() if n.startswith("head.")}

    def rep_hidden(texts, labels):
        reps = torch.func.functional_call(model, model_part, (texts, labels, ep.manifest))
        return torch.func.functional_call(head.hidden, {k[len("hidden.") :]: v for k, v in head_part.items()}, (reps,))

    W, b = head.new_outputs(ep.n_way)
    W = W.requires_grad_(True)
    b = b.requires_grad_(True)
    h_s = rep_hidden(s_texts, s_labels).detach()
    s_target = torch.tensor(s_classes)
    for _ in range(max(inner_steps, 1)):
        loss = F.cross_entropy(h_s @ W.T + b, s_target)
        gw, gb = torch.autograd.grad(loss, (W, b))
        W = (W - inner_lr * gw).detach().requires_grad_(True)
        b = (b - inner_lr * gb).detach().requires_grad_(True)
    h_q = rep_hidden(q_texts, None)
    logits = h_q @ W.detach().T + b.detach()
    return F.cross_entropy(logits, torch.tensor(q_classes))


def mldg_step(
    train_domains: Sequence[Dataset],
    model: FusionModel,
    head: MldgHead,
    config: MetaConfig,
    rng: random.Random,
    k: int | None = None,
) -> tuple[dict[str, torch.Tensor], float, str]:
    """One meta-step: leave-one-domain-out split, Eq.-style first-order update.

    Returns (combined gradients over model+hidden parameters, F+beta*G value,
    meta-test domain id); the caller applies them through its optimizer.
    """
    if len(train_domains) < 2:
        raise ValueError("the domain-generalization update needs >= 2 training domains")
    test_idx = rng.randrange(len(train_domains))
    meta_test = train_domains[test_idx]
    meta_train = [d for i, d in enumerate(train_domains) if i != test_idx]
    train_eps = [
        sample_episode([d], k, rng=rng, k_choices=config.k_choices) for d in meta_train
    ]
    test_ep = sample_episode([meta_test], k, rng=rng, k_choices=config.k_choices)
    params = {f"model.{n}": p for n, p in model.named_parameters()}
    params.update({f"head.{n}": p for n, p in head.named_parameters()})

    def f_loss(theta):
        losses = [
            _mldg_episode_loss(theta, model, head, ep, config.inner_lr, config.inner_steps)
            for ep in train_eps
        ]
        return torch.stack(losses).mean()

    def g_loss(theta):
        return _mldg_episode_loss(theta, model, head, test_ep, config.inner_lr, config.inner_steps)

    grads, f_value, g_value = mldg_gradients(
        params, f_loss, g_loss, config.inner_lr, config.mldg_beta
    )
    return grads, f_value + config.mldg_beta * g_value, meta_test.manifest.domain_id


@dataclass
class LearnerState:
    """Everything needed to resume, fine-tune, or score a learner."""

    model: FusionModel
    encoder_config: EncoderConfig
    meta_config: MetaConfig | None = None
    head: nn.Module | None = None
    head_kind: str | None = None
    mldg_hidden: MldgHead | None = None
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None
    best_model_state: dict | None = None
    best_epoch: int | None = None
    trace: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)

    @property
    def vocab(self) -> Vocab:
        return self.model.vocab

    @property
    def strategy(self) -> FusionStrategy:
        return self.model.strategy

    def clone(self) -> "LearnerState":
        return copy.deepcopy(self)


def _optimizer_for(model: FusionModel, extra, config: MetaConfig):
    """AdamW with one parameter group per component (encoder/attention/head)."""
    groups = [
        {"params": list(model.encoder.parameters()), "lr": config.lr_encoder, "component": "encoder"}
    ]
    if model.joint is not None:
        groups.append(
            {"params": list(model.joint.parameters()), "lr": config.lr_attention, "component": "attention"}
        )
    if extra is not None:
        groups.append({"params": list(extra.parameters()), "lr": config.lr_head, "component": "head"})
    return torch.optim.AdamW(
        groups, lr=config.outer_lr, betas=config.betas, weight_decay=config.weight_decay
    )


def default_vocab_corpus(domains: Sequence[Dataset]) -> list[str]:
    """Texts plus label names/definitions (and the separator) for vocab building."""
    corpus: list[str] = []
    for d in domains:
        corpus.extend(d.texts())
        for label in d.manifest.labels:
            corpus.append(definition_text(label))
    return corpus


def build_model(
    domains: Sequence[Dataset],
    fusion: FusionStrategy,
    encoder_config: EncoderConfig,
    vocab: Vocab | None = None,
    vocab_size: int = 8192,
) -> FusionModel:
    vocab = vocab or build_vocab(default_vocab_corpus(domains), max_size=vocab_size)
    encoder = TransformerEncoder(encoder_config, len(vocab))
    model = FusionModel(encoder, vocab, fusion)
    model.register_labels([d.manifest for d in domains])
    return model


def meta_train(
    algorithm: str,
    domains: Sequence[Dataset],
    config: MetaConfig,
    fusion: FusionStrategy,
    encoder_config: EncoderConfig | None = None,
    vocab: Vocab | None = None,
    log_path: str | Path | None = None,
) -> LearnerState:
    """Meta-train over episodic tasks; deterministic given config.seed.

    Returns the final state; the epoch with the lowest mean loss is kept as
    a tensor snapshot on the state (best_model_state/best_epoch).
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}")
    if algorithm == "mldg" and len(domains) < 2:
        raise ValueError("mldg needs at least 2 training domains")
    if not domains:
        raise ValueError("no training domains")
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    encoder_config = encoder_config or EncoderConfig(seed=config.seed)
    model = build_model(domains, fusion, encoder_config, vocab)
    hidden = MldgHead(encoder_config.d_model) if algorithm == "mldg" else None
    optimizer = _optimizer_for(model, hidden, config)
    trace: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    best_loss, best_epoch, best_state = math.inf, None, None
    model.train()
    try:
        for epoch in range(config.meta_epochs):
            epoch_losses = []
            for task in range(config.tasks_per_epoch):
                if algorithm == "protonet":
                    ep = sample_episode(domains, rng=rng, k_choices=config.k_choices)
                    loss = proto_episode_loss(ep, model, config.distance)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    loss_val, k, dom = float(loss.detach()), ep.k_shot, ep.domain_id
                elif algorithm == "protomaml":
                    ep = sample_episode(domains, rng=rng, k_choices=config.k_choices)
                    result = fo_protomaml_step(ep, model, config)
                    if result is None:
                        continue
                    grads, loss_val = result
                    _apply_named_grads(model, grads, optimizer)
                    k, dom = ep.k_shot, ep.domain_id
                else:
                    grads, loss_val, dom = mldg_step(domains, model, hidden, config, rng)
                    _apply_split_grads(model, hidden, grads, optimizer)
                    k = -1
                record = {"epoch": epoch, "task": task, "loss": loss_val, "k": k, "domain_id": dom}
                trace.append(record)
                epoch_losses.append(loss_val)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
            mean_loss = sum(epoch_losses) / max(len(epoch_losses), 1)
            logger.info("meta epoch %d: mean loss %.4f (%s)", epoch, mean_loss, algorithm)
            if mean_loss < best_loss:
                best_loss, best_epoch = mean_loss, epoch
                best_state = {
                    "model": {k: v.detach().clone() for k, v in model.state_dict().items()},
                    "hidden": (
                        {k: v.detach().clone() for k, v in hidden.state_dict().items()}
                        if hidden is not None
                        else None
                    ),
                }
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return LearnerState(
        model=model,
        encoder_config=encoder_config,
        meta_config=config,
        mldg_hidden=hidden,
        optimizer_state=optimizer.state_dict(),
        rng_state=torch.get_rng_state(),
        best_model_state=best_state,
        best_epoch=best_epoch,
        trace=trace,
    )


def _apply_named_grads(model: FusionModel, grads: dict[str, torch.Tensor], optimizer) -> None:
    optimizer.zero_grad()
    named = dict(model.named_parameters())
    for name, g in grads.items():
        named[name].grad = g
    optimizer.step()


def _apply_split_grads(model, hidden, grads, optimizer) -> None:
    optimizer.zero_grad()
    named = dict(model.named_parameters())
    for name, g in grads.items():
        if name.startswith("model."):
            named[name[len("model.") :]].grad = g
    if hidden is not None:
        hnamed = dict(hidden.named_parameters())
        for name, g in grads.items():
            if name.startswith("head."):
                hnamed[name[len("head.") :]].grad = g
    optimizer.step()


def cosine_lr(step: int, total_steps: int, peak: float, floor: float = 1e-5) -> float:
    """Closed-form cosine annealing from peak (step 0) to floor (last step)."""
    if total_steps <= 1:
        return peak
    t = min(max(step, 0), total_steps - 1)
    return floor + (peak - floor) * (1 + math.cos(math.pi * t / (total_steps - 1))) / 2


HEAD_KINDS = ("softmax_head", "ffn", "protomaml", "mldg", "prototype")


def _build_head(kind, model, kshot_data, n_classes, distance, generator):
    d = model.d_model
    if kind == "softmax_head":
        head = nn.Linear(d, n_classes)
        with torch.no_grad():
            head.weight.normal_(0.0, 0.02, generator=generator)
            head.bias.zero_()
        return head
    if kind == "ffn":
        head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, n_classes))
        with torch.no_grad():
            for p in head.parameters():
                if p.dim() >= 2:
                    p.normal_(0.0, 0.02, generator=generator)
                else:
                    p.zero_()
        return head
    if kind == "protomaml":
        reps, classes = _dataset_representations(model, kshot_data, with_labels=True)
        protos = compute_prototypes(
            [(reps[i].detach(), c) for i, c in enumerate(classes)], n_classes=n_classes
        )
        W, b = protomaml_head_init(protos)
        head = nn.Linear(d, n_classes)
        with torch.no_grad():
            head.weight.copy_(W)
            head.bias.copy_(b)
        return head
    if kind == "mldg":
        head = MldgFinetuneHead(d, n_classes)
        return head
    raise ValueError(f"unknown head kind {kind!r}")


class MldgFinetuneHead(nn.Module):
    """Hidden layer plus zero-initialized per-class outputs, trained jointly."""

    def __init__(self, d_model: int, n_classes: int):
        super().__init__()
        self.hidden = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, n_classes)
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()

    def forward(self, reps):
        return self.out(self.hidden(reps))


def _dataset_representations(model, data: Dataset, with_labels: bool, batch_size: int = 64):
    """Representations of a dataset in eval mode (no dropout)."""
    was_training = model.training
    model.eval()
    reps, classes = [], []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            chunk = data.examples[start : start + batch_size]
            texts = [e.text for e in chunk]
            labels = (
                [data.manifest.labels[e.label_index] for e in chunk] if with_labels else None
            )
            reps.append(model(texts, labels, data.manifest))
            classes.extend(e.label_index for e in chunk)
    if was_training:
        model.train()
    return torch.cat(reps), classes


def supervised_finetune(
    state: LearnerState,
    kshot_data: Dataset,
    epochs: int,
    rates: Mapping[str, float],
    head: str = "softmax_head",
    *,
    seed: int = 0,
    batch_size: int = 16,
    lr_floor: float = 1e-5,
    distance: str = "euclidean",
) -> LearnerState:
    """Fine-tune on a balanced K-shot sample; deterministic given seed.

    rates maps components to peak learning rates ("encoder", "attention",
    "head"); each follows the closed-form cosine schedule down to lr_floor.
    head "prototype" trains with the episode loss built from the K-shot set
    (half support / half query per step); the other kinds train a
    classification layer with cross-entropy.
    """
    if head not in HEAD_KINDS:
        raise ValueError(f"head must be one of {HEAD_KINDS}")
    if len(kshot_data) == 0:
        raise ValueError("empty fine-tuning data")
    if epochs == 0:
        return state
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    new = state.clone()
    model = new.model
    torch.manual_seed(seed)
    rng = random.Random(seed)
    generator = torch.Generator().manual_seed(seed)
    model.register_labels([kshot_data.manifest])
    n_classes = kshot_data.manifest.n_classes
    head_module = None
    if head != "prototype":
        head_module = _build_head(head, model, kshot_data, n_classes, distance, generator)
        if head == "mldg" and new.mldg_hidden is not None:
            head_module.hidden.load_state_dict(new.mldg_hidden.hidden.state_dict())
    groups = [
        {"params": list(model.encoder.parameters()), "lr": rates.get("encoder", 2e-5), "peak": rates.get("encoder", 2e-5)}
    ]
    if model.joint is not None:
        peak = rates.get("attention", rates.get("encoder", 2e-5))
        groups.append({"params": list(model.joint.parameters()), "lr": peak, "peak": peak})
    if head_module is not None:
        peak = rates.get("head", 1e-4)
        groups.append({"params": list(head_module.parameters()), "lr": peak, "peak": peak})
    optimizer = torch.optim.AdamW(groups, betas=(0.9, 0.999), weight_decay=0.01)
    n = len(kshot_data)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total_steps = epochs * steps_per_epoch
    lr_trace = []
    model.train()
    step = 0
    for _ in range(epochs):
        if head == "prototype":
            batches = [_episode_from_kshot(kshot_data, rng) for _ in range(steps_per_epoch)]
        else:
            order = list(range(n))
            rng.shuffle(order)
            batches = [order[s : s + batch_size] for s in range(0, n, batch_size)]
        for batch in batches:
            for grp in optimizer.param_groups:
                grp["lr"] = cosine_lr(step, total_steps, grp["peak"], lr_floor)
            lr_trace.append([grp["lr"] for grp in optimizer.param_groups])
            if head == "prototype":
                loss = proto_episode_loss(batch, model, distance)
            else:
                # Training inputs carry their gold label; inference never does.
                chunk = [kshot_data.examples[i] for i in batch]
                gold = [kshot_data.manifest.labels[e.label_index] for e in chunk]
                reps = model([e.text for e in chunk], gold, kshot_data.manifest)
                logits = head_module(reps)
                target = torch.tensor([e.label_index for e in chunk])
                loss = F.cross_entropy(logits, target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
    model.eval()
    new.head = head_module
    new.head_kind = head
    new.lr_trace = lr_trace
    return new


def _episode_from_kshot(data: Dataset, rng: random.Random) -> Episode:
    """Split each class's K examples into half support / half query."""
    support, query = [], []
    half = None
    for c, idxs in enumerate(data.class_indices()):
        if len(idxs) < 2:
            raise ValueError(
                f"class {data.manifest.label_names[c]!r} needs >= 2 examples for "
                "prototype fine-tuning"
            )
        half = len(idxs) // 2 if half is None else min(half, len(idxs) // 2)
    for c, idxs in enumerate(data.class_indices()):
        picked = rng.sample(idxs, 2 * half)
        support.extend((data.examples[i], c) for i in picked[:half])
        query.extend((data.examples[i], c) for i in picked[half:])
    return Episode(
        domain_id=data.manifest.domain_id,
        n_way=data.manifest.n_classes,
        k_shot=half,
        support=tuple(support),
        query=tuple(query),
        manifest=data.manifest,
    )


def predict(
    state: LearnerState,
    texts: Sequence[str],
    head: str | None = None,
    *,
    support: Dataset | None = None,
    distance: str = "euclidean",
    batch_size: int = 64,
) -> list[int]:
    """Class indices for `texts`; no label or definition information is used.

    The prototype head needs `support` (the K-shot set): prototypes are built
    from its gold-fused representations. Ties resolve to the lowest class
    index.
    """
    head = head or state.head_kind or "prototype"
    model = state.model
    model.eval()
    reps = []
    with torch.no_grad():
        for start in range(0, len(texts), batch_size):
            reps.append(model(list(texts[start : start + batch_size]), None))
        reps = torch.cat(reps) if reps else torch.zeros(0, model.d_model)
        if head == "prototype":
            if support is None:
                raise ValueError("prototype prediction needs the K-shot support set")
            s_reps, s_classes = _dataset_representations(model, support, with_labels=True)
            protos = compute_prototypes(
                [(s_reps[i], c) for i, c in enumerate(s_classes)],
                n_classes=support.manifest.n_classes,
            )
            d = _distances(reps, protos.vectors, distance)
            picks = d.argmin(dim=1).tolist()
            # Explicit lowest-index tie-break.
            out = []
            for row, pick in zip(d, picks):
                ties = torch.nonzero(row == row[pick]).flatten()
                out.append(protos.classes[int(ties[0])])
            return out
        if state.head is None:
            raise ValueError("no classification head; fine-tune first")
        logits = state.head(reps)
        out = []
        for row in logits:
            ties = torch.nonzero(row == row.max()).flatten()
            out.append(int(ties[0]))
        return out


CHECKPOINT_VERSION = 1


def save_checkpoint(state: LearnerState, path: str | Path) -> None:
    """Single-file checkpoint: vocab, configs, and all parameter tensors."""
    model = state.model
    payload = {
        "version": CHECKPOINT_VERSION,
        "vocab_tokens": [model.vocab.token(i) for i in range(len(model.vocab))],
        "encoder_config": asdict(state.encoder_config),
        "strategy": asdict(model.strategy),
        "meta_config": asdict(state.meta_config) if state.meta_config else None,
        "model_state": model.state_dict(),
        "head_kind": state.head_kind,
        "head_state": state.head.state_dict() if state.head is not None else None,
        "head_shape": _head_shape(state.head),
        "mldg_hidden_state": (
            state.mldg_hidden.state_dict() if state.mldg_hidden is not None else None
        ),
        "optimizer_state": state.optimizer_state,
        "rng_state": state.rng_state,
        "best_model_state": state.best_model_state,
        "best_epoch": state.best_epoch,
    }
    torch.save(payload, path)


def _head_shape(head) -> dict | None:
    if head is None:
        return None
    if isinstance(head, nn.Linear):
        return {"kind": "linear", "in": head.in_features, "out": head.out_features}
    if isinstance(head, MldgFinetuneHead):
        return {"kind": "mldg", "in": head.hidden.in_features, "out": head.out.out_features}
    if isinstance(head, nn.Sequential):
        return {"kind": "ffn", "in": head[0].in_features, "out": head[-1].out_features}
    raise ValueError(f"cannot serialize head {type(head).__name__}")


def load_checkpoint(path: str | Path) -> LearnerState:
    payload = torch.load(path, weights_only=True)
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload['version']}")
    vocab = Vocab.from_token_list(payload["vocab_tokens"])
    encoder_config = EncoderConfig(**payload["encoder_config"])
    strategy = FusionStrategy(**payload["strategy"])
    encoder = TransformerEncoder(encoder_config, len(vocab))
    model = FusionModel(encoder, vocab, strategy)
    model.load_state_dict(payload["model_state"])
    model.eval()
    head = None
    if payload["head_state"] is not None:
        shape = payload["head_shape"]
        if shape["kind"] == "linear":
            head = nn.Linear(shape["in"], shape["out"])
        elif shape["kind"] == "mldg":
            head = MldgFinetuneHead(shape["in"], shape["out"])
        else:
            head = nn.Sequential(
                nn.Linear(shape["in"], shape["in"]), nn.GELU(), nn.Linear(shape["in"], shape["out"])
            )
        head.load_state_dict(payload["head_state"])
    hidden = None
    if payload["mldg_hidden_state"] is not None:
        hidden = MldgHead(encoder_config.d_model)
        hidden.load_state_dict(payload["mldg_hidden_state"])
    meta_config = None
    if payload["meta_config"]:
        mc = dict(payload["meta_config"])
        mc["k_choices"] = tuple(mc["k_choices"])
        mc["betas"] = tuple(mc["betas"])
        meta_config = MetaConfig(**mc)
    return LearnerState(
        model=model,
        encoder_config=encoder_config,
        meta_config=meta_config,
        head=head,
        head_kind=payload["head_kind"],
        mldg_hidden=hidden,
        optimizer_state=payload["optimizer_state"],
        rng_state=payload["rng_state"],
        best_model_state=payload["best_model_state"],
        best_epoch=payload["best_epoch"],
    )
