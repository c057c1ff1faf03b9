"""Corpus ingestion, text preprocessing, and deterministic splitting.

A *domain* is one labeled dataset with its own label space; each label may
carry a natural-language definition. Domains are loaded from a manifest
JSON file plus a line-delimited records file, normalized through
:func:`preprocess_text`, and sliced with seeded, reproducible samplers.
"""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

__all__ = [
    "LabelDef",
    "DomainManifest",
    "Example",
    "Dataset",
    "preprocess_text",
    "split_hashtag",
    "load_manifest",
    "load_domain",
    "save_dataset",
    "load_dataset",
    "stratified_sample",
    "collapse_binary",
    "kshot_sample",
    "holdout_split",
    "BINARY_LABELS",
]

SPLIT_TAGS = ("full", "train", "holdout", "kshot", "validation")

_URL_PREFIXES = ("http://", "https://", "www.")
_MENTION_RE = re.compile(r"@\w+")
_HASHTAG_RE = re.compile(r"#+(\w+)")


def split_hashtag(body: str) -> str:
    """Split a hashtag body on camel-case and digit boundaries, lowercased.

    "HateSpeech2020" -> "hate speech 2020". Deterministic rule standing in
    for a dictionary-based segmenter.
    """
    s = re.sub(r"(?<=[a-z])(?=[A-Z])", " ", body)
    s = re.sub(r"(?<=[A-Z])(?=[A-Z][a-z])", " ", s)
    s = re.sub(r"(?<=[A-Za-z])(?=[0-9])", " ", s)
    s = re.sub(r"(?<=[0-9])(?=[A-Za-z])", " ", s)
    return s.lower()


def preprocess_text(raw: str) -> str:
    """Normalize one text: lowercase ASCII with URL/mention/hashtag handling.

    Steps, in order: drop non-ASCII characters; replace URL tokens
    (http://, https://, www. prefixes) with ``<url>``; replace @-mentions
    with ``<user>``; segment hashtags into lowercase words; lowercase;
    collapse runs of a repeated whitespace-delimited token to a single
    occurrence. Total and idempotent: re-applying is a no-op.
    """
    text = raw.encode("ascii", "ignore").decode("ascii")
    tokens = [
        "<url>" if t.lower().startswith(_URL_PREFIXES) else t
        for t in text.split()
    ]
    text = " ".join(tokens)
    text = _MENTION_RE.sub("<user>", text)
    text = _HASHTAG_RE.sub(lambda m: " " + split_hashtag(m.group(1)) + " ", text)
    text = text.lower()
    tokens = text.split()
    collapsed = [t for i, t in enumerate(tokens) if i == 0 or t != tokens[i - 1]]
    return " ".join(collapsed)


@dataclass(frozen=True)
class LabelDef:
    """One class label: a short name plus its full definition (may be empty)."""

    name: str
    definition: str = ""

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError("label name must be non-empty")


@dataclass(frozen=True)
class DomainManifest:
    """A domain's ordered label space; label order fixes integer class indices."""

    domain_id: str
    labels: tuple[LabelDef, ...]
    source_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) < 2:
            raise ValueError(
                f"manifest {self.domain_id!r} needs at least 2 labels, got {len(self.labels)}"
            )
        names = [l.name.strip() for l in self.labels]
        dupes = [n for n, c in Counter(names).items() if c > 1]
        if dupes:
            raise ValueError(f"duplicate label names in manifest {self.domain_id!r}: {dupes}")

    @property
    def label_names(self) -> tuple[str, ...]:
        return tuple(l.name for l in self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def label_index(self, name: str) -> int:
        for i, l in enumerate(self.labels):
            if l.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class Example:
    """One preprocessed text with its gold class index and owning domain."""

    text: str
    label_index: int
    domain_id: str
    id: str | None = None


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of examples under one manifest."""

    manifest: DomainManifest
    examples: tuple[Example, ...]
    split_tag: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")
        n = self.manifest.n_classes
        for ex in self.examples:
            if ex.domain_id != self.manifest.domain_id:
                raise ValueError(
                    f"example domain {ex.domain_id!r} != manifest domain "
                    f"{self.manifest.domain_id!r}"
                )
            if not 0 <= ex.label_index < n:
                raise ValueError(f"label index {ex.label_index} out of range for {n} classes")

    def __len__(self) -> int:
        return len(self.examples)

    def class_counts(self) -> list[int]:
        counts = [0] * self.manifest.n_classes
        for ex in self.examples:
            counts[ex.label_index] += 1
        return counts

    def class_indices(self) -> list[list[int]]:
        """Example positions grouped by class, in manifest label order."""
        groups: list[list[int]] = [[] for _ in range(self.manifest.n_classes)]
        for i, ex in enumerate(self.examples):
            groups[ex.label_index].append(i)
        return groups

    def texts(self) -> list[str]:
        return [ex.text for ex in self.examples]


def load_manifest(path: str | Path) -> DomainManifest:
    data = json.loads(Path(path).read_text())
    if "domain_id" not in data or "labels" not in data:
        raise ValueError(f"manifest {path}: requires 'domain_id' and 'labels' keys")
    labels = tuple(
        LabelDef(l["name"], l.get("definition", "")) for l in data["labels"]
    )
    return DomainManifest(
        domain_id=data["domain_id"],
        labels=labels,
        source_meta=dict(data.get("source_meta", {})),
    )


def load_domain(manifest_file: str | Path, records_file: str | Path) -> Dataset:
    """Load one domain from a manifest file plus line-delimited JSON records.

    Each record is ``{"text": str, "label": str}`` with an optional ``"id"``
    passed through. Texts are preprocessed. Unknown label strings are
    rejected with the offending line number.
    """
    manifest = load_manifest(manifest_file)
    index = {l.name: i for i, l in enumerate(manifest.labels)}
    examples = []
    with open(records_file) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{records_file}:{lineno}: invalid JSON ({exc})") from exc
            if "text" not in rec or "label" not in rec:
                raise ValueError(f"{records_file}:{lineno}: record needs 'text' and 'label'")
            label = rec["label"]
            if label not in index:
                raise ValueError(
                    f"{records_file}:{lineno}: unknown label {label!r} "
                    f"(manifest has {list(index)})"
                )
            examples.append(
                Example(
                    text=preprocess_text(rec["text"]),
                    label_index=index[label],
                    domain_id=manifest.domain_id,
                    id=rec.get("id"),
                )
            )
    return Dataset(manifest=manifest, examples=tuple(examples), split_tag="full")


def _manifest_to_dict(m: DomainManifest) -> dict:
    return {
        "domain_id": m.domain_id,
        "labels": [{"name": l.name, "definition": l.definition} for l in m.labels],
        "source_meta": m.source_meta,
    }


def save_dataset(d: Dataset, path: str | Path) -> None:
    """Write the canonical dataset file (manifest + examples + split tag)."""
    payload = {
        "manifest": _manifest_to_dict(d.manifest),
        "split_tag": d.split_tag,
        "examples": [
            {"text": ex.text, "label_index": ex.label_index, "id": ex.id}
            for ex in d.examples
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_dataset(path: str | Path) -> Dataset:
    data = json.loads(Path(path).read_text())
    m = data["manifest"]
    manifest = DomainManifest(
        domain_id=m["domain_id"],
        labels=tuple(LabelDef(l["name"], l.get("definition", "")) for l in m["labels"]),
        source_meta=dict(m.get("source_meta", {})),
    )
    examples = tuple(
        Example(e["text"], e["label_index"], manifest.domain_id, e.get("id"))
        for e in data["examples"]
    )
    return Dataset(manifest=manifest, examples=examples, split_tag=data["split_tag"])


def _subset(d: Dataset, positions: list[int], tag: str) -> Dataset:
    return Dataset(
        manifest=d.manifest,
        examples=tuple(d.examples[i] for i in sorted(positions)),
        split_tag=tag,
    )


def stratified_sample(d: Dataset, target_size: int, seed: int) -> Dataset:
    """Sample `target_size` examples spread as evenly over classes as possible.

    Greedy water-filling: classes are visited in ascending availability;
    classes smaller than their equal share contribute everything and the
    deficit is spread over the remaining classes. Deterministic given seed.
    """
    n_classes = d.manifest.n_classes
    if target_size < n_classes:
        raise ValueError(f"target_size {target_size} < number of classes {n_classes}")
    if target_size > len(d):
        raise ValueError(f"target_size {target_size} exceeds dataset size {len(d)}")
    groups = d.class_indices()
    order = sorted(range(n_classes), key=lambda c: (len(groups[c]), c))
    quota: dict[int, int] = {}
    remaining = target_size
    for pos, c in enumerate(order):
        share = remaining // (n_classes - pos)
        take = min(len(groups[c]), share)
        # Leftover from integer division lands on the last class.
        if pos == n_classes - 1:
            take = min(len(groups[c]), remaining)
        quota[c] = take
        remaining -= take
    # Redistribute any residue (from capped classes late in the order).
    while remaining > 0:
        open_classes = [c for c in order if quota[c] < len(groups[c])]
        for c in sorted(open_classes, key=lambda c: (quota[c], c)):
            if remaining == 0:
                break
            quota[c] += 1
            remaining -= 1
    rng = random.Random(seed)
    chosen: list[int] = []
    for c in range(n_classes):
        chosen.extend(rng.sample(groups[c], quota[c]))
    return _subset(d, chosen, d.split_tag)


BINARY_LABELS = (LabelDef("Offensive", ""), LabelDef("Not Offensive", ""))


def collapse_binary(d: Dataset, neutral_labels: set[str]) -> Dataset:
    """Collapse the label space to [Offensive, Not Offensive].

    Examples whose original label is in `neutral_labels` map to
    Not Offensive; all others to Offensive. Texts are untouched.
    """
    unknown = set(neutral_labels) - set(d.manifest.label_names)
    if unknown:
        raise ValueError(f"neutral labels not in manifest: {sorted(unknown)}")
    manifest = DomainManifest(
        domain_id=d.manifest.domain_id,
        labels=BINARY_LABELS,
        source_meta={**d.manifest.source_meta, "collapsed_from": ",".join(d.manifest.label_names)},
    )
    neutral_idx = {i for i, name in enumerate(d.manifest.label_names) if name in neutral_labels}
    examples = tuple(
        replace(ex, label_index=1 if ex.label_index in neutral_idx else 0)
        for ex in d.examples
    )
    return Dataset(manifest=manifest, examples=examples, split_tag=d.split_tag)


def kshot_sample(d: Dataset, k: int, seed: int) -> tuple[Dataset, Dataset]:
    """Draw exactly k examples per class without replacement; return (kshot, remainder)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    groups = d.class_indices()
    for c, idxs in enumerate(groups):
        if len(idxs) < k:
            raise ValueError(
                f"class {d.manifest.label_names[c]!r} has {len(idxs)} examples, needs {k}"
            )
    rng = random.Random(seed)
    picked: list[int] = []
    for idxs in groups:
        picked.extend(rng.sample(idxs, k))
    picked_set = set(picked)
    rest = [i for i in range(len(d)) if i not in picked_set]
    return _subset(d, picked, "kshot"), _subset(d, rest, d.split_tag)


def holdout_split(d: Dataset, holdout_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/holdout split; per-class holdout = round(fraction * size)."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    groups = d.class_indices()
    rng = random.Random(seed)
    held: list[int] = []
    for c, idxs in enumerate(groups):
        n_hold = round(holdout_fraction * len(idxs))
        if n_hold == 0 or n_hold == len(idxs):
            raise ValueError(
                f"fraction {holdout_fraction} leaves an empty side for class "
                f"{d.manifest.label_names[c]!r} ({len(idxs)} examples)"
            )
        held.extend(rng.sample(idxs, n_hold))
    held_set = set(held)
    train = [i for i in range(len(d)) if i not in held_set]
    return _subset(d, train, "train"), _subset(d, held, "holdout")
