import random

import pytest

from protofuse.corpus import Dataset, DomainManifest, Example, LabelDef


def make_domain(domain_id="dom", counts=(10, 10), tag="full", seed=7, definitions=None):
    """Small synthetic domain: class c texts are 'w{c}a w{c}b ...' variants."""
    labels = tuple(
        LabelDef(f"label {c}", (definitions or {}).get(c, f"things about w{c}"))
        for c in range(len(counts))
    )
    manifest = DomainManifest(domain_id=domain_id, labels=labels)
    rng = random.Random(seed)
    examples = []
    for c, n in enumerate(counts):
        for i in range(n):
            fillers = " ".join(rng.choice(["x", "y", "z"]) for _ in range(3))
            examples.append(
                Example(
                    text=f"w{c}a w{c}b {fillers} n{i}",
                    label_index=c,
                    domain_id=domain_id,
                )
            )
    return Dataset(manifest=manifest, examples=tuple(examples), split_tag=tag)


@pytest.fixture
def two_class_domain():
    return make_domain()
