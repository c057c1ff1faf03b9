"""Synthetic cluster-separable corpora for the transfer experiments.

Ten token "topics" form the shared universe. Each training domain holds
three topics as its classes; the test domain holds a topic combination that
never co-occurs during training. Texts mix their own topic's tokens with
distractor tokens drawn from topics *outside* the domain's label space plus
shared noise; a fraction of examples are distractor-heavy. Distractors are
class-neutral, so every query stays classifiable, but they drag plain
per-class centroids around, while each label's definition lists exactly its
topic's tokens and carries genuinely disambiguating information.
"""

import random

from protofuse.corpus import Dataset, DomainManifest, Example, LabelDef

N_TOPICS = 10
TOKENS_PER_TOPIC = 6
NOISE_TOKENS = [f"n{i}" for i in range(30)]
CLASS_NAMES = ("alpha", "beta", "gamma")

# Topic triples per training domain; the test triple never co-occurs.
TRAIN_TOPICS = [
    (0, 1, 2),
    (3, 4, 5),
    (6, 7, 8),
    (9, 0, 4),
    (2, 5, 7),
]
TEST_TOPICS = (1, 6, 9)

# Text mixture: clean examples are own-topic dominated; hard examples are
# distractor-heavy and mainly pollute class centroids.
MIX = dict(
    n_own=4, n_foreign=2, n_noise=3,
    hard_fraction=0.3, hard_own=2, hard_foreign=5,
)


def topic_tokens(topic: int) -> list[str]:
    return [f"t{topic}w{j}" for j in range(TOKENS_PER_TOPIC)]


def _make_text(rng, topic, domain_topics, n_own, n_foreign, n_noise) -> str:
    words = [rng.choice(topic_tokens(topic)) for _ in range(n_own)]
    foreign = [t for t in range(N_TOPICS) if t not in domain_topics]
    for _ in range(n_foreign):
        words.append(rng.choice(topic_tokens(rng.choice(foreign))))
    words.extend(rng.choice(NOISE_TOKENS) for _ in range(n_noise))
    rng.shuffle(words)
    return " ".join(words)


def make_domain(domain_id: str, topics, n_per_class: int, seed: int, mix=None) -> Dataset:
    mix = {**MIX, **(mix or {})}
    rng = random.Random(seed)
    # Shared class names keep every definition token inside the trained
    # vocabulary; only the topic tokens differ between labels.
    labels = tuple(
        LabelDef(
            name=CLASS_NAMES[c],
            definition="posts that mention " + " ".join(topic_tokens(t)),
        )
        for c, t in enumerate(topics)
    )
    manifest = DomainManifest(domain_id=domain_id, labels=labels)
    examples = []
    for c, t in enumerate(topics):
        for _ in range(n_per_class):
            if rng.random() < mix["hard_fraction"]:
                text = _make_text(rng, t, topics, mix["hard_own"], mix["hard_foreign"],
                                  mix["n_noise"])
            else:
                text = _make_text(rng, t, topics, mix["n_own"], mix["n_foreign"],
                                  mix["n_noise"])
            examples.append(Example(text=text, label_index=c, domain_id=domain_id))
    return Dataset(manifest=manifest, examples=tuple(examples))


def make_transfer_corpus(seed: int = 0, n_train_per_class: int = 40,
                         n_test_per_class: int = 200, mix=None):
    """(train_domains, test_domain) with a shared token universe."""
    train = [
        make_domain(f"train{i}", topics, n_train_per_class, seed * 1000 + i, mix)
        for i, topics in enumerate(TRAIN_TOPICS)
    ]
    test = make_domain("transfer_test", TEST_TOPICS, n_test_per_class, seed * 1000 + 99, mix)
    return train, test
