"""Deterministic desk-scale corpora shipped with the toolkit.

These fixtures back the demo scripts and the verification suites: a tiny
memorization corpus, a synthetic grounding corpus whose hypotheses contain
one token decidable only from the image vector, and a copy-baseline corpus
for the overlap analysis. All are pure functions of their seeds.
"""

from __future__ import annotations

import numpy as np

from .corpus import FeatureStore, Triple
from .metrics import EvalInstance

_NOUNS = ["dog", "cat", "bird", "horse", "fish", "frog", "bear", "wolf",
          "fox", "deer", "owl", "bat", "goat", "duck", "pig", "cow",
          "hen", "crab", "mole", "seal"]
_ADJS = ["quick", "small", "happy", "brave", "calm"]


def overfit_fixture(image_dim=16, seed=11):
    """20 triples with one reference each, for memorization checks.

    Each triple has a distinct premise, a distinct hypothesis and its own
    image vector, so every variant (including image-only) can memorize the
    mapping.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    triples = []
    vectors = {}
    for i, noun in enumerate(_NOUNS):
        adj = _ADJS[i % len(_ADJS)]
        image_id = f"ov{i:02d}"
        triples.append(Triple(
            pair_id=f"pair{i:02d}",
            premise=f"a {adj} {noun} runs in the park .",
            hypotheses=[f"the {noun} is {adj} ."],
            image_id=image_id))
        vectors[image_id] = rng.uniform(-1.0, 1.0, size=image_dim)
    return triples, FeatureStore(vectors, dimension=image_dim)


CLASS_TOKENS = ["crimson", "azure", "amber", "jade",
                "ivory", "onyx", "coral", "slate"]

# Index into per_token_nll output at which the class token of a grounding
# hypothesis is predicted (hypothesis tokens: the <class> object is visible .)
CLASS_TOKEN_STEP = 1

_G_FILLERS = ["small", "old", "young", "tall", "tiny", "gray", "broad", "slim"]
_G_NOUNS = ["tree", "house", "bridge", "tower", "boat",
            "lamp", "bench", "fence", "gate", "wall"]
_G_VERBS = ["stands", "waits", "leans", "rests", "sits", "looms"]
_G_PLACES = ["river", "market", "garden", "harbor",
             "meadow", "forest", "square", "hill"]


def grounding_fixture(n=500, image_dim=16, seed=7):
    """Corpus where one hypothesis token is a function of the image alone.

    Each record's image vector is one of eight fixed class vectors; the
    hypothesis names the class ("the <class> object is visible .") while the
    premise is drawn independently of the class. A text-only model can do no
    better than the class marginal at that position; any model that reads
    the image can decide it exactly.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    class_vectors = rng.uniform(-1.0, 1.0, size=(len(CLASS_TOKENS), image_dim))
    triples = []
    vectors = {}
    for i in range(n):
        cls = i % len(CLASS_TOKENS)
        premise = (f"the {_G_FILLERS[rng.integers(len(_G_FILLERS))]} "
                   f"{_G_NOUNS[rng.integers(len(_G_NOUNS))]} "
                   f"{_G_VERBS[rng.integers(len(_G_VERBS))]} near the "
                   f"{_G_PLACES[rng.integers(len(_G_PLACES))]} .")
        image_id = f"gr{i:04d}"
        triples.append(Triple(
            pair_id=f"g{i:04d}",
            premise=premise,
            hypotheses=[f"the {CLASS_TOKENS[cls]} object is visible ."],
            image_id=image_id))
        vectors[image_id] = class_vectors[cls]
    return triples, FeatureStore(vectors, dimension=image_dim)


_C_WORDS = ["river", "stone", "garden", "lantern", "harbor", "willow",
            "meadow", "copper", "violin", "orchard", "marble", "falcon",
            "saddle", "beacon", "timber", "canyon", "velvet", "anchor",
            "thistle", "ember", "granite", "sparrow", "cedar", "lagoon",
            "quarry", "heron", "bramble", "tundra", "parcel", "grove"]
_C_FILLER = ["basket", "candle", "mirror", "ribbon", "kettle", "hammer",
             "ladder", "bottle", "pillow", "carpet", "bucket", "needle",
             "shovel", "drawer", "teapot", "helmet", "goblet", "spindle",
             "awning", "mantel", "tripod", "easel", "flagon", "satchel"]


def copy_overlap_fixture(seed=3):
    """Premise-copy evaluation set with the paper-style overlap structure.

    Candidates equal the premises. Above the 0.3 Dice threshold, references
    share 2..5 of the premise's five content words, so per-instance CIDEr
    rises with overlap. Below it, references vary shared stopword/punctuation
    framing (which CIDEr sees but Dice ignores) independently of the shared
    content count, so CIDEr is roughly flat noise there. Returns (premise
    token lists by pair_id, EvalInstance rows).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    premises = {}
    instances = []

    def fill():
        return _C_FILLER[int(rng.integers(len(_C_FILLER)))]

    idx = 0
    for k in range(24):
        pair_id = f"cp{idx:02d}"
        idx += 1
        words = [_C_WORDS[(k * 5 + j) % len(_C_WORDS)] for j in range(5)]
        premise = ["the"] + words + ["."]
        ref = ["the"] + words[:2 + k % 4]
        while len(ref) < 6:
            ref.append(fill())
        ref.append(".")
        premises[pair_id] = premise
        instances.append(EvalInstance(pair_id, list(premise), [ref]))
    for k in range(12):
        pair_id = f"cp{idx:02d}"
        idx += 1
        words = [_C_WORDS[(k * 5 + j + 7) % len(_C_WORDS)] for j in range(5)]
        mode = k % 3
        if mode == 0:  # no shared content words; shared rare framing
            premise = ["while", "the"] + words + ["!"]
            ref = ["while", "the"] + [fill() for _ in range(5)] + ["!"]
        elif mode == 1:  # one shared word diluted in a long plain reference
            premise = ["the"] + words + ["."]
            ref = [words[4]] + [fill() for _ in range(8)]
        else:  # one shared word in a short reference with shared framing
            premise = ["the"] + words + ["!"]
            ref = ["a", words[0], fill(), "!"]
        premises[pair_id] = premise
        instances.append(EvalInstance(pair_id, list(premise), [ref]))
    return premises, instances
