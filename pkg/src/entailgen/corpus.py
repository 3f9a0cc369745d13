"""Data ingestion: premise/hypotheses/image triples, vocabulary, splits.

Triples arrive as one JSON record per line (``pair_id``, ``premise``,
``hypotheses`` array, ``image_id``); image features arrive as a binary
"EGFT" file of named float32 vectors. Text is lowercased and tokenized with
a fixed punctuation-splitting rule so downstream metrics are reproducible.

Splitting groups records transitively: records sharing an image, and
records whose premise string recurs under different images, end up in the
same group, and whole groups are assigned to exactly one partition. That is
what guarantees zero premise/image overlap between train, dev and test.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, FormatError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

PUNCT_CHARS = ".,!?;:\"'()"

_TOKEN_RE = re.compile(r"[.,!?;:\"'()]|[^\s.,!?;:\"'()]+")


def tokenize(text):
    """Lowercase and split; each punctuation mark becomes its own token.

    Idempotent on its own space-joined output, and deterministic: the rule
    is part of the toolkit's contract, not a tunable.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Triple:
    """One dataset record: premise text, reference hypotheses, image key."""

    pair_id: str
    premise: str
    hypotheses: list
    image_id: str

    def __post_init__(self):
        if not self.hypotheses:
            raise DataError(f"triple {self.pair_id!r} has no hypotheses")


@dataclass
class EncodedTriple:
    """Index-encoded triple: BOS/EOS-delimited premise and hypotheses."""

    pair_id: str
    premise_ids: list
    hypothesis_ids: list  # one index list per reference
    image_id: str


class Vocabulary:
    """Token/index bijection with fixed reserved indices 0..3.

    Tokens below ``min_frequency`` in the training corpus are not stored and
    encode to UNK.
    """

    def __init__(self, tokens, min_frequency):
        self.min_frequency = min_frequency
        self._index = {}
        self._tokens = list(RESERVED_TOKENS)
        for i, tok in enumerate(RESERVED_TOKENS):
            self._index[tok] = i
        for tok in tokens:
            if tok in self._index:
                raise ContractError(f"duplicate vocabulary token {tok!r}")
            self._index[tok] = len(self._tokens)
            self._tokens.append(tok)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._index

    def index(self, token):
        return self._index.get(token, UNK)

    def token(self, index):
        return self._tokens[index]

    def encode(self, tokens):
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, indices):
        return [self._tokens[i] for i in indices]

    def stored_tokens(self):
        """Non-reserved tokens, in index order."""
        return self._tokens[len(RESERVED_TOKENS):]


def build_vocab(triples, min_frequency=10):
    """Count tokens over premises and hypotheses; keep those at threshold.

    Call this on the training split only. Stored tokens are ordered by
    descending count, ties alphabetical, so builds are reproducible.
    """
    triples = list(triples)
    if not triples:
        raise ContractError("build_vocab on an empty corpus")
    counts = Counter()
    for t in triples:
        counts.update(tokenize(t.premise))
        for h in t.hypotheses:
            counts.update(tokenize(h))
    kept = [tok for tok, c in counts.items() if c >= min_frequency]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept, min_frequency)


def encode_example(triple, vocab):
    """BOS/EOS-delimit and index the premise and every reference."""
    prem = [BOS] + vocab.encode(tokenize(triple.premise)) + [EOS]
    hyps = [[BOS] + vocab.encode(tokenize(h)) + [EOS] for h in triple.hypotheses]
    return prem, hyps


def encode_triples(triples, vocab):
    out = []
    for t in triples:
        prem, hyps = encode_example(t, vocab)
        out.append(EncodedTriple(t.pair_id, prem, hyps, t.image_id))
    return out


# ---------------------------------------------------------------------------
# Group-respecting split
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Partition fraction targets plus the shuffle seed."""

    train: float = 0.8
    dev: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name, frac in (("train", self.train), ("dev", self.dev), ("test", self.test)):
            if frac <= 0:
                raise ContractError(f"{name} fraction must be positive, got {frac}")
        if abs(self.train + self.dev + self.test - 1.0) > 1e-9:
            raise ContractError("split fractions must sum to 1")


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def _grouped(triples):
    """Group triples transitively over shared image_id or premise string."""
    uf = _UnionFind()
    premise_owner = {}
    for t in triples:
        if not t.image_id:
            raise ContractError(f"triple {t.pair_id!r} has no image_id")
        uf.find(t.image_id)
        owner = premise_owner.setdefault(t.premise, t.image_id)
        uf.union(owner, t.image_id)
    groups = {}
    for t in triples:
        groups.setdefault(uf.find(t.image_id), []).append(t)
    return groups


def _fill_two_way(groups_in_order, sizes, target_first):
    """Greedy whole-group assignment toward a triple-count target."""
    first, rest = [], []
    assigned_first = 0
    assigned_rest = 0
    total = sum(sizes)
    target_rest = total - target_first
    for key, size in zip(groups_in_order, sizes):
        deficit_first = target_first - assigned_first
        deficit_rest = target_rest - assigned_rest
        if deficit_first > deficit_rest:
            first.append(key)
            assigned_first += size
        else:
            rest.append(key)
            assigned_rest += size
    return first, rest


def group_and_split(triples, spec):
    """Assign whole groups to train/dev/test approximating the fractions.

    Test is separated first, then dev is carved out of the remainder; both
    stages walk the seeded-shuffled group list greedily by remaining triple
    deficit. Pure function of (group keys, seed, fractions): the same input
    always produces the same assignment.
    """
    triples = list(triples)
    groups = _grouped(triples)
    keys = sorted(groups)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    order = [keys[i] for i in rng.permutation(len(keys))]
    sizes = [len(groups[k]) for k in order]
    total = len(triples)

    test_keys, rest_keys = _fill_two_way(order, sizes, spec.test * total)
    rest_sizes = [len(groups[k]) for k in rest_keys]
    dev_keys, train_keys = _fill_two_way(rest_keys, rest_sizes, spec.dev * total)

    key_of = {}
    for key, members in groups.items():
        for t in members:
            key_of[id(t)] = key
    parts = {"train": [], "dev": [], "test": []}
    name_of = {}
    for k in train_keys:
        name_of[k] = "train"
    for k in dev_keys:
        name_of[k] = "dev"
    for k in test_keys:
        name_of[k] = "test"
    for t in triples:
        parts[name_of[key_of[id(t)]]].append(t)
    return parts


# ---------------------------------------------------------------------------
# Triples file (JSON lines)
# ---------------------------------------------------------------------------

def load_triples(path):
    """Read one JSON record per line; lines starting with '#' are headers."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: bad JSON record: {exc}") from exc
            try:
                out.append(Triple(rec["pair_id"], rec["premise"],
                                  list(rec["hypotheses"]), rec["image_id"]))
            except KeyError as exc:
                raise FormatError(f"{path}:{lineno}: missing field {exc}") from exc
    return out


def save_triples(path, triples, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for t in triples:
            fh.write(json.dumps({"pair_id": t.pair_id, "premise": t.premise,
                                 "hypotheses": t.hypotheses, "image_id": t.image_id},
                                ensure_ascii=False, sort_keys=True))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Image feature store ("EGFT")
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"EGFT"
FEATURE_VERSION = 1


class FeatureStore:
    """Immutable image_id -> float32 feature vector map of one dimension."""

    def __init__(self, vectors, dimension=None):
        self._vectors = {}
        self.dimension = dimension
        for image_id, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float32)
            if arr.ndim != 1:
                raise DataError(f"feature for {image_id!r} is not a vector")
            if self.dimension is None:
                self.dimension = arr.shape[0]
            if arr.shape[0] != self.dimension:
                raise DataError(
                    f"feature for {image_id!r} has dimension {arr.shape[0]}, "
                    f"expected {self.dimension}")
            if not np.isfinite(arr).all():
                raise DataError(f"non-finite feature value for image {image_id!r}")
            self._vectors[image_id] = arr
        if self.dimension is None:
            self.dimension = 4096

    def __len__(self):
        return len(self._vectors)

    def __contains__(self, image_id):
        return image_id in self._vectors

    def get(self, image_id):
        if image_id not in self._vectors:
            raise DataError(f"no image features for id {image_id!r}")
        return self._vectors[image_id]

    def ids(self):
        return list(self._vectors)

    def missing_ids(self, triples):
        """Image ids referenced by the triples but absent from the store."""
        return sorted({t.image_id for t in triples if t.image_id not in self._vectors})


def save_image_features(path, store):
    """Write the EGFT layout: magic, version, count, dimension, id table,
    then the count x dimension float32 LE payload in id-table order."""
    ids = store.ids()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, len(ids), store.dimension))
        for image_id in ids:
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for image_id in ids:
            fh.write(np.ascontiguousarray(store.get(image_id), dtype="<f4").tobytes())


def load_image_features(path):
    """Read an EGFT file into a FeatureStore.

    Raises FormatError (with the byte offset) on bad magic or truncation and
    DataError (naming the image id) on non-finite values.
    """
    blob = open(path, "rb").read()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature-file magic {blob[:4]!r}", offset=0)
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated feature file while reading {what}", offset=pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count, dim = struct.unpack("<III", take(12, "header"))
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature-file version {version}", offset=4)
    ids = []
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"id length {i}"))
        ids.append(take(name_len, f"id {i}").decode("utf-8"))
    vectors = {}
    for image_id in ids:
        payload = take(4 * dim, f"vector for {image_id!r}")
        vec = np.frombuffer(payload, dtype="<f4")
        if not np.isfinite(vec).all():
            raise DataError(f"non-finite feature value for image {image_id!r}")
        vectors[image_id] = vec.copy()
    if pos != len(blob):
        raise FormatError("trailing bytes after feature payload", offset=pos)
    return FeatureStore(vectors, dimension=dim)


# ---------------------------------------------------------------------------
# Vocabulary file
# ---------------------------------------------------------------------------

def save_vocab(path, vocab, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(f"# min_frequency {vocab.min_frequency}\n")
        for i, tok in enumerate(vocab.stored_tokens(), start=len(RESERVED_TOKENS)):
            fh.write(f"{i}\t{tok}\n")


def load_vocab(path):
    min_freq = 1
    tokens = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# min_frequency"):
                min_freq = int(line.split()[-1])
                continue
            if not line or line.startswith("#"):
                continue
            _, tok = line.split("\t", 1)
            tokens.append(tok)
    return Vocabulary(tokens, min_freq)
