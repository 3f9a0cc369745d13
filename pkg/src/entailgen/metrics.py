"""Multi-reference generation metrics and the corpus evaluation report.

BLEU-1 is corpus-level modified unigram precision with reference-set
clipping and a closest-reference-length brevity penalty; the single
reference mode replays the candidate-vs-each-reference comparison by
averaging per-pair scores. METEOR here is the exact-match variant (no
stemming or synonym resources): unigram F-mean with the fragmentation
penalty over the minimum chunk count among maximum matchings. CIDEr is
IDF-weighted n-gram cosine consensus for n = 1..4, reported unscaled.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .corpus import PUNCT_CHARS
from .errors import ContractError, UndefinedCorrelationError
from .models import per_token_nll
from .stopwords import STOPWORDS, STOPWORDS_VERSION

_PUNCT_TOKENS = frozenset(PUNCT_CHARS)


@dataclass
class EvalInstance:
    """One candidate and its (non-empty) reference set, already tokenized."""

    pair_id: str
    candidate: list
    references: list

    def __post_init__(self):
        if not self.references:
            raise ContractError(f"instance {self.pair_id!r} has no references")


# ---------------------------------------------------------------------------
# BLEU-1
# ---------------------------------------------------------------------------

def _closest_ref_len(cand_len, ref_lens):
    # Ties between equally close reference lengths go to the shorter one.
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def _clipped_matches(candidate, references):
    counts = Counter(candidate)
    cap = Counter()
    for ref in references:
        for tok, c in Counter(ref).items():
            cap[tok] = max(cap[tok], c)
    return sum(min(c, cap[tok]) for tok, c in counts.items())


def _brevity_penalty(c, r):
    if c == 0:
        return 0.0
    return 1.0 if c >= r else math.exp(1.0 - r / c)


def bleu1(candidates, references, mode="multi_ref"):
    """Corpus BLEU-1.

    ``multi_ref`` clips each candidate against its whole reference set and
    applies one corpus-level brevity penalty. ``single_ref_mean`` compares
    each candidate to each of its references separately and averages the
    per-pair scores.
    """
    candidates = list(candidates)
    references = list(references)
    if not candidates:
        raise ContractError("bleu1 on an empty candidate corpus")
    if len(candidates) != len(references):
        raise ContractError("candidate/reference corpora are not aligned")
    for refs in references:
        if not refs:
            raise ContractError("empty reference set")
    if mode == "multi_ref":
        matched = total = 0
        c_len = r_len = 0
        for cand, refs in zip(candidates, references):
            matched += _clipped_matches(cand, refs)
            total += len(cand)
            c_len += len(cand)
            r_len += _closest_ref_len(len(cand), [len(r) for r in refs])
        if total == 0:
            return 0.0
        return _brevity_penalty(c_len, r_len) * matched / total
    if mode == "single_ref_mean":
        scores = []
        for cand, refs in zip(candidates, references):
            for ref in refs:
                matched = _clipped_matches(cand, [ref])
                p = matched / len(cand) if cand else 0.0
                scores.append(_brevity_penalty(len(cand), len(ref)) * p)
        return sum(scores) / len(scores)
    raise ContractError(f"unknown bleu1 mode {mode!r}")


# ---------------------------------------------------------------------------
# METEOR (exact-match variant)
# ---------------------------------------------------------------------------

def _min_chunks(cand, ref):
    """Minimum chunk count over maximum exact unigram matchings.

    Branch and bound over candidate positions, trying chunk-continuing
    alignments first; practical for sentence-length inputs.
    """
    need = Counter(cand) & Counter(ref)
    total = sum(need.values())
    if total == 0:
        return 0
    positions = defaultdict(list)
    for j, tok in enumerate(ref):
        positions[tok].append(j)
    used = [False] * len(ref)
    remaining = Counter(cand)
    best = [total + 1]

    def dfs(i, matched, last, chunks):
        if chunks >= best[0]:
            return
        if matched == total:
            best[0] = chunks
            return
        tok = cand[i]
        if need[tok] > 0:
            free = [j for j in positions[tok] if not used[j]]
            last_i, last_j = last
            free.sort(key=lambda j: (not (i == last_i + 1 and j == last_j + 1), j))
            for j in free:
                used[j] = True
                need[tok] -= 1
                remaining[tok] -= 1
                cont = i == last_i + 1 and j == last_j + 1
                dfs(i + 1, matched + 1, (i, j), chunks + (0 if cont else 1))
                used[j] = False
                need[tok] += 1
                remaining[tok] += 1
            if remaining[tok] - 1 >= need[tok]:
                remaining[tok] -= 1
                dfs(i + 1, matched, last, chunks)
                remaining[tok] += 1
        else:
            remaining[tok] -= 1
            dfs(i + 1, matched, last, chunks)
            remaining[tok] += 1

    dfs(0, 0, (-2, -2), 0)
    return best[0]


def meteor_exact(candidate, references):
    """Max over references of F-mean times the fragmentation penalty.

    Per reference: P = m/|cand|, R = m/|ref|, F = 10PR/(R + 9P),
    penalty = 0.5 (chunks/m)^3; zero matches score zero.
    """
    references = list(references)
    if not references:
        raise ContractError("meteor on an empty reference set")
    best = 0.0
    for ref in references:
        if not candidate or not ref:
            continue
        m = sum((Counter(candidate) & Counter(ref)).values())
        if m == 0:
            continue
        p = m / len(candidate)
        r = m / len(ref)
        f_mean = 10.0 * p * r / (r + 9.0 * p)
        chunks = _min_chunks(candidate, ref)
        score = f_mean * (1.0 - 0.5 * (chunks / m) ** 3)
        best = max(best, score)
    return best


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------

def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _cosine(a, b):
    if not a or not b:
        return 0.0
    dot = sum(w * b[g] for g, w in a.items() if g in b)
    na = math.sqrt(sum(w * w for w in a.values()))
    nb = math.sqrt(sum(w * w for w in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider(instances, max_n=4):
    """Unscaled CIDEr: mean over n of mean over references of TF-IDF cosine.

    Document frequency counts the instances whose reference set contains an
    n-gram; the candidate side reuses the same IDF table (unseen n-grams get
    idf = log N). Returns (corpus score, per-instance scores by pair_id).
    """
    instances = list(instances)
    n_inst = len(instances)
    if n_inst < 2:
        raise ContractError("cider needs at least 2 instances to estimate IDF")
    per_instance = {inst.pair_id: 0.0 for inst in instances}
    if len(per_instance) != n_inst:
        raise ContractError("duplicate pair_ids in cider input")
    for n in range(1, max_n + 1):
        df = Counter()
        ref_gram_sets = []
        for inst in instances:
            grams = set()
            for ref in inst.references:
                grams.update(_ngrams(ref, n))
            ref_gram_sets.append(grams)
            df.update(grams)
        idf = {g: math.log(n_inst / max(1, df[g])) for g in df}
        default_idf = math.log(n_inst)
        for inst in instances:
            cand_vec = {g: c * idf.get(g, default_idf)
                        for g, c in Counter(_ngrams(inst.candidate, n)).items()}
            sims = []
            for ref in inst.references:
                ref_vec = {g: c * idf[g] for g, c in Counter(_ngrams(ref, n)).items()}
                sims.append(_cosine(cand_vec, ref_vec))
            per_instance[inst.pair_id] += sum(sims) / len(sims) / max_n
    corpus = sum(per_instance.values()) / n_inst
    return corpus, per_instance


# ---------------------------------------------------------------------------
# Perplexity, Dice, Pearson
# ---------------------------------------------------------------------------

def perplexity(params, pairs, features=None, sample_seed=0):
    """exp of mean per-token NLL over one sampled reference per premise.

    Tokens include EOS and exclude PAD; accumulation is float64 with exact
    rounding so the uniform predictor lands on the vocabulary size.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("perplexity on an empty dataset")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(sample_seed)))
    values = []
    for pair in pairs:
        target = pair.hypothesis_ids[int(rng.integers(len(pair.hypothesis_ids)))]
        image = features.get(pair.image_id) if params.config.uses_image else None
        values.extend(per_token_nll(params, target, pair.premise_ids, image).tolist())
    return math.exp(math.fsum(values) / len(values))


def content_word_set(tokens, stopwords=None):
    """Word types remaining after stopword and punctuation removal."""
    stop = STOPWORDS if stopwords is None else stopwords
    return {t for t in tokens if t not in stop and t not in _PUNCT_TOKENS}


def dice(a_tokens, b_tokens, stopwords=None):
    """2|A∩B| / (|A| + |B|) over content-word types; two empty sets give 0."""
    a = content_word_set(a_tokens, stopwords)
    b = content_word_set(b_tokens, stopwords)
    if not a and not b:
        return 0.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def pearson(xs, ys):
    """Sample Pearson r; raises UndefinedCorrelationError on zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ContractError(f"pearson needs equal-length vectors, got {x.shape} vs {y.shape}")
    if x.size < 3:
        raise ContractError(f"pearson needs at least 3 points, got {x.size}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float((dx * dx).sum())
    syy = float((dy * dy).sum())
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance in correlation input")
    r = float((dx * dy).sum()) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# Corpus report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Corpus scores plus per-instance breakdowns and the scoring config."""

    bleu1: float
    bleu1_single_ref_mean: float
    meteor: float
    cider: float
    perplexity: float
    per_instance: dict
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"bleu1": self.bleu1,
                "bleu1_single_ref_mean": self.bleu1_single_ref_mean,
                "meteor": self.meteor, "cider": self.cider,
                "perplexity": self.perplexity,
                "per_instance": self.per_instance, "config": self.config}


def evaluate_corpus(instances, premises=None, params=None, encoded_pairs=None,
                    features=None, sample_seed=0, single_ref=False):
    """Full multi-reference report over aligned candidates and references.

    ``premises`` (pair_id -> premise token list) enables the per-instance
    Dice column; ``params``/``encoded_pairs`` enable perplexity. The corpus
    METEOR is the mean of per-instance scores.
    """
    instances = list(instances)
    cands = [inst.candidate for inst in instances]
    refs = [inst.references for inst in instances]
    b_multi = bleu1(cands, refs, mode="multi_ref")
    b_single = bleu1(cands, refs, mode="single_ref_mean") if single_ref else None
    cider_corpus, cider_each = cider(instances)
    meteor_each = {inst.pair_id: meteor_exact(inst.candidate, inst.references)
                   for inst in instances}
    per_instance = {}
    for inst in instances:
        row = {"cider": cider_each[inst.pair_id], "meteor": meteor_each[inst.pair_id]}
        if premises is not None:
            row["dice"] = max(dice(premises[inst.pair_id], ref)
                              for ref in inst.references)
        per_instance[inst.pair_id] = row
    ppl = None
    if params is not None and encoded_pairs is not None:
        ppl = perplexity(params, encoded_pairs, features, sample_seed)
    return MetricReport(
        bleu1=b_multi, bleu1_single_ref_mean=b_single,
        meteor=sum(meteor_each.values()) / len(meteor_each),
        cider=cider_corpus, perplexity=ppl, per_instance=per_instance,
        config={"bleu_mode": "multi_ref+single_ref_mean" if single_ref else "multi_ref",
                "meteor": "exact-match", "cider_scale": "none",
                "stopwords_version": STOPWORDS_VERSION})


def write_report(path, report, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        json.dump(report.to_dict() if hasattr(report, "to_dict") else report,
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
