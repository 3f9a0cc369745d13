"""Hypothesis generation by greedy or beam search.

Both searches walk the decoder step by step from BOS, scoring tokens with
the full-vocabulary log-softmax. PAD and BOS are never candidates, so
generated content is always decodable. Scores are sums of per-step log
probabilities with no length normalization, which keeps beam search
provably equivalent to exhaustive argmax when the width covers the whole
search space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .corpus import BOS, EOS, PAD
from .errors import ContractError, FormatError
from .models import SourceRepresentation, decoder_step, _zero_state

_FORBIDDEN = (PAD, BOS)


@dataclass
class GenerationResult:
    """Generated indices (EOS-terminated unless truncated) with its score."""

    tokens: list
    logprob: float
    per_step_logprobs: list

    @property
    def content(self):
        """Tokens without the terminating EOS."""
        return [t for t in self.tokens if t != EOS]


def _src_vector(src):
    return src.vector if isinstance(src, SourceRepresentation) else src


def _step_logprobs(params, src_vec, h, tokens):
    h_new, logits = decoder_step(params, src_vec, h, tokens)
    logp = nc.log_softmax(logits.data)
    logp[:, list(_FORBIDDEN)] = -np.inf
    return h_new, logp


def greedy_generate(src, params, max_len=None):
    """Repeatedly take the argmax token (ties to the lowest index)."""
    max_len = params.config.max_decode_len if max_len is None else max_len
    src_vec = _src_vector(src)
    h = _zero_state(params, 1)
    prev = BOS
    tokens, steps = [], []
    for _ in range(max_len):
        h, logp = _step_logprobs(params, src_vec, h, [prev])
        tok = int(np.argmax(logp[0]))
        tokens.append(tok)
        steps.append(float(logp[0, tok]))
        prev = tok
        if tok == EOS:
            break
    return GenerationResult(tokens, float(sum(steps)), steps)


def beam_generate(src, params, beam_width, max_len=None):
    """Beam over summed log-probabilities.

    Finished (EOS-terminated) hypotheses leave the beam; the best finished
    hypothesis wins, falling back to the best unfinished one at max_len.
    Score ties break toward the lexicographically smaller token sequence.
    """
    if beam_width < 1:
        raise ContractError(f"beam_width must be >= 1, got {beam_width}")
    max_len = params.config.max_decode_len if max_len is None else max_len
    src_vec = _src_vector(src)
    # item: (tokens tuple, score, per-step tuple, state row)
    beam = [((), 0.0, (), _zero_state(params, 1).data[0])]
    finished = []
    for _ in range(max_len):
        if not beam:
            break
        states = nc.Tensor(np.stack([it[3] for it in beam]))
        prevs = [it[0][-1] if it[0] else BOS for it in beam]
        src_tile = nc.Tensor(np.repeat(src_vec.data, len(beam), axis=0)) \
            if src_vec.shape[0] == 1 and len(beam) > 1 else src_vec
        h_new, logp = _step_logprobs(params, src_tile, states, prevs)
        pool = []
        for i, (toks, score, steps, _) in enumerate(beam):
            for tok in range(logp.shape[1]):
                lp = logp[i, tok]
                if lp == -np.inf:
                    continue
                pool.append((toks + (tok,), score + float(lp),
                             steps + (float(lp),), h_new.data[i]))
        pool.sort(key=lambda it: (-it[1], it[0]))
        beam = []
        for it in pool[:beam_width]:
            if it[0][-1] == EOS:
                finished.append(it)
            else:
                beam.append(it)
    candidates = finished + beam
    tokens, score, steps, _ = min(candidates, key=lambda it: (-it[1], it[0]))
    return GenerationResult(list(tokens), score, list(steps))


def score_sequence(src, params, tokens):
    """Teacher-forced score of a full token sequence (for search oracles)."""
    src_vec = _src_vector(src)
    h = _zero_state(params, 1)
    prev = BOS
    steps = []
    for tok in tokens:
        h, logp = _step_logprobs(params, src_vec, h, [prev])
        steps.append(float(logp[0, tok]))
        prev = tok
    return float(sum(steps)), steps


# ---------------------------------------------------------------------------
# Generation output file
# ---------------------------------------------------------------------------

def write_generations(path, rows, header=None):
    """One JSON record per line: pair_id, generated text, logprob."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for pair_id, text, logprob in rows:
            fh.write(json.dumps({"pair_id": pair_id, "text": text,
                                 "logprob": logprob}, sort_keys=True))
            fh.write("\n")


def load_generations(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                out.append((rec["pair_id"], rec["text"], rec["logprob"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"{path}:{lineno}: bad generation record: {exc}") from exc
    return out
