"""Latin-square human-evaluation design and ordinal response tallies.

Items are split into as many blocks as there are conditions; participant
group g judges block b under condition (b + g) mod |conditions|, so every
participant sees every item exactly once, a third (for three conditions)
under each condition, and every (item, condition) cell is covered by the
same number of participants. Item order within a block is randomized once
(seeded) and shared by all participants.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DesignError, FormatError

DEFAULT_CONDITIONS = ("text_only", "image_only", "text_image")

RESPONSE_CATEGORIES = ("totally", "partly", "not_clear", "not_at_all")

POSITIVE_RESPONSE = "totally"


@dataclass
class EvalDesign:
    items: list
    conditions: list
    participants: list
    assignment: dict  # participant -> ordered list of (item, condition)

    @property
    def participant_groups(self):
        return len(self.conditions)


def _as_ids(value, prefix):
    if isinstance(value, int):
        width = max(2, len(str(max(value - 1, 0))))
        return [f"{prefix}{i:0{width}d}" for i in range(value)]
    return list(value)


def design(items=90, conditions=DEFAULT_CONDITIONS, participants=3, seed=0):
    """Build a balanced latin-square assignment.

    ``items`` and ``participants`` may be counts (ids are generated) or
    explicit id lists. Item count must divide by the condition count and
    participant count by the group count (= condition count).
    """
    items = _as_ids(items, "item")
    conditions = list(conditions)
    participants = _as_ids(participants, "p")
    n_cond = len(conditions)
    if n_cond < 1:
        raise DesignError("at least one condition is required")
    if len(set(items)) != len(items) or len(set(participants)) != len(participants):
        raise DesignError("item and participant ids must be unique")
    if len(items) % n_cond != 0:
        raise DesignError(
            f"{len(items)} items not divisible by {n_cond} conditions")
    if len(participants) % n_cond != 0:
        raise DesignError(
            f"{len(participants)} participants not divisible by {n_cond} groups")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    order = [items[i] for i in rng.permutation(len(items))]
    block_size = len(items) // n_cond
    blocks = [order[b * block_size:(b + 1) * block_size] for b in range(n_cond)]

    assignment = {}
    for p_index, participant in enumerate(participants):
        group = p_index % n_cond
        rows = []
        for b, block in enumerate(blocks):
            condition = conditions[(b + group) % n_cond]
            rows.extend((item, condition) for item in block)
        assignment[participant] = rows
    return EvalDesign(items, conditions, participants, assignment)


@dataclass
class ResponseRow:
    participant: str
    item: str
    condition: str
    response: str


@dataclass
class TallyReport:
    """Per-condition category proportions and the binomial (totally) recode."""

    counts: dict  # condition -> {category: count}
    proportions: dict  # condition -> {category: proportion}
    binomial: dict  # condition -> {"totally": n, "rest": n, "proportion": p}

    def to_dict(self):
        return {"counts": self.counts, "proportions": self.proportions,
                "binomial": self.binomial}


def tally(responses, design_ref=None):
    """Aggregate ordinal responses per condition.

    Validates category names (and, when a design is given, item/condition
    membership) and rejects duplicate (participant, item) pairs.
    """
    rows = list(responses)
    if not rows:
        raise DataError("no responses to tally")
    seen = set()
    counts = defaultdict(Counter)
    for i, row in enumerate(rows, start=1):
        if row.response not in RESPONSE_CATEGORIES:
            raise DataError(
                f"row {i} ({row.participant!r}, {row.item!r}): unknown response "
                f"category {row.response!r}")
        if design_ref is not None:
            if row.condition not in design_ref.conditions:
                raise DataError(f"row {i}: unknown condition {row.condition!r}")
            if row.item not in design_ref.items:
                raise DataError(f"row {i}: unknown item {row.item!r}")
        key = (row.participant, row.item)
        if key in seen:
            raise DataError(
                f"row {i}: duplicate response for participant {row.participant!r} "
                f"on item {row.item!r}")
        seen.add(key)
        counts[row.condition][row.response] += 1
    proportions = {}
    binomial = {}
    for condition, c in sorted(counts.items()):
        total = sum(c.values())
        proportions[condition] = {cat: c.get(cat, 0) / total for cat in RESPONSE_CATEGORIES}
        pos = c.get(POSITIVE_RESPONSE, 0)
        binomial[condition] = {"totally": pos, "rest": total - pos,
                               "proportion": pos / total}
    return TallyReport({c: dict(v) for c, v in counts.items()}, proportions, binomial)


# ---------------------------------------------------------------------------
# Design/response files
# ---------------------------------------------------------------------------

def export_design(path, design_obj, header=None):
    """Tab-separated rows: participant, presentation rank, item, condition."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("# fields: participant\trank\titem\tcondition\n")
        for participant in design_obj.participants:
            for rank, (item, condition) in enumerate(design_obj.assignment[participant]):
                fh.write(f"{participant}\t{rank}\t{item}\t{condition}\n")


def load_responses(path):
    """Tab-separated rows: participant, item, condition, response."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            rows.append(ResponseRow(*parts))
    return rows


def write_tally(path, report, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
