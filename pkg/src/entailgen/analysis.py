"""Premise/reference overlap analysis.

Each test pair gets a Dice overlap (max over its references, content words
only) and a per-instance CIDEr score; pairs are bucketed at a threshold
(<= goes low), and the report carries per-bucket counts, mean CIDEr,
within-bucket Pearson correlations between overlap and CIDEr, and a fixed
width-0.05 histogram of the overlap values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ContractError, UndefinedCorrelationError
from .metrics import EvalInstance, cider, dice, pearson

HISTOGRAM_BIN_WIDTH = 0.05


@dataclass
class OverlapRecord:
    pair_id: str
    dice: float
    cider: float
    bucket: str = ""


@dataclass
class OverlapReport:
    threshold: float
    counts: dict
    mean_cider: dict
    correlations: dict  # bucket -> r, only for buckets where r is defined
    warnings: list
    histogram: list  # (bin lower edge, count) rows

    def to_dict(self):
        return {"threshold": self.threshold, "counts": self.counts,
                "mean_cider": self.mean_cider, "correlations": self.correlations,
                "warnings": self.warnings,
                "histogram": [[lo, c] for lo, c in self.histogram]}


def overlap_split(records, threshold=0.3):
    """Partition records at the threshold; dice <= threshold goes low."""
    low, high = [], []
    for rec in records:
        if not 0.0 <= rec.dice <= 1.0:
            raise ContractError(f"dice value {rec.dice} outside [0, 1]")
        rec.bucket = "low" if rec.dice <= threshold else "high"
        (low if rec.bucket == "low" else high).append(rec)
    return low, high


def dice_histogram(values, bin_width=HISTOGRAM_BIN_WIDTH):
    """Counts per [lo, lo+width) bin over [0, 1]; 1.0 lands in the last bin."""
    n_bins = round(1.0 / bin_width)
    counts = [0] * n_bins
    for v in values:
        idx = min(int(v / bin_width), n_bins - 1)
        counts[idx] += 1
    return [(round(i * bin_width, 10), counts[i]) for i in range(n_bins)]


def build_overlap_records(premises, instances, per_instance_cider=None, stopwords=None):
    """Dice (max over references) and per-instance CIDEr for each pair.

    ``premises`` maps pair_id to premise token list; ``instances`` are the
    candidate/reference rows. CIDEr uses corpus-level IDF unless
    per-instance scores are supplied.
    """
    instances = list(instances)
    if per_instance_cider is None:
        _, per_instance_cider = cider(instances)
    records = []
    for inst in instances:
        d = max(dice(premises[inst.pair_id], ref, stopwords) for ref in inst.references)
        records.append(OverlapRecord(inst.pair_id, d, per_instance_cider[inst.pair_id]))
    return records


def overlap_report(records, threshold=0.3):
    """Bucketed overlap summary; a pure function of (records, threshold)."""
    records = list(records)
    low, high = overlap_split(records, threshold)
    counts = {"low": len(low), "high": len(high)}
    mean_cider = {}
    correlations = {}
    warnings = []
    for name, bucket in (("low", low), ("high", high)):
        if not bucket:
            warnings.append(f"bucket {name!r} is empty; correlation omitted")
            continue
        mean_cider[name] = sum(r.cider for r in bucket) / len(bucket)
        if len(bucket) < 3:
            warnings.append(f"bucket {name!r} has fewer than 3 records; correlation omitted")
            continue
        try:
            correlations[name] = pearson([r.dice for r in bucket],
                                         [r.cider for r in bucket])
        except UndefinedCorrelationError:
            warnings.append(f"bucket {name!r} has zero variance; correlation omitted")
    hist = dice_histogram([r.dice for r in records])
    return OverlapReport(threshold, counts, mean_cider, correlations, warnings, hist)


def write_overlap_report(path, report, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_plot_data(path, report, header=None):
    """(x, y) rows for external plotting: histogram bins, then bucket means."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("# section histogram: bin_lower_edge count\n")
        for lo, c in report.histogram:
            fh.write(f"{lo}\t{c}\n")
        fh.write("# section bucket_mean_cider: bucket mean\n")
        for name in ("low", "high"):
            if name in report.mean_cider:
                fh.write(f"{name}\t{report.mean_cider[name]!r}\n")
