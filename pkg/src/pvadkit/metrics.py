"""Average precision, mAP, and seed-wise confidence intervals.

AP follows the step-interpolated definition AP = sum_n (R_n - R_{n-1})
P_n with thresholds swept over the distinct scores in descending order.
Frames with tied scores enter at a single threshold. Frames are pooled
across utterances within a condition (micro-average) before scoring.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import ConfigError, FormatError

N_CLASSES = 3
CLASS_NAMES = ("ns", "tss", "ntss")


def average_precision(scores, positives) -> float:
    """AP of ranking `positives` by `scores`, ties grouped.

    Matches brute-force threshold enumeration bit for bit: per
    threshold group the precision/recall are exact integer ratios and
    the sum accumulates in descending-score order.
    """
    s = np.asarray(scores, dtype=np.float64)
    p = np.asarray(positives, dtype=bool)
    if s.shape != p.shape or s.ndim != 1:
        raise ConfigError(f"scores {s.shape} and positives {p.shape} must be "
                          "1-D and equal length")
    if not np.all(np.isfinite(s)):
        raise ConfigError("scores must be finite")
    n_pos = int(p.sum())
    if n_pos == 0:
        raise ConfigError("average precision undefined without positives")

    order = np.argsort(-s, kind="stable")
    s = s[order]
    tp_cum = np.cumsum(p[order])
    # last index of each tie group
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.concatenate([ends, [s.size - 1]])

    ap = 0.0
    recall_prev = 0.0
    for end in ends:
        precision = int(tp_cum[end]) / (int(end) + 1)
        recall = int(tp_cum[end]) / n_pos
        ap += (recall - recall_prev) * precision
        recall_prev = recall
    return ap


def map_score(ap_ns: float, ap_tss: float, ap_ntss: float) -> float:
    """Mean of the three per-class average precisions."""
    return (ap_ns + ap_tss + ap_ntss) / 3.0


def ci95(values) -> tuple:
    """(mean, halfwidth) of the Student-t 95% interval over seeds."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ConfigError("ci95 needs at least 2 values")
    n = v.size
    sd = float(np.std(v, ddof=1))
    half = float(stats.t.ppf(0.975, n - 1)) * sd / np.sqrt(n)
    return float(np.mean(v)), float(half)


def pooled_class_aps(posteriors, labels) -> tuple:
    """One-vs-rest AP per class over frames pooled from many utterances.

    posteriors: iterable of (T_i, 3) arrays summing to 1 per frame;
    labels: matching (T_i,) int arrays in {0, 1, 2}.
    """
    posts = [np.asarray(p) for p in posteriors]
    labs = [np.asarray(l) for l in labels]
    if len(posts) != len(labs) or not posts:
        raise ConfigError("posteriors and labels must be equal-length, non-empty")
    for p, l in zip(posts, labs):
        if p.ndim != 2 or p.shape[1] != N_CLASSES or p.shape[0] != l.shape[0]:
            raise ConfigError(f"bad scored-frame shapes {p.shape} vs {l.shape}")
        if p.shape[0] and not np.allclose(p.sum(axis=1), 1.0, atol=1e-5):
            raise FormatError("posteriors must sum to 1 within 1e-5")
    pooled_p = np.concatenate(posts, axis=0)
    pooled_l = np.concatenate(labs, axis=0)
    return tuple(
        average_precision(pooled_p[:, c], pooled_l == c)
        for c in range(N_CLASSES)
    )


@dataclass
class ConditionRow:
    """One evaluation condition: clean (snr_db None) or (noise, snr)."""
    noise_type: str
    snr_db: float | None
    ap_ns: float
    ap_tss: float
    ap_ntss: float

    @property
    def map(self) -> float:
        return map_score(self.ap_ns, self.ap_tss, self.ap_ntss)


def mean_map(rows, noise_types=None, max_snr_db=None, skip_clean=True) -> float:
    """Mean mAP over the rows passing the filters, for summary tables."""
    picked = []
    for row in rows:
        if row.snr_db is None:
            if skip_clean:
                continue
        else:
            if noise_types is not None and row.noise_type not in noise_types:
                continue
            if max_snr_db is not None and row.snr_db > max_snr_db:
                continue
        picked.append(row.map)
    if not picked:
        raise ConfigError("no conditions match the filter")
    return float(np.mean(picked))


_CSV_HEADER = ["noise_type", "snr_db", "ap_ns", "ap_tss", "ap_ntss", "map"]


def rows_to_csv(rows) -> str:
    """Serialize condition rows with fixed formatting (6 decimals), so
    identical results give identical bytes."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_HEADER)
    for row in rows:
        writer.writerow([
            row.noise_type,
            "" if row.snr_db is None else f"{row.snr_db:g}",
            f"{row.ap_ns:.6f}", f"{row.ap_tss:.6f}", f"{row.ap_ntss:.6f}",
            f"{row.map:.6f}",
        ])
    return buf.getvalue()


def csv_to_rows(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != _CSV_HEADER:
        raise FormatError(f"bad report header {header!r}")
    rows = []
    for rec in reader:
        if len(rec) != len(_CSV_HEADER):
            raise FormatError(f"bad report row {rec!r}")
        rows.append(ConditionRow(
            noise_type=rec[0],
            snr_db=None if rec[1] == "" else float(rec[1]),
            ap_ns=float(rec[2]), ap_tss=float(rec[3]), ap_ntss=float(rec[4]),
        ))
    return rows
