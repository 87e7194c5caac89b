"""Routing-collapse analytics: NRE, TEC, heatmaps and co-routing matrices.

Conventions: every top-k assignment slot counts once toward the expert
selection counts; entropies use the natural logarithm; TEC is the single
most-selected expert's share of all assignment slots.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigError, DataError
from .netpbm import write_ppm

TRACE_FIELDS = ("step", "batch_index", "patch_index", "expert_ids", "weights", "full_probs")


@dataclass
class RoutingTrace:
    """Aggregated routing statistics over a set of decisions."""

    n_experts: int
    n_classes: int
    expert_counts: np.ndarray = None  # [N]
    class_expert_counts: np.ndarray = None  # [C, N], pixel-fraction weighted
    cooccur_counts: np.ndarray = None  # [N, N] symmetric, zero diagonal
    n_decisions: int = 0

    def __post_init__(self):
        if self.expert_counts is None:
            self.expert_counts = np.zeros(self.n_experts)
        if self.class_expert_counts is None:
            self.class_expert_counts = np.zeros((self.n_classes, self.n_experts))
        if self.cooccur_counts is None:
            self.cooccur_counts = np.zeros((self.n_experts, self.n_experts))

    def add(self, expert_ids, class_fractions=None):
        """Fold one decision in; class_fractions is the patch's ground-truth
        class pixel distribution (length n_classes), when known."""
        for j in expert_ids:
            self.expert_counts[j] += 1
            if class_fractions is not None:
                self.class_expert_counts[:, j] += class_fractions
        for a, b in combinations(sorted(expert_ids), 2):
            self.cooccur_counts[a, b] += 1
            self.cooccur_counts[b, a] += 1
        self.n_decisions += 1


def nre(expert_counts):
    """Normalized routing entropy H(counts/sum)/ln N in [0, 1]."""
    counts = np.asarray(expert_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise DataError("NRE undefined for all-zero counts")
    if counts.shape[0] < 2:
        raise ConfigError("NRE needs at least 2 experts")
    q = counts / total
    pos = q > 0
    h = -(q[pos] * np.log(q[pos])).sum()
    return float(h / np.log(counts.shape[0]))


def tec(expert_counts):
    """Top expert concentration: the most-used expert's share of all slots."""
    counts = np.asarray(expert_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise DataError("TEC undefined for all-zero counts")
    return float(counts.max() / total)


def class_expert_heatmap(trace: RoutingTrace):
    """Row-normalized class-expert usage; all-zero rows stay zero."""
    mat = trace.class_expert_counts.copy()
    sums = mat.sum(axis=1, keepdims=True)
    nz = sums[:, 0] > 0
    mat[nz] /= sums[nz]
    return mat


def co_routing_matrix(trace: RoutingTrace):
    """Pair co-selection frequencies normalized by the decision count."""
    if trace.n_decisions == 0:
        raise DataError("empty trace")
    return trace.cooccur_counts / trace.n_decisions


def _ramp(t):
    """Monotone black -> red -> yellow -> white ramp, t in [0, 1]."""
    r = np.clip(3.0 * t, 0.0, 1.0)
    g = np.clip(3.0 * t - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * t - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_heatmap(matrix, path, cell_px=32):
    """Render a matrix as a PPM image, one >= 32 px cell per entry.

    Values are scaled by the matrix maximum (an all-zero matrix renders at
    the ramp minimum); output bytes are deterministic in the input.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise DataError("render_heatmap expects a 2-D matrix")
    if not np.isfinite(matrix).all() or (matrix < 0).any():
        raise DataError("render_heatmap expects finite non-negative values")
    cell_px = max(32, int(cell_px))
    peak = matrix.max()
    t = matrix / peak if peak > 0 else np.zeros_like(matrix)
    rgb = np.rint(_ramp(t) * 255.0).astype(np.uint8)
    rgb = np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)
    write_ppm(path, rgb)


# -- trace files and CSV export ---------------------------------------------


def format_trace_line(step, decision, class_fractions=None):
    rec = {
        "step": int(step),
        "batch_index": int(decision.batch_index),
        "patch_index": int(decision.patch_index),
        "expert_ids": [int(j) for j in decision.expert_ids],
        "weights": [float(x) for x in decision.weights],
        "full_probs": [float(x) for x in decision.full_probs],
    }
    if class_fractions is not None:
        rec["class_fractions"] = [float(x) for x in class_fractions]
    return json.dumps(rec)


def read_trace_file(path):
    """Parse a line-delimited trace file into a list of records."""
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in TRACE_FIELDS:
                if key not in rec:
                    raise DataError(f"trace record missing field {key!r}")
            records.append(rec)
    return records


def trace_from_records(records, n_classes):
    if not records:
        raise DataError("empty trace file")
    n_experts = len(records[0]["full_probs"])
    trace = RoutingTrace(n_experts=n_experts, n_classes=n_classes)
    for rec in records:
        fractions = rec.get("class_fractions")
        if fractions is not None:
            fractions = np.asarray(fractions, dtype=np.float64)
            if fractions.shape[0] != n_classes:
                raise DataError(
                    f"trace has {fractions.shape[0]} class fractions, expected {n_classes}"
                )
        trace.add(rec["expert_ids"], fractions)
    return trace


def _write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def export_csvs(trace: RoutingTrace, out_dir):
    """Write expert_counts.csv, class_expert.csv and cooccur.csv."""
    os.makedirs(out_dir, exist_ok=True)
    expert_ids = [f"expert_{j}" for j in range(trace.n_experts)]
    _write_csv(
        os.path.join(out_dir, "expert_counts.csv"),
        expert_ids,
        [[float(c) for c in trace.expert_counts]],
    )
    heat = class_expert_heatmap(trace)
    _write_csv(
        os.path.join(out_dir, "class_expert.csv"),
        ["class"] + expert_ids,
        [[c] + [float(x) for x in heat[c]] for c in range(trace.n_classes)],
    )
    co = co_routing_matrix(trace)
    _write_csv(
        os.path.join(out_dir, "cooccur.csv"),
        expert_ids,
        [[float(x) for x in row] for row in co],
    )
