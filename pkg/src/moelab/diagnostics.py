"""Layer-wise routing drift between two models.

Scores are compared per token in a common index space.  For a pruned
student the reference scores are restricted to the retained experts and
renormalized (and the reference top-k is re-taken over that set).  For a
merged student the reference scores are summed per cluster and the overlap
is ``|phi(S) & S_merge| / |phi(S)|``.  All values are token means per layer.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from moelab import tensor_core as tc
from moelab.compression import CompressionMap, MergeMap, PruneMap
from moelab.errors import InvalidArgumentError
from moelab.model import LayerTrace, RoutingTrace

REPORT_FILES = ("l1.csv", "overlap.csv", "entropy.csv")
CSV_HEADER = ("layer", "value", "token_count")


@dataclass
class LayerReport:
    layer: int
    mean_l1: float
    overlap_ratio: float
    mean_entropy: float
    token_count: int


def _check_aligned(a: RoutingTrace, b: RoutingTrace) -> None:
    if len(a.layers) != len(b.layers):
        raise InvalidArgumentError("traces have different layer counts")
    if a.n_tokens != b.n_tokens:
        raise InvalidArgumentError(f"token misalignment: {a.n_tokens} vs {b.n_tokens}")


def _project(ref: LayerTrace, cmap: CompressionMap | None, li: int, k: int):
    """Reference scores and selections expressed in the compared model's index space."""
    if isinstance(cmap, PruneMap):
        keep = cmap.retained[li]
        if list(keep) == list(range(ref.scores.shape[1])):
            # nothing pruned; skip the renormalization round-off
            return ref.scores, ref.selected
        scores = ref.scores[:, keep]
        scores = scores / scores.sum(axis=1, keepdims=True)
        return scores, tc.top_k(scores, min(k, len(keep)))
    if isinstance(cmap, MergeMap):
        phi = np.asarray(cmap.phi[li])
        n_clusters = int(phi.max()) + 1
        scores = np.zeros((ref.n_tokens, n_clusters))
        for i, c in enumerate(phi):
            scores[:, c] += ref.scores[:, i]
        return scores, [sorted(set(phi[s].tolist())) for s in ref.selected]
    return ref.scores, ref.selected


def routing_l1(ref: RoutingTrace, other: RoutingTrace,
               cmap: CompressionMap | None = None) -> list[float]:
    _check_aligned(ref, other)
    out = []
    for li, (a, b) in enumerate(zip(ref.layers, other.layers)):
        scores, _ = _project(a, cmap, li, b.selected.shape[1])
        if scores.shape != b.scores.shape:
            raise InvalidArgumentError(f"layer {li}: score widths differ; pass the compression map")
        out.append(float(np.abs(scores - b.scores).sum(axis=1).mean()) if a.n_tokens else 0.0)
    return out


def topk_overlap(ref: RoutingTrace, other: RoutingTrace,
                 cmap: CompressionMap | None = None) -> list[float]:
    _check_aligned(ref, other)
    out = []
    for li, (a, b) in enumerate(zip(ref.layers, other.layers)):
        _, sel = _project(a, cmap, li, b.selected.shape[1])
        ratios = [
            len(set(np.asarray(s).tolist()) & set(t.tolist())) / len(s)
            for s, t in zip(sel, b.selected)
        ]
        out.append(float(np.mean(ratios)) if ratios else 1.0)
    return out


def routing_space_size(n_experts: int, k: int) -> int:
    """Number of distinct top-k subsets, C(E, k), in exact integer arithmetic."""
    if k < 0 or n_experts < 0 or k > n_experts:
        raise InvalidArgumentError(f"need 0 <= k <= E, got E={n_experts}, k={k}")
    k = min(k, n_experts - k)
    c = 1
    for j in range(1, k + 1):
        c = c * (n_experts - k + j) // j
    return c


def routing_entropy(trace: RoutingTrace) -> list[float]:
    out = []
    for lt in trace.layers:
        p = lt.scores
        h = -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
        out.append(float(h.mean()) if lt.n_tokens else 0.0)
    return out


def layer_reports(ref: RoutingTrace, other: RoutingTrace,
                  cmap: CompressionMap | None = None) -> list[LayerReport]:
    l1 = routing_l1(ref, other, cmap)
    ov = topk_overlap(ref, other, cmap)
    ent = routing_entropy(other)
    return [LayerReport(li, l1[li], ov[li], ent[li], ref.n_tokens) for li in range(len(l1))]


def _fmt(v: float) -> str:
    return format(v, ".17g")


def emit_report(reports: list[LayerReport], path, metadata: dict | None = None) -> None:
    """Write l1.csv, overlap.csv, entropy.csv and summary.json into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    columns = {"l1.csv": "mean_l1", "overlap.csv": "overlap_ratio", "entropy.csv": "mean_entropy"}
    for fname, attr in columns.items():
        with open(os.path.join(path, fname), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in reports:
                w.writerow([r.layer, _fmt(getattr(r, attr)), r.token_count])
    summary = dict(metadata or {})
    summary["n_layers"] = len(reports)
    summary["token_count"] = reports[0].token_count if reports else 0
    for key, attr in (("mean_l1", "mean_l1"), ("mean_overlap", "overlap_ratio"),
                      ("mean_entropy", "mean_entropy")):
        vals = [getattr(r, attr) for r in reports]
        summary[key] = float(np.mean(vals)) if vals else None
    with open(os.path.join(path, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_report_csv(path) -> list[tuple[int, float, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise InvalidArgumentError(f"{path}: unexpected header")
    return [(int(a), float(b), int(c)) for a, b, c in rows[1:]]


def max_entropy(n_experts: int) -> float:
    return math.log(n_experts)
