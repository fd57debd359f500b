"""Scenario taxonomy and output-discrepancy decompositions.

For one layer and one shared input ``x`` the original model selects ``S``
with renormalized gates ``g~``, the compressed model selects ``S'``.  With
``T`` the shared selections, ``D`` the dropped ones and ``R`` the newly
activated ones, the output difference splits exactly into

    y_orig - y_comp = weight_shift + information_loss - substitution_noise

which the ``decompose_*`` functions compute and check.  For merging, sets
live in cluster space and original experts are grouped by ``phi``.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from moelab.compression import CompressionMap, EditMap, MergeMap, PruneMap
from moelab.errors import InvalidArgumentError, NumericalError
from moelab.model import LayerTrace, MoEModel, TokenBatch, forward, layer_forward

IDENTITY_TOL = 1e-9
SUBS = ("Best", "Common", "Worst")


@dataclass(frozen=True, order=True)
class ScenarioLabel:
    paradigm: str
    sub: str
    case: int | None = None

    def __str__(self) -> str:
        if self.case is None:
            return f"{self.paradigm}:{self.sub}"
        return f"{self.paradigm}:{self.case}.{SUBS.index(self.sub) + 1}:{self.sub}"


def all_labels(paradigm: str) -> list[ScenarioLabel]:
    if paradigm == "merge":
        return [ScenarioLabel("merge", s, c) for c in (1, 2, 3) for s in SUBS]
    return [ScenarioLabel(paradigm, s) for s in SUBS]


def _three_way(best: bool, worst: bool) -> str:
    return "Best" if best else ("Worst" if worst else "Common")


def classify_prune(S, P, S_prime=None) -> ScenarioLabel:
    """Best when every originally selected expert survived, Worst when none did."""
    S, P = set(S), set(P)
    return ScenarioLabel("prune", _three_way(S <= P, not (S & P)))


def classify_edit(S, S_edit) -> ScenarioLabel:
    S, S_edit = set(S), set(S_edit)
    if len(S) != len(S_edit):
        raise InvalidArgumentError("selections must have equal size")
    return ScenarioLabel("edit", _three_way(S == S_edit, not (S & S_edit)))


def classify_merge(S, phi, S_merge, k_merge: int) -> ScenarioLabel:
    """Case by how many clusters the original selection needs, then Best/Common/Worst."""
    try:
        c_proj = {phi[i] for i in S}
    except (IndexError, KeyError) as exc:
        raise InvalidArgumentError(f"phi undefined on a selected expert: {exc}") from exc
    S_merge = set(S_merge)
    if len(S_merge) != k_merge:
        raise InvalidArgumentError("|S_merge| must equal k_merge")
    disjoint = not (c_proj & S_merge)
    if len(c_proj) == 1:
        return ScenarioLabel("merge", _three_way(S_merge == c_proj, disjoint), 1)
    if len(c_proj) <= k_merge:
        return ScenarioLabel("merge", _three_way(S_merge == c_proj, disjoint), 2)
    return ScenarioLabel("merge", _three_way(S_merge <= c_proj, disjoint), 3)


def merge_subpattern(S, phi, S_merge) -> str:
    """Which of T, D, R are non-empty, e.g. ``"TD"``; distinguishes unnamed Common cells."""
    c_proj = {phi[i] for i in S}
    S_merge = set(S_merge)
    parts = [("T", c_proj & S_merge), ("D", c_proj - S_merge), ("R", S_merge - c_proj)]
    return "".join(name for name, s in parts if s) or "-"


@dataclass
class DiscrepancyDecomposition:
    total: float
    weight_shift: np.ndarray
    information_loss: np.ndarray
    substitution_noise: np.ndarray
    T: list[int]
    D: list[int]
    R: list[int]
    label: ScenarioLabel | None = None
    extra: dict = field(default_factory=dict)
    difference: np.ndarray | None = None  # y_orig - y_comp

    @property
    def recombined(self) -> np.ndarray:
        return self.weight_shift + self.information_loss - self.substitution_noise

    @property
    def residual(self) -> float:
        if self.difference is None:
            return abs(self.total - float(np.linalg.norm(self.recombined)))
        return float(np.linalg.norm(self.difference - self.recombined))

    def summary(self) -> dict:
        return {
            "label": str(self.label),
            "total": self.total,
            "weight_shift_norm": float(np.linalg.norm(self.weight_shift)),
            "information_loss_norm": float(np.linalg.norm(self.information_loss)),
            "substitution_noise_norm": float(np.linalg.norm(self.substitution_noise)),
            "residual": self.residual,
            "T": self.T, "D": self.D, "R": self.R,
        }


def _entry_vectors(entry: LayerTrace) -> tuple[list[int], np.ndarray]:
    return [int(i) for i in np.ravel(entry.selected)], np.ravel(entry.weights)


def _check_input(entry: LayerTrace, x: np.ndarray, which: str) -> None:
    if entry.inputs is not None and not np.array_equal(np.ravel(entry.inputs), x):
        raise InvalidArgumentError(
            f"{which} trace was computed from a different layer input; "
            "decompositions need a shared input"
        )


def _mixture(x, sel, weights, experts) -> np.ndarray:
    out = np.zeros_like(x)
    for i, w in zip(sel, weights):
        out = out + w * experts[i](x)
    return out


def _finish(d: DiscrepancyDecomposition) -> DiscrepancyDecomposition:
    if d.residual > IDENTITY_TOL * max(1.0, d.total):
        raise NumericalError(f"decomposition identity violated (residual {d.residual:.3e})")
    return d


def decompose_prune(orig: LayerTrace, pruned: LayerTrace, x, experts,
                    retained=None) -> DiscrepancyDecomposition:
    """Split ``y_orig - y_pruned`` for one token at shared input ``x``.

    ``experts`` are the original layer's experts.  ``pruned`` indexes the
    retained experts, mapped back to original ids through ``retained``.
    """
    x = np.ravel(np.asarray(x, dtype=np.float64))
    _check_input(orig, x, "original")
    _check_input(pruned, x, "pruned")
    S, g_o = _entry_vectors(orig)
    sel_p, g_p = _entry_vectors(pruned)
    S_p = [retained[i] for i in sel_p] if retained is not None else sel_p
    go = dict(zip(S, g_o))
    gp = dict(zip(S_p, g_p))
    T = sorted(set(S) & set(S_p))
    D = sorted(set(S) - set(S_p))
    R = sorted(set(S_p) - set(S))
    out = {i: experts[i](x) for i in set(S) | set(S_p)}
    zero = np.zeros_like(x)
    ws = sum(((go[i] - gp[i]) * out[i] for i in T), zero)
    il = sum((go[i] * out[i] for i in D), zero)
    sn = sum((gp[i] * out[i] for i in R), zero)
    y_o = _mixture(x, S, g_o, experts)
    y_p = _mixture(x, S_p, g_p, experts)
    label = classify_prune(S, retained if retained is not None else range(len(experts)), S_p)
    return _finish(DiscrepancyDecomposition(
        float(np.linalg.norm(y_o - y_p)), ws, il, sn, T, D, R, label, difference=y_o - y_p))


def decompose_edit(orig: LayerTrace, edited: LayerTrace, x, experts,
                   edited_experts) -> DiscrepancyDecomposition:
    x = np.ravel(np.asarray(x, dtype=np.float64))
    _check_input(orig, x, "original")
    _check_input(edited, x, "edited")
    S, g_o = _entry_vectors(orig)
    S_e, g_e = _entry_vectors(edited)
    go = dict(zip(S, g_o))
    ge = dict(zip(S_e, g_e))
    T = sorted(set(S) & set(S_e))
    D = sorted(set(S) - set(S_e))
    R = sorted(set(S_e) - set(S))
    zero = np.zeros_like(x)
    ws = sum((go[i] * experts[i](x) - ge[i] * edited_experts[i](x) for i in T), zero)
    il = sum((go[i] * experts[i](x) for i in D), zero)
    sn = sum((ge[i] * edited_experts[i](x) for i in R), zero)
    y_o = _mixture(x, S, g_o, experts)
    y_e = _mixture(x, S_e, g_e, edited_experts)
    return _finish(DiscrepancyDecomposition(
        float(np.linalg.norm(y_o - y_e)), ws, il, sn, T, D, R, classify_edit(S, S_e),
        difference=y_o - y_e))


def decompose_merge(orig: LayerTrace, merged: LayerTrace, x, experts, merged_experts,
                    phi) -> DiscrepancyDecomposition:
    """Cluster-space split: T/D/R are cluster ids, original experts grouped by ``phi``.

    weight_shift is the merging-approximation term over shared clusters,
    information_loss collects original experts whose cluster was missed and
    substitution_noise the merged experts of clusters nobody asked for.
    """
    x = np.ravel(np.asarray(x, dtype=np.float64))
    _check_input(orig, x, "original")
    _check_input(merged, x, "merged")
    S, g_o = _entry_vectors(orig)
    S_m, g_m = _entry_vectors(merged)
    gm = dict(zip(S_m, g_m))
    c_proj = {phi[i] for i in S}
    T = sorted(c_proj & set(S_m))
    D = sorted(c_proj - set(S_m))
    R = sorted(set(S_m) - c_proj)
    zero = np.zeros_like(x)
    orig_T = sum((g * experts[i](x) for i, g in zip(S, g_o) if phi[i] in T), zero)
    ws = orig_T - sum((gm[c] * merged_experts[c](x) for c in T), zero)
    il = sum((g * experts[i](x) for i, g in zip(S, g_o) if phi[i] in D), zero)
    sn = sum((gm[c] * merged_experts[c](x) for c in R), zero)
    y_o = _mixture(x, S, g_o, experts)
    y_m = _mixture(x, S_m, g_m, merged_experts)
    label = classify_merge(S, phi, S_m, len(S_m))
    return _finish(DiscrepancyDecomposition(
        float(np.linalg.norm(y_o - y_m)), ws, il, sn, T, D, R, label,
        {"subpattern": merge_subpattern(S, phi, S_m)}, y_o - y_m))


# --------------------------------------------------------------------------
# corpus-level census


def paradigm_of(cmap: CompressionMap) -> str:
    return cmap.method


def _label_token(cmap: CompressionMap, li: int, S, S_c) -> ScenarioLabel:
    if isinstance(cmap, PruneMap):
        P = cmap.retained[li]
        return classify_prune(S, P, [P[i] for i in S_c])
    if isinstance(cmap, EditMap):
        return classify_edit(S, S_c)
    if isinstance(cmap, MergeMap):
        return classify_merge(S, cmap.phi[li], S_c, cmap.k_merge[li])
    raise InvalidArgumentError(f"unsupported map type {type(cmap).__name__}")


def paired_layer_traces(model_orig: MoEModel, model_comp: MoEModel,
                        batch: TokenBatch) -> list[tuple[LayerTrace, LayerTrace]]:
    """Both models' layer-by-layer routing on the original model's hidden states."""
    if len(model_orig.layers) != len(model_comp.layers):
        raise InvalidArgumentError("models have different depths")
    trace = forward(model_orig, batch, record=True).trace
    pairs = []
    for li, (lo, lc) in enumerate(zip(trace.layers, model_comp.layers)):
        _, comp = layer_forward(lc, lo.inputs, model_comp.layer_top_k(li))
        pairs.append((lo, comp))
    return pairs


def scenario_census(model_orig: MoEModel, model_comp: MoEModel, cmap: CompressionMap,
                    calib: TokenBatch) -> list[Counter]:
    """Per layer, how many tokens fall into each scenario label."""
    counts = []
    for li, (lo, lc) in enumerate(paired_layer_traces(model_orig, model_comp, calib)):
        c = Counter()
        for S, S_c in zip(lo.selected, lc.selected):
            c[_label_token(cmap, li, S.tolist(), S_c.tolist())] += 1
        counts.append(c)
    return counts


def decompose_token(model_orig: MoEModel, model_comp: MoEModel, cmap: CompressionMap,
                    li: int, orig: LayerTrace, comp: LayerTrace) -> DiscrepancyDecomposition:
    x = np.ravel(orig.inputs)
    experts = model_orig.layers[li].experts
    if isinstance(cmap, PruneMap):
        return decompose_prune(orig, comp, x, experts, cmap.retained[li])
    if isinstance(cmap, EditMap):
        return decompose_edit(orig, comp, x, experts, model_comp.layers[li].experts)
    return decompose_merge(orig, comp, x, experts, model_comp.layers[li].experts, cmap.phi[li])


def write_census_csv(counts: list[Counter], paradigm: str, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "scenario", "count"])
        for li, c in enumerate(counts):
            for label in all_labels(paradigm):
                w.writerow([li, str(label), c.get(label, 0)])


def write_token_jsonl(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
