"""Expert pruning, editing and merging.

Each routine returns a new student model together with a map recording
what was done; the input model is never modified.

* pruning keeps the highest-saliency experts of every layer and deletes the
  rest together with their router rows;
* editing replaces every expert matrix with its truncated-SVD reconstruction;
* merging clusters experts by their mean calibration output (average
  linkage) and averages each cluster's weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from moelab import tensor_core as tc
from moelab.errors import FormatError, InvalidArgumentError
from moelab.model import Expert, MoELayer, MoEModel, TokenBatch, forward


@dataclass
class PruneMap:
    retained: list[list[int]]
    n_original: list[int]
    method = "prune"

    def remap(self, layer: int) -> dict[int, int]:
        return {old: new for new, old in enumerate(self.retained[layer])}

    def to_dict(self) -> dict:
        return {"method": self.method, "n_original": self.n_original, "retained": self.retained}


@dataclass
class EditMap:
    ranks: list[list[int]]
    errors_in: list[list[float]]
    errors_out: list[list[float]]
    method = "edit"

    def to_dict(self) -> dict:
        return {"method": self.method, "ranks": self.ranks,
                "errors_in": self.errors_in, "errors_out": self.errors_out}


@dataclass
class MergeMap:
    phi: list[list[int]]
    k_merge: list[int]
    coefficients: list[list[float]]
    method = "merge"

    def members(self, layer: int) -> list[list[int]]:
        phi = self.phi[layer]
        out = [[] for _ in range(max(phi) + 1)]
        for i, c in enumerate(phi):
            out[c].append(i)
        return out

    def to_dict(self) -> dict:
        return {"method": self.method, "phi": self.phi, "k_merge": self.k_merge,
                "members": [self.members(li) for li in range(len(self.phi))],
                "coefficients": self.coefficients}


CompressionMap = PruneMap | EditMap | MergeMap


def map_from_dict(d: dict) -> CompressionMap:
    try:
        method = d["method"]
        if method == "prune":
            return PruneMap([list(map(int, r)) for r in d["retained"]], [int(n) for n in d["n_original"]])
        if method == "edit":
            return EditMap(d["ranks"], d["errors_in"], d["errors_out"])
        if method == "merge":
            return MergeMap([list(map(int, p)) for p in d["phi"]], [int(k) for k in d["k_merge"]],
                            d["coefficients"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed compression map: {exc}") from exc
    raise FormatError(f"unknown compression method {d.get('method')!r}")


def save_map(cmap: CompressionMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cmap.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_map(path) -> CompressionMap:
    try:
        with open(path, encoding="utf-8") as fh:
            return map_from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def identity_map(model: MoEModel) -> PruneMap:
    return PruneMap([list(range(n)) for n in model.expert_counts], model.expert_counts)


# --------------------------------------------------------------------------
# saliency and pruning


def expert_saliency(model: MoEModel, calib: TokenBatch) -> list[np.ndarray]:
    """Per layer, mean of ``g~_i(x) * ||E_i(x)||`` over the tokens routed to expert i.

    Experts that no calibration token reaches get saliency 0.
    """
    if len(calib) == 0 or calib.n_tokens == 0:
        raise InvalidArgumentError("calibration set is empty")
    trace = forward(model, calib, record=True).trace
    out = []
    for layer, lt in zip(model.layers, trace.layers):
        sal = np.zeros(layer.n_experts)
        for e, ex in enumerate(layer.experts):
            tok, slot = np.nonzero(lt.selected == e)
            if tok.size:
                norms = np.linalg.norm(ex(lt.inputs[tok]), axis=1)
                sal[e] = float(np.mean(lt.weights[tok, slot] * norms))
        out.append(sal)
    return out


def retained_count(n_experts: int, retention: float) -> int:
    # round away float noise such as 0.625 * 8 = 5.000000000000001
    return int(math.ceil(round(retention * n_experts, 9)))


def prune_experts(model: MoEModel, retention: float,
                  calib: TokenBatch) -> tuple[MoEModel, PruneMap]:
    if not 0.0 < retention <= 1.0:
        raise InvalidArgumentError(f"retention must lie in (0, 1], got {retention}")
    k = model.config.top_k
    for n in model.expert_counts:
        if retained_count(n, retention) < k:
            raise InvalidArgumentError(
                f"retention {retention} keeps {retained_count(n, retention)} of {n} experts, "
                f"fewer than top_k={k}"
            )
    saliency = expert_saliency(model, calib)
    student = model.copy()
    retained = []
    for li, layer in enumerate(student.layers):
        keep = tc.top_k(saliency[li], retained_count(layer.n_experts, retention)).tolist()
        retained.append(keep)
        student.layers[li] = MoELayer(layer.router[keep].copy(), [layer.experts[i] for i in keep])
    return student, PruneMap(retained, model.expert_counts)


# --------------------------------------------------------------------------
# editing


def edit_rank(d_model: int, d_ff: int, rank_ratio: float) -> int:
    return max(1, int(math.floor(round(rank_ratio * min(d_model, d_ff), 9))))


def edit_experts(model: MoEModel, rank_ratio: float) -> tuple[MoEModel, EditMap]:
    if not 0.0 < rank_ratio <= 1.0:
        raise InvalidArgumentError(f"rank_ratio must lie in (0, 1], got {rank_ratio}")
    r = edit_rank(model.config.d_model, model.config.d_ff, rank_ratio)
    student = model.copy()
    ranks, err_in, err_out = [], [], []
    for layer in student.layers:
        ranks.append([r] * layer.n_experts)
        ei, eo = [], []
        for ex in layer.experts:
            w_in = tc.low_rank(ex.w_in, r)
            w_out = tc.low_rank(ex.w_out, r)
            ei.append(float(np.linalg.norm(ex.w_in - w_in)))
            eo.append(float(np.linalg.norm(ex.w_out - w_out)))
            ex.w_in, ex.w_out = w_in, w_out
        err_in.append(ei)
        err_out.append(eo)
    return student, EditMap(ranks, err_in, err_out)


# --------------------------------------------------------------------------
# merging


def average_linkage(points: np.ndarray, n_clusters: int) -> list[list[int]]:
    """Agglomerative clustering with average linkage on Euclidean distance.

    Clusters are merged until ``n_clusters`` remain.  Among equally close
    pairs the one whose smallest members are lexicographically first wins.
    The result lists clusters ordered by their smallest member.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= n_clusters <= n:
        raise InvalidArgumentError(f"cannot form {n_clusters} clusters from {n} points")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    clusters: dict[int, list[int]] = {i: [i] for i in range(n)}
    while len(clusters) > n_clusters:
        keys = sorted(clusters)
        best = None
        for ai, a in enumerate(keys):
            for b in keys[ai + 1:]:
                if best is None or dist[a, b] < best[0]:
                    best = (dist[a, b], a, b)
        _, a, b = best
        na, nb = len(clusters[a]), len(clusters[b])
        # Lance-Williams update for average linkage; the merged cluster keeps key a
        for c in keys:
            if c != a and c != b:
                d = (na * dist[a, c] + nb * dist[b, c]) / (na + nb)
                dist[a, c] = dist[c, a] = d
        clusters[a] = sorted(clusters[a] + clusters.pop(b))
    return [clusters[key] for key in sorted(clusters)]


def mean_expert_outputs(layer: MoELayer, inputs: np.ndarray) -> np.ndarray:
    return np.stack([ex(inputs).mean(axis=0) for ex in layer.experts])


def merge_experts(model: MoEModel, target_count: int,
                  calib: TokenBatch) -> tuple[MoEModel, MergeMap]:
    k = model.config.top_k
    for n in model.expert_counts:
        if not k <= target_count <= n:
            raise InvalidArgumentError(
                f"target_count={target_count} must lie in [top_k={k}, {n}]"
            )
    saliency = expert_saliency(model, calib)
    trace = forward(model, calib, record=True).trace
    student = model.copy()
    phis, k_merge, coefs = [], [], []
    for li, layer in enumerate(model.layers):
        centroids = mean_expert_outputs(layer, trace.layers[li].inputs)
        clusters = average_linkage(centroids, target_count)
        phi = [0] * layer.n_experts
        experts, rows, layer_coefs = [], [], []
        for c, members in enumerate(clusters):
            for i in members:
                phi[i] = c
            w = saliency[li][members]
            w = w / w.sum() if w.sum() > 0 else np.full(len(members), 1.0 / len(members))
            layer_coefs.append(w.tolist())
            experts.append(Expert(
                sum(wi * layer.experts[i].w_in for wi, i in zip(w, members)),
                sum(wi * layer.experts[i].w_out for wi, i in zip(w, members)),
            ))
            rows.append(layer.router[members].mean(axis=0))
        student.layers[li] = MoELayer(np.stack(rows), experts)
        phis.append(phi)
        k_merge.append(min(k, len(clusters)))
        coefs.append(layer_coefs)
    return student, MergeMap(phis, k_merge, coefs)
