"""Channel selection from skewness medians and physical filter removal for CNNs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .models import LayerNode, ModelSpec, infer_shapes, validate
from .skew import SkewnessReport
from .tensor import Tensor


@dataclass(frozen=True)
class KeepIndexSet:
    site: str
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError(f"{self.site}: empty keep set")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"{self.site}: keep indices must be strictly increasing")
        if idx[0] < 0:
            raise ValueError(f"{self.site}: negative keep index")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)


def keep_positive(medians) -> list[int]:
    """Positions with median > 0; the single best position if there are none."""
    med = np.asarray(medians, dtype=np.float64)
    keep = [i for i, m in enumerate(med) if m > 0]
    if not keep:
        keep = [int(np.argmax(med))]
    return keep


def select_keep_channels(report: SkewnessReport) -> KeepIndexSet:
    return KeepIndexSet(report.site, tuple(keep_positive(report.medians)))


def _set(model: ModelSpec, node: LayerNode, key: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    model.weights[node.pname(key)] = Tensor(arr, requires_grad=True)
    node.params[key] = tuple(arr.shape)


def _cut_out(model: ModelSpec, conv: LayerNode, keep: np.ndarray) -> None:
    _set(model, conv, "weight", model.w(conv, "weight").data[keep])
    _set(model, conv, "bias", model.w(conv, "bias").data[keep])
    conv.hyper["out"] = len(keep)


def _cut_in(model: ModelSpec, conv: LayerNode, keep: np.ndarray) -> None:
    _set(model, conv, "weight", model.w(conv, "weight").data[:, keep])
    conv.hyper["in"] = len(keep)


def prune_filters(model: ModelSpec, keep: Mapping[str, KeepIndexSet], mode: str = "block") -> ModelSpec:
    """Remove filters outside each pool site's keep set.

    ``strict`` cuts only the conv feeding the pool; ``block`` cuts every conv
    of the pool's block at the same indices. Successor in-channel slices and
    the first classifier layer's columns follow. The input model is not touched.
    """
    if mode not in ("strict", "block"):
        raise ValueError(f"unknown prune mode {mode!r}")
    if model.arch != "vgg":
        raise ValueError("prune_filters works on CNN models")
    new = model.copy()
    shapes = {n.name: (i, o) for n, i, o in infer_shapes(new)}
    nodes = new.nodes
    convs = [n for n in nodes if n.kind == "conv"]
    log = new.meta.setdefault("keep", {})
    for site, ks in keep.items():
        pool = new.node(site)
        if pool.kind != "maxpool":
            raise ValueError(f"{site} is not a pooling site")
        width = shapes[site][1][0]
        idx = np.asarray(ks.indices, dtype=np.int64)
        if idx.max() >= width:
            raise ValueError(f"{site}: keep set references channel {idx.max()} of {width}")
        pos = nodes.index(pool)
        upstream = [n for n in nodes[:pos] if n.kind == "conv" and n.hyper["block"] == pool.hyper["block"]]
        if not upstream:
            raise ValueError(f"{site}: no conv feeds this pool")
        if mode == "strict":
            targets = upstream[-1:]
        else:
            bad = [c.name for c in upstream if c.hyper["out"] != width]
            if bad:
                raise ValueError(f"{site}: block mode needs equal widths, {bad} differ")
            targets = upstream
        for conv in targets:
            _cut_out(new, conv, idx)
            later = convs[convs.index(conv) + 1:]
            if later:
                _cut_in(new, later[0], idx)
            else:
                _cut_classifier(new, pos, idx, shapes[site][1])
        log[site] = {"indices": [int(i) for i in idx], "removed": int(width - len(idx)),
                     "mode": mode, "width": int(width)}
    validate(new)
    return new


def _cut_classifier(model: ModelSpec, pool_pos: int, keep: np.ndarray, pool_out: tuple) -> None:
    fc = next((n for n in model.nodes[pool_pos:] if n.kind == "linear"), None)
    if fc is None:
        raise ValueError("no classifier after the last pool")
    c, h, w = pool_out
    hw = h * w
    cols = (keep[:, None] * hw + np.arange(hw)[None, :]).ravel()
    _set(model, fc, "weight", model.w(fc, "weight").data[:, cols])
    fc.hyper["in"] = len(keep) * hw
