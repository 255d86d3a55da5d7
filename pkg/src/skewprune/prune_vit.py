"""Patch-embedding channel pruning, attention-head pruning and the six ViT pruning patterns."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .models import LayerNode, ModelSpec, _split_heads, validate
from .prune_cnn import KeepIndexSet, _set, keep_positive
from .skew import SkewnessReport, collect_skewness


@dataclass(frozen=True)
class HeadKeepSet:
    block: str
    heads: tuple[int, ...]  # original head ids

    def __post_init__(self):
        if not self.heads:
            raise ValueError(f"{self.block}: empty head keep set")
        object.__setattr__(self, "heads", tuple(sorted(set(int(h) for h in self.heads))))


@dataclass(frozen=True)
class PruningPattern:
    id: int
    name: str
    patch_prune_site1: bool
    patch_prune_site2: bool
    head_prune: bool
    fine_tune: str  # none | full | partial

    @property
    def freeze(self) -> list[str]:
        return ["patch_embed"] if self.fine_tune == "partial" else []


PATTERNS = {
    1: PruningPattern(1, "vanilla", False, False, False, "none"),
    2: PruningPattern(2, "skew-prune-patch", True, False, False, "full"),
    3: PruningPattern(3, "skew-prune-patch-2site", True, True, False, "full"),
    4: PruningPattern(4, "skew-prune-head", False, False, True, "full"),
    5: PruningPattern(5, "skew-prune-patch-head", True, False, True, "full"),
    6: PruningPattern(6, "skew-prune-patch-head-frozen", True, False, True, "partial"),
}


def _blocks(model: ModelSpec) -> list[LayerNode]:
    return [n for n in model.nodes if n.kind == "encoder-block"]


def _slice(model: ModelSpec, node: LayerNode, key: str, rows=None, cols=None) -> None:
    arr = model.w(node, key).data
    if rows is not None:
        arr = arr[rows]
    if cols is not None:
        arr = arr[:, cols] if arr.ndim == 2 else arr[..., cols]
    _set(model, node, key, arr)


def prune_patch_embedding(model: ModelSpec, keep: KeepIndexSet) -> ModelSpec:
    """Keep only the patch-embedding filters in ``keep``.

    The first encoder block then runs attention over the kept channels (head
    widths re-split evenly, remainder to the last head) and restores the full
    width through the pruned-dimension residual add.
    """
    if model.arch != "vit":
        raise ValueError("patch pruning needs a ViT model")
    new = model.copy()
    pe = new.node("patch_embed")
    width = pe.hyper["dim"]
    idx = np.asarray(keep.indices, dtype=np.int64)
    if idx.max() >= width:
        raise ValueError(f"keep index {idx.max()} exceeds embedding width {width}")
    b0 = _blocks(new)[0]
    h = b0.hyper
    if len(h["head_ids"]) != new.meta["num_heads"] or h["mlp_keep"] is not None:
        raise ValueError("patch pruning must come before head or token pruning")
    if h["in_keep"] is not None and sum(h["head_dims"]) != len(h["in_keep"]):
        raise ValueError("first block attention width disagrees with its keep set")

    _slice(new, pe, "weight", rows=idx)
    _slice(new, pe, "bias", rows=idx)
    _slice(new, pe, "cls", cols=idx)
    _slice(new, pe, "pos", cols=idx)
    pe.hyper["dim"] = len(idx)

    prev = np.asarray(h["in_keep"], dtype=np.int64) if h["in_keep"] is not None else np.arange(h["dim"])
    _slice(new, b0, "ln1.g", rows=idx)
    _slice(new, b0, "ln1.b", rows=idx)
    for m in ("q", "k", "v"):
        _slice(new, b0, f"{m}.weight", rows=idx, cols=idx)
        if h["qkv_bias"]:
            _slice(new, b0, f"{m}.bias", rows=idx)
    _slice(new, b0, "proj.weight", cols=idx)
    h["in_keep"] = [int(i) for i in prev[idx]]
    h["head_dims"] = _split_heads(len(idx), len(h["head_ids"]))
    new.meta.setdefault("keep", {})["patch_embed"] = {
        "indices": [int(i) for i in idx], "removed": int(width - len(idx)), "width": int(width)}
    validate(new)
    return new


def prune_block_tokens(model: ModelSpec, keep: KeepIndexSet, block: str = "block0") -> ModelSpec:
    """Feed only the kept channels of ``block``'s post-attention stream to its MLP."""
    new = model.copy()
    b = new.node(block)
    h = b.hyper
    if h["mlp_keep"] is not None:
        raise ValueError(f"{block} already has a token keep set")
    idx = np.asarray(keep.indices, dtype=np.int64)
    if idx.max() >= h["dim"]:
        raise ValueError(f"keep index {idx.max()} exceeds width {h['dim']}")
    _slice(new, b, "ln2.g", rows=idx)
    _slice(new, b, "ln2.b", rows=idx)
    _slice(new, b, "fc1.weight", cols=idx)
    h["mlp_keep"] = [int(i) for i in idx]
    new.meta.setdefault("keep", {})[f"{block}.mid"] = {
        "indices": h["mlp_keep"], "removed": int(h["dim"] - len(idx)), "width": int(h["dim"])}
    validate(new)
    return new


def select_keep_heads(reports: Sequence[SkewnessReport]) -> list[HeadKeepSet]:
    out = []
    for r in reports:
        pos = keep_positive(r.medians)
        out.append(HeadKeepSet(r.site.split(".")[0], tuple(r.units[p] for p in pos)))
    return out


def prune_heads(model: ModelSpec, keeps: Sequence[HeadKeepSet]) -> ModelSpec:
    """Drop Q/K/V rows and output-projection columns of unselected heads."""
    new = model.copy()
    log = new.meta.setdefault("keep", {})
    for ks in keeps:
        b = new.node(ks.block)
        if b.kind != "encoder-block":
            raise ValueError(f"{ks.block} is not an encoder block")
        h = b.hyper
        ids, dims = h["head_ids"], h["head_dims"]
        missing = [x for x in ks.heads if x not in ids]
        if missing:
            raise ValueError(f"{ks.block}: invalid head index {missing}")
        starts = np.concatenate([[0], np.cumsum(dims)])
        pos = [ids.index(x) for x in ks.heads]
        rows = np.concatenate([np.arange(starts[p], starts[p + 1]) for p in pos])
        for m in ("q", "k", "v"):
            _slice(new, b, f"{m}.weight", rows=rows)
            if h["qkv_bias"]:
                _slice(new, b, f"{m}.bias", rows=rows)
        _slice(new, b, "proj.weight", cols=rows)
        log[f"{ks.block}.attn"] = {"indices": list(ks.heads), "removed": len(ids) - len(pos),
                                   "width": len(ids)}
        h["head_ids"] = [ids[p] for p in pos]
        h["head_dims"] = [dims[p] for p in pos]
    validate(new)
    return new


def apply_pattern(model: ModelSpec, pattern: int | PruningPattern, images: np.ndarray | None,
                  intermediate: Callable[[ModelSpec], ModelSpec] | None = None,
                  batch_size: int = 64) -> tuple[ModelSpec, dict]:
    """Run one pruning pattern's collect -> select -> prune sequence.

    ``intermediate`` is called on the patch-pruned model before head pruning
    (the interim training stage of the partial fine-tuning pattern).
    """
    pat = PATTERNS[pattern] if isinstance(pattern, int) else pattern
    if pat.id not in PATTERNS:
        raise ValueError(f"unknown pattern {pat.id}")
    needs_data = pat.patch_prune_site1 or pat.patch_prune_site2 or pat.head_prune
    if needs_data and (images is None or len(images) == 0):
        raise ValueError(f"pattern {pat.id} needs a non-empty dataset")
    sites: dict[str, dict] = {}
    out = model.copy()

    if pat.patch_prune_site1:
        (rep,) = collect_skewness(out, images, "patch", batch_size=batch_size)
        ks = KeepIndexSet("patch_embed", tuple(keep_positive(rep.medians)))
        out = prune_patch_embedding(out, ks)
        sites["patch_embed"] = {"kept": list(ks.indices), "total": len(rep.units)}
        if intermediate is not None and pat.fine_tune == "partial":
            out = intermediate(out)
    if pat.patch_prune_site2:
        (rep,) = collect_skewness(out, images, "mid", sites=["block0.mid"], batch_size=batch_size)
        ks = KeepIndexSet("block0.mid", tuple(keep_positive(rep.medians)))
        out = prune_block_tokens(out, ks, "block0")
        sites["block0.mid"] = {"kept": list(ks.indices), "total": len(rep.units)}
    if pat.head_prune:
        reps = collect_skewness(out, images, "head", batch_size=batch_size)
        keeps = select_keep_heads(reps)
        out = prune_heads(out, keeps)
        for r, k in zip(reps, keeps):
            sites[r.site] = {"kept": list(k.heads), "total": len(r.units)}

    prov = {"pattern": pat.id, "name": pat.name, "sites": sites,
            "fine_tune": pat.fine_tune, "freeze": pat.freeze}
    out.meta["provenance"] = prov
    return out, prov
