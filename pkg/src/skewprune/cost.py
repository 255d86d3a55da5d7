"""Parameter, FLOP and memory accounting.

FLOPs are multiply-accumulates with 1 MAC counted as 1 FLOP (half of what
tools counting mul and add separately report). Elementwise ops, norms,
softmax and biases are not counted. Memory is parameter bytes at 4 bytes per
parameter, in MiB; activations are not included.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .models import ModelSpec, infer_shapes

BYTES_PER_PARAM = 4
MIB = 2 ** 20


@dataclass
class CostReport:
    params: int
    flops: int
    memory_mib: float
    input_shape: tuple[int, ...]
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["gflops"] = self.flops / 1e9
        d["params_m"] = self.params / 1e6
        return d


def count_params(model: ModelSpec) -> int:
    return int(sum(int(np.prod(s)) for n in model.nodes for s in n.params.values()))


def layer_flops(model: ModelSpec, input_shape: Sequence[int] | None = None) -> list[tuple[str, int]]:
    if input_shape is not None:
        if any(not isinstance(v, (int, np.integer)) or v <= 0 for v in input_shape):
            raise ValueError(f"static positive input shape required, got {input_shape}")
        if tuple(input_shape) != tuple(model.input_shape):
            model = ModelSpec(model.arch, model.nodes, tuple(int(v) for v in input_shape),
                              model.num_classes, {}, model.meta)
    out = []
    for n, shp_in, shp_out in infer_shapes(model):
        h = n.hyper
        if n.kind == "conv":
            c, ho, wo = shp_out
            macs = ho * wo * c * h["k"] * h["k"] * h["in"]
        elif n.kind == "linear":
            macs = int(np.prod(shp_out[:-1], dtype=np.int64)) * h["out"] * h["in"]
        elif n.kind == "head":
            macs = h["out"] * h["in"]
        elif n.kind == "patch-embed":
            p = h["patch"]
            macs = (h["tokens"] - 1) * h["dim"] * h["in"] * p * p
        elif n.kind == "encoder-block":
            t, in_dim = shp_in
            d = h["dim"]
            inner = sum(h["head_dims"])
            mlp_in = len(h["mlp_keep"]) if h["mlp_keep"] is not None else d
            macs = (3 * t * in_dim * inner      # q, k, v projections
                    + 2 * t * t * inner         # scores and attention-weighted values
                    + t * inner * d             # output projection
                    + t * mlp_in * h["hidden"] + t * h["hidden"] * d)
        else:
            macs = 0
        out.append((n.name, int(macs)))
    return out


def count_flops(model: ModelSpec, input_shape: Sequence[int] | None = None) -> int:
    return sum(m for _, m in layer_flops(model, input_shape))


def memory_footprint(model: ModelSpec) -> float:
    return count_params(model) * BYTES_PER_PARAM / MIB


def cost_report(model: ModelSpec, input_shape: Sequence[int] | None = None,
                best_epoch: int | None = None) -> CostReport:
    shape = tuple(input_shape) if input_shape is not None else tuple(model.input_shape)
    return CostReport(count_params(model), count_flops(model, shape), memory_footprint(model),
                      shape, best_epoch)
