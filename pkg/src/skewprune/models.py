"""Layer-graph models: VGG-style CNNs and ViT-style transformers.

A model is a ``ModelSpec``: an ordered list of ``LayerNode`` plus a flat weight
store keyed ``"<node>.<param>"``. Pruning rewrites node hyperparameters and
weight tensors; the forward interpreter reads both, so a pruned model needs no
new code paths.

Encoder blocks carry three optional pruning fields in ``hyper``:

``in_keep``
    embedding channels kept upstream (patch pruning). The block input then
    has ``len(in_keep)`` channels and the attention residual goes through
    :func:`residual_add_pruned` to get back to ``dim``.
``head_dims`` / ``head_ids``
    width and original index of every surviving head.
``mlp_keep``
    channels of the post-attention stream fed to the MLP (Prune 2 site).
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

Shape = tuple[int, ...]


@dataclass
class LayerNode:
    kind: str
    name: str
    hyper: dict[str, Any] = field(default_factory=dict)
    params: dict[str, Shape] = field(default_factory=dict)

    def pname(self, key: str) -> str:
        return f"{self.name}.{key}"


@dataclass
class ModelSpec:
    arch: str
    nodes: list[LayerNode]
    input_shape: Shape
    num_classes: int
    weights: dict[str, Tensor] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(f"no node named {name!r}")

    def w(self, node: LayerNode, key: str) -> Tensor:
        return self.weights[node.pname(key)]

    def param_names(self) -> list[str]:
        return [n.pname(k) for n in self.nodes for k in n.params]

    def parameters(self) -> list[Tensor]:
        return [self.weights[name] for name in self.param_names()]

    @property
    def materialized(self) -> bool:
        return bool(self.weights)

    def copy(self) -> "ModelSpec":
        weights = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.weights.items()}
        return ModelSpec(self.arch, copy.deepcopy(self.nodes), tuple(self.input_shape),
                         self.num_classes, weights, copy.deepcopy(self.meta))


@dataclass
class VGGConfig:
    blocks: Sequence[Sequence[int]] = ((16,), (32,), (64,))
    classifier: Sequence[int] = (64,)
    num_classes: int = 3
    in_channels: int = 3
    image_size: int = 32

    @classmethod
    def vgg11(cls, num_classes: int = 8, image_size: int = 224) -> "VGGConfig":
        return cls(blocks=((64,), (128,), (256, 256), (512, 512), (512, 512)),
                   classifier=(4096, 4096), num_classes=num_classes, image_size=image_size)


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 3
    in_channels: int = 3
    qkv_bias: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("patch size must divide the image size")
        if self.embed_dim % self.num_heads:
            raise ValueError("num_heads must divide embed_dim")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @classmethod
    def vit_b16(cls, num_classes: int = 8) -> "VitConfig":
        return cls(image_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12,
                   mlp_ratio=4.0, num_classes=num_classes)


# ---------------------------------------------------------------- builders

def build_vgg(config: VGGConfig, seed: int = 0, materialize: bool = True) -> ModelSpec:
    if not config.blocks or any(not b for b in config.blocks):
        raise ValueError("every VGG block needs at least one conv")
    if any(c <= 0 for b in config.blocks for c in b) or config.num_classes < 2:
        raise ValueError("invalid VGG block spec")
    nodes: list[LayerNode] = []
    cin = config.in_channels
    size = config.image_size
    for bi, block in enumerate(config.blocks):
        for ci, cout in enumerate(block):
            nodes.append(LayerNode("conv", f"conv{bi}_{ci}",
                                   {"in": cin, "out": cout, "k": 3, "stride": 1, "padding": 1, "block": bi},
                                   {"weight": (cout, cin, 3, 3), "bias": (cout,)}))
            nodes.append(LayerNode("relu", f"relu{bi}_{ci}"))
            cin = cout
        nodes.append(LayerNode("maxpool", f"pool{bi}", {"k": 2, "stride": 2, "block": bi}))
        size //= 2
    if size < 1:
        raise ValueError("too many pooling stages for the image size")
    nodes.append(LayerNode("flatten", "flatten"))
    fin = cin * size * size
    widths = list(config.classifier) + [config.num_classes]
    for i, fout in enumerate(widths):
        nodes.append(LayerNode("linear", f"fc{i}", {"in": fin, "out": fout},
                               {"weight": (fout, fin), "bias": (fout,)}))
        if i < len(widths) - 1:
            nodes.append(LayerNode("relu", f"relu_fc{i}"))
        fin = fout
    model = ModelSpec("vgg", nodes, (config.in_channels, config.image_size, config.image_size),
                      config.num_classes)
    if materialize:
        _init_vgg(model, np.random.default_rng(seed))
    validate(model)
    return model


def _init_vgg(model: ModelSpec, rng: np.random.Generator) -> None:
    for n in model.nodes:
        if n.kind == "conv":
            fan_out = n.hyper["out"] * 9
            w = rng.standard_normal(n.params["weight"], dtype=np.float32) * np.float32(math.sqrt(2.0 / fan_out))
        elif n.kind == "linear":
            w = rng.standard_normal(n.params["weight"], dtype=np.float32) * np.float32(math.sqrt(2.0 / n.hyper["in"]))
        else:
            continue
        model.weights[n.pname("weight")] = Tensor(w, requires_grad=True)
        model.weights[n.pname("bias")] = Tensor(np.zeros(n.params["bias"], np.float32), requires_grad=True)


def _split_heads(width: int, n_heads: int) -> list[int]:
    """Head widths for ``width`` channels: floor share each, remainder to the last head."""
    base = width // n_heads
    if base < 1:
        raise ValueError(f"cannot split {width} channels over {n_heads} heads")
    dims = [base] * n_heads
    dims[-1] += width - base * n_heads
    return dims


def _block_params(in_dim: int, inner: int, dim: int, mlp_in: int, hidden: int, qkv_bias: bool) -> dict[str, Shape]:
    p: dict[str, Shape] = {"ln1.g": (in_dim,), "ln1.b": (in_dim,)}
    for m in ("q", "k", "v"):
        p[f"{m}.weight"] = (inner, in_dim)
        if qkv_bias:
            p[f"{m}.bias"] = (inner,)
    p.update({"proj.weight": (dim, inner), "proj.bias": (dim,),
              "ln2.g": (mlp_in,), "ln2.b": (mlp_in,),
              "fc1.weight": (hidden, mlp_in), "fc1.bias": (hidden,),
              "fc2.weight": (dim, hidden), "fc2.bias": (dim,)})
    return p


def build_vit(config: VitConfig, seed: int = 0, materialize: bool = True) -> ModelSpec:
    d, p = config.embed_dim, config.patch_size
    tokens = config.num_patches + 1
    hidden = int(round(d * config.mlp_ratio))
    nodes = [LayerNode("patch-embed", "patch_embed",
                       {"patch": p, "dim": d, "in": config.in_channels, "tokens": tokens},
                       {"weight": (d, config.in_channels, p, p), "bias": (d,),
                        "cls": (1, 1, d), "pos": (1, tokens, d)})]
    for i in range(config.depth):
        nodes.append(LayerNode("encoder-block", f"block{i}",
                               {"dim": d, "hidden": hidden, "qkv_bias": config.qkv_bias,
                                "head_dims": [config.head_dim] * config.num_heads,
                                "head_ids": list(range(config.num_heads)),
                                "in_keep": None, "mlp_keep": None},
                               _block_params(d, d, d, d, hidden, config.qkv_bias)))
    nodes.append(LayerNode("layernorm", "norm", {"dim": d}, {"g": (d,), "b": (d,)}))
    nodes.append(LayerNode("head", "head", {"in": d, "out": config.num_classes},
                           {"weight": (config.num_classes, d), "bias": (config.num_classes,)}))
    model = ModelSpec("vit", nodes, (config.in_channels, config.image_size, config.image_size),
                      config.num_classes, meta={"num_heads": config.num_heads})
    if materialize:
        _init_vit(model, np.random.default_rng(seed))
    validate(model)
    return model


def _init_vit(model: ModelSpec, rng: np.random.Generator) -> None:
    for n in model.nodes:
        for key, shape in n.params.items():
            leaf = key.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape, np.float32)
            elif leaf in ("b", "bias"):
                arr = np.zeros(shape, np.float32)
            elif n.kind == "patch-embed" and key == "weight":
                fan_in = int(np.prod(shape[1:]))
                arr = rng.standard_normal(shape, dtype=np.float32) * np.float32(math.sqrt(1.0 / fan_in))
            else:
                arr = np.clip(rng.standard_normal(shape, dtype=np.float32), -2, 2) * np.float32(0.02)
            model.weights[n.pname(key)] = Tensor(arr, requires_grad=True)


# ---------------------------------------------------------------- shape checks

def infer_shapes(model: ModelSpec) -> list[tuple[LayerNode, Shape, Shape]]:
    """(node, input shape, output shape) per node, batch axis excluded."""
    out: list[tuple[LayerNode, Shape, Shape]] = []
    shape: Shape = tuple(model.input_shape)
    for n in model.nodes:
        h = n.hyper
        if n.kind == "conv":
            c, hh, ww = shape
            if c != h["in"]:
                raise ValueError(f"{n.name}: expects {h['in']} channels, gets {c}")
            k, s, pad = h["k"], h["stride"], h["padding"]
            new: Shape = (h["out"], (hh + 2 * pad - k) // s + 1, (ww + 2 * pad - k) // s + 1)
        elif n.kind == "relu":
            new = shape
        elif n.kind == "maxpool":
            c, hh, ww = shape
            if h["k"] > min(hh, ww):
                raise ValueError(f"{n.name}: window larger than input")
            new = (c, (hh - h["k"]) // h["stride"] + 1, (ww - h["k"]) // h["stride"] + 1)
        elif n.kind == "flatten":
            new = (int(np.prod(shape)),)
        elif n.kind in ("linear", "head"):
            feat = shape[-1]
            if feat != h["in"]:
                raise ValueError(f"{n.name}: expects {h['in']} features, gets {feat}")
            new = (h["out"],) if n.kind == "head" else shape[:-1] + (h["out"],)
        elif n.kind == "patch-embed":
            c, hh, ww = shape
            p = h["patch"]
            if c != h["in"] or hh % p or ww % p:
                raise ValueError(f"{n.name}: bad input {shape} for patch {p}")
            if (hh // p) * (ww // p) + 1 != h["tokens"]:
                raise ValueError(f"{n.name}: token count mismatch")
            new = (h["tokens"], h["dim"])
        elif n.kind == "encoder-block":
            t, c = shape
            in_dim = len(h["in_keep"]) if h["in_keep"] is not None else h["dim"]
            if c != in_dim:
                raise ValueError(f"{n.name}: expects {in_dim} channels, gets {c}")
            if h["in_keep"] is not None and max(h["in_keep"]) >= h["dim"]:
                raise ValueError(f"{n.name}: keep index out of range")
            if len(h["head_dims"]) != len(h["head_ids"]) or not h["head_dims"]:
                raise ValueError(f"{n.name}: head bookkeeping mismatch")
            new = (t, h["dim"])
        elif n.kind == "layernorm":
            if shape[-1] != h["dim"]:
                raise ValueError(f"{n.name}: width mismatch")
            new = shape
        else:
            raise ValueError(f"unknown layer kind {n.kind!r}")
        out.append((n, shape, new))
        shape = new
    return out


def validate(model: ModelSpec) -> None:
    infer_shapes(model)
    for n in model.nodes:
        if n.kind == "encoder-block":
            h = n.hyper
            in_dim = len(h["in_keep"]) if h["in_keep"] is not None else h["dim"]
            mlp_in = len(h["mlp_keep"]) if h["mlp_keep"] is not None else h["dim"]
            expect = _block_params(in_dim, sum(h["head_dims"]), h["dim"], mlp_in, h["hidden"], h["qkv_bias"])
            if expect != n.params:
                raise ValueError(f"{n.name}: parameter shapes disagree with hyperparameters")
        if n.kind == "conv" and n.params["weight"] != (n.hyper["out"], n.hyper["in"], n.hyper["k"], n.hyper["k"]):
            raise ValueError(f"{n.name}: weight shape disagrees with hyperparameters")
    if model.materialized:
        names = model.param_names()
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        for n in model.nodes:
            for key, shape in n.params.items():
                t = model.weights.get(n.pname(key))
                if t is None:
                    raise ValueError(f"missing weight {n.pname(key)}")
                if t.shape != tuple(shape):
                    raise ValueError(f"{n.pname(key)}: stored {t.shape}, declared {tuple(shape)}")
        extra = set(model.weights) - set(names)
        if extra:
            raise ValueError(f"unreferenced weights: {sorted(extra)}")


# ---------------------------------------------------------------- forward

@dataclass
class TapRecord:
    site: str
    kind: str  # "feature" (N,C,H,W), "attention" (N,heads,t,t), "tokens" (N,t,C)
    values: np.ndarray
    units: list[int] = field(default_factory=list)


def residual_add_pruned(x_in: Tensor, residual: Tensor, keep: Sequence[int]) -> Tensor:
    """Add a ``|keep|``-wide stream onto a ``d``-wide residual.

    Column ``i`` of ``x_in`` lands on column ``keep[i]``; other columns of the
    residual pass through untouched. With ``|keep| == d`` this is plain addition.
    """
    d = residual.shape[-1]
    keep = list(keep)
    if len(keep) > d:
        raise ValueError(f"keep set of size {len(keep)} exceeds width {d}")
    if x_in.shape[-1] != len(keep):
        raise ValueError("x_in width must equal the keep-set size")
    if keep and (max(keep) >= d or min(keep) < 0):
        raise IndexError("keep index out of range")
    if d > len(keep):
        return residual + T.scatter_last(x_in, keep, d)
    return residual + x_in


def _attention(model: ModelSpec, n: LayerNode, h: Tensor, taps: dict | None) -> Tensor:
    hp = n.hyper
    bias = hp["qkv_bias"]
    q = T.linear(h, model.w(n, "q.weight"), model.w(n, "q.bias") if bias else None)
    k = T.linear(h, model.w(n, "k.weight"), model.w(n, "k.bias") if bias else None)
    v = T.linear(h, model.w(n, "v.weight"), model.w(n, "v.bias") if bias else None)
    b, t, _ = q.shape
    dims = hp["head_dims"]
    site = f"{n.name}.attn"
    if len(set(dims)) == 1:
        nh, dk = len(dims), dims[0]
        qh = q.reshape(b, t, nh, dk).transpose(0, 2, 1, 3)
        kh = k.reshape(b, t, nh, dk).transpose(0, 2, 3, 1)
        vh = v.reshape(b, t, nh, dk).transpose(0, 2, 1, 3)
        attn = T.softmax(T.scale(qh @ kh, 1.0 / math.sqrt(dk)), axis=-1)
        if taps is not None and site in taps:
            taps[site] = TapRecord(site, "attention", attn.data.copy(), list(hp["head_ids"]))
        o = (attn @ vh).transpose(0, 2, 1, 3).reshape(b, t, nh * dk)
        return o
    outs, maps = [], []
    start = 0
    for dk in dims:
        idx = list(range(start, start + dk))
        start += dk
        qh, kh, vh = (T.take(m, idx, axis=-1) for m in (q, k, v))
        attn = T.softmax(T.scale(qh @ kh.transpose(0, 2, 1), 1.0 / math.sqrt(dk)), axis=-1)
        maps.append(attn.data)
        outs.append(attn @ vh)
    if taps is not None and site in taps:
        taps[site] = TapRecord(site, "attention", np.stack(maps, axis=1), list(hp["head_ids"]))
    return T.concat(outs, axis=-1)


def _encoder_block(model: ModelSpec, n: LayerNode, x: Tensor, taps: dict | None) -> Tensor:
    hp = n.hyper
    h = T.layernorm(x, model.w(n, "ln1.g"), model.w(n, "ln1.b"))
    a = _attention(model, n, h, taps)
    a = T.linear(a, model.w(n, "proj.weight"), model.w(n, "proj.bias"))
    if hp["in_keep"] is not None:
        x = residual_add_pruned(x, a, hp["in_keep"])
    else:
        x = x + a
    site = f"{n.name}.mid"
    if taps is not None and site in taps:
        taps[site] = TapRecord(site, "tokens", x.data.copy(), list(range(hp["dim"])))
    m = T.take(x, hp["mlp_keep"], axis=-1) if hp["mlp_keep"] is not None else x
    m = T.layernorm(m, model.w(n, "ln2.g"), model.w(n, "ln2.b"))
    m = T.gelu(T.linear(m, model.w(n, "fc1.weight"), model.w(n, "fc1.bias")))
    m = T.linear(m, model.w(n, "fc2.weight"), model.w(n, "fc2.bias"))
    return x + m


def _expand(x: Tensor, b: int) -> Tensor:
    """Broadcast a (1, ...) parameter over a batch of ``b``."""
    return T.concat([x] * b, axis=0) if b > 1 else x


def forward(model: ModelSpec, x, taps: dict | None = None) -> Tensor:
    """Run the model; ``taps`` maps site id -> None and is filled in place."""
    if not model.materialized:
        raise ValueError("model has no weights")
    x = x if isinstance(x, Tensor) else Tensor(x)
    for n in model.nodes:
        k = n.kind
        if k == "conv":
            x = T.conv2d(x, model.w(n, "weight"), model.w(n, "bias"), n.hyper["stride"], n.hyper["padding"])
        elif k == "relu":
            x = T.relu(x)
        elif k == "maxpool":
            x = T.maxpool2d(x, n.hyper["k"], n.hyper["stride"])
            if taps is not None and n.name in taps:
                taps[n.name] = TapRecord(n.name, "feature", x.data.copy(), list(range(x.shape[1])))
        elif k == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif k == "linear":
            x = T.linear(x, model.w(n, "weight"), model.w(n, "bias"))
        elif k == "patch-embed":
            p = n.hyper["patch"]
            f = T.conv2d(x, model.w(n, "weight"), model.w(n, "bias"), stride=p)
            if taps is not None and n.name in taps:
                taps[n.name] = TapRecord(n.name, "feature", f.data.copy(), list(range(f.shape[1])))
            b, c = f.shape[0], f.shape[1]
            tok = f.reshape(b, c, -1).transpose(0, 2, 1)
            x = T.concat([_expand(model.w(n, "cls"), b), tok], axis=1) + model.w(n, "pos")
        elif k == "encoder-block":
            x = _encoder_block(model, n, x, taps)
        elif k == "layernorm":
            x = T.layernorm(x, model.w(n, "g"), model.w(n, "b"))
        elif k == "head":
            x = T.linear(x[:, 0], model.w(n, "weight"), model.w(n, "bias"))
        else:
            raise ValueError(f"unknown layer kind {k!r}")
    return x


def tap_sites(model: ModelSpec, kind: str) -> list[str]:
    """Site ids of one kind: ``pool``, ``patch``, ``head`` or ``mid``."""
    if kind == "pool":
        return [n.name for n in model.nodes if n.kind == "maxpool"]
    if kind == "patch":
        return [n.name for n in model.nodes if n.kind == "patch-embed"]
    if kind == "head":
        return [f"{n.name}.attn" for n in model.nodes if n.kind == "encoder-block"]
    if kind == "mid":
        return [f"{n.name}.mid" for n in model.nodes if n.kind == "encoder-block"]
    raise ValueError(f"unknown site kind {kind!r}")


def forward_with_taps(model: ModelSpec, batch, sites: Sequence[str]) -> tuple[Tensor, dict[str, TapRecord]]:
    known = {s for kind in (("pool", "patch", "head", "mid") if model.arch == "vit" else ("pool",))
             for s in tap_sites(model, kind)}
    unknown = [s for s in sites if s not in known]
    if unknown:
        raise KeyError(f"unknown tap sites: {unknown}")
    taps: dict[str, Any] = {s: None for s in sites}
    logits = forward(model, batch, taps)
    return logits, taps


def predict(model: ModelSpec, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits for a stack of images, no graph recorded."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward(model, images[i:i + batch_size]).data)
    return np.concatenate(out, axis=0)
