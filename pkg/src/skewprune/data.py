"""Datasets, synthetic skin-tone bias generator and on-disk formats.

Dataset directory::

    manifest.json   schema, generator config (if synthetic), split sizes
    labels.csv      image,label,fitzpatrick[,group][,split]
    images/*.ppm    binary P6, 8-bit RGB

Model directory::

    manifest.json   schema, nodes with hyperparameters, parameter shapes and
                    byte offsets into the blob, metadata (keep sets, provenance)
    weights.bin     little-endian float32 parameters, concatenated in manifest order

Predictions file: ``# schema: skewprune.predictions/1`` then a CSV header
``true,pred,group[,fitzpatrick]``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fairness import EvalRecord
from .models import LayerNode, ModelSpec, validate
from .tensor import Tensor

DATASET_SCHEMA = "skewprune.dataset/1"
MODEL_SCHEMA = "skewprune.model/1"
PRED_SCHEMA = "skewprune.predictions/1"

SKIN_RGB = np.array([1.0, 0.80, 0.66], dtype=np.float64)
LESION_RGB = np.array([0.22, 0.13, 0.08], dtype=np.float64)


def fitzpatrick_group(fitz: int) -> int:
    """Types 1-3 -> 0 (light), 4-6 -> 1 (dark)."""
    if not 1 <= int(fitz) <= 6:
        raise ValueError(f"Fitzpatrick type must be 1-6, got {fitz}")
    return 0 if fitz <= 3 else 1


@dataclass
class Sample:
    image: np.ndarray          # (C, H, W) float32 in [0, 1]
    label: int
    group: int
    fitzpatrick: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.fitzpatrick is not None and fitzpatrick_group(self.fitzpatrick) != self.group:
            raise ValueError(f"{self.name}: group {self.group} disagrees with Fitzpatrick {self.fitzpatrick}")


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    return images, np.array([s.label for s in samples]), np.array([s.group for s in samples])


# ---------------------------------------------------------------- PPM

def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary P6."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ValueError(f"{path}: malformed PPM header") from e
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: PPM pixel data truncated")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    """Skin-lesion stand-in with a tunable tone/class correlation.

    Each image is a skin-coloured background whose brightness follows the
    sample's Fitzpatrick type (overlapping, continuous ranges) plus one small
    elliptical lesion. The lesion's hue encodes the class; with probability
    ``ambiguous`` the hue shift is nearly zero, leaving the class unreadable
    from the lesion. With probability ``rho`` the class is set by the skin
    group instead of drawn uniformly, which plants the tone shortcut.
    """
    image_size: int = 32
    num_classes: int = 3
    rho: float = 0.0
    dark_fraction: float = 0.5
    tone_centers: Sequence[float] = (0.92, 0.82, 0.72, 0.58, 0.46, 0.34)
    tone_jitter: float = 0.06
    pixel_noise: float = 0.03
    lesion_axes: tuple[float, float] = (0.12, 0.21)   # semi-axis range, fraction of side
    hue_shift: tuple[float, float] = (0.12, 0.25)
    ambiguous: float = 0.3
    ambiguous_shift: float = 0.02
    splits: dict = field(default_factory=lambda: {"train": 1200, "val": 200, "test": 1000})
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 0.0 <= self.ambiguous <= 1.0:
            raise ValueError("ambiguous must lie in [0, 1]")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.tone_centers) != 6:
            raise ValueError("one tone centre per Fitzpatrick type")
        if math.pi * self.lesion_axes[1] ** 2 > 0.15:
            raise ValueError("lesion may exceed 15% of the image area")
        self.lesion_axes = tuple(self.lesion_axes)
        self.hue_shift = tuple(self.hue_shift)
        self.tone_centers = tuple(self.tone_centers)


def _preferred_class(group: int, num_classes: int) -> int:
    return group % num_classes


def class_hue(label: int, num_classes: int) -> np.ndarray:
    """Unit chromatic direction (zero-sum RGB) for a class."""
    ang = 2 * math.pi * label / num_classes
    e1 = np.array([2.0, -1.0, -1.0]) / math.sqrt(6)
    e2 = np.array([0.0, 1.0, -1.0]) / math.sqrt(2)
    return math.cos(ang) * e1 + math.sin(ang) * e2


def synth_sample(cfg: SynthConfig, split_id: int, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, split_id, index])
    s = cfg.image_size
    group = int(rng.random() < cfg.dark_fraction)
    fitz = int(rng.integers(1, 4)) + 3 * group
    if rng.random() < cfg.rho:
        label = _preferred_class(group, cfg.num_classes)
    else:
        label = int(rng.integers(cfg.num_classes))
    tone = cfg.tone_centers[fitz - 1] + rng.uniform(-cfg.tone_jitter, cfg.tone_jitter)

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    img = np.empty((3, s, s))
    img[:] = (tone * SKIN_RGB)[:, None, None]

    a, b = rng.uniform(*cfg.lesion_axes, size=2)
    r = max(a, b)
    cy, cx = rng.uniform(r, 1.0 - r, size=2)
    rot = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(rot) + dy * math.sin(rot)
    v = -dx * math.sin(rot) + dy * math.cos(rot)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    if rng.random() < cfg.ambiguous:
        shift = rng.uniform(0.0, cfg.ambiguous_shift)
    else:
        shift = rng.uniform(*cfg.hue_shift)
    lesion = LESION_RGB + shift * class_hue(label, cfg.num_classes)
    img = np.where(inside[None], lesion[:, None, None], img)
    img += rng.normal(0.0, cfg.pixel_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Sample(img.astype(np.float32), label, group, fitz, f"s{split_id}_{index:06d}")


def generate_samples(cfg: SynthConfig) -> dict[str, list[Sample]]:
    return {name: [synth_sample(cfg, sid, i) for i in range(n)]
            for sid, (name, n) in enumerate(cfg.splits.items())}


def generate_synthetic(cfg: SynthConfig, path) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, samples in generate_samples(cfg).items():
        for smp in samples:
            fname = f"{smp.name}.ppm"
            write_ppm(root / "images" / fname, smp.image)
            rows.append((fname, smp.label, smp.fitzpatrick, smp.group, split))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "label", "fitzpatrick", "group", "split"])
    w.writerows(rows)
    (root / "labels.csv").write_text(buf.getvalue())
    cfg_doc = asdict(cfg)
    manifest = {"schema": DATASET_SCHEMA, "num_classes": cfg.num_classes,
                "splits": {k: int(v) for k, v in cfg.splits.items()}, "synthetic": cfg_doc}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(path, split: str | None = None, num_classes: int | None = None) -> list[Sample]:
    """Samples in labels-file order, optionally restricted to one split."""
    root = Path(path)
    labels = root / "labels.csv"
    if not labels.exists():
        raise FileNotFoundError(f"missing labels file: {labels}")
    mpath = root / "manifest.json"
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"{mpath}: expected schema {DATASET_SCHEMA}, found {manifest.get('schema')!r}")
        if num_classes is None:
            num_classes = manifest.get("num_classes")
    out = []
    with labels.open(newline="") as f:
        reader = csv.DictReader(f)
        missing = {"image", "label"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{labels}: missing columns {sorted(missing)}")
        for row in reader:
            if split is not None and row.get("split", split) != split:
                continue
            img_path = root / "images" / row["image"]
            if not img_path.exists():
                raise FileNotFoundError(f"missing image file: {img_path}")
            label = int(row["label"])
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ValueError(f"{row['image']}: label {label} out of range")
            fitz = int(row["fitzpatrick"]) if row.get("fitzpatrick") else None
            if row.get("group"):
                group = int(row["group"])
            elif fitz is not None:
                group = fitzpatrick_group(fitz)
            else:
                raise ValueError(f"{row['image']}: needs a Fitzpatrick type or a group")
            out.append(Sample(read_ppm(img_path), label, group, fitz, row["image"]))
    return out


# ---------------------------------------------------------------- model files

def save_model(model: ModelSpec, path) -> Path:
    validate(model)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    nodes, chunks = [], []
    offset = 0
    for n in model.nodes:
        params = []
        for key, shape in n.params.items():
            arr = np.ascontiguousarray(model.w(n, key).data, dtype="<f4")
            params.append({"key": key, "shape": list(shape), "offset": offset, "length": arr.nbytes})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        nodes.append({"kind": n.kind, "name": n.name, "hyper": n.hyper, "params": params})
    manifest = {"schema": MODEL_SCHEMA, "arch": model.arch, "input_shape": list(model.input_shape),
                "num_classes": model.num_classes, "nodes": nodes, "meta": model.meta,
                "blob": {"file": "weights.bin", "bytes": offset, "dtype": "float32-le"}}
    (root / "weights.bin").write_bytes(b"".join(chunks))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"missing model manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema") != MODEL_SCHEMA:
        raise ValueError(f"{mpath}: expected schema {MODEL_SCHEMA}, found {manifest.get('schema')!r}")
    return manifest


def load_model(path) -> ModelSpec:
    root = Path(path)
    manifest = read_manifest(root)
    blob = (root / manifest["blob"]["file"]).read_bytes()
    if len(blob) != manifest["blob"]["bytes"]:
        raise ValueError(f"{root}: blob has {len(blob)} bytes, manifest says {manifest['blob']['bytes']}")
    nodes, weights = [], {}
    expect = 0
    for nd in manifest["nodes"]:
        node = LayerNode(nd["kind"], nd["name"], nd["hyper"], {})
        for p in nd["params"]:
            shape = tuple(p["shape"])
            length = int(np.prod(shape)) * 4
            if p["offset"] != expect or p["length"] != length:
                raise ValueError(f"{node.pname(p['key'])}: offset/length mismatch")
            arr = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=p["offset"])
            weights[node.pname(p["key"])] = Tensor(arr.reshape(shape).astype(np.float32), requires_grad=True)
            node.params[p["key"]] = shape
            expect += length
        nodes.append(node)
    if expect != len(blob):
        raise ValueError(f"{root}: blob size mismatch")
    model = ModelSpec(manifest["arch"], nodes, tuple(manifest["input_shape"]), manifest["num_classes"],
                      weights, manifest.get("meta", {}))
    validate(model)
    return model


# ---------------------------------------------------------------- predictions

PRED_COLUMNS = ["true", "pred", "group"]


def write_predictions(records: Iterable, path) -> None:
    recs = list(records)
    with_fitz = any(len(r) > 3 and r[3] is not None for r in recs)
    buf = io.StringIO()
    buf.write(f"# schema: {PRED_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRED_COLUMNS + (["fitzpatrick"] if with_fitz else []))
    for r in recs:
        row = [int(r[0]), int(r[1]), int(r[2])]
        if with_fitz:
            row.append("" if len(r) < 4 or r[3] is None else int(r[3]))
        w.writerow(row)
    Path(path).write_text(buf.getvalue())


def read_predictions(path) -> list[EvalRecord]:
    lines = Path(path).read_text().splitlines()
    if lines and lines[0].startswith("#"):
        tag = lines[0].lstrip("#").strip()
        if tag != f"schema: {PRED_SCHEMA}":
            raise ValueError(f"{path}: unsupported predictions schema {tag!r}")
        lines = lines[1:]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or header[:3] != PRED_COLUMNS or header[3:] not in ([], ["fitzpatrick"]):
        raise ValueError(f"{path}: header must be true,pred,group[,fitzpatrick], got {header}")
    out = []
    for i, row in enumerate(reader, start=2):
        if not row:
            continue
        t, p, g = int(row[0]), int(row[1]), int(row[2])
        if g not in (0, 1):
            raise ValueError(f"{path}:{i}: group must be 0 or 1, got {g}")
        fitz = int(row[3]) if len(row) > 3 and row[3] != "" else None
        out.append(EvalRecord(t, p, g, fitz))
    return out
