"""Skewness and median statistics over activation maps."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import ModelSpec, forward_with_taps, tap_sites
from .tensor import no_grad

ZERO_VARIANCE = 1e-12
SCHEMA = "skewprune.skewness/1"


def skewness(values) -> float:
    """Population Fisher-Pearson coefficient g1 = m3 / m2**1.5.

    Returns 0.0 for (near) constant input, m2 < 1e-12.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("skewness of an empty sequence")
    d = x - x.mean()
    m2 = float(np.mean(d * d))
    if m2 < ZERO_VARIANCE:
        return 0.0
    m3 = float(np.mean(d * d * d))
    return m3 / m2 ** 1.5


def skewness_rows(arr: np.ndarray) -> np.ndarray:
    """Row-wise g1 of a 2-D array (same conventions as :func:`skewness`)."""
    x = np.asarray(arr, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("skewness_rows expects a non-empty 2-D array")
    d = x - x.mean(axis=1, keepdims=True)
    d2 = d * d
    m2 = d2.mean(axis=1)
    m3 = (d2 * d).mean(axis=1)
    out = np.zeros(len(x))
    ok = m2 >= ZERO_VARIANCE
    out[ok] = m3[ok] / m2[ok] ** 1.5
    return out


def median(values) -> float:
    vals = sorted(float(v) for v in values)
    if not vals:
        raise ValueError("median of an empty sequence")
    mid = len(vals) // 2
    if len(vals) % 2:
        return vals[mid]
    return (vals[mid - 1] + vals[mid]) / 2.0


@dataclass
class SkewnessReport:
    site: str
    units: list[int]          # unit id per row: channel position or original head id
    values: np.ndarray        # (U, N) per-unit, per-sample skewness

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.units) != self.values.shape[0]:
            raise ValueError("values must be (units, samples)")
        if not np.isfinite(self.values).all():
            raise ValueError(f"{self.site}: non-finite skewness values")

    @property
    def medians(self) -> np.ndarray:
        return np.median(self.values, axis=1)

    def to_dict(self, include_values: bool = True) -> dict:
        d = {"site": self.site, "units": list(self.units), "medians": self.medians.tolist()}
        if include_values:
            d["values"] = self.values.tolist()
        return d


def _unit_maps(rec) -> np.ndarray:
    """Per-sample, per-unit flattened maps as (N, U, L)."""
    v = rec.values
    if rec.kind in ("feature", "attention"):
        return v.reshape(v.shape[0], v.shape[1], -1)
    if rec.kind == "tokens":
        return v.transpose(0, 2, 1)
    raise ValueError(f"unsupported tap kind {rec.kind!r}")


def collect_skewness(model: ModelSpec, images: np.ndarray, kind: str,
                     sites: Sequence[str] | None = None, batch_size: int = 64) -> list[SkewnessReport]:
    """Per-sample skewness of every unit's flattened map at each site of ``kind``.

    ``kind`` is ``pool`` (post-pool feature maps), ``patch`` (patch-embedding
    conv output), ``head`` (post-softmax attention maps) or ``mid`` (encoder
    token stream). Reports come back ordered by site, rows by unit, columns by
    sample in dataset order.
    """
    if len(images) == 0:
        raise ValueError("collect_skewness needs a non-empty dataset")
    sites = list(sites) if sites is not None else tap_sites(model, kind)
    if not sites:
        raise ValueError(f"model has no {kind} sites")
    chunks: dict[str, list[np.ndarray]] = {s: [] for s in sites}
    units: dict[str, list[int]] = {}
    with no_grad():
        for i in range(0, len(images), batch_size):
            _, taps = forward_with_taps(model, images[i:i + batch_size], sites)
            for s in sites:
                rec = taps[s]
                if rec is None:
                    raise RuntimeError(f"tap {s} produced no data")
                maps = _unit_maps(rec)
                n, u, l = maps.shape
                chunks[s].append(skewness_rows(maps.reshape(n * u, l)).reshape(n, u))
                units[s] = rec.units
    return [SkewnessReport(s, units[s], np.concatenate(chunks[s], axis=0).T) for s in sites]


def save_reports(reports: Sequence[SkewnessReport], path, include_values: bool = True) -> None:
    doc = {"schema": SCHEMA, "reports": [r.to_dict(include_values) for r in reports]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_reports(path) -> list[SkewnessReport]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"{path}: expected schema {SCHEMA}, found {doc.get('schema')!r}")
    out = []
    for r in doc["reports"]:
        if "values" in r:
            vals = np.asarray(r["values"], dtype=np.float64)
        else:
            # medians-only file: a single pseudo-sample per unit keeps selection exact
            vals = np.asarray(r["medians"], dtype=np.float64)[:, None]
        out.append(SkewnessReport(r["site"], list(r["units"]), vals))
    return out
