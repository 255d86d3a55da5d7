"""Run configuration and the desk-scale pipeline steps.

The CLI, the experiment scripts and the acceptance suite all go through these
functions so the three agree on recipes. A run config is a JSON document with
top-level ``seed``/``arch``/``mode``/``pattern`` keys and override sections
(``synth``, ``vgg``, ``vit``, ``train``, ``finetune``, ``interim``) layered on
the desk defaults below.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cost import count_flops, count_params
from .data import Sample, SynthConfig, generate_samples, stack
from .fairness import EvalRecord, evaluation_document
from .models import ModelSpec, VGGConfig, VitConfig, build_vgg, build_vit, predict
from .prune_cnn import prune_filters, select_keep_channels
from .prune_vit import PATTERNS, apply_pattern
from .skew import SkewnessReport, collect_skewness
from .trainer import TrainConfig, TrainLog, finetune, train

CONFIG_SCHEMA = "skewprune.config/1"

# Desk budgets; the full-scale recipes stay reachable through the sections.
DESK_RECIPES = {
    "vgg": {"train": {"max_epochs": 20},
            "finetune": {"max_epochs": 15, "lr": 3e-3},
            "interim": {"max_epochs": 5, "lr": 3e-3}},
    "vit": {"train": {"lr": 1e-3, "max_epochs": 30},
            "finetune": {"lr": 3e-4, "max_epochs": 10, "warmup_epochs": 1},
            "interim": {"lr": 3e-4, "max_epochs": 5, "warmup_epochs": 1}},
}
STAGES = ("train", "finetune", "interim")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    arch: str = "vgg"
    mode: str = "block"
    pattern: int = 6
    analyze_split: str = "val"
    eval_split: str = "test"
    batch_size: int = 64
    synth: dict = field(default_factory=lambda: {"rho": 0.6})
    vgg: dict = field(default_factory=dict)
    vit: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    interim: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ("vgg", "vit"):
            raise ConfigError(f"arch must be vgg or vit, got {self.arch!r}")
        if self.mode not in ("strict", "block"):
            raise ConfigError(f"mode must be strict or block, got {self.mode!r}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be 1-6, got {self.pattern!r}")
        try:                                    # fail on bad sections before any work
            self.synth_config()
            self.model_config()
            for stage in STAGES:
                self.train_config(stage)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"expected config schema {CONFIG_SCHEMA}, found {schema!r}")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {"schema": CONFIG_SCHEMA, **asdict(self)}

    def replace(self, **kw) -> "RunConfig":
        doc = asdict(self)
        doc.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig(**doc)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**{**self.synth, "seed": self.seed})

    def model_config(self, num_classes: int | None = None, image_size: int | None = None):
        kw = dict(self.vgg if self.arch == "vgg" else self.vit)
        if num_classes is not None:
            kw["num_classes"] = num_classes
        if image_size is not None:
            kw["image_size"] = image_size
        if self.arch == "vgg":
            for key in ("blocks", "classifier"):
                if key in kw:
                    kw[key] = tuple(tuple(b) if isinstance(b, (list, tuple)) else b for b in kw[key])
            return VGGConfig(**kw)
        return VitConfig(**kw)

    def train_config(self, stage: str = "train") -> TrainConfig:
        base = TrainConfig.vgg_recipe if self.arch == "vgg" else TrainConfig.vit_recipe
        over = {**DESK_RECIPES[self.arch][stage], **getattr(self, stage), "seed": self.seed}
        if "betas" in over:
            over["betas"] = tuple(over["betas"])
        return base(**over)


# ---------------------------------------------------------------- steps

def arrays(samples: Sequence[Sample]):
    x, y, g = stack(samples)
    fitz = [s.fitzpatrick for s in samples]
    return x, y, g, fitz


def build_model(cfg: RunConfig, num_classes: int, image_size: int) -> ModelSpec:
    mcfg = cfg.model_config(num_classes, image_size)
    return (build_vgg if cfg.arch == "vgg" else build_vit)(mcfg, seed=cfg.seed)


def train_model(cfg: RunConfig, train_split, val_split, num_classes: int) -> tuple[ModelSpec, TrainLog]:
    model = build_model(cfg, num_classes, train_split[0].shape[-1])
    model, log = train(model, train_split[:2], val_split[:2], cfg.train_config("train"))
    model.meta["best_epoch"] = log.best_epoch
    return model, log


def analysis_kinds(model: ModelSpec) -> list[str]:
    return ["pool"] if model.arch == "vgg" else ["patch", "mid", "head"]


def analyze(model: ModelSpec, images: np.ndarray, batch_size: int = 64) -> list[SkewnessReport]:
    return [r for kind in analysis_kinds(model)
            for r in collect_skewness(model, images, kind, batch_size=batch_size)]


def prune(cfg: RunConfig, model: ModelSpec, images: np.ndarray | None,
          reports: Sequence[SkewnessReport] | None = None, interim_data=None) -> tuple[ModelSpec, dict]:
    """Prune a VGG by ``cfg.mode`` or a ViT by ``cfg.pattern``.

    ``reports`` replaces re-collection for a VGG. ``interim_data`` is the
    ``(train, val)`` pair used by the interim training stage of the partial
    fine-tuning pattern; without it that stage is skipped.
    """
    if model.arch == "vgg":
        if reports is None:
            if images is None:
                raise ValueError("need images or skewness reports to prune")
            reports = collect_skewness(model, images, "pool", batch_size=cfg.batch_size)
        pool_reports = [r for r in reports if r.site.startswith("pool")]
        if not pool_reports:
            raise ValueError("no pool-site skewness reports for a VGG model")
        keep = {r.site: select_keep_channels(r) for r in pool_reports}
        pruned = prune_filters(model, keep, cfg.mode)
        prov = {"mode": cfg.mode, "sites": {s: {"kept": list(k.indices), "total": len(r.units)}
                                            for (s, k), r in zip(keep.items(), pool_reports)},
                "freeze": []}
        pruned.meta["provenance"] = prov
        return pruned, prov

    intermediate = None
    if interim_data is not None:
        tr, va = interim_data

        def intermediate(m):
            # the interim stage trains everything; freezing applies to the final stage only
            return finetune(m, tr[:2], va[:2], cfg.train_config("interim"), provenance={})[0]
    return apply_pattern(model, cfg.pattern, images, intermediate=intermediate, batch_size=cfg.batch_size)


def predictions(model: ModelSpec, split, batch_size: int = 64) -> list[EvalRecord]:
    x, y, g, fitz = split
    pred = predict(model, x, batch_size).argmax(1)
    return [EvalRecord(int(a), int(b), int(c), f) for a, b, c, f in zip(y, pred, g, fitz)]


# ---------------------------------------------------------------- planted-bias experiment

@dataclass
class SeedResult:
    seed: int
    arch: str
    train_accuracy: float
    vanilla: dict
    pruned: dict
    cost: dict
    sites: dict

    def metric(self, which: str, name: str) -> float:
        doc = self.vanilla if which == "vanilla" else self.pruned
        if name in ("eopp0", "eopp1", "eodd"):
            return doc["fairness"][name]
        return doc["performance"][name]

    def to_dict(self) -> dict:
        return asdict(self)


def run_planted_bias(cfg: RunConfig, control: bool = False) -> SeedResult:
    """Vanilla vs pruned+fine-tuned on a planted tone/class correlation.

    ``control`` keeps every unit (same fine-tuning budget, no pruning), which
    separates the effect of pruning from that of extra training.
    """
    data = generate_samples(cfg.synth_config())
    tr, va, te = (arrays(data[k]) for k in ("train", "val", "test"))
    vanilla, _ = train_model(cfg, tr, va, cfg.synth_config().num_classes)
    train_acc = float(np.mean(predict(vanilla, tr[0]).argmax(1) == tr[1]))
    if control:
        pruned, prov = vanilla.copy(), {"sites": {}}
    else:
        pruned, prov = prune(cfg, vanilla, va[0], interim_data=(tr, va))
    if cfg.arch == "vgg" or PATTERNS[cfg.pattern].fine_tune != "none":
        pruned, _ = finetune(pruned, tr[:2], va[:2], cfg.train_config("finetune"), provenance=prov)
    nc = vanilla.num_classes
    v_doc = evaluation_document(predictions(vanilla, te), nc)
    p_doc = evaluation_document(predictions(pruned, te), nc)
    cost = {"flops": [count_flops(vanilla), count_flops(pruned)],
            "params": [count_params(vanilla), count_params(pruned)]}
    sites = {s: len(v["kept"]) for s, v in prov["sites"].items()}
    return SeedResult(cfg.seed, cfg.arch, train_acc, v_doc, p_doc, cost, sites)


@dataclass
class PlantedBiasSummary:
    results: list[SeedResult]

    def improved(self, name: str) -> list[bool]:
        return [r.metric("pruned", name) < r.metric("vanilla", name) for r in self.results]

    @property
    def both_improved(self) -> int:
        return sum(a and b for a, b in zip(self.improved("eopp1"), self.improved("eodd")))

    @property
    def f1_drops(self) -> list[float]:
        return [r.metric("vanilla", "f1") - r.metric("pruned", "f1") for r in self.results]

    @property
    def mean_f1_drop(self) -> float:
        return float(np.mean(self.f1_drops))

    @property
    def flops_decrease(self) -> bool:
        return all(r.cost["flops"][1] < r.cost["flops"][0] for r in self.results)

    def table(self) -> str:
        head = f"{'seed':>4} {'train':>6} {'EOpp1':>13} {'EOdd':>13} {'F1':>13} {'GFLOPs':>15}  kept"
        rows = [head]
        for r in self.results:
            def pair(name):
                return f"{r.metric('vanilla', name):.3f}->{r.metric('pruned', name):.3f}"
            fl = r.cost["flops"]
            rows.append(f"{r.seed:>4} {r.train_accuracy:>6.3f} {pair('eopp1'):>13} {pair('eodd'):>13} "
                        f"{pair('f1'):>13} {fl[0] / 1e9:.4f}->{fl[1] / 1e9:.4f}  {r.sites}")
        rows.append(f"both improved in {self.both_improved}/{len(self.results)} seeds; "
                    f"mean F1 drop {self.mean_f1_drop:+.4f}; FLOPs decrease: {self.flops_decrease}")
        return "\n".join(rows)


def planted_bias(arch: str, seeds: Sequence[int] = (0, 1, 2, 3, 4), control: bool = False,
                 **overrides) -> PlantedBiasSummary:
    pattern = overrides.pop("pattern", 6)
    results = [run_planted_bias(RunConfig(seed=s, arch=arch, pattern=pattern, **overrides), control)
               for s in seeds]
    return PlantedBiasSummary(results)
