import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skewprune.data import (SynthConfig, fitzpatrick_group, generate_samples, generate_synthetic,
                            load_dataset, load_model, read_ppm, read_predictions, save_model,
                            synth_sample, write_ppm, write_predictions)
from skewprune.fairness import EvalRecord
from skewprune.models import VGGConfig, VitConfig, build_vgg, build_vit, forward
from skewprune.prune_cnn import KeepIndexSet, prune_filters
from skewprune.prune_vit import apply_pattern
from skewprune.tensor import no_grad

SMALL = dict(image_size=16, splits={"train": 30, "val": 10, "test": 12})


def chi_square(labels, groups, k):
    table = np.zeros((k, 2))
    for y, g in zip(labels, groups):
        table[y, g] += 1
    expect = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
    return float(((table - expect) ** 2 / expect).sum())


def test_fitzpatrick_grouping():
    assert [fitzpatrick_group(f) for f in range(1, 7)] == [0, 0, 0, 1, 1, 1]
    with pytest.raises(ValueError):
        fitzpatrick_group(7)


def test_sample_is_deterministic_and_in_range():
    cfg = SynthConfig(**SMALL, seed=5)
    a, b = synth_sample(cfg, 0, 3), synth_sample(cfg, 0, 3)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.image.dtype == np.float32 and a.image.shape == (3, 16, 16)
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0
    assert a.group == fitzpatrick_group(a.fitzpatrick)


def test_rho_extremes():
    k = 3
    corr = generate_samples(SynthConfig(rho=1.0, splits={"train": 300}, seed=0))["train"]
    assert all(s.label == s.group % k for s in corr)
    indep = generate_samples(SynthConfig(rho=0.0, splits={"train": 600}, seed=0))["train"]
    # chi-square, 2 degrees of freedom, 1% critical value 9.21
    assert chi_square([s.label for s in indep], [s.group for s in indep], k) < 9.21


def test_lesion_area_bound():
    with pytest.raises(ValueError, match="15%"):
        SynthConfig(lesion_axes=(0.1, 0.3))
    cfg = SynthConfig(image_size=32, pixel_noise=0.0, ambiguous=0.0, seed=1)
    for i in range(20):
        img = synth_sample(cfg, 0, i).image
        background = img[:, 0, 0]           # lesions never touch the border corner
        lesion = np.abs(img - background[:, None, None]).sum(0) > 1e-6
        assert lesion.mean() <= 0.15


def test_generate_load_round_trip(tmp_path):
    cfg = SynthConfig(**SMALL, seed=2)
    root = generate_synthetic(cfg, tmp_path / "d")
    made = generate_samples(cfg)
    for split, samples in made.items():
        loaded = load_dataset(root, split)
        assert [s.label for s in loaded] == [s.label for s in samples]
        assert [s.group for s in loaded] == [s.group for s in samples]
        assert [s.fitzpatrick for s in loaded] == [s.fitzpatrick for s in samples]
        # 8-bit storage: within half a quantisation step
        assert np.abs(loaded[0].image - samples[0].image).max() <= 0.5 / 255 + 1e-7
    names = [s.name for ss in made.values() for s in ss]
    assert len(names) == len(set(names))       # disjoint splits
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["schema"] == "skewprune.dataset/1"


def test_same_seed_byte_identical(tmp_path):
    cfg = SynthConfig(**SMALL, seed=9)
    a, b = generate_synthetic(cfg, tmp_path / "a"), generate_synthetic(cfg, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_load_errors(tmp_path):
    root = generate_synthetic(SynthConfig(**SMALL, seed=2), tmp_path / "d")
    with pytest.raises(ValueError, match="out of range"):
        load_dataset(root, "train", num_classes=1)
    victim = sorted((root / "images").iterdir())[0]
    victim.unlink()
    with pytest.raises(FileNotFoundError, match=victim.name):
        load_dataset(root)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nowhere")


def test_fitzpatrick_only_labels(tmp_path):
    img = np.zeros((3, 4, 4), np.float32)
    (tmp_path / "images").mkdir()
    write_ppm(tmp_path / "images" / "a.ppm", img)
    (tmp_path / "labels.csv").write_text("image,label,fitzpatrick\na.ppm,1,4\n")
    (s,) = load_dataset(tmp_path)
    assert s.group == 1 and s.fitzpatrick == 4 and s.label == 1


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 1000))
def test_ppm_round_trip(tmp_path_factory, h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, (3, h, w)).astype(np.float32) / 255
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(path, img)
    np.testing.assert_array_equal(read_ppm(path), img)


def test_malformed_ppm(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")
    (tmp_path / "short.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "short.ppm")


def _logits(model, x):
    with no_grad():
        return forward(model, x).data


@pytest.mark.parametrize("arch", ["vgg", "vit"])
def test_model_round_trip_bit_identical(tmp_path, arch):
    if arch == "vgg":
        model = build_vgg(VGGConfig(blocks=((4,), (6,)), classifier=(5,), image_size=16), seed=3)
    else:
        model = build_vit(VitConfig(image_size=16, patch_size=4, embed_dim=8, num_heads=2, depth=1), seed=3)
    x = np.random.default_rng(0).random((2, 3, 16, 16), dtype=np.float32)
    back = load_model(save_model(model, tmp_path / "m"))
    assert _logits(back, x).tobytes() == _logits(model, x).tobytes()


def test_pruned_metadata_survives(tmp_path):
    model = build_vgg(VGGConfig(blocks=((4,), (6,)), classifier=(5,), image_size=16), seed=3)
    pruned = prune_filters(model, {"pool0": KeepIndexSet("pool0", (0, 2))}, "block")
    back = load_model(save_model(pruned, tmp_path / "m"))
    assert back.meta["keep"]["pool0"]["indices"] == [0, 2]
    vit = build_vit(VitConfig(image_size=16, patch_size=4, embed_dim=8, num_heads=2, depth=1), seed=3)
    x = np.random.default_rng(1).random((6, 3, 16, 16), dtype=np.float32)
    pv, prov = apply_pattern(vit, 6, x)
    vback = load_model(save_model(pv, tmp_path / "v"))
    assert vback.meta["provenance"] == json.loads(json.dumps(prov))
    assert _logits(vback, x).tobytes() == _logits(pv, x).tobytes()


def test_model_file_corruption(tmp_path):
    model = build_vgg(VGGConfig(blocks=((4,),), classifier=(), image_size=8), seed=0)
    root = save_model(model, tmp_path / "m")
    blob = (root / "weights.bin").read_bytes()
    (root / "weights.bin").write_bytes(blob[:-4])
    with pytest.raises(ValueError, match="bytes"):
        load_model(root)
    (root / "weights.bin").write_bytes(blob)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["nodes"][0]["params"][0]["offset"] = 4
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="offset"):
        load_model(root)
    manifest["schema"] = "skewprune.model/0"
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="schema"):
        load_model(root)


def test_predictions_round_trip(tmp_path):
    recs = [EvalRecord(0, 1, 0, 2), EvalRecord(2, 2, 1, None), EvalRecord(1, 1, 1, 6)]
    write_predictions(recs, tmp_path / "p.csv")
    assert read_predictions(tmp_path / "p.csv") == recs
    plain = [EvalRecord(0, 0, 1), EvalRecord(1, 0, 0)]
    write_predictions(plain, tmp_path / "q.csv")
    assert read_predictions(tmp_path / "q.csv") == plain


def test_predictions_validation(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("truth,pred,group\n0,0,0\n")
    with pytest.raises(ValueError, match="header"):
        read_predictions(bad)
    bad.write_text("true,pred,group\n0,0,3\n")
    with pytest.raises(ValueError, match="group"):
        read_predictions(bad)
    bad.write_text("# schema: skewprune.predictions/7\ntrue,pred,group\n0,0,0\n")
    with pytest.raises(ValueError, match="schema"):
        read_predictions(bad)
    # files from external models may omit the schema line
    bad.write_text("true,pred,group\n0,1,1\n")
    assert read_predictions(bad) == [EvalRecord(0, 1, 1)]


def test_class_hues_are_distinct():
    from skewprune.data import class_hue
    hues = np.array([class_hue(k, 3) for k in range(3)])
    assert np.allclose(hues.sum(1), 0) and np.allclose(np.linalg.norm(hues, axis=1), 1)
    for i in range(3):
        for j in range(i + 1, 3):
            assert math.isclose(hues[i] @ hues[j], -0.5, abs_tol=1e-12)
