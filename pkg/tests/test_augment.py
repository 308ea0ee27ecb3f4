import numpy as np
import pytest

from rainforge.attack import AttackConfig
from rainforge.augment import (
    AugmentConfig, Provenance, augment_dataset, augment_pair, mix_layers, replay_pair, sample_weights,
)
from rainforge.errors import InvalidArgumentError
from rainforge.imageio import encode_png, read_image, read_manifest, write_image, write_manifest
from rainforge.rain import Bounds
from rainforge.victim import ToyClassifier, ToyDetector


@pytest.fixture(scope="module")
def model():
    return ToyClassifier.init(seed=0)


def _pair(seed, shape=(32, 32, 3)):
    rng = np.random.default_rng(seed)
    clean = rng.uniform(0.1, 0.6, shape).astype(np.float32)
    rainy = np.clip(clean + rng.uniform(0, 0.3, shape), 0, 1).astype(np.float32)
    return clean, rainy


def _cfg(**kw):
    kw.setdefault("attack", AttackConfig(iterations=2))
    return AugmentConfig(**kw)


# -- mixing weights ----------------------------------------------------------------


@pytest.mark.parametrize("k", [2, 3, 5])
def test_weights_simplex_and_mean(k):
    rng = np.random.default_rng(k)
    w = np.stack([sample_weights(k, 1.0, rng) for _ in range(10_000)])
    assert np.all(w >= 0)
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-6
    # symmetric Dirichlet(1): var of one component = (1/k)(1 - 1/k) / (k + 1)
    sigma = np.sqrt((1 / k) * (1 - 1 / k) / (k + 1) / len(w))
    assert np.all(np.abs(w.mean(axis=0) - 1 / k) < 3 * sigma)


def test_single_layer_weight_is_one():
    for s in range(100):
        assert sample_weights(1, 0.3, s).tolist() == [1.0]


@pytest.mark.parametrize("kw", [{"k": 0}, {"dirichlet_alpha": 0.0}, {"base_choice_prob": 1.5}, {"multiplier": 0}])
def test_config_validation(kw):
    with pytest.raises(InvalidArgumentError):
        AugmentConfig(**kw)


def test_mix_zero_layers_is_identity():
    base = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    zeros = [np.zeros((8, 8, 1), np.float32)] * 3
    np.testing.assert_array_equal(mix_layers(base, zeros, [0.2, 0.3, 0.5]), base)


# -- augment_pair ---------------------------------------------------------------------


def test_k1_is_plain_composite(model):
    clean, rainy = _pair(0)
    out = augment_pair(clean, rainy, model, _cfg(k=1), item_id=4)
    assert out.provenance.weights.tolist() == [1.0]
    base = rainy if out.provenance.base == "rainy" else clean
    expected = np.clip(base + out.layers[0], 0, 1)
    np.testing.assert_array_equal(out.augmented, expected)


def test_zero_kernel_budget_returns_base(model):
    clean, rainy = _pair(1)
    cfg = _cfg(attack=AttackConfig(iterations=2, bounds=Bounds(eps_k=0.0)))
    for copy in range(4):
        out = augment_pair(clean, rainy, model, cfg, copy=copy)
        base = rainy if out.provenance.base == "rainy" else clean
        np.testing.assert_array_equal(out.augmented, base)


def test_provenance_replay_bit_exact(model):
    clean, rainy = _pair(2)
    cfg = _cfg(k=3, seed=11)
    out = augment_pair(clean, rainy, model, cfg, item_id="img_7", copy=1)
    assert abs(out.provenance.weights.sum() - 1) < 1e-6
    again = replay_pair(clean, rainy, model, cfg, out.provenance)
    assert np.abs(again - out.augmented).max() == 0


def test_rain_only_brightens(model):
    for s in range(3):
        clean, rainy = _pair(10 + s)
        out = augment_pair(clean, rainy, model, _cfg(), item_id=s)
        base = rainy if out.provenance.base == "rainy" else clean
        assert np.all(out.augmented >= base)
        assert all(np.all(layer >= 0) for layer in out.layers)


def test_distinct_layers_differ(model):
    clean, rainy = _pair(3)
    out = augment_pair(clean, rainy, model, _cfg(k=3))
    a, b, c = out.layers
    assert np.any(a != b) and np.any(b != c) and np.any(a != c)
    assert len(set(out.provenance.layer_seeds)) == 3


def test_base_choice_extremes(model):
    clean, rainy = _pair(4)
    assert augment_pair(clean, rainy, model, _cfg(base_choice_prob=0.0)).provenance.base == "clean"
    assert augment_pair(clean, rainy, model, _cfg(base_choice_prob=1.0)).provenance.base == "rainy"


def test_shape_mismatch(model):
    clean, _ = _pair(5)
    with pytest.raises(InvalidArgumentError):
        augment_pair(clean, clean[:30], model, _cfg())


def test_larger_images_and_detector():
    det = ToyDetector.init(seed=1)
    clean, rainy = _pair(6, shape=(40, 48, 3))
    out = augment_pair(clean, rainy, det, _cfg(k=2))
    assert out.augmented.shape == (40, 48, 3)
    assert isinstance(out.provenance.target, list)
    np.testing.assert_array_equal(replay_pair(clean, rainy, det, _cfg(k=2), out.provenance), out.augmented)


# -- dataset driver -------------------------------------------------------------------


def _dataset(tmp_path, n):
    rows = []
    for i in range(n):
        clean, rainy = _pair(100 + i)
        write_image(tmp_path / "src" / f"c{i}.png", clean)
        write_image(tmp_path / "src" / f"r{i}.png", rainy)
        rows.append({"id": f"p{i}", "clean": f"src/c{i}.png", "rainy": f"src/r{i}.png"})
    write_manifest(tmp_path / "pairs.tsv", ("id", "clean", "rainy"), rows)
    return tmp_path / "pairs.tsv"


def _provenance(row, target):
    weights = np.array([float(w) for w in row["weights"].split(",")])
    seeds = [tuple(int(v) for v in s.split(":")) for s in row["seeds"].split(",")]
    return Provenance(weights, seeds, row["base"], target)


def test_empty_manifest(tmp_path, model):
    manifest = _dataset(tmp_path, 0)
    res = augment_dataset(manifest, model, _cfg(), tmp_path / "out")
    assert res.rows == [] and res.errors == []
    assert read_manifest(tmp_path / "out" / "manifest.tsv").rows == []


def test_multiplier_resume_and_replay(tmp_path, model):
    from rainforge.augment import pseudo_target

    manifest = _dataset(tmp_path, 10)
    cfg = _cfg(multiplier=2, seed=3)
    out = tmp_path / "out"
    res = augment_dataset(manifest, model, cfg, out)
    assert len(res.rows) == 20 and not res.errors
    assert len({r["id"] for r in res.rows}) == 20
    first = {r["id"]: (out / r["augmented"]).read_bytes() for r in res.rows}

    for row in res.rows[:3]:
        clean, rainy = read_image(row["clean"]), read_image(row["rainy"])
        prov = _provenance(row, pseudo_target(model, clean))
        assert encode_png(replay_pair(clean, rainy, model, cfg, prov)) == first[row["id"]]

    deleted = [r["id"] for r in res.rows[::2]]
    for i in deleted:
        (out / "images" / f"{i}.png").unlink()
    res2 = augment_dataset(manifest, model, cfg, out)
    assert res2.generated == deleted
    assert len(res2.skipped) == 10
    assert {r["id"]: (out / r["augmented"]).read_bytes() for r in res2.rows} == first
    assert read_manifest(out / "manifest.tsv").rows == res.rows


def test_per_item_errors_do_not_abort(tmp_path, model):
    manifest = _dataset(tmp_path, 4)
    (tmp_path / "src" / "c1.png").unlink()
    write_image(tmp_path / "src" / "r2.png", np.zeros((16, 16, 3)))
    res = augment_dataset(manifest, model, _cfg(), tmp_path / "out")
    assert [r["id"] for r in res.rows] == ["p0_0", "p3_0"]
    assert sorted(i for i, _ in res.errors) == ["p1_0", "p2_0"]
    assert len(read_manifest(tmp_path / "out" / "errors.tsv").rows) == 2


def test_workers_do_not_change_output(tmp_path, model):
    manifest = _dataset(tmp_path, 4)
    a = augment_dataset(manifest, model, _cfg(), tmp_path / "a", workers=1)
    b = augment_dataset(manifest, model, _cfg(), tmp_path / "b", workers=2)
    assert a.rows == b.rows
    for r in a.rows:
        assert (tmp_path / "a" / r["augmented"]).read_bytes() == (tmp_path / "b" / r["augmented"]).read_bytes()
