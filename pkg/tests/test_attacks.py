import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from inffor import attacks, nn
from inffor.errors import ConfigError
from inffor.influence import GAS, EstimatorConfig
from inffor.trainer import CheckpointStore, Checkpoint, TrainConfig, train

GRID = attacks.DataSpec("grid_images", 2, n=200, n_test=60)


def test_blobs_are_separable():
    bundle = attacks.make_clean_dataset(attacks.DataSpec(n=200, n_test=200), seed=0)
    spec = nn.ModelSpec("linear", 2, 2)
    params, _, _ = train(spec, bundle.train, TrainConfig("sgd", 0.1, batch_size=16, epochs=10))
    assert np.mean(nn.predict(spec, params, bundle.test.X) == bundle.test.y) >= 0.99


@pytest.mark.parametrize("spec", [attacks.DataSpec(n=50, n_test=10), GRID])
def test_seed_repeat_is_identical(spec):
    a = attacks.make_clean_dataset(spec, seed=7)
    b = attacks.make_clean_dataset(spec, seed=7)
    assert np.array_equal(a.train.X, b.train.X) and np.array_equal(a.test.y, b.test.y)
    assert not np.array_equal(a.train.X, attacks.make_clean_dataset(spec, seed=8).train.X)


def test_grid_shape_and_range():
    bundle = attacks.make_clean_dataset(GRID, seed=0)
    assert bundle.train.X.shape == (200, 64)
    assert bundle.train.X.min() >= 0.0 and bundle.train.X.max() <= 1.0
    assert set(bundle.test.ids.tolist()) == set(range(200, 260))


def test_grid_classes_keep_clear_of_the_trigger_corner():
    bundle = attacks.make_clean_dataset(attacks.DataSpec("grid_images", 2, n=400, noise=0.0, keepout=2.5), 1)
    corner = attacks.TriggerSpec("four_pixel")._positions()
    assert bundle.train.X[:, corner].max() < 0.2


def test_template_separation_holds():
    spec = attacks.DataSpec("grid_images", 2, keepout=2.5, min_separation=1.5, bump_width=(0.5, 0.9))
    temps = attacks._grid_templates(spec, np.random.default_rng(0))
    for i, a in enumerate(temps):
        assert (a[:, 2] >= 0.5).all() and (a[:, 2] <= 0.9).all()
        for b in temps[:i]:
            assert np.linalg.norm(a[:, None, :2] - b[None, :, :2], axis=2).min() >= 1.5


@pytest.mark.parametrize("kw,field", [({"keepout": 7.0}, "keepout"), ({"min_separation": 20.0}, "min_separation")])
def test_impossible_grid_layouts(kw, field):
    with pytest.raises(ConfigError, match=field):
        attacks.make_clean_dataset(attacks.DataSpec("grid_images", 2, n=10, n_test=2, **kw), 0)


def test_unknown_kind():
    with pytest.raises(ConfigError, match="kind"):
        attacks.make_clean_dataset(attacks.DataSpec(kind="cifar"), 0)


@pytest.fixture(scope="module")
def blobs():
    return attacks.make_clean_dataset(attacks.DataSpec(dim=5, separation=3.0, n=200, n_test=40), seed=1)


def test_group_flip_bookkeeping(blobs):
    out = attacks.group_flip_attack(blobs, 20, 1, seed=0)
    ds = out.train
    assert len(ds) == 220
    assert ds.ids[ds.is_adversarial].tolist() == list(range(240, 260))
    assert (ds.y[ds.is_adversarial] == 1).all()
    assert out.targets.ids.tolist() == list(range(260, 270))
    sigma = out.descriptor["sigma"]
    means = [blobs.train.X[blobs.train.y == c].mean(axis=0) for c in (0, 1)]
    center = np.asarray(out.descriptor["adv_center"])
    assert min(np.linalg.norm(center - m) for m in means) >= 6 * sigma


def test_group_flip_flips_the_cluster(blobs):
    out = attacks.group_flip_attack(blobs, 20, 0, seed=0, n_targets=40)
    spec = nn.ModelSpec("mlp", 5, 2, (16,), "relu", 1e-3)
    params, _, _ = train(spec, out.train, TrainConfig("adam", 0.01, batch_size=16, epochs=20))
    assert np.mean(nn.predict(spec, params, out.targets.X) == 0) >= 0.95


def test_null_group_flip(blobs):
    out = attacks.group_flip_attack(blobs, 0, 1, seed=0)
    assert np.array_equal(out.train.X, blobs.train.X) and not out.train.is_adversarial.any()
    spec = nn.ModelSpec("linear", 5, 2)
    cfg = TrainConfig("sgd", 0.1, batch_size=20, epochs=3, seed=4)
    _, s1, _ = train(spec, blobs.train, cfg)
    _, s2, _ = train(spec, out.train, cfg)
    assert s1.equals(s2)
    with pytest.raises(ConfigError, match="m"):
        attacks.group_flip_attack(blobs, -1, 1, 0)


def test_backdoor_rate_bookkeeping():
    clean = attacks.make_clean_dataset(attacks.DataSpec("grid_images", 2, n=1000, n_test=100), 0)
    trig = attacks.TriggerSpec("four_pixel", 2.0)
    out = attacks.backdoor_attack(clean, trig, 0.015, 0, 1, seed=3)
    adv = out.train.is_adversarial
    assert adv.sum() == 15
    assert (clean.train.y[adv] == 0).all() and (out.train.y[adv] == 1).all()
    lo, _ = trig.bounds()
    assert (out.train.X[adv] >= lo).all() and (out.targets.X >= lo).all()
    assert np.array_equal(out.train.X[~adv], clean.train.X[~adv])
    assert not np.isin(out.targets.ids, out.test.ids).any()
    assert (out.targets.y_targ == 0).all() and (out.targets.y_adv == 1).all()


def test_one_pixel_changes_one_feature():
    X = attacks.make_clean_dataset(GRID, 0).train.X
    trig = attacks.TriggerSpec("one_pixel", 0.9)
    d = trig.apply(X) - X
    assert np.all(np.count_nonzero(d, axis=1) <= 1) and np.all(np.flatnonzero(d.any(axis=0)) == [63])
    assert np.linalg.norm(d, axis=1).max() <= 0.9


@given(arrays(np.float64, (3, 64), elements=st.floats(-0.5, 1.5)),
       st.sampled_from(["one_pixel", "four_pixel", "blend"]), st.floats(0.1, 3.0), st.integers(0, 50))
@settings(max_examples=60, deadline=None)
def test_trigger_is_idempotent_and_within_budget(X, kind, eps, noise_seed):
    trig = attacks.TriggerSpec(kind, eps, noise_seed=noise_seed)
    once = trig.apply(X)
    assert np.array_equal(trig.apply(once), once)
    assert once.min() >= 0.0 and once.max() <= 1.0
    base = np.clip(X, 0.0, 1.0)
    assert np.all(np.linalg.norm(once - base, axis=1) <= eps + 1e-12)


def test_backdoor_errors():
    clean = attacks.make_clean_dataset(GRID, 0)
    trig = attacks.TriggerSpec()
    with pytest.raises(ConfigError, match="rate"):
        attacks.backdoor_attack(clean, trig, 0.0, 0, 1, 0)
    with pytest.raises(ConfigError, match="rate"):
        attacks.backdoor_attack(clean, trig, 0.9, 0, 1, 0)


def test_single_target_poison():
    clean = attacks.make_clean_dataset(attacks.DataSpec(dim=2, n=200, n_test=10), seed=0)
    x = clean.test.X[clean.test.y == 0][0]
    spec = nn.ModelSpec("mlp", 2, 2, (32,), "relu", 1e-3)
    cfg = TrainConfig("adam", 0.01, batch_size=16, epochs=40)
    out = attacks.single_target_poison(clean, x, 40, 1, 0.1, seed=0, y_targ=0, check=(spec, cfg))
    assert out.descriptor["success"] and out.descriptor["crafted"] is False
    assert out.train.is_adversarial.sum() == 40 and out.train.is_adversarial[-40:].all()
    none = attacks.single_target_poison(clean, x, 0, 1, 0.1, seed=0, y_targ=0, check=(spec, cfg))
    assert not none.descriptor["success"] and len(none.train) == 200


def _quadratic_pool():
    # gradient of the quadratic loss is theta - x; candidate 3 sits opposite the target
    d = 3
    spec = nn.ModelSpec("quadratic", d, 2)
    theta = np.zeros(d)
    x_t = np.array([-1.0, 0.0, 0.0])
    X = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-0.5, 0.5, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    from inffor.data import Dataset
    ds = Dataset.from_arrays(X, np.zeros(5, int), 2, ids=[10, 11, 12, 13, 14])
    store = CheckpointStore(spec, [Checkpoint(0, 0.1, theta), Checkpoint(1, 0.1, theta)], theta, 2)
    return store, ds, x_t


def test_adaptive_selection_prefers_anti_aligned():
    store, ds, x_t = _quadratic_pool()
    chosen = attacks.adaptive_seed_selection(ds.ids, store, ds, x_t, 1, GAS)
    assert chosen.tolist() == [13]
    again = attacks.adaptive_seed_selection(ds.ids, store, ds, x_t, 3, GAS)
    assert again.tolist() == attacks.adaptive_seed_selection(ds.ids, store, ds, x_t, 3, GAS).tolist()
    assert again[0] == 13
    full = attacks.adaptive_seed_selection(ds.ids, store, ds, x_t, 5, EstimatorConfig("tracincp"))
    assert sorted(full.tolist()) == ds.ids.tolist()
    with pytest.raises(ConfigError, match="pool"):
        attacks.adaptive_seed_selection(ds.ids, store, ds, x_t, 6, GAS)
