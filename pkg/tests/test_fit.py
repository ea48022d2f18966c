import numpy as np
import pytest

from inffor import nn
from inffor.data import Dataset
from inffor.errors import ConfigError
from inffor.fit import TargetReport, TargetScore, cross_class_scores, identify_targets, two_phase_identify
from inffor.influence import GAS
from inffor.trainer import Checkpoint, CheckpointStore


def planted_attack(seed=0):
    """Quadratic-loss harness: 20 training points sit next to the target, 200 are random.

    Gradients are theta - x, so the adversarial points' gradients are nearly
    parallel to the target's at every checkpoint.
    """
    r = np.random.default_rng(seed)
    d = 10
    spec = nn.ModelSpec("quadratic", d, 2)
    x_target = 4.0 * r.normal(size=d)
    adv = x_target + 0.01 * r.normal(size=(20, d))
    clean = r.normal(size=(200, d))
    X = np.vstack([clean, adv])
    flags = np.r_[np.zeros(200, bool), np.ones(20, bool)]
    ds = Dataset(X, np.zeros(220, int), np.arange(220), flags, 2)
    thetas = [0.01 * r.normal(size=d) for _ in range(4)]
    store = CheckpointStore(spec, [Checkpoint(t, 0.1, th) for t, th in enumerate(thetas)], thetas[-1], 10)
    test_X = np.vstack([r.normal(size=(49, d)), x_target])
    test_ids = np.arange(1000, 1050)
    return store, ds, test_X, test_ids


def test_planted_target_is_heaviest():
    store, ds, X, ids = planted_attack()
    report = identify_targets(store, ds, X, ids, GAS, kappa=5, per_class=False)
    h = report.heaviness(ids)
    assert report.entries[0].test_id == 1049
    assert h[-1] > np.max(h[:-1])
    assert all(i >= 200 for i in report.entries[0].top_ids)


def test_single_instance_gets_rank_one(blobs_run):
    bundle, _, _, store, _ = blobs_run
    report = identify_targets(store, bundle.train, bundle.test.X[:1], [77], GAS, kappa=3)
    assert report.entries[0].rank == 1 and report.entries[0].test_id == 77


def test_duplicates_tie_toward_smaller_id(blobs_run):
    bundle, _, _, store, _ = blobs_run
    x = bundle.test.X[0]
    X = np.vstack([x, bundle.test.X[1], x])
    report = identify_targets(store, bundle.train, X, [9, 5, 3], GAS, kappa=3, per_class=False)
    by = report.by_id()
    assert by[9].tail_heaviness == by[3].tail_heaviness
    order = [e.test_id for e in report.entries]
    assert abs(order.index(3) - order.index(9)) == 1 and order.index(3) < order.index(9)


def test_ranks_restart_per_class(mlp_run):
    bundle, _, _, store, _ = mlp_run
    report = identify_targets(store, bundle.train, bundle.test.X, bundle.test.ids, GAS, kappa=2)
    for label in {e.predicted_label for e in report.entries}:
        ranks = [e.rank for e in report.entries if e.predicted_label == label]
        assert ranks == list(range(1, len(ranks) + 1))


def test_kappa_too_large(blobs_run):
    bundle, _, _, store, _ = blobs_run
    with pytest.raises(ConfigError, match="kappa"):
        identify_targets(store, bundle.train, bundle.test.X[:1], [1], GAS, kappa=1000)
    with pytest.raises(ConfigError, match="kappa"):
        identify_targets(store, bundle.train, bundle.test.X[:1], [1], GAS, kappa=0)


def test_two_phase_with_everything_kept_is_identical():
    store, ds, X, ids = planted_attack()
    full = identify_targets(store, ds, X, ids, GAS, 5, per_class=False)
    all_its = store.iterations
    for coarse, rho in ((all_its[:1], 1.0), (all_its, 0.3)):
        two = two_phase_identify(store, ds, X, ids, coarse, rho, GAS, 5, per_class=False)
        if rho == 1.0:
            assert [(e.test_id, e.tail_heaviness, e.rank) for e in two.entries] == \
                [(e.test_id, e.tail_heaviness, e.rank) for e in full.entries]
        else:
            assert [e.test_id for e in two.entries] == [e.test_id for e in full.entries]


def test_two_phase_keeps_planted_target_first():
    store, ds, X, ids = planted_attack(seed=1)
    two = two_phase_identify(store, ds, X, ids, store.iterations[:1], 0.1, GAS, 5, per_class=False)
    assert two.entries[0].test_id == 1049 and two.entries[0].phase == 2
    assert sum(e.phase == 2 for e in two.entries) == 5
    assert [e.rank for e in two.entries] == list(range(1, 51))


def test_two_phase_validation():
    store, ds, X, ids = planted_attack()
    with pytest.raises(ConfigError, match="keep_fraction"):
        two_phase_identify(store, ds, X, ids, [0], 0.0, GAS, 5)
    with pytest.raises(ConfigError, match="coarse_iterations"):
        two_phase_identify(store, ds, X, ids, [], 0.5, GAS, 5)


def test_cross_class_scores_standardize_within_class():
    entries = [TargetScore(1, 0, 1.0), TargetScore(2, 0, 3.0), TargetScore(3, 0, 5.0), TargetScore(4, 1, 7.0)]
    report = TargetReport("GAS", 1, True, entries)
    s = cross_class_scores(report, [1, 2, 3, 4])
    q = 2.2219 * 2.0  # class 0: pairwise diffs {2, 2, 4}, r = 1
    np.testing.assert_allclose(s, [-2 / q, 0.0, 2 / q, 0.0])


def test_report_files(tmp_path, blobs_run):
    bundle, _, _, store, _ = blobs_run
    report = identify_targets(store, bundle.train, bundle.test.X, bundle.test.ids, GAS, kappa=3)
    report.to_csv(tmp_path / "t.csv")
    report.to_json(tmp_path / "t.json")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "test_id,pred_label,tail_heaviness,rank,estimator" and len(lines) == 11
