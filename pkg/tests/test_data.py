import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inffor import attacks
from inffor.data import Dataset, load_bundle, save_bundle
from inffor.errors import ConfigError


def _bundle():
    clean = attacks.make_clean_dataset(attacks.DataSpec("grid_images", 2, n=60, n_test=30), 0)
    return attacks.backdoor_attack(clean, attacks.TriggerSpec("four_pixel", 2.0), 0.05, 0, 1, 1, n_targets=4)


def test_bundle_round_trip_is_exact(tmp_path):
    b = _bundle()
    save_bundle(b, tmp_path)
    again = load_bundle(tmp_path)
    for a, c in ((b.train, again.train), (b.test, again.test)):
        assert np.array_equal(a.X, c.X) and np.array_equal(a.y, c.y)
        assert np.array_equal(a.ids, c.ids) and np.array_equal(a.is_adversarial, c.is_adversarial)
    assert np.array_equal(b.targets.X, again.targets.X) and np.array_equal(b.targets.y_adv, again.targets.y_adv)
    assert again.descriptor == json.loads(json.dumps(b.descriptor))


def test_saving_twice_is_byte_identical(tmp_path):
    b = _bundle()
    save_bundle(b, tmp_path / "a")
    save_bundle(b, tmp_path / "b")
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_manifest_contents(tmp_path):
    save_bundle(_bundle(), tmp_path)
    m = json.loads((tmp_path / "dataset.json").read_text())
    assert (m["n"], m["dim"], m["classes"]) == (60, 64, 2)
    assert m["attack"]["kind"] == "backdoor"
    assert (tmp_path / "train.bin").stat().st_size == 60 * 64 * 8


def test_truncated_matrix_is_reported(tmp_path):
    save_bundle(_bundle(), tmp_path)
    p = tmp_path / "test.bin"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="test.bin"):
        load_bundle(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigError, match="dataset.json"):
        load_bundle(tmp_path)


def test_lookup_and_analysis_order():
    b = _bundle()
    X, ids = b.analysis_set()
    assert ids[:4].tolist() == b.targets.ids.tolist()
    np.testing.assert_array_equal(b.lookup(ids[5]), X[5])
    with pytest.raises(ConfigError, match="test_id"):
        b.lookup(0)


@given(st.lists(st.integers(0, 29), unique=True, max_size=30))
@settings(max_examples=50, deadline=None)
def test_without_ids_keeps_order(drop):
    ds = Dataset.from_arrays(np.arange(60.0).reshape(30, 2), np.arange(30) % 2, 2, start_id=100)
    kept = ds.without_ids([100 + d for d in drop])
    assert len(kept) == 30 - len(drop)
    assert np.all(np.diff(kept.ids) > 0)
    assert not set(kept.ids.tolist()) & {100 + d for d in drop}
