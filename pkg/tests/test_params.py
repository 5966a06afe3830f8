import numpy as np
import pytest

import notebench.params as pm
from notebench.errors import CheckpointMismatchError, ConfigError


def make_store():
    store = pm.ParameterStore()
    store.add("w", np.array([1.0, 2.0, 3.0]))
    store.add("frozen", np.array([[5.0, 6.0]]), trainable=False)
    return store


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        store = make_store()
        store.get("w").grad = np.zeros(3)
        pm.adam_step(store, lr=0.1)
        np.testing.assert_array_equal(store.get("w").data, [1.0, 2.0, 3.0])

    def test_first_step_closed_form(self):
        """With g=1 everywhere, bias correction gives m_hat/sqrt(v_hat)=1, so
        the first update is -lr/(1+eps)."""
        store = pm.ParameterStore()
        p = store.add("w", np.zeros(4))
        p.grad = np.ones(4)
        pm.adam_step(store, lr=0.1)
        expected = -0.1 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data, np.full(4, expected), rtol=1e-12)

    def test_frozen_parameter_never_moves(self):
        store = make_store()
        store.get("frozen").grad = np.full((1, 2), 10.0)
        store.get("w").grad = np.ones(3)
        before = store.get("frozen").data.tobytes()
        for _ in range(5):
            pm.adam_step(store, lr=0.5)
        assert store.get("frozen").data.tobytes() == before

    def test_unset_gradient_skipped(self):
        store = make_store()
        pm.adam_step(store, lr=0.1)  # no grads anywhere: no-op
        np.testing.assert_array_equal(store.get("w").data, [1.0, 2.0, 3.0])

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ConfigError):
            pm.adam_step(make_store(), lr=0.0)


class TestStore:
    def test_trainable_counts(self):
        store = make_store()
        assert store.trainable_count() == 3
        assert store.total_count() == 5
        store.set_trainable("frozen", True)
        assert store.trainable_count() == 5

    def test_duplicate_name_rejected(self):
        store = make_store()
        with pytest.raises(ConfigError):
            store.add("w", np.zeros(1))

    def test_freeze_all_clears_requires_grad(self):
        store = make_store()
        store.freeze_all()
        assert store.trainable_names() == []
        assert not store.get("w").requires_grad

    def test_snapshot_restore(self):
        store = make_store()
        snap = store.snapshot()
        store.get("w").data[...] = 99.0
        store.restore(snap)
        np.testing.assert_array_equal(store.get("w").data, [1.0, 2.0, 3.0])


class TestContainer:
    def test_round_trip_values_flags_metadata(self, tmp_path):
        store = make_store()
        path = tmp_path / "ckpt.bin"
        pm.save_store(store, path, metadata={"kind": "test", "n": 3})
        loaded, meta = pm.load_store(path)
        assert meta == {"kind": "test", "n": 3}
        assert sorted(loaded.names()) == ["frozen", "w"]
        np.testing.assert_array_equal(loaded.get("w").data, store.get("w").data)
        assert loaded.is_trainable("w") is True
        assert loaded.is_trainable("frozen") is False

    def test_scalar_parameter_round_trip(self, tmp_path):
        store = pm.ParameterStore()
        store.add("b", np.asarray(3.25))
        pm.save_store(store, tmp_path / "s.bin")
        loaded, _ = pm.load_store(tmp_path / "s.bin")
        assert loaded.get("b").data.shape == ()
        assert float(loaded.get("b").data) == 3.25

    def test_serialization_is_canonical(self):
        s1 = pm.ParameterStore()
        s1.add("b", np.ones(2))
        s1.add("a", np.zeros(3))
        s2 = pm.ParameterStore()
        s2.add("a", np.zeros(3))
        s2.add("b", np.ones(2))
        assert pm.store_to_bytes(s1) == pm.store_to_bytes(s2)

    def test_content_hash_tracks_values(self):
        store = make_store()
        h1 = pm.content_hash(store)
        store.get("w").data[0] += 1e-12
        assert pm.content_hash(store) != h1

    def test_content_hash_name_subset(self):
        store = make_store()
        assert pm.content_hash(store, ["w"]) != pm.content_hash(store)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(CheckpointMismatchError):
            pm.load_store(path)
