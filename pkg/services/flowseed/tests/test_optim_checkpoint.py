import json
import math

import numpy as np
import pytest

from autodiff import ParamStore
from checkpoint import BLOB_NAME, MANIFEST_NAME, load_params, save_params
from errors import ConfigurationError, NumericalError, SchemaError
from optim import adam_step, warmup_cosine_lr


def test_adam_matches_hand_recurrence():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0]))
    grads = [np.array([0.5, -1.0]), np.array([0.25, 2.0])]
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8

    w = np.array([1.0, -2.0])
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate(grads, start=1):
        store.grads["w"][:] = g
        adam_step(store, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

    assert np.allclose(store.params["w"], w, atol=1e-6)
    assert store.step == 2
    assert not store.grads["w"].any()


def test_first_adam_step_moves_by_lr():
    store = ParamStore()
    store.add("w", np.zeros(3))
    store.grads["w"][:] = [3.0, -0.01, 0.0]
    adam_step(store, 0.01)
    assert np.allclose(store.params["w"], [-0.01, 0.01, 0.0], atol=1e-6)


def test_non_finite_gradient_leaves_params_untouched():
    store = ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    store.grads["a"][:] = 1.0
    store.grads["b"][0] = math.nan
    with pytest.raises(NumericalError):
        adam_step(store, 0.1)
    assert np.array_equal(store.params["a"], np.ones(2))
    assert store.step == 0
    assert not store.state


@pytest.mark.parametrize(
    "step, expected",
    [
        (0, 0.1),
        (9, 1.0),
        (10, 1.0),
        (55, 0.5),
        (100, 0.0),
    ],
)
def test_warmup_cosine_schedule(step, expected):
    assert warmup_cosine_lr(step, 100, 1.0, warmup_fraction=0.1) == pytest.approx(expected, abs=1e-12)


def test_schedule_without_warmup_starts_at_base():
    assert warmup_cosine_lr(0, 50, 3e-4, warmup_fraction=0.0) == pytest.approx(3e-4)


class TestCheckpoint:
    def make_store(self, rng) -> ParamStore:
        store = ParamStore()
        store.add("enc.w", rng.normal(size=(4, 3)))
        store.add("enc.b", rng.normal(size=(3,)))
        store.add("head.w", rng.normal(size=(2, 5, 2)))
        store.step = 17
        return store

    def test_round_trip_is_bit_exact(self, rng, tmp_path):
        store = self.make_store(rng)
        save_params(store, tmp_path / "ckpt")
        loaded = load_params(tmp_path / "ckpt")
        assert loaded.names() == store.names()
        for name in store.names():
            assert loaded.params[name].dtype == np.float32
            assert loaded.params[name].tobytes() == store.params[name].tobytes()
        assert loaded.step == 17

    def test_blob_is_little_endian_float32(self, rng, tmp_path):
        store = self.make_store(rng)
        save_params(store, tmp_path)
        blob = (tmp_path / BLOB_NAME).read_bytes()
        assert len(blob) == 4 * store.num_parameters()
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        first = manifest["tensors"][0]
        n = int(np.prod(first["shape"]))
        values = np.frombuffer(blob, dtype="<f4", count=n, offset=first["offset"])
        assert np.array_equal(values, store.params[first["name"]].reshape(-1))

    def test_unknown_format_is_a_schema_error(self, rng, tmp_path):
        save_params(self.make_store(rng), tmp_path)
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        manifest["version"] = 99
        (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))
        with pytest.raises(SchemaError):
            load_params(tmp_path)

    def test_truncated_blob_is_a_schema_error(self, rng, tmp_path):
        save_params(self.make_store(rng), tmp_path)
        blob = (tmp_path / BLOB_NAME).read_bytes()
        (tmp_path / BLOB_NAME).write_bytes(blob[:-4])
        with pytest.raises(SchemaError):
            load_params(tmp_path)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_params(tmp_path / "nothing")


def test_zero_gradient_leaves_params_unchanged():
    store = ParamStore()
    store.add("w", np.array([0.5, -1.5]))
    adam_step(store, 0.1)
    assert np.array_equal(store.params["w"], np.array([0.5, -1.5], dtype=np.float32))


def test_quadratic_bowl_descends():
    store = ParamStore()
    store.add("w", np.array([2.0, -3.0, 1.0]))
    losses = []
    for _ in range(100):
        w = store.params["w"].astype(np.float64)
        losses.append(float(np.sum(w * w)))
        store.grads["w"][:] = 2 * w
        adam_step(store, 0.005)
    assert all(b < a for a, b in zip(losses, losses[1:]))
