import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racl.errors import CheckpointError, NumericError, ShapeError
from racl.gradcheck import check_head_input_gradient, numeric_grad, relative_error
from racl.model import (
    Checkpoint,
    OptimizerState,
    adam_step,
    average_checkpoints,
    averaging_window,
    backward,
    checkpoint_digest,
    deserialize_checkpoint,
    forward,
    init_head,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    serialize_checkpoint,
)


@pytest.fixture
def head():
    return init_head(5, 6, 4, np.random.default_rng(0))


class TestForward:
    def test_zero_input_zero_biases(self, head):
        logits, emb, _ = forward(np.zeros((7, 5)), head)
        assert not logits.any() and not emb.any()
        assert logits.shape == (2,) and emb.shape == (4,)

    def test_attention_shift_invariance(self, head):
        x = np.random.default_rng(1).normal(size=(7, 5))
        shifted = dict(head, att_b=head["att_b"] + 3.0)
        _, _, t1 = forward(x, head)
        _, _, t2 = forward(x, shifted)
        np.testing.assert_allclose(t1.attn, t2.attn, rtol=1e-13)

    def test_attention_sums_to_one_over_time(self, head):
        _, _, tape = forward(np.random.default_rng(2).normal(size=(3, 7, 5)), head)
        np.testing.assert_allclose(tape.attn.sum(axis=1), 1.0, rtol=1e-14)

    def test_deterministic(self, head):
        x = np.random.default_rng(3).normal(size=(7, 5))
        a, b = forward(x, head), forward(x, head)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_batch_matches_single(self, head):
        x = np.random.default_rng(4).normal(size=(3, 7, 5))
        logits, emb, _ = forward(x, head)
        for i in range(3):
            l1, e1, _ = forward(x[i], head)
            np.testing.assert_allclose(logits[i], l1, rtol=1e-13)
            np.testing.assert_allclose(emb[i], e1, rtol=1e-13)

    def test_non_finite_input(self, head):
        x = np.zeros((3, 5))
        x[1, 2] = np.nan
        with pytest.raises(NumericError):
            forward(x, head)


class TestBackward:
    def test_zero_upstream(self, head):
        _, _, tape = forward(np.random.default_rng(5).normal(size=(2, 7, 5)), head)
        grads, gx = backward(tape, head, np.zeros((2, 2)), np.zeros((2, 4)))
        assert all(not g.any() for g in grads.values()) and not gx.any()
        assert set(grads) == set(head)

    def test_parameter_gradients(self, head):
        rng = np.random.default_rng(6)
        params = {k: v + rng.normal(0, 0.1, v.shape) for k, v in head.items()}
        x = rng.normal(size=(3, 7, 5))
        gl, ge = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))

        def f(p):
            logits, emb, _ = forward(x, p)
            return float(np.sum(logits * gl) + np.sum(emb * ge))

        _, _, tape = forward(x, params)
        analytic, _ = backward(tape, params, gl, ge)
        numeric = numeric_grad(f, {k: v.copy() for k, v in params.items()})
        for k in params:
            assert relative_error(analytic[k], numeric[k]) < 1e-4, k

    def test_input_gradient(self):
        assert check_head_input_gradient(np.random.default_rng(7)) < 1e-4

    def test_shape_mismatch(self, head):
        _, _, tape = forward(np.zeros((1, 7, 5)), head)
        with pytest.raises(ShapeError):
            backward(tape, head, np.zeros((1, 3)), np.zeros((1, 4)))


class TestAdam:
    def test_first_step(self):
        st_ = OptimizerState(weight_decay=0.0)
        p = {"x": np.zeros(3)}
        adam_step(st_, p, {"x": np.ones(3)}, 5e-4)
        np.testing.assert_allclose(p["x"], -5e-4 / (1 + 1e-8), rtol=1e-15)
        assert p["x"][0] == pytest.approx(-4.99999995e-4, rel=1e-12)

    def test_zero_gradient_no_decay(self):
        st_ = OptimizerState(weight_decay=0.0)
        p = {"x": np.array([1.0, -2.0])}
        for _ in range(5):
            adam_step(st_, p, {"x": np.zeros(2)}, 1e-3)
        np.testing.assert_array_equal(p["x"], [1.0, -2.0])

    def test_coupled_weight_decay(self):
        a, b = OptimizerState(weight_decay=0.5), OptimizerState(weight_decay=0.0)
        pa, pb = {"x": np.array([2.0])}, {"x": np.array([2.0])}
        adam_step(a, pa, {"x": np.array([0.0])}, 0.1)
        adam_step(b, pb, {"x": np.array([1.0])}, 0.1)  # 0.5 * 2.0 folded into the gradient
        np.testing.assert_array_equal(pa["x"], pb["x"])

    def test_defaults(self):
        s = OptimizerState()
        assert (s.beta1, s.beta2, s.eps, s.weight_decay, s.step) == (0.9, 0.999, 1e-8, 5e-4, 0)

    def test_trajectories_reproducible(self):
        def run():
            rng = np.random.default_rng(8)
            st_, p = OptimizerState(), {"w": rng.normal(size=(3, 2))}
            for _ in range(20):
                adam_step(st_, p, {"w": rng.normal(size=(3, 2))}, 5e-4)
            return p["w"]

        np.testing.assert_array_equal(run(), run())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(OptimizerState(), {"x": np.zeros(2)}, {"x": np.zeros(3)}, 0.1)


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 5e-4), (9, 5e-4), (10, 2.5e-4), (25, 1.25e-4), (99, 5e-4 / 512)])
    def test_values(self, epoch, lr):
        assert lr_at(epoch) == lr

    @given(st.integers(0, 500))
    def test_non_increasing(self, e):
        assert lr_at(e + 1) <= lr_at(e)


class TestCheckpoint:
    def _ckpt(self, seed=9):
        rng = np.random.default_rng(seed)
        params = {"kernel": rng.normal(size=3), **init_head(5, 6, 4, rng)}
        return Checkpoint(3, params, 0.4321, "f" * 64, {"train": {"seed": 688}})

    def test_round_trip(self, tmp_path):
        ck = self._ckpt()
        save_checkpoint(tmp_path / "a.ckpt", ck)
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert (back.epoch, back.val_loss, back.config_hash, back.config) == \
            (ck.epoch, ck.val_loss, ck.config_hash, ck.config)
        for k, v in ck.params.items():
            assert back.params[k].dtype == np.float64
            np.testing.assert_array_equal(back.params[k], v)
        save_checkpoint(tmp_path / "b.ckpt", back)
        assert checkpoint_digest(tmp_path / "a.ckpt") == checkpoint_digest(tmp_path / "b.ckpt")

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=12))
    def test_round_trip_arbitrary_values(self, values):
        ck = Checkpoint(0, {"x": np.array(values)}, float("inf"))
        back = deserialize_checkpoint(serialize_checkpoint(ck))
        np.testing.assert_array_equal(back.params["x"], ck.params["x"])

    def test_magic(self):
        assert serialize_checkpoint(self._ckpt())[:4] == b"RACL"

    def test_corruption(self, tmp_path):
        data = serialize_checkpoint(self._ckpt())
        with pytest.raises(CheckpointError):
            deserialize_checkpoint(b"NOPE" + data[4:])
        with pytest.raises(CheckpointError):
            deserialize_checkpoint(data[:-3])
        with pytest.raises(CheckpointError):
            deserialize_checkpoint(data + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.ckpt")


class TestAveraging:
    def test_identical(self):
        p = {"a": np.array([1.0, 2.0])}
        avg = average_checkpoints([Checkpoint(i, p, 0.0) for i in range(5)])
        np.testing.assert_array_equal(avg["a"], p["a"])

    def test_scalars(self):
        avg = average_checkpoints([Checkpoint(i, {"s": np.array(float(i))}, 0.0) for i in range(5)])
        assert avg["s"] == 2.0

    @pytest.mark.parametrize("losses,window", [
        ([0.9, 0.8, 0.1, 0.5, 0.6], [0, 1, 2]),
        ([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3], [2, 3, 4, 5, 6]),
        ([0.1, 0.5], [0]),
    ])
    def test_window(self, losses, window):
        assert averaging_window(losses) == window

    def test_errors(self):
        with pytest.raises(CheckpointError):
            average_checkpoints([])
        with pytest.raises(ShapeError):
            average_checkpoints([Checkpoint(0, {"a": np.zeros(2)}, 0.0), Checkpoint(1, {"a": np.zeros(3)}, 0.0)])
