"""Parameter store, Glorot init, Adam, losses, and checkpoint round-trips."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agseg.autodiff import Tensor, tsum
from agseg.nn import (
    AdamState,
    LossConfig,
    ParamStore,
    adam_step,
    bce_loss,
    focal_bce_loss,
    glorot_init,
    l2_penalty,
    load_checkpoint,
    save_checkpoint,
)
from oracles import fd_gradient, max_rel_error


def t64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


class TestParamStore:
    def test_insertion_order_preserved(self):
        ps = ParamStore()
        names = ["c.weight", "a.bias", "b.weight"]
        for n in names:
            ps.add(n, Tensor(np.zeros(2, dtype=np.float32)))
        assert ps.names() == names

    def test_duplicate_name_rejected(self):
        ps = ParamStore()
        ps.add("w", Tensor(np.zeros(1, dtype=np.float32)))
        with pytest.raises(ValueError, match="duplicate"):
            ps.add("w", Tensor(np.zeros(1, dtype=np.float32)))

    def test_add_marks_trainable(self):
        ps = ParamStore()
        t = ps.add("w", Tensor(np.zeros(3, dtype=np.float32)))
        assert t.requires_grad

    def test_copy_is_deep(self):
        ps = ParamStore()
        ps.add("w", Tensor(np.ones(2, dtype=np.float32)))
        dup = ps.copy()
        dup["w"].data[0] = 5.0
        assert ps["w"].data[0] == 1.0

    def test_copy_dtype_upcast(self):
        ps = ParamStore()
        ps.add("w", Tensor(np.ones(2, dtype=np.float32)))
        dup = ps.copy(dtype=np.float64)
        assert dup["w"].dtype == np.float64


class TestGlorot:
    def test_bound_square_fans(self):
        # fan_in = fan_out = 576 gives bound sqrt(6/1152)
        bound = math.sqrt(6.0 / 1152.0)
        assert abs(bound - 0.0721687836) < 1e-9
        t = glorot_init((64, 64, 3, 3), 576, 576, 0)
        assert float(np.max(np.abs(t.data))) <= bound

    def test_seed_reproducible(self):
        a = glorot_init((4, 4), 16, 16, 7)
        b = glorot_init((4, 4), 16, 16, 7)
        assert np.array_equal(a.data, b.data)

    def test_generator_advances(self):
        rng = np.random.default_rng(3)
        a = glorot_init((4,), 2, 2, rng)
        b = glorot_init((4,), 2, 2, rng)
        assert not np.array_equal(a.data, b.data)

    def test_bad_fans_rejected(self):
        with pytest.raises(ValueError):
            glorot_init((1,), 0, 4, 0)

    @given(st.integers(1, 512), st.integers(1, 512), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_draws_inside_bound(self, fan_in, fan_out, seed):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        t = glorot_init((32,), fan_in, fan_out, seed)
        assert float(np.max(np.abs(t.data))) <= bound
        assert t.dtype == np.float32


class TestAdam:
    def test_first_step_is_unit_scaled(self):
        # one step: m_hat == g, v_hat == g*g, so the move is lr * sign(g)
        # up to epsilon.
        ps = ParamStore()
        ps.add("w", Tensor(np.asarray([1.0, 1.0], dtype=np.float32)))
        ps["w"].grad = np.asarray([0.5, -2.0], dtype=np.float32)
        state = AdamState.for_params(ps, learning_rate=0.1)
        adam_step(ps, state)
        np.testing.assert_allclose(ps["w"].data, [0.9, 1.1], atol=1e-5)

    def test_missing_grad_names_param(self):
        ps = ParamStore()
        ps.add("enc.w", Tensor(np.zeros(1, dtype=np.float32)))
        state = AdamState.for_params(ps, learning_rate=0.1)
        with pytest.raises(ValueError, match="enc.w"):
            adam_step(ps, state)

    def test_grads_cleared_after_step(self):
        ps = ParamStore()
        ps.add("w", Tensor(np.ones(2, dtype=np.float32)))
        ps["w"].grad = np.ones(2, dtype=np.float32)
        state = AdamState.for_params(ps, learning_rate=0.01)
        adam_step(ps, state)
        assert ps["w"].grad is None

    def test_matches_reference_trajectory(self):
        # independent scalar Adam on f(w) = (w - 3)^2 for five steps
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        w_ref, m, v = 0.0, 0.0, 0.0
        traj = []
        for t in range(1, 6):
            g = 2.0 * (w_ref - 3.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w_ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            traj.append(w_ref)

        ps = ParamStore()
        ps.add("w", Tensor(np.zeros((), dtype=np.float64)))
        state = AdamState.for_params(ps, learning_rate=lr)
        for t in range(5):
            w = ps["w"]
            w.grad = np.asarray(2.0 * (w.data - 3.0))
            adam_step(ps, state)
            assert abs(float(ps["w"].data) - traj[t]) < 1e-10

    def test_step_count_advances(self):
        ps = ParamStore()
        ps.add("w", Tensor(np.ones(1, dtype=np.float32)))
        state = AdamState.for_params(ps, learning_rate=0.1)
        for expect in (1, 2, 3):
            ps["w"].grad = np.ones(1, dtype=np.float32)
            adam_step(ps, state)
            assert state.step_count == expect


class TestBCE:
    def test_hand_value(self):
        # -(log 0.9 + log 0.8) / 2
        loss = bce_loss(t64([0.9, 0.2]), t64([1.0, 0.0]))
        assert abs(loss.item() - 0.164252033486) < 1e-9

    def test_perfect_prediction_is_tiny(self):
        loss = bce_loss(t64([1.0, 0.0]), t64([1.0, 0.0]))
        assert loss.item() < 1e-5

    def test_clamp_keeps_loss_finite(self):
        loss = bce_loss(t64([0.0, 1.0]), t64([1.0, 0.0]))
        assert np.isfinite(loss.item())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            bce_loss(t64([0.5, 0.5]), t64([1.0]))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
        y = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(np.float64)
        pt = t64(p, requires_grad=True)
        loss = bce_loss(pt, t64(y))
        loss.backward()
        probe = p.copy()
        (fd,) = fd_gradient(lambda: _np_bce(probe, y), [probe])
        assert max_rel_error(pt.grad, fd) < 1e-3


def _np_bce(p, y):
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    return float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))


def _np_focal(p, y, gamma, alpha):
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    pos = alpha * y * (1 - pc) ** gamma * np.log(pc)
    neg = (1 - y) * pc**gamma * np.log(1 - pc)
    return float(-np.mean(pos + neg))


class TestFocal:
    def test_hand_value_single_pixel(self):
        # gamma=2, alpha=1, p=0.9, y=1: -(0.1^2) * log(0.9)
        cfg = LossConfig(gamma=2.0, pos_weight=1.0)
        loss = focal_bce_loss(t64([0.9]), t64([1.0]), cfg)
        assert abs(loss.item() - 0.0010536052) < 1e-9

    def test_gamma_zero_equals_bce(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0.05, 0.95, size=(3, 5))
        y = (rng.uniform(size=(3, 5)) > 0.4).astype(np.float64)
        cfg = LossConfig(gamma=0.0, pos_weight=1.0)
        a = focal_bce_loss(t64(p), t64(y), cfg).item()
        b = bce_loss(t64(p), t64(y)).item()
        assert abs(a - b) < 1e-12

    def test_auto_pos_weight_is_neg_over_pos(self):
        y = np.zeros((1, 1, 4, 4), dtype=np.float64)
        y[0, 0, :2, :2] = 1.0  # 4 positive, 12 negative
        p = np.full_like(y, 0.5)
        cfg = LossConfig(gamma=0.0, pos_weight=None)
        got = focal_bce_loss(t64(p), t64(y), cfg).item()
        want = _np_focal(p, y, 0.0, 3.0)
        assert abs(got - want) < 1e-12

    def test_all_negative_target_defaults_alpha_one(self):
        y = np.zeros((2, 2), dtype=np.float64)
        p = np.full_like(y, 0.3)
        cfg = LossConfig(gamma=1.5, pos_weight=None)
        got = focal_bce_loss(t64(p), t64(y), cfg).item()
        assert abs(got - _np_focal(p, y, 1.5, 1.0)) < 1e-12

    def test_easy_pixels_downweighted(self):
        cfg = LossConfig(gamma=2.0, pos_weight=1.0)
        easy = focal_bce_loss(t64([0.95]), t64([1.0]), cfg).item()
        easy_bce = bce_loss(t64([0.95]), t64([1.0])).item()
        assert easy < 0.01 * easy_bce

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(23)
        p = rng.uniform(0.1, 0.9, size=(1, 1, 5, 5))
        y = (rng.uniform(size=(1, 1, 5, 5)) > 0.6).astype(np.float64)
        cfg = LossConfig(gamma=2.0, pos_weight=None)
        pos = float(y.sum())
        alpha = (y.size - pos) / pos
        pt = t64(p, requires_grad=True)
        loss = focal_bce_loss(pt, t64(y), cfg)
        loss.backward()
        probe = p.copy()
        (fd,) = fd_gradient(lambda: _np_focal(probe, y, 2.0, alpha), [probe])
        assert max_rel_error(pt.grad, fd) < 1e-3

    @given(st.floats(0.0, 4.0), st.floats(0.1, 10.0))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative(self, gamma, alpha):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.01, 0.99, size=(8,))
        y = (rng.uniform(size=(8,)) > 0.5).astype(np.float64)
        cfg = LossConfig(gamma=gamma, pos_weight=alpha)
        assert focal_bce_loss(t64(p), t64(y), cfg).item() >= 0.0


class TestL2:
    def test_hand_value(self):
        ps = ParamStore()
        ps.add("a.weight", Tensor(np.asarray([1.0, 2.0], dtype=np.float64)))
        pen = l2_penalty(ps, 0.004)
        assert abs(pen.item() - 0.02) < 1e-12

    def test_biases_exempt(self):
        ps = ParamStore()
        ps.add("a.weight", Tensor(np.asarray([3.0], dtype=np.float64)))
        ps.add("a.bias", Tensor(np.asarray([100.0], dtype=np.float64)))
        pen = l2_penalty(ps, 1.0)
        assert abs(pen.item() - 9.0) < 1e-12

    def test_zero_lambda_constant(self):
        ps = ParamStore()
        ps.add("a.weight", Tensor(np.ones(4, dtype=np.float32)))
        assert l2_penalty(ps, 0.0).item() == 0.0

    def test_negative_lambda_rejected(self):
        ps = ParamStore()
        with pytest.raises(ValueError):
            l2_penalty(ps, -0.1)

    def test_gradient_is_two_lambda_theta(self):
        ps = ParamStore()
        w = ps.add("a.weight", Tensor(np.asarray([1.0, -2.0, 0.5], dtype=np.float64)))
        pen = l2_penalty(ps, 0.004)
        pen.backward()
        np.testing.assert_allclose(w.grad, 2 * 0.004 * w.data, rtol=1e-12)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.gamma == 2.0
        assert cfg.pos_weight is None
        assert cfg.lambda_edge == 1.0
        assert cfg.lambda_reg == 0.004
        assert cfg.validate() == []

    def test_validate_flags_each_bad_field(self):
        cfg = LossConfig(gamma=-1, pos_weight=0.0, lambda_edge=-1, lambda_reg=-1)
        errs = cfg.validate()
        assert len(errs) == 4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        ps = ParamStore()
        ps.add("enc.block1.conv1.weight", Tensor(rng.normal(size=(4, 1, 3, 3)).astype(np.float32)))
        ps.add("enc.block1.conv1.bias", Tensor(rng.normal(size=(4,)).astype(np.float32)))
        ps.add("head.weight", Tensor(rng.normal(size=(1, 4, 1, 1)).astype(np.float32)))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, ps, extra={"seed": 0})
        loaded, extra = load_checkpoint(path)
        assert loaded.names() == ps.names()
        assert extra == {"seed": 0}
        for name in ps.names():
            assert np.array_equal(loaded[name].data, ps[name].data)
            assert loaded[name].dtype == np.float32

    def test_same_store_same_bytes(self, tmp_path):
        ps = ParamStore()
        ps.add("w", Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, ps)
        save_checkpoint(p2, ps)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_payload_rejected(self, tmp_path):
        ps = ParamStore()
        ps.add("w", Tensor(np.ones(8, dtype=np.float32)))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, ps)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(ValueError, match="bytes"):
            load_checkpoint(path)

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(path)

    def test_loaded_params_are_trainable(self, tmp_path):
        ps = ParamStore()
        ps.add("w", Tensor(np.ones(2, dtype=np.float32)))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ps)
        loaded, _ = load_checkpoint(path)
        loss = tsum(loaded["w"])
        loss.backward()
        assert loaded["w"].grad is not None
