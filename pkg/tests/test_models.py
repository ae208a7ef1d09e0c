"""Network assembly: shapes, gate policies, composite pass, freezing."""
import numpy as np
import pytest

import sea.nn as nn
from sea import models
from sea.nn import rng as rngmod


@pytest.fixture(scope="module")
def params():
    return models.create_sea_params(action_count=3, seed=90)


def rand_stack(seed=0, n=None):
    rng = np.random.default_rng(seed)
    shape = (4, 84, 84) if n is None else (n, 4, 84, 84)
    return rng.random(shape).astype(np.float32)


class TestGazeForward:
    def test_shapes(self, params):
        emb, act = models.gaze_forward(rand_stack(), params.gaze)
        assert emb.shape == (64, 9, 9)
        assert act.shape == (84, 84)

    def test_zero_weights_uniform_map(self):
        p = models.create_gaze_params(seed=1)
        for block in (p.conv1, p.conv2, p.deconv1, p.deconv2):
            block.w.data = np.zeros_like(block.w.data)
        models.set_mode(p, "inference")
        _, act = models.gaze_forward(rand_stack(), p)
        q = nn.softmax2d(act).data
        np.testing.assert_allclose(q, 1.0 / 7056, atol=1e-9)

    def test_deterministic(self, params):
        models.set_mode(params, "inference")
        s = rand_stack(3)
        emb1, act1 = models.gaze_forward(s, params.gaze)
        emb2, act2 = models.gaze_forward(s.copy(), params.gaze)
        assert np.array_equal(emb1.data, emb2.data)
        assert np.array_equal(act1.data, act2.data)

    def test_receptive_field_containment(self, params):
        # Embedding cell (i, j) sees input rows [8i, 8i+19] and cols [8j, 8j+19]
        # (8x8/4 conv then 4x4/2 conv). Poking one pixel must leave all
        # embedding cells outside that window bitwise unchanged.
        models.set_mode(params, "inference")
        base = rand_stack(4)
        emb0, _ = models.gaze_forward(base, params.gaze)
        for (y, x) in [(0, 0), (41, 37), (83, 83)]:
            poked = base.copy()
            poked[2, y, x] += 1.0
            emb1, _ = models.gaze_forward(poked, params.gaze)
            changed = np.argwhere(np.any(emb1.data != emb0.data, axis=0))
            i_lo, i_hi = max(0, -(-(y - 19) // 8)), y // 8
            j_lo, j_hi = max(0, -(-(x - 19) // 8)), x // 8
            assert changed.size > 0
            for (ci, cj) in changed:
                assert i_lo <= ci <= i_hi
                assert j_lo <= cj <= j_hi


class TestGateForward:
    def test_learned_zero_weights_defaults_closed(self):
        p = models.GateParams(gru=models.GRUParams.create(64, 1, rngmod.stream(0, "g")))
        for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
            t = getattr(p.gru, name)
            t.data = np.zeros_like(t.data)
        emb = np.random.default_rng(5).random((64, 9, 9)).astype(np.float32)
        d = models.gate_forward(emb, "learned", p)
        assert d.h == pytest.approx(-0.5, abs=1e-6)
        assert d.c == 0

    def test_always_off(self, params):
        emb = np.random.default_rng(6).random((64, 9, 9)).astype(np.float32)
        d = models.gate_forward(emb, "off", params.gate)
        assert d.c == 0 and d.h is None

    def test_always_on(self, params):
        emb = np.zeros((64, 9, 9), dtype=np.float32)
        assert models.gate_forward(emb, "on", params.gate).c == 1

    def test_random_bernoulli_mean(self, params):
        stream = rngmod.stream(123, "gate-random")
        emb = np.zeros((64, 9, 9), dtype=np.float32)
        draws = [models.gate_forward(emb, "random", params.gate, stream).c for _ in range(10_000)]
        assert 0.48 <= np.mean(draws) <= 0.52

    def test_random_requires_stream(self, params):
        with pytest.raises(ValueError, match="rng"):
            models.gate_forward(np.zeros((64, 9, 9), dtype=np.float32), "random", params.gate)

    def test_gate_binarity_learned(self, params):
        rng = np.random.default_rng(8)
        for _ in range(50):
            emb = rng.normal(size=(64, 9, 9)).astype(np.float32)
            d = models.gate_forward(emb, "learned", params.gate)
            assert d.c in (0, 1)
            assert (d.c == 1) == (d.h > 0)


class TestActionForward:
    def test_gated_off_equals_zero_map(self, params):
        models.set_mode(params, "inference")
        rng = np.random.default_rng(9)
        emb = rng.random((64, 9, 9)).astype(np.float32)
        gmap = rng.random((84, 84)).astype(np.float32)
        off = models.GateDecision(h=-0.3, c=0, policy="learned")
        on = models.GateDecision(h=0.3, c=1, policy="learned")
        a = models.action_forward(emb, gmap, off, params.action)
        b = models.action_forward(emb, np.zeros_like(gmap), on, params.action)
        assert np.array_equal(a.data, b.data)

    def test_zero_map_gated_on_equals_gated_off(self, params):
        models.set_mode(params, "inference")
        emb = np.random.default_rng(10).random((64, 9, 9)).astype(np.float32)
        zmap = np.zeros((84, 84), dtype=np.float32)
        on = models.GateDecision(h=0.5, c=1, policy="learned")
        off = models.GateDecision(h=-0.5, c=0, policy="learned")
        a = models.action_forward(emb, zmap, on, params.action)
        b = models.action_forward(emb, zmap, off, params.action)
        assert np.array_equal(a.data, b.data)

    def test_live_gaze_branch_changes_logits(self, params):
        models.set_mode(params, "inference")
        rng = np.random.default_rng(11)
        emb = rng.random((64, 9, 9)).astype(np.float32)
        gmap = rng.random((84, 84)).astype(np.float32)
        on = models.GateDecision(h=0.5, c=1, policy="learned")
        off = models.GateDecision(h=-0.5, c=0, policy="learned")
        a = models.action_forward(emb, gmap, on, params.action)
        b = models.action_forward(emb, gmap, off, params.action)
        assert not np.array_equal(a.data, b.data)

    def test_logit_length_matches_action_count(self, params):
        emb = np.zeros((64, 9, 9), dtype=np.float32)
        gmap = np.zeros((84, 84), dtype=np.float32)
        models.set_mode(params, "inference")
        d = models.GateDecision(h=None, c=1, policy="on")
        assert models.action_forward(emb, gmap, d, params.action).shape == (3,)


class TestSEAForward:
    def test_always_off_equals_bc_pipeline_bitwise(self, params):
        models.set_mode(params, "inference")
        for i in range(100):
            stack = rand_stack(100 + i)
            logits, decision, masked = models.sea_forward(stack, params, "off")
            emb, act = models.gaze_forward(stack, params.gaze)
            zero_map = np.zeros((84, 84), dtype=np.float32)
            bc = models.GateDecision(h=None, c=0, policy="off")
            ref = models.action_forward(emb.data, zero_map, bc, params.action)
            assert np.array_equal(logits.data, ref.data)
            assert decision.c == 0

    def test_always_on_uses_masked_map(self, params):
        models.set_mode(params, "inference")
        stack = rand_stack(55)
        logits_on, d_on, masked = models.sea_forward(stack, params, "on")
        emb, act = models.gaze_forward(stack, params.gaze)
        ref = models.action_forward(emb.data, masked,
                                    models.GateDecision(h=None, c=1, policy="on"),
                                    params.action)
        assert np.array_equal(logits_on.data, ref.data)
        assert d_on.c == 1

    def test_fixed_seed_repeatable_triple(self, params):
        models.set_mode(params, "inference")
        stack = rand_stack(56)
        a = models.sea_forward(stack, params, "learned")
        b = models.sea_forward(stack, params, "learned")
        assert np.array_equal(a[0].data, b[0].data)
        assert a[1] == b[1]
        assert np.array_equal(a[2], b[2])

    def test_masked_map_survivor_invariant(self, params):
        models.set_mode(params, "inference")
        _, decision, masked = models.sea_forward(rand_stack(57), params, "learned")
        survivors = int((masked > 0).sum())
        assert survivors == 706  # ceil(0.1 * 7056)

    def test_batch_forward_matches_singles(self, params):
        models.set_mode(params, "inference")
        stacks = rand_stack(58, n=3)
        out = models.sea_forward_batch(stacks, params, "off")
        for i in range(3):
            single, _, _ = models.sea_forward(stacks[i], params, "off")
            np.testing.assert_allclose(out["logits"].data[i], single.data, atol=2e-5)


class TestFreezing:
    def test_frozen_gaze_receives_no_gradient(self, params):
        models.set_mode(params, "inference")
        gaze_tensors = models.gaze_named_tensors(params.gaze)
        models.set_requires_grad(gaze_tensors, False)
        try:
            out = models.sea_forward_batch(rand_stack(59, n=4), params, "learned")
            loss = nn.cross_entropy(out["logits"], np.array([0, 1, 2, 0]))
            loss.backward()
            for name, t in gaze_tensors.items():
                assert t.grad is None, name
            assert params.gate.gru.w_z.grad is not None
            assert params.action.fc1.w.grad is not None
            assert params.action.emb.w.grad is not None
        finally:
            models.set_requires_grad(gaze_tensors, True)
            for t in models.sea_named_tensors(params).values():
                t.grad = None

    def test_gate_weights_get_gradient_even_when_closed(self):
        # Straight-through: the gate trains through the action loss even
        # while emitting c = 0 (zero gate biases force closed gates).
        params = models.create_sea_params(action_count=3, seed=91)
        params.gate.gru.b_z.data = np.zeros_like(params.gate.gru.b_z.data)
        params.gate.gru.b_h.data = np.zeros_like(params.gate.gru.b_h.data)
        models.set_mode(params, "inference")
        gaze_tensors = models.gaze_named_tensors(params.gaze)
        models.set_requires_grad(gaze_tensors, False)
        stacks = rand_stack(61, n=4)
        out = models.sea_forward_batch(stacks, params, "learned")
        assert int(out["c"].data.sum()) == 0
        nn.cross_entropy(out["logits"], np.array([0, 0, 1, 2])).backward()
        assert params.gate.gru.w_z.grad is not None
        assert np.any(params.gate.gru.w_z.grad != 0)
