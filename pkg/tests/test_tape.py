import numpy as np
import pytest

from kgact.model import ModelConfig, ModelParams, forward_all, init_params
from kgact.precision import engine_dtype
from kgact.quantize import QuantConfig, RandomStream
from kgact.tape import (Tape, TapeUsageError, gradient_variance_probe)
from kgact.tensorops import make_csr

from reference import bpr_loss_and_grads, loss_and_grads


def passthrough_tape(seed=0):
    return Tape(QuantConfig(bits=32), RandomStream(seed))


def toy_model(n=32, d=8, layers=3, seed=0, density=0.25):
    """Random symmetric normalized adjacency plus Xavier params."""
    rng = np.random.default_rng(seed)
    mask = rng.random((n, n)) < density
    a = np.triu(mask, 1)
    a = (a | a.T) | np.eye(n, dtype=bool)
    deg = a.sum(axis=1)
    vals = a / np.sqrt(np.outer(deg, deg))
    cfg = ModelConfig(layers=layers, dim=d)
    params = init_params(n, cfg, seed)
    return make_csr(vals.astype(params.entity_embeddings.dtype)), params, cfg


def record_batch(tape, params, adjacency, cfg, users, pos, neg, l2=1e-5):
    readout = forward_all(tape, params, adjacency, cfg)
    u = tape.record_gather(readout, users)
    p = tape.record_gather(readout, pos)
    n = tape.record_gather(readout, neg)
    return tape.record_bpr_loss(u, p, n, l2)


class TestSpmmNode:
    def test_identity_adjacency_passes_gradient_through(self):
        tape = passthrough_tape()
        x = tape.register_param("E0", np.arange(6, dtype=np.float32).reshape(3, 2))
        wire = tape.record_spmm(make_csr(np.eye(3, dtype=np.float32)), x)
        assert np.array_equal(wire.value, x.value)

    def test_symmetric_backward_equals_forward_operator(self):
        from kgact.tensorops import spmm, spmm_t
        dense = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])
        s = make_csr(dense)
        g = np.random.default_rng(0).normal(size=(3, 2))
        assert np.array_equal(spmm_t(s, g), spmm(s, g))

    def test_spmm_nodes_share_one_adjacency_copy(self):
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model(layers=3)
            tape = passthrough_tape()
            forward_all(tape, params, adjacency, cfg)
        from kgact.tensorops import csr_nbytes
        spmm_nodes = [n for n in tape.nodes if n.kind == "spmm"]
        assert len(spmm_nodes) == 3
        assert sum(n.context_bytes for n in spmm_nodes) == csr_nbytes(adjacency)


class TestChainVsDenseOracle:
    def test_three_node_chain_matches(self):
        with engine_dtype(np.float64):
            dense = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
            dense = dense + np.eye(3)
            deg = dense.sum(axis=1)
            adjacency = make_csr(dense / np.sqrt(np.outer(deg, deg)))
            cfg = ModelConfig(layers=2, dim=2)
            params = init_params(3, cfg, 1)
            tape = passthrough_tape()
            loss = record_batch(tape, params, adjacency, cfg,
                                users=[0], pos=[1], neg=[2])
            grads = tape.backward()
            ref_loss, ref = loss_and_grads(params, adjacency, 2,
                                           np.array([0]), np.array([1]),
                                           np.array([2]), 1e-5)
        assert loss.value == pytest.approx(ref_loss, rel=1e-12)
        for name in grads:
            assert np.allclose(grads[name], ref[name], rtol=1e-12, atol=1e-15)


class TestMMNode:
    def test_passthrough_backward_bitwise(self):
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model()
            users, pos, neg = [1, 2], [5, 6], [9, 10]
            tape = passthrough_tape()
            record_batch(tape, params, adjacency, cfg, users, pos, neg)
            grads = tape.backward()
            _, ref = loss_and_grads(params, adjacency, cfg.layers,
                                    np.array(users), np.array(pos),
                                    np.array(neg), 1e-5)
        for name in grads:
            assert np.array_equal(grads[name], ref[name]), name

    def test_constant_rows_exact_at_any_bits(self):
        # rows with zero range dequantize exactly, so gradients match the
        # pass-through engine bit for bit (theta scaled identity keeps the
        # downstream loss inputs constant-rowed as well)
        h = np.tile(np.arange(1, 5, dtype=np.float64)[:, None], (1, 3))
        theta = 1.25 * np.eye(3)

        def run(bits):
            tape = Tape(QuantConfig(bits=bits), RandomStream(0), dtype=np.float64)
            tape.register_param("theta", theta)
            src = tape.register_param("H", h)
            out = tape.record_mm(src, "theta")
            u = tape.record_gather(out, [0, 1])
            p = tape.record_gather(out, [2, 3])
            n = tape.record_gather(out, [1, 0])
            tape.record_bpr_loss(u, p, n, 0.0)
            return tape.backward()

        ref = run(32)
        assert np.abs(ref["theta"]).sum() > 0
        for bits in (1, 2, 4, 8):
            grads = run(bits)
            assert np.array_equal(grads["theta"], ref["theta"])
            assert np.array_equal(grads["H"], ref["H"])

    def test_low_bit_mean_gradient_in_monte_carlo_band(self):
        # 4x2 H against 2x2 theta, b=2: the mean over many draws of dTheta
        # must sit inside the 4-sigma band around the exact gradient
        h = np.random.default_rng(1).normal(size=(4, 2))
        theta = np.random.default_rng(2).normal(size=(2, 2))
        g_out = np.random.default_rng(3).normal(size=(4, 2))
        exact = h.T @ g_out
        stream = RandomStream(5)
        trials = 10000
        acc = np.zeros_like(exact)
        acc_sq = np.zeros_like(exact)
        from kgact.quantize import dequantize_tensor, quantize_tensor
        for _ in range(trials):
            q = quantize_tensor(h, QuantConfig(bits=2), stream)
            g = dequantize_tensor(q, np.float64).T @ g_out
            acc += g
            acc_sq += g * g
        mean = acc / trials
        sigma = np.sqrt(np.maximum(acc_sq / trials - mean ** 2, 0) / trials)
        # the small atol absorbs the float32 (range, offset) metadata, which
        # shifts deterministic two-element rows by ~1e-8 with zero variance
        assert (np.abs(mean - exact) <= 4 * sigma + 1e-6).all()


class TestReluNode:
    def _backward_through_relu(self, x, g_out):
        tape = Tape(QuantConfig(bits=32), dtype=np.float64)
        src = tape.register_param("x", x)
        wire = tape.record_relu(src)
        node = tape.nodes[0]
        mask = node.context["mask"].to_bool()
        return g_out * mask

    def test_all_positive_identity(self):
        g = np.random.default_rng(0).normal(size=(2, 3))
        out = self._backward_through_relu(np.ones((2, 3)), g)
        assert np.array_equal(out, g)

    def test_all_negative_zero(self):
        g = np.random.default_rng(1).normal(size=(2, 3))
        out = self._backward_through_relu(-np.ones((2, 3)), g)
        assert np.array_equal(out, np.zeros((2, 3)))

    def test_mixed_matches_dense_oracle(self):
        x = np.random.default_rng(2).normal(size=(2, 3))
        g = np.random.default_rng(3).normal(size=(2, 3))
        out = self._backward_through_relu(x, g)
        assert np.array_equal(out, g * (x > 0))

    def test_mask_context_bytes(self):
        tape = Tape(QuantConfig(bits=32), dtype=np.float64)
        src = tape.register_param("x", np.ones((5, 13)))
        tape.record_relu(src)
        assert tape.nodes[0].context_bytes == (5 * 13 + 7) // 8


class TestGatherNode:
    def _grad_of_gather(self, src_shape, indices, g_out):
        tape = Tape(QuantConfig(bits=32), dtype=np.float64)
        src = tape.register_param("x", np.zeros(src_shape))
        tape.record_gather(src, indices)
        node = tape.nodes[0]
        scat = np.zeros(src_shape)
        np.add.at(scat, node.context["indices"], g_out)
        return scat

    def test_identity_permutation(self):
        g = np.random.default_rng(0).normal(size=(4, 2))
        out = self._grad_of_gather((4, 2), [0, 1, 2, 3], g)
        assert np.array_equal(out, g)

    def test_duplicate_indices_accumulate(self):
        g = np.ones((2, 3))
        out = self._grad_of_gather((5, 3), [2, 2], g)
        assert np.array_equal(out[2], [2.0, 2.0, 2.0])

    def test_matches_one_hot_matmul_oracle(self):
        rng = np.random.default_rng(4)
        idx = rng.integers(0, 8, size=5)
        g = rng.normal(size=(5, 3))
        one_hot = np.zeros((5, 8))
        one_hot[np.arange(5), idx] = 1.0
        assert np.array_equal(self._grad_of_gather((8, 3), idx, g), one_hot.T @ g)

    def test_out_of_range_raises(self):
        tape = Tape(QuantConfig(bits=32), dtype=np.float64)
        src = tape.register_param("x", np.zeros((3, 2)))
        with pytest.raises(IndexError):
            tape.record_gather(src, [3])


class TestBprLoss:
    def test_saturated_margin_leaves_only_regularizer(self):
        u = np.array([[100.0, 0.0]])
        p = np.array([[1.0, 0.0]])
        n = np.array([[-1.0, 0.0]])
        loss, *_ = bpr_loss_and_grads(u, p, n, l2=1e-3)
        reg_only = 1e-3 * ((u * u).sum() + (p * p).sum() + (n * n).sum())
        assert loss == pytest.approx(reg_only, abs=1e-12)

    def test_zero_margin_gives_log_two(self):
        v = np.random.default_rng(0).normal(size=(3, 4))
        loss, *_ = bpr_loss_and_grads(v, v, v, l2=0.0)
        assert loss == pytest.approx(np.log(2.0), rel=1e-12)

    def test_single_triple_finite_difference(self):
        rng = np.random.default_rng(1)
        u, p, n = rng.normal(size=(3, 1, 2))
        l2 = 1e-5

        def loss_of(u_, p_, n_):
            return bpr_loss_and_grads(u_, p_, n_, l2)[0]

        _, gu, gp, gn = bpr_loss_and_grads(u, p, n, l2)
        h = 1e-6
        for block, grad in ((u, gu), (p, gp), (n, gn)):
            for j in range(2):
                up = block.copy(); up[0, j] += h
                dn = block.copy(); dn[0, j] -= h
                if block is u:
                    fd = (loss_of(up, p, n) - loss_of(dn, p, n)) / (2 * h)
                elif block is p:
                    fd = (loss_of(u, up, n) - loss_of(u, dn, n)) / (2 * h)
                else:
                    fd = (loss_of(u, p, up) - loss_of(u, p, dn)) / (2 * h)
                assert fd == pytest.approx(grad[0, j], rel=1e-6, abs=1e-9)

    def test_tape_matches_reference_formulas(self):
        rng = np.random.default_rng(2)
        u, p, n = (rng.normal(size=(6, 4)) for _ in range(3))
        tape = Tape(QuantConfig(bits=32), dtype=np.float64)
        wu = tape.register_param("u", u)
        wp = tape.register_param("p", p)
        wn = tape.register_param("n", n)
        loss = tape.record_bpr_loss(wu, wp, wn, 1e-4)
        grads = tape.backward()
        ref_loss, gu, gp, gn = bpr_loss_and_grads(u, p, n, 1e-4)
        assert float(loss.value) == pytest.approx(ref_loss, rel=1e-14)
        assert np.array_equal(grads["u"], gu)
        assert np.array_equal(grads["p"], gp)
        assert np.array_equal(grads["n"], gn)


class TestBackward:
    def test_requires_loss_node(self):
        tape = passthrough_tape()
        tape.register_param("x", np.ones((2, 2), dtype=np.float32))
        with pytest.raises(TapeUsageError):
            tape.backward()

    def test_full_pipeline_passthrough_bitwise(self):
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model(layers=3)
            users, pos, neg = np.array([0, 3, 7]), np.array([12, 14, 20]), np.array([25, 30, 31])
            tape = passthrough_tape()
            loss = record_batch(tape, params, adjacency, cfg, users, pos, neg)
            grads = tape.backward()
            ref_loss, ref = loss_and_grads(params, adjacency, cfg.layers,
                                           users, pos, neg, 1e-5)
        assert float(loss.value) == ref_loss
        for name in grads:
            assert np.array_equal(grads[name], ref[name]), name

    def test_last_layer_aggregation_passthrough_bitwise(self):
        with engine_dtype(np.float64):
            adjacency, params, _ = toy_model(layers=2)
            cfg = ModelConfig(layers=2, dim=8, aggregation="last")
            users, pos, neg = np.array([0, 3]), np.array([12, 14]), np.array([25, 30])
            tape = passthrough_tape()
            record_batch(tape, params, adjacency, cfg, users, pos, neg)
            grads = tape.backward()
            _, ref = loss_and_grads(params, adjacency, 2, users, pos, neg,
                                    1e-5, aggregation="last")
        for name in grads:
            assert np.array_equal(grads[name], ref[name]), name

    @pytest.mark.parametrize("layers", [1, 3])
    def test_finite_difference_check(self, layers):
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model(layers=layers, seed=2)
            users, pos, neg = np.array([1, 4]), np.array([8, 9]), np.array([16, 17])

            def loss_at(theta0):
                p = ModelParams(params.entity_embeddings,
                                [theta0] + params.layer_weights[1:])
                return loss_and_grads(p, adjacency, layers, users, pos, neg, 1e-5)[0]

            tape = passthrough_tape()
            record_batch(tape, params, adjacency, cfg, users, pos, neg)
            grads = tape.backward()
            theta0 = params.layer_weights[0]
            step = 1e-5
            worst = 0.0
            for i in range(theta0.shape[0]):
                for j in range(theta0.shape[1]):
                    up = theta0.copy(); up[i, j] += step
                    dn = theta0.copy(); dn[i, j] -= step
                    fd = (loss_at(up) - loss_at(dn)) / (2 * step)
                    got = grads[f"theta0"][i, j]
                    rel = abs(fd - got) / max(abs(fd), abs(got), 1e-6)
                    worst = max(worst, rel)
            assert worst <= 1e-4

    def test_monte_carlo_mean_converges_with_draws(self):
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model(layers=3, seed=4)
            users, pos, neg = np.array([2, 5]), np.array([10, 11]), np.array([20, 21])
            exact_tape = passthrough_tape()
            record_batch(exact_tape, params, adjacency, cfg, users, pos, neg)
            exact = exact_tape.backward()["theta0"]

            stream = RandomStream(3)

            def mean_grad(n_draws):
                acc = np.zeros_like(exact)
                for _ in range(n_draws):
                    tape = Tape(QuantConfig(bits=2), stream)
                    record_batch(tape, params, adjacency, cfg, users, pos, neg)
                    acc += tape.backward()["theta0"]
                return acc / n_draws

            few = np.linalg.norm(mean_grad(100) - exact)
            many = np.linalg.norm(mean_grad(1600) - exact)
        # deviation should shrink roughly like 1/sqrt(draws) (16x draws -> ~4x)
        assert many < few / 2

    def test_contexts_freed_and_counter_zero(self):
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model(layers=2)
            tape = Tape(QuantConfig(bits=2), RandomStream(0))
            record_batch(tape, params, adjacency, cfg, [0], [5], [9])
            assert tape.current_context_bytes > 0
            tape.backward()
        assert tape.current_context_bytes == 0
        assert all(n.context is None for n in tape.nodes)

    def test_memory_ledger_matches_analytic_sum(self):
        from kgact.quantize import stored_bytes
        from kgact.tensorops import csr_nbytes
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model(layers=3)
            tape = Tape(QuantConfig(bits=2), RandomStream(0))
            record_batch(tape, params, adjacency, cfg, [0, 1], [5, 6], [9, 10])
            expected = csr_nbytes(adjacency)
            for node in tape.nodes:
                if node.kind == "mm":
                    expected += stored_bytes(node.context["q"])
                elif node.kind == "relu":
                    expected += node.context["mask"].nbytes
                elif node.kind == "gather":
                    expected += node.context["indices"].nbytes
                elif node.kind == "bpr_loss":
                    expected += sum(stored_bytes(node.context[k])
                                    for k in ("qu", "qp", "qn"))
                    expected += node.context["margins"].nbytes
            assert tape.peak_context_bytes == expected

    def test_forward_outputs_independent_of_bits(self):
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model(layers=2)
            outs = []
            for bits in (32, 8, 2, 1):
                tape = Tape(QuantConfig(bits=bits), RandomStream(0))
                wire = forward_all(tape, params, adjacency, cfg)
                outs.append(wire.value)
            for other in outs[1:]:
                assert np.array_equal(outs[0], other)


class TestVarianceProbe:
    def _builder(self):
        with engine_dtype(np.float64):
            adjacency, params, cfg = toy_model(layers=3, seed=7)
        users, pos, neg = np.array([0, 1, 2, 3]), np.array([8, 9, 10, 11]), \
            np.array([20, 21, 22, 23])

        def build(tape):
            record_batch(tape, params, adjacency, cfg, users, pos, neg)
        return build

    def test_zero_extra_variance_in_passthrough(self):
        build = self._builder()
        rep = gradient_variance_probe(build, QuantConfig(bits=32), trials=5, seed=0)
        assert rep["mean_variance"] == 0.0

    def test_variance_monotone_in_bits(self):
        build = self._builder()
        out = {}
        for bits in (1, 2, 4):
            out[bits] = gradient_variance_probe(build, QuantConfig(bits=bits),
                                                trials=300, seed=0)["mean_variance"]
        assert out[1] > out[2] > out[4]

    def test_shallow_layers_accumulate_more_variance(self):
        build = self._builder()
        hits = 0
        for seed in range(5):
            rep = gradient_variance_probe(build, QuantConfig(bits=2),
                                          trials=200, seed=seed)
            v = rep["variance"]
            hits += v["theta0"] >= v["theta2"]
        assert hits >= 3
