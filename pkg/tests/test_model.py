import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mixed_fields, random_batch
from fint import kernels
from fint.data import FieldSchema, MiniBatch
from fint.model import (
    FintConfig,
    FintModel,
    TapeMismatch,
    closed_form_param_count,
    interact_loop,
    interact_matrix,
)
from fint.numkernel import ShapeError, set_precision
from fint.optim import SparseRows, dense

HAND_V0 = np.array([[1.0, 2.0], [3.0, 4.0]])
HAND_W = np.array([[0.5, 1.0], [0.0, 2.0]])
HAND_U = np.array([1.0, 0.0])


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestInteractionLayer:
    def test_hand_example_loop(self):
        # field 0: 0.5*[1,2]*[1,2] + 1*[1,2]*[3,4] + [1,2] = [4.5, 12]
        # field 1: 2*[3,4]*[3,4] = [18, 32]
        np.testing.assert_array_equal(interact_loop(HAND_V0, HAND_V0, HAND_W, HAND_U), [[4.5, 12.0], [18.0, 32.0]])

    def test_hand_example_matrix_bit_for_bit(self):
        assert np.array_equal(interact_matrix(HAND_V0, HAND_V0, HAND_W, HAND_U), interact_loop(HAND_V0, HAND_V0, HAND_W, HAND_U))

    @pytest.mark.parametrize("backend", kernels.available_backends())
    def test_hand_example_batched(self, backend):
        kernels.use_backend(backend)
        out, _ = kernels.interact_forward(HAND_V0[None], HAND_V0[None], HAND_W, HAND_U)
        np.testing.assert_array_equal(out[0], [[4.5, 12.0], [18.0, 32.0]])

    def test_random_instances_agree(self, rng):
        worst = 0.0
        for _ in range(100):
            M, D = rng.integers(1, 9, 2)
            V0, Vp = rng.normal(size=(M, D)), rng.normal(size=(M, D))
            W, U = rng.normal(size=(M, M)), rng.normal(size=M)
            worst = max(worst, rel_err(interact_matrix(V0, Vp, W, U), interact_loop(V0, Vp, W, U)))
        assert worst <= 1e-12

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_residual_identity_bit_exact(self, M, D, seed):
        rng = np.random.default_rng(seed)
        V0, Vp = rng.normal(size=(M, D)), rng.normal(size=(M, D))
        W, U = np.zeros((M, M)), np.ones(M)
        assert np.array_equal(interact_loop(V0, Vp, W, U), Vp)
        assert np.array_equal(interact_matrix(V0, Vp, W, U), Vp)
        assert np.array_equal(kernels.interact_forward(V0[None], Vp[None], W, U)[0][0], Vp)

    def test_zero_input_absorbs(self, rng):
        M, D = 5, 3
        W, U = rng.normal(size=(M, M)), rng.normal(size=M)
        V = np.zeros((M, D))
        for _ in range(3):
            V = interact_matrix(np.zeros((M, D)), V, W, U)
        assert not V.any()

    def test_identity_weight_gives_hadamard(self, rng):
        V0, Vp = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(interact_matrix(V0, Vp, np.eye(4), np.zeros(4)), Vp * V0, rtol=0, atol=0)

    @given(st.integers(1, 8), st.integers(1, 8), st.floats(-4, 4), st.integers(0, 2**31))
    def test_degree_two_in_v0(self, M, D, c, seed):
        rng = np.random.default_rng(seed)
        V0, W = rng.normal(size=(M, D)), rng.normal(size=(M, M))
        U = np.zeros(M)
        base = interact_matrix(V0, V0, W, U)
        scaled = interact_matrix(c * V0, c * V0, W, U)
        assert np.max(np.abs(scaled - c * c * base)) <= 1e-12 * max(1.0, np.max(np.abs(c * c * base)))

    @pytest.mark.parametrize(
        "shapes",
        [((2, 2), (2, 3), (2, 2), (2,)), ((2, 2), (2, 2), (2, 3), (2,)), ((2, 2), (2, 2), (2, 2), (3,))],
    )
    def test_shape_errors(self, shapes):
        args = [np.ones(s) for s in shapes]
        with pytest.raises(ShapeError):
            interact_loop(*args)
        with pytest.raises(ShapeError):
            interact_matrix(*args)

    def test_dxd_weight_rejected(self):
        # a D x D weight (D != M) does not type-check against V0
        with pytest.raises(ShapeError):
            interact_matrix(np.ones((3, 2)), np.ones((3, 2)), np.ones((2, 2)), np.ones(3))


def tiny_model(K=1, hidden=(3,), D=2, fields=None, seed=0):
    fields = fields or [FieldSchema("a", "categorical", 3), FieldSchema("b", "categorical", 4)]
    return FintModel(fields, FintConfig(D, K, hidden, seed=seed))


class TestEmbed:
    def test_multivalent_sum_and_empty(self):
        fields = [FieldSchema("m", "multivalent", 5, max_values=3)]
        model = tiny_model(fields=fields)
        params = model.init_params()
        E = params["embedding"]
        batch = MiniBatch(np.zeros(2, np.uint8), np.zeros((2, 0), np.int64), np.zeros((2, 0)),
                          [np.array([[2, 4, -1], [-1, -1, -1]])])
        V0 = model.embed(batch, params)
        np.testing.assert_array_equal(V0[0, 0], E[2] + E[4])
        np.testing.assert_array_equal(V0[1, 0], 0.0)

    def test_numeric_zero_raw_gives_vector(self):
        from fint.data import normalize_numeric

        fields = [FieldSchema("c", "categorical", 3), FieldSchema("n", "numeric")]
        model = tiny_model(fields=fields)
        params = model.init_params()
        batch = MiniBatch(np.zeros(1, np.uint8), np.array([[2]]), np.array([[normalize_numeric(0.0)]]), [])
        np.testing.assert_array_equal(model.embed(batch, params)[0, 1], params["numeric"][0])

    def test_offsets_per_field(self):
        model = tiny_model()
        params = model.init_params()
        batch = MiniBatch(np.zeros(1, np.uint8), np.array([[1, 3]]), np.zeros((1, 0)), [])
        V0 = model.embed(batch, params)
        np.testing.assert_array_equal(V0[0, 0], params["embedding"][1])
        np.testing.assert_array_equal(V0[0, 1], params["embedding"][3 + 3])

    @pytest.mark.parametrize("bad", [[[3, 0]], [[0, 4]], [[-1, 0]]])
    def test_out_of_range_is_error(self, bad):
        model = tiny_model()
        batch = MiniBatch(np.zeros(1, np.uint8), np.array(bad), np.zeros((1, 0)), [])
        with pytest.raises(IndexError):
            model.forward(batch, model.init_params())


def straight_line(model, params, cat_row):
    """Scalar evaluation of the M=2, D=2, K=1, hidden [3] network for one example."""
    E = params["embedding"]
    v0 = [list(E[cat_row[0]]), list(E[3 + cat_row[1]])]
    W, U = params["interaction.1.W"], params["interaction.1.U"]
    v1 = []
    for i in range(2):
        row = []
        for d in range(2):
            s = sum(W[i, j] * v0[i][d] * v0[j][d] for j in range(2))
            row.append(s + U[i] * v0[i][d])
        v1.append(row)
    x = [v1[0][0], v1[0][1], v1[1][0], v1[1][1]]
    W1, b1 = params["ffn.0.weight"], params["ffn.0.bias"]
    h = [max(0.0, sum(x[k] * W1[k, u] for k in range(4)) + b1[u]) for u in range(3)]
    Wo, bo = params["output.weight"], params["output.bias"]
    z = sum(h[u] * Wo[u, 0] for u in range(3)) + bo[0]
    return 1.0 / (1.0 + math.exp(-z))


class TestForward:
    def test_matches_straight_line_oracle(self, rng):
        model = tiny_model()
        params = model.init_params(3)
        params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in params.items()}
        cat = np.array([[0, 0], [1, 3], [2, 1], [2, 2]])
        batch = MiniBatch(np.zeros(4, np.uint8), cat, np.zeros((4, 0)), [])
        yhat, _ = model.forward(batch, params)
        want = [straight_line(model, params, r) for r in cat]
        np.testing.assert_allclose(yhat, want, rtol=1e-12)

    def test_zero_head_gives_half(self, rng):
        fields = mixed_fields()
        model = FintModel(fields, FintConfig(4, 2, (5, 3)))
        params = model.init_params()
        for k in params:
            if k.startswith(("ffn.", "output.")):
                params[k][...] = 0.0
        yhat, _ = model.forward(random_batch(fields, 9, rng), params)
        assert np.all(yhat == 0.5)

    def test_zero_layers_is_mlp_on_embeddings(self, rng):
        fields = mixed_fields()
        model = FintModel(fields, FintConfig(4, 0, (5,)))
        params = model.init_params()
        batch = random_batch(fields, 6, rng)
        yhat, tape = model.forward(batch, params)
        x = model.embed(batch, params).reshape(6, -1)
        h = np.maximum(x @ params["ffn.0.weight"] + params["ffn.0.bias"], 0)
        z = (h @ params["output.weight"] + params["output.bias"])[:, 0]
        np.testing.assert_allclose(yhat, 1 / (1 + np.exp(-z)), rtol=1e-13)
        assert len(tape.V) == 1

    def test_permutation_equivariance(self, rng):
        fields = [FieldSchema(f"f{i}", "categorical", 4 + i) for i in range(5)]
        D, K = 3, 2
        model = FintModel(fields, FintConfig(D, K, (6,)))
        params = model.init_params(1)
        for l in range(1, K + 1):
            params[f"interaction.{l}.U"] = rng.normal(size=5)
        batch = random_batch(fields, 12, rng)
        perm = np.array([3, 0, 4, 1, 2])

        pf = [fields[p] for p in perm]
        pmodel = FintModel(pf, FintConfig(D, K, (6,)))
        pp = {k: v.copy() for k, v in params.items()}
        offs = np.concatenate([[0], np.cumsum([f.vocab_size for f in fields])])
        pp["embedding"] = np.concatenate([params["embedding"][offs[p] : offs[p + 1]] for p in perm])
        for l in range(1, K + 1):
            pp[f"interaction.{l}.W"] = params[f"interaction.{l}.W"][np.ix_(perm, perm)]
            pp[f"interaction.{l}.U"] = params[f"interaction.{l}.U"][perm]
        blocks = params["ffn.0.weight"].reshape(5, D, -1)
        pp["ffn.0.weight"] = blocks[perm].reshape(5 * D, -1)
        pbatch = MiniBatch(batch.labels, batch.cat[:, perm], batch.num, [])

        y, _ = model.forward(batch, params)
        py, _ = pmodel.forward(pbatch, pp)
        assert np.max(np.abs(y - py)) <= 1e-12

    def test_output_in_open_interval(self):
        model = tiny_model()
        params = model.init_params()
        params["output.bias"][0] = 1e4
        batch = MiniBatch(np.zeros(1, np.uint8), np.array([[0, 0]]), np.zeros((1, 0)), [])
        y, _ = model.forward(batch, params)
        assert 0.0 < y[0] < 1.0

    def test_non_finite_activation_names_layer(self):
        model = tiny_model(K=2)
        params = model.init_params()
        params["interaction.1.W"][...] = 1e200
        params["embedding"][...] = 1e200
        batch = MiniBatch(np.zeros(1, np.uint8), np.array([[0, 0]]), np.zeros((1, 0)), [])
        with pytest.raises(FloatingPointError, match="interaction.1"):
            model.forward(batch, params)

    def test_float32_mode(self, rng):
        set_precision("float32")
        fields = mixed_fields()
        model = FintModel(fields, FintConfig(4, 2, (5,)))
        params = model.init_params()
        assert params["embedding"].dtype == np.float32
        y, tape = model.forward(random_batch(fields, 5, rng), params)
        assert tape.V[-1].dtype == np.float32


class TestBackward:
    def setup_model(self, rng, rows=10):
        fields = mixed_fields(n_cat=2, n_num=2, n_multi=1, vocab=8)
        model = FintModel(fields, FintConfig(3, 2, (4, 3)))
        params = model.init_params(2)
        batch = random_batch(fields, rows, rng)
        return model, params, batch

    def test_zero_upstream(self, rng):
        model, params, batch = self.setup_model(rng)
        _, tape = model.forward(batch, params)
        grads = model.backward(tape, params, grad_logit=np.zeros(len(batch)))
        assert set(grads) == set(params)
        assert all(not np.any(dense(g)) for g in grads.values())

    def test_shapes_mirror_params(self, rng):
        model, params, batch = self.setup_model(rng)
        y, tape = model.forward(batch, params)
        grads = model.backward(tape, params, grad_yhat=y - batch.labels)
        for k, g in grads.items():
            assert dense(g).shape == params[k].shape

    def test_untouched_rows_exactly_zero(self, rng):
        model, params, batch = self.setup_model(rng, rows=3)
        y, tape = model.forward(batch, params)
        g = model.backward(tape, params, grad_logit=y - batch.labels)["embedding"]
        assert isinstance(g, SparseRows)
        used = set(tape.batch.cat[:, 0].tolist()) | {8 + i for i in tape.batch.cat[:, 1]}
        used |= {17 + i for i in tape.batch.multi[0].ravel() if i >= 0}
        assert set(g.rows.tolist()) == used
        full = g.to_dense()
        assert not np.any(np.delete(full, sorted(used), axis=0))

    def test_grad_yhat_and_grad_logit_agree(self, rng):
        model, params, batch = self.setup_model(rng)
        y, tape = model.forward(batch, params)
        gy = rng.normal(size=len(batch))
        a = model.backward(tape, params, grad_yhat=gy)
        b = model.backward(tape, params, grad_logit=gy * y * (1 - y))
        for k in a:
            np.testing.assert_allclose(dense(a[k]), dense(b[k]), rtol=1e-13, atol=1e-16)

    def test_tape_mismatch(self, rng):
        model, params, batch = self.setup_model(rng)
        _, tape = model.forward(batch, params)
        other = FintModel(model.layout.fields, FintConfig(3, 1, (4, 3))).init_params()
        with pytest.raises(TapeMismatch):
            model.backward(tape, other, grad_logit=np.zeros(len(batch)))

    def test_needs_an_upstream_gradient(self, rng):
        model, params, batch = self.setup_model(rng)
        _, tape = model.forward(batch, params)
        with pytest.raises(ValueError):
            model.backward(tape, params)

    def test_backends_give_same_gradients(self, rng):
        if len(kernels.available_backends()) < 2:
            pytest.skip("compiled backend not built")
        model, params, batch = self.setup_model(rng, rows=40)
        out = {}
        for name in kernels.available_backends():
            kernels.use_backend(name)
            y, tape = model.forward(batch, params)
            out[name] = model.backward(tape, params, grad_logit=y - batch.labels)
        a, b = out.values()
        for k in a:
            np.testing.assert_allclose(dense(a[k]), dense(b[k]), rtol=1e-11, atol=1e-14)


class TestInit:
    def test_same_seed_bit_identical(self):
        fields = mixed_fields()
        a = FintModel(fields, FintConfig(4, 2, (5,))).init_params(7)
        b = FintModel(fields, FintConfig(4, 2, (5,))).init_params(7)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_structure(self):
        fields = mixed_fields()
        params = FintModel(fields, FintConfig(4, 2, (5,))).init_params()
        assert np.all(params["interaction.1.U"] == 1.0) and np.all(params["interaction.2.U"] == 1.0)
        assert not params["ffn.0.bias"].any() and not params["output.bias"].any()
        assert np.max(np.abs(params["interaction.1.W"])) <= math.sqrt(6 / (2 * len(fields)))
        assert np.max(np.abs(params["ffn.0.weight"])) <= math.sqrt(6 / (len(fields) * 4 + 5))

    def test_near_identity_at_init(self, rng):
        fields = [FieldSchema(f"f{i}", "categorical", 50) for i in range(10)]
        model = FintModel(fields, FintConfig(16, 3, (8,)))
        params = model.init_params()
        _, tape = model.forward(random_batch(fields, 64, rng), params)
        ratio = np.linalg.norm(tape.V[-1] - tape.V[0]) / np.linalg.norm(tape.V[0])
        assert ratio < 1.0

    def test_criteo_sized_count(self):
        # 13 numeric + 26 categorical fields, D=16, K=3, hidden [300,300,300]
        sizes = [1000 + 37 * k for k in range(26)]
        fields = [FieldSchema(f"I{k}", "numeric") for k in range(13)]
        fields += [FieldSchema(f"C{k}", "categorical", s) for k, s in enumerate(sizes)]
        model = FintModel(fields, FintConfig(16, 3, (300, 300, 300)))
        vocab = sum(sizes)
        audit = (
            vocab * 16 + 13 * 16  # tables
            + 3 * (39 * 39 + 39)  # W, U per layer
            + (624 * 300 + 300) + 2 * (300 * 300 + 300) + (300 * 1 + 1)  # head
        )
        assert model.num_params() == audit
        assert closed_form_param_count(vocab, 13, 39, 16, 3, (300, 300, 300)) == audit

    @pytest.mark.parametrize("kwargs", [{"embed_dim": 0}, {"num_layers": -1}, {"hidden": (0,)}, {"dropout": 1.0}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            FintConfig(**kwargs)
