import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvse.autodiff import Tape, Tensor, grad_check, sum_all
from mvse.config import Dims
from mvse.model import init_params
from mvse.text import (
    EmbeddingTable,
    EmptySentenceError,
    GruParams,
    TextProjections,
    gru_encode,
    lookup,
    lookup_indices,
    project_text,
    tokenize,
)

DIMS = Dims.small()


def _zeros_gru(e: int, h: int) -> GruParams:
    z = lambda shape: Tensor(np.zeros(shape))
    return GruParams(
        w_z=z((h, e)), u_z=z((h, h)), b_z=z(h),
        w_r=z((h, e)), u_r=z((h, h)), b_r=z(h),
        w_c=z((h, e)), u_c=z((h, h)), b_c=z(h),
    )


def _random_gru(e: int, h: int, seed: int) -> GruParams:
    rng = np.random.default_rng(seed)
    r = lambda shape: Tensor(rng.normal(scale=0.5, size=shape))
    return GruParams(
        w_z=r((h, e)), u_z=r((h, h)), b_z=r(h),
        w_r=r((h, e)), u_r=r((h, h)), b_r=r(h),
        w_c=r((h, e)), u_c=r((h, h)), b_c=r(h),
    )


def _reference_gru(xs: np.ndarray, p: GruParams) -> np.ndarray:
    """Scalar-by-scalar recurrence oracle, independent of the tensor engine."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    h = np.zeros(p.b_z.data.shape[0])
    for x in xs:
        z = sig(p.w_z.data @ x + p.u_z.data @ h + p.b_z.data)
        r = sig(p.w_r.data @ x + p.u_r.data @ h + p.b_r.data)
        c = np.tanh(p.w_c.data @ x + p.u_c.data @ (r * h) + p.b_c.data)
        h = (1 - z) * h + z * c
    return h


class TestTokenize:
    def test_sentence(self):
        assert tokenize("A man is singing.") == ["a", "man", "is", "singing"]

    def test_single(self):
        assert tokenize("dog") == ["dog"]

    def test_punctuation_stripped(self):
        assert tokenize("Two dogs, one cat!") == ["two", "dogs", "one", "cat"]

    def test_empty_raises(self):
        with pytest.raises(EmptySentenceError):
            tokenize("   ")
        with pytest.raises(EmptySentenceError):
            tokenize("!!! ...")


class TestLookup:
    def _table(self, policy="zero"):
        vectors = np.arange(12, dtype=np.float64).reshape(3, 4)
        return EmbeddingTable(vocab={"cat": 0, "dog": 1, "run": 2}, vectors=vectors, oov_policy=policy)

    def test_known_token_verbatim(self):
        out = lookup(["dog", "cat"], self._table())
        np.testing.assert_array_equal(out.data, [[4, 5, 6, 7], [0, 1, 2, 3]])

    def test_oov_zero_policy(self):
        out = lookup(["zebra"], self._table("zero"))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_oov_hashed_is_deterministic(self):
        t = self._table("hashed-random")
        a = lookup(["zebra"], t).data
        b = lookup(["zebra", "zebra"], t).data
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(b[0], b[1])
        other = lookup(["okapi"], t).data
        assert not np.array_equal(a[0], other[0])

    def test_lookup_copies_rows(self):
        t = self._table()
        out = lookup(["cat"], t)
        out.data[0, 0] = 99.0
        assert t.vectors[0, 0] == 0.0

    def test_index_lookup(self):
        t = self._table()
        out = lookup_indices([2, 0], t.vectors)
        np.testing.assert_array_equal(out.data, t.vectors[[2, 0]])

    def test_bad_policy_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingTable(vocab={}, vectors=np.zeros((1, 2)), oov_policy="ones")


class TestGru:
    def test_zero_input_zero_bias_gives_zero(self):
        params = _random_gru(3, 4, seed=0)
        for name in ("b_z", "b_r", "b_c"):
            getattr(params, name).data[:] = 0.0
        phi = gru_encode(Tensor(np.zeros((1, 3))), params)
        np.testing.assert_allclose(phi.data, 0.0, atol=1e-15)

    def test_two_step_matches_hand_unroll(self):
        rng = np.random.default_rng(42)
        xs = rng.normal(size=(2, 2))
        params = _random_gru(2, 2, seed=1)
        phi = gru_encode(Tensor(xs), params)
        np.testing.assert_allclose(phi.data, _reference_gru(xs, params), atol=1e-12)

    @given(seed=st.integers(0, 2**31), t_steps=st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_hidden_state_strictly_inside_unit_box(self, seed, t_steps):
        rng = np.random.default_rng(seed)
        xs = rng.normal(scale=3.0, size=(t_steps, 3))
        params = _random_gru(3, 5, seed=seed % 1000)
        phi = gru_encode(Tensor(xs), params)
        assert np.all(np.abs(phi.data) < 1.0)

    def test_longer_sequence_matches_hand_unroll(self):
        rng = np.random.default_rng(7)
        xs = rng.normal(size=(5, 3))
        params = _random_gru(3, 4, seed=3)
        phi = gru_encode(Tensor(xs), params)
        np.testing.assert_allclose(phi.data, _reference_gru(xs, params), atol=1e-12)

    def test_token_permutation_changes_phi(self):
        rng = np.random.default_rng(5)
        xs = rng.normal(size=(4, 3))
        params = _random_gru(3, 4, seed=9)
        phi = gru_encode(Tensor(xs), params).data
        phi_perm = gru_encode(Tensor(xs[::-1].copy()), params).data
        assert np.linalg.norm(phi - phi_perm) > 1e-6

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        xs = Tensor(rng.normal(size=(3, 3)))
        params = _random_gru(3, 4, seed=21)
        for tensor in (params.w_z, params.u_c, params.b_r):
            err = grad_check(lambda _: sum_all(gru_encode(xs, params)), tensor)
            assert err < 1e-4

    def test_embedding_table_stays_frozen(self):
        table = EmbeddingTable.random(vocab_size=6, token_dim=4, seed=0)
        before = table.vectors.copy()
        params = _random_gru(4, 4, seed=2)
        with Tape() as tape:
            vecs = lookup(["w0", "w3"], table)
            loss = sum_all(gru_encode(vecs, params))
            tape.backward(loss)
        np.testing.assert_array_equal(table.vectors, before)
        # token constants are leaves; the table array itself is untouched by any gradient
        assert np.all(tape.grad(params.w_z) != 0) or np.any(tape.grad(params.w_z) != 0)


class TestProjectText:
    def _projections(self, w, b):
        return TextProjections(weights={"global": (Tensor(w), Tensor(b))})

    def test_identity(self):
        phi = Tensor([1.0, -2.0, 3.0])
        proj = self._projections(np.eye(3), np.zeros(3))
        np.testing.assert_allclose(project_text(phi, "global", proj).data, phi.data)

    def test_constant_map(self):
        proj = self._projections(np.zeros((2, 3)), np.array([5.0, -1.0]))
        for v in ([1.0, 2.0, 3.0], [0.0, 0.0, 9.0]):
            np.testing.assert_allclose(project_text(Tensor(v), "global", proj).data, [5.0, -1.0])

    def test_matches_matvec_oracle(self):
        rng = np.random.default_rng(31)
        w, b, phi = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=3)
        out = project_text(Tensor(phi), "global", self._projections(w, b))
        np.testing.assert_allclose(out.data, w @ phi + b, atol=1e-14)

    def test_unknown_space_rejected(self):
        with pytest.raises(ValueError, match="unknown embedding space"):
            project_text(Tensor([1.0]), "audio", TextProjections())
        with pytest.raises(ValueError, match="no configured"):
            project_text(Tensor([1.0]), "action", TextProjections())

    @given(alpha=st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=30)
    def test_projection_is_affine(self, alpha):
        rng = np.random.default_rng(8)
        proj = self._projections(rng.normal(size=(3, 3)), rng.normal(size=3))
        u, v = rng.normal(size=3), rng.normal(size=3)
        mixed = project_text(Tensor(alpha * u + (1 - alpha) * v), "global", proj).data
        combo = (
            alpha * project_text(Tensor(u), "global", proj).data
            + (1 - alpha) * project_text(Tensor(v), "global", proj).data
        )
        np.testing.assert_allclose(mixed, combo, atol=1e-9)


def test_init_params_projection_dims():
    params = init_params(DIMS, ("global", "sequential", "action"), seed=0)
    assert params.projections.weights["global"][0].shape == (DIMS.embed_dim, DIMS.hidden)
    assert params.projections.weights["action"][0].shape == (DIMS.c_action, DIMS.hidden)
    phi = Tensor(np.random.default_rng(0).normal(size=DIMS.hidden))
    assert project_text(phi, "action", params.projections).shape == (DIMS.c_action,)
