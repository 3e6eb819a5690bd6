import csv
import math

import numpy as np
import pytest

from caliber import crossmodal as cm
from caliber import numerics as nx
from caliber.adapters import expected_param_count
from caliber.errors import ContextError, DimensionError
from caliber.numerics import GradTape, Rng


def _layer(rng, r=3, c=4, d_c=4):
    return {
        "WQ": rng.normal(size=(d_c, r)), "WK": rng.normal(size=(c, d_c)),
        "WV": rng.normal(size=(c, d_c)), "WO": rng.normal(size=(r, d_c)),
    }


def _proj(d_a=5, hidden=3, c=2, seed=0):
    return cm.init_projection(Rng(seed), d_a, hidden, c)


class TestProjection:
    def test_zero_weights_give_bias_rows(self):
        P = {k: np.zeros_like(v) for k, v in _proj().items()}
        P["audio.b2"] = np.array([0.25, -1.0])
        U = cm.project_audio(cm.AudioFrames(np.ones((4, 5))), P)
        np.testing.assert_array_equal(U, np.tile([0.25, -1.0], (4, 1)))

    def test_all_zero_gives_zero_matrix(self):
        P = {k: np.zeros_like(v) for k, v in _proj().items()}
        assert np.all(cm.project_audio(cm.AudioFrames(np.ones((3, 5))), P) == 0.0)

    def test_single_frame_single_row(self):
        assert cm.project_audio(cm.AudioFrames(np.ones((1, 5))), _proj()).shape == (1, 2)

    def test_scalar_oracle(self):
        frames = np.random.default_rng(3).normal(size=(3, 5))
        W1 = np.array([[0.1, -0.2, 0.3, 0.0, 0.5], [0.4, 0.4, -0.1, 0.2, -0.3]])
        b1 = np.array([0.05, -0.1])
        W2 = np.array([[1.0, -2.0], [0.5, 0.25]])
        b2 = np.array([0.3, 0.0])
        P = {"audio.W1": W1, "audio.b1": b1, "audio.W2": W2, "audio.b2": b2}
        expected = []
        for a in frames:
            h = [math.tanh(sum(W1[i][j] * a[j] for j in range(5)) + b1[i]) for i in range(2)]
            expected.append([sum(W2[o][i] * h[i] for i in range(2)) + b2[o] for o in range(2)])
        np.testing.assert_allclose(cm.project_audio(cm.AudioFrames(frames), P), expected, atol=1e-14)

    def test_masked_rows_zero(self):
        U = cm.project_audio(cm.AudioFrames(np.ones((3, 5)), np.array([True, False, True])), _proj())
        assert np.all(U[1] == 0.0) and np.any(U[0] != 0.0)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            cm.project_audio(cm.AudioFrames(np.ones((2, 4))), _proj(d_a=5))

    def test_bad_frames(self):
        with pytest.raises(DimensionError):
            cm.AudioFrames(np.ones(5))

    def test_normalize_frames(self):
        f = np.array([[1.0, 3.0], [0.0, 0.0]])
        out = cm.normalize_frames(f)
        np.testing.assert_allclose(out[0], [-1.0, 1.0], atol=1e-5)
        assert np.all(out[1] == 0.0)


class TestCrossAttention:
    def test_hand_set_two_frames(self):
        layer = {"WQ": np.array([[1.0, 0.0], [0.0, 2.0]]), "WK": np.eye(2),
                 "WV": np.array([[1.0, 2.0], [3.0, 4.0]]), "WO": np.eye(2)}
        U = np.eye(2)
        ctx, w = cm.cross_attention_context([1.0, -1.0], U, layer, heads=1)
        s0, s1 = 1.0 / math.sqrt(2.0), -2.0 / math.sqrt(2.0)
        w0 = math.exp(s0) / (math.exp(s0) + math.exp(s1))
        np.testing.assert_allclose(w, [w0, 1.0 - w0], atol=1e-15)
        np.testing.assert_allclose(ctx, [w0 * 1 + (1 - w0) * 3, w0 * 2 + (1 - w0) * 4], atol=1e-14)

    def test_two_heads_share_sqrt_dc_scaling(self):
        # Two heads of width 1: each head's logit is q_h * k_h / sqrt(d_c).
        layer = {"WQ": np.eye(2), "WK": np.eye(2), "WV": np.eye(2), "WO": np.eye(2)}
        U = np.array([[1.0, 0.0], [0.0, 1.0]])
        z = np.array([2.0, -1.0])
        ctx, _ = cm.cross_attention_context(z, U, layer, heads=2)
        sm0 = 1.0 / (1.0 + math.exp(-2.0 / math.sqrt(2.0)))
        sm1 = 1.0 / (1.0 + math.exp(-1.0 / math.sqrt(2.0)))
        np.testing.assert_allclose(ctx, [sm0, 1.0 - sm1], atol=1e-15)

    def test_single_frame_ignores_query(self):
        rng = np.random.default_rng(0)
        layer = _layer(rng)
        U = rng.normal(size=(1, 4))
        c1, w1 = cm.cross_attention_context(rng.normal(size=3), U, layer, heads=2)
        c2, _ = cm.cross_attention_context(rng.normal(size=3), U, layer, heads=2)
        np.testing.assert_array_equal(w1, [1.0])
        np.testing.assert_allclose(c1, layer["WO"] @ (U[0] @ layer["WV"]), atol=1e-14)
        np.testing.assert_allclose(c1, c2, atol=1e-15)

    def test_identical_frames_uniform(self):
        rng = np.random.default_rng(1)
        layer = _layer(rng)
        u = rng.normal(size=4)
        c5, w5 = cm.cross_attention_context(rng.normal(size=3), np.tile(u, (5, 1)), layer, heads=2)
        c1, _ = cm.cross_attention_context(rng.normal(size=3), u[None], layer, heads=2)
        np.testing.assert_allclose(w5, 0.2, atol=1e-15)
        np.testing.assert_allclose(c5, c1, atol=1e-14)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        layer = _layer(rng)
        U, z = rng.normal(size=(7, 4)), rng.normal(size=3)
        mask = np.array([1, 1, 0, 1, 0, 1, 1], bool)
        perm = rng.permutation(7)
        a, wa = cm.cross_attention_context(z, U, layer, mask, heads=2)
        b, wb = cm.cross_attention_context(z, U[perm], layer, mask[perm], heads=2)
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(wa[perm], wb, atol=1e-15)

    def test_weights_sum_and_mask(self):
        rng = np.random.default_rng(3)
        mask = np.array([0, 1, 1, 0, 1], bool)
        _, w = cm.cross_attention_context(rng.normal(size=3), rng.normal(size=(5, 4)), _layer(rng), mask, heads=2)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w[~mask] == 0.0)

    def test_all_masked_is_context_error(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ContextError):
            cm.cross_attention_context(rng.normal(size=3), rng.normal(size=(3, 4)), _layer(rng), np.zeros(3, bool))

    def test_heads_must_divide(self):
        rng = np.random.default_rng(5)
        with pytest.raises(DimensionError):
            cm.cross_attention_context(rng.normal(size=3), rng.normal(size=(3, 4)), _layer(rng), heads=3)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(6)
        layer = _layer(rng)
        z, U = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 5, 4))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
        ctx, w = cm.attend(z, U, layer["WQ"], layer["WK"], layer["WV"], layer["WO"], mask, 2)
        for b in range(2):
            for t in range(3):
                c, _ = cm.cross_attention_context(z[b, t], U[b], layer, mask[b], heads=2)
                np.testing.assert_allclose(ctx.value[b, t], c, atol=1e-14)

    def test_gradients_reach_every_weight(self):
        rng = np.random.default_rng(7)
        params = {**{k: v for k, v in _layer(rng, r=2, c=2, d_c=2).items()},
                  **_proj(d_a=3, hidden=3, c=2, seed=1)}
        frames = rng.normal(size=(1, 4, 3))
        z = rng.normal(size=(1, 2, 2))
        mask = np.ones((1, 4), bool)

        def build(P):
            U = cm.project_sequence(frames, P)
            ctx, _ = cm.attend(z, U, P["WQ"], P["WK"], P["WV"], P["WO"], mask, 1)
            return nx.square(ctx).sum()

        tape = GradTape()
        g = tape.backward(build(tape.bind(params)))
        num = nx.finite_diff_gradient(lambda q: build({k: nx.const(v) for k, v in q.items()}).value, params)
        assert max(nx.max_relative_error(g, num).values()) < 1e-6
        for name, v in g.items():
            assert np.any(v != 0.0), name


class TestGlobalContext:
    def setup_method(self):
        rng = np.random.default_rng(8)
        self.P = _proj(d_a=5, hidden=4, c=16, seed=2)
        self.maps = {f"L{i}.q": (rng.normal(size=(8, 16)), rng.normal(size=8)) for i in range(2)}

    def test_identical_frames_equal_single(self):
        f = np.random.default_rng(9).normal(size=5)
        many = cm.global_audio_context(cm.AudioFrames(np.tile(f, (6, 1))), self.P, self.maps)
        one = cm.global_audio_context(cm.AudioFrames(f[None]), self.P, self.maps)
        for k in many:
            np.testing.assert_allclose(many[k], one[k], atol=1e-14)

    def test_permutation_invariant(self):
        f = np.random.default_rng(10).normal(size=(6, 5))
        a = cm.global_audio_context(cm.AudioFrames(f), self.P, self.maps)
        b = cm.global_audio_context(cm.AudioFrames(f[::-1]), self.P, self.maps)
        for k in a:
            np.testing.assert_allclose(a[k], b[k], atol=1e-14)

    def test_output_width_r(self):
        out = cm.global_audio_context(cm.AudioFrames(np.ones((3, 5))), self.P, self.maps)
        assert all(v.shape == (8,) for v in out.values())

    def test_masked_frames_ignored(self):
        f = np.random.default_rng(11).normal(size=(4, 5))
        mask = np.array([1, 0, 1, 0], bool)
        a = cm.global_audio_context(cm.AudioFrames(f, mask), self.P, self.maps)
        b = cm.global_audio_context(cm.AudioFrames(f[mask]), self.P, self.maps)
        for k in a:
            np.testing.assert_allclose(a[k], b[k], atol=1e-14)

    def test_all_masked(self):
        with pytest.raises(ContextError):
            cm.global_audio_context(cm.AudioFrames(np.ones((2, 5)), np.zeros(2, bool)), self.P, self.maps)


class TestSharedKV:
    @pytest.mark.parametrize("n_sites", [1, 2, 4, 6])
    def test_parameter_saving(self, n_sites):
        c, d_c = 16, 16
        full = expected_param_count("caliber_x", n_sites, 8, 32, 32, 2, c=c, d_c=d_c)
        shared = expected_param_count("caliber_x_shared", n_sites, 8, 32, 32, 2, c=c, d_c=d_c)
        assert full - shared == (n_sites - 1) * 2 * c * d_c


class TestAttentionRecord:
    def test_csv(self, tmp_path):
        rec = cm.AttentionRecord({"L0.q": np.array([[0.25, 0.75], [1.0, 0.0]])})
        path = tmp_path / "a.csv"
        rec.to_csv(str(path))
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["layer", "token_index", "frame_index", "weight"]
        assert rows[1:] == [["L0.q", "0", "0", "0.25"], ["L0.q", "0", "1", "0.75"],
                            ["L0.q", "1", "0", "1.0"], ["L0.q", "1", "1", "0.0"]]
