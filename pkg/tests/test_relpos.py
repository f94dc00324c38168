import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddrplab.errors import ConfigError
from ddrplab.model import PRESETS, ModelConfig
from ddrplab.relpos import (
    KINDS,
    EncodingParams,
    RelPosIndexer,
    attend,
    attention_ddrp,
    attention_deberta,
    attention_shaw,
    attention_tupe,
    attention_vanilla,
    ddrp_table,
    ddrp_vector_count,
    delta_rho,
    encoding_shapes,
    extra_param_count,
    sigma_index,
)
from ddrplab.tensor import Tensor

# -- scalar oracles, written from the definitions without the library's index helpers ----------


def o_sigma(i, j, r_s):
    x = i - j
    if x < -r_s:
        x = -r_s
    if x > r_s - 1:
        x = r_s - 1
    return x + r_s


def o_delta_rho(i, j, r_s):
    x = i - j
    if x < -(r_s - 1):
        x = -(r_s - 1)
    if x > r_s - 1:
        x = r_s - 1
    rho = 0 if i == j else (1 if i < j else 2)
    return abs(x), rho


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def o_attention(kind, Q, K, p, r_s, deberta_swap=False):
    S, d = Q.shape
    A = np.zeros((S, S))
    for i in range(S):
        for j in range(S):
            if kind == "absolute":
                A[i, j] = dot(Q[i], K[j]) / math.sqrt(d)
            elif kind == "shaw":
                A[i, j] = dot(Q[i], K[j] + p["Kr"][o_sigma(i, j, r_s)]) / math.sqrt(d)
            elif kind == "tupe":
                qp = p["P"][i] @ p["WPQ"]
                kp = p["P"][j] @ p["WPK"]
                A[i, j] = (dot(Q[i], K[j]) + dot(qp, kp)) / math.sqrt(2 * d) + p["b"][o_sigma(i, j, r_s)]
            elif kind == "deberta":
                third = o_sigma(i, j, r_s) if deberta_swap else o_sigma(j, i, r_s)
                A[i, j] = (
                    dot(Q[i], K[j]) + dot(Q[i], p["Kr"][o_sigma(i, j, r_s)]) + dot(K[j], p["Qr"][third])
                ) / math.sqrt(3 * d)
            elif kind == "ddrp":
                delta, rho = o_delta_rho(i, j, r_s)
                vec = np.array([
                    sum(p["Ddir"][rho][t] * p["Krd"][delta][t] * p["Wrd"][t][c] for t in range(d))
                    for c in range(d)
                ])
                A[i, j] = dot(Q[i], K[j] + vec) / math.sqrt(d)
    return A


def random_params(kind, rng, d, r_s, r_a=16, D=5):
    return {k: rng.normal(size=s) for k, s in encoding_shapes(kind, d, D, r_s, r_a).items()}


def run(kind, Q, K, V, p, r_s):
    enc = EncodingParams(kind, {k: Tensor(v) for k, v in p.items()})
    return attend(kind, Tensor(Q), Tensor(K), Tensor(V), enc, RelPosIndexer(r_s))


class TestIndexer:
    @pytest.mark.parametrize("i,j,expected", [(5, 3, 66), (0, 200, 0), (200, 0, 127)])
    def test_sigma_examples(self, i, j, expected):
        assert sigma_index(i, j, 64) == expected

    @pytest.mark.parametrize("i,j,expected", [(3, 3, (0, 0)), (2, 7, (5, 1)), (200, 0, (63, 2))])
    def test_delta_rho_examples(self, i, j, expected):
        assert delta_rho(i, j, 64) == expected

    def test_negative_extreme_conventions_differ(self):
        # offset -r_s: the offset table keeps it, the distance table folds it to r_s - 1
        assert sigma_index(0, 64, 64) == 0
        assert delta_rho(0, 64, 64) == (63, 1)
        assert delta_rho(0, 63, 64) == (63, 1)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 300), st.integers(0, 300), st.integers(1, 80))
    def test_properties(self, i, j, r_s):
        s = sigma_index(i, j, r_s)
        assert 0 <= s <= 2 * r_s - 1 and s == o_sigma(i, j, r_s)
        dl, rho = delta_rho(i, j, r_s)
        assert (dl, rho) == o_delta_rho(i, j, r_s)
        assert 0 <= dl <= r_s - 1
        assert delta_rho(j, i, r_s)[0] == dl
        if i != j:
            assert rho + delta_rho(j, i, r_s)[1] == 3
        if abs(i - j) <= r_s - 1:
            assert s + sigma_index(j, i, r_s) == 2 * r_s

    def test_matrices_match_scalar(self):
        idx = RelPosIndexer(3)
        sig, dd = idx.sigma_matrix(7), idx.ddrp_matrix(7)
        for i in range(7):
            for j in range(7):
                assert sig[i, j] == o_sigma(i, j, 3)
                dl, rho = o_delta_rho(i, j, 3)
                assert dd[i, j] == 3 * dl + rho

    def test_bad_r_s(self):
        with pytest.raises(ConfigError):
            RelPosIndexer(0)


class TestScalarOracles:
    @pytest.mark.parametrize("kind", KINDS)
    def test_random_draws(self, kind, rng):
        for _ in range(10):
            S, d, r_s = int(rng.integers(1, 9)), 3, int(rng.integers(1, 5))
            Q, K, V = (rng.normal(size=(S, d)) for _ in range(3))
            p = random_params(kind, rng, d, r_s)
            out = run(kind, Q, K, V, p, r_s)
            assert np.abs(out.weights.data - o_attention(kind, Q, K, p, r_s)).max() < 1e-12
            np.testing.assert_allclose(out.probs.data.sum(-1), 1.0, atol=1e-12)

    def test_batched_heads_match_per_head(self, rng):
        Q, K, V = (rng.normal(size=(2, 3, 6, 4)) for _ in range(3))
        p = random_params("ddrp", rng, 4, 3)
        A = run("ddrp", Q, K, V, p, 3).weights.data
        for b in range(2):
            for h in range(3):
                assert np.abs(A[b, h] - o_attention("ddrp", Q[b, h], K[b, h], p, 3)).max() < 1e-12


class TestReductions:
    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_position_params_give_vanilla(self, kind, rng):
        S, d = 5, 4
        Q, K, V = (rng.normal(size=(S, d)) for _ in range(3))
        p = {k: np.zeros_like(v) for k, v in random_params(kind, rng, d, 3).items()}
        scale = {"tupe": math.sqrt(2 * d), "deberta": math.sqrt(3 * d)}.get(kind, math.sqrt(d))
        ref = attention_vanilla(Tensor(Q), Tensor(K), Tensor(V), scale=scale)
        out = run(kind, Q, K, V, p, 3)
        np.testing.assert_allclose(out.weights.data, ref.weights.data, atol=1e-14)
        np.testing.assert_allclose(out.output.data, ref.output.data, atol=1e-14)

    def test_tupe_constant_bias_shift(self, rng):
        S, d = 4, 3
        Q, K, V = (rng.normal(size=(S, d)) for _ in range(3))
        p = random_params("tupe", rng, d, 2)
        p["P"][:] = 0.0
        p["b"][:] = 0.0
        base = run("tupe", Q, K, V, p, 2)
        p["b"][:] = 2.5
        shifted = run("tupe", Q, K, V, p, 2)
        np.testing.assert_allclose(shifted.weights.data - base.weights.data, 2.5, atol=1e-14)
        np.testing.assert_allclose(shifted.probs.data, base.probs.data, atol=1e-14)

    def test_tupe_sequence_longer_than_table(self, rng):
        Q = Tensor(rng.normal(size=(6, 3)))
        p = random_params("tupe", rng, 3, 2, r_a=4)
        with pytest.raises(ConfigError):
            attention_tupe(Q, Q, Q, *(Tensor(p[k]) for k in ("P", "WPQ", "WPK", "b")), RelPosIndexer(2))

    def test_deberta_index_order_pinned(self, rng):
        S, d, r_s = 5, 3, 3
        Q, K, V = (rng.normal(size=(S, d)) for _ in range(3))
        p = random_params("deberta", rng, d, r_s)
        out = run("deberta", Q, K, V, p, r_s).weights.data
        right = o_attention("deberta", Q, K, p, r_s)
        wrong = o_attention("deberta", Q, K, p, r_s, deberta_swap=True)
        assert np.abs(out - right).max() < 1e-12
        assert np.abs(out - wrong).max() > 1e-3

    def test_empty_sequence(self, rng):
        p = random_params("shaw", rng, 3, 2)
        empty = np.zeros((0, 3))
        out = attention_shaw(Tensor(empty), Tensor(empty), Tensor(empty), Tensor(p["Kr"]), RelPosIndexer(2))
        assert out.weights.shape == (0, 0) and out.output.shape == (0, 3)

    def test_unknown_kind(self, rng):
        Q = Tensor(rng.normal(size=(2, 2)))
        with pytest.raises(ConfigError):
            attend("rotary", Q, Q, Q, EncodingParams("rotary"), RelPosIndexer(2))


class TestDDRPStructure:
    def test_table_against_per_pair(self, rng):
        d, r_s, S = 4, 3, 6
        p = random_params("ddrp", rng, d, r_s)
        table = ddrp_table(*(Tensor(p[k]) for k in ("Ddir", "Krd", "Wrd"))).data
        for i in range(S):
            for j in range(S):
                dl, rho = o_delta_rho(i, j, r_s)
                direct = (p["Ddir"][rho] * p["Krd"][dl]) @ p["Wrd"]
                assert np.abs(table[dl, rho] - direct).max() < 1e-12

    def test_identity_reduction(self, rng):
        Krd = rng.normal(size=(5, 4))
        table = ddrp_table(Tensor(np.ones((3, 4))), Tensor(Krd), Tensor(np.eye(4))).data
        for rho in range(3):
            assert np.array_equal(table[:, rho], Krd)

    def test_equals_shaw_under_symmetric_table(self, rng):
        S, d, r_s = 8, 4, 4
        Q, K, V = (rng.normal(size=(S, d)) for _ in range(3))
        Krd = rng.normal(size=(r_s, d))
        # symmetric offset table: Kr[sigma(i, j)] depends only on |i - j|, saturating at r_s - 1
        Kr = np.stack([Krd[min(abs(x), r_s - 1)] for x in range(-r_s, r_s)])
        shaw = attention_shaw(Tensor(Q), Tensor(K), Tensor(V), Tensor(Kr), RelPosIndexer(r_s))
        table = ddrp_table(Tensor(np.ones((3, d))), Tensor(Krd), Tensor(np.eye(d)))
        ddrp = attention_ddrp(Tensor(Q), Tensor(K), Tensor(V), table, RelPosIndexer(r_s))
        assert np.array_equal(ddrp.weights.data, shaw.weights.data)
        assert np.array_equal(ddrp.output.data, shaw.output.data)

    def test_zero_distance_rows_give_vanilla(self, rng):
        Q, K, V = (rng.normal(size=(5, 3)) for _ in range(3))
        table = ddrp_table(Tensor(rng.normal(size=(3, 3))), Tensor(np.zeros((4, 3))), Tensor(rng.normal(size=(3, 3))))
        out = attention_ddrp(Tensor(Q), Tensor(K), Tensor(V), table, RelPosIndexer(4))
        ref = attention_vanilla(Tensor(Q), Tensor(K), Tensor(V))
        np.testing.assert_allclose(out.weights.data, ref.weights.data, atol=1e-15)

    def test_vector_count(self):
        assert ddrp_vector_count(64) == 67


class TestParamCounts:
    def test_paper_value(self):
        # 3*64 + 64*64 + 64*64, reported as 0.0084M
        assert extra_param_count("ddrp", 64, 64) == 8384
        assert round(extra_param_count("ddrp", 64, 64) / 1e6, 4) == 0.0084

    def test_shaw(self):
        assert extra_param_count("shaw", 64, 64) == 8192

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 200), st.integers(1, 600), st.integers(1, 800))
    def test_formulas(self, d, r_s, r_a, D):
        assert extra_param_count("ddrp", d, r_s, r_a, D) == 3 * d + r_s * d + d * d
        assert extra_param_count("shaw", d, r_s, r_a, D) == 2 * r_s * d
        assert extra_param_count("deberta", d, r_s, r_a, D) == 2 * (2 * r_s * d)
        assert extra_param_count("tupe", d, r_s, r_a, D) == r_a * D + 2 * D * d + 2 * r_s
        assert extra_param_count("absolute", d, r_s, r_a, D) == r_a * D

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 400), st.integers(1, 200))
    def test_ddrp_smaller_than_deberta_condition(self, d, r_s):
        # 3d + r_s d + d^2 < 4 r_s d  <=>  d < 3 r_s - 3
        smaller = extra_param_count("ddrp", d, r_s) < extra_param_count("deberta", d, r_s)
        assert smaller == (d < 3 * r_s - 3)

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_shipped_presets(self, name):
        cfg = ModelConfig.preset(name)
        assert extra_param_count("ddrp", cfg.head_dim, cfg.r_s) < extra_param_count("deberta", cfg.head_dim, cfg.r_s)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            extra_param_count("rotary", 4, 4)
