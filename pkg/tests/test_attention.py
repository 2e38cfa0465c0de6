import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from effconf import autodiff as ad
from effconf import oracles
from effconf.attention import (AttentionParams, AttentionVariant, mhsa, mhsa_grouped, mhsa_linear, mhsa_local,
                               mhsa_regular, mhsa_strided, rel_to_abs, sinusoidal_table)
from effconf.autodiff import DTensor
from effconf.checks import check_gradients, projected
from effconf.errors import ConfigError, DimensionError

from conftest import make_params


def _x(rng, n, d):
    return DTensor(rng.normal(size=(n, d)))


class TestTable:
    def test_zero_offset_row_alternates(self):
        tab = sinusoidal_table(4, 6)
        np.testing.assert_array_equal(tab.rows(0, 0)[0], [0, 1, 0, 1, 0, 1])

    def test_row_count(self):
        assert sinusoidal_table(4, 8).matrix.shape == (7, 8)

    def test_pythagorean_pairs(self):
        m = sinusoidal_table(9, 10).matrix
        np.testing.assert_allclose(m[:, 0::2] ** 2 + m[:, 1::2] ** 2, 1.0, atol=1e-14)

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            sinusoidal_table(4, 5)

    def test_out_of_range_rows(self):
        with pytest.raises(ConfigError):
            sinusoidal_table(4, 4).rows(-4, 0)


class TestSkew:
    def test_single_position_is_identity(self, rng):
        x = rng.normal(size=(2, 1, 1))
        np.testing.assert_array_equal(rel_to_abs(DTensor(x)).data, x)

    def test_linear_ramp(self):
        rel = np.broadcast_to(np.arange(5.0), (2, 3, 5)).copy()
        out = rel_to_abs(DTensor(rel)).data
        i, j = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        np.testing.assert_array_equal(out[0], j - i + 2)

    @pytest.mark.parametrize("stride", [1, 2, 3])
    @pytest.mark.parametrize("n", [1, 2, 5, 9, 16])
    def test_matches_gather(self, rng, n, stride):
        n_q = -(-n // stride)
        rel = rng.normal(size=(3, n_q, 2 * n - 1))
        np.testing.assert_array_equal(rel_to_abs(DTensor(rel), stride).data,
                                      oracles.gather_rel_to_abs(rel, stride))

    def test_even_width_rejected(self):
        with pytest.raises(DimensionError):
            rel_to_abs(DTensor(np.zeros((1, 3, 4))))

    def test_assembled_scores_equal_direct_dot_products(self, rng):
        n, dh = 6, 4
        q = rng.normal(size=(n, dh))
        e = rng.normal(size=(2 * n - 1, dh))  # row p + n - 1 is offset p
        s_rel = rel_to_abs(DTensor((q @ e.T)[None])).data[0]
        direct = np.array([[q[i] @ e[j - i + n - 1] for j in range(n)] for i in range(n)])
        np.testing.assert_array_equal(s_rel, direct)


class TestRegular:
    def test_single_frame_returns_projected_value(self, rng):
        p = make_params(rng, 4, 2)
        x = _x(rng, 1, 4)
        v = x.data @ p.wv.data + p.bv.data
        np.testing.assert_allclose(mhsa_regular(x, p, sinusoidal_table(1, 4)).data,
                                   v @ p.wo.data + p.bo.data, atol=1e-14)

    def test_zero_position_projection_is_content_only(self, rng):
        p = make_params(rng, 8, 2)
        p.we.data[:] = 0.0
        p.be.data[:] = 0.0
        x = _x(rng, 6, 8)
        q = x.data @ p.wq.data + p.bq.data
        k = x.data @ p.wk.data + p.bk.data
        v = x.data @ p.wv.data + p.bv.data
        heads = []
        for h in range(2):
            c = slice(4 * h, 4 * h + 4)
            s = q[:, c] @ k[:, c].T / 2.0
            a = np.exp(s - s.max(1, keepdims=True))
            heads.append((a / a.sum(1, keepdims=True)) @ v[:, c])
        want = np.concatenate(heads, 1) @ p.wo.data + p.bo.data
        np.testing.assert_allclose(mhsa_regular(x, p, sinusoidal_table(6, 8)).data, want, atol=1e-13)

    def test_matches_naive_oracle(self, rng):
        p, x = make_params(rng, 8, 2), _x(rng, 8, 8)
        diff = np.abs(mhsa_regular(x, p, sinusoidal_table(8, 8)).data - oracles.naive_regular(x.data, p))
        assert diff.max() < 1e-10

    def test_larger_table_changes_nothing(self, rng):
        # only relative offsets matter, not where the window sits in the table
        p, x = make_params(rng, 8, 2), _x(rng, 7, 8)
        a = mhsa_regular(x, p, sinusoidal_table(7, 8)).data
        b = mhsa_regular(x, p, sinusoidal_table(40, 8)).data
        np.testing.assert_array_equal(a, b)

    def test_too_long_for_table(self, rng):
        with pytest.raises(ConfigError):
            mhsa_regular(_x(rng, 9, 4), make_params(rng, 4, 2), sinusoidal_table(8, 4))

    def test_heads_must_divide_dim(self, rng):
        with pytest.raises(ConfigError):
            AttentionParams.init(6, 4, rng)


class TestStrided:
    def test_output_length(self, rng):
        out = mhsa_strided(_x(rng, 10, 4), make_params(rng, 4, 2), sinusoidal_table(10, 4), 2)
        assert out.shape == (5, 4)

    def test_matches_sliced_oracle(self, rng):
        p, x = make_params(rng, 8, 2), _x(rng, 9, 8)
        fast = mhsa_strided(x, p, sinusoidal_table(9, 8), 2).data
        assert np.abs(fast - oracles.naive_sliced(x.data, p, 2)).max() < 1e-10

    def test_rows_agree_with_regular_when_keys_equal(self, rng):
        # strided output row i is regular's row i*s
        p, x = make_params(rng, 8, 2), _x(rng, 11, 8)
        tab = sinusoidal_table(11, 8)
        np.testing.assert_allclose(mhsa_strided(x, p, tab, 3).data, mhsa_regular(x, p, tab).data[::3],
                                   atol=1e-13)


class TestGrouped:
    def test_score_matrix_is_group_resolution(self, rng, monkeypatch):
        seen = []
        real = ad.softmax

        def spy(x, axis=-1):
            seen.append(x.shape)
            return real(x, axis)

        monkeypatch.setattr(ad, "softmax", spy)
        mhsa_grouped(_x(rng, 12, 8), make_params(rng, 8, 2), sinusoidal_table(12, 8), 3)
        assert seen == [(2, 4, 4)]

    def test_matches_reshape_oracle(self, rng):
        p, x = make_params(rng, 8, 2), _x(rng, 12, 8)
        fast = mhsa_grouped(x, p, sinusoidal_table(12, 8), 3).data
        assert np.abs(fast - oracles.naive_grouped(x.data, p, 3)).max() < 1e-10

    @pytest.mark.parametrize("n,g", [(7, 3), (5, 4), (1, 3), (10, 4)])
    def test_padded_lengths_match_oracle(self, rng, n, g):
        p, x = make_params(rng, 4, 2), _x(rng, n, 4)
        fast = mhsa_grouped(x, p, sinusoidal_table(-(-n // g) * g, 4), g)
        assert fast.shape == (n, 4)
        assert np.abs(fast.data - oracles.naive_grouped(x.data, p, g)).max() < 1e-10


class TestLocal:
    def test_blocks_are_independent(self, rng):
        p, x = make_params(rng, 4, 2), rng.normal(size=(8, 4))
        tab = sinusoidal_table(4, 4)
        base = mhsa_local(DTensor(x), p, tab, 4).data
        x2 = x.copy()
        x2[4:] += rng.normal(size=(4, 4))
        moved = mhsa_local(DTensor(x2), p, tab, 4).data
        np.testing.assert_array_equal(base[:4], moved[:4])
        assert not np.allclose(base[4:], moved[4:])

    def test_padding_path_matches_per_block_oracle(self, rng):
        p, x = make_params(rng, 8, 2), _x(rng, 7, 8)
        fast = mhsa_local(x, p, sinusoidal_table(4, 8), 4).data
        assert np.abs(fast - oracles.naive_local(x.data, p, 4)).max() < 1e-10


class TestLinear:
    def test_single_frame(self, rng):
        p, x = make_params(rng, 4, 2), _x(rng, 1, 4)
        v = x.data @ p.wv.data + p.bv.data
        np.testing.assert_allclose(mhsa_linear(x, p).data, v @ p.wo.data + p.bo.data, atol=1e-14)

    def test_key_map_columns_sum_to_one(self, rng):
        k = DTensor(rng.normal(size=(2, 9, 3)))
        np.testing.assert_allclose(ad.softmax(k, -2).data.sum(axis=-2), 1.0, atol=1e-12)

    def test_matches_two_matmul_oracle(self, rng):
        p, x = make_params(rng, 4, 2), _x(rng, 6, 4)
        assert np.abs(mhsa_linear(x, p).data - oracles.naive_linear(x.data, p)).max() < 1e-10


@given(n=st.integers(4, 32), d=st.sampled_from([4, 8, 16]), heads=st.sampled_from([1, 2, 4]),
       seed=st.integers(0, 2 ** 31 - 1))
def test_identity_collapses(n, d, heads, seed):
    rng = np.random.default_rng(seed)
    p, x = make_params(rng, d, heads), _x(rng, n, d)
    tab = sinusoidal_table(n, d)
    ref = mhsa_regular(x, p, tab).data
    for variant in (AttentionVariant.grouped(1), AttentionVariant.strided(1), AttentionVariant.local(n)):
        assert np.abs(mhsa(x, p, tab, variant).data - ref).max() <= 1e-12


@pytest.mark.parametrize("variant", [AttentionVariant.regular(), AttentionVariant.strided(2),
                                     AttentionVariant.grouped(3), AttentionVariant.local(3),
                                     AttentionVariant.linear()], ids=str)
def test_variant_gradients(rng, variant):
    p = make_params(rng, 8, 2)
    x = DTensor(rng.normal(size=(7, 8)), requires_grad=True)
    tab = sinusoidal_table(9, 8)
    leaves = [x] + [t for _, t in p.tensors()]
    assert check_gradients(projected(lambda: mhsa(x, p, tab, variant)), leaves, max_entries=10) < 1e-4


@pytest.mark.parametrize("variant", [AttentionVariant.regular(), AttentionVariant.grouped(2),
                                     AttentionVariant.local(5), AttentionVariant.linear()], ids=str)
def test_outputs_finite_and_shaped(rng, variant):
    x = DTensor(rng.normal(size=(13, 8)) * 50)
    out = mhsa(x, make_params(rng, 8, 4), sinusoidal_table(14, 8), variant)
    assert out.shape == (13, 8) and np.all(np.isfinite(out.data))


def test_linear_attention_is_linear_time():
    from effconf.profiler import attention_madds
    a = attention_madds(1000, 64, 4, AttentionVariant.linear())
    b = attention_madds(2000, 64, 4, AttentionVariant.linear())
    assert math.isclose((b[0] + b[1]) / (a[0] + a[1]), 2.0)
