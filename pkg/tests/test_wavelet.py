import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wavelit import tensor as T
from wavelit.gradcheck import check_gradients
from wavelit.tensor import DimensionError, Tensor, parameter
from wavelit.wavelet import SUPPORTED, SubbandSet, WaveletConfigError, dwt2, filter_bank, idwt2

S = 1 / math.sqrt(2)


@pytest.mark.parametrize("name", SUPPORTED)
def test_highpass_has_vanishing_moment(name):
    assert abs(sum(filter_bank(name).dec_hi)) <= 1e-15


def test_haar_taps():
    b = filter_bank("haar")
    assert b.dec_lo == (S, S) and b.dec_hi == (S, -S)


@pytest.mark.parametrize("name,length", [("haar", 2), ("bior2.2", 6), ("bior4.4", 10)])
def test_filter_lengths(name, length):
    assert filter_bank(name).length == length


def test_bior22_lowpass_has_six_taps_with_five_nonzero():
    lo = filter_bank("bior2.2").dec_lo
    assert len(lo) == 6 and sum(1 for c in lo if c != 0) == 5


def test_unknown_bank_lists_supported():
    with pytest.raises(WaveletConfigError, match="haar"):
        filter_bank("db4")


@pytest.mark.parametrize("name", SUPPORTED)
def test_constant_field_has_no_detail(name):
    c = 2.7
    tok = dwt2(np.full((1, 1, 16, 16, 2), c), name).data
    sb = SubbandSet.from_tokens(tok)
    for band in (sb.LH, sb.HL, sb.HH):
        assert np.abs(band).max() <= 1e-12


def test_haar_2x2_constant_block():
    c = 1.25
    tok = dwt2(np.full((2, 2, 1), c), "haar").data
    assert tok.shape == (1, 1, 4)
    assert tok[0, 0, 0] == pytest.approx(2 * c, abs=1e-15)
    np.testing.assert_allclose(tok[0, 0, 1:], 0.0, atol=1e-15)
    back = idwt2(np.array([[[2 * c, 0.0, 0.0, 0.0]]]), "haar").data
    np.testing.assert_allclose(back, np.full((2, 2, 1), c), atol=1e-15)


def test_token_shape():
    assert dwt2(np.zeros((1, 1, 64, 64, 3))).shape == (1, 1, 32, 32, 12)
    assert dwt2(np.zeros((1, 1, 64, 64, 3)), levels=2).shape == (1, 1, 16, 16, 48)


@pytest.mark.parametrize("name", SUPPORTED)
@pytest.mark.parametrize("n,levels", [(16, 1), (64, 1), (32, 2), (128, 2)])
def test_round_trip(name, n, levels, rng):
    x = rng.normal(size=(1, 2, n, n, 3))
    back = idwt2(dwt2(x, name, levels), name, levels).data
    assert np.abs(back - x).max() <= 1e-10


def test_round_trip_rectangular(rng):
    x = rng.normal(size=(2, 16, 32, 1))
    for name in SUPPORTED:
        assert np.abs(idwt2(dwt2(x, name), name).data - x).max() <= 1e-10


def test_indivisible_extent_names_axis():
    with pytest.raises(DimensionError, match="W"):
        dwt2(np.zeros((8, 6, 1)), levels=2)
    with pytest.raises(DimensionError, match="H"):
        dwt2(np.zeros((6, 8, 1)), levels=2)


def test_inconsistent_subbands_rejected():
    sb = SubbandSet(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), np.zeros((2, 3, 1)), np.zeros((2, 2, 1)))
    with pytest.raises(DimensionError):
        sb.to_tokens()
    with pytest.raises(DimensionError):
        idwt2(np.zeros((2, 2, 6)))


def test_haar_preserves_energy(rng):
    x = rng.normal(size=(3, 32, 32, 2))
    for levels in (1, 2):
        e = np.sum(dwt2(x, "haar", levels).data ** 2)
        assert abs(e - np.sum(x**2)) / np.sum(x**2) <= 1e-9


@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from(SUPPORTED))
def test_dwt_is_linear(seed, a, b, name):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 8, 8, 2))
    lhs = dwt2(a * x + b * y, name).data
    rhs = a * dwt2(x, name).data + b * dwt2(y, name).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(st.integers(0, 2**31), st.sampled_from(SUPPORTED), st.sampled_from([(8, 8), (16, 8), (16, 32)]))
def test_round_trip_property(seed, name, hw):
    x = np.random.default_rng(seed).normal(size=(*hw, 2))
    assert np.abs(idwt2(dwt2(x, name), name).data - x).max() <= 1e-10


@pytest.mark.parametrize("name", SUPPORTED)
def test_gradients(name, rng):
    x = parameter(rng.normal(size=(1, 8, 8, 2)))
    W = Tensor(rng.normal(size=(1, 2, 2, 32)))
    assert check_gradients(lambda: T.tsum(dwt2(x, name, 2) * W), [x]) <= 1e-6
    s = parameter(rng.normal(size=(1, 4, 4, 8)))
    W2 = Tensor(rng.normal(size=(1, 8, 8, 2)))
    assert check_gradients(lambda: T.tsum(idwt2(s, name) * W2), [s]) <= 1e-6
