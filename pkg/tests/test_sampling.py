import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wavelit.sampling import (
    REFERENCE_CORPUS,
    CorpusStats,
    DatasetSampler,
    DatasetStats,
    SamplingConfigError,
    corpus_to_csv,
    kl_to_proportional,
    next_dataset,
    oversampling_ratio,
    parse_corpus,
    proportional_share,
    sampling_report,
    weights,
)

SQRT = [0.0420, 0.1737, 0.1871, 0.2117, 0.0261, 0.0571, 0.2011, 0.1012]
TEMP = [0.0617, 0.1448, 0.1676, 0.2250, 0.0597, 0.0645, 0.1971, 0.0796]
PROP = [0.0106, 0.1813, 0.2105, 0.2694, 0.0041, 0.0196, 0.2430, 0.0616]


def test_proportional_share():
    p = proportional_share(REFERENCE_CORPUS)
    np.testing.assert_array_equal(np.round(p, 4), PROP)
    assert REFERENCE_CORPUS.datasets[3].total_tokens == 5_842_665_472
    assert REFERENCE_CORPUS.total_tokens.sum() == 21_687_369_728
    eq = CorpusStats((DatasetStats("a", 10, 8, 8), DatasetStats("b", 10, 8, 8)))
    np.testing.assert_array_equal(proportional_share(eq), [0.5, 0.5])


def test_scheme_columns():
    np.testing.assert_array_equal(weights("uniform", REFERENCE_CORPUS).w, np.full(8, 0.125))
    np.testing.assert_array_equal(np.round(weights("sqrt", REFERENCE_CORPUS).w, 4), SQRT)
    np.testing.assert_array_equal(np.round(weights("temperature", REFERENCE_CORPUS, 0.2).w, 4), TEMP)


def test_kl_footer_and_ordering():
    p = proportional_share(REFERENCE_CORPUS)
    kls = [round(kl_to_proportional(weights(s, REFERENCE_CORPUS, 0.2).w, p), 3) for s in ("uniform", "temperature", "sqrt")]
    assert kls == [0.766, 0.214, 0.099]
    assert kl_to_proportional(p, p) == 0


def test_oversampling_trl2d():
    p = proportional_share(REFERENCE_CORPUS)
    r = [round(float(oversampling_ratio(weights(s, REFERENCE_CORPUS, 0.2).w, p)[4]), 1) for s in ("uniform", "temperature", "sqrt")]
    assert r == [30.6, 14.6, 6.4]
    np.testing.assert_allclose(oversampling_ratio(p, p), 1.0)


def test_temperature_errors():
    with pytest.raises(SamplingConfigError):
        weights("temperature", REFERENCE_CORPUS)
    with pytest.raises(SamplingConfigError):
        weights("temperature", REFERENCE_CORPUS, 0.0)
    with pytest.raises(SamplingConfigError):
        weights("zipf", REFERENCE_CORPUS)
    with pytest.raises(SamplingConfigError):
        proportional_share(CorpusStats(()))


def test_temperature_limits():
    p = proportional_share(REFERENCE_CORPUS)
    np.testing.assert_allclose(weights("temperature", REFERENCE_CORPUS, 100.0).w, 0.125, atol=1e-3)
    w = weights("temperature", REFERENCE_CORPUS, 1e-4).w
    assert w[np.argmax(p)] == pytest.approx(1.0) and np.argmax(w) == np.argmax(p)


def test_sqrt_between_extremes():
    p = proportional_share(REFERENCE_CORPUS)
    kl = {s: kl_to_proportional(weights(s, REFERENCE_CORPUS, 0.2).w, p) for s in ("uniform", "temperature", "sqrt")}
    assert kl["sqrt"] < kl["temperature"] < kl["uniform"]


@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=10), st.floats(0.01, 10))
def test_weights_are_distributions(ns, temp):
    stats = CorpusStats(tuple(DatasetStats(f"d{i}", n, 8, 8) for i, n in enumerate(ns)))
    for s in ("uniform", "temperature", "sqrt"):
        w = weights(s, stats, temp).w
        assert (w > 0).all() and abs(w.sum() - 1) <= 1e-12


def test_degenerate_draws():
    rng = np.random.default_rng(0)
    assert all(next_dataset(np.array([1.0, 0, 0]), rng) == 0 for _ in range(1000))
    assert all(next_dataset(np.array([0, 0, 1.0]), rng) == 2 for _ in range(1000))


def test_empirical_frequencies():
    w = weights("sqrt", REFERENCE_CORPUS).w
    s = DatasetSampler(w, seed=11)
    draws = np.array([next(s) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=8) / draws.size
    assert np.abs(freq - w).max() <= 0.005


def test_sampler_determinism():
    w = weights("sqrt", REFERENCE_CORPUS).w
    a, b = DatasetSampler(w, 5), DatasetSampler(w, 5)
    assert [next(a) for _ in range(500)] == [next(b) for _ in range(500)]


def test_corpus_csv_round_trip():
    assert parse_corpus(corpus_to_csv(REFERENCE_CORPUS)) == REFERENCE_CORPUS
    assert len(parse_corpus("# comment\na,1,8,8\n\nb,2,16,16,2\n")) == 2
    for bad in ["", "a,1,8\n", "a,x,8,8\n", "a,0,8,8\n"]:
        with pytest.raises(SamplingConfigError):
            parse_corpus(bad)


def test_report_rows():
    rows = sampling_report(REFERENCE_CORPUS)
    assert len(rows) == 9
    assert round(rows[-1]["w_sqrt"], 3) == 0.099
    assert round(rows[4]["ratio_uniform"], 1) == 30.6
