import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from clinseq.baselines import fit_bigram, fit_unigram, sample_baseline, unigram_perplexity

A, B, C = 1, 2, 3


def seq(tokens, dt=1.0):
    return tokens, [0.0] + [dt] * (len(tokens) - 1)


def test_unigram_degenerate(rng):
    m = fit_unigram([seq([A] * 10)], 4)
    assert m.probs[A] == 1.0
    tr = sample_baseline(m, [], [], 50, rng)
    assert tr.generated_tokens == [A] * 50


def test_bigram_deterministic_chain(rng):
    m = fit_bigram([seq([A, B] * 6)], 4)
    assert m.transition[A, B] == 1.0 and m.transition[B, A] == 1.0
    g = sample_baseline(m, [], [], 40, rng).generated_tokens
    assert all(x != y and {x, y} == {A, B} for x, y in zip(g, g[1:]))


def test_bigram_counts():
    m = fit_bigram([seq([A, B, A, C])], 4)
    assert m.transition[A, B] == pytest.approx(0.5) and m.transition[A, C] == pytest.approx(0.5)
    # C was never followed: unigram backoff
    assert np.allclose(m.row(C), m.unigram.probs)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        fit_unigram([])


def test_prompt_is_kept_but_ignored(rng):
    m = fit_unigram([seq([A, B, C, C])], 4)
    tr = sample_baseline(m, [B, B], [0.0, 1.0], 5, rng)
    assert tr.tokens[:2] == [B, B] and tr.prompt_len == 2 and len(tr.generated_tokens) == 5
    assert sample_baseline(m, [B], [0.0], 0, rng).tokens == [B]
    with pytest.raises(ValueError):
        sample_baseline(m, [], [], -1, rng)


def test_unigram_frequencies_converge(rng):
    corpus = [seq(list(rng.choice([1, 2, 3, 4, 5], size=30, p=[.4, .3, .15, .1, .05]))) for _ in range(20)]
    m = fit_unigram(corpus, 6)
    g = sample_baseline(m, [], [], 100_000, rng).generated_tokens
    freq = np.bincount(g, minlength=6) / len(g)
    assert 0.5 * np.abs(freq - m.probs).sum() <= 0.01


def test_bigram_transitions_converge(rng):
    p = np.array([[0, .2, .5, .3], [0, .6, .1, .3], [0, .3, .3, .4], [0, .1, .1, .8]])
    chain = [1]
    for _ in range(5000):
        chain.append(int(rng.choice(4, p=p[chain[-1]])))
    m = fit_bigram([seq(chain)], 4)
    g = np.array(sample_baseline(m, [], [], 100_000, rng).generated_tokens)
    emp = np.zeros((4, 4))
    np.add.at(emp, (g[:-1], g[1:]), 1)
    emp = emp / np.maximum(emp.sum(1, keepdims=True), 1)
    assert np.abs(emp - m.transition)[1:].max() < 0.02


def test_pair_specific_times(rng):
    # A->B always 7 days, B->A always 2 days
    toks = [A, B] * 20
    dts = [0.0] + [7.0 if t == B else 2.0 for t in toks[1:]]
    m = fit_bigram([(toks, dts)], 4)
    tr = sample_baseline(m, [], [], 30, rng)
    for prev, tok, dt in zip(tr.generated_tokens, tr.generated_tokens[1:], tr.generated_deltas[1:]):
        assert dt == (7.0 if tok == B else 2.0)


def test_time_resampling_matches_training_pool(rng):
    times = rng.lognormal(1.0, 1.2, size=5000)
    corpus = [(list(rng.integers(1, 5, size=50)), list(times[i * 50:(i + 1) * 50])) for i in range(100)]
    m = fit_unigram(corpus, 5)
    ks = [ks_2samp(sample_baseline(m, [], [], n, rng).generated_deltas, times).statistic for n in (200, 20_000)]
    assert ks[1] < ks[0] and ks[1] < 0.02


def test_unigram_perplexity_uniform():
    m = fit_unigram([seq([1, 2, 3, 4])], 5)
    assert unigram_perplexity(m, [seq([1, 2, 3, 4, 1])]) == pytest.approx(4.0)


@settings(max_examples=25)
@given(st.lists(st.lists(st.integers(1, 6), min_size=2, max_size=15), min_size=1, max_size=6))
def test_property_rows_normalised(corpus):
    m = fit_bigram([seq(s) for s in corpus], 7)
    assert m.unigram.probs.sum() == pytest.approx(1.0)
    sums = m.transition.sum(1)
    assert np.all((np.abs(sums - 1) < 1e-12) | (sums == 0))
