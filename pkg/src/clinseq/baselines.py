"""Unconditional unigram and bigram samplers with empirical time resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generator import Trajectory


def _event_arrays(corpus):
    """Yield (token ids, deltas) per sequence; accepts Trajectory-like objects
    or (tokens, deltas) pairs of equal length."""
    for seq in corpus:
        if hasattr(seq, "tokens"):
            yield np.asarray(seq.tokens, dtype=np.int64), np.asarray(seq.deltas, dtype=np.float64)
        else:
            t, d = seq
            yield np.asarray(t, dtype=np.int64), np.asarray(d, dtype=np.float64)


@dataclass
class UnigramModel:
    probs: np.ndarray  # (V,)
    time_pool: np.ndarray

    def sample_tokens(self, n, rng):
        return rng.choice(len(self.probs), size=n, p=self.probs)


@dataclass
class BigramModel:
    transition: np.ndarray  # (V, V) row-normalised; zero rows back off to unigram
    unigram: UnigramModel
    pair_times: dict  # (prev, next) -> array of observed Δt

    def row(self, prev):
        r = self.transition[prev]
        return r if r.sum() > 0 else self.unigram.probs


def fit_unigram(corpus, vocab_size=None, skip_ids=(0,)):
    seqs = list(_event_arrays(corpus))
    if not seqs:
        raise ValueError("cannot fit a baseline on an empty corpus")
    toks = np.concatenate([t for t, _ in seqs])
    times = np.concatenate([d for _, d in seqs])
    keep = ~np.isin(toks, skip_ids)
    v = vocab_size or int(toks.max()) + 1
    counts = np.bincount(toks[keep], minlength=v).astype(np.float64)
    if counts.sum() == 0:
        raise ValueError("corpus has no countable tokens")
    return UnigramModel(counts / counts.sum(), times[keep])


def fit_bigram(corpus, vocab_size=None, skip_ids=(0,)):
    uni = fit_unigram(corpus, vocab_size, skip_ids)
    v = len(uni.probs)
    counts = np.zeros((v, v))
    pairs = {}
    for t, d in _event_arrays(corpus):
        if len(t) < 2:
            continue
        prev, nxt, dt = t[:-1], t[1:], d[1:]
        ok = ~np.isin(prev, skip_ids) & ~np.isin(nxt, skip_ids)
        np.add.at(counts, (prev[ok], nxt[ok]), 1.0)
        for a, b, x in zip(prev[ok].tolist(), nxt[ok].tolist(), dt[ok].tolist()):
            pairs.setdefault((a, b), []).append(x)
    rows = counts.sum(axis=1, keepdims=True)
    trans = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    return BigramModel(trans, uni, {k: np.asarray(x) for k, x in pairs.items()})


def sample_baseline(model, prompt_tokens, prompt_deltas, n_tokens, rng):
    """Append ``n_tokens`` events drawn from the baseline law.

    The token law ignores the prompt entirely; the bigram chain starts from a
    unigram draw. Δt comes from the pair-specific pool when it exists, else
    the pooled one.
    """
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    toks = list(prompt_tokens)
    dts = list(prompt_deltas)
    if n_tokens == 0:
        return Trajectory(toks, dts, len(toks))
    if isinstance(model, UnigramModel):
        new = model.sample_tokens(n_tokens, rng)
        pool = model.time_pool
        new_dt = pool[rng.integers(len(pool), size=n_tokens)] if len(pool) else np.zeros(n_tokens)
    else:
        uni = model.unigram
        cum_rows = {}
        new = np.empty(n_tokens, dtype=np.int64)
        new_dt = np.empty(n_tokens)
        prev = None
        u = rng.random(n_tokens)
        for i in range(n_tokens):
            if prev is None:
                p = uni.probs
            else:
                if prev not in cum_rows:
                    cum_rows[prev] = np.cumsum(model.row(prev))
                p = None
            cum = np.cumsum(p) if p is not None else cum_rows[prev]
            tok = int(min(np.searchsorted(cum, u[i] * cum[-1], side="right"), len(cum) - 1))
            pool = model.pair_times.get((prev, tok)) if prev is not None else None
            if pool is None or len(pool) == 0:
                pool = uni.time_pool
            new_dt[i] = pool[rng.integers(len(pool))] if len(pool) else 0.0
            new[i] = tok
            prev = tok
    return Trajectory(toks + new.tolist(), dts + [float(x) for x in new_dt], len(toks))


def unigram_perplexity(model, seqs):
    """Perplexity of the marginal law on next-token targets (every position
    after the first), scored like teacher-forcing perplexity."""
    nll, n = 0.0, 0
    for t, _ in _event_arrays(seqs):
        tgt = t[1:]
        p = model.probs[tgt]
        with np.errstate(divide="ignore"):
            nll -= float(np.log(p).sum())
        n += len(tgt)
    if n == 0:
        raise ValueError("no targets to score")
    return float(np.exp(nll / n))
