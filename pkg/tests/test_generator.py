import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clinseq.generator import (
    GenerationError, RowStreams, SamplingConfig, force_intervention, generate, generate_arms, generate_batch,
    generate_many, read_trajectories, sample_next, sample_rows, stream_keys, write_trajectories,
)
from clinseq.model import FlatModel, desk_config
from clinseq.vocab import Vocabulary

TOKS = ([f"LAB:G:Q{q}" for q in range(1, 6)] + ["MED:STEROID:PRED", "MED:STEROID:DEX", "MED:STATIN:ATOR",
        "MED:STATIN:SIMVA", "MED:INSULIN:GLARG", "DX:D1", "DX:D2", "AGE:D5", "SEX:F"])


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.from_tokens(TOKS)


@pytest.fixture(scope="module")
def model(vocab):
    m = FlatModel(desk_config(len(vocab), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=24), vocab, seed=2)
    # a larger content scale makes the untrained distribution far from uniform
    for k in ("emb.plain", "emb.base", "emb.ord"):
        m.params[k].data *= 40
    return m


def prompt(vocab):
    toks = ["[BOS]", "AGE:D5", "SEX:F", "LAB:G:Q3", "DX:D1"]
    return [vocab.id(t) for t in toks], [0.0, 0.0, 0.0, 2.0, 1.5]


# ---------------------------------------------------------------- sampling law


def test_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(temperature=0)
    with pytest.raises(ValueError):
        SamplingConfig(top_k=0)


def test_top1_is_argmax(rng):
    lg = rng.normal(size=30)
    tok, _ = sample_next(lg, [0.0, 0.0, 0.0], SamplingConfig(top_k=1), rng)
    assert tok == int(np.argmax(lg))


def test_certain_zero_gap(rng):
    tp = np.tile([80.0, 3.0, 0.0], (1000, 1))
    _, dt = sample_rows(np.zeros((1000, 5)), tp, SamplingConfig(), rng)
    assert np.all(dt == 0.0)


def test_gap_moments(rng):
    n = 100_000
    mu, sigma = 1.3, 0.8
    tp = np.tile([0.0, mu, np.log(sigma)], (n, 1))
    _, dt = sample_rows(np.zeros((n, 4)), tp, SamplingConfig(), rng)
    assert abs((dt == 0).mean() - 0.5) <= 0.01
    logs = np.log(dt[dt > 0])
    assert abs(logs.mean() - mu) <= 3 * sigma / np.sqrt(len(logs))


def test_all_suppressed_error(rng):
    with pytest.raises(GenerationError):
        sample_next(np.zeros(3), [0, 0, 0], SamplingConfig(suppress={0, 1, 2}), rng)


@given(st.integers(0, 2**31), st.integers(1, 12), st.floats(0.3, 3.0))
def test_property_top_k_support(seed, k, temp):
    rng = np.random.default_rng(seed)
    lg = rng.normal(size=(64, 15)) * 3
    tok, dt = sample_rows(lg, np.zeros((64, 3)), SamplingConfig(top_k=k, temperature=temp), rng)
    kth = np.sort(lg, axis=1)[:, -k]
    assert np.all(lg[np.arange(64), tok] >= kth)
    assert np.all(dt >= 0)


def test_row_streams_independent_of_batching():
    keys = stream_keys(7, np.arange(6))
    lg = np.random.default_rng(0).normal(size=(6, 10))
    tp = np.zeros((6, 3))
    full, _ = sample_rows(lg, tp, SamplingConfig(), RowStreams(keys))
    part, _ = sample_rows(lg[[2, 4]], tp[[2, 4]], SamplingConfig(), RowStreams(keys[[2, 4]]))
    assert np.array_equal(full[[2, 4]], part)


# ---------------------------------------------------------------- generation


def test_zero_new_tokens_returns_prompt(model, vocab):
    t, d = prompt(vocab)
    tr = generate(model, t, d, SamplingConfig(max_new_tokens=0))
    assert tr.tokens == t and tr.deltas == d and tr.prompt_len == len(t)


def test_suppression_over_many_tokens(model, vocab):
    t, d = prompt(vocab)
    x = vocab.id("DX:D2")
    cfg = SamplingConfig(suppress={x}, stop_on=frozenset(), max_new_tokens=200, top_k=len(vocab), seed=1)
    trajs = generate_many(model, [(t, d)] * 50, cfg)
    gen = [tok for tr in trajs for tok in tr.generated_tokens]
    assert len(gen) == 10_000 and x not in gen
    assert not {vocab.pad_id, vocab.id("[BOS]")} & set(gen)


def test_same_seed_same_trajectory(model, vocab):
    t, d = prompt(vocab)
    cfg = SamplingConfig(seed=5, max_new_tokens=30)
    a, b = generate(model, t, d, cfg), generate(model, t, d, cfg)
    assert a.tokens == b.tokens and a.deltas == b.deltas


def test_stop_tokens_terminate(model, vocab):
    t, d = prompt(vocab)
    free = generate(model, t, d, SamplingConfig(seed=3, max_new_tokens=40, stop_on=frozenset()))
    stop = free.generated_tokens[len(free.generated_tokens) // 2]
    tr = generate(model, t, d, SamplingConfig(seed=3, max_new_tokens=40, stop_on={stop}))
    assert tr.terminated_by == stop and tr.tokens[-1] == stop
    assert stop not in tr.generated_tokens[:-1]
    assert tr.generated_tokens == free.generated_tokens[:len(tr.generated_tokens)]


def test_prompt_errors(model, vocab):
    with pytest.raises(GenerationError):
        generate_batch(model, np.zeros((1, 0), dtype=int), np.zeros((1, 0)), SamplingConfig(), np.random.default_rng())
    with pytest.raises(GenerationError):
        generate(model, [1] * 30, [0.0] * 30, SamplingConfig())


def test_elapsed_day_cap(model, vocab):
    t, d = prompt(vocab)
    cfg = SamplingConfig(seed=2, max_new_tokens=200, stop_on=frozenset(), max_elapsed_days=5.0)
    for tr in generate_many(model, [(t, d)] * 20, cfg):
        g = np.cumsum(tr.generated_deltas)
        assert np.all(g[:-1] <= 5.0)


def test_generate_many_grouping_invariance(model, vocab):
    t, d = prompt(vocab)
    prompts = [(t, d), (t[:3], d[:3]), (t, d), (t[:4], d[:4])]
    cfg = SamplingConfig(seed=9, max_new_tokens=20)
    keys = stream_keys(1, np.arange(4))
    all_at_once = generate_many(model, prompts, cfg, keys)
    one_by_one = [generate_many(model, [p], cfg, keys[i:i + 1])[0] for i, p in enumerate(prompts)]
    for a, b in zip(all_at_once, one_by_one):
        assert a.tokens == b.tokens and np.allclose(a.deltas, b.deltas)


# ---------------------------------------------------------------- interventions


def test_force_intervention(vocab):
    t, d = prompt(vocab)
    t2, d2 = force_intervention(t, d, vocab.id("MED:STATIN:ATOR"))
    assert len(t2) == len(t) + 1 and d2[-1] == 0.0 and t2[-1] == vocab.id("MED:STATIN:ATOR")
    with pytest.raises(GenerationError):
        force_intervention(t, d, vocab.id("[PAD]"))


def test_arms_suppress_both_classes(model, vocab):
    t, d = prompt(vocab)
    treat, control = vocab.id("MED:STEROID:PRED"), vocab.id("MED:STATIN:ATOR")
    cfg = SamplingConfig(seed=4, max_new_tokens=40, top_k=len(vocab))
    a, b = generate_arms(model, t, d, treat, control, 200, cfg, patient_id="P1")
    assert len(a) == len(b) == 200
    banned = vocab.suppression_set(treat) | vocab.suppression_set(control)
    for tr in a + b:
        assert not set(tr.generated_tokens) & banned
    assert all(tr.tokens[len(t)] == treat for tr in a)
    assert all(tr.tokens[len(t)] == control for tr in b)


def test_arms_same_class_rejected(model, vocab):
    t, d = prompt(vocab)
    with pytest.raises(GenerationError, match="STEROID"):
        generate_arms(model, t, d, vocab.id("MED:STEROID:PRED"), vocab.id("MED:STEROID:DEX"), 2, SamplingConfig())
    with pytest.raises(GenerationError):
        generate_arms(model, t, d, vocab.id("DX:D1"), vocab.id("MED:STEROID:DEX"), 2, SamplingConfig())


def test_swapped_arms_swap_exactly(model, vocab):
    t, d = prompt(vocab)
    x, y = vocab.id("MED:STEROID:PRED"), vocab.id("MED:STATIN:ATOR")
    cfg = SamplingConfig(seed=4, max_new_tokens=25)
    a1, b1 = generate_arms(model, t, d, x, y, 30, cfg, patient_id="P7")
    a2, b2 = generate_arms(model, t, d, y, x, 30, cfg, patient_id="P7")
    assert [r.tokens for r in a1] == [r.tokens for r in b2]
    assert [r.tokens for r in b1] == [r.tokens for r in a2]


def test_arm_batching_does_not_change_results(model, vocab):
    t, d = prompt(vocab)
    x, y = vocab.id("MED:STEROID:PRED"), vocab.id("MED:STATIN:ATOR")
    cfg = SamplingConfig(seed=4, max_new_tokens=25)
    a1, _ = generate_arms(model, t, d, x, y, 20, cfg, patient_id="P7", batch_size=20)
    a2, _ = generate_arms(model, t, d, x, y, 20, cfg, patient_id="P7", batch_size=3)
    assert [r.tokens for r in a1] == [r.tokens for r in a2]


# ---------------------------------------------------------------- dump


def test_dump_round_trip(model, vocab, tmp_path):
    t, d = prompt(vocab)
    a, _ = generate_arms(model, t, d, vocab.id("MED:STEROID:PRED"), vocab.id("MED:STATIN:ATOR"), 3,
                         SamplingConfig(seed=1, max_new_tokens=10), patient_id="P9")
    path = tmp_path / "t.jsonl"
    write_trajectories(str(path), a, vocab)
    rec = json.loads(open(path).readline())
    assert {"patient_id", "arm", "replicate", "tokens", "deltas", "terminated_by"} <= set(rec)
    back = read_trajectories(str(path), vocab)
    assert [r.tokens for r in back] == [r.tokens for r in a]
    assert [r.prompt_len for r in back] == [r.prompt_len for r in a]
