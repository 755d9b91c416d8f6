import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clinseq import numerics as nx
from clinseq.model import (
    DEFAULT_CATEGORY_WEIGHTS, FlatModel, ModelConfig, ZILNParams, alibi_bias, alibi_slopes,
    combine_losses, desk_config, loss_ce_weighted, loss_emd, loss_ziln, paper_scaled_config,
    teacher_forcing_perplexity, total_loss, ziln_nll, ziln_nll_tensor,
)
from clinseq.numerics import Tensor
from clinseq.vocab import Vocabulary


def _vocab():
    toks = [f"LAB:L{i}:Q{q}" for i in range(3) for q in range(1, 6)]
    toks += [f"VITAL:V0:Q{q}" for q in range(1, 6)]
    toks += ["MED:A:X", "MED:A:Y", "MED:B:Z", "DX:D1", "DX:D2", "AGE:D3", "AGE:D7", "SEX:F", "SMOKE:NO"]
    return Vocabulary.from_tokens(toks)


@pytest.fixture(scope="module")
def vocab():
    return _vocab()


@pytest.fixture
def model(vocab):
    return FlatModel(desk_config(len(vocab), d_model=16, n_layers=2, n_heads=4, d_ff=32, max_seq_len=12), vocab, seed=1)


def _batch(vocab, rng, b=3, t=9):
    ids = rng.integers(1, len(vocab), size=(b, t))
    dts = rng.exponential(3.0, size=(b, t)) * (rng.random((b, t)) > 0.4)
    return ids, dts


# ---------------------------------------------------------------- config


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=30, n_heads=4)
    assert ModelConfig(vocab_size=10).category_weights == {
        "LAB": 2.0, "VITAL": 2.0, "MED": 1.0, "DX": 3.0, "SMOKE": 2.0, "AGE": 0.25}
    assert DEFAULT_CATEGORY_WEIGHTS["AGE"] == 0.25


def test_ziln_params_sigma():
    p = ZILNParams(0.0, 1.0, math.log(2.0))
    assert p.sigma == pytest.approx(2.0) and p.p_zero == 0.5


def test_vocab_mismatch_rejected(vocab):
    with pytest.raises(ValueError):
        FlatModel(desk_config(len(vocab) + 1), vocab)


def _paper_vocab():
    toks = [f"LAB:M{i}:Q{q}" for i in range(22) for q in range(1, 6)]
    toks += [f"VITAL:V{i}:Q{q}" for i in range(8) for q in range(1, 6)]
    toks += [f"MED:C{i}" for i in range(32)] + [f"DX:D{i}" for i in range(22)]
    toks += [f"AGE:D{k}" for k in range(1, 11)] + ["SEX:F", "SEX:M"]
    return Vocabulary.from_tokens(toks)


def test_scaled_preset_parameter_count():
    v = _paper_vocab()
    assert len(v) == 220
    m = FlatModel(paper_scaled_config(len(v)), v)
    assert abs(m.n_parameters() - 14.5e6) / 14.5e6 < 0.02


def test_desk_preset_shape():
    c = desk_config(50)
    assert (c.d_model, c.n_layers, c.n_heads, c.d_ff) == (64, 2, 4, 256)


# ---------------------------------------------------------------- embeddings


def test_zero_gap_time_input_is_zero(model, vocab):
    p = {k: t.data for k, t in model.params.items()}
    e = model.embed_inputs(np.array([[5, 5]]), np.array([[0.0, 0.0]])).data[0]
    table = model.content_matrix().data
    from clinseq.model import _gelu_np
    expected = table[5] + _gelu_np(p["time_in.b1"]) @ p["time_in.w2"] + p["time_in.b2"]
    assert np.allclose(e[0], expected, atol=1e-12) and np.allclose(e[1], expected)


def test_factoring_identity(model, vocab):
    table = model.content_matrix().data
    d = [table[vocab.id(f"LAB:L{i}:Q3")] - table[vocab.id(f"LAB:L{i}:Q2")] for i in range(3)]
    d.append(table[vocab.id("VITAL:V0:Q3")] - table[vocab.id("VITAL:V0:Q2")])
    ordv = model.params["emb.ord"].data
    for x in d:
        assert np.allclose(x, ordv[2] - ordv[1], atol=1e-12)


def test_med_embedding_has_no_ordinal_component(model, vocab):
    i = vocab.id("MED:A:X")
    before = model.content_matrix().data[i].copy()
    model.params["emb.ord"].data += 5.0
    assert np.array_equal(model.content_matrix().data[i], before)


def test_negative_delta_rejected(model):
    with pytest.raises(ValueError):
        model.embed_inputs(np.array([[1, 2]]), np.array([[0.0, -1.0]]))


# ---------------------------------------------------------------- ALiBi


def test_alibi_diagonal_and_mask():
    b = alibi_bias(4, 6)
    assert np.all(np.diagonal(b, axis1=1, axis2=2) == 0)
    iu = np.triu_indices(6, 1)
    assert np.all(np.isneginf(b[:, iu[0], iu[1]]))
    assert b[1, 5, 2] == pytest.approx(-alibi_slopes(4)[1] * 3)


def test_alibi_eight_head_slopes():
    assert np.allclose(alibi_slopes(8), [2.0 ** -k for k in range(1, 9)])


def test_alibi_non_power_of_two_interpolates():
    s = alibi_slopes(12)
    assert np.allclose(s[:8], alibi_slopes(8))
    assert np.allclose(s[8:], alibi_slopes(16)[0::2][:4])
    assert len(set(s.tolist())) == 12


# ---------------------------------------------------------------- forward


def test_output_lengths_match(model, vocab, rng):
    ids, dts = _batch(vocab, rng)
    out = model.forward(ids, dts)
    assert out.content_logits.shape == (3, 9, len(vocab))
    assert out.time_params.shape == (3, 9, 3)
    assert out.hidden.shape == (3, 9, 16)


def test_causality(model, vocab, rng):
    ids, dts = _batch(vocab, rng, b=1)
    base = model.forward(ids, dts).content_logits.data
    for t in range(ids.shape[1] - 1):
        ids2, dts2 = ids.copy(), dts.copy()
        ids2[0, t + 1:] = rng.integers(1, len(vocab), size=ids.shape[1] - t - 1)
        dts2[0, t + 1:] += 7.0
        out = model.forward(ids2, dts2).content_logits.data
        assert np.allclose(out[0, :t + 1], base[0, :t + 1], atol=1e-9)


def test_zero_embeddings_give_uniform(model, vocab, rng):
    for k in ("emb.plain", "emb.base", "emb.ord"):
        model.params[k].data[...] = 0.0
    ids, dts = _batch(vocab, rng)
    lg = model.forward(ids, dts).content_logits.data
    assert np.allclose(lg, 0.0)
    seqs = [(ids[i], dts[i]) for i in range(len(ids))]
    assert teacher_forcing_perplexity(model, seqs) == pytest.approx(len(vocab), rel=1e-12)


def test_weight_tying_after_updates(model, vocab, rng):
    ids, dts = _batch(vocab, rng)
    opt = nx.AdamW(model.parameters())
    for _ in range(2):
        opt.zero_grad()
        loss, _ = total_loss(model, ids, dts)
        loss.backward()
        opt.step(1e-2)
    out = model.forward(ids, dts)
    table = model.content_matrix().data
    assert np.allclose(out.content_logits.data, out.hidden.data @ table.T, atol=1e-12)
    emb = model.embed_inputs(ids, np.zeros_like(dts)).data - model.embed_inputs(
        np.full_like(ids, ids[0, 0]), np.zeros_like(dts)).data
    assert np.allclose(emb, table[ids] - table[ids[0, 0]], atol=1e-12)


def test_overlong_rejected(model, vocab):
    with pytest.raises(ValueError):
        model.forward(np.ones((1, 13), dtype=int), np.zeros((1, 13)))


# ---------------------------------------------------------------- incremental decoding


def test_cached_decode_matches_full_forward(model, vocab, rng):
    ids, dts = _batch(vocab, rng, b=4, t=20)  # runs past the 12-event window
    state = model.start(ids[:, :3], dts[:, :3])
    for t in range(3, 21):
        w = slice(max(0, t - 12), t)
        full = model.forward(ids[:, w], dts[:, w])
        assert np.allclose(state.logits, full.content_logits.data[:, -1], atol=1e-9)
        assert np.allclose(state.time_params, full.time_params.data[:, -1], atol=1e-9)
        if t < 20:
            model.advance(state, ids[:, t], dts[:, t])


def test_select_keeps_rows(model, vocab, rng):
    ids, dts = _batch(vocab, rng, b=4, t=6)
    s_all = model.start(ids[:, :4], dts[:, :4])
    model.select(s_all, np.array([1, 3]))
    model.advance(s_all, ids[[1, 3], 4], dts[[1, 3], 4])
    ref = model.start(ids[[1, 3], :5], dts[[1, 3], :5])
    assert np.allclose(s_all.logits, ref.logits, atol=1e-10)


# ---------------------------------------------------------------- losses


def test_ce_perfect_is_zero():
    lg = Tensor(np.array([[0.0, 800.0, 0.0], [0.0, 0.0, 800.0]]))
    assert loss_ce_weighted(lg, [1, 2], np.ones(3), pad_id=0).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_uniform_is_log_v():
    v = 11
    assert loss_ce_weighted(Tensor(np.zeros((4, v))), [1, 2, 3, 4], np.ones(v)).item() == pytest.approx(math.log(v))


def test_ce_category_weights_average():
    w = np.array([1.0, 0.25, 1.0])  # id 1 stands for an AGE token, id 2 for a MED token
    c = math.log(3)
    got = loss_ce_weighted(Tensor(np.zeros((2, 3))), [1, 2], w).item()
    assert got == pytest.approx((0.25 * c + c) / 2)


def test_ce_all_pad_rejected():
    with pytest.raises(ValueError):
        loss_ce_weighted(Tensor(np.zeros((2, 3))), [0, 0], np.ones(3))


def test_ziln_examples():
    assert loss_ziln(ZILNParams(60.0, 0.0, 0.0), 0.0) == pytest.approx(0.0, abs=1e-25)
    assert loss_ziln(ZILNParams(0.0, 0.0, 0.0), 1.0) == pytest.approx(math.log(2) + 0.5 * math.log(2 * math.pi))
    assert loss_ziln(ZILNParams(0.0, 0.0, 0.0), 1.0) == pytest.approx(1.6121, abs=1e-4)
    assert loss_ziln(ZILNParams(0.0, 3.0, 1.0), 0.0) == pytest.approx(math.log(2))


def test_ziln_errors():
    with pytest.raises(ValueError):
        ziln_nll(0.0, 0.0, 0.0, -1.0)
    with pytest.raises(ValueError):
        ziln_nll(float("nan"), 0.0, 0.0, 1.0)


def test_ziln_nll_is_proper():
    rng = np.random.default_rng(5)
    theta = np.array([0.3, 1.2, np.log(0.7)])
    n = 100_000
    zero = rng.random(n) < 1 / (1 + np.exp(-theta[0]))
    x = np.where(zero, 0.0, np.exp(theta[1] + np.exp(theta[2]) * rng.standard_normal(n)))

    def mean_nll(th):
        return ziln_nll_tensor(Tensor(np.tile(th, (n, 1))), x).item()

    best = mean_nll(theta)
    for i in range(3):
        for s in (-0.1, 0.1):
            th = theta.copy()
            th[i] += s
            assert mean_nll(th) > best


def test_emd_examples(vocab):
    tgt = vocab.id("LAB:L1:Q1")
    lg = np.zeros(len(vocab))
    assert loss_emd(lg, tgt, vocab) == pytest.approx(2.0)
    lg[tgt] = 1e3
    assert loss_emd(lg, tgt, vocab) == pytest.approx(0.0, abs=1e-12)
    assert loss_emd(np.zeros(len(vocab)), vocab.id("MED:A:X"), vocab) == 0.0


@given(st.lists(st.floats(-20, 20), min_size=5, max_size=5), st.integers(1, 5))
def test_property_emd_bounds(z, q):
    v = _vocab()
    lg = np.zeros(len(v))
    sib = v.measure_tokens("L0")
    lg[sib] = z
    e = loss_emd(lg, sib[q - 1], v)
    assert -1e-12 <= e <= 4.0 + 1e-12


def test_total_weight_arithmetic():
    assert combine_losses(1.0, 2.0, 4.0) == 3.0
    assert combine_losses(1.0, 2.0, 4.0, (0.5, 0.0)) == combine_losses(1.0, 2.0, 99.0, (0.5, 0.0))


def test_total_loss_breakdown(model, vocab, rng):
    ids, dts = _batch(vocab, rng)
    _, parts = total_loss(model, ids, dts)
    assert parts.total == pytest.approx(parts.ce + 0.5 * parts.ziln + 0.25 * parts.emd)
    model.config.loss_weights = (0.5, 0.0)
    _, p2 = total_loss(model, ids, dts)
    assert p2.total == pytest.approx(p2.ce + 0.5 * p2.ziln)


# ---------------------------------------------------------------- perplexity oracles


class _ChainModel:
    """Scores the next token with a fixed table of log-probabilities."""

    def __init__(self, logp, vocab):
        self.logp = logp
        self.vocab = vocab
        self.config = type("C", (), {"max_seq_len": 1000})()

    def forward(self, tokens, deltas):
        out = type("O", (), {})()
        out.content_logits = Tensor(self.logp[np.asarray(tokens)])
        return out


def test_perfect_model_perplexity_one():
    v = Vocabulary.from_tokens(["DX:A", "DX:B"])
    a, b = v.id("DX:A"), v.id("DX:B")
    logp = np.full((len(v), len(v)), -1e4)
    logp[a, b] = logp[b, a] = 0.0
    seq = [a, b, a, b, a, b]
    assert teacher_forcing_perplexity(_ChainModel(logp, v), [(seq, [0.0] * 6)]) == pytest.approx(1.0)


def test_bigram_perplexity_matches_entropy_rate():
    from clinseq.baselines import fit_bigram

    v = Vocabulary.from_tokens(["DX:A", "DX:B", "DX:C"])
    ids = [v.id(t) for t in ("DX:A", "DX:B", "DX:C")]
    p = np.array([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.3, 0.3, 0.4]])
    rng = np.random.default_rng(2)
    seqs = []
    for _ in range(40):
        s = [ids[0]]
        for _ in range(199):
            s.append(ids[rng.choice(3, p=p[ids.index(s[-1])])])
        seqs.append((s, [1.0] * 200))
    bg = fit_bigram(seqs, len(v))
    with np.errstate(divide="ignore"):
        logp = np.log(bg.transition)
    ppl = teacher_forcing_perplexity(_ChainModel(logp, v), seqs, batch_size=8)
    counts = np.zeros((len(v), len(v)))
    for s, _ in seqs:
        for x, y in zip(s[:-1], s[1:]):
            counts[x, y] += 1
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.nansum(counts * np.log(counts / counts.sum(1, keepdims=True))) / counts.sum()
    assert ppl == pytest.approx(math.exp(h), rel=1e-10)
    # and close to the chain's true entropy rate
    evals, evecs = np.linalg.eig(p.T)
    pi = np.real(evecs[:, np.argmin(abs(evals - 1))])
    pi /= pi.sum()
    true_h = -(pi[:, None] * p * np.log(p)).sum()
    assert math.log(ppl) == pytest.approx(true_h, abs=0.03)
