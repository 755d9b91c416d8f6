"""Decoder-only event-sequence model with a content head and a ZILN time head.

Inputs at each position are the token's content embedding plus a small MLP of
``log1p(delta_t)``. Laboratory and vital-sign tokens embed as
``base[measure] + ordinal[bin]``; every other token has its own row. The
content head reuses the composed embedding matrix (weight tying), and the time
head emits ``(logit_z, mu, log_sigma)`` for the next event's gap.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .vocab import N_BINS

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

DEFAULT_CATEGORY_WEIGHTS = {
    "LAB": 2.0, "VITAL": 2.0, "MED": 1.0, "DX": 3.0, "SMOKE": 2.0, "AGE": 0.25,
}


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    category_weights: dict = field(default_factory=lambda: dict(DEFAULT_CATEGORY_WEIGHTS))
    loss_weights: tuple = (0.5, 0.25)
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        self.loss_weights = tuple(self.loss_weights)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_config(vocab_size, **kw):
    return ModelConfig(vocab_size=vocab_size, **kw)


def paper_scaled_config(vocab_size=220, **kw):
    """The 384/8/12/1536 configuration, kept for parameter-count checks."""
    base = dict(d_model=384, n_layers=8, n_heads=12, d_ff=1536, max_seq_len=512)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, **base)


@dataclass
class ZILNParams:
    logit_z: float
    mu: float
    log_sigma: float

    @property
    def sigma(self):
        return math.exp(self.log_sigma)

    @property
    def p_zero(self):
        return 1.0 / (1.0 + math.exp(-self.logit_z))


@dataclass
class ForwardOutput:
    content_logits: Tensor
    time_params: Tensor
    hidden: Tensor


@dataclass
class LossBreakdown:
    ce: float
    ziln: float
    emd: float
    total: float


# ---------------------------------------------------------------- ALiBi


def alibi_slopes(n_heads):
    """Head slopes of the ALiBi scheme; non-powers of two interleave the next
    power's slopes."""

    def pow2(n):
        start = 2.0 ** (-8.0 / n)
        return [start ** (i + 1) for i in range(n)]

    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    if math.log2(n_heads).is_integer():
        return np.array(pow2(n_heads))
    closest = 2 ** math.floor(math.log2(n_heads))
    extra = pow2(2 * closest)[0::2][: n_heads - closest]
    return np.array(pow2(closest) + extra)


def alibi_bias(n_heads, seq_len):
    """(n_heads, seq_len, seq_len) additive bias with the causal mask folded in."""
    i = np.arange(seq_len)[:, None]
    j = np.arange(seq_len)[None, :]
    dist = (i - j).astype(np.float64)
    slopes = alibi_slopes(n_heads)[:, None, None]
    bias = -slopes * dist
    return np.where(j > i, -np.inf, bias)


# ---------------------------------------------------------------- model


class FlatModel:
    def __init__(self, config, vocab, seed=0):
        if config.vocab_size != len(vocab):
            raise ValueError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.config = config
        self.vocab = vocab
        self._setup_tables()
        self.params = self._init_params(np.random.default_rng(seed))
        self._bias_cache = {}

    # ------------------------------------------------------------ tables

    def _setup_tables(self):
        vocab, v = self.vocab, len(self.vocab)
        families = {}
        plain = []
        fam_of = np.full(v, -1)
        for i, s in enumerate(vocab.specs):
            if s.is_ordinal:
                fam_of[i] = families.setdefault((s.category, s.measure), len(families))
            else:
                plain.append(i)
        self.n_families = len(families)
        self.plain_ids = np.array(plain, dtype=np.int64)
        sel_plain = np.zeros((v, len(plain)))
        sel_plain[plain, np.arange(len(plain))] = 1.0
        sel_base = np.zeros((v, max(self.n_families, 1)))
        sel_ord = np.zeros((v, N_BINS))
        for i in range(v):
            if fam_of[i] >= 0:
                sel_base[i, fam_of[i]] = 1.0
                sel_ord[i, vocab.ordinal_of[i] - 1] = 1.0
        self._sel = (sel_plain, sel_base, sel_ord)
        weights = self.config.category_weights
        self.token_weight = np.array([float(weights.get(s.weight_key, 1.0)) for s in vocab.specs])
        self.siblings = vocab.siblings
        self.target_bin = vocab.ordinal_of

    def _init_params(self, rng):
        c = self.config
        d, std = c.d_model, c.init_std
        resid_std = std / math.sqrt(2 * c.n_layers)

        def normal(*shape, s=std):
            return rng.normal(scale=s, size=shape)

        p = {
            "emb.plain": normal(len(self.plain_ids), d),
            "emb.base": normal(max(self.n_families, 1), d),
            "emb.ord": normal(N_BINS, d),
            "time_in.w1": normal(1, d),
            "time_in.b1": np.zeros(d),
            "time_in.w2": normal(d, d),
            "time_in.b2": np.zeros(d),
        }
        for layer in range(c.n_layers):
            pre = f"blocks.{layer}."
            p.update({
                pre + "ln1.g": np.ones(d), pre + "ln1.b": np.zeros(d),
                pre + "attn.wq": normal(d, d), pre + "attn.bq": np.zeros(d),
                pre + "attn.wk": normal(d, d), pre + "attn.bk": np.zeros(d),
                pre + "attn.wv": normal(d, d), pre + "attn.bv": np.zeros(d),
                pre + "attn.wo": normal(d, d, s=resid_std), pre + "attn.bo": np.zeros(d),
                pre + "ln2.g": np.ones(d), pre + "ln2.b": np.zeros(d),
                pre + "ff.w1": normal(d, c.d_ff), pre + "ff.b1": np.zeros(c.d_ff),
                pre + "ff.w2": normal(c.d_ff, d, s=resid_std), pre + "ff.b2": np.zeros(d),
            })
        p.update({
            "ln_f.g": np.ones(d), "ln_f.b": np.zeros(d),
            "time_head.w1": normal(d, d), "time_head.b1": np.zeros(d),
            "time_head.w2": normal(d, 3), "time_head.b2": np.zeros(3),
        })
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(t.size for t in self.params.values()))

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"parameter names differ: {sorted(missing)}")
        for k, t in self.params.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data[...] = state[k]

    # ------------------------------------------------------------ forward

    def content_matrix(self):
        """Composed (vocab, d_model) embedding shared by input and content head."""
        sp, sb, so = self._sel
        p = self.params
        return nx.matmul(sp, p["emb.plain"]) + nx.matmul(sb, p["emb.base"]) + nx.matmul(so, p["emb.ord"])

    def _alibi(self, t):
        bias = self._bias_cache.get(t)
        if bias is None:
            bias = self._bias_cache[t] = alibi_bias(self.config.n_heads, t)
        return bias

    def embed_inputs(self, tokens, deltas, table=None):
        tokens = np.asarray(tokens)
        deltas = np.asarray(deltas, dtype=np.float64)
        if np.any(deltas < 0):
            raise ValueError("inter-event deltas must be non-negative")
        if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= self.config.vocab_size:
            raise ValueError("token id out of range")
        p = self.params
        if table is None:
            table = self.content_matrix()
        content = nx.embedding(table, tokens)
        lt = np.log1p(deltas)[..., None]
        t = nx.gelu(nx.linear(lt, p["time_in.w1"], p["time_in.b1"]))
        t = nx.linear(t, p["time_in.w2"], p["time_in.b2"])
        return content + t

    def _attention(self, x, layer, bias):
        c = self.config
        p = self.params
        pre = f"blocks.{layer}.attn."
        b, t, d = x.shape
        h, dh = c.n_heads, d // c.n_heads

        def heads(w, bb):
            y = nx.linear(x, p[pre + w], p[pre + bb]).reshape(b, t, h, dh)
            return y.transpose(0, 2, 1, 3)

        q = heads("wq", "bq")
        k = heads("wk", "bk")
        v = heads("wv", "bv")
        scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = nx.softmax(nx.attention_bias_add(scores, bias), axis=-1)
        y = nx.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return nx.linear(y, p[pre + "wo"], p[pre + "bo"])

    def forward(self, tokens, deltas, last_only=False):
        tokens = np.atleast_2d(np.asarray(tokens))
        deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
        if tokens.shape != deltas.shape:
            raise ValueError(f"tokens {tokens.shape} and deltas {deltas.shape} differ in shape")
        c, p = self.config, self.params
        t = tokens.shape[1]
        if t > c.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {c.max_seq_len}")
        table = self.content_matrix()
        x = self.embed_inputs(tokens, deltas, table)
        bias = self._alibi(t)
        eps = c.ln_eps
        for layer in range(c.n_layers):
            pre = f"blocks.{layer}."
            x = x + self._attention(nx.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"], eps), layer, bias)
            hdn = nx.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"], eps)
            hdn = nx.gelu(nx.linear(hdn, p[pre + "ff.w1"], p[pre + "ff.b1"]))
            x = x + nx.linear(hdn, p[pre + "ff.w2"], p[pre + "ff.b2"])
        h = nx.layer_norm(x, p["ln_f.g"], p["ln_f.b"], eps)
        if last_only:
            h = h[:, -1:, :]
        logits = nx.matmul(h, table.transpose())
        th = nx.gelu(nx.linear(h, p["time_head.w1"], p["time_head.b1"]))
        time_params = nx.linear(th, p["time_head.w2"], p["time_head.b2"])
        return ForwardOutput(logits, time_params, h)

    __call__ = forward

    def next_step(self, tokens, deltas):
        """Last-position logits (B, V) and ZILN params (B, 3) for a batch of
        equal-length histories, using at most ``max_seq_len`` trailing events."""
        state = self.start(tokens, deltas)
        return state.logits, state.time_params

    # ------------------------------------------------------------ inference

    def start(self, tokens, deltas):
        """Prime a decode state on (B, T) histories. Pure numpy, no graph."""
        tokens = np.atleast_2d(np.asarray(tokens))
        deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
        w = self.config.max_seq_len
        state = DecodeState(self, tokens.shape[0])
        state.tokens = tokens
        state.deltas = deltas
        ctx_t, ctx_d = (tokens[:, -w:], deltas[:, -w:]) if tokens.shape[1] > w else (tokens, deltas)
        self._prefill(state, ctx_t, ctx_d)
        return state

    def advance(self, state, tok, dt):
        """Append one event per row and refresh ``state.logits``/``time_params``."""
        tok = np.asarray(tok).reshape(-1)
        dt = np.asarray(dt, dtype=np.float64).reshape(-1)
        state.tokens = np.concatenate([state.tokens, tok[:, None]], axis=1)
        state.deltas = np.concatenate([state.deltas, dt[:, None]], axis=1)
        if state.length >= self.config.max_seq_len:
            # window is full: re-prime on the trailing max_seq_len events
            w = self.config.max_seq_len
            self._prefill(state, state.tokens[:, -w:], state.deltas[:, -w:])
            return state
        self._decode(state, tok, dt)
        return state

    def select(self, state, rows):
        """Keep only ``rows`` of a decode state (finished rows are dropped)."""
        for name in ("tokens", "deltas", "logits", "time_params"):
            setattr(state, name, getattr(state, name)[rows])
        state.k = state.k[:, rows]
        state.v = state.v[:, rows]
        state.batch = len(rows)
        return state

    def _np(self):
        return {k: t.data for k, t in self.params.items()}

    def _content_np(self, p):
        sp, sb, so = self._sel
        return sp @ p["emb.plain"] + sb @ p["emb.base"] + so @ p["emb.ord"]

    def _embed_np(self, p, table, tok, dt):
        lt = np.log1p(dt)[..., None]
        t = _gelu_np(lt * p["time_in.w1"][0] + p["time_in.b1"])
        return table[tok] + t @ p["time_in.w2"] + p["time_in.b2"]

    def _heads_np(self, p, table, h):
        logits = h @ table.T
        th = _gelu_np(h @ p["time_head.w1"] + p["time_head.b1"])
        return logits, th @ p["time_head.w2"] + p["time_head.b2"]

    def _prefill(self, state, tokens, deltas):
        c = self.config
        p = state.p = self._np()
        table = state.table = self._content_np(p)
        b, t = tokens.shape
        nh, dh = c.n_heads, c.d_model // c.n_heads
        x = self._embed_np(p, table, tokens, deltas)
        bias = self._alibi(t)
        state.k = np.zeros((c.n_layers, b, nh, c.max_seq_len, dh))
        state.v = np.zeros((c.n_layers, b, nh, c.max_seq_len, dh))
        for layer in range(c.n_layers):
            pre = f"blocks.{layer}."
            h = _ln_np(x, p[pre + "ln1.g"], p[pre + "ln1.b"], c.ln_eps)
            q = (h @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            k = (h @ p[pre + "attn.wk"] + p[pre + "attn.bk"]).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            v = (h @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            state.k[layer, :, :, :t] = k
            state.v[layer, :, :, :t] = v
            att = _softmax_np(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + bias)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, c.d_model)
            x = x + y @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            h = _ln_np(x, p[pre + "ln2.g"], p[pre + "ln2.b"], c.ln_eps)
            x = x + _gelu_np(h @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
        h = _ln_np(x[:, -1], p["ln_f.g"], p["ln_f.b"], c.ln_eps)
        state.logits, state.time_params = self._heads_np(p, table, h)
        state.length = t

    def _decode(self, state, tok, dt):
        c, p, table = self.config, state.p, state.table
        b = tok.shape[0]
        nh, dh = c.n_heads, c.d_model // c.n_heads
        pos = state.length
        x = self._embed_np(p, table, tok, dt)
        slopes = alibi_slopes(nh)[:, None]
        bias = -slopes * (pos - np.arange(pos + 1))[None, :]
        for layer in range(c.n_layers):
            pre = f"blocks.{layer}."
            h = _ln_np(x, p[pre + "ln1.g"], p[pre + "ln1.b"], c.ln_eps)
            q = (h @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(b, nh, 1, dh)
            state.k[layer, :, :, pos] = (h @ p[pre + "attn.wk"] + p[pre + "attn.bk"]).reshape(b, nh, dh)
            state.v[layer, :, :, pos] = (h @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(b, nh, dh)
            k = state.k[layer, :, :, :pos + 1]
            v = state.v[layer, :, :, :pos + 1]
            att = _softmax_np(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + bias[None, :, None, :])
            y = (att @ v).reshape(b, c.d_model)
            x = x + y @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            h = _ln_np(x, p[pre + "ln2.g"], p[pre + "ln2.b"], c.ln_eps)
            x = x + _gelu_np(h @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
        h = _ln_np(x, p["ln_f.g"], p["ln_f.b"], c.ln_eps)
        state.logits, state.time_params = self._heads_np(p, table, h)
        state.length = pos + 1


class DecodeState:
    """Per-batch decode cache: attention keys/values plus the full histories."""

    def __init__(self, model, batch):
        self.model = model
        self.batch = batch
        self.tokens = self.deltas = None
        self.logits = self.time_params = None
        self.length = 0


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_np(x):
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def _ln_np(x, g, b, eps):
    inv_n = 1.0 / x.shape[-1]
    xc = x - np.add.reduce(x, axis=-1, keepdims=True) * inv_n
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_n
    xc *= 1.0 / np.sqrt(var + eps)
    xc *= g
    xc += b
    return xc


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- losses


def ziln_nll(logit_z, mu, log_sigma, target):
    """Closed-form negative log-likelihood of the zero-inflated log-normal."""
    if not all(map(math.isfinite, (logit_z, mu, log_sigma, target))):
        raise ValueError("non-finite ZILN argument")
    if target < 0:
        raise ValueError(f"target gap must be >= 0, got {target}")
    if target == 0:
        return float(np.logaddexp(0.0, -logit_z))
    lt = math.log(target)
    sigma = math.exp(log_sigma)
    return float(np.logaddexp(0.0, logit_z) + lt + log_sigma + LOG_SQRT_2PI
                 + (lt - mu) ** 2 / (2.0 * sigma * sigma))


def loss_ziln(params, target_dt):
    return ziln_nll(params.logit_z, params.mu, params.log_sigma, target_dt)


def ziln_nll_tensor(time_params, targets):
    """Mean ZILN NLL over rows of ``time_params`` (N, 3) against gaps (N,)."""
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets < 0) or not np.all(np.isfinite(targets)):
        raise ValueError("ZILN targets must be finite and non-negative")
    zero = (targets == 0).astype(np.float64)
    pos = 1.0 - zero
    lt = np.log(np.where(targets > 0, targets, 1.0))
    z = time_params[:, 0]
    mu = time_params[:, 1]
    ls = time_params[:, 2]
    zero_part = nx.softplus(-z) * zero
    resid = nx.square(lt - mu) * 0.5
    pos_part = (nx.softplus(z) + ls + resid * nx.exp(ls * -2.0) + (lt + LOG_SQRT_2PI)) * pos
    return (zero_part + pos_part).mean()


def loss_emd(logits, target_token, vocab):
    """Ordinal EMD for a single position: L1 distance between the CDF of the
    measure-local softmax and the target one-hot CDF."""
    sib = vocab.siblings[target_token]
    if sib[0] < 0:
        return 0.0
    z = np.asarray(logits, dtype=np.float64)[sib]
    p = np.exp(z - z.max())
    p /= p.sum()
    target = np.zeros(N_BINS)
    target[vocab.ordinal_of[target_token] - 1] = 1.0
    return float(np.abs(np.cumsum(p) - np.cumsum(target)).sum())


_CUM = np.triu(np.ones((N_BINS, N_BINS)))


def emd_tensor(logits, targets, siblings, bins, n_total):
    """Summed ordinal EMD over rows with ordinal targets, divided by ``n_total``."""
    ordinal = siblings[targets, 0] >= 0
    if not np.any(ordinal):
        return Tensor(0.0)
    rows = np.nonzero(ordinal)[0]
    sib = siblings[targets[rows]]
    sub = logits[rows[:, None], sib]
    p = nx.softmax(sub, axis=-1)
    cdf = nx.matmul(p, _CUM)
    target_cdf = np.cumsum(np.eye(N_BINS)[bins[targets[rows]] - 1], axis=1)
    return nx.tabs(cdf - target_cdf).sum() * (1.0 / n_total)


def loss_ce_weighted(logits, targets, weights, pad_id=0):
    """Mean over non-pad rows of ``weight[target] * CE``; ``logits`` is (N, V)."""
    targets = np.asarray(targets)
    keep = targets != pad_id
    if not np.any(keep):
        raise ValueError("all targets are padding")
    rows = np.nonzero(keep)[0]
    lp = nx.log_softmax(logits[rows], axis=-1)
    picked = lp[np.arange(rows.size), targets[rows]]
    w = np.asarray(weights, dtype=np.float64)[targets[rows]]
    return (picked * w).sum() * (-1.0 / rows.size)


def combine_losses(ce, ziln, emd, loss_weights=(0.5, 0.25)):
    w_ziln, w_emd = loss_weights
    return ce + w_ziln * ziln + w_emd * emd


def total_loss(model, tokens, deltas, input_tokens=None, input_deltas=None):
    """Three-part training loss for a right-padded batch.

    Targets always come from ``tokens``/``deltas``; the model reads
    ``input_tokens``/``input_deltas`` (defaulting to the targets' own
    sequence), which lets scheduled sampling swap in generated inputs.
    Returns ``(total Tensor, LossBreakdown)``.
    """
    tokens = np.asarray(tokens)
    deltas = np.asarray(deltas, dtype=np.float64)
    if input_tokens is None:
        input_tokens, input_deltas = tokens, deltas
    out = model.forward(input_tokens[:, :-1], input_deltas[:, :-1])
    v = model.config.vocab_size
    logits = out.content_logits.reshape(-1, v)
    tparams = out.time_params.reshape(-1, 3)
    tgt = tokens[:, 1:].reshape(-1)
    tgt_dt = deltas[:, 1:].reshape(-1)
    valid = np.nonzero(tgt != model.vocab.pad_id)[0]
    if valid.size == 0:
        raise ValueError("batch has no non-pad targets")
    logits_v = logits[valid]
    tgt_v = tgt[valid]
    ce = loss_ce_weighted(logits_v, tgt_v, model.token_weight, model.vocab.pad_id)
    zl = ziln_nll_tensor(tparams[valid], tgt_dt[valid])
    emd = emd_tensor(logits_v, tgt_v, model.siblings, model.target_bin, valid.size)
    w_ziln, w_emd = model.config.loss_weights
    total = ce + zl * w_ziln + emd * w_emd
    parts = LossBreakdown(ce.item(), zl.item(), emd.item(), total.item())
    return total, parts


def sequence_ce(model, tokens, deltas):
    """Summed unweighted next-token CE and the count of scored positions."""
    tokens = np.asarray(tokens)
    with nx.no_grad():
        out = model.forward(tokens[:, :-1], np.asarray(deltas)[:, :-1])
    lg = out.content_logits.data
    lg = lg - lg.max(axis=-1, keepdims=True)
    lp = lg - np.log(np.exp(lg).sum(axis=-1, keepdims=True))
    tgt = tokens[:, 1:]
    keep = tgt != model.vocab.pad_id
    picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
    return float(-(picked * keep).sum()), int(keep.sum())


def teacher_forcing_perplexity(model, sequences, batch_size=32):
    """exp of the mean unweighted content CE over all non-pad targets.

    ``sequences`` is a list of ``(token_ids, deltas)``; longer sequences are
    scored over their first ``max_seq_len`` events.
    """
    total, count = 0.0, 0
    w = model.config.max_seq_len + 1
    seqs = sorted(((list(t)[:w], list(d)[:w]) for t, d in sequences), key=lambda s: len(s[0]))
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        tok, dt = pad_batch(chunk, model.vocab.pad_id)
        s, n = sequence_ce(model, tok, dt)
        total += s
        count += n
    if count == 0:
        raise ValueError("no scorable positions")
    return math.exp(total / count)


def pad_batch(seqs, pad_id=0):
    """Right-pad ``[(tokens, deltas), ...]`` into two (B, T) arrays."""
    t = max(len(s[0]) for s in seqs)
    tok = np.full((len(seqs), t), pad_id, dtype=np.int64)
    dt = np.zeros((len(seqs), t))
    for i, (a, b) in enumerate(seqs):
        tok[i, :len(a)] = a
        dt[i, :len(b)] = b
    return tok, dt
