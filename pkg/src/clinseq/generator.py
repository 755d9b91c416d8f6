"""Autoregressive trajectory sampling with suppression and forced interventions.

Any object with ``vocab``, ``start(tokens, deltas)``,
``advance(state, tok, dt)`` and ``select(state, rows)`` can be sampled from; both ``FlatModel`` and the
synthetic ``CohortOracle`` implement that protocol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .io import write_jsonl
from .synth import patient_key
from .vocab import BOS, DEATH, EOS, PAD

DEFAULT_MAX_NEW = 200


class GenerationError(ValueError):
    pass


@dataclass
class SamplingConfig:
    temperature: float = 1.0
    top_k: int | None = 20  # None: sample from the full distribution
    max_new_tokens: int = DEFAULT_MAX_NEW
    suppress: frozenset = frozenset()
    stop_on: frozenset | None = None  # None: the vocabulary's [EOS] and [DEATH]
    seed: int = 0
    max_elapsed_days: float | None = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        self.suppress = frozenset(int(i) for i in self.suppress)
        if self.stop_on is not None:
            self.stop_on = frozenset(int(i) for i in self.stop_on)

    def stop_ids(self, vocab):
        if self.stop_on is not None:
            return self.stop_on
        return frozenset(vocab.id(t) for t in (EOS, DEATH) if t in vocab)

    def replace(self, **kw):
        d = dict(self.__dict__)
        d.update(kw)
        return SamplingConfig(**d)


@dataclass
class Trajectory:
    tokens: list
    deltas: list
    prompt_len: int
    terminated_by: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def events(self):
        return list(zip(self.tokens[self.prompt_len:], self.deltas[self.prompt_len:]))

    @property
    def generated_tokens(self):
        return self.tokens[self.prompt_len:]

    @property
    def generated_deltas(self):
        return self.deltas[self.prompt_len:]

    def __len__(self):
        return len(self.tokens)


# ---------------------------------------------------------------- sampling law


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x):
    """splitmix64 finaliser on uint64 arrays (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64) + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def stream_keys(*parts):
    """Combine integer arrays (broadcast together) into one 64-bit key per row."""
    with np.errstate(over="ignore"):
        key = np.zeros(np.broadcast(*[np.asarray(p) for p in parts]).shape, dtype=np.uint64)
        for p in parts:
            key = _mix64(key ^ np.asarray(p, dtype=np.int64).astype(np.uint64))
    return key


class RowStreams:
    """Counter-based random streams, one per row.

    Draw ``j`` of a row is a hash of (row key, step, slot), so a row's
    numbers depend only on its key and not on the batch it runs in or on
    which other rows have finished."""

    def __init__(self, keys):
        self.keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
        self.step = 0

    def _unit(self, slot):
        with np.errstate(over="ignore"):
            z = _mix64(self.keys ^ _mix64(np.uint64(self.step * 4 + slot)))
        return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def __call__(self, b):
        u_tok, u_zero, u_norm = self._unit(0), self._unit(1), self._unit(2)
        self.step += 1
        return u_tok, u_zero, ndtri(u_norm)

    def select(self, idx):
        self.keys = self.keys[idx]


def _draws(rng, b):
    if isinstance(rng, RowStreams):
        return rng(b)
    return rng.random(b), rng.random(b), rng.standard_normal(b)


def sample_rows(logits, time_params, cfg, rng, suppress_ids=None):
    """Vectorised sampling for a batch of rows.

    ``time_params`` is (B, 3) or token-conditional (B, V, 3). ``rng`` is a
    numpy Generator shared by the batch or a ``RowStreams`` with one stream
    per row. Returns (token ids, Δt).
    """
    logits = np.array(logits, dtype=np.float64, ndmin=2)
    b, v = logits.shape
    sup = cfg.suppress if suppress_ids is None else suppress_ids
    if sup:
        logits[:, sorted(sup)] = -np.inf
    if not np.isfinite(logits).any(axis=1).all():
        raise GenerationError("every token is suppressed; nothing to sample")
    logits = logits / cfg.temperature
    k = v if cfg.top_k is None else min(cfg.top_k, v)
    if k < v:
        keep = np.argpartition(-logits, k - 1, axis=1)[:, :k]
        masked = np.full_like(logits, -np.inf)
        np.put_along_axis(masked, keep, np.take_along_axis(logits, keep, axis=1), axis=1)
        logits = masked
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    cum = np.cumsum(p, axis=1)
    u_tok, u_zero, z = _draws(rng, b)
    target = u_tok * cum[:, -1]
    tok = np.minimum((cum <= target[:, None]).sum(axis=1), v - 1)
    # guard against landing on a zero-probability slot through round-off
    bad = p[np.arange(b), tok] == 0
    if bad.any():
        tok[bad] = np.argmax(p[bad], axis=1)
    tp = np.asarray(time_params, dtype=np.float64)
    tp = tp[np.arange(b), tok] if tp.ndim == 3 else np.atleast_2d(tp)
    with np.errstate(over="ignore"):
        p_zero = 1.0 / (1.0 + np.exp(-tp[:, 0]))
        dt = np.where(u_zero < p_zero, 0.0, np.exp(tp[:, 1] + np.exp(tp[:, 2]) * z))
    return tok, dt


def sample_next(logits, time_params, cfg, rng):
    """One (token id, Δt) draw from next-step logits (V,) and ZILN params."""
    logits = np.asarray(logits, dtype=np.float64)
    tp = np.asarray(time_params, dtype=np.float64)
    tok, dt = sample_rows(logits[None], tp[None], cfg, rng)
    return int(tok[0]), float(dt[0])


# ---------------------------------------------------------------- generation


def force_intervention(prompt_tokens, prompt_deltas, token_id, vocab=None):
    """Append ``token_id`` with Δt = 0."""
    token_id = int(token_id)
    if token_id == 0 or (vocab is not None and vocab.token(token_id) == PAD):
        raise GenerationError("cannot force the padding token")
    if vocab is not None and not 0 <= token_id < len(vocab):
        raise GenerationError(f"token id {token_id} outside vocabulary")
    return list(prompt_tokens) + [token_id], list(prompt_deltas) + [0.0]


def _context_limit(model):
    cfg = getattr(model, "config", None)
    return getattr(cfg, "max_seq_len", None)


def generate_batch(model, prompt_tokens, prompt_deltas, cfg, rng):
    """Sample one continuation per row of an equal-length prompt batch.

    Rows stop independently on a stop token, on ``max_new_tokens``, or once
    their generated time exceeds ``cfg.max_elapsed_days``. ``[PAD]`` and
    ``[BOS]`` are always suppressed on top of ``cfg.suppress``.
    """
    pt = np.atleast_2d(np.asarray(prompt_tokens, dtype=np.int64))
    pd = np.atleast_2d(np.asarray(prompt_deltas, dtype=np.float64))
    b, t0 = pt.shape
    if t0 == 0:
        raise GenerationError("prompt is empty")
    limit = _context_limit(model)
    if limit is not None and t0 > limit:
        raise GenerationError(f"prompt of {t0} events exceeds context of {limit}")
    stops = cfg.stop_ids(model.vocab)
    stop_arr = np.array(sorted(stops), dtype=np.int64)
    # padding and sequence-start markers are never a valid next event
    vocab = model.vocab
    suppress = set(cfg.suppress) | {vocab.pad_id, vocab.id(BOS)}
    out_t = np.zeros((b, cfg.max_new_tokens), dtype=np.int64)
    out_d = np.zeros((b, cfg.max_new_tokens))
    n_gen = np.zeros(b, dtype=np.int64)
    term = np.full(b, -1, dtype=np.int64)
    elapsed = np.zeros(b)
    rows = np.arange(b)  # original index of each row still being simulated
    state = model.start(pt, pd) if cfg.max_new_tokens > 0 else None
    for step in range(cfg.max_new_tokens):
        tok, dt = sample_rows(state.logits, state.time_params, cfg, rng, suppress)
        out_t[rows, step] = tok
        out_d[rows, step] = dt
        n_gen[rows] += 1
        hit = np.isin(tok, stop_arr)
        term[rows[hit]] = tok[hit]
        elapsed[rows] += dt
        keep = ~hit
        if cfg.max_elapsed_days is not None:
            keep &= elapsed[rows] <= cfg.max_elapsed_days
        if not keep.any() or step == cfg.max_new_tokens - 1:
            break
        if not keep.all():
            # drop finished rows from the decode state and their random streams
            idx = np.nonzero(keep)[0]
            model.select(state, idx)
            if isinstance(rng, RowStreams):
                rng.select(idx)
            rows, tok, dt = rows[idx], tok[idx], dt[idx]
        model.advance(state, tok, dt)
    trajs = []
    for i in range(b):
        n = n_gen[i]
        trajs.append(Trajectory(pt[i].tolist() + out_t[i, :n].tolist(),
                                pd[i].tolist() + out_d[i, :n].tolist(), t0,
                                int(term[i]) if term[i] >= 0 else None))
    return trajs


def generate(model, prompt_tokens, prompt_deltas, cfg, rng=None):
    """Single trajectory; deterministic given ``cfg.seed`` (or ``rng``)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return generate_batch(model, [list(prompt_tokens)], [list(prompt_deltas)], cfg, rng)[0]


def generate_many(model, prompts, cfg, keys=None):
    """One trajectory per (tokens, deltas) prompt, batching equal lengths.

    Prompt i uses the stream ``keys[i]`` (default: derived from ``cfg.seed``
    and i), so results do not depend on how prompts are grouped."""
    keys = stream_keys(cfg.seed, np.arange(len(prompts))) if keys is None else np.asarray(keys, dtype=np.uint64)
    out = [None] * len(prompts)
    groups = {}
    for i, (tk, _) in enumerate(prompts):
        groups.setdefault(len(tk), []).append(i)
    for _, idx in sorted(groups.items()):
        trajs = generate_batch(model, [prompts[i][0] for i in idx], [prompts[i][1] for i in idx], cfg,
                               RowStreams(keys[idx]))
        for i, tr in zip(idx, trajs):
            out[i] = tr
    return out


def arm_keys(seed, patient_id, token_id, replicates, occurrence=0):
    """Stream keys for the replicates of one arm. The arm is named by its
    forced token, so swapping treatment and control swaps the streams
    exactly; ``occurrence`` separates the two arms of a self-comparison."""
    return stream_keys(seed, patient_key(patient_id), token_id, np.asarray(replicates), occurrence)


def generate_arms(model, prompt_tokens, prompt_deltas, treat_token, control_token, n_per_arm, cfg,
                  patient_id="", batch_size=1024):
    vocab = model.vocab
    treat_token, control_token = int(treat_token), int(control_token)
    for tkn in (treat_token, control_token):
        if vocab.specs[tkn].category != "MED":
            raise GenerationError(f"arm token {vocab.token(tkn)!r} is not a medication")
    c_t, c_c = vocab.specs[treat_token].med_class, vocab.specs[control_token].med_class
    # identical tokens are the self-comparison null (independent streams per arm);
    # distinct drugs of one class would contaminate each other's suppression
    if c_t == c_c and treat_token != control_token:
        raise GenerationError(f"treatment and control share drug class {c_t!r}")
    suppress = set(cfg.suppress) | vocab.suppression_set(treat_token) | vocab.suppression_set(control_token)
    arm_cfg = cfg.replace(suppress=frozenset(suppress))
    arms = []
    for occurrence, tkn in enumerate((treat_token, control_token)):
        occurrence = occurrence if treat_token == control_token else 0
        toks, dts = force_intervention(prompt_tokens, prompt_deltas, tkn, vocab)
        trajs = []
        for lo in range(0, n_per_arm, batch_size):
            reps = np.arange(lo, min(n_per_arm, lo + batch_size))
            streams = RowStreams(arm_keys(cfg.seed, patient_id, tkn, reps, occurrence))
            batch = generate_batch(model, [toks] * len(reps), [dts] * len(reps), arm_cfg, streams)
            for r, tr in zip(reps.tolist(), batch):
                tr.meta = {"patient_id": patient_id, "arm": vocab.token(tkn), "replicate": r}
            trajs.extend(batch)
        arms.append(trajs)
    return arms[0], arms[1]


# ---------------------------------------------------------------- dump


def trajectory_record(traj, vocab):
    meta = traj.meta
    return {"patient_id": meta.get("patient_id", ""), "arm": meta.get("arm"),
            "replicate": meta.get("replicate", 0),
            "tokens": vocab.decode(traj.tokens), "deltas": [float(d) for d in traj.deltas],
            "prompt_len": traj.prompt_len,
            "terminated_by": vocab.token(traj.terminated_by) if traj.terminated_by is not None else None}


def write_trajectories(path, trajs, vocab):
    write_jsonl(path, (trajectory_record(t, vocab) for t in trajs))


def read_trajectories(path, vocab):
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            term = d.get("terminated_by")
            out.append(Trajectory(vocab.encode(d["tokens"]), d["deltas"], d.get("prompt_len", 0),
                                  vocab.id(term) if term else None,
                                  {"patient_id": d.get("patient_id", ""), "arm": d.get("arm"),
                                   "replicate": d.get("replicate", 0)}))
    return out
