"""Training loop: warmup-cosine schedule, length-bucketed batches, free-running
scheduled sampling, checkpoints and fine-tuning on a new site."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .generator import SamplingConfig, sample_rows
from .model import FlatModel, ModelConfig, pad_batch, teacher_forcing_perplexity, total_loss
from .numerics import AdamW, OptimizerState
from .vocab import BOS, DEATH, EOS, PAD, Vocabulary

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 2000
    total_steps: int = 100_000
    batch_size: int = 32
    clip_norm: float = 1.0
    ss_temperature: float = 0.8
    ss_top_k: int = 20
    ss_start_range: tuple = (2, 20)
    ss_fraction: float = 0.5
    seed: int = 0
    weight_decay: float = 0.01
    val_every: int = 500
    log_every: int = 50
    checkpoint_every: int = 0  # 0: only at the end
    max_skip_fraction: float = 0.01
    val_max_sequences: int = 500
    bucket_span: int = 16  # batches per length-sorted pool

    def __post_init__(self):
        self.ss_start_range = tuple(self.ss_start_range)
        if self.peak_lr < 0 or self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("learning rate and step counts must be non-negative")
        if not 0 <= self.ss_fraction <= 1:
            raise ValueError(f"ss_fraction {self.ss_fraction} outside [0, 1]")
        lo, hi = self.ss_start_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid ss_start_range {self.ss_start_range}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def fine_tune_config(**kw):
    """Site-adaptation preset: 5000 steps at 1e-4 with a 200-step warmup."""
    base = dict(peak_lr=1e-4, warmup_steps=200, total_steps=5000)
    base.update(kw)
    return TrainConfig(**base)


def lr_at(step, cfg):
    """Linear warmup to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.peak_lr * step / w
    span = cfg.total_steps - w
    if span <= 0:
        return cfg.peak_lr
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


# ---------------------------------------------------------------- data


def as_training_set(patients, vocab, max_len):
    """(ids, deltas) pairs truncated to ``max_len`` events."""
    out = []
    for p in patients:
        ids = np.asarray(vocab.encode(p.tokens), dtype=np.int64)[:max_len]
        out.append((ids, np.asarray(p.deltas, dtype=np.float64)[:max_len]))
    return out


class BatchPlan:
    """Length-bucketed batches whose order is a pure function of (seed, epoch),
    so any step's batch can be rebuilt on resume."""

    def __init__(self, lengths, batch_size, seed, span=16):
        self.lengths = np.asarray(lengths)
        self.batch_size = batch_size
        self.seed = seed
        self.span = span
        n = len(self.lengths)
        if n == 0:
            raise ValueError("training set is empty")
        pool = batch_size * span
        self.per_epoch = sum(math.ceil(min(pool, n - lo) / batch_size) for lo in range(0, n, pool))
        self._cache = {}

    def epoch(self, e):
        if e not in self._cache:
            rng = np.random.default_rng([self.seed, e, 0xBA7C])
            order = rng.permutation(len(self.lengths))
            pool = self.batch_size * self.span
            batches = []
            for lo in range(0, len(order), pool):
                chunk = order[lo:lo + pool]
                chunk = chunk[np.argsort(self.lengths[chunk], kind="stable")]
                batches += [chunk[i:i + self.batch_size] for i in range(0, len(chunk), self.batch_size)]
            self._cache = {e: [batches[i] for i in rng.permutation(len(batches))]}
        return self._cache[e]

    def batch(self, step):
        """Indices for 1-based training ``step``."""
        e, i = divmod(step - 1, self.per_epoch)
        return self.epoch(e)[i]


# ---------------------------------------------------------------- scheduled sampling


def _segment_bounds(length, cfg, rng):
    """Inclusive start and exclusive end of the generated span, or None."""
    lo, hi = cfg.ss_start_range
    if cfg.ss_fraction <= 0 or length < hi:
        return None
    s = int(rng.integers(lo, hi + 1))
    e = min(s + math.ceil(cfg.ss_fraction * length), length)
    return (s, e) if e > s else None


def ss_suppressed_ids(vocab):
    return frozenset(vocab.id(t) for t in (EOS, DEATH, PAD, BOS) if t in vocab)


def scheduled_sampling_batch(model, tokens, deltas, lengths, cfg, rng):
    """Replace one contiguous span per row with the model's own samples.

    Generation runs left to right over the whole batch with a decode cache, so
    each sampled token is conditioned on the row's running mixed prefix.
    Returns (mixed tokens, mixed deltas, spans, count of terminal tokens
    emitted inside spans).
    """
    tokens = np.array(tokens, dtype=np.int64)
    deltas = np.array(deltas, dtype=np.float64)
    spans = [_segment_bounds(int(n), cfg, rng) for n in lengths]
    active = [i for i, sp in enumerate(spans) if sp is not None]
    if not active:
        return tokens, deltas, spans, 0
    vocab = model.vocab
    scfg = SamplingConfig(temperature=cfg.ss_temperature, top_k=cfg.ss_top_k,
                          suppress=ss_suppressed_ids(vocab), max_new_tokens=0)
    terminal = np.array([vocab.id(EOS), vocab.id(DEATH)])
    rows = np.array(active)
    start = np.array([spans[i][0] for i in active])
    end = np.array([spans[i][1] for i in active])
    mixed_t, mixed_d = tokens[rows], deltas[rows]
    p0, p1 = int(start.min()), int(end.max())
    n_terminal = 0
    live = np.arange(len(rows))  # rows of mixed_* still being decoded
    state = model.start(mixed_t[:, :p0], mixed_d[:, :p0])
    for pos in range(p0, p1):
        inside = (start[live] <= pos) & (pos < end[live])
        if inside.any():
            tok, dt = sample_rows(state.logits[inside], state.time_params[inside], scfg, rng)
            n_terminal += int(np.isin(tok, terminal).sum())
            mixed_t[live[inside], pos] = tok
            mixed_d[live[inside], pos] = dt
        if pos + 1 >= p1:
            break
        done = end[live] <= pos + 1
        if done.any():
            keep = np.nonzero(~done)[0]
            model.select(state, keep)
            live = live[keep]
        model.advance(state, mixed_t[live, pos], mixed_d[live, pos])
    tokens[rows] = mixed_t
    deltas[rows] = mixed_d
    return tokens, deltas, spans, n_terminal


def scheduled_sampling_segment(model, tokens, deltas, cfg, rng):
    """Single-sequence form: (mixed tokens, mixed deltas, span or None)."""
    t, d, spans, _ = scheduled_sampling_batch(model, np.asarray(tokens)[None], np.asarray(deltas)[None],
                                              [len(tokens)], cfg, rng)
    if spans[0] is None:
        log.debug("sequence of length %d too short for a sampled segment", len(tokens))
    return t[0], d[0], spans[0]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model, opt_state, step, cfg, extra=None):
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    names = list(model.params)
    for i, k in enumerate(names):
        arrays[f"m/{k}"] = opt_state.first_moment[i]
        arrays[f"v/{k}"] = opt_state.second_moment[i]
    meta = {"model_config": model.config.to_dict(), "vocab": model.vocab.to_json(),
            "train_config": cfg.to_dict() if cfg is not None else None, "step": int(step),
            "optimizer": {"step_count": opt_state.step_count, "skipped": opt_state.skipped,
                          "beta1": opt_state.beta1, "beta2": opt_state.beta2,
                          "weight_decay": opt_state.weight_decay, "epsilon": opt_state.epsilon},
            "extra": extra or {}}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model: FlatModel
    opt_state: OptimizerState
    step: int
    train_config: TrainConfig | None
    extra: dict = field(default_factory=dict)


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        vocab = Vocabulary.from_json(meta["vocab"])
        mcfg = ModelConfig.from_dict(meta["model_config"])
        model = FlatModel(mcfg, vocab)
        model.load_state_dict({k: z[f"param/{k}"] for k in model.params})
        o = meta["optimizer"]
        state = OptimizerState([z[f"m/{k}"].copy() for k in model.params],
                               [z[f"v/{k}"].copy() for k in model.params],
                               step_count=o["step_count"], beta1=o["beta1"], beta2=o["beta2"],
                               weight_decay=o["weight_decay"], epsilon=o["epsilon"], skipped=o["skipped"])
    tcfg = TrainConfig.from_dict(meta["train_config"]) if meta["train_config"] else None
    return Checkpoint(model, state, meta["step"], tcfg, meta.get("extra", {}))


def load_model(path):
    return load_checkpoint(path).model


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: FlatModel
    opt_state: OptimizerState
    step: int
    history: list
    ss_terminal_tokens: int
    ss_segments: int


def _perplexity(model, seqs, cfg):
    if not seqs:
        return None
    return teacher_forcing_perplexity(model, seqs[:cfg.val_max_sequences])


def train(model, train_seqs, cfg, val_seqs=None, out_dir=None, opt_state=None, start_step=0,
          stop_step=None, metrics_path=None, callback=None):
    """Optimise ``model`` in place on (ids, deltas) pairs.

    Steps ``start_step + 1 .. stop_step`` (default ``total_steps``) are run;
    batch order and sampling randomness are functions of the step index, so
    stopping and resuming from a checkpoint reproduces an uninterrupted run.
    """
    max_len = model.config.max_seq_len + 1
    train_seqs = [(np.asarray(t)[:max_len], np.asarray(d, dtype=np.float64)[:max_len]) for t, d in train_seqs]
    val_seqs = list(val_seqs or [])
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay, state=opt_state)
    plan = BatchPlan([len(t) for t, _ in train_seqs], cfg.batch_size, cfg.seed, cfg.bucket_span)
    stop_step = cfg.total_steps if stop_step is None else stop_step
    history = []
    n_terminal = n_segments = 0
    metrics_f = open(metrics_path, "a") if metrics_path else None
    try:
        for step in range(start_step + 1, stop_step + 1):
            idx = plan.batch(step)
            batch = [train_seqs[i] for i in idx]
            tok, dt = pad_batch(batch, model.vocab.pad_id)
            lengths = [len(b[0]) for b in batch]
            rng = np.random.default_rng([cfg.seed, step, 0x55])
            in_tok, in_dt, spans, term = scheduled_sampling_batch(model, tok, dt, lengths, cfg, rng)
            n_terminal += term
            n_segments += sum(s is not None for s in spans)
            lr = lr_at(step, cfg)
            opt.zero_grad()
            loss, parts = total_loss(model, tok, dt, in_tok, in_dt)
            if not math.isfinite(parts.total):
                opt.state.skipped += 1
                log.warning("step %d: non-finite loss, skipped", step)
            else:
                loss.backward()
                grads = [p.grad for p in params]
                nx.clip_grad_norm(grads, cfg.clip_norm)
                opt.step(lr)
            if opt.state.skipped > cfg.max_skip_fraction * cfg.total_steps:
                raise TrainingAborted(f"{opt.state.skipped} skipped steps exceed "
                                      f"{cfg.max_skip_fraction:.0%} of {cfg.total_steps}")
            rec = None
            if step % cfg.log_every == 0 or step == stop_step or step == start_step + 1:
                rec = {"step": step, "loss": parts.total, "ce": parts.ce, "ziln": parts.ziln,
                       "emd": parts.emd, "lr": lr, "val_ppl": None}
            if val_seqs and cfg.val_every and (step % cfg.val_every == 0 or step == stop_step):
                rec = rec or {"step": step, "loss": parts.total, "ce": parts.ce, "ziln": parts.ziln,
                              "emd": parts.emd, "lr": lr, "val_ppl": None}
                rec["val_ppl"] = _perplexity(model, val_seqs, cfg)
            if rec is not None:
                history.append(rec)
                if metrics_f:
                    metrics_f.write(json.dumps(rec) + "\n")
            if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), model, opt.state, step, cfg)
            if callback:
                callback(step, parts)
    finally:
        if metrics_f:
            metrics_f.close()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), model, opt.state, stop_step, cfg,
                        {"ss_terminal_tokens": n_terminal, "ss_segments": n_segments})
    return TrainResult(model, opt.state, stop_step, history, n_terminal, n_segments)


def fine_tune(model, new_train, cfg=None, val_seqs=None, vocab=None, out_dir=None, metrics_path=None):
    """Continue training on a new site's data with the fine-tuning preset."""
    cfg = cfg or fine_tune_config()
    if vocab is not None and vocab.tokens != model.vocab.tokens:
        raise ValueError("fine-tuning data uses a different vocabulary than the model")
    if cfg.total_steps == 0:
        return TrainResult(model, None, 0, [], 0, 0)
    return train(model, new_train, cfg, val_seqs, out_dir=out_dir, metrics_path=metrics_path)
