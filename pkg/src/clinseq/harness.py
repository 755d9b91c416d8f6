"""Experiment orchestration shared by the CLI, the scripts and the acceptance
suite: loading cohorts and models from disk, held-out prompting, fidelity and
memorisation evaluation, and baseline comparison."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import fit_bigram, fit_unigram, sample_baseline, unigram_perplexity
from .generator import SamplingConfig, generate_many, stream_keys
from .io import read_patients
from .metrics import fidelity_report, nn_memorisation
from .model import FlatModel, desk_config, teacher_forcing_perplexity
from .synth import CohortConfig, CohortOracle, patient_key
from .trainer import TrainConfig, as_training_set, load_model
from .vocab import BOS, Vocabulary

COHORT_FILE = "cohort.jsonl"
VOCAB_FILE = "vocab.json"
ORACLE_FILE = "oracle.json"
CHECKPOINT_FILE = "checkpoint.npz"


# ---------------------------------------------------------------- loading


def load_cohort(path):
    """(patients, vocab) from a cohort directory or a cohort file whose
    directory holds ``vocab.json``."""
    directory = path if os.path.isdir(path) else os.path.dirname(path) or "."
    data = os.path.join(path, COHORT_FILE) if os.path.isdir(path) else path
    vocab_path = os.path.join(directory, VOCAB_FILE)
    vocab = Vocabulary.load(vocab_path) if os.path.exists(vocab_path) else None
    patients = read_patients(data, vocab)
    if vocab is None:
        vocab = Vocabulary.from_tokens(sorted({t for p in patients for t in p.tokens}))
    return patients, vocab


def oracle_document(cfg, vocab):
    return {"kind": "cohort_oracle", "cohort_config": cfg.to_json(), "vocab": vocab.to_json()}


def load_model_any(path):
    """A trained checkpoint (``.npz``) or the cohort's generating law (``oracle.json``)."""
    if os.path.isdir(path):
        for name in (CHECKPOINT_FILE, ORACLE_FILE):
            if os.path.exists(os.path.join(path, name)):
                return load_model_any(os.path.join(path, name))
        raise FileNotFoundError(f"no {CHECKPOINT_FILE} or {ORACLE_FILE} in {path}")
    if path.endswith(".json"):
        with open(path) as f:
            doc = json.load(f)
        if doc.get("kind") != "cohort_oracle":
            raise ValueError(f"{path}: not an oracle description")
        return CohortOracle(CohortConfig.from_json(doc["cohort_config"]), Vocabulary.from_json(doc["vocab"]))
    return load_model(path)


# ---------------------------------------------------------------- held-out prompting


@dataclass
class EvalConfig:
    split: str = "test"
    prompt_len: int = 8
    n_patients: int = 500
    temperature: float = 1.0
    # fidelity is scored on untruncated samples; top-k 20 belongs to the drug-comparison protocol
    top_k: int | None = None
    max_new_tokens: int = 200
    seed: int = 0

    def sampling(self):
        return SamplingConfig(temperature=self.temperature, top_k=self.top_k,
                              max_new_tokens=self.max_new_tokens, seed=self.seed)


@dataclass
class HeldOut:
    patient_id: str
    prompt: tuple  # (ids, deltas)
    reference: tuple  # (ids, deltas) continuation


def held_out(patients, vocab, split, prompt_len, n=None):
    """Split-``split`` patients cut into a prompt and the true continuation."""
    out = []
    for p in patients:
        if p.split != split or len(p.tokens) <= prompt_len:
            continue
        ids = vocab.encode(p.tokens)
        out.append(HeldOut(p.patient_id, (ids[:prompt_len], list(p.deltas[:prompt_len])),
                           (ids[prompt_len:], list(p.deltas[prompt_len:]))))
        if n is not None and len(out) >= n:
            break
    return out


def continue_prompts(model, items, ecfg):
    """One continuation per held-out prompt, each on its patient's own stream."""
    if not items:
        return []
    cfg = ecfg.sampling()
    keys = stream_keys(cfg.seed, np.array([patient_key(h.patient_id) for h in items]))
    trajs = generate_many(model, [h.prompt for h in items], cfg, keys)
    for h, tr in zip(items, trajs):
        tr.meta = {"patient_id": h.patient_id}
    return trajs


def _decoded_pools(vocab, trajs, items):
    gen = [vocab.decode(tr.generated_tokens) for tr in trajs]
    ref = [vocab.decode(h.reference[0]) for h in items]
    return gen, ref


# ---------------------------------------------------------------- evaluation


@dataclass
class FidelityRun:
    report: object
    trajectories: list
    items: list
    unigram_perplexity: float | None = None


def fidelity_run(model, patients, vocab, ecfg, train_split="train"):
    """Generate from held-out prompts and score against the true continuations."""
    items = held_out(patients, vocab, ecfg.split, ecfg.prompt_len, ecfg.n_patients)
    if not items:
        raise ValueError(f"no split-{ecfg.split!r} patients longer than {ecfg.prompt_len} events")
    trajs = continue_prompts(model, items, ecfg)
    gen, ref = _decoded_pools(vocab, trajs, items)
    ppl = uni_ppl = None
    if isinstance(model, FlatModel):
        held = [(vocab.encode(p.tokens), p.deltas) for p in patients if p.split == ecfg.split]
        held = held[:ecfg.n_patients]
        ppl = teacher_forcing_perplexity(model, held)
        train = [(vocab.encode(p.tokens), p.deltas) for p in patients if p.split == train_split]
        if train:
            w = model.config.max_seq_len + 1
            uni = fit_unigram(train, len(vocab), skip_ids=(vocab.pad_id, vocab.id(BOS)))
            uni_ppl = unigram_perplexity(uni, [(t[:w], d[:w]) for t, d in held])
    pairs = [(g, tr.generated_deltas, r, h.reference[1])
             for g, r, tr, h in zip(gen, ref, trajs, items) if g and r]
    report = fidelity_report(gen, ref, perplexity=ppl,
                             gen_deltas=[tr.generated_deltas for tr in trajs],
                             ref_deltas=[h.reference[1] for h in items], longitudinal_pairs=pairs)
    return FidelityRun(report, trajs, items, uni_ppl)


@dataclass
class BaselineRun:
    unigram: object
    bigram: object
    unigram_trajectories: list
    bigram_trajectories: list


def baseline_run(patients, vocab, ecfg, n_tokens=200, train_split="train"):
    """Fit both baselines on the training split and score their samples
    against the same held-out continuations a model would see."""
    train = [(vocab.encode(p.tokens), p.deltas) for p in patients if p.split == train_split]
    if not train:
        raise ValueError(f"no split-{train_split!r} patients to fit baselines on")
    items = held_out(patients, vocab, ecfg.split, ecfg.prompt_len, ecfg.n_patients)
    if not items:
        raise ValueError(f"no split-{ecfg.split!r} patients longer than {ecfg.prompt_len} events")
    skip = (vocab.pad_id,)
    models = {"unigram": fit_unigram(train, len(vocab), skip), "bigram": fit_bigram(train, len(vocab), skip)}
    reports, pools = {}, {}
    for name, bm in models.items():
        trajs = []
        for h in items:
            rng = np.random.default_rng([ecfg.seed, patient_key(h.patient_id)])
            tr = sample_baseline(bm, h.prompt[0], h.prompt[1], n_tokens, rng)
            tr.meta = {"patient_id": h.patient_id, "baseline": name}
            trajs.append(tr)
        gen, ref = _decoded_pools(vocab, trajs, items)
        reports[name] = fidelity_report(gen, ref, gen_deltas=[t.generated_deltas for t in trajs],
                                        ref_deltas=[h.reference[1] for h in items])
        pools[name] = trajs
    return BaselineRun(reports["unigram"], reports["bigram"], pools["unigram"], pools["bigram"])


def memorisation_run(model, patients, vocab, ecfg, n_train=5000, n_random_pairs=5000, train_split="train"):
    """Nearest-neighbour token-set Jaccard of full generated trajectories
    against a training sample."""
    items = held_out(patients, vocab, ecfg.split, ecfg.prompt_len, ecfg.n_patients)
    trajs = continue_prompts(model, items, ecfg)
    train = [p.tokens for p in patients if p.split == train_split]
    if not train:
        raise ValueError(f"no split-{train_split!r} patients for the memorisation check")
    rng = np.random.default_rng([ecfg.seed, 0x3E3])
    if len(train) > n_train:
        train = [train[i] for i in np.sort(rng.choice(len(train), n_train, replace=False))]
    gen = [vocab.decode(tr.tokens) for tr in trajs]
    return nn_memorisation(gen, train, n_random_pairs=n_random_pairs, rng=rng), trajs


# ---------------------------------------------------------------- training


@dataclass
class ToyExperiment:
    """The desk-scale training run used for the fidelity checks."""
    n_patients: int = 5000
    cohort_seed: int = 0
    model_seed: int = 0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: dict(
        peak_lr=1e-3, warmup_steps=500, total_steps=10_000, batch_size=16, val_every=1000, log_every=500))

    def model_config(self, vocab_size):
        return desk_config(vocab_size, **self.model)

    def train_config(self, **kw):
        d = dict(self.train)
        d.update(kw)
        return TrainConfig(**d)

    def to_json(self):
        return asdict(self)


def train_on_cohort(patients, vocab, mcfg, tcfg, seed=0, out_dir=None, metrics_path=None, callback=None):
    from .trainer import train

    model = FlatModel(mcfg, vocab, seed=seed)
    w = mcfg.max_seq_len + 1
    tr = as_training_set([p for p in patients if p.split == "train"], vocab, w)
    va = as_training_set([p for p in patients if p.split == "val"], vocab, w)
    if not tr:
        raise ValueError("cohort has no training-split patients")
    return train(model, tr, tcfg, va, out_dir=out_dir, metrics_path=metrics_path, callback=callback)


__all__ = [
    "COHORT_FILE", "VOCAB_FILE", "ORACLE_FILE", "CHECKPOINT_FILE", "load_cohort", "oracle_document",
    "load_model_any", "EvalConfig", "HeldOut", "held_out", "continue_prompts", "FidelityRun",
    "fidelity_run", "BaselineRun", "baseline_run", "memorisation_run", "ToyExperiment",
    "train_on_cohort",
]
