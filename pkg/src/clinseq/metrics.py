"""Trajectory fidelity metrics and the nearest-neighbour memorisation check.

Sequences are lists of raw token strings (decode ids first). Functions that
take "trajectories" also accept ``Trajectory`` objects, in which case only
the generated (post-prompt) part is scored.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from .vocab import CATEGORIES, PAD, SPECIALS

log = logging.getLogger(__name__)

COLLAPSE_RUN = 20
N_TIME_BINS = 64


def token_category(raw):
    if raw in SPECIALS:
        return "SPECIAL"
    head = raw.split(":", 1)[0]
    return head if head in CATEGORIES else "DEMO"


def _measure(raw):
    parts = raw.split(":")
    if parts[0] in ("LAB", "VITAL") and len(parts) == 3 and parts[2].startswith("Q"):
        return f"{parts[0]}:{parts[1]}", int(parts[2][1:])
    return None, None


def _seq(x):
    return list(x.generated_tokens) if hasattr(x, "generated_tokens") else list(x)


def _jaccard(a, b):
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 1.0


# ---------------------------------------------------------------- set metrics


def type_jaccard(generated, reference, per_patient=False):
    """Set Jaccard over unique token types.

    Pooled (default): one set per pool. Per-patient: ``generated[i]`` is
    compared with ``reference[i]`` and the Jaccards averaged."""
    gen = [_seq(s) for s in generated]
    ref = [_seq(s) for s in reference]
    if per_patient:
        if len(gen) != len(ref):
            raise ValueError("per-patient Jaccard needs aligned pools")
        return float(np.mean([_jaccard(g, r) for g, r in zip(gen, ref)]))
    pool_g = {t for s in gen for t in s if t != PAD}
    pool_r = {t for s in ref for t in s if t != PAD}
    return _jaccard(pool_g, pool_r)


def longest_run(seq):
    best = run = 0
    prev = object()
    for t in seq:
        run = run + 1 if t == prev else 1
        prev = t
        best = max(best, run)
    return best


def mode_collapse_rate(trajectories, run_length=COLLAPSE_RUN):
    seqs = [_seq(t) for t in trajectories]
    if not seqs:
        return 0.0
    return float(np.mean([longest_run(s) >= run_length for s in seqs]))


# ---------------------------------------------------------------- timing


def bhattacharyya(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(np.sqrt(p * q)))


@dataclass
class TimingCalibration:
    zero_frac_gen: float
    zero_frac_ref: float
    median_gen: float
    median_ref: float
    mean_gen: float
    mean_ref: float
    ks: float
    bhattacharyya: float
    defined: bool = True


def timing_calibration(gen_dts, ref_dts, n_bins=N_TIME_BINS):
    """Zero fractions, medians/means of positive gaps, KS and log-space BC."""
    g = np.asarray(gen_dts, dtype=np.float64)
    r = np.asarray(ref_dts, dtype=np.float64)
    if g.size == 0 or r.size == 0:
        raise ValueError("timing calibration needs two non-empty pools")
    gp, rp = g[g > 0], r[r > 0]
    out = dict(zero_frac_gen=float(np.mean(g == 0)), zero_frac_ref=float(np.mean(r == 0)),
               median_gen=float(np.median(gp)) if gp.size else math.nan,
               median_ref=float(np.median(rp)) if rp.size else math.nan,
               mean_gen=float(np.mean(gp)) if gp.size else math.nan,
               mean_ref=float(np.mean(rp)) if rp.size else math.nan)
    if gp.size == 0 or rp.size == 0:
        log.warning("a timing pool has no positive gaps; KS and Bhattacharyya undefined")
        return TimingCalibration(**out, ks=math.nan, bhattacharyya=math.nan, defined=False)
    ks = float(ks_2samp(gp, rp).statistic)
    lg, lr = np.log10(gp), np.log10(rp)
    lo, hi = min(lg.min(), lr.min()), max(lg.max(), lr.max())
    if hi <= lo:
        bc = 1.0
    else:
        edges = np.linspace(lo, hi, n_bins + 1)
        hg = np.histogram(lg, edges)[0] / lg.size
        hr = np.histogram(lr, edges)[0] / lr.size
        bc = bhattacharyya(hg, hr)
    return TimingCalibration(**out, ks=ks, bhattacharyya=min(bc, 1.0))


# ---------------------------------------------------------------- transitions


@dataclass
class CategoryTransitionMatrix:
    categories: tuple
    counts: np.ndarray

    @property
    def matrix(self):
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros_like(self.counts), where=rows > 0)

    @property
    def joint(self):
        s = self.counts.sum()
        return self.counts / s if s > 0 else self.counts

    @classmethod
    def from_sequences(cls, seqs, categories=CATEGORIES):
        idx = {c: i for i, c in enumerate(categories)}
        counts = np.zeros((len(categories), len(categories)))
        for s in seqs:
            cats = [idx[token_category(t)] for t in _seq(s) if t != PAD]
            for a, b in zip(cats, cats[1:]):
                counts[a, b] += 1
        return cls(tuple(categories), counts)


def _as_transitions(x):
    if isinstance(x, CategoryTransitionMatrix):
        return x
    arr = np.asarray(x) if isinstance(x, np.ndarray) else None
    if arr is not None and arr.ndim == 2 and arr.dtype.kind == "f":
        return CategoryTransitionMatrix(tuple(range(arr.shape[0])), arr.astype(np.float64))
    return CategoryTransitionMatrix.from_sequences(x)


def js_divergence(p, q):
    """Jensen-Shannon divergence in bits."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.sum() <= 0 or q.sum() <= 0:
        return math.nan
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return np.sum(a[nz] * np.log2(a[nz] / m[nz]))

    return float(max(0.5 * kl(p) + 0.5 * kl(q), 0.0))


@dataclass
class TransitionDistance:
    frobenius: float
    max_element: float
    jsd: float


def transition_metrics(gen, ref):
    """Distances between category transition structures. Inputs are
    sequence pools, ``CategoryTransitionMatrix`` objects or count arrays."""
    g, r = _as_transitions(gen), _as_transitions(ref)
    if g.counts.shape != r.counts.shape:
        raise ValueError("transition matrices over different category sets")
    diff = g.matrix - r.matrix
    return TransitionDistance(float(np.linalg.norm(diff)), float(np.abs(diff).max()),
                              js_divergence(g.joint, r.joint))


def followup_rate(trajectories, from_cat, to_cat, k=5):
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = total = 0
    for s in trajectories:
        cats = [token_category(t) for t in _seq(s)]
        for i, c in enumerate(cats):
            if c == from_cat:
                total += 1
                hits += to_cat in cats[i + 1:i + 1 + k]
    if total == 0:
        log.warning("no %s events; follow-up rate undefined", from_cat)
        return math.nan
    return hits / total


# ---------------------------------------------------------------- longitudinal


@dataclass
class LongitudinalRecord:
    token_jaccard: float
    category_cosine: float
    measure_jaccard: float
    quintile_diff: float | None
    elapsed_gen: float
    elapsed_ref: float


def _category_vector(seq):
    v = np.zeros(len(CATEGORIES))
    for t in seq:
        v[CATEGORIES.index(token_category(t))] += 1
    return v


def _measure_means(seq):
    acc = {}
    for t in seq:
        m, q = _measure(t)
        if m is not None:
            acc.setdefault(m, []).append(q)
    return {m: float(np.mean(q)) for m, q in acc.items()}


def longitudinal_record(gen_tokens, gen_deltas, ref_tokens, ref_deltas):
    if not gen_tokens or not ref_tokens:
        raise ValueError("continuations must be non-empty")
    a, b = _category_vector(gen_tokens), _category_vector(ref_tokens)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cos = float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0
    mg, mr = _measure_means(gen_tokens), _measure_means(ref_tokens)
    shared = sorted(set(mg) & set(mr))
    qd = float(np.mean([abs(mg[m] - mr[m]) for m in shared])) if shared else None
    return LongitudinalRecord(_jaccard(gen_tokens, ref_tokens), cos, _jaccard(mg, mr), qd,
                              float(np.sum(gen_deltas)), float(np.sum(ref_deltas)))


@dataclass
class LongitudinalSummary:
    records: list
    mean: dict
    sd: dict
    n_without_shared_measure: int


def longitudinal_fidelity(pairs):
    """``pairs``: iterable of (gen_tokens, gen_deltas, ref_tokens, ref_deltas)."""
    recs = [longitudinal_record(*p) for p in pairs]
    mean, sd = {}, {}
    for name in ("token_jaccard", "category_cosine", "measure_jaccard", "quintile_diff",
                 "elapsed_gen", "elapsed_ref"):
        vals = np.array([getattr(r, name) for r in recs if getattr(r, name) is not None], dtype=float)
        mean[name] = float(vals.mean()) if vals.size else math.nan
        sd[name] = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
    return LongitudinalSummary(recs, mean, sd, sum(r.quintile_diff is None for r in recs))


# ---------------------------------------------------------------- memorisation


def _presence(seqs, index):
    m = np.zeros((len(seqs), len(index)), dtype=np.float64)
    for i, s in enumerate(seqs):
        for t in set(s):
            m[i, index[t]] = 1.0
    return m


def _jaccard_matrix(a, b):
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.ones_like(inter), where=union > 0)


@dataclass
class MemorisationReport:
    mean_nn_jaccard: float
    max_nn_jaccard: float
    random_pair_jaccard: float
    n_generated: int
    n_training: int


def nn_memorisation(generated, training_sample, n_random_pairs=5000, rng=None):
    gen = [_seq(s) for s in generated]
    train = [_seq(s) for s in training_sample]
    if not train:
        raise ValueError("training sample is empty")
    index = {t: i for i, t in enumerate(sorted({t for s in gen + train for t in s}))}
    g, tr = _presence(gen, index), _presence(train, index)
    nn = _jaccard_matrix(g, tr).max(axis=1) if gen else np.zeros(0)
    rng = rng or np.random.default_rng(0)
    if len(train) >= 2:
        i = rng.integers(len(train), size=n_random_pairs)
        j = (i + rng.integers(1, len(train), size=n_random_pairs)) % len(train)
        inter = (tr[i] * tr[j]).sum(1)
        union = tr[i].sum(1) + tr[j].sum(1) - inter
        base = float(np.mean(np.divide(inter, union, out=np.ones_like(inter), where=union > 0)))
    else:
        base = math.nan
    return MemorisationReport(float(nn.mean()) if nn.size else math.nan,
                              float(nn.max()) if nn.size else math.nan, base, len(gen), len(train))


# ---------------------------------------------------------------- report


@dataclass
class FidelityReport:
    type_jaccard: float
    type_jaccard_per_patient: float
    mode_collapse_rate: float
    timing: TimingCalibration
    transitions: TransitionDistance
    med_to_lab_gen: float
    med_to_lab_ref: float
    longitudinal: dict = field(default_factory=dict)
    perplexity: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)

    def rows(self):
        t, tr = self.timing, self.transitions
        rows = [("Type Jaccard", f"{self.type_jaccard:.3f}"),
                ("Type Jaccard (per patient)", f"{self.type_jaccard_per_patient:.3f}"),
                ("Mode collapse", f"{100 * self.mode_collapse_rate:.1f}%")]
        if self.perplexity is not None:
            rows.append(("Teacher-forcing perplexity", f"{self.perplexity:.2f}"))
        rows += [("Zero-fraction (gen / GT)", f"{t.zero_frac_gen:.3f} / {t.zero_frac_ref:.3f}"),
                 ("Median positive gap, days (gen / GT)", f"{t.median_gen:.2f} / {t.median_ref:.2f}"),
                 ("KS statistic (non-zero times)", f"{t.ks:.3f}"),
                 ("Bhattacharyya coefficient (log-space)", f"{t.bhattacharyya:.3f}"),
                 ("Transition matrix Frobenius distance", f"{tr.frobenius:.3f}"),
                 ("Transition max element difference", f"{tr.max_element:.3f}"),
                 ("Jensen-Shannon divergence", f"{tr.jsd:.4f}"),
                 ("MED -> LAB within 5 tokens (gen / GT)", f"{self.med_to_lab_gen:.3f} / {self.med_to_lab_ref:.3f}")]
        for k, v in self.longitudinal.items():
            rows.append((k, f"{v:.3f}" if isinstance(v, float) else str(v)))
        return rows

    def to_table(self):
        rows = self.rows()
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows) + "\n"


def fidelity_report(generated, reference, perplexity=None, gen_deltas=None, ref_deltas=None,
                    longitudinal_pairs=None):
    """Score generated continuations against aligned reference continuations.

    ``generated``/``reference`` are aligned lists of token-string sequences;
    deltas are the matching per-sequence gap lists.
    """
    gd = np.concatenate([np.asarray(d, dtype=float) for d in gen_deltas]) if gen_deltas else np.zeros(0)
    rd = np.concatenate([np.asarray(d, dtype=float) for d in ref_deltas]) if ref_deltas else np.zeros(0)
    long = {}
    if longitudinal_pairs:
        summ = longitudinal_fidelity(longitudinal_pairs)
        long = {f"{k} (mean)": v for k, v in summ.mean.items()}
        long["patients without shared measure"] = summ.n_without_shared_measure
    return FidelityReport(
        type_jaccard=type_jaccard(generated, reference),
        type_jaccard_per_patient=type_jaccard(generated, reference, per_patient=True)
        if len(generated) == len(reference) else math.nan,
        mode_collapse_rate=mode_collapse_rate(generated),
        timing=timing_calibration(gd, rd),
        transitions=transition_metrics(generated, reference),
        med_to_lab_gen=followup_rate(generated, "MED", "LAB", 5),
        med_to_lab_ref=followup_rate(reference, "MED", "LAB", 5),
        longitudinal=long, perplexity=perplexity)
