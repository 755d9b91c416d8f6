"""Within-patient drug comparisons and the tests used to judge them.

Pipeline: pick incident users and cut their prompts just before the first
dose, simulate a treatment and a control arm per patient, reduce each patient
to one difference-in-differences value, then test those values with a
Wilcoxon signed-rank test. A person-period logistic model with patient-
clustered errors is provided for the pseudo-replication comparison.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import t as student_t

from .generator import RowStreams, SamplingConfig, arm_keys, force_intervention, generate_batch
from .vocab import DEATH

log = logging.getLogger(__name__)

MORTALITY = "MORTALITY"
EXACT_MAX_N = 25


# ---------------------------------------------------------------- Wilcoxon


@dataclass
class WilcoxonResult:
    statistic: float  # min(T+, T-)
    p_value: float
    n: int  # nonzero differences
    method: str
    degenerate: bool = False


def _midranks(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return ranks


def signed_rank_null_counts(doubled_ranks):
    """Number of sign assignments giving each value of 2*T+ (dynamic programming)."""
    r = np.asarray(doubled_ranks, dtype=np.int64)
    counts = np.zeros(int(r.sum()) + 1)
    counts[0] = 1.0
    for x in r:
        shifted = np.zeros_like(counts)
        shifted[x:] = counts[:len(counts) - x]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(diffs):
    """Two-sided signed-rank test. Zeros are dropped and ties get mid-ranks;
    exact null for up to 25 nonzero differences, otherwise the normal
    approximation with tie and continuity corrections."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n == 0:
        log.warning("all differences are zero; Wilcoxon test is degenerate")
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", True)
    ranks = _midranks(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    total = n * (n + 1) / 2
    stat = min(t_plus, total - t_plus)
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_null_counts(doubled)
        values = np.arange(len(counts))
        centre = doubled.sum() / 2.0
        obs = abs(2 * t_plus - centre)
        p = counts[np.abs(values - centre) >= obs - 1e-9].sum() / counts.sum()
        return WilcoxonResult(stat, float(min(p, 1.0)), n, "exact")
    mean = total / 2
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    z = max(abs(t_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return WilcoxonResult(stat, float(min(2 * (1 - ndtr(z)), 1.0)), n, "normal")


# ---------------------------------------------------------------- permutation


def permutation_test(verdicts, n_perm=100_000, rng=None, chunk=20_000):
    """P(correct count >= observed) when each verdict is an independent fair coin."""
    v = np.asarray(verdicts, dtype=bool)
    n = v.size
    if n == 0:
        raise ValueError("permutation test needs at least one verdict")
    rng = rng if rng is not None else np.random.default_rng(0)
    observed = int(v.sum())
    hits = 0
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        hits += int(((rng.random((m, n)) < 0.5).sum(axis=1) >= observed).sum())
        done += m
    return hits / n_perm


# ---------------------------------------------------------------- logistic GLM


@dataclass
class GLMResult:
    coef: np.ndarray
    robust_se: np.ndarray
    p_value: np.ndarray
    odds_ratio: np.ndarray
    iterations: int
    converged: bool
    separation: bool
    names: list = field(default_factory=list)

    def term(self, name):
        i = self.names.index(name)
        return dict(coef=float(self.coef[i]), robust_se=float(self.robust_se[i]),
                    p=float(self.p_value[i]), odds_ratio=float(self.odds_ratio[i]))


def logistic_irls(x, y, max_iter=100, tol=1e-8):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    beta = np.zeros(x.shape[1])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = np.clip(x @ beta, -35, 35)
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = np.maximum(mu * (1 - mu), 1e-12)
        z = eta + (y - mu) / w
        xtw = x.T * w
        new = np.linalg.solve(xtw @ x, xtw @ z)
        step = np.max(np.abs(new - beta))
        beta = new
        if step < tol:
            converged = True
            break
    return beta, it, converged


def cluster_robust_se(x, y, beta, clusters):
    """Sandwich errors with scores summed within clusters (no small-sample factor)."""
    x = np.asarray(x, dtype=np.float64)
    mu = 1.0 / (1.0 + np.exp(-np.clip(x @ beta, -35, 35)))
    bread = np.linalg.inv((x.T * (mu * (1 - mu))) @ x)
    scores = x * (np.asarray(y, dtype=np.float64) - mu)[:, None]
    _, inv = np.unique(np.asarray(clusters), return_inverse=True)
    summed = np.zeros((inv.max() + 1, x.shape[1]))
    np.add.at(summed, inv, scores)
    meat = summed.T @ summed
    return np.sqrt(np.diag(bread @ meat @ bread))


def glm_logit_cluster(x, y, clusters, names=None, max_iter=100, tol=1e-8):
    """Logistic regression by IRLS with patient-clustered sandwich errors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(clusters)) < 2:
        raise ValueError("cluster-robust errors need at least two clusters")
    beta, it, converged = logistic_irls(x, y, max_iter, tol)
    fitted = 1.0 / (1.0 + np.exp(-np.clip(x @ beta, -35, 35)))
    separation = bool(np.any(np.abs(beta) > 15) or np.any((fitted < 1e-10) | (fitted > 1 - 1e-10)))
    if separation:
        log.warning("logistic fit shows (quasi-)separation; coefficients are not reliable")
    se = cluster_robust_se(x, y, beta, clusters)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 2 * (1 - ndtr(np.abs(beta / se)))
    return GLMResult(beta, se, p, np.exp(beta), it, converged, separation,
                     list(names) if names is not None else [f"x{i}" for i in range(x.shape[1])])


# ---------------------------------------------------------------- outcomes


def _outcome_matcher(vocab, outcome):
    """Token id -> ordinal for the outcome biomarker (0 elsewhere)."""
    hits = np.zeros(len(vocab), dtype=np.int64)
    name = outcome.split(":")[-1] if outcome.count(":") == 1 else outcome
    cat = outcome.split(":")[0] if outcome.count(":") == 1 else None
    for i, s in enumerate(vocab.specs):
        if s.is_ordinal and s.measure == name and (cat is None or s.category == cat):
            hits[i] = s.ordinal
    if not hits.any():
        raise ValueError(f"outcome {outcome!r} matches no ordinal tokens")
    return hits


@dataclass
class PersonPeriod:
    patient_id: str
    arm: str
    replicate: int
    period: int
    outcome: float


def periods_of(tokens, deltas, period_days, ordinal=None, death_id=None):
    """Partition one generated continuation into periods of cumulative time.

    Surrogate (``ordinal`` table given): one (period, mean ordinal) per period
    holding an outcome token. Mortality (``death_id``): one (period, 0/1) for
    every period up to the last event."""
    if period_days <= 0:
        raise ValueError("period_days must be > 0")
    cum = np.cumsum(np.asarray(deltas, dtype=np.float64))
    idx = np.floor(cum / period_days).astype(np.int64)
    toks = np.asarray(tokens, dtype=np.int64)
    if death_id is not None:
        if toks.size == 0:
            return []
        last = int(idx.max())
        died = {int(i) for i in idx[toks == death_id]}
        return [(k, float(k in died)) for k in range(last + 1)]
    vals = ordinal[toks]
    out = []
    for k in np.unique(idx[vals > 0]):
        out.append((int(k), float(vals[(idx == k) & (vals > 0)].mean())))
    return out


def person_period_convert(trajectories, period_days, outcome, vocab):
    rows = []
    mortality = outcome == MORTALITY
    ordinal = None if mortality else _outcome_matcher(vocab, outcome)
    death = vocab.id(DEATH) if mortality else None
    for tr in trajectories:
        # time runs from the forced intervention (last prompt event)
        toks, dts = tr.generated_tokens, tr.generated_deltas
        for k, y in periods_of(toks, dts, period_days, ordinal, death):
            rows.append(PersonPeriod(tr.meta.get("patient_id", ""), tr.meta.get("arm", ""),
                                     tr.meta.get("replicate", 0), k, y))
    return rows


def person_period_glm(rows, treat_arm):
    """Outcome ~ treatment + period fixed effects, clustered by patient.
    Quintile surrogates are dichotomised at their pooled median."""
    y = np.array([r.outcome for r in rows])
    if not np.all(np.isin(y, (0.0, 1.0))):
        y = (y > np.median(y)).astype(np.float64)
    periods = sorted({r.period for r in rows})
    cols = [np.ones(len(rows)), np.array([r.arm == treat_arm for r in rows], dtype=np.float64)]
    names = ["intercept", "treatment"]
    for k in periods[1:]:
        cols.append(np.array([r.period == k for r in rows], dtype=np.float64))
        names.append(f"period_{k}")
    return glm_logit_cluster(np.column_stack(cols), y, [r.patient_id for r in rows], names)


# ---------------------------------------------------------------- comparisons


@dataclass
class ComparisonSpec:
    treat_token: str
    control_token: str
    outcome: str
    window_days: float = 30.0
    n_patients: int = 200
    n_per_arm: int = 100
    baseline_k: int = 5
    expected_direction: int | None = None
    splits: tuple = ("val", "test")
    anchor_on_class: bool = True

    def __post_init__(self):
        if self.n_per_arm < 1:
            raise ValueError("n_per_arm must be >= 1")
        if not self.window_days > 0:
            raise ValueError("window_days must be > 0")
        self.splits = tuple(self.splits)

    def to_json(self):
        return asdict(self)


@dataclass
class PatientResult:
    patient_id: str
    baseline: float
    treat_mean: float
    control_mean: float

    @property
    def did(self):
        return (self.treat_mean - self.baseline) - (self.control_mean - self.baseline)


@dataclass
class ComparisonResult:
    mean_did: float
    ci95: tuple
    wilcoxon_p: float
    n_effective: int
    direction: int
    verdict: bool | None
    n_eligible: int
    n_dropped: int
    patients: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def to_json(self, with_patients=True):
        d = {k: v for k, v in asdict(self).items() if k != "patients"}
        if with_patients:
            d["patients"] = [dict(asdict(p), did=p.did) for p in self.patients]
        return d

    def table_row(self, label=""):
        lo, hi = self.ci95
        ok = "" if self.verdict is None else ("Yes" if self.verdict else "No")
        return (f"{label:<32} {self.mean_did:+.3f}  [{lo:+.3f}, {hi:+.3f}]  "
                f"{self.wilcoxon_p:.2e}  {self.n_effective:>5}  {ok}")


TABLE_HEADER = f"{'Comparison':<32} {'DiD':>6}  {'95% CI':^18}  {'Wilcoxon p':>8}  {'N':>5}  Correct?"


@dataclass
class Prompt:
    patient_id: str
    tokens: list  # ids
    deltas: list


def select_eligible(patients, spec, vocab, max_prompt_len=None):
    """Incident users: the prompt ends just before the first dose of the
    treatment drug (any drug of its class when ``anchor_on_class``), and must
    contain at least one outcome-biomarker token."""
    treat = vocab.id(spec.treat_token)
    anchor_ids = vocab.suppression_set(treat) if spec.anchor_on_class else {treat}
    needs_marker = spec.outcome != MORTALITY
    ordinal = _outcome_matcher(vocab, spec.outcome) if needs_marker else None
    out = []
    for p in sorted(patients, key=lambda q: q.patient_id):
        if p.split not in spec.splits:
            continue
        ids = vocab.encode(p.tokens)
        first = next((i for i, t in enumerate(ids) if t in anchor_ids), None)
        if first is None or first == 0:
            continue
        prompt = ids[:first]
        if needs_marker and not any(ordinal[t] for t in prompt):
            continue
        if max_prompt_len is not None and len(prompt) + 1 > max_prompt_len:
            continue
        out.append(Prompt(p.patient_id, prompt, list(p.deltas[:first])))
        if len(out) == spec.n_patients:
            break
    if len(out) < spec.n_patients:
        log.warning("only %d eligible patients (wanted %d)", len(out), spec.n_patients)
    return out


def baseline_of(prompt_tokens, outcome, vocab, k=5):
    """Mean ordinal of the last ``k`` outcome-biomarker tokens in the prompt."""
    if outcome == MORTALITY:
        return 0.0
    ordinal = _outcome_matcher(vocab, outcome)
    vals = [ordinal[t] for t in prompt_tokens if ordinal[t] > 0]
    if not vals:
        raise ValueError(f"prompt holds no {outcome} tokens")
    return float(np.mean(vals[-k:]))


def trajectory_outcome(tr, window_days, ordinal=None, death_id=None):
    """Mean outcome ordinal (or death indicator) within the window; None if
    the surrogate was not observed in-window."""
    cum = np.cumsum(np.asarray(tr.generated_deltas, dtype=np.float64))
    toks = np.asarray(tr.generated_tokens, dtype=np.int64)
    inside = cum <= window_days
    if death_id is not None:
        return float(np.any(toks[inside] == death_id))
    vals = ordinal[toks[inside]]
    vals = vals[vals > 0]
    return float(vals.mean()) if vals.size else None


def _arm_mean(trajs, window_days, ordinal, death_id):
    vals = [trajectory_outcome(t, window_days, ordinal, death_id) for t in trajs]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def simulate_arms(model, prompts, spec, cfg, batch_rows=4096):
    """Both arms for every prompt, batched across patients of equal prompt
    length. Seeds depend only on (seed, patient, arm token, replicate)."""
    vocab = model.vocab
    treat, control = vocab.id(spec.treat_token), vocab.id(spec.control_token)
    c_t, c_c = vocab.specs[treat].med_class, vocab.specs[control].med_class
    if c_t == c_c and treat != control:
        raise ValueError(f"treatment and control share drug class {c_t!r}")
    suppress = set(cfg.suppress) | vocab.suppression_set(treat) | vocab.suppression_set(control)
    arm_cfg = cfg.replace(suppress=frozenset(suppress), max_elapsed_days=spec.window_days)
    reps = np.arange(spec.n_per_arm)
    jobs = []  # (prompt index, arm index, tokens, deltas, stream keys for all replicates)
    for pi, pr in enumerate(prompts):
        for arm, tkn in enumerate((treat, control)):
            occurrence = arm if treat == control else 0
            toks, dts = force_intervention(pr.tokens, pr.deltas, tkn, vocab)
            jobs.append((pi, arm, toks, dts, arm_keys(cfg.seed, pr.patient_id, tkn, reps, occurrence)))
    results = [[[], []] for _ in prompts]
    by_len = {}
    for j in jobs:
        by_len.setdefault(len(j[2]), []).append(j)
    per_chunk = max(1, batch_rows // spec.n_per_arm)
    for _, group in sorted(by_len.items()):
        for lo in range(0, len(group), per_chunk):
            chunk = group[lo:lo + per_chunk]
            toks = [j[2] for j in chunk for _ in reps]
            dts = [j[3] for j in chunk for _ in reps]
            keys = np.concatenate([j[4] for j in chunk])
            trajs = generate_batch(model, toks, dts, arm_cfg, RowStreams(keys))
            for n, j in enumerate(chunk):
                arm_name = vocab.token((treat, control)[j[1]])
                pid = prompts[j[0]].patient_id
                block = trajs[n * len(reps):(n + 1) * len(reps)]
                for r, tr in enumerate(block):
                    tr.meta = {"patient_id": pid, "arm": arm_name, "replicate": r}
                results[j[0]][j[1]] = block
    return results


def summarise(patient_results, expected_direction=None, n_eligible=0, n_dropped=0, flags=()):
    dids = np.array([p.did for p in patient_results])
    n = dids.size
    flags = list(flags)
    if n == 0:
        flags.append("no patients with in-window outcomes in both arms")
        return ComparisonResult(math.nan, (math.nan, math.nan), 1.0, 0, 0, None, n_eligible, n_dropped,
                                [], flags)
    mean = float(dids.mean())
    if n > 1:
        half = student_t.ppf(0.975, n - 1) * dids.std(ddof=1) / math.sqrt(n)
    else:
        half = math.inf
    w = wilcoxon_signed_rank(dids)
    if w.degenerate:
        flags.append("all patient differences are zero")
    direction = int(np.sign(mean))
    verdict = None if expected_direction is None else direction == int(np.sign(expected_direction))
    return ComparisonResult(mean, (mean - half, mean + half), w.p_value, n, direction, verdict,
                            n_eligible, n_dropped, list(patient_results), flags)


def incident_user_run(model, patients, spec, cfg=None, prompts=None):
    """Incident-user arm comparison reduced to one DiD per patient."""
    vocab = model.vocab
    cfg = cfg or SamplingConfig()
    limit = getattr(getattr(model, "config", None), "max_seq_len", None)
    if prompts is None:
        prompts = select_eligible(patients, spec, vocab, max_prompt_len=limit)
    flags = []
    if len(prompts) < spec.n_patients:
        flags.append(f"only {len(prompts)} eligible patients")
    mortality = spec.outcome == MORTALITY
    ordinal = None if mortality else _outcome_matcher(vocab, spec.outcome)
    death = vocab.id(DEATH) if mortality else None
    arms = simulate_arms(model, prompts, spec, cfg)
    results, dropped = [], 0
    for pr, (treat_trajs, control_trajs) in zip(prompts, arms):
        t_mean = _arm_mean(treat_trajs, spec.window_days, ordinal, death)
        c_mean = _arm_mean(control_trajs, spec.window_days, ordinal, death)
        if t_mean is None or c_mean is None:
            dropped += 1
            continue
        base = baseline_of(pr.tokens, spec.outcome, vocab, spec.baseline_k)
        results.append(PatientResult(pr.patient_id, base, t_mean, c_mean))
    if dropped:
        flags.append(f"{dropped} patients without in-window outcomes dropped")
    return summarise(results, spec.expected_direction, len(prompts), dropped, flags)


# ---------------------------------------------------------------- ablation


def prompt_shuffle(tokens, deltas, rng, keep=2):
    """Permute events after the first ``keep`` positions, each keeping its Δt."""
    tokens, deltas = list(tokens), list(deltas)
    if len(tokens) <= keep:
        log.warning("prompt of length %d too short to shuffle", len(tokens))
        return tokens, deltas
    perm = keep + rng.permutation(len(tokens) - keep)
    idx = list(range(keep)) + perm.tolist()
    return [tokens[i] for i in idx], [deltas[i] for i in idx]


@dataclass
class AblationResult:
    ordered: ComparisonResult
    shuffled: ComparisonResult
    ratio: float
    flags: list = field(default_factory=list)

    def to_json(self):
        return {"ordered": self.ordered.to_json(False), "shuffled": self.shuffled.to_json(False),
                "ratio": self.ratio, "flags": self.flags}


def ablation_run(model, patients, spec, cfg=None, rng=None):
    """Ordered vs shuffled prompts for one patient set under shared seeds."""
    vocab = model.vocab
    cfg = cfg or SamplingConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    limit = getattr(getattr(model, "config", None), "max_seq_len", None)
    prompts = select_eligible(patients, spec, vocab, max_prompt_len=limit)
    shuffled = []
    for pr in prompts:
        t, d = prompt_shuffle(pr.tokens, pr.deltas, rng)
        shuffled.append(Prompt(pr.patient_id, t, d))
    ordered_res = incident_user_run(model, patients, spec, cfg, prompts)
    shuffled_res = incident_user_run(model, patients, spec, cfg, shuffled)
    flags = []
    if shuffled_res.mean_did == 0:
        flags.append("shuffled DiD is zero")
        ratio = math.inf if ordered_res.mean_did != 0 else 1.0
    else:
        ratio = abs(ordered_res.mean_did) / abs(shuffled_res.mean_did)
    return AblationResult(ordered_res, shuffled_res, ratio, flags)
