"""Synthetic cohorts with planted drug -> biomarker effects.

The generative law is written as a next-event distribution over the
vocabulary that depends only on what is visible in the history, so the same
object serves two purposes: it samples the cohort, and it is an exact
conditional sampler (``CohortOracle``) that the association pipeline can run
in place of a trained network.

Per patient: a severity score is drawn by sampling an age decile uniformly
and taking the standard-normal quantile of the decile's midpoint (a
discretised ``N(0, 1)`` that the history reveals). Biomarker quintiles are ``round(3 + a*s + planted + noise)``
clipped to 1..5. Drug classes are started with odds that rise with the most
recent value of their indication biomarker (confounding by indication). A
planted effect shifts its biomarker once the drug's class has appeared;
state-dependent effects apply only if the biomarker's last value before the
first dose was above the median bin.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .io import PatientSequence
from .vocab import BOS, DEATH, EOS, N_BINS, Vocabulary

LAB_NAMES = ["GLUCOSE", "POTASSIUM", "CREATININE", "SODIUM", "HBA1C", "INR", "HEMOGLOBIN",
             "ALT", "LACTATE", "PLATELETS", "WBC", "ALBUMIN", "BILIRUBIN", "TROPONIN"]
VITAL_NAMES = ["HR", "SBP", "SPO2", "TEMP", "RR", "DBP"]
CLASS_DRUGS = {
    "STEROID": ["PREDNISONE", "DEXAMETHASONE", "HYDROCORTISONE"],
    "DIURETIC": ["FUROSEMIDE", "BUMETANIDE", "TORSEMIDE"],
    "INSULIN": ["GLARGINE", "LISPRO", "ASPART"],
    "ANTICOAG": ["WARFARIN", "APIXABAN", "HEPARIN"],
    "BETABLOCKER": ["METOPROLOL", "ATENOLOL", "CARVEDILOL"],
    "STATIN": ["ATORVASTATIN", "SIMVASTATIN", "ROSUVASTATIN"],
    "ANTIBIOTIC": ["VANCOMYCIN", "CEFTRIAXONE", "PIPERACILLIN"],
    "VASOPRESSOR": ["NOREPINEPHRINE", "VASOPRESSIN", "EPINEPHRINE"],
}
DX_NAMES = ["SEPSIS", "AKI", "HF", "DIABETES", "PNEUMONIA", "AF", "CKD", "COPD", "STROKE", "MI"]
EVENT_CATEGORIES = ("LAB", "VITAL", "MED", "DX")


@dataclass
class PlantedEffect:
    drug_class: str
    measure: str
    delta_quintiles: float
    state_dependent: bool = False
    onset_lag_days: float = 0.0

    def __post_init__(self):
        if not -4 <= self.delta_quintiles <= 4:
            raise ValueError(f"delta_quintiles {self.delta_quintiles} outside [-4, 4]")


@dataclass
class TimingConfig:
    p_zero: float = 0.5
    mu_t: float = 1.0
    sigma_t: float = 1.0
    # added to mu_t for positive gaps preceding an event of that category
    category_shift: dict = field(default_factory=lambda: {"DX": 2.0, "MED": -0.5})

    def __post_init__(self):
        if not 0 <= self.p_zero <= 1:
            raise ValueError(f"p_zero {self.p_zero} outside [0, 1]")


@dataclass
class CohortConfig:
    n_patients: int = 1000
    n_lab_measures: int = 8
    n_vital_measures: int = 4
    n_med_classes: int = 6
    drugs_per_class: int = 2
    n_dx: int = 6
    seq_len: tuple = (24, 48)
    timing: TimingConfig = field(default_factory=TimingConfig)
    category_mix: dict = field(default_factory=lambda: {"LAB": 0.45, "VITAL": 0.25, "MED": 0.2, "DX": 0.1})
    measure_subset: list | None = None
    measure_weights: dict = field(default_factory=dict)  # relative emission rate within a category
    severity_effect: float = 0.7
    noise_sd: float = 0.8
    effects: list = field(default_factory=list)
    confounding: dict = field(default_factory=dict)
    indications: dict = field(default_factory=dict)
    mortality_slope: float = 0.8
    death_rate: float = 0.004
    eos_rate: float = 0.06
    smoke_rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.timing, dict):
            self.timing = TimingConfig(**self.timing)
        self.effects = [e if isinstance(e, PlantedEffect) else PlantedEffect(**e) for e in self.effects]
        self.seq_len = tuple(self.seq_len)
        for name, p in (("death_rate", self.death_rate), ("eos_rate", self.eos_rate),
                        ("smoke_rate", self.smoke_rate)):
            if not 0 <= p <= 1:
                raise ValueError(f"{name} {p} outside [0, 1]")
        if self.seq_len[0] < 5 or self.seq_len[1] < self.seq_len[0]:
            raise ValueError(f"invalid seq_len range {self.seq_len}")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


def default_toy_config(**kw):
    """The cohort used for the desk-scale experiments.

    STEROID raises GLUCOSE unconditionally. INSULIN lowers GLUCOSE only in
    patients whose last reading before the first dose was above the median,
    and is prescribed on high readings. DIURETIC lowers POTASSIUM and is
    prescribed on high CREATININE."""
    base = dict(
        severity_effect=0.5,
        noise_sd=0.8,
        measure_weights={"GLUCOSE": 4.0, "POTASSIUM": 2.0},
        effects=[PlantedEffect("STEROID", "GLUCOSE", 1.0),
                 PlantedEffect("INSULIN", "GLUCOSE", -1.0, state_dependent=True),
                 PlantedEffect("DIURETIC", "POTASSIUM", -1.0)],
        confounding={"INSULIN": 3.0, "DIURETIC": 0.5},
        indications={"INSULIN": "GLUCOSE", "DIURETIC": "CREATININE"},
    )
    base.update(kw)
    return CohortConfig(**base)


def _names(pool, n, prefix):
    return [pool[i] if i < len(pool) else f"{prefix}{i + 1}" for i in range(n)]


def cohort_vocabulary(cfg):
    labs = _names(LAB_NAMES, cfg.n_lab_measures, "LAB")
    vitals = _names(VITAL_NAMES, cfg.n_vital_measures, "VITAL")
    classes = _names(list(CLASS_DRUGS), cfg.n_med_classes, "CLASS")
    tokens = [f"AGE:D{k}" for k in range(1, 11)] + ["SEX:F", "SEX:M", "SMOKE:CURRENT", "SMOKE:NEVER"]
    tokens += [f"LAB:{m}:Q{q}" for m in labs for q in range(1, N_BINS + 1)]
    tokens += [f"VITAL:{m}:Q{q}" for m in vitals for q in range(1, N_BINS + 1)]
    for c in classes:
        drugs = _names(CLASS_DRUGS.get(c, []), cfg.drugs_per_class, "DRUG")
        tokens += [f"MED:{c}:{d}" for d in drugs]
    tokens += [f"DX:{d}" for d in _names(DX_NAMES, cfg.n_dx, "DX")]
    return Vocabulary.from_tokens(tokens)


class CohortOracle:
    """The cohort's generative law as a next-event distribution.

    Implements the ``start``/``advance`` decode protocol used by the
    generator: ``state.logits`` are exact log-probabilities (``-inf`` for
    impossible events) and ``state.time_params`` is (B, V, 3): the ZILN gap
    law conditional on which token is emitted.
    """

    def __init__(self, cfg, vocab=None):
        self.cfg = cfg
        self.vocab = vocab or cohort_vocabulary(cfg)
        v = self.vocab
        self.n_vocab = len(v)
        specs = v.specs
        self.cat = np.array([s.category for s in specs])
        self.measure_names = v.measures
        self.midx = {m: i for i, m in enumerate(v.measures)}
        self.cidx = {c: i for i, c in enumerate(v.med_classes)}
        self.measure_of = v.measure_of
        self.ordinal_of = v.ordinal_of
        self.class_of = v.class_of
        self.age_of = v.age_decile
        self.bos, self.eos, self.death = v.id(BOS), v.id(EOS), v.id(DEATH)
        self.age_ids = [v.id(f"AGE:D{k}") for k in range(1, 11)]
        self.sex_ids = [v.id("SEX:F"), v.id("SEX:M")]
        self.smoke_ids = [v.id("SMOKE:CURRENT"), v.id("SMOKE:NEVER")]

        allowed = set(cfg.measure_subset) if cfg.measure_subset is not None else set(v.measures)
        unknown = allowed - set(v.measures)
        if unknown:
            raise ValueError(f"measure_subset names unknown measures {sorted(unknown)}")
        self.allowed_measure = np.array([m in allowed for m in v.measures])
        # bin-token ids per measure: (M, 5)
        self.measure_tokens = np.array([v.measure_tokens(m) for m in v.measures])
        self.measure_cat = np.array([specs[row[0]].category for row in self.measure_tokens])
        self.drug_ids = v.ids_of_category("MED")
        self.dx_ids = v.ids_of_category("DX")

        self.effects = []
        for e in cfg.effects:
            if e.drug_class not in self.cidx or e.measure not in self.midx:
                raise ValueError(f"planted effect references unknown class/measure: {e}")
            self.effects.append((self.cidx[e.drug_class], self.midx[e.measure], e.delta_quintiles,
                                 e.state_dependent, e.onset_lag_days))
        self.indication = {}
        for c, slope in cfg.confounding.items():
            if c not in self.cidx:
                raise ValueError(f"confounding references unknown class {c!r}")
            m = cfg.indications.get(c)
            if m is None:
                m = next((e.measure for e in cfg.effects if e.drug_class == c), None)
            self.indication[self.cidx[c]] = (self.midx[m] if m is not None else -1, float(slope))
        t = cfg.timing
        self.logit_zero = math.inf if t.p_zero >= 1 else (-math.inf if t.p_zero <= 0
                                                          else math.log(t.p_zero / (1 - t.p_zero)))
        tp = np.zeros((self.n_vocab, 3))
        tp[:, 0] = self.logit_zero
        tp[:, 1] = t.mu_t + np.array([t.category_shift.get(c, 0.0) for c in self.cat])
        tp[:, 2] = math.log(t.sigma_t)
        # demographics, [BOS] and [EOS] are stamped at the same instant as their predecessor
        instant = np.isin(self.cat, ("DEMO", "SPECIAL"))
        instant[self.death] = False
        tp[instant, 0] = math.inf
        self.token_time_params = tp

        self.emitted_measures = {c: np.nonzero(self.allowed_measure & (self.measure_cat == c))[0]
                                 for c in ("LAB", "VITAL")}
        avail = {"LAB": self.emitted_measures["LAB"].size > 0, "VITAL": self.emitted_measures["VITAL"].size > 0,
                 "MED": bool(self.drug_ids), "DX": bool(self.dx_ids)}
        w = {c: cfg.category_mix.get(c, 0.0) if avail[c] else 0.0 for c in EVENT_CATEGORIES}
        total = sum(w.values())
        if total <= 0:
            raise ValueError("category mix leaves no emittable events")
        self.category_weights = {c: x / total for c, x in w.items()}
        mw = np.array([float(cfg.measure_weights.get(m, 1.0)) for m in v.measures])
        if np.any(mw < 0):
            raise ValueError("measure weights must be non-negative")
        self.measure_share = {}
        for c, ms in self.emitted_measures.items():
            w_c = mw[ms]
            self.measure_share[c] = w_c / w_c.sum() if ms.size and w_c.sum() > 0 else w_c
        self.drug_class = self.class_of[self.drug_ids]
        self.class_size = np.bincount(self.drug_class, minlength=len(self.cidx))[self.drug_class]

    # ------------------------------------------------------------ protocol

    def start(self, tokens, deltas):
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
        b = tokens.shape[0]
        state = _OracleState()
        state.sev = np.zeros(b)
        state.has_age = np.zeros(b, dtype=bool)
        state.last = np.zeros((b, len(self.measure_names)), dtype=np.int64)
        state.now = np.zeros(b)
        state.dose_time = np.full((b, len(self.cidx)), np.nan)
        state.pre_dose = np.zeros((b, len(self.effects)), dtype=np.int64)
        state.length = 0
        state.last_tok = np.zeros(b, dtype=np.int64)
        for j in range(tokens.shape[1]):
            self._absorb(state, tokens[:, j], deltas[:, j])
        state.tokens, state.deltas = tokens, deltas
        self._refresh(state)
        return state

    def advance(self, state, tok, dt):
        tok = np.asarray(tok, dtype=np.int64).reshape(-1)
        dt = np.asarray(dt, dtype=np.float64).reshape(-1)
        self._absorb(state, tok, dt)
        state.tokens = np.concatenate([state.tokens, tok[:, None]], axis=1)
        state.deltas = np.concatenate([state.deltas, dt[:, None]], axis=1)
        self._refresh(state)
        return state

    def select(self, state, rows):
        """Keep only ``rows`` of a decode state."""
        for name in ("sev", "has_age", "last", "now", "dose_time", "pre_dose", "last_tok",
                     "tokens", "deltas", "logits", "time_params"):
            setattr(state, name, getattr(state, name)[rows])
        return state

    def next_step(self, tokens, deltas):
        s = self.start(tokens, deltas)
        return s.logits, s.time_params

    def log_probs(self, tokens, deltas):
        return self.start(tokens, deltas).logits

    def _absorb(self, state, tok, dt):
        """Fold one event per row into the sufficient statistics."""
        rows = np.arange(tok.shape[0])
        state.now = state.now + dt
        age = self.age_of[tok]
        new_age = (age > 0) & ~state.has_age
        if new_age.any():
            state.sev[new_age] = ndtri((age[new_age] - 0.5) / 10.0)
            state.has_age |= new_age
        cls = self.class_of[tok]
        first = (cls >= 0) & np.isnan(state.dose_time[rows, np.maximum(cls, 0)])
        if first.any():
            r = rows[first]
            state.dose_time[r, cls[first]] = state.now[first]
            for e, (c, m, *_rest) in enumerate(self.effects):
                hit = r[cls[first] == c]
                state.pre_dose[hit, e] = state.last[hit, m]
        m = self.measure_of[tok]
        meas = m >= 0
        state.last[rows[meas], m[meas]] = self.ordinal_of[tok[meas]]
        state.last_tok = tok
        state.length += 1

    def _refresh(self, state):
        state.logits = self._log_probs(state)
        state.time_params = np.broadcast_to(self.token_time_params,
                                            (state.logits.shape[0],) + self.token_time_params.shape)

    # ------------------------------------------------------------ law

    def centers(self, state):
        """Expected (pre-rounding) quintile per measure: (B, M)."""
        base = 3.0 + self.cfg.severity_effect * state.sev
        center = np.repeat(base[:, None], len(self.measure_names), axis=1)
        for e, (c, m, delta, state_dep, lag) in enumerate(self.effects):
            dose = state.dose_time[:, c]
            with np.errstate(invalid="ignore"):
                active = ~np.isnan(dose) & (state.now - dose >= lag)
            if state_dep:
                active &= state.pre_dose[:, e] > 3
            center[:, m] += np.where(active, delta, 0.0)
        return center

    def _log_probs(self, state):
        cfg = self.cfg
        b, t = state.sev.shape[0], state.length
        out = np.full((b, self.n_vocab), -np.inf)
        if t == 1:
            out[:, self.age_ids] = -math.log(10)
        elif t == 2:
            out[:, self.sex_ids] = -math.log(2)
        elif t == 3:
            out[:, self.smoke_ids[0]] = math.log(cfg.smoke_rate) if cfg.smoke_rate > 0 else -np.inf
            out[:, self.smoke_ids[1]] = math.log1p(-cfg.smoke_rate) if cfg.smoke_rate < 1 else -np.inf
        else:
            with np.errstate(divide="ignore"):
                out = np.log(self._event_probs(state))
        # terminated histories can only repeat their stop token (never sampled in practice)
        done = np.isin(state.last_tok, (self.eos, self.death))
        if done.any():
            out[done] = -np.inf
            out[done, state.last_tok[done]] = 0.0
        return out

    def _event_probs(self, state):
        cfg = self.cfg
        b, t = state.sev.shape[0], state.length
        lo, hi = cfg.seq_len
        probs = np.zeros((b, self.n_vocab))
        sev = state.sev
        p_death = np.minimum(cfg.death_rate * np.exp(cfg.mortality_slope * sev), 0.5)
        p_eos = np.full(b, cfg.eos_rate if t + 1 >= lo else 0.0)
        if t + 1 >= hi:
            p_eos[:] = 1.0
            p_death[:] = 0.0
        rest = np.clip(1.0 - p_death - p_eos, 0.0, 1.0)
        probs[:, self.eos] = p_eos
        probs[:, self.death] = p_death
        weights = self.category_weights

        center = self.centers(state)
        edges = np.arange(1, N_BINS) + 0.5  # 1.5 .. 4.5
        cdf = ndtr((edges[None, None, :] - center[:, :, None]) / cfg.noise_sd)
        qprob = np.diff(cdf, axis=2, prepend=0.0, append=1.0)  # (B, M, 5)
        for cat in ("LAB", "VITAL"):
            ms = self.emitted_measures[cat]
            if ms.size == 0 or weights[cat] == 0:
                continue
            share = (rest * weights[cat])[:, None, None] * self.measure_share[cat][None, :, None]
            probs[:, self.measure_tokens[ms].reshape(-1)] = (share * qprob[:, ms]).reshape(b, -1)

        if weights["MED"] > 0:
            logits = np.zeros((b, len(self.cidx)))
            for c, (m, slope) in self.indication.items():
                if m >= 0:
                    last = state.last[:, m]
                    level = np.where(last > 0, last, center[:, m])
                else:
                    level = 3.0 + cfg.severity_effect * sev
                logits[:, c] = slope * (level - 3.0)
            cls_p = np.exp(logits - logits.max(axis=1, keepdims=True))
            cls_p /= cls_p.sum(axis=1, keepdims=True)
            probs[:, self.drug_ids] = (rest * weights["MED"])[:, None] * cls_p[:, self.drug_class] / self.class_size
        if weights["DX"] > 0:
            probs[:, self.dx_ids] = (rest * weights["DX"] / len(self.dx_ids))[:, None]
        return probs


class _OracleState:
    tokens = deltas = logits = time_params = None


# ---------------------------------------------------------------- cohort


@dataclass
class Cohort:
    patients: list
    vocab: Vocabulary
    config: CohortConfig
    ledger: list

    def by_split(self, split):
        return [p for p in self.patients if p.split == split]


def _sample_rows(logp, time_params, rng):
    """Exact draws from per-row log-probabilities and token-conditional ZILN."""
    b = logp.shape[0]
    p = np.exp(logp)
    u = rng.random(b)
    uz = rng.random(b)
    z = rng.standard_normal(b)
    cum = np.cumsum(p, axis=1)
    cum /= cum[:, -1:]
    tok = np.minimum((cum < u[:, None]).sum(axis=1), p.shape[1] - 1)
    tp = time_params[np.arange(b), tok]
    with np.errstate(over="ignore"):
        p_zero = 1.0 / (1.0 + np.exp(-tp[:, 0]))
    dt = np.where(uz < p_zero, 0.0, np.exp(tp[:, 1] + np.exp(tp[:, 2]) * z))
    return tok, dt


def generate_cohort(cfg, block_size=256):
    """Sample ``cfg.n_patients`` sequences from the law, split 80/10/10.

    Patients are simulated in fixed blocks whose seeds derive from
    ``(cfg.seed, block index)``, so output does not depend on scheduling.
    """
    oracle = CohortOracle(cfg)
    vocab = oracle.vocab
    patients = []
    hi = cfg.seq_len[1]
    for start in range(0, cfg.n_patients, block_size):
        n = min(block_size, cfg.n_patients - start)
        rng = np.random.default_rng([cfg.seed, start // block_size])
        toks = np.full((n, 1), oracle.bos, dtype=np.int64)
        dts = np.zeros((n, 1))
        alive = np.ones(n, dtype=bool)
        lengths = np.ones(n, dtype=np.int64)
        state = oracle.start(toks, dts)
        while alive.any() and state.tokens.shape[1] < hi:
            tok, dt = _sample_rows(state.logits, state.time_params, rng)
            tok = np.where(alive, tok, vocab.pad_id)
            dt = np.where(alive, dt, 0.0)
            lengths += alive
            alive &= ~np.isin(tok, (oracle.eos, oracle.death))
            oracle.advance(state, tok, dt)
        for i in range(n):
            L = lengths[i]
            patients.append(PatientSequence(
                f"P{start + i:06d}",
                vocab.decode(state.tokens[i, :L].tolist()),
                [float(x) for x in state.deltas[i, :L]]))
    assign_splits(patients, seed=cfg.seed)
    ledger = [dict(asdict(e), direction=int(np.sign(e.delta_quintiles))) for e in cfg.effects]
    return Cohort(patients, vocab, cfg, ledger)


def split(patients, fractions=(0.8, 0.1, 0.1), seed=0):
    """Patient-level train/validation/test partition (deterministic in ``seed``)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions {fractions} do not sum to 1")
    n = len(patients)
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    idx = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
           "test": order[n_train + n_val:]}
    return tuple([patients[i] for i in sorted(idx[k])] for k in ("train", "val", "test"))


def assign_splits(patients, fractions=(0.8, 0.1, 0.1), seed=0):
    train, val, test = split(patients, fractions, seed)
    for name, group in (("train", train), ("val", val), ("test", test)):
        for p in group:
            p.split = name
    return patients


def patient_key(patient_id):
    """Stable integer key for seeding per-patient streams."""
    return zlib.crc32(str(patient_id).encode())
