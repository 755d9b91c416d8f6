"""Flat composite clinical tokens.

A token string is ``CATEGORY:MEASURE[:VALUE]``. Laboratory and vital-sign
tokens carry a quintile suffix ``Q1``..``Q5``; age tokens carry a decile
``D1``..``D10``; medications are ``MED:CLASS`` or ``MED:CLASS:DRUG``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

PAD, BOS, EOS, DEATH = "[PAD]", "[BOS]", "[EOS]", "[DEATH]"
SPECIALS = (PAD, BOS, EOS, DEATH)

CATEGORIES = ("LAB", "VITAL", "MED", "DX", "DEMO", "SPECIAL")
ORDINAL_CATEGORIES = ("LAB", "VITAL")
# demographic prefixes are folded into the DEMO category with the prefix as measure
DEMO_PREFIXES = ("SEX", "AGE", "SMOKE", "DEMO", "RACE")
N_BINS = 5


class VocabError(ValueError):
    pass


class TokenParseError(VocabError):
    pass


class DegenerateBoundaries(VocabError):
    pass


@dataclass(frozen=True)
class TokenSpec:
    raw: str
    category: str
    measure: str | None = None
    ordinal: int | None = None
    med_class: str | None = None
    drug: str | None = None

    @property
    def is_ordinal(self):
        return self.category in ORDINAL_CATEGORIES

    @property
    def weight_key(self):
        """Key into a category-weight map (demographic families use their prefix)."""
        if self.category == "DEMO":
            return self.measure
        return self.category


def _parse_suffix(fragment, letter, hi, raw):
    if len(fragment) < 2 or fragment[0] != letter or not fragment[1:].isdigit():
        raise TokenParseError(f"malformed {letter}-suffix {fragment!r} in token {raw!r}")
    k = int(fragment[1:])
    if not 1 <= k <= hi:
        raise TokenParseError(f"{letter}-suffix {fragment!r} out of range 1..{hi} in token {raw!r}")
    return k


def parse_token(raw):
    if not raw:
        raise TokenParseError("empty token")
    if raw.startswith("["):
        if raw not in SPECIALS:
            raise TokenParseError(f"unknown special token {raw!r}")
        return TokenSpec(raw, "SPECIAL")
    parts = raw.split(":")
    head = parts[0]
    if any(not p for p in parts):
        raise TokenParseError(f"empty fragment in token {raw!r}")
    if head in ORDINAL_CATEGORIES:
        if len(parts) != 3:
            raise TokenParseError(f"{head} token {raw!r} needs MEASURE and Q-suffix")
        return TokenSpec(raw, head, parts[1], _parse_suffix(parts[2], "Q", N_BINS, raw))
    if head == "MED":
        if len(parts) == 2:
            return TokenSpec(raw, "MED", med_class=parts[1])
        if len(parts) == 3:
            return TokenSpec(raw, "MED", measure=parts[2], med_class=parts[1], drug=parts[2])
        raise TokenParseError(f"MED token {raw!r} must be MED:CLASS or MED:CLASS:DRUG")
    if head == "DX":
        if len(parts) != 2:
            raise TokenParseError(f"DX token {raw!r} must be DX:CODE")
        return TokenSpec(raw, "DX", parts[1])
    if head in DEMO_PREFIXES:
        if len(parts) != 2:
            raise TokenParseError(f"demographic token {raw!r} must be PREFIX:VALUE")
        if head == "AGE":
            return TokenSpec(raw, "DEMO", "AGE", _parse_suffix(parts[1], "D", 10, raw))
        return TokenSpec(raw, "DEMO", head)
    raise TokenParseError(f"unknown category prefix {head!r} in token {raw!r}")


def render_token(spec):
    if spec.category == "SPECIAL":
        return spec.raw
    if spec.category in ORDINAL_CATEGORIES:
        return f"{spec.category}:{spec.measure}:Q{spec.ordinal}"
    if spec.category == "MED":
        return f"MED:{spec.med_class}" + (f":{spec.drug}" if spec.drug else "")
    if spec.category == "DX":
        return f"DX:{spec.measure}"
    if spec.measure == "AGE":
        return f"AGE:D{spec.ordinal}"
    return spec.raw


# ---------------------------------------------------------------- quintiles


def build_boundaries(samples):
    """20/40/60/80th percentiles with linear interpolation."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 5:
        raise VocabError(f"need at least 5 samples to fit quintile boundaries, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise VocabError("non-finite sample in boundary fit")
    b = np.percentile(x, [20, 40, 60, 80], method="linear")
    if np.any(np.diff(b) <= 0):
        raise DegenerateBoundaries(f"boundaries {b.tolist()} are not strictly increasing")
    return [float(v) for v in b]


def quintile_bin(value, boundaries):
    """Bin index 1..5; intervals are left-closed, the top bin is closed above."""
    if not math.isfinite(value):
        raise VocabError(f"cannot bin non-finite value {value}")
    b = np.asarray(boundaries, dtype=np.float64)
    if b.shape != (4,) or np.any(np.diff(b) <= 0):
        raise VocabError(f"boundaries must be 4 strictly increasing reals, got {list(boundaries)}")
    return int(np.searchsorted(b, value, side="right")) + 1


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    specs: list
    boundaries: dict = field(default_factory=dict)
    index: dict = field(init=False)
    class_members: dict = field(init=False)
    unknown_count: int = field(default=0, init=False)
    lookup_count: int = field(default=0, init=False)

    def __post_init__(self):
        self.index = {s.raw: i for i, s in enumerate(self.specs)}
        if len(self.index) != len(self.specs):
            raise VocabError("duplicate token in vocabulary")
        if self.specs[0].raw != PAD:
            raise VocabError("[PAD] must have id 0")
        self.class_members = {}
        for i, s in enumerate(self.specs):
            if s.category == "MED":
                self.class_members.setdefault(s.med_class, set()).add(i)
        for m, b in self.boundaries.items():
            if len(b) != 4 or any(y <= x for x, y in zip(b, b[1:])):
                raise VocabError(f"boundaries for {m} are not 4 strictly increasing values")
        self._build_tables()

    @classmethod
    def from_tokens(cls, tokens, boundaries=None):
        tokens = list(tokens)
        rest = [t for t in tokens if t not in SPECIALS]
        ordered = list(SPECIALS) + list(dict.fromkeys(rest))
        return cls([parse_token(t) for t in ordered], dict(boundaries or {}))

    def __len__(self):
        return len(self.specs)

    def __contains__(self, raw):
        return raw in self.index

    def id(self, raw):
        return self.index[raw]

    def token(self, i):
        return self.specs[i].raw

    @property
    def pad_id(self):
        return 0

    @property
    def tokens(self):
        return [s.raw for s in self.specs]

    def _build_tables(self):
        v = len(self.specs)
        self.measures = sorted({s.measure for s in self.specs if s.is_ordinal})
        midx = {m: i for i, m in enumerate(self.measures)}
        self.category_of = np.array([CATEGORIES.index(s.category) for s in self.specs])
        self.ordinal_of = np.array([s.ordinal if s.is_ordinal else 0 for s in self.specs])
        self.measure_of = np.array([midx[s.measure] if s.is_ordinal else -1 for s in self.specs])
        classes = sorted(self.class_members)
        cidx = {c: i for i, c in enumerate(classes)}
        self.med_classes = classes
        self.class_of = np.array([cidx[s.med_class] if s.category == "MED" else -1 for s in self.specs])
        # ordinal siblings: ids of Q1..Q5 for the token's measure (-1 when incomplete)
        self.siblings = np.full((v, N_BINS), -1, dtype=np.int64)
        table = {}
        for i, s in enumerate(self.specs):
            if s.is_ordinal:
                table.setdefault((s.category, s.measure), {})[s.ordinal] = i
        for i, s in enumerate(self.specs):
            if s.is_ordinal:
                row = table[(s.category, s.measure)]
                if len(row) == N_BINS:
                    self.siblings[i] = [row[k] for k in range(1, N_BINS + 1)]
        self.age_decile = np.array(
            [s.ordinal if s.category == "DEMO" and s.measure == "AGE" else 0 for s in self.specs])

    def ids_of_category(self, category):
        return [i for i, s in enumerate(self.specs) if s.category == category]

    def measure_tokens(self, measure):
        """Ids of Q1..Q5 for an ordinal measure, in bin order."""
        out = [None] * N_BINS
        for i, s in enumerate(self.specs):
            if s.is_ordinal and s.measure == measure:
                out[s.ordinal - 1] = i
        if any(o is None for o in out):
            raise VocabError(f"measure {measure!r} is not a complete ordinal family")
        return out

    def encode(self, tokens):
        return [self.map_unknown(t) for t in tokens]

    def decode(self, ids):
        return [self.specs[i].raw for i in ids]

    def map_unknown(self, raw):
        self.lookup_count += 1
        i = self.index.get(raw)
        if i is None:
            self.unknown_count += 1
            return self.pad_id
        return i

    @property
    def unknown_rate(self):
        return self.unknown_count / self.lookup_count if self.lookup_count else 0.0

    def reset_unknown_stats(self):
        self.unknown_count = self.lookup_count = 0

    def suppression_set(self, token_id):
        spec = self.specs[token_id]
        if spec.category != "MED":
            raise VocabError(f"suppression set requested for non-MED token {spec.raw!r}")
        return set(self.class_members[spec.med_class])

    # ------------------------------------------------------------ file format

    def to_json(self):
        classes = {c: sorted(self.token(i) for i in ids) for c, ids in sorted(self.class_members.items())}
        return {"tokens": self.tokens, "boundaries": self.boundaries, "classes": classes}

    @classmethod
    def from_json(cls, doc):
        vocab = cls([parse_token(t) for t in doc["tokens"]], dict(doc.get("boundaries", {})))
        for c, members in doc.get("classes", {}).items():
            ids = {vocab.index[t] for t in members}
            if vocab.class_members.get(c, set()) != ids:
                raise VocabError(f"class {c!r} membership disagrees with token prefixes")
        return vocab

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def suppression_set(token_id, vocab):
    return vocab.suppression_set(token_id)


def map_unknown(raw, vocab):
    return vocab.map_unknown(raw)
