"""Line-delimited JSON persistence for cohorts and trajectories, plus run manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

log = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"


class DataFormatError(ValueError):
    pass


@dataclass
class PatientSequence:
    patient_id: str
    tokens: list
    deltas: list
    split: str = "train"

    def __post_init__(self):
        if len(self.tokens) != len(self.deltas):
            raise DataFormatError(
                f"patient {self.patient_id}: {len(self.tokens)} tokens but {len(self.deltas)} deltas")

    def __len__(self):
        return len(self.tokens)

    def to_json(self):
        return {"patient_id": self.patient_id, "split": self.split,
                "tokens": list(self.tokens), "deltas": [float(d) for d in self.deltas]}


def write_patients(path, patients):
    with open(path, "w") as f:
        for p in patients:
            f.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")


def read_patients(path, vocab=None):
    """Read a cohort file. With ``vocab``, unknown tokens are rewritten to
    ``[PAD]`` (counted on the vocabulary)."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                tokens, deltas = doc["tokens"], doc["deltas"]
                pid = str(doc["patient_id"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataFormatError(f"{path}:{lineno}: malformed record ({e})") from None
            if len(tokens) != len(deltas):
                raise DataFormatError(
                    f"{path}:{lineno}: {len(tokens)} tokens but {len(deltas)} deltas")
            for d in deltas:
                if not isinstance(d, (int, float)) or not math.isfinite(d) or d < 0:
                    raise DataFormatError(f"{path}:{lineno}: invalid delta {d!r}")
            if vocab is not None:
                tokens = [vocab.token(vocab.map_unknown(t)) for t in tokens]
            out.append(PatientSequence(pid, list(tokens), [float(d) for d in deltas],
                                       doc.get("split", "train")))
    if not out:
        log.warning("%s: empty cohort file", path)
    return out


def write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, separators=(",", ":")) + "\n")


def read_jsonl(path):
    with open(path) as f:
        out = []
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({e})") from None
        return out


def write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------- manifests


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    started: str = ""
    finished: str = ""

    @property
    def config_digest(self):
        return config_digest(self.config)

    def add_input(self, path):
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                full = os.path.join(path, name)
                if os.path.isfile(full) and name != "manifest.json":
                    self.inputs[full] = file_digest(full)
        else:
            self.inputs[path] = file_digest(path)

    def record_outputs(self, out_dir):
        self.outputs = {}
        for name in sorted(os.listdir(out_dir)):
            full = os.path.join(out_dir, name)
            if os.path.isfile(full) and name != "manifest.json":
                self.outputs[name] = file_digest(full)

    def verify_inputs(self):
        """Names of inputs whose current digest differs from the recorded one."""
        return [p for p, d in self.inputs.items() if not os.path.exists(p) or file_digest(p) != d]

    def to_json(self):
        return {"command": self.command, "config": self.config, "config_digest": self.config_digest,
                "seed": self.seed, "inputs": self.inputs, "outputs": self.outputs,
                "tool_version": self.tool_version, "started": self.started, "finished": self.finished}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["command"], doc["config"], doc["seed"], doc.get("inputs", {}),
                   doc.get("outputs", {}), doc.get("tool_version", TOOL_VERSION),
                   doc.get("started", ""), doc.get("finished", ""))


def now_iso():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
