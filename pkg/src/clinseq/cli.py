"""Command-line entry points.

Every command reads a JSON config (optional) plus JSONL data, writes its
outputs and a ``manifest.json`` into ``--out``, and exits 0 on success, 1 on a
run error and 2 on a usage error. Any config key can be overridden from the
environment: ``CLINSEQ_TRAIN__PEAK_LR=1e-3`` sets ``config["train"]["peak_lr"]``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

from . import harness
from .generator import GenerationError, SamplingConfig, write_trajectories
from .io import DataFormatError, RunManifest, now_iso, read_jsonl, write_json, write_patients
from .metrics import fidelity_report
from .model import desk_config
from .stats import TABLE_HEADER, ComparisonSpec, ablation_run, incident_user_run
from .synth import CohortConfig, default_toy_config, generate_cohort
from .trainer import TrainConfig, TrainingAborted, as_training_set, fine_tune, fine_tune_config, load_checkpoint

log = logging.getLogger("clinseq")

ENV_PREFIX = "CLINSEQ_"
COMMANDS = ("synth", "train", "finetune", "generate", "evaluate", "baseline", "tte", "ablate", "memcheck")


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------- config plumbing


def _parse_env_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(config, environ=None):
    """Return a copy of ``config`` with ``CLINSEQ_A__B=value`` applied as
    ``config["a"]["b"] = value`` (values parsed as JSON when possible)."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(config))
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        if not all(path):
            raise RunError(f"malformed override variable {key}")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise RunError(f"{key}: {part!r} is not a config section")
        node[path[-1]] = _parse_env_value(environ[key])
    return out


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise RunError(f"{path}: malformed JSON config ({e})") from None
    if not isinstance(doc, dict):
        raise RunError(f"{path}: config must be a JSON object")
    return doc


def _build(cls, doc, what):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise RunError(f"unknown {what} keys: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise RunError(f"invalid {what}: {e}") from None


def _section(cfg, name):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise RunError(f"config section {name!r} must be an object")
    return sec


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} requires {' '.join(missing)}")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg, man):
    doc = dict(cfg)
    doc["seed"] = args.seed
    base = default_toy_config()
    merged = asdict(base)
    merged.update(doc)
    ccfg = _build(CohortConfig, merged, "cohort config")
    cohort = generate_cohort(ccfg)
    write_patients(os.path.join(args.out, harness.COHORT_FILE), cohort.patients)
    write_json(os.path.join(args.out, "ledger.json"), cohort.ledger)
    cohort.vocab.save(os.path.join(args.out, harness.VOCAB_FILE))
    write_json(os.path.join(args.out, harness.ORACLE_FILE), harness.oracle_document(ccfg, cohort.vocab))
    return {"cohort": ccfg.to_json()}


def _eval_config(cfg, args, extra=()):
    doc = {k: v for k, v in cfg.items() if k not in extra}
    doc["seed"] = args.seed
    return _build(harness.EvalConfig, doc, "evaluation config")


def _data(args, man):
    man.add_input(args.data)
    return harness.load_cohort(args.data)


def _model(args, man):
    man.add_input(args.model)
    return harness.load_model_any(args.model)


def cmd_train(args, cfg, man):
    patients, vocab = _data(args, man)
    toy = harness.ToyExperiment()
    mdoc = dict(toy.model)
    mdoc.update(_section(cfg, "model"))
    tdoc = dict(toy.train)
    tdoc.update(_section(cfg, "train"))
    tdoc["seed"] = args.seed
    try:
        mcfg = desk_config(len(vocab), **mdoc)
    except (TypeError, ValueError) as e:
        raise RunError(f"invalid model config: {e}") from None
    tcfg = _build(TrainConfig, tdoc, "train config")
    harness.train_on_cohort(patients, vocab, mcfg, tcfg, seed=args.seed, out_dir=args.out,
                            metrics_path=os.path.join(args.out, "metrics.jsonl"))
    vocab.save(os.path.join(args.out, harness.VOCAB_FILE))
    return {"model": mcfg.to_dict(), "train": tcfg.to_dict()}


def cmd_finetune(args, cfg, man):
    patients, vocab = _data(args, man)
    man.add_input(args.model)
    ck = load_checkpoint(args.model)
    tdoc = asdict(fine_tune_config())
    tdoc.update(_section(cfg, "train"))
    tdoc["seed"] = args.seed
    tcfg = _build(TrainConfig, tdoc, "train config")
    w = ck.model.config.max_seq_len + 1
    tr = as_training_set([p for p in patients if p.split == "train"], ck.model.vocab, w)
    va = as_training_set([p for p in patients if p.split == "val"], ck.model.vocab, w)
    if not tr:
        raise RunError("no training-split patients at the new site")
    fine_tune(ck.model, tr, tcfg, va, vocab=vocab, out_dir=args.out,
              metrics_path=os.path.join(args.out, "metrics.jsonl"))
    ck.model.vocab.save(os.path.join(args.out, harness.VOCAB_FILE))
    return {"train": tcfg.to_dict()}


def cmd_generate(args, cfg, man):
    patients, vocab = _data(args, man)
    model = _model(args, man)
    ecfg = _eval_config(cfg, args)
    items = harness.held_out(patients, vocab, ecfg.split, ecfg.prompt_len, ecfg.n_patients)
    if not items:
        raise RunError(f"no split-{ecfg.split!r} patients longer than {ecfg.prompt_len} events")
    trajs = harness.continue_prompts(model, items, ecfg)
    write_trajectories(os.path.join(args.out, "trajectories.jsonl"), trajs, model.vocab)
    return {"eval": asdict(ecfg)}


def _write_report(out, report, extra=None):
    doc = report.to_json()
    if extra:
        doc.update(extra)
    write_json(os.path.join(out, "report.json"), doc)
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(report.to_table() + "\n")


def _generated_pool(path, prompt_len, split):
    """Post-prompt parts of a trajectory dump or a cohort file (cohort records
    from other splits are skipped)."""
    gen, dts = [], []
    for rec in read_jsonl(path):
        if rec.get("split", split) != split:
            continue
        k = rec.get("prompt_len", prompt_len)
        gen.append(list(rec["tokens"][k:]))
        dts.append(list(rec["deltas"][k:]))
    return gen, dts


def cmd_evaluate(args, cfg, man):
    patients, vocab = _data(args, man)
    ecfg = _eval_config(cfg, args)
    if args.generated:
        man.add_input(args.generated)
        gen, gdt = _generated_pool(args.generated, ecfg.prompt_len, ecfg.split)
        items = harness.held_out(patients, vocab, ecfg.split, ecfg.prompt_len)
        if not gen or not items:
            raise RunError("nothing to compare")
        ref = [vocab.decode(h.reference[0]) for h in items]
        report = fidelity_report(gen, ref, gen_deltas=gdt, ref_deltas=[h.reference[1] for h in items])
        _write_report(args.out, report)
        return {"eval": asdict(ecfg), "generated": True}
    _require(args, "model")
    model = _model(args, man)
    run = harness.fidelity_run(model, patients, vocab, ecfg)
    _write_report(args.out, run.report, {"unigram_perplexity": run.unigram_perplexity})
    write_trajectories(os.path.join(args.out, "trajectories.jsonl"), run.trajectories, model.vocab)
    return {"eval": asdict(ecfg)}


def cmd_baseline(args, cfg, man):
    patients, vocab = _data(args, man)
    n_tokens = int(cfg.get("n_tokens", 200))
    ecfg = _eval_config(cfg, args, extra=("n_tokens",))
    run = harness.baseline_run(patients, vocab, ecfg, n_tokens=n_tokens)
    write_json(os.path.join(args.out, "report.json"),
               {"unigram": run.unigram.to_json(), "bigram": run.bigram.to_json()})
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write("unigram\n" + run.unigram.to_table() + "\n\nbigram\n" + run.bigram.to_table() + "\n")
    write_trajectories(os.path.join(args.out, "unigram.jsonl"), run.unigram_trajectories, vocab)
    write_trajectories(os.path.join(args.out, "bigram.jsonl"), run.bigram_trajectories, vocab)
    return {"eval": asdict(ecfg), "n_tokens": n_tokens}


def _comparison(args, cfg, man):
    man.add_input(args.spec)
    spec = _build(ComparisonSpec, load_config(args.spec), "comparison spec")
    sdoc = _section(cfg, "sampling")
    sdoc["seed"] = args.seed
    scfg = _build(SamplingConfig, sdoc, "sampling config")
    return spec, scfg


def _check_tokens(spec, vocab):
    for tok in (spec.treat_token, spec.control_token):
        if tok not in vocab:
            raise RunError(f"token {tok!r} is not in the vocabulary")


def cmd_tte(args, cfg, man):
    patients, _ = _data(args, man)
    model = _model(args, man)
    spec, scfg = _comparison(args, cfg, man)
    _check_tokens(spec, model.vocab)
    res = incident_user_run(model, patients, spec, scfg)
    if res.n_effective == 0:
        raise RunError("no patients contributed a paired estimate: " + "; ".join(res.flags))
    write_json(os.path.join(args.out, "result.json"), res.to_json())
    with open(os.path.join(args.out, "table.txt"), "w") as f:
        f.write(TABLE_HEADER + "\n" + res.table_row(f"{spec.treat_token} vs {spec.control_token}") + "\n")
    return {"spec": spec.to_json(), "sampling": _sampling_doc(scfg)}


def cmd_ablate(args, cfg, man):
    patients, _ = _data(args, man)
    model = _model(args, man)
    spec, scfg = _comparison(args, cfg, man)
    _check_tokens(spec, model.vocab)
    res = ablation_run(model, patients, spec, scfg)
    if res.ordered.n_effective == 0:
        raise RunError("no patients contributed a paired estimate")
    write_json(os.path.join(args.out, "ablation.json"), res.to_json())
    return {"spec": spec.to_json(), "sampling": _sampling_doc(scfg)}


def cmd_memcheck(args, cfg, man):
    patients, vocab = _data(args, man)
    model = _model(args, man)
    n_train = int(cfg.get("n_train", 5000))
    n_pairs = int(cfg.get("n_random_pairs", 5000))
    ecfg = _eval_config(cfg, args, extra=("n_train", "n_random_pairs"))
    rep, trajs = harness.memorisation_run(model, patients, vocab, ecfg, n_train, n_pairs)
    write_json(os.path.join(args.out, "memcheck.json"), asdict(rep))
    write_trajectories(os.path.join(args.out, "trajectories.jsonl"), trajs, model.vocab)
    return {"eval": asdict(ecfg), "n_train": n_train, "n_random_pairs": n_pairs}


def _sampling_doc(scfg):
    d = asdict(scfg)
    d["suppress"] = sorted(d["suppress"])
    d["stop_on"] = None if d["stop_on"] is None else sorted(d["stop_on"])
    return d


HANDLERS = {
    "synth": (cmd_synth, ()),
    "train": (cmd_train, ("data",)),
    "finetune": (cmd_finetune, ("data", "model")),
    "generate": (cmd_generate, ("data", "model")),
    "evaluate": (cmd_evaluate, ("data",)),
    "baseline": (cmd_baseline, ("data",)),
    "tte": (cmd_tte, ("data", "model", "spec")),
    "ablate": (cmd_ablate, ("data", "model", "spec")),
    "memcheck": (cmd_memcheck, ("data", "model")),
}


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="clinseq", description="Clinical event-sequence modelling toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")
        sp.add_argument("--workers", type=int, default=1,
                        help="upper bound on internal parallelism; outputs do not depend on it")
        if name != "synth":
            sp.add_argument("--data", help="cohort directory or JSONL file")
        if name not in ("synth", "train", "baseline"):
            sp.add_argument("--model", help="checkpoint.npz or oracle.json")
        if name in ("tte", "ablate"):
            sp.add_argument("--spec", help="comparison spec JSON")
        if name == "evaluate":
            sp.add_argument("--generated", help="score an existing trajectory/cohort JSONL instead of a model")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown commands or flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler, required = HANDLERS[args.command]
    try:
        _require(args, *required)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"clinseq: error: {e}", file=sys.stderr)
        return 2
    try:
        cfg = apply_env_overrides(load_config(args.config))
        os.makedirs(args.out, exist_ok=True)
        man = RunManifest(args.command, {}, args.seed, started=now_iso())
        if args.config:
            man.add_input(args.config)
        effective = handler(args, cfg, man)
        man.config = {"command": args.command, "seed": args.seed, "config": cfg, "effective": effective}
        man.record_outputs(args.out)
        man.finished = now_iso()
        write_json(os.path.join(args.out, "manifest.json"), man.to_json())
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"clinseq: error: {e}", file=sys.stderr)
        return 2
    except (RunError, DataFormatError, GenerationError, TrainingAborted, FileNotFoundError, KeyError,
            ValueError) as e:
        print(f"clinseq {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
