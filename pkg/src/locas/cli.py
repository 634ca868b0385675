"""Command-line entry point.

Each subcommand resolves its settings from defaults, an optional INI-style
config file and command-line flags (in increasing priority), writes the
resolved settings to ``<out>/config.ini`` and then calls into the library.
Feeding that snapshot back through ``--config`` repeats the run.

Exit status is 0 on success, 2 for usage and configuration errors and 1 for
runtime failures, which are reported as ``error: <Category>: <message>``.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import backbone as bbmod
from . import checkpoint, corpus, harness, nlsvd
from .errors import LocasError
from .memory import STRATEGIES, LocasMlpMemory

SUBCOMMANDS = ("train-backbone", "memorize", "eval", "ablate-init", "sweep-width",
               "compress", "param-count", "gen-corpus")

# section -> {key: type}; sections mirror the library modules
SCHEMA = {
    "backbone": {f.name: type(f.default) for f in fields(bbmod.ModelConfig)},
    "train": {"steps": int, "lr": float, "batch_size": int, "seq_len": int},
    "corpus": {"corpus_seed": int, "n_docs": int, "doc_len": int, "vocab_skew": float,
               "n_entities": int, "min_recur": int},
    "harness": {"chunk_size": int, "window": int, "method": str, "strategy": str, "r": int,
                "lr": float, "steps_per_chunk": int, "optimizer": str, "record_every": int,
                "reinit_per_chunk": bool, "epsilon": float, "mlp_update": str},
    "nlsvd": {"n_capacity": int, "n_target": int, "cadence": str, "context": int,
              "drop_threshold": float, "n_tokens": int},
    "sweep": {"strategies": str, "r_values": str},
}

DEFAULTS = {
    "backbone": {},
    "train": {"steps": 1500, "lr": 3e-3, "batch_size": 2, "seq_len": 512},
    "corpus": {"corpus_seed": None, "n_docs": 8, "doc_len": 16384, "vocab_skew": 1.1,
               "n_entities": 16, "min_recur": 20},
    "harness": {k: v for k, v in asdict(harness.RunConfig()).items() if k not in ("seed",)},
    "nlsvd": {**{k: v for k, v in asdict(nlsvd.CyclePolicy()).items()}, "n_tokens": 1024},
    "sweep": {"strategies": ",".join(STRATEGIES), "r_values": "4,8,16,32"},
}

# which sections a subcommand reads
USES = {
    "gen-corpus": ("corpus",),
    "train-backbone": ("backbone", "train", "corpus"),
    "eval": ("harness", "corpus"),
    "memorize": ("harness", "corpus"),
    "ablate-init": ("harness", "corpus", "sweep"),
    "sweep-width": ("harness", "corpus", "sweep"),
    "compress": ("nlsvd", "corpus", "harness"),
    "param-count": ("backbone", "harness"),
}

# flags whose names collide across sections; the listed section wins on the command line
FLAG_SECTION = {"lr": {"train-backbone": "train"}}


class UsageError(Exception):
    pass


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(kind, raw):
    if raw is None or (isinstance(raw, str) and raw.strip().lower() == "none"):
        return None
    if kind is bool:
        return _parse_bool(raw)
    if kind is type(None):
        return float(raw)
    return kind(raw)


def _section_of(key, command):
    if key in FLAG_SECTION and command in FLAG_SECTION[key]:
        return FLAG_SECTION[key][command]
    for sec in USES[command]:
        if key in SCHEMA[sec]:
            return sec
    return None


def build_parser():
    parser = argparse.ArgumentParser(prog="locas", description="Sideways FFN memories for test-time training.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI file with sections " + ", ".join(USES[name]))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true",
                       help="omit wall-clock timings so repeated runs produce identical files")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        seen = set()
        for sec in USES[name]:
            for key in SCHEMA[sec]:
                if key in seen:
                    continue
                seen.add(key)
                p.add_argument(f"--{key}", dest=f"opt_{key}", default=None, metavar="VALUE")
        if name in ("eval", "memorize", "ablate-init", "sweep-width", "compress"):
            p.add_argument("--checkpoint", type=Path, required=True, help="backbone checkpoint")
            p.add_argument("--documents", type=Path, nargs="*", default=None,
                           help="text files to use instead of the synthetic corpus")
        if name == "train-backbone":
            p.add_argument("--documents", type=Path, nargs="*", default=None)
    return parser


def resolve(args):
    """Merge defaults, config file and flags into ``{section: {key: value}}``."""
    command = args.command
    settings = {sec: dict(DEFAULTS[sec]) for sec in USES[command]}
    if "backbone" in settings:
        settings["backbone"] = {k: v for k, v in bbmod.ModelConfig.default("glu").as_dict().items()}
    seed = 0
    if args.config is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(args.config, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        for sec in cp.sections():
            if sec == "run":
                for key, raw in cp.items(sec):
                    if key == "seed":
                        seed = int(raw)
                    elif key not in ("command", "deterministic"):
                        raise UsageError(f"unknown key {key!r} in section [run]")
                continue
            if sec not in SCHEMA:
                raise UsageError(f"unknown config section [{sec}]")
            for key, raw in cp.items(sec):
                if key not in SCHEMA[sec]:
                    raise UsageError(f"unknown key {key!r} in section [{sec}]")
                if sec in settings:
                    settings[sec][key] = _convert(SCHEMA[sec][key], raw)
    if args.seed is not None:
        seed = args.seed
    for name, raw in vars(args).items():
        if not name.startswith("opt_") or raw is None:
            continue
        key = name[4:]
        sec = _section_of(key, command)
        try:
            settings[sec][key] = _convert(SCHEMA[sec][key], raw)
        except ValueError as exc:
            raise UsageError(f"bad value for --{key}: {raw!r}") from exc
    # everything random follows the run seed unless a corpus seed is pinned
    if "corpus" in settings and settings["corpus"]["corpus_seed"] is None:
        settings["corpus"]["corpus_seed"] = seed
    settings["run"] = {"command": command, "seed": seed, "deterministic": args.deterministic}
    return settings


def write_snapshot(settings, out):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for sec, values in settings.items():
        cp[sec] = {k: "none" if v is None else str(v) for k, v in values.items()}
    with open(out / "config.ini", "w", encoding="utf-8", newline="\n") as fh:
        cp.write(fh)


def _model_config(s):
    try:
        return bbmod.ModelConfig(**s["backbone"])
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def _run_config(s):
    h = dict(s["harness"])
    try:
        return harness.RunConfig(seed=s["run"]["seed"], **h)
    except ValueError as exc:
        if isinstance(exc, LocasError):
            raise
        raise UsageError(str(exc)) from exc


def _documents(args, s):
    if getattr(args, "documents", None):
        return [p.read_bytes() for p in args.documents]
    c = s["corpus"]
    return corpus.make_synthetic_corpus(seed=c["corpus_seed"], n_docs=c["n_docs"], doc_len=c["doc_len"],
                                        vocab_skew=c["vocab_skew"], n_entities=c["n_entities"],
                                        min_recur=c["min_recur"])


def _csv_list(text, kind):
    items = [x.strip() for x in str(text).split(",") if x.strip()]
    try:
        return [kind(x) for x in items]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}") from exc


def cmd_param_count(args, s, out):
    cfg = dict(s["backbone"])
    print(harness.param_count(cfg, s["harness"]["method"], s["harness"]["r"]))


def cmd_gen_corpus(args, s, out):
    docs = _documents(args, s)
    for i, doc in enumerate(docs):
        (out / f"doc_{i:03d}.txt").write_bytes(doc)
    print(f"wrote {len(docs)} documents to {out}")


def cmd_train_backbone(args, s, out):
    t = s["train"]
    model, history = bbmod.train_tiny_backbone(
        _documents(args, s), _model_config(s), steps=t["steps"], lr=t["lr"], seed=s["run"]["seed"],
        batch_size=t["batch_size"], seq_len=t["seq_len"], return_history=True)
    checkpoint.save_checkpoint(model, out / "backbone.loca")
    with open(out / "train_loss.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v:.6g}\n" for i, v in enumerate(history))
    print(f"final loss {history[-1]:.4f}" if history else "no training steps")


def _eval_docs(args, s, out, run, name):
    model = checkpoint.load_checkpoint(args.checkpoint)
    records = []
    summary = []
    states = []
    for doc_id, doc in enumerate(_documents(args, s)):
        recs, state = harness.stream_eval(model, run, doc, doc_id, return_state=True)
        records.extend(recs)
        states.append(state)
        summary.append((doc_id, harness.final_quarter_nll(recs)))
    harness.records_to_csv(records, out / name)
    for doc_id, value in summary:
        print(f"doc {doc_id}: final-quarter nll {value:.6g}")
    return states


def cmd_eval(args, s, out):
    _eval_docs(args, s, out, _run_config(s), "eval.csv")


def cmd_memorize(args, s, out):
    run = _run_config(s)
    if run.method == "trunc":
        raise UsageError("memorize needs a TTT method, not trunc")
    states = _eval_docs(args, s, out, run, "memorize.csv")
    for doc_id, state in enumerate(states):
        if hasattr(state, "layers"):
            checkpoint.save_memory(state, out / f"memory_{doc_id:03d}.loca")


def cmd_ablate_init(args, s, out):
    model = checkpoint.load_checkpoint(args.checkpoint)
    base = _run_config(s)
    strategies = _csv_list(s["sweep"]["strategies"], str)
    lines = ["doc_id,strategy,lr,final_quarter_nll"]
    for doc_id, doc in enumerate(_documents(args, s)):
        table = harness.ablate_init(model, doc, strategies, r=base.r, seed=base.seed, base=base, doc_id=doc_id)
        lines += [f"{doc_id},{r.strategy},{r.lr:.6g},{r.final_quarter_nll:.6g}" for r in table.rows]
        print(f"doc {doc_id}: " + " < ".join(table.ranking))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_sweep_width(args, s, out):
    model = checkpoint.load_checkpoint(args.checkpoint)
    base = _run_config(s)
    r_values = _csv_list(s["sweep"]["r_values"], int)
    lines = ["doc_id,r,params,final_quarter_nll"]
    for doc_id, doc in enumerate(_documents(args, s)):
        for row in harness.sweep_width(model, doc, r_values, base=base, doc_id=doc_id):
            lines.append(f"{doc_id},{row.r},{row.params},{row.final_quarter_nll:.6g}")
    (out / "width.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


def cmd_compress(args, s, out):
    model = checkpoint.load_checkpoint(args.checkpoint)
    c = dict(s["nlsvd"])
    n_tokens = c.pop("n_tokens")
    policy = nlsvd.CyclePolicy(**c)
    doc = _documents(args, s)[0]
    tokens = bbmod.encode_document(doc)[: n_tokens + 1]
    mem = LocasMlpMemory.empty(model.config.L, model.config.d, s["harness"]["epsilon"])
    log = nlsvd.run_expansion_compression_cycle(model, mem, tokens, policy)
    log.write_reports(out / "compression.jsonl")
    checkpoint.save_memory(mem, out / "memory.loca")
    print(f"{log.n_compressions} compressions, final ranks {mem.ranks}")


HANDLERS = {
    "param-count": cmd_param_count,
    "gen-corpus": cmd_gen_corpus,
    "train-backbone": cmd_train_backbone,
    "eval": cmd_eval,
    "memorize": cmd_memorize,
    "ablate-init": cmd_ablate_init,
    "sweep-width": cmd_sweep_width,
    "compress": cmd_compress,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        settings = resolve(args)
        out = args.out
        if out is None and args.command != "param-count":
            out = Path("locas-out")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_snapshot(settings, out)
        start = time.perf_counter()
        HANDLERS[args.command](args, settings, out)
        if out is not None and not args.deterministic:
            (out / "timing.json").write_text(json.dumps({"elapsed_s": time.perf_counter() - start}) + "\n")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"locas: error: {exc}", file=sys.stderr)
        return 2
    except LocasError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
