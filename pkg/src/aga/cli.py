"""
Command line: ``aga gen | train | eval | verify``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numeric failure.  Every output directory gets one ``manifest.json``,
written before the long computation starts and completed at the end.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import binio, config as cfgmod
from .corpus import CorpusConfig, build_world, load_corpus, make_splits, save_corpus, world_manifest
from .evaluation import evaluate, export_heatmap, token_alphas
from .trainer import NumericError, TrainConfig, fit, load_checkpoint, parse_variant

log = logging.getLogger("aga")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
RETRIEVAL_KS = (1, 5, 10)


class UsageError(Exception):
    pass


# -- manifest -------------------------------------------------------------------

def git_blob_sha1(path):
    """Content hash as ``git hash-object`` would print it."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


class RunManifest:
    def __init__(self, out_dir, argv, seed, config_sha256=None, corpus=None, threads=1):
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {
            "argv": list(argv),
            "seed": seed,
            "config_sha256": config_sha256,
            "corpus_sha1": git_blob_sha1(corpus) if corpus else None,
            "threads": threads,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [],
        }
        self._write()

    def finish(self, outputs, status="ok"):
        self.data["outputs"] = sorted(outputs)
        self.data["finished"] = _now()
        self.data["status"] = status
        self._write()

    def _write(self):
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _threads():
    raw = os.environ.get("AGA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"AGA_THREADS must be a positive integer, got {raw!r}")
    return n


def _load_config(path):
    if not path:
        return {}, None
    try:
        return cfgmod.read_file(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None


def _out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def _read_corpus(path):
    try:
        return load_corpus(path)
    except OSError as exc:
        raise UsageError(f"cannot read corpus {path}: {exc.strerror}") from None
    except (binio.FormatError, KeyError, ValueError) as exc:
        raise UsageError(f"corpus {path} is not a valid corpus file: {exc}") from None


def _rel(out, names):
    return [os.path.join(out, n) for n in names]


# -- commands -------------------------------------------------------------------

def cmd_gen(args, argv):
    raw, sha = _load_config(args.config)
    cfg = cfgmod.apply(CorpusConfig(), raw, "corpus")
    out = _out_dir(args.out)
    man = RunManifest(out, argv, args.seed, sha, threads=_threads())
    world = build_world(args.seed, cfg)
    splits = make_splits(world)
    save_corpus(os.path.join(out, "corpus.agac"), world, splits)
    with open(os.path.join(out, "world.json"), "w") as fh:
        json.dump(world_manifest(world), fh, indent=2, sort_keys=True)
        fh.write("\n")
    man.finish(_rel(out, ["corpus.agac", "world.json"]))
    print(f"wrote {sum(len(s) for s in splits)} pairs "
          f"({', '.join(str(len(s)) for s in splits)}) to {out}")
    return EXIT_OK


def _train_config(args):
    raw, sha = _load_config(args.config)
    # config files take the same variant spellings as --variant
    variant = raw.pop("train.variant", None) or raw.pop("variant", None)
    base = cfgmod.apply(TrainConfig(), raw, "train")
    overrides = {}
    if variant is not None:
        try:
            overrides.update(parse_variant(variant))
        except ValueError as exc:
            raise cfgmod.ConfigError(str(exc)) from None
    if args.variant is not None:
        overrides.update(parse_variant(args.variant))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    try:
        cfg = replace(base, **overrides).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg, sha


def cmd_train(args, argv):
    try:
        cfg, sha = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    world, (train, _, _) = _read_corpus(args.corpus)
    out = _out_dir(args.out)
    man = RunManifest(out, argv, cfg.seed, sha, corpus=args.corpus, threads=_threads())
    state = None
    if args.resume:
        try:
            state = load_checkpoint(args.resume, cfg)
        except OSError as exc:
            raise UsageError(f"cannot read checkpoint {args.resume}: {exc.strerror}") from None
        except (binio.FormatError, KeyError, ValueError) as exc:
            raise UsageError(f"checkpoint {args.resume}: {exc}") from None
        _check_dims(state, world)
    try:
        state = fit(cfg, train, out_dir=out, state=state, max_steps=args.max_steps,
                    channels=world.config.channels, vocab=world.config.vocab)
    except NumericError:
        man.finish(_rel(out, ["metrics.jsonl"]), status="numeric failure")
        raise
    outputs = ["checkpoint.agak", "metrics.jsonl", "gates.csv"]
    outputs += sorted(f for f in os.listdir(out) if f.startswith("checkpoint_"))
    man.finish(_rel(out, outputs))
    loss = f"l_total={state.records[-1]['l_total']:.5f} " if state.records else ""
    print(f"trained {cfg.variant} seed={cfg.seed} to step {state.step}; {loss}"
          f"sigma_tg={state.gate_tg.sigma:.5f} sigma_vg={state.gate_vg.sigma:.5f}")
    return EXIT_OK


def _check_dims(state, world):
    enc = state.model.encoder
    c = world.config
    if enc.channels != c.channels:
        raise UsageError(f"dimension mismatch: checkpoint expects {enc.channels} patch channels, "
                         f"corpus has {c.channels}")
    if enc.vocab != c.vocab:
        raise UsageError(f"dimension mismatch: checkpoint vocab is {enc.vocab}, corpus vocab is {c.vocab}")


def cmd_eval(args, argv):
    try:
        state = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
    except (binio.FormatError, KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint {args.checkpoint}: {exc}") from None
    world, (train, _, test) = _read_corpus(args.corpus)
    _check_dims(state, world)
    if len(test) < max(RETRIEVAL_KS):
        raise UsageError(f"test split has {len(test)} pairs; Prec@{max(RETRIEVAL_KS)} needs at least "
                         f"{max(RETRIEVAL_KS)}")
    if args.heatmaps < 0:
        raise UsageError("--heatmaps must be non-negative")
    out = _out_dir(args.out)
    man = RunManifest(out, argv, state.config.seed, corpus=args.corpus, threads=_threads())
    results = evaluate(state, world, train, test, Ks=RETRIEVAL_KS)
    outputs = ["results.json"]
    with open(os.path.join(out, "results.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for path in write_heatmaps(state, world, test[:args.heatmaps], os.path.join(out, "heatmaps")):
        outputs.append(os.path.relpath(path, out))
    man.finish(_rel(out, outputs))
    print(f"prec@1={results['prec@1']:.3f} prec@5={results['prec@5']:.3f} "
          f"prec@10={results['prec@10']:.3f} zero-shot acc={results['zero_shot']['acc']:.3f} "
          f"fidelity={results['fidelity']:.3f}")
    return EXIT_OK


def write_heatmaps(state, world, pairs, directory):
    """One PGM + CSV per real token of each pair, named ``pairNNN_tokMM``."""
    c = world.config
    concept_of = {}
    for k, concept in enumerate(world.concepts):
        for t in concept.tokens:
            concept_of[t] = k
    paths = []
    for i, pair in enumerate(pairs):
        alpha = token_alphas(state.model, pair, state.gate_tg.sigma)
        for j in range(pair.text.length):
            tok = int(pair.text.token_ids[j])
            label = f"id {tok}" + (f" concept {concept_of[tok]}" if tok in concept_of else " distractor")
            prefix = os.path.join(directory, f"pair{i:03d}_tok{j:02d}")
            paths.extend(export_heatmap(alpha[j], c.grid_rows, c.grid_cols, label, prefix))
    return paths


def cmd_verify(args, argv):
    from . import verify
    _threads()
    return verify.main(args.filter)


# -- entry --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="aga", description="Adaptive grouped alignment on a synthetic corpus.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="pretrain one variant on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--variant", help="full | global-only | no-bcga | fixed | fixed:TG,VG")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int, help="stop after this many total steps")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--heatmaps", type=int, default=2, help="test pairs to export heatmaps for")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the verification battery")
    v.add_argument("--filter", help="run one group (or one check) only")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args, ["aga"] + argv)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"aga {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"aga {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
