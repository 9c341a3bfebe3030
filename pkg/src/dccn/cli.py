"""Command-line interface: ``dccn gen|train|translate|evaluate|inspect``.

Every failure prints exactly one line, ``error[E_CODE]: message``, on stderr
and exits with status 2 (1 for unexpected internal errors).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import tensor as T
from .config import VARIANTS, RunConfig, load_run_config
from .data import collate, detokenize, load_dataset, read_lines, read_manifest, tokenize, write_dataset
from .errors import ConfigError, DCCNError, InputError, UsageError

OUTPUT_ENV = "DCCN_OUTPUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _output_dir(args, fallback):
    """``--out`` beats ``$DCCN_OUTPUT_DIR``, which beats the config value."""
    return args.out or os.environ.get(OUTPUT_ENV) or fallback


def _check_empty(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to write into it)")


def _dump(obj):
    print(json.dumps(obj, sort_keys=True))


# gen

def cmd_gen(args):
    from .experiment import synthetic_spec

    raw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: expected an object")
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = synthetic_spec(raw)
    out = _output_dir(args, None)
    if not out:
        raise UsageError("gen needs --out (or $DCCN_OUTPUT_DIR)")
    _check_empty(out, args.force)
    from .data import generate_synthetic

    ds = generate_synthetic(spec)
    write_dataset(ds, out)
    _dump({"out": out, **{split: len(exs) for split, exs in ds.splits.items()}})
    return 0


# train

def _run_config(args):
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.variant is not None:
        cfg.model.variant = args.variant
    if args.deterministic:
        cfg.train.deterministic = True
    if getattr(args, "data", None):
        cfg.data = dataclasses.replace(cfg.data, dataset_dir=args.data, synthetic=None)
    cfg.model.validate()
    return cfg


def cmd_train(args):
    from .experiment import run

    cfg = _run_config(args)
    out = _output_dir(args, cfg.output_dir)
    _check_empty(out, args.force)
    cfg = dataclasses.replace(cfg, output_dir=out)
    model, result, ds, cfg = run(cfg, out_dir=out)
    summary = {"out": out, "steps": result.steps, "best_step": result.best_step,
               "best_valid_loss": result.best_valid_loss if np.isfinite(result.best_valid_loss) else None,
               "diverged": result.diverged, "seconds": round(result.seconds, 3)}
    _dump(summary)
    return 0


# translate / evaluate helpers

def _features_for(model, manifest, n):
    """Feature lookup by line index, or ``None`` for text-only models."""
    from .features import load_features

    if not model.multimodal:
        return None
    if manifest is None:
        raise InputError(f"variant {model.cfg.variant!r} needs visual features: pass --features MANIFEST")
    paths = read_manifest(manifest)
    missing = [k for k in range(n) if k not in paths]
    if missing:
        raise InputError(f"{manifest} has no feature file for line {missing[0]}")
    for k in range(n):
        if not os.path.exists(paths[k]):
            raise InputError(f"feature file for line {k} not found: {paths[k]}")
    return lambda ex: load_features(paths[ex.id])


def _translate_lines(model, src_vocab, tgt_vocab, lines, feature_fn, batch_size=64):
    from .data import Example
    from .evaluation import translate_examples

    examples = [Example(k, tokenize(line), []) for k, line in enumerate(lines)]
    nonempty = [ex for ex in examples if ex.src]
    hyps = translate_examples(model, nonempty, src_vocab, tgt_vocab, feature_fn, batch_size)
    out = [""] * len(lines)
    for ex, hyp in zip(nonempty, hyps):
        out[ex.id] = detokenize(hyp)
    return out


def cmd_translate(args):
    from .experiment import load_for_inference

    model, src_vocab, tgt_vocab, _ = load_for_inference(args.checkpoint)
    lines = read_lines(args.input)
    feature_fn = _features_for(model, args.features, len(lines)) if lines else None
    hyps = _translate_lines(model, src_vocab, tgt_vocab, lines, feature_fn)
    text = "".join(h + "\n" for h in hyps)
    if args.out:
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args):
    from .evaluation import DEFAULT_EDGES, evaluate
    from .experiment import load_for_inference

    model, src_vocab, tgt_vocab, _ = load_for_inference(args.checkpoint)
    ds = load_dataset(args.data)
    if args.split not in ds.splits:
        raise InputError(f"{args.data} has no {args.split} split")
    examples = ds.splits[args.split]
    edges = tuple(int(e) for e in args.edges.split(",")) if args.edges else DEFAULT_EDGES
    report, hyps = evaluate(model, examples, src_vocab, tgt_vocab,
                            ds.features if model.multimodal else None, edges)
    out = _output_dir(args, None)
    if out:
        os.makedirs(out, exist_ok=True)
        report.write_jsonl(os.path.join(out, "report.jsonl"))
        report.write_csv(os.path.join(out, "report.csv"))
        with open(os.path.join(out, f"{args.split}.hyp"), "w", encoding="utf-8") as fh:
            fh.writelines(detokenize(h) + "\n" for h in hyps)
    _dump({"bleu": report.bleu, "ambiguous_accuracy": report.ambiguous_accuracy,
           "n": report.n_sentences, "buckets": report.buckets, "params": report.params})
    return 0


# inspect

CSV_COLUMNS = ("granularity", "timestep", "iteration", "i", "j", "b", "c", "rho", "v_norm", "m_norm")


def inspect_routing(model, src_vocab, tgt_vocab, sentence, feats, backend=None):
    """Greedy-translate one sentence, then replay the routing of every
    target step.  Returns ``(tokens, rows, alpha)``: CSV rows in
    ``CSV_COLUMNS`` order and the gate values ``[T, d_w]`` (or ``None``).
    """
    from .kernels import route_instance
    from .multimodal import FeatureBatch
    from .routing import route_conventional
    from .transformer import BOS

    if not model.multimodal:
        raise InputError("text-only checkpoints have no routing to inspect")
    src = np.asarray([src_vocab.encode(tokenize(sentence))])
    if src.size == 0:
        raise InputError("empty sentence")
    batch = FeatureBatch(feats.global_[None], feats.regional[None], feats.mask[None])
    out_ids = model.greedy_decode(src, batch)[0]
    tgt_in = np.asarray([[BOS] + out_ids])
    keep = {}
    with T.no_grad():
        memory = model.encode(src)
        _, _, C = model.decoder(tgt_in, memory, src)
        model.last(C, batch, keep=keep)
    rows = []
    for granularity, kind in zip(("global", "regional"), model.last.kinds):
        if kind not in ("route", "conventional"):
            continue
        net = model.last.extractors[granularity]
        I = feats.global_ if granularity == "global" else feats.regional
        mask = None if granularity == "global" else feats.mask
        if kind == "conventional":
            trace = []
            with T.no_grad():
                route_conventional(I, net, mask=mask, trace=trace)
            per_step = [[{"b": rec["b"][0, 0], "c": rec["c"][0, 0], "rho": None,
                          "v_norm": rec["v_norm"][0, 0], "m_norm": None} for rec in trace]] * C.shape[1]
        else:
            per_step = []
            for t in range(C.shape[1]):
                trace = []
                route_instance(C.data[0, t], I, net, mask=mask, trace=trace, backend=backend)
                per_step.append(trace)
        for t, trace in enumerate(per_step):
            for it, rec in enumerate(trace, 1):
                n_v, n_u = rec["c"].shape
                for j in range(n_v):
                    for i in range(n_u):
                        rows.append((granularity, t, it, i, j, rec["b"][j, i], rec["c"][j, i],
                                     "" if rec["rho"] is None else rec["rho"][j, i],
                                     rec["v_norm"][j], "" if rec["m_norm"] is None else rec["m_norm"][j]))
    alpha = keep.get("alpha")
    return tgt_vocab.decode(out_ids), rows, None if alpha is None else alpha[0]


def write_inspection(out, rows, alpha):
    """routing.csv, gate.csv and SVG heatmaps rendered from the CSV rows."""
    from .svg import write_heatmap

    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "routing.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([f"{x:.17g}" if isinstance(x, float) else x for x in row])
    figures = []
    for granularity in ("global", "regional"):
        sub = [r for r in rows if r[0] == granularity and r[4] == 0]
        if not sub:
            continue
        n_t = max(r[1] for r in sub) + 1
        n_itr = max(r[2] for r in sub)
        n_u = max(r[3] for r in sub) + 1
        for field, col, kwargs in (("c", 6, {"low": 0.0, "high": 1.0, "diverging": False}),
                                   ("rho", 7, {"low": -1.0, "high": 1.0, "diverging": True})):
            grid = np.full((n_t, n_u), np.nan)
            for r in sub:
                if r[2] == n_itr and r[col] != "":
                    grid[r[1], r[3]] = float(r[col])
            name = f"{granularity}_{field}.svg"
            write_heatmap(os.path.join(out, name), grid, title=f"{granularity}: {field} (final iteration, j=0)",
                          row_label="step", col_label="low-level capsule i", **kwargs)
            figures.append(name)
    if alpha is not None:
        with open(os.path.join(out, "gate.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("timestep", "dim", "alpha"))
            for t in range(alpha.shape[0]):
                for k in range(alpha.shape[1]):
                    w.writerow((t, k, f"{alpha[t, k]:.17g}"))
        write_heatmap(os.path.join(out, "gate_alpha.svg"), alpha, title="gate alpha", row_label="step",
                      col_label="dimension", low=0.0, high=1.0, diverging=False)
        figures.append("gate_alpha.svg")
    return figures


def cmd_inspect(args):
    from .experiment import load_for_inference
    from .features import load_features

    model, src_vocab, tgt_vocab, _ = load_for_inference(args.checkpoint)
    if not os.path.exists(args.features):
        raise InputError(f"feature file not found: {args.features}")
    feats = load_features(args.features)
    tokens, rows, alpha = inspect_routing(model, src_vocab, tgt_vocab, args.sentence, feats, args.backend)
    out = _output_dir(args, "inspect")
    _check_empty(out, args.force)
    figures = write_inspection(out, rows, alpha)
    _dump({"translation": detokenize(tokens), "rows": len(rows), "out": out, "figures": figures})
    return 0


def build_parser():
    parser = _Parser(prog="dccn", description="Capsule-routed multimodal translation at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, config_help):
        p.add_argument("--config", help=config_help)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output location (default: ${OUTPUT_ENV}, then the config)")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset on disk")
    common(p, "JSON synthetic task spec (defaults otherwise)")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    common(p, "JSON run config (defaults otherwise)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--data", help="dataset directory (overrides data.* in the config)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="greedy-translate a file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="source text, one sentence per line")
    p.add_argument("--features", help="feature manifest for multimodal checkpoints")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU, length buckets and ambiguous-token accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test")
    p.add_argument("--edges", help="comma-separated bucket edges (default 10,15,20)")
    p.add_argument("--out", help="report directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("inspect", help="dump routing traces as CSV and SVG heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--features", required=True, help="feature container for the sentence")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--backend", choices=("cython", "python"))
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command (gen, train, translate, evaluate, inspect)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        return args.fn(args)
    except DCCNError as exc:
        print(f"error[{exc.code}]: {_one_line(exc)}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[E_IO]: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last resort keeps the one-line contract
        print(f"error[E_INTERNAL]: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
