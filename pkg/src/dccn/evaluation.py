"""BLEU, length buckets, ambiguous-token accuracy and parameter counts."""

from __future__ import annotations

import bisect
import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, InputError

DEFAULT_EDGES = (10, 15, 20)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references):
    """Clipped n-gram matches, n-gram totals (n=1..4), and the two lengths."""
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = np.zeros(4, dtype=np.int64)
    totals = np.zeros(4, dtype=np.int64)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
        ref = ref.split() if isinstance(ref, str) else list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(hypotheses, references):
    """Corpus-level 4-gram BLEU in [0, 100], single reference, no smoothing.

    Any zero n-gram precision (including an order with no hypothesis
    n-grams at all) makes the score 0.
    """
    matches, totals, hyp_len, ref_len = bleu_stats(hypotheses, references)
    if hyp_len == 0 or np.any(matches == 0):
        return 0.0
    log_p = np.log(matches / totals).mean()
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return float(100.0 * bp * math.exp(log_p))


@dataclass
class EvalReport:
    bleu: float
    n_sentences: int
    ambiguous_accuracy: float | None = None
    buckets: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "corpus", "bleu": self.bleu, "n": self.n_sentences,
                                 "ambiguous_accuracy": self.ambiguous_accuracy}) + "\n")
            for row in self.buckets:
                fh.write(json.dumps({"kind": "bucket", **row}) + "\n")
            if self.params:
                fh.write(json.dumps({"kind": "params", **self.params}) + "\n")

    def write_csv(self, path):
        """Columns: bucket,low,high,n,bleu (the corpus row has bucket=all)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "low", "high", "n", "bleu"])
            w.writerow(["all", "", "", self.n_sentences, f"{self.bleu:.6f}"])
            for row in self.buckets:
                high = "" if row["high"] is None else row["high"]
                w.writerow([row["label"], row["low"], high, row["n"], f"{row['bleu']:.6f}"])


def bucket_label(low, high):
    return f">{low - 1}" if high is None else f"{low}-{high}"


def length_buckets(sources, hypotheses, references, edges=DEFAULT_EDGES):
    """Group sentences by source length and score each group on its own.

    Bucket k holds lengths in (edges[k-1], edges[k]]; the last bucket holds
    everything longer than the final edge.
    """
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])) or any(e < 1 for e in edges):
        raise ConfigError(f"bucket edges must be positive and strictly increasing, got {edges}")
    members = [[] for _ in range(len(edges) + 1)]
    for k, s in enumerate(sources):
        members[bisect.bisect_left(edges, len(_tok(s)))].append(k)
    rows = []
    for b, idx in enumerate(members):
        low = 1 if b == 0 else edges[b - 1] + 1
        high = edges[b] if b < len(edges) else None
        score = bleu([hypotheses[k] for k in idx], [references[k] for k in idx]) if idx else 0.0
        rows.append({"label": bucket_label(low, high), "low": low, "high": high, "n": len(idx), "bleu": score})
    return rows


def _tok(s):
    return s.split() if isinstance(s, str) else s


def ambiguous_accuracy(hypotheses, examples):
    """Fraction of sentences whose output token at the ambiguous position is
    the gold sense-specific translation."""
    hits = total = 0
    for hyp, ex in zip(hypotheses, examples):
        if ex.amb_pos < 0:
            continue
        total += 1
        hyp = _tok(hyp)
        hits += ex.amb_pos < len(hyp) and hyp[ex.amb_pos] == ex.tgt[ex.amb_pos]
    return hits / total if total else float("nan")


def count_params(model):
    """Exact parameter totals per component.

    ``dccn_total`` counts everything the visual sub-layer adds to the text
    transformer: both extractor networks, the gate and its layer norm.
    """
    counts = {"transformer": 0, "dccn_global": 0, "dccn_regional": 0, "gate": 0, "fusion_norm": 0}
    for name, p in model.named_parameters():
        n = int(p.size)
        if name.startswith("last.dccn_global.") or name.startswith("last.att_global."):
            counts["dccn_global"] += n
        elif name.startswith("last.dccn_regional.") or name.startswith("last.att_regional."):
            counts["dccn_regional"] += n
        elif name.startswith("last.gate."):
            counts["gate"] += n
        elif name.startswith("last.norm_fuse."):
            counts["fusion_norm"] += n
        else:
            counts["transformer"] += n
    counts["dccn_total"] = counts["dccn_global"] + counts["dccn_regional"] + counts["gate"] + counts["fusion_norm"]
    counts["total"] = counts["transformer"] + counts["dccn_total"]
    return counts


def translate_examples(model, examples, src_vocab, tgt_vocab, feature_fn=None, batch_size=64):
    """Greedy-decode ``examples``; returns target token lists in input order."""
    from .data import collate

    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        fn = feature_fn if model.multimodal else None
        batch = collate(chunk, src_vocab, tgt_vocab, fn)
        for ids in model.greedy_decode(batch.src, batch.feats):
            out.append(tgt_vocab.decode(ids))
    return out


def evaluate(model, examples, src_vocab, tgt_vocab, feature_fn=None, edges=DEFAULT_EDGES):
    hyps = translate_examples(model, examples, src_vocab, tgt_vocab, feature_fn)
    refs = [ex.tgt for ex in examples]
    return EvalReport(
        bleu=bleu(hyps, refs),
        n_sentences=len(examples),
        ambiguous_accuracy=ambiguous_accuracy(hyps, examples),
        buckets=length_buckets([ex.src for ex in examples], hyps, refs, edges),
        params=count_params(model),
    ), hyps
