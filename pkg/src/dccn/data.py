"""Vocabulary, synthetic disambiguation task, token-budget batching, and
the parallel-text loader.

Synthetic task: the source vocabulary holds ``n_ambiguous`` ambiguous words
``amb{k}`` and plain words ``src{k}``.  Plain words translate one-to-one
(``src{k}`` -> ``tgt{k}``); ``amb{k}`` translates to ``amb{k}_s{s}``
depending on the sense ``s`` shown in the sentence's image.  The sentence
text is drawn independently of the sense, so only the image resolves it.
"""

from __future__ import annotations

import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .features import N_REGIONS, FeatureSpace, VisualFeatures, load_features
from .multimodal import FeatureBatch
from .rng import stream
from .transformer import BOS, EOS, PAD

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    def __init__(self, tokens):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise InputError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.itos)

    @property
    def unk(self):
        return 3

    def encode(self, tokens):
        return [self.stoi.get(t, self.unk) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


def tokenize(line):
    return line.split()


def detokenize(tokens):
    return " ".join(tokens)


def build_vocab(corpus):
    """Frequency-ordered vocabulary after the reserved ids; ties lexicographic."""
    counts = Counter()
    for sent in corpus:
        counts.update(tokenize(sent) if isinstance(sent, str) else sent)
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    return Vocab([tok for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))])


@dataclass
class Example:
    id: int
    src: list
    tgt: list
    amb_pos: int = -1
    sense_id: int = -1
    feature_sense: int = -1
    feature_seed: int = 0
    feature_path: str | None = None

    @property
    def n_tokens(self):
        return len(self.src) + len(self.tgt)


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 200
    n_ambiguous: int = 20
    senses_per_token: int = 2
    min_len: int = 4
    max_len: int = 10
    sense_prior: list = field(default_factory=lambda: [0.6, 0.4])
    n_train: int = 8000
    n_valid: int = 1000
    n_test: int = 1000
    n_classes: int = 100
    noise: float = 0.0
    seed: int = 1

    def validate(self):
        if self.n_ambiguous < 1 or self.vocab_size <= self.n_ambiguous:
            raise ConfigError("need 1 <= n_ambiguous < vocab_size")
        if self.senses_per_token < 2:
            raise ConfigError("senses_per_token must be >= 2")
        if len(self.sense_prior) != self.senses_per_token or abs(sum(self.sense_prior) - 1.0) > 1e-9:
            raise ConfigError("sense_prior must have one probability per sense and sum to 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("sentence length range must satisfy 1 <= min_len <= max_len")
        if min(self.n_train, self.n_valid, self.n_test) < 0 or self.n_train + self.n_valid + self.n_test == 0:
            raise ConfigError("dataset sizes must be non-negative and not all zero")
        if self.n_classes < self.n_senses + N_REGIONS - 1:
            raise ConfigError(f"n_classes must be at least {self.n_senses + N_REGIONS - 1} "
                              f"({self.n_senses} senses plus {N_REGIONS - 1} distractors)")
        return self

    @property
    def n_senses(self):
        return self.n_ambiguous * self.senses_per_token

    def feature_space(self):
        return FeatureSpace(n_senses=self.n_senses, n_classes=self.n_classes,
                            noise=self.noise, seed=self.seed)

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticDataset:
    spec: SyntheticTaskSpec
    src_vocab: Vocab
    tgt_vocab: Vocab
    splits: dict
    space: FeatureSpace

    def features(self, ex: Example) -> VisualFeatures:
        if ex.feature_path is not None:
            return load_features(ex.feature_path)
        return self.space.synthesize(ex.feature_sense, ex.feature_seed, ex.id)


def synthetic_vocabs(spec):
    src = [f"amb{k}" for k in range(spec.n_ambiguous)]
    src += [f"src{k}" for k in range(spec.vocab_size - spec.n_ambiguous)]
    tgt = [f"amb{k}_s{s}" for k in range(spec.n_ambiguous) for s in range(spec.senses_per_token)]
    tgt += [f"tgt{k}" for k in range(spec.vocab_size - spec.n_ambiguous)]
    return Vocab(src), Vocab(tgt)


def generate_synthetic(spec: SyntheticTaskSpec) -> SyntheticDataset:
    spec.validate()
    src_vocab, tgt_vocab = synthetic_vocabs(spec)
    n_plain = spec.vocab_size - spec.n_ambiguous
    prior = np.asarray(spec.sense_prior, dtype=np.float64)
    splits = {}
    next_id = 0
    for split, size in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        rng = stream(spec.seed, f"synthetic/{split}")
        examples = []
        for _ in range(size):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            words = rng.integers(n_plain, size=length)
            pos = int(rng.integers(length))
            amb = int(rng.integers(spec.n_ambiguous))
            sense = int(rng.choice(spec.senses_per_token, p=prior))
            src = [f"src{w}" for w in words]
            tgt = [f"tgt{w}" for w in words]
            src[pos] = f"amb{amb}"
            tgt[pos] = f"amb{amb}_s{sense}"
            sense_id = amb * spec.senses_per_token + sense
            examples.append(Example(next_id, src, tgt, pos, sense_id, sense_id,
                                    feature_seed=spec.seed * 1_000_003 + next_id))
            next_id += 1
        splits[split] = examples
    return SyntheticDataset(spec, src_vocab, tgt_vocab, splits, spec.feature_space())


def shuffle_features(examples, seed):
    """Reassign each sentence the image of a random other sentence."""
    perm = stream(seed, "shuffle-features").permutation(len(examples))
    out = []
    for ex, k in zip(examples, perm):
        donor = examples[k]
        out.append(Example(ex.id, ex.src, ex.tgt, ex.amb_pos, ex.sense_id,
                           donor.feature_sense, donor.feature_seed, donor.feature_path))
    return out


@dataclass
class Batch:
    ids: list
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    feats: FeatureBatch | None
    n_tokens: int

    @property
    def src_mask(self):
        return self.src != PAD

    @property
    def tgt_mask(self):
        return self.tgt_out != PAD


def make_batches(examples, budget, seed=None, epoch=0):
    """Shuffle by ``seed`` (if given) and pack greedily under ``budget`` tokens.

    Returns lists of examples; a pair counts ``len(src) + len(tgt)`` tokens.
    """
    order = list(range(len(examples)))
    if seed is not None:
        order = list(stream(seed, f"batches/{epoch}").permutation(len(examples)))
    batches, current, used = [], [], 0
    for k in order:
        ex = examples[k]
        if ex.n_tokens > budget:
            raise InputError(f"sentence {ex.id} has {ex.n_tokens} tokens, above the batch budget {budget}")
        if current and used + ex.n_tokens > budget:
            batches.append(current)
            current, used = [], 0
        current.append(ex)
        used += ex.n_tokens
    if current:
        batches.append(current)
    return batches


def min_batches(examples, budget):
    return math.ceil(sum(ex.n_tokens for ex in examples) / budget)


def collate(examples, src_vocab, tgt_vocab, feature_fn=None) -> Batch:
    B = len(examples)
    S = max(len(ex.src) for ex in examples)
    Tn = max(len(ex.tgt) for ex in examples) + 1
    src = np.full((B, S), PAD, dtype=np.int64)
    tgt_in = np.full((B, Tn), PAD, dtype=np.int64)
    tgt_out = np.full((B, Tn), PAD, dtype=np.int64)
    for row, ex in enumerate(examples):
        s = src_vocab.encode(ex.src)
        t = tgt_vocab.encode(ex.tgt)
        src[row, :len(s)] = s
        tgt_in[row, :len(t) + 1] = [BOS] + t
        tgt_out[row, :len(t) + 1] = t + [EOS]
    feats = None
    if feature_fn is not None:
        fs = [feature_fn(ex) for ex in examples]
        feats = FeatureBatch(np.stack([f.global_ for f in fs]),
                             np.stack([f.regional for f in fs]),
                             np.stack([f.mask for f in fs]))
    return Batch([ex.id for ex in examples], src, tgt_in, tgt_out, feats,
                 sum(ex.n_tokens for ex in examples))


def read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def read_manifest(path):
    """Feature manifest: one ``<line index>\\t<container path>`` per line."""
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    for lineno, line in enumerate(read_lines(path), 1):
        if not line.strip():
            continue
        try:
            idx, rel = line.split("\t", 1)
            idx = int(idx)
        except ValueError:
            raise InputError(f"{path}:{lineno}: expected '<index>\\t<path>'") from None
        out[idx] = rel if os.path.isabs(rel) else os.path.join(base, rel)
    return out


def load_parallel(src_path, tgt_path=None, manifest_path=None):
    """Whitespace-tokenized parallel text aligned by line number."""
    src_lines = read_lines(src_path)
    tgt_lines = read_lines(tgt_path) if tgt_path else [""] * len(src_lines)
    if len(src_lines) != len(tgt_lines):
        raise InputError(f"{src_path} has {len(src_lines)} lines but {tgt_path} has {len(tgt_lines)}")
    manifest = read_manifest(manifest_path) if manifest_path else {}
    return [Example(k, tokenize(s), tokenize(t), feature_path=manifest.get(k))
            for k, (s, t) in enumerate(zip(src_lines, tgt_lines))]


SPLITS = ("train", "valid", "test")


def write_dataset(ds: SyntheticDataset, out_dir):
    """Write a generated task as parallel text plus one feature container per line.

    Layout: ``spec.json``, ``src.vocab``/``tgt.vocab``, and per split
    ``<split>.src``, ``<split>.tgt``, ``<split>.manifest`` and
    ``<split>.meta`` (``amb_pos<TAB>sense_id`` per line), with containers
    under ``features/<split>/``.
    """
    import json

    from .features import save_features

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "spec.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(ds.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    ds.src_vocab.save(os.path.join(out_dir, "src.vocab"))
    ds.tgt_vocab.save(os.path.join(out_dir, "tgt.vocab"))
    for split in SPLITS:
        examples = ds.splits.get(split, [])
        feat_dir = os.path.join(out_dir, "features", split)
        os.makedirs(feat_dir, exist_ok=True)
        files = {ext: open(os.path.join(out_dir, f"{split}.{ext}"), "w", encoding="utf-8")
                 for ext in ("src", "tgt", "manifest", "meta")}
        try:
            for k, ex in enumerate(examples):
                rel = f"features/{split}/{ex.id:07d}.feat"
                save_features(os.path.join(out_dir, rel), ds.features(ex))
                files["src"].write(detokenize(ex.src) + "\n")
                files["tgt"].write(detokenize(ex.tgt) + "\n")
                files["manifest"].write(f"{k}\t{rel}\n")
                files["meta"].write(f"{ex.amb_pos}\t{ex.sense_id}\n")
        finally:
            for fh in files.values():
                fh.close()


@dataclass
class DiskDataset:
    src_vocab: Vocab
    tgt_vocab: Vocab
    splits: dict

    def features(self, ex: Example) -> VisualFeatures:
        if ex.feature_path is None:
            raise InputError(f"sentence {ex.id} has no feature file in the manifest")
        return load_features(ex.feature_path)


def load_dataset(root):
    """Read a directory written by ``write_dataset`` (or laid out the same way).

    Vocabularies come from ``src.vocab``/``tgt.vocab`` when present, else
    they are built from the training split.
    """
    if not os.path.isdir(root):
        raise InputError(f"dataset directory {root} does not exist")
    splits = {}
    for split in SPLITS:
        src = os.path.join(root, f"{split}.src")
        if not os.path.exists(src):
            continue
        tgt = os.path.join(root, f"{split}.tgt")
        manifest = os.path.join(root, f"{split}.manifest")
        examples = load_parallel(src, tgt if os.path.exists(tgt) else None,
                                 manifest if os.path.exists(manifest) else None)
        meta = os.path.join(root, f"{split}.meta")
        if os.path.exists(meta):
            rows = [line.split("\t") for line in read_lines(meta) if line.strip()]
            if len(rows) != len(examples):
                raise InputError(f"{meta} has {len(rows)} lines for {len(examples)} sentences")
            for ex, (pos, sense) in zip(examples, rows):
                ex.amb_pos, ex.sense_id = int(pos), int(sense)
        splits[split] = examples
    if "train" not in splits:
        raise InputError(f"{root} has no train.src")

    def vocab(side):
        path = os.path.join(root, f"{side}.vocab")
        if os.path.exists(path):
            return Vocab.load(path)
        return build_vocab([getattr(ex, side) for ex in splits["train"]])

    return DiskDataset(vocab("src"), vocab("tgt"), splits)
