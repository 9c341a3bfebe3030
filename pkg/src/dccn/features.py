"""Visual feature matrices, the on-disk feature container, and synthesis.

Feature container, version 1 (all integers and floats little-endian)::

    offset  size          field
    0       8             magic b"DCCNFEAT"
    8       4   uint32    format version (1)
    12      8   uint64    sentence id
    20      4   uint32    global rows   (must be 196)
    24      4   uint32    regional rows (must be 10)
    28      4   uint32    feature width (must be 256)
    32      401408        global block, 196*256 float64, row-major
    401440  20480         regional block, 10*256 float64, row-major
    421920  10            region-presence mask, one byte per row (0 or 1)

Total size 421930 bytes; anything shorter or longer is rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError
from .rng import stream

N_GLOBAL = 196
N_REGIONS = 10
FEAT_DIM = 256

MAGIC = b"DCCNFEAT"
VERSION = 1
_HEADER = struct.Struct("<8sIQIII")
HEADER_SIZE = _HEADER.size
GLOBAL_BYTES = N_GLOBAL * FEAT_DIM * 8
REGIONAL_BYTES = N_REGIONS * FEAT_DIM * 8
FILE_SIZE = HEADER_SIZE + GLOBAL_BYTES + REGIONAL_BYTES + N_REGIONS


@dataclass(frozen=True)
class VisualFeatures:
    global_: np.ndarray
    regional: np.ndarray
    mask: np.ndarray
    sentence_id: int = 0

    def __post_init__(self):
        g = np.asarray(self.global_, dtype=np.float64)
        r = np.asarray(self.regional, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if g.shape != (N_GLOBAL, FEAT_DIM):
            raise InputError(f"global features must be {N_GLOBAL}x{FEAT_DIM}, got {'x'.join(map(str, g.shape))}")
        if r.shape != (N_REGIONS, FEAT_DIM):
            raise InputError(f"regional features must be {N_REGIONS}x{FEAT_DIM}, got {'x'.join(map(str, r.shape))}")
        if m.shape != (N_REGIONS,):
            raise InputError(f"region mask must have {N_REGIONS} entries, got {m.shape}")
        if np.any(r[~m] != 0.0):
            raise InputError("padded region rows must be all zero")
        for name, value in (("global_", g), ("regional", r), ("mask", m)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_regions(self):
        return int(self.mask.sum())


def build_region_vectors(annotations, class_embeddings):
    """Region vector = sum_c p(c) * E_c; returns the padded [10 x d] matrix and mask."""
    E = np.asarray(class_embeddings, dtype=np.float64)
    if len(annotations) > N_REGIONS:
        raise InputError(f"at most {N_REGIONS} regions are kept, got {len(annotations)}")
    out = np.zeros((N_REGIONS, E.shape[1]))
    mask = np.zeros(N_REGIONS, dtype=bool)
    for k, probs in enumerate(annotations):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (E.shape[0],):
            raise InputError(f"region {k}: distribution has {probs.size} entries, expected {E.shape[0]}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
            raise InputError(f"region {k}: class distribution does not sum to 1 (sum={probs.sum():.9f})")
        out[k] = probs @ E
        mask[k] = True
    return out, mask


def save_features(path, feats: VisualFeatures):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, int(feats.sentence_id), N_GLOBAL, N_REGIONS, FEAT_DIM))
        fh.write(np.ascontiguousarray(feats.global_, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(feats.regional, dtype="<f8").tobytes())
        fh.write(feats.mask.astype(np.uint8).tobytes())


def parse_features(buf) -> VisualFeatures:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", offset=len(buf))
    magic, version, sid, n_g, n_r, dim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported feature format version {version}", offset=8)
    if n_g != N_GLOBAL:
        raise FormatError(f"global block has {n_g} rows, expected {N_GLOBAL}", offset=20)
    if n_r != N_REGIONS:
        raise FormatError(f"regional block has {n_r} rows, expected {N_REGIONS}", offset=24)
    if dim != FEAT_DIM:
        raise FormatError(f"feature width {dim}, expected {FEAT_DIM}", offset=28)
    if len(buf) < FILE_SIZE:
        raise FormatError(f"truncated file: {len(buf)} of {FILE_SIZE} bytes", offset=len(buf))
    if len(buf) > FILE_SIZE:
        raise FormatError(f"{len(buf) - FILE_SIZE} trailing bytes", offset=FILE_SIZE)
    pos = HEADER_SIZE
    g = np.frombuffer(buf, dtype="<f8", count=N_GLOBAL * FEAT_DIM, offset=pos).reshape(N_GLOBAL, FEAT_DIM)
    pos += GLOBAL_BYTES
    r = np.frombuffer(buf, dtype="<f8", count=N_REGIONS * FEAT_DIM, offset=pos).reshape(N_REGIONS, FEAT_DIM)
    pos += REGIONAL_BYTES
    raw_mask = np.frombuffer(buf, dtype=np.uint8, count=N_REGIONS, offset=pos)
    bad = np.flatnonzero(raw_mask > 1)
    if bad.size:
        raise FormatError(f"mask byte {raw_mask[bad[0]]} is not 0 or 1", offset=pos + int(bad[0]))
    mask = raw_mask.astype(bool)
    for k in np.flatnonzero(~mask):
        if np.any(r[k] != 0.0):
            raise FormatError(f"padded region row {k} is not all zero", offset=HEADER_SIZE + GLOBAL_BYTES + k * FEAT_DIM * 8)
    return VisualFeatures(g.astype(np.float64), r.astype(np.float64), mask, int(sid))


def load_features(path) -> VisualFeatures:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return parse_features(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.args[0]}") from None


@dataclass
class FeatureSpace:
    """Fixed embedding tables behind the synthetic features.

    Sense ``s`` is linked to class ``s``; classes ``n_senses ..`` are
    distractors.  Each sense also owns a global embedding.  Rows are drawn
    from N(0, 1/d) so vectors have roughly unit norm.
    """

    n_senses: int
    n_classes: int = 100
    noise: float = 0.0
    seed: int = 0
    min_regions: int = 3
    class_embeddings: np.ndarray = field(init=False, repr=False)
    sense_embeddings: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_classes < self.n_senses + N_REGIONS - 1:
            raise InputError(f"n_classes must be at least n_senses + {N_REGIONS - 1} so a full image can hold "
                             f"distinct distractors, got {self.n_classes} for {self.n_senses} senses")
        if not 1 <= self.min_regions <= N_REGIONS:
            raise InputError(f"min_regions must lie in [1, {N_REGIONS}]")
        rng = stream(self.seed, "feature-space")
        self.class_embeddings = rng.normal(0.0, FEAT_DIM ** -0.5, size=(self.n_classes, FEAT_DIM))
        self.sense_embeddings = rng.normal(0.0, FEAT_DIM ** -0.5, size=(self.n_senses, FEAT_DIM))

    def annotations(self, sense_id, rng):
        """One-hot class distributions: the sense-linked class plus distractors."""
        n = int(rng.integers(self.min_regions, N_REGIONS + 1))
        shown = sense_id
        if self.noise > 0 and rng.random() < self.noise:
            shown = int(rng.integers(self.n_senses))
        classes = [shown] + list(rng.choice(np.arange(self.n_senses, self.n_classes), size=n - 1, replace=False))
        rng.shuffle(classes)
        out = []
        for c in classes:
            p = np.zeros(self.n_classes)
            p[c] = 1.0
            out.append(p)
        return out

    def synthesize(self, sense_id, seed, sentence_id=0):
        return synthesize_features(sense_id, seed, self, sentence_id)


def synthesize_features(sense_id, rng_seed, space: FeatureSpace, sentence_id=0) -> VisualFeatures:
    """Deterministic features for one sentence whose image shows ``sense_id``.

    Global rows are the sense embedding plus Gaussian noise scaled by
    ``space.noise``; regional rows are built from one-hot annotations, one of
    them on the sense-linked class (replaced by a random sense with
    probability ``space.noise``).
    """
    if not 0 <= sense_id < space.n_senses:
        raise InputError(f"unknown sense id {sense_id} (task has {space.n_senses} senses)")
    rng = stream(rng_seed, f"features/{sense_id}")
    g = np.broadcast_to(space.sense_embeddings[sense_id], (N_GLOBAL, FEAT_DIM)).copy()
    if space.noise > 0:
        g += space.noise * rng.normal(0.0, FEAT_DIM ** -0.5, size=g.shape)
    regional, mask = build_region_vectors(space.annotations(sense_id, rng), space.class_embeddings)
    return VisualFeatures(g, regional, mask, sentence_id)


def probe_sense(feats: VisualFeatures, space: FeatureSpace):
    """Nearest-class probe: the sense whose linked class is nearest to some region.

    Returns the predicted sense id, or -1 if no region is nearest to a
    sense-linked class.
    """
    E = space.class_embeddings
    for row in feats.regional[feats.mask]:
        nearest = int(np.argmin(((E - row) ** 2).sum(axis=1)))
        if nearest < space.n_senses:
            return nearest
    return -1
