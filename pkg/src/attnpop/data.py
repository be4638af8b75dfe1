"""Dataset ingestion and labeling.

Manifests are line-delimited JSON, one record per line.  Frame features
and conv activations live in little-endian binary files described by
`write_frame_features` / `write_conv_activations`; values are stored as
32-bit reals and widened to 64-bit on load.  Labels come from a strict
median split of follower-normalized viewcounts, computed over the whole
dataset before any train/val/test assignment.
"""

import json
import string
import struct
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (FeatureConsistencyError, FeatureFormatError,
                     FeatureTruncationError, ManifestError, VocabularyError)
from .tensor import Tensor

FRAME_MAGIC = b"VFB1"
CONV_MAGIC = b"VCA1"
CONSISTENCY_TOLERANCE = 1e-4
SPLITS = ("train", "val", "test")

_REQUIRED_FIELDS = ("id", "headline", "view_count", "follower_count",
                    "frame_features_path")
_ALL_FIELDS = _REQUIRED_FIELDS + ("conv_activations_path",)


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    headline: str
    view_count: int
    follower_count: int
    frame_features_path: str
    conv_activations_path: Optional[str] = None


@dataclass(frozen=True)
class LabeledRecord:
    """A manifest record with its popularity label and split assignment."""
    record: ManifestRecord
    normalized_viewcount: float
    label: int
    split: str


def _parse_record(doc, line):
    if not isinstance(doc, dict):
        raise ManifestError("record must be a key-value document", line)
    missing = [k for k in _REQUIRED_FIELDS if k not in doc]
    if missing:
        raise ManifestError(f"missing fields: {', '.join(missing)}", line)
    unknown = [k for k in doc if k not in _ALL_FIELDS]
    if unknown:
        raise ManifestError(f"unknown fields: {', '.join(unknown)}", line)
    rid = doc["id"]
    if not isinstance(rid, str) or not rid:
        raise ManifestError("id must be a non-empty string", line)
    if not isinstance(doc["headline"], str):
        raise ManifestError(f"record {rid}: headline must be a string", line)
    views = doc["view_count"]
    if isinstance(views, bool) or not isinstance(views, int) or views < 0:
        raise ManifestError(
            f"record {rid}: view_count must be a nonnegative integer", line)
    followers = doc["follower_count"]
    if isinstance(followers, bool) or not isinstance(followers, int) \
            or followers <= 0:
        raise ManifestError(
            f"record {rid}: follower_count must be a positive integer", line)
    if not isinstance(doc["frame_features_path"], str) \
            or not doc["frame_features_path"]:
        raise ManifestError(
            f"record {rid}: frame_features_path must be a non-empty string",
            line)
    conv = doc.get("conv_activations_path")
    if conv is not None and (not isinstance(conv, str) or not conv):
        raise ManifestError(
            f"record {rid}: conv_activations_path must be a non-empty string "
            "when present", line)
    return ManifestRecord(rid, doc["headline"], views, followers,
                          doc["frame_features_path"], conv)


def load_manifest(path):
    """Parse a manifest file into validated records, rejecting duplicates."""
    records = []
    seen = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid record: {exc.msg}",
                                    line_no) from exc
            record = _parse_record(doc, line_no)
            if record.id in seen:
                raise ManifestError(
                    f"duplicate id '{record.id}' (first seen on line "
                    f"{seen[record.id]})", line_no)
            seen[record.id] = line_no
            records.append(record)
    return records


class GloveVocabulary:
    """Frozen word-to-vector table with case-insensitive lookup."""

    def __init__(self, vectors, word_dim):
        self._vectors = dict(vectors)
        self.word_dim = int(word_dim)

    def __len__(self):
        return len(self._vectors)

    def __contains__(self, word):
        return word.lower() in self._vectors

    def vector(self, word):
        """Look up a word; returns None when out of vocabulary."""
        return self._vectors.get(word.lower())


def load_glove(path):
    """Load a word-vector file: one word and its components per line."""
    vectors = {}
    word_dim = None
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            parts = line.split()
            if not parts:
                continue
            word, components = parts[0], parts[1:]
            if not components:
                raise VocabularyError("no vector components", line_no)
            if word_dim is None:
                word_dim = len(components)
            elif len(components) != word_dim:
                raise VocabularyError(
                    f"expected {word_dim} components, got {len(components)}",
                    line_no)
            try:
                values = np.array([float(c) for c in components])
            except ValueError as exc:
                raise VocabularyError(f"bad component: {exc}",
                                      line_no) from exc
            vectors[word.lower()] = Tensor(values)
    if not vectors:
        raise VocabularyError("empty vocabulary")
    return GloveVocabulary(vectors, word_dim)


def tokenize(headline):
    """Lowercase, split on whitespace, strip surrounding punctuation."""
    tokens = []
    for raw in headline.lower().split():
        token = raw.strip(string.punctuation)
        if token:
            tokens.append(token)
    return tokens


def headline_to_vectors(vocab, headline):
    """Map a headline to word vectors; unknown words become zero vectors.

    The result is never empty: a headline with no usable tokens yields a
    single zero vector so downstream sequence models always see T >= 1.
    """
    zero = np.zeros(vocab.word_dim)
    vectors = []
    for token in tokenize(headline):
        hit = vocab.vector(token)
        vectors.append(hit if hit is not None else Tensor(zero))
    if not vectors:
        vectors.append(Tensor(zero))
    return vectors


def normalized_viewcount(views, followers):
    """Viewcount divided by publisher follower count."""
    if followers <= 0:
        raise ValueError("follower count must be positive")
    return float(views) / float(followers)


def assign_labels(values):
    """Median-split labels: popular (1) iff strictly above the median."""
    if len(values) < 2:
        raise ValueError("need at least 2 records to take a median")
    values = np.asarray(values, dtype=float)
    median = float(np.median(values))
    labels = [int(v > median) for v in values]
    if not any(labels):
        warnings.warn("all records labeled unpopular: values do not rise "
                      "above their median", RuntimeWarning, stacklevel=2)
    return labels


@dataclass(frozen=True)
class SplitAssignment:
    """Per-record split names, aligned with the input record order."""
    names: tuple

    def indices(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split '{split}'")
        return [i for i, name in enumerate(self.names) if name == split]


def split_dataset(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Shuffle deterministically, then cut into train/val/test blocks.

    Val and test get floor(n * ratio) records each; train absorbs the
    remainder.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three nonnegative fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios sum to {sum(ratios)!r}, expected 1")
    n = len(records)
    n_val = int(np.floor(n * ratios[1]))
    n_test = int(np.floor(n * ratios[2]))
    order = np.random.default_rng(seed).permutation(n)
    names = [None] * n
    for pos, idx in enumerate(order):
        if pos < n - n_val - n_test:
            names[idx] = "train"
        elif pos < n - n_test:
            names[idx] = "val"
        else:
            names[idx] = "test"
    return SplitAssignment(tuple(names))


def build_dataset(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Label every record (before splitting) and assign splits."""
    nv = [normalized_viewcount(r.view_count, r.follower_count)
          for r in records]
    labels = assign_labels(nv)
    assignment = split_dataset(records, ratios=ratios, seed=seed)
    return [LabeledRecord(rec, nv[i], labels[i], assignment.names[i])
            for i, rec in enumerate(records)]


def _write_block(path, magic, header, array):
    payload = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as handle:
        handle.write(magic)
        handle.write(struct.pack("<" + "I" * len(header), *header))
        handle.write(payload.tobytes())


def write_frame_features(path, features):
    """Write an [n_frames, dim] array in the frame-feature binary format."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise ValueError("frame features must be rank 2")
    _write_block(path, FRAME_MAGIC, features.shape, features)


def write_conv_activations(path, activations):
    """Write an [n_frames, K, K, F] array in the conv-activation format."""
    activations = np.asarray(activations, dtype=float)
    if activations.ndim != 4 or activations.shape[1] != activations.shape[2]:
        raise ValueError("conv activations must be rank 4 with square "
                         "spatial dimensions")
    n, k, _, f = activations.shape
    _write_block(path, CONV_MAGIC, (n, k, f), activations)


def _read_exact(handle, count, path, what):
    buf = handle.read(count)
    if len(buf) != count:
        raise FeatureTruncationError(
            f"{path}: expected {count} bytes for {what}, got {len(buf)}")
    return buf


def _read_block(path, magic, n_header, shape_of):
    with open(path, "rb") as handle:
        seen = handle.read(len(magic))
        if seen != magic:
            raise FeatureFormatError(
                f"{path}: bad magic {seen!r}, expected {magic!r}")
        header = struct.unpack("<" + "I" * n_header,
                               _read_exact(handle, 4 * n_header, path,
                                           "header"))
        if any(h == 0 for h in header):
            raise FeatureFormatError(f"{path}: header declares a zero "
                                     f"dimension: {header}")
        shape = shape_of(header)
        count = int(np.prod(shape))
        payload = _read_exact(handle, 4 * count, path, "payload")
        if handle.read(1):
            raise FeatureTruncationError(
                f"{path}: trailing bytes beyond declared payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Tensor(values.reshape(shape))


def read_frame_features(path):
    return _read_block(path, FRAME_MAGIC, 2, lambda h: h)


def read_conv_activations(path):
    # header carries (n_frames, K, F); the spatial grid is K x K
    return _read_block(path, CONV_MAGIC, 3,
                       lambda h: (h[0], h[1], h[1], h[2]))


def _check_consistency(frames, conv, path):
    means = conv.data.mean(axis=(1, 2))
    pooled = frames.data
    denom = np.maximum(np.maximum(np.abs(means), np.abs(pooled)), 1e-8)
    rel = np.abs(means - pooled) / denom
    worst = rel.max()
    if worst > CONSISTENCY_TOLERANCE:
        frame, channel = np.unravel_index(int(rel.argmax()), rel.shape)
        raise FeatureConsistencyError(
            f"{path}: spatial means disagree with pooled features "
            f"(worst {worst:.3g} relative at frame {frame}, channel "
            f"{channel})")


def load_feature_store(record):
    """Load a record's frame features and, when present, conv activations.

    The spatial mean of each conv channel must reproduce the pooled
    feature value within 1e-4 relative; the two files describe the same
    network layer before and after its average pooling.
    """
    frames = read_frame_features(record.frame_features_path)
    if record.conv_activations_path is None:
        return frames, None
    conv = read_conv_activations(record.conv_activations_path)
    if conv.shape[0] != frames.shape[0]:
        raise FeatureConsistencyError(
            f"{record.conv_activations_path}: {conv.shape[0]} frames, but "
            f"feature file has {frames.shape[0]}")
    if conv.shape[3] != frames.shape[1]:
        raise FeatureConsistencyError(
            f"{record.conv_activations_path}: {conv.shape[3]} channels, but "
            f"feature file has dimension {frames.shape[1]}")
    _check_consistency(frames, conv, record.conv_activations_path)
    return frames, conv
