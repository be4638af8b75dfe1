"""Synthetic corpora with known decision rules.

Three generators with planted, recoverable structure:

- video: frame features are standard normal; a record is popular iff the
  grand mean over frames and dimensions is positive.  The margin is that
  grand mean.
- text: headlines mix words from two disjoint keyword sets; a record is
  popular iff popular words outnumber unpopular ones (odd length, so no
  ties).  The margin is the count difference.
- bimodal: latent evidence z_v, z_t ~ N(0,1) and label = [z_v + z_t > 0].
  Each modality observes only its own z, which makes either branch alone
  exactly 75% informative (E[Phi(|z|)] = 3/4) while the pair decides the
  label outright.

Viewcounts are exp(margin) scaled to integer counts, so the popularity
signal is a strictly increasing function of the margin and rank
correlations against it are rank correlations against the margin.
"""

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import data
from .tensor import Tensor
from .training import Example, ExampleSet

FOLLOWERS = 1_000_000

_POPULAR_WORDS = tuple(f"up{i}" for i in range(8))
_UNPOPULAR_WORDS = tuple(f"down{i}" for i in range(8))


@dataclass(frozen=True)
class SyntheticRecord:
    label: int
    margin: float
    features: Optional[np.ndarray] = None  # [n_frames, dim]
    tokens: tuple = ()


def make_vocabulary(word_dim=6, seed=0):
    """Random frozen vectors for the two keyword sets."""
    rng = np.random.default_rng(seed)
    return {word: rng.standard_normal(word_dim)
            for word in _POPULAR_WORDS + _UNPOPULAR_WORDS}


def video_set(n=2000, n_frames=3, feature_dim=8, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        features = rng.standard_normal((n_frames, feature_dim))
        margin = float(features.mean())
        records.append(SyntheticRecord(int(margin > 0), margin,
                                       features=features))
    return records


def _headline(rng, length, rate):
    popular = rng.random(length) < rate
    tokens = [str(rng.choice(_POPULAR_WORDS)) if p
              else str(rng.choice(_UNPOPULAR_WORDS)) for p in popular]
    return tuple(tokens), int(popular.sum())


def text_set(n=2000, length=9, seed=0):
    if length % 2 == 0:
        raise ValueError("length must be odd so counts cannot tie")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        # a per-record keyword rate spreads the margins over their range
        tokens, n_popular = _headline(rng, length, rng.uniform(0.1, 0.9))
        margin = float(2 * n_popular - length)
        records.append(SyntheticRecord(int(margin > 0), margin,
                                       tokens=tokens))
    return records


def bimodal_set(n=2000, n_frames=3, feature_dim=8, length=9, seed=0,
                noise=0.5):
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        z_video = float(rng.standard_normal())
        z_text = float(rng.standard_normal())
        features = z_video + noise * rng.standard_normal(
            (n_frames, feature_dim))
        # encode z_text as the popular-word count, monotonically
        n_popular = int(np.clip(round(length / 2 + 2 * z_text), 0, length))
        order = rng.permutation(length)
        tokens = tuple(
            str(rng.choice(_POPULAR_WORDS)) if order[i] < n_popular
            else str(rng.choice(_UNPOPULAR_WORDS)) for i in range(length))
        margin = z_video + z_text
        records.append(SyntheticRecord(int(margin > 0), margin,
                                       features=features, tokens=tokens))
    return records


def to_example(record, vocab=None, word_dim=6):
    frames = None
    if record.features is not None:
        frames = tuple(Tensor(row) for row in record.features)
    words = None
    if record.tokens:
        words = tuple(Tensor(vocab[t]) for t in record.tokens)
    return Example(label=record.label,
                   normalized_viewcount=math.exp(record.margin),
                   frames=frames, words=words)


def make_example_set(records, vocab=None, ratios=(0.8, 0.1, 0.1), seed=0):
    """Split synthetic records and wrap them as model-ready examples."""
    assignment = data.split_dataset(records, ratios=ratios, seed=seed)
    buckets = {name: [] for name in data.SPLITS}
    for record, split in zip(records, assignment.names):
        buckets[split].append(to_example(record, vocab))
    return ExampleSet(train=tuple(buckets["train"]),
                      val=tuple(buckets["val"]),
                      test=tuple(buckets["test"]))


def _spread_conv(features, k=2, scale=0.1):
    """Expand [n, dim] pooled features to [n, k, k, dim] activations whose
    spatial mean reproduces the features exactly."""
    n, dim = features.shape
    cells = k * k
    pattern = np.arange(cells, dtype=float) - (cells - 1) / 2.0
    conv = features[:, None, :] + scale * pattern[None, :, None]
    return conv.reshape(n, k, k, dim)


def write_corpus(directory, records, vocab=None, word_dim=6, conv_k=2,
                 with_conv=True):
    """Materialize records as a manifest plus feature/vector files.

    Returns the manifest path.  Every file lands under `directory`.
    """
    directory = str(directory)
    manifest_path = f"{directory}/manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as handle:
        for i, record in enumerate(records):
            doc = {
                "id": f"syn{i:05d}",
                "headline": " ".join(record.tokens),
                "view_count": int(round(FOLLOWERS * math.exp(record.margin))),
                "follower_count": FOLLOWERS,
                "frame_features_path": f"{directory}/syn{i:05d}.vfb",
            }
            features = record.features
            if features is None:
                # text-only records still need a frame file to satisfy
                # the manifest schema; a single zero frame marks "unused"
                features = np.zeros((1, 1))
            data.write_frame_features(doc["frame_features_path"], features)
            if with_conv and record.features is not None:
                doc["conv_activations_path"] = f"{directory}/syn{i:05d}.vca"
                data.write_conv_activations(
                    doc["conv_activations_path"],
                    _spread_conv(record.features, k=conv_k))
            handle.write(json.dumps(doc) + "\n")
    if vocab is not None:
        glove_path = f"{directory}/glove.txt"
        with open(glove_path, "w", encoding="utf-8") as handle:
            for word, vector in vocab.items():
                parts = " ".join(format(v, ".9g") for v in vector)
                handle.write(f"{word} {parts}\n")
    return manifest_path
