"""Popularity predictors: video-only, headline-only, and multimodal.

A `PopularityModel` wires the layer blocks into one of three shapes and
exposes `predict` (one tape, so callers can differentiate the logit with
respect to anything upstream, including the raw frame features). Models
persist to a versioned text checkpoint that round-trips every parameter
bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import backend
from . import tensor as T
from .errors import (CheckpointError, CheckpointParseError, ShapeError,
                     UnsupportedVersionError)
from .layers import AttentionBlock, BiLstm, DenseLayer, dropout_apply
from .tensor import Tensor

MODALITIES = ("video", "text", "multimodal")

CHECKPOINT_VERSION = "attnpop-ckpt-1"

# dropout mask streams: each forward pass owns one stream and uses at
# most _MASKS_PER_STREAM counters inside it (frames + tokens + fusion)
_MASKS_PER_STREAM = 4096


@dataclass(frozen=True)
class ModelConfig:
    """All dimensionalities, dropout rates, and the init seed."""

    modality: str = "video"
    feature_dim: int = 2048
    embed_dim: int = 256
    attention_hidden: int = 128
    lstm_hidden: int = 128
    fusion_hidden: int = 128
    word_dim: int = 100
    dropout_frames: float = 0.0
    dropout_lstm: float = 0.0
    dropout_fusion: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        for name in ("feature_dim", "embed_dim", "attention_hidden",
                     "lstm_hidden", "fusion_hidden", "word_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("dropout_frames", "dropout_lstm", "dropout_fusion"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {rate}")

    @property
    def text_state_dim(self) -> int:
        return 2 * self.lstm_hidden

    @property
    def head_input_dim(self) -> int:
        if self.modality == "video":
            return self.embed_dim
        if self.modality == "text":
            return self.text_state_dim
        return self.embed_dim + self.text_state_dim


class VideoBranch:
    """Frame features -> projected embeddings -> attention-pooled v."""

    def __init__(self, frame_projection: DenseLayer, attention: AttentionBlock):
        if attention.in_dim != frame_projection.out_dim:
            raise ShapeError("attention must read the projection output")
        self.frame_projection = frame_projection
        self.attention = attention

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "VideoBranch":
        projection = DenseLayer.create(
            "video.projection", config.feature_dim, config.embed_dim, "relu", rng)
        attention = AttentionBlock.create(
            "video.attention", config.embed_dim, config.attention_hidden, rng)
        return cls(projection, attention)

    def parameters(self) -> list:
        return self.frame_projection.parameters() + self.attention.parameters()


class TextBranch:
    """Word vectors -> bidirectional recurrence -> attention-pooled d."""

    def __init__(self, word_dim: int, encoder: BiLstm, attention: AttentionBlock):
        if encoder.input_dim != word_dim:
            raise ShapeError("encoder must read word vectors")
        if attention.in_dim != 2 * encoder.hidden_dim:
            raise ShapeError("attention must read the concatenated directional states")
        self.word_dim = word_dim
        self.encoder = encoder
        self.attention = attention

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "TextBranch":
        encoder = BiLstm.create("text.encoder", config.word_dim, config.lstm_hidden, rng)
        attention = AttentionBlock.create(
            "text.attention", config.text_state_dim, config.attention_hidden, rng)
        return cls(config.word_dim, encoder, attention)

    def parameters(self) -> list:
        return self.encoder.parameters() + self.attention.parameters()


class FusionHead:
    """Two-layer head: relu hidden layer, then a single-logit output."""

    def __init__(self, hidden: DenseLayer, output: DenseLayer):
        if output.out_dim != 1:
            raise ShapeError("head must produce exactly one logit")
        if output.in_dim != hidden.out_dim:
            raise ShapeError("output layer must read the hidden layer")
        self.hidden = hidden
        self.output = output

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "FusionHead":
        hidden = DenseLayer.create(
            "head.hidden", config.head_input_dim, config.fusion_hidden, "relu", rng)
        output = DenseLayer.create("head.output", config.fusion_hidden, 1, "identity", rng)
        return cls(hidden, output)

    def parameters(self) -> list:
        return self.hidden.parameters() + self.output.parameters()


@dataclass
class ModelOutput:
    """One prediction: the logit, its probability, and the attentions.

    `logit_node` is the tape node that produced the logit; differentiate
    it to reach any upstream tensor (training loss, frame gradients).
    """

    logit: float
    probability: float
    logit_node: Tensor
    alpha: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    video_embedding: Optional[Tensor] = None
    text_embedding: Optional[Tensor] = None


class PopularityModel:
    def __init__(self, config: ModelConfig, video: Optional[VideoBranch],
                 text: Optional[TextBranch], head: FusionHead):
        wants_video = config.modality in ("video", "multimodal")
        wants_text = config.modality in ("text", "multimodal")
        if wants_video != (video is not None) or wants_text != (text is not None):
            raise ValueError(f"branches do not match modality {config.modality!r}")
        self.config = config
        self.video = video
        self.text = text
        self.head = head
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("parameter names must be unique within one model")

    @classmethod
    def create(cls, config: ModelConfig) -> "PopularityModel":
        rng = np.random.default_rng(config.seed)
        video = VideoBranch.create(config, rng) if config.modality != "text" else None
        text = TextBranch.create(config, rng) if config.modality != "video" else None
        head = FusionHead.create(config, rng)
        return cls(config, video, text, head)

    @property
    def modality(self) -> str:
        return self.config.modality

    def parameters(self) -> list:
        params = []
        if self.video is not None:
            params.extend(self.video.parameters())
        if self.text is not None:
            params.extend(self.text.parameters())
        params.extend(self.head.parameters())
        return params

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.trainable]

    def predict(self, frames: Optional[Sequence[Tensor]] = None,
                words: Optional[Sequence[Tensor]] = None,
                training: bool = False, mask_stream: int = 0) -> ModelOutput:
        return model_predict(self, frames, words, training=training,
                             mask_stream=mask_stream)


def _dropout_seq(tensors, rate, config, training, counter):
    out = []
    for t in tensors:
        out.append(dropout_apply(t, rate, config.seed, training, next(counter)))
    return out


def _mask_counter(mask_stream: int):
    base = int(mask_stream) * _MASKS_PER_STREAM
    for offset in range(_MASKS_PER_STREAM):
        yield base + offset
    raise RuntimeError("mask stream exhausted; sequence too long")


def video_forward(branch: VideoBranch, frames: Sequence[Tensor],
                  config: Optional[ModelConfig] = None, training: bool = False,
                  counter=None):
    """Project each frame and attention-pool; returns (v, alpha)."""
    if len(frames) == 0:
        raise ValueError("video forward needs at least one frame")
    expected = branch.frame_projection.in_dim
    for i, f in enumerate(frames):
        if f.rank != 1 or f.shape[0] != expected:
            raise ShapeError(
                f"frame {i} has shape {f.shape}, expected ({expected},)")
    projected = [branch.frame_projection.forward(f) for f in frames]
    if config is not None and training and config.dropout_frames > 0.0:
        projected = _dropout_seq(projected, config.dropout_frames,
                                 config, training, counter)
    alpha, v = branch.attention.forward(projected)
    return v, alpha


def text_forward(branch: TextBranch, words: Sequence[Tensor],
                 config: Optional[ModelConfig] = None, training: bool = False,
                 counter=None):
    """Encode the word sequence and attention-pool; returns (d, beta)."""
    if len(words) == 0:
        raise ValueError("text forward needs at least one word vector")
    for i, w in enumerate(words):
        if w.rank != 1 or w.shape[0] != branch.word_dim:
            raise ShapeError(
                f"word {i} has shape {w.shape}, expected ({branch.word_dim},)")
    states = branch.encoder.forward(words)
    if config is not None and training and config.dropout_lstm > 0.0:
        states = _dropout_seq(states, config.dropout_lstm, config, training, counter)
    beta, d = branch.attention.forward(states)
    return d, beta


def fuse_predict(model: PopularityModel, v: Optional[Tensor] = None,
                 d: Optional[Tensor] = None, alpha: Optional[Tensor] = None,
                 beta: Optional[Tensor] = None, training: bool = False,
                 counter=None) -> ModelOutput:
    """Apply the head to the available embeddings and package the output."""
    modality = model.modality
    if modality == "video":
        if v is None or d is not None:
            raise ValueError("video-only model takes exactly a video embedding")
        x = v
    elif modality == "text":
        if d is None or v is not None:
            raise ValueError("text-only model takes exactly a text embedding")
        x = d
    else:
        if v is None or d is None:
            raise ValueError("multimodal model needs both embeddings")
        x = T.concat([v, d])
    hidden = model.head.hidden.forward(x)
    if training and model.config.dropout_fusion > 0.0:
        if counter is None:
            counter = _mask_counter(0)
        hidden = dropout_apply(hidden, model.config.dropout_fusion,
                               model.config.seed, training, next(counter))
    logit_node = model.head.output.forward(hidden)
    logit = logit_node.item()
    probability = float(backend.kernels.sigmoid_fwd(np.array([logit]))[0])
    return ModelOutput(logit=logit, probability=probability,
                       logit_node=logit_node, alpha=alpha, beta=beta,
                       video_embedding=v, text_embedding=d)


def model_predict(model: PopularityModel,
                  frames: Optional[Sequence[Tensor]] = None,
                  words: Optional[Sequence[Tensor]] = None,
                  training: bool = False, mask_stream: int = 0) -> ModelOutput:
    """End-to-end forward on the caller's tape (if one is active)."""
    counter = _mask_counter(mask_stream)
    v = d = alpha = beta = None
    if model.video is not None:
        if frames is None:
            raise ValueError(f"{model.modality} model needs frame features")
        v, alpha = video_forward(model.video, frames, model.config, training, counter)
    elif frames is not None:
        raise ValueError("text-only model does not take frames")
    if model.text is not None:
        if words is None:
            raise ValueError(f"{model.modality} model needs word vectors")
        d, beta = text_forward(model.text, words, model.config, training, counter)
    elif words is not None:
        raise ValueError("video-only model does not take words")
    return fuse_predict(model, v, d, alpha=alpha, beta=beta,
                        training=training, counter=counter)


def build_multimodal(video_model: PopularityModel, text_model: PopularityModel,
                     config: ModelConfig) -> PopularityModel:
    """Assemble a multimodal model from two trained unimodal ones.

    Branch parameters are copied over and frozen; only the freshly
    initialized fusion head trains afterwards. Gradients still flow
    through frozen branches, so heatmaps keep working.
    """
    if video_model.modality != "video" or text_model.modality != "text":
        raise ValueError("expected one video-only and one text-only model")
    if config.modality != "multimodal":
        raise ValueError("target config must be multimodal")
    for name in ("feature_dim", "embed_dim", "attention_hidden"):
        if getattr(video_model.config, name) != getattr(config, name):
            raise ValueError(f"video branch {name} does not match target config")
    for name in ("word_dim", "lstm_hidden", "attention_hidden"):
        if getattr(text_model.config, name) != getattr(config, name):
            raise ValueError(f"text branch {name} does not match target config")
    fused = PopularityModel.create(config)
    donors = {p.name: p for p in video_model.video.parameters()}
    donors.update({p.name: p for p in text_model.text.parameters()})
    for param in fused.video.parameters() + fused.text.parameters():
        donor = donors[param.name]
        param.value = donor.value
        param.trainable = False
    return fused


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _format_real(x: float) -> str:
    """17 significant digits: enough to round-trip any 64-bit real."""
    out = format(float(x), ".17g")
    # keep JSON numeric tokens (no bare 'inf'/'nan'; tensors are finite)
    return out


def _emit_json(value, pieces: list) -> None:
    if isinstance(value, dict):
        pieces.append("{")
        for i, (k, v) in enumerate(value.items()):
            if i:
                pieces.append(",")
            pieces.append(json.dumps(k))
            pieces.append(":")
            _emit_json(v, pieces)
        pieces.append("}")
    elif isinstance(value, (list, tuple)):
        pieces.append("[")
        for i, v in enumerate(value):
            if i:
                pieces.append(",")
            _emit_json(v, pieces)
        pieces.append("]")
    elif isinstance(value, bool):
        pieces.append("true" if value else "false")
    elif isinstance(value, float):
        pieces.append(_format_real(value))
    elif isinstance(value, int):
        pieces.append(str(value))
    elif isinstance(value, str):
        pieces.append(json.dumps(value))
    else:
        raise TypeError(f"cannot serialize {type(value).__name__}")


def checkpoint_document(model: PopularityModel) -> str:
    params = {}
    for p in model.parameters():
        params[p.name] = {
            "shape": list(p.value.shape),
            "values": p.value.data.reshape(-1).tolist(),
            "trainable": p.trainable,
        }
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "modality": model.modality,
        "config": asdict(model.config),
        "parameters": params,
    }
    pieces = []
    _emit_json(doc, pieces)
    return "".join(pieces)


def checkpoint_save(model: PopularityModel, path) -> None:
    text = checkpoint_document(model)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(text)
        fh.write("\n")
    os.replace(tmp, path)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise CheckpointError(message)


def checkpoint_load(path) -> PopularityModel:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointParseError(
            f"checkpoint is not valid: {e.msg}", offset=e.pos) from e
    _require(isinstance(doc, dict), "checkpoint root must be a mapping")
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {version!r}, expected {CHECKPOINT_VERSION!r}")
    for key in ("modality", "config", "parameters"):
        _require(key in doc, f"checkpoint missing field {key!r}")
    config_fields = {f.name for f in fields(ModelConfig)}
    raw_config = doc["config"]
    _require(isinstance(raw_config, dict), "config must be a mapping")
    unknown = set(raw_config) - config_fields
    _require(not unknown, f"config has unknown fields {sorted(unknown)}")
    _require(set(raw_config) == config_fields,
             f"config missing fields {sorted(config_fields - set(raw_config))}")
    try:
        config = ModelConfig(**raw_config)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"bad config: {e}") from e
    _require(doc["modality"] == config.modality,
             "modality field disagrees with config")

    model = PopularityModel.create(config)
    stored = doc["parameters"]
    _require(isinstance(stored, dict), "parameters must be a mapping")
    expected = {p.name: p for p in model.parameters()}
    _require(set(stored) == set(expected),
             f"parameter names do not match the {config.modality} architecture")
    for name, param in expected.items():
        entry = stored[name]
        _require(isinstance(entry, dict) and {"shape", "values", "trainable"} <= set(entry),
                 f"parameter {name!r} entry malformed")
        shape = tuple(entry["shape"])
        _require(shape == param.value.shape,
                 f"parameter {name!r} has shape {shape}, expected {param.value.shape}")
        values = np.array(entry["values"], dtype=np.float64).reshape(shape)
        param.value = Tensor(values)
        param.trainable = bool(entry["trainable"])
    return model
