"""Heatmaps over conv activations, driven by gradients of the logit.

The backbone that produced the pooled frame features ends in global
average pooling, so the gradient of the logit with respect to any conv
cell equals the pooled-feature gradient divided by the number of cells.
That collapse lets channel weights be computed from the model alone,
while the spatially resolved activations are read from files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .model import PopularityModel, model_predict
from .tensor import GradTape, Tensor

NORMALIZE_MODES = ("frame", "sequence")


@dataclass
class FrameHeatmap:
    """One frame's activation map at three stages.

    raw is the rectified weighted sum over channels; normalized maps it
    into [0,1]; scale is this frame's attention relative to the most
    attended frame. What a viewer sees is normalized * scale.
    """

    raw: Tensor
    normalized: Tensor
    scale: float

    @property
    def displayed(self) -> Tensor:
        return Tensor._wrap(self.normalized.data * self.scale)


@dataclass
class SequenceVisualization:
    heatmaps: list
    alpha: Tensor


@dataclass
class TextAttentionReport:
    tokens: list
    beta: Tensor
    relative: Tensor


def feature_gradients(model: PopularityModel, frames: Sequence[Tensor],
                      words: Optional[Sequence[Tensor]] = None):
    """∂logit/∂frame for every frame, in one backward pass.

    Returns (gradients, output): one gradient Tensor per frame plus the
    ModelOutput of the forward pass that produced them.
    """
    if model.video is None:
        raise ValueError(f"{model.modality} model has no frame features to attribute")
    with GradTape() as tape:
        for f in frames:
            tape.watch(f)
        out = model_predict(model, frames=frames, words=words)
        tape.backward(out.logit_node)
    return [tape.grad(f) for f in frames], out


def pooled_feature_gradient(model: PopularityModel, frames: Sequence[Tensor],
                            words: Optional[Sequence[Tensor]],
                            frame_index: int) -> Tensor:
    """∂logit/∂(pooled features of one frame); flows through everything
    downstream of that frame, including the attention weights."""
    if not 0 <= frame_index < len(frames):
        raise ValueError(
            f"frame_index {frame_index} out of range for {len(frames)} frames")
    grads, _ = feature_gradients(model, frames, words)
    return grads[frame_index]


def channel_weights(feature_grad: Tensor, spatial_size: int) -> Tensor:
    """Per-channel weights from a pooled-feature gradient.

    The pooled feature is the spatial mean over spatial_size² conv cells,
    so the gradient at every cell is feature_grad/size²; averaging those
    equal cells gives back exactly feature_grad/size². The division here
    IS the full averaging computation, not an approximation of it.
    """
    if spatial_size < 1:
        raise ValueError(f"spatial size must be >= 1, got {spatial_size}")
    if feature_grad.rank != 1:
        raise ShapeError(f"feature gradient must be rank-1, got {feature_grad.shape}")
    return Tensor._wrap(feature_grad.data / float(spatial_size * spatial_size))


def class_activation_map(gamma: Tensor, activations: Tensor) -> Tensor:
    """Rectified channel-weighted sum of conv activations -> [K x K]."""
    if activations.rank != 3:
        raise ShapeError(
            f"activations must be [K x K x F], got shape {activations.shape}")
    if gamma.rank != 1 or activations.shape[2] != gamma.shape[0]:
        raise ShapeError(
            f"channel mismatch: {gamma.shape} weights vs activations {activations.shape}")
    return Tensor._wrap(np.maximum(activations.data @ gamma.data, 0.0))


def _normalize_map(raw: np.ndarray, denom: float) -> np.ndarray:
    if denom > 0.0:
        return raw / denom
    return np.zeros_like(raw)


def scale_heatmaps(raw_maps: Sequence[Tensor], alpha: Tensor,
                   normalize: str = "frame") -> SequenceVisualization:
    """Normalize raw maps into [0,1] and scale frames by attention.

    normalize="frame" divides each map by its own max (an all-zero map
    stays zero); "sequence" divides every map by the max over all
    frames. The frame with the highest attention gets scale exactly 1.0
    (lowest index on ties); any other frame whose ratio rounds to 1.0 is
    nudged below it so exactly one frame carries full intensity.
    """
    if len(raw_maps) != len(alpha):
        raise ValueError(
            f"{len(raw_maps)} heatmaps vs {len(alpha)} attention weights")
    if normalize not in NORMALIZE_MODES:
        raise ValueError(f"normalize must be one of {NORMALIZE_MODES}")
    for m in raw_maps:
        if m.rank != 2:
            raise ShapeError(f"raw heatmap must be rank-2, got {m.shape}")
        if np.any(m.data < 0.0):
            raise ValueError("raw heatmaps are rectified and cannot be negative")
    a = alpha.data
    top = int(np.argmax(a))
    peak = a[top]
    if normalize == "sequence":
        global_max = max((float(m.data.max()) for m in raw_maps), default=0.0)
    heatmaps = []
    for i, m in enumerate(raw_maps):
        denom = global_max if normalize == "sequence" else float(m.data.max())
        normalized = _normalize_map(m.data, denom)
        if i == top:
            scale = 1.0
        else:
            scale = float(a[i] / peak)
            if scale >= 1.0:  # exact attention tie
                scale = math.nextafter(1.0, 0.0)
        heatmaps.append(FrameHeatmap(raw=m, normalized=Tensor._wrap(normalized),
                                     scale=scale))
    return SequenceVisualization(heatmaps=heatmaps, alpha=alpha)


def text_attention_report(beta: Tensor, tokens: Sequence[str]) -> TextAttentionReport:
    """Pair each token with its attention weight and relative importance."""
    if beta.rank != 1 or len(tokens) != len(beta):
        raise ValueError(
            f"{len(tokens)} tokens vs attention of shape {beta.shape}")
    peak = float(beta.data.max())
    relative = Tensor._wrap(beta.data / peak)
    return TextAttentionReport(tokens=list(tokens), beta=beta, relative=relative)


def visualize_sequence(model: PopularityModel, frames: Sequence[Tensor],
                       conv_activations: Sequence[Tensor],
                       words: Optional[Sequence[Tensor]] = None,
                       tokens: Optional[Sequence[str]] = None,
                       normalize: str = "frame"):
    """Full pipeline for one video: heatmaps plus optional text report.

    Returns (SequenceVisualization, TextAttentionReport or None, ModelOutput).
    """
    if len(conv_activations) != len(frames):
        raise ValueError(
            f"{len(conv_activations)} activation tensors vs {len(frames)} frames")
    grads, out = feature_gradients(model, frames, words)
    raw_maps = []
    for grad, acts in zip(grads, conv_activations):
        gamma = channel_weights(grad, acts.shape[0])
        raw_maps.append(class_activation_map(gamma, acts))
    viz = scale_heatmaps(raw_maps, out.alpha, normalize=normalize)
    report = None
    if out.beta is not None:
        if tokens is None:
            raise ValueError("token strings required for the text report")
        report = text_attention_report(out.beta, tokens)
    return viz, report, out
