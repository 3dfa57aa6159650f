"""Learnable weighted average over upstream layers.

Weights live as free logits; the simplex constraint is enforced by a softmax,
so the normalized weights always sum to one during training and export.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import FeatureMatrix
from .errors import DataError
from .upstream import LayerStack


def normalized_weights(logits) -> np.ndarray:
    """Softmax of the weight logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise DataError("weight logits contain non-finite values")
    z = np.exp(logits - np.max(logits))
    return z / z.sum()


def aggregate(stack: LayerStack, weights) -> FeatureMatrix:
    """Frame representation: the weighted sum of all layers, one weight per layer."""
    weights = np.asarray(weights, dtype=np.float64)
    n = stack.layers.shape[0]
    if weights.shape != (n,):
        raise DataError(f"expected {n} layer weights, got shape {weights.shape}")
    frames = np.tensordot(weights, stack.layers.astype(np.float64), axes=(0, 0))
    return FeatureMatrix(frames, frame_rate_hz=stack.frame_rate_hz)


def aggregate_graph(layers, logits: ad.Tensor) -> ad.Tensor:
    """Differentiable aggregation.

    `layers` is either a constant (L+1, T, D) array or a list of (T, D)
    tensors (when the upstream itself is being fine-tuned). Gradients flow
    to the logits and, in the latter case, to the layer tensors.
    """
    w = ad.softmax(logits.reshape(1, -1), axis=1)
    if isinstance(layers, np.ndarray):
        n, t, d = layers.shape
        flat = ad.Tensor(layers.reshape(n, t * d))
    else:
        t, d = layers[0].shape
        n = len(layers)
        flat = ad.concat([h.reshape(1, t * d) for h in layers], axis=0)
    return (w @ flat).reshape(t, d)


def export_weights(weights, labels=None) -> list:
    """Rows of (label, normalized-weight-to-6-decimals), layer 0 first."""
    w = np.asarray(weights, dtype=np.float64)
    if labels is None or len(labels) == 0:
        labels = [f"layer_{i}" for i in range(len(w))]
    if len(labels) != len(w):
        raise DataError(f"expected {len(w)} labels, got {len(labels)}")
    return [(str(lab), f"{val:.6f}") for lab, val in zip(labels, w)]


def write_weights_csv(path, weights, labels=None):
    rows = export_weights(weights, labels)
    lines = ["layer,weight"] + [f"{lab},{val}" for lab, val in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
