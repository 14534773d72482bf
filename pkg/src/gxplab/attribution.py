"""Input attribution: vanilla gradients, integrated gradients along a straight
path (Riemann midpoint rule), and the exact closed form for single-layer models.

All attributions are taken on the predicted-class logit; the target class is
frozen at the prediction for the unperturbed input, including at every point
of an integration path.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .models import SingleLayerModel
from .tensor import ShapeError, Tensor


class DegeneratePathError(ValueError):
    """The closed-form path denominator <w, x-u> vanishes; integrate instead."""


@dataclass
class AttributionMap:
    """Per-input-element importance scores, same shape as the input."""

    scores: np.ndarray
    method: str                      # "VG" or "IG"
    target_class: int
    baseline: np.ndarray | None = None   # IG only
    steps: int | None = None             # IG only


def input_gradients(model, X, targets=None):
    """Gradients of each sample's target-class logit w.r.t. the input batch.

    Batched: per-sample gradients are independent, so one backward pass over
    the summed selected logits yields all of them. Returns (grads, targets).
    """
    X = np.asarray(X)
    if targets is None:
        targets = model.attribution_targets(X)
    xt = Tensor(X, requires_grad=True)
    model.attribution_score_sum(xt, targets).backward()
    return xt.grad, targets


def vanilla_gradient(model, x) -> AttributionMap:
    """Gradient of the predicted-class logit w.r.t. the input (one sample)."""
    x = np.asarray(x)
    if x.shape != tuple(model.input_shape):
        raise ShapeError(f"input shape {x.shape} does not match model {model.input_shape}")
    grads, targets = input_gradients(model, x[None])
    return AttributionMap(grads[0].copy(), "VG", int(targets[0]))


def integrated_gradients(model, x, baseline=None, steps: int = 128, chunk: int = 64) -> AttributionMap:
    """Midpoint-rule path integral of input gradients from baseline to x,
    scaled elementwise by (x - baseline). Zero baseline by default."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    u = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if u.shape != x.shape:
        raise ShapeError(f"baseline shape {u.shape} does not match input {x.shape}")
    target = int(model.attribution_targets(x[None])[0])

    alphas = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    grad_sum = np.zeros_like(x)
    for lo in range(0, steps, chunk):
        a = alphas[lo:lo + chunk]
        points = u[None] + a.reshape((-1,) + (1,) * x.ndim) * (x - u)[None]
        grads, _ = input_gradients(model, points, np.full(len(a), target))
        grad_sum += grads.sum(axis=0)
    scores = (x - u) * (grad_sum / steps)
    return AttributionMap(scores, "IG", target, baseline=u.copy(), steps=steps)


def closed_form_ig(model: SingleLayerModel, x, u) -> AttributionMap:
    """Exact IG for f(x) = H(<w,x>):

        [H(<w,x>) - H(<w,u>)] * ((x-u) .* w) / <w, x-u>

    Undefined when the path is orthogonal to w; raises DegeneratePathError so
    the caller can fall back to numeric integration.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    w = model.w.data.astype(np.float64)
    if x.shape != w.shape or u.shape != w.shape:
        raise ShapeError(f"expected vectors of shape {w.shape}, got x {x.shape}, u {u.shape}")
    denom = w @ (x - u)
    if abs(denom) < 1e-12:
        raise DegeneratePathError(
            f"path is orthogonal to w (<w, x-u> = {denom:.3e}); use integrated_gradients"
        )
    act = model.activation
    scores = (act.f(w @ x) - act.f(w @ u)) * ((x - u) * w) / denom
    return AttributionMap(scores, "IG", int(model.predict(x[None])[0]), baseline=u.copy(), steps=None)


def saliency_map(scores: np.ndarray) -> np.ndarray:
    """Reduce attribution scores to a 2-D heatmap: sum of absolute values
    across channels, then min-max normalized to [0, 1] (constant maps -> 0)."""
    s = np.abs(np.asarray(scores, dtype=np.float64))
    if s.ndim == 3:
        s = s.sum(axis=0)
    elif s.ndim != 2:
        raise ShapeError(f"saliency_map expects (C,H,W) or (H,W) scores, got {s.shape}")
    lo, hi = s.min(), s.max()
    if hi - lo < 1e-300:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


# -- export -------------------------------------------------------------------


def write_attribution(path, scores: np.ndarray) -> None:
    """Flat binary export: u32 rank, u32 extents, little-endian float64 values."""
    arr = np.asarray(scores, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_attribution(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    rank = struct.unpack_from("<I", blob, 0)[0]
    shape = struct.unpack_from(f"<{rank}I", blob, 4)
    values = np.frombuffer(blob, dtype="<f8", offset=4 + 4 * rank)
    return values.reshape(shape).astype(np.float64)


def write_attribution_csv(path, scores: np.ndarray) -> None:
    arr = np.asarray(scores, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "score"])
        for idx, val in zip(np.ndindex(arr.shape), arr.ravel()):
            writer.writerow(["x".join(map(str, idx)), repr(val)])
