"""Evaluation metrics for attribution maps.

Concentration (Gini index on attribution magnitudes), visual stability under
prediction-preserving noise (SSIM), relative output stability (ROS), and
removal-based faithfulness (imputation curves with AOPC summaries).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import splu

from .attribution import (
    input_gradients,
    integrated_gradients,
    saliency_map,
    vanilla_gradient,
)
from .data import PerturbationSpec, sample_consistent_perturbations

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# imputation neighbor weights: edge-sharing neighbors count twice a corner
IMPUTE_DIRECT = 1.0 / 6.0
IMPUTE_DIAGONAL = 1.0 / 12.0

METHODS = ("VG", "IG")


def attribution_fn(method: str, ig_steps: int = 128):
    """Resolve a method id to a callable model, x -> AttributionMap."""
    m = method.upper()
    if m == "VG":
        return vanilla_gradient
    if m == "IG":
        return lambda model, x: integrated_gradients(model, x, steps=ig_steps)
    raise ValueError(f"unknown attribution method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# concentration
# ---------------------------------------------------------------------------


def gini(phi) -> float:
    """Gini index of the attribution magnitudes.

    With |phi| sorted ascending and 1-indexed ranks k over d entries:
        G = 1 - 2 * sum_k (|phi|_(k) / ||phi||_1) * (d - k + 0.5) / d
    0 for a uniform vector, 1 - 1/d for a one-hot vector. An all-zero input
    carries no mass to concentrate; it scores 0 with a warning.
    """
    mags = np.sort(np.abs(np.asarray(phi, dtype=np.float64).ravel()))
    d = mags.size
    if d == 0:
        raise ValueError("empty attribution vector")
    total = mags.sum()
    if total == 0.0:
        warnings.warn("all-zero attribution vector scores Gini 0", RuntimeWarning)
        return 0.0
    k = np.arange(1, d + 1, dtype=np.float64)
    return float(1.0 - 2.0 * np.sum((mags / total) * ((d - k + 0.5) / d)))


# ---------------------------------------------------------------------------
# structural similarity
# ---------------------------------------------------------------------------


def _ssim_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def ssim(a, b) -> float:
    """Mean local structural similarity between two 2-D maps.

    Gaussian-weighted 11x11 windows (sigma 1.5) over the valid interior,
    stabilizers C1 = 0.01^2 and C2 = 0.03^2 for a unit dynamic range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"expected 2-D maps, got shapes {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"maps must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    w = _ssim_window()
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = np.einsum("hwij,ij->hw", wa, w)
    mu_b = np.einsum("hwij,ij->hw", wb, w)
    e_aa = np.einsum("hwij,ij->hw", wa * wa, w)
    e_bb = np.einsum("hwij,ij->hw", wb * wb, w)
    e_ab = np.einsum("hwij,ij->hw", wa * wb, w)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _map_stack(model, method: str, X, ig_steps: int) -> np.ndarray:
    """Attribution scores for a stack of inputs, each at its own prediction.

    Per-sample gradients are independent, so the plain-gradient method runs as
    one batched backward pass; path-integral methods stay per sample. Equal
    rows produce bit-equal maps, which keeps degenerate-case metrics exact.
    """
    if method.upper() == "VG":
        grads, _ = input_gradients(model, np.asarray(X))
        return grads
    fn = attribution_fn(method, ig_steps)
    return np.stack([fn(model, xp).scores for xp in X])


def ssim_stability(model, method: str, x, spec: PerturbationSpec,
                   ig_steps: int = 128) -> tuple[float, list[float]]:
    """Mean SSIM between the saliency map at x and the maps at
    prediction-preserving noisy copies of x. Returns (mean, per-sample list).
    """
    batch = sample_consistent_perturbations(model, x, spec)
    if len(batch) == 0:
        warnings.warn("no prediction-consistent perturbations accepted", RuntimeWarning)
        return float("nan"), []
    stack = np.concatenate([np.asarray(x)[None], batch.samples])
    maps = _map_stack(model, method, stack, ig_steps)
    ref = saliency_map(maps[0])
    vals = [ssim(ref, saliency_map(m)) for m in maps[1:]]
    return float(np.mean(vals)), vals


# ---------------------------------------------------------------------------
# relative output stability
# ---------------------------------------------------------------------------


def _guard(phi: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Sign-preserving magnitude floor; zeros count as positive."""
    sign = np.where(phi >= 0.0, 1.0, -1.0)
    return sign * np.maximum(np.abs(phi), floor)


def ros(model, method: str, x, spec: PerturbationSpec, p: float = 2,
        eps_min: float = 1e-6, ig_steps: int = 128) -> float:
    """Relative output stability: the worst ratio, over prediction-consistent
    perturbations x', of the relative attribution change to the logit change:

        max_x'  || (phi(x) - phi(x')) / ~phi(x) ||_p
                ------------------------------------
                max( || z(x) - z(x') ||_p , eps_min )

    where ~phi floors magnitudes at 1e-6 without changing signs.
    """
    x = np.asarray(x)
    batch = sample_consistent_perturbations(model, x, spec)
    if len(batch) == 0:
        warnings.warn("no prediction-consistent perturbations accepted", RuntimeWarning)
        return float("nan")
    stack = np.concatenate([x[None], batch.samples])
    maps = _map_stack(model, method, stack, ig_steps)
    logits = model.logits(stack).data.astype(np.float64)
    phi = maps[0].astype(np.float64).ravel()
    denom_phi = _guard(phi)
    z = logits[0]
    worst = -np.inf
    for phi_p, zp in zip(maps[1:], logits[1:]):
        phi_p = phi_p.astype(np.float64).ravel()
        num = np.linalg.norm((phi - phi_p) / denom_phi, ord=p)
        den = max(np.linalg.norm(z - zp, ord=p), eps_min)
        worst = max(worst, num / den)
    return float(worst)


# ---------------------------------------------------------------------------
# removal-based faithfulness
# ---------------------------------------------------------------------------


def noisy_linear_impute(image, mask, sigma_imp: float = 0.01,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Replace masked pixels with the solution of a local smoothness system.

    Each masked pixel equals the weighted mean of its 8-neighborhood (edge
    neighbors 1/6, corner neighbors 1/12, absent off-image neighbors dropped
    by renormalization); masked neighbors stay unknowns, so a sparse linear
    solve fills whole regions. Gaussian noise of scale sigma_imp is added to
    the imputed values, which are then clipped to [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {image.shape}")
    mask = np.asarray(mask, dtype=bool)
    C, H, W = image.shape
    if mask.shape != (H, W):
        raise ValueError(f"mask shape {mask.shape} does not match image ({H}, {W})")
    if not mask.any():
        return image.copy()
    if mask.all():
        raise ValueError("cannot impute a fully masked image")
    if sigma_imp and rng is None:
        raise ValueError("sigma_imp > 0 requires an rng")

    idx = -np.ones((H, W), dtype=np.int64)
    ys, xs = np.nonzero(mask)
    n = ys.size
    idx[ys, xs] = np.arange(n)

    offsets = [(-1, 0, IMPUTE_DIRECT), (1, 0, IMPUTE_DIRECT),
               (0, -1, IMPUTE_DIRECT), (0, 1, IMPUTE_DIRECT),
               (-1, -1, IMPUTE_DIAGONAL), (-1, 1, IMPUTE_DIAGONAL),
               (1, -1, IMPUTE_DIAGONAL), (1, 1, IMPUTE_DIAGONAL)]
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    rhs = np.zeros((n, C))
    for r in range(n):
        i, j = ys[r], xs[r]
        for di, dj, wgt in offsets:
            ni, nj = i + di, j + dj
            if not (0 <= ni < H and 0 <= nj < W):
                continue
            diag[r] += wgt
            if mask[ni, nj]:
                rows.append(r)
                cols.append(idx[ni, nj])
                vals.append(-wgt)
            else:
                rhs[r] += wgt * image[:, ni, nj]
    rows.extend(range(n))
    cols.extend(range(n))
    vals.extend(diag)
    A = csr_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
    try:
        solved = splu(A).solve(rhs)
    except RuntimeError:  # exactly singular factorization
        solved = np.full((n, C), np.nan)
    solved = np.asarray(solved, dtype=np.float64).reshape(n, C)
    if not np.all(np.isfinite(solved)):
        logger.warning("imputation solve produced non-finite values; "
                       "falling back to unmasked neighbor means")
        solved = _impute_fallback(image, mask, ys, xs, offsets)
    if sigma_imp:
        solved = solved + rng.normal(0.0, sigma_imp, size=solved.shape)
    out = image.copy()
    out[:, ys, xs] = np.clip(solved.T, 0.0, 1.0)
    return out


def _impute_fallback(image, mask, ys, xs, offsets) -> np.ndarray:
    C, H, W = image.shape
    channel_means = image[:, ~mask].mean(axis=1)
    solved = np.empty((ys.size, C))
    for r in range(ys.size):
        i, j = ys[r], xs[r]
        acc = np.zeros(C)
        wsum = 0.0
        for di, dj, wgt in offsets:
            ni, nj = i + di, j + dj
            if 0 <= ni < H and 0 <= nj < W and not mask[ni, nj]:
                acc += wgt * image[:, ni, nj]
                wsum += wgt
        solved[r] = acc / wsum if wsum > 0 else channel_means
    return solved


@dataclass
class RemovalCurve:
    fractions: list          # pixel fractions removed, one per level
    accuracies: list         # cohort accuracy at each level
    aopc: float
    strategy: str

    def to_dict(self) -> dict:
        return {"fractions": self.fractions, "accuracies": self.accuracies,
                "aopc": self.aopc, "strategy": self.strategy}

    def to_csv(self) -> str:
        lines = ["level,accuracy"]
        lines += [f"{f:.4f},{a:.6f}" for f, a in zip(self.fractions, self.accuracies)]
        return "\n".join(lines) + "\n"


def road_curve(model, attributions, dataset, k_step: float = 5.0, n_levels: int = 10,
               strategy: str = "MoRF", sigma_imp: float = 0.01, seed: int = 0,
               batch_size: int = 128) -> RemovalCurve:
    """Accuracy under progressive pixel removal with noisy linear imputation.

    Levels remove 0%, k_step%, ..., n_levels*k_step% of pixels per image,
    ranked by channel-summed attribution magnitude (descending for MoRF,
    ascending for LeRF; ties broken by raster order). The summary is
        AOPC = (1 / (L+1)) * sum_k [ acc(0) - acc(k) ].
    """
    if strategy not in ("MoRF", "LeRF"):
        raise ValueError(f"unknown removal strategy {strategy!r}")
    images = dataset.images
    labels = dataset.labels
    N = len(dataset)
    if len(attributions) != N:
        raise ValueError(f"{len(attributions)} attribution maps for {N} images")
    C, H, W = images.shape[1:]
    pixels = H * W

    rankings = np.empty((N, pixels), dtype=np.int64)
    for i, amap in enumerate(attributions):
        scores = np.abs(np.asarray(amap.scores if hasattr(amap, "scores") else amap))
        per_pixel = scores.reshape(C, H, W).sum(axis=0).ravel()
        order = np.argsort(-per_pixel, kind="stable")
        rankings[i] = order if strategy == "MoRF" else order[::-1]

    rng = np.random.default_rng(seed)
    fractions, accuracies = [], []
    for level in range(n_levels + 1):
        frac = level * k_step / 100.0
        n_mask = int(np.floor(frac * pixels + 0.5))
        if n_mask == 0:
            batch = images
        else:
            batch = np.empty_like(images)
            for i in range(N):
                mask = np.zeros(pixels, dtype=bool)
                mask[rankings[i, :n_mask]] = True
                batch[i] = noisy_linear_impute(images[i], mask.reshape(H, W),
                                               sigma_imp, rng)
        correct = 0
        for lo in range(0, N, batch_size):
            correct += int((model.predict(batch[lo:lo + batch_size]) == labels[lo:lo + batch_size]).sum())
        fractions.append(frac)
        accuracies.append(correct / N)
    acc0 = accuracies[0]
    aopc = float(np.mean([acc0 - a for a in accuracies]))
    return RemovalCurve(fractions, accuracies, aopc, strategy)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    metric: str
    values: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        finite = [v for v in self.values if np.isfinite(v)]
        return float(np.mean(finite)) if finite else float("nan")

    @property
    def std(self) -> float:
        finite = [v for v in self.values if np.isfinite(v)]
        return float(np.std(finite)) if finite else float("nan")

    def to_dict(self) -> dict:
        return {"metric": self.metric, "mean": self.mean, "std": self.std,
                "count": len(self.values), "values": [float(v) for v in self.values],
                "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def select_cohort(models, dataset, size: int, batch_size: int = 256) -> np.ndarray:
    """Indices of the first `size` samples every model classifies correctly.

    Deterministic in dataset order so compared runs share the exact cohort.
    """
    ok = np.ones(len(dataset), dtype=bool)
    for model in models:
        for lo in range(0, len(dataset), batch_size):
            xb = dataset.images[lo:lo + batch_size]
            yb = dataset.labels[lo:lo + batch_size]
            ok[lo:lo + batch_size] &= model.predict(xb) == yb
    idx = np.nonzero(ok)[0]
    if idx.size < size:
        warnings.warn(f"cohort short: {idx.size} of {size} requested", RuntimeWarning)
    return idx[:size]
