"""Curvature bounds on attribution drift for single-layer models, and the
fuzzing harness that verifies them empirically.

For f(x) = H(<w,x>):
    VG:  ||phi(x') - phi(x)||  <=  sup|H''| * ||w||^2 * ||x' - x||
    IG:  ||phi(x') - phi(x)||  <=  (sup|H'|*||w|| + 0.5*sup|H''|*||w||^2*||x-u||) * ||x'-x||

Both are theorems under their hypotheses: a single observed violation is a
build-stopping bug, so the fuzzers assert with a strict comparison.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .models import ACTIVATIONS, SingleLayerModel

_GRID_LO, _GRID_HI, _GRID_STEP = -50.0, 50.0, 1e-4


@dataclass(frozen=True)
class ActivationSuprema:
    sup_d1: float
    sup_d2: float
    source: str  # "analytic" or "numeric"


@dataclass
class BoundReport:
    method: str      # "VG" or "IG"
    lhs: float       # observed ||phi(x') - phi(x)||_2
    rhs: float       # analytic bound
    slack: float     # rhs - lhs
    tightness: float # lhs / rhs, 0 when rhs == 0
    meta: dict = field(default_factory=dict)


def _tightness(lhs: float, rhs: float) -> float:
    return lhs / rhs if rhs > 0 else 0.0


@lru_cache(maxsize=None)
def activation_suprema(activation_id: str) -> ActivationSuprema:
    """(sup|H'|, sup|H''|) over the real line: analytic where known, otherwise
    a dense grid search over z in [-50, 50] at step 1e-4 (flagged numeric)."""
    if activation_id not in ACTIVATIONS:
        raise ValueError(
            f"activation {activation_id!r} has no registered derivative suprema; "
            "register it (or supply a domain restriction) before computing bounds"
        )
    act = ACTIVATIONS[activation_id]
    if act.sup_d1 is not None and act.sup_d2 is not None:
        return ActivationSuprema(act.sup_d1, act.sup_d2, "analytic")
    n = int(round((_GRID_HI - _GRID_LO) / _GRID_STEP)) + 1
    z = np.linspace(_GRID_LO, _GRID_HI, n)
    return ActivationSuprema(
        float(np.abs(act.d1(z)).max()), float(np.abs(act.d2(z)).max()), "numeric"
    )


def _vg_phi(act, w, x):
    return act.d1(w @ x) * w


def _cf_ig_phi(act, w, x, u):
    denom = w @ (x - u)
    if abs(denom) < 1e-12:
        from .attribution import DegeneratePathError

        raise DegeneratePathError(f"<w, x-u> = {denom:.3e}")
    return (act.f(w @ x) - act.f(w @ u)) * ((x - u) * w) / denom


def vg_bound(model: SingleLayerModel, x, x_prime) -> BoundReport:
    """One bound check from exact VG attributions at x and x'."""
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    w = model.w.data.astype(np.float64)
    act = model.activation
    sup = activation_suprema(act.name)
    lhs = float(np.linalg.norm(_vg_phi(act, w, xp) - _vg_phi(act, w, x)))
    rhs = float(sup.sup_d2 * np.linalg.norm(w) ** 2 * np.linalg.norm(xp - x))
    return BoundReport("VG", lhs, rhs, rhs - lhs, _tightness(lhs, rhs),
                       meta={"activation": act.name, "x": x, "x_prime": xp})


def ig_bound(model: SingleLayerModel, x, x_prime, u) -> BoundReport:
    """One bound check from closed-form IG attributions at x and x' (same
    baseline). Raises DegeneratePathError when either path is orthogonal to w."""
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    w = model.w.data.astype(np.float64)
    act = model.activation
    sup = activation_suprema(act.name)
    lhs = float(np.linalg.norm(_cf_ig_phi(act, w, xp, u) - _cf_ig_phi(act, w, x, u)))
    wn = np.linalg.norm(w)
    rhs = float(
        (sup.sup_d1 * wn + 0.5 * sup.sup_d2 * wn**2 * np.linalg.norm(x - u))
        * np.linalg.norm(xp - x)
    )
    return BoundReport("IG", lhs, rhs, rhs - lhs, _tightness(lhs, rhs),
                       meta={"activation": act.name, "x": x, "x_prime": xp, "u": u})


@dataclass
class FuzzSummary:
    activation: str
    method: str
    trials: int
    violations: int
    skipped: int
    max_tightness: float
    # per-trial columns: d, ||w||, ||x'-x||, lhs, rhs, tightness
    table: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["activation", "d", "w_norm", "dx_norm", "lhs", "rhs", "tightness"])
            for row in self.table:
                writer.writerow([self.activation, int(row[0])] + [repr(float(v)) for v in row[1:]])


def fuzz_bounds(
    activation_id: str,
    method: str,
    n_trials: int,
    seed: int = 0,
    dims: tuple[int, ...] = (2, 8, 64),
) -> FuzzSummary:
    """Randomized bound verification, vectorized over trials.

    Sampling: w is uniform on the unit sphere scaled by a log-uniform norm in
    [0.1, 10]; x is standard normal; x' = x + r * (unit direction) with r
    log-uniform in [1e-4, 1]; the IG baseline u is standard normal. Trials
    whose closed-form path is degenerate are skipped with a count (IG only).
    """
    if method not in ("VG", "IG"):
        raise ValueError(f"method must be VG or IG, got {method!r}")
    act = ACTIVATIONS[activation_id]  # KeyError is a caller bug; suprema check below
    sup = activation_suprema(activation_id)
    rng = np.random.default_rng(seed)

    per_dim = [n_trials // len(dims)] * len(dims)
    per_dim[0] += n_trials - sum(per_dim)

    blocks = []
    skipped = 0
    for d, n in zip(dims, per_dim):
        g = rng.standard_normal((n, d))
        w = g / np.linalg.norm(g, axis=1, keepdims=True)
        w_norm = np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=n))
        w *= w_norm[:, None]

        x = rng.standard_normal((n, d))
        direction = rng.standard_normal((n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        r = np.exp(rng.uniform(np.log(1e-4), np.log(1.0), size=n))
        xp = x + r[:, None] * direction

        s = np.einsum("ij,ij->i", w, x)
        sp = np.einsum("ij,ij->i", w, xp)

        if method == "VG":
            lhs = np.abs(act.d1(sp) - act.d1(s)) * w_norm
            rhs = sup.sup_d2 * w_norm**2 * r
        else:
            u = rng.standard_normal((n, d))
            s0 = np.einsum("ij,ij->i", w, u)
            denom = s - s0
            denom_p = sp - s0
            ok = (np.abs(denom) >= 1e-12) & (np.abs(denom_p) >= 1e-12)
            skipped += int(n - ok.sum())
            w, x, xp, u = w[ok], x[ok], xp[ok], u[ok]
            w_norm, r = w_norm[ok], r[ok]
            s, sp, s0, denom, denom_p = s[ok], sp[ok], s0[ok], denom[ok], denom_p[ok]
            phi = (act.f(s) - act.f(s0))[:, None] * ((x - u) * w) / denom[:, None]
            phi_p = (act.f(sp) - act.f(s0))[:, None] * ((xp - u) * w) / denom_p[:, None]
            lhs = np.linalg.norm(phi - phi_p, axis=1)
            xu = np.linalg.norm(x - u, axis=1)
            rhs = (sup.sup_d1 * w_norm + 0.5 * sup.sup_d2 * w_norm**2 * xu) * r

        with np.errstate(divide="ignore", invalid="ignore"):
            tight = np.where(rhs > 0, lhs / np.maximum(rhs, 1e-300), 0.0)
        blocks.append(np.column_stack([np.full(lhs.size, d), w_norm, r, lhs, rhs, tight]))

    table = np.concatenate(blocks, axis=0)
    violations = int((table[:, 3] > table[:, 4]).sum())
    max_tight = float(table[:, 5].max()) if table.size else 0.0
    return FuzzSummary(activation_id, method, int(table.shape[0]), violations, skipped, max_tight, table)
