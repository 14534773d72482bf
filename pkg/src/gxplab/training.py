"""Inner maximization (projected gradient ascent), optimizers, and training.

The attack maximizes cross-entropy over an L-inf ball intersected with the
[0,1] pixel box: the iterate is clipped to the box *before* the gradient is
taken (so the gradient respects the box's subgradient mask), the perturbation
is projected back onto the ball after each signed step, and the returned
example is clipped once more.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, cross_entropy_with_logits


@dataclass
class PGDConfig:
    eps: float = 0.1
    step_size: float | None = None   # None resolves to eps / 10
    steps: int = 10
    random_start: bool = True

    def resolved_step(self) -> float:
        return self.eps / 10.0 if self.step_size is None else self.step_size


@dataclass
class TrainConfig:
    regime: str = "natural"          # natural | adversarial | adversarial+smooth
    optimizer: str = "adam"          # adam | sgd
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 5
    batch_size: int = 128
    seed: int = 0
    pgd: PGDConfig | None = None     # training-time attack (adversarial regimes)
    eval_pgd: PGDConfig | None = None
    smoothing: object | None = None  # SmoothingConfig, consumed by model builders
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    eval_subset: int = 512           # per-epoch eval uses this many samples

    @property
    def adversarial(self) -> bool:
        if self.regime not in ("natural", "adversarial", "adversarial+smooth"):
            raise ValueError(f"unknown regime {self.regime!r}")
        return self.regime != "natural"


REGIMES = ("natural", "adversarial", "adversarial+smooth")


def pgd_attack(model, x, y, cfg: PGDConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Signed-gradient ascent on cross-entropy within {||delta||_inf <= eps}.

    Model parameters are frozen for the duration (restored on exit) so the
    backward passes only populate the perturbation gradient.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if cfg.eps == 0.0 or cfg.steps == 0:
        return np.clip(x, 0.0, 1.0)
    alpha = cfg.resolved_step()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        delta = rng.uniform(-cfg.eps, cfg.eps, size=x.shape).astype(x.dtype)
    else:
        delta = np.zeros_like(x)

    params = model.parameters()
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        for _ in range(cfg.steps):
            d = Tensor(delta, requires_grad=True)
            xt = (Tensor(x) + d).clip01()
            loss = cross_entropy_with_logits(model.logits(xt), y)
            loss.backward()
            g = d.grad
            if g is None or not np.all(np.isfinite(g)):
                raise RuntimeError("non-finite gradient during the attack")
            delta = np.clip(delta + alpha * np.sign(g), -cfg.eps, cfg.eps).astype(x.dtype)
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
    return np.clip(x + delta, 0.0, 1.0)


class SGD:
    """Momentum SGD; weight decay enters as an L2 term added to the gradient."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.momentum * self._velocity[k] + g
            self._velocity[k] = v
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._t = 0

    def step(self) -> None:
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._m[k] = self.beta1 * self._m[k] + (1.0 - self.beta1) * g
            self._v[k] = self.beta2 * self._v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self._m[k] / c1) / (np.sqrt(self._v[k] / c2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: dict[str, Tensor]):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    diverged: bool = False
    diverged_epoch: int | None = None

    def to_csv(self) -> str:
        lines = ["epoch,loss,nat_acc,rob_acc,wall_seconds"]
        for e in self.entries:
            lines.append(
                f"{e['epoch']},{e['loss']:.6f},{e['nat_acc']:.4f},"
                f"{e['rob_acc']:.4f},{e['wall_seconds']:.2f}"
            )
        return "\n".join(lines) + "\n"


def evaluate(model, dataset, attack: PGDConfig | None = None,
             batch_size: int = 256, seed: int = 0) -> tuple[float, float]:
    """(natural accuracy, robust accuracy); without an attack the second
    equals the first."""
    rng = np.random.default_rng(seed)
    nat = rob = 0
    for xb, yb in dataset.batches(batch_size):
        nat += int((model.predict(xb) == yb).sum())
        if attack is not None:
            xa = pgd_attack(model, xb, yb, attack, rng)
            rob += int((model.predict(xa) == yb).sum())
    n = len(dataset)
    nat_acc = nat / n
    return nat_acc, (rob / n if attack is not None else nat_acc)


def _params_finite(params: dict[str, Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params.values())


def train(model, dataset, cfg: TrainConfig) -> tuple[object, TrainLog]:
    """Run the configured regime. The log carries one entry per completed
    epoch; if a loss or parameter goes non-finite, the epoch's starting
    parameters are restored and training stops with the diverged flag set.
    """
    if cfg.adversarial and cfg.pgd is None:
        raise ValueError(f"regime {cfg.regime!r} needs a pgd config")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = make_optimizer(cfg, params)
    log = TrainLog()
    eval_set = dataset.subset(np.arange(min(cfg.eval_subset, len(dataset))))
    eval_attack = cfg.eval_pgd if cfg.eval_pgd is not None else (cfg.pgd if cfg.adversarial else None)

    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in tuple(cfg.lr_decay_epochs):
            lr *= cfg.lr_decay_factor
        opt.lr = lr
        snapshot = {k: p.data.copy() for k, p in params.items()}
        t0 = time.perf_counter()
        losses = []
        healthy = True
        for xb, yb in dataset.batches(cfg.batch_size, rng):
            if cfg.adversarial:
                xb = pgd_attack(model, xb, yb, cfg.pgd, rng)
            model.zero_grad()
            loss = cross_entropy_with_logits(model.logits(Tensor(xb)), yb)
            if not np.isfinite(loss.data):
                healthy = False
                break
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        if not healthy or not _params_finite(params):
            for k, p in params.items():
                p.data = snapshot[k]
            log.diverged = True
            log.diverged_epoch = epoch
            break
        nat_acc, rob_acc = evaluate(model, eval_set, eval_attack, seed=cfg.seed)
        log.entries.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "nat_acc": nat_acc,
            "rob_acc": rob_acc,
            "wall_seconds": time.perf_counter() - t0,
        })
    return model, log
