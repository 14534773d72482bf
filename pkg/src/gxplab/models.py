"""Model definitions: single-layer analytic model, a two-conv-block CNN for
28x28 grayscale inputs, and a small 3-stage residual CNN, all with named
insertion points where a smoothing block can be placed.

The layered models expose:
    logits(x)      raw class scores, length class_count
    score(x)       the predicted-class logit (max logit, ties to lowest index)
    predict(x)     argmax labels
The single-layer model additionally carries its analytic activation so the
closed-form attribution and curvature bounds can be evaluated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .filters import apply_filter, sigma_for_kernel
from .tensor import ShapeError, Tensor, conv1x1, conv2d, maxpool2x2

ARCHITECTURES = ("fmnist_cnn", "small_resnet", "single_layer")


# ---------------------------------------------------------------------------
# activations with analytic derivatives (for the single-layer model)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Activation:
    """Scalar activation H with first/second derivatives and, where known in
    closed form, the suprema of |H'| and |H''| over the real line (None means
    a numeric grid search is required)."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]
    apply: Callable[[Tensor], Tensor]
    sup_d1: float | None
    sup_d2: float | None


def _sigmoid_d2(z):
    s = expit(z)
    return s * (1 - s) * (1 - 2 * s)


def _tanh_d2(z):
    t = np.tanh(z)
    return -2 * t * (1 - t * t)


ACTIVATIONS: dict[str, Activation] = {
    "identity": Activation(
        "identity",
        f=lambda z: np.asarray(z, dtype=np.result_type(z, np.float32)),
        d1=lambda z: np.ones_like(np.asarray(z, dtype=float)),
        d2=lambda z: np.zeros_like(np.asarray(z, dtype=float)),
        apply=lambda t: t,
        sup_d1=1.0,
        sup_d2=0.0,
    ),
    "softplus": Activation(
        "softplus",
        f=lambda z: np.logaddexp(0, z),
        d1=expit,
        d2=lambda z: expit(z) * (1 - expit(z)),
        apply=Tensor.softplus,
        sup_d1=1.0,
        sup_d2=0.25,
    ),
    "sigmoid": Activation(
        "sigmoid", f=expit, d1=lambda z: expit(z) * (1 - expit(z)), d2=_sigmoid_d2,
        apply=Tensor.sigmoid, sup_d1=None, sup_d2=None,
    ),
    "tanh": Activation(
        "tanh", f=np.tanh, d1=lambda z: 1 - np.tanh(z) ** 2, d2=_tanh_d2,
        apply=Tensor.tanh, sup_d1=None, sup_d2=None,
    ),
}


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def params(self) -> dict[str, Tensor]:
        return {}

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Conv(Layer):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, *, rng, dtype):
        fan_in = in_ch * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            (rng.standard_normal((out_ch, in_ch, kernel_size, kernel_size)) * std).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        y = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return y + self.bias.reshape(1, -1, 1, 1)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class Dense(Layer):
    def __init__(self, in_features, out_features, *, rng, dtype):
        std = np.sqrt(2.0 / in_features)
        self.weight = Tensor(
            (rng.standard_normal((in_features, out_features)) * std).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return x @ self.weight + self.bias

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class ReLU(Layer):
    def forward(self, x):
        return x.relu()


class Softplus(Layer):
    def forward(self, x):
        return x.softplus()


class MaxPool(Layer):
    def forward(self, x):
        return maxpool2x2(x)


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.data.shape[0], -1)


class GlobalAvgPool(Layer):
    def forward(self, x):
        return x.mean(axis=(2, 3))


@dataclass
class SmoothingConfig:
    """Where and how to smooth: filter kind, placement (insertion point name),
    kernel size, and gaussian sigma (None -> kernel-size rule)."""

    kind: str = "gaussian"
    placement: str | None = None  # None -> the architecture's first point
    kernel_size: int = 3
    sigma: float | None = None


class SmoothBlock(Layer):
    """Residual smoothing unit: A + Conv1x1(filter(A)).

    The spatial filter is fixed (non-learned) and applied independently per
    channel; the 1x1 channel mix is learned and initialized to zeros so the
    block starts as an exact identity.
    """

    def __init__(self, channels, kind="gaussian", kernel_size=3, sigma=None, *, dtype=np.float32):
        if kind not in ("gaussian", "mean", "median"):
            raise ValueError(f"unknown filter kind {kind!r}")
        self.channels = channels
        self.kind = kind
        self.kernel_size = kernel_size
        self.sigma = sigma_for_kernel(kernel_size) if (sigma is None and kind == "gaussian") else sigma
        self.mix = Tensor(np.zeros((channels, channels), dtype=dtype), requires_grad=True)

    def forward(self, A):
        if A.data.shape[1] != self.channels:
            raise ShapeError(
                f"smooth block built for {self.channels} channels, got {A.data.shape[1]}"
            )
        smoothed = apply_filter(A, self.kind, self.kernel_size, self.sigma)
        return A + conv1x1(smoothed, self.mix)

    def params(self):
        return {"mix": self.mix}


class ResidualBlock(Layer):
    """conv3x3 -> relu -> conv3x3 plus a skip (1x1 projection when shapes change)."""

    def __init__(self, in_ch, out_ch, stride, *, rng, dtype):
        self.conv1 = Conv(in_ch, out_ch, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.conv2 = Conv(out_ch, out_ch, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv(in_ch, out_ch, 1, stride=stride, padding=0, rng=rng, dtype=dtype)

    def forward(self, x):
        h = self.conv2(self.conv1(x).relu())
        skip = self.proj(x) if self.proj is not None else x
        return (h + skip).relu()

    def params(self):
        out = {}
        for prefix, layer in (("conv1", self.conv1), ("conv2", self.conv2), ("proj", self.proj)):
            if layer is not None:
                for k, v in layer.params().items():
                    out[f"{prefix}.{k}"] = v
        return out


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class Model:
    """Ordered layer graph with named smoothing insertion points."""

    def __init__(self, architecture_id, input_shape, class_count, layers, insertion_points):
        self.architecture_id = architecture_id
        self.input_shape = tuple(input_shape)
        self.class_count = class_count
        self._layers: list[tuple[str, Layer]] = list(layers)
        # point name -> (index after which to insert, channel count there)
        self._points: dict[str, tuple[int, int]] = dict(insertion_points)
        self.smoothing: SmoothingConfig | None = None

    @property
    def insertion_points(self) -> list[str]:
        return list(self._points)

    def insert_smoothing(self, cfg: SmoothingConfig) -> None:
        if self.smoothing is not None:
            raise ValueError("a smoothing block is already inserted")
        placement = cfg.placement or (self.insertion_points[0] if self._points else None)
        if placement not in self._points:
            raise ValueError(
                f"unknown insertion point {placement!r}; available: {self.insertion_points}"
            )
        idx, channels = self._points[placement]
        dtype = next(iter(self.parameters().values())).data.dtype
        block = SmoothBlock(channels, cfg.kind, cfg.kernel_size, cfg.sigma, dtype=dtype)
        self._layers.insert(idx + 1, ("smooth", block))
        # shift any points that sit at or after the inserted slot
        self._points = {
            name: (i + 1 if i > idx else i, ch) for name, (i, ch) in self._points.items()
        }
        self.smoothing = SmoothingConfig(cfg.kind, placement, cfg.kernel_size, cfg.sigma)

    # -- inference ----------------------------------------------------------

    def logits(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        if t.data.shape[1:] != self.input_shape:
            raise ShapeError(
                f"{self.architecture_id}: expected input batch of shape "
                f"(B, {', '.join(map(str, self.input_shape))}), got {t.data.shape}"
            )
        for _, layer in self._layers:
            t = layer(t)
        return t

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(Tensor(np.asarray(x))).data, axis=1)

    def score(self, x) -> np.ndarray:
        """Predicted-class logit per sample (the max logit)."""
        z = self.logits(Tensor(np.asarray(x))).data
        return z.max(axis=1)

    def attribution_targets(self, x) -> np.ndarray:
        return self.predict(x)

    def attribution_score_sum(self, xt: Tensor, targets: np.ndarray) -> Tensor:
        """Sum over the batch of the logit at each sample's target class.

        Per-sample gradients stay independent, so one backward pass yields
        every input gradient in the batch.
        """
        z = self.logits(xt)
        onehot = np.zeros((len(targets), self.class_count), dtype=z.data.dtype)
        onehot[np.arange(len(targets)), targets] = 1.0
        return (z * Tensor(onehot)).sum()

    # -- parameter registry ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self._layers:
            for k, v in layer.params().items():
                out[f"{name}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = params.keys() - state.keys()
        unexpected = state.keys() - params.keys()
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.data.shape}, got {arr.shape}")
            p.data = arr.copy()

    def to_dtype(self, dtype) -> "Model":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


class SingleLayerModel:
    """f(x) = H(<w, x>): the analytically tractable model used for the exact
    attribution and stability results. Doubles as a binary classifier with
    logits [0, <w,x>] (H is monotone for every registered activation, so the
    argmax agrees with thresholding the score)."""

    architecture_id = "single_layer"
    class_count = 2

    def __init__(self, w: np.ndarray, activation: str = "softplus"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {list(ACTIVATIONS)}")
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1:
            raise ShapeError(f"single_layer: w must be 1-D, got shape {w.shape}")
        self.w = Tensor(w.copy(), requires_grad=True)
        self.activation = ACTIVATIONS[activation]
        self.input_shape = (w.size,)
        self.smoothing = None

    @property
    def insertion_points(self) -> list[str]:
        return []

    def raw(self, x) -> np.ndarray:
        return np.asarray(x) @ self.w.data

    def f(self, x) -> np.ndarray:
        """The analytic score H(<w,x>) for a single input or a batch."""
        return self.activation.f(self.raw(x))

    def score(self, x) -> np.ndarray:
        return self.f(x)

    def score_tensor(self, xt: Tensor) -> Tensor:
        s = xt @ self.w.reshape(-1, 1)
        return self.activation.apply(s)

    def logits(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        if t.data.ndim != 2 or t.data.shape[1] != self.input_shape[0]:
            raise ShapeError(
                f"single_layer: expected input batch (B, {self.input_shape[0]}), got {t.data.shape}"
            )
        s = t @ self.w.reshape(-1, 1)
        pick = Tensor(np.array([[0.0, 1.0]], dtype=s.data.dtype))
        return s @ pick

    def predict(self, x) -> np.ndarray:
        return (self.raw(x) > 0).astype(np.int64)

    def attribution_targets(self, x) -> np.ndarray:
        return self.predict(x)

    def attribution_score_sum(self, xt: Tensor, targets: np.ndarray) -> Tensor:
        return self.score_tensor(xt).sum()

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w}

    def zero_grad(self) -> None:
        self.w.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"w": self.w.data.copy()}

    def load_state_dict(self, state) -> None:
        arr = np.asarray(state["w"])
        if arr.shape != self.w.data.shape:
            raise ShapeError(f"parameter w: expected shape {self.w.data.shape}, got {arr.shape}")
        self.w.data = arr.copy()

    def to_dtype(self, dtype) -> "SingleLayerModel":
        self.w.data = self.w.data.astype(dtype)
        return self

    def param_count(self) -> int:
        return self.w.data.size


def build_model(
    architecture_id: str,
    input_shape,
    class_count: int,
    smoothing: SmoothingConfig | None = None,
    seed: int = 0,
    dtype=np.float32,
    activation: str = "softplus",
):
    """Construct one of the registered architectures.

    fmnist_cnn:   conv(32,5x5) -> pool -> conv(64,5x5) -> pool -> fc(1024) -> fc(C)
                  insertion points: block1, block2 (after each pooled conv block)
    small_resnet: 3 stages of two basic blocks at 16/32/64 channels
                  insertion points: stem, s1b1..s3b2
    single_layer: f(x) = H(<w,x>), no insertion points
    """
    input_shape = tuple(input_shape)
    rng = np.random.default_rng(seed)

    if architecture_id == "single_layer":
        (d,) = input_shape
        model = SingleLayerModel((rng.standard_normal(d) / np.sqrt(d)), activation)
        if smoothing is not None:
            raise ValueError("single_layer has no insertion points")
        return model

    if architecture_id == "fmnist_cnn":
        C, H, W = input_shape
        if H % 4 or W % 4:
            raise ShapeError(f"fmnist_cnn: spatial extents must be divisible by 4, got {H}x{W}")
        layers = [
            ("conv1", Conv(C, 32, 5, padding=2, rng=rng, dtype=dtype)),
            ("relu1", ReLU()),
            ("pool1", MaxPool()),
            ("conv2", Conv(32, 64, 5, padding=2, rng=rng, dtype=dtype)),
            ("relu2", ReLU()),
            ("pool2", MaxPool()),
            ("flatten", Flatten()),
            ("fc1", Dense(64 * (H // 4) * (W // 4), 1024, rng=rng, dtype=dtype)),
            ("relu3", ReLU()),
            ("fc2", Dense(1024, class_count, rng=rng, dtype=dtype)),
        ]
        points = {"block1": (2, 32), "block2": (5, 64)}
        model = Model("fmnist_cnn", input_shape, class_count, layers, points)

    elif architecture_id == "small_resnet":
        C, H, W = input_shape
        layers = [
            ("stem", Conv(C, 16, 3, padding=1, rng=rng, dtype=dtype)),
            ("relu0", ReLU()),
            ("s1b1", ResidualBlock(16, 16, 1, rng=rng, dtype=dtype)),
            ("s1b2", ResidualBlock(16, 16, 1, rng=rng, dtype=dtype)),
            ("s2b1", ResidualBlock(16, 32, 2, rng=rng, dtype=dtype)),
            ("s2b2", ResidualBlock(32, 32, 1, rng=rng, dtype=dtype)),
            ("s3b1", ResidualBlock(32, 64, 2, rng=rng, dtype=dtype)),
            ("s3b2", ResidualBlock(64, 64, 1, rng=rng, dtype=dtype)),
            ("gap", GlobalAvgPool()),
            ("fc", Dense(64, class_count, rng=rng, dtype=dtype)),
        ]
        points = {
            "stem": (1, 16),
            "s1b1": (2, 16), "s1b2": (3, 16),
            "s2b1": (4, 32), "s2b2": (5, 32),
            "s3b1": (6, 64), "s3b2": (7, 64),
        }
        model = Model("small_resnet", input_shape, class_count, layers, points)

    else:
        raise ValueError(
            f"unknown architecture {architecture_id!r}; expected one of {ARCHITECTURES}"
        )

    if smoothing is not None:
        model.insert_smoothing(smoothing)
    return model
