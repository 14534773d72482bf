"""Shared builders for test models."""

import numpy as np

from gxplab.models import Conv, Dense, Flatten, Model, Softplus


def make_smooth_cnn(seed=0, size=16, channels=4, classes=3):
    """Small everywhere-differentiable CNN in float64 for oracle comparisons."""
    rng = np.random.default_rng(seed)
    feat = channels * size * size
    layers = [
        ("conv", Conv(1, channels, 3, padding=1, rng=rng, dtype=np.float64)),
        ("act1", Softplus()),
        ("flatten", Flatten()),
        ("fc1", Dense(feat, 16, rng=rng, dtype=np.float64)),
        ("act2", Softplus()),
        ("fc2", Dense(16, classes, rng=rng, dtype=np.float64)),
    ]
    return Model("probe_cnn", (1, size, size), classes, layers, insertion_points={})


def pixel_rule_model(d=8, gain=10.0, threshold=0.5):
    """Linear image model whose prediction is pixel (0,0) > threshold.

    Logit 0 is the constant gain*threshold; logit 1 is gain times the pixel.
    """
    rng = np.random.default_rng(0)
    model = Model(
        "pixel_rule", (1, d, d), 2,
        [("flatten", Flatten()), ("fc", Dense(d * d, 2, rng=rng, dtype=np.float64))],
        insertion_points={},
    )
    fc_w = model.parameters()["fc.weight"]
    fc_b = model.parameters()["fc.bias"]
    fc_w.data = np.zeros_like(fc_w.data)
    fc_w.data[0, 1] = gain
    fc_b.data = np.array([gain * threshold, 0.0])
    return model
