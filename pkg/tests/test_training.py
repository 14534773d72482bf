"""Attack correctness, optimizer arithmetic, and training-loop behavior."""

import numpy as np
import pytest

from gxplab.data import Dataset
from gxplab.models import Dense, Flatten, Model, SingleLayerModel
from gxplab.tensor import Tensor, cross_entropy_with_logits
from gxplab.training import (
    SGD,
    Adam,
    PGDConfig,
    TrainConfig,
    evaluate,
    make_optimizer,
    pgd_attack,
    train,
)


def linear_model(seed=0, features=2, classes=2, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return Model(
        "probe", (1, 1, features), classes,
        [("flatten", Flatten()), ("fc", Dense(features, classes, rng=rng, dtype=dtype))],
        insertion_points={},
    )


def blobs_dataset(n=200, seed=0):
    """Two linearly separable clusters on the diagonal of the unit square."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    centers = np.where(labels[:, None] == 0, 0.3, 0.7)
    pts = np.clip(centers + rng.normal(0, 0.05, (n, 2)), 0.0, 1.0)
    return Dataset(pts.reshape(n, 1, 1, 2).astype(np.float32), labels, "train", 2)


class TestPGD:
    def test_zero_eps_is_identity(self):
        model = SingleLayerModel(np.array([1.0, -1.0]))
        x = np.array([[0.2, 0.9]])
        out = pgd_attack(model, x, np.array([1]), PGDConfig(eps=0.0, steps=10))
        np.testing.assert_array_equal(out, x)

    def test_single_step_matches_hand_derivation(self):
        # logits (0, <w,x>) with label 1: loss = log(1 + exp(-<w,x>)), so the
        # loss gradient in x is -sigmoid(-<w,x>) * w and the signed ascent
        # step moves each coordinate by -alpha * sign(w)
        w = np.array([1.0, -2.0])
        model = SingleLayerModel(w)
        x = np.array([[0.5, 0.5]])
        cfg = PGDConfig(eps=0.1, step_size=0.03, steps=1, random_start=False)
        out = pgd_attack(model, x, np.array([1]), cfg)
        np.testing.assert_allclose(out, [[0.47, 0.53]], rtol=0, atol=1e-12)

    def test_multi_step_saturates_at_eps(self):
        w = np.array([1.0, -2.0])
        model = SingleLayerModel(w)
        x = np.array([[0.5, 0.5]])
        cfg = PGDConfig(eps=0.1, step_size=0.03, steps=10, random_start=False)
        out = pgd_attack(model, x, np.array([1]), cfg)
        np.testing.assert_allclose(out, [[0.4, 0.6]], rtol=0, atol=1e-12)

    def test_feasibility(self):
        model = linear_model(seed=3, features=12)
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (16, 1, 1, 12)).astype(np.float32)
        y = rng.integers(0, 2, 16)
        cfg = PGDConfig(eps=0.1, steps=5, random_start=True)
        out = pgd_attack(model, x, y, cfg, rng)
        assert np.abs(out - x).max() <= 0.1 + 1e-6
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_loss_ascends_per_sample(self):
        w = np.array([0.8, -1.3, 0.4])
        model = SingleLayerModel(w)
        rng = np.random.default_rng(1)
        x = rng.uniform(0.25, 0.75, (32, 3))
        y = rng.integers(0, 2, 32)

        def losses(xs):
            z = xs @ w
            # per-sample cross entropy of logits (0, z)
            return np.where(y == 1, np.logaddexp(0, -z), np.logaddexp(0, z))

        base = losses(x)
        for steps in (1, 3, 6):
            adv = pgd_attack(model, x, y, PGDConfig(eps=0.08, step_size=0.01,
                                                    steps=steps, random_start=False))
            assert np.all(losses(adv) >= base - 1e-12)
            base = losses(adv)

    def test_larger_budget_hurts_more(self):
        w = np.array([0.8, -1.3, 0.4])
        model = SingleLayerModel(w)
        rng = np.random.default_rng(2)
        x = rng.uniform(0.3, 0.7, (64, 3))
        y = rng.integers(0, 2, 64)

        def mean_loss(xs):
            z = xs @ w
            return np.where(y == 1, np.logaddexp(0, -z), np.logaddexp(0, z)).mean()

        small = pgd_attack(model, x, y, PGDConfig(0.03, 0.01, 10, random_start=False))
        large = pgd_attack(model, x, y, PGDConfig(0.10, 0.01, 10, random_start=False))
        assert mean_loss(large) >= mean_loss(small)

    def test_random_start_requires_rng(self):
        model = SingleLayerModel(np.array([1.0, 1.0]))
        with pytest.raises(ValueError, match="rng"):
            pgd_attack(model, np.array([[0.5, 0.5]]), np.array([0]), PGDConfig(eps=0.1))

    def test_parameters_untouched_and_unfrozen(self):
        model = linear_model(seed=5)
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        x = np.random.default_rng(0).uniform(0.2, 0.8, (8, 1, 1, 2))
        pgd_attack(model, x, np.zeros(8, dtype=int), PGDConfig(0.1, 0.02, 5, False))
        for k, p in model.parameters().items():
            assert p.requires_grad
            np.testing.assert_array_equal(p.data, before[k])
            assert p.grad is None

    def test_default_step_is_tenth_of_eps(self):
        assert PGDConfig(eps=0.3).resolved_step() == pytest.approx(0.03)
        assert PGDConfig(eps=0.3, step_size=0.05).resolved_step() == 0.05


class TestOptimizers:
    def test_sgd_momentum_hand_values(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD({"p": p}, lr=0.1, momentum=0.9)
        p.grad = np.array([0.5])
        opt.step()
        np.testing.assert_allclose(p.data, [0.95])
        p.grad = np.array([0.5])
        opt.step()  # v = 0.9*0.5 + 0.5 = 0.95
        np.testing.assert_allclose(p.data, [0.95 - 0.095])

    def test_sgd_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD({"p": p}, lr=0.1, momentum=0.0, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step()  # g = 0 + 0.5*2 = 1
        np.testing.assert_allclose(p.data, [1.9])

    def test_adam_first_step_is_signed(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        p.grad = np.array([3.0, -0.004])
        opt.step()  # mhat/sqrt(vhat) = sign(g) up to the eps guard
        np.testing.assert_allclose(p.data, [1.0 - 0.01, -1.0 + 0.01], rtol=1e-5)

    def test_none_grad_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        for opt in (SGD({"p": p}, 0.1), Adam({"p": p}, 0.1)):
            opt.step()
            np.testing.assert_array_equal(p.data, [1.0])

    def test_make_optimizer_rejects_unknown(self):
        with pytest.raises(ValueError, match="optimizer"):
            make_optimizer(TrainConfig(optimizer="lbfgs"), {})


class TestTraining:
    def test_natural_training_separates_blobs(self):
        ds = blobs_dataset(200, seed=0)
        model = linear_model(seed=1)
        cfg = TrainConfig(regime="natural", optimizer="adam", lr=0.05,
                          epochs=40, batch_size=32, seed=0)
        model, log = train(model, ds, cfg)
        assert not log.diverged
        nat, rob = evaluate(model, ds)
        assert nat >= 0.99
        assert rob == nat

    def test_adversarial_training_certified_robust(self):
        # margin between the blobs is ~0.4 per coordinate, so eps=0.05 fits
        # inside it; a linear model is worst-cased exactly at box corners
        ds = blobs_dataset(300, seed=2)
        model = linear_model(seed=3)
        pgd = PGDConfig(eps=0.05, steps=5)
        cfg = TrainConfig(regime="adversarial", optimizer="adam", lr=0.05,
                          epochs=60, batch_size=32, seed=0, pgd=pgd,
                          eval_pgd=PGDConfig(eps=0.05, steps=10))
        model, log = train(model, ds, cfg)
        assert not log.diverged

        W = model.parameters()["fc.weight"].data   # (2, 2)
        b = model.parameters()["fc.bias"].data
        flat = ds.images.reshape(len(ds), 2).astype(np.float64)
        worst_ok = np.ones(len(ds), dtype=bool)
        for corner in ([-1, -1], [-1, 1], [1, -1], [1, 1]):
            pts = np.clip(flat + 0.05 * np.array(corner), 0.0, 1.0)
            worst_ok &= np.argmax(pts @ W + b, axis=1) == ds.labels
        certified_acc = worst_ok.mean()
        assert certified_acc >= 0.99

        # the PGD estimate can never report less than the certified rate
        _, rob = evaluate(model, ds, PGDConfig(eps=0.05, steps=20), seed=1)
        assert rob >= certified_acc - 1e-9

    def test_untrained_model_near_chance(self):
        ds = blobs_dataset(400, seed=4)
        nat, _ = evaluate(linear_model(seed=6), ds)
        assert nat <= 0.85  # far from trained performance

    def test_training_is_reproducible(self):
        ds = blobs_dataset(64, seed=5)
        outs = []
        for _ in range(2):
            model = linear_model(seed=7)
            cfg = TrainConfig(regime="adversarial", optimizer="sgd", lr=0.1,
                              epochs=3, batch_size=16, seed=11,
                              pgd=PGDConfig(eps=0.05, steps=3))
            model, log = train(model, ds, cfg)
            outs.append((model.state_dict(), log))
        for k in outs[0][0]:
            assert outs[0][0][k].tobytes() == outs[1][0][k].tobytes()
        stripped = [
            [{k: v for k, v in e.items() if k != "wall_seconds"} for e in log.entries]
            for _, log in outs
        ]
        assert stripped[0] == stripped[1]

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_rolls_back(self):
        # lr * weight_decay = 100 multiplies each float32 weight by about -99
        # per step, overflowing to inf inside the first epoch
        ds = blobs_dataset(30, seed=6)
        model = linear_model(seed=8, dtype=np.float32)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        cfg = TrainConfig(regime="natural", optimizer="sgd", lr=10.0,
                          weight_decay=10.0, epochs=3, batch_size=1, seed=0)
        model, log = train(model, ds, cfg)
        assert log.diverged and log.diverged_epoch == 0
        assert log.entries == []
        for k, v in model.state_dict().items():
            assert v.tobytes() == before[k].tobytes()

    def test_lr_decay_applies(self):
        ds = blobs_dataset(32, seed=7)
        runs = {}
        for decay in ((), (1,)):
            model = linear_model(seed=9)
            cfg = TrainConfig(regime="natural", optimizer="sgd", lr=0.5,
                              epochs=2, batch_size=8, seed=3,
                              lr_decay_epochs=decay, lr_decay_factor=0.0)
            model, _ = train(model, ds, cfg)
            runs[decay] = model.state_dict()
        # factor 0 freezes the weights from epoch 1 on, so the runs differ
        assert any(runs[()][k].tobytes() != runs[(1,)][k].tobytes() for k in runs[()])

    def test_adversarial_regime_requires_pgd(self):
        with pytest.raises(ValueError, match="pgd"):
            train(linear_model(), blobs_dataset(8), TrainConfig(regime="adversarial", epochs=1))

    def test_unknown_regime_rejected(self):
        with pytest.raises(ValueError, match="regime"):
            train(linear_model(), blobs_dataset(8), TrainConfig(regime="fgsm", epochs=1))

    def test_log_csv_shape(self):
        ds = blobs_dataset(16, seed=8)
        _, log = train(linear_model(seed=10), ds,
                       TrainConfig(regime="natural", epochs=2, batch_size=8, seed=0))
        csv = log.to_csv()
        lines = csv.strip().split("\n")
        assert lines[0] == "epoch,loss,nat_acc,rob_acc,wall_seconds"
        assert len(lines) == 3

    def test_evaluate_with_attack_not_above_natural(self):
        ds = blobs_dataset(100, seed=9)
        model = linear_model(seed=11)
        model, _ = train(model, ds, TrainConfig(regime="natural", optimizer="adam",
                                                lr=0.05, epochs=30, batch_size=32, seed=0))
        nat, rob = evaluate(model, ds, PGDConfig(eps=0.3, steps=10), seed=2)
        assert rob <= nat
