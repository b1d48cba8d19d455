import contextlib

import numpy as np
import pytest

from robustlab import tensor as T
from robustlab.attacks import (AdversarialBatch, AttackConfig, accuracy,
                               cw_margin_loss, fgsm, pgd, transfer_attack)
from robustlab.network import build_mnist_cnn, build_mini_resnet
from robustlab.tensor import ShapeError, Tensor


class TinyNet:
    """Duck-typed stand-in: logits = relu(x @ w1) @ w2 on flat inputs."""

    def __init__(self, w1, w2):
        self.w1 = Tensor(w1, requires_grad=True)
        self.w2 = Tensor(w2, requires_grad=True)
        self.spec = {"arch": "mnist_cnn"}

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        logits = T.matmul(T.relu(T.matmul(x, self.w1)), self.w2)
        return type("O", (), {"logits": logits})()

    def predict(self, x):
        return self.forward(x).logits.data.argmax(axis=1)

    @contextlib.contextmanager
    def frozen(self):
        self.w1.requires_grad = self.w2.requires_grad = False
        yield self
        self.w1.requires_grad = self.w2.requires_grad = True


class LinearNet(TinyNet):
    """logits = x @ w exactly (closed-form FGSM check)."""

    def __init__(self, w):
        self.w = Tensor(w, requires_grad=True)
        self.spec = {"arch": "mnist_cnn"}

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return type("O", (), {"logits": T.matmul(x, self.w)})()

    @contextlib.contextmanager
    def frozen(self):
        self.w.requires_grad = False
        yield self
        self.w.requires_grad = True


@pytest.fixture(scope="module")
def mnist_net():
    return build_mnist_cnn(seed=0)


def _rand_batch(rng, n=4):
    return (rng.uniform(0, 1, (n, 1, 28, 28)).astype(np.float32),
            rng.integers(0, 10, n))


class TestConfig:
    def test_invalid_epsilon(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=-0.1).validate()
        with pytest.raises(ValueError):
            AttackConfig(epsilon=1.5).validate()

    def test_invalid_steps_and_alpha(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.1, steps=0).validate()
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.1, alpha=-1.0).validate()

    def test_unknown_loss_kind(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.1, loss_kind="hinge").validate()

    def test_default_alpha_rule(self):
        cfg = AttackConfig(epsilon=0.3, steps=10)
        assert abs(cfg.resolved_alpha() - 2.5 * 0.3 / 10) < 1e-12


class TestCwMargin:
    def test_two_logits(self):
        assert cw_margin_loss(Tensor([3.0, 1.0]), 0).item() == -2.0

    def test_all_equal(self):
        assert cw_margin_loss(Tensor([1.0, 1.0, 1.0]), 1).item() == 0.0

    def test_vs_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = rng.standard_normal(10)
            y = int(rng.integers(0, 10))
            expected = max(z[j] for j in range(10) if j != y) - z[y]
            assert abs(cw_margin_loss(Tensor(z), y).item() - expected) < 1e-12

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            cw_margin_loss(Tensor([1.0, 2.0]), 5)

    def test_single_class_rejected(self):
        with pytest.raises(ShapeError):
            cw_margin_loss(Tensor([1.0]), 0)


class TestFgsm:
    def test_zero_epsilon_identity(self, mnist_net):
        rng = np.random.default_rng(1)
        x, y = _rand_batch(rng)
        batch = fgsm(mnist_net, x, y, 0.0)
        assert np.array_equal(batch.adversarial, x)

    def test_negative_epsilon_rejected(self, mnist_net):
        with pytest.raises(ValueError):
            fgsm(mnist_net, np.zeros((1, 1, 28, 28), dtype=np.float32), [0], -0.1)

    def test_linear_model_closed_form(self):
        # 2-class linear model: CE gradient w.r.t. x is (p - onehot) @ W.T
        rng = np.random.default_rng(2)
        w = rng.standard_normal((6, 2))
        net = LinearNet(w)
        x = rng.uniform(0.3, 0.7, (3, 6))
        y = rng.integers(0, 2, 3)
        eps = 0.1
        batch = fgsm(net, x, y, eps)
        z = x @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.eye(2)[y]
        expected = np.clip(x + eps * np.sign((p - onehot) @ w.T), 0, 1)
        assert np.allclose(batch.adversarial, expected, atol=1e-12)

    def test_box_clamp_near_one(self, mnist_net):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.95, 1.0, (2, 1, 28, 28)).astype(np.float32)
        y = rng.integers(0, 10, 2)
        batch = fgsm(mnist_net, x, y, 0.5)
        assert batch.adversarial.max() <= 1.0


class TestPgd:
    def test_one_step_equals_fgsm_bitwise(self, mnist_net):
        rng = np.random.default_rng(4)
        x, y = _rand_batch(rng)
        eps = 0.1
        a = fgsm(mnist_net, x, y, eps).adversarial
        cfg = AttackConfig(epsilon=eps, alpha=eps, steps=1, random_start=False)
        b = pgd(mnist_net, x, y, cfg).adversarial
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("eps,steps", [(0.0, 1), (0.1, 5), (0.3, 5)])
    def test_ball_and_box_invariants(self, mnist_net, eps, steps):
        rng = np.random.default_rng(5)
        x, y = _rand_batch(rng)
        cfg = AttackConfig(epsilon=eps, steps=steps, seed=9)
        batch = pgd(mnist_net, x, y, cfg)  # __post_init__ asserts the invariants
        assert isinstance(batch, AdversarialBatch)

    def test_deterministic_under_seed(self, mnist_net):
        rng = np.random.default_rng(6)
        x, y = _rand_batch(rng)
        cfg = AttackConfig(epsilon=0.2, steps=3, seed=42)
        a = pgd(mnist_net, x, y, cfg).adversarial
        b = pgd(mnist_net, x, y, cfg).adversarial
        assert np.array_equal(a, b)

    def test_monotone_threat_soft(self, mnist_net, capsys):
        # soft check: robust accuracy should not increase much with more steps
        rng = np.random.default_rng(7)
        x, y = _rand_batch(rng, n=16)
        accs = []
        for steps in (1, 5, 20):
            cfg = AttackConfig(epsilon=0.3, alpha=0.05, steps=steps, seed=1)
            batch = pgd(mnist_net, x, y, cfg)
            accs.append(accuracy(mnist_net, batch.adversarial, y))
        print(f"robust accuracy by steps 1/5/20: {accs}")
        assert accs[1] <= accs[0] + 0.005 * 4
        assert accs[2] <= accs[1] + 0.005 * 15

    def test_grid_search_oracle_two_pixels(self):
        # PGD-20 vs exhaustive search over the 2-d epsilon ball
        rng = np.random.default_rng(8)
        w1 = rng.standard_normal((2, 4))
        w2 = rng.standard_normal((4, 2))
        net = TinyNet(w1, w2)
        x = np.array([[0.5, 0.5]])
        y = np.array([0])
        eps = 0.2
        cfg = AttackConfig(epsilon=eps, alpha=eps / 4, steps=20, seed=0)
        batch = pgd(net, x, y, cfg)
        grid = np.linspace(-eps, eps, 101)
        best = -np.inf
        for dx in grid:
            for dy in grid:
                xp = np.clip(x + [[dx, dy]], 0, 1)
                z = np.maximum(xp @ w1, 0) @ w2
                ce = -(z[0, 0] - np.log(np.exp(z[0]).sum()))
                best = max(best, ce)
        assert batch.loss_after[0] >= best - 1e-3


class TestTransfer:
    def test_source_equals_target_matches_whitebox(self, mnist_net):
        rng = np.random.default_rng(9)
        x, y = _rand_batch(rng, n=8)
        cfg = AttackConfig(epsilon=0.3, steps=3, seed=3)
        white = accuracy(mnist_net, pgd(mnist_net, x, y, cfg).adversarial, y)
        assert transfer_attack(mnist_net, mnist_net, x, y, cfg) == white

    def test_zero_epsilon_equals_natural(self, mnist_net):
        rng = np.random.default_rng(10)
        x, y = _rand_batch(rng, n=8)
        cfg = AttackConfig(epsilon=0.0, steps=2)
        nat = accuracy(mnist_net, x, y)
        other = build_mnist_cnn(seed=99)
        assert transfer_attack(other, mnist_net, x, y, cfg) == nat

    def test_shape_mismatch_rejected(self, mnist_net):
        other = build_mini_resnet(widths=[4, 4, 8, 16])
        with pytest.raises(ShapeError):
            transfer_attack(other, mnist_net, np.zeros((1, 3, 32, 32)), [0],
                            AttackConfig(epsilon=0.1))
