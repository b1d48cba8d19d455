"""Adversarial example generation: FGSM, l-inf PGD, and a CW-margin variant.

Every generated batch satisfies two hard invariants, asserted on
construction: the perturbation stays inside the l-inf ball of radius
epsilon around the clean input, and all pixels stay in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from robustlab import tensor as T
from robustlab.network import Network
from robustlab.tensor import ShapeError, Tensor

LINF_SLACK = 1e-6

LOSS_KINDS = ("cross-entropy", "cw-margin")


@dataclass
class AttackConfig:
    """PGD attack parameters; epsilon/alpha are in [0, 1] pixel units.

    ``alpha=None`` resolves to the documented default 2.5 * epsilon / steps.
    """

    epsilon: float
    alpha: float | None = None
    steps: int = 1
    random_start: bool = True
    loss_kind: str = "cross-entropy"
    seed: int = 0

    def resolved_alpha(self):
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / self.steps if self.steps else self.epsilon

    def validate(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        return self


# presets matching the evaluated settings (CIFAR step size 2 is in 0-255 units)
PRESETS = {
    "mnist-train": AttackConfig(epsilon=0.3, alpha=0.01, steps=40),
    "mnist-eval": AttackConfig(epsilon=0.3, alpha=0.01, steps=40),
    "cifar-train": AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=5),
}


@dataclass
class AdversarialBatch:
    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    loss_before: np.ndarray  # per example
    loss_after: np.ndarray
    epsilon: float

    def __post_init__(self):
        delta = np.abs(self.adversarial - self.clean).reshape(len(self.labels), -1)
        assert delta.max(initial=0.0) <= self.epsilon + LINF_SLACK, \
            f"l-inf violation: {delta.max()} > {self.epsilon}"
        assert self.adversarial.min(initial=0.0) >= 0.0
        assert self.adversarial.max(initial=1.0) <= 1.0


def cw_margin_loss(logits, y):
    """Carlini-Wagner margin max_{j != y}(z_j) - z_y with kappa = 0.

    Accepts a single logit vector or a (B, K) batch (returns per-example
    margins for the latter). Maximizing it drives misclassification.
    """
    single = False
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1,) + logits.shape)
        single = True
    b, k = logits.shape
    if k < 2:
        raise ShapeError(f"cw_margin_loss needs >= 2 classes, got {k}")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"label out of range for {k} classes: {y}")
    mask = np.zeros((b, k), dtype=logits.dtype)
    mask[np.arange(b), y] = -1e9  # excludes the true class from the max
    margins = T.sub(T.amax(T.add(logits, Tensor(mask)), axis=1), T.pick(logits, y))
    return T.reshape(margins, ()) if single else margins


def _objective(cfg_loss_kind, logits, y):
    """Summed per-example attack objective (sum keeps per-example grads unscaled)."""
    if cfg_loss_kind == "cw-margin":
        return T.tsum(cw_margin_loss(logits, y))
    return T.tsum(T.mul(T.pick(T.log_softmax(logits, axis=-1), y), -1.0))


def _per_example_loss(net, x, y, loss_kind):
    logits = net.forward(Tensor(x)).logits
    if loss_kind == "cw-margin":
        return cw_margin_loss(logits, y).data
    return -T.pick(T.log_softmax(logits, axis=-1), y).data


def input_grad(net: Network, x, y, loss_kind="cross-entropy"):
    """Gradient of the attack objective w.r.t. the input pixels."""
    xt = Tensor(x, requires_grad=True)
    with net.frozen():
        loss = _objective(loss_kind, net.forward(xt).logits, y)
        loss.backward()
    return xt.grad


def pgd(net: Network, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """Iterated signed-gradient ascent projected to the epsilon ball and [0, 1]."""
    cfg.validate()
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if x.min(initial=0.0) < 0.0 or x.max(initial=1.0) > 1.0:
        raise ValueError("input pixels must lie in [0, 1]")
    eps = x.dtype.type(cfg.epsilon)
    alpha = x.dtype.type(cfg.resolved_alpha())
    lo = np.maximum(x - eps, x.dtype.type(0.0))
    hi = np.minimum(x + eps, x.dtype.type(1.0))
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        xa = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape).astype(x.dtype),
                     lo, hi)
    else:
        xa = x.copy()
    loss_before = _per_example_loss(net, x, y, cfg.loss_kind)
    # the 0-ball projection forces x back at every step, so skip the loop
    steps = cfg.steps if cfg.epsilon > 0 else 0
    for _ in range(steps):
        g = input_grad(net, xa, y, cfg.loss_kind)
        xa = np.clip(xa + alpha * np.sign(g, dtype=x.dtype), lo, hi)
    loss_after = _per_example_loss(net, xa, y, cfg.loss_kind)
    return AdversarialBatch(clean=x, adversarial=xa, labels=y,
                            loss_before=loss_before, loss_after=loss_after,
                            epsilon=cfg.epsilon)


def fgsm(net: Network, x, y, epsilon) -> AdversarialBatch:
    """Single signed-gradient step: clamp(x + eps * sgn(grad), 0, 1)."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    cfg = AttackConfig(epsilon=float(epsilon), alpha=float(epsilon) or None,
                       steps=1, random_start=False)
    if epsilon == 0:
        cfg = replace(cfg, alpha=None)
    return pgd(net, x, y, cfg)


def _input_shape(net: Network):
    if net.spec["arch"] == "mnist_cnn":
        return (1, 28, 28)
    return (net.spec["in_channels"], net.spec["input_hw"], net.spec["input_hw"])


def accuracy(net: Network, x, y, batch_size=256):
    x = np.asarray(x)
    y = np.asarray(y)
    correct = 0
    for i in range(0, len(x), batch_size):
        correct += int((net.predict(x[i:i + batch_size]) == y[i:i + batch_size]).sum())
    return correct / len(x)


def transfer_attack(source: Network, target: Network, x, y, cfg: AttackConfig):
    """Attack ``source``, measure accuracy of ``target`` on the result."""
    if _input_shape(source) != _input_shape(target):
        raise ShapeError(
            f"transfer: source input {_input_shape(source)} != target {_input_shape(target)}")
    batch = pgd(source, x, y, cfg)
    return accuracy(target, batch.adversarial, batch.labels)
