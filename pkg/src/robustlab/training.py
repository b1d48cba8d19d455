"""Robust-training loop: adversarial cross-entropy plus a pairing regularizer.

Per minibatch the loop generates fresh PGD adversaries against the current
parameters, forwards both the clean and adversarial batch through the one
shared network, and minimizes

    mean[ CE(adversarial) + lambda * ||desc(clean) - desc(adversarial)||_2 ]

where the paired quantity is the pre-classifier descriptor (feature-l2) or
the logit vector (logit-pairing). lambda = 0 with no regularizer is plain
adversarial training.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from robustlab import tensor as T
from robustlab.attacks import AttackConfig, pgd
from robustlab.data_io import (checkpoint_from_network, config_digest,
                               save_checkpoint)
from robustlab.network import Network, build_mini_resnet, build_mnist_cnn
from robustlab.tensor import ShapeError, Tensor

REGULARIZERS = ("feature-l2", "logit-pairing", "none")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.0
    regularizer: str = "none"
    attention: bool = False
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.3, alpha=0.01, steps=40))
    arch: str = "mnist_cnn"
    widths: tuple = (8, 8, 16, 32)
    in_channels: int = 3
    input_hw: int = 32
    num_classes: int = 10
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    lr_milestones: tuple = ()      # fractions of total epochs
    lr_decay: float = 0.1
    epochs: int = 5
    batch_size: int = 128
    seed: int = 0
    grad_both_branches: bool = True
    metrics_path: str | None = None
    checkpoint_path: str | None = None
    checkpoint_interval: int = 0   # steps; 0 = final only

    def validate(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid epochs or batch_size")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        self.attack.validate()
        return self

    def digest(self):
        d = asdict(self)
        d.pop("metrics_path", None)      # output locations do not affect the run
        d.pop("checkpoint_path", None)
        return config_digest(d)


@dataclass
class TrainState:
    network: Network
    velocities: dict                      # sgd momentum or adam first moment
    second_moments: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    metrics: list = field(default_factory=list)
    checkpoint_paths: list = field(default_factory=list)


def cross_entropy(logits, y, reduction="mean"):
    """Numerically stabilized -log softmax(logits)[y]."""
    single = False
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1,) + logits.shape)
        single = True
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    nll = T.mul(T.pick(T.log_softmax(logits, axis=-1), y), -1.0)
    if single:
        return T.reshape(nll, ())
    if reduction == "mean":
        return T.tmean(nll)
    if reduction == "sum":
        return T.tsum(nll)
    return nll


def _pair_distance(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"pairing: shapes differ, {a.shape} vs {b.shape}")
    diff = T.sub(a, b)
    if diff.ndim == 1:
        return T.l2_norm(diff)
    return T.tmean(T.l2_norm(diff, axis=1))


def feature_reg(descriptor_clean, descriptor_adv):
    """Euclidean distance between clean and adversarial descriptors.

    Batched inputs give the mean of per-example distances (not squared,
    matching the expectation over the data distribution in the objective).
    """
    return _pair_distance(descriptor_clean, descriptor_adv)


def logit_pairing_reg(logits_clean, logits_adv):
    """ALP comparison baseline: the same distance applied to logit vectors."""
    return _pair_distance(logits_clean, logits_adv)


def total_loss(net: Network, x, y, cfg: TrainConfig, attack_cfg=None):
    """Adversarial CE plus lambda * pairing regularizer; returns (loss, parts)."""
    cfg.validate()
    attack_cfg = attack_cfg or cfg.attack
    batch = pgd(net, x, y, attack_cfg)
    x_adv = Tensor(batch.adversarial)
    out_adv = net.forward(x_adv)
    ce = cross_entropy(out_adv.logits, y)
    if cfg.regularizer == "none" or cfg.lam == 0.0:
        if cfg.regularizer == "none":
            reg = Tensor(np.zeros((), dtype=ce.dtype))
            loss = ce
        else:
            reg = _regularizer_value(net, x, out_adv, cfg)
            loss = ce
    else:
        reg = _regularizer_value(net, x, out_adv, cfg)
        loss = T.add(ce, T.mul(reg, cfg.lam))
    parts = {"ce": float(ce.data), "reg": float(reg.data),
             "total": float(loss.data),
             "linf": float(np.abs(batch.adversarial - batch.clean).max(initial=0.0))}
    return loss, parts


def _regularizer_value(net, x, out_adv, cfg):
    if cfg.grad_both_branches:
        out_clean = net.forward(Tensor(x))
    else:
        with net.frozen():
            out_clean = net.forward(Tensor(np.asarray(x)))
        out_clean = type(out_adv)(
            *[o.detach() if isinstance(o, Tensor) else o
              for o in (out_clean.local_features, out_clean.global_feature,
                        out_clean.compat_scores, out_clean.attention_weights,
                        out_clean.descriptor, out_clean.logits)])
    if cfg.regularizer == "logit-pairing":
        return logit_pairing_reg(out_clean.logits, out_adv.logits)
    return feature_reg(out_clean.descriptor, out_adv.descriptor)


def build_from_config(cfg: TrainConfig) -> Network:
    if cfg.arch == "mnist_cnn":
        return build_mnist_cnn(with_attention=cfg.attention, seed=cfg.seed)
    return build_mini_resnet(with_attention=cfg.attention, widths=cfg.widths,
                             seed=cfg.seed, in_channels=cfg.in_channels,
                             input_hw=cfg.input_hw, num_classes=cfg.num_classes)


def _sgd_step(net, velocities, lr, momentum):
    for name, p in net.params.items():
        if p.grad is None:
            continue
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + p.grad
        velocities[name] = v
        p.data = p.data - lr * v


def _adam_step(net, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam; t is the 1-based step count."""
    for name, p in net.params.items():
        if p.grad is None:
            continue
        g = p.grad
        m[name] = beta1 * m.get(name, np.zeros_like(p.data)) + (1 - beta1) * g
        v[name] = beta2 * v.get(name, np.zeros_like(p.data)) + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1 ** t)
        v_hat = v[name] / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def _lr_at(cfg, epoch):
    lr = cfg.lr
    for frac in cfg.lr_milestones:
        if epoch >= frac * cfg.epochs:
            lr *= cfg.lr_decay
    return lr


def attack_seed_for_step(master_seed, step):
    """Documented seed-splitting rule for per-batch adversaries."""
    return (master_seed * 1_000_003 + step) % (2 ** 32)


def train(dataset, cfg: TrainConfig, net=None, callback=None) -> TrainState:
    """Outer minimization loop; deterministic given cfg in single-worker mode."""
    cfg.validate()
    if net is None:
        net = build_from_config(cfg)
    state = TrainState(network=net, velocities={})
    rng = np.random.default_rng(cfg.seed)
    digest = cfg.digest()
    metrics_fh = open(cfg.metrics_path, "w") if cfg.metrics_path else None

    def emit(record):
        state.metrics.append(record)
        if metrics_fh:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()

    try:
        n = len(dataset)
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            perm = rng.permutation(n)
            lr = _lr_at(cfg, epoch)
            emit({"event": "epoch", "epoch": epoch, "lr": lr,
                  "shuffle_head": perm[:8].tolist(), "time": time.time()})
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                x = dataset.images[idx]
                y = dataset.labels[idx]
                attack_cfg = replace(cfg.attack,
                                     seed=attack_seed_for_step(cfg.seed, state.step))
                loss, parts = total_loss(net, x, y, cfg, attack_cfg)
                if not np.isfinite(parts["total"]):
                    raise TrainingDiverged(
                        f"non-finite loss at step {state.step} "
                        f"(batch starting at {lo}): {parts}")
                net.zero_grad()
                loss.backward()
                if cfg.optimizer == "adam":
                    _adam_step(net, state.velocities, state.second_moments,
                               state.step + 1, lr)
                else:
                    _sgd_step(net, state.velocities, lr, cfg.momentum)
                emit({"event": "step", "step": state.step, "epoch": epoch,
                      **{k: parts[k] for k in ("ce", "reg", "total", "linf")}})
                state.step += 1
                if (cfg.checkpoint_path and cfg.checkpoint_interval
                        and state.step % cfg.checkpoint_interval == 0):
                    path = f"{cfg.checkpoint_path}.step{state.step}"
                    save_checkpoint(path, checkpoint_from_network(
                        net, step=state.step, digest=digest))
                    state.checkpoint_paths.append(path)
                if callback:
                    callback(state)
        if cfg.checkpoint_path:
            save_checkpoint(cfg.checkpoint_path, checkpoint_from_network(
                net, step=state.step, digest=digest))
            state.checkpoint_paths.append(cfg.checkpoint_path)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return state
