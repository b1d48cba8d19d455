"""Evaluation battery: accuracy tables, gradient maps, attention maps, and
the attention-weight-vs-feature-robustness ranking study.

All analyses are read-only over a frozen network; accumulations run in a
fixed order so results are reproducible bit-identically under fixed seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from robustlab import tensor as T
from robustlab.attacks import AttackConfig, accuracy, input_grad, pgd
from robustlab.data_io import Dataset
from robustlab.network import Network
from robustlab.tensor import ShapeError, Tensor

ATTACK_KINDS = ("natural", "fgsm", "pgd", "cw")


@dataclass
class AttackSetting:
    """One cell of the evaluation table."""

    kind: str = "pgd"
    epsilon: float = 0.3
    alpha: float | None = None
    steps: int = 1
    random_start: bool = True
    seed: int = 0
    transfer: bool = False
    transfer_source: Network | None = None

    def label(self):
        mode = "transfer" if (self.transfer or self.transfer_source is not None) else "white"
        if self.kind == "natural":
            return "natural"
        return f"{mode}:{self.kind}:{self.steps}"

    def to_attack_config(self):
        loss_kind = "cw-margin" if self.kind == "cw" else "cross-entropy"
        steps = 1 if self.kind == "fgsm" else self.steps
        alpha = self.epsilon if self.kind == "fgsm" else self.alpha
        random_start = False if self.kind == "fgsm" else self.random_start
        return AttackConfig(epsilon=self.epsilon, alpha=alpha, steps=steps,
                            random_start=random_start, loss_kind=loss_kind,
                            seed=self.seed).validate()


@dataclass
class EvalReport:
    natural_accuracy: float
    cells: dict = field(default_factory=dict)  # label -> accuracy
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for label, acc in list(self.cells.items()) + [("natural", self.natural_accuracy)]:
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {label}={acc} outside [0, 1]")

    def to_json(self):
        return json.dumps({"natural_accuracy": self.natural_accuracy,
                           "cells": self.cells, "provenance": self.provenance},
                          sort_keys=True, indent=2)


def evaluate(net: Network, data: Dataset, attack_suite, provenance=None,
             batch_size=256) -> EvalReport:
    """Accuracy of ``net`` on clean inputs and on every attacked variant."""
    natural = accuracy(net, data.images, data.labels, batch_size)
    cells = {}
    for setting in attack_suite:
        if setting.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {setting.kind!r}")
        if setting.transfer and setting.transfer_source is None:
            raise ValueError(f"setting {setting.label()} requests a transfer attack "
                             "but no transfer source was provided")
        if setting.kind == "natural" or setting.epsilon == 0.0:
            cells[setting.label()] = natural
            continue
        source = setting.transfer_source or net
        cfg = setting.to_attack_config()
        correct = 0
        for lo in range(0, len(data), batch_size):
            x = data.images[lo:lo + batch_size]
            y = data.labels[lo:lo + batch_size]
            batch = pgd(source, x, y, cfg)
            correct += int((net.predict(batch.adversarial) == y).sum())
        cells[setting.label()] = correct / len(data)
    return EvalReport(natural_accuracy=natural, cells=cells,
                      provenance=provenance or {})


# -- gradient maps -----------------------------------------------------------

@dataclass
class GradientMap:
    raw: np.ndarray
    normalized: np.ndarray

    def __post_init__(self):
        assert self.normalized.min(initial=0.0) >= 0.0
        assert self.normalized.max(initial=1.0) <= 1.0


def _normalize_map(raw, clip_sigmas):
    """Clip to mean +- k*sigma (jointly over all pixels/channels), rescale to [0, 1]."""
    m = raw.astype(np.float64)
    if clip_sigmas is not None:
        mu, sd = m.mean(), m.std()
        m = np.clip(m, mu - clip_sigmas * sd, mu + clip_sigmas * sd)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full_like(m, 0.5)  # degenerate range: midpoint
    return (m - lo) / (hi - lo)


def gradient_map(net: Network, x, y, clip_sigmas=3.0) -> GradientMap:
    """Gradient of the cross-entropy loss w.r.t. the pixels of one image."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    raw = input_grad(net, x, np.atleast_1d(y), "cross-entropy")[0]
    return GradientMap(raw=raw, normalized=_normalize_map(raw, clip_sigmas))


def gradient_maps_batch(net: Network, images, labels, clip_sigmas=3.0,
                        batch_size=256):
    """Normalized gradient maps for a whole split (per-image normalization)."""
    maps = np.empty_like(images, dtype=np.float32)
    for lo in range(0, len(images), batch_size):
        x = images[lo:lo + batch_size]
        y = labels[lo:lo + batch_size]
        # summed CE keeps per-example input gradients independent
        raw = input_grad(net, x, y, "cross-entropy")
        for i, r in enumerate(raw):
            maps[lo + i] = _normalize_map(r, clip_sigmas)
    return maps


def gradmap_classification(standard_net: Network, subject_net: Network,
                           data: Dataset, clipped=True, batch_size=256):
    """Accuracy of a naturally trained net on the subject's gradient maps."""
    from robustlab.attacks import _input_shape
    if _input_shape(standard_net) != _input_shape(subject_net):
        raise ShapeError(
            f"gradient-map classification: input shapes differ, "
            f"{_input_shape(standard_net)} vs {_input_shape(subject_net)}")
    clip = 3.0 if clipped else None
    maps = gradient_maps_batch(subject_net, data.images, data.labels, clip,
                               batch_size)
    return accuracy(standard_net, maps, data.labels, batch_size)


# -- attention analyses ------------------------------------------------------

@dataclass
class RobustnessRanking:
    order: np.ndarray           # location index per rank, rank 0 = most robust
    distances: np.ndarray       # mean feature distance per rank (non-decreasing)
    mean_weights: np.ndarray    # mean attention weight per rank

    def __post_init__(self):
        assert np.all(np.diff(self.distances) >= -1e-12)


def _require_attention(net):
    if not net.with_attention:
        raise ValueError("this analysis requires an attention model")


def robustness_ranking(net: Network, data: Dataset, attack_cfg: AttackConfig,
                       per_image=False, batch_size=256) -> RobustnessRanking:
    """Rank locations by clean-vs-adversarial feature distance; report the
    mean attention weight at each rank (averaged over the split)."""
    _require_attention(net)
    dist_sum = None
    weight_sum = None
    rankw_sum = None
    n = 0
    for lo in range(0, len(data), batch_size):
        x = data.images[lo:lo + batch_size]
        y = data.labels[lo:lo + batch_size]
        batch = pgd(net, x, y, attack_cfg)
        with net.frozen():
            out_clean = net.forward(Tensor(x))
            out_adv = net.forward(Tensor(batch.adversarial))
        d = np.linalg.norm(out_clean.local_features.data
                           - out_adv.local_features.data, axis=2)  # (B, N)
        w = out_clean.attention_weights.data
        if dist_sum is None:
            nloc = d.shape[1]
            dist_sum = np.zeros(nloc)
            weight_sum = np.zeros(nloc)
            rankw_sum = np.zeros(nloc)
        dist_sum += d.sum(axis=0)
        weight_sum += w.sum(axis=0)
        if per_image:
            order = np.argsort(d, axis=1, kind="stable")
            rankw_sum += np.take_along_axis(w, order, axis=1).sum(axis=0)
        n += len(x)
    mean_dist = dist_sum / n
    mean_weight = weight_sum / n
    if per_image:
        order = np.argsort(mean_dist, kind="stable")
        return RobustnessRanking(order=order, distances=mean_dist[order],
                                 mean_weights=rankw_sum / n)
    order = np.argsort(mean_dist, kind="stable")  # ties fall back to index order
    return RobustnessRanking(order=order, distances=mean_dist[order],
                             mean_weights=mean_weight[order])


def mean_attention_by_cell(net: Network, data: Dataset, batch_size=256):
    """Mean attention weight per location over a split (fixed-order reduction)."""
    _require_attention(net)
    total = None
    n = 0
    for lo in range(0, len(data), batch_size):
        w = net.forward(Tensor(data.images[lo:lo + batch_size])).attention_weights.data
        total = w.sum(axis=0) if total is None else total + w.sum(axis=0)
        n += w.shape[0]
    return total / n


def render_attention_map(net: Network, x):
    """Attention weights reshaped to the local grid, nearest-neighbor upsampled
    to input resolution and rescaled to [0, 1]."""
    _require_attention(net)
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    out = net.forward(Tensor(x))
    n = out.attention_weights.shape[1]
    gh = gw = int(round(np.sqrt(n)))
    if gh * gw != n:
        raise ShapeError(f"cannot render non-square local grid of {n} locations")
    grid = out.attention_weights.data[0].reshape(gh, gw)
    scale = x.shape[2] // gh
    up = np.kron(grid, np.ones((scale, scale)))
    lo, hi = up.min(), up.max()
    if hi == lo:
        return np.full_like(up, 0.5)
    return (up - lo) / (hi - lo)


# -- artifact writers --------------------------------------------------------

def write_pgm(path, image):
    """Binary PGM (P5, maxval 255, row-major) from a [0, 1] grayscale image."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img.mean(axis=0)  # collapse channels for visualization
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(u8.tobytes())
    return path


def write_png(path, image):
    from PIL import Image
    img = np.asarray(image)
    if img.ndim == 3:
        img = img.mean(axis=0)
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)
    return path


def write_ranking_csv(path, ranking: RobustnessRanking):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "location", "mean_distance", "mean_weight"])
        for rank, (loc, d, w) in enumerate(zip(ranking.order, ranking.distances,
                                               ranking.mean_weights)):
            writer.writerow([rank, int(loc), repr(float(d)), repr(float(w))])
    return path
