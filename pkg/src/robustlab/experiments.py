"""Reusable experiment recipes shared by the scripts and the acceptance suite.

Trained models are cached on disk keyed by the config digest, so re-running
an experiment with unchanged settings only pays for evaluation. Every recipe
returns a plain dict of numbers suitable for JSON logging.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from robustlab.analysis import (AttackSetting, evaluate, gradmap_classification,
                                mean_attention_by_cell, robustness_ranking)
from robustlab.attacks import AttackConfig
from robustlab.data_io import (Dataset, SyntheticSpec, gen_synthetic,
                               load_checkpoint, load_idx,
                               network_from_checkpoint)
from robustlab.training import TrainConfig, train

MNIST_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist"
DEFAULT_CACHE = Path(__file__).resolve().parents[2] / "artifacts"

# evaluation settings mirroring the study's MNIST protocol
PGD40_EVAL = AttackSetting(kind="pgd", epsilon=0.3, alpha=0.01, steps=40, seed=0)
CW30_EVAL = AttackSetting(kind="cw", epsilon=0.3, alpha=0.01, steps=30, seed=0)


def mnist_split(split, limit=None, data_dir=MNIST_DIR):
    prefix = "train" if split == "train" else "t10k"
    data = load_idx(f"{data_dir}/{prefix}-images-idx3-ubyte.gz",
                    f"{data_dir}/{prefix}-labels-idx1-ubyte.gz", split)
    if limit:
        data = Dataset(data.images[:limit], data.labels[:limit], split=split)
    return data


def train_or_load(cfg: TrainConfig, data: Dataset, cache_dir=DEFAULT_CACHE,
                  log=print):
    """Train under cfg unless a checkpoint with the same digest is cached."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{cfg.digest()}.ckpt"
    if path.exists():
        return network_from_checkpoint(load_checkpoint(path))
    if log:
        log(f"training {path.name} ({cfg.regularizer}, lam={cfg.lam}, "
            f"seed={cfg.seed})")
    run_cfg = replace(cfg, checkpoint_path=str(path),
                      metrics_path=str(path) + ".metrics.jsonl")
    return train(data, run_cfg).network


def spearman(a, b):
    """Spearman rank correlation without external dependencies."""
    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v))
        return r
    ra, rb = ranks(np.asarray(a)), ranks(np.asarray(b))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    return float((ra * rb).sum() / denom) if denom else 0.0


# -- MNIST robust-training comparison ----------------------------------------

def mnist_train_config(regularizer, lam, seed, epochs=5):
    """Desk-scale MNIST setup: PGD-10 train adversary, 5 epochs total.

    Adam at a small rate is load-bearing here: with this adversary, SGD
    spends the whole budget stuck at the uniform predictor (CE = ln 10).
    Batch 16 buys the most optimizer steps per epoch within the budget.
    """
    return TrainConfig(
        lam=lam, regularizer=regularizer, arch="mnist_cnn",
        attack=AttackConfig(epsilon=0.3, alpha=0.03, steps=10),
        optimizer="adam", lr=3e-4, epochs=epochs, batch_size=16, seed=seed)


def mnist_paired_phases(regularizer, lam, seed):
    """Pairing-regularized training as a two-phase schedule.

    Switching the regularizer on from the first step collapses the model
    (the pairing term dominates while features are still noise, and the
    easiest way to satisfy it is to predict a constant). Training plain for
    3 epochs first and regularized for the last 2 keeps the 5-epoch budget
    and sidesteps the collapse.
    """
    return [mnist_train_config("none", 0.0, seed, epochs=3),
            mnist_train_config(regularizer, lam, seed, epochs=2)]


def mnist_natural_config(seed):
    """Plain training: the epsilon=0 adversary is the identity."""
    return TrainConfig(
        lam=0.0, regularizer="none", arch="mnist_cnn",
        attack=AttackConfig(epsilon=0.0, steps=1, random_start=False),
        optimizer="adam", lr=3e-4, epochs=5, batch_size=16, seed=seed)


def phases_key(cfgs):
    return "phases_" + "_".join(c.digest()[:8] for c in cfgs)


def train_phases(train_data, cfgs, cache_dir=DEFAULT_CACHE, log=print):
    """Train a sequence of configs, passing the network along.

    Every phase boundary starts a fresh optimizer state (a new train call),
    and the checkpoint after each phase is cached, so schedules sharing a
    prefix (e.g. the plain warmup phase) reuse each other's work.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    paths = [cache_dir / f"{phases_key(cfgs[:i + 1])}.ckpt"
             for i in range(len(cfgs))]
    start, net = 0, None
    for i in range(len(cfgs) - 1, -1, -1):
        if paths[i].exists():
            net = network_from_checkpoint(load_checkpoint(paths[i]))
            start = i + 1
            break
    for i in range(start, len(cfgs)):
        if log:
            c = cfgs[i]
            log(f"phase {i}: {c.regularizer} lam={c.lam} "
                f"eps={c.attack.epsilon} epochs={c.epochs} seed={c.seed}")
        net = train(train_data, replace(cfgs[i], checkpoint_path=str(paths[i])),
                    net=net).network
    return net


def _eval_model(net, data, settings, cache_key=None, cache_dir=DEFAULT_CACHE):
    """Evaluate with an optional JSON result cache keyed by the model digest."""
    path = None
    if cache_key:
        labels = "_".join(s.label().replace(":", "-") for s in settings)
        path = Path(cache_dir) / f"eval_{cache_key}_{labels}_{len(data)}.json"
        if path.exists():
            with open(path) as fh:
                return json.load(fh)
    report = evaluate(net, data, settings)
    cells = {"natural": report.natural_accuracy, **report.cells}
    if path:
        save_results(path, cells)
    return cells


def mnist_pair_experiment(seeds=(0, 1, 2), n_train=10_000, n_eval=2_000,
                          cache_dir=DEFAULT_CACHE, log=print):
    """Adversarial training with and without the feature regularizer.

    Returns per-seed natural and PGD-40 robust accuracies for both variants
    plus the mean robust-accuracy gap (regularized minus plain).
    """
    train_data = mnist_split("train", n_train)
    eval_data = mnist_split("test", n_eval)
    results = {"at": [], "at_reg": [], "seeds": list(seeds),
               "n_train": n_train, "n_eval": n_eval}
    for seed in seeds:
        for key, cfgs in (
                ("at", [mnist_train_config("none", 0.0, seed)]),
                ("at_reg", mnist_paired_phases("feature-l2", 0.1, seed))):
            net = train_phases(train_data, cfgs, cache_dir, log)
            cell = _eval_model(net, eval_data, [PGD40_EVAL],
                               phases_key(cfgs), cache_dir)
            if log:
                log(f"seed {seed} {key}: {cell}")
            results[key].append(cell)
    robust_key = PGD40_EVAL.label()
    results["mean_robust_gap"] = float(
        np.mean([r[robust_key] for r in results["at_reg"]])
        - np.mean([r[robust_key] for r in results["at"]]))
    return results


def alp_experiment(seeds=(0, 1, 2), n_train=10_000, n_eval=2_000,
                   cache_dir=DEFAULT_CACHE, log=print):
    """Feature regularizer vs adversarial logit pairing under CW-30."""
    train_data = mnist_split("train", n_train)
    eval_data = mnist_split("test", n_eval)
    results = {"at_reg": [], "alp": [], "seeds": list(seeds)}
    for seed in seeds:
        for key, reg in (("at_reg", "feature-l2"), ("alp", "logit-pairing")):
            cfgs = mnist_paired_phases(reg, 0.1, seed)
            net = train_phases(train_data, cfgs, cache_dir, log)
            cell = _eval_model(net, eval_data, [CW30_EVAL],
                               phases_key(cfgs), cache_dir)
            if log:
                log(f"seed {seed} {key}: {cell}")
            results[key].append(cell)
    cw_key = CW30_EVAL.label()
    results["mean_cw_gap"] = float(
        np.mean([r[cw_key] for r in results["at_reg"]])
        - np.mean([r[cw_key] for r in results["alp"]]))
    return results


def gradmap_experiment(n_eval=2_000, cache_dir=DEFAULT_CACHE, log=print,
                       robust_seed=0, scorer_seed=0, standard_seed=1):
    """Score gradient maps of a robust and a standard model with a natural net.

    The scorer and the standard subject are naturally trained with different
    seeds so the standard subject is not scoring its own maps.
    """
    train_data = mnist_split("train", 10_000)
    eval_data = mnist_split("test", n_eval)
    scorer_cfg = mnist_natural_config(scorer_seed)
    standard_cfg = mnist_natural_config(standard_seed)
    robust_cfgs = mnist_paired_phases("feature-l2", 0.1, robust_seed)
    cached = (Path(cache_dir) / f"gradmap_{scorer_cfg.digest()}_"
              f"{standard_cfg.digest()}_{phases_key(robust_cfgs)}_{n_eval}.json")
    if cached.exists():
        with open(cached) as fh:
            return json.load(fh)
    scorer = train_or_load(scorer_cfg, train_data, cache_dir, log)
    standard = train_or_load(standard_cfg, train_data, cache_dir, log)
    robust = train_phases(train_data, robust_cfgs, cache_dir, log)
    out = {}
    for mode, clipped in (("clipped", True), ("unclipped", False)):
        out[mode] = {
            "robust": gradmap_classification(scorer, robust, eval_data, clipped),
            "standard": gradmap_classification(scorer, standard, eval_data, clipped),
        }
        if log:
            log(f"gradmap {mode}: {out[mode]}")
    save_results(cached, out)
    return out


# -- synthetic attention study -----------------------------------------------

# Direct adversarial training collapses the small attention model to the
# uniform predictor (the fresh net's logit margins are tiny, so even a weak
# adversary flips most predictions and SGD settles at chance). The working
# recipe is a curriculum: fit naturally first, then raise the train adversary's
# epsilon in stages at a much lower learning rate.
ATTENTION_CURRICULUM = (
    # (epsilon, alpha, epochs, lr, lam)
    (0.0, 0.0, 10, 1e-2, 0.0),
    (0.02, 0.01, 4, 1e-3, 0.1),
    (0.05, 0.025, 4, 1e-3, 0.1),
    (0.1, 0.05, 8, 1e-3, 0.1),
)


def attention_curriculum_phases(spec, seed):
    """Build the curriculum as a list of train configs."""
    cfgs = []
    for eps, alpha, epochs, lr, lam in ATTENTION_CURRICULUM:
        attack = (AttackConfig(epsilon=0.0, steps=1, random_start=False)
                  if eps == 0.0 else
                  AttackConfig(epsilon=eps, alpha=alpha, steps=3))
        cfgs.append(TrainConfig(
            lam=lam, regularizer="none" if lam == 0.0 else "feature-l2",
            attention=True, arch="mini_resnet", widths=(4, 4, 8, 16),
            in_channels=spec.channels, input_hw=spec.grid * spec.cell,
            num_classes=spec.classes, attack=attack, lr=lr,
            epochs=epochs, batch_size=64, seed=seed))
    return cfgs


def attention_synthetic_experiment(seed=0, n_train=1_024, n_eval=512,
                                   cache_dir=DEFAULT_CACHE, log=print):
    """Adversarially train an attention model on the synthetic robust vs
    non-robust feature dataset, then compare attention mass at the designated
    robust and non-robust cells and correlate weight with robustness rank.
    """
    spec = SyntheticSpec(n_images=n_train + n_eval, seed=seed)
    data = gen_synthetic(spec)
    train_data = Dataset(data.images[:n_train], data.labels[:n_train],
                         provenance=data.provenance)
    eval_data = Dataset(data.images[n_train:], data.labels[n_train:],
                        provenance=data.provenance)
    net = train_phases(train_data, attention_curriculum_phases(spec, seed),
                       cache_dir, log)
    attack = AttackConfig(epsilon=spec.epsilon, alpha=0.05, steps=5, seed=1)
    ranking = robustness_ranking(net, eval_data, attack)
    weights = mean_attention_by_cell(net, eval_data)
    robust_cell = int(data.provenance["robust_cells"][0])
    nonrobust_cell = int(data.provenance["nonrobust_cells"][0])
    return {
        "spearman_rank_vs_weight": spearman(np.arange(len(ranking.order)),
                                            ranking.mean_weights),
        "robust_cell_weight": float(weights[robust_cell]),
        "nonrobust_cell_weight": float(weights[nonrobust_cell]),
        "weight_factor": float(weights[robust_cell]
                               / max(weights[nonrobust_cell], 1e-12)),
        "ranking_order": ranking.order.tolist(),
        "robust_cell": robust_cell,
        "nonrobust_cell": nonrobust_cell,
    }


def save_results(path, results):
    with open(path, "w") as fh:
        json.dump(results, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path
