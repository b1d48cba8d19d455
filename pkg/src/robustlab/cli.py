"""Command-line front end for the laboratory.

Subcommands: train, eval, attack, gradmap, attnmap, attn-analysis,
gradmap-classify. Every run writes exactly one JSON manifest next to its
primary artifact recording the resolved configuration, all input and output
paths, the seed, start/end timestamps and a sha256 digest of each artifact.

Config resolution order (later wins): built-in preset, JSON config file,
``--set key=value`` flags. The fully resolved config is echoed into the
manifest so a run can be reproduced from the manifest alone.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from robustlab.analysis import (AttackSetting, evaluate, gradient_map,
                                gradmap_classification, render_attention_map,
                                robustness_ranking, write_pgm,
                                write_ranking_csv)
from robustlab.attacks import AttackConfig, pgd
from robustlab.data_io import (Dataset, SyntheticSpec, gen_synthetic, load_checkpoint,
                               load_idx, network_from_checkpoint)
from robustlab.training import TrainConfig, train

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}

# Desk-scale named presets: the four model variants of the study plus the
# plain/regularized MNIST pair. attention is only meaningful for mini_resnet.
PRESETS = {
    "mnist-at": {
        "arch": "mnist_cnn", "regularizer": "none", "lam": 0.0,
        "attack": {"epsilon": 0.3, "alpha": 0.03, "steps": 10},
        "epochs": 5, "batch_size": 16, "optimizer": "adam", "lr": 3e-4,
    },
    "mnist-at-reg": {
        "arch": "mnist_cnn", "regularizer": "feature-l2", "lam": 0.1,
        "attack": {"epsilon": 0.3, "alpha": 0.03, "steps": 10},
        "epochs": 5, "batch_size": 16, "optimizer": "adam", "lr": 3e-4,
    },
    "mini-at": {
        "arch": "mini_resnet", "regularizer": "none", "lam": 0.0,
        "attack": {"epsilon": 8 / 255, "alpha": 2 / 255, "steps": 5},
        "epochs": 10, "batch_size": 128, "lr": 0.01,
    },
    "mini-at-reg": {
        "arch": "mini_resnet", "regularizer": "feature-l2", "lam": 0.1,
        "attack": {"epsilon": 8 / 255, "alpha": 2 / 255, "steps": 5},
        "epochs": 10, "batch_size": 128, "lr": 0.01,
    },
    "mini-at-att": {
        "arch": "mini_resnet", "attention": True, "regularizer": "none",
        "lam": 0.0,
        "attack": {"epsilon": 8 / 255, "alpha": 2 / 255, "steps": 5},
        "epochs": 10, "batch_size": 128, "lr": 0.01,
    },
    "mini-at-att-reg": {
        "arch": "mini_resnet", "attention": True, "regularizer": "feature-l2",
        "lam": 0.1,
        "attack": {"epsilon": 8 / 255, "alpha": 2 / 255, "steps": 5},
        "epochs": 10, "batch_size": 128, "lr": 0.01,
    },
}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors map to exit code 1, per contract."""

    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    seed: int = 0
    started: float = 0.0
    finished: float = 0.0
    artifact_digests: dict = field(default_factory=dict)

    def record(self, path):
        path = str(path)
        self.outputs.append(path)
        with open(path, "rb") as fh:
            self.artifact_digests[path] = hashlib.sha256(fh.read()).hexdigest()

    def write(self, path):
        self.finished = time.time()
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, sort_keys=True, indent=2)
            fh.write("\n")
        return path


def _deep_update(base, overrides):
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _parse_set(pairs):
    """Turn ["attack.steps=10", "lam=0.1"] into a nested override dict."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings like feature-l2
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def resolve_train_config(preset=None, config_path=None, sets=None) -> TrainConfig:
    """Preset < config file < --set flags; returns a validated TrainConfig."""
    merged = {}
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from "
                             f"{sorted(PRESETS)}")
        _deep_update(merged, json.loads(json.dumps(PRESETS[preset])))
    if config_path:
        with open(config_path) as fh:
            _deep_update(merged, json.load(fh))
    _deep_update(merged, _parse_set(sets))
    attack = merged.pop("attack", None)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(merged) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if "widths" in merged:
        merged["widths"] = tuple(merged["widths"])
    if "lr_milestones" in merged:
        merged["lr_milestones"] = tuple(merged["lr_milestones"])
    cfg = TrainConfig(**merged)
    if attack is not None:
        cfg.attack = AttackConfig(**attack)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def load_dataset(spec, data_dir="data/mnist", synthetic=None, limit=None) -> Dataset:
    """Resolve a --data argument.

    Accepted forms: "mnist-train", "mnist-test", "synthetic" (parameters from
    the optional synthetic dict), or a path to an .npz with images/labels.
    """
    if spec in ("mnist-train", "mnist-test"):
        split = spec.split("-")[1]
        images, labels = MNIST_FILES[split]
        data = load_idx(f"{data_dir}/{images}", f"{data_dir}/{labels}", split)
    elif spec == "synthetic":
        data = gen_synthetic(SyntheticSpec(**(synthetic or {})))
    elif spec.endswith(".npz"):
        blob = np.load(spec)
        data = Dataset(blob["images"], blob["labels"], split=spec)
    else:
        raise UsageError(f"unrecognized data spec {spec!r}; expected "
                         "mnist-train, mnist-test, synthetic, or a .npz path")
    if limit:
        data = Dataset(data.images[:limit], data.labels[:limit],
                       split=data.split, provenance=data.provenance)
    return data


def _load_network(path):
    return network_from_checkpoint(load_checkpoint(path))


def _require_attention_checkpoint(net, subcommand):
    if not net.with_attention:
        raise UsageError(f"{subcommand} needs an attention model, but the "
                         "checkpoint was trained without attention")


def _attack_config_from_args(args):
    return AttackConfig(epsilon=args.epsilon, alpha=args.alpha,
                        steps=args.steps,
                        random_start=not args.no_random_start,
                        loss_kind=args.loss, seed=args.seed).validate()


# -- subcommand implementations ----------------------------------------------

def cmd_train(args):
    cfg = resolve_train_config(args.preset, args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.checkpoint_path = args.out
    cfg.metrics_path = args.metrics or f"{args.out}.metrics.jsonl"
    manifest = RunManifest("train", asdict(cfg), inputs=[args.data],
                           seed=cfg.seed, started=time.time())
    data = load_dataset(args.data, args.data_dir, limit=args.limit)
    state = train(data, cfg)
    for path in state.checkpoint_paths:
        manifest.record(path)
    manifest.record(cfg.metrics_path)
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    print(f"trained {state.step} steps; checkpoint at {args.out}")
    return 0


def _suite_from_json(items, transfer_net):
    suite = []
    for item in items:
        setting = AttackSetting(**item)
        if setting.transfer:
            setting.transfer_source = transfer_net
        suite.append(setting)
    return suite


def cmd_eval(args):
    net = _load_network(args.checkpoint)
    transfer_net = _load_network(args.transfer_source) if args.transfer_source else None
    with open(args.suite) as fh:
        suite_cfg = json.load(fh)
    suite = _suite_from_json(suite_cfg.get("attacks", []), transfer_net)
    manifest = RunManifest("eval", suite_cfg,
                           inputs=[args.checkpoint, args.suite, args.data],
                           seed=args.seed or 0, started=time.time())
    data = load_dataset(args.data, args.data_dir, limit=args.limit)
    report = evaluate(net, data, suite,
                      provenance={"checkpoint": args.checkpoint,
                                  "data": args.data, "n": len(data)})
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    manifest.record(args.out)
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    print(report.to_json())
    return 0


def cmd_attack(args):
    net = _load_network(args.checkpoint)
    cfg = _attack_config_from_args(args)
    manifest = RunManifest("attack", asdict(cfg),
                           inputs=[args.checkpoint, args.data],
                           seed=cfg.seed, started=time.time())
    data = load_dataset(args.data, args.data_dir, limit=args.limit)
    batch = pgd(net, data.images, data.labels, cfg)
    np.savez(args.out, clean=batch.clean, adversarial=batch.adversarial,
             labels=batch.labels, loss_before=batch.loss_before,
             loss_after=batch.loss_after, epsilon=batch.epsilon)
    manifest.record(args.out)
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    fooled = float((batch.loss_after > batch.loss_before).mean())
    print(f"attacked {len(data)} examples; loss increased on {fooled:.0%}")
    return 0


def cmd_gradmap(args):
    net = _load_network(args.checkpoint)
    data = load_dataset(args.data, args.data_dir, limit=args.limit)
    manifest = RunManifest("gradmap", {"index": args.index, "clip": not args.no_clip},
                           inputs=[args.checkpoint, args.data],
                           started=time.time())
    clip = None if args.no_clip else args.clip_sigmas
    gm = gradient_map(net, data.images[args.index], data.labels[args.index],
                      clip_sigmas=clip)
    write_pgm(args.out, gm.normalized)
    manifest.record(args.out)
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    print(f"gradient map for example {args.index} written to {args.out}")
    return 0


def cmd_attnmap(args):
    net = _load_network(args.checkpoint)
    _require_attention_checkpoint(net, "attnmap")
    data = load_dataset(args.data, args.data_dir, limit=args.limit)
    manifest = RunManifest("attnmap", {"index": args.index},
                           inputs=[args.checkpoint, args.data],
                           started=time.time())
    heat = render_attention_map(net, data.images[args.index])
    write_pgm(args.out, heat)
    manifest.record(args.out)
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    print(f"attention map for example {args.index} written to {args.out}")
    return 0


def cmd_attn_analysis(args):
    net = _load_network(args.checkpoint)
    _require_attention_checkpoint(net, "attn-analysis")
    cfg = _attack_config_from_args(args)
    manifest = RunManifest("attn-analysis", asdict(cfg),
                           inputs=[args.checkpoint, args.data],
                           seed=cfg.seed, started=time.time())
    data = load_dataset(args.data, args.data_dir, limit=args.limit)
    ranking = robustness_ranking(net, data, cfg, per_image=args.per_image)
    write_ranking_csv(args.out, ranking)
    manifest.record(args.out)
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    print(f"ranked {len(ranking.order)} locations; csv at {args.out}")
    return 0


def cmd_gradmap_classify(args):
    standard = _load_network(args.standard)
    subject = _load_network(args.checkpoint)
    manifest = RunManifest("gradmap-classify", {"clip": not args.no_clip},
                           inputs=[args.standard, args.checkpoint, args.data],
                           started=time.time())
    data = load_dataset(args.data, args.data_dir, limit=args.limit)
    acc = gradmap_classification(standard, subject, data,
                                 clipped=not args.no_clip)
    result = {"accuracy": acc, "clipped": not args.no_clip, "n": len(data)}
    with open(args.out, "w") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
        fh.write("\n")
    manifest.record(args.out)
    manifest.write(args.manifest or f"{args.out}.manifest.json")
    print(json.dumps(result, sort_keys=True))
    return 0


# -- argument wiring ---------------------------------------------------------

def _add_common(p, with_seed=True):
    p.add_argument("--data", required=True,
                   help="mnist-train | mnist-test | synthetic | path.npz")
    p.add_argument("--data-dir", default="data/mnist")
    p.add_argument("--limit", type=int, default=None,
                   help="use only the first N examples")
    p.add_argument("--manifest", default=None,
                   help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker mode (already the default here)")
    if with_seed:
        p.add_argument("--seed", type=int, default=None)


def _add_attack_flags(p):
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--loss", default="cross-entropy",
                   choices=["cross-entropy", "cw-margin"])


def build_parser():
    parser = _Parser(prog="robustlab",
                     description="Adversarial-training laboratory")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="adversarially train a model")
    p.add_argument("--preset", default=None, choices=sorted(PRESETS))
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted paths reach attack.*)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="accuracy table over an attack suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True, help="JSON: {\"attacks\": [...]}")
    p.add_argument("--transfer-source", default=None)
    p.add_argument("--out", required=True, help="report JSON path")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attack", help="generate adversarial examples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .npz path")
    _add_attack_flags(p)
    _add_common(p, with_seed=False)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("gradmap", help="loss-gradient saliency map as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--no-clip", action="store_true",
                   help="skip the 3-sigma clip, rescale only")
    p.add_argument("--clip-sigmas", type=float, default=3.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_gradmap)

    p = sub.add_parser("attnmap", help="attention heat map as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_attnmap)

    p = sub.add_parser("attn-analysis",
                       help="rank locations by feature robustness")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--out", required=True, help="output CSV path")
    _add_attack_flags(p)
    _add_common(p, with_seed=False)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_attn_analysis)

    p = sub.add_parser("gradmap-classify",
                       help="score a natural net on another net's gradient maps")
    p.add_argument("--standard", required=True,
                   help="naturally trained classifier checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="subject model checkpoint")
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--out", required=True, help="result JSON path")
    _add_common(p)
    p.set_defaults(fn=cmd_gradmap_classify)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"robustlab: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except ValueError as exc:
        # bad flag values, malformed configs, malformed input files
        print(f"robustlab: {exc}", file=sys.stderr)
        return 1
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:
        print(f"robustlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
