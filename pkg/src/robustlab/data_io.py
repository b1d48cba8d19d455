"""Dataset ingestion and persistence.

IDX parsing follows the canonical big-endian layout; checkpoint payloads
are always little-endian regardless of host. Checkpoint writes are atomic
(write-temp-then-rename) and round-trip byte-identically.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"RLCK"
CHECKPOINT_VERSION = 1


class IdxFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray   # (N,) int64
    split: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.split,
                       dict(self.provenance, subset=True))


def _open_maybe_gz(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic, kind):
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw).hexdigest()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: not an IDX file of expected type ({kind})")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: not an IDX file of expected type ({kind}); magic 0x{magic:08X}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise IdxFormatError(
            f"{path}: size mismatch: header promises {dims[0]} items "
            f"({expected} bytes), payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims), digest


def load_idx(images_path, labels_path, split="") -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled by 1/255."""
    images_u8, img_digest = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels_u8, lab_digest = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images_u8.shape[0] != labels_u8.shape[0]:
        raise IdxFormatError(
            f"image/label count mismatch: {images_u8.shape[0]} vs {labels_u8.shape[0]}")
    n, h, w = images_u8.shape
    images = (images_u8.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    return Dataset(images, labels_u8.astype(np.int64), split=split,
                   provenance={"images": {"path": str(images_path), "sha256": img_digest},
                               "labels": {"path": str(labels_path), "sha256": lab_digest}})


# -- synthetic robust/non-robust dataset -------------------------------------

@dataclass
class SyntheticSpec:
    """Ground-truth testbed: class signal lives in designated grid cells.

    Robust cells carry a shift mu_robust that survives any epsilon-bounded
    perturbation (mu_robust > 2 * epsilon); non-robust cells carry a weak
    shift mu_nonrobust < epsilon that an adversary can flip.
    """

    n_robust: int = 1
    mu_robust: float = 0.3
    n_nonrobust: int = 1
    mu_nonrobust: float = 0.05
    noise_std: float = 0.1
    grid: int = 8
    cell: int = 4
    channels: int = 3
    classes: int = 2
    epsilon: float = 0.1
    label_correlation: float = 0.9
    n_images: int = 1000
    seed: int = 0

    def validate(self):
        if self.classes != 2:
            raise ValueError("synthetic generator supports exactly 2 classes")
        if not self.mu_robust > 2 * self.epsilon:
            raise ValueError(
                f"mu_robust {self.mu_robust} must exceed 2*epsilon {2 * self.epsilon}")
        if not self.mu_nonrobust < self.epsilon:
            raise ValueError(
                f"mu_nonrobust {self.mu_nonrobust} must be below epsilon {self.epsilon}")
        if self.n_robust + self.n_nonrobust > self.grid ** 2:
            raise ValueError("more signal cells than grid cells")
        if self.noise_std < 0 or self.n_images <= 0:
            raise ValueError("invalid noise_std or n_images")
        return self


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Noise images around 0.5 with class-conditional shifts at fixed cells."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    hw = spec.grid * spec.cell
    cells = rng.permutation(spec.grid ** 2)
    robust_cells = np.sort(cells[:spec.n_robust])
    nonrobust_cells = np.sort(cells[spec.n_robust:spec.n_robust + spec.n_nonrobust])

    labels = rng.integers(0, 2, spec.n_images)
    images = 0.5 + rng.normal(0.0, spec.noise_std,
                              (spec.n_images, spec.channels, hw, hw))
    signs = np.where(labels == 1, 1.0, -1.0)
    agree = rng.uniform(size=(spec.n_images, spec.n_nonrobust)) < spec.label_correlation
    nr_signs = np.where(agree, signs[:, None], -signs[:, None])

    def cell_slices(c):
        r, q = divmod(int(c), spec.grid)
        return (slice(r * spec.cell, (r + 1) * spec.cell),
                slice(q * spec.cell, (q + 1) * spec.cell))

    for c in robust_cells:
        rs, qs = cell_slices(c)
        images[:, :, rs, qs] += (signs * spec.mu_robust)[:, None, None, None]
    for j, c in enumerate(nonrobust_cells):
        rs, qs = cell_slices(c)
        images[:, :, rs, qs] += (nr_signs[:, j] * spec.mu_nonrobust)[:, None, None, None]

    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, split="synthetic",
                   provenance={"generator_seed": spec.seed,
                               "robust_cells": robust_cells.tolist(),
                               "nonrobust_cells": nonrobust_cells.tolist()})


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    network_spec: dict
    params: dict           # name -> np.ndarray
    step: int = 0
    config_digest: str = ""
    version: int = CHECKPOINT_VERSION


def _header_bytes(ckpt, tensor_table):
    header = {
        "network_spec": ckpt.network_spec,
        "step": ckpt.step,
        "config_digest": ckpt.config_digest,
        "tensors": tensor_table,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, ckpt: Checkpoint):
    table = []
    payloads = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        buf = le.tobytes()
        table.append({"name": name, "dtype": arr.dtype.name,
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(buf)})
        payloads.append(buf)
        offset += len(buf)
    header = _header_bytes(ckpt, table)
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", ckpt.version, len(header)))
            fh.write(header)
            for buf in payloads:
                fh.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expect_config_digest=None) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version} unsupported "
                f"(this build reads version {CHECKPOINT_VERSION})")
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    params = {}
    for entry in header["tensors"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        params[entry["name"]] = arr.astype(entry["dtype"]).reshape(entry["shape"])
    ckpt = Checkpoint(network_spec=header["network_spec"], params=params,
                      step=header["step"], config_digest=header["config_digest"],
                      version=version)
    if expect_config_digest is not None and ckpt.config_digest != expect_config_digest:
        raise CheckpointError(
            f"{path}: checkpoint/config divergence "
            f"({ckpt.config_digest} != {expect_config_digest})")
    return ckpt


def config_digest(obj) -> str:
    """Stable digest of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def checkpoint_from_network(net, step=0, digest=""):
    return Checkpoint(network_spec=net.spec,
                      params={k: v.data for k, v in net.params.items()},
                      step=step, config_digest=digest)


def network_from_checkpoint(ckpt: Checkpoint):
    from robustlab.network import build_network
    net = build_network(ckpt.network_spec)
    for name, tensor in net.params.items():
        if name not in ckpt.params:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        arr = ckpt.params[name]
        if tuple(arr.shape) != tensor.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {arr.shape} != network {tensor.shape}")
        tensor.data = np.array(arr, dtype=tensor.dtype)
    return net
