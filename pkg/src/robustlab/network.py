"""Model definitions: MNIST CNN, miniature residual network, attention head.

The attention head scores each spatial location of the last conv/residual
stage against the global feature with a one-hidden-layer ReLU estimator,
softmax-normalizes the scores into weights, and replaces the global
feature with the weighted sum of local features for classification.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from robustlab import tensor as T
from robustlab.tensor import ShapeError, Tensor


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class ForwardOutputs:
    """Everything a single forward pass produces, batched along axis 0."""

    local_features: Tensor        # (B, N, D)
    global_feature: Tensor        # (B, Dg)
    compat_scores: Tensor | None  # (B, N), attention models only
    attention_weights: Tensor | None  # (B, N)
    descriptor: Tensor            # (B, D) attention, else pooled feature
    logits: Tensor                # (B, K)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Network:
    """An ordered layer graph with named parameter tensors.

    ``spec`` is a plain dict describing the architecture well enough to
    rebuild it (used by checkpointing). Forward is a pure function of
    (parameters, input); parameter shapes are fixed after construction.
    """

    def __init__(self, spec, layers, params, num_classes):
        self.spec = spec
        self.layers = layers
        self.params = params
        self.num_classes = num_classes

    @property
    def with_attention(self):
        return bool(self.spec.get("with_attention", False))

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def set_requires_grad(self, flag):
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop recording parameter gradients (attack passes)."""
        self.set_requires_grad(False)
        try:
            yield self
        finally:
            self.set_requires_grad(True)

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    # -- forward -------------------------------------------------------------

    def forward(self, x) -> ForwardOutputs:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.params["cls.w"].dtype))
        arch = self.spec["arch"]
        if arch == "mnist_cnn":
            return self._forward_mnist(x)
        if arch == "mini_resnet":
            return self._forward_resnet(x)
        raise ValueError(f"unknown architecture {arch!r}")

    def logits(self, x) -> Tensor:
        return self.forward(x).logits

    def predict(self, x) -> np.ndarray:
        return self.logits(x).data.argmax(axis=1)

    def _dense(self, name, x):
        return T.add(T.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _conv(self, name, x, stride=1, padding=1):
        return T.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                        stride=stride, padding=padding)

    def _attention(self, local_map, g):
        """local_map: (B, D, H, W) -> (local, scores, weights, descriptor)."""
        b, d, h, w = local_map.shape
        local = T.reshape(local_map, (b, d, h * w))
        local = _transpose_bnd(local)  # (B, N, D)
        estimator = self.spec.get("attention_estimator", "mlp")
        if estimator == "mlp":
            scores = attention_scores(local, g, self.params)
        else:
            scores = linear_attention_scores(local, g, self.params)
        weights, descriptor = attention_pool(local, scores)
        return local, scores, weights, descriptor

    def _forward_mnist(self, x):
        if x.ndim != 4 or x.shape[1:] != (1, 28, 28):
            raise ShapeError(f"mnist_cnn expects (B, 1, 28, 28) input, got {x.shape}")
        h = T.relu(self._conv("conv1", x))
        h = T.maxpool2d(h, 2)
        h = T.relu(self._conv("conv2", h))
        h = T.maxpool2d(h, 2)                      # (B, 64, 7, 7): last conv stage
        local_map = h
        b = x.shape[0]
        flat = T.reshape(h, (b, 64 * 7 * 7))
        g = T.relu(self._dense("fc1", flat))       # (B, 1024)
        if self.with_attention:
            local, scores, weights, descriptor = self._attention(local_map, g)
            logits = self._dense("cls", descriptor)
        else:
            local = _transpose_bnd(T.reshape(local_map, (b, 64, 49)))
            scores = weights = None
            descriptor = g
            logits = self._dense("cls", g)
        return ForwardOutputs(local, g, scores, weights, descriptor, logits)

    def _forward_resnet(self, x):
        c_in = self.spec["in_channels"]
        hw = self.spec["input_hw"]
        if x.ndim != 4 or x.shape[1:] != (c_in, hw, hw):
            raise ShapeError(f"mini_resnet expects (B, {c_in}, {hw}, {hw}) input, got {x.shape}")
        h = T.relu(self._conv("stem", x))
        h = self._res_block("block1", h, stride=1)
        h = self._res_block("block2", h, stride=2)
        h = self._res_block("block3", h, stride=2)  # (B, w3, hw/4, hw/4)
        local_map = h
        b, d, gh, gw = h.shape
        if self.with_attention:
            # global head: maxpool2 -> conv3x3 same -> maxpool over the rest
            g = T.maxpool2d(h, 2)
            g = self._conv("ghead", g, padding=1)
            g = T.global_maxpool2d(g)               # (B, w3)
            local, scores, weights, descriptor = self._attention(local_map, g)
            logits = self._dense("cls", descriptor)
        else:
            local = _transpose_bnd(T.reshape(local_map, (b, d, gh * gw)))
            g = T.tmean(T.reshape(local_map, (b, d, gh * gw)), axis=2)  # global average pool
            scores = weights = None
            descriptor = g
            logits = self._dense("cls", g)
        return ForwardOutputs(local, g, scores, weights, descriptor, logits)

    def _res_block(self, name, x, stride):
        h = T.relu(self._conv(f"{name}.conv1", x, stride=stride, padding=1))
        h = self._conv(f"{name}.conv2", h, padding=1)
        if f"{name}.proj.w" in self.params:
            skip = T.conv2d(x, self.params[f"{name}.proj.w"], stride=stride, padding=0)
        else:
            skip = x
        return T.relu(T.add(h, skip))


def _transpose_bnd(t):
    """(B, D, N) -> (B, N, D) without a dedicated transpose primitive."""
    b, d, n = t.shape

    def bwd(g):
        if t.requires_grad:
            t._accum_grad(g.transpose(0, 2, 1))
    out = Tensor(np.ascontiguousarray(t.data.transpose(0, 2, 1)),
                 requires_grad=t.requires_grad, _parents=(t,), _backward=bwd)
    if not t.requires_grad:
        out._parents, out._backward = (), None
    return out


# -- attention ops -----------------------------------------------------------

def _with_batch(local, g=None):
    if local.ndim == 2:
        local = T.reshape(local, (1,) + local.shape)
        if g is not None and g.ndim == 1:
            g = T.reshape(g, (1,) + g.shape)
        return local, g, True
    return local, g, False


def attention_scores(local, g, params, prefix="attn"):
    """Non-linear compatibility score per location: MLP(concat(l_n, g)).

    The estimator is shared across locations; hidden width is set by the
    parameter shapes (default 64 at build time).
    """
    local, g, squeeze = _with_batch(local, g)
    b, n, d = local.shape
    dg = g.shape[1]
    w1 = params[f"{prefix}.w1"]
    if w1.shape[0] != d + dg:
        raise ShapeError(
            f"attention estimator expects input width {w1.shape[0]}, got {d}+{dg}")
    tiled_g = T.add(T.reshape(g, (b, 1, dg)), Tensor(np.zeros((b, n, dg), dtype=g.dtype)))
    inp = T.reshape(T.concat([local, tiled_g], axis=2), (b * n, d + dg))
    hid = T.relu(T.add(T.matmul(inp, w1), params[f"{prefix}.b1"]))
    out = T.add(T.matmul(hid, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    scores = T.reshape(out, (b, n))
    return T.reshape(scores, (n,)) if squeeze else scores


def linear_attention_scores(local, g, params, prefix="attn"):
    """Comparison baseline: a single learned linear map of concat(l_n, g)."""
    local, g, squeeze = _with_batch(local, g)
    b, n, d = local.shape
    dg = g.shape[1]
    w = params[f"{prefix}.w"]
    if w.shape[0] != d + dg:
        raise ShapeError(
            f"linear attention expects input width {w.shape[0]}, got {d}+{dg}")
    tiled_g = T.add(T.reshape(g, (b, 1, dg)), Tensor(np.zeros((b, n, dg), dtype=g.dtype)))
    inp = T.reshape(T.concat([local, tiled_g], axis=2), (b * n, d + dg))
    out = T.add(T.matmul(inp, w), params[f"{prefix}.b"])
    scores = T.reshape(out, (b, n))
    return T.reshape(scores, (n,)) if squeeze else scores


def attention_pool(local, scores):
    """softmax the scores into weights; descriptor = sum_n w_n * l_n."""
    local, _, squeeze = _with_batch(local)
    if scores.ndim == 1:
        scores = T.reshape(scores, (1,) + scores.shape)
    b, n, d = local.shape
    if scores.shape != (b, n):
        raise ShapeError(f"attention_pool: scores {scores.shape} vs local {local.shape}")
    weights = T.softmax(scores, axis=1)
    descriptor = T.tsum(T.mul(T.reshape(weights, (b, n, 1)), local), axis=1)
    if squeeze:
        return T.reshape(weights, (n,)), T.reshape(descriptor, (d,))
    return weights, descriptor


# -- builders ----------------------------------------------------------------

def _conv_params(rng, name, cin, cout, k, dtype, params):
    params[f"{name}.w"] = Tensor(
        _he_normal(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


def _dense_params(rng, name, din, dout, dtype, params):
    params[f"{name}.w"] = Tensor(
        _he_normal(rng, (din, dout), din, dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)


def _attention_params(rng, d, dg, hidden, dtype, params, estimator="mlp"):
    if estimator == "mlp":
        _dense_params(rng, "attn", d + dg, hidden, dtype, params)
        params["attn.w1"] = params.pop("attn.w")
        params["attn.b1"] = params.pop("attn.b")
        _dense_params(rng, "attn2", hidden, 1, dtype, params)
        params["attn.w2"] = params.pop("attn2.w")
        params["attn.b2"] = params.pop("attn2.b")
    else:
        _dense_params(rng, "attn", d + dg, 1, dtype, params)


def build_mnist_cnn(with_attention=False, seed=0, dtype=np.float32,
                    attention_hidden=64, attention_estimator="mlp"):
    """Two conv layers (32, 64 filters, 3x3) + dense 1024 + dense 10.

    With attention, the 64-channel last conv stage provides the local
    features (7x7 = 49 locations) and the classifier consumes the
    attention descriptor instead of the 1024-wide global feature.
    """
    rng = np.random.default_rng(seed)
    params = {}
    _conv_params(rng, "conv1", 1, 32, 3, dtype, params)
    _conv_params(rng, "conv2", 32, 64, 3, dtype, params)
    _dense_params(rng, "fc1", 64 * 7 * 7, 1024, dtype, params)
    if with_attention:
        _attention_params(rng, 64, 1024, attention_hidden, dtype, params,
                          attention_estimator)
        _dense_params(rng, "cls", 64, 10, dtype, params)
    else:
        _dense_params(rng, "cls", 1024, 10, dtype, params)
    spec = {"arch": "mnist_cnn", "with_attention": with_attention, "seed": seed,
            "attention_hidden": attention_hidden,
            "attention_estimator": attention_estimator}
    layers = [
        LayerSpec("conv", {"filters": 32, "kernel": 3, "padding": 1}),
        LayerSpec("relu"), LayerSpec("maxpool", {"kernel": 2}),
        LayerSpec("conv", {"filters": 64, "kernel": 3, "padding": 1}),
        LayerSpec("relu"), LayerSpec("maxpool", {"kernel": 2}),
        LayerSpec("flatten"), LayerSpec("dense", {"width": 1024}), LayerSpec("relu"),
    ]
    if with_attention:
        layers.append(LayerSpec("attention-head", {"hidden": attention_hidden}))
    layers.append(LayerSpec("classifier", {"classes": 10}))
    net = Network(spec, layers, params, num_classes=10)
    _validate_forward(net, (1, 1, 28, 28))
    return net


def build_mini_resnet(with_attention=False, widths=(8, 8, 16, 32), seed=0,
                      dtype=np.float32, in_channels=3, input_hw=32,
                      num_classes=10, attention_hidden=64,
                      attention_estimator="mlp"):
    """Stem conv + three residual blocks (strides 1, 2, 2) + head.

    The last block's output map provides the local features; with
    attention the global feature comes from a conv sandwiched between two
    max-pooling layers, otherwise global average pooling feeds the
    classifier directly.
    """
    widths = list(widths)
    if len(widths) != 4 or any(w <= 0 for w in widths):
        raise ShapeError(f"widths must be 4 positive integers, got {widths}")
    if input_hw % 8 != 0:
        raise ShapeError(f"input size {input_hw} incompatible with the stride schedule")
    rng = np.random.default_rng(seed)
    params = {}
    _conv_params(rng, "stem", in_channels, widths[0], 3, dtype, params)
    cin = widths[0]
    for i, (cout, stride) in enumerate(zip(widths[1:], (1, 2, 2)), start=1):
        _conv_params(rng, f"block{i}.conv1", cin, cout, 3, dtype, params)
        _conv_params(rng, f"block{i}.conv2", cout, cout, 3, dtype, params)
        if stride != 1 or cin != cout:
            params[f"block{i}.proj.w"] = Tensor(
                _he_normal(rng, (cout, cin, 1, 1), cin, dtype), requires_grad=True)
        cin = cout
    d = widths[3]
    if with_attention:
        _conv_params(rng, "ghead", d, d, 3, dtype, params)
        _attention_params(rng, d, d, attention_hidden, dtype, params,
                          attention_estimator)
    _dense_params(rng, "cls", d, num_classes, dtype, params)
    spec = {"arch": "mini_resnet", "with_attention": with_attention,
            "widths": widths, "seed": seed, "in_channels": in_channels,
            "input_hw": input_hw, "num_classes": num_classes,
            "attention_hidden": attention_hidden,
            "attention_estimator": attention_estimator}
    layers = [LayerSpec("conv", {"filters": widths[0], "kernel": 3})]
    for i, w in enumerate(widths[1:], start=1):
        layers.append(LayerSpec("residual-block", {"filters": w}))
    layers.append(LayerSpec("global-head" if with_attention else "flatten"))
    if with_attention:
        layers.append(LayerSpec("attention-head", {"hidden": attention_hidden}))
    layers.append(LayerSpec("classifier", {"classes": num_classes}))
    net = Network(spec, layers, params, num_classes=num_classes)
    _validate_forward(net, (1, in_channels, input_hw, input_hw))
    return net


def build_network(spec):
    """Rebuild a network from its checkpointed spec dict."""
    s = dict(spec)
    arch = s.pop("arch")
    if arch == "mnist_cnn":
        return build_mnist_cnn(
            with_attention=s["with_attention"], seed=s.get("seed", 0),
            attention_hidden=s.get("attention_hidden", 64),
            attention_estimator=s.get("attention_estimator", "mlp"))
    if arch == "mini_resnet":
        return build_mini_resnet(
            with_attention=s["with_attention"], widths=s["widths"],
            seed=s.get("seed", 0), in_channels=s.get("in_channels", 3),
            input_hw=s.get("input_hw", 32), num_classes=s.get("num_classes", 10),
            attention_hidden=s.get("attention_hidden", 64),
            attention_estimator=s.get("attention_estimator", "mlp"))
    raise ValueError(f"unknown architecture {arch!r}")


def _validate_forward(net, input_shape):
    """Build-time shape compatibility check: run one dummy forward."""
    dtype = net.params["cls.w"].dtype
    out = net.forward(Tensor(np.zeros(input_shape, dtype=dtype)))
    if out.logits.shape != (input_shape[0], net.num_classes):
        raise ShapeError(
            f"classifier produced {out.logits.shape}, expected {net.num_classes} classes")
