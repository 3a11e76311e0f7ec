"""Network construction: task backbones, cross-task heads and fusion heads."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import engine
from .engine import LayerParams
from .errors import ConfigurationError, DimensionError

TASKS = ("id", "age", "race", "gender")
DEFAULT_CLASS_COUNTS = {"id": 77, "age": 3, "race": 4, "gender": 2}

CONV_CHANNELS = (16, 32, 64)
CONV_KERNELS = (5, 5, 3)
HEAD_HIDDEN = (64, 64)
CONV_INIT_STD = None  # None: He-scaled, sqrt(2 / fan_in)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TaskDescriptor:
    task: str
    class_count: int
    feature_dim: int

    @classmethod
    def default(cls, task, class_count=None):
        if task not in TASKS:
            raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")
        count = DEFAULT_CLASS_COUNTS[task] if class_count is None else class_count
        if count < 1:
            raise ConfigurationError(f"class count must be positive, got {count}")
        return cls(task, count, 200 if task == "id" else 50)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    relu: bool = True
    pool: int = 0  # max-pool window (stride == window) after the activation; 0 = none


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: Tuple[int, ...]
    layers: Tuple[LayerSpec, ...]
    seed: int = 0
    precision: str = "float32"
    task: str = ""
    conv_std: Optional[float] = CONV_INIT_STD

    def shapes(self):
        """Output shape of every layer; raises on an incompatible chain."""
        shape = tuple(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            if layer.out < 1:
                raise ConfigurationError(f"layer {i}: output size must be positive")
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ConfigurationError(f"layer {i}: conv after a flat layer")
                c, h, w = shape
                try:
                    h = engine.conv_output_extent(h, layer.kernel, layer.stride, layer.padding, "H")
                    w = engine.conv_output_extent(w, layer.kernel, layer.stride, layer.padding, "W")
                    if layer.pool:
                        if layer.pool > h or layer.pool > w:
                            raise ConfigurationError(
                                f"pool window {layer.pool} larger than {h}x{w}")
                        h = (h - layer.pool) // layer.pool + 1
                        w = (w - layer.pool) // layer.pool + 1
                except ConfigurationError as exc:
                    raise ConfigurationError(
                        f"input {tuple(self.input_shape)} too small at stage {i} "
                        f"(conv {layer.kernel}x{layer.kernel}): {exc}") from None
                shape = (layer.out, h, w)
            elif layer.kind == "fc":
                shape = (layer.out,)
            else:
                raise ConfigurationError(f"layer {i}: unknown kind {layer.kind!r}")
            out.append(shape)
        return out

    def to_text(self):
        lines = [
            f"task = {self.task}",
            f"input = {','.join(map(str, self.input_shape))}",
            f"seed = {self.seed}",
            f"precision = {self.precision}",
            f"conv_std = {'he' if self.conv_std is None else repr(self.conv_std)}",
            f"layers = {len(self.layers)}",
        ]
        for i, l in enumerate(self.layers):
            lines.append(
                f"layer{i} = {l.kind} out={l.out} kernel={l.kernel} stride={l.stride} "
                f"padding={l.padding} relu={int(l.relu)} pool={l.pool}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for raw in text.splitlines():
            if not raw.strip():
                continue
            key, sep, value = raw.partition("=")
            if not sep:
                raise ConfigurationError(f"malformed spec line {raw!r}")
            kv[key.strip()] = value.strip()
        try:
            layers = []
            for i in range(int(kv["layers"])):
                kind, *fields = kv[f"layer{i}"].split()
                f = dict(item.split("=", 1) for item in fields)
                layers.append(LayerSpec(kind, int(f["out"]), int(f["kernel"]), int(f["stride"]),
                                        int(f["padding"]), bool(int(f["relu"])), int(f["pool"])))
            return cls(tuple(int(v) for v in kv["input"].split(",")), tuple(layers),
                       int(kv["seed"]), kv["precision"], kv.get("task", ""),
                       None if kv.get("conv_std", "he") == "he" else float(kv["conv_std"]))
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"malformed network spec: {exc}") from None


def _init_params(spec: NetworkSpec):
    if spec.precision not in DTYPES:
        raise ConfigurationError(f"unknown precision {spec.precision!r}")
    dtype = DTYPES[spec.precision]
    rng = np.random.default_rng(spec.seed)
    params = []
    in_shape = tuple(spec.input_shape)
    for layer, out_shape in zip(spec.layers, spec.shapes()):
        if layer.kind == "conv":
            fan_in = in_shape[0] * layer.kernel * layer.kernel
            std = np.sqrt(2.0 / fan_in) if spec.conv_std is None else spec.conv_std
            w = rng.normal(0.0, std, (layer.out, in_shape[0], layer.kernel, layer.kernel))
        else:
            fan_in = int(np.prod(in_shape))
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (layer.out, fan_in))
        params.append(LayerParams(layer.kind, w.astype(dtype), np.zeros(layer.out, dtype=dtype)))
        in_shape = out_shape
    return params


class Network:
    """A spec plus its parameters.

    ``feature_tap`` indexes the last hidden layer (the one before the output
    layer); its post-activation output is the high-level feature.
    """

    def __init__(self, spec: NetworkSpec, params: Optional[List[LayerParams]] = None):
        self.spec = spec
        self.layer_shapes = spec.shapes()
        fc_out = [i for i, l in enumerate(spec.layers) if l.kind == "fc"]
        if not fc_out or fc_out[-1] != len(spec.layers) - 1:
            raise ConfigurationError("network must end in exactly one fully-connected output layer")
        if spec.layers[-1].relu or spec.layers[-1].pool:
            raise ConfigurationError("output layer must be linear")
        self.feature_tap = len(spec.layers) - 2 if len(spec.layers) > 1 else None
        self.params = _init_params(spec) if params is None else list(params)
        self._check_params()

    def _check_params(self):
        if len(self.params) != len(self.spec.layers):
            raise DimensionError(f"{len(self.params)} parameter layers for {len(self.spec.layers)} specs")
        in_shape = tuple(self.spec.input_shape)
        for i, (layer, p, out_shape) in enumerate(zip(self.spec.layers, self.params, self.layer_shapes)):
            if layer.kind == "conv":
                want = (layer.out, in_shape[0], layer.kernel, layer.kernel)
            else:
                want = (layer.out, int(np.prod(in_shape)))
            if p.kind != layer.kind or p.weights.shape != want:
                raise DimensionError(f"layer {i}: parameter shape {p.weights.shape} != {want}")
            in_shape = out_shape

    @property
    def input_shape(self):
        return tuple(self.spec.input_shape)

    @property
    def class_count(self):
        return self.spec.layers[-1].out

    @property
    def feature_dim(self):
        return self.layer_shapes[self.feature_tap][0] if self.feature_tap is not None else None

    @property
    def dtype(self):
        return DTYPES[self.spec.precision]

    def with_params(self, params):
        return Network(self.spec, params)

    def _batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"input shape {x.shape} does not match network input {self.input_shape}")
        return x, False

    def forward(self, x, keep_cache=False):
        """Batched forward pass: returns ``(logits, feature, cache)``."""
        cache = []
        h = x
        feature = None
        for i, (layer, p) in enumerate(zip(self.spec.layers, self.params)):
            entry = {"input": h}
            if layer.kind == "conv":
                cols = engine.im2col(h, layer.kernel, layer.kernel, layer.stride, layer.padding)
                if keep_cache:
                    entry["cols"] = cols
                z = engine.conv2d_forward(h, p, layer.stride, layer.padding, cols=cols)
            else:
                if h.ndim > 2:
                    h = h.reshape(h.shape[0], -1)
                    entry["input"] = h
                z = engine.fc_forward(h, p)
            entry["pre"] = z
            a = engine.relu(z) if layer.relu else z
            if layer.pool:
                a, entry["pool"] = engine.maxpool_forward(a, layer.pool, layer.pool)
            if i == self.feature_tap:
                feature = a
            if keep_cache:
                cache.append(entry)
            h = a
        return h, feature, cache

    def backward(self, cache, dlogits, input_grad=True):
        grads = [None] * len(self.params)
        g = dlogits
        for i in range(len(self.params) - 1, -1, -1):
            layer, p, entry = self.spec.layers[i], self.params[i], cache[i]
            if layer.pool:
                g = engine.maxpool_backward(entry["pool"], g)
            if layer.relu:
                g = engine.relu_backward(entry["pre"], g)
            if layer.kind == "conv":
                bundle = engine.conv2d_backward(entry["input"], p, g, layer.stride, layer.padding,
                                                cols=entry["cols"], need_input_grad=i > 0 or input_grad)
            else:
                bundle = engine.fc_backward(entry["input"], p, g)
            grads[i] = bundle
            g = bundle.input
            if g is None:
                break
            if i > 0 and layer.kind == "fc" and self.spec.layers[i - 1].kind == "conv":
                g = g.reshape((g.shape[0],) + self.layer_shapes[i - 1])
        return grads, g

    def loss_and_grads(self, x, labels, input_grad=True):
        """Mean softmax cross-entropy of a batch and its gradients."""
        xb, single = self._batch(x)
        logits, _, cache = self.forward(xb, keep_cache=True)
        loss, probs, dlogits = engine.softmax_cross_entropy(logits, np.atleast_1d(labels))
        grads, dx = self.backward(cache, dlogits, input_grad)
        if dx is not None and single:
            dx = dx[0]
        return loss, grads, dx, logits

    def predict(self, x, chunk=500):
        """Logits and features for a batch, evaluated in fixed-size chunks."""
        xb, single = self._batch(x)
        logits, feats = [], []
        for start in range(0, xb.shape[0], chunk):
            lg, ft, _ = self.forward(xb[start:start + chunk])
            logits.append(lg)
            feats.append(ft.reshape(ft.shape[0], -1) if ft is not None else None)
        lg = np.concatenate(logits) if logits else np.zeros((0, self.class_count), self.dtype)
        ft = np.concatenate(feats) if feats and feats[0] is not None else None
        if single:
            return lg[0], (ft[0] if ft is not None else None)
        return lg, ft


class LossProbe:
    """Binds labels to a network so ``engine.grad_check`` can drive it."""

    def __init__(self, network: Network, labels):
        self.network = network
        self.labels = labels

    @property
    def params(self):
        return self.network.params

    def loss_and_grads(self, x):
        loss, grads, dx, _ = self.network.loss_and_grads(x, self.labels)
        return loss, grads, dx


def forward_full(network: Network, x):
    """Logits and feature-tap activation for one input (or a batch)."""
    return network.predict(x)


def build_backbone(task: TaskDescriptor, input_shape=(1, 32, 32), seed=0, precision="float32",
                   channels=CONV_CHANNELS, conv_padding="valid", conv_std=CONV_INIT_STD) -> Network:
    """Three conv stages (5x5, 5x5, 3x3; each ReLU + 2x2 max-pool), the feature FC, the output FC.

    ``conv_padding="same"`` pads each conv so only pooling shrinks the
    image; it lets tiny inputs (e.g. 8x8 in gradient checks) survive.
    """
    if len(channels) != 3:
        raise ConfigurationError("backbone needs three conv channel counts")
    if conv_padding not in ("valid", "same"):
        raise ConfigurationError(f"conv_padding must be 'valid' or 'same', got {conv_padding!r}")
    layers = []
    for ch, k in zip(channels, CONV_KERNELS):
        pad = k // 2 if conv_padding == "same" else 0
        layers.append(LayerSpec("conv", ch, k, 1, pad, True, 2))
    layers.append(LayerSpec("fc", task.feature_dim, relu=True))
    layers.append(LayerSpec("fc", task.class_count, relu=False))
    spec = NetworkSpec(tuple(input_shape), tuple(layers), seed, precision, task.task, conv_std)
    return Network(spec)


def _head(input_dim, target_class_count, seed, precision, hidden, task):
    if input_dim < 1 or target_class_count < 1 or any(h < 1 for h in hidden):
        raise ConfigurationError(
            f"head dimensions must be positive (input {input_dim}, classes {target_class_count}, hidden {hidden})")
    layers = tuple(LayerSpec("fc", h, relu=True) for h in hidden)
    layers += (LayerSpec("fc", target_class_count, relu=False),)
    return Network(NetworkSpec((int(input_dim),), layers, seed, precision, task))


def build_cross_task_head(feature_dim, target_class_count, seed=0, precision="float32",
                          hidden=HEAD_HIDDEN, task="") -> Network:
    return _head(feature_dim, target_class_count, seed, precision, hidden, task)


def build_fusion_head(feature_dims: Sequence[int], target_class_count, seed=0, precision="float32",
                      hidden=HEAD_HIDDEN, task="") -> Network:
    """Head over the concatenation of several feature vectors.

    Concatenation itself happens on the data side; the head simply sees an
    input as wide as the sum of ``feature_dims``.
    """
    dims = list(feature_dims)
    if not dims:
        raise ConfigurationError("fusion head needs at least one feature set")
    if any(d < 1 for d in dims):
        raise ConfigurationError(f"feature dims must be positive: {dims}")
    return _head(sum(dims), target_class_count, seed, precision, hidden, task)


def zeroed(network: Network) -> Network:
    return network.with_params([LayerParams(p.kind, np.zeros_like(p.weights), np.zeros_like(p.bias))
                                for p in network.params])
