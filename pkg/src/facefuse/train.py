"""Mini-batch SGD training, evaluation, metrics CSV and checkpoint files."""

import csv
import io
import json
import logging
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import engine
from .engine import LayerParams
from .errors import CheckpointError, ConfigurationError, DimensionError, TrainingError
from .model import DTYPES, Network, NetworkSpec

log = logging.getLogger(__name__)

METRICS_HEADER = ("iteration", "lr", "train_loss", "train_acc", "test_acc")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 200
    iterations: int = 20000
    lr_initial: float = 0.01
    decay_factor: float = 0.5
    decay_interval: Optional[int] = None  # default: a quarter of the iterations
    seed: int = 0
    precision: str = "float32"
    eval_every: Optional[int] = None      # default: iterations // 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if not math.isfinite(self.lr_initial) or self.lr_initial < 0:
            raise ConfigurationError(f"lr_initial must be >= 0, got {self.lr_initial}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError(f"decay factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_interval is not None and self.decay_interval < 1:
            raise ConfigurationError("decay_interval must be >= 1")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        if self.precision not in DTYPES:
            raise ConfigurationError(f"unknown precision {self.precision!r}")

    @property
    def interval(self):
        return self.decay_interval or max(1, self.iterations // 4)

    @property
    def eval_interval(self):
        return self.eval_every or max(1, self.iterations // 100)


def lr_at(config: TrainConfig, iteration):
    """Step decay: ``lr_initial * factor ** floor(iteration / interval)``."""
    return config.lr_initial * config.decay_factor ** (iteration // config.interval)


@dataclass
class MetricsRow:
    iteration: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: Optional[float] = None


@dataclass
class Checkpoint:
    network: Network
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def evaluate(network: Network, inputs, labels, chunk=500):
    """Fraction of rows whose argmax logit equals the label (ties -> lowest class)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigurationError("cannot evaluate on an empty set")
    logits, _ = network.predict(np.asarray(inputs), chunk=chunk)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def predictions(network: Network, inputs, chunk=500):
    logits, _ = network.predict(np.asarray(inputs), chunk=chunk)
    return np.argmax(logits, axis=1)


def _fit(network: Network, x_train, y_train, x_test, y_test, config: TrainConfig, progress=None):
    if len(y_train) == 0:
        raise ConfigurationError("training set is empty")
    if x_train.shape[1:] != network.input_shape:
        raise DimensionError(
            f"training inputs of shape {x_train.shape[1:]} do not match network input {network.input_shape}")
    missing = sorted(set(range(network.class_count)) - set(np.unique(y_train).tolist()))
    if missing:
        warnings.warn(f"classes {missing[:10]} have no training samples", stacklevel=3)

    dtype = network.dtype
    x_train = np.asarray(x_train, dtype=dtype)
    rng = np.random.default_rng(config.seed)
    params = network.params
    rows = []
    n = len(y_train)
    for it in range(config.iterations):
        lr = lr_at(config, it)
        idx = rng.integers(0, n, config.batch_size)
        loss, grads, _, logits = network.with_params(params).loss_and_grads(
            x_train[idx], y_train[idx], input_grad=False)
        if not math.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {loss} at iteration {it} (lr={lr:g}); batch ids {idx[:20].tolist()}")
        params = engine.sgd_step(params, grads, lr)
        acc = float(np.mean(np.argmax(logits, axis=1) == y_train[idx]))
        row = MetricsRow(it, lr, loss, acc)
        if x_test is not None and len(y_test) and ((it + 1) % config.eval_interval == 0
                                                   or it == config.iterations - 1):
            row.test_acc = evaluate(network.with_params(params), x_test, y_test)
            if progress:
                progress(row)
        rows.append(row)
    trained = network.with_params(params)
    return Checkpoint(trained, config.iterations, rng.bit_generator.state, asdict(config)), rows


def train(network: Network, train_set, test_set, task, config: TrainConfig, progress=None):
    """Train a backbone on ``task`` labels; returns ``(Checkpoint, [MetricsRow])``."""
    x_test = test_set.images if test_set is not None else None
    y_test = test_set.label_column(task) if test_set is not None else None
    return _fit(network, train_set.images, train_set.label_column(task), x_test, y_test, config, progress)


def train_head(train_features, head: Network, task, config: TrainConfig, test_features=None, progress=None):
    """Train a head on frozen feature vectors (``FeatureSet`` objects)."""
    if train_features.dim != head.input_shape[0]:
        raise DimensionError(
            f"feature dim {train_features.dim} does not match head input {head.input_shape[0]}")
    x_test = test_features.vectors if test_features is not None else None
    y_test = test_features.label_column(task) if test_features is not None else None
    return _fit(head, train_features.vectors, train_features.label_column(task), x_test, y_test,
                config, progress)


def write_metrics(path, rows: List[MetricsRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.iteration, repr(float(r.lr)), repr(float(r.train_loss)), repr(float(r.train_acc)),
                        "" if r.test_acc is None else repr(float(r.test_acc))])


def read_metrics(path) -> List[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricsRow(int(r["iteration"]), float(r["lr"]), float(r["train_loss"]),
                           float(r["train_acc"]), float(r["test_acc"]) if r["test_acc"] else None)
                for r in reader]


# -- checkpoint files ------------------------------------------------------------
#
# "FFCK" | u32 version | u32 len + UTF-8 text block | u32 layer count |
# per layer: (u8 dtype, u8 ndim, u32 dims..., raw little-endian data) for weights then bias |
# u32 CRC32 of everything before it.

MAGIC = b"FFCK"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _text_block(ckpt: Checkpoint):
    meta = {"iteration": ckpt.iteration, "rng_state": ckpt.rng_state, "config": ckpt.config}
    return ckpt.network.spec.to_text() + "meta = " + json.dumps(meta, sort_keys=True) + "\n"


def checkpoint_bytes(ckpt) -> bytes:
    if isinstance(ckpt, Network):
        ckpt = Checkpoint(ckpt)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = _text_block(ckpt).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(ckpt.network.params)))
    for p in ckpt.network.params:
        for arr in (p.weights, p.bias):
            dt = arr.dtype.newbyteorder("<")
            buf.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt, path):
    """Write a ``Checkpoint`` (or bare ``Network``) to ``path``."""
    data = checkpoint_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < 16:
        raise CheckpointError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch (corrupted or truncated checkpoint)")
    (text_len,) = r.unpack("<I")
    try:
        text = r.take(text_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("spec block is not valid UTF-8") from None
    spec_lines, meta = [], {}
    for line in text.splitlines():
        if line.startswith("meta = "):
            try:
                meta = json.loads(line[len("meta = "):])
            except json.JSONDecodeError:
                raise CheckpointError("malformed metadata line") from None
        else:
            spec_lines.append(line)
    try:
        spec = NetworkSpec.from_text("\n".join(spec_lines))
    except ConfigurationError as exc:
        raise CheckpointError(str(exc)) from None
    (count,) = r.unpack("<I")
    params = []
    kinds = [l.kind for l in spec.layers]
    if count != len(kinds):
        raise CheckpointError(f"checkpoint holds {count} layers, spec declares {len(kinds)}")
    for kind in kinds:
        arrays = []
        for _ in range(2):
            code, ndim = r.unpack("<BB")
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code}")
            shape = r.unpack(f"<{ndim}I")
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape)) * dt.itemsize
            arrays.append(np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("=")))
        try:
            params.append(LayerParams(kind, arrays[0], arrays[1]))
        except (DimensionError, ConfigurationError) as exc:
            raise CheckpointError(f"parameter/spec disagreement: {exc}") from None
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameter payload")
    try:
        network = Network(spec, params)
    except (DimensionError, ConfigurationError) as exc:
        raise CheckpointError(f"parameter/spec disagreement: {exc}") from None
    if any(p.weights.dtype != network.dtype for p in params):
        raise CheckpointError("parameter precision disagrees with the spec")
    return Checkpoint(network, int(meta.get("iteration", 0)), meta.get("rng_state", {}),
                      meta.get("config", {}))


def load_checkpoint(path) -> Network:
    return read_checkpoint(path).network
