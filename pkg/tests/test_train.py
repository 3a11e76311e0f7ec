import numpy as np
import pytest

from facefuse import train as T
from facefuse.data import Dataset
from facefuse.errors import CheckpointError, ConfigurationError, TrainingError
from facefuse.expt import FeatureSet
from facefuse.model import TaskDescriptor, build_backbone, build_cross_task_head, zeroed
from facefuse.train import TrainConfig, lr_at


def toy_dataset(n=40, seed=0, size=12):
    """Two-class images: class encoded as a bright left or right half."""
    rng = np.random.default_rng(seed)
    labels = np.zeros((n, 4), dtype=np.int64)
    labels[:, 0] = np.arange(n) % 2
    labels[:, 3] = labels[:, 0]
    imgs = rng.normal(0, 0.1, size=(n, 1, size, size)).astype(np.float32)
    for i in range(n):
        if labels[i, 0]:
            imgs[i, :, :, size // 2:] += 1
        else:
            imgs[i, :, :, :size // 2] += 1
    return Dataset(imgs, labels, [f"r{i}" for i in range(n)], [f"r{i}" for i in range(n)])


def small_backbone(seed=0, classes=2, precision="float32"):
    return build_backbone(TaskDescriptor("id", classes, 8), (1, 12, 12), seed, precision,
                          channels=(2, 3, 4), conv_padding="same")


# -- schedule ----------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig(lr_initial=0.1, decay_factor=0.5, decay_interval=1000, iterations=5000)
    assert lr_at(cfg, 0) == 0.1
    assert lr_at(cfg, 1000) == pytest.approx(0.05)
    assert lr_at(cfg, 2999) == pytest.approx(0.025)


def test_lr_schedule_non_increasing():
    cfg = TrainConfig(iterations=20000)
    values = [lr_at(cfg, i) for i in range(0, 20000, 37)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert cfg.interval == 5000


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.iterations) == (200, 20000)
    assert cfg.eval_interval == 200
    for bad in ({"batch_size": 0}, {"lr_initial": -1.0}, {"decay_factor": 0.0}, {"decay_factor": 1.5},
                {"precision": "float16"}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)


# -- training -----------------------------------------------------------------------

def test_zero_lr_single_iteration_is_identity():
    ds = toy_dataset()
    net = small_backbone()
    ckpt, rows = T.train(net, ds, ds, "id", TrainConfig(iterations=1, lr_initial=0.0, batch_size=8))
    for a, b in zip(net.params, ckpt.network.params):
        assert a.weights.tobytes() == b.weights.tobytes()
    rng = np.random.default_rng(0)
    idx = rng.integers(0, len(ds), 8)
    loss0 = net.loss_and_grads(ds.images[idx], ds.label_column("id")[idx])[0]
    assert rows[0].train_loss == loss0


def test_training_learns_and_loss_decreases():
    ds = toy_dataset()
    cfg = TrainConfig(iterations=200, batch_size=16, lr_initial=0.1, eval_every=50)
    ckpt, rows = T.train(small_backbone(), ds, ds, "id", cfg)
    losses = [r.train_loss for r in rows]
    assert np.median(losses[100:]) < np.median(losses[:100])
    assert T.evaluate(ckpt.network, ds.images, ds.label_column("id")) == 1.0
    assert [r.iteration for r in rows] == list(range(200))
    assert [r.iteration for r in rows if r.test_acc is not None] == [49, 99, 149, 199]


def test_training_is_deterministic():
    ds = toy_dataset()
    cfg = TrainConfig(iterations=30, batch_size=8, lr_initial=0.05, eval_every=10, seed=4)
    a = T.train(small_backbone(), ds, ds, "id", cfg)
    b = T.train(small_backbone(), ds, ds, "id", cfg)
    assert a[1] == b[1]
    assert T.checkpoint_bytes(a[0]) == T.checkpoint_bytes(b[0])


def test_nan_loss_aborts():
    ds = toy_dataset()
    ds.images[:] = np.nan
    with pytest.raises(TrainingError, match="iteration 0"):
        T.train(small_backbone(), ds, None, "id", TrainConfig(iterations=3, batch_size=4))


def test_empty_class_warns():
    ds = toy_dataset()
    with pytest.warns(UserWarning, match="no training samples"):
        T.train(small_backbone(classes=3), ds, None, "id", TrainConfig(iterations=1, batch_size=4))


def test_memorize_single_sample():
    ds = toy_dataset(n=1)
    with pytest.warns(UserWarning):
        ckpt, _ = T.train(small_backbone(), ds, None, "id",
                          TrainConfig(iterations=100, batch_size=1, lr_initial=0.1))
    assert T.evaluate(ckpt.network, ds.images, ds.label_column("id")) == 1.0


def test_evaluate_tie_break_lowest_class():
    head = zeroed(build_cross_task_head(3, 2))
    x = np.zeros((10, 3), np.float32)
    y = np.array([0, 1] * 5)
    assert T.evaluate(head, x, y) == 0.5
    assert (T.predictions(head, x) == 0).all()


def test_evaluate_matches_recount():
    ds = toy_dataset(n=30, seed=2)
    net = small_backbone(seed=9)
    preds = T.predictions(net, ds.images)
    labels = ds.label_column("id")
    hits = 0
    for p, y in zip(preds.tolist(), labels.tolist()):
        hits += p == y
    assert T.evaluate(net, ds.images, labels) == hits / len(labels)


# -- heads ----------------------------------------------------------------------------

def _features(n=60, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros((n, 4), np.int64)
    labels[:, 3] = rng.integers(0, 2, n)
    vec = rng.normal(size=(n, dim)).astype(np.float32)
    vec[:, 0] += 3 * labels[:, 3]
    return FeatureSet("id", dim, "train", [f"r{i}" for i in range(n)], vec, labels)


def test_train_head_zero_iterations_keeps_init():
    head = build_cross_task_head(6, 2, seed=1)
    ckpt, rows = T.train_head(_features(), head, "gender", TrainConfig(iterations=0))
    assert rows == []
    assert T.checkpoint_bytes(ckpt.network) == T.checkpoint_bytes(head)


def test_train_head_learns():
    fs = _features()
    ckpt, _ = T.train_head(fs, build_cross_task_head(6, 2, seed=1), "gender",
                           TrainConfig(iterations=300, batch_size=20, lr_initial=0.1))
    assert T.evaluate(ckpt.network, fs.vectors, fs.label_column("gender")) > 0.9


def test_train_head_dim_mismatch():
    from facefuse.errors import DimensionError
    with pytest.raises(DimensionError):
        T.train_head(_features(dim=6), build_cross_task_head(5, 2), "gender", TrainConfig(iterations=1))


# -- metrics + checkpoints ----------------------------------------------------------------

def test_metrics_csv_round_trip(tmp_path):
    rows = [T.MetricsRow(0, 0.1, 1.5, 0.25), T.MetricsRow(1, 0.1, 1.25, 0.5, 0.75)]
    T.write_metrics(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "iteration,lr,train_loss,train_acc,test_acc"
    assert T.read_metrics(tmp_path / "m.csv") == rows


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_checkpoint_round_trip(tmp_path, precision):
    net = small_backbone(seed=3, precision=precision)
    ckpt = T.Checkpoint(net, 17, {"k": 1}, {"batch_size": 4})
    T.save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = T.read_checkpoint(tmp_path / "c.ckpt")
    assert back.iteration == 17 and back.config == {"batch_size": 4} and back.rng_state == {"k": 1}
    assert back.network.spec == net.spec
    x = np.random.default_rng(0).normal(size=(10, 1, 12, 12))
    assert back.network.predict(x)[0].tobytes() == net.predict(x)[0].tobytes()
    assert (tmp_path / "c.ckpt").read_bytes()[:4] == b"FFCK"


def test_checkpoint_rejects_damage(tmp_path):
    T.save_checkpoint(small_backbone(), tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    cases = {
        "truncated": raw[: len(raw) // 2],
        "tiny": raw[:6],
        "magic": b"XXXX" + raw[4:],
        "flipped": raw[:100] + bytes([raw[100] ^ 0xFF]) + raw[101:],
        "version": raw[:4] + (9).to_bytes(4, "little") + raw[8:],
        "empty": b"",
    }
    for name, blob in cases.items():
        p = tmp_path / f"{name}.ckpt"
        p.write_bytes(blob)
        with pytest.raises(CheckpointError):
            T.load_checkpoint(p)
    with pytest.raises(CheckpointError):
        T.load_checkpoint(tmp_path / "missing.ckpt")
