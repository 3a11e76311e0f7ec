"""Cross-task and fusion experiments over frozen backbone features."""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import ATTRIBUTES, Dataset
from .errors import AlignmentError, CheckpointError, ConfigurationError, IngestionError
from .model import TASKS, Network, build_cross_task_head, build_fusion_head, HEAD_HIDDEN
from .train import (MetricsRow, TrainConfig, evaluate, load_checkpoint,
                    train_head, write_metrics)

log = logging.getLogger(__name__)

TASK_TITLES = {"id": "ID", "age": "Age", "race": "Race", "gender": "Gender"}
FUSION_ROWS = ("own", "other", "all")
FUSION_TITLES = {"own": "Own", "other": "Other three", "all": "All"}
REFERENCE_MARGINS = {"id": 7.2, "age": 20.1, "race": 22.2, "gender": 21.8}


@dataclass
class FeatureSet:
    task: str
    dim: int
    split: str
    refs: List[str]
    vectors: np.ndarray
    labels: np.ndarray  # [N, 4] in ATTRIBUTES order

    def __post_init__(self):
        if self.vectors.shape != (len(self.refs), self.dim):
            raise AlignmentError(
                f"feature matrix {self.vectors.shape} does not match {len(self.refs)} rows of dim {self.dim}")

    def __len__(self):
        return len(self.refs)

    def label_column(self, task):
        return self.labels[:, ATTRIBUTES.index(task)]


def extract_features(backbone, dataset: Dataset, split="train", chunk=500) -> FeatureSet:
    """Feature-tap activations of ``backbone`` (a Network or checkpoint path) for every sample."""
    if not isinstance(backbone, Network):
        backbone = load_checkpoint(backbone)
    if dataset.images.shape[1:] != backbone.input_shape:
        raise CheckpointError(
            f"backbone expects inputs {backbone.input_shape}, dataset has {dataset.images.shape[1:]}")
    _, feats = backbone.predict(dataset.images, chunk=chunk)
    return FeatureSet(backbone.spec.task, backbone.feature_dim, split, list(dataset.refs),
                      np.ascontiguousarray(feats), dataset.labels.copy())


def concat_features(sets: Sequence[FeatureSet], order=TASKS, normalize=False) -> FeatureSet:
    """Row-wise concatenation in the fixed task ``order``.

    With ``normalize`` each block is scaled to unit mean row norm first.
    """
    if not sets:
        raise ConfigurationError("nothing to concatenate")
    rank = {t: i for i, t in enumerate(order)}
    ordered = sorted(sets, key=lambda s: rank.get(s.task, len(rank)))
    base = ordered[0]
    for other in ordered[1:]:
        if other.split != base.split or other.refs != base.refs:
            missing = sorted(set(base.refs) ^ set(other.refs))
            raise AlignmentError(
                f"{other.task} features do not cover the same {base.split} samples as {base.task}"
                + (f"; unmatched refs: {missing[:5]}" if missing else "; rows are in a different order"))
    blocks = []
    for s in ordered:
        v = s.vectors
        if normalize:
            scale = np.linalg.norm(v, axis=1).mean()
            v = v / scale if scale > 0 else v
        blocks.append(v)
    if len(ordered) == 1 and not normalize:
        return base
    vectors = np.concatenate(blocks, axis=1)
    tag = "+".join(s.task for s in ordered)
    return FeatureSet(tag, vectors.shape[1], base.split, list(base.refs), vectors, base.labels.copy())


def _fmt(dtype):
    return "{:.9g}" if dtype == np.float32 else "{!r}"


def write_feature_set(fs: FeatureSet, path):
    """Header ``task dim split count`` then ``ref<TAB>4 labels<TAB>dim floats`` per row."""
    fmt = _fmt(fs.vectors.dtype)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{fs.task}\t{fs.dim}\t{fs.split}\t{len(fs)}\t{fs.vectors.dtype.name}\n")
        for ref, lab, vec in zip(fs.refs, fs.labels, fs.vectors):
            if "\t" in ref or "\n" in ref:
                raise ConfigurationError(f"sample ref {ref!r} contains a tab or newline")
            fh.write(ref + "\t" + "\t".join(str(int(v)) for v in lab) + "\t"
                     + "\t".join(fmt.format(float(x)) for x in vec) + "\n")


def read_feature_set(path) -> FeatureSet:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if len(head) != 5:
            raise IngestionError(f"{path}: malformed feature header")
        task, dim, split, count, dtype = head[0], int(head[1]), head[2], int(head[3]), head[4]
        refs, labels, vectors = [], [], []
        for lineno, line in enumerate(fh, 2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5 + dim:
                raise IngestionError(f"{path}: expected {5 + dim} fields, got {len(parts)}", lineno)
            refs.append(parts[0])
            labels.append([int(v) for v in parts[1:5]])
            vectors.append([float(v) for v in parts[5:]])
    if len(refs) != count:
        raise IngestionError(f"{path}: header declares {count} rows, found {len(refs)}")
    return FeatureSet(task, dim, split, refs, np.array(vectors, dtype=dtype).reshape(count, dim),
                      np.array(labels, dtype=np.int64).reshape(count, 4))


# -- experiment configuration ---------------------------------------------------

@dataclass(frozen=True)
class HeadConfig:
    train: TrainConfig = TrainConfig(iterations=5000)
    hidden: Tuple[int, ...] = HEAD_HIDDEN
    seed: int = 0
    normalize: bool = False


def cell_seed(global_seed, cell_id):
    digest = hashlib.sha256(f"{global_seed}:{cell_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def cell_id(target, sources):
    return f"{target}<-{'+'.join(sources)}"


def thread_count():
    try:
        return max(1, int(os.environ.get("FACEFUSE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class HeadResult:
    cell: str
    target: str
    sources: Tuple[str, ...]
    accuracy: float
    metrics: List[MetricsRow]
    head: Network


def _run_head(target, sources, feats_train, feats_test, class_count, cfg: HeadConfig):
    cid = cell_id(target, sources)
    seed = cell_seed(cfg.seed, cid)
    train_fs = concat_features([feats_train[s] for s in sources], normalize=cfg.normalize)
    test_fs = concat_features([feats_test[s] for s in sources], normalize=cfg.normalize)
    dims = [feats_train[s].dim for s in sources]
    if len(sources) == 1:
        head = build_cross_task_head(dims[0], class_count, seed, cfg.train.precision, cfg.hidden, target)
    else:
        head = build_fusion_head(dims, class_count, seed, cfg.train.precision, cfg.hidden, target)
    train_cfg = replace(cfg.train, seed=seed)
    train_fs = replace(train_fs, vectors=train_fs.vectors.astype(head.dtype))
    test_fs = replace(test_fs, vectors=test_fs.vectors.astype(head.dtype))
    try:
        ckpt, rows = train_head(train_fs, head, target, train_cfg)
        acc = evaluate(ckpt.network, test_fs.vectors, test_fs.label_column(target))
    except Exception as exc:
        raise type(exc)(f"cell {cid}: {exc}") from exc
    rows = rows[:]
    if rows:
        rows[-1] = replace(rows[-1], test_acc=acc)
    return HeadResult(cid, target, tuple(sources), acc, rows, ckpt.network)


def _class_counts(backbones, train_set, test_set):
    counts = {}
    for t in TASKS:
        if t in backbones:
            counts[t] = backbones[t].class_count
        else:
            counts[t] = int(max(train_set.label_column(t).max(), test_set.label_column(t).max())) + 1
    return counts


def load_backbones(backbones) -> Dict[str, Network]:
    out = {}
    for task, b in backbones.items():
        net = b if isinstance(b, Network) else load_checkpoint(b)
        if net.spec.task and net.spec.task != task:
            raise CheckpointError(f"checkpoint for {task!r} was trained for {net.spec.task!r}")
        out[task] = net
    return out


def extract_all(backbones, train_set, test_set):
    nets = load_backbones(backbones)
    tr = {t: extract_features(n, train_set, "train") for t, n in nets.items()}
    te = {t: extract_features(n, test_set, "test") for t, n in nets.items()}
    return nets, tr, te


def _run_jobs(jobs, feats_train, feats_test, counts, cfg):
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        futures = [pool.submit(_run_head, target, sources, feats_train, feats_test, counts[target], cfg)
                   for target, sources in jobs]
        return [f.result() for f in futures]


@dataclass
class CrossTaskMatrix:
    """Accuracy of a head trained on ``rows`` features for ``columns`` targets."""
    accuracy: Dict[str, Dict[str, float]]
    feature_dims: Dict[str, int]
    cells: List[HeadResult] = field(default_factory=list, repr=False)

    def as_array(self):
        return np.array([[self.accuracy[s][t] for t in TASKS] for s in TASKS])


@dataclass
class FusionReport:
    accuracy: Dict[str, Dict[str, float]]  # config -> target -> accuracy
    cells: List[HeadResult] = field(default_factory=list, repr=False)

    @property
    def margins(self):
        return {t: self.accuracy["all"][t] - self.accuracy["own"][t] for t in self.accuracy["all"]}


def run_cross_task_matrix(backbones, train_set, test_set, head_config=HeadConfig(), features=None):
    """Train one head per (feature source, target) pair and score it on the test split."""
    nets, tr, te = features if features is not None else extract_all(backbones, train_set, test_set)
    missing = [t for t in TASKS if t not in tr]
    if missing:
        raise ConfigurationError(f"missing backbones for {missing}")
    counts = _class_counts(nets, train_set, test_set)
    jobs = [(target, (source,)) for source in TASKS for target in TASKS]
    results = _run_jobs(jobs, tr, te, counts, head_config)
    acc = {s: {} for s in TASKS}
    for r in results:
        acc[r.sources[0]][r.target] = r.accuracy
    return CrossTaskMatrix(acc, {t: tr[t].dim for t in TASKS}, results)


def fusion_sources(target, config):
    if config == "own":
        return (target,)
    if config == "other":
        return tuple(t for t in TASKS if t != target)
    return TASKS


def run_fusion_study(backbones, train_set, test_set, head_config=HeadConfig(), features=None):
    """Own / other-three / all feature configurations for every target task."""
    nets, tr, te = features if features is not None else extract_all(backbones, train_set, test_set)
    counts = _class_counts(nets, train_set, test_set)
    jobs = [(target, fusion_sources(target, c)) for c in FUSION_ROWS for target in TASKS]
    results = _run_jobs(jobs, tr, te, counts, head_config)
    acc = {c: {} for c in FUSION_ROWS}
    for (target, _), r, c in zip(jobs, results, [c for c in FUSION_ROWS for _ in TASKS]):
        acc[c][target] = r.accuracy
    return FusionReport(acc, results)


# -- reports ------------------------------------------------------------------------

def _pct(x):
    return f"{100.0 * x:.2f}"


def _table_text(title, row_labels, rows, mark_max=True):
    header = ["Features"] + [TASK_TITLES[t] for t in TASKS]
    best = [max(r[j] for r in rows) for j in range(len(TASKS))]
    body = []
    for label, r in zip(row_labels, rows):
        cells = []
        for j, v in enumerate(r):
            cell = f"{100.0 * v:.1f}%"
            if mark_max and v == best[j]:
                cell += "*"
            cells.append(cell)
        body.append([label] + cells)
    widths = [max(len(str(x[i])) for x in [header] + body) for i in range(len(header))]

    def line(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()

    rule = "-" * len(line(header))
    out = [title, rule, line(header), rule] + [line(b) for b in body] + [rule]
    return "\n".join(out) + "\n"


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in [header] + rows:
            fh.write(",".join(str(c) for c in r) + "\n")


def report_to_dict(report):
    if isinstance(report, CrossTaskMatrix):
        return {"kind": "cross", "accuracy": report.accuracy, "feature_dims": report.feature_dims}
    return {"kind": "fusion", "accuracy": report.accuracy}


def report_from_dict(obj):
    if obj.get("kind") == "cross":
        return CrossTaskMatrix(obj["accuracy"], {k: int(v) for k, v in obj["feature_dims"].items()})
    if obj.get("kind") == "fusion":
        return FusionReport(obj["accuracy"])
    raise IngestionError("results file is neither a cross-task matrix nor a fusion report")


def emit_report(report, out_dir):
    """Write CSV + aligned text tables (and per-head metric curves) into ``out_dir``.

    Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    header = ["Features"] + [TASK_TITLES[t] for t in TASKS]
    written = []
    if isinstance(report, CrossTaskMatrix):
        stem = "table1_cross_task"
        labels = [f"{TASK_TITLES[s]}({report.feature_dims[s]})" for s in TASKS]
        rows = [[report.accuracy[s][t] for t in TASKS] for s in TASKS]
        _write_csv(os.path.join(out_dir, stem + ".csv"), header,
                   [[l] + [_pct(v) for v in r] for l, r in zip(labels, rows)])
        text = _table_text("Cross-task-feature recognition accuracy (rows: features, columns: task)",
                           labels, rows)
    elif isinstance(report, FusionReport):
        stem = "table2_fusion"
        labels = [FUSION_TITLES[c] for c in FUSION_ROWS]
        rows = [[report.accuracy[c][t] for t in TASKS] for c in FUSION_ROWS]
        _write_csv(os.path.join(out_dir, stem + ".csv"), header,
                   [[l] + [_pct(v) for v in r] for l, r in zip(labels, rows)])
        margins = report.margins
        _write_csv(os.path.join(out_dir, "fusion_margins.csv"), ["Margin"] + header[1:],
                   [["All - Own"] + [_pct(margins[t]) for t in TASKS],
                    ["Reference (All - Own)"] + [f"{REFERENCE_MARGINS[t]:.2f}" for t in TASKS]])
        written.append(os.path.join(out_dir, "fusion_margins.csv"))
        text = _table_text("Fusion feature recognition accuracy", labels, rows)
        text += "\nAll - Own margin (points): " + ", ".join(
            f"{TASK_TITLES[t]} {100.0 * margins[t]:+.1f}" for t in TASKS)
        text += "\nReference margins (points): " + ", ".join(
            f"{TASK_TITLES[t]} {REFERENCE_MARGINS[t]:+.1f}" for t in TASKS) + "\n"
    else:
        raise ConfigurationError(f"cannot report on {type(report).__name__}")
    written.insert(0, os.path.join(out_dir, stem + ".csv"))
    with open(os.path.join(out_dir, stem + ".txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    written.append(os.path.join(out_dir, stem + ".txt"))
    with open(os.path.join(out_dir, stem + ".json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(os.path.join(out_dir, stem + ".json"))
    if report.cells:
        curve_dir = os.path.join(out_dir, "curves")
        os.makedirs(curve_dir, exist_ok=True)
        for cell in report.cells:
            name = cell.cell.replace("<-", "_from_").replace("+", "-") + ".csv"
            write_metrics(os.path.join(curve_dir, name), cell.metrics)
            written.append(os.path.join(curve_dir, name))
    return written
