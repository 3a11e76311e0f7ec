"""End-to-end run: synthetic data, four backbones, cross-task matrix, fusion study."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

from . import data as data_mod
from . import expt, model
from .train import TrainConfig, evaluate, save_checkpoint, train, write_metrics

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    synth: data_mod.SynthConfig = data_mod.SynthConfig()
    data: data_mod.DataConfig = data_mod.DataConfig()
    backbone: TrainConfig = TrainConfig(batch_size=50, iterations=2000, lr_initial=0.05, eval_every=200)
    head: expt.HeadConfig = expt.HeadConfig(TrainConfig(batch_size=100, iterations=2000, lr_initial=0.05))
    seed: int = 0

    def seeded(self):
        """Copy with every component seed derived from ``seed``."""
        return replace(self,
                       synth=replace(self.synth, seed=self.seed),
                       data=replace(self.data, seed=self.seed),
                       head=replace(self.head, seed=self.seed))


@dataclass
class PipelineResult:
    out_dir: str
    backbone_test_acc: dict
    cross: expt.CrossTaskMatrix
    fusion: expt.FusionReport
    majority_baseline: dict
    paths: dict = field(default_factory=dict)
    backbone_seconds: dict = field(default_factory=dict)


def majority_baseline(labels):
    """Accuracy of always predicting the most frequent label."""
    counts = {}
    for v in labels.tolist():
        counts[v] = counts.get(v, 0) + 1
    return max(counts.values()) / len(labels)


def run_pipeline(config: PipelineConfig, out_dir, progress=None) -> PipelineResult:
    cfg = config.seeded()
    os.makedirs(out_dir, exist_ok=True)
    data_dir = os.path.join(out_dir, "data")
    manifest = data_mod.synth_generate(cfg.synth, data_dir)
    manifest = data_mod.load_manifest(os.path.join(data_dir, "manifest.jsonl"))
    dtype = model.DTYPES[cfg.backbone.precision]
    train_set, test_set = data_mod.build_datasets(manifest, cfg.data, dtype)

    bb_dir = os.path.join(out_dir, "backbones")
    os.makedirs(bb_dir, exist_ok=True)
    nets, accs, paths, seconds = {}, {}, {}, {}
    for task in model.TASKS:
        seed = expt.cell_seed(cfg.seed, f"backbone:{task}")
        desc = model.TaskDescriptor.default(task, manifest.id_count if task == "id" else None)
        net = model.build_backbone(desc, train_set.images.shape[1:], seed, cfg.backbone.precision)
        start = time.perf_counter()
        ckpt, rows = train(net, train_set, test_set, task, replace(cfg.backbone, seed=seed), progress)
        seconds[task] = time.perf_counter() - start
        ckpt.config = {"task": task, "data": asdict(cfg.data), "train": asdict(replace(cfg.backbone, seed=seed))}
        paths[task] = os.path.join(bb_dir, f"{task}.ckpt")
        save_checkpoint(ckpt, paths[task])
        write_metrics(os.path.join(bb_dir, f"{task}_metrics.csv"), rows)
        nets[task] = ckpt.network
        accs[task] = evaluate(ckpt.network, test_set.images, test_set.label_column(task))
        log.info("%s backbone test accuracy %.4f", task, accs[task])

    features = expt.extract_all(nets, train_set, test_set)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for task in model.TASKS:
        expt.write_feature_set(features[1][task], os.path.join(feat_dir, f"{task}_train.feat"))
        expt.write_feature_set(features[2][task], os.path.join(feat_dir, f"{task}_test.feat"))

    cross = expt.run_cross_task_matrix(nets, train_set, test_set, cfg.head, features=features)
    expt.emit_report(cross, os.path.join(out_dir, "cross"))
    fusion = expt.run_fusion_study(nets, train_set, test_set, cfg.head, features=features)
    expt.emit_report(fusion, os.path.join(out_dir, "fuse"))

    baseline = {t: majority_baseline(test_set.label_column(t)) for t in model.TASKS}
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"backbone_test_acc": accs, "majority_baseline": baseline,
                   "cross": cross.accuracy, "fusion": fusion.accuracy,
                   "margins": fusion.margins}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return PipelineResult(out_dir, accs, cross, fusion, baseline, paths, seconds)
