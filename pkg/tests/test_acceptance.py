"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria share full synthetic pipeline runs (24 ids, 50
images per id, 32x32, 10x augmentation, grouped 70/30 split) for seeds 0, 1
and 2. Each run trains four backbones for 2000 iterations at batch 50, so the
whole module takes roughly half an hour on one core.
"""

import csv
import hashlib
import json
import os
import subprocess
import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from facefuse import data, engine, expt, model, train
from facefuse.cli import main as cli_main
from facefuse.errors import AlignmentError, CheckpointError
from facefuse.pipeline import PipelineConfig, run_pipeline
from oracles import conv2d_naive, random_conv_case

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
REFERENCE_MARGINS = {"id": 7.2, "age": 20.1, "race": 22.2, "gender": 21.8}
TABLE_HEADER = ["Features", "ID", "Age", "Race", "Gender"]


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    return tmp_path_factory.mktemp("pipelines")


@pytest.fixture(scope="session")
def pipeline(runs_root):
    @lru_cache(maxsize=None)
    def run(seed):
        return run_pipeline(PipelineConfig(seed=seed), os.path.join(runs_root, f"seed{seed}"))
    return run


def tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


# 1 ----------------------------------------------------------------------------------

def test_gradient_fidelity(verdict):
    start = time.perf_counter()
    worst = engine.layer_gradchecks(cases=50, seed=0, eps=1e-5)
    elapsed = time.perf_counter() - start
    ok = set(worst) == {"conv", "fc", "relu", "maxpool", "softmax_xent"}
    ok = ok and all(v < 1e-4 for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s for 50 cases each"
    verdict("1 gradient fidelity (max rel err < 1e-4, < 2 min)", ok, detail)


# 2 ----------------------------------------------------------------------------------

def test_conv_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        x, w, b, s, p = random_conv_case(rng)
        got = engine.conv2d_forward(x, engine.LayerParams("conv", w, b), s, p)
        want = conv2d_naive(x, w, b, s, p)
        assert got.shape == want.shape
        worst = max(worst, float(np.abs(got - want).max()))
    verdict("2 conv oracle equivalence (100 cases, abs err <= 1e-12)", worst <= 1e-12,
            f"max abs err {worst:.1e}")


# 3 ----------------------------------------------------------------------------------

def test_determinism(tmp_path, monkeypatch, verdict):
    small = PipelineConfig(
        synth=data.SynthConfig(images_per_id=6),
        data=data.DataConfig(augment_factor=2),
        backbone=train.TrainConfig(batch_size=20, iterations=40, lr_initial=0.05, eval_every=20),
        head=expt.HeadConfig(train.TrainConfig(batch_size=20, iterations=60, lr_initial=0.05)),
        seed=11)
    hashes = []
    for threads in ("1", "4"):
        monkeypatch.setenv("FACEFUSE_THREADS", threads)
        run_pipeline(small, tmp_path / f"threads{threads}")
        hashes.append(tree_hashes(tmp_path / f"threads{threads}"))
    kinds = {os.path.splitext(k)[1] for k in hashes[0]}
    differing = sorted(k for k in hashes[0] if hashes[0][k] != hashes[1].get(k))
    ok = hashes[0] == hashes[1] and {".ckpt", ".csv", ".feat", ".txt", ".json"} <= kinds
    verdict("3 determinism (two full pipeline runs, FACEFUSE_THREADS=1 vs 4)", ok,
            f"{len(hashes[0])} files compared" + (f"; differ: {differing[:5]}" if differing else ""))


# 4 ----------------------------------------------------------------------------------

def test_id_backbone_learnability(pipeline, verdict):
    res = pipeline(0)
    acc, secs = res.backbone_test_acc["id"], res.backbone_seconds["id"]
    verdict("4 ID backbone >= 90% test accuracy in 2000 iterations at batch 50, < 10 min",
            acc >= 0.90 and secs < 600, f"accuracy {acc:.4f}, {secs:.0f}s")


# 5 ----------------------------------------------------------------------------------

def test_cross_task_transfer(pipeline, verdict):
    res = pipeline(0)
    gaps = {t: res.cross.accuracy["id"][t] - res.majority_baseline[t] for t in ("age", "race", "gender")}
    detail = ", ".join(f"{t} {res.cross.accuracy['id'][t]:.3f} vs {res.majority_baseline[t]:.3f}"
                       for t in gaps)
    verdict("5 ID features beat majority baseline by >= 10 points (age, race, gender)",
            all(g >= 0.10 for g in gaps.values()), detail)


# 6 ----------------------------------------------------------------------------------

def test_fusion_dominance(pipeline, verdict):
    margins = {seed: pipeline(seed).fusion.margins for seed in SEEDS}
    lines = []
    for t in model.TASKS:
        ours = " ".join(f"{100 * margins[s][t]:+.2f}" for s in SEEDS)
        lines.append(f"{t}: {ours} (reference {REFERENCE_MARGINS[t]:+.1f})")
    ok = all(m[t] >= 0 for m in margins.values() for t in model.TASKS)
    verdict("6 fusion dominance, All >= Own for every task over seeds 0,1,2", ok,
            "margins in points per seed; " + "; ".join(lines))


# 7 ----------------------------------------------------------------------------------

def test_checkpoint_round_trip(pipeline, tmp_path, verdict):
    path = pipeline(0).paths["id"]
    ckpt = train.read_checkpoint(path)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(10, 1, 32, 32)).astype(np.float32)
    before = ckpt.network.predict(x)
    train.save_checkpoint(ckpt, tmp_path / "again.ckpt")
    after = train.load_checkpoint(tmp_path / "again.ckpt").predict(x)
    bitwise = all(a.tobytes() == b.tobytes() for a, b in zip(before, after))

    raw = open(path, "rb").read()
    damaged = [raw[:len(raw) // 3], raw[:7], b"", b"JUNK" + raw[4:],
               raw[:200] + bytes([raw[200] ^ 0x10]) + raw[201:], raw[:-1]]
    rejected = 0
    for i, blob in enumerate(damaged):
        p = tmp_path / f"bad{i}.ckpt"
        p.write_bytes(blob)
        try:
            train.load_checkpoint(p)
        except CheckpointError:
            rejected += 1
    verdict("7 checkpoint round trip bitwise on 10 inputs, corruption rejected",
            bitwise and rejected == len(damaged), f"{rejected}/{len(damaged)} damaged files rejected")


# 8 ----------------------------------------------------------------------------------

def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_protocol_conformance(pipeline, tmp_path, verdict):
    data.synth_generate(data.SynthConfig(images_per_id=2), tmp_path / "d")
    code = cli_main(["train", "--task", "id", "--manifest", str(tmp_path / "d" / "manifest.jsonl"),
                     "--out", str(tmp_path / "t"), "--batch", "200", "--iterations", "20000",
                     "--augment-factor", "10", "--train-fraction", "0.7", "--paper-faithful", "--dry-run"])
    echo = json.loads((tmp_path / "t" / "train_id_config.json").read_text())
    accepted = (code == 0 and echo["train"]["batch_size"] == 200 and echo["train"]["iterations"] == 20000
                and echo["data"]["augment_factor"] == 10 and echo["data"]["train_fraction"] == 0.7
                and echo["data"]["group_by_source"] is False)

    res = pipeline(0)
    t1 = _rows(os.path.join(res.out_dir, "cross", "table1_cross_task.csv"))
    t2 = _rows(os.path.join(res.out_dir, "fuse", "table2_fusion.csv"))
    layout = (t1[0] == TABLE_HEADER and [r[0] for r in t1[1:]] == ["ID(200)", "Age(50)", "Race(50)", "Gender(50)"]
              and t2[0] == TABLE_HEADER and [r[0] for r in t2[1:]] == ["Own", "Other three", "All"]
              and all(len(r) == 5 for r in t1 + t2))
    verdict("8 reference-protocol defaults accepted, report CSV layouts exact", accepted and layout,
            f"dry-run exit {code}; table1 rows {[r[0] for r in t1[1:]]}; table2 rows {[r[0] for r in t2[1:]]}")


# 9 ----------------------------------------------------------------------------------

def test_structural_invariants(pipeline, verdict):
    res = pipeline(0)
    checks = {}
    checks["feature dims 200/50"] = res.cross.feature_dims == {"id": 200, "age": 50, "race": 50, "gender": 50}
    widths = {c.cell: c.head.input_shape[0] for c in res.fusion.cells}
    checks["fusion dims 350/150"] = (widths["id<-id+age+race+gender"] == 350
                                     and widths["id<-age+race+gender"] == 150)

    # the saved checkpoints were written before any head was trained
    nets = {t: train.load_checkpoint(p) for t, p in res.paths.items()}
    saved = {t: open(p, "rb").read() for t, p in res.paths.items()}
    before = {t: hashlib.sha256(train.checkpoint_bytes(n)).hexdigest() for t, n in nets.items()}
    small_train = data.Dataset(np.zeros((4, 1, 32, 32), np.float32), np.zeros((4, 4), np.int64),
                               list("abcd"), list("abcd"))
    cfg = expt.HeadConfig(train.TrainConfig(iterations=3, batch_size=2))
    expt.run_fusion_study(nets, small_train, small_train, cfg)
    after = {t: hashlib.sha256(train.checkpoint_bytes(n)).hexdigest() for t, n in nets.items()}
    checks["frozen backbones"] = before == after and all(
        open(p, "rb").read() == saved[t] for t, p in res.paths.items())

    a = expt.FeatureSet("id", 2, "test", ["x", "y"], np.zeros((2, 2)), np.zeros((2, 4), int))
    b = expt.FeatureSet("age", 2, "test", ["y", "x"], np.zeros((2, 2)), np.zeros((2, 4), int))
    try:
        expt.concat_features([a, b])
        checks["concat alignment"] = False
    except AlignmentError:
        checks["concat alignment"] = True

    rng = np.random.default_rng(9)
    sums = [engine.softmax_cross_entropy(rng.normal(0, 30, size=k), 0)[1].sum()
            for k in rng.integers(2, 100, size=200)]
    checks["softmax sums to 1 +/- 1e-6"] = max(abs(s - 1) for s in sums) <= 1e-6

    tcfg = train.TrainConfig()
    lrs = [train.lr_at(tcfg, i) for i in range(tcfg.iterations)]
    checks["lr schedule non-increasing"] = all(x >= y for x, y in zip(lrs, lrs[1:]))

    failed = [k for k, v in checks.items() if not v]
    verdict("9 structural invariants", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} hold" + (f"; failed: {failed}" if failed else ""))


def test_gradcheck_command_exit_code(verdict):
    # the gradcheck subcommand is the user-facing form of criterion 1
    proc = subprocess.run([sys.executable, "-m", "facefuse", "gradcheck", "--cases", "10"],
                          capture_output=True, text=True)
    verdict("1b gradcheck command exits 0 when all kinds pass", proc.returncode == 0,
            proc.stderr.strip().splitlines()[-1] if proc.stderr else "")
