"""``facefuse`` command-line entry point.

Precedence for every setting: command-line flag > ``--config`` JSON file >
built-in default. The resolved configuration is echoed into the output
directory of each run.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

from . import data as data_mod
from . import engine, expt, model, train as train_mod
from .errors import ConfigurationError, FacefuseError

log = logging.getLogger("facefuse")

DEFAULTS = {
    "synth": asdict(data_mod.SynthConfig()),
    "data": asdict(data_mod.DataConfig()),
    "train": asdict(train_mod.TrainConfig()),
    "head": {**asdict(train_mod.TrainConfig(iterations=5000)), "hidden": list(model.HEAD_HIDDEN),
             "normalize": False},
}

# flag dest -> (config section, key)
FLAG_KEYS = {
    "ids_per_subgroup": ("synth", "ids_per_subgroup"),
    "images_per_id": ("synth", "images_per_id"),
    "resolution": ("synth", "resolution"),
    "noise": ("synth", "noise"),
    "augment_factor": ("data", "augment_factor"),
    "train_fraction": ("data", "train_fraction"),
    "data_seed": ("data", "seed"),
    "iterations": ("train", "iterations"),
    "batch": ("train", "batch_size"),
    "lr": ("train", "lr_initial"),
    "decay_factor": ("train", "decay_factor"),
    "decay_interval": ("train", "decay_interval"),
    "eval_every": ("train", "eval_every"),
    "precision": ("train", "precision"),
    "head_iterations": ("head", "iterations"),
    "head_batch": ("head", "batch_size"),
    "head_lr": ("head", "lr_initial"),
    "head_decay_interval": ("head", "decay_interval"),
    "head_seed": ("head", "seed"),
}


class UsageError(FacefuseError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config file must hold a JSON object")
    unknown = set(cfg) - set(DEFAULTS) - {"task", "seed"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def resolve(args, sections):
    """Merge defaults, the config file and explicit flags into plain dicts."""
    file_cfg = _load_config(getattr(args, "config", None))
    out = {}
    for sec in sections:
        merged = dict(DEFAULTS[sec])
        extra = set(file_cfg.get(sec, {})) - set(merged)
        if extra:
            raise ConfigurationError(f"unknown keys in config section {sec!r}: {sorted(extra)}")
        merged.update(file_cfg.get(sec, {}))
        out[sec] = merged
    seed = args.seed if getattr(args, "seed", None) is not None else file_cfg.get("seed")
    if seed is not None:
        for sec in sections:
            if sec in ("synth", "train", "head"):
                out[sec]["seed"] = seed
    for dest, (sec, key) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None and sec in out:
            out[sec][key] = value
    if getattr(args, "paper_faithful", False) and "data" in out:
        out["data"]["group_by_source"] = False
    if getattr(args, "normalize_features", False) and "head" in out:
        out["head"]["normalize"] = True
    return out


def _train_config(d):
    keys = {f.name for f in fields(train_mod.TrainConfig)}
    return train_mod.TrainConfig(**{k: v for k, v in d.items() if k in keys})


def _head_config(d):
    return expt.HeadConfig(_train_config(d), tuple(d["hidden"]), d["seed"], bool(d["normalize"]))


def _echo(out_dir, name, cfg):
    with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _datasets(manifest_path, data_cfg, precision):
    manifest = data_mod.load_manifest(manifest_path)
    dtype = model.DTYPES[precision]
    return manifest, data_mod.build_datasets(manifest, data_mod.DataConfig(**data_cfg), dtype)


# -- subcommands --------------------------------------------------------------------

def cmd_synth(args):
    cfg = resolve(args, ["synth"])
    out = _out_dir(args.out)
    manifest = data_mod.synth_generate(data_mod.SynthConfig(**cfg["synth"]), out)
    _echo(out, "synth_config.json", cfg)
    log.info("wrote %d images for %d ids to %s", len(manifest.records), manifest.id_count, out)


def cmd_train(args):
    cfg = resolve(args, ["data", "train"])
    cfg["task"] = args.task
    tcfg = _train_config(cfg["train"])
    data_mod.DataConfig(**cfg["data"])  # validate
    data_mod.AugmentSpec(factor=cfg["data"]["augment_factor"])
    if not 0 < cfg["data"]["train_fraction"] < 1:
        raise ConfigurationError("train fraction must lie in (0, 1)")
    out = _out_dir(args.out)
    _echo(out, f"train_{args.task}_config.json", cfg)
    if args.dry_run:
        log.info("configuration accepted: %s", json.dumps(cfg, sort_keys=True))
        return
    manifest, (tr, te) = _datasets(args.manifest, cfg["data"], tcfg.precision)
    classes = manifest.id_count if args.task == "id" else None
    task = model.TaskDescriptor.default(args.task, classes)
    net = model.build_backbone(task, tr.images.shape[1:], tcfg.seed, tcfg.precision)
    log.info("training %s backbone: %d train / %d test images", args.task, len(tr), len(te))
    ckpt, rows = train_mod.train(
        net, tr, te, args.task, tcfg,
        progress=lambda r: log.info("iter %d lr %.4g loss %.4f test %.4f",
                                    r.iteration, r.lr, r.train_loss, r.test_acc))
    ckpt.config = cfg
    train_mod.save_checkpoint(ckpt, os.path.join(out, f"{args.task}.ckpt"))
    train_mod.write_metrics(os.path.join(out, f"{args.task}_metrics.csv"), rows)


def _backbone_paths(args):
    paths = {}
    if args.backbones:
        for t in model.TASKS:
            p = os.path.join(args.backbones, f"{t}.ckpt")
            if os.path.exists(p):
                paths[t] = p
    for item in args.checkpoint or []:
        task, sep, path = item.partition("=")
        if not sep or task not in model.TASKS:
            raise ConfigurationError(f"--checkpoint expects TASK=PATH, got {item!r}")
        paths[task] = path
    return paths


def _shared_data_config(args, checkpoints):
    """Data settings every backbone was trained with; flags may override."""
    seen = {}
    for task, ck in checkpoints.items():
        seen[task] = json.dumps(ck.config.get("data", {}), sort_keys=True)
    if len(set(seen.values())) > 1:
        raise ConfigurationError(f"backbones were trained on different data splits: {seen}")
    base = dict(DEFAULTS["data"])
    if seen:
        base.update(json.loads(next(iter(seen.values()))))
    ns = argparse.Namespace(**vars(args))
    cfg = resolve(ns, ["data", "head"])
    explicit = {key for dest, (sec, key) in FLAG_KEYS.items()
                if sec == "data" and getattr(args, dest, None) is not None}
    for key in explicit:
        base[key] = cfg["data"][key]
    if args.paper_faithful:
        base["group_by_source"] = False
    cfg["data"] = base
    return cfg


def _experiment_inputs(args, need_all):
    paths = _backbone_paths(args)
    missing = [t for t in model.TASKS if t not in paths]
    if need_all and missing:
        raise ConfigurationError(f"no backbone checkpoint for {missing}")
    checkpoints = {t: train_mod.read_checkpoint(p) for t, p in paths.items()}
    cfg = _shared_data_config(args, checkpoints)
    precision = next(iter(checkpoints.values())).network.spec.precision if checkpoints else "float32"
    _, (tr, te) = _datasets(args.manifest, cfg["data"], precision)
    nets = {t: ck.network for t, ck in checkpoints.items()}
    cfg["backbones"] = {t: os.path.abspath(p) for t, p in paths.items()}
    return nets, tr, te, cfg


def cmd_extract(args):
    paths = _backbone_paths(args)
    if not paths:
        raise ConfigurationError("extract needs --checkpoint TASK=PATH or --backbones DIR")
    checkpoints = {t: train_mod.read_checkpoint(p) for t, p in paths.items()}
    cfg = _shared_data_config(args, checkpoints)
    precision = next(iter(checkpoints.values())).network.spec.precision
    _, (tr, te) = _datasets(args.manifest, cfg["data"], precision)
    out = _out_dir(args.out)
    for task, ck in checkpoints.items():
        for split, ds in (("train", tr), ("test", te)):
            fs = expt.extract_features(ck.network, ds, split)
            expt.write_feature_set(fs, os.path.join(out, f"{task}_{split}.feat"))
    cfg["backbones"] = {t: os.path.abspath(p) for t, p in paths.items()}
    _echo(out, "extract_config.json", cfg)


def _run_experiment(args, runner, name):
    nets, tr, te, cfg = _experiment_inputs(args, need_all=True)
    out = _out_dir(args.out)
    features = expt.extract_all(nets, tr, te)
    if args.save_features:
        for task in model.TASKS:
            expt.write_feature_set(features[1][task], os.path.join(out, f"{task}_train.feat"))
            expt.write_feature_set(features[2][task], os.path.join(out, f"{task}_test.feat"))
    report = runner(nets, tr, te, _head_config(cfg["head"]), features=features)
    expt.emit_report(report, out)
    _echo(out, f"{name}_config.json", cfg)
    return report


def cmd_cross(args):
    _run_experiment(args, expt.run_cross_task_matrix, "cross")


def cmd_fuse(args):
    _run_experiment(args, expt.run_fusion_study, "fuse")


def cmd_report(args):
    try:
        with open(args.results, encoding="utf-8") as fh:
            report = expt.report_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read results {args.results}: {exc}") from None
    expt.emit_report(report, _out_dir(args.out))


def cmd_gradcheck(args):
    worst = engine.layer_gradchecks(cases=args.cases, seed=args.seed or 0, eps=args.eps)
    net = model.build_backbone(model.TaskDescriptor("id", 5, 12), (1, 8, 8), seed=args.seed or 0,
                               precision="float64", channels=(2, 3, 4), conv_padding="same")
    worst["backbone"] = engine.grad_check(model.LossProbe(randomized(net, args.seed or 0), [0, 3]),
                                          _rng(args.seed).normal(size=(2, 1, 8, 8)), args.eps)
    ok = True
    for kind, err in worst.items():
        passed = err < args.tolerance
        ok &= passed
        print(f"{kind:14s} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}", file=sys.stderr)
    if not ok:
        sys.exit(1)


def _rng(seed):
    import numpy as np
    return np.random.default_rng([seed or 0, 99])


def randomized(network, seed=0):
    """Copy of ``network`` with O(1) Gaussian weights and biases, away from ReLU kinks."""
    rng = _rng(seed)
    return network.with_params([
        engine.LayerParams(p.kind, rng.normal(0, 0.5, p.weights.shape), rng.normal(0, 0.2, p.bias.shape))
        for p in network.params])


# -- parser ---------------------------------------------------------------------------

def _add_data_flags(p):
    p.add_argument("--augment-factor", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--data-seed", type=int, help="seed for augmentation and the train/test split")
    p.add_argument("--paper-faithful", action="store_true",
                   help="split augmented images individually instead of by source image")


def _add_head_flags(p):
    p.add_argument("--head-iterations", type=int)
    p.add_argument("--head-batch", type=int)
    p.add_argument("--head-lr", type=float)
    p.add_argument("--head-decay-interval", type=int)
    p.add_argument("--head-seed", type=int)
    p.add_argument("--normalize-features", action="store_true")


def _add_backbone_flags(p):
    p.add_argument("--backbones", help="directory holding id.ckpt, age.ckpt, race.ckpt, gender.ckpt")
    p.add_argument("--checkpoint", action="append", metavar="TASK=PATH")
    p.add_argument("--manifest", required=True)


def build_parser():
    parser = _Parser(prog="facefuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="render the synthetic 24-subgroup face set")
    p.add_argument("--out", required=True)
    p.add_argument("--ids-per-subgroup", type=int)
    p.add_argument("--images-per-id", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one task backbone")
    p.add_argument("--task", required=True, choices=model.TASKS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--decay-interval", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--precision", choices=sorted(model.DTYPES))
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--dry-run", action="store_true", help="validate and echo the configuration only")
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("extract", cmd_extract, "dump feature-tap activations"),
                                 ("cross", cmd_cross, "cross-task feature matrix"),
                                 ("fuse", cmd_fuse, "own / other-three / all fusion study")):
        p = sub.add_parser(name, help=helptext)
        _add_backbone_flags(p)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=int, help="head seed (overrides --head-seed)")
        _add_data_flags(p)
        _add_head_flags(p)
        if name != "extract":
            p.add_argument("--save-features", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="re-emit tables from a saved results JSON")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except FacefuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        log.exception("internal error")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
