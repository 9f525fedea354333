"""Command-line entry point: ``distillkit <subcommand> ...``.

Values resolve as flag > JSON config file (``--config``) > built-in default.
Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration,
3 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, DistillKitError, IngestionError, InputError, ResourceError

log = logging.getLogger("distillkit")

CONFIG_SECTIONS = {"data", "split", "train", "attention", "out"}
DATA_KEYS = {"root", "sidecar", "exclude"}
SPLIT_KEYS = {"ratios", "seed", "stratified"}


class CliError(Exception):
    def __init__(self, code, kind, message, key=None):
        super().__init__(message)
        self.code, self.kind, self.key = code, kind, key


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ResourceError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file is not valid JSON: {exc}", "<file>") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config file must hold a JSON object", "<file>")
    for key in cfg:
        if key not in CONFIG_SECTIONS:
            raise ConfigurationError(f"unknown config key {key}", key)
    for section, allowed in (("data", DATA_KEYS), ("split", SPLIT_KEYS)):
        for key in cfg.get(section, {}):
            if key not in allowed:
                raise ConfigurationError(f"unknown config key {section}.{key}", f"{section}.{key}")
    return cfg


def _merge(*layers):
    out = {}
    for layer in layers:
        out.update({k: v for k, v in layer.items() if v is not None})
    return out


def _train_flags(args) -> dict:
    flags = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "seed": args.seed,
        "image_size": args.image_size,
        "temperature": getattr(args, "temperature", None),
        "proj_dim": getattr(args, "proj_dim", None),
        "name": args.name,
    }
    if getattr(args, "resp_on_logits", False):
        flags["resp_on_logits"] = True
    return flags


def _attention_flags(args) -> dict:
    flags = {
        "d_model": getattr(args, "d_model", None),
        "num_heads": getattr(args, "num_heads", None),
        "ffn_dim": getattr(args, "ffn_dim", None),
    }
    if getattr(args, "no_teacher_embeddings", False):
        flags["use_teacher_embeddings"] = False
    return flags


def _weight_flags(args) -> dict:
    return {
        "resp": getattr(args, "beta_resp", None),
        "feat": getattr(args, "beta_feat", None),
        "rel": getattr(args, "beta_rel", None),
    }


def resolve_train_config(args, file_cfg: dict, fixed: dict):
    from .trainer import TrainConfig

    train_file = dict(file_cfg.get("train", {}))
    attention = _merge(train_file.pop("attention", {}) or {}, file_cfg.get("attention", {}), _attention_flags(args))
    weights = train_file.pop("loss_weights", {}) or {}
    if isinstance(weights, (list, tuple)):
        weights = dict(zip(("resp", "feat", "rel"), weights))
    weights = _merge(weights, _weight_flags(args))
    merged = _merge(train_file, _train_flags(args), fixed)
    merged["attention"] = attention
    merged["loss_weights"] = weights
    try:
        cfg = TrainConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigurationError(str(exc), "train") from exc
    return cfg.validate()


def _data_path(args, file_cfg):
    path = args.data or file_cfg.get("data", {}).get("sidecar")
    if not path:
        raise ConfigurationError("no split sidecar given (--data or data.sidecar)", "data.sidecar")
    return path


def _out_dir(args, file_cfg):
    out = args.out or file_cfg.get("out")
    if not out:
        raise ConfigurationError("no output directory given (--out or out)", "out")
    return Path(out)


def write_resolved(out_dir: Path, doc: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_data(args, file_cfg):
    from .data import synth_dataset

    if not args.out:
        raise ConfigurationError("--out is required", "out")
    manifest = synth_dataset(args.classes, args.per_class, args.seed, args.out, size=args.size, noise=args.noise)
    print(json.dumps({"root": str(args.out), "classes": manifest.num_classes, "records": len(manifest.records)}))


def cmd_prepare(args, file_cfg):
    from .data import KVASIR_V2_EXCLUDED, SplitConfig, ingest_folder_dataset, save_split_sidecar, split_dataset

    data_cfg, split_cfg = file_cfg.get("data", {}), file_cfg.get("split", {})
    root = args.root or data_cfg.get("root")
    if not root:
        raise ConfigurationError("--root is required", "data.root")
    if not Path(root).is_dir():
        raise ResourceError(f"dataset root not found: {root}")
    exclude = list(args.exclude or data_cfg.get("exclude", []))
    if args.kvasir_v2:
        exclude += list(KVASIR_V2_EXCLUDED)
    ratios = tuple(args.ratios or split_cfg.get("ratios", (0.6, 0.2, 0.2)))
    seed = args.seed if args.seed is not None else split_cfg.get("seed", 0)
    stratified = split_cfg.get("stratified", True) if not args.no_stratify else False
    cfg = SplitConfig(ratios, int(seed), bool(stratified))
    manifest = split_dataset(ingest_folder_dataset(root, exclude), cfg)
    sidecar = Path(args.sidecar or data_cfg.get("sidecar") or Path(root) / "split.json")
    save_split_sidecar(manifest, sidecar)
    summary = {
        "sidecar": str(sidecar),
        "classes": manifest.num_classes,
        "records": len(manifest.records),
        "skipped": len(manifest.skipped),
        "counts": manifest.split_counts(),
    }
    print(json.dumps(summary))


def _run_training(args, file_cfg, fixed):
    from .data import load_split_sidecar
    from .trainer import CHECKPOINT_FILE, RECORD_FILE, check_teacher_checkpoints, train

    cfg = resolve_train_config(args, file_cfg, fixed)
    sidecar = _data_path(args, file_cfg)
    out_dir = _out_dir(args, file_cfg)
    manifest = load_split_sidecar(sidecar)
    if cfg.mode.startswith("kd_"):
        check_teacher_checkpoints(cfg.teacher_ids)
    write_resolved(out_dir, {"command": args.command, "data": {"sidecar": str(Path(sidecar).resolve())},
                             "train": cfg.to_dict(), "out": str(out_dir)})
    record = train(cfg, manifest, out_dir)
    print(json.dumps({"name": record.name, "best_epoch": record.best_epoch,
                      "test_accuracy": record.test_accuracy,
                      "record": str(out_dir / RECORD_FILE), "checkpoint": str(out_dir / CHECKPOINT_FILE)}))


def cmd_train_teacher(args, file_cfg):
    fixed = {"mode": "finetune_teacher", "teacher_ids": [args.backbone] if args.backbone else None,
             "teacher_weights_mode": args.weights_mode, "freeze_depth": args.freeze_depth}
    if fixed["teacher_ids"] is None and not file_cfg.get("train", {}).get("teacher_ids"):
        raise ConfigurationError("--backbone is required", "train.teacher_ids")
    _run_training(args, file_cfg, fixed)


def cmd_train_student(args, file_cfg):
    _run_training(args, file_cfg, {"mode": "vanilla", "teacher_ids": []})


def cmd_distill(args, file_cfg):
    _run_training(args, file_cfg, {"mode": args.mode, "teacher_ids": args.teachers})


def cmd_matrix(args, file_cfg_unused):
    from .data import load_split_sidecar
    from .trainer import run_experiment_matrix

    if not args.config:
        raise ConfigurationError("--config (matrix JSON) is required", "config")
    matrix = json.loads(Path(args.config).read_text()) if Path(args.config).is_file() else None
    if matrix is None:
        raise ResourceError(f"matrix config not found: {args.config}")
    if args.seed is not None:
        matrix["seed"] = args.seed
    if not args.data:
        raise ConfigurationError("--data is required", "data.sidecar")
    if not args.out:
        raise ConfigurationError("--out is required", "out")
    manifest = load_split_sidecar(args.data)
    out_dir = Path(args.out)
    write_resolved(out_dir, {"command": "matrix", "data": {"sidecar": str(Path(args.data).resolve())},
                             "matrix": matrix, "out": str(out_dir)})
    records = run_experiment_matrix(matrix, manifest, out_dir)
    print(json.dumps([{"name": r.name, "status": r.status, "test_accuracy": r.test_accuracy} for r in records]))


def cmd_evaluate(args, file_cfg):
    from . import plotting
    from .data import load_split_sidecar
    from .evaluation import evaluate_model
    from .model_zoo import load_model
    from .trainer import SplitData, _loader

    model, header, _ = load_model(args.checkpoint, return_header=True)
    manifest = load_split_sidecar(_data_path(args, file_cfg))
    size = args.image_size or header.get("image_size") or 224
    data = SplitData(manifest, size)
    metrics, cm = evaluate_model(model, _loader(data[args.split], 64), manifest.num_classes, manifest.class_names)
    out_dir = _out_dir(args, file_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1) + "\n")
    (out_dir / "confusion_matrix.json").write_text(json.dumps(cm.to_dict(), indent=1) + "\n")
    plotting.plot_confusion_matrix(cm, out_dir / "confusion_matrix.png", title=Path(args.checkpoint).parent.name)
    print(json.dumps({"accuracy": metrics.accuracy, **{f"weighted_{k}": v for k, v in metrics.weighted.items()}}))


def cmd_gradcam(args, file_cfg):
    import numpy as np

    from . import plotting
    from .data import denormalize, preprocess
    from .evaluation import gradcam
    from .model_zoo import load_model

    model, header, _ = load_model(args.checkpoint, return_header=True)
    if not Path(args.image).is_file():
        raise ResourceError(f"image not found: {args.image}")
    size = args.image_size or header.get("image_size") or 224
    x = preprocess(args.image, size)
    target = args.target_class
    if target is None:
        import torch

        with torch.no_grad():
            target = int(model(torch.from_numpy(x)[None]).argmax())
    sal = gradcam(model, x, target, args.layer)
    out_dir = _out_dir(args, file_cfg)
    heat, overlay = plotting.save_saliency(sal.heatmap, denormalize(x), out_dir / "saliency_heatmap.png",
                                           out_dir / "saliency_overlay.png")
    np.save(out_dir / "saliency.npy", sal.heatmap)
    print(json.dumps({"target_class": sal.target_class, "layer": sal.source_layer,
                      "heatmap": str(heat), "overlay": str(overlay)}))


def cmd_report(args, file_cfg):
    from .trainer import RECORD_FILE, RunRecord, write_matrix_report

    runs = Path(args.runs)
    if not runs.is_dir():
        raise ResourceError(f"runs directory not found: {runs}")
    paths = sorted(runs.rglob(RECORD_FILE))
    if not paths:
        raise ResourceError(f"no {RECORD_FILE} under {runs}")
    records = [RunRecord.load(p) for p in paths]
    out_dir = Path(args.out) if args.out else runs
    written = write_matrix_report(records, out_dir, (args.format,))
    print(json.dumps({k: str(v) for k, v in written.items()}))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common_train(p):
    p.add_argument("--config", help="JSON config file (sections: data, train, attention, out)")
    p.add_argument("--data", help="split sidecar JSON written by `prepare`")
    p.add_argument("--out", help="output run directory")
    p.add_argument("--epochs", type=int, help="training epochs (default 30)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 32)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-4)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--image-size", type=int, help="square input resolution (default 224)")
    p.add_argument("--name", help="run name used in reports")


def build_parser():
    parser = argparse.ArgumentParser(prog="distillkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic folder-per-class PNG dataset")
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    p.add_argument("--per-class", type=int, default=50, help="images per class")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--size", type=int, default=64, help="image side length in pixels")
    p.add_argument("--noise", type=float, default=0.15, help="Gaussian pixel noise std")
    p.add_argument("--out", help="output dataset root")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("prepare", help="ingest a dataset root, split it, write the sidecar")
    p.add_argument("--config", help="JSON config file (sections: data, split)")
    p.add_argument("--root", help="dataset root (<root>/<class>/<image>)")
    p.add_argument("--seed", type=int, help="split seed")
    p.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"), help="split ratios")
    p.add_argument("--exclude", nargs="*", help="class names to drop")
    p.add_argument("--kvasir-v2", action="store_true", help="drop the two dyed KVASIR-V2 classes")
    p.add_argument("--no-stratify", action="store_true", help="split without per-class stratification")
    p.add_argument("--sidecar", help="sidecar path (default <root>/split.json)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-teacher", help="fine-tune (or scratch-train) one teacher")
    _add_common_train(p)
    p.add_argument("--backbone", choices=["RN50", "RN101", "RN152", "TOY"], help="teacher backbone")
    p.add_argument("--weights-mode", choices=["pretrained", "scratch"], help="initial weights (default scratch)")
    p.add_argument("--freeze-depth", type=int, help="leading layer groups to freeze (default 4 if pretrained)")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train the student without distillation (STU)")
    _add_common_train(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("distill", help="train the student from teacher checkpoints")
    _add_common_train(p)
    p.add_argument("--mode", required=True,
                   choices=["kd_response", "kd_feature", "kd_feature_multi", "kd_relation"], help="distillation regime")
    p.add_argument("--teachers", nargs="+", default=[], help="teacher checkpoint paths")
    p.add_argument("--temperature", type=float, help="softmax temperature (default 1)")
    p.add_argument("--beta-resp", type=float, help="response loss weight (default 1)")
    p.add_argument("--beta-feat", type=float, help="feature loss weight (default 1)")
    p.add_argument("--beta-rel", type=float, help="relation loss weight (default 1)")
    p.add_argument("--proj-dim", type=int, help="projection width for feature matching (default 128)")
    p.add_argument("--resp-on-logits", action="store_true", help="match raw logits instead of soft targets")
    p.add_argument("--d-model", type=int, help="fusion width (default 128)")
    p.add_argument("--num-heads", type=int, help="fusion attention heads (default 4)")
    p.add_argument("--ffn-dim", type=int, help="fusion feed-forward width (default 256)")
    p.add_argument("--no-teacher-embeddings", action="store_true", help="disable per-teacher identity embeddings")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("matrix", help="run a named experiment matrix and emit comparison tables")
    p.add_argument("--config", help="matrix JSON (seed, defaults, teachers, runs)")
    p.add_argument("--data", help="split sidecar JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the matrix seed")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("evaluate", help="metrics and confusion matrix for a checkpoint")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", help="split sidecar JSON")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to evaluate")
    p.add_argument("--image-size", type=int, help="input resolution (default: from checkpoint)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcam", help="Grad-CAM heatmap and overlay for one image")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="input image file")
    p.add_argument("--target-class", type=int, help="class index (default: predicted class)")
    p.add_argument("--layer", help="module name (default: last conv block)")
    p.add_argument("--image-size", type=int, help="input resolution (default: from checkpoint)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("report", help="comparison table over run_record.json files")
    p.add_argument("--runs", required=True, help="directory searched recursively for run records")
    p.add_argument("--format", default="markdown", choices=["json", "csv", "markdown"], help="table format")
    p.add_argument("--out", help="output directory (default: --runs)")
    p.set_defaults(func=cmd_report)
    return parser


def _error(exc) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, ConfigurationError):
        return CliError(2, "configuration", str(exc), exc.key)
    if isinstance(exc, (ResourceError, FileNotFoundError)):
        return CliError(3, "missing_artifact", str(exc))
    if isinstance(exc, (InputError, IngestionError)):
        return CliError(1, "input", str(exc))
    if isinstance(exc, DistillKitError):
        return CliError(1, "runtime", str(exc))
    return CliError(1, "internal", f"{type(exc).__name__}: {exc}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = load_config_file(getattr(args, "config", None)) if args.command != "matrix" else {}
        args.func(args, file_cfg)
    except Exception as exc:  # noqa: BLE001 - converted to a structured exit
        err = _error(exc)
        payload = {"error": err.kind, "message": str(err)}
        if err.key:
            payload["key"] = err.key
        print(json.dumps(payload), file=sys.stderr)
        if err.code == 1 and err.kind == "internal":
            log.debug("traceback", exc_info=True)
        return err.code
    return 0


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
