"""Training for every regime of the experiment matrix (offline distillation).

Teachers are always loaded from finished checkpoints, put in inference mode and
never updated; their outputs on a fixed, un-augmented split are therefore
constant and are computed once per run (or once per matrix) and cached.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .data import DatasetManifest, ManifestDataset, DEFAULT_IMAGE_SIZE
from .errors import ConfigurationError, ResourceError, TrainingDiverged
from .evaluation import compute_metrics, confusion_matrix, export_report, predict
from .fusion import AttentionConfig, TeacherFusion, relation_distillation_loss
from .losses import (
    LossWeights,
    Projection,
    feature_distillation_loss,
    response_distillation_loss,
    total_loss,
)
from .model_zoo import (
    TOY_BACKBONE,
    TeacherSpec,
    build_student,
    build_teacher,
    count_parameters,
    default_student_spec,
    StudentArchSpec,
    layer_groups,
    load_model,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MODES = ("vanilla", "finetune_teacher", "kd_response", "kd_feature", "kd_feature_multi", "kd_relation")
KD_MODES = ("kd_response", "kd_feature", "kd_feature_multi", "kd_relation")
TEACHER_ARITY = {
    "vanilla": (0, 0),
    "finetune_teacher": (1, 1),
    "kd_response": (1, 1),
    "kd_feature": (1, 1),
    "kd_feature_multi": (2, 3),
    "kd_relation": (2, 3),
}

RECORD_FILE = "run_record.json"
CHECKPOINT_FILE = "model.ckpt"
CONFIG_FILE = "config.resolved.json"


def _reject_unknown(cls, data: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"unknown config key {prefix}{key}", f"{prefix}{key}")


@dataclass
class TrainConfig:
    """One run. For ``finetune_teacher`` ``teacher_ids`` holds a backbone id;
    for KD modes it holds teacher checkpoint paths."""

    mode: str = "vanilla"
    teacher_ids: list[str] = field(default_factory=list)
    teacher_weights_mode: str = "scratch"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    temperature: float = 1.0
    seed: int = 0
    image_size: int = DEFAULT_IMAGE_SIZE
    freeze_depth: int | None = None  # None: 4 for pretrained teachers, else 0
    proj_dim: int = 128
    resp_on_logits: bool = False
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    student_arch: dict | None = None
    name: str | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}", "train.mode")
        lo, hi = TEACHER_ARITY[self.mode]
        n = len(self.teacher_ids)
        if not lo <= n <= hi:
            want = str(lo) if lo == hi else f"{lo}-{hi}"
            raise ConfigurationError(
                f"mode {self.mode} needs {want} teacher(s), got {n}", "train.teacher_ids"
            )
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0", "train.epochs")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1", "train.batch_size")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive", "train.learning_rate")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}", "train.optimizer")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive", "train.temperature")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be >= 8", "train.image_size")
        if self.proj_dim < 1:
            raise ConfigurationError("proj_dim must be >= 1", "train.proj_dim")
        return self

    def resolved_freeze_depth(self):
        if self.freeze_depth is not None:
            return self.freeze_depth
        return 4 if self.teacher_weights_mode == "pretrained" else 0

    def to_dict(self):
        d = asdict(self)
        d["teacher_ids"] = list(self.teacher_ids)
        return d

    @classmethod
    def from_dict(cls, data: dict, prefix: str = "train."):
        _reject_unknown(cls, data, prefix)
        data = dict(data)
        if "loss_weights" in data and not isinstance(data["loss_weights"], LossWeights):
            lw = data["loss_weights"]
            if isinstance(lw, (list, tuple)):
                lw = dict(zip(("resp", "feat", "rel"), lw))
            _reject_unknown(LossWeights, lw, prefix + "loss_weights.")
            data["loss_weights"] = LossWeights(**lw)
        if "attention" in data and not isinstance(data["attention"], AttentionConfig):
            _reject_unknown(AttentionConfig, data["attention"], prefix + "attention.")
            data["attention"] = AttentionConfig(**data["attention"])
        if "teacher_ids" in data:
            data["teacher_ids"] = list(data["teacher_ids"])
        return cls(**data)


def derive_seeds(master: int) -> dict[str, int]:
    """Fan one master seed out into independent init / shuffle / auxiliary seeds."""
    init, shuffle, aux = np.random.SeedSequence(master).generate_state(3)
    return {"master": int(master), "init": int(init), "shuffle": int(shuffle), "aux": int(aux)}


@dataclass
class RunRecord:
    name: str
    config: dict
    seeds: dict
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    test_metrics: dict | None = None
    confusion: dict | None = None
    complexity: dict | None = None
    frozen_parameters: int = 0
    fine_tuning: str = "-"
    teachers: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    artifacts: dict = field(default_factory=dict)
    status: str = "ok"
    diagnostic: str | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def test_accuracy(self):
        return None if self.test_metrics is None else self.test_metrics["accuracy"]


class SplitData:
    """The three split datasets of a manifest at one image size, decoded once."""

    def __init__(self, manifest: DatasetManifest, image_size: int = DEFAULT_IMAGE_SIZE):
        self.manifest = manifest
        self.image_size = image_size
        self.splits = {s: ManifestDataset(manifest, s, image_size) for s in ("train", "val", "test")}
        if not len(self.splits["train"]):
            raise ConfigurationError("training split is empty", "split")

    @property
    def num_classes(self):
        return self.manifest.num_classes

    def __getitem__(self, split):
        return self.splits[split]


def _as_split_data(data, image_size) -> SplitData:
    if isinstance(data, SplitData):
        if data.image_size != image_size:
            raise ConfigurationError(
                f"data prepared at {data.image_size}px but config asks for {image_size}px", "train.image_size"
            )
        return data
    return SplitData(data, image_size)


def _loader(dataset, batch_size, shuffle=False, seed=0):
    gen = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=gen, num_workers=0)


# ---------------------------------------------------------------------------
# teachers
# ---------------------------------------------------------------------------


def check_teacher_checkpoints(paths):
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise ResourceError(f"teacher checkpoint(s) missing: {', '.join(map(str, missing))}")


@dataclass
class TeacherOutputs:
    features: torch.Tensor
    logits: torch.Tensor


class Teacher:
    """A frozen teacher plus lazily computed, cached per-split outputs."""

    def __init__(self, path, cache: dict | None = None):
        self.path = str(path)
        self.model, self.header, _ = load_model(path, return_header=True)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._cache = cache if cache is not None else {}

    @property
    def feature_dim(self):
        return self.model.feature_dim

    @property
    def label(self):
        return self.header.get("fine_tuning", "-")

    @torch.no_grad()
    def outputs(self, data: SplitData, split: str) -> TeacherOutputs:
        key = (str(Path(self.path).resolve()), id(data), split)
        if key not in self._cache:
            feats, logits = [], []
            for x, _, _ in _loader(data[split], 64):
                f = self.model.forward_features(x)
                feats.append(f)
                logits.append(self.model.classifier(f))
            self._cache[key] = TeacherOutputs(torch.cat(feats), torch.cat(logits))
        return self._cache[key]


# ---------------------------------------------------------------------------
# distillation heads
# ---------------------------------------------------------------------------


class DistillationHeads(nn.Module):
    """Projections (and the fusion block in relation mode) trained with the student."""

    def __init__(self, mode: str, teacher_dims: list[int], student_dim: int, config: TrainConfig):
        super().__init__()
        self.mode = mode
        d = config.proj_dim
        self.fusion = None
        self.proj_teachers = nn.ModuleList()
        self.proj_student = None
        if mode in ("kd_feature", "kd_feature_multi"):
            self.proj_teachers = nn.ModuleList(Projection(w, d) for w in teacher_dims)
            self.proj_student = Projection(student_dim, d)
        elif mode == "kd_relation":
            self.fusion = TeacherFusion(teacher_dims, config.attention)
            self.proj_teachers = nn.ModuleList([Projection(self.fusion.out_dim, d)])
            self.proj_student = Projection(student_dim, d)


def compute_losses(mode, logits, feats, labels, teacher_outs, heads, config: TrainConfig):
    ce = F.cross_entropy(logits, labels)
    w = config.loss_weights
    if mode in ("vanilla", "finetune_teacher"):
        return total_loss(ce, weights=w)
    if mode == "kd_relation":
        f_star = heads.fusion([t.features for t in teacher_outs])
        rel = relation_distillation_loss(f_star, feats, heads.proj_teachers[0], heads.proj_student)
        return total_loss(ce, rel=rel, weights=w)
    resp_terms, feat_terms = [], []
    for i, t in enumerate(teacher_outs):
        resp_terms.append(
            response_distillation_loss(t.logits, logits, config.temperature, on_logits=config.resp_on_logits)
        )
        if mode != "kd_response":
            feat_terms.append(feature_distillation_loss(t.features, feats, heads.proj_teachers[i], heads.proj_student))
    resp = torch.stack(resp_terms).mean()
    feat = torch.stack(feat_terms).mean() if feat_terms else None
    return total_loss(ce, resp=resp, feat=feat, weights=w)


def _batch_teacher_outputs(teachers, data, split, idx):
    outs = []
    for t in teachers:
        full = t.outputs(data, split)
        outs.append(TeacherOutputs(full.features[idx], full.logits[idx]))
    return outs


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _fine_tuning_label(weights_mode, depth, n_groups):
    if weights_mode == "scratch":
        return "Scratch"
    if depth >= n_groups:
        return "Pre-trained"
    return "Fine-tuned"


def _build_model(config: TrainConfig, num_classes: int):
    if config.mode == "finetune_teacher":
        backbone = config.teacher_ids[0]
        spec = TeacherSpec(backbone, config.teacher_weights_mode, config.resolved_freeze_depth(), num_classes)
        return build_teacher(spec)
    if config.student_arch:
        spec = StudentArchSpec.from_dict({**config.student_arch, "num_classes": num_classes})
    else:
        spec = default_student_spec(num_classes)
    return build_student(spec)


def _evaluate_split(model, heads, teachers, data, split, config):
    """Mean loss terms and accuracy over a split (no gradient)."""
    model.eval()
    heads.eval()
    sums, n, correct = {}, 0, 0
    with torch.no_grad():
        for x, y, idx in _loader(data[split], max(config.batch_size, 64)):
            feats = model.forward_features(x)
            logits = model.classifier(feats)
            outs = _batch_teacher_outputs(teachers, data, split, idx)
            br = compute_losses(config.mode, logits, feats, y, outs, heads, config)
            for k, v in br.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v * len(y)
            n += len(y)
            correct += int((logits.argmax(1) == y).sum())
    if n == 0:
        return {}, float("nan")
    return {k: v / n for k, v in sums.items()}, correct / n


def train(config: TrainConfig, data, out_dir=None, teacher_cache: dict | None = None) -> RunRecord:
    """Run one configuration end to end and return its :class:`RunRecord`.

    ``data`` is a split :class:`DatasetManifest` or a prepared :class:`SplitData`.
    With ``out_dir`` set, the checkpoint, record and figures are written there.
    """
    config.validate()
    if config.mode in KD_MODES:
        check_teacher_checkpoints(config.teacher_ids)
    started = time.perf_counter()
    data = _as_split_data(data, config.image_size)
    seeds = derive_seeds(config.seed)
    split_cfg = data.manifest.split_config
    seeds["split"] = None if split_cfg is None else split_cfg.seed
    name = config.name or config.mode
    record = RunRecord(name=name, config=config.to_dict(), seeds=seeds)

    teachers = [Teacher(p, teacher_cache) for p in config.teacher_ids] if config.mode in KD_MODES else []
    for t in teachers:
        if t.model.num_classes != data.num_classes:
            raise ConfigurationError(
                f"teacher {t.path} predicts {t.model.num_classes} classes, data has {data.num_classes}",
                "train.teacher_ids",
            )
    record.teachers = [{"path": t.path, "backbone": t.header["arch_spec"].get("backbone_id")} for t in teachers]
    if config.mode in ("kd_response", "kd_feature"):
        record.fine_tuning = teachers[0].label

    torch.manual_seed(seeds["init"])
    model = _build_model(config, data.num_classes)
    torch.manual_seed(seeds["aux"])
    heads = DistillationHeads(config.mode, [t.feature_dim for t in teachers], model.feature_dim, config)
    if config.mode == "finetune_teacher":
        depth = model.frozen_depth
        record.fine_tuning = _fine_tuning_label(config.teacher_weights_mode, depth, len(layer_groups(model)))

    params = [p for p in list(model.parameters()) + list(heads.parameters()) if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    train_loader = _loader(data["train"], config.batch_size, shuffle=True, seed=seeds["shuffle"])

    best_acc, best_state = -math.inf, (copy.deepcopy(model.state_dict()), copy.deepcopy(heads.state_dict()))
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(config.epochs):
        model.train()
        heads.train()
        sums, n = {}, 0
        for step, (x, y, idx) in enumerate(train_loader):
            feats = model.forward_features(x)
            logits = model.classifier(feats)
            outs = _batch_teacher_outputs(teachers, data, "train", idx)
            br = compute_losses(config.mode, logits, feats, y, outs, heads, config)
            if not torch.isfinite(br.total):
                record.status = "failed"
                record.diagnostic = f"non-finite loss at epoch {epoch} step {step}: {br.as_dict()}"
                record.wall_clock_seconds = time.perf_counter() - started
                if out_dir is not None:
                    record.save(out_dir / RECORD_FILE)
                raise TrainingDiverged(record.diagnostic)
            optimizer.zero_grad(set_to_none=True)
            br.total.backward()
            optimizer.step()
            for k, v in br.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v * len(y)
            n += len(y)
        train_terms = {k: v / n for k, v in sums.items()}
        val_terms, val_acc = _evaluate_split(model, heads, teachers, data, "val", config)
        record.epochs.append({"epoch": epoch, "train": train_terms, "val": val_terms, "val_accuracy": val_acc})
        log.info("%s epoch %d train %.4f val acc %.4f", name, epoch, train_terms["total"], val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = (copy.deepcopy(model.state_dict()), copy.deepcopy(heads.state_dict()))
            record.best_epoch = epoch

    model.load_state_dict(best_state[0])
    heads.load_state_dict(best_state[1])
    model.eval()

    test_split = "test" if len(data["test"]) else "val"
    preds, labels = predict(model, _loader(data[test_split], 64))
    if len(preds):
        record.test_metrics = compute_metrics(preds, labels, data.num_classes).to_dict()
        record.confusion = confusion_matrix(preds, labels, data.num_classes, data.manifest.class_names).to_dict()
    complexity = count_parameters(model)
    record.complexity = complexity.to_dict()
    record.frozen_parameters = complexity.total_parameters - complexity.trainable_parameters
    record.wall_clock_seconds = time.perf_counter() - started

    if out_dir is not None:
        _write_run_outputs(record, model, heads, config, out_dir)
    return record


def _write_run_outputs(record, model, heads, config, out_dir: Path):
    from . import plotting

    out_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "role": "teacher" if config.mode == "finetune_teacher" else "student",
        "mode": config.mode,
        "fine_tuning": record.fine_tuning,
        "weights_mode": config.teacher_weights_mode if config.mode == "finetune_teacher" else None,
        "image_size": config.image_size,
        "seed": config.seed,
    }
    extra = {}
    if heads.fusion is not None:
        extra["fusion_params"] = heads.fusion.state_dict()
        header["attention"] = config.attention.to_dict()
    if len(list(heads.parameters())):
        extra["distill_heads"] = heads.state_dict()
    ckpt = save_checkpoint(out_dir / CHECKPOINT_FILE, model, header, extra)
    record.artifacts["checkpoint"] = str(ckpt)
    if record.confusion is not None:
        record.artifacts["confusion_png"] = str(
            plotting.plot_confusion_matrix(record.confusion, out_dir / "confusion_matrix.png", title=record.name)
        )
    if record.epochs:
        record.artifacts["curves_png"] = str(plotting.plot_training_curves(record, out_dir / "training_curves.png"))
    record.artifacts["record"] = str(out_dir / RECORD_FILE)
    record.save(out_dir / RECORD_FILE)


def finetune_teacher(config: TrainConfig, data, out_dir=None) -> RunRecord:
    """Train one teacher with cross-entropy for later offline distillation."""
    if config.mode != "finetune_teacher":
        raise ConfigurationError("finetune_teacher needs mode='finetune_teacher'", "train.mode")
    return train(config, data, out_dir)


# ---------------------------------------------------------------------------
# experiment matrix
# ---------------------------------------------------------------------------

NAMED_PAIRS = {
    "KD_FEAT_T2_1": ("RN50", "RN101"),
    "KD_FEAT_T2_2": ("RN101", "RN152"),
}
DEFAULT_REL_PAIR = ("RN101", "RN152")


@dataclass
class MatrixEntry:
    name: str
    mode: str
    teachers: list[str]


def resolve_entry(entry, teacher_names: list[str], rel_pair=DEFAULT_REL_PAIR) -> MatrixEntry:
    """Map a named matrix run (or an explicit dict) onto a mode and teacher list."""
    if isinstance(entry, dict):
        unknown = set(entry) - {"name", "mode", "teachers"}
        if unknown:
            raise ConfigurationError(f"unknown matrix run key(s) {sorted(unknown)}", "runs")
        return MatrixEntry(entry["name"], entry["mode"], list(entry.get("teachers", [])))
    name = entry
    two = teacher_names if len(teacher_names) == 2 else None
    if name == "STU":
        return MatrixEntry(name, "vanilla", [])
    if name in NAMED_PAIRS:
        return MatrixEntry(name, "kd_feature_multi", list(NAMED_PAIRS[name]))
    if name == "KD_FEAT_T2":
        if two is None:
            raise ConfigurationError("KD_FEAT_T2 needs exactly two teachers in the pool", "runs")
        return MatrixEntry(name, "kd_feature_multi", two)
    if name == "KD_FEAT_T3":
        return MatrixEntry(name, "kd_feature_multi", list(teacher_names))
    if name == "KD_REL_T2":
        pair = two if two is not None else list(rel_pair)
        return MatrixEntry(name, "kd_relation", pair)
    for prefix, mode in (("KD_RESP_", "kd_response"), ("KD_FEAT_", "kd_feature")):
        if name.startswith(prefix):
            return MatrixEntry(name, mode, [name[len(prefix):]])
    raise ConfigurationError(f"cannot resolve matrix run {name!r}", "runs")


def run_experiment_matrix(matrix: dict, data, out_dir, report_formats=("markdown", "csv", "json")):
    """Train the teacher pool (unless checkpoints are given), then every student run.

    ``matrix`` keys: ``seed``, ``defaults`` (TrainConfig fields), ``teachers``
    (name -> ``{"checkpoint": path}`` or training fields incl. ``backbone``),
    ``runs`` (names like ``STU``/``KD_REL_T2`` or explicit dicts) and optional
    ``rel_pair``. Failed runs are recorded and the matrix continues.
    """
    unknown = set(matrix) - {"seed", "defaults", "teachers", "runs", "rel_pair"}
    if unknown:
        raise ConfigurationError(f"unknown matrix key(s) {sorted(unknown)}", f"matrix.{sorted(unknown)[0]}")
    out_dir = Path(out_dir)
    seed = int(matrix.get("seed", 0))
    defaults = dict(matrix.get("defaults", {}))
    defaults["seed"] = seed
    base = TrainConfig.from_dict(defaults, "matrix.defaults.")
    data = _as_split_data(data, base.image_size)
    entries = [resolve_entry(e, list(matrix.get("teachers", {})), matrix.get("rel_pair", DEFAULT_REL_PAIR))
               for e in matrix.get("runs", [])]

    records = []
    ckpts = {}
    for tname, tcfg in matrix.get("teachers", {}).items():
        tcfg = dict(tcfg)
        if "checkpoint" in tcfg:
            ckpts[tname] = tcfg["checkpoint"]
            continue
        backbone = tcfg.pop("backbone", tname)
        cfg = TrainConfig.from_dict(
            {**defaults, **tcfg, "mode": "finetune_teacher", "teacher_ids": [backbone], "name": tname},
            f"matrix.teachers.{tname}.",
        )
        rec = _guarded_run(cfg, data, out_dir / "teachers" / tname, None)
        records.append(rec)
        if rec.status == "ok":
            ckpts[tname] = rec.artifacts["checkpoint"]

    teacher_cache = {}
    for entry in entries:
        missing = [t for t in entry.teachers if t not in ckpts]
        cfg_dict = {**defaults, "mode": entry.mode, "name": entry.name,
                    "teacher_ids": [ckpts.get(t, f"<missing teacher {t}>") for t in entry.teachers]}
        cfg = TrainConfig.from_dict(cfg_dict, "matrix.defaults.")
        if missing:
            records.append(RunRecord(entry.name, cfg.to_dict(), derive_seeds(seed), status="failed",
                                     diagnostic=f"no checkpoint for teacher(s) {missing}"))
            continue
        records.append(_guarded_run(cfg, data, out_dir / "runs" / entry.name, teacher_cache))

    write_matrix_report(records, out_dir, report_formats)
    return records


def _guarded_run(cfg, data, out_dir, teacher_cache):
    try:
        return train(cfg, data, out_dir, teacher_cache)
    except Exception as exc:  # noqa: BLE001 - one failed run must not stop the matrix
        log.error("run %s failed: %s", cfg.name, exc)
        return RunRecord(cfg.name or cfg.mode, cfg.to_dict(), derive_seeds(cfg.seed), status="failed",
                         diagnostic=f"{type(exc).__name__}: {exc}")


def write_matrix_report(records, out_dir, formats=("markdown", "csv", "json")):
    from . import plotting

    out_dir = Path(out_dir)
    suffix = {"markdown": "md", "csv": "csv", "json": "json"}
    paths = {fmt: export_report(records, fmt, out_dir / f"report.{suffix[fmt]}") for fmt in formats}
    ok = [r for r in records if r.status == "ok"]
    if ok:
        paths["figure"] = plotting.plot_comparison(ok, out_dir / "report_accuracy.png")
    return paths
