"""``dfkd`` command line: one subcommand per pipeline stage.

Every run writes its artifacts plus ``manifest.json`` under ``--out``.
Settings resolve as dataclass defaults < desk profile < ``--config`` file <
flags; the resolved values are stored in the manifest, and
``--manifest PATH`` replays a run from them.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .data import (ClassificationDatasetSpec, DetectionSceneSpec, gen_classification_dataset,
                   gen_detection_dataset, load_checkpoint, load_classification_dataset, load_detection_dataset,
                   save_checkpoint, save_classification_dataset, save_detection_dataset)
from .data.config import apply_overrides, read_config
from .data.images import tile, to_uint8, write_pnm
from .errors import ConfigError, DfkdError, FormatError

log = logging.getLogger("dfkd")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(DfkdError):
    exit_code = 1


class OutputLockedError(DfkdError):
    exit_code = 2


# -- small I/O helpers ------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path) -> List[Dict[str, str]]:
    with open(path) as fh:
        lines = [l.rstrip("\n") for l in fh if l.strip()]
    if not lines:
        return []
    header = lines[0].split(",")
    return [dict(zip(header, l.split(","))) for l in lines[1:]]


def write_history(path, history: List[dict]) -> None:
    if not history:
        write_csv(path, ["epoch"], [])
        return
    keys = list(history[0])
    write_csv(path, keys, [[r[k] for k in keys] for r in history])


def write_metrics(path, metrics: Dict[str, object]) -> None:
    write_csv(path, ["metric", "value"], list(metrics.items()))


def read_metrics(path) -> Dict[str, str]:
    return {r["metric"]: r["value"] for r in read_csv(path)}


def write_preview(path, images: np.ndarray, cols: int) -> None:
    """Grid dump of (N, C, H, W) images in [-1, 1]; one channel gives PGM, three PPM."""
    pixels = to_uint8(np.moveaxis(images, 1, -1))
    if pixels.shape[-1] == 1:
        pixels = pixels[..., 0]
    write_pnm(path, tile(pixels, cols))


def _digest(path: Path) -> str:
    return hashlib.blake2b(path.read_bytes(), digest_size=16).hexdigest()


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


# -- checkpoints of each model kind ----------------------------------------------

def save_model(path, kind: str, model, config: dict, meta: Optional[dict] = None) -> None:
    save_checkpoint(path, kind, model.state_dict(), config, meta or {})


def _expect(ckpt, path, *kinds):
    if ckpt.kind not in kinds:
        raise ConfigError(f"{path}: checkpoint holds a {ckpt.kind!r} model, expected {' or '.join(kinds)}")


def load_vit(path):
    from .vit import ViT, ViTConfig

    ckpt = load_checkpoint(path)
    _expect(ckpt, path, "vit")
    model = ViT(ViTConfig(**ckpt.config))
    model.load_state_dict(ckpt.tensors)
    return model


def load_extractor(path):
    from .metrics import FeatureExtractor

    ckpt = load_checkpoint(path)
    _expect(ckpt, path, "fid-extractor")
    model = FeatureExtractor(**ckpt.config)
    model.load_state_dict(ckpt.tensors)
    return model


def load_generator(path):
    from .engine import Rng
    from .gan import GanConfig, Generator

    ckpt = load_checkpoint(path)
    _expect(ckpt, path, "gan-generator")
    gen = Generator(GanConfig(**ckpt.config), Rng(0))
    gen.load_state_dict(ckpt.tensors)
    return gen


def load_detr(path):
    from .detr import DetrConfig, DetrLite

    ckpt = load_checkpoint(path)
    _expect(ckpt, path, "detr")
    model = DetrLite(DetrConfig(**ckpt.config))
    model.load_state_dict(ckpt.tensors)
    return model


# -- configuration resolution ------------------------------------------------------

def _section_defaults():
    from .detr import DetectionTrainConfig, DetrConfig
    from .distill import DistillConfig
    from .gan import GanConfig
    from .training import TrainConfig
    from .vit import ViTConfig

    return {
        "cls_data": ClassificationDatasetSpec(),
        "det_data": DetectionSceneSpec(),
        "model": ViTConfig(),
        "train": TrainConfig(),
        "extractor": ExtractorConfig(),
        "gan": GanConfig(),
        "student": ViTConfig(),
        "distill": DistillConfig(),
        "detr": DetrConfig(),
        "detr_student": DetrConfig(),
        "detect": DetectionTrainConfig(),
        "synth": SynthConfig(),
    }


@dataclasses.dataclass
class ExtractorConfig:
    feature_dim: int = 64
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3


@dataclasses.dataclass
class SynthConfig:
    count: int = 1200
    batch_size: int = 256


# Desk-scale profile applied on top of the dataclass defaults.
DESK_PROFILE = {
    "gan": {"lr": 2e-4, "d_embed_dim": 64, "ema_decay": 0.99, "epochs": 30},
    "student": {"embed_dim": 32, "depth": 1, "num_heads": 2},
    "detect": {"epochs": 100},
    "detr_student": {"encoder_layers": 1, "decoder_layers": 1, "ffn_dim": 64},
}

FLAG_TARGETS = {
    "lambda_kd": ("distill", "lambda_kd"),
    "lambda_ce": ("distill", "lambda_ce"),
    "lambda_patch": ("distill", "lambda_patch"),
    "lambda_attn": ("gan", "lambda_attn"),
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _to_plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _tuplify(v):
    # JSON turns tuples into lists; dataclass fields expect tuples back
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def resolve_config(sections: Sequence[str], config_path: Optional[str], flags: Dict[str, Dict[str, object]],
                   recorded: Optional[Dict[str, dict]] = None):
    """Resolved dataclass per section, plus the plain dict stored in the manifest."""
    defaults = _section_defaults()
    resolved = {}
    file_values = read_config(config_path) if config_path else {}
    unknown = set(file_values) - set(sections)
    if unknown:
        raise ConfigError(f"{config_path}: sections {sorted(unknown)} are not used by this subcommand; "
                          f"expected some of {list(sections)}")
    for name in sections:
        obj = defaults[name]
        if recorded is not None:
            values = {k: _tuplify(v) for k, v in recorded.get(name, {}).items()}
            obj = apply_overrides(obj, values, name)
        else:
            obj = apply_overrides(obj, DESK_PROFILE.get(name, {}), name)
            obj = apply_overrides(obj, file_values.get(name, {}), name)
            obj = apply_overrides(obj, flags.get(name, {}), name)
        resolved[name] = obj
    return resolved, {k: _to_plain(v) for k, v in resolved.items()}


# -- run context ----------------------------------------------------------------

PATH_ARGS = {"config", "data", "teacher", "gan", "extractor", "probes", "model", "images", "runs"}


def _absolute(key, value):
    if key not in PATH_ARGS or value is None:
        return value
    if isinstance(value, list):
        return [os.path.abspath(v) for v in value]
    return os.path.abspath(value)


class Run:
    """Output directory, lock, seed and manifest bookkeeping for one subcommand."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        if not args.out:
            raise UsageError(f"{command}: --out DIR is required")
        self.out = Path(args.out)
        self.seed = int(args.seed)
        self.config: Dict[str, dict] = {}
        self.started = time.time()
        self._lock = None

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        lock = self.out / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLockedError(f"{self.out} is in use by another dfkd process (remove {lock} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._lock = lock
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            self.write_manifest()
        if self._lock is not None:
            self._lock.unlink(missing_ok=True)
        return False

    def path(self, name: str) -> Path:
        return self.out / name

    def write_manifest(self) -> None:
        files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name not in (".lock", "manifest.json"))
        args = {k: _absolute(k, v) for k, v in vars(self.args).items()
                if k not in ("manifest", "_recorded_config")}
        manifest = {
            "subcommand": self.command,
            "seed": self.seed,
            "args": args,
            "config": self.config,
            "version": version_string(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(self.started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "outputs": {str(p.relative_to(self.out)): _digest(p) for p in files},
        }
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _configure(run: Run, sections: Sequence[str], extra_flags: Optional[Dict[str, Dict[str, object]]] = None):
    args = run.args
    flags: Dict[str, Dict[str, object]] = {}
    for flag, (section, key) in FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is not None and section in sections:
            flags.setdefault(section, {})[key] = value
    for section, values in (extra_flags or {}).items():
        if section in sections:
            flags.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    resolved, plain = resolve_config(sections, args.config, flags, getattr(args, "_recorded_config", None))
    run.config = plain
    for name, obj in resolved.items():
        log.debug("[%s] %s", name, _to_plain(obj))
    return resolved


def _epoch_logger(label: str) -> Callable[[dict], None]:
    def emit(record: dict) -> None:
        log.info("%s %s", label, " ".join(f"{k}={fmt(v) if not isinstance(v, float) else f'{v:.5g}'}"
                                          for k, v in record.items()))
    return emit


def _classification_data(path):
    if not path:
        raise UsageError("--data DIR (a classification dataset from gen-data) is required")
    return load_classification_dataset(path)


def _detection_data(path):
    if not path:
        raise UsageError("--data DIR (a detection dataset from gen-data --spec det_default) is required")
    return load_detection_dataset(path)


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(run: Run):
    args = run.args
    if args.spec == "cls_default":
        cfg = _configure(run, ["cls_data"], {"cls_data": {"seed": run.seed}})
        ds = gen_classification_dataset(cfg["cls_data"])
        save_classification_dataset(ds, run.out)
        counts = np.bincount(ds.labels, minlength=ds.spec.num_classes)
        write_metrics(run.path("metrics.csv"), {"images": len(ds.labels),
                                               **{f"class_{c}": int(n) for c, n in enumerate(counts)}})
    else:
        cfg = _configure(run, ["det_data"], {"det_data": {"seed": run.seed}})
        ds = gen_detection_dataset(cfg["det_data"])
        save_detection_dataset(ds, run.out)
        write_metrics(run.path("metrics.csv"), {"images": len(ds.images), "objects": len(ds.coco.annotations)})


def cmd_train_teacher(run: Run):
    from .engine import Rng
    from .training import predict_classes, train_classifier
    from .vit import ViT

    cfg = _configure(run, ["model", "train"], {"train": {"epochs": run.args.epochs}})
    ds = _classification_data(run.args.data)
    x, y = ds.split("train")
    model = ViT(cfg["model"], Rng(run.seed).child(0))
    history = train_classifier(model, x, y, cfg["train"], Rng(run.seed).child(1), log=_epoch_logger("teacher"))
    metrics = {"train_acc": history[-1]["train_acc"]}
    for split in ("val", "test"):
        xs, ys = ds.split(split)
        metrics[f"{split}_acc"] = float(np.mean(predict_classes(model, xs) == ys)) if len(ys) else float("nan")
    metrics["parameters"] = model.num_parameters()
    save_model(run.path("teacher.ckpt"), "vit", model, cfg["model"].to_dict())
    write_history(run.path("history.csv"), history)
    write_metrics(run.path("metrics.csv"), metrics)


def cmd_train_fid_extractor(run: Run):
    from .engine import Rng
    from .metrics import FeatureExtractor, fid_between
    from .training import TrainConfig, predict_classes, train_classifier

    cfg = _configure(run, ["extractor"], {"extractor": {"epochs": run.args.epochs}})["extractor"]
    ds = _classification_data(run.args.data)
    x, y = ds.split("train")
    spec = ds.spec
    model_cfg = {"in_channels": spec.channels, "image_size": spec.image_size, "feature_dim": cfg.feature_dim,
                 "num_classes": spec.num_classes}
    model = FeatureExtractor(**model_cfg, rng=Rng(run.seed).child(0))
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr)
    history = train_classifier(model, x, y, tcfg, Rng(run.seed).child(1), log=_epoch_logger("extractor"))
    xt, yt = ds.split("test")
    metrics = {"train_acc": history[-1]["train_acc"],
               "test_acc": float(np.mean(predict_classes(model, xt) == yt)),
               "fid_train_vs_test": fid_between(model, x, xt)}
    save_model(run.path("extractor.ckpt"), "fid-extractor", model, model_cfg)
    write_history(run.path("history.csv"), history)
    write_metrics(run.path("metrics.csv"), metrics)


def read_caps_csv(path) -> np.ndarray:
    rows = read_csv(path)
    if not rows:
        raise FormatError(f"{path}: no class attention probes")
    rows.sort(key=lambda r: int(r["class"]))
    return np.array([[float(r[k]) for k in r if k.startswith("p")] for r in rows])


def cmd_train_gan(run: Run):
    from .engine import Rng
    from .gan import synthesize, train_gan
    from .metrics import extract_features, feature_stats, fid
    from .probes import caps_matrix, compute_class_probes
    from .training import predict_classes

    cfg = _configure(run, ["gan"], {"gan": {"epochs": run.args.epochs}})["gan"]
    ds = _classification_data(run.args.data)
    x, y = ds.split("train")
    teacher = load_vit(run.args.teacher) if run.args.teacher else None
    if cfg.lambda_attn > 0 and teacher is None:
        raise ConfigError("lambda_attn > 0 needs --teacher (or pass --lambda-attn 0 for a vanilla GAN)")
    caps = None
    if teacher is not None:
        caps = (read_caps_csv(run.args.probes) if run.args.probes
                else caps_matrix(compute_class_probes(teacher, x, cfg.num_classes), cfg.num_classes))
    extractor = load_extractor(run.args.extractor) if run.args.extractor else None
    fid_fn = None
    if extractor is not None:
        real = feature_stats(extract_features(extractor, x))

        def fid_fn(gen):
            sample = synthesize(gen, cfg.fid_samples, Rng(run.seed).child(9))
            return fid(real, feature_stats(extract_features(extractor, sample.images)))

    gen, _, history = train_gan(cfg, x, y, Rng(run.seed).child(0), teacher, caps, fid_fn if cfg.fid_every else None,
                                log=_epoch_logger("gan"))
    metrics = {"lambda_attn": cfg.lambda_attn, "epochs": cfg.epochs,
               "d_loss": history[-1]["d_loss"], "g_adv": history[-1]["g_adv"]}
    if fid_fn is not None:
        metrics["final_fid"] = history[-1]["fid"] if cfg.fid_every else fid_fn(gen)
    sample = synthesize(gen, 300, Rng(run.seed).child(8))
    if teacher is not None:
        metrics["teacher_agreement"] = float(np.mean(predict_classes(teacher, sample.images) == sample.labels))
    save_model(run.path("gan.ckpt"), "gan-generator", gen, _to_plain(cfg),
               {"lambda_attn": cfg.lambda_attn, "seed": run.seed})
    write_preview(run.path("samples.pgm"), sample.images[:36], 6)
    write_history(run.path("history.csv"), history)
    write_metrics(run.path("metrics.csv"), metrics)


def cmd_synthesize(run: Run):
    from .engine import Rng
    from .gan import synthesize

    cfg = _configure(run, ["synth"], {"synth": {"count": run.args.count}})["synth"]
    if not run.args.gan:
        raise UsageError("--gan CKPT is required")
    gen = load_generator(run.args.gan)
    weights = [float(v) for v in run.args.class_weights.split(",")] if run.args.class_weights else None
    s = synthesize(gen, cfg.count, Rng(run.seed), weights, cfg.batch_size, {"generator": str(run.args.gan)})
    np.save(run.path("images.npy"), s.images)
    np.save(run.path("labels.npy"), s.labels)
    write_preview(run.path("preview.pgm"), s.images[:64], 8)
    counts = np.bincount(s.labels, minlength=gen.config.num_classes)
    write_metrics(run.path("metrics.csv"), {"count": cfg.count, **{f"class_{c}": int(n) for c, n in enumerate(counts)}})


def cmd_probe_export(run: Run):
    from .probes import compute_class_probes

    _configure(run, [])
    if not run.args.teacher:
        raise UsageError("--teacher CKPT is required")
    teacher = load_vit(run.args.teacher)
    ds = _classification_data(run.args.data)
    x, y = ds.split(run.args.split)
    labels = y if run.args.use_labels else None
    caps = compute_class_probes(teacher, x, teacher.config.num_classes, labels,
                                source="labelled" if labels is not None else "teacher-labelled")
    n = teacher.config.num_patches
    rows = [[c, caps[c].source, *caps[c].values] for c in sorted(caps)]
    write_csv(run.path("caps.csv"), ["class", "source", *[f"p{i}" for i in range(n)]], rows)


def cmd_distill(run: Run):
    from .distill import distill, evaluate
    from .engine import Rng
    from .gan import synthesize
    from .vit import ViT

    cfg = _configure(run, ["student", "distill", "synth"],
                     {"distill": {"epochs": run.args.epochs, "temperature": run.args.temperature},
                      "synth": {"count": run.args.count}})
    if not (run.args.teacher and run.args.gan):
        raise UsageError("distill needs --teacher CKPT and --gan CKPT")
    teacher = load_vit(run.args.teacher)
    gen = load_generator(run.args.gan)
    synth = synthesize(gen, cfg["synth"].count, Rng(run.seed).child(0), batch_size=cfg["synth"].batch_size)
    scfg = cfg["student"]
    student = ViT(scfg, Rng(run.seed).child(1))
    ds = load_classification_dataset(run.args.data) if run.args.data else None
    validation = ds.split("val") if ds is not None else None
    history, _ = distill(teacher, student, synth.images, synth.labels, cfg["distill"], Rng(run.seed).child(2),
                         validation, log=_epoch_logger("distill"))
    metrics = {"epochs": len(history), "synthetic_images": len(synth.labels),
               "student_parameters": student.num_parameters(), "teacher_parameters": teacher.num_parameters()}
    if ds is not None:
        xt, yt = ds.split("test")
        c = scfg.num_classes
        acc, confusion = evaluate(student, xt, yt, c)
        metrics["test_acc"] = acc
        metrics["teacher_test_acc"] = evaluate(teacher, xt, yt, c)[0]
        metrics["untrained_test_acc"] = evaluate(ViT(scfg, Rng(run.seed).child(1)), xt, yt, c)[0]
        write_csv(run.path("confusion.csv"), ["true", *[f"pred_{j}" for j in range(c)]],
                  [[i, *confusion[i]] for i in range(c)])
    save_model(run.path("student.ckpt"), "vit", student, scfg.to_dict())
    write_history(run.path("history.csv"), history)
    write_metrics(run.path("metrics.csv"), metrics)


def cmd_train_detr_teacher(run: Run):
    from .detr import DetrLite, evaluate_map, prepare_detection, train_detr_teacher
    from .engine import Rng

    cfg = _configure(run, ["detr", "detect"], {"detect": {"epochs": run.args.epochs}})
    ds = _detection_data(run.args.data)
    mcfg = cfg["detr"]
    px, targets = prepare_detection(ds, mcfg.shortest, mcfg.longest)
    model = DetrLite(mcfg, Rng(run.seed).child(0))
    history = train_detr_teacher(model, px, targets, cfg["detect"], Rng(run.seed).child(1),
                                 eval_fn=lambda m: evaluate_map(m, px, targets, cfg["detect"]).map,
                                 log=_epoch_logger("detr-teacher"))
    result = evaluate_map(model, px, targets, cfg["detect"])
    save_model(run.path("detr_teacher.ckpt"), "detr", model, _to_plain(mcfg))
    write_history(run.path("history.csv"), history)
    write_metrics(run.path("metrics.csv"), {"map50": result.map, "parameters": model.num_parameters()})


def cmd_distill_detect(run: Run):
    from .detr import DetrLite, distill_detection, evaluate_map, prepare_detection
    from .engine import Rng

    cfg = _configure(run, ["detr_student", "detect"],
                     {"detect": {"epochs": run.args.epochs, "temperature": run.args.temperature}})
    if not run.args.teacher:
        raise UsageError("--teacher CKPT (from train-detr-teacher) is required")
    teacher = load_detr(run.args.teacher)
    ds = _detection_data(run.args.data)
    scfg = cfg["detr_student"]
    px, targets = prepare_detection(ds, scfg.shortest, scfg.longest)
    student = DetrLite(scfg, Rng(run.seed).child(0))
    history = distill_detection(teacher, student, px, targets, cfg["detect"], Rng(run.seed).child(1),
                                eval_fn=lambda m: evaluate_map(m, px, targets, cfg["detect"]).map,
                                log=_epoch_logger("detr-student"))
    s_map = evaluate_map(student, px, targets, cfg["detect"]).map
    t_map = evaluate_map(teacher, px, targets, cfg["detect"]).map
    save_model(run.path("detr_student.ckpt"), "detr", student, _to_plain(scfg))
    write_history(run.path("history.csv"), history)
    write_metrics(run.path("metrics.csv"), {"map50": s_map, "teacher_map50": t_map,
                                           "parameters": student.num_parameters(),
                                           "teacher_parameters": teacher.num_parameters()})


def cmd_eval(run: Run):
    from .distill import evaluate

    _configure(run, [])
    if not run.args.model:
        raise UsageError("--model CKPT is required")
    model = load_vit(run.args.model)
    ds = _classification_data(run.args.data)
    x, y = ds.split(run.args.split)
    c = model.config.num_classes
    acc, confusion = evaluate(model, x, y, c)
    write_csv(run.path("confusion.csv"), ["true", *[f"pred_{j}" for j in range(c)]],
              [[i, *confusion[i]] for i in range(c)])
    write_metrics(run.path("metrics.csv"), {"accuracy": acc, "images": len(y), "split": run.args.split})


def cmd_eval_detect(run: Run):
    from .boxes import cxcywh_to_xyxy
    from .data.images import write_pnm as write_image
    from .detr import DetectionTrainConfig, detections, draw_boxes, evaluate_map, prepare_detection
    from .detr import write_detections_csv

    _configure(run, [])
    if not run.args.model:
        raise UsageError("--model CKPT is required")
    model = load_detr(run.args.model)
    ds = _detection_data(run.args.data)
    c = model.config
    px, targets = prepare_detection(ds, c.shortest, c.longest)
    tcfg = DetectionTrainConfig()
    result = evaluate_map(model, px, targets, tcfg)
    dets = detections(model, px, tcfg)
    h, w = ds.images.shape[1:3]
    ids = [img.id for img in ds.coco.images]
    write_detections_csv(run.path("detections.csv"), ids, dets, w, h)
    dump = run.path("annotated")
    dump.mkdir(exist_ok=True)
    scale = np.array([w, h, w, h], dtype=np.float64)
    for i in range(min(run.args.dump, len(dets))):
        _, classes, _, boxes = dets[i]
        write_image(dump / f"scene_{i:05d}.ppm", draw_boxes(ds.images[i], boxes * scale, classes))
    metrics = {"map50": result.map, "images": len(targets)}
    for k, ap in sorted(result.per_class.items()):
        metrics[f"ap50_class_{k}"] = ap
    write_metrics(run.path("metrics.csv"), metrics)


def cmd_fid(run: Run):
    from .engine import Rng
    from .gan import synthesize
    from .metrics import fid_between

    cfg = _configure(run, ["synth"], {"synth": {"count": run.args.count}})["synth"]
    if not run.args.extractor:
        raise ConfigError("no FID feature extractor checkpoint; create one with `dfkd train-fid-extractor` "
                          "and pass it as --extractor")
    extractor = load_extractor(run.args.extractor)
    ds = _classification_data(run.args.data)
    real, _ = ds.split("train")
    if run.args.gan:
        images = synthesize(load_generator(run.args.gan), cfg.count, Rng(run.seed)).images
    elif run.args.images:
        images = np.load(Path(run.args.images) / "images.npy")
    else:
        raise UsageError("fid needs --gan CKPT or --images DIR (a synthesize output)")
    write_metrics(run.path("metrics.csv"), {"fid": fid_between(extractor, real, images), "images": len(images)})


# reference values printed beside measured ones; never used in any check
REFERENCE_ACCURACY = {"MNIST synthetic": (97.32, 96.73), "CIFAR-10 synthetic": (84.32, 82.37)}


def _order_stats(values: List[float]):
    v = sorted(values)
    return float(np.median(v)), v[0], v[-1]


def build_report(run_dirs: Sequence[str]):
    """Rows of (table, group, runs, median, min, max, reference) gathered from run directories."""
    from .metrics import REFERENCE_FID

    groups: Dict[tuple, List[float]] = {}
    absent = []
    for d in run_dirs:
        d = Path(d)
        mpath, man = d / "metrics.csv", d / "manifest.json"
        if not (mpath.exists() and man.exists()):
            absent.append(str(d))
            continue
        manifest = json.loads(man.read_text())
        metrics = read_metrics(mpath)
        sub = manifest.get("subcommand")
        if sub == "train-gan" and "final_fid" in metrics:
            kind = "augmented" if float(metrics["lambda_attn"]) > 0 else "vanilla"
            groups.setdefault(("gan_fid", kind), []).append(float(metrics["final_fid"]))
        elif sub == "distill" and "test_acc" in metrics:
            groups.setdefault(("distill_acc", "student"), []).append(100 * float(metrics["test_acc"]))
            groups.setdefault(("distill_acc", "teacher"), []).append(100 * float(metrics["teacher_test_acc"]))
        elif sub in ("train-detr-teacher", "distill-detect"):
            groups.setdefault(("detect_map50", sub), []).append(float(metrics["map50"]))
        else:
            absent.append(str(d))
    rows = []
    for (table, group), values in sorted(groups.items()):
        med, lo, hi = _order_stats(values)
        if table == "gan_fid":
            idx = 0 if group == "vanilla" else 1
            ref = "; ".join(f"{k} {v[idx]}" for k, v in REFERENCE_FID.items())
        elif table == "distill_acc":
            idx = 0 if group == "teacher" else 1
            ref = "; ".join(f"{k} {v[idx]}%" for k, v in REFERENCE_ACCURACY.items())
        else:
            ref = "n/a"
        rows.append([table, group, len(values), med, lo, hi, ref])
    if not rows:
        rows.append(["no data", "", 0, float("nan"), float("nan"), float("nan"), ""])
    return rows, absent


REPORT_HEADER = ["table", "group", "runs", "measured (desk scale) median", "min", "max", "reference (paper)"]


def cmd_report(run: Run):
    _configure(run, [])
    rows, absent = build_report(run.args.runs or [])
    write_csv(run.path("report.csv"), REPORT_HEADER, [[r[0], r[1], r[2], r[3], r[4], r[5], r[6].replace(",", ";")]
                                                      for r in rows])
    widths = [max(len(REPORT_HEADER[i]), *(len(f"{r[i]:.4g}" if isinstance(r[i], float) else str(r[i]))
                                            for r in rows)) for i in range(len(REPORT_HEADER))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(REPORT_HEADER, widths))]
    for r in rows:
        cells = [f"{v:.4g}" if isinstance(v, float) else str(v) for v in r]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    for d in absent:
        lines.append(f"absent: {d} (no metrics.csv/manifest.json or unrecognised run)")
    text = "\n".join(lines) + "\n"
    run.path("report.txt").write_text(text)
    sys.stdout.write(text)


# -- argument parsing ------------------------------------------------------------

class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-fid-extractor": cmd_train_fid_extractor,
    "train-gan": cmd_train_gan,
    "synthesize": cmd_synthesize,
    "probe-export": cmd_probe_export,
    "distill": cmd_distill,
    "train-detr-teacher": cmd_train_detr_teacher,
    "distill-detect": cmd_distill_detect,
    "eval": cmd_eval,
    "eval-detect": cmd_eval_detect,
    "fid": cmd_fid,
    "report": cmd_report,
}


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="key = value file with [section] headers")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--manifest", help="replay the run recorded in this manifest.json")

    parser = Parser(prog="dfkd", description="Data-free distillation pipeline for small vision transformers.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)
    p = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}

    p["gen-data"].add_argument("--spec", choices=["cls_default", "det_default"], default="cls_default")
    for name in ("train-teacher", "train-fid-extractor", "train-gan", "probe-export", "distill", "eval", "fid",
                 "train-detr-teacher", "distill-detect", "eval-detect"):
        p[name].add_argument("--data", help="dataset directory written by gen-data")
    for name in ("train-teacher", "train-fid-extractor", "train-gan", "distill", "train-detr-teacher",
                 "distill-detect"):
        p[name].add_argument("--epochs", type=int)
    for name in ("train-gan", "probe-export", "distill", "distill-detect"):
        p[name].add_argument("--teacher", help="teacher checkpoint")
    p["train-gan"].add_argument("--lambda-attn", dest="lambda_attn", type=float)
    p["train-gan"].add_argument("--probes", help="caps.csv from probe-export (default: computed from the teacher)")
    p["train-gan"].add_argument("--extractor", help="FID extractor checkpoint for FID tracking")
    for name in ("synthesize", "distill", "fid"):
        p[name].add_argument("--gan", help="generator checkpoint from train-gan")
        p[name].add_argument("--count", type=int)
    p["synthesize"].add_argument("--class-weights", dest="class_weights", help="comma-separated, one per class")
    p["probe-export"].add_argument("--split", default="train", choices=["train", "val", "test"])
    p["probe-export"].add_argument("--use-labels", dest="use_labels", action="store_true",
                                   help="group by dataset labels instead of teacher predictions")
    for flag in ("lambda-kd", "lambda-ce", "lambda-patch"):
        p["distill"].add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=float)
    for name in ("distill", "distill-detect"):
        p[name].add_argument("--temperature", type=float)
    for name in ("eval", "eval-detect"):
        p[name].add_argument("--model", help="checkpoint to evaluate")
    p["eval"].add_argument("--split", default="test", choices=["train", "val", "test"])
    p["eval-detect"].add_argument("--dump", type=int, default=8, help="annotated PPM images to write")
    p["fid"].add_argument("--extractor")
    p["fid"].add_argument("--images", help="synthesize output directory")
    p["report"].add_argument("--runs", nargs="*", default=[])
    return parser


def _apply_manifest(parser: Parser, args: argparse.Namespace, argv: Sequence[str]) -> argparse.Namespace:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("subcommand") != args.command:
        raise UsageError(f"{args.manifest} records a {manifest.get('subcommand')!r} run, not {args.command!r}")
    replay = argparse.Namespace(**manifest["args"])
    replay.command = args.command
    replay.manifest = args.manifest
    given_out = any(a == "--out" or a.startswith("--out=") for a in argv)
    if given_out:
        replay.out = args.out
    replay.config = None
    replay._recorded_config = manifest.get("config", {})
    return replay


def _setup_logging() -> None:
    level = os.environ.get("DFKD_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"DFKD_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    root = logging.getLogger("dfkd")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(handler)
    root.setLevel(LOG_LEVELS[level])
    root.propagate = False


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _setup_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        if args.manifest:
            args = _apply_manifest(parser, args, argv)
        with Run(args.command, args) as ctx:
            COMMANDS[args.command](ctx)
        return 0
    except DfkdError as e:
        print(f"dfkd: error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        print(f"dfkd: I/O error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
