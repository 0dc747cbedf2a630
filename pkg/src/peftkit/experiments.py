"""Config-driven experiment runner.

An experiment is described by a flat INI file with sections [experiment],
[arch], [head], [peft], [train], [data].  ``run_experiment`` executes the
full pipeline (build -> optionally quantize -> attach adapters -> train ->
evaluate) and writes artifacts into the output directory:

    config.ini    resolved configuration (round-trips through the parser)
    history.csv   per-epoch train/val curves
    report.json   deterministic metrics (byte-identical across reruns)
    timing.json   wall-clock numbers, kept out of report.json on purpose
    model.ckpt    best model + head parameters (+ quantized base layers)
    adapter.ckpt  adapter tensors + PEFT settings (PEFT runs only)

Because real pretrained weights are out of scope, frozen/PEFT paradigms can
point ``backbone`` at a checkpoint produced by :func:`pretrain_backbone`,
which trains the backbone on a rotation-prediction pretext task over
synthetic images; ``backbone = random`` skips that entirely.
"""

from __future__ import annotations

import configparser
import io
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as prng
from .checkpoint import load_checkpoint, load_params_into, save_checkpoint
from .data import (AugmentConfig, Sample, SplitDataset, SYNTH_CLASS_NAMES,
                   SyntheticSpec, expand_training_set, load_directory_dataset,
                   normalize, render_class, resize, synthesize_dataset)
from .errors import ConfigError, DataError
from .metrics import (confusion, measure_efficiency, per_source_accuracy, report,
                      report_to_json, val_test_gap)
from .nn import (ArchSpec, ClassifierHead, HeadSpec, Model, arch_preset, build_head,
                 build_model, forward_logits, freeze_backbone, toy_head)
from .peft import (DoraLinear, LoraLinear, PeftConfig, attach_adapters,
                   count_trainable)
from .quantize import QuantizedLinear, quantize_linear
from .tensor import Tensor
from .train import (ArrayDataset, TrainConfig, Trainer, evaluate, history_to_csv,
                    restore_params)

PARADIGMS = ("scratch", "frozen_backbone", "peft")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    paradigm: str
    arch: ArchSpec
    head: HeadSpec
    train: TrainConfig
    peft: PeftConfig | None = None
    quantize_backbone: bool = False
    data_source: str = "synthetic"       # "synthetic" or a directory path
    synth: SyntheticSpec | None = None
    class_names: tuple[str, ...] = SYNTH_CLASS_NAMES
    augment_multiplier: int = 3
    backbone: str = "random"             # "random" or a backbone checkpoint path
    output_dir: str = "runs"

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {self.paradigm!r}")
        if self.quantize_backbone and self.paradigm == "scratch":
            raise ConfigError("quantize_backbone requires a frozen or PEFT paradigm")
        if self.paradigm == "peft" and self.peft is None:
            raise ConfigError("peft paradigm requires a [peft] section")
        if self.head.in_dim != self.arch.feature_dim:
            raise ConfigError(
                f"head input dim {self.head.in_dim} != backbone feature dim "
                f"{self.arch.feature_dim}")
        if self.data_source == "synthetic" and self.synth is None:
            object.__setattr__(self, "synth",
                               SyntheticSpec(image_size=self.arch.image_size))

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(resize_to=self.arch.image_size)


@dataclass
class RunResult:
    name: str
    paradigm: str
    method: str
    targets: str
    rank: int
    trainable_params: int
    trainable_fraction: float
    best_val_accuracy: float
    best_epoch: int
    test_accuracy: float
    test_weighted_f1: float
    val_test_gap_pp: float
    wall_seconds: float
    per_source: dict[str, float]
    checkpoint_path: str = ""
    report_path: str = ""
    failed: bool = False
    error: str = ""


# ---------------------------------------------------------------------------
# config file parsing / serialization

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    cp["experiment"] = {
        "name": cfg.name,
        "paradigm": cfg.paradigm,
        "quantize_backbone": _fmt(cfg.quantize_backbone),
        "backbone": cfg.backbone,
        "output_dir": cfg.output_dir,
    }
    a = cfg.arch
    cp["arch"] = {k: _fmt(v) for k, v in asdict(a).items()}
    cp["head"] = {k: _fmt(v) for k, v in asdict(cfg.head).items()}
    if cfg.peft is not None:
        cp["peft"] = {k: _fmt(v) for k, v in asdict(cfg.peft).items()}
    cp["train"] = {k: _fmt(v) for k, v in asdict(cfg.train).items()}
    data = {"source": cfg.data_source,
            "augment_multiplier": _fmt(cfg.augment_multiplier),
            "class_names": ", ".join(cfg.class_names)}
    if cfg.synth is not None:
        data.update({k: _fmt(v) for k, v in asdict(cfg.synth).items()
                     if k not in ("source_a", "source_b")})
    cp["data"] = data
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.replace(",", " ").split())


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.replace(",", " ").split())


def parse_config(source: str | Path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    text = source if isinstance(source, str) and "\n" in source else None
    if text is not None:
        cp.read_string(text)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        cp.read_string(path.read_text())
    try:
        return _parse(cp)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed experiment config: {exc}") from exc


def _parse(cp: configparser.ConfigParser) -> ExperimentConfig:
    exp = cp["experiment"]
    arch_sec = cp["arch"]
    if "preset" in arch_sec:
        arch = arch_preset(arch_sec["preset"])
    else:
        arch = ArchSpec(kind=arch_sec["kind"], width=arch_sec.getint("width"),
                        depth=arch_sec.getint("depth"),
                        heads=arch_sec.getint("heads", fallback=1),
                        mlp_hidden=arch_sec.getint("mlp_hidden", fallback=0),
                        patch_size=arch_sec.getint("patch_size", fallback=16),
                        image_size=arch_sec.getint("image_size", fallback=224),
                        num_classes=arch_sec.getint("num_classes", fallback=9))
    if "head" in cp:
        hs = cp["head"]
        head = HeadSpec(hs.getint("in_dim", fallback=arch.feature_dim),
                        hs.getint("hidden1"), hs.getint("hidden2"),
                        hs.getint("num_classes", fallback=arch.num_classes),
                        hs.getfloat("dropout1", fallback=0.30),
                        hs.getfloat("dropout2", fallback=0.15))
    else:
        head = toy_head(arch.feature_dim, arch.num_classes)
    peft = None
    if "peft" in cp:
        ps = cp["peft"]
        peft = PeftConfig(ps["method"], ps["targets"], ps.getint("rank"),
                          ps.getfloat("alpha"), ps.getfloat("dropout", fallback=0.05))
    ts = cp["train"] if "train" in cp else {}
    train = TrainConfig(
        epochs=int(ts.get("epochs", 80)),
        micro_batch=int(ts.get("micro_batch", 4)),
        grad_accum_steps=int(ts.get("grad_accum_steps", 8)),
        peak_lr=float(ts.get("peak_lr", 1e-4)),
        weight_decay=float(ts.get("weight_decay", 0.01)),
        warmup_ratio=float(ts.get("warmup_ratio", 0.03)),
        min_lr_ratio=float(ts.get("min_lr_ratio", 0.1)),
        label_smoothing=float(ts.get("label_smoothing", 0.1)),
        patience=int(ts.get("patience", 5)),
        seed=int(ts.get("seed", 42)),
    )
    ds = cp["data"] if "data" in cp else {}
    source = ds.get("source", "synthetic")
    synth = None
    class_names = SYNTH_CLASS_NAMES
    if source == "synthetic":
        base = SyntheticSpec()

        def pair(key: str, default: tuple[float, float]) -> tuple[float, float]:
            return _floats(ds[key]) if key in ds else default

        synth = SyntheticSpec(
            image_size=int(ds.get("image_size", arch.image_size)),
            train_per_class=int(ds.get("train_per_class", 24)),
            val_per_class=int(ds.get("val_per_class", 6)),
            test_total=int(ds.get("test_total", 10800)),
            test_weights=_floats(ds["test_weights"]) if "test_weights" in ds
            else base.test_weights,
            source_b_classes=_ints(ds["source_b_classes"]) if "source_b_classes" in ds
            else base.source_b_classes,
            train_gain=pair("train_gain", base.train_gain),
            test_gain=pair("test_gain", base.test_gain),
            train_texture=pair("train_texture", base.train_texture),
            test_texture=pair("test_texture", base.test_texture),
            train_size=pair("train_size", base.train_size),
            test_size=pair("test_size", base.test_size),
            train_center=float(ds.get("train_center", base.train_center)),
            test_center=float(ds.get("test_center", base.test_center)),
            test_noise=float(ds.get("test_noise", base.test_noise)),
        )
        if synth.image_size != arch.image_size:
            raise ConfigError("synthetic image_size must match arch image_size")
    else:
        if "class_names" not in ds:
            raise ConfigError("directory data source requires class_names")
    if "class_names" in ds:
        class_names = tuple(x.strip() for x in ds["class_names"].split(",") if x.strip())
    return ExperimentConfig(
        name=exp.get("name", "experiment"),
        paradigm=exp["paradigm"],
        arch=arch, head=head, train=train, peft=peft,
        quantize_backbone=exp.getboolean("quantize_backbone", fallback=False),
        data_source=source, synth=synth, class_names=class_names,
        augment_multiplier=int(ds.get("augment_multiplier", 3)),
        backbone=exp.get("backbone", "random"),
        output_dir=exp.get("output_dir", "runs"),
    )


# ---------------------------------------------------------------------------
# presets

_PEFT_PRESET_TABLE = {
    # name: (method, targets, rank, alpha, lora dropout)
    "q1": ("lora", "q_proj_only", 16, 32.0, 0.05),
    "q2": ("lora", "q_proj_only", 8, 16.0, 0.10),
    "q3": ("lora", "all_linear", 16, 32.0, 0.05),
    "q4": ("lora", "all_linear", 64, 128.0, 0.05),
    "d1": ("dora", "q_proj_only", 16, 32.0, 0.05),
    "d2": ("dora", "q_proj_only", 8, 16.0, 0.05),
    "d3": ("dora", "all_linear", 16, 32.0, 0.05),
    "d4": ("dora", "all_linear", 64, 128.0, 0.05),
}


def experiment_preset(name: str, backbone: str = "random",
                      output_dir: str = "runs") -> ExperimentConfig:
    """Toy-backbone presets: q1..q4 / d1..d4 (quantized for q*), plus
    scratch_vit, scratch_cnn and frozen baselines."""
    key = name.removesuffix("_toy")
    arch = arch_preset("vit_toy")
    head = toy_head(arch.feature_dim, arch.num_classes)
    if key in _PEFT_PRESET_TABLE:
        method, targets, rank, alpha, dropout = _PEFT_PRESET_TABLE[key]
        # both adapter families run on the NF4-quantized backbone
        return ExperimentConfig(
            name=name, paradigm="peft", arch=arch, head=head,
            train=TrainConfig(), peft=PeftConfig(method, targets, rank, alpha, dropout),
            quantize_backbone=True, backbone=backbone, output_dir=output_dir)
    if key == "frozen":
        return ExperimentConfig(
            name=name, paradigm="frozen_backbone", arch=arch, head=head,
            train=TrainConfig(epochs=80, micro_batch=8, grad_accum_steps=4,
                              peak_lr=1e-3), backbone=backbone, output_dir=output_dir)
    if key == "scratch_vit":
        return ExperimentConfig(
            name=name, paradigm="scratch", arch=arch, head=head,
            train=TrainConfig(epochs=150, micro_batch=32, grad_accum_steps=1,
                              peak_lr=5e-5, warmup_ratio=0.0, patience=10),
            output_dir=output_dir)
    if key == "scratch_cnn":
        cnn = arch_preset("cnn_toy")
        return ExperimentConfig(
            name=name, paradigm="scratch", arch=cnn,
            head=toy_head(cnn.feature_dim, cnn.num_classes),
            train=TrainConfig(epochs=150, micro_batch=32, grad_accum_steps=1,
                              peak_lr=1e-3, warmup_ratio=0.0, patience=10),
            output_dir=output_dir)
    raise ConfigError(f"unknown experiment preset {name!r}")


# ---------------------------------------------------------------------------
# data preparation

def _to_arrays(samples: list[Sample], image_size: int, aug: AugmentConfig
               ) -> ArrayDataset:
    images = np.empty((len(samples), 3, image_size, image_size), dtype=np.float32)
    labels = np.empty(len(samples), dtype=np.int64)
    sources = []
    for i, s in enumerate(samples):
        img = s.image if s.image.shape[0] == image_size else resize(s.image, image_size)
        images[i] = normalize(np.clip(img, 0.0, 1.0), aug.mean, aug.std)
        labels[i] = s.label
        sources.append(s.source_tag)
    return ArrayDataset(images, labels, sources)


def load_splits(cfg: ExperimentConfig) -> SplitDataset:
    if cfg.data_source == "synthetic":
        return synthesize_dataset(cfg.synth, cfg.train.seed)
    root = Path(cfg.data_source)
    for sub in ("train", "val", "test"):
        if not (root / sub).is_dir():
            raise DataError(f"directory dataset needs {root / sub}")
    return SplitDataset(
        load_directory_dataset(root / "train", cfg.class_names),
        load_directory_dataset(root / "val", cfg.class_names),
        load_directory_dataset(root / "test", cfg.class_names))


def prepare_data(cfg: ExperimentConfig) -> tuple[ArrayDataset, ArrayDataset, ArrayDataset]:
    splits = load_splits(cfg)
    aug = cfg.augment_config()
    expanded = expand_training_set(splits.train, aug, cfg.augment_multiplier,
                                   seed=cfg.train.seed)
    size = cfg.arch.image_size
    return (_to_arrays(expanded, size, aug), _to_arrays(splits.val, size, aug),
            _to_arrays(splits.test, size, aug))


# ---------------------------------------------------------------------------
# model assembly

def _quantize_block_linears(model: Model) -> None:
    for block in model.adapter_blocks():
        for name, layer in list(block.linears.items()):
            block.linears[name] = quantize_linear(layer.weight.data, bias=layer.bias)


def quantized_layers(model: Model) -> dict[str, QuantizedLinear]:
    out = {}
    for i, block in enumerate(model.adapter_blocks()):
        for name, layer in block.linears.items():
            base = layer.base if isinstance(layer, (LoraLinear, DoraLinear)) else layer
            if isinstance(base, QuantizedLinear):
                out[f"blocks.{i}.{name}"] = base
    return out


def build_experiment_model(cfg: ExperimentConfig) -> tuple[Model, ClassifierHead]:
    seed = cfg.train.seed
    model = build_model(cfg.arch, prng.substream("init", 0, seed=seed))
    head = build_head(cfg.head, prng.substream("init", 1, seed=seed))
    if cfg.backbone != "random":
        arrays, manifest, _ = load_checkpoint(cfg.backbone)
        if manifest.get("kind") != "backbone":
            raise ConfigError(f"{cfg.backbone} is not a backbone checkpoint")
        load_params_into(model.parameters(), arrays, prefix="model.")
    if cfg.paradigm == "frozen_backbone":
        freeze_backbone(model)
        if cfg.quantize_backbone:
            _quantize_block_linears(model)
    elif cfg.paradigm == "peft":
        freeze_backbone(model)
        if cfg.quantize_backbone:
            _quantize_block_linears(model)
        attach_adapters(model, cfg.peft, prng.substream("init", 2, seed=seed))
    return model, head


# ---------------------------------------------------------------------------
# running

def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None
                   ) -> RunResult:
    t_start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else Path(cfg.output_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_to_ini(cfg))

    prng.set_seed(cfg.train.seed)
    train_data, val_data, test_data = prepare_data(cfg)
    model, head = build_experiment_model(cfg)
    n_trainable, fraction = count_trainable(model, head)

    trainer = Trainer(model, head, train_data, val_data, cfg.train)
    result = trainer.run()
    restore_params(model, head, result.best_params)

    test_loss, test_acc, preds = evaluate(model, head, test_data)
    cm = confusion(preds, test_data.labels, cfg.arch.num_classes, cfg.class_names)
    rep = report(cm)
    sources = per_source_accuracy(preds, test_data.labels, test_data.sources)
    gap = val_test_gap(result.best_val_accuracy, test_acc)
    wall = time.perf_counter() - t_start

    # throughput/latency at batch 32 on a slice of the test set (eval mode)
    def forward(batch: np.ndarray) -> np.ndarray:
        return forward_logits(model, head, Tensor(batch)).data

    eff = measure_efficiency(forward, test_data.images[:512], batch_size=32)

    (out / "history.csv").write_text(history_to_csv(result.history))
    payload = {
        "name": cfg.name,
        "paradigm": cfg.paradigm,
        "method": cfg.peft.method if cfg.peft else "",
        "targets": cfg.peft.targets if cfg.peft else "",
        "rank": cfg.peft.rank if cfg.peft else 0,
        "seed": cfg.train.seed,
        "trainable_params": n_trainable,
        "trainable_fraction": fraction,
        "best_val_accuracy": result.best_val_accuracy,
        "best_epoch": result.best_epoch,
        "stopped_epoch": result.stopped_epoch,
        "test_loss": test_loss,
        "test_accuracy": rep.accuracy,
        "test_weighted_f1": rep.weighted_f1,
        "val_test_gap_pp": gap,
        "metrics": json.loads(report_to_json(rep, cm, sources)),
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(payload, sort_keys=True, indent=2))
    (out / "timing.json").write_text(json.dumps(
        {"wall_seconds": wall, "epochs_run": result.stopped_epoch,
         "inference": {"batch_size": eff.batch_size, "samples": eff.samples,
                       "total_seconds": eff.total_seconds,
                       "throughput_img_per_s": eff.throughput,
                       "latency_ms_per_img": eff.latency_ms}}, indent=2))

    ckpt_path = out / "model.ckpt"
    save_experiment_model(ckpt_path, cfg, model, head)
    if cfg.paradigm == "peft":
        save_adapter_checkpoint(out / "adapter.ckpt", cfg.peft, model)

    return RunResult(
        name=cfg.name, paradigm=cfg.paradigm,
        method=cfg.peft.method if cfg.peft else "-",
        targets=cfg.peft.targets if cfg.peft else "-",
        rank=cfg.peft.rank if cfg.peft else 0,
        trainable_params=n_trainable, trainable_fraction=fraction,
        best_val_accuracy=result.best_val_accuracy, best_epoch=result.best_epoch,
        test_accuracy=rep.accuracy, test_weighted_f1=rep.weighted_f1,
        val_test_gap_pp=gap, wall_seconds=wall, per_source=sources,
        checkpoint_path=str(ckpt_path), report_path=str(report_path))


def save_experiment_model(path, cfg: ExperimentConfig, model: Model,
                          head: ClassifierHead) -> None:
    tensors = {f"model.{k}": p.data for k, p in model.parameters().items()}
    tensors.update({f"head.{k}": p.data for k, p in head.parameters().items()})
    manifest = {"kind": "model", "arch": asdict(cfg.arch), "head": asdict(cfg.head),
                "paradigm": cfg.paradigm, "quantize_backbone": cfg.quantize_backbone,
                "peft": asdict(cfg.peft) if cfg.peft else None}
    save_checkpoint(path, tensors, manifest, quantized=quantized_layers(model))


def load_experiment_model(path, cfg: ExperimentConfig) -> tuple[Model, ClassifierHead]:
    """Rebuild the trained model from a run's model.ckpt."""
    arrays, manifest, qlayers = load_checkpoint(path)
    if manifest.get("kind") != "model":
        raise ConfigError(f"{path} is not a model checkpoint")
    seed = cfg.train.seed
    model = build_model(cfg.arch, prng.substream("init", 0, seed=seed))
    head = build_head(cfg.head, prng.substream("init", 1, seed=seed))
    if cfg.paradigm in ("frozen_backbone", "peft"):
        freeze_backbone(model)
        if cfg.quantize_backbone:
            _quantize_block_linears(model)
            for key, q in quantized_layers(model).items():
                stored = qlayers[key]
                if stored.shape != q.shape:
                    raise ConfigError(f"quantized layer {key} shape mismatch")
                stored.bias = q.bias
                i, name = key.split(".")[1:3]
                model.adapter_blocks()[int(i)].linears[name] = stored
        if cfg.paradigm == "peft":
            attach_adapters(model, cfg.peft, prng.substream("init", 2, seed=seed))
    load_params_into(model.parameters(), arrays, prefix="model.")
    load_params_into(head.parameters(), arrays, prefix="head.")
    return model, head


def save_adapter_checkpoint(path, peft_cfg: PeftConfig, model: Model) -> None:
    """Adapter-only checkpoint: named A/B/(magnitude) tensors + the config."""
    tensors = {}
    for i, block in enumerate(model.adapter_blocks()):
        for name, layer in block.linears.items():
            if isinstance(layer, (LoraLinear, DoraLinear)):
                for pname, p in layer.adapter.parameters().items():
                    tensors[f"blocks.{i}.{name}.{pname}"] = p.data
    save_checkpoint(path, tensors, {"kind": "adapter", "peft": asdict(peft_cfg)})


def load_adapter_checkpoint(path, model: Model) -> PeftConfig:
    """Attach adapters to a freshly built base model and load their weights."""
    arrays, manifest, _ = load_checkpoint(path)
    if manifest.get("kind") != "adapter":
        raise ConfigError(f"{path} is not an adapter checkpoint")
    peft_cfg = PeftConfig(**manifest["peft"])
    attach_adapters(model, peft_cfg, prng.substream("init", 2))
    adapters = {}
    for i, block in enumerate(model.adapter_blocks()):
        for name, layer in block.linears.items():
            if isinstance(layer, (LoraLinear, DoraLinear)):
                for pname, p in layer.adapter.parameters().items():
                    adapters[f"blocks.{i}.{name}.{pname}"] = p
    load_params_into(adapters, arrays)
    return peft_cfg


# ---------------------------------------------------------------------------
# backbone pretraining (rotation pretext over synthetic imagery)

def pretrain_backbone(arch: ArchSpec, out_path, n_images: int = 240,
                      epochs: int = 10, seed: int = 7,
                      synth: SyntheticSpec | None = None) -> Path:
    """Train the backbone to predict image rotation (0/90/180/270) on widely
    varied synthetic images, then save it as a reusable starting point."""
    synth = synth or SyntheticSpec(image_size=arch.image_size)
    images = []
    for i in range(n_images):
        r = prng.substream("pretext", i, seed=seed)
        cls = i % synth.num_classes
        images.append(render_class(cls, synth.image_size, r, shifted=True, spec=synth))
    xs, ys = [], []
    aug = AugmentConfig(resize_to=arch.image_size)
    for img in images:
        for k in range(4):
            xs.append(normalize(np.ascontiguousarray(np.rot90(img, k)),
                                aug.mean, aug.std))
            ys.append(k)
    data = ArrayDataset(np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64))
    # held-out rotations for the early stopper
    n_val = max(8, len(data.labels) // 10)
    val = ArrayDataset(data.images[-n_val:], data.labels[-n_val:])
    trn = ArrayDataset(data.images[:-n_val], data.labels[:-n_val])

    model = build_model(arch, prng.substream("init", 0, seed=seed))
    head = build_head(HeadSpec(arch.feature_dim, 2 * arch.feature_dim,
                               arch.feature_dim, 4, 0.1, 0.1),
                      prng.substream("init", 1, seed=seed))
    cfg = TrainConfig(epochs=epochs, micro_batch=16, grad_accum_steps=1,
                      peak_lr=1e-3, warmup_ratio=0.03, patience=epochs,
                      label_smoothing=0.0, seed=seed)
    trainer = Trainer(model, head, trn, val, cfg)
    result = trainer.run()
    restore_params(model, head, result.best_params)
    tensors = {f"model.{k}": p.data for k, p in model.parameters().items()}
    save_checkpoint(out_path, tensors, {"kind": "backbone", "arch": asdict(arch)})
    return Path(out_path)


# ---------------------------------------------------------------------------
# matrix runs and table rendering

def run_matrix(configs: list[ExperimentConfig], out_dir: str | Path) -> list[RunResult]:
    """Run configs sequentially; a failed run becomes a failed table row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: list[RunResult] = []
    for cfg in configs:
        try:
            results.append(run_experiment(cfg, out / cfg.name))
        except Exception as exc:  # noqa: BLE001 - matrix must survive bad runs
            results.append(RunResult(
                name=cfg.name, paradigm=cfg.paradigm,
                method=cfg.peft.method if cfg.peft else "-",
                targets=cfg.peft.targets if cfg.peft else "-",
                rank=cfg.peft.rank if cfg.peft else 0,
                trainable_params=0, trainable_fraction=0.0,
                best_val_accuracy=0.0, best_epoch=0,
                test_accuracy=0.0, test_weighted_f1=0.0,
                val_test_gap_pp=0.0, wall_seconds=0.0, per_source={},
                failed=True, error=f"{type(exc).__name__}: {exc}"))
    (out / "comparison.md").write_text(results_markdown(results))
    (out / "comparison.csv").write_text(results_csv(results))
    (out / "gaps.csv").write_text(gaps_csv(results))
    (out / "results.json").write_text(json.dumps(
        [asdict(r) for r in results], sort_keys=True, indent=2))
    return results


def _row_cells(r: RunResult) -> list[str]:
    if r.failed:
        return [r.name, r.paradigm, r.method, r.targets, str(r.rank or "-"),
                "-", "-", "-", "-", "-", f"FAILED: {r.error}"]
    return [r.name, r.paradigm, r.method, r.targets,
            str(r.rank) if r.rank else "-",
            f"{r.trainable_params} ({r.trainable_fraction * 100:.2f}%)",
            f"{r.best_val_accuracy:.4f}", f"{r.test_accuracy:.4f}",
            f"{r.test_weighted_f1:.4f}", f"{r.val_test_gap_pp:.2f}",
            f"{r.wall_seconds:.1f}"]


_COLUMNS = ["name", "paradigm", "method", "targets", "rank",
            "trainable_params", "val_acc", "test_acc", "test_f1",
            "gap_pp", "wall_s"]


def results_markdown(results: list[RunResult]) -> str:
    lines = ["| " + " | ".join(_COLUMNS) + " |",
             "|" + "|".join("---" for _ in _COLUMNS) + "|"]
    for r in results:
        lines.append("| " + " | ".join(_row_cells(r)) + " |")
    lines.append("")
    lines.append("| name | val_acc | test_acc | gap_pp |")
    lines.append("|---|---|---|---|")
    for r in results:
        if r.failed:
            lines.append(f"| {r.name} | - | - | FAILED |")
        else:
            lines.append(f"| {r.name} | {r.best_val_accuracy:.4f} | "
                         f"{r.test_accuracy:.4f} | {r.val_test_gap_pp:.2f} |")
    return "\n".join(lines) + "\n"


def results_csv(results: list[RunResult]) -> str:
    lines = [",".join(_COLUMNS)]
    for r in results:
        cells = [c.replace(",", ";") for c in _row_cells(r)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def gaps_csv(results: list[RunResult]) -> str:
    lines = ["name,val_acc,test_acc,gap_pp"]
    for r in results:
        if r.failed:
            lines.append(f"{r.name},,,FAILED")
        else:
            lines.append(f"{r.name},{r.best_val_accuracy:.4f},"
                         f"{r.test_accuracy:.4f},{r.val_test_gap_pp:.2f}")
    return "\n".join(lines) + "\n"


def parse_matrix(path: str | Path) -> list[ExperimentConfig]:
    path = Path(path)
    cp = configparser.ConfigParser()
    if not path.exists():
        raise ConfigError(f"matrix file {path} does not exist")
    cp.read_string(path.read_text())
    if "matrix" not in cp or "configs" not in cp["matrix"]:
        raise ConfigError("matrix file needs a [matrix] section with a configs key")
    entries = [e.strip() for e in cp["matrix"]["configs"].replace(",", "\n").splitlines()
               if e.strip()]
    configs = []
    for entry in entries:
        p = Path(entry)
        if not p.is_absolute():
            p = path.parent / p
        configs.append(parse_config(p))
    return configs
