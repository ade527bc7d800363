"""Training loop and batch inference."""
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .augment import CorruptionPolicy, make_rng, maybe_corrupt, standard_augment
from .blocks import resample
from .checkpoint import capture, config_fingerprint, load_checkpoint, restore
from .data import batch_iterator, image_size, load_sample, save_prediction
from .encoder import apply_pretrained, load_pretrained
from .errors import ConfigurationError, TrainingDiverged
from .losses import total_loss
from .metrics import adaptive_f_measure, mae
from .model import MODEL_BACKBONES, ModelConfig, RGBTSaliencyNet

log = logging.getLogger(__name__)


@dataclass
class AblationFlags:
    branch_supervision: bool = True
    global_interaction: bool = True
    modality_interaction: bool = True
    single_decoder: bool = False
    share_branch_weights: bool = False


@dataclass
class TrainConfig:
    backbone: str = "vgg16"
    width_divisor: int = 1
    input_size: int = 352
    batch_size: int = 4
    epochs: int = 100
    lr_schedule: tuple = ((0, 1e-3), (20, 1e-4), (50, 1e-5))
    weight_decay: float = 5e-4
    momentum: float = 0.9
    backbone_lr_scale: float = 1.0
    alpha: float = 10.0
    beta: float = 0.5
    hflip: float = 0.5
    seed: int = 0
    max_steps: Optional[int] = None
    deterministic: bool = True
    dtype: str = "float32"
    pretrained: Optional[str] = None
    eval_every: int = 5
    num_workers: int = 0
    corruption: CorruptionPolicy = field(default_factory=CorruptionPolicy)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        self.lr_schedule = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        self.validate()

    def validate(self):
        if self.backbone not in MODEL_BACKBONES:
            raise ConfigurationError(f"backbone must be one of {MODEL_BACKBONES}, got {self.backbone!r}")
        epochs = [e for e, _ in self.lr_schedule]
        if not epochs or epochs[0] != 0 or any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigurationError(f"lr_schedule epochs must start at 0 and strictly increase: {epochs}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.ablation.single_decoder and self.ablation.share_branch_weights:
            raise ConfigurationError("ablation.single_decoder and ablation.share_branch_weights are exclusive")
        self.model_config().validate()

    def lr_at(self, epoch):
        """Learning rate for the 0-based ``epoch``."""
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    def model_config(self):
        a = self.ablation
        return ModelConfig(self.backbone, self.width_divisor, self.input_size,
                           branch_supervision=a.branch_supervision,
                           global_interaction=a.global_interaction,
                           modality_interaction=a.modality_interaction,
                           single_decoder=a.single_decoder,
                           share_branch_weights=a.share_branch_weights)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_flat(self):
        """Dotted-key dict, e.g. ``{"ablation.single_decoder": False, ...}``."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("corruption", "ablation"):
                for k, sub in asdict(v).items():
                    out[f"{f.name}.{k}"] = sub
            elif f.name == "lr_schedule":
                out[f.name] = [list(x) for x in v]
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat):
        top, nested = {}, {"corruption": {}, "ablation": {}}
        known = {f.name for f in fields(cls)}
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if tail:
                if head not in nested:
                    raise ConfigurationError(f"unknown config key {key!r}")
                sub_cls = CorruptionPolicy if head == "corruption" else AblationFlags
                if tail not in {f.name for f in fields(sub_cls)}:
                    raise ConfigurationError(f"unknown config key {key!r}")
                nested[head][tail] = value
            elif key in known and key not in nested:
                top[key] = value
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        try:
            return cls(**top, corruption=CorruptionPolicy(**nested["corruption"]),
                       ablation=AblationFlags(**nested["ablation"]))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(str(exc)) from exc


def seed_everything(seed, deterministic=True):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def build_model(config):
    model = RGBTSaliencyNet(config.model_config()).to(config.torch_dtype)
    if config.pretrained:
        backbone_id = "vgg16" if config.backbone == "vgg16" else "resnet50"
        apply_pretrained(model.encoder, load_pretrained(config.pretrained, backbone_id, config.width_divisor))
    return model


class RGBTDataset(Dataset):
    """Loads (rgb, thermal, mask) for ``(index, epoch)`` keys.

    Each sample draws augmentation randomness from its own generator seeded by
    (seed, epoch, index), so results do not depend on worker scheduling.
    """

    def __init__(self, records, config, train=True):
        self.records = records
        self.config = config
        self.train = train

    def __len__(self):
        return len(self.records)

    def __getitem__(self, key):
        index, epoch = key
        rec = self.records[index]
        pair, mask = load_sample(rec, self.config.input_size)
        event = None
        if self.train:
            rng = make_rng(self.config.seed, epoch, index)
            pair, mask = standard_augment(pair, mask, rng, self.config.hflip)
            pair, record = maybe_corrupt(pair, self.config.corruption, rng)
            event = record.to_log()
        return {"id": rec.id, "rgb": torch.from_numpy(np.ascontiguousarray(pair.rgb)),
                "thermal": torch.from_numpy(np.ascontiguousarray(pair.thermal)),
                "mask": torch.from_numpy(np.ascontiguousarray(mask))[None], "corruption": event}


def _collate(samples):
    return {
        "ids": [s["id"] for s in samples],
        "rgb": torch.stack([s["rgb"] for s in samples]),
        "thermal": torch.stack([s["thermal"] for s in samples]),
        "mask": torch.stack([s["mask"] for s in samples]),
        "corruption": [s["corruption"] for s in samples],
    }


def make_optimizer(model, config):
    backbone = list(model.encoder.parameters())
    backbone_ids = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in backbone_ids]
    lr = config.lr_at(0)
    groups = [{"params": backbone, "lr_scale": config.backbone_lr_scale, "lr": lr * config.backbone_lr_scale},
              {"params": rest, "lr_scale": 1.0, "lr": lr}]
    return torch.optim.SGD(groups, lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)


def _write(fh, record):
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


@torch.no_grad()
def evaluate_in_memory(model, records, config):
    """Mean MAE and adaptive F of S_f at the training resolution."""
    was_training = model.training
    model.eval()
    maes, fms = [], []
    for rec in records:
        pair, mask = load_sample(rec, config.input_size)
        rgb = torch.from_numpy(pair.rgb)[None].to(config.torch_dtype)
        th = torch.from_numpy(pair.thermal)[None].to(config.torch_dtype)
        sf = model(rgb, th).sf[0, 0].double().numpy()
        maes.append(mae(sf, mask))
        if mask.any():
            fms.append(adaptive_f_measure(sf, mask))
    model.train(was_training)
    return {"mae": float(np.mean(maes)), "fm": float(np.mean(fms)) if fms else None}


def train(config, records, run_dir, val_records=None, resume=None):
    """Train on ``records``; returns the path of the last checkpoint.

    Writes ``train_log.jsonl`` (one record per step, eval and corruption
    events) and ``checkpoint.safetensors`` (rewritten every epoch) to
    ``run_dir``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed, config.deterministic)
    flat = config.to_flat()
    model = build_model(config)
    optimizer = make_optimizer(model, config)
    start_epoch, step = 0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.metadata["fingerprint"] != config_fingerprint(flat):
            log.warning("resuming from a checkpoint with a different config fingerprint")
        restore(ckpt, model, optimizer, restore_rng=True)
        start_epoch, step = ckpt.epoch, ckpt.step
    model.train()

    dataset = RGBTDataset(records, config, train=True)
    ckpt_path = run_dir / "checkpoint.safetensors"
    log_path = run_dir / "train_log.jsonl"
    dtype = config.torch_dtype
    done = False
    with open(log_path, "a", encoding="utf-8") as fh:
        _write(fh, {"event": "config", "config": flat, "fingerprint": config_fingerprint(flat)})
        for epoch in range(start_epoch, config.epochs):
            lr = config.lr_at(epoch)
            set_lr(optimizer, lr)
            batches = [[(i, epoch) for i in b]
                       for b in batch_iterator(range(len(records)), config.batch_size, config.seed, epoch)]
            loader = DataLoader(dataset, batch_sampler=batches, collate_fn=_collate,
                                num_workers=config.num_workers)
            for batch in loader:
                out = model(batch["rgb"].to(dtype), batch["thermal"].to(dtype))
                losses = total_loss(out, batch["mask"].to(dtype), config.alpha, config.beta,
                                    config.ablation.branch_supervision)
                values = losses.as_floats()
                if not math.isfinite(values["total"]):
                    diag = {"epoch": epoch, "step": step, "ids": batch["ids"], "losses": values}
                    (run_dir / "divergence.json").write_text(json.dumps(diag, indent=2))
                    raise TrainingDiverged(f"non-finite loss at step {step}: {values}", diag)
                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                optimizer.step()
                for sid, ev in zip(batch["ids"], batch["corruption"]):
                    if ev is not None:
                        _write(fh, {"event": "corruption", "epoch": epoch, "step": step, "id": sid, **ev})
                _write(fh, {"event": "step", "epoch": epoch, "step": step, "lr": lr, **values})
                step += 1
                if config.max_steps is not None and step >= config.max_steps:
                    done = True
                    break
            capture(model, optimizer, flat, epoch + 1, step).save(ckpt_path)
            if val_records and config.eval_every and (epoch + 1) % config.eval_every == 0:
                _write(fh, {"event": "eval", "epoch": epoch, "step": step,
                            **evaluate_in_memory(model, val_records, config)})
            if done:
                break
    return ckpt_path


def load_model(checkpoint_path):
    """Rebuild the network recorded in a checkpoint; returns (model, config)."""
    ckpt = load_checkpoint(checkpoint_path)
    config = TrainConfig.from_flat(ckpt.config)
    config = replace(config, pretrained=None)
    model = RGBTSaliencyNet(config.model_config()).to(config.torch_dtype)
    restore(ckpt, model)
    model.eval()
    return model, config


@torch.no_grad()
def predict(model, config, record, corruption=None, index=0):
    """S_f for one record, resampled to the original image resolution."""
    pair, _ = load_sample(record, config.input_size)
    if corruption is not None:
        pair, _ = maybe_corrupt(pair, corruption, make_rng(corruption.seed, index))
    dtype = config.torch_dtype
    sf = model(torch.from_numpy(np.ascontiguousarray(pair.rgb))[None].to(dtype),
               torch.from_numpy(np.ascontiguousarray(pair.thermal))[None].to(dtype)).sf
    h, w = image_size(record.gt_path if record.gt_path is not None else record.rgb_path)
    return resample(sf, h, w)[0, 0].double().numpy()


def infer(checkpoint_path, records, out_dir, overwrite=False, corruption=None, backbone=None):
    """Write one 8-bit PNG per record (``<id>.png``) into ``out_dir``."""
    model, config = load_model(checkpoint_path)
    if backbone is not None and backbone != config.backbone:
        raise ConfigurationError(
            f"checkpoint backbone is {config.backbone!r}, requested {backbone!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [out_dir / f"{r.id}.png" for r in records]
    if len(set(targets)) != len(targets):
        raise FileExistsError("duplicate record ids in inference request")
    if not overwrite:
        clash = [str(t) for t in targets if t.exists()]
        if clash:
            raise FileExistsError(f"refusing to overwrite existing predictions: {clash[:5]}")
    for i, (rec, path) in enumerate(zip(records, targets)):
        save_prediction(predict(model, config, rec, corruption, i), path)
    return targets
