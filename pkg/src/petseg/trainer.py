"""Training loop: 5-fold patient split, scheduled slice lists, AdamW.

Each epoch consumes exactly the slice list produced by the sampler for
that epoch, in order, chunked into batches. Model parameters follow a
cosine-annealed learning rate; the three loss-weight scalars have their
own optimizer. The checkpoint with the best validation Dice (mean
per-slice Dice of lesion-containing validation slices at threshold 0.5)
is retained.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import sampler as sampler_mod
from .ingest import PatientRecord, label_plane, preprocess_slice
from .losses import LossWeights, combined_loss
from .metrics import dice_score
from .model import EncoderConfig, build_model, checkpoint_payload

log = logging.getLogger(__name__)

VAL_THRESHOLD = 0.5


class TrainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 24
    epochs: int = 80
    lr_init: float = 1e-5
    lr_final: float = 1e-8
    cosine_period: int = 100
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weight_decay: float = 1e-2
    weight_lr: float = 1e-4
    fold_index: int = 0
    seed: int = 0
    input_size: int = 256

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise TrainerError("lr_final must not exceed lr_init")
        if not 0 <= self.fold_index < 5:
            raise TrainerError(f"fold_index must be in 0..4, got {self.fold_index}")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """CPU-scale settings; the full-scale learning rate is far too
        small to move a randomly initialized toy model in a few epochs."""
        defaults = dict(batch_size=8, epochs=15, lr_init=2e-3, lr_final=1e-5,
                        cosine_period=15, input_size=64)
        defaults.update(overrides)
        return cls(**defaults)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    s_dice: float
    s_lovasz: float
    s_bce: float
    val_dice: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "lr", "train_loss", "s_dice", "s_lovasz", "s_bce", "val_dice")

    def best_epoch(self) -> EpochRecord:
        return max(self.records, key=lambda r: r.val_dice)

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_FIELDS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss),
                                 repr(r.s_dice), repr(r.s_lovasz), repr(r.s_bce),
                                 repr(r.val_dice)])

    @classmethod
    def read_csv(cls, path: Path | str) -> "TrainHistory":
        history = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                history.records.append(EpochRecord(
                    epoch=int(row["epoch"]),
                    lr=float(row["lr"]),
                    train_loss=float(row["train_loss"]),
                    s_dice=float(row["s_dice"]),
                    s_lovasz=float(row["s_lovasz"]),
                    s_bce=float(row["s_bce"]),
                    val_dice=float(row["val_dice"]),
                ))
        return history


def kfold_split(patients: list, k: int = 5, seed: int = 0) -> list[tuple[list, list]]:
    """Patient-level partition into k near-equal parts by seeded shuffle.

    Returns one (train, val) pair per fold; fold f validates on part f.
    """
    if len(patients) < k:
        raise TrainerError(f"need at least {k} patients, got {len(patients)}")
    ordered = sorted(patients, key=lambda p: p.patient_id)
    sampler_mod._child_rng(seed, "kfold").shuffle(ordered)
    base, extra = divmod(len(ordered), k)
    parts, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        parts.append(ordered[start:start + size])
        start += size
    folds = []
    for f in range(k):
        val = parts[f]
        train = [p for i, part in enumerate(parts) if i != f for p in part]
        folds.append((train, val))
    return folds


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_init to lr_final over cosine_period epochs."""
    t = min(epoch, config.cosine_period) / config.cosine_period
    return config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (
        1.0 + math.cos(math.pi * t)
    )


def _slice_batch(patients_by_id: dict[str, PatientRecord], samples, input_size: int,
                 device: torch.device) -> tuple[torch.Tensor, torch.Tensor]:
    inputs = np.stack([
        preprocess_slice(patients_by_id[s.patient_id], s.z, input_size)
        for s in samples
    ])
    targets = np.stack([
        label_plane(patients_by_id[s.patient_id], s.z, input_size)[None]
        for s in samples
    ])
    return (torch.from_numpy(inputs).to(device),
            torch.from_numpy(targets).to(device))


def validate_dice(model, val_patients: list[PatientRecord], input_size: int,
                  device: torch.device, batch_size: int) -> float:
    """Mean per-slice Dice over lesion-containing validation slices."""
    slices = [
        (p, z) for p in val_patients for z in p.lesion_slices
    ]
    if not slices:
        return float("nan")
    scores = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            chunk = slices[start:start + batch_size]
            inputs = torch.from_numpy(np.stack([
                preprocess_slice(p, z, input_size) for p, z in chunk
            ])).to(device)
            preds = (torch.sigmoid(model(inputs)) > VAL_THRESHOLD).cpu().numpy()
            for (p, z), pred in zip(chunk, preds):
                gt = label_plane(p, z, input_size)
                scores.append(dice_score(pred[0], gt))
    model.train()
    return float(np.mean(scores))


def train(patients: list[PatientRecord], config: TrainConfig,
          sched_config: sampler_mod.SchedulerConfig,
          encoder_config: EncoderConfig | None = None,
          out_dir: Path | str | None = None,
          device: str = "cpu") -> tuple[dict, TrainHistory]:
    """Run the full training schedule; returns (best checkpoint payload, history).

    Negative-label patients are dropped before the fold split. When
    ``out_dir`` is given, ``checkpoint.pt`` and ``history.csv`` land there.
    """
    positives = [p for p in patients if not p.is_negative]
    dropped = len(patients) - len(positives)
    if dropped:
        log.info("excluding %d negative patients from training", dropped)

    folds = kfold_split(positives, k=5, seed=config.seed)
    train_patients, val_patients = folds[config.fold_index]
    plan = sampler_mod.build_cycle_plan(train_patients, sched_config)
    if plan.degenerate:
        log.warning("whole-body pool empty (alpha=%s): lesion-only training",
                    sched_config.alpha)

    dev = torch.device(device)
    torch.manual_seed(config.seed)
    encoder_config = encoder_config or EncoderConfig()
    model = build_model(encoder_config, seed=config.seed).to(dev)
    model.train()
    weights = LossWeights().to(dev)

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr_init,
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay,
    )
    weight_optimizer = torch.optim.Adam(weights.parameters(), lr=config.weight_lr)

    by_id = {p.patient_id: p for p in train_patients}
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = TrainHistory()
    best_payload: dict | None = None
    best_dice = -math.inf

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr

        epoch_plan = sampler_mod.epoch_training_list(plan, epoch, sched_config)
        if not epoch_plan.samples:
            raise TrainerError(f"epoch {epoch}: empty training list")

        losses = []
        for start in range(0, len(epoch_plan.samples), config.batch_size):
            samples = epoch_plan.samples[start:start + config.batch_size]
            inputs, targets = _slice_batch(by_id, samples, config.input_size, dev)
            optimizer.zero_grad()
            weight_optimizer.zero_grad()
            logits = model(inputs)
            try:
                loss = combined_loss(logits, targets, weights)
            except FloatingPointError as exc:
                raise TrainerError(
                    f"epoch {epoch}, batch at {start}: {exc}"
                ) from exc
            loss.backward()
            optimizer.step()
            weight_optimizer.step()
            losses.append(float(loss.detach()))

        val_dice = validate_dice(model, val_patients, config.input_size, dev,
                                 config.batch_size)
        s_dice, s_lovasz, s_bce = weights.values()
        history.records.append(EpochRecord(
            epoch=epoch, lr=lr, train_loss=float(np.mean(losses)),
            s_dice=s_dice, s_lovasz=s_lovasz, s_bce=s_bce, val_dice=val_dice,
        ))
        log.info("epoch %3d  lr %.3e  loss %.4f  val_dice %.4f",
                 epoch, lr, history.records[-1].train_loss, val_dice)

        if best_payload is None or val_dice > best_dice:
            best_dice = val_dice
            best_payload = checkpoint_payload(
                model, weights,
                extra={"epoch": epoch, "val_dice": val_dice,
                       "input_size": config.input_size},
            )
            if out_dir is not None:
                torch.save(best_payload, str(out_dir / "checkpoint.pt"))

    if out_dir is not None:
        history.write_csv(out_dir / "history.csv")

    assert best_payload is not None
    return best_payload, history
