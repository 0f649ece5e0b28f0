"""Volumetric evaluation: Dice, false-positive and false-negative volume.

False volumes are component-level: a predicted 26-connected component
with no ground-truth overlap counts toward false-positive volume; a
ground-truth component never touched by the prediction counts toward
false-negative volume. Volumes are reported in mL.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .ingest import PatientRecord, preprocess_slice, restore_plane


@dataclass
class PatientEval:
    patient_id: str
    dice: float
    fpv_ml: float
    fnv_ml: float


@dataclass
class EvalReport:
    rows: list[PatientEval] = field(default_factory=list)

    def add(self, row: PatientEval) -> None:
        self.rows.append(row)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_fpv_ml(self) -> float:
        return float(np.mean([r.fpv_ml for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_fnv_ml(self) -> float:
        return float(np.mean([r.fnv_ml for r in self.rows])) if self.rows else float("nan")


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


def connected_components(mask: np.ndarray,
                         connectivity: int = 26) -> tuple[np.ndarray, list[int]]:
    """Maximal connected components; returns (labels, voxel count per component)."""
    squared = {6: 1, 18: 2, 26: 3}
    if connectivity not in squared:
        raise ValueError(f"connectivity must be one of {sorted(squared)}")
    structure = ndimage.generate_binary_structure(3, squared[connectivity])
    labels, count = ndimage.label(mask.astype(bool), structure=structure)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, count + 1))
    return labels, [int(s) for s in sizes]


def _voxel_ml(spacing: tuple[float, float, float]) -> float:
    dz, dy, dx = spacing
    return dz * dy * dx / 1000.0


def false_positive_volume(pred: np.ndarray, gt: np.ndarray,
                          spacing: tuple[float, float, float]) -> float:
    """mL of predicted components that overlap no ground-truth voxel."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    labels, sizes = connected_components(pred)
    gt = gt.astype(bool)
    voxels = 0
    for comp, size in enumerate(sizes, start=1):
        if not gt[labels == comp].any():
            voxels += size
    return voxels * _voxel_ml(spacing)


def false_negative_volume(pred: np.ndarray, gt: np.ndarray,
                          spacing: tuple[float, float, float]) -> float:
    """mL of ground-truth components never touched by the prediction."""
    return false_positive_volume(gt, pred, spacing)


def predict_volume(forward_fn, patient: PatientRecord, input_size: int = 256,
                   threshold: float = 0.5, batch_size: int = 16) -> np.ndarray:
    """Stack per-slice predictions into a binary volume in native geometry.

    ``forward_fn`` maps a (B, 2, S, S) float tensor to (B, 1, S, S) logits.
    Slices run in ascending z; predictions are mapped back through the
    crop/pad geometry (cropped-away regions predict 0).
    """
    shape = patient.label.shape
    out = np.zeros(shape, dtype=np.uint8)
    zs = list(range(shape[0]))
    with torch.no_grad():
        for start in range(0, len(zs), batch_size):
            chunk = zs[start:start + batch_size]
            batch = np.stack([preprocess_slice(patient, z, input_size) for z in chunk])
            logits = forward_fn(torch.from_numpy(batch))
            masks = (torch.sigmoid(logits) > threshold).numpy().astype(np.uint8)
            for z, mask in zip(chunk, masks):
                out[z] = restore_plane(mask[0], shape[1:])
    return out


def evaluate_patient(model, patient: PatientRecord, threshold: float = 0.5,
                     input_size: int = 256, batch_size: int = 16) -> PatientEval:
    """Full-volume metrics for one patient under a trained model."""
    pred = predict_volume(model, patient, input_size, threshold, batch_size)
    return evaluate_prediction(patient.patient_id, pred, patient.label.data,
                               patient.label.spacing)


def evaluate_prediction(patient_id: str, pred: np.ndarray, gt: np.ndarray,
                        spacing: tuple[float, float, float]) -> PatientEval:
    return PatientEval(
        patient_id=patient_id,
        dice=dice_score(pred, gt),
        fpv_ml=false_positive_volume(pred, gt, spacing),
        fnv_ml=false_negative_volume(pred, gt, spacing),
    )
