"""Synthetic whole-body PET/CT phantoms with ground truth.

Each phantom is a body ellipsoid (soft tissue over air) with mildly noisy
background uptake, two hot healthy organs that stay UNLABELED (a
brain-like sphere near the top and a bladder-like sphere near the
bottom), and a configurable number of labeled hot lesions. The organs are
the deliberate confounder: intensity thresholding alone flags them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ingest import PatientRecord, Volume3D, classify_slices, write_patient

AIR_HU = -1000.0
BODY_HU = 40.0
BODY_SUV = 1.0
LESION_SUV_FLOOR = 4.0

PLACEMENT_RETRIES = 200


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    grid: tuple[int, int, int] = (96, 64, 64)  # (Z, Y, X)
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)  # mm
    n_lesions: int = 2
    lesion_suv_range: tuple[float, float] = (4.0, 10.0)
    lesion_radius_mm: tuple[float, float] = (4.0, 15.0)
    brain_suv: float = 8.0
    brain_radius_mm: float = 20.0
    bladder_suv: float = 12.0
    bladder_radius_mm: float = 14.0
    suv_noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_lesions < 0:
            raise PhantomError(f"n_lesions must be >= 0, got {self.n_lesions}")
        if any(v <= 0 for v in self.spacing):
            raise PhantomError(f"spacing must be positive, got {self.spacing}")


@dataclass(frozen=True)
class Sphere:
    center_mm: tuple[float, float, float]  # (z, y, x)
    radius_mm: float
    suv: float
    kind: str  # lesion | brain | bladder

    def overlaps(self, other: "Sphere", margin_mm: float = 0.0) -> bool:
        dist = math.dist(self.center_mm, other.center_mm)
        return dist < self.radius_mm + other.radius_mm + margin_mm


@dataclass
class PhantomTruth:
    lesions: list[Sphere] = field(default_factory=list)
    organs: list[Sphere] = field(default_factory=list)
    lesion_z_slices: tuple[int, ...] = ()


def _coords_mm(spec: PhantomSpec):
    """Voxel-center coordinate grids in mm, one per axis."""
    axes = [(np.arange(n) + 0.5) * d for n, d in zip(spec.grid, spec.spacing)]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def _body_geometry(spec: PhantomSpec):
    """Center and semi-axes (mm) of the body ellipsoid."""
    extent = [n * d for n, d in zip(spec.grid, spec.spacing)]
    center = tuple(e / 2 for e in extent)
    semi = (0.48 * extent[0], 0.40 * extent[1], 0.40 * extent[2])
    return center, semi


def _inside_body(point, radius, center, semi) -> bool:
    # conservative: shrink each semi-axis by the sphere radius
    shrunk = [a - radius for a in semi]
    if min(shrunk) <= 0:
        return False
    return sum(((p - c) / a) ** 2 for p, c, a in zip(point, center, shrunk)) <= 1.0


def _sphere_mask(sphere: Sphere, coords) -> np.ndarray:
    zz, yy, xx = coords
    cz, cy, cx = sphere.center_mm
    d2 = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
    return d2 <= sphere.radius_mm**2


def _place_organs(spec: PhantomSpec, center, semi) -> list[Sphere]:
    """Organs sit at fixed anatomical positions on the body axis."""
    cz, cy, cx = center
    organs = []
    for kind, suv, radius, z_frac in (
        ("brain", spec.brain_suv, spec.brain_radius_mm, -0.70),
        ("bladder", spec.bladder_suv, spec.bladder_radius_mm, 0.70),
    ):
        radius = min(radius, 0.45 * min(semi))
        organs.append(Sphere((cz + z_frac * (semi[0] - radius), cy, cx),
                             radius, suv, kind))
    return organs


def _place_lesions(spec: PhantomSpec, rng: np.random.Generator, center, semi,
                   organs: list[Sphere]) -> list[Sphere]:
    lesions: list[Sphere] = []
    for _ in range(spec.n_lesions):
        for _ in range(PLACEMENT_RETRIES):
            radius = rng.uniform(*spec.lesion_radius_mm)
            point = tuple(
                c + (2 * rng.random() - 1) * a for c, a in zip(center, semi)
            )
            if not _inside_body(point, radius, center, semi):
                continue
            cand = Sphere(point, radius, rng.uniform(*spec.lesion_suv_range), "lesion")
            if any(cand.overlaps(s, margin_mm=2.0) for s in organs + lesions):
                continue
            lesions.append(cand)
            break
        else:
            raise PhantomError(
                f"could not place lesion {len(lesions) + 1}/{spec.n_lesions} "
                f"after {PLACEMENT_RETRIES} tries"
            )
    return lesions


def generate_patient(spec: PhantomSpec,
                     patient_id: str = "phantom") -> tuple[PatientRecord, PhantomTruth]:
    """Deterministic phantom for a spec; label covers lesion spheres only."""
    rng = np.random.default_rng(spec.seed)
    coords = _coords_mm(spec)
    center, semi = _body_geometry(spec)

    zz, yy, xx = coords
    body_mask = (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    ) <= 1.0

    organs = _place_organs(spec, center, semi)
    lesions = _place_lesions(spec, rng, center, semi, organs)

    ct = np.full(spec.grid, AIR_HU, dtype=np.float32)
    ct[body_mask] = BODY_HU + rng.normal(0.0, 15.0, spec.grid)[body_mask]

    suv = np.zeros(spec.grid, dtype=np.float64)
    suv[body_mask] = BODY_SUV * np.exp(
        rng.normal(0.0, spec.suv_noise_sigma, spec.grid)
    )[body_mask]

    label = np.zeros(spec.grid, dtype=np.uint8)
    structure_noise = np.exp(rng.normal(0.0, 0.05, spec.grid))
    for sphere in organs + lesions:
        mask = _sphere_mask(sphere, coords)
        suv[mask] = sphere.suv * structure_noise[mask]
        if sphere.kind == "lesion":
            suv[mask] = np.maximum(suv[mask], LESION_SUV_FLOOR)  # lesions stay hot
            label[mask] = 1

    record = PatientRecord(
        patient_id=patient_id,
        ct=Volume3D(ct, spec.spacing, "CT-HU"),
        suv=Volume3D(suv.astype(np.float32), spec.spacing, "PET-SUV"),
        label=Volume3D(label, spec.spacing, "LABEL"),
    )
    lesion_z = classify_slices(label)[0]
    truth = PhantomTruth(lesions=lesions, organs=organs, lesion_z_slices=lesion_z)
    return record, truth


def generate_dataset(n_patients: int, spec: PhantomSpec, seed: int,
                     out_dir: Path | str, n_negative: int = 0) -> list[dict]:
    """Write phantom patient directories plus a manifest; returns the manifest.

    The first ``n_negative`` patients get zero lesions. Per-patient seeds
    derive from ``seed``, so the dataset is reproducible as a whole.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(n_patients):
        pspec = replace(
            spec,
            seed=seed * 100_003 + i,
            n_lesions=0 if i < n_negative else spec.n_lesions,
        )
        patient_id = f"patient_{i:03d}"
        record, truth = generate_patient(pspec, patient_id)
        write_patient(record, out_dir)
        manifest.append(
            {
                "patient_id": patient_id,
                "n_lesions": len(truth.lesions),
                "lesion_voxels": int(record.label.data.sum()),
                "lesion_slices": len(record.lesion_slices),
                "seed": pspec.seed,
            }
        )
    _write_manifest(out_dir / "manifest.txt", manifest)
    return manifest


def _write_manifest(path: Path, manifest: list[dict]) -> None:
    lines = ["patient_id\tn_lesions\tlesion_voxels\tlesion_slices\tseed"]
    for row in manifest:
        lines.append(
            f"{row['patient_id']}\t{row['n_lesions']}\t{row['lesion_voxels']}"
            f"\t{row['lesion_slices']}\t{row['seed']}"
        )
    path.write_text("\n".join(lines) + "\n")
