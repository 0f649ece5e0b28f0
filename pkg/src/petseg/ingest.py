"""Patient volume loading, SUV conversion and 2-channel slice preprocessing.

A patient lives in a directory ``<patient_id>/`` holding ``ct.vol``,
``pet.vol`` and ``label.vol`` plus a small ``meta.txt``. Each ``.vol``
file is a structured-text header followed by the flat binary grid
(C order, little endian). All three grids must share shape and spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CT_CLIP = (-1024.0, 1024.0)
SUV_CLIP = (0.0, 30.0)

MODALITY_DTYPES = {"CT-HU": np.float32, "PET-SUV": np.float32, "LABEL": np.uint8}

_MAGIC = "VOLFMT 1"


class IngestError(ValueError):
    pass


@dataclass
class Volume3D:
    """One co-registered scalar grid indexed (z, y, x)."""

    data: np.ndarray
    spacing: tuple[float, float, float]  # (dz, dy, dx) in mm
    modality: str  # CT-HU | PET-SUV | LABEL
    suv_factor: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise IngestError(f"expected a 3D grid, got ndim={self.data.ndim}")
        if self.modality not in MODALITY_DTYPES:
            raise IngestError(f"unknown modality {self.modality!r}")
        if any(s <= 0 for s in self.spacing):
            raise IngestError(f"non-positive spacing {self.spacing}")
        if self.modality == "LABEL":
            vals = np.unique(self.data)
            if not np.isin(vals, (0, 1)).all():
                raise IngestError(f"label volume has non-binary values {vals[:8]}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class PatientRecord:
    """One patient's CT, SUV and lesion-label grids plus slice classification."""

    patient_id: str
    ct: Volume3D
    suv: Volume3D
    label: Volume3D
    lesion_slices: tuple[int, ...] = field(default=())
    nonlesion_slices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        shapes = {self.ct.shape, self.suv.shape, self.label.shape}
        if len(shapes) != 1:
            raise IngestError(f"{self.patient_id}: modality shapes differ: {shapes}")
        spacings = {self.ct.spacing, self.suv.spacing, self.label.spacing}
        if len(spacings) != 1:
            raise IngestError(f"{self.patient_id}: modality spacings differ: {spacings}")
        if not self.lesion_slices and not self.nonlesion_slices:
            lesion, nonlesion = classify_slices(self.label.data)
            self.lesion_slices = lesion
            self.nonlesion_slices = nonlesion

    @property
    def num_slices(self) -> int:
        return self.ct.shape[0]

    @property
    def is_negative(self) -> bool:
        return len(self.lesion_slices) == 0


@dataclass(frozen=True, order=True)
class SliceSample:
    """Reference to one axial training plane."""

    patient_id: str
    z: int
    has_lesion: bool


def classify_slices(label: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Partition z-indices into lesion / non-lesion planes."""
    flags = label.reshape(label.shape[0], -1).any(axis=1)
    lesion = tuple(int(z) for z in np.flatnonzero(flags))
    nonlesion = tuple(int(z) for z in np.flatnonzero(~flags))
    return lesion, nonlesion


def suv_scale(pet_raw: np.ndarray, factor: float) -> np.ndarray:
    """Convert a raw PET grid to SUV by its stored scale factor."""
    if factor <= 0:
        raise IngestError(f"SUV factor must be positive, got {factor}")
    return (pet_raw * np.float32(factor)).astype(pet_raw.dtype, copy=False)


# ---------------------------------------------------------------------------
# .vol file format: text header, blank line, raw little-endian C-order bytes.


def write_volume(path: Path | str, volume: Volume3D) -> None:
    path = Path(path)
    dtype = np.dtype(MODALITY_DTYPES[volume.modality]).newbyteorder("<")
    data = np.ascontiguousarray(volume.data, dtype=dtype)
    header = "\n".join(
        [
            _MAGIC,
            f"modality: {volume.modality}",
            "shape: {} {} {}".format(*volume.shape),
            "spacing: {!r} {!r} {!r}".format(*volume.spacing),
            f"dtype: {dtype.name}",
            f"suv_factor: {volume.suv_factor!r}",
            "",
            "",
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_volume(path: Path | str) -> Volume3D:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"missing volume file {path}")
    with open(path, "rb") as fh:
        lines = []
        while True:
            line = fh.readline()
            if not line:
                raise IngestError(f"{path}: truncated header")
            line = line.decode("ascii").rstrip("\n")
            if line == "":
                break
            lines.append(line)
        if not lines or lines[0] != _MAGIC:
            raise IngestError(f"{path}: not a {_MAGIC} file")
        fields = {}
        for line in lines[1:]:
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
        shape = tuple(int(v) for v in fields["shape"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        dtype = np.dtype(fields["dtype"]).newbyteorder("<")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise IngestError(f"{path}: payload shorter than shape {shape}")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return Volume3D(
        data=np.array(data),  # own, writable copy
        spacing=spacing,
        modality=fields["modality"],
        suv_factor=float(fields.get("suv_factor", 1.0)),
    )


def write_patient(record: PatientRecord, root: Path | str) -> Path:
    """Write a patient directory in the on-disk layout. SUV is stored with factor 1."""
    pdir = Path(root) / record.patient_id
    pdir.mkdir(parents=True, exist_ok=True)
    write_volume(pdir / "ct.vol", record.ct)
    suv = Volume3D(record.suv.data, record.suv.spacing, "PET-SUV", suv_factor=1.0)
    write_volume(pdir / "pet.vol", suv)
    write_volume(pdir / "label.vol", record.label)
    (pdir / "meta.txt").write_text(
        f"patient_id: {record.patient_id}\n"
        f"num_slices: {record.num_slices}\n"
        f"lesion_slices: {' '.join(str(z) for z in record.lesion_slices)}\n"
    )
    return pdir


def load_patient(path: Path | str) -> PatientRecord:
    """Load and classify one patient directory; PET is converted to SUV."""
    pdir = Path(path)
    ct = _load_modality(pdir, "ct")
    pet = _load_modality(pdir, "pet")
    label = _load_modality(pdir, "label")
    suv = Volume3D(
        data=suv_scale(pet.data, pet.suv_factor),
        spacing=pet.spacing,
        modality="PET-SUV",
        suv_factor=1.0,
    )
    return PatientRecord(patient_id=pdir.name, ct=ct, suv=suv, label=label)


def _load_modality(pdir: Path, stem: str) -> Volume3D:
    vol_path = pdir / f"{stem}.vol"
    if vol_path.exists():
        return read_volume(vol_path)
    nifti = _find_nifti(pdir, stem)
    if nifti is not None:
        return _read_nifti(nifti, stem)
    raise IngestError(f"missing {stem} volume in {pdir}")


def _find_nifti(pdir: Path, stem: str) -> Path | None:
    for suffix in (".nii.gz", ".nii"):
        cand = pdir / f"{stem}{suffix}"
        if cand.exists():
            return cand
    return None


def _read_nifti(path: Path, stem: str) -> Volume3D:
    # Thin adapter; the .vol format remains the tested contract.
    try:
        import nibabel as nib
    except ImportError as exc:
        raise IngestError(f"{path}: NIfTI input requires nibabel") from exc
    img = nib.load(str(path))
    data = np.asanyarray(img.dataobj)
    data = np.transpose(data, (2, 1, 0))  # nibabel is (x, y, z); we index (z, y, x)
    zooms = img.header.get_zooms()[:3]
    spacing = (float(zooms[2]), float(zooms[1]), float(zooms[0]))
    modality = {"ct": "CT-HU", "pet": "PET-SUV", "label": "LABEL"}[stem]
    dtype = MODALITY_DTYPES[modality]
    return Volume3D(data=data.astype(dtype), spacing=spacing, modality=modality)


def list_patient_dirs(root: Path | str) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.txt").exists())


# ---------------------------------------------------------------------------
# Slice preprocessing


def center_map(native: int, out: int) -> tuple[slice, slice]:
    """Index ranges (source-in-native, dest-in-out) of a centered crop-or-pad."""
    if native >= out:
        start = (native - out) // 2
        return slice(start, start + out), slice(0, out)
    pad = (out - native) // 2
    return slice(0, native), slice(pad, pad + native)


def crop_or_pad_plane(plane: np.ndarray, out_size: int, fill: float) -> np.ndarray:
    """Center-crop or symmetrically pad a 2D plane to out_size x out_size."""
    src_y, dst_y = center_map(plane.shape[0], out_size)
    src_x, dst_x = center_map(plane.shape[1], out_size)
    out = np.full((out_size, out_size), fill, dtype=plane.dtype)
    out[dst_y, dst_x] = plane[src_y, src_x]
    return out


def restore_plane(plane: np.ndarray, native_shape: tuple[int, int]) -> np.ndarray:
    """Invert crop_or_pad_plane; regions outside the crop window become 0."""
    out_size = plane.shape[0]
    src_y, dst_y = center_map(native_shape[0], out_size)
    src_x, dst_x = center_map(native_shape[1], out_size)
    out = np.zeros(native_shape, dtype=plane.dtype)
    out[src_y, src_x] = plane[dst_y, dst_x]
    return out


def preprocess_slice(patient: PatientRecord, z: int, out_size: int = 256) -> np.ndarray:
    """Build the 2-channel network input for one axial plane.

    Channel 0: CT clipped to [-1024, 1024] HU, mapped to [-1, 1].
    Channel 1: SUV clipped to [0, 30], mapped to [0, 1].
    Planes are center-cropped (or padded with air / zero uptake) to out_size.
    """
    if not 0 <= z < patient.num_slices:
        raise IngestError(f"z={z} outside [0, {patient.num_slices})")
    if out_size <= 0:
        raise IngestError(f"out_size must be positive, got {out_size}")
    ct = crop_or_pad_plane(patient.ct.data[z].astype(np.float32), out_size, CT_CLIP[0])
    suv = crop_or_pad_plane(patient.suv.data[z].astype(np.float32), out_size, SUV_CLIP[0])
    ct = np.clip(ct, *CT_CLIP) / CT_CLIP[1]
    suv = np.clip(suv, *SUV_CLIP) / SUV_CLIP[1]
    return np.stack([ct, suv]).astype(np.float32)


def label_plane(patient: PatientRecord, z: int, out_size: int = 256) -> np.ndarray:
    """Ground-truth plane matching the preprocess_slice geometry (float32 {0,1})."""
    plane = patient.label.data[z].astype(np.float32)
    return crop_or_pad_plane(plane, out_size, 0.0)
