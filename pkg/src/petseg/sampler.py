"""Whole-body slice scheduling.

Training always uses every lesion-containing slice. On top of that base
list, whole-body (non-lesion) slices are mixed in at a configurable
lesion:whole-body ratio. The whole-body pool is served patient-batch by
patient-batch: a batch stays active for a fixed number of epochs, then
rotates to the next one, randomly carrying over a fraction of its slices
so consecutive batches share some context. Batch rotation wraps around,
so the final batch seeds the first batch of the next pass.

All randomness is derived from a single seed; planning is a pure
function of (patients, config).
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

from .ingest import SliceSample

ORIGIN_LESION = "lesion"
ORIGIN_WHOLEBODY = "wholebody"
ORIGIN_CARRIED = "carried"


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SchedulerConfig:
    """Knobs of the whole-body schedule.

    alpha: lesion:whole-body slice ratio (larger alpha -> fewer whole-body
        slices; may be math.inf for lesion-only training).
    beta: epochs each whole-body batch stays active before rotating.
    carryover_fraction: share of the active batch randomly retained into
        the next one.
    """

    alpha: float = 1.0
    beta: int = 5
    carryover_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise SamplerError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 1:
            raise SamplerError(f"beta must be >= 1, got {self.beta}")
        if not 0 <= self.carryover_fraction < 1:
            raise SamplerError(
                f"carryover_fraction must be in [0, 1), got {self.carryover_fraction}"
            )


@dataclass(frozen=True)
class PatientSliceView:
    """The minimal patient surface the planner needs (see build_cycle_plan)."""

    patient_id: str
    lesion_slices: tuple[int, ...]
    nonlesion_slices: tuple[int, ...]


@dataclass
class WholeBodyBatch:
    batch_index: int
    patient_ids: list[str]
    native_slices: list[SliceSample]
    carried_in: list[SliceSample] = field(default_factory=list)

    def active_slices(self) -> list[SliceSample]:
        """Native plus carried slices, deduplicated, native order first."""
        seen = set(self.native_slices)
        extra = [s for s in self.carried_in if s not in seen]
        return self.native_slices + extra


@dataclass
class CyclePlan:
    batches: list[WholeBodyBatch]
    lesion_base: list[SliceSample]
    target_wb_count: int
    config: SchedulerConfig
    degenerate: bool = False  # target_wb_count == 0: lesion-only training

    @property
    def num_batches(self) -> int:
        return len(self.batches)


@dataclass
class EpochPlan:
    epoch_index: int
    samples: list[SliceSample]
    origins: list[str]  # aligned with samples


def _child_rng(seed: int, *parts) -> random.Random:
    """Deterministic sub-stream, stable across platforms and runs."""
    key = ":".join([str(seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("ascii")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _wholebody_pool(patient) -> list[SliceSample]:
    return [
        SliceSample(patient.patient_id, z, has_lesion=False)
        for z in patient.nonlesion_slices
    ]


def _lesion_pool(patient) -> list[SliceSample]:
    return [
        SliceSample(patient.patient_id, z, has_lesion=True)
        for z in patient.lesion_slices
    ]


def build_cycle_plan(patients, config: SchedulerConfig) -> CyclePlan:
    """Group the permuted training patients into whole-body batches.

    ``patients`` is any sequence of objects with ``patient_id``,
    ``lesion_slices`` and ``nonlesion_slices`` attributes. Patients are
    permuted with the config seed, then batched greedily: a batch closes
    as soon as its cumulative whole-body slice count reaches
    ``target_wb_count = round(n_lesion / alpha)``; the leftover patients
    form a (possibly short) final batch.
    """
    ordered = sorted(patients, key=lambda p: p.patient_id)  # canonical over input order
    lesion_base = [s for p in ordered for s in _lesion_pool(p)]
    if not lesion_base:
        raise SamplerError("no lesion slices in any training patient")

    target = int(math.floor(len(lesion_base) / config.alpha + 0.5))
    permuted = list(ordered)
    _child_rng(config.seed, "patient-permutation").shuffle(permuted)

    if target == 0:
        batches = [WholeBodyBatch(0, [], [])]
        return CyclePlan(batches, lesion_base, 0, config, degenerate=True)

    batches: list[WholeBodyBatch] = []
    ids: list[str] = []
    native: list[SliceSample] = []
    for patient in permuted:
        ids.append(patient.patient_id)
        native.extend(_wholebody_pool(patient))
        if len(native) >= target:
            batches.append(WholeBodyBatch(len(batches), ids, native))
            ids, native = [], []
    if ids:
        batches.append(WholeBodyBatch(len(batches), ids, native))

    plan = CyclePlan(batches, lesion_base, target, config)
    _fill_first_cycle_carryover(plan)
    return plan


def carryover(prev, config: SchedulerConfig, rng: random.Random) -> list[SliceSample]:
    """Slices randomly retained from the previously active batch.

    ``prev`` is a WholeBodyBatch (native plus carried slices are pooled)
    or a plain slice list. Draws floor(fraction * len) without replacement.
    """
    pool = prev.active_slices() if isinstance(prev, WholeBodyBatch) else prev
    count = int(math.floor(config.carryover_fraction * len(pool)))
    return rng.sample(pool, count)


def _active_chain(plan: CyclePlan, rotation: int) -> list[list[SliceSample]]:
    """Active slice lists for rotation steps 0..rotation.

    Step r uses batch r mod num_batches. Step 0 starts with no carryover;
    every later step carries a fraction of the previous step's active
    slices, including across the wrap-around between passes.
    """
    config = plan.config
    chain: list[list[SliceSample]] = []
    for r in range(rotation + 1):
        batch = plan.batches[r % plan.num_batches]
        if r == 0:
            carried: list[SliceSample] = []
        else:
            rng = _child_rng(config.seed, "carryover", r)
            carried = carryover(chain[r - 1], config, rng)
        seen = set(batch.native_slices)
        chain.append(batch.native_slices + [s for s in carried if s not in seen])
    return chain


def _fill_first_cycle_carryover(plan: CyclePlan) -> None:
    chain = _active_chain(plan, plan.num_batches - 1)
    for r in range(1, plan.num_batches):
        rng = _child_rng(plan.config.seed, "carryover", r)
        plan.batches[r].carried_in = carryover(chain[r - 1], plan.config, rng)


def interleave_even(lesion: list, wholebody: list) -> list:
    """Merge two ordered lists, spacing the second at proportional intervals.

    Position j of the merged list takes the next whole-body item iff
    floor((j+1)*m/(n+m)) > floor(j*m/(n+m)); both input orders survive.
    """
    n, m = len(lesion), len(wholebody)
    total = n + m
    merged = []
    li = wi = 0
    for j in range(total):
        if (j + 1) * m // total > j * m // total:
            merged.append(wholebody[wi])
            wi += 1
        else:
            merged.append(lesion[li])
            li += 1
    return merged


def epoch_training_list(plan: CyclePlan, epoch_index: int,
                        config: SchedulerConfig | None = None) -> EpochPlan:
    """Ordered slice list for one epoch.

    The active whole-body batch is ``(epoch_index // beta) mod num_batches``
    with its carryover resolved; lesion base and active slices are each
    reshuffled with an epoch-derived seed, then merged proportionally.
    """
    if epoch_index < 0:
        raise SamplerError(f"epoch_index must be >= 0, got {epoch_index}")
    config = config or plan.config

    rotation = epoch_index // config.beta
    active = _active_chain(plan, rotation)[rotation]
    batch = plan.batches[rotation % plan.num_batches]
    native = set(batch.native_slices)

    rng = _child_rng(config.seed, "epoch", epoch_index)
    lesion = list(plan.lesion_base)
    rng.shuffle(lesion)
    active = list(active)
    rng.shuffle(active)

    merged = interleave_even(lesion, active)
    origins = [
        ORIGIN_LESION if s.has_lesion
        else (ORIGIN_WHOLEBODY if s in native else ORIGIN_CARRIED)
        for s in merged
    ]
    return EpochPlan(epoch_index, merged, origins)
