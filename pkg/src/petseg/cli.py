"""Command-line entry point wiring all stages of the pipeline.

Subcommands: synth, index, plan, train, predict, evaluate. Every stage is
reproducible from (inputs, config file, --seed); machine-readable outputs
are CSV or structured text, with figures rendered next to them.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import ingest, metrics, phantom, sampler, trainer
from .model import EncoderConfig, load_checkpoint
from .sampler import PatientSliceView, SchedulerConfig

log = logging.getLogger("petseg")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _merged_section(config: dict, section: str, overrides: dict) -> dict:
    merged = dict(config.get(section, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _scheduler_config(args, config: dict) -> SchedulerConfig:
    merged = _merged_section(config, "scheduler", {
        "alpha": args.alpha,
        "beta": args.beta,
        "carryover_fraction": getattr(args, "carryover", None),
        "seed": args.seed,
    })
    return SchedulerConfig(**merged)


def _encoder_config(args, config: dict) -> EncoderConfig:
    choice = getattr(args, "encoder", None)
    if choice is None and "encoder" in config:
        section = dict(config["encoder"])
        for key in ("stage_depths", "stage_widths"):
            if key in section:
                section[key] = tuple(section[key])
        return EncoderConfig(**section)
    if choice == "base":
        return EncoderConfig()
    return EncoderConfig.toy()


def _train_config(args, config: dict) -> trainer.TrainConfig:
    merged = _merged_section(config, "train", {
        "fold_index": args.fold,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "input_size": args.input_size,
    })
    base = trainer.TrainConfig.toy() if args.toy_defaults else trainer.TrainConfig()
    return trainer.TrainConfig(**{**asdict(base), **merged})


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = phantom.PhantomSpec(
        grid=tuple(args.grid),
        spacing=tuple(args.spacing),
        n_lesions=args.lesions,
        seed=args.seed,
    )
    manifest = phantom.generate_dataset(
        args.patients, spec, seed=args.seed, out_dir=args.out,
        n_negative=args.negatives,
    )
    total = sum(row["n_lesions"] for row in manifest)
    print(f"wrote {len(manifest)} patients ({total} lesions) to {args.out}")
    return 0


def cmd_index(args) -> int:
    records = [ingest.load_patient(p) for p in ingest.list_patient_dirs(args.data)]
    positives = [r for r in records if not r.is_negative]
    skipped = [r.patient_id for r in records if r.is_negative]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "z", "has_lesion"])
        for record in positives:
            for z in range(record.num_slices):
                writer.writerow([record.patient_id, z,
                                 int(z in set(record.lesion_slices))])
    n_lesion = sum(len(r.lesion_slices) for r in positives)
    n_total = sum(r.num_slices for r in positives)
    print(f"indexed {len(positives)} patients: {n_lesion} lesion slices "
          f"of {n_total} total; excluded negatives: {skipped or 'none'}")
    return 0


def read_slice_index(path: Path | str) -> list[PatientSliceView]:
    by_patient: dict[str, dict[bool, list[int]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            entry = by_patient.setdefault(row["patient_id"], {True: [], False: []})
            entry[row["has_lesion"] == "1"].append(int(row["z"]))
    return [
        PatientSliceView(pid, tuple(sorted(zs[True])), tuple(sorted(zs[False])))
        for pid, zs in sorted(by_patient.items())
    ]


def _plan_patients(args) -> list[PatientSliceView]:
    if args.index:
        return read_slice_index(args.index)
    records = [ingest.load_patient(p) for p in ingest.list_patient_dirs(args.data)]
    return [
        PatientSliceView(r.patient_id, r.lesion_slices, r.nonlesion_slices)
        for r in records if not r.is_negative
    ]


def format_plan_dump(plan: sampler.CyclePlan, epochs: list[int],
                     config: SchedulerConfig) -> str:
    lines = [
        "# whole-body cycle plan",
        f"alpha: {config.alpha!r}",
        f"beta: {config.beta}",
        f"carryover_fraction: {config.carryover_fraction!r}",
        f"seed: {config.seed}",
        f"lesion_base: {len(plan.lesion_base)}",
        f"target_wb_count: {plan.target_wb_count}",
        f"degenerate: {int(plan.degenerate)}",
        f"num_batches: {plan.num_batches}",
    ]
    for batch in plan.batches:
        lines.append(
            "batch {}: patients={} native={} carried_in={}".format(
                batch.batch_index, ",".join(batch.patient_ids),
                len(batch.native_slices), len(batch.carried_in),
            )
        )
    for epoch in epochs:
        eplan = sampler.epoch_training_list(plan, epoch, config)
        lines.append(f"# epoch {epoch} ({len(eplan.samples)} slices)")
        for sample, origin in zip(eplan.samples, eplan.origins):
            lines.append(f"{sample.patient_id} {sample.z} {origin}")
    return "\n".join(lines) + "\n"


def cmd_plan(args) -> int:
    config = _scheduler_config(args, _load_config_file(args.config))
    patients = _plan_patients(args)
    plan = sampler.build_cycle_plan(patients, config)
    dump = format_plan_dump(plan, args.epoch or [0], config)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(dump)
        print(f"plan written to {args.out} "
              f"({plan.num_batches} batches, target {plan.target_wb_count})")
    else:
        sys.stdout.write(dump)
    return 0


def cmd_train(args) -> int:
    from . import reporting  # matplotlib import deferred to the paths that draw

    config_file = _load_config_file(args.config)
    train_cfg = _train_config(args, config_file)
    sched_cfg = _scheduler_config(args, config_file)
    enc_cfg = _encoder_config(args, config_file)

    records = [ingest.load_patient(p) for p in ingest.list_patient_dirs(args.data)]
    out_dir = Path(args.out)
    payload, history = trainer.train(records, train_cfg, sched_cfg, enc_cfg,
                                     out_dir=out_dir, device=args.device)
    reporting.save_history_figure(history, out_dir / "history.png")
    best = history.best_epoch()
    print(f"trained {train_cfg.epochs} epochs; best val_dice {best.val_dice:.4f} "
          f"at epoch {best.epoch}; outputs in {out_dir}")
    return 0


def cmd_predict(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    input_size = args.input_size or payload["extra"].get("input_size", 256)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for pdir in ingest.list_patient_dirs(args.data):
        record = ingest.load_patient(pdir)
        pred = metrics.predict_volume(model, record, input_size=input_size,
                                      threshold=args.threshold)
        volume = ingest.Volume3D(pred, record.label.spacing, "LABEL")
        ingest.write_volume(out_dir / f"{record.patient_id}.vol", volume)
        count += 1
    print(f"predicted {count} patients to {out_dir} (input size {input_size})")
    return 0


def cmd_evaluate(args) -> int:
    from . import reporting

    pred_dir = Path(args.pred)
    report = metrics.EvalReport()
    for pdir in ingest.list_patient_dirs(args.data):
        record = ingest.load_patient(pdir)
        pred_path = pred_dir / f"{record.patient_id}.vol"
        if not pred_path.exists():
            raise FileNotFoundError(f"no prediction for {record.patient_id} "
                                    f"at {pred_path}")
        pred = ingest.read_volume(pred_path)
        if pred.shape != record.label.shape:
            raise ValueError(f"{record.patient_id}: prediction shape {pred.shape} "
                             f"!= label shape {record.label.shape}")
        report.add(metrics.evaluate_prediction(
            record.patient_id, pred.data, record.label.data, record.label.spacing))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_eval_csv(report, out_dir / "eval.csv")
    reporting.write_eval_summary(report, out_dir / "summary.txt")
    reporting.save_eval_figure(report, out_dir / "eval.png")
    print(f"evaluated {len(report.rows)} patients: mean dice {report.mean_dice:.4f}, "
          f"mean FPV {report.mean_fpv_ml:.4f} mL, mean FNV {report.mean_fnv_ml:.4f} mL")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petseg",
        description="Whole-body PET/CT lesion segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=20)
    p.add_argument("--negatives", type=int, default=0)
    p.add_argument("--lesions", type=int, default=2)
    p.add_argument("--grid", type=int, nargs=3, default=[96, 64, 64],
                   metavar=("Z", "Y", "X"))
    p.add_argument("--spacing", type=float, nargs=3, default=[4.0, 4.0, 4.0],
                   metavar=("DZ", "DY", "DX"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="write the training slice index")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("plan", help="dump the whole-body schedule for audit")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--index")
    p.add_argument("--config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=int)
    p.add_argument("--carryover", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epoch", type=int, action="append",
                   help="epoch list(s) to dump (repeatable; default 0)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train on a patient directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--fold", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=int)
    p.add_argument("--carryover", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--encoder", choices=["base", "toy"])
    p.add_argument("--device", default="cpu")
    p.add_argument("--full-scale", dest="toy_defaults", action="store_false",
                   help="start from full-scale training defaults instead of toy")
    p.set_defaults(func=cmd_train, toy_defaults=True)

    p = sub.add_parser("predict", help="write predicted label volumes")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input-size", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="volumetric metrics for predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
