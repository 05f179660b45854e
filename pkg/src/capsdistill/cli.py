"""capsdistill command line: synth, features, train, sweep, eval.

Exit codes: 0 ok, 2 bad or missing input, 3 outputs exist (use --force),
4 configuration or shape mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .capsnet import CapsNet
from .config import FeatureSection, RunConfig, config_from_dict, load_config
from .data import INDEX_NAME, Dataset, SynthSpec, dataset_from_synthetic, featurize, generate_synthetic, load_dataset
from .errors import ConfigError, InputError
from .fileformats import FeatureFile, read_csv, read_raw, write_ftz, write_raw
from .tensorcore import CheckpointError, ShapeError
from .training import (PHASES, evaluate, run_phase, summarize, sweep_data_fraction, sweep_model_size,
                       write_manifest, write_metrics_csv, write_steps_csv)
from .training.loop import arch_for

log = logging.getLogger("capsdistill")

EXIT_OK, EXIT_INPUT, EXIT_EXISTS, EXIT_CONFIG = 0, 2, 3, 4
LABELS_NAME = "labels.json"
MANIFEST_NAME = "manifest.json"


class OutputExistsError(RuntimeError):
    pass


def _guard(out: Path, marker: str, force: bool) -> None:
    if (out / marker).exists() and not force:
        raise OutputExistsError(f"{out / marker} exists; re-run with --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.output_path()


# ------------------------------------------------------------------ synth

def cmd_synth(args) -> int:
    cfg = _config(args)
    spec = cfg.data.synth or SynthSpec()
    flags = {"n_subjects": args.subjects, "n_sessions": args.sessions, "segments_per_session": args.segments,
             "n_channels": args.channels, "task": args.task, "seed": args.seed, "noise": args.noise}
    flags = {k: v for k, v in flags.items() if v is not None}
    if "task" in flags and "n_channels" not in flags and cfg.data.synth is None:
        flags["n_channels"] = None  # let the task pick its default channel count
    spec = SynthSpec(**{**spec.__dict__, **flags})
    out = _out_dir(args, cfg)
    _guard(out, LABELS_NAME, args.force)
    recs = generate_synthetic(spec)
    entries = {}
    for r in recs:
        name = f"s{r.subject:03d}_r{r.session:03d}.raw"
        write_raw(out / name, r.recording)
        entries[name] = {"subject": r.subject, "session": r.session, "labels": r.labels.tolist()}
    sidecar = {"task": spec.task, "n_classes": spec.n_classes if spec.task == "classification" else 0,
               "segment_seconds": spec.segment_seconds, "sample_rate": spec.sample_rate, "recordings": entries}
    (out / LABELS_NAME).write_text(json.dumps(sidecar, indent=1) + "\n")
    print(f"wrote {len(recs)} recordings ({spec.n_subjects} subjects x {spec.n_sessions} sessions, "
          f"{spec.n_channels} channels) to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ features

def _read_recording(path: Path, sample_rate: float | None):
    if path.suffix == ".raw":
        return read_raw(path)
    if sample_rate is None:
        raise InputError(f"{path}: CSV input needs a sample rate (--sample-rate or labels.json)")
    return read_csv(path, sample_rate)[0]


def cmd_features(args) -> int:
    cfg = _config(args)
    src = Path(args.input)
    if not src.is_dir():
        raise InputError(f"{src}: input directory not found")
    files = sorted(p for p in src.iterdir() if p.suffix in (".raw", ".csv"))
    if not files:
        raise InputError(f"{src}: no recordings found")
    sidecar_path = src / LABELS_NAME
    if not sidecar_path.exists():
        raise InputError(f"{src}: missing {LABELS_NAME} sidecar with labels and provenance")
    sidecar = json.loads(sidecar_path.read_text())
    task = sidecar.get("task", "classification")
    fspec = cfg.features.to_spec(task)
    if args.segment_seconds is not None:
        fspec = replace(fspec, segment_seconds=args.segment_seconds)
    if args.bands is not None:
        fspec = replace(fspec, bands=FeatureSection(bands=args.bands).to_spec(task).bands)
    out = _out_dir(args, cfg)
    _guard(out, INDEX_NAME, args.force)
    kind = "class" if task == "classification" else "scalar"
    rate = args.sample_rate or sidecar.get("sample_rate")
    entries, n_seg, shape = [], 0, None
    for path in files:
        meta = sidecar.get("recordings", {}).get(path.name)
        if meta is None:
            raise InputError(f"{path.name}: not listed in {LABELS_NAME}")
        rec = _read_recording(path, rate)
        x = featurize(rec, fspec)
        labels = np.asarray(meta["labels"])
        if len(labels) != len(x):
            raise InputError(f"{path.name}: {len(x)} segments but {len(labels)} labels")
        name = path.with_suffix(".ftz").name
        write_ftz(out / name, FeatureFile(x, labels, kind))
        entries.append({"file": name, "subject": meta["subject"], "session": meta["session"]})
        n_seg += len(x)
        shape = x.shape[1:]
    index = {"task": task, "n_classes": sidecar.get("n_classes", 0), "files": entries,
             "features": {"bands": [list(b) for b in fspec.bands], "segment_seconds": fspec.segment_seconds}}
    (out / INDEX_NAME).write_text(json.dumps(index, indent=1) + "\n")
    print(f"F = {shape[1]} features, L = {shape[0]} windows, {n_seg} segments from {len(files)} recordings "
          f"({len(fspec.bands)} bands)")
    return EXIT_OK


# ------------------------------------------------------------------ dataset + teachers

def _dataset(cfg: RunConfig, data_arg: str | None) -> tuple[Dataset, str]:
    path = data_arg or cfg.data.path
    if path:
        return load_dataset(path), str(Path(path).resolve())
    if cfg.data.synth is not None:
        spec = cfg.data.synth
        fspec = cfg.features.to_spec(spec.task)
        n_classes = spec.n_classes if spec.task == "classification" else 0
        return dataset_from_synthetic(generate_synthetic(spec), fspec, spec.task, n_classes), "synth"
    raise InputError("no dataset: pass --data or set data.path / data.synth in the config")


def _teacher_loader(template: str, expect_arch: dict, ds: Dataset):
    expect = arch_for(expect_arch, ds)
    cache: dict[str, CapsNet] = {}

    def load(split):
        path = template.format(subject=split.subject, split=split.name)
        if path not in cache:
            if not Path(path).exists():
                raise InputError(f"teacher checkpoint {path} not found")
            cache[path] = CapsNet.load(path, expect=expect)
        return cache[path]
    return load


def _summaries(result) -> dict:
    """Mean/SD across splits and across per-subject means (they differ under k-fold)."""
    by_split = summarize(result.reports)
    subjects = sorted({r.split.subject for r in result.results})
    per_subject = {}
    for s in subjects:
        rs = [r.report for r in result.results if r.split.subject == s]
        per_subject[s] = {k: m for k, (m, _) in summarize(rs).items()}
    by_subject = {}
    for key in by_split:
        vals = np.array([per_subject[s][key] for s in subjects])
        by_subject[key] = (float(vals.mean()), float(vals.std()))
    return {"across_splits": by_split, "across_subjects": by_subject,
            "per_split": {r.split.name: r.report.as_dict() for r in result.results}}


# ------------------------------------------------------------------ train

def cmd_train(args) -> int:
    teacher = args.teacher
    data_arg = args.data
    if args.manifest:
        man = json.loads(Path(args.manifest).read_text())
        cfg = config_from_dict(man["config"])
        phase = args.phase or man["phase"]
        teacher = teacher or man.get("teacher")
        if data_arg is None and man.get("data") not in (None, "synth"):
            data_arg = man["data"]
    else:
        cfg = _config(args)
        phase = args.phase or cfg.plan.phase
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}; expected one of {PHASES}")
    overrides = {"epochs": args.epochs, "batch_size": args.batch, "seed": args.seed,
                 "data_fraction": args.fraction, "grad_clip": args.grad_clip,
                 "subjects": tuple(args.subjects) if args.subjects else None}
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg.plan, k, v)
    cfg.plan.phase = phase
    out = _out_dir(args, cfg)
    _guard(out, MANIFEST_NAME, args.force)
    ds, data_ref = _dataset(cfg, data_arg)
    plan = cfg.to_plan(ds.task)
    source = None
    if phase in ("finetune", "distill"):
        if not teacher:
            raise ConfigError(f"{phase} phase needs --teacher (checkpoint path; may contain {{subject}} or {{split}})")
        source = _teacher_loader(teacher, plan.teacher, ds)
    elif teacher:
        log.warning("--teacher ignored for phase %s", phase)
        teacher = None
    result = run_phase(plan, ds, teacher=source, jobs=args.jobs, log_steps=True)
    ckpts = []
    for r in result.results:
        path = out / f"{phase}-{r.split.name}.ckpt"
        r.model.save(path, {"phase": phase, "split": r.split.name, "subject": r.split.subject,
                            "seed": plan.seed + r.split.fold})
        ckpts.append(path)
    write_metrics_csv(out / "metrics.csv", result)
    write_steps_csv(out / "steps.csv", result)
    summary = _summaries(result)
    cfg.output_dir = str(out)
    write_manifest(out / MANIFEST_NAME, cfg.to_dict(), plan.seed, ckpts, summary,
                   {"phase": phase, "teacher": teacher, "data": data_ref})
    for key, (mean, sd) in summary["across_splits"].items():
        print(f"{phase}: {key} {mean:.4f} +/- {sd:.4f} over {len(result.results)} split(s)")
    return EXIT_OK


# ------------------------------------------------------------------ sweep

def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.plan.seed = args.seed
    if args.epochs is not None:
        cfg.plan.epochs = args.epochs
    if args.subjects:
        cfg.plan.subjects = tuple(args.subjects)
    out = _out_dir(args, cfg)
    csv_name = f"sweep_{args.kind}.csv"
    _guard(out, csv_name, args.force)
    ds, data_ref = _dataset(cfg, args.data)
    plan = cfg.to_plan(ds.task, phase="distill")
    if not args.teacher:
        raise ConfigError("sweep needs --teacher with pre-trained checkpoints (use {subject} for LOSO teachers)")
    pretrained = _teacher_loader(args.teacher, plan.teacher, ds)
    if args.kind == "size":
        table = sweep_model_size(plan, ds, pretrained, cfg.sweep.ladder, args.jobs,
                                 teacher_epochs=cfg.sweep.teacher_epochs)
    else:
        table = sweep_data_fraction(plan, ds, pretrained, cfg.sweep.fractions, args.jobs,
                                    teacher_epochs=cfg.sweep.teacher_epochs)
    table.write_csv(out / csv_name)
    cfg.output_dir = str(out)
    write_manifest(out / f"sweep_{args.kind}_manifest.json", cfg.to_dict(), plan.seed,
                   extra={"kind": args.kind, "teacher": args.teacher, "data": data_ref})
    metric = "accuracy" if ds.task == "classification" else "rmse"
    print(f"{'rung' if args.kind == 'size' else 'fraction':>8} {'distill':>9} {'scratch':>9}")
    for key, arms in table.pivot(metric).items():
        print(f"{key:>8} {arms['distill']:9.4f} {arms['scratch']:9.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    if args.subjects:
        ds = ds.subset(np.flatnonzero(np.isin(ds.subjects, args.subjects)))
    if args.sessions:
        ds = ds.subset(np.flatnonzero(np.isin(ds.sessions, args.sessions)))
    if len(ds) == 0:
        raise InputError("no segments left after subject/session filtering")
    model = CapsNet.load(args.checkpoint)
    if (model.spec.windows, model.spec.n_features) != ds.features.shape[1:]:
        raise ConfigError(f"checkpoint expects (L, F) = {(model.spec.windows, model.spec.n_features)}, "
                          f"data has {ds.features.shape[1:]}")
    report = evaluate(model, ds)
    print(json.dumps({"n": report.n, **report.as_dict()}))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="capsdistill", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="YAML/JSON run config")
        if out:
            p.add_argument("--out", help="output directory (default: config output_dir)")
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("synth", help="write a synthetic raw-EEG dataset with a labels.json sidecar")
    common(p)
    p.add_argument("--subjects", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--segments", type=int, help="segments per session")
    p.add_argument("--channels", type=int)
    p.add_argument("--task", choices=("classification", "regression"))
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract PSD/DE feature files from raw recordings")
    common(p)
    p.add_argument("input", help="directory of .raw/.csv recordings plus labels.json")
    p.add_argument("--sample-rate", type=float, help="sample rate for CSV input")
    p.add_argument("--segment-seconds", type=int)
    p.add_argument("--bands", help="named band set: seed or seed-vig")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="run one phase: pretrain, finetune, distill or scratch")
    common(p)
    p.add_argument("--phase", choices=PHASES)
    p.add_argument("--data", help="feature dataset directory (from `features`)")
    p.add_argument("--teacher", help="teacher checkpoint; may contain {subject} or {split}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fraction", type=float, help="training data fraction in (0, 1]")
    p.add_argument("--grad-clip", type=float, help="global gradient-norm clip (off by default)")
    p.add_argument("--subjects", type=int, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--manifest", help="re-run from a previous run's manifest.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="model-size or data-fraction sweep, distill vs scratch")
    common(p)
    p.add_argument("--kind", choices=("size", "fraction"), required=True)
    p.add_argument("--data")
    p.add_argument("--teacher", help="pre-trained teacher checkpoints, e.g. run/pretrain-loso-s{subject}.ckpt")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--subjects", type=int, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a feature dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subjects", type=int, nargs="+")
    p.add_argument("--sessions", type=int, nargs="+")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OutputExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
