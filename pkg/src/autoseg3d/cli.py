"""Command-line entry point.

Subcommands: synth | preprocess | train | infer | eval | ablate | params.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Set AUTOSEG3D_OUTPUT_ROOT to relocate relative output directories.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import yaml

from .archive import CheckpointArchive
from .config import RunConfig, _from_dict, dump_run_config, load_run_config
from .decoder import predict_labels
from .errors import ConfigError, DataError, NumericError
from .inference import evaluate, sliding_window_infer
from .metrics import format_metric_table, write_metric_records
from .model import (
    build_model,
    check_ablation_flags,
    count_params,
    load_model_checkpoint_with_arrays,
    params_report,
)
from .phantoms import DatasetSpec, generate_surrogate_2d_checkpoint, synthesize_dataset
from .preprocessing import load_split, preprocess
from .training import fit, set_deterministic
from .volumes import (
    ManifestEntry,
    load_labelmap,
    load_volume,
    read_manifest,
    save_labelmap,
    save_volume,
    write_manifest,
)


def _load_dataset_spec(path) -> DatasetSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such spec file")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return _from_dict(DatasetSpec, raw, "")


def _prepare_run(args) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config)
    if getattr(args, "no_apg", False):
        cfg.decoder.apg_enabled = False
    if getattr(args, "no_mlam", False):
        cfg.decoder.mlam_enabled = False
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out / "config.effective.yaml")
    return cfg, out


def _build_from_config(cfg: RunConfig):
    if cfg.deterministic:
        set_deterministic(cfg.seed)
    if cfg.checkpoint_2d:
        archive = CheckpointArchive.load(cfg.checkpoint_2d)
    else:
        archive = generate_surrogate_2d_checkpoint(cfg.encoder, cfg.seed)
    return build_model(cfg.encoder, cfg.apg, cfg.decoder, archive=archive)


def _split_cases(cfg: RunConfig, split: str, with_labels=True):
    pp = None if cfg.data.already_preprocessed else cfg.data.resolve_preprocess()
    cases = load_split(cfg.data.manifest, split, pp, cfg.decoder.num_classes)
    if not cases:
        raise DataError(f"manifest {cfg.data.manifest} has no cases in split {split!r}")
    if with_labels and any(lab is None for _, _, lab in cases):
        missing = [cid for cid, _, lab in cases if lab is None]
        raise DataError(f"split {split!r} cases without labels: {missing}")
    return cases


def cmd_synth(args) -> int:
    spec = _load_dataset_spec(args.spec)
    manifest = synthesize_dataset(spec, args.out)
    print(f"wrote {spec.cases} cases under {args.out} (manifest: {manifest})")
    return 0


def cmd_preprocess(args) -> int:
    cfg, out = _prepare_run(args)
    pp = cfg.data.resolve_preprocess()
    target = out / "preprocessed"
    (target / "images").mkdir(parents=True, exist_ok=True)
    (target / "labels").mkdir(parents=True, exist_ok=True)
    base = Path(cfg.data.manifest).parent
    entries = []
    for entry in read_manifest(cfg.data.manifest):
        vol, bundled = load_volume(base / entry.image)
        labels = bundled
        if labels is None and entry.label:
            labels = load_labelmap(base / entry.label, num_classes=cfg.decoder.num_classes)
        vol, labels = preprocess(vol, labels, pp)
        stem = Path(entry.image).name.split(".")[0]
        image_rel = f"images/{stem}.rawvol"
        save_volume(target / image_rel, vol)
        label_rel = ""
        if labels is not None:
            label_rel = f"labels/{stem}.rawvol"
            save_labelmap(target / label_rel, labels)
        entries.append(ManifestEntry(image_rel, label_rel, entry.split))
    write_manifest(target / "manifest.csv", entries)
    print(f"preprocessed {len(entries)} cases -> {target}")
    return 0


def cmd_train(args) -> int:
    cfg, out = _prepare_run(args)
    start_epoch = 0
    optimizer_state = None
    if args.resume:
        model, meta, arc = load_model_checkpoint_with_arrays(args.resume)
        check_ablation_flags(meta, cfg.decoder)
        start_epoch = int(meta.get("next_epoch", 0))
        optimizer_state = arc.arrays
        if cfg.deterministic:
            set_deterministic(cfg.seed)
    else:
        model = _build_from_config(cfg)
    report = params_report(model)
    print(report)
    (out / "params_report.txt").write_text(report + "\n")

    train_cases = [(v, l) for _, v, l in _split_cases(cfg, "train")]
    try:
        val_cases = [(v, l) for _, v, l in _split_cases(cfg, "val")]
    except DataError:
        val_cases = []
    result = fit(
        model, train_cases, val_cases, cfg.optim, cfg.loss, cfg.patches,
        out, seed=cfg.seed, deterministic=cfg.deterministic,
        augment_cfg=cfg.augment if cfg.augment_enabled else None,
        sw_cfg=cfg.infer, start_epoch=start_epoch, optimizer_state=optimizer_state,
        stop_after_epoch=args.stop_after_epoch,
    )
    if result.val_scores:
        print(f"best validation dice: {max(result.val_scores):.4f}")
    print(f"final checkpoint: {result.final_path}")
    print(f"best checkpoint:  {result.best_path}")
    return 0


def _load_checkpoint_for(cfg: RunConfig, path):
    ckpt = Path(path)
    if not ckpt.exists():
        raise DataError(f"{ckpt}: no such checkpoint")
    model, meta, _ = load_model_checkpoint_with_arrays(ckpt)
    check_ablation_flags(meta, cfg.decoder)
    return model, meta


def cmd_infer(args) -> int:
    cfg, out = _prepare_run(args)
    model, _ = _load_checkpoint_for(cfg, args.checkpoint)
    cases = _split_cases(cfg, args.split, with_labels=False)
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for case_id, vol, _ in cases:
        logits = sliding_window_infer(
            vol, model, cfg.infer, num_out_channels=cfg.decoder.num_classes + 1
        )
        pred = predict_labels(logits, cfg.decoder.num_classes, vol.spacing_mm)
        save_labelmap(pred_dir / f"{case_id}.nii.gz", pred)
    print(f"wrote {len(cases)} predictions -> {pred_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg, out = _prepare_run(args)
    model, _ = _load_checkpoint_for(cfg, args.checkpoint)
    cases = _split_cases(cfg, args.split)
    reports, aggregate = evaluate(
        cases, model, cfg.eval.tolerance_mm, cfg.infer, cfg.decoder.num_classes
    )
    write_metric_records(out / f"metrics_{args.split}.jsonl", reports, aggregate)
    table = format_metric_table(reports, aggregate)
    (out / f"metrics_{args.split}.txt").write_text(table + "\n")
    print(table)
    return 0


_ABLATION_ROWS = ((True, True), (False, True), (True, False), (False, False))


def cmd_ablate(args) -> int:
    cfg, out = _prepare_run(args)
    lines = [f"{'apg':>5} {'mlam':>5} {'tunable':>10} {'frozen':>10}"]
    counts = {}
    for apg_on, mlam_on in _ABLATION_ROWS:
        row_cfg = load_run_config(args.config)
        row_cfg.decoder.apg_enabled = apg_on
        row_cfg.decoder.mlam_enabled = mlam_on
        model = _build_from_config(row_cfg)
        tunable, frozen = count_params(model)
        counts[(apg_on, mlam_on)] = tunable
        lines.append(f"{str(apg_on):>5} {str(mlam_on):>5} {tunable:>10} {frozen:>10}")
        if args.train:
            row_out = out / f"apg_{int(apg_on)}_mlam_{int(mlam_on)}"
            train_cases = [(v, l) for _, v, l in _split_cases(row_cfg, "train")]
            try:
                val_cases = [(v, l) for _, v, l in _split_cases(row_cfg, "val")]
            except DataError:
                val_cases = []
            fit(model, train_cases, val_cases, row_cfg.optim, row_cfg.loss,
                row_cfg.patches, row_out, seed=row_cfg.seed,
                deterministic=row_cfg.deterministic, sw_cfg=row_cfg.infer)
    table = "\n".join(lines)
    print(table)
    (out / "ablation_params.txt").write_text(table + "\n")
    ok = (counts[(True, True)] > counts[(False, True)] > counts[(False, False)]
          and counts[(True, True)] > counts[(True, False)] > counts[(False, False)])
    print(f"tunable-count ordering (on,on > single-off > off,off): {'ok' if ok else 'VIOLATED'}")
    return 0 if ok else 4


def cmd_params(args) -> int:
    cfg, out = _prepare_run(args)
    model = _build_from_config(cfg)
    report = params_report(model)
    print(report)
    (out / "params_report.txt").write_text(report + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autoseg3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("spec", help="dataset spec YAML")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    for name, func, extra in (
        ("preprocess", cmd_preprocess, ()),
        ("train", cmd_train, ("--no-apg", "--no-mlam")),
        ("params", cmd_params, ("--no-apg", "--no-mlam")),
        ("ablate", cmd_ablate, ()),
    ):
        p = sub.add_parser(name)
        p.add_argument("config", help="run config YAML")
        p.add_argument("--seed", type=int, default=None)
        for flag in extra:
            p.add_argument(flag, action="store_true")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
            p.add_argument("--stop-after-epoch", type=int, default=None)
        if name == "ablate":
            p.add_argument("--train", action="store_true",
                           help="also train each ablation row")
        p.set_defaults(func=func)

    for name, func in (("infer", cmd_infer), ("eval", cmd_eval)):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="test" if name == "infer" else "val")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--no-apg", action="store_true")
        p.add_argument("--no-mlam", action="store_true")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
