"""Command-line entry point: ``onsetlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash, dump_json, stamp

log = logging.getLogger("onsetlab")


# ---------------------------------------------------------------- helpers


def _set_threads(n):
    import torch

    if n:
        torch.set_num_threads(n)


def _load_data(preprocessed, splits_path):
    """(splits, hemisphere samples, preprocessed manifest) for a preprocessed cohort."""
    from .dataset import build_samples, load_splits
    from .preprocess import load_preprocessed_cohort

    manifest, cases = load_preprocessed_cohort(preprocessed)
    splits = load_splits(splits_path)
    missing = {e["case_id"] for e in manifest["cases"]} ^ set(splits["assignment"])
    if missing:
        raise ValueError(f"splits and preprocessed cohort disagree on {len(missing)} case ids, e.g. {sorted(missing)[:3]}")
    return splits, build_samples(cases), manifest


def _data_args(args):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        return cfg.preprocessed, cfg.splits.path
    if not (args.preprocessed and args.splits):
        raise ValueError("pass --config, or both --preprocessed and --splits")
    return args.preprocessed, args.splits


def _model_from_checkpoint(path):
    from .models import ModelConfig, build_model
    from .schedule import load_checkpoint

    ck = load_checkpoint(path)
    if not ck.model:
        raise ValueError(f"{path} carries no model config")
    model = build_model(ModelConfig.from_dict(ck.model))
    model.load_state_dict(ck.state)
    model.eval()
    return ck, model


def _phase_list(cfg: ExperimentConfig):
    from .schedule import PhaseConfig

    return [p if isinstance(p, PhaseConfig) else PhaseConfig.from_dict(p) for p in cfg.phases]


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    from .synthgen import CohortSpec, generate_cohort, make_atlas
    from .volume_io import write_volume

    base = json.loads(Path(args.spec).read_text()) if args.spec else {}
    base.update({"n_cases": args.n, "seed": args.seed})
    if args.tss_fixed is not None:
        base.update({"tss_kind": "fixed", "tss_value": args.tss_fixed})
    spec = CohortSpec.from_dict(base)
    manifest = generate_cohort(spec, args.out, workers=args.threads or 1)
    write_volume(make_atlas(spec), Path(args.out) / "atlas.nii.gz")
    dump_json({**stamp(config_hash(spec), spec.seed), "spec": spec.to_dict()}, Path(args.out) / "synth.json")
    log.info("wrote %d cases and atlas.nii.gz to %s", len(manifest["cases"]), args.out)


def cmd_split(args):
    from .dataset import make_splits
    from .synthgen import load_manifest

    manifest = load_manifest(args.cohort)
    ratios = tuple(args.ratios)
    out = Path(args.out)
    splits = make_splits(manifest, ratios, args.seed, out, force=args.force)
    log.info("splits %s written to %s", splits["sizes"], out)


def cmd_preprocess(args):
    from .dataset import load_splits
    from .preprocess import preprocess_cohort

    splits = load_splits(args.splits) if args.splits else None
    res = preprocess_cohort(args.cohort, args.atlas, args.out, splits, workers=args.threads or 1)
    log.info("preprocessed %d cases (%d failed) into %s", res["n_ok"], res["n_failed"], args.out)
    for f in res["failures"]:
        log.warning("failed %s", f)


def cmd_pretext(args):
    from .models import FULL_WIDTHS_3D, ModelConfig
    from .schedule import Checkpoint, save_checkpoint
    from .ssl_pretext import CorruptionConfig, PretextConfig, train_restoration

    splits, samples, _ = _load_data(*_data_args(args))
    train = set(k for k, v in splits["assignment"].items() if v == "train")
    pool = sorted((s for s in samples if s.case_id in train), key=lambda s: s.key)
    vols = np.stack([s.stack for s in pool])
    masks = vols.any(axis=1)
    model_cfg = ModelConfig.desk("3d") if args.desk else ModelConfig(kind="3d", widths=FULL_WIDTHS_3D, slice_shape=None)
    cfg = PretextConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, corruption=CorruptionConfig())
    full, encoder, hist = train_restoration(vols, masks, model_cfg, cfg, ids=[s.key for s in pool])
    h = config_hash({"pretext": cfg, "model": model_cfg.to_dict()})
    out = Path(args.out)
    save_checkpoint(Checkpoint(encoder, model_cfg.to_dict(), "pretext", args.seed, h), out)
    dump_json({**stamp(h, args.seed), **hist}, out / "pretext.json")
    log.info("pretext best epoch %d; encoder checkpoint in %s", hist["best_epoch"], out)


def cmd_train(args):
    from .schedule import PHASE_ALIASES, PhaseConfig, load_checkpoint, run_phase

    cfg = ExperimentConfig.load(args.config)
    cfg.validate()
    phase = PHASE_ALIASES.get(args.phase, args.phase)
    matches = [p for p in _phase_list(cfg) if p.phase == phase]
    pc = matches[0] if matches else PhaseConfig(phase)
    if args.seed is not None:
        pc.seed = args.seed
    if args.epochs is not None:
        pc.epochs = args.epochs
    parent = None
    if pc.init == "checkpoint":
        src = args.init_checkpoint or pc.init_path
        if not src:
            raise ValueError(f"{phase} starts from a checkpoint; pass --init-checkpoint")
        parent = load_checkpoint(src)
    splits, samples, _ = _load_data(cfg.preprocessed, cfg.splits.path)
    out = Path(cfg.out) / cfg.name
    _, rep, info = run_phase(pc, splits, samples, cfg.model, out, parent, parent.freeze_prefixes if parent else None)
    log.info("%s test AUC %.4f (best epoch %d) -> %s", pc.tag, rep.roc_auc, info["best_epoch"], out / pc.tag)


def cmd_run_schema(args):
    from .schedule import run_schema

    cfg = ExperimentConfig.load(args.config)
    cfg.validate()
    splits, samples, _ = _load_data(cfg.preprocessed, cfg.splits.path)
    out = Path(cfg.out) / cfg.name
    res = run_schema(_phase_list(cfg), splits, samples, cfg.model, out)
    dump_json({**stamp(cfg.hash(), [p.seed for p in _phase_list(cfg)]), "config": cfg.to_dict()}, out / "experiment.json")
    for r in res["rows"]:
        log.info("%s %s AUC %.4f", r["phase"], r["task"], r["roc_auc"])


def _case_scores(model, samples, label_key):
    """Scores per hemisphere; TSS tasks keep only lesion halves, so one per case."""
    from .dataset import as_arrays
    from .schedule import predict

    if label_key != "has_lesion":
        samples = [s for s in samples if s.labels["has_lesion"] == 1]
    x, y = as_arrays(samples, label_key)
    p = predict(model, x)
    return samples, p, y


def cmd_evaluate(args):
    from .metrics import ReaderTable, evaluate_scores, reader_comparison, simulate_readers

    ck, model = _model_from_checkpoint(args.checkpoint)
    splits, samples, _ = _load_data(*_data_args(args))
    members = set(k for k, v in splits["assignment"].items() if v == args.split)
    pool = sorted((s for s in samples if s.case_id in members), key=lambda s: s.key)
    label_key = args.task or ck.label_key or "has_lesion"
    pool, scores, y = _case_scores(model, pool, label_key)
    out = Path(args.out)
    readers_path = args.readers
    if args.simulate_readers:
        if label_key == "has_lesion":
            raise ValueError("simulated readers rate TSS tasks, not detection")
        table = simulate_readers(y.astype(int), rho=args.reader_rho, seed=args.seed, case_ids=[s.case_id for s in pool])
        readers_path = out / "readers.csv"
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(readers_path)
    if readers_path:
        if label_key == "has_lesion":
            raise ValueError("reader comparison needs a TSS task")
        labels = {s.case_id: int(s.labels[label_key]) for s in pool}
        table = ReaderTable.from_csv(readers_path, labels)
        preds = {s.case_id: float(p) for s, p in zip(pool, scores)}
        rep = reader_comparison(preds, table, labels, task=label_key)
    else:
        rep = evaluate_scores(label_key, scores, y, [s.key for s in pool])
    body = {**stamp(ck.config_hash, ck.seed), "phase": ck.phase, "split": args.split, "metrics": rep.to_dict()}
    dump_json(body, out / "metrics.json")
    log.info("%s on %s: AUC %.4f sens %.4f spec %.4f", label_key, args.split, rep.roc_auc, rep.sensitivity, rep.specificity)


def cmd_explain(args):
    from .explain import explain_samples, render_overlays, write_overlap_csv
    from .models import GRADCAM_LAYER

    ck, model = _model_from_checkpoint(args.checkpoint)
    _, samples, _ = _load_data(*_data_args(args))
    chosen = [s for s in samples if s.labels["has_lesion"] == 1 and (args.case in ("all", s.case_id))]
    if not chosen:
        raise ValueError(f"no lesion hemisphere for case {args.case!r}")
    layer = args.layer or GRADCAM_LAYER[ck.model.get("kind", "2d")]
    rows = explain_samples(model, chosen, layer, target=1)
    out = Path(args.out)
    for smp, sal, frac, cat, _ in rows:
        render_overlays(smp, sal, out)
        log.info("%s %s overlap %.3f (%s)", smp.key, layer, frac, cat)
    write_overlap_csv(rows, out / "overlap.csv")
    dump_json({**stamp(ck.config_hash, ck.seed), "layer": layer, "cases": sorted({s.case_id for s in chosen})},
              out / "explain.json")


def cmd_report(args):
    from .metrics import plot_roc

    rows, curves = [], {}
    for path in args.metrics:
        body = json.loads(Path(path).read_text())
        m = body.get("metrics", body)
        name = body.get("tag") or body.get("phase") or Path(path).parent.name
        if name in curves:
            name = f"{name} ({Path(path).parent})"
        rows.append({"name": name, "task": m["task"], "sensitivity": m["sensitivity"], "specificity": m["specificity"],
                     "accuracy": m["accuracy"], "roc_auc": m["roc_auc"], "n": m["n"]})
        curves[name] = (m["scores"], m["labels"])
        for r in (m.get("readers") or {}).get("rows", []):
            if r["name"] != "Model":
                rows.append({"name": r["name"], "task": m["task"], "sensitivity": r["sensitivity"],
                             "specificity": r["specificity"], "accuracy": r["accuracy"], "roc_auc": "", "n": m["n"]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["name", "task", "sensitivity", "specificity", "accuracy", "roc_auc", "n"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    plot_roc(curves, out / "roc.png", title=args.title)
    log.info("wrote table.csv and roc.png to %s", out)


# ---------------------------------------------------------------- parser


def _data_flags(p):
    p.add_argument("--config", help="experiment config JSON (supplies data paths)")
    p.add_argument("--preprocessed", help="preprocessed.json")
    p.add_argument("--splits", help="splits.json")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="onsetlab", description="Stroke-onset classification experiments on synthetic MRI.")
    ap.add_argument("--version", action="version", version=f"onsetlab {__version__}")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker processes and torch threads")
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic cohort and its atlas")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON with CohortSpec overrides")
    p.add_argument("--tss-fixed", type=float, default=None, help="give every lesion this time since onset (min)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="frozen stratified train/val/test assignment")
    p.add_argument("--cohort", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.64, 0.16, 0.20))
    p.add_argument("--out", required=True, help="splits.json path")
    p.add_argument("--force", action="store_true", help="overwrite an existing assignment")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("preprocess", help="bias, extraction, registration and intensity pipeline")
    p.add_argument("--cohort", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", help="splits.json; the histogram reference is the first training case")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretext", help="restoration pretraining of a 3D encoder")
    _data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--desk", action="store_true", help="tiny channel widths for CPU runs")
    p.set_defaults(func=cmd_pretext)

    p = sub.add_parser("train", help="train one phase")
    p.add_argument("--phase", required=True, choices=["detect", "tss180", "tss270", "attn", "attn_finetune"])
    p.add_argument("--config", required=True)
    p.add_argument("--init-checkpoint", help="parent checkpoint for init=checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run-schema", help="run every phase of an experiment config in order")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run_schema)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split, optionally against readers")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--task", help="label key (defaults to the checkpoint's)")
    p.add_argument("--readers", help="readers.csv (case_id, reader_id, mismatch)")
    p.add_argument("--simulate-readers", action="store_true", help="simulate three readers and write readers.csv")
    p.add_argument("--reader-rho", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM overlays and lesion overlap")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    p.add_argument("--case", required=True, help="case id, or 'all'")
    p.add_argument("--layer", help="module name (default: the model's penultimate stage)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="comparison table and ROC figure from metrics.json files")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="ROC")
    p.set_defaults(func=cmd_report)
    return ap


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse has printed usage
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    _set_threads(args.threads)
    try:
        args.func(args)
    except Exception as e:
        log.error("%s: %s", type(e).__name__, e)
        print(f"onsetlab {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
