"""Restoration pretraining of the 3D encoder, then tss270 from that encoder vs from scratch."""

import argparse
import json
import logging
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from onsetlab.dataset import split_ids
from onsetlab.models import ModelConfig
from onsetlab.schedule import Checkpoint, PhaseConfig, run_phase, save_checkpoint
from onsetlab.ssl_pretext import PretextConfig, train_restoration

from _common import build_cohort


@dataclass
class Config:
    n_cases: int = 60
    cohort_seed: int = 0
    pretext_epochs: int = 10
    epochs: int = 20
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out: str = "results/ssl_3d.json"


def main(cfg: Config):
    splits, samples = build_cohort(cfg.n_cases, cfg.cohort_seed)
    mc = ModelConfig.desk("3d")
    train = set(split_ids(splits, "train"))
    pool = sorted((s for s in samples if s.case_id in train), key=lambda s: s.key)
    vols = np.stack([s.stack for s in pool])
    _, encoder, hist = train_restoration(vols, vols.any(axis=1), mc, PretextConfig(epochs=cfg.pretext_epochs))
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Checkpoint(encoder, mc.to_dict(), "pretext", 0, ""), tmp)
        for seed in cfg.seeds:
            _, ssl, _ = run_phase(PhaseConfig("tss270", "ssl", str(path), epochs=cfg.epochs, seed=seed), splits, samples, mc)
            _, scratch, _ = run_phase(PhaseConfig("tss270", epochs=cfg.epochs, seed=seed), splits, samples, mc)
            rows.append({"seed": seed, "ssl": ssl.roc_auc, "scratch": scratch.roc_auc})
            print(json.dumps(rows[-1]), flush=True)
    summary = {"config": asdict(cfg), "pretext_best_epoch": hist["best_epoch"], "rows": rows,
               "median_ssl": float(np.median([r["ssl"] for r in rows])),
               "median_scratch": float(np.median([r["scratch"] for r in rows]))}
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    Path(cfg.out).write_text(json.dumps(summary, indent=2) + "\n")
    print(f"median tss270 AUC ssl {summary['median_ssl']:.4f} scratch {summary['median_scratch']:.4f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-cases", type=int, default=Config.n_cases)
    ap.add_argument("--cohort-seed", type=int, default=Config.cohort_seed)
    ap.add_argument("--pretext-epochs", type=int, default=Config.pretext_epochs)
    ap.add_argument("--epochs", type=int, default=Config.epochs)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default=Config.out)
    a = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.WARNING)
    main(Config(a.n_cases, a.cohort_seed, a.pretext_epochs, a.epochs, a.seeds, a.out))
