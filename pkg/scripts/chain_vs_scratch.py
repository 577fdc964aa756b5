"""Phase-chained vs scratch training on the tss270 task over several seeds."""

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from onsetlab.models import ModelConfig
from onsetlab.schedule import PhaseConfig, run_phase, run_schema

from _common import build_cohort


@dataclass
class Config:
    n_cases: int = 200
    cohort_seed: int = 1
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 30
    attention: bool = False  # also run the attention fine-tune phase
    flair_contrast: float | None = None  # overrides the generator default (noise SDs)
    out: str = "results/chain_vs_scratch.json"


def main(cfg: Config):
    extra = {} if cfg.flair_contrast is None else {"flair_contrast": cfg.flair_contrast}
    splits, samples = build_cohort(cfg.n_cases, cfg.cohort_seed, **extra)
    mc = ModelConfig.desk("2d")
    rows = []
    for seed in cfg.seeds:
        t = time.perf_counter()
        chain = [PhaseConfig("detect", epochs=cfg.epochs, seed=seed),
                 PhaseConfig("tss180", "checkpoint", epochs=cfg.epochs, seed=seed),
                 PhaseConfig("tss270", "checkpoint", epochs=cfg.epochs, seed=seed)]
        if cfg.attention:
            chain.append(PhaseConfig("attn_finetune", "checkpoint", epochs=cfg.epochs, seed=seed))
        res = run_schema(chain, splits, samples, mc)
        _, scratch, _ = run_phase(PhaseConfig("tss270", epochs=cfg.epochs, seed=seed), splits, samples, mc)
        row = {"seed": seed, **{f"chain_{k}": v.roc_auc for k, v in res["reports"].items()}, "scratch_tss270": scratch.roc_auc,
               "seconds": time.perf_counter() - t}
        rows.append(row)
        print(json.dumps(row), flush=True)
    chained = np.median([r["chain_tss270"] for r in rows])
    scratch = np.median([r["scratch_tss270"] for r in rows])
    summary = {"config": asdict(cfg), "rows": rows, "median_chain": chained, "median_scratch": scratch,
               "margin": chained - scratch}
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    Path(cfg.out).write_text(json.dumps(summary, indent=2) + "\n")
    print(f"median tss270 AUC chained {chained:.4f} scratch {scratch:.4f} margin {chained - scratch:+.4f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-cases", type=int, default=Config.n_cases)
    ap.add_argument("--cohort-seed", type=int, default=Config.cohort_seed)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=Config.epochs)
    ap.add_argument("--attention", action="store_true")
    ap.add_argument("--flair-contrast", type=float, default=None)
    ap.add_argument("--out", default=Config.out)
    a = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.WARNING)
    main(Config(a.n_cases, a.cohort_seed, a.seeds, a.epochs, a.attention, a.flair_contrast, a.out))
