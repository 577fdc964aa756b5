"""Detection training followed by Grad-CAM overlap at one or more layers."""

import argparse
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from onsetlab.dataset import phase_pool
from onsetlab.explain import explain_samples, render_overlays, write_overlap_csv
from onsetlab.models import ModelConfig, build_model
from onsetlab.schedule import PhaseConfig, run_phase

from _common import build_cohort


@dataclass
class Config:
    n_cases: int = 60
    cohort_seed: int = 0
    seed: int = 0
    epochs: int = 30
    layers: list = field(default_factory=lambda: ["layer3", "layer4"])
    overlays: bool = False
    out: str = "results/detect_gradcam"


def main(cfg: Config):
    splits, samples = build_cohort(cfg.n_cases, cfg.cohort_seed)
    mc = ModelConfig.desk("2d")
    ck, rep, info = run_phase(PhaseConfig("detect", epochs=cfg.epochs, seed=cfg.seed), splits, samples, mc)
    model = build_model(mc)
    model.load_state_dict(ck.state)
    scores = dict(zip(rep.ids, rep.scores))
    test = phase_pool(samples, splits, "test", "has_lesion")
    tp = [s for s in test if s.labels["has_lesion"] == 1 and scores[s.key] > rep.threshold]
    out = Path(cfg.out)
    summary = {"config": asdict(cfg), "test_auc": rep.roc_auc, "best_epoch": info["best_epoch"], "n_true_positive": len(tp),
               "layers": {}}
    for layer in cfg.layers:
        rows = explain_samples(model, tp, layer)
        write_overlap_csv(rows, out / f"overlap_{layer}.csv")
        if cfg.overlays:
            for smp, sal, *_ in rows:
                render_overlays(smp, sal, out / layer)
        summary["layers"][layer] = {"substantial": float(np.mean([r[3] == "substantial" for r in rows])),
                                    "argmax_in_lesion": float(np.mean([r[4] for r in rows])),
                                    "fractions": [round(r[2], 4) for r in rows]}
        print(layer, summary["layers"][layer]["substantial"], summary["layers"][layer]["argmax_in_lesion"])
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"detect test AUC {rep.roc_auc:.4f}, {len(tp)} true positives")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-cases", type=int, default=Config.n_cases)
    ap.add_argument("--cohort-seed", type=int, default=Config.cohort_seed)
    ap.add_argument("--seed", type=int, default=Config.seed)
    ap.add_argument("--epochs", type=int, default=Config.epochs)
    ap.add_argument("--layers", nargs="+", default=["layer3", "layer4"])
    ap.add_argument("--overlays", action="store_true")
    ap.add_argument("--out", default=Config.out)
    a = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.WARNING)
    main(Config(a.n_cases, a.cohort_seed, a.seed, a.epochs, a.layers, a.overlays, a.out))
