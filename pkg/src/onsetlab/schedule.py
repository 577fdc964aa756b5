"""Four-phase staged training: detect, tss180, tss270, attention fine-tune.

Each phase may start from random weights, a restoration-pretrained encoder,
the previous phase's checkpoint or any external checkpoint.  Frozen
parameters are checksummed before and after training.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import config_hash, dump_json, stamp
from .dataset import as_arrays, phase_pool, split_ids
from .metrics import evaluate_scores, roc_auc
from .models import ATTENTION_AND_HEAD, EARLY_BLOCKS, HEAD, ModelConfig, Model2D, build_model
from .optimizer import AdaBound

log = logging.getLogger(__name__)

PHASES = ("detect", "tss180", "tss270", "attn_finetune")
PHASE_LABEL = {"detect": "has_lesion", "tss180": "tss_lt_180", "tss270": "tss_lt_270", "attn_finetune": "tss_lt_270"}
PHASE_PARENT = {"tss180": "detect", "tss270": "tss180", "attn_finetune": "tss270"}
PHASE_ALIASES = {"attn": "attn_finetune"}
INITS = ("random", "ssl", "checkpoint", "external")


class ScheduleError(RuntimeError):
    pass


@dataclass
class PhaseConfig:
    phase: str
    init: str = "random"
    init_path: str | None = None
    # parameter-name prefixes held fixed; None means the phase default
    freeze: list[str] | None = None
    label_key: str | None = None
    epochs: int = 30
    patience: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    final_lr: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    # attn_finetune: also train the classifier head
    finetune_head: bool = True
    name: str | None = None

    def __post_init__(self):
        self.phase = PHASE_ALIASES.get(self.phase, self.phase)
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}; expected one of {INITS}")
        if self.init in ("ssl", "external") and not self.init_path:
            raise ValueError(f"init={self.init} needs init_path")
        if self.label_key is None:
            self.label_key = PHASE_LABEL[self.phase]
        if self.epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, patience >= 1 and batch_size >= 1 required")
        self.betas = tuple(self.betas)
        if self.freeze is not None:
            self.freeze = list(self.freeze)

    @property
    def tag(self) -> str:
        return self.name or self.phase

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "PhaseConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phase config keys {sorted(unknown)}")
        return cls(**d)


def trainable_complement(model: nn.Module, trainable) -> list[str]:
    """Top-level module prefixes not covered by ``trainable``."""
    tops = sorted({n.split(".")[0] + "." for n, _ in model.named_parameters()})
    return [t for t in tops if not any(t.startswith(p) or p.startswith(t) for p in trainable)]


def default_freeze(cfg: PhaseConfig, model: nn.Module, inherited: list[str] | None = None) -> list[str]:
    kind = "2d" if isinstance(model, Model2D) else "3d"
    if cfg.phase == "attn_finetune":
        keep = ATTENTION_AND_HEAD[kind] if cfg.finetune_head else tuple(p for p in ATTENTION_AND_HEAD[kind] if p not in HEAD[kind])
        return trainable_complement(model, keep)
    if cfg.init == "random":
        return []
    if cfg.phase == "tss270" and inherited is not None:
        return list(inherited)
    if cfg.phase in ("tss180", "tss270"):
        return list(EARLY_BLOCKS[kind])
    return []


def resolve_freeze(model: nn.Module, prefixes) -> list[str]:
    """Parameter names under ``prefixes``; every prefix must match something."""
    names = [n for n, _ in model.named_parameters()]
    out = []
    for p in prefixes:
        hit = [n for n in names if n.startswith(p)]
        if not hit:
            raise ScheduleError(f"freeze prefix {p!r} matches no parameter")
        out.extend(hit)
    return sorted(set(out))


def apply_freeze(model: nn.Module, frozen: list[str]):
    fz = set(frozen)
    for n, p in model.named_parameters():
        p.requires_grad_(n not in fz)


def set_train_mode(model: nn.Module, frozen_prefixes):
    """Train mode, except normalisation layers inside frozen blocks keep their statistics."""
    model.train()
    for name, m in model.named_modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm) and any((name + ".").startswith(p) for p in frozen_prefixes):
            m.eval()


def checksum(model: nn.Module, names) -> str:
    params = dict(model.named_parameters())
    h = hashlib.sha256()
    for n in sorted(names):
        h.update(n.encode())
        h.update(params[n].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    state: dict
    model: dict  # ModelConfig as dict
    phase: str
    seed: int
    config_hash: str
    frozen: list[str] = field(default_factory=list)
    freeze_prefixes: list[str] = field(default_factory=list)
    label_key: str | None = None

    def sidecar(self) -> dict:
        return {"phase": self.phase, "seed": self.seed, "config_hash": self.config_hash, "frozen_names": self.frozen,
                "freeze_prefixes": self.freeze_prefixes, "label_key": self.label_key, "model": self.model}


def save_checkpoint(ck: Checkpoint, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save({"state": ck.state, **ck.sidecar()}, d / "checkpoint.pt")
    dump_json(ck.sidecar(), d / "checkpoint.json")
    return d / "checkpoint.pt"


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.pt"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    raw = torch.load(p, map_location="cpu", weights_only=False)
    if isinstance(raw, dict) and "state" in raw:
        return Checkpoint(raw["state"], raw.get("model") or {}, raw.get("phase", "external"), raw.get("seed", 0),
                          raw.get("config_hash", ""), raw.get("frozen_names", []), raw.get("freeze_prefixes", []),
                          raw.get("label_key"))
    if isinstance(raw, dict) and all(isinstance(v, torch.Tensor) for v in raw.values()):
        # a bare state dict from elsewhere
        return Checkpoint(raw, {}, "external", 0, "")
    raise ValueError(f"{p} is not a recognised checkpoint")


def transfer_weights(source, model: nn.Module, freeze_spec=(), reinit_head: bool = False, seed: int = 0):
    """Copy matching tensors from ``source`` into ``model`` and freeze ``freeze_spec``.

    Returns (model, report).  The report lists copied, skipped (present on only
    one side) and reinitialised names plus the frozen parameter names.
    """
    src = source.state if isinstance(source, Checkpoint) else source
    kind = "2d" if isinstance(model, Model2D) else "3d"
    head = HEAD[kind]
    target = model.state_dict()
    params = {n for n, _ in model.named_parameters()}
    copied, reinit = [], []
    new = dict(target)
    for n, t in target.items():
        if n not in src:
            continue
        if reinit_head and n.startswith(head):
            reinit.append(n)
            continue
        if tuple(src[n].shape) != tuple(t.shape):
            raise ScheduleError(f"shape mismatch for {n}: checkpoint {tuple(src[n].shape)} vs model {tuple(t.shape)}")
        new[n] = src[n].detach().clone().to(t.dtype)
        copied.append(n)
    if not [n for n in copied if n in params]:
        raise ScheduleError("0 parameters transferred")
    model.load_state_dict(new)
    if reinit_head:
        g = torch.Generator().manual_seed(seed)
        for name, m in model.named_modules():
            if any((name + ".").startswith(p) for p in head):
                if isinstance(m, nn.Linear):
                    bound = 1.0 / np.sqrt(m.in_features)
                    with torch.no_grad():
                        m.weight.uniform_(-bound, bound, generator=g)
                        m.bias.uniform_(-bound, bound, generator=g)
                elif hasattr(m, "theta"):
                    with torch.no_grad():
                        m.theta.zero_()
    frozen = resolve_freeze(model, freeze_spec)
    apply_freeze(model, frozen)
    report = {
        "copied": sorted(n for n in copied if n in params),
        "copied_buffers": sorted(n for n in copied if n not in params),
        "skipped": sorted((set(src) - set(target)) | {n for n in target if n not in src}),
        "reinitialized": sorted(n for n in reinit if n in params),
        "frozen": frozen,
    }
    return model, report


# ---------------------------------------------------------------- training


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def predict(model: nn.Module, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(torch.from_numpy(x[i : i + batch_size]))["prob"].double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def _bce(scores, y) -> float:
    if not len(y):
        return 0.0
    p = np.clip(scores, 1e-7, 1 - 1e-7)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _val_score(scores, y):
    if len(y) and 0 < y.sum() < len(y):
        return roc_auc(scores, y), "auc"
    # one-class validation split: fall back to negative loss
    return -_bce(scores, y), "neg_loss"


def _check_slice_weights(model):
    if isinstance(model, Model2D):
        w = model.aggregator.weights().detach()
        if not bool(((w >= 0) & (w <= 1)).all()):
            raise AssertionError(f"slice weights left [0, 1]: {w.tolist()}")
        return [float(v) for v in w]
    return None


def _init_model(cfg: PhaseConfig, model_cfg: ModelConfig, parent: Checkpoint | None, inherited):
    torch.manual_seed(cfg.seed)
    model = build_model(model_cfg)
    report = {"copied": [], "copied_buffers": [], "skipped": [], "reinitialized": [], "frozen": []}
    if cfg.init == "random":
        source = None
    elif cfg.init == "checkpoint":
        if parent is None:
            raise ScheduleError(f"{cfg.phase} with init=checkpoint needs a {PHASE_PARENT.get(cfg.phase, 'previous')} checkpoint")
        source = parent
    else:
        source = load_checkpoint(cfg.init_path)
    freeze = cfg.freeze if cfg.freeze is not None else default_freeze(cfg, model, inherited)
    if source is not None:
        task_changed = source.label_key != cfg.label_key
        model, report = transfer_weights(source, model, freeze, reinit_head=task_changed, seed=cfg.seed)
    else:
        frozen = resolve_freeze(model, freeze)
        apply_freeze(model, frozen)
        report["frozen"] = frozen
    return model, freeze, report


def run_phase(cfg: PhaseConfig, splits: dict, samples, model_cfg: ModelConfig, out_dir=None,
              parent: Checkpoint | None = None, inherited_freeze=None):
    """Train one phase.  Returns (Checkpoint, MetricsReport, info dict).

    ``samples`` are HemisphereSamples of the whole cohort; ``parent`` is the
    upstream checkpoint for init=checkpoint.  With ``out_dir`` the checkpoint,
    curves.csv and metrics.json are written to ``out_dir/<phase>/``.
    """
    t0 = time.perf_counter()
    if cfg.init == "checkpoint" and parent is not None and cfg.phase in PHASE_PARENT:
        want = PHASE_PARENT[cfg.phase]
        if parent.phase != want:
            raise ScheduleError(f"{cfg.phase} expects a {want} checkpoint, got {parent.phase}")
    pools = {s: phase_pool(samples, splits, s, cfg.label_key) for s in ("train", "val", "test")}
    if not pools["train"]:
        raise ScheduleError(f"no training samples for {cfg.phase}")
    xtr, ytr = as_arrays(pools["train"], cfg.label_key)
    xva, yva = as_arrays(pools["val"], cfg.label_key) if pools["val"] else (xtr[:0], ytr[:0])
    xte, yte = as_arrays(pools["test"], cfg.label_key)

    model, freeze_prefixes, report = _init_model(cfg, model_cfg, parent, inherited_freeze)
    frozen = report["frozen"]
    before = checksum(model, frozen)
    params = [p for p in model.parameters() if p.requires_grad]
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    curves = []
    best_state = copy.deepcopy(model.state_dict())
    best_val, best_loss, best_epoch, metric = None, None, 0, "auc"
    if params and cfg.epochs > 0:
        opt = AdaBound(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, final_lr=cfg.final_lr).name_parameters(named)
        loss_fn = nn.BCEWithLogitsLoss()
        stale = 0
        for epoch in range(1, cfg.epochs + 1):
            set_train_mode(model, freeze_prefixes)
            rng = np.random.default_rng([cfg.seed, epoch])
            losses = []
            for idx in _batches(len(xtr), cfg.batch_size, rng):
                if len(idx) < 2 and len(xtr) > 1:
                    continue  # batch statistics need two samples
                xb, yb = torch.from_numpy(xtr[idx]), torch.from_numpy(ytr[idx])
                opt.zero_grad()
                loss = loss_fn(model(xb)["logit"], yb)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"{cfg.phase}: loss diverged at epoch {epoch}")
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            weights = _check_slice_weights(model)
            vs = predict(model, xva)
            val, metric = _val_score(vs, yva)
            val_loss = _bce(vs, yva)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"), f"val_{metric}": val,
                   "val_loss": val_loss}
            if weights is not None:
                row["slice_w_min"], row["slice_w_max"] = min(weights), max(weights)
            curves.append(row)
            log.info("%s epoch %d loss %.4f val %s %.4f", cfg.tag, epoch, row["train_loss"], metric, val)
            # ties on the selection metric go to the lower validation loss
            improved = best_val is None or val > best_val
            if improved or (val == best_val and val_loss < best_loss):
                best_val, best_loss, best_epoch = val, val_loss, epoch
                best_state = copy.deepcopy(model.state_dict())
            stale = 0 if improved else stale + 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    after = checksum(model, frozen)
    if after != before:
        raise ScheduleError(f"{cfg.phase}: frozen parameters changed during training")

    # one pass over test; the operating point is that set's Youden threshold
    ts = predict(model, xte)
    if not (len(yte) and 0 < yte.sum() < len(yte)):
        raise ScheduleError(f"{cfg.phase}: test pool lacks one of the classes")
    metrics = evaluate_scores(cfg.label_key, ts, yte, [s.key for s in pools["test"]])

    cfg_h = config_hash({"phase": cfg.to_dict(), "model": model_cfg.to_dict()})
    ck = Checkpoint(copy.deepcopy(model.state_dict()), model_cfg.to_dict(), cfg.phase, cfg.seed, cfg_h, frozen,
                    list(freeze_prefixes), cfg.label_key)
    info = {
        **stamp(cfg_h, cfg.seed),
        "phase": cfg.phase,
        "tag": cfg.tag,
        "init": cfg.init,
        "best_epoch": best_epoch,
        "selection_metric": metric,
        "best_val": best_val,
        "frozen_checksum": after,
        "transfer": report,
        "test_case_ids": split_ids(splits, "test"),
        "n": {k: len(v) for k, v in pools.items()},
        "curves": curves,
        "config": cfg.to_dict(),
        "seconds": time.perf_counter() - t0,
    }
    if out_dir is not None:
        write_phase(Path(out_dir) / cfg.tag, ck, metrics, info)
    return ck, metrics, info


def write_phase(d: Path, ck: Checkpoint, metrics, info: dict):
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck, d)
    keys = sorted({k for row in info["curves"] for k in row}, key=lambda k: (k != "epoch", k))
    with open(d / "curves.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys or ["epoch"])
        w.writeheader()
        for row in info["curves"]:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    body = {k: v for k, v in info.items() if k not in ("curves", "seconds")}
    body["metrics"] = metrics.to_dict()
    dump_json(body, d / "metrics.json")
    dump_json({"seconds": info["seconds"], "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}, d / "run.json")


# ---------------------------------------------------------------- schema


COMPARISON_FIELDS = ["model", "phase", "init", "task", "sensitivity", "specificity", "accuracy", "roc_auc", "threshold", "n_test"]


def check_chain(configs):
    """Every init=checkpoint phase needs its parent earlier in the list."""
    seen = set()
    for c in configs:
        if c.init == "checkpoint" and c.init_path is None:
            parent = PHASE_PARENT.get(c.phase)
            if parent is None or parent not in seen:
                raise ScheduleError(f"broken chain: {c.tag} needs a {parent or 'previous'} phase before it")
        seen.add(c.phase)


def run_schema(configs, splits, samples, model_cfg: ModelConfig, out_dir=None, label: str | None = None):
    """Run phases in order, feeding each checkpoint to the next.

    Returns {"rows": comparison rows, "checkpoints": {tag: Checkpoint}, "reports": {tag: MetricsReport}}.
    """
    configs = [c if isinstance(c, PhaseConfig) else PhaseConfig.from_dict(c) for c in configs]
    check_chain(configs)
    tags = [c.tag for c in configs]
    if len(set(tags)) != len(tags):
        raise ScheduleError("phase tags must be unique (set name to disambiguate repeats)")
    checkpoints, reports, rows, test_ids = {}, {}, [], None
    last = {}
    freeze_of = {}
    for c in configs:
        parent = None
        if c.init == "checkpoint" and c.init_path is None:
            parent = last[PHASE_PARENT[c.phase]]
        elif c.init == "checkpoint":
            parent = load_checkpoint(c.init_path)
        inherited = freeze_of.get(PHASE_PARENT.get(c.phase)) if c.init == "checkpoint" else None
        ck, rep, info = run_phase(c, splits, samples, model_cfg, out_dir, parent, inherited)
        if test_ids is None:
            test_ids = info["test_case_ids"]
        elif info["test_case_ids"] != test_ids:
            raise ScheduleError("test set changed between phases")
        checkpoints[c.tag], reports[c.tag] = ck, rep
        last[c.phase] = ck
        freeze_of[c.phase] = ck.freeze_prefixes
        rows.append({"model": label or model_cfg.kind.upper(), "phase": c.tag, "init": c.init, "task": c.label_key,
                     "sensitivity": rep.sensitivity, "specificity": rep.specificity, "accuracy": rep.accuracy,
                     "roc_auc": rep.roc_auc, "threshold": rep.threshold, "n_test": rep.n})
    if out_dir is not None:
        write_comparison(rows, Path(out_dir) / "comparison.csv")
    return {"rows": rows, "checkpoints": checkpoints, "reports": reports}


def write_comparison(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.4f}" if isinstance(r[k], float) else r[k]) for k in COMPARISON_FIELDS})


def chain_configs(seed=0, epochs=(20, 20, 20, 10), **kw) -> list[PhaseConfig]:
    """The default detect -> tss180 -> tss270 -> attention chain."""
    return [
        PhaseConfig("detect", "random", epochs=epochs[0], seed=seed, **kw),
        PhaseConfig("tss180", "checkpoint", epochs=epochs[1], seed=seed, **kw),
        PhaseConfig("tss270", "checkpoint", epochs=epochs[2], seed=seed, **kw),
        PhaseConfig("attn_finetune", "checkpoint", epochs=epochs[3], seed=seed, **kw),
    ]
