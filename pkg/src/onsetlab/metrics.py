"""Classification metrics, Youden operating point and reader agreement."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

# per-reader (sensitivity, specificity) for the 4.5 h mismatch reading
READER_TARGETS = {"Rad1": (0.5476, 0.8500), "Rad2": (0.4286, 0.9250), "Rad3": (0.5714, 0.6500)}
DEFAULT_READER_RHO = 0.7


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("labels contain a single class; metric undefined")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting one half."""
    s, y = _check_binary(scores, labels)
    r = rankdata(s, method="average")
    n1 = int(y.sum())
    n0 = len(y) - n1
    return float((r[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def confusion(pred, labels) -> dict:
    p = np.asarray(pred).astype(bool)
    y = np.asarray(labels).astype(bool)
    return {"tp": int((p & y).sum()), "fp": int((p & ~y).sum()), "tn": int((~p & ~y).sum()), "fn": int((~p & y).sum())}


def rates(c: dict) -> tuple[float, float, float]:
    pos, neg = c["tp"] + c["fn"], c["tn"] + c["fp"]
    sens = c["tp"] / pos if pos else float("nan")
    spec = c["tn"] / neg if neg else float("nan")
    acc = (c["tp"] + c["tn"]) / (pos + neg)
    return sens, spec, acc


def youden_operating_point(scores, labels):
    """(threshold, sensitivity, specificity, accuracy) maximising J.

    Candidates are midpoints between consecutive distinct scores; a sample is
    called positive when its score exceeds the threshold.  Ties in J go to
    the higher specificity.
    """
    s, y = _check_binary(scores, labels)
    u = np.unique(s)
    cands = (u[:-1] + u[1:]) / 2.0 if len(u) > 1 else u
    pos = y == 1
    best = None
    for t in cands:
        pred = s > t
        sens = float((pred & pos).sum() / pos.sum())
        spec = float((~pred & ~pos).sum() / (~pos).sum())
        key = (sens + spec - 1.0, spec)
        if best is None or key > best[0]:
            best = (key, float(t), sens, spec)
    _, t, sens, spec = best
    acc = float(((s > t) == pos).mean())
    return t, sens, spec, acc


# ---------------------------------------------------------------- readers


@dataclass
class ReaderTable:
    case_ids: list[str]
    readers: list[str]
    entries: np.ndarray  # (cases, readers) of 0/1; 1 = mismatch-positive
    truth: np.ndarray | None = None
    n_excluded: int = 0

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=int)
        if self.entries.shape != (len(self.case_ids), len(self.readers)):
            raise ValueError("reader table is not rectangular")
        if not np.isin(self.entries, (0, 1)).all():
            raise ValueError("reader entries must be 0/1")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=int)
            if self.truth.shape != (len(self.case_ids),):
                raise ValueError("one ground-truth label per case")

    @classmethod
    def from_csv(cls, path, labels: dict | None = None) -> "ReaderTable":
        """Long-format CSV with columns case_id, reader_id, mismatch.

        Cases missing a reading from any reader are dropped and counted.
        """
        rows: dict[str, dict[str, int]] = {}
        readers: list[str] = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                cid, rid = row["case_id"], row["reader_id"]
                if rid not in readers:
                    readers.append(rid)
                val = row["mismatch"].strip()
                if val == "":
                    continue
                rows.setdefault(cid, {})[rid] = int(val)
        complete = sorted(c for c, r in rows.items() if len(r) == len(readers))
        excluded = len(rows) - len(complete)
        if labels is not None:
            missing = [c for c in complete if c not in labels]
            if missing:
                raise KeyError(f"no ground-truth label for {missing[:3]}")
        entries = np.array([[rows[c][r] for r in readers] for c in complete], dtype=int).reshape(len(complete), len(readers))
        truth = np.array([labels[c] for c in complete]) if labels is not None else None
        return cls(complete, readers, entries, truth, excluded)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "reader_id", "mismatch"])
            for i, c in enumerate(self.case_ids):
                for j, r in enumerate(self.readers):
                    w.writerow([c, r, int(self.entries[i, j])])

    def majority(self) -> np.ndarray:
        # ties (even reader counts) resolve to negative
        return (self.entries.sum(axis=1) * 2 > len(self.readers)).astype(int)


def fleiss_kappa(table) -> float:
    """Fleiss' kappa over two categories.

    Accepts a ReaderTable or a (cases, readers) 0/1 array.  When expected
    agreement is 1 (everyone always says the same thing) kappa is 1 by
    convention and a warning flags it.
    """
    e = table.entries if isinstance(table, ReaderTable) else np.asarray(table, dtype=int)
    n_cases, n = e.shape
    if n < 2 or n_cases < 2:
        raise ValueError("need at least two readers and two cases")
    counts = np.stack([(e == 0).sum(axis=1), (e == 1).sum(axis=1)], axis=1).astype(float)
    p_i = ((counts**2).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(axis=0) / (n_cases * n)
    p_e = float((p_j**2).sum())
    if math.isclose(p_e, 1.0):
        warnings.warn("degenerate reader table: expected agreement is 1, kappa set to 1.0", RuntimeWarning, stacklevel=2)
        return 1.0
    return float((p_bar - p_e) / (1.0 - p_e))


def simulate_readers(labels, targets: dict | None = None, rho: float = DEFAULT_READER_RHO, seed=0, case_ids=None) -> ReaderTable:
    """Readers with given (sensitivity, specificity) sharing a latent case difficulty.

    Each reader sees z = sqrt(rho) * u_case + sqrt(1 - rho) * e_reader.  A
    positive case is called positive when Phi(z) < sens and a negative case
    when Phi(z) > spec, so marginals match the targets and rho sets how much
    readers agree.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    targets = targets or READER_TARGETS
    y = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    shared = rng.standard_normal(len(y))
    entries = np.zeros((len(y), len(targets)), dtype=int)
    for j, (sens, spec) in enumerate(targets.values()):
        z = math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * rng.standard_normal(len(y))
        u = norm.cdf(z)
        entries[:, j] = np.where(y == 1, u < sens, u > spec)
    ids = list(case_ids) if case_ids is not None else [f"case{i:04d}" for i in range(len(y))]
    return ReaderTable(ids, list(targets), entries, y)


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    task: str
    n: int
    sensitivity: float
    specificity: float
    accuracy: float
    roc_auc: float
    threshold: float
    confusion: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    ids: list = field(default_factory=list)
    readers: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(task, scores, labels, ids=None, threshold=None) -> MetricsReport:
    """Metrics at ``threshold`` (default: the Youden point of these scores)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    auc = roc_auc(s, y)
    if threshold is None:
        threshold = youden_operating_point(s, y)[0]
    c = confusion(s > threshold, y)
    sens, spec, acc = rates(c)
    return MetricsReport(task, len(y), sens, spec, acc, auc, float(threshold), c,
                         [float(v) for v in s], [int(v) for v in y], list(ids) if ids is not None else [])


def _row(name, pred, y):
    c = confusion(pred, y)
    sens, spec, acc = rates(c)
    return {"name": name, "sensitivity": sens, "specificity": spec, "accuracy": acc, **c}


def reader_comparison(preds: dict, table: ReaderTable, labels: dict | None = None, task="tss_lt_270") -> MetricsReport:
    """Model at its Youden point next to each reader and the majority-vote reader.

    ``preds`` maps case_id to model score; ``labels`` maps case_id to truth
    (falls back to the table's own truth column).
    """
    ids = table.case_ids
    if set(ids) - set(preds):
        raise KeyError(f"no model score for cases {sorted(set(ids) - set(preds))[:3]}")
    if labels is not None:
        y = np.array([labels[c] for c in ids], dtype=int)
    elif table.truth is not None:
        y = table.truth
    else:
        raise ValueError("ground-truth labels are required")
    scores = np.array([preds[c] for c in ids], dtype=np.float64)
    report = evaluate_scores(task, scores, y, ids)
    rows = [_row(r, table.entries[:, j], y) for j, r in enumerate(table.readers)]
    rows.append(_row("Agg Rad", table.majority(), y))
    rows.append({"name": "Model", "sensitivity": report.sensitivity, "specificity": report.specificity,
                 "accuracy": report.accuracy, "roc_auc": report.roc_auc, "threshold": report.threshold, **report.confusion})
    report.readers = {
        "rows": rows,
        "fleiss_kappa": fleiss_kappa(table),
        "aggregate": "majority vote",
        "n_excluded": table.n_excluded,
    }
    return report


def roc_curve(scores, labels):
    s, y = _check_binary(scores, labels)
    u = np.unique(s)[::-1]
    fpr, tpr = [0.0], [0.0]
    for t in u:
        pred = s >= t
        tpr.append(float((pred & (y == 1)).sum() / (y == 1).sum()))
        fpr.append(float((pred & (y == 0)).sum() / (y == 0).sum()))
    return np.array(fpr), np.array(tpr)


def plot_roc(curves: dict, path, title="ROC"):
    """``curves`` maps a label to (scores, labels)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, (s, y) in curves.items():
        fpr, tpr = roc_curve(s, y)
        ax.plot(fpr, tpr, label=f"{name} (AUC {roc_auc(s, y):.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
