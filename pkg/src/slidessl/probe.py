"""Linear probing: how much label signal do frozen slide vectors carry?

The probe is a multinomial logistic regression fit by full-batch gradient
descent with backtracking line search, run to a tight gradient norm so the
fit is effectively the unique optimum of the strongly convex objective.
Quality is reported as ROC AUC over repeated stratified train/test splits,
optionally after downsampling the training side to a label budget, which is
how label efficiency is measured.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetTooSmall, DegenerateLabels, DimensionMismatch, FormatError

DEFAULT_L2 = 1e-3
GRAD_TOL = 1e-6
DEFAULT_SPLITS = 10
TEST_FRACTION = 0.2


# ---------------------------------------------------------------------------
# Normalization

def _normalize_train(x: np.ndarray, mode: str):
    """Returns (normalized x, closure that applies the same map to new rows)."""
    x = np.asarray(x, dtype=np.float64)
    if mode == "l2":
        def apply(v):
            v = np.asarray(v, dtype=np.float64)
            norms = np.linalg.norm(v, axis=1, keepdims=True)
            return v / np.where(norms == 0.0, 1.0, norms)
        return apply(x), apply
    if mode == "standard":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std == 0.0, 1.0, std)

        def apply(v):
            return (np.asarray(v, dtype=np.float64) - mean) / std
        return apply(x), apply
    raise ValueError(f"unknown normalization '{mode}'")


# ---------------------------------------------------------------------------
# Logistic regression

@dataclass
class LinearProbe:
    """Fitted multinomial logistic probe."""

    weights: np.ndarray          # (dim, n_classes)
    bias: np.ndarray             # (n_classes,)
    classes: np.ndarray          # sorted original labels
    normalization: str
    apply_norm: object = field(repr=False)
    grad_norm: float = 0.0
    loss: float = 0.0

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities, rows summing to 1."""
        x = self.apply_norm(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        logits = x @ self.weights + self.bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


def _softmax_loss_grad(w, b, x, onehot, l2):
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    n = x.shape[0]
    loss = (logz - (logits * onehot).sum(axis=1)).mean() + 0.5 * l2 * (w * w).sum()
    p = np.exp(logits - logz[:, None])
    delta = (p - onehot) / n
    return loss, x.T @ delta + l2 * w, delta.sum(axis=0)


def fit_logistic(x: np.ndarray, labels, l2: float = DEFAULT_L2,
                 normalization: str = "l2", max_iter: int = 20000,
                 tol: float = GRAD_TOL, init=None) -> LinearProbe:
    """Fit the probe by gradient descent with backtracking line search.

    Runs until the full gradient norm drops below ``tol``; with an l2
    penalty the objective is convex, so every starting point lands on the
    same loss. ``init`` optionally seeds (weights, bias). Normalization
    statistics come from ``x`` alone and are replayed onto any rows later
    passed to ``scores``.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise DimensionMismatch(
            f"{x.shape} features do not match {labels.shape} labels")
    classes = np.unique(labels)
    if classes.size < 2:
        raise DegenerateLabels(
            f"need at least 2 classes to fit a probe, got {classes.size}")
    if l2 <= 0:
        raise ValueError(f"l2 must be positive, got {l2}")
    x, apply_norm = _normalize_train(x, normalization)
    y = np.searchsorted(classes, labels)
    onehot = np.zeros((x.shape[0], classes.size))
    onehot[np.arange(x.shape[0]), y] = 1.0

    if init is None:
        w = np.zeros((x.shape[1], classes.size))
        b = np.zeros(classes.size)
    else:
        w = np.array(init[0], dtype=np.float64)
        b = np.array(init[1], dtype=np.float64)
        if w.shape != (x.shape[1], classes.size) or b.shape != (classes.size,):
            raise DimensionMismatch(
                f"init shapes {w.shape}/{b.shape} do not fit "
                f"{x.shape[1]} dims x {classes.size} classes")
    loss, gw, gb = _softmax_loss_grad(w, b, x, onehot, l2)
    step = 1.0
    for _ in range(max_iter):
        gnorm = float(np.sqrt((gw * gw).sum() + (gb * gb).sum()))
        if gnorm < tol:
            break
        # backtracking with Armijo decrease, reusing the last accepted step
        step = min(step * 2.0, 1e4)
        while True:
            w_new = w - step * gw
            b_new = b - step * gb
            new_loss, gw_new, gb_new = _softmax_loss_grad(
                w_new, b_new, x, onehot, l2)
            if new_loss <= loss - 0.5 * step * gnorm * gnorm:
                break
            step *= 0.5
            if step < 1e-20:
                raise FloatingPointError("line search collapsed")
        w, b, loss, gw, gb = w_new, b_new, new_loss, gw_new, gb_new
    gnorm = float(np.sqrt((gw * gw).sum() + (gb * gb).sum()))
    return LinearProbe(w, b, classes, normalization, apply_norm, gnorm, loss)


# ---------------------------------------------------------------------------
# AUC

def auc(scores: np.ndarray, labels) -> float:
    """ROC AUC. Binary labels use the Mann-Whitney statistic with ties
    counted half; multiclass scores average one-vs-rest AUCs (macro).
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DegenerateLabels("AUC needs both labels present")
    if scores.ndim == 2 and scores.shape[1] > 1:
        if classes.size == 2 and scores.shape[1] == 2:
            return _binary_auc(scores[:, 1], labels == classes[1])
        vals = [_binary_auc(scores[:, k], labels == c)
                for k, c in enumerate(classes)]
        return float(np.mean(vals))
    return _binary_auc(scores.reshape(-1), labels == classes[1])


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both labels present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks within tied groups
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [scores.size]])
    for s, e in zip(starts, ends):
        if e - s > 1:
            ranks[order[s:e]] = 0.5 * (s + 1 + e)
    rank_sum = ranks[positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Stratified splitting and label budgets

def _stratified_split(labels: np.ndarray, test_fraction: float,
                      rng: np.random.Generator):
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            raise BudgetTooSmall(
                f"class {c!r} has {members.size} sample(s); cannot appear in "
                "both train and test")
        members = rng.permutation(members)
        n_test = int(round(test_fraction * members.size))
        n_test = min(max(n_test, 1), members.size - 1)
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


def _budget_count(budget, n_train: int) -> int:
    if budget == "all" or budget is None:
        return n_train
    if isinstance(budget, float):
        if not 0.0 < budget <= 1.0:
            raise ValueError(f"fractional budget must be in (0, 1], got {budget}")
        return int(round(budget * n_train))
    count = int(budget)
    if count > n_train:
        raise BudgetTooSmall(
            f"budget {count} exceeds the {n_train} training rows available")
    return count


def _apply_budget(train_idx: np.ndarray, labels: np.ndarray, budget,
                  rng: np.random.Generator) -> np.ndarray:
    """Stratified downsampling by largest remainder; class ratio kept to +-1."""
    target = _budget_count(budget, train_idx.size)
    if target == train_idx.size:
        return train_idx
    classes = np.unique(labels[train_idx])
    if target < classes.size:
        raise BudgetTooSmall(
            f"budget {target} cannot cover {classes.size} classes")
    sizes = np.array([(labels[train_idx] == c).sum() for c in classes])
    quota = target * sizes / train_idx.size
    take = np.floor(quota).astype(int)
    remainder = quota - take
    # hand out the leftover seats by largest fractional part, ties by order
    for k in np.argsort(-remainder, kind="stable")[: target - take.sum()]:
        take[k] += 1
    if np.any(take == 0):
        raise BudgetTooSmall(
            f"budget {target} leaves some class with no training sample")
    kept = []
    for c, n_keep in zip(classes, take):
        members = train_idx[labels[train_idx] == c]
        kept.append(rng.permutation(members)[:n_keep])
    return np.sort(np.concatenate(kept))


# ---------------------------------------------------------------------------
# Bootstrap evaluation

@dataclass(frozen=True)
class ProbeReport:
    """Per-split AUCs of one (embedding set, budget) evaluation."""

    task: str
    budget: str
    aucs: tuple
    train_sizes: tuple

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std(self) -> float:
        return float(np.std(self.aucs))


def bootstrap_eval(x: np.ndarray, labels, budget="all", splits: int = DEFAULT_SPLITS,
                   test_fraction: float = TEST_FRACTION, seed: int = 0,
                   l2: float = DEFAULT_L2, normalization: str = "l2",
                   task: str = "task") -> ProbeReport:
    """AUC over repeated stratified splits with a training label budget.

    Each split re-randomizes the train/test partition and the budget
    subsample from a stream derived from (seed, split), so reports are
    reproducible and two budgets at the same seed see the same partitions.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] != labels.shape[0]:
        raise DimensionMismatch(
            f"{x.shape[0]} rows do not match {labels.shape[0]} labels")
    aucs, train_sizes = [], []
    for split in range(splits):
        rng = np.random.default_rng([seed, 3, split])
        train_idx, test_idx = _stratified_split(labels, test_fraction, rng)
        train_idx = _apply_budget(train_idx, labels, budget, rng)
        probe = fit_logistic(x[train_idx], labels[train_idx], l2=l2,
                             normalization=normalization)
        scores = probe.scores(x[test_idx])
        aucs.append(auc(scores, labels[test_idx]))
        train_sizes.append(int(train_idx.size))
    return ProbeReport(task, _budget_label(budget), tuple(aucs),
                       tuple(train_sizes))


def _budget_label(budget) -> str:
    if budget == "all" or budget is None:
        return "all"
    return repr(float(budget)) if isinstance(budget, float) else str(int(budget))


# ---------------------------------------------------------------------------
# Label files and report files

def load_labels_csv(path) -> dict[str, str]:
    """Read a two-column slide_id,label CSV (with header) into a dict."""
    path = Path(path)
    out: dict[str, str] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["slide_id", "label"]:
            raise FormatError(
                f"{path.name}: expected header 'slide_id,label', got {header}")
        for row in reader:
            if not row:
                continue
            if len(row) < 2:
                raise FormatError(f"{path.name}: malformed row {row}")
            out[row[0].strip()] = row[1].strip()
    if not out:
        raise FormatError(f"{path.name}: no label rows")
    return out


def align_labels(ids: list[str], label_map: dict[str, str]):
    """Order labels to match embedding rows; every id must be labeled."""
    missing = [sid for sid in ids if sid not in label_map]
    if missing:
        raise DegenerateLabels(
            f"{len(missing)} slide(s) missing labels, first: {missing[0]}")
    return np.array([label_map[sid] for sid in ids])


def write_report_csv(path, reports: list[ProbeReport]) -> None:
    """task,budget,split,auc rows, then one mean/std summary row per report."""
    lines = ["task,budget,split,auc"]
    for rep in reports:
        for split, value in enumerate(rep.aucs):
            lines.append(f"{rep.task},{rep.budget},{split},{value!r}")
    for rep in reports:
        lines.append(f"{rep.task},{rep.budget},mean,{rep.mean!r}")
        lines.append(f"{rep.task},{rep.budget},std,{rep.std!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def format_report_table(reports: list[ProbeReport]) -> str:
    """Aligned text table of mean +- std AUC per (task, budget)."""
    rows = [("task", "budget", "n_train", "auc")]
    for rep in reports:
        sizes = sorted(set(rep.train_sizes))
        n_train = str(sizes[0]) if len(sizes) == 1 else f"{sizes[0]}-{sizes[-1]}"
        rows.append((rep.task, rep.budget, n_train,
                     f"{rep.mean:.4f} +- {rep.std:.4f}"))
    widths = [max(len(r[k]) for r in rows) for k in range(4)]
    out = []
    for r in rows:
        out.append("  ".join(val.ljust(w) for val, w in zip(r, widths)).rstrip())
    return "\n".join(out)
