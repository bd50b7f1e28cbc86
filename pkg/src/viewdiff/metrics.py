"""Task metrics, distribution divergence and view-contribution diagnostics.

Multi-label scores use example-based Jaccard/F1 (set overlap per sample,
then averaged) and label-macro AUROC/AUPRC; multi-class scores use
accuracy, macro F1, multi-class Cohen's kappa and one-vs-rest macro AUROC.
AUROC comes from the tie-averaged rank statistic, AUPRC from step
integration of the precision-recall curve; both are verified against
brute-force pair counting in the tests.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import (Cohort, N_VIEWS, patient_missing_group, visit_count_group)
from .errors import DomainError, MetricUndefined
from .predictor import PredictorModel, task_loss

MULTILABEL_METRICS = ("jaccard", "f1", "auprc", "auroc")
MULTICLASS_METRICS = ("accuracy", "f1_macro", "kappa", "auroc")


# ---------------------------------------------------------------------------
# rank helpers


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) statistic."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("auroc needs both classes present")
    ranks = _average_ranks(np.asarray(scores, dtype=np.float64))
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step integration of precision over recall (threshold at each score)."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricUndefined("auprc needs both classes present")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j + 1].sum())
        fp += (j - i + 1) - int(sorted_labels[i:j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


# ---------------------------------------------------------------------------
# multi-label / multi-class metric sets


def multilabel_metrics(pred_sets: Sequence[Sequence[int]],
                       true_sets: Sequence[Sequence[int]],
                       scores: np.ndarray) -> dict[str, float]:
    """Example-based Jaccard/F1 plus label-macro AUROC/AUPRC.

    ``scores`` is (n_samples, n_labels); labels where only one class occurs
    are excluded from the macro averages.
    """
    if len(pred_sets) == 0:
        raise DomainError("multilabel_metrics: empty result")
    scores = np.asarray(scores, dtype=np.float64)
    n, n_labels = scores.shape
    jaccard = []
    f1 = []
    hot = np.zeros((n, n_labels), dtype=bool)
    for i, (pred, true) in enumerate(zip(pred_sets, true_sets)):
        p, t = set(pred), set(true)
        union = len(p | t)
        inter = len(p & t)
        jaccard.append(inter / union if union else 1.0)
        denom = len(p) + len(t)
        f1.append(2.0 * inter / denom if denom else 1.0)
        hot[i, list(t)] = True

    aurocs = []
    auprcs = []
    for lab in range(n_labels):
        col = hot[:, lab]
        if col.all() or not col.any():
            continue
        aurocs.append(auroc_binary(scores[:, lab], col))
        auprcs.append(auprc_binary(scores[:, lab], col))
    if not aurocs:
        raise MetricUndefined("all labels are single-class")
    return {"jaccard": float(np.mean(jaccard)), "f1": float(np.mean(f1)),
            "auprc": float(np.mean(auprcs)), "auroc": float(np.mean(aurocs))}


def multiclass_metrics(pred: Sequence[int], true: Sequence[int],
                       scores: np.ndarray) -> dict[str, float]:
    """Accuracy, macro F1, multi-class Cohen's kappa, one-vs-rest macro AUROC."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(true)
    if n < 2:
        raise DomainError("multiclass_metrics: need >= 2 samples")
    n_classes = scores.shape[1]

    accuracy = float((pred == true).mean())

    f1s = []
    for c in sorted(set(true.tolist()) | set(pred.tolist())):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        f1s.append(2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    f1_macro = float(np.mean(f1s))

    # chance agreement from row/column marginals (reduces to the binary
    # formula n_pos*n_pred + n_neg*n_true over N^2 for two classes)
    p_o = accuracy
    p_e = 0.0
    for c in range(n_classes):
        p_e += (true == c).sum() * (pred == c).sum()
    p_e /= n * n
    if p_e >= 1.0:
        raise MetricUndefined("kappa undefined: chance agreement is 1")
    kappa = float((p_o - p_e) / (1.0 - p_e))

    aurocs = []
    for c in range(n_classes):
        col = true == c
        if col.all() or not col.any():
            continue
        aurocs.append(auroc_binary(scores[:, c], col))
    if not aurocs:
        raise MetricUndefined("all classes are single-class")
    return {"accuracy": accuracy, "f1_macro": f1_macro, "kappa": kappa,
            "auroc": float(np.mean(aurocs))}


# ---------------------------------------------------------------------------
# distribution match


def jsd(freq_a: np.ndarray, freq_b: np.ndarray) -> float:
    """Jensen-Shannon divergence (base 2, so the range is [0, 1]).

    Inputs are nonnegative count/frequency vectors over the same support;
    they are normalized here and 0*log(0) terms contribute nothing.
    """
    a = np.asarray(freq_a, dtype=np.float64)
    b = np.asarray(freq_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"jsd: shapes differ {a.shape} vs {b.shape}")
    if (a < 0).any() or (b < 0).any():
        raise DomainError("jsd: negative frequencies")
    if a.sum() == 0 or b.sum() == 0:
        raise DomainError("jsd: all-zero frequency vector")
    p = a / a.sum()
    q = b / b.sum()
    m = 0.5 * (p + q)

    def kl(x, y):
        mask = x > 0
        return float((x[mask] * np.log2(x[mask] / y[mask])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def code_frequencies(code_sets: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Occurrence counts of each code over a collection of code sets."""
    freq = np.zeros(vocab_size)
    for codes in code_sets:
        for c in codes:
            freq[c] += 1.0
    return freq


# ---------------------------------------------------------------------------
# gradient contributions


def gradient_contribution(model: PredictorModel, records, task: str | None = None) -> np.ndarray:
    """Normalized per-view share of the fused-loss gradient.

    The gradient of the fused-head loss is taken at the fused head's input
    and its L2 norm per view slice is normalized to sum to one.
    """
    out = model.forward_batch(records, task)
    if out is None:
        raise DomainError("gradient_contribution: batch has no samples")
    loss = task_loss(out.fused_logits, out.labels, task or model.task)
    model.store.zero_grad()
    ad.backward(loss)
    g = out.fused_input.grad
    if g is None:
        raise DomainError("gradient_contribution: no gradient reached the fused input")
    d = model.hyper.d_tilde
    norms = np.array([np.linalg.norm(g[:, k * d:(k + 1) * d]) for k in range(N_VIEWS)])
    total = norms.sum()
    if total == 0.0:
        raise DomainError("gradient_contribution: zero total gradient")
    return norms / total


# ---------------------------------------------------------------------------
# grouped reports


def _sample_matrices(samples: Sequence[Mapping], task: str, n_labels: int):
    scores = np.array([s["scores"] for s in samples], dtype=np.float64)
    if task == "PHE":
        pred_sets = [tuple(np.flatnonzero(np.asarray(s["scores"]) > 0.5)) for s in samples]
        true_sets = [tuple(s["label"]) for s in samples]
        return pred_sets, true_sets, scores
    pred = scores.argmax(axis=1)
    true = np.array([s["label"] for s in samples], dtype=np.int64)
    return pred, true, scores


def compute_task_metrics(samples: Sequence[Mapping], task: str,
                         n_labels: int) -> dict[str, float] | None:
    """Metric dict for a sample subset; None metrics when undefined/empty."""
    if not samples:
        return None
    names = MULTILABEL_METRICS if task == "PHE" else MULTICLASS_METRICS
    try:
        a, b, scores = _sample_matrices(samples, task, n_labels)
        if task == "PHE":
            return multilabel_metrics(a, b, scores)
        return multiclass_metrics(a, b, scores)
    except MetricUndefined:
        return {name: None for name in names}


def group_report(cohort: Cohort, samples: Sequence[Mapping], task: str) -> dict:
    """Metrics overall, per missing-ratio group G1-G4 and per visit-count group.

    Samples are the per-sample prediction dumps; each is attributed to its
    patient's groups. Empty groups produce rows with null metrics.
    """
    n_labels = cohort.n_phenotypes if task == "PHE" else 10
    by_patient: dict[str, list] = {}
    for s in samples:
        by_patient.setdefault(s["patient"], []).append(s)

    missing_of = {r.patient_id: patient_missing_group(r) for r in cohort.records}
    visits_of = {r.patient_id: visit_count_group(r) for r in cohort.records}

    def collect(group_map: dict[str, str], name: str) -> list:
        return [s for pid, rows in by_patient.items()
                if group_map.get(pid) == name for s in rows]

    report = {
        "task": task,
        "overall": compute_task_metrics(list(samples), task, n_labels),
        "missing_groups": {g: compute_task_metrics(collect(missing_of, g), task, n_labels)
                           for g in ("G1", "G2", "G3", "G4")},
        "visit_groups": {g: compute_task_metrics(collect(visits_of, g), task, n_labels)
                         for g in ("warm", "mid", "cold")},
    }
    return report


def report_rows(report: dict) -> list[tuple[str, str, float | None]]:
    """Flatten a group report to (group, metric, value) rows for CSV."""
    rows = []
    names = MULTILABEL_METRICS if report["task"] == "PHE" else MULTICLASS_METRICS
    sections = [("overall", report["overall"])]
    sections += [(g, m) for g, m in report["missing_groups"].items()]
    sections += [(g, m) for g, m in report["visit_groups"].items()]
    for group, metrics in sections:
        for name in names:
            rows.append((group, name, None if metrics is None else metrics[name]))
    return rows
