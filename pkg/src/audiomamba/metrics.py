"""Evaluation metrics: per-class AP / ROC AUC, their class means, the
d-prime separation index, and single-label F1 / accuracy.

AP is the standard normalized form (sum of precision-at-hit divided by the
number of positives). AUC is computed from rank statistics and equals the
all-pairs probability P(score_pos > score_neg) + 0.5 * P(tie) exactly.
d-prime is sqrt(2) * probit(AUC) under the equal-variance Gaussian model;
the two-distribution mean/variance form is also provided.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

D_PRIME_CLAMP = 10.0


class UndefinedMetricError(ValueError):
    """The metric is undefined for this label distribution (e.g. no positives)."""


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Normalized average precision; stable original order breaks score ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores/labels length mismatch: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision undefined with zero positives")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at_hit = hits[ranked == 1] / ranks[ranked == 1]
    return float(precision_at_hit.sum() / n_pos)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC via midranks; exact under ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC undefined without both positives and negatives")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    # midranks over tie groups
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# Acklam's rational approximation to the inverse normal CDF (|err| < 1.2e-9).
_PPF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
          1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_PPF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
          6.680131188771972e+01, -1.328068155288572e+01)
_PPF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
          -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_PPF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
          3.754408661907416e+00)


def norm_ppf(p: float) -> float:
    """Inverse standard-normal CDF, rational approximation accurate to ~1e-9."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probit argument must lie in (0,1), got {p}")
    p_low, p_high = 0.02425, 1.0 - 0.02425
    a, b, c, d = _PPF_A, _PPF_B, _PPF_C, _PPF_D
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= p_high:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # one Halley refinement step
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def d_prime(auc: float) -> float:
    """Separation index from AUC under the equal-variance Gaussian model."""
    if auc <= 0.0 or auc >= 1.0:
        warnings.warn(f"AUC {auc} at the boundary; clamping d-prime to +/-{D_PRIME_CLAMP}")
        return D_PRIME_CLAMP if auc >= 1.0 else -D_PRIME_CLAMP
    return math.sqrt(2.0) * norm_ppf(auc)


def d_prime_gaussian(mu1: float, mu2: float, sigma1: float, sigma2: float) -> float:
    """Signal/noise separation: (mu1 - mu2) / sqrt((s1^2 + s2^2) / 2)."""
    denom_sq = (sigma1 ** 2 + sigma2 ** 2) / 2.0
    if denom_sq <= 0.0:
        raise ValueError("average variance must be positive")
    return (mu1 - mu2) / math.sqrt(denom_sq)


def f1_and_accuracy(pred_classes: Sequence[int], true_classes: Sequence[int],
                    n_classes: int) -> tuple[float, float, float]:
    """(micro-F1, macro-F1, accuracy) for single-label multiclass predictions.

    Classes absent from both predictions and truth contribute an F1 of 0 to
    the macro mean. Micro-F1 coincides with accuracy in this setting.
    """
    pred = np.asarray(pred_classes)
    true = np.asarray(true_classes)
    if pred.shape != true.shape:
        raise ValueError(f"prediction/truth length mismatch: {pred.shape} vs {true.shape}")
    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    fn = np.zeros(n_classes)
    for c in range(n_classes):
        tp[c] = np.sum((pred == c) & (true == c))
        fp[c] = np.sum((pred == c) & (true != c))
        fn[c] = np.sum((pred != c) & (true == c))
    micro_p = tp.sum() / max(1.0, tp.sum() + fp.sum())
    micro_r = tp.sum() / max(1.0, tp.sum() + fn.sum())
    f1_micro = 0.0 if micro_p + micro_r == 0 else 2 * micro_p * micro_r / (micro_p + micro_r)
    per_class = np.where(2 * tp + fp + fn > 0, 2 * tp / np.maximum(1e-12, 2 * tp + fp + fn), 0.0)
    f1_macro = float(per_class.mean())
    accuracy = float(np.mean(pred == true))
    return float(f1_micro), f1_macro, accuracy


@dataclass
class EvalReport:
    """Per-class and aggregate metrics with a diffable fixed-format rendering."""

    n_examples: int
    n_classes: int
    per_class_ap: list = field(default_factory=list)
    per_class_auc: list = field(default_factory=list)
    mAP: float = float("nan")
    mAUC: float = float("nan")
    d_prime: float = float("nan")
    excluded_classes: list = field(default_factory=list)
    f1_micro: Optional[float] = None
    f1_macro: Optional[float] = None
    accuracy: Optional[float] = None

    def to_text(self, per_class: bool = True) -> str:
        lines = [
            f"n_examples {self.n_examples}",
            f"n_classes {self.n_classes}",
            f"n_excluded_classes {len(self.excluded_classes)}",
            f"mAP {self.mAP:.6f}",
            f"mAUC {self.mAUC:.6f}",
            f"d_prime {self.d_prime:.6f}",
        ]
        if self.f1_micro is not None:
            lines.append(f"f1_micro {self.f1_micro:.6f}")
            lines.append(f"f1_macro {self.f1_macro:.6f}")
            lines.append(f"accuracy {self.accuracy:.6f}")
        if per_class:
            for c, (ap, auc) in enumerate(zip(self.per_class_ap, self.per_class_auc)):
                lines.append(f"class {c} ap {ap:.6f} auc {auc:.6f}")
        return "\n".join(lines) + "\n"


def multilabel_report(scores: np.ndarray, labels: np.ndarray) -> EvalReport:
    """Class-averaged AP / AUC / d-prime over scores [N, C], binary labels [N, C].

    Classes without both a positive and a negative example are excluded from
    the means and listed in the report.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores/labels shape mismatch: {scores.shape} vs {labels.shape}")
    n, c = scores.shape
    aps, aucs, excluded = [], [], []
    per_ap = [float("nan")] * c
    per_auc = [float("nan")] * c
    for j in range(c):
        try:
            ap = average_precision(scores[:, j], labels[:, j])
            auc = roc_auc(scores[:, j], labels[:, j])
        except UndefinedMetricError:
            excluded.append(j)
            continue
        per_ap[j] = ap
        per_auc[j] = auc
        aps.append(ap)
        aucs.append(auc)
    m_ap = float(np.mean(aps)) if aps else float("nan")
    m_auc = float(np.mean(aucs)) if aucs else float("nan")
    dp = d_prime(m_auc) if aucs else float("nan")
    return EvalReport(n_examples=n, n_classes=c, per_class_ap=per_ap,
                      per_class_auc=per_auc, mAP=m_ap, mAUC=m_auc, d_prime=dp,
                      excluded_classes=excluded)


def singlelabel_report(logits: np.ndarray, true_classes: Sequence[int],
                       n_classes: int) -> EvalReport:
    """Argmax-protocol report: F1 micro/macro and accuracy, plus the
    multilabel metrics computed on one-hot targets."""
    logits = np.asarray(logits, dtype=np.float64)
    true = np.asarray(true_classes)
    onehot = np.zeros((len(true), n_classes), dtype=np.int64)
    onehot[np.arange(len(true)), true] = 1
    rep = multilabel_report(logits, onehot)
    pred = logits.argmax(axis=1)
    rep.f1_micro, rep.f1_macro, rep.accuracy = f1_and_accuracy(pred, true, n_classes)
    return rep
