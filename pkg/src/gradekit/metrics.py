"""Quality measures: OLS regression, macro-averaged multiclass metrics with
normed F1, and threshold-binarized binary metrics.

Conventions, stated once and applied everywhere:

* classes are the distinct point values observed in truth or prediction over
  the selected cells;
* per-class ratios with a zero denominator contribute 0 to macro averages;
* exact-match accuracy (matches / samples) is reported alongside the macro
  one-vs-rest accuracy average, and report tables use exact match;
* regression puts AI totals on the y axis against ground-truth totals on x.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .exam import NormalizedScoreMatrix, ScoreMatrix
from .filters import DecisionManifest


@dataclass(frozen=True)
class RegressionReport:
    slope: float
    offset: float
    r_squared: float
    n_points: int


@dataclass(frozen=True)
class ClassTally:
    value: float
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class ConfusionTally:
    classes: tuple[ClassTally, ...]
    samples: int

    @property
    def n(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class MulticlassReport:
    exact_match_accuracy: float
    macro_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    normed_f1: float
    n_classes: int
    samples: int


@dataclass(frozen=True)
class BinaryReport:
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float


def normed_f1(f1: float, n_classes: int) -> float:
    """Rescale macro F1 so random guessing sits at 0 and perfection at 1.

    normed_f1 = (F1 - 1/n) / (1 - 1/n). With a single class the raw and
    normed scores coincide by convention.
    """
    if n_classes < 1:
        raise UndefinedMetricError("need at least one class")
    if n_classes == 1:
        return f1
    chance = 1.0 / n_classes
    return (f1 - chance) / (1.0 - chance)


def confusion_tallies(ai: np.ndarray, truth: np.ndarray) -> ConfusionTally:
    """One-vs-rest tallies for every observed point value."""
    ai = np.asarray(ai, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if ai.shape != truth.shape:
        raise ValidationError("prediction/truth length mismatch")
    samples = ai.size
    classes = np.unique(np.concatenate([truth, ai]))
    tallies = []
    for c in classes:
        is_true = truth == c
        is_pred = ai == c
        tp = int(np.sum(is_true & is_pred))
        fp = int(np.sum(~is_true & is_pred))
        fn = int(np.sum(is_true & ~is_pred))
        tallies.append(ClassTally(float(c), tp, fp, fn, samples - tp - fp - fn))
    return ConfusionTally(tuple(tallies), samples)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def multiclass_metrics(ai: np.ndarray, truth: np.ndarray) -> MulticlassReport:
    """Macro-averaged metrics over flat prediction/truth value arrays."""
    tally = confusion_tallies(ai, truth)
    if tally.samples == 0:
        raise UndefinedMetricError("empty selection")
    if tally.samples < 2:
        raise UndefinedMetricError("a single sample is not enough for multiclass metrics")
    n = tally.n
    acc = prec = rec = f1 = 0.0
    for t in tally.classes:
        acc += (t.tp + t.tn) / tally.samples
        prec += _ratio(t.tp, t.tp + t.fp)
        rec += _ratio(t.tp, t.tp + t.fn)
        f1 += _ratio(2 * t.tp, 2 * t.tp + t.fp + t.fn)
    exact = sum(t.tp for t in tally.classes) / tally.samples
    macro_f1 = f1 / n
    return MulticlassReport(
        exact_match_accuracy=exact,
        macro_accuracy=acc / n,
        macro_precision=prec / n,
        macro_recall=rec / n,
        macro_f1=macro_f1,
        normed_f1=normed_f1(macro_f1, n),
        n_classes=n,
        samples=tally.samples,
    )


def _selected_mask(students, parts, selection) -> np.ndarray:
    mask = np.ones((len(students), len(parts)), dtype=bool)
    if selection is None:
        return mask
    if isinstance(selection, DecisionManifest):
        for i, student in enumerate(students):
            for j, part in enumerate(parts):
                mask[i, j] = selection.verdicts.get((student, part)) == frozenset()
        return mask
    wanted = set(selection)
    for j, part in enumerate(parts):
        mask[:, j] = part in wanted
    return mask


def _align(ai, truth):
    if ai.parts != truth.parts:
        raise ValidationError("matrices list different parts")
    truth_pos = {s: i for i, s in enumerate(truth.students)}
    common = [s for s in ai.students if s in truth_pos]
    if not common:
        raise ValidationError("no students in common")
    ai_pos = {s: i for i, s in enumerate(ai.students)}
    ai_rows = np.array([ai_pos[s] for s in common])
    truth_rows = np.array([truth_pos[s] for s in common])
    return common, ai_rows, truth_rows


def select_pairs(ai, truth, selection=None):
    """Flat (ai, truth) value arrays over cells present in both, row-aligned."""
    common, ai_rows, truth_rows = _align(ai, truth)
    av = ai.values[ai_rows]
    tv = truth.values[truth_rows]
    keep = ~np.isnan(av) & ~np.isnan(tv)
    keep &= _selected_mask(common, ai.parts, selection)
    return av[keep], tv[keep]


def multiclass_report(ai: ScoreMatrix, truth: ScoreMatrix, selection=None) -> MulticlassReport:
    """Macro metrics over the shared (student, part) domain of two matrices."""
    av, tv = select_pairs(ai, truth, selection)
    if av.size == 0:
        raise UndefinedMetricError("empty selection")
    return multiclass_metrics(av, tv)


def binary_metrics(ai: np.ndarray, truth: np.ndarray, t: float) -> BinaryReport:
    ai = np.asarray(ai, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if ai.size == 0:
        raise UndefinedMetricError("empty selection")
    pred = ai >= t
    actual = truth >= t
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    fn = int(np.sum(~pred & actual))
    tn = int(np.sum(~pred & ~actual))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return BinaryReport(t, tp, fp, fn, tn, (tp + tn) / ai.size, precision, recall, f1)


def binary_report(
    ai: NormalizedScoreMatrix, truth: NormalizedScoreMatrix, t: float, selection=None
) -> BinaryReport:
    """Binarize both sides at the cutoff (>= t is positive) and tally agreement."""
    if not 0.0 < t <= 1.0:
        raise ValidationError(f"cutoff must be in (0, 1], got {t}")
    av, tv = select_pairs(ai, truth, selection)
    return binary_metrics(av, tv, t)


def aggregate_totals(
    matrix: ScoreMatrix,
    manifest: DecisionManifest | None = None,
    problem: str | None = None,
) -> dict[int, float | None]:
    """Per-student point totals over accepted, present cells.

    ``problem`` restricts the sum to one problem's parts. A student with no
    contributing cells gets None (absent), never a fabricated zero.
    """
    part_idx = [
        j
        for j, p in enumerate(matrix.parts)
        if problem is None or p.split("-", 1)[0] == problem
    ]
    totals: dict[int, float | None] = {}
    for i, student in enumerate(matrix.students):
        total = 0.0
        any_cell = False
        for j in part_idx:
            v = matrix.values[i, j]
            if np.isnan(v):
                continue
            if manifest is not None and not manifest.accepted(student, matrix.parts[j]):
                continue
            total += float(v)
            any_cell = True
        totals[student] = total if any_cell else None
    return totals


def paired_totals(
    ai: ScoreMatrix,
    truth: ScoreMatrix,
    manifest: DecisionManifest | None = None,
    problem: str | None = None,
):
    """Totals over the same accepted cell set applied to both matrices.

    Only cells present in both matrices contribute, so AI and ground-truth
    totals are always sums over identical (student, part) sets. Returns
    (students, truth_totals, ai_totals) with empty-set students dropped.
    """
    common, ai_rows, truth_rows = _align(ai, truth)
    students, xs, ys = [], [], []
    part_idx = [
        j
        for j, p in enumerate(ai.parts)
        if problem is None or p.split("-", 1)[0] == problem
    ]
    for row, student in enumerate(common):
        x = y = 0.0
        any_cell = False
        for j in part_idx:
            av = ai.values[ai_rows[row], j]
            tv = truth.values[truth_rows[row], j]
            if np.isnan(av) or np.isnan(tv):
                continue
            if manifest is not None and not manifest.accepted(student, ai.parts[j]):
                continue
            y += float(av)
            x += float(tv)
            any_cell = True
        if any_cell:
            students.append(student)
            xs.append(x)
            ys.append(y)
    return students, np.array(xs), np.array(ys)


def ols_regression(x: Sequence[float], y: Sequence[float]) -> RegressionReport:
    """Least-squares line of y on x with r^2 the squared Pearson correlation.

    Pairs with an absent member are dropped first. Zero variance in x leaves
    the slope undefined (error); zero variance in y yields slope 0 with
    r^2 defined as 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = ~np.isnan(x) & ~np.isnan(y)
    x, y = x[keep], y[keep]
    if x.size < 2:
        raise UndefinedMetricError("need at least two paired points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    sxy = float(xc @ yc)
    if sxx == 0.0:
        raise UndefinedMetricError("zero variance in x; slope undefined")
    slope = sxy / sxx
    offset = float(y.mean() - slope * x.mean())
    r_squared = (sxy * sxy) / (sxx * syy) if syy > 0.0 else 0.0
    return RegressionReport(slope, offset, r_squared, int(x.size))
