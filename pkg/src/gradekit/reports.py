"""Report tables: threshold sweeps, per-type quality rows, risk heatmap export.

All outputs are plain delimited text, byte-stable for identical inputs; plots
are rendered elsewhere from these files.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .exam import ExamSpec, Anomaly, ProblemType, ScoreMatrix, normalize
from .filters import (
    DecisionManifest,
    PartialCreditFilterConfig,
    RiskFilterConfig,
    partial_credit_filter,
    risk_filter,
)
from .irt import IrtModel, RiskMatrix, expected_scores, risk_matrix
from .metrics import (
    binary_report,
    multiclass_report,
    ols_regression,
    paired_totals,
)

#: Cell sentinel marking judgments above the available maximum in heatmaps;
#: sits outside the [0, 1] risk range so plots can color it separately.
HEATMAP_ANOMALY_SENTINEL = -1.0


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    accepted_fraction: float
    accuracy: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    slope: Optional[float] = None
    offset: Optional[float] = None
    r_squared: Optional[float] = None


@dataclass(frozen=True)
class SweepResult:
    kind: str  # "partial-credit" | "risk"
    rows: tuple[SweepRow, ...]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        if self.kind == "partial-credit":
            writer.writerow(["threshold", "accepted_fraction", "accuracy", "precision", "recall", "f1"])
            for r in self.rows:
                writer.writerow(
                    [_fmt(r.threshold), _fmt(r.accepted_fraction), _fmt(r.accuracy),
                     _fmt(r.precision), _fmt(r.recall), _fmt(r.f1)]
                )
        else:
            writer.writerow(["threshold", "accepted_fraction", "slope", "offset", "r_squared"])
            for r in self.rows:
                writer.writerow(
                    [_fmt(r.threshold), _fmt(r.accepted_fraction), _fmt(r.slope),
                     _fmt(r.offset), _fmt(r.r_squared)]
                )
        return out.getvalue()


def run_sweep(
    ai: ScoreMatrix,
    truth: ScoreMatrix,
    spec: ExamSpec,
    kind: str,
    thresholds: Sequence[float],
    model: IrtModel | None = None,
) -> SweepResult:
    """One row per threshold, computed on that threshold's accepted subset.

    Partial-credit sweeps binarize at the same threshold used to filter and
    tabulate binary agreement; risk sweeps regress accepted AI totals on
    ground-truth totals. Acceptance must move monotonically with the
    threshold (down for credit, up for risk) or the sweep aborts: a violation
    would mean the filters themselves are broken.
    """
    thresholds = [float(t) for t in thresholds]
    if any(t2 <= t1 for t1, t2 in zip(thresholds, thresholds[1:])):
        raise ValidationError("thresholds must be strictly increasing")
    ai_norm = normalize(ai, spec)
    truth_norm = normalize(truth, spec)
    rows = []
    if kind == "partial-credit":
        for t in thresholds:
            manifest = partial_credit_filter(ai_norm, PartialCreditFilterConfig(t))
            try:
                rep = binary_report(ai_norm, truth_norm, t, selection=manifest)
                rows.append(
                    SweepRow(t, manifest.acceptance_fraction, rep.accuracy, rep.precision,
                             rep.recall, rep.f1)
                )
            except UndefinedMetricError:
                rows.append(SweepRow(t, manifest.acceptance_fraction))
        fractions = [r.accepted_fraction for r in rows]
        if any(f2 > f1 + 1e-12 for f1, f2 in zip(fractions, fractions[1:])):
            raise ValidationError("acceptance increased with a stricter credit threshold")
    elif kind == "risk":
        if model is None:
            raise ValidationError("risk sweep needs a fitted model")
        risks = risk_matrix(ai_norm, expected_scores(model))
        for r in thresholds:
            manifest = risk_filter(risks, RiskFilterConfig(r))
            try:
                _, xs, ys = paired_totals(ai, truth, manifest)
                reg = ols_regression(xs, ys)
                rows.append(
                    SweepRow(r, manifest.acceptance_fraction, slope=reg.slope,
                             offset=reg.offset, r_squared=reg.r_squared)
                )
            except UndefinedMetricError:
                rows.append(SweepRow(r, manifest.acceptance_fraction))
        fractions = [r.accepted_fraction for r in rows]
        if any(f2 < f1 - 1e-12 for f1, f2 in zip(fractions, fractions[1:])):
            raise ValidationError("acceptance decreased with a looser risk threshold")
    else:
        raise ValidationError(f"unknown sweep kind: {kind}")
    return SweepResult(kind, tuple(rows))


@dataclass(frozen=True)
class TypeQualityRow:
    type_label: str
    parts: int
    samples: int
    classes: int
    accuracy: float  # exact-match proportion; macro accuracy is in the report
    precision: float
    recall: float
    f1: float
    normed_f1: float


def quality_by_type(
    ai: ScoreMatrix,
    truth: ScoreMatrix,
    spec: ExamSpec,
    selection: DecisionManifest | None = None,
) -> tuple[TypeQualityRow, ...]:
    """Quality rows per problem type plus All, sorted by descending normed F1.

    The Accuracy column is the exact-match proportion; macro precision,
    recall, and F1 average per-class scores with zero-denominator classes
    contributing 0. Types with no selected samples are omitted.
    """
    groups: list[tuple[str, set[str]]] = [("All", set(spec.part_ids))]
    for ptype in ProblemType:
        part_ids = {p.part_id for p in spec.parts if p.ptype is ptype}
        if part_ids:
            groups.append((ptype.label, part_ids))
    rows = []
    for label, part_ids in groups:
        restricted = (
            _restrict(selection, part_ids) if selection is not None else part_ids
        )
        try:
            rep = multiclass_report(ai, truth, restricted)
        except UndefinedMetricError:
            continue
        rows.append(
            TypeQualityRow(
                label,
                len(part_ids),
                rep.samples,
                rep.n_classes,
                rep.exact_match_accuracy,
                rep.macro_precision,
                rep.macro_recall,
                rep.macro_f1,
                rep.normed_f1,
            )
        )
    return tuple(sorted(rows, key=lambda r: (-r.normed_f1, r.type_label)))


def _restrict(manifest: DecisionManifest, part_ids: set[str]) -> DecisionManifest:
    verdicts = {
        cell: reasons for cell, reasons in manifest.verdicts.items() if cell[1] in part_ids
    }
    return DecisionManifest(verdicts, manifest.filter_descriptor)


def type_quality_csv(rows: Sequence[TypeQualityRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(
        ["Type", "Parts", "Samples", "Classes", "Accuracy", "Precision", "Recall", "F1", "normed F1"]
    )
    for r in rows:
        writer.writerow(
            [r.type_label, r.parts, r.samples, r.classes, _fmt(r.accuracy),
             _fmt(r.precision), _fmt(r.recall), _fmt(r.f1), _fmt(r.normed_f1)]
        )
    return out.getvalue()


def export_risk_heatmap(
    risk: RiskMatrix,
    anomalies: Sequence[Anomaly] = (),
    ordering: Sequence[str] | None = None,
) -> str:
    """Plot-ready matrix: parts as rows, students as columns.

    Cells where the raw AI judgment exceeded the part maximum are overwritten
    with a sentinel value outside the risk range so plotting can color them
    separately; absent cells stay empty.
    """
    part_ids = list(ordering) if ordering is not None else list(risk.parts)
    unknown = [p for p in part_ids if p not in risk.parts]
    if unknown:
        raise ValidationError(f"ordering names unknown parts: {unknown}")
    over_max = {(a.student, a.part) for a in anomalies if a.kind == "over_max"}
    row_of = {p: j for j, p in enumerate(risk.parts)}
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["part", *[str(s) for s in risk.students]])
    for part in part_ids:
        j = row_of[part]
        cells = []
        for i, student in enumerate(risk.students):
            if (student, part) in over_max:
                cells.append(repr(HEATMAP_ANOMALY_SENTINEL))
                continue
            v = risk.values[i, j]
            cells.append("" if np.isnan(v) else repr(float(v)))
        writer.writerow([part, *cells])
    return out.getvalue()


def scatter_csv(students, truth_totals, ai_totals) -> str:
    """Per-student totals for external plotting: student, truth_total, ai_total."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["student", "truth_total", "ai_total"])
    for s, x, y in zip(students, truth_totals, ai_totals):
        writer.writerow([str(s), _fmt(float(x)), _fmt(float(y))])
    return out.getvalue()
