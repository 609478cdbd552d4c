"""Confidence filters over AI judgments and their composition.

Each filter produces a DecisionManifest: for every (student, part) pair an
accept verdict or a rejection carrying the tags of the filters that rejected
it. Rejected items are what gets routed to human review. Threshold
comparisons are inclusive (accept when s >= t, risk <= r). Absent scores are
always rejected as Ungraded, never silently accepted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .exam import ExamSpec, NormalizedScoreMatrix, ProblemType, ScoreMatrix
from .irt import RiskMatrix

BELOW_CREDIT = "BelowCredit"
UNGRADED = "Ungraded"
SURPRISING = "Surprising"
EXCLUDED_TYPE = "GraphicalOrExcludedType"

_ACCEPT: frozenset[str] = frozenset()


@dataclass(frozen=True)
class RiskFilterConfig:
    r: float

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValidationError(f"risk threshold must be in [0, 1], got {self.r}")


@dataclass(frozen=True)
class PartialCreditFilterConfig:
    t: float

    def __post_init__(self):
        if not 0.0 < self.t <= 1.0:
            raise ValidationError(f"credit threshold must be in (0, 1], got {self.t}")


@dataclass(frozen=True, eq=False)
class DecisionManifest:
    """Accept/reject verdicts per (student, part).

    ``verdicts`` maps each pair to a frozenset of rejection reasons; an empty
    set means accepted. Equality compares verdicts only, so composition laws
    (commutativity, idempotence) hold regardless of descriptor strings.
    """

    verdicts: Mapping[tuple[int, str], frozenset[str]]
    filter_descriptor: str

    def __eq__(self, other) -> bool:
        if not isinstance(other, DecisionManifest):
            return NotImplemented
        return self.verdicts == other.verdicts

    def accepted(self, student: int, part: str) -> bool:
        return self.verdicts[(student, part)] == _ACCEPT

    def accepted_cells(self) -> set[tuple[int, str]]:
        return {cell for cell, reasons in self.verdicts.items() if not reasons}

    @property
    def acceptance_fraction(self) -> float:
        """Accepted share of decided pairs (pairs with no score are not decided)."""
        decided = sum(1 for reasons in self.verdicts.values() if UNGRADED not in reasons)
        if decided == 0:
            return 0.0
        accepted = sum(1 for reasons in self.verdicts.values() if not reasons)
        return accepted / decided

    def reason_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for reasons in self.verdicts.values():
            for reason in reasons:
                counts[reason] = counts.get(reason, 0) + 1
        return dict(sorted(counts.items()))


def _from_mask(students, parts, accept_mask, reject_reason, ungraded_mask, descriptor):
    verdicts = {}
    for i, student in enumerate(students):
        for j, part in enumerate(parts):
            if ungraded_mask is not None and ungraded_mask[i, j]:
                verdicts[(student, part)] = frozenset({UNGRADED})
            elif accept_mask[i, j]:
                verdicts[(student, part)] = _ACCEPT
            else:
                verdicts[(student, part)] = frozenset({reject_reason})
    return DecisionManifest(verdicts, descriptor)


def partial_credit_filter(
    s: NormalizedScoreMatrix, cfg: PartialCreditFilterConfig
) -> DecisionManifest:
    """Accept judgments whose normalized credit reaches the threshold."""
    absent = ~s.present_mask()
    accept = np.where(absent, False, s.values >= cfg.t)
    return _from_mask(
        s.students, s.parts, accept, BELOW_CREDIT, absent, f"partial_credit(t={cfg.t})"
    )


def risk_filter(risk: RiskMatrix, cfg: RiskFilterConfig) -> DecisionManifest:
    """Accept judgments whose deviation from the model expectation is tolerable."""
    absent = ~risk.present_mask()
    accept = np.where(absent, False, risk.values <= cfg.r)
    return _from_mask(risk.students, risk.parts, accept, SURPRISING, absent, f"risk(r={cfg.r})")


def type_filter(
    spec: ExamSpec, excluded: Iterable[ProblemType], students: Sequence[int]
) -> DecisionManifest:
    """Reject every part whose type (or any combined constituent) is excluded."""
    excluded = frozenset(excluded)
    verdicts = {}
    rejected_parts = {
        p.part_id for p in spec.parts if any(p.involves(t) for t in excluded)
    }
    for student in students:
        for part_id in spec.part_ids:
            verdicts[(int(student), part_id)] = (
                frozenset({EXCLUDED_TYPE}) if part_id in rejected_parts else _ACCEPT
            )
    names = ",".join(sorted(t.value for t in excluded))
    return DecisionManifest(verdicts, f"type_filter(excluded={names})")


def accept_all(students: Sequence[int], parts: Sequence[str]) -> DecisionManifest:
    verdicts = {(int(s), p): _ACCEPT for s in students for p in parts}
    return DecisionManifest(verdicts, "accept_all")


def compose(manifests: Sequence[DecisionManifest]) -> DecisionManifest:
    """Accept only where every input accepts; rejection reasons are unioned."""
    if not manifests:
        raise ValidationError("compose needs at least one manifest")
    domain = set(manifests[0].verdicts)
    for m in manifests[1:]:
        if set(m.verdicts) != domain:
            raise ValidationError("manifest domains differ; cannot compose")
    verdicts = {}
    for cell in domain:
        reasons = frozenset().union(*(m.verdicts[cell] for m in manifests))
        verdicts[cell] = reasons
    descriptor = " & ".join(sorted({m.filter_descriptor for m in manifests}))
    return DecisionManifest(verdicts, descriptor)


def export_review_manifest(
    manifest: DecisionManifest, ai: ScoreMatrix, spec: ExamSpec
) -> str:
    """The hand-off table for human graders, ordered by (student, part)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["student", "part", "verdict", "reasons", "ai_points", "max_points"])
    part_order = {p: j for j, p in enumerate(spec.part_ids)}
    for (student, part) in sorted(manifest.verdicts, key=lambda c: (c[0], part_order.get(c[1], 1 << 30), c[1])):
        reasons = manifest.verdicts[(student, part)]
        try:
            value = ai.value(student, part)
        except KeyError:
            value = None
        writer.writerow(
            [
                str(student),
                part,
                "accepted" if not reasons else "rejected",
                ";".join(sorted(reasons)),
                "" if value is None else repr(value),
                repr(spec.max_points_of(part)),
            ]
        )
    return out.getvalue()


def load_review_manifest(text: str) -> DecisionManifest:
    """Rebuild a DecisionManifest from its exported form."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:4] != ["student", "part", "verdict", "reasons"]:
        raise ValidationError("not a review manifest")
    verdicts = {}
    for row in rows[1:]:
        if not row:
            continue
        student, part, verdict, reasons = int(row[0]), row[1], row[2], row[3]
        verdicts[(student, part)] = (
            _ACCEPT if verdict == "accepted" else frozenset(reasons.split(";"))
        )
    return DecisionManifest(verdicts, "loaded")
