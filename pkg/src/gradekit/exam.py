"""Exam structure, score matrices, and score normalization.

Points live on a quarter-point grid and are held internally as integer
quarter-point units, so grid and total checks are exact (no float drift).
All types are immutable after construction and safe to share across threads.
"""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from enum import Enum
from functools import cached_property
from typing import Mapping

import numpy as np

from .errors import ScoreTableError, SpecValidationError, ValidationError

_PART_ID_RE = re.compile(r"^[0-9]+(-[A-Za-z0-9]+){1,2}$")


class ProblemType(Enum):
    DRAWING = "drawing"
    GRAPHING = "graphing"
    LONG_ANSWER = "long_answer"
    MULTIPLE_CHOICE = "multiple_choice"
    NUMERICAL = "numerical"
    REACTION = "reaction"
    SHORT_ANSWER = "short_answer"
    SYMBOLIC = "symbolic"
    COMBINATION = "combination"

    @property
    def label(self) -> str:
        """Display name used in report tables, e.g. ``Long Answer``."""
        return self.value.replace("_", " ").title()


GRAPHICAL_TYPES = frozenset({ProblemType.DRAWING, ProblemType.GRAPHING})


def points_to_quarters(value) -> int:
    """Convert a point value to integer quarter-point units.

    Accepts int, float, Decimal, or str. Raises ValueError if the value is
    not an exact multiple of 0.25.
    """
    try:
        dec = Decimal(str(value))
    except InvalidOperation:
        raise ValueError(f"not a number: {value!r}") from None
    quarters = dec * 4
    if quarters != quarters.to_integral_value():
        raise ValueError(f"{value} is not on the quarter-point grid")
    return int(quarters)


@dataclass(frozen=True)
class Part:
    part_id: str
    max_points_q: int
    ptype: ProblemType
    page: int
    constituents: frozenset[ProblemType] = frozenset()

    @property
    def max_points(self) -> float:
        return self.max_points_q / 4.0

    def involves(self, ptype: ProblemType) -> bool:
        """True if this part is of ``ptype`` or combines it with others."""
        return self.ptype is ptype or ptype in self.constituents


@dataclass(frozen=True)
class Problem:
    problem_id: str
    parts: tuple[Part, ...]


@dataclass(frozen=True)
class ExamSpec:
    exam_id: str
    problems: tuple[Problem, ...]
    declared_total_q: int
    page_count: int
    rubric_pages: Mapping[int, str]

    @property
    def declared_total_points(self) -> float:
        return self.declared_total_q / 4.0

    @cached_property
    def parts(self) -> tuple[Part, ...]:
        return tuple(p for problem in self.problems for p in problem.parts)

    @cached_property
    def part_ids(self) -> tuple[str, ...]:
        return tuple(p.part_id for p in self.parts)

    @cached_property
    def _by_id(self) -> dict[str, Part]:
        return {p.part_id: p for p in self.parts}

    @cached_property
    def _by_page(self) -> dict[int, tuple[str, ...]]:
        pages: dict[int, list[str]] = {}
        for p in self.parts:
            pages.setdefault(p.page, []).append(p.part_id)
        return {page: tuple(ids) for page, ids in pages.items()}

    def part(self, part_id: str) -> Part:
        try:
            return self._by_id[part_id]
        except KeyError:
            raise ValidationError(f"unknown part: {part_id}") from None

    def has_part(self, part_id: str) -> bool:
        return part_id in self._by_id

    def parts_on_page(self, page_no: int) -> tuple[str, ...]:
        return self._by_page.get(page_no, ())

    def max_points_of(self, part_id: str) -> float:
        return self.part(part_id).max_points

    def problem_of(self, part_id: str) -> str:
        return self.part(part_id).part_id.split("-", 1)[0]

    def to_json(self) -> str:
        doc = {
            "exam_id": self.exam_id,
            "total_points": self.declared_total_q / 4.0,
            "pages": self.page_count,
            "rubric_pages": {str(k): v for k, v in sorted(self.rubric_pages.items())},
            "problems": [
                {
                    "id": problem.problem_id,
                    "parts": [
                        {
                            "id": p.part_id,
                            "max_points": p.max_points,
                            "type": p.ptype.value
                            if p.ptype is not ProblemType.COMBINATION
                            else sorted(c.value for c in p.constituents),
                            "page": p.page,
                        }
                        for p in problem.parts
                    ],
                }
                for problem in self.problems
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def part_type(spec: ExamSpec, part_id: str) -> ProblemType:
    """Type of one part; raises ValidationError for an unknown id."""
    return spec.part(part_id).ptype


def _parse_type(raw, where: str, failures: list[str]):
    """Returns (ptype, constituents) or None after recording failures."""
    if isinstance(raw, str):
        try:
            ptype = ProblemType(raw)
        except ValueError:
            failures.append(f"{where}: unknown problem type {raw!r}")
            return None
        if ptype is ProblemType.COMBINATION:
            failures.append(f"{where}: combination type needs a list of constituent types")
            return None
        return ptype, frozenset()
    if isinstance(raw, list):
        if not raw:
            failures.append(f"{where}: combination type needs at least one constituent")
            return None
        constituents = set()
        for item in raw:
            try:
                sub = ProblemType(item)
            except (ValueError, TypeError):
                failures.append(f"{where}: unknown problem type {item!r}")
                return None
            if sub is ProblemType.COMBINATION:
                failures.append(f"{where}: combination cannot contain itself")
                return None
            constituents.add(sub)
        return ProblemType.COMBINATION, frozenset(constituents)
    failures.append(f"{where}: part without type")
    return None


def load_exam_spec(text: str | bytes) -> ExamSpec:
    """Parse and validate an exam spec document.

    The document is JSON shaped as
    ``{exam_id, total_points, pages, problems: [{id, parts: [{id, max_points,
    type, page}]}]}`` with an optional ``rubric_pages`` mapping. Every
    validation failure is collected; on any failure a SpecValidationError
    carrying the full list is raised.
    """
    failures: list[str] = []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecValidationError([f"document does not parse: {exc}"]) from None
    if not isinstance(doc, dict):
        raise SpecValidationError(["document is not an object"])

    exam_id = str(doc.get("exam_id", "")) or "exam"
    try:
        page_count = int(doc["pages"])
    except (KeyError, TypeError, ValueError):
        failures.append("missing or invalid page count")
        page_count = 0
    try:
        declared_total_q = points_to_quarters(doc["total_points"])
    except (KeyError, ValueError):
        failures.append("missing or invalid total_points")
        declared_total_q = -1

    problems: list[Problem] = []
    seen: set[str] = set()
    for pr in doc.get("problems", []):
        problem_id = str(pr.get("id", "?"))
        parts: list[Part] = []
        for raw in pr.get("parts", []):
            pid = str(raw.get("id", ""))
            where = f"part {pid or '<missing id>'}"
            if not _PART_ID_RE.match(pid):
                failures.append(f"{where}: id does not follow problem-section-subpart convention")
            if pid in seen:
                failures.append(f"{where}: duplicate part id")
            seen.add(pid)
            try:
                max_q = points_to_quarters(raw["max_points"])
            except (KeyError, ValueError) as exc:
                failures.append(f"{where}: invalid max_points ({exc})")
                max_q = 0
            if max_q <= 0:
                failures.append(f"{where}: max_points must be positive")
            if "type" not in raw:
                failures.append(f"{where}: part without type")
                parsed = None
            else:
                parsed = _parse_type(raw["type"], where, failures)
            ptype, constituents = parsed if parsed else (ProblemType.SHORT_ANSWER, frozenset())
            try:
                page = int(raw["page"])
            except (KeyError, TypeError, ValueError):
                failures.append(f"{where}: unmapped page")
                page = 0
            if not 1 <= page <= page_count:
                failures.append(f"{where}: page {page} outside [1, {page_count}]")
            parts.append(Part(pid, max_q, ptype, page, constituents))
        problems.append(Problem(problem_id, tuple(parts)))

    total_q = sum(p.max_points_q for problem in problems for p in problem.parts)
    if declared_total_q >= 0 and total_q != declared_total_q:
        failures.append(
            f"total-points mismatch: parts sum to {total_q / 4.0}, declared {declared_total_q / 4.0}"
        )

    rubric_pages: dict[int, str] = {}
    for key, ref in (doc.get("rubric_pages") or {}).items():
        try:
            page = int(key)
        except (TypeError, ValueError):
            failures.append(f"rubric_pages: invalid page key {key!r}")
            continue
        if not 1 <= page <= page_count:
            failures.append(f"rubric_pages: page {page} outside [1, {page_count}]")
        rubric_pages[page] = str(ref)
    for page in range(1, page_count + 1):
        rubric_pages.setdefault(page, f"rubric-{page:02d}")

    if failures:
        raise SpecValidationError(failures)
    return ExamSpec(exam_id, tuple(problems), declared_total_q, page_count, rubric_pages)


class Provenance(Enum):
    GROUND_TRUTH = "ground_truth"
    AI_RAW = "ai_raw"
    SYNTHETIC = "synthetic"


#: Provenances whose values must sit on the quarter grid within [0, max].
_STRICT = (Provenance.GROUND_TRUTH, Provenance.SYNTHETIC)


@dataclass(frozen=True)
class Anomaly:
    student: int
    part: str
    value: float
    kind: str  # "over_max" | "negative"


def _find_anomalies(students, parts, values, spec: ExamSpec) -> tuple[Anomaly, ...]:
    found = []
    for j, part_id in enumerate(parts):
        max_points = spec.max_points_of(part_id)
        col = values[:, j]
        for i in np.flatnonzero(~np.isnan(col)):
            v = float(col[i])
            if v > max_points:
                found.append(Anomaly(students[i], part_id, v, "over_max"))
            elif v < 0.0:
                found.append(Anomaly(students[i], part_id, v, "negative"))
    return tuple(found)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Students x parts points; NaN marks an absent cell (absent is not zero)."""

    students: tuple[int, ...]
    parts: tuple[str, ...]
    values: np.ndarray
    provenance: Provenance
    anomalies: tuple[Anomaly, ...] = ()

    def __post_init__(self):
        self.values.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreMatrix):
            return NotImplemented
        return (
            self.students == other.students
            and self.parts == other.parts
            and self.provenance == other.provenance
            and np.array_equal(self.values, other.values, equal_nan=True)
            and self.anomalies == other.anomalies
        )

    @cached_property
    def _student_index(self) -> dict[int, int]:
        return {s: i for i, s in enumerate(self.students)}

    @cached_property
    def _part_index(self) -> dict[str, int]:
        return {p: j for j, p in enumerate(self.parts)}

    def value(self, student: int, part: str) -> float | None:
        v = self.values[self._student_index[student], self._part_index[part]]
        return None if np.isnan(v) else float(v)

    def present_mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @classmethod
    def build(cls, students, parts, values, provenance: Provenance, spec: ExamSpec) -> "ScoreMatrix":
        """Validate and assemble a matrix against ``spec``.

        Strict provenances (ground truth, synthetic) reject out-of-range and
        off-grid values; AI provenance keeps them and flags each one in the
        anomaly list.
        """
        students = tuple(int(s) for s in students)
        parts = tuple(parts)
        values = np.asarray(values, dtype=float).reshape(len(students), len(parts))
        if len(set(students)) != len(students):
            raise ScoreTableError(["duplicate student identifier"])
        unknown = [p for p in parts if not spec.has_part(p)]
        if unknown:
            raise ScoreTableError([f"unknown part column: {p}" for p in unknown])
        if provenance in _STRICT:
            failures = []
            for j, part_id in enumerate(parts):
                max_points = spec.max_points_of(part_id)
                col = values[:, j]
                for i in np.flatnonzero(~np.isnan(col)):
                    v = float(col[i])
                    if not 0.0 <= v <= max_points:
                        failures.append(
                            f"({students[i]}, {part_id}): {v} outside [0, {max_points}]"
                        )
                    elif v * 4 != round(v * 4):
                        failures.append(f"({students[i]}, {part_id}): {v} off the quarter-point grid")
            if failures:
                raise ScoreTableError(failures)
            anomalies: tuple[Anomaly, ...] = ()
        else:
            anomalies = _find_anomalies(students, parts, values, spec)
        return cls(students, parts, values, provenance, anomalies)

    def to_csv(self) -> str:
        """Serialize to the delimited interchange format (round-trips exactly)."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["student", *self.parts])
        for i, student in enumerate(self.students):
            row = [str(student)]
            for v in self.values[i]:
                row.append("" if np.isnan(v) else repr(float(v)))
            writer.writerow(row)
        return out.getvalue()


def load_scores(text: str, spec: ExamSpec, provenance: Provenance) -> ScoreMatrix:
    """Parse a delimited score table against ``spec``.

    First column is the integer student pseudonym, remaining columns are part
    ids; an empty cell means the part is absent for that student. Every bad
    cell is collected into one ScoreTableError.
    """
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ScoreTableError(["empty score table"])
    header = rows[0]
    if len(header) < 1:
        raise ScoreTableError(["missing header row"])
    part_cols = header[1:]
    failures = [f"unknown part column: {p}" for p in part_cols if not spec.has_part(p)]
    if len(set(part_cols)) != len(part_cols):
        failures.append("duplicate part column in header")
    if failures:
        raise ScoreTableError(failures)

    col_of = {p: j for j, p in enumerate(part_cols)}
    students: list[int] = []
    values = np.full((len(rows) - 1, len(spec.part_ids)), np.nan)
    strict = provenance in _STRICT
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            student = int(row[0])
        except ValueError:
            failures.append(f"row {i}: student identifier {row[0]!r} is not an integer")
            student = -i
        students.append(student)
        for j, part_id in enumerate(spec.part_ids):
            if part_id not in col_of:
                continue
            cell = row[col_of[part_id] + 1].strip() if col_of[part_id] + 1 < len(row) else ""
            if not cell:
                continue
            try:
                dec = Decimal(cell)
            except InvalidOperation:
                failures.append(f"row {i}, part {part_id}: non-numeric cell {cell!r}")
                continue
            if strict:
                max_points = Decimal(str(spec.max_points_of(part_id)))
                if not 0 <= dec <= max_points:
                    failures.append(f"row {i}, part {part_id}: {cell} outside [0, {max_points}]")
                    continue
                if (dec * 4) != (dec * 4).to_integral_value():
                    failures.append(f"row {i}, part {part_id}: {cell} off the quarter-point grid")
                    continue
            values[len(students) - 1, j] = float(dec)
    if len(set(students)) != len(students):
        failures.append("duplicate student identifier")
    if failures:
        raise ScoreTableError(failures)
    values = values[: len(students)]
    return ScoreMatrix.build(students, spec.part_ids, values, provenance, spec)


@dataclass(frozen=True)
class ClampEntry:
    student: int
    part: str
    raw_points: float
    clamped: float


@dataclass(frozen=True, eq=False)
class NormalizedScoreMatrix:
    """Scores scaled by part maxima into [0, 1]; clamping is logged, never silent."""

    students: tuple[int, ...]
    parts: tuple[str, ...]
    values: np.ndarray
    clamp_log: tuple[ClampEntry, ...] = ()

    def __post_init__(self):
        self.values.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormalizedScoreMatrix):
            return NotImplemented
        return (
            self.students == other.students
            and self.parts == other.parts
            and np.array_equal(self.values, other.values, equal_nan=True)
            and self.clamp_log == other.clamp_log
        )

    def present_mask(self) -> np.ndarray:
        return ~np.isnan(self.values)


def normalize(matrix: ScoreMatrix, spec: ExamSpec) -> NormalizedScoreMatrix:
    """Scale each part by its maximum and clamp into [0, 1].

    Out-of-range raw values (possible for AI provenance) are clamped and
    recorded in the clamp log with their raw point value.
    """
    maxima = np.array([spec.max_points_of(p) for p in matrix.parts])
    ratios = matrix.values / maxima[None, :]
    clamped = np.clip(ratios, 0.0, 1.0)
    log = []
    for i, j in zip(*np.where(~np.isnan(ratios) & (ratios != clamped))):
        log.append(
            ClampEntry(
                matrix.students[i],
                matrix.parts[j],
                float(matrix.values[i, j]),
                float(clamped[i, j]),
            )
        )
    return NormalizedScoreMatrix(matrix.students, matrix.parts, clamped, tuple(log))
