"""Synthetic populations: abilities, item parameters, ground truth, noisy AI scores.

Every random draw is keyed by (seed, stream tag, student, part), so cell
draws are independent of evaluation order: permuting the roster permutes the
rows of the output and nothing else. Stochastic rounding onto the
quarter-point grid keeps E[score] equal to the model probability, which is
what makes these populations usable as an unbiased recovery oracle.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ValidationError
from .exam import ExamSpec, Part, Problem, ProblemType, Provenance, ScoreMatrix

_TAG_THETA = 1
_TAG_ITEM = 2
_TAG_TRUTH = 3
_TAG_NOISE = 4
_TAG_LATENCY = 5


def _part_key(part_id: str) -> int:
    digest = hashlib.sha256(part_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def cell_rng(seed: int, tag: int, student: int, part_id: str = "") -> np.random.Generator:
    """Independent generator for one (seed, stream, student, part) cell."""
    entropy = [int(seed), int(tag), int(student)]
    if part_id:
        entropy.append(_part_key(part_id))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _round_to_grid(target_points: float, max_q: int, rng: np.random.Generator) -> float:
    """Stochastic rounding onto the quarter grid, preserving the mean."""
    x = target_points * 4.0
    x = min(max(x, 0.0), float(max_q))
    lower = np.floor(x)
    frac = x - lower
    q = int(lower) + int(rng.random() < frac)
    return q / 4.0


#: Discrimination box of the default fit configuration; populations must stay
#: inside it or recovery tests would chase unreachable parameters.
FIT_A_BOUNDS = (0.1, 5.0)


@dataclass(frozen=True)
class PopulationSpec:
    num_students: int
    parts: tuple[Part, ...]
    a_range: tuple[float, float] = (0.5, 2.5)
    b_range: tuple[float, float] = (-2.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_students < 1:
            raise ValidationError("population needs at least one student")
        if not self.parts:
            raise ValidationError("population needs at least one part")
        if not FIT_A_BOUNDS[0] <= self.a_range[0] <= self.a_range[1] <= FIT_A_BOUNDS[1]:
            raise ValidationError(
                f"discrimination range {self.a_range} outside the fittable box {FIT_A_BOUNDS}"
            )

    @classmethod
    def from_exam(cls, spec: ExamSpec, num_students: int, seed: int = 0, **kw) -> "PopulationSpec":
        return cls(num_students, spec.parts, seed=seed, **kw)


@dataclass(frozen=True, eq=False)
class Population:
    theta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    expected: np.ndarray  # model probabilities per (student, part)
    truth: ScoreMatrix


def _logistic(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(np.clip(-z, -500, 500)))


def population_exam_spec(pspec: PopulationSpec, exam_id: str = "synthetic") -> ExamSpec:
    """Wrap a population's parts in a minimal one-problem-per-prefix exam spec."""
    groups: dict[str, list[Part]] = {}
    for part in pspec.parts:
        groups.setdefault(part.part_id.split("-", 1)[0], []).append(part)
    problems = tuple(Problem(pid, tuple(parts)) for pid, parts in groups.items())
    total_q = sum(p.max_points_q for p in pspec.parts)
    page_count = max(p.page for p in pspec.parts)
    rubric = {page: f"rubric-{page:02d}" for page in range(1, page_count + 1)}
    return ExamSpec(exam_id, problems, total_q, page_count, rubric)


def generate_population(pspec: PopulationSpec) -> Population:
    """Draw abilities and item parameters, then realize grid-valued ground truth.

    theta_i ~ N(0, 1); a_j, b_j uniform in their ranges; each cell's expected
    normalized score comes from the two-parameter logistic curve and is
    realized onto the part's quarter grid by stochastic rounding.
    """
    students = tuple(range(1, pspec.num_students + 1))
    theta = np.array(
        [cell_rng(pspec.seed, _TAG_THETA, s).standard_normal() for s in students]
    )
    a = np.empty(len(pspec.parts))
    b = np.empty(len(pspec.parts))
    for j, part in enumerate(pspec.parts):
        rng = cell_rng(pspec.seed, _TAG_ITEM, 0, part.part_id)
        a[j] = rng.uniform(*pspec.a_range)
        b[j] = rng.uniform(*pspec.b_range)
    expected = _logistic(a[None, :] * (theta[:, None] - b[None, :]))
    values = np.empty((len(students), len(pspec.parts)))
    for i, s in enumerate(students):
        for j, part in enumerate(pspec.parts):
            rng = cell_rng(pspec.seed, _TAG_TRUTH, s, part.part_id)
            values[i, j] = _round_to_grid(expected[i, j] * part.max_points, part.max_points_q, rng)
    spec = population_exam_spec(pspec)
    truth = ScoreMatrix.build(students, spec.part_ids, values, Provenance.SYNTHETIC, spec)
    return Population(theta, a, b, expected, truth)


@dataclass(frozen=True)
class NoiseSpec:
    """Per-type disagreement model for a simulated grader.

    ``agreement`` is the probability of reproducing the true value exactly.
    ``deviation`` controls the draw when disagreeing: "uniform_other" picks a
    different grid value uniformly, "uniform" picks any grid value, and a
    mapping of quarter-step offsets to weights shifts the true value.
    Anomaly rates inject raw scores above the maximum or below zero.
    """

    agreement: float = 1.0
    deviation: str | Mapping[int, float] = "uniform_other"
    over_max_rate: float = 0.0
    negative_rate: float = 0.0

    def __post_init__(self):
        for name in ("agreement", "over_max_rate", "negative_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if self.over_max_rate + self.negative_rate > 1.0:
            raise ValidationError("anomaly rates sum above 1")


@dataclass(frozen=True)
class NoiseModel:
    default: NoiseSpec = NoiseSpec()
    per_type: Mapping[ProblemType, NoiseSpec] = field(default_factory=dict)

    def spec_for(self, ptype: ProblemType) -> NoiseSpec:
        return self.per_type.get(ptype, self.default)

    @classmethod
    def from_json(cls, text: str) -> "NoiseModel":
        doc = json.loads(text)
        default = NoiseSpec(**_decode_noise(doc.get("default", {})))
        per_type = {
            ProblemType(name): NoiseSpec(**_decode_noise(fields))
            for name, fields in doc.get("per_type", {}).items()
        }
        return cls(default, per_type)


def _decode_noise(fields: dict) -> dict:
    out = dict(fields)
    dev = out.get("deviation")
    if isinstance(dev, dict):
        out["deviation"] = {int(k): float(v) for k, v in dev.items()}
    return out


#: Disagreement rates loosely calibrated to observed per-type exact-match
#: accuracy of multimodal graders: graphics-heavy formats disagree most.
DEFAULT_NOISE = NoiseModel(
    default=NoiseSpec(agreement=0.65, over_max_rate=3 / 13616, negative_rate=3 / 13616),
    per_type={
        ProblemType.LONG_ANSWER: NoiseSpec(agreement=0.80),
        ProblemType.SHORT_ANSWER: NoiseSpec(agreement=0.74),
        ProblemType.REACTION: NoiseSpec(agreement=0.66),
        ProblemType.MULTIPLE_CHOICE: NoiseSpec(agreement=0.69),
        ProblemType.NUMERICAL: NoiseSpec(agreement=0.65),
        ProblemType.SYMBOLIC: NoiseSpec(agreement=0.65),
        ProblemType.COMBINATION: NoiseSpec(agreement=0.36),
        ProblemType.DRAWING: NoiseSpec(agreement=0.56),
        ProblemType.GRAPHING: NoiseSpec(agreement=0.33),
    },
)


def noisy_value(
    true_points: float,
    part: Part,
    noise: NoiseSpec,
    seed: int,
    student: int,
) -> float:
    """Deterministic noisy judgment for one cell, keyed by (seed, student, part)."""
    rng = cell_rng(seed, _TAG_NOISE, student, part.part_id)
    max_q = part.max_points_q
    true_q = int(round(true_points * 4))
    u = rng.random()
    if u < noise.over_max_rate:
        return (max_q + 1) / 4.0
    if u < noise.over_max_rate + noise.negative_rate:
        return -0.25
    if rng.random() < noise.agreement:
        return true_points
    dev = noise.deviation
    if dev == "uniform":
        return int(rng.integers(0, max_q + 1)) / 4.0
    if dev == "uniform_other":
        k = int(rng.integers(0, max_q))
        return (k if k < true_q else k + 1) / 4.0
    offsets = sorted(dev)
    weights = np.array([dev[o] for o in offsets], dtype=float)
    weights = weights / weights.sum()
    off = int(rng.choice(offsets, p=weights))
    q = min(max(true_q + off, 0), max_q)
    return q / 4.0


def apply_noise(truth: ScoreMatrix, spec: ExamSpec, noise: NoiseModel, seed: int) -> ScoreMatrix:
    """Perturb ground truth into an AI-provenance matrix, cell by cell.

    Absent cells stay absent. Injected out-of-range values are kept raw and
    surface in the result's anomaly list.
    """
    values = np.full_like(truth.values, np.nan)
    for j, part_id in enumerate(truth.parts):
        part = spec.part(part_id)
        nspec = noise.spec_for(part.ptype)
        col = truth.values[:, j]
        for i in np.flatnonzero(~np.isnan(col)):
            values[i, j] = noisy_value(float(col[i]), part, nspec, seed, truth.students[i])
    return ScoreMatrix.build(truth.students, truth.parts, values, Provenance.AI_RAW, spec)


def simulated_latency_ms(seed: int, student: int, page_no: int) -> float:
    """Deterministic pseudo-latency for simulated transactions (50-60 s band)."""
    rng = cell_rng(seed, _TAG_LATENCY, student, f"page-{page_no}")
    return float(rng.integers(50_000, 60_000))


def reference_exam_spec() -> ExamSpec:
    """A full-scale exam layout: 6 problems, 46 parts, 60 points, 15 pages.

    Part types mirror a realistic mix (numerical-heavy, a couple of graphical
    parts, four combination parts with non-graphical constituents).
    """
    T = ProblemType
    layout = [
        ("1", [
            ("1-A-a", "1.5", T.NUMERICAL, 1),
            ("1-A-b", "1.0", T.SHORT_ANSWER, 1),
            ("1-B-a", "2.0", T.NUMERICAL, 1),
            ("1-B-b", "1.5", T.REACTION, 2),
            ("1-C-a", "1.0", T.MULTIPLE_CHOICE, 2),
            ("1-C-b", "2.0", T.NUMERICAL, 2),
            ("1-D-a", "1.5", T.LONG_ANSWER, 3),
            ("1-D-b", "1.5", (T.SHORT_ANSWER, T.NUMERICAL), 3),
        ]),
        ("2", [
            ("2-A-a", "1.5", T.GRAPHING, 4),
            ("2-A-b", "1.5", T.NUMERICAL, 4),
            ("2-B-a", "1.5", T.NUMERICAL, 4),
            ("2-B-b", "1.0", T.MULTIPLE_CHOICE, 5),
            ("2-C-a", "1.5", T.SYMBOLIC, 5),
            ("2-C-b", "2.0", T.NUMERICAL, 5),
            ("2-D-a", "1.0", T.MULTIPLE_CHOICE, 6),
            ("2-D-b", "1.5", T.NUMERICAL, 6),
            ("2-D-c", "1.5", T.SHORT_ANSWER, 6),
        ]),
        ("3", [
            ("3-A-a", "1.5", T.NUMERICAL, 7),
            ("3-A-b", "1.5", T.NUMERICAL, 7),
            ("3-B-a", "1.0", T.MULTIPLE_CHOICE, 7),
            ("3-B-b", "1.5", T.NUMERICAL, 8),
            ("3-C-a", "1.25", T.SYMBOLIC, 8),
            ("3-C-b", "1.25", T.SYMBOLIC, 8),
        ]),
        ("4", [
            ("4-A-a", "1.0", T.NUMERICAL, 9),
            ("4-A-b", "1.0", T.NUMERICAL, 9),
            ("4-B-a", "1.0", T.MULTIPLE_CHOICE, 9),
            ("4-B-b", "1.0", T.SHORT_ANSWER, 9),
            ("4-C-a", "1.0", T.NUMERICAL, 10),
            ("4-C-b", "1.0", T.SHORT_ANSWER, 10),
            ("4-D-a", "1.0", T.MULTIPLE_CHOICE, 10),
            ("4-D-b", "1.0", (T.SHORT_ANSWER, T.NUMERICAL), 11),
            ("4-E-a", "1.0", T.NUMERICAL, 11),
            ("4-E-b", "1.0", T.SHORT_ANSWER, 11),
        ]),
        ("5", [
            ("5-A-a", "1.5", T.REACTION, 12),
            ("5-A-b", "1.25", T.NUMERICAL, 12),
            ("5-B-a", "1.0", T.MULTIPLE_CHOICE, 12),
            ("5-B-b", "1.25", T.NUMERICAL, 13),
            ("5-C-a", "1.0", T.REACTION, 13),
            ("5-C-b", "1.0", T.NUMERICAL, 13),
        ]),
        ("6", [
            ("6-A", "2.0", T.MULTIPLE_CHOICE, 14),
            ("6-B-a", "1.5", T.NUMERICAL, 14),
            ("6-B-b", "1.5", (T.SHORT_ANSWER, T.SYMBOLIC), 14),
            ("6-C-a", "1.5", T.SHORT_ANSWER, 15),
            ("6-C-b", "1.0", T.DRAWING, 15),
            ("6-D-a", "1.25", T.MULTIPLE_CHOICE, 15),
            ("6-D-b", "1.25", (T.MULTIPLE_CHOICE, T.SHORT_ANSWER), 15),
        ]),
    ]
    problems = []
    for problem_id, rows in layout:
        parts = []
        for pid, points, ptype, page in rows:
            if isinstance(ptype, tuple):
                parts.append(
                    Part(pid, int(float(points) * 4), ProblemType.COMBINATION, page, frozenset(ptype))
                )
            else:
                parts.append(Part(pid, int(float(points) * 4), ptype, page))
        problems.append(Problem(problem_id, tuple(parts)))
    rubric = {page: f"rubric-{page:02d}" for page in range(1, 16)}
    return ExamSpec("genchem-final", tuple(problems), 240, 15, rubric)
