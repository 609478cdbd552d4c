"""Page-by-page grading orchestration against a pluggable backend.

One transaction grades one student page against its rubric page: mint two
single-transaction URLs (student image first), submit the fixed prompt, parse
the structured response into grade records, revoke the URLs. Transactions are
dispatched across a worker pool; results are merged after a deterministic
sort, so the output is independent of scheduling. Raw awarded points are
never clamped here: out-of-range judgments stay in the matrix and are flagged
as anomalies so downstream filtering can prove itself robust against them.
"""
from __future__ import annotations

import json
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .assets import AssetStore, DEFAULT_TTL_SECONDS
from .errors import BackendError, ValidationError
from .exam import ExamSpec, Provenance, ScoreMatrix
from .synthetic import NoiseModel, noisy_value, simulated_latency_ms

SYSTEM_PROMPT = """\
You are a careful grading assistant with full image understanding.
The user message contains exactly two images, in this order:
1. student_image_url - one page of a student's handwritten exam work.
2. rubric_image_url  - the grading rubric page covering the same problem parts.

Your task:
1. Fetch and read both images completely.
2. Match every graded block on the student page to its rubric entry.
3. Apply the rubric's full-credit and partial-credit rules to the student's work.
4. Return *only* a JSON array with one object per problem part:
   {
     "problem_part": "6-C-a",
     "awarded_points": 0.75,
     "explanation": "... concise justification ..."
   }

Do not output anything besides the JSON array: no prose, no markdown fences."""

USER_TEXT = "Please grade this student page using the rubric image below."

#: Cost per token (currency units); roughly a reasoning-vision price sheet.
DEFAULT_UNIT_RATES = {"prompt": 2.75e-6, "completion": 11e-6}


@dataclass(frozen=True)
class GradingRequest:
    system_prompt: str
    user_text: str
    student_image_url: str
    rubric_image_url: str
    detail_hint: str = "auto"


@dataclass(frozen=True)
class GradeRecord:
    problem_part: str
    awarded_points: float
    explanation: str
    page_no: int
    student_pseudonym: Optional[int]
    backend_id: str
    latency_ms: float
    anomaly: Optional[str] = None  # "over_max" | "negative"


class ParseFailureKind(Enum):
    NOT_STRUCTURED = "not_structured"
    SCHEMA_VIOLATION = "schema_violation"
    PART_MISMATCH = "part_mismatch"


@dataclass(frozen=True)
class ParseFailure:
    kind: ParseFailureKind
    detail: str


@dataclass(frozen=True)
class BackendReply:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: float


class GradingBackend(Protocol):
    backend_id: str

    def submit(self, request: GradingRequest) -> BackendReply: ...


@dataclass(frozen=True)
class CostTally:
    prompt_tokens: int
    completion_tokens: int
    transactions: int
    unit_rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_UNIT_RATES))

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @property
    def estimated_cost(self) -> float:
        return (
            self.prompt_tokens * self.unit_rates["prompt"]
            + self.completion_tokens * self.unit_rates["completion"]
        )


def build_request(student_url: str, rubric_url: str) -> GradingRequest:
    """The fixed, page-independent request: student image first, rubric second."""
    if not student_url or not rubric_url:
        raise ValidationError("both image URLs must be non-empty")
    return GradingRequest(SYSTEM_PROMPT, USER_TEXT, student_url, rubric_url)


def _extract_array(text: str):
    """First well-formed JSON array in the text, or None.

    Models occasionally wrap the array in prose or markdown fences; scanning
    candidate '[' positions recovers those cases without ever accepting a
    non-array payload.
    """
    decoder = json.JSONDecoder()
    try:
        payload = json.loads(text)
        return payload if isinstance(payload, list) else None
    except json.JSONDecodeError:
        pass
    start = 0
    while True:
        idx = text.find("[", start)
        if idx < 0:
            return None
        try:
            payload, _ = decoder.raw_decode(text[idx:])
        except json.JSONDecodeError:
            start = idx + 1
            continue
        if isinstance(payload, list):
            return payload
        start = idx + 1


def parse_response(
    text: str,
    spec: ExamSpec,
    page_no: int,
    *,
    student: Optional[int] = None,
    backend_id: str = "",
    latency_ms: float = 0.0,
) -> list[GradeRecord] | ParseFailure:
    """Validate a backend response into grade records for one page.

    Over-maximum or negative awarded points are kept and flagged on the
    record, never dropped. Objects naming a part that does not belong to this
    page fail the whole response with a part-mismatch.
    """
    payload = _extract_array(text)
    if payload is None:
        return ParseFailure(ParseFailureKind.NOT_STRUCTURED, "no JSON array found in response")
    page_parts = set(spec.parts_on_page(page_no))
    records = []
    for obj in payload:
        if not isinstance(obj, dict):
            return ParseFailure(ParseFailureKind.SCHEMA_VIOLATION, f"array item is not an object: {obj!r}")
        missing = {"problem_part", "awarded_points", "explanation"} - set(obj)
        if missing:
            return ParseFailure(
                ParseFailureKind.SCHEMA_VIOLATION, f"missing keys: {sorted(missing)}"
            )
        part = obj["problem_part"]
        points = obj["awarded_points"]
        explanation = obj["explanation"]
        if not isinstance(part, str) or isinstance(points, bool) or not isinstance(points, (int, float)):
            return ParseFailure(ParseFailureKind.SCHEMA_VIOLATION, f"bad field types in {obj!r}")
        if not isinstance(explanation, str):
            return ParseFailure(ParseFailureKind.SCHEMA_VIOLATION, "explanation is not text")
        if part not in page_parts:
            return ParseFailure(
                ParseFailureKind.PART_MISMATCH, f"part {part} is not on page {page_no}"
            )
        points = float(points)
        anomaly = None
        if points > spec.max_points_of(part):
            anomaly = "over_max"
        elif points < 0:
            anomaly = "negative"
        records.append(
            GradeRecord(part, points, explanation, page_no, student, backend_id, latency_ms, anomaly)
        )
    return records


class SimulatedBackend:
    """Deterministic stand-in for a remote multimodal grader.

    Resolves the request's student-image URL back to (student, page) through
    the asset store, then emits a well-formed response whose awarded points
    are the ground truth perturbed by the per-type noise model. Same seed,
    same bytes; the backend is pure per call and safe for concurrent use.
    """

    def __init__(
        self,
        ground_truth: ScoreMatrix,
        spec: ExamSpec,
        noise: NoiseModel,
        seed: int,
        resolve: Callable[[str], object],
    ):
        self.backend_id = f"simulated-{seed}"
        self._truth = ground_truth
        self._spec = spec
        self._noise = noise
        self._seed = seed
        self._resolve = resolve

    def submit(self, request: GradingRequest) -> BackendReply:
        asset = self._resolve(request.student_image_url)
        if asset is None or asset.student_pseudonym is None:
            raise BackendError("request URL does not resolve to a student page")
        student, page = asset.student_pseudonym, asset.page_no
        objs = []
        for part_id in self._spec.parts_on_page(page):
            true_value = self._truth.value(student, part_id)
            if true_value is None:
                continue
            part = self._spec.part(part_id)
            value = noisy_value(
                true_value, part, self._noise.spec_for(part.ptype), self._seed, student
            )
            objs.append(
                {
                    "problem_part": part_id,
                    "awarded_points": value,
                    "explanation": f"rubric-based judgment for {part_id}",
                }
            )
        text = json.dumps(objs)
        prompt_tokens = 6100 + len(request.system_prompt) // 4
        completion_tokens = 180 + len(text) // 4
        return BackendReply(
            text, prompt_tokens, completion_tokens, simulated_latency_ms(self._seed, student, page)
        )


class OpenAiChatBackend:
    """Chat-completions backend reached over HTTP.

    Endpoint, model, and key come from arguments or the environment
    (GRADEKIT_BACKEND_URL, GRADEKIT_BACKEND_MODEL, GRADEKIT_BACKEND_KEY).
    The credential is never logged and never appears in reprs.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        model: str | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
        opener: Callable = urllib.request.urlopen,
    ):
        self._endpoint = endpoint or os.environ.get("GRADEKIT_BACKEND_URL", "")
        self._model = model or os.environ.get("GRADEKIT_BACKEND_MODEL", "")
        self._api_key = api_key or os.environ.get("GRADEKIT_BACKEND_KEY", "")
        self._timeout = timeout
        self._opener = opener
        if not self._endpoint or not self._model:
            raise BackendError("backend endpoint and model must be configured")
        self.backend_id = self._model

    def __repr__(self) -> str:
        return f"OpenAiChatBackend(endpoint={self._endpoint!r}, model={self._model!r})"

    def submit(self, request: GradingRequest) -> BackendReply:
        payload = {
            "model": self._model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.user_text},
                        {
                            "type": "image_url",
                            "image_url": {"url": request.student_image_url, "detail": request.detail_hint},
                        },
                        {
                            "type": "image_url",
                            "image_url": {"url": request.rubric_image_url, "detail": request.detail_hint},
                        },
                    ],
                },
            ],
        }
        req = urllib.request.Request(
            self._endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {self._api_key}",
            },
            method="POST",
        )
        started = time.monotonic()
        try:
            with self._opener(req, timeout=self._timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError, TimeoutError) as exc:
            raise BackendError(f"backend call failed: {exc}") from None
        latency_ms = (time.monotonic() - started) * 1000.0
        try:
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
        except (KeyError, IndexError, TypeError):
            raise BackendError("backend response missing choices") from None
        return BackendReply(
            text,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
            latency_ms,
        )


@dataclass(frozen=True)
class AuditRecord:
    student: int
    page: int
    attempt: int
    outcome: str
    latency_ms: float
    prompt_tokens: int
    completion_tokens: int
    duplicates: tuple[str, ...] = ()

    def to_json(self) -> str:
        doc = {
            "student": self.student,
            "page": self.page,
            "attempt": self.attempt,
            "outcome": self.outcome,
            "latency_ms": self.latency_ms,
            "tokens": {"prompt": self.prompt_tokens, "completion": self.completion_tokens},
        }
        if self.duplicates:
            doc["duplicates"] = list(self.duplicates)
        return json.dumps(doc, sort_keys=True)


@dataclass(frozen=True)
class GradingRun:
    matrix: ScoreMatrix
    audit: tuple[AuditRecord, ...]
    cost: CostTally
    grants_minted: int
    grants_revoked: int

    def audit_jsonl(self) -> str:
        lines = [rec.to_json() for rec in self.audit]
        summary = {
            "event": "summary",
            "pages": len({(r.student, r.page) for r in self.audit}),
            "ok": sum(1 for r in self.audit if r.outcome == "ok"),
            "failed_pages": len(
                {(r.student, r.page) for r in self.audit}
                - {(r.student, r.page) for r in self.audit if r.outcome == "ok"}
            ),
            "grants_minted": self.grants_minted,
            "grants_revoked": self.grants_revoked,
        }
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"


_RETRYABLE = {"transport_error", ParseFailureKind.NOT_STRUCTURED.value}


def grade_exam(
    spec: ExamSpec,
    roster: Sequence[int],
    store: AssetStore,
    backend: GradingBackend,
    parallelism: int = 1,
    retry_budget: int = 2,
    *,
    ttl: float = DEFAULT_TTL_SECONDS,
    unit_rates: dict[str, float] | None = None,
) -> GradingRun:
    """Grade every (student, page) transactionally and merge the results.

    Transport failures and unstructured responses are retried with fresh
    grants up to ``retry_budget`` extra submissions; other parse failures are
    final. Pages that never succeed leave their parts absent. Every grant is
    revoked before the transaction ends, so none outlive the run.
    """
    roster = [int(s) for s in roster]
    pages = range(1, spec.page_count + 1)
    for student in roster:
        for page in pages:
            store.page_asset_id(student, page)  # raises if missing
    for page in pages:
        store.rubric_asset_id(spec.rubric_pages[page])

    counters = {"minted": 0, "revoked": 0}
    counter_lock = threading.Lock()

    def run_one(task):
        student, page = task
        attempts: list[AuditRecord] = []
        records: list[GradeRecord] = []
        for attempt in range(retry_budget + 1):
            student_grant = store.mint_grant(store.page_asset_id(student, page), ttl=ttl)
            rubric_grant = store.mint_grant(store.rubric_asset_id(spec.rubric_pages[page]), ttl=ttl)
            with counter_lock:
                counters["minted"] += 2
            outcome = "ok"
            reply = None
            try:
                request = build_request(student_grant.url, rubric_grant.url)
                try:
                    reply = backend.submit(request)
                except BackendError:
                    outcome = "transport_error"
            finally:
                store.revoke(student_grant.token)
                store.revoke(rubric_grant.token)
                with counter_lock:
                    counters["revoked"] += 2
            if reply is None:
                attempts.append(AuditRecord(student, page, attempt, outcome, 0.0, 0, 0))
                continue
            parsed = parse_response(
                reply.text,
                spec,
                page,
                student=student,
                backend_id=backend.backend_id,
                latency_ms=reply.latency_ms,
            )
            if isinstance(parsed, ParseFailure):
                attempts.append(
                    AuditRecord(
                        student,
                        page,
                        attempt,
                        parsed.kind.value,
                        reply.latency_ms,
                        reply.prompt_tokens,
                        reply.completion_tokens,
                    )
                )
                if parsed.kind.value in _RETRYABLE:
                    continue
                break
            seen: set[str] = set()
            duplicates = []
            for record in parsed:
                if record.problem_part in seen:
                    duplicates.append(record.problem_part)
                    continue
                seen.add(record.problem_part)
                records.append(record)
            attempts.append(
                AuditRecord(
                    student,
                    page,
                    attempt,
                    "ok",
                    reply.latency_ms,
                    reply.prompt_tokens,
                    reply.completion_tokens,
                    tuple(duplicates),
                )
            )
            break
        return attempts, records

    tasks = [(student, page) for student in roster for page in pages]
    if parallelism <= 1:
        results = [run_one(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run_one, tasks))

    part_order = {p: j for j, p in enumerate(spec.part_ids)}
    all_records = [rec for _, records in results for rec in records]
    all_records.sort(
        key=lambda r: (r.student_pseudonym, r.page_no, part_order.get(r.problem_part, 1 << 30))
    )
    values = np.full((len(roster), len(spec.part_ids)), np.nan)
    row = {s: i for i, s in enumerate(roster)}
    filled: set[tuple[int, str]] = set()
    for rec in all_records:
        key = (rec.student_pseudonym, rec.problem_part)
        if key in filled:
            continue
        filled.add(key)
        values[row[rec.student_pseudonym], part_order[rec.problem_part]] = rec.awarded_points
    matrix = ScoreMatrix.build(roster, spec.part_ids, values, Provenance.AI_RAW, spec)

    audit = [rec for attempts, _ in results for rec in attempts]
    audit.sort(key=lambda r: (r.student, r.page, r.attempt))
    prompt_tokens = sum(r.prompt_tokens for r in audit)
    completion_tokens = sum(r.completion_tokens for r in audit)
    cost = CostTally(
        prompt_tokens,
        completion_tokens,
        transactions=len(audit),
        unit_rates=dict(unit_rates or DEFAULT_UNIT_RATES),
    )
    return GradingRun(matrix, tuple(audit), cost, counters["minted"], counters["revoked"])
