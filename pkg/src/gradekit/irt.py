"""Two-parameter logistic IRT fitting and risk scoring.

The model gives each (student, part) cell a success probability

    p_ij = 1 / (1 + exp(-a_j * (theta_i - b_j)))

with student ability theta_i and per-part discrimination a_j / difficulty b_j.
Estimation is marginal maximum likelihood by EM: abilities are integrated out
against a standard-normal prior on a fixed quadrature grid, item parameters
are updated by a guarded Newton step, and abilities are recovered afterwards
as posterior means (EAP). Fractional scores enter the likelihood as weighted
Bernoulli outcomes, s*log(p) + (1-s)*log(1-p), so partial credit never has to
be dichotomized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FitError, ValidationError
from .exam import NormalizedScoreMatrix

_LL_SLACK = 1e-7  # relative tolerance for the monotone-EM assertion


@dataclass(frozen=True)
class FitConfig:
    n_quadrature: int = 41
    quad_range: tuple[float, float] = (-6.0, 6.0)
    a_bounds: tuple[float, float] = (0.1, 5.0)
    b_bounds: tuple[float, float] = (-6.0, 6.0)
    tol: float = 1e-6
    max_iter: int = 500
    newton_steps: int = 5
    p_floor: float = 1e-9
    seed: int | None = None  # jitters the starting values when set


@dataclass(frozen=True)
class FitDiagnostics:
    log_likelihood: tuple[float, ...]
    iterations: int
    converged: bool


@dataclass(frozen=True, eq=False)
class IrtModel:
    students: tuple[int, ...]
    parts: tuple[str, ...]
    theta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    diagnostics: FitDiagnostics
    degenerate_parts: tuple[str, ...] = ()

    def to_json(self) -> str:
        doc = {
            "students": list(self.students),
            "theta": [float(t) for t in self.theta],
            "parts": [
                {"id": p, "a": float(self.a[j]), "b": float(self.b[j])}
                for j, p in enumerate(self.parts)
            ],
            "diagnostics": {
                "log_likelihood": [float(v) for v in self.diagnostics.log_likelihood],
                "iterations": self.diagnostics.iterations,
                "converged": self.diagnostics.converged,
                "degenerate_parts": list(self.degenerate_parts),
            },
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "IrtModel":
        doc = json.loads(text)
        diag = doc.get("diagnostics", {})
        return cls(
            students=tuple(int(s) for s in doc["students"]),
            parts=tuple(p["id"] for p in doc["parts"]),
            theta=np.array([float(t) for t in doc["theta"]]),
            a=np.array([float(p["a"]) for p in doc["parts"]]),
            b=np.array([float(p["b"]) for p in doc["parts"]]),
            diagnostics=FitDiagnostics(
                tuple(float(v) for v in diag.get("log_likelihood", ())),
                int(diag.get("iterations", 0)),
                bool(diag.get("converged", False)),
            ),
            degenerate_parts=tuple(diag.get("degenerate_parts", ())),
        )


@dataclass(frozen=True, eq=False)
class ExpectedScoreMatrix:
    students: tuple[int, ...]
    parts: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)


@dataclass(frozen=True, eq=False)
class RiskMatrix:
    """Absolute deviation |observed - expected| per cell; absent where observed is."""

    students: tuple[int, ...]
    parts: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)

    def present_mask(self) -> np.ndarray:
        return ~np.isnan(self.values)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(np.clip(-z, -500, 500)))


def _clip_p(p: np.ndarray, floor: float) -> np.ndarray:
    return np.clip(p, floor, 1.0 - floor)


def _item_curves(a, b, nodes, floor):
    """log p and log (1-p) per (item, node)."""
    p = _clip_p(_sigmoid(a[:, None] * (nodes[None, :] - b[:, None])), floor)
    return np.log(p), np.log1p(-p)


def _quadrature(config: FitConfig):
    nodes = np.linspace(config.quad_range[0], config.quad_range[1], config.n_quadrature)
    logw = -0.5 * nodes**2
    w = np.exp(logw - logw.max())
    return nodes, w / w.sum()


def _posterior(A, B, logP, log1mP, log_weights):
    """Per-student posterior over quadrature nodes plus marginal log-likelihood."""
    ll = A @ logP + B @ log1mP + log_weights[None, :]
    top = ll.max(axis=1, keepdims=True)
    prob = np.exp(ll - top)
    norm = prob.sum(axis=1, keepdims=True)
    marginal = float((top[:, 0] + np.log(norm[:, 0])).sum())
    return prob / norm, marginal


def _q_value(alpha, beta, nodes, nbar, rbar, floor):
    p = _clip_p(_sigmoid(alpha[:, None] * nodes[None, :] + beta[:, None]), floor)
    return (rbar * np.log(p) + (nbar - rbar) * np.log1p(-p)).sum(axis=1)


def _project(alpha, beta, config):
    a = np.clip(alpha, *config.a_bounds)
    b = np.clip(-beta / a, *config.b_bounds)
    return a, -a * b


def _mstep(a, b, nodes, nbar, rbar, config):
    """Improve the expected complete-data log-likelihood item by item.

    Vectorized damped Newton in the slope/intercept parametrization
    (alpha = a, beta = -a*b), projected back into the parameter box. Steps
    that fail to improve an item's objective are halved and, in the limit,
    dropped, so the EM log-likelihood can never decrease.
    """
    alpha, beta = a.copy(), -a * b
    q_start = _q_value(alpha, beta, nodes, nbar, rbar, config.p_floor)
    for _ in range(config.newton_steps):
        p = _clip_p(_sigmoid(alpha[:, None] * nodes[None, :] + beta[:, None]), config.p_floor)
        resid = rbar - nbar * p
        g1 = (resid * nodes[None, :]).sum(axis=1)
        g0 = resid.sum(axis=1)
        w = nbar * p * (1.0 - p)
        h11 = (w * nodes[None, :] ** 2).sum(axis=1) + 1e-10
        h01 = (w * nodes[None, :]).sum(axis=1)
        h00 = w.sum(axis=1) + 1e-10
        det = h11 * h00 - h01**2
        det = np.where(np.abs(det) < 1e-12, 1e-12, det)
        d_alpha = (h00 * g1 - h01 * g0) / det
        d_beta = (h11 * g0 - h01 * g1) / det
        q_cur = _q_value(alpha, beta, nodes, nbar, rbar, config.p_floor)
        step = np.ones_like(alpha)
        new_alpha, new_beta = alpha, beta
        for _ in range(10):
            cand_alpha, cand_beta = _project(alpha + step * d_alpha, beta + step * d_beta, config)
            q_cand = _q_value(cand_alpha, cand_beta, nodes, nbar, rbar, config.p_floor)
            improved = q_cand >= q_cur
            new_alpha = np.where(improved, cand_alpha, new_alpha)
            new_beta = np.where(improved, cand_beta, new_beta)
            q_cur = np.where(improved, q_cand, q_cur)
            if improved.all():
                break
            step = np.where(improved, step, step * 0.5)
        alpha, beta = new_alpha, new_beta
    q_end = _q_value(alpha, beta, nodes, nbar, rbar, config.p_floor)
    keep = q_end >= q_start
    alpha = np.where(keep, alpha, a)
    beta = np.where(keep, beta, -a * b)
    a_new = np.clip(alpha, *config.a_bounds)
    b_new = np.clip(-beta / a_new, *config.b_bounds)
    return a_new, b_new


def _degenerate_b(mean: float, config: FitConfig) -> float:
    """Difficulty assigned to a part with no score variance (a is pinned to 1)."""
    if mean >= 1.0:
        return config.b_bounds[0]
    if mean <= 0.0:
        return config.b_bounds[1]
    return float(np.clip(-np.log(mean / (1.0 - mean)), *config.b_bounds))


def fit_2pl(s: NormalizedScoreMatrix, config: FitConfig = FitConfig()) -> IrtModel:
    """Fit the two-parameter logistic model to a normalized score matrix.

    Parts without any score variance are excluded from estimation, assigned
    a = 1 with difficulty pushed to the appropriate bound (-6 when everyone
    has full credit, +6 when everyone has zero), and listed in
    ``degenerate_parts``. The log-likelihood trace is checked to be
    non-decreasing on every iteration; a violation is an implementation bug
    and raises FitError.
    """
    S = s.values
    mask = ~np.isnan(S)
    n_students, n_parts = S.shape
    if n_students < 2:
        raise FitError("need at least two students")
    if n_parts < 1:
        raise FitError("need at least one part")

    counts = mask.sum(axis=0)
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, np.nansum(S, axis=0) / np.maximum(counts, 1), 0.5)
        sq = np.where(mask, (S - means[None, :]) ** 2, 0.0).sum(axis=0)
    variance = np.where(counts > 0, sq / np.maximum(counts, 1), 0.0)
    degenerate = (counts == 0) | (variance <= 1e-12)
    if degenerate.all():
        raise FitError("no part has score variance; nothing to fit")
    active = ~degenerate

    nodes, weights = _quadrature(config)
    log_weights = np.log(weights)
    Sa = np.where(mask, np.nan_to_num(S), 0.0)[:, active]
    Ma = mask[:, active].astype(float)
    Ba = Ma - Sa  # weight on the failure term, zero where absent

    m = np.clip(means[active], 0.02, 0.98)
    a_act = np.ones(active.sum())
    b_act = np.clip(-np.log(m / (1.0 - m)), -3.0, 3.0)
    if config.seed is not None:
        rng = np.random.default_rng(config.seed)
        a_act = np.clip(a_act * np.exp(rng.normal(0.0, 0.2, a_act.shape)), *config.a_bounds)
        b_act = np.clip(b_act + rng.normal(0.0, 0.3, b_act.shape), *config.b_bounds)

    trace: list[float] = []
    converged = False
    posterior = None
    for _ in range(config.max_iter):
        logP, log1mP = _item_curves(a_act, b_act, nodes, config.p_floor)
        posterior, ll = _posterior(Sa, Ba, logP, log1mP, log_weights)
        if trace:
            if ll < trace[-1] - _LL_SLACK * max(1.0, abs(trace[-1])):
                raise FitError(f"EM log-likelihood decreased: {trace[-1]} -> {ll}")
            if abs(ll - trace[-1]) < config.tol:
                trace.append(ll)
                converged = True
                break
        trace.append(ll)
        nbar = Ma.T @ posterior
        rbar = Sa.T @ posterior
        a_act, b_act = _mstep(a_act, b_act, nodes, nbar, rbar, config)

    logP, log1mP = _item_curves(a_act, b_act, nodes, config.p_floor)
    posterior, _ = _posterior(Sa, Ba, logP, log1mP, log_weights)
    theta = posterior @ nodes

    a = np.ones(n_parts)
    b = np.zeros(n_parts)
    a[active] = a_act
    b[active] = b_act
    for j in np.flatnonzero(degenerate):
        b[j] = _degenerate_b(float(means[j]) if counts[j] > 0 else 0.5, config)
    degenerate_parts = tuple(s.parts[j] for j in np.flatnonzero(degenerate))
    diagnostics = FitDiagnostics(tuple(trace), len(trace), converged)
    return IrtModel(s.students, s.parts, theta, a, b, diagnostics, degenerate_parts)


def expected_scores(model: IrtModel) -> ExpectedScoreMatrix:
    """Model probabilities p_ij for every (student, part) pair."""
    z = model.a[None, :] * (model.theta[:, None] - model.b[None, :])
    return ExpectedScoreMatrix(model.students, model.parts, _sigmoid(z))


def risk_matrix(s: NormalizedScoreMatrix, p: ExpectedScoreMatrix) -> RiskMatrix:
    """Elementwise |s - p|; absent observations stay absent."""
    if s.students != p.students or s.parts != p.parts:
        raise ValidationError("risk matrix inputs have mismatched shapes")
    return RiskMatrix(s.students, s.parts, np.abs(s.values - p.values))
