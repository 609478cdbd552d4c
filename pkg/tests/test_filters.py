import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradekit.errors import ValidationError
from gradekit.exam import (
    NormalizedScoreMatrix,
    ProblemType,
    Provenance,
    load_scores,
    normalize,
)
from gradekit.filters import (
    BELOW_CREDIT,
    EXCLUDED_TYPE,
    SURPRISING,
    UNGRADED,
    PartialCreditFilterConfig,
    RiskFilterConfig,
    accept_all,
    compose,
    export_review_manifest,
    load_review_manifest,
    partial_credit_filter,
    risk_filter,
    type_filter,
)
from gradekit.irt import RiskMatrix

from conftest import scores_csv


def norm(values, students=None, parts=None):
    values = np.asarray(values, dtype=float)
    students = tuple(students or range(1, values.shape[0] + 1))
    parts = tuple(parts or (f"1-A-{chr(97 + j)}" for j in range(values.shape[1])))
    return NormalizedScoreMatrix(students, parts, values)


def risks(values, students=None, parts=None):
    values = np.asarray(values, dtype=float)
    students = tuple(students or range(1, values.shape[0] + 1))
    parts = tuple(parts or (f"1-A-{chr(97 + j)}" for j in range(values.shape[1])))
    return RiskMatrix(students, parts, values)


class TestPartialCreditFilter:
    def test_boundary_is_inclusive(self):
        manifest = partial_credit_filter(norm([[0.5]]), PartialCreditFilterConfig(0.5))
        assert manifest.accepted(1, "1-A-a")

    def test_below_threshold_rejected(self):
        manifest = partial_credit_filter(norm([[0.49]]), PartialCreditFilterConfig(0.5))
        assert manifest.verdicts[(1, "1-A-a")] == frozenset({BELOW_CREDIT})

    def test_all_zero_scores(self):
        manifest = partial_credit_filter(norm([[0.0, 0.0], [0.0, 0.0]]), PartialCreditFilterConfig(0.5))
        assert manifest.acceptance_fraction == 0.0

    def test_absent_rejected_as_ungraded(self):
        manifest = partial_credit_filter(norm([[np.nan, 1.0]]), PartialCreditFilterConfig(0.5))
        assert manifest.verdicts[(1, "1-A-a")] == frozenset({UNGRADED})
        # absent cells are not decided, so the fraction ignores them
        assert manifest.acceptance_fraction == 1.0

    def test_full_credit_only(self):
        values = [[1.0, 0.75], [1.0, 1.0], [0.5, 1.0]]
        manifest = partial_credit_filter(norm(values), PartialCreditFilterConfig(1.0))
        assert manifest.acceptance_fraction == pytest.approx(4 / 6)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            PartialCreditFilterConfig(0.0)
        with pytest.raises(ValidationError):
            PartialCreditFilterConfig(1.5)


class TestRiskFilter:
    def test_loosest_threshold_accepts_everything_graded(self):
        manifest = risk_filter(risks([[0.0, 1.0], [0.4, np.nan]]), RiskFilterConfig(1.0))
        assert manifest.acceptance_fraction == 1.0
        assert manifest.verdicts[(2, "1-A-b")] == frozenset({UNGRADED})

    def test_zero_threshold_needs_exact_match(self):
        manifest = risk_filter(risks([[0.0, 1e-9]]), RiskFilterConfig(0.0))
        assert manifest.accepted(1, "1-A-a")
        assert manifest.verdicts[(1, "1-A-b")] == frozenset({SURPRISING})

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            RiskFilterConfig(-0.1)
        with pytest.raises(ValidationError):
            RiskFilterConfig(1.1)


class TestTypeFilter:
    def test_graphical_parts_rejected_for_all_students(self, reference_spec):
        students = range(1, 297)
        manifest = type_filter(
            reference_spec, {ProblemType.DRAWING, ProblemType.GRAPHING}, students
        )
        rejected = [cell for cell, r in manifest.verdicts.items() if r]
        assert len(rejected) == 592  # 2 graphical parts x 296 students
        assert len(manifest.verdicts) == 13616
        assert all(r == frozenset({EXCLUDED_TYPE}) for _, r in manifest.verdicts.items() if r)

    def test_empty_exclusion_accepts_all(self, reference_spec):
        manifest = type_filter(reference_spec, set(), range(1, 4))
        assert manifest.acceptance_fraction == 1.0

    def test_combination_with_excluded_constituent(self, mini_spec):
        # 2-A-b combines short answer and numerical
        manifest = type_filter(mini_spec, {ProblemType.NUMERICAL}, [1])
        assert manifest.verdicts[(1, "2-A-b")] == frozenset({EXCLUDED_TYPE})
        assert manifest.verdicts[(1, "1-A-a")] == frozenset({EXCLUDED_TYPE})
        assert manifest.accepted(1, "1-A-b")


class TestCompose:
    def filters_pair(self):
        s = norm([[1.0, 0.25], [0.5, np.nan]])
        a = partial_credit_filter(s, PartialCreditFilterConfig(0.5))
        b = risk_filter(risks([[0.1, 0.9], [0.6, np.nan]]), RiskFilterConfig(0.5))
        return a, b

    def test_identity_element(self):
        a, _ = self.filters_pair()
        everything = accept_all((1, 2), ("1-A-a", "1-A-b"))
        assert compose([a, everything]) == a

    def test_idempotent(self):
        a, _ = self.filters_pair()
        assert compose([a, a]) == a

    def test_commutative(self):
        a, b = self.filters_pair()
        assert compose([a, b]) == compose([b, a])

    def test_associative(self):
        a, b = self.filters_pair()
        c = accept_all((1, 2), ("1-A-a", "1-A-b"))
        assert compose([compose([a, b]), c]) == compose([a, compose([b, c])])

    def test_reasons_are_unioned(self):
        a, b = self.filters_pair()
        composed = compose([a, b])
        assert composed.verdicts[(1, "1-A-b")] == frozenset({BELOW_CREDIT, SURPRISING})
        assert composed.verdicts[(2, "1-A-b")] == frozenset({UNGRADED})

    def test_acceptance_never_above_components(self):
        a, b = self.filters_pair()
        composed = compose([a, b])
        assert composed.acceptance_fraction <= a.acceptance_fraction
        assert composed.acceptance_fraction <= b.acceptance_fraction

    def test_domain_mismatch(self):
        a, _ = self.filters_pair()
        other = accept_all((1,), ("1-A-a",))
        with pytest.raises(ValidationError, match="domains"):
            compose([a, other])


@st.composite
def score_grids(draw):
    n = draw(st.integers(2, 6))
    m = draw(st.integers(1, 4))
    cells = draw(
        st.lists(
            st.lists(
                st.one_of(st.none(), st.integers(0, 4).map(lambda q: q / 4)),
                min_size=m,
                max_size=m,
            ),
            min_size=n,
            max_size=n,
        )
    )
    return np.array([[np.nan if v is None else v for v in row] for row in cells])


class TestMonotonicity:
    @given(values=score_grids(), t1=st.integers(1, 10), t2=st.integers(1, 10))
    @settings(max_examples=60, deadline=None)
    def test_partial_credit_subset_inclusion(self, values, t1, t2):
        lo, hi = sorted((t1 / 10, t2 / 10))
        s = norm(values)
        accepted_hi = partial_credit_filter(s, PartialCreditFilterConfig(hi)).accepted_cells()
        accepted_lo = partial_credit_filter(s, PartialCreditFilterConfig(lo)).accepted_cells()
        assert accepted_hi <= accepted_lo

    @given(values=score_grids(), r1=st.integers(0, 10), r2=st.integers(0, 10))
    @settings(max_examples=60, deadline=None)
    def test_risk_subset_inclusion(self, values, r1, r2):
        lo, hi = sorted((r1 / 10, r2 / 10))
        rm = risks(np.where(np.isnan(values), np.nan, np.abs(values - 0.5)))
        accepted_lo = risk_filter(rm, RiskFilterConfig(lo)).accepted_cells()
        accepted_hi = risk_filter(rm, RiskFilterConfig(hi)).accepted_cells()
        assert accepted_lo <= accepted_hi


class TestReviewManifest:
    def test_export_columns_and_order(self, mini_spec):
        text = scores_csv(mini_spec.part_ids, [(2, [0.5, 2.0, None, 0.5]), (1, [1.0, 0.0, 0.25, None])])
        ai = load_scores(text, mini_spec, Provenance.AI_RAW)
        manifest = partial_credit_filter(normalize(ai, mini_spec), PartialCreditFilterConfig(0.5))
        exported = export_review_manifest(manifest, ai, mini_spec)
        lines = exported.strip().split("\n")
        assert lines[0] == "student,part,verdict,reasons,ai_points,max_points"
        # sorted by student then spec part order
        assert [l.split(",")[0] for l in lines[1:]] == ["1"] * 4 + ["2"] * 4
        assert lines[1].startswith("1,1-A-a,accepted,,1.0,1.0")
        assert "2,2-A-a,rejected,Ungraded,," in exported

    def test_round_trip(self, mini_spec):
        text = scores_csv(mini_spec.part_ids, [(1, [1.0, 0.0, None, 0.5])])
        ai = load_scores(text, mini_spec, Provenance.AI_RAW)
        manifest = partial_credit_filter(normalize(ai, mini_spec), PartialCreditFilterConfig(0.5))
        again = load_review_manifest(export_review_manifest(manifest, ai, mini_spec))
        assert again == manifest
