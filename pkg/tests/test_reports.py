import numpy as np
import pytest

from gradekit.errors import ValidationError
from gradekit.exam import Provenance, load_scores, normalize
from gradekit.filters import PartialCreditFilterConfig, partial_credit_filter
from gradekit.irt import RiskMatrix, fit_2pl
from gradekit.reports import (
    HEATMAP_ANOMALY_SENTINEL,
    export_risk_heatmap,
    quality_by_type,
    run_sweep,
    type_quality_csv,
)
from gradekit.synthetic import (
    NoiseModel,
    NoiseSpec,
    PopulationSpec,
    apply_noise,
    generate_population,
    reference_exam_spec,
)

from conftest import scores_csv


@pytest.fixture(scope="module")
def world():
    spec = reference_exam_spec()
    pspec = PopulationSpec.from_exam(spec, 60, seed=17)
    pop = generate_population(pspec)
    noise = NoiseModel(NoiseSpec(agreement=0.7))
    ai = apply_noise(pop.truth, spec, noise, seed=17)
    return spec, pop, ai


class TestSweep:
    def test_partial_credit_rows_monotone(self, world):
        spec, pop, ai = world
        thresholds = [t / 10 for t in range(1, 11)]
        result = run_sweep(ai, pop.truth, spec, "partial-credit", thresholds)
        assert len(result.rows) == 10
        fractions = [r.accepted_fraction for r in result.rows]
        assert fractions == sorted(fractions, reverse=True)
        assert [r.threshold for r in result.rows] == thresholds

    def test_noiseless_full_credit_threshold(self, world):
        spec, pop, _ = world
        result = run_sweep(pop.truth, pop.truth, spec, "partial-credit", [1.0])
        row = result.rows[0]
        assert row.accuracy == 1.0
        full = normalize(pop.truth, spec).values == 1.0
        graded = ~np.isnan(pop.truth.values)
        assert row.accepted_fraction == pytest.approx(full.sum() / graded.sum())

    def test_risk_sweep_acceptance_rises_to_one(self, world):
        spec, pop, ai = world
        model = fit_2pl(normalize(ai, spec))
        result = run_sweep(ai, pop.truth, spec, "risk", [0.0, 0.5, 1.0], model)
        fractions = [r.accepted_fraction for r in result.rows]
        assert fractions == sorted(fractions)
        assert fractions[-1] == 1.0
        assert result.rows[-1].slope is not None

    def test_risk_sweep_needs_model(self, world):
        spec, pop, ai = world
        with pytest.raises(ValidationError, match="model"):
            run_sweep(ai, pop.truth, spec, "risk", [0.5])

    def test_thresholds_must_increase(self, world):
        spec, pop, ai = world
        with pytest.raises(ValidationError, match="increasing"):
            run_sweep(ai, pop.truth, spec, "partial-credit", [0.5, 0.5])

    def test_csv_shape(self, world):
        spec, pop, ai = world
        result = run_sweep(ai, pop.truth, spec, "partial-credit", [0.5, 1.0])
        lines = result.to_csv().strip().split("\n")
        assert lines[0] == "threshold,accepted_fraction,accuracy,precision,recall,f1"
        assert len(lines) == 3


class TestQualityByType:
    def test_reference_all_row(self, world):
        spec, pop, ai = world
        rows = quality_by_type(ai, pop.truth, spec)
        all_row = next(r for r in rows if r.type_label == "All")
        assert all_row.parts == 46
        assert all_row.samples == 60 * 46
        ordered = [r.normed_f1 for r in rows]
        assert ordered == sorted(ordered, reverse=True)

    def test_all_paper_scale_samples(self):
        spec = reference_exam_spec()
        pspec = PopulationSpec.from_exam(spec, 296, seed=1)
        pop = generate_population(pspec)
        rows = quality_by_type(pop.truth, pop.truth, spec)
        all_row = next(r for r in rows if r.type_label == "All")
        assert all_row.samples == 13616

    def test_single_type_exam_matches_all(self, mini_spec, mini_truth):
        from conftest import make_spec_doc
        from gradekit.exam import load_exam_spec

        doc = make_spec_doc(
            [
                {"id": "1-A-a", "max_points": 1, "type": "reaction", "page": 1},
                {"id": "1-A-b", "max_points": 1, "type": "reaction", "page": 1},
            ],
            total_points=2,
        )
        spec = load_exam_spec(doc)
        text = scores_csv(spec.part_ids, [(1, [1.0, 0.25]), (2, [0.5, 0.75])])
        truth = load_scores(text, spec, Provenance.GROUND_TRUTH)
        rows = quality_by_type(truth, truth, spec)
        assert {r.type_label for r in rows} == {"All", "Reaction"}
        by = {r.type_label: r for r in rows}
        assert by["All"].samples == by["Reaction"].samples

    def test_per_type_accuracy_tracks_agreement_rates(self):
        # with "pick a different grid value" deviations, exact match per type
        # lands on that type's configured agreement probability
        spec = reference_exam_spec()
        pspec = PopulationSpec.from_exam(spec, 296, seed=33)
        pop = generate_population(pspec)
        from gradekit.synthetic import DEFAULT_NOISE

        ai = apply_noise(pop.truth, spec, DEFAULT_NOISE, seed=33)
        rows = {r.type_label: r for r in quality_by_type(ai, pop.truth, spec)}
        assert abs(rows["Graphing"].accuracy - 0.33) <= 0.05
        assert abs(rows["Long Answer"].accuracy - 0.80) <= 0.05

    def test_manifest_shrinks_samples(self, world):
        spec, pop, ai = world
        manifest = partial_credit_filter(normalize(ai, spec), PartialCreditFilterConfig(0.5))
        unfiltered = {r.type_label: r.samples for r in quality_by_type(ai, pop.truth, spec)}
        filtered = {r.type_label: r.samples for r in quality_by_type(ai, pop.truth, spec, manifest)}
        for label, samples in filtered.items():
            assert samples <= unfiltered[label]
        assert filtered["All"] < unfiltered["All"]

    def test_csv_header(self, world):
        spec, pop, ai = world
        text = type_quality_csv(quality_by_type(ai, pop.truth, spec))
        assert text.startswith("Type,Parts,Samples,Classes,Accuracy,Precision,Recall,F1,normed F1\n")


class TestHeatmap:
    def test_dimensions(self, world):
        spec, pop, ai = world
        model = fit_2pl(normalize(ai, spec))
        from gradekit.irt import expected_scores, risk_matrix

        risks = risk_matrix(normalize(ai, spec), expected_scores(model))
        text = export_risk_heatmap(risks, ai.anomalies)
        lines = text.strip().split("\n")
        assert len(lines) == 1 + 46
        assert lines[0].split(",")[0] == "part"
        assert len(lines[1].split(",")) == 1 + 60

    def test_all_zero_risks(self):
        risks = RiskMatrix((1, 2), ("1-A-a",), np.zeros((2, 1)))
        text = export_risk_heatmap(risks)
        assert text == "part,1,2\n1-A-a,0.0,0.0\n"

    def test_anomaly_sentinel(self, world):
        spec, pop, ai = world
        from gradekit.exam import Anomaly

        risks = RiskMatrix((1, 2), ("1-A-a",), np.array([[0.25], [0.5]]))
        text = export_risk_heatmap(risks, [Anomaly(2, "1-A-a", 1.5, "over_max")])
        assert text.count(repr(HEATMAP_ANOMALY_SENTINEL)) == 1
        assert "0.25" in text
