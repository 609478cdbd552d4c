import numpy as np
import pytest

from gradekit.exam import Part, ProblemType, Provenance, normalize
from gradekit.synthetic import (
    DEFAULT_NOISE,
    NoiseModel,
    NoiseSpec,
    PopulationSpec,
    apply_noise,
    generate_population,
    population_exam_spec,
    reference_exam_spec,
)


def flat_parts(n, max_q=4, ptype=ProblemType.NUMERICAL):
    return tuple(Part(f"1-A{i}-a", max_q, ptype, 1) for i in range(n))


class TestGeneratePopulation:
    def test_same_seed_identical(self):
        pspec = PopulationSpec(30, flat_parts(5), seed=11)
        one = generate_population(pspec)
        two = generate_population(pspec)
        assert np.array_equal(one.theta, two.theta)
        assert one.truth == two.truth

    def test_easy_items_saturate(self):
        pspec = PopulationSpec(40, flat_parts(4), b_range=(-6.0, -6.0), seed=5)
        pop = generate_population(pspec)
        assert np.nanmean(pop.truth.values) / 1.0 > 0.9

    def test_mean_tracks_expected(self):
        spec = reference_exam_spec()
        pspec = PopulationSpec.from_exam(spec, 300, seed=8)
        pop = generate_population(pspec)
        maxima = np.array([p.max_points for p in spec.parts])
        normalized = pop.truth.values / maxima[None, :]
        assert abs(float(np.mean(normalized)) - float(np.mean(pop.expected))) < 0.05

    def test_values_on_grid_within_bounds(self):
        pspec = PopulationSpec(50, flat_parts(6, max_q=6), seed=2)
        pop = generate_population(pspec)
        v = pop.truth.values
        assert np.all(v * 4 == np.round(v * 4))
        assert v.min() >= 0 and v.max() <= 1.5
        assert pop.truth.provenance is Provenance.SYNTHETIC

    def test_roster_permutation_permutes_rows(self):
        # draws are keyed per (student, part), not per row position
        from gradekit.exam import ScoreMatrix

        pspec = PopulationSpec(12, flat_parts(4), seed=3)
        pop = generate_population(pspec)
        spec = population_exam_spec(pspec)
        noisy = apply_noise(pop.truth, spec, DEFAULT_NOISE, seed=3)
        order = np.array([7, 0, 4, 11, 2, 9, 1, 3, 10, 5, 8, 6])
        shuffled_truth = ScoreMatrix.build(
            [pop.truth.students[i] for i in order],
            pop.truth.parts,
            pop.truth.values[order],
            Provenance.SYNTHETIC,
            spec,
        )
        shuffled_noisy = apply_noise(shuffled_truth, spec, DEFAULT_NOISE, seed=3)
        assert np.array_equal(shuffled_noisy.values, noisy.values[order], equal_nan=True)


class TestApplyNoise:
    def test_full_agreement_is_identity(self):
        pspec = PopulationSpec(25, flat_parts(5), seed=4)
        pop = generate_population(pspec)
        spec = population_exam_spec(pspec)
        noisy = apply_noise(pop.truth, spec, NoiseModel(NoiseSpec(agreement=1.0)), seed=4)
        assert np.array_equal(noisy.values, pop.truth.values, equal_nan=True)
        assert noisy.provenance is Provenance.AI_RAW

    def test_anomaly_rate_produces_flags(self):
        spec = reference_exam_spec()
        pspec = PopulationSpec.from_exam(spec, 296, seed=6)
        pop = generate_population(pspec)
        noise = NoiseModel(
            NoiseSpec(agreement=1.0, over_max_rate=3 / 13616, negative_rate=3 / 13616)
        )
        noisy = apply_noise(pop.truth, spec, noise, seed=6)
        kinds = [a.kind for a in noisy.anomalies]
        # rate * 13616 cells ~ 3 of each kind; seeded run stays in a loose band
        assert 1 <= kinds.count("over_max") <= 10
        assert 1 <= kinds.count("negative") <= 10

    def test_zero_agreement_uniform_other_never_matches(self):
        pspec = PopulationSpec(30, flat_parts(4), seed=9)
        pop = generate_population(pspec)
        spec = population_exam_spec(pspec)
        noisy = apply_noise(
            pop.truth, spec, NoiseModel(NoiseSpec(agreement=0.0)), seed=9
        )
        assert not np.any(noisy.values == pop.truth.values)

    def test_zero_agreement_uniform_grid_coincidence(self):
        # uniform draws over a (max_q + 1)-value grid coincide ~ 1/(max_q+1)
        pspec = PopulationSpec(400, flat_parts(8, max_q=4), seed=10)
        pop = generate_population(pspec)
        spec = population_exam_spec(pspec)
        noisy = apply_noise(
            pop.truth, spec, NoiseModel(NoiseSpec(agreement=0.0, deviation="uniform")), seed=10
        )
        match_rate = float(np.mean(noisy.values == pop.truth.values))
        assert abs(match_rate - 1 / 5) < 0.03

    def test_offset_deviation_stays_on_grid(self):
        pspec = PopulationSpec(50, flat_parts(3), seed=12)
        pop = generate_population(pspec)
        spec = population_exam_spec(pspec)
        noise = NoiseModel(NoiseSpec(agreement=0.2, deviation={-1: 0.5, 1: 0.25, -2: 0.25}))
        noisy = apply_noise(pop.truth, spec, noise, seed=12)
        v = noisy.values
        assert np.all(v * 4 == np.round(v * 4))
        assert v.min() >= 0.0 and v.max() <= 1.0

    def test_absent_cells_stay_absent(self):
        pspec = PopulationSpec(10, flat_parts(3), seed=13)
        pop = generate_population(pspec)
        spec = population_exam_spec(pspec)
        values = pop.truth.values.copy()
        values[0, 0] = np.nan
        from gradekit.exam import ScoreMatrix

        truth = ScoreMatrix.build(
            pop.truth.students, pop.truth.parts, values, Provenance.SYNTHETIC, spec
        )
        noisy = apply_noise(truth, spec, DEFAULT_NOISE, seed=13)
        assert np.isnan(noisy.values[0, 0])

    def test_noise_spec_validation(self):
        with pytest.raises(Exception):
            NoiseSpec(agreement=1.5)
        with pytest.raises(Exception):
            NoiseSpec(agreement=0.5, over_max_rate=0.9, negative_rate=0.2)

    def test_population_discrimination_range_must_be_fittable(self):
        with pytest.raises(Exception, match="fittable"):
            PopulationSpec(10, flat_parts(2), a_range=(0.5, 9.0))


class TestNoiseModelJson:
    def test_round_trip_fields(self):
        text = """
        {"default": {"agreement": 0.7},
         "per_type": {"drawing": {"agreement": 0.5, "deviation": {"-1": 0.6, "1": 0.4}}}}
        """
        model = NoiseModel.from_json(text)
        assert model.default.agreement == 0.7
        assert model.spec_for(ProblemType.DRAWING).deviation == {-1: 0.6, 1: 0.4}
        assert model.spec_for(ProblemType.SYMBOLIC).agreement == 0.7


class TestPipelineClosure:
    def test_acceptance_non_decreasing_in_risk_threshold(self):
        from gradekit.filters import RiskFilterConfig, risk_filter
        from gradekit.irt import expected_scores, fit_2pl, risk_matrix

        spec = reference_exam_spec()
        pspec = PopulationSpec.from_exam(spec, 80, seed=21)
        pop = generate_population(pspec)
        noisy = apply_noise(pop.truth, spec, NoiseModel(NoiseSpec(agreement=1.0)), seed=21)
        s = normalize(noisy, spec)
        model = fit_2pl(s)
        risks = risk_matrix(s, expected_scores(model))
        fractions = [
            risk_filter(risks, RiskFilterConfig(r / 10)).acceptance_fraction
            for r in range(1, 11)
        ]
        assert fractions == sorted(fractions)
        assert fractions[-1] == 1.0
