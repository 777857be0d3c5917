"""Synthetic generators: determinism, recipe identities, anomaly plans."""

import dataclasses

import numpy as np
import pytest

from mtsad.errors import ContractError, PlanError, SpecError
from mtsad.synthetic import (AnomalyGroup, AnomalyPlan, Recipe, SyntheticSpec,
                             default_spec, eval_recipe, gen_recipe_synthetic,
                             gen_sincos_synthetic, generate_entity,
                             generate_fleet, inject_anomalies, load_spec,
                             spec_from_dict, spec_to_dict)


def sincos_spec(**overrides):
    base = dict(family="sincos", n_metrics=4, n_points=2000, n_entities=2,
                seed=5, waveforms=("sin", "cos"), noise=0.0, anomalies=[])
    base.update(overrides)
    return SyntheticSpec(**base)


class TestSincos:
    def test_equal_frequency_pair_correlates_up_to_shift(self):
        frame = gen_sincos_synthetic(sincos_spec(freq_range=(45.0, 45.0)))
        a, b = frame.values[0], frame.values[1]
        best = max(
            abs(np.corrcoef(a[lag:], b[:len(b) - lag])[0, 1])
            for lag in range(0, 300)
        )
        assert best > 0.999

    def test_seeded_regeneration_is_bit_identical(self):
        spec = sincos_spec(noise=0.1)
        one = gen_sincos_synthetic(spec, entity=1)
        two = gen_sincos_synthetic(spec, entity=1)
        assert np.array_equal(one.values, two.values)

    def test_fleet_generates_finite_values(self):
        spec = sincos_spec(n_metrics=6, n_entities=5, noise=0.1,
                           freq_range=(40.0, 50.0))
        fleet = [gen_sincos_synthetic(spec, e) for e in range(5)]
        assert len(fleet) == 5
        for frame in fleet:
            assert np.isfinite(frame.values).all()
        assert not np.array_equal(fleet[0].values, fleet[1].values)

    def test_needs_two_metrics(self):
        with pytest.raises(SpecError):
            sincos_spec(n_metrics=1).validate()

    def test_rejects_square_waveforms(self):
        with pytest.raises(SpecError):
            sincos_spec(waveforms=("sin", "square")).validate()


class TestRecipeFamily:
    def test_explicit_linear_recipe_exact_without_noise(self):
        spec = SyntheticSpec(
            family="waves", n_metrics=5, n_points=600, n_entities=1, seed=3,
            noise=0.0, anomalies=[],
            recipes=[Recipe("m04", "linear", ["m00", "m01"], [0.5, 0.5])],
        )
        frame = gen_recipe_synthetic(spec)
        np.testing.assert_array_equal(
            frame.values[4], 0.5 * frame.values[0] + 0.5 * frame.values[1])

    def test_square_wave_base_takes_two_values(self):
        spec = SyntheticSpec(family="waves", n_metrics=4, n_points=500,
                             n_entities=1, seed=1, noise=0.01,
                             waveforms=("square",), anomalies=[], recipes=[])
        frame = gen_recipe_synthetic(spec)
        bound = 0.025 + 1e-12  # noise clipped at 2.5 sigma
        for row in frame.values:
            near_low = np.abs(row - 0.1) <= bound
            near_high = np.abs(row - 0.9) <= bound
            assert (near_low | near_high).all()

    def test_default_spec_recipe_residuals_bounded(self):
        spec = default_spec()
        frame = gen_recipe_synthetic(spec, entity=0)
        columns = {n: frame.values[i] for i, n in enumerate(frame.metric_names)}
        sigma = frame.meta["noise"]
        for doc in frame.meta["recipes"]:
            recipe = Recipe(doc["name"], doc["kind"], doc["inputs"],
                            doc.get("coeffs", []))
            residual = columns[recipe.name] - eval_recipe(recipe, columns)
            assert np.abs(residual).max() <= 3.0 * sigma

    def test_unknown_recipe_input_is_spec_error(self):
        spec = SyntheticSpec(
            family="waves", n_metrics=4, n_points=300, n_entities=1, seed=0,
            noise=0.0, anomalies=[],
            recipes=[Recipe("m03", "linear", ["m00", "nope"], [0.5, 0.5])],
        )
        with pytest.raises(SpecError, match="nope"):
            gen_recipe_synthetic(spec)

    def test_needs_four_metrics(self):
        with pytest.raises(ContractError):
            gen_recipe_synthetic(sincos_spec(family="waves", n_metrics=3))

    def test_fleet_shares_recipe_graph(self):
        spec = dataclasses.replace(default_spec(), n_points=400, n_entities=2,
                                   anomalies=[])
        a = gen_recipe_synthetic(spec, 0)
        b = gen_recipe_synthetic(spec, 1)
        assert a.meta["recipes"] == b.meta["recipes"]
        assert not np.array_equal(a.values, b.values)


class TestInjectAnomalies:
    def frame(self, t=1000, seed=2):
        spec = dataclasses.replace(default_spec(), n_points=t, n_entities=1,
                                   anomalies=[])
        return gen_recipe_synthetic(spec, 0) if seed is None else \
            gen_recipe_synthetic(dataclasses.replace(spec, seed=seed), 0)

    def test_single_spike_label_mass(self):
        plan = AnomalyPlan(groups=[AnomalyGroup(
            count=1, duration_range=(5, 5), types=("spike",), region=(0.1, 0.9))],
            seed=4)
        out = inject_anomalies(self.frame(), plan)
        assert int(out.labels.sum()) == 5

    def test_zero_anomalies_all_zero_labels(self):
        out = inject_anomalies(self.frame(), AnomalyPlan(groups=[], seed=0))
        assert int(out.labels.sum()) == 0
        assert out.meta["anomalies"] == []

    def test_deterministic_and_disjoint(self):
        plan = AnomalyPlan(groups=[AnomalyGroup(
            count=10, duration_range=(5, 20), region=(0.1, 0.95))], seed=11)
        one = inject_anomalies(self.frame(), plan)
        two = inject_anomalies(self.frame(), plan)
        assert np.array_equal(one.values, two.values)
        assert one.meta["anomalies"] == two.meta["anomalies"]
        events = sorted((ev["start"], ev["start"] + ev["length"])
                        for ev in one.meta["anomalies"])
        assert len(events) == 10
        for (s1, e1), (s2, e2) in zip(events, events[1:]):
            assert e1 < s2  # at least one clean point between events
        assert int(one.labels.sum()) == sum(e - s for s, e in events)

    def test_label_mass_equals_planned_durations(self):
        plan = AnomalyPlan(groups=[AnomalyGroup(count=4, duration_range=(3, 9),
                                                region=(0.2, 0.9))], seed=9)
        out = inject_anomalies(self.frame(), plan)
        planned = sum(ev["length"] for ev in out.meta["anomalies"])
        assert int(out.labels.sum()) == planned

    def test_oversized_anomaly_is_plan_error(self):
        plan = AnomalyPlan(groups=[AnomalyGroup(count=1, duration_range=(900, 900),
                                                region=(0.0, 0.5))], seed=0)
        with pytest.raises(PlanError):
            inject_anomalies(self.frame(t=1000), plan)


class TestSpecJson:
    def test_round_trip(self):
        spec = default_spec()
        again = spec_from_dict(spec_to_dict(spec))
        assert again == spec

    def test_unknown_keys_rejected(self):
        with pytest.raises(SpecError, match="unknown spec keys"):
            spec_from_dict({"n_metrics": 6, "surprise": 1})

    def test_unknown_anomaly_keys_rejected(self):
        with pytest.raises(SpecError, match="unknown anomaly keys"):
            spec_from_dict({"anomalies": [{"count": 1, "shape": "saw"}]})

    def test_load_spec_file(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text('{"family": "sincos", "n_metrics": 4, "waveforms": ["sin"], "anomalies": []}')
        spec = load_spec(path)
        assert spec.family == "sincos" and spec.n_metrics == 4

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(SpecError, match="invalid JSON"):
            load_spec(path)

    def test_bad_n_metrics(self):
        with pytest.raises(SpecError):
            spec_from_dict({"n_metrics": 1})


class TestGenerateEntity:
    def test_pure_function_of_spec_and_entity(self):
        spec = default_spec()
        a = generate_entity(spec, 3)
        b = generate_entity(spec, 3)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.labels, b.labels)

    def test_fleet_size(self):
        spec = dataclasses.replace(default_spec(), n_entities=3)
        assert len(generate_fleet(spec)) == 3
