import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noonmetro.calibration import CalibrationCurves
from noonmetro.config import validate
from noonmetro.estimation import (
    FISHER_HEADER,
    FisherCurve,
    PhaseEstimator,
    ResourceAccount,
    aggregate_samples,
    bootstrap_sem,
    estimate_phase,
    fisher_curve,
    fisher_information,
    sample_estimates,
    snl_adjusted,
    snl_sem,
    total_resources,
)
from noonmetro.model import InterferometerModel, TransmissionProfile, recorded_probs
from noonmetro.simulator import EventCounts, SourceConfig

GRID = np.linspace(0, np.pi, 1000)
models = st.builds(
    InterferometerModel,
    st.floats(0.0, 1.0), st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.floats(0.0, 0.1),
)


def test_ideal_fisher_is_four(ideal_model):
    assert np.allclose(fisher_information(ideal_model, GRID, "analytic"), 4.0, atol=1e-9)
    assert np.allclose(fisher_information(ideal_model, GRID, "fd"), 4.0, atol=1e-4)


def test_flat_fringe_carries_no_information():
    F = fisher_information(InterferometerModel(0.0, 0.8, 0.7), GRID)
    assert np.allclose(F, 0.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(models)
def test_fisher_bounds_and_method_agreement(model):
    phis = np.linspace(0.01, np.pi - 0.01, 97)
    Fa = fisher_information(model, phis, "analytic")
    Ff = fisher_information(model, phis, "fd")
    assert np.all(Fa >= -1e-12)
    assert np.all(Fa <= 4 + 1e-6)
    assert np.allclose(Fa, Ff, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(models)
def test_fisher_below_heisenberg_unless_ideal(model):
    if model.visibility == 1.0 and model.eta_t.values[0] == 1.0 and model.eta_r.values[0] == 1.0:
        return
    assert np.min(fisher_information(model, GRID)) < 4 - 1e-9


def test_fisher_finite_at_vanishing_probabilities():
    # v=1 with loss: p11 vanishes at pi/2, p20 and p02 stay positive
    m = InterferometerModel(1.0, 0.9, 0.8)
    F = fisher_information(m, np.array([0.0, np.pi / 2]))
    assert np.all(np.isfinite(F))
    near = fisher_information(m, np.array([1e-4, np.pi / 2 - 1e-4]))
    assert np.allclose(F, near, atol=1e-4)


def test_fisher_matches_direct_formula(ref_model):
    phi = 0.9
    h = 1e-6
    p = recorded_probs(ref_model, phi, multipair=True).normalized()
    dp = (recorded_probs(ref_model, phi + h, multipair=True).normalized()
          - recorded_probs(ref_model, phi - h, multipair=True).normalized()) / (2 * h)
    assert fisher_information(ref_model, phi) == pytest.approx(float(np.sum(dp**2 / p)), rel=1e-7)


def test_tabulated_profile_uses_finite_differences():
    phis = tuple(np.linspace(0, 2 * np.pi, 8, endpoint=False))
    flat = InterferometerModel(0.95, TransmissionProfile(phis, (0.8,) * 8), 0.75)
    const = InterferometerModel(0.95, 0.8, 0.75)
    assert fisher_information(flat, GRID[1:-1]) == pytest.approx(
        fisher_information(const, GRID[1:-1]), abs=1e-6)


def test_reference_fisher_exceeds_adjusted_snl(ref_model):
    F = fisher_information(ref_model, GRID)
    assert F.max() > 2.09625
    # violation is confined to a window, not the fringe extremes
    assert F[0] < 2.09625 and fisher_information(ref_model, np.pi / 2) < 2.09625


def test_resource_accounting_examples():
    acc = snl_adjusted(10_000, 0.00155, 0.9556)
    assert acc.ratio == pytest.approx(1.048125, abs=1e-3)
    assert acc.f_snl == pytest.approx(2.09625, abs=2e-3)
    assert acc.f_snl * acc.k == pytest.approx(2 * acc.k_tilde, rel=1e-15)
    assert acc.k_tilde == pytest.approx(10_000 * 1.00155 / 0.9556, rel=1e-12)
    ideal = snl_adjusted(10_000, 0.0, 1.0)
    assert (ideal.k_tilde, ideal.f_snl) == (10_000, 2.0)
    assert total_resources(10_000 * 1.048125, 14520) == 304375500.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10**6), st.floats(0.0, 0.1), st.floats(0.01, 1.0))
def test_account_invariants(k, xi, em):
    acc = ResourceAccount(k, xi, em)
    assert acc.k_tilde >= k
    assert acc.f_snl >= 2
    assert abs(acc.k_tilde - k * (1 + xi) / em) <= 1e-12 * acc.k_tilde


@pytest.mark.parametrize("args", [(0, 0.0, 0.9), (10, -0.1, 0.9), (10, 0.0, 0.0), (10, 0.0, 1.1)])
def test_account_domain(args):
    with pytest.raises(ValueError):
        ResourceAccount(*args)


def test_snl_sem_values():
    assert snl_sem(304375500) == pytest.approx(5.732e-5, rel=1e-3)
    assert snl_sem(1) == 1.0
    assert snl_sem(4) == 0.5
    with pytest.raises(ValueError):
        snl_sem(0.5)


def test_fisher_curve_band_and_csv(tmp_path, ref_model):
    curves = CalibrationCurves.from_model(ref_model, visibility_err=2e-4,
                                          eta_t_err=(9e-4,), eta_r_err=(9e-4,))
    phis = np.linspace(0, np.pi / 2, 200)
    curve = fisher_curve(curves, phis)
    assert np.all(curve.f_lo <= curve.fisher + 1e-15)
    assert np.all(curve.fisher <= curve.f_hi + 1e-15)
    assert np.any(curve.f_hi > curve.f_lo)
    assert curve.violation_mask().any()
    path = tmp_path / "fisher.csv"
    curve.write_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(FISHER_HEADER)
    again = FisherCurve.read_csv(path)
    assert np.array_equal(again.fisher, curve.fisher)
    assert again.to_csv() == curve.to_csv()
    worst = fisher_curve(curves, phis, worst_case=True)
    assert np.ptp(worst.snl_adjusted) == 0
    assert np.all(worst.snl_adjusted >= curve.snl_adjusted - 1e-12)


def test_fisher_curve_rejects_impossible_values():
    with pytest.raises(ValueError):
        FisherCurve(np.zeros(1), np.array([4.5]), np.zeros(1), np.zeros(1), 2.0, np.ones(1))


def test_noiseless_estimate_self_consistent(ref_model):
    p = CalibrationCurves.from_model(ref_model).probs(0.7)
    counts = EventCounts(*(int(round(x * 10**10)) for x in p))
    est = estimate_phase(counts, ref_model)
    assert est.phi == pytest.approx(0.7, abs=1e-6)
    assert not est.boundary


def test_fringe_maximum_is_flagged_boundary(ideal_model):
    est = estimate_phase(EventCounts(10_000, 0, 0), ideal_model)
    assert est.phi == 0.0
    assert est.boundary


def test_ties_go_to_smaller_phase():
    est = estimate_phase([5, 3, 2], InterferometerModel(0.0, 0.8, 0.8))
    assert est.phi == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_estimates_stay_in_range(a, b, c):
    if a + b + c == 0:
        return
    est = PhaseEstimator(InterferometerModel(0.989, 0.8026, 0.7941, 0.00155))([a, b, c])
    assert 0.0 <= est.phi <= np.pi / 2


def test_estimator_input_checks(ref_model):
    with pytest.raises(ValueError):
        estimate_phase([0, 0, 0], ref_model)
    with pytest.raises(ValueError):
        estimate_phase([1, 2], ref_model)


def test_aggregate_basics():
    b = aggregate_samples([0.5, 0.5, 0.5])
    assert (b.mean, b.sem) == (0.5, 0.0)
    x = np.random.default_rng(1).normal(0.3, 0.01, 14520)
    b = aggregate_samples(np.clip(x, 0, np.pi / 2))
    assert b.sem == pytest.approx(0.01 / math.sqrt(14520), rel=0.05)
    assert abs(b.sem - np.std(b.estimates, ddof=1) / math.sqrt(b.s)) <= 1e-12
    with pytest.raises(ValueError):
        aggregate_samples([0.1])
    with pytest.raises(ValueError):
        aggregate_samples([0.1, 2.0])


def test_aggregate_benchmarks():
    acc = ResourceAccount(10_000, 0.00155, 0.9556)
    b = aggregate_samples(np.full(14520, 0.7), account=acc, fisher=2.3)
    assert b.k * b.s == 145_200_000
    assert b.snl_sem == pytest.approx(1 / math.sqrt(2 * acc.k_tilde * 14520))
    assert b.crb_sem == pytest.approx(1 / math.sqrt(14520 * 10_000 * 2.3))
    assert b.below_snl


def test_batch_json_validates():
    acc = ResourceAccount(100, 0.0, 0.9)
    b = aggregate_samples(np.linspace(0.6, 0.8, 20), account=acc, fisher=2.0, phi_true=0.7)
    data = json.loads(b.to_json("x.csv"))
    validate(data, "phase_batch")
    assert data["estimates_file"] == "x.csv"
    assert b.estimates_csv().splitlines()[0] == "sample_id,phi_est_rad"


def test_bootstrap_constant_and_normal():
    const = bootstrap_sem(np.full(50, 0.3), B=1000)
    assert (const.sem, const.ci_low, const.ci_high) == (0.0, 0.0, 0.0)
    x = np.random.default_rng(2).standard_normal(10_000)
    res = bootstrap_sem(x, B=10_000, seed=3)
    assert res.sem == pytest.approx(0.01, rel=0.05)
    assert res.ci_low < 0.01 < res.ci_high
    assert bootstrap_sem(x, B=1000, seed=3) == bootstrap_sem(x, B=1000, seed=3)


def test_bootstrap_input_checks():
    with pytest.raises(ValueError):
        bootstrap_sem(np.zeros(5))
    with pytest.raises(ValueError):
        bootstrap_sem(np.zeros(20), B=10)


def test_bootstrap_interval_coverage_on_skewed_data():
    rng = np.random.default_rng(4)
    s = 400
    oracle = rng.lognormal(0.0, 0.5, 10**6)
    true_sem = oracle.std(ddof=1) / math.sqrt(s)
    hits = 0
    for trial in range(100):
        res = bootstrap_sem(rng.lognormal(0.0, 0.5, s), B=1000, seed=trial)
        hits += res.ci_low <= true_sem <= res.ci_high
    assert hits >= 90


def test_sample_estimates_independent_of_workers(ref_model):
    cfg = SourceConfig(ref_model, seed=77)
    a, ca = sample_estimates(cfg, ref_model, 0.7, 2000, 8, workers=1)
    b, cb = sample_estimates(cfg, ref_model, 0.7, 2000, 8, workers=3)
    assert a == b
    assert ca == cb
    assert all(c.total == 2000 for c in ca)


@pytest.mark.slow
@pytest.mark.parametrize("phi", [0.4, 0.7, 1.0])
def test_monte_carlo_unbiased_and_efficient(phi, ref_model):
    cfg = SourceConfig(ref_model, seed=1000 + int(phi * 10))
    ests, _ = sample_estimates(cfg, ref_model, phi, 10_000, 1000, workers=4)
    b = aggregate_samples(ests, k=10_000, fisher=fisher_information(ref_model, phi))
    assert abs(b.mean - phi) < 3 * b.sem
    ratio = b.sd / (1 / math.sqrt(10_000 * fisher_information(ref_model, phi)))
    assert 0.95 <= ratio <= 1.15
