import numpy as np
import pytest
from scipy import stats

from noonmetro import rng as rngmod
from noonmetro.model import InterferometerModel, double_pair_probs, eta_min, recorded_probs
from noonmetro.simulator import (
    SCAN_HEADER,
    EventCounts,
    FringeScan,
    ScanRow,
    SimulationLimitError,
    SourceConfig,
    simulate_pulse,
    simulate_pulses,
    simulate_scan,
    simulate_trials,
)

ALPHA = 1e-3


def _per_pulse_oracle(config, phi):
    """Per-pulse probabilities of C11, C20, C02 and nothing, dark counts included."""
    model = config.model
    p0, p1, p2 = config.emission_probs
    single = recorded_probs(model.replace(xi=0.0), phi)
    double = double_pair_probs(single)
    # pattern order: both, t only, r only, none
    pat = p1 * single.raw() + p2 * double.raw()
    pat[3] += p0
    d = model.dark_prob
    patterns = [(1, 1), (1, 0), (0, 1), (0, 0)]
    out = np.zeros(4)
    for i, (ct, cr) in enumerate(patterns):
        for dt in (0, 1):
            for dr in (0, 1):
                w = pat[i] * (d if dt else 1 - d) * (d if dr else 1 - d)
                out[patterns.index((ct | dt, cr | dr))] += w
    return out


def _chi2_pvalue(observed, expected_probs):
    observed = np.asarray(observed, dtype=float)
    expected = expected_probs * observed.sum()
    keep = expected > 0
    assert np.all(observed[~keep] == 0)
    return stats.chisquare(observed[keep], expected[keep]).pvalue


def test_trivial_pulses():
    perfect = SourceConfig(InterferometerModel(1.0, 1.0, 1.0), pair_prob=1.0)
    rng = np.random.default_rng(0)
    assert all(simulate_pulse(perfect, 0.0, rng) == "C11" for _ in range(200))
    dark = SourceConfig(InterferometerModel(1.0, 1.0, 1.0), pair_prob=0.0)
    assert all(simulate_pulse(dark, 0.3, rng) is None for _ in range(200))


@pytest.mark.parametrize("phi", np.linspace(0.1, 2.9, 5))
def test_single_pair_frequencies_match_model(phi, ref_model):
    model = ref_model.replace(xi=0.0)
    cfg = SourceConfig(model, pair_prob=1.0, seed=3)
    c = simulate_pulses(cfg, phi, 10**6, rngmod.substream(3, rngmod.PULSES, int(phi * 100)))
    obs = [c.c11, c.c20, c.c02, c.no_event]
    assert _chi2_pvalue(obs, recorded_probs(model, phi).raw()) > ALPHA


def test_multipair_and_dark_frequencies_match_oracle(ref_model):
    model = ref_model.replace(xi=0.05, dark_prob=1e-3)
    cfg = SourceConfig(model, pair_prob=0.2, seed=5)
    for i, phi in enumerate([0.0, 0.8, 1.57]):
        c = simulate_pulses(cfg, phi, 10**6, rngmod.substream(5, rngmod.PULSES, i))
        obs = [c.c11, c.c20, c.c02, c.no_event]
        assert _chi2_pvalue(obs, _per_pulse_oracle(cfg, phi)) > ALPHA


def test_scalar_reference_agrees_with_oracle(ref_model):
    model = ref_model.replace(xi=0.1, dark_prob=1e-3)
    cfg = SourceConfig(model, pair_prob=0.5, seed=1)
    rng = np.random.default_rng(99)
    draws = [simulate_pulse(cfg, 0.6, rng) for _ in range(40_000)]
    obs = [draws.count("C11"), draws.count("C20"), draws.count("C02"), draws.count(None)]
    assert _chi2_pvalue(obs, _per_pulse_oracle(cfg, 0.6)) > ALPHA


def test_recorded_trial_distribution_matches_multipair_model(ref_model):
    cfg = SourceConfig(ref_model.replace(xi=0.05), pair_prob=0.1, seed=8)
    c = simulate_trials(cfg, 0.9, 400_000)
    want = recorded_probs(cfg.model, 0.9, multipair=True).normalized()
    assert _chi2_pvalue(c.as_array(), want) > ALPHA


def test_trials_stop_exactly_at_k(ref_model):
    cfg = SourceConfig(ref_model, seed=2)
    c = simulate_trials(cfg, np.pi / 4, 10_000)
    assert c.total == 10_000
    assert c.pulses >= c.total
    assert c.pairs_generated > 0


def test_single_trial_perfect_source():
    cfg = SourceConfig(InterferometerModel(1.0, 1.0, 1.0), pair_prob=1.0)
    c = simulate_trials(cfg, 0.0, 1)
    assert (c.c11, c.c20, c.c02, c.pulses) == (1, 0, 0, 1)


def test_guard_limit():
    silent = SourceConfig(InterferometerModel(0.9, 0.8, 0.8), pair_prob=0.0)
    with pytest.raises(SimulationLimitError):
        simulate_trials(silent, 0.0, 10)
    tight = SourceConfig(InterferometerModel(0.9, 0.8, 0.8), pair_prob=1e-3, max_pulses=10_000)
    with pytest.raises(SimulationLimitError):
        simulate_trials(tight, 0.0, 1000)


def test_config_validation(ref_model):
    with pytest.raises(ValueError):
        SourceConfig(ref_model, pair_prob=1.5)
    with pytest.raises(ValueError):
        SourceConfig(ref_model.replace(xi=0.1), pair_prob=0.95)
    with pytest.raises(ValueError):
        SourceConfig(ref_model, seed=-1)
    with pytest.raises(ValueError):
        SourceConfig(ref_model, rep_rate_hz=0)


def test_pairs_per_recorded_trial_matches_accounting(ref_model):
    cfg = SourceConfig(ref_model, seed=4)
    phi = np.pi / 4
    c = simulate_trials(cfg, phi, 100_000)
    predicted = (1 + ref_model.xi) / float(eta_min(ref_model, phi))
    assert c.pairs_generated / c.total == pytest.approx(predicted, rel=0.02)


def test_more_double_pairs_cost_more_pairs_per_trial(ref_model):
    ratios = []
    for xi in (0.0, 0.05, 0.1):
        cfg = SourceConfig(ref_model.replace(xi=xi), pair_prob=0.05, seed=6)
        c = simulate_trials(cfg, 0.5, 200_000)
        ratios.append(c.pairs_generated / c.total)
    assert ratios[0] < ratios[1] < ratios[2]


def test_scan_fringe_extremes():
    cfg = SourceConfig(InterferometerModel(1.0, 1.0, 1.0), pair_prob=0.01, seed=1)
    scan = simulate_scan(cfg, [0.0, np.pi / 2], 20_000)
    p = scan.probabilities()
    assert p[0, 0] == 1.0
    assert p[1, 0] == 0.0
    assert scan.totals().tolist() == [20_000, 20_000]


def test_scan_matches_model_within_five_sigma(ref_model):
    cfg = SourceConfig(ref_model, seed=9)
    phases = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    scan = simulate_scan(cfg, phases, 50_000)
    p = scan.probabilities()
    want = recorded_probs(ref_model, phases, multipair=True).normalized().T
    sigma = np.sqrt(want * (1 - want) / 50_000)
    assert np.all(np.abs(p - want) < 5 * sigma + 1e-12)


def test_scan_deterministic_and_thread_independent(ref_model):
    cfg = SourceConfig(ref_model, seed=123)
    phases = np.linspace(0, np.pi, 6, endpoint=False)
    a = simulate_scan(cfg, phases, 5000, workers=1)
    b = simulate_scan(cfg, phases, 5000, workers=4)
    assert a.to_csv() == b.to_csv()
    # a row depends only on its own index, not on its neighbours
    c = simulate_scan(cfg, phases[:3], 5000)
    assert c.rows == a.rows[:3]
    d = simulate_scan(SourceConfig(ref_model, seed=124), phases, 5000)
    assert d.rows != a.rows


def test_scan_csv_round_trip(ref_model):
    cfg = SourceConfig(ref_model, seed=7)
    scan = simulate_scan(cfg, [0.0, 0.5, 1.0], 1000)
    text = scan.to_csv()
    header = [ln for ln in text.splitlines() if not ln.startswith("#")][0]
    assert header == ",".join(SCAN_HEADER)
    assert "oracle-only" in text
    again = FringeScan.from_csv(text)
    assert again.rows == scan.rows
    assert again.metadata["seed"] == 7
    assert again.to_csv() == text


def test_scan_rejects_bad_phases():
    row = ScanRow(0.0, EventCounts(1, 0, 0))
    with pytest.raises(ValueError):
        FringeScan((row, row))
    with pytest.raises(ValueError):
        FringeScan((ScanRow(7.0, EventCounts(1, 0, 0)),))


def test_event_counts_invariants():
    with pytest.raises(ValueError):
        EventCounts(-1, 0, 0)
    with pytest.raises(ValueError):
        EventCounts(5, 5, 5, pulses=10)
    total = EventCounts(1, 2, 3, 10, 4) + EventCounts(1, 1, 1, 5, 3)
    assert total == EventCounts(2, 3, 4, 15, 7)
    assert total.no_event == 6
