from __future__ import annotations

import json
import math

import numpy as np
import pytest

from adadelay.core import ProblemConstants
from adadelay.delay import ScaledDelay, TruncatedGaussianDelay, UniformDelay
from adadelay.diagnostics import (
    LemmaCheck,
    check_lemma_bounds,
    rate_constants,
    cross_term_check,
    fit_rate,
    lemma_sigma,
    residuals_from_batch,
    residuals_from_record,
    theorem_bound,
    write_report,
    zplus_bound,
)
from adadelay.engine import run, run_batch
from adadelay.problems import make_synthetic
from adadelay.stepsize import AdaDelayScalar

ONES = ProblemConstants(L=1.0, G=1.0, R=1.0, sigma=1.0)


def _batch(sigma=1.0, tau_bar=3, T=200, seeds=range(60), c=2.0, beta=0.5, delay=None):
    prob, _, consts = make_synthetic(5, sigma=sigma, R=3.0, seed=1)
    delay = delay or UniformDelay(tau_bar)
    b = run_batch(prob, AdaDelayScalar(c=c, beta=beta), delay, T, list(seeds), record_trajectory=True)
    return prob, consts, residuals_from_batch(b, prob)


def test_theorem_bound_hand_value():
    # D1 = sqrt(2) + 1, D2 = 7/3, D3 = 1 + 1 + 18/12
    expect = (math.sqrt(2.0) + 1.0) * 10.0 + 7.0 / 3.0 * math.log(100.0) + 3.5
    got = theorem_bound(ONES, UniformDelay(1), 1.0, 100)
    assert got == pytest.approx(expect, rel=1e-14)
    assert got == pytest.approx(38.3875327, abs=1e-7)
    D = rate_constants(ONES, UniformDelay(1), 1.0)
    assert D == pytest.approx({"D1": math.sqrt(2.0) + 1.0, "D2": 7.0 / 3.0, "D3": 3.5})


def test_theorem_bound_without_delay_or_noise_reduces_to_initial_distance():
    consts = ProblemConstants(L=2.0, G=3.0, R=5.0, sigma=0.0)
    assert theorem_bound(consts, UniformDelay(0), 4.0, 1) == pytest.approx(0.5 * (2.0 + 4.0) * 25.0)


def test_theorem_bound_scaled_form():
    consts = ProblemConstants(L=1.0, G=2.0, R=3.0, sigma=1.0)
    model = ScaledDelay(0.5, 2.0, 10.0)
    b = theorem_bound(consts, model, 1.5, 50, detail=True)
    assert set(b.terms) == {"noise", "distance", "late_arrivals", "staleness", "constant"}
    assert b.value == pytest.approx(sum(b.terms.values()))
    assert b.terms["noise"] == pytest.approx(math.sqrt(50) / 1.5)
    assert theorem_bound(consts, model, 1.5, 500) > b.value
    assert set(b.constants) == {"D4", "D5", "D6"}
    with pytest.raises(TypeError):
        theorem_bound(consts, TruncatedGaussianDelay(1, 1, 3), 1.0, 10)
    with pytest.raises(ValueError):
        theorem_bound(consts, model, 1.0, 0)


def test_lemma_sigma_and_zplus_values():
    assert lemma_sigma(ProblemConstants(1, 1, 1, 2.0), 4.0, 100) == 10.0
    # beta != 1/2 form: sigma^2/(2c) * sum t^-beta
    assert lemma_sigma(ONES, 1.0, 3, beta=0.25) == pytest.approx(0.5 * (1 + 2 ** -0.25 + 3 ** -0.25))
    assert zplus_bound(2.0, 3.0, 0.5, 1.0, 5) == pytest.approx(2.0 * 0.5 * 2.0 / 2.0 * 9.0)
    assert zplus_bound(2.0, 3.0, 0.5, 1.0, 5, with_radius=False) == pytest.approx(1.0)


def test_identity_and_inequality_hold_per_step():
    _, _, res = _batch(T=300, seeds=range(5))
    assert res.identity_residual().max() < 1e-10
    assert res.inequality_holds().all()
    for name in ("slack_convex", "slack_smooth"):
        assert getattr(res, name).min() >= -1e-12
    assert res.slack_proj.min() >= -1e-10


def test_identity_holds_with_active_projection():
    prob, _, _ = make_synthetic(4, sigma=3.0, R=1.5, seed=0, x_star_norm=1.2)
    b = run_batch(prob, AdaDelayScalar(c=0.05), UniformDelay(2), 200, [0, 1], record_trajectory=True)
    res = residuals_from_batch(b, prob)
    assert res.slack_proj.max() > 0
    assert res.identity_residual().max() < 1e-10
    assert res.inequality_holds().all()


def test_staleness_vanishes_without_delay_and_noise_term_without_noise():
    _, _, res = _batch(sigma=0.0, tau_bar=0, T=100, seeds=range(2))
    assert np.all(res.gamma == 0.0)
    assert np.all(res.sigma_term == 0.0)
    assert np.all(res.cross == 0.0)


def test_residuals_from_record_match_batch():
    prob, _, _ = make_synthetic(5, sigma=1.0, R=3.0, seed=1)
    rec = run(prob, AdaDelayScalar(c=2.0), UniformDelay(3), 200, seed=4, record_trajectory=True)
    b = run_batch(prob, AdaDelayScalar(c=2.0), UniformDelay(3), 200, [4], record_trajectory=True)
    r1, r2 = residuals_from_record(rec, prob), residuals_from_batch(b, prob)
    assert np.array_equal(r1.delta, r2.delta) and np.array_equal(r1.gamma, r2.gamma)
    rows = r1.rows()
    assert len(rows) == 200 and rows[0].t == 1 and math.isnan(rows[0].z_t)


def test_lemma_checks_pass_on_a_small_instance(tmp_path):
    _, consts, res = _batch(T=200, seeds=range(60))
    checks = check_lemma_bounds(res, consts, UniformDelay(3), 2.0)
    assert set(checks) >= {"sigma", "delta_uniform", "gamma_uniform", "zplus", "inv_eta", "lag_distance"}
    assert all(c.passed for c in checks.values()), {k: c.to_dict() for k, c in checks.items() if not c.passed}
    path = write_report(checks, tmp_path / "r.json")
    data = json.loads(path.read_text())
    assert data["sigma"]["pass"] is True


def test_lemma_checks_need_enough_seeds():
    _, consts, res = _batch(T=20, seeds=range(5))
    with pytest.raises(ValueError):
        check_lemma_bounds(res, consts, UniformDelay(3), 2.0)
    with pytest.raises(ValueError):
        check_lemma_bounds(res, consts, UniformDelay(3), 2.0, min_seeds=2, lemmas=["nope"])


def test_lemma_check_flags_violation():
    _, consts, res = _batch(T=50, seeds=range(60))
    tiny = ProblemConstants(L=consts.L, G=consts.G, R=consts.R, sigma=1e-3)
    assert not check_lemma_bounds(res, tiny, UniformDelay(3), 2.0, lemmas=["sigma"])["sigma"].passed


def test_cross_term_check_structure():
    _, _, res = _batch(T=100, seeds=range(60))
    rows = cross_term_check(res, [10, 50, 100])
    assert [r["t"] for r in rows] == [10, 50, 100]
    assert all(set(r) == {"t", "mean", "stderr", "z", "pass"} for r in rows)


def test_lemma_check_to_dict():
    d = LemmaCheck("x", 1.0, 2.0, 0.1, True, 50).to_dict()
    assert d["pass"] is True and "passed" not in d


def test_fit_rate_exact_power_laws():
    T = np.array([1e2, 1e3, 1e4, 1e5])
    assert fit_rate(T, T ** -0.5).slope == pytest.approx(-0.5, abs=1e-12)
    f = fit_rate(T, 3.0 / T)
    assert f.slope == pytest.approx(-1.0, abs=1e-12)
    assert f.intercept == pytest.approx(math.log(3.0), abs=1e-10)
    assert f.ci_low == f.ci_high == f.slope


def test_fit_rate_bootstrap_interval_covers_truth():
    rng = np.random.default_rng(0)
    T = np.array([1e2, 1e3, 1e4])
    gaps = T ** -0.5 * rng.lognormal(0.0, 0.3, size=(200, 3))
    f = fit_rate(T, gaps)
    assert f.ci_low < -0.5 < f.ci_high
    assert f.ci_high - f.ci_low < 0.1


def test_fit_rate_errors():
    with pytest.raises(ValueError):
        fit_rate([10, 100], [1, 2])
    with pytest.raises(ValueError):
        fit_rate([10, 20, 100], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_rate([10, 100, 1000], [1, 0, 3])
    with pytest.raises(ValueError):
        fit_rate([10, 100, 1000], [1, 2])
