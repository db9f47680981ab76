import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vocarch.errors import EmptyLevel
from vocarch.mixed import (
    ALL_TERMS,
    PERIOD_LEVELS,
    ModelSpec,
    Observations,
    build_design,
    effect_curves,
    fit,
    likelihood_ratio,
    marginal_terms,
    r_squared,
    simplify,
)


def one_way(y, groups):
    n = len(y)
    g = np.asarray(groups).astype(str)
    return Observations(y, [30.0] * n, ["P1955"] * n, ["F"] * n, g, g)


def planted(seed=1, n_speakers=40, per_speaker=10, noise=(1.0, 0.5, 0.4), age_gender=0.03):
    rng = np.random.default_rng(seed)
    sp = np.repeat(np.arange(n_speakers), per_speaker)
    pr = np.repeat(np.arange(2 * n_speakers), per_speaker // 2)
    g = np.where(sp % 2, "M", "F")
    per = np.array(PERIOD_LEVELS)[(sp // 2) % 4]
    age = 20.0 + (sp * 7) % 60
    y = (10 - 9 * (g == "M") + age_gender * age * (g == "M")
         + rng.normal(0, noise[0], n_speakers)[sp] + rng.normal(0, noise[1], 2 * n_speakers)[pr]
         + rng.normal(0, noise[2], sp.size))
    return Observations(y, age, per, g, sp.astype(str), pr.astype(str))


def test_full_design_has_sixteen_columns():
    d = build_design(planted(), ModelSpec.maximal())
    assert d.X.shape[1] == 16
    assert d.columns[0] == "(Intercept)"
    # reference levels absorbed in the intercept
    assert not any("P1955" in c or "[F]" in c for c in d.columns)


def test_intercept_only_design():
    d = build_design(planted(), ModelSpec.intercept_only())
    assert d.X.shape[1] == 1 and np.all(d.X == 1.0)


def test_missing_gender_level():
    obs = planted()
    keep = np.flatnonzero(obs.gender == "F")
    with pytest.raises(EmptyLevel):
        build_design(obs.subset(keep), ModelSpec(frozenset({"Gender"})))


def test_age_is_centred():
    d = build_design(planted(), ModelSpec(frozenset({"Age"})))
    assert abs(d.X[:, 1].mean()) < 1e-12


def test_marginality_enforced():
    with pytest.raises(ValueError):
        ModelSpec(frozenset({"Age:Gender"}))
    assert sorted(marginal_terms("Age:Period:Gender")) == sorted(
        ["Age", "Period", "Gender", "Age:Period", "Age:Gender", "Period:Gender"])


def test_nesting_enforced():
    with pytest.raises(ValueError):
        Observations([1, 2], [30, 30], ["P1955"] * 2, ["F"] * 2, ["a", "b"], ["p", "p"])


def test_worked_example():
    f = fit(one_way([1.0, 1.2, 2.0, 2.2, 3.0, 3.2], [0, 0, 1, 1, 2, 2]), ModelSpec(frozenset(), "speaker"))
    assert f.sigma2_residual == pytest.approx(0.02, rel=1e-9)
    assert f.sigma2_speaker == pytest.approx(0.99, rel=1e-9)
    assert f.coefficients[0] == pytest.approx(2.1)


def test_identical_responses():
    obs = planted().with_response(np.full(400, 3.0))
    f = fit(obs, ModelSpec.intercept_only())
    assert f.coefficients[0] == pytest.approx(3.0)
    assert (f.sigma2_speaker, f.sigma2_program, f.sigma2_residual) == (0.0, 0.0, 0.0)


def test_reml_matches_anova_on_random_balanced_layouts():
    rng = np.random.default_rng(0)
    done = 0
    while done < 100:
        a, r = rng.integers(3, 8), rng.integers(2, 6)
        groups = rng.normal(0, 1.5, a)
        y = np.repeat(groups, r) + rng.normal(0, 1, a * r) + 5
        mse, between = oracles.oneway_anova(y.reshape(a, r).tolist())
        if between <= 0:
            continue  # ANOVA estimate negative, REML sits on the boundary instead
        f = fit(one_way(y, np.repeat(np.arange(a), r)), ModelSpec(frozenset(), "speaker"))
        assert f.sigma2_residual == pytest.approx(mse, rel=1e-6)
        assert f.sigma2_speaker == pytest.approx(between, rel=1e-6)
        done += 1


def test_loglik_matches_dense_covariance():
    obs = planted(seed=3, n_speakers=12, per_speaker=6)
    spec = ModelSpec(frozenset({"Age", "Gender", "Age:Gender"}))
    f = fit(obs, spec)
    d = build_design(obs, spec)
    inv = np.argsort(d.order)
    X = d.X[inv]
    dev = oracles.dense_reml_deviance(X, obs.response, obs.speaker, obs.program,
                                      f.sigma2_speaker, f.sigma2_program, f.sigma2_residual)
    assert -0.5 * dev == pytest.approx(f.loglik_reml, rel=1e-9)
    s2s, s2p, s2e = f.ml_variances
    dev_ml = oracles.dense_reml_deviance(X, obs.response, obs.speaker, obs.program, s2s, s2p, s2e, reml=False)
    assert -0.5 * dev_ml == pytest.approx(f.loglik_ml, rel=1e-9)


def test_no_random_effects_is_ols():
    obs = planted(seed=4)
    spec = ModelSpec(frozenset(ALL_TERMS), "none")
    f = fit(obs, spec)
    d = build_design(obs, spec)
    beta, *_ = np.linalg.lstsq(d.X, d.y, rcond=None)
    assert np.allclose(f.coefficients, beta, rtol=1e-8, atol=1e-10)


@settings(max_examples=10)
@given(st.randoms())
def test_permutation_invariance(rnd):
    obs = planted(seed=5, n_speakers=16, per_speaker=6)
    idx = list(range(len(obs)))
    rnd.shuffle(idx)
    spec = ModelSpec(frozenset({"Age", "Gender", "Period", "Age:Gender"}))
    a, b = fit(obs, spec), fit(obs.subset(np.array(idx)), spec)
    assert np.allclose(a.coefficients, b.coefficients, rtol=0, atol=1e-10)
    for x, y in [(a.sigma2_speaker, b.sigma2_speaker), (a.sigma2_program, b.sigma2_program),
                 (a.sigma2_residual, b.sigma2_residual), (a.loglik_reml, b.loglik_reml)]:
        assert abs(x - y) <= 1e-10 * max(1.0, abs(x))
    assert np.allclose(a.fitted[idx], b.fitted, atol=1e-10)


@settings(max_examples=10)
@given(st.floats(-20, 20).filter(lambda c: abs(c) > 1e-3))
def test_constant_shift_moves_only_intercept(c):
    obs = planted(seed=6, n_speakers=32, per_speaker=4)
    spec = ModelSpec.maximal()
    a, b = fit(obs, spec), fit(obs.with_response(obs.response + c), spec)
    assert b.coefficients[0] == pytest.approx(a.coefficients[0] + c, rel=1e-8)
    assert np.allclose(a.coefficients[1:], b.coefficients[1:], rtol=1e-8, atol=1e-8)
    for x, y in [(a.sigma2_speaker, b.sigma2_speaker), (a.sigma2_program, b.sigma2_program),
                 (a.sigma2_residual, b.sigma2_residual), (a.r2_marginal, b.r2_marginal),
                 (a.r2_conditional, b.r2_conditional), (a.loglik_reml, b.loglik_reml)]:
        assert y == pytest.approx(x, rel=1e-8, abs=1e-12)


def test_r_squared_examples():
    assert r_squared(3.0, 1.0, 0.5, 0.5) == pytest.approx((0.6, 0.9))
    m, c = r_squared(2.0, 0.0, 0.0, 1.0)
    assert m == c


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_fit_invariants(seed):
    f = fit(planted(seed=seed, n_speakers=32, per_speaker=4), ModelSpec.maximal())
    assert min(f.sigma2_speaker, f.sigma2_program, f.sigma2_residual) >= 0
    assert 0 <= f.r2_marginal <= f.r2_conditional <= 1


def test_simplify_keeps_planted_interaction():
    s = simplify(planted(age_gender=0.08))
    assert "Age:Gender" in s.spec.terms
    assert "Age:Period:Gender" not in s.spec.terms
    assert s.fit.coef("Age:Gender[M]") == pytest.approx(0.08, abs=0.03)


def test_simplify_pure_noise_reaches_intercept():
    obs = planted()
    s = simplify(obs.with_response(np.random.default_rng(9).normal(size=len(obs))))
    assert s.spec.terms == frozenset()


def test_simplify_fixpoint_has_empty_audit():
    obs = planted()
    first = simplify(obs)
    again = simplify(obs, first.spec)
    assert again.spec == first.spec
    assert again.rounds == []


def test_audit_respects_marginality_and_lrt():
    obs = planted(seed=2)
    s = simplify(obs)
    spec = ModelSpec.maximal()
    for rnd in s.audit():
        tested = {t["term"] for t in rnd["tests"]}
        assert tested == set(spec.deletable())
        dropped = [t["term"] for t in rnd["tests"] if t["dropped"]]
        for term in dropped:
            spec = spec.without(term)  # raises if marginality breaks
    assert spec == s.spec
    json.dumps(s.audit())
    full = fit(obs, ModelSpec.maximal())
    red = fit(obs, ModelSpec.maximal().without("Age:Period:Gender"))
    chi2, df, p = likelihood_ratio(full, red)
    assert df == 3 and chi2 >= 0 and 0 <= p <= 1
    assert s.audit()[0]["tests"][0]["chi2"] == pytest.approx(chi2)


def test_effect_curves_layout():
    f = fit(planted(), ModelSpec(frozenset({"Age", "Gender", "Age:Gender"})))
    fig1, fig2 = effect_curves(f)
    assert len(fig1) == 71 * 2 and len(fig2) == 71 * 8
    assert {r["age"] for r in fig1} == set(range(20, 91))
    m40 = next(r for r in fig1 if r["age"] == 40 and r["gender"] == "M")["fitted_st"]
    f40 = next(r for r in fig1 if r["age"] == 40 and r["gender"] == "F")["fitted_st"]
    assert m40 - f40 == pytest.approx(-9 + 0.03 * 40, abs=1.0)
