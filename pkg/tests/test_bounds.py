import csv
import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from piml_pacbayes.bounds import (
    BOUND_COLUMNS,
    GaussianMeasure,
    chi2_plus1_iso,
    dbar_from_exponent,
    k_multi,
    kl_iso,
    lp_tighten,
    mc_draw,
    mc_expected_risk,
    mc_statistics,
    poincare_gap_eq,
    poincare_gap_sample,
    pooled_physics_bound,
    sobolev_gap,
    union_poincare,
    union_sobolev,
)
from piml_pacbayes.constants import TaskConstants
from piml_pacbayes.data import generate
from piml_pacbayes.errors import ContractError, VacuousBoundError
from piml_pacbayes.model import Field, MLPSpec, ParamVector
from piml_pacbayes.pde import empirical_risk


def gm(values, sigma2=1e-6):
    # a 2-1-1 network has exactly 5 parameters
    return GaussianMeasure(ParamVector(np.asarray(values, float), MLPSpec((1,))), sigma2)


ZERO = np.zeros(5)


# --------------------------------------------------------------------------
# divergences


def test_kl_identical_means():
    assert kl_iso(gm(ZERO), gm(ZERO)) == 0.0


def test_kl_formula_example():
    d = np.zeros(5)
    d[:2] = 1e-3  # ||delta||^2 = 2e-6
    assert kl_iso(gm(d), gm(ZERO)) == pytest.approx(1.0, rel=1e-12)


def test_kl_matches_monte_carlo_log_ratio():
    rng = np.random.default_rng(0)
    sigma2 = 0.3
    mu_rho = np.array([0.5, -0.2, 0.1, 0.0, 0.3])
    theta = mu_rho + math.sqrt(sigma2) * rng.standard_normal((100_000, 5))
    log_ratio = (np.sum(theta**2, axis=1) - np.sum((theta - mu_rho) ** 2, axis=1)) / (2 * sigma2)
    est, se = log_ratio.mean(), log_ratio.std(ddof=1) / math.sqrt(len(log_ratio))
    assert abs(est - kl_iso(gm(mu_rho, sigma2), gm(ZERO, sigma2))) < 2 * se


def test_chi2_examples():
    assert chi2_plus1_iso(gm(ZERO), gm(ZERO)) == 1.0
    d = np.zeros(5)
    d[0] = 1e-3  # ||delta||^2 = sigma^2
    assert chi2_plus1_iso(gm(d), gm(ZERO)) == pytest.approx(math.e, rel=1e-12)


def test_dbar_overflow_is_vacuous():
    with pytest.raises(VacuousBoundError, match="vacuous"):
        dbar_from_exponent(701.0)
    assert dbar_from_exponent(700.0) == math.exp(700.0)


def test_unequal_variances_unsupported():
    with pytest.raises(ContractError):
        kl_iso(gm(ZERO, 1.0), gm(ZERO, 2.0))


# --------------------------------------------------------------------------
# multi-task gaps


def test_sobolev_hand_recompute_m2():
    delta, cs, L, G = 0.05, 3.0, 7.0, 0.4
    K = 2 * math.log(2 * 2 / delta) / (2 - 1)
    assert k_multi(0.0, 2, delta) == pytest.approx(K, rel=1e-15)
    LS = math.sqrt(2 * 2 * cs**2 * L**2)
    expected = math.sqrt(2 * cs * G * K + LS * K**1.5) / 2
    assert sobolev_gap([G], [2], [cs], [L], 0.0, delta) == pytest.approx(expected, rel=1e-12)


def test_sobolev_zero_gradients():
    m, cs, L = [100, 300], [2.0, 5.0], [10.0, 3.0]
    K = k_multi(1.5, 400, 0.05)
    LS = math.sqrt(2 * (100 * 4 * 100 + 300 * 25 * 9))
    assert sobolev_gap([0, 0], m, cs, L, 1.5, 0.05) == pytest.approx(math.sqrt(LS * K**1.5) / 400, rel=1e-12)


def test_sizes_must_exceed_one():
    with pytest.raises(ContractError):
        sobolev_gap([0.0], [1], [1.0], [1.0], 0.0, 0.05)
    with pytest.raises(ContractError):
        union_sobolev([0.0, 0.0], [5, 1], [1.0, 1.0], [1.0, 1.0], 0.0, 0.05)


def test_poincare_divergence_free():
    m, cp, L, G, delta = [50.0], [2.0], [4.0], [3.0], 0.05
    K = k_multi(0.0, 50, delta)
    grad = 2.0 / 50**2 * 3.0
    Lp = math.sqrt(2 * 4 * 16 / 50**3)
    assert poincare_gap_eq(G, m, cp, L, 1.0, delta) == pytest.approx(math.sqrt((2 * grad + Lp * math.sqrt(K)) / delta), rel=1e-12)
    assert poincare_gap_eq([0.0], m, cp, L, 2.5, delta) == pytest.approx(math.sqrt(Lp * math.sqrt(K) * 2.5 / delta), rel=1e-12)


def test_poincare_sample_zero_gradients():
    m, cp, L = [20, 30], [1.0, 2.0], [3.0, 4.0]
    K = k_multi(0.0, 50, 0.05)
    LS = math.sqrt(2 * (20 * 9 + 30 * 4 * 16))
    got = poincare_gap_sample([0, 0], m, cp, L, 1.7, 0.05)
    assert got == pytest.approx(math.sqrt(LS * math.sqrt(K) * 1.7 / 0.05) / 50, rel=1e-12)


@given(st.lists(st.tuples(st.floats(0, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3)), min_size=1, max_size=6),
       st.integers(2, 5000), st.floats(1.0, 50.0))
def test_poincare_forms_agree_when_balanced(rows, m, dbar):
    G, cp, L = (list(c) for c in zip(*rows))
    n = len(rows)
    eq = poincare_gap_eq(G, [m] * n, cp, L, dbar, 0.05)
    sw = poincare_gap_sample(G, [m] * n, cp, L, dbar, 0.05)
    assert sw * n == pytest.approx(eq, rel=1e-10)


@given(st.floats(0, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(2, 10_000), st.floats(0, 50))
def test_single_loss_union_equals_multitask(G, cs, L, m, kl):
    """With one loss the union bound is the multi-task bound at the same delta."""
    u = union_sobolev([G / m], [m], [cs], [L], kl, 0.05)[0]
    assert u == pytest.approx(sobolev_gap([G], [m], [cs], [L], kl, 0.05), rel=1e-10)


def test_union_poincare_without_divergence():
    m, cp, L, g, delta = 40, 2.0, 3.0, 0.5, 0.05
    K = (math.log(2 * m / (delta / 2))) / (m - 1)
    inner = 2 * cp / m * g + math.sqrt(2) * cp * L / m * math.sqrt(K)
    got = union_poincare([g, g], [m, m], [cp, cp], [L, L], 1.0, delta)
    np.testing.assert_allclose(got, math.sqrt(2 / delta * inner), rtol=1e-12)


@given(st.lists(st.tuples(st.floats(0, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3)), min_size=1, max_size=6),
       st.lists(st.integers(2, 3000), min_size=6, max_size=6), st.floats(0, 100), st.floats(1, 100))
def test_bounds_are_nonnegative_and_finite(rows, ms, kl, dbar):
    G, c, L = (list(v) for v in zip(*rows))
    m = ms[: len(rows)]
    for v in (sobolev_gap(G, m, c, L, kl, 0.05), poincare_gap_eq(G, m, c, L, dbar, 0.05),
              poincare_gap_sample(G, m, c, L, dbar, 0.05)):
        assert v >= 0 and math.isfinite(v)
    assert np.all(union_sobolev(G, m, c, L, kl, 0.05) >= 0)
    assert np.all(union_poincare(G, m, c, L, dbar, 0.05) >= 0)


def test_sobolev_gap_grows_with_kl():
    args = ([1.0, 2.0], [100, 100], [1.0, 1.0], [5.0, 5.0])
    assert sobolev_gap(*args, 0.0, 0.05) < sobolev_gap(*args, 3.0, 0.05)


# --------------------------------------------------------------------------
# LP


def test_lp_non_binding():
    res = lp_tighten([0.2, 0.3], [0.5, 0.5], 10.0)
    assert not res.binding and res.total == pytest.approx(0.5)
    np.testing.assert_array_equal(res.R, [0.2, 0.3])


def test_lp_two_loss_example():
    res = lp_tighten([1.0, 1.0], [0.9, 0.1], 0.5)
    np.testing.assert_allclose(res.R, [4 / 9, 1.0], rtol=1e-15)
    assert res.binding and res.total == pytest.approx(13 / 9, rel=1e-15)


def test_lp_negative_budget_is_flagged():
    res = lp_tighten([1.0], [1.0], -0.1)
    assert res.infeasible and res.total == 0.0


def _vertex_optimum(c, w, b):
    """Exact LP optimum by vertex enumeration: each vertex has all but one variable at a bound."""
    n = len(c)
    best = -math.inf
    for fixed in itertools.product([0, 1], repeat=n):
        R = np.where(np.array(fixed) == 1, c, 0.0)
        if w @ R <= b + 1e-12:
            best = max(best, R.sum())
        for j in range(n):
            rest = R.copy()
            rest[j] = 0.0
            rj = (b - w @ rest) / w[j]
            if 0 <= rj <= c[j]:
                rest[j] = rj
                best = max(best, rest.sum())
    return best


@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0.01, 1)), min_size=1, max_size=5), st.floats(0, 10))
def test_lp_greedy_matches_vertex_enumeration(rows, b):
    c, w = (np.array(v) for v in zip(*rows))
    res = lp_tighten(c, w, b)
    assert res.total == pytest.approx(_vertex_optimum(c, w, b), rel=1e-9, abs=1e-12)
    assert np.all(res.R >= -1e-15) and np.all(res.R <= c + 1e-15)
    assert w @ res.R <= b + 1e-9 or not res.binding


def test_lp_matches_dense_grid():
    c, w, b = np.array([1.0, 1.0]), np.array([0.9, 0.1]), 0.5
    g = np.arange(0, 1.0005, 1e-3)
    X, Y = np.meshgrid(g, g)
    feasible = 0.9 * X + 0.1 * Y <= b + 1e-12
    assert abs((X + Y)[feasible].max() - lp_tighten(c, w, b).total) < 2e-3


@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0.01, 1)), min_size=1, max_size=5), st.floats(0, 10))
def test_lp_never_exceeds_union(rows, b):
    c, w = (np.array(v) for v in zip(*rows))
    assert lp_tighten(c, w, b).total <= c.sum() + 1e-12


# --------------------------------------------------------------------------
# pooled physics


def _const(lid, cs=2.0, L=10.0):
    return TaskConstants(lid, L, 1.0, cs, 100.0)


def test_pooled_without_data_is_multitask_bound():
    risks, G = {"p": 0.3, "ic": 0.1}, {"p": 5.0, "ic": 2.0}
    m = {"p": 100, "ic": 100}
    cs = {l: _const(l) for l in risks}
    out = pooled_physics_bound(risks, G, m, cs, 0.7, 0.05, 0.05)
    gap = sobolev_gap([5.0, 2.0], [100, 100], [2.0, 2.0], [10.0, 10.0], 0.7, 0.05)
    assert out["total"] == pytest.approx(0.4 + 2 * gap, rel=1e-14)
    assert out["data"] == 0.0


def test_pooled_with_data_splits_confidence():
    risks, G = {"d": 0.2, "p": 0.3, "ic": 0.1}, {"d": 4.0, "p": 5.0, "ic": 2.0}
    m = {"d": 50, "p": 100, "ic": 100}
    cs = {l: _const(l) for l in risks}
    out = pooled_physics_bound(risks, G, m, cs, 0.7, 0.05, 0.025)
    u = union_sobolev([4.0 / 50], [50], [2.0], [10.0], 0.7, 0.025)[0]
    assert out["data"] == pytest.approx(0.2 + u, rel=1e-14)
    with pytest.raises(ContractError):
        pooled_physics_bound(risks, G, m, cs, 0.7, 0.05, 0.05)
    with pytest.raises(ContractError):
        pooled_physics_bound(risks, G, {**m, "ic": 99}, cs, 0.7, 0.05, 0.025)


# --------------------------------------------------------------------------
# Monte-Carlo


def test_tiny_sigma_equals_deterministic_risk(small_theta):
    rows = generate("wave1d", "p", (0, 0, 30, 0), seed=2).split("posterior")
    out = mc_expected_risk(GaussianMeasure(small_theta, 1e-30), "wave1d", {"p": rows}, n_draws=4, seed=1)
    det = empirical_risk(Field(small_theta, small_theta.spec), "wave1d", "p", rows)
    assert out["p"][0] == pytest.approx(det, rel=1e-12)


def test_single_draw_has_zero_stderr(small_theta):
    rows = generate("wave1d", "ic", (0, 0, 10, 0), seed=2).split("posterior")
    s = mc_statistics(GaussianMeasure(small_theta, 1e-4), "wave1d", {"ic": rows}, 1, 0)["ic"]
    assert s.stderr == 0.0 and len(s.risk) == 1 and len(s.grad_sum) == 1


def test_draws_are_antithetic_pairs():
    (s0, a), (s1, b) = mc_draw(7, 0), mc_draw(7, 1)
    assert s0 == s1 and a == 1.0 and b == -1.0
    assert mc_draw(7, 2)[0] != s0


def test_threads_do_not_change_results(small_theta):
    splits = {"p": generate("wave1d", "p", (0, 0, 20, 0), seed=2).split("posterior")}
    m = GaussianMeasure(small_theta, 1e-3)
    a = mc_statistics(m, "wave1d", splits, 6, 3)["p"]
    b = mc_statistics(m, "wave1d", splits, 6, 3, threads=3)["p"]
    assert a.risk.tobytes() == b.risk.tobytes() and a.grad_sum.tobytes() == b.grad_sum.tobytes()


def test_mc_needs_a_draw(small_theta):
    with pytest.raises(ContractError):
        mc_statistics(GaussianMeasure(small_theta, 1e-3), "wave1d", {}, 0, 0)


def test_bound_columns():
    assert BOUND_COLUMNS == ("ours_sob", "ours_poi", "ours_poi_s", "u_sob", "u_poi", "pooled_physics")


def test_report_divides_scale_once():
    from piml_pacbayes.bounds import BoundReport

    rep = BoundReport("convection", ("p", "d"), {"p": 10, "d": 10}, 0.05, 1e-4, 10.0, 0.0, 0.0,
                      train_risk={"p": 1.0, "d": 2.0}, test_risk={"p": 3.0, "d": 5.0},
                      bounds={c: 20.0 for c in BOUND_COLUMNS})
    assert rep.final["ours_sob"] == 2.0
    assert rep.test_total == 0.8
    row = next(csv.DictReader(io.StringIO(rep.to_csv())))
    assert float(row["ours_sob"]) == 2.0 and float(row["test_p"]) == 0.3
    assert list(row)[:3] == ["benchmark", "config_hash", "seed"]
