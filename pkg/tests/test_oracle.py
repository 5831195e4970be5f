import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d3m.errors import InputError, IntegrityError
from d3m.oracle import (
    FIXTURES,
    NON_DETERIORATING,
    REGIME1,
    REGIME2,
    DiscreteInstance,
    PreconditionError,
    all_labelings,
    build_Hp,
    check_equivalence_lemma,
    compute_theory,
    fpr_tpr_experiment,
    idealized_calibrate,
    idealized_deploy,
    is_dpdd,
    is_pdd,
    population_err,
    random_instance,
    search_regime2_instance,
    tv_distance,
)


def test_population_err_example():
    assert population_err([0, 1, 1], [0, 1, 0], [0.2, 0.1, 0.7]) == pytest.approx(0.7)
    assert population_err([0, 1], [0, 1], [0.5, 0.5]) == 0.0


def test_tv_distance():
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert tv_distance([0.3, 0.3, 0.2, 0.2], [0.1, 0.5, 0.2, 0.2]) == pytest.approx(0.2)


def test_instance_validation():
    with pytest.raises(InputError):
        DiscreteInstance([0.5, 0.6], [0.5, 0.5], [0, 1], [0, 1], [[0, 1]], 0)
    with pytest.raises(InputError):
        DiscreteInstance([0.5, 0.5], [0.5, 0.5], [0, 2], [0, 1], [[0, 1]], 0)
    with pytest.raises(InputError):
        DiscreteInstance(np.full(13, 1 / 13), np.full(13, 1 / 13), np.zeros(13), np.zeros(13),
                         np.zeros((1, 13)), 0)
    with pytest.raises(InputError):
        all_labelings(13)


def test_instance_round_trip():
    inst = FIXTURES["regime1"]()
    again = DiscreteInstance.from_dict(inst.to_dict())
    assert again.to_dict() == inst.to_dict()


def test_build_hp_population_and_sample():
    inst = FIXTURES["non_deteriorating"]()
    assert build_Hp(inst, 0.2).tolist() == [0, 1]
    assert build_Hp(inst, 1.0).tolist() == [0, 1, 2]
    # empirical: the sample hits only point 0, where f and h are right and "bad" is wrong
    assert build_Hp(inst, 0.0, sample=[0, 0, 0]).tolist() == [0, 1]
    with pytest.raises(IntegrityError):
        build_Hp(inst, 0.1)


def test_single_hypothesis_gives_zero_statistic():
    inst = DiscreteInstance([0.5, 0.5], [0.2, 0.8], [0, 1], [0, 1], [[0, 1]], 0)
    phi = idealized_calibrate(inst, [0], 50, 10, np.random.default_rng(0))
    assert np.all(phi == 0)


def brute_max_disagreement(inst, hp, pts):
    best = 0.0
    for j in hp:
        best = max(best, sum(int(inst.H[j][p] != inst.base[p]) for p in pts) / len(pts))
    return best


def test_calibrate_matches_enumeration():
    inst = FIXTURES["regime1"]()
    hp = build_Hp(inst, 0.05)
    phi = idealized_calibrate(inst, hp, 40, 7, np.random.default_rng(3))
    draws = np.random.default_rng(3).choice(4, size=(40, 7), p=inst.P)
    expected = sorted(brute_max_disagreement(inst, hp, row) for row in draws)
    np.testing.assert_array_equal(phi, expected)


def test_deploy_cases():
    inst = FIXTURES["regime1"]()
    hp = build_Hp(inst, 0.05)
    rng = np.random.default_rng(0)
    # any nonzero statistic exceeds an all-zero collection; zero does not
    assert idealized_deploy(inst, hp, np.zeros(20), 200, 0.1, rng)
    assert not idealized_deploy(inst, hp, np.ones(20), 200, 0.1, rng)


# frozen theory values, worked by hand from the fixture definitions

def test_theory_non_deteriorating():
    r = compute_theory(FIXTURES["non_deteriorating"]())
    assert r.eps_f == pytest.approx(0.2) and r.hp_size == 2
    assert r.eps_p == pytest.approx(0.2) and r.eps_q == pytest.approx(0.2)
    assert r.xi == pytest.approx(0.0, abs=1e-15)
    assert r.tv == pytest.approx(0.2) and r.eta == pytest.approx(0.1)
    assert r.regime == NON_DETERIORATING and r.check() == []


def test_theory_regime1():
    r = compute_theory(FIXTURES["regime1"]())
    assert r.eps_f == pytest.approx(0.05) and r.hp_size == 3
    assert r.eps_p == pytest.approx(0.1) and r.eps_q == pytest.approx(0.8)
    assert r.xi == pytest.approx(0.7) and r.tv == pytest.approx(0.7)
    assert r.eta == pytest.approx(0.0, abs=1e-12)
    assert r.regime == REGIME1 and r.check() == []


def test_theory_regime2():
    r = compute_theory(FIXTURES["regime2"]())
    assert r.eps_p == pytest.approx(0.2) and r.eps_q == pytest.approx(0.2)
    assert r.xi == pytest.approx(0.1)
    assert r.regime == REGIME2 and r.check() == []


def test_no_shift_means_no_deterioration():
    r = compute_theory(FIXTURES["identical"]())
    assert r.xi == 0.0 and r.tv == 0.0 and r.regime == NON_DETERIORATING
    assert r.hp_size == 1 and r.log2_hp == 0.0 and r.log2_h == 3.0


def brute_theory(inst):
    """Loop-by-loop recomputation of the same quantities."""
    n = inst.n_points
    base = inst.base
    err = lambda h, lab, d: sum(d[i] for i in range(n) if h[i] != lab[i])
    eps_f = err(base, inst.g, inst.P)
    hp = [h for h in inst.H if err(h, inst.g, inst.P) <= eps_f + 1e-12]
    dp = [err(h, base, inst.P) for h in hp]
    dq = [err(h, base, inst.Q) for h in hp]
    tv = 0.5 * sum(abs(inst.P[i] - inst.Q[i]) for i in range(n))
    # error on the mixture of (P labelled by f) and (Q labelled by 1 - f)
    best_u = min(0.5 * err(h, base, inst.P) + 0.5 * err(h, 1 - base, inst.Q) for h in hp)
    bayes = 0.5 * sum(min(inst.P[i], inst.Q[i]) for i in range(n))
    return dict(eps_f=eps_f, eps_p=max(dp), eps_q=max(dq), xi=max(q - p for p, q in zip(dp, dq)),
                tv=tv, eta=best_u - bayes, hp_size=len(hp))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_theory_matches_brute_force(seed):
    inst = random_instance(np.random.default_rng(seed), n_hypotheses=20)
    r = compute_theory(inst)
    b = brute_theory(inst)
    for k, v in b.items():
        assert getattr(r, k) == pytest.approx(v, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_theory_identities(seed):
    r = compute_theory(random_instance(np.random.default_rng(seed)))
    assert r.check() == []
    assert abs(r.xi - (r.tv - 2 * r.eta)) <= 1e-12
    assert r.eta >= -1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_disagreement_gap_bounded_by_tv(seed):
    inst = random_instance(np.random.default_rng(seed))
    rep = check_equivalence_lemma(inst, tv_distance(inst.P, inst.Q))
    assert rep.max_gap <= rep.tv + 1e-12
    if rep.condition_met:
        assert rep.agree


def test_lemma_preconditions():
    inst = FIXTURES["regime1"]()
    with pytest.raises(PreconditionError):
        check_equivalence_lemma(inst, 0.1)
    flipped = DiscreteInstance(inst.P, inst.Q, inst.g, 1 - inst.g, inst.H, inst.f)
    with pytest.raises(PreconditionError):
        check_equivalence_lemma(flipped, 1.0)
    no_truth = DiscreteInstance(inst.P, inst.Q, inst.g, inst.g, inst.H[:2], inst.f)
    with pytest.raises(PreconditionError):
        check_equivalence_lemma(no_truth, 1.0)


def test_lemma_gap_condition_on_identical_fixture():
    rep = check_equivalence_lemma(FIXTURES["identical"](), 0.0)
    assert rep.condition_met and rep.agree
    assert not rep.pdd and not rep.dpdd


def test_lemma_condition_unmet_when_shifted():
    rep = check_equivalence_lemma(FIXTURES["regime1"](), 0.7)
    assert not rep.condition_met and rep.agree is None
    assert rep.pdd and rep.dpdd


def test_pdd_definitions():
    assert is_pdd(FIXTURES["regime1"]())
    assert not is_pdd(FIXTURES["non_deteriorating"]())
    assert is_dpdd(FIXTURES["regime2"](), 0.1)
    assert not is_dpdd(FIXTURES["non_deteriorating"](), 0.2)


def test_experiment_non_deteriorating_fpr():
    res = fpr_tpr_experiment(FIXTURES["non_deteriorating"](), 0.2, 500, 50, 0.1, 500,
                             np.random.default_rng(0))
    assert res.kind == "fpr" and res.regime == NON_DETERIORATING
    assert res.rate <= 0.1 + 3 * np.sqrt(0.09 / 500)


def test_experiment_regime1_power():
    res = fpr_tpr_experiment(FIXTURES["regime1"](), 0.05, 500, 100, 0.1, 200, np.random.default_rng(1))
    assert res.kind == "tpr" and res.rate >= 0.95


def test_experiment_is_seeded():
    a = fpr_tpr_experiment(FIXTURES["regime2"](), 0.2, 100, 30, 0.1, 100, np.random.default_rng(5))
    b = fpr_tpr_experiment(FIXTURES["regime2"](), 0.2, 100, 30, 0.1, 100, np.random.default_rng(5))
    assert a == b


def test_search_regime2():
    inst = search_regime2_instance(np.random.default_rng(0))
    r = compute_theory(inst)
    assert r.xi > 0 and r.eps_q <= r.eps_p + 1e-12
