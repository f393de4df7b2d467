from dataclasses import replace

import numpy as np
import pytest

from spclab import bounds as bd
from spclab import experiments as ex
from spclab import index_calc as ic
from spclab import opspace as ops
from spclab import posterior_core as pc
from spclab.errors import (
    BalanceError,
    HypothesisViolationError,
    OutOfRangeError,
    PreconditionError,
    UnsupportedCaseError,
)

ALPHAS = np.geomspace(1e-8, 1.0, 33)


@pytest.fixture(scope="module")
def commuting():
    return ops.make_commuting_instance(0.5, 1.0, 400)


@pytest.fixture(scope="module")
def rotated():
    return ops.make_noncommuting_instance(0.5, 1.0, 40, rng_seed=1).with_lifting(2.0)


@pytest.mark.parametrize("beta,tag", [(0.4, "low"), (1.0, "regular"), (2.5, "high"),
                                      (4.0, "beyond_saturation")])
def test_classification_power_family(beta, tag):
    theta = ic.theta_from_psi(ic.make_power(1.0, 0.5))
    cls = bd.classify_case(ic.make_power(1.0, beta, 1.0), theta)
    assert cls.case_tag == tag
    assert cls.supported == (tag != "beyond_saturation")
    if tag == "high":
        assert cls.lifting_power_u == 2.0
    if cls.supported:
        assert cls.concavity_checked == "trusted"


def test_classification_requirements():
    theta = ic.theta_from_psi(ic.make_power(1.0, 0.5))
    low = bd.classify_case(ic.make_power(1.0, 0.4, 1.0), theta)
    t = np.geomspace(1e-6, 0.9, 7)
    np.testing.assert_allclose(low.concavity_requirement(t), t ** 0.8, rtol=1e-12)
    # regular: (phi/phi0)^2 composed with (Theta^2)^{-1}, here t^{1/2} composed with sqrt
    reg = bd.classify_case(ic.make_power(1.0, 1.0, 1.0), theta)
    np.testing.assert_allclose(reg.concavity_requirement(t), t ** 0.5, rtol=1e-12)
    high = bd.classify_case(ic.make_power(1.0, 2.5, 1.0), theta)
    np.testing.assert_allclose(high.concavity_requirement(t), t ** 1.0, rtol=1e-12)


def test_classification_unclassified_for_oscillation():
    theta = ic.theta_from_psi(ic.make_power(1.0, 0.5))
    wobble = ic.make_custom(lambda t: t * (2 + np.sin(np.log(t) * 3)), 1.0)
    assert bd.classify_case(wobble, theta).case_tag == "unclassified"


def test_heat_classification():
    theta = ops.heat_theta(0.5)
    for beta in (0.5, 1.0):
        assert bd.classify_case(ic.sobolev_phi(beta, 0.5), theta).case_tag == "low"


def test_gating(commuting):
    phi = ic.make_power(1.0, 4.0, 1.0)
    spec = pc.make_smoothness(commuting, phi, None)
    with pytest.raises(UnsupportedCaseError):
        bd.bias_bound(commuting, spec, 1e-3)
    with pytest.raises(UnsupportedCaseError):
        bd.spc_bound(commuting, spec, 1e-3, 0.1)
    # a requirement that is not concave must block the bound
    cls = bd.CaseClassification("low", ic.make_power(1.0, 2.0), "untested")
    spec = pc.SmoothnessSpec(phi, None, None, "low", cls)
    with pytest.raises(HypothesisViolationError):
        bd.bias_bound(commuting, spec, 1e-3)
    refuted = bd.verify_concavity(cls)
    assert refuted.concavity_checked == "refuted"
    with pytest.raises(HypothesisViolationError):
        bd.bias_bound(commuting, pc.SmoothnessSpec(phi, None, None, "low", refuted), 1e-3)


@pytest.mark.parametrize("beta", [0.4, 1.0, 2.0])
def test_commuting_bias_bound_is_attained(commuting, beta):
    spec = pc.make_smoothness(commuting, ic.make_power(1.0, beta, 1.0), None)
    actual = np.array([pc.bias(commuting, spec, al) for al in ALPHAS])
    np.testing.assert_allclose(actual, bd.bias_bound(commuting, spec, ALPHAS), rtol=1e-9)


def test_commuting_spread_equality(commuting):
    for al in ALPHAS[::4]:
        assert bd.spread_bound(commuting, al, 0.3) == pytest.approx(pc.spread(commuting, al, 0.3),
                                                                   rel=1e-12)


def test_spread_bound_scalar_factor(commuting):
    scaled = replace(commuting, link_m=0.5)
    for al in (1e-4, 1e-2):
        ratio = bd.spread_bound(scaled, al, 1.0) / pc.spread(commuting, al, 1.0)
        assert ratio == pytest.approx(4.0, rel=1e-12)


@pytest.mark.parametrize("beta", [0.4, 1.0, 2.0])
def test_rotated_dominance_chain(rotated, beta):
    spec = pc.make_smoothness(rotated, ic.make_power(1.0, beta, 1.0), "random", rng_seed=0)
    actual = np.array([pc.bias(rotated, spec, al) for al in ALPHAS])
    bound = bd.bias_bound(rotated, spec, ALPHAS)
    qual = bd.bias_bound_qualification(rotated, spec, ALPHAS)
    assert np.all(actual <= bound * (1 + 1e-9))
    assert np.all(bound <= qual * (1 + 1e-9))


def test_qualification_refused_beyond_theta_squared(rotated):
    # t^2.5 is high-order for u = 2 but lies above Theta^2 = t^2
    spec = pc.make_smoothness(rotated, ic.make_power(1.0, 2.5, 1.0), None)
    assert spec.case_tag == "high"
    assert bd.bias_bound(rotated, spec, 1e-3) > 0
    with pytest.raises(UnsupportedCaseError):
        bd.bias_bound_qualification(rotated, spec, 1e-3)
    with pytest.raises(UnsupportedCaseError):
        bd.spc_bound(rotated, spec, 1e-3, 0.1)


def test_qualification_closed_form(commuting):
    spec = pc.make_smoothness(commuting, ic.sobolev_phi(1.0, 0.5), None)
    vals = bd.bias_bound_qualification(commuting, spec, ALPHAS)
    np.testing.assert_allclose(vals, ALPHAS ** 0.25, rtol=1e-12)
    # at alpha = Theta^2(t0) the bound is phi(t0)
    t0 = commuting.C0.diagonal[5]
    alpha = commuting.theta.pow(2.0)(t0)
    assert bd.bias_bound_qualification(commuting, spec, alpha) == pytest.approx(spec.phi(t0), rel=1e-12)
    with pytest.raises(OutOfRangeError):
        bd.bias_bound_qualification(commuting, spec, 10.0)


def test_high_case_needs_lifting():
    inst = ops.make_noncommuting_instance(0.5, 1.0, 10, rng_seed=0)
    spec = pc.make_smoothness(inst, ic.make_power(1.0, 2.5, 1.0), None)
    with pytest.raises(PreconditionError):
        bd.bias_bound(inst, spec, 1e-3)
    lifted = inst.with_lifting(2.0)
    assert bd.bias_bound(lifted, spec, 1e-3) > 0


@pytest.mark.parametrize("beta", [0.4, 1.0])
def test_spc_bound_dominates(rotated, beta):
    spec = pc.make_smoothness(rotated, ic.sobolev_phi(beta, 0.5), "first")
    for al in ALPHAS[::3]:
        for de in (1e-4, 1e-2, 1.0):
            assert pc.spc_closed(rotated, spec, al, de).spc <= bd.spc_bound(rotated, spec, al, de)
    zero = bd.spc_bound(rotated, spec, 1e-3, 0.0)
    assert zero >= pc.bias(rotated, spec, 1e-3) ** 2


def test_spc_bound_tightness_commuting():
    inst = ops.make_commuting_instance(0.5, 1.0, 400)
    spec = pc.make_smoothness(inst, ic.sobolev_phi(1.0, 0.5), None)
    grid = np.geomspace(1e-10, 1.0, 101)
    delta = 1e-3
    best_bound = min(bd.spc_bound(inst, spec, al, delta) for al in grid)
    best_actual = min(pc.spc_closed(inst, spec, al, delta).spc for al in grid)
    # measured factor 2.36 at these parameters
    assert best_actual <= best_bound <= 4 * best_actual


def test_balance_alpha_slope_power():
    inst = ops.make_commuting_instance(0.5, 1.0, 2000)
    spec = pc.make_smoothness(inst, ic.sobolev_phi(1.0, 0.5), "first")
    deltas = np.geomspace(1e-1, 1e-5, 9)
    alphas = [bd.balance_alpha(inst, spec, d) for d in deltas]
    slope, _, _ = ex.fit_loglog(deltas ** 2, alphas)
    assert slope == pytest.approx(4.0 / 5.0, abs=0.05)
    assert np.all(np.diff(alphas) < 0)


def test_balance_alpha_root_and_invariance(rotated):
    inst = ops.make_commuting_instance(0.5, 1.0, 30)
    spec = pc.make_smoothness(inst, ic.sobolev_phi(1.0, 0.5), "first")
    al = bd.balance_alpha(inst, spec, 1e-2)
    left = spec.phi(inst.f0sq(al)) ** 2
    right = 2e-4 * np.sum(inst.f0sq_eigs / (al + inst.H.eigenvalues))
    assert left == pytest.approx(right, rel=1e-9)
    Q = np.linalg.qr(np.random.default_rng(4).standard_normal((30, 30)))[0]
    conj = ops.conjugate_instance(inst, Q)
    conj = replace(conj, f0sq_eigs=inst.f0sq(conj.H.eigenvalues))
    assert bd.balance_alpha(conj, spec, 1e-2) == pytest.approx(al, rel=1e-9)


def test_balance_failure_reports_bracket(commuting):
    spec = pc.make_smoothness(commuting, ic.sobolev_phi(1.0, 0.5), "first")
    with pytest.raises(BalanceError, match="no sign change"):
        bd.balance_alpha(commuting, spec, 1e-2, lower=1e-2, upper=1e-1)


@pytest.mark.parametrize("beta", [4.0, 8.0])
def test_saturation_detected(commuting, beta):
    spec = pc.make_smoothness(commuting, ic.sobolev_phi(beta, 0.5), None)
    rep = bd.saturation_probe(commuting, spec)
    assert rep.saturated
    assert rep.slope == pytest.approx(1.0, abs=0.05)


def test_low_case_is_unsaturated(commuting):
    spec = pc.make_smoothness(commuting, ic.make_power(1.0, 0.4, 1.0), None)
    rep = bd.saturation_probe(commuting, spec)
    assert not rep.saturated
    assert rep.slope == pytest.approx(0.2, abs=0.01)


def test_bound_report_csv(tmp_path):
    rep = bd.BoundReport.build("bias", [1e-2, 1e-1], [0.5, 1.0], [1.0, 1.0])
    assert rep.dominated and rep.worst_ratio == 1.0
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "alpha,delta,actual,bound,ratio"
    assert lines[1] == "0.01,,0.5,1.0,0.5"
    assert not bd.BoundReport.build("x", [1.0], [1.0 + 1e-6], [1.0]).dominated


def test_mutated_constants_are_caught():
    cfg = ex.ExperimentConfig.from_dict({
        "instance": {"kind": "commuting", "a": 0.5, "p": 1.0, "N": 50},
        "smoothness": {"sobolev_beta": 2.0, "v": "extremal"},
        "alpha_grid": {"start": 1e-8, "stop": 1.0, "num": 10},
        "delta_grid": {"start": 1.0, "stop": 1e-4, "num": 5},
    })
    honest = ex.run_dominance_sweep(cfg)
    assert all(r.dominated for r in honest)
    assert honest[0].worst_ratio == pytest.approx(1.0, abs=1e-9)
    mutated = ex.run_dominance_sweep(cfg, link_scale=0.9)
    assert not any(r.dominated for r in mutated)
