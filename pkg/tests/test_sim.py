import math

import numpy as np
import pytest
from scipy.stats import norm

from raocd import sim
from raocd.models import correlation_matrix
from raocd.sim import (CoxHetero, GeeContaminated, GeeHeteroCorr, GeeHomog, QuantileSim, RepResult,
                       generate, summarize, truth)


def test_generate_is_deterministic():
    for s in (QuantileSim(m=50, K=2), GeeHomog(n=60, K=2), CoxHetero(n=100, K=2),
              GeeHeteroCorr(n=60, K=2), GeeContaminated(GeeHomog(n=500, K=5), allocation="fixed")):
        a, b = generate(s, 123), generate(s, 123)
        assert a.X.tobytes() == b.X.tobytes()
        resp = "time" if isinstance(s, CoxHetero) else "y"
        assert getattr(a, resp).tobytes() == getattr(b, resp).tobytes()


def test_quantile_truth_includes_error_quantile():
    theta = truth(QuantileSim(tau=0.25, p=3, theta_true=1.0))
    assert theta[0] == pytest.approx(1.0 + norm.ppf(0.25))
    assert theta[1:] == pytest.approx([1.0, 1.0])


def test_cs_covariate_correlation_converges():
    d = generate(QuantileSim(p=3, rho_x=0.5, m=100_000, K=1), 1)
    r = np.corrcoef(d.X[:, 1:].T)[0, 1]
    assert abs(r - 0.5) <= 0.01


def test_conditional_quantile_of_generated_data():
    s = QuantileSim(tau=0.8, p=2, m=200_000, K=1)
    d = generate(s, 2)
    resid = d.y - d.X @ truth(s)
    assert np.mean(resid <= 0) == pytest.approx(0.8, abs=0.005)


def test_contamination_count_and_fixed_allocation():
    # a huge multiplier makes every contaminated response stand out
    s = GeeContaminated(GeeHomog(n=10_000, K=10, l=5), contam_rate=0.002, allocation="fixed",
                        multiplier=1e6)
    d = generate(s, 3)
    assert d.group is not None
    from raocd.runtime import partition
    shards = partition(d, sim.plan_for(s))
    big = [np.sum(np.abs(sh.y) > 100) for sh in shards]
    assert big[0] == 20 and sum(big[1:]) == 0
    s2 = GeeContaminated(GeeHomog(n=10_000, K=10, l=5), contam_rate=0.002, multiplier=1e6)
    d2 = generate(s2, 4)
    assert np.sum(np.abs(d2.y) > 100) == 20


def test_infeasible_contamination_rejected():
    with pytest.raises(ValueError):
        generate(GeeContaminated(GeeHomog(n=100, K=2), contam_rate=0.001), 0)


def test_ar1_generator_correlation():
    d = generate(GeeHomog(n=40_000, l=3, rho=0.5, K=1), 5)
    resid = (d.y - d.X @ truth(GeeHomog())).reshape(-1, 3)
    r = np.corrcoef(resid.T)
    assert r[0, 2] == pytest.approx(0.25, abs=0.02)
    assert correlation_matrix("ar1", 3, 0.5)[0, 2] == pytest.approx(0.25)


@pytest.mark.parametrize("kind", ["H1", "H2"])
def test_cox_censoring_fraction(kind):
    s = CoxHetero(kind=kind, n=20_000, K=4, censor_prob=0.3)
    d = generate(s, 6)
    se = math.sqrt(0.3 * 0.7 / s.n)
    assert abs(np.mean(d.status == 0) - 0.3) <= 3 * se


def test_h1_partition_respects_blocks():
    s = CoxHetero(kind="H1", n=600, K=3)
    d = generate(s, 7)
    from raocd.runtime import partition
    shards = partition(d, sim.plan_for(s))
    assert [sh.n_rows for sh in shards] == [200, 200, 200]


def test_summarize_full_only_and_full_coverage():
    truth_ = np.array([1.0, 2.0])
    res = [RepResult(r, {"full": truth_ + 0.01 * r}, {"full": np.array([1.0, 1.0])}) for r in range(5)]
    rep = summarize(res, ("full",), truth_, ("a", "b"))
    assert np.all(rep.are["full"] == 1.0) and np.all(np.isnan(rep.pre_lt_1["full"]))
    assert np.all(rep.cp["full"] == 1.0)
    assert "--" in rep.to_csv()


def test_summarize_metrics_by_hand():
    t = np.array([0.0])
    res = [RepResult(0, {"rao_cd": np.array([0.1]), "full": np.array([0.0])},
                     {"rao_cd": np.array([0.05]), "full": np.array([0.1])}),
           RepResult(1, {"rao_cd": np.array([-0.3]), "full": np.array([0.2])},
                     {"rao_cd": np.array([0.2]), "full": np.array([0.1])}),
           RepResult(2, {}, {}, error="NumericalError: boom")]
    rep = summarize(res, ("rao_cd", "full"), t, ("x",))
    assert rep.reps == 2 and rep.dropped == 1
    assert rep.abias["rao_cd"][0] == pytest.approx(0.2)
    assert rep.ese["rao_cd"][0] == pytest.approx(np.std([0.1, -0.3], ddof=1))
    assert rep.ase["rao_cd"][0] == pytest.approx(0.125)
    assert rep.cp["rao_cd"][0] == pytest.approx(0.5)
    assert rep.are["rao_cd"][0] == pytest.approx((0.5 + 2.0) / 2)
    assert rep.pre_lt_1["rao_cd"][0] == pytest.approx(50.0)


def test_run_study_smoke_and_repeatable():
    s = GeeHomog(n=300, K=3)
    a = sim.run_study(s, 2, base_seed=9)
    b = sim.run_study(s, 2, base_seed=9)
    assert a.reps == 2 and a.to_csv() == b.to_csv()
    assert 0 <= a.cp["rao_cd"].min() and a.cp["rao_cd"].max() <= 1


def test_run_study_rejects_single_rep():
    with pytest.raises(ValueError):
        sim.run_study(GeeHomog(n=300, K=3), 1)


def test_scenario_dict_round_trip():
    s = GeeContaminated(GeeHomog(n=1000, K=5), allocation="fixed")
    assert sim.scenario_from_dict(sim.scenario_to_dict(s)) == s
    with pytest.raises(ValueError):
        sim.scenario_from_dict({"type": "Nope"})


def test_scaling_benchmark_respects_memory_cap():
    pts = sim.scaling_benchmark(m=100, K_values=(2, 8), p=3, full_max_rows=500)
    assert [p.n for p in pts] == [200, 800]
    assert not pts[0].full_capped and pts[1].full_capped and pts[1].full_seconds is None
