import io
from fractions import Fraction

import numpy as np
import pytest

from ep_aloha import analytic
from ep_aloha.mc_engine import (BLOCK_SIZE, FixedK, PhysicalFidelity, PoissonLoad, SlotConfig, block_rng,
                                brute_force_conventional, brute_force_ep, run_experiment, run_trials,
                                simulate_slot_conventional, simulate_slot_ep, write_trial_records)
from ep_aloha.preamble import gen_alltop


def within(est, target, k=3.0):
    return abs(est.mean - target) <= k * est.stderr


def test_conventional_slot_trivial():
    rng = np.random.default_rng(0)
    assert simulate_slot_conventional(5, 0, rng) == 0
    assert all(simulate_slot_conventional(5, 1, rng) == 1 for _ in range(50))


def test_conventional_mc_matches_closed_form():
    est = run_experiment(SlotConfig(10, FixedK(10), "conventional", seed=11), 10**6)
    assert within(est, 10 * 0.9**9)


def test_ep_slot_single_user():
    out = simulate_slot_ep(SlotConfig(4, FixedK(1)), 1, np.random.default_rng(1))
    assert (out.S, out.W, out.group1_success, out.group2_success) == (1, 0, 1, 0)


def test_ep_slot_two_users_share_a_channel():
    # users on channels 3, 4, 4 (1-based)
    out = simulate_slot_ep(SlotConfig(4, FixedK(3)), 3, np.random.default_rng(2), channels=[2, 3, 3])
    assert out.k_vec == (0, 0, 1, 2)
    assert (out.S, out.W, out.L_free) == (1, 2, 3)
    assert out.group1_success == 1
    assert out.p_dtp == 1.0


def test_ep_two_users_two_channels():
    assert brute_force_ep(2, 2) == Fraction(3, 2)
    est = run_experiment(SlotConfig(2, FixedK(2), seed=5), 10**6)
    assert within(est, 1.5)


def test_brute_force_examples():
    assert brute_force_ep(1, 2) == 1
    # hand enumeration: 2/8 all-same (S=0, W=3, L=2) + 6/8 split (S=1, W=2, L=1)
    assert brute_force_ep(3, 2) == Fraction(2, 8) * Fraction(8, 9) + Fraction(6, 8) * Fraction(3, 2)
    assert brute_force_conventional(2, 2) == 1
    assert brute_force_conventional(1, 4) == 1
    assert float(brute_force_conventional(4, 3)) == pytest.approx(4 * (2 / 3) ** 3, rel=1e-12)


def test_brute_force_size_limits():
    with pytest.raises(ValueError):
        brute_force_ep(7, 2)
    with pytest.raises(ValueError):
        brute_force_conventional(9, 2)


@pytest.mark.parametrize("K", range(0, 9))
@pytest.mark.parametrize("M", range(1, 5))
def test_brute_force_conventional_closed_form(K, M):
    assert float(brute_force_conventional(K, M)) == pytest.approx(analytic.conventional_throughput(K, M), rel=1e-12,
                                                                  abs=1e-12)


@pytest.mark.parametrize("K", range(0, 7))
@pytest.mark.parametrize("M", range(1, 5))
def test_brute_force_ep_matches_singleton_law(K, M):
    # two unrelated exact routes: full enumeration vs singleton-count law + closed-form Group II term
    assert float(brute_force_ep(K, M)) == pytest.approx(analytic.ep_throughput_exact(K, M), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("K", range(0, 6))
@pytest.mark.parametrize("M", range(1, 4))
def test_exploration_dominates_small(K, M):
    assert brute_force_ep(K, M) >= brute_force_conventional(K, M)


def test_three_users_two_channels_mc():
    est = run_experiment(SlotConfig(2, FixedK(3), seed=8), 10**6)
    assert within(est, float(brute_force_ep(3, 2)))


@pytest.mark.parametrize("protocol", ["ep", "conventional"])
def test_slot_invariants(protocol):
    cfg = SlotConfig(7, PoissonLoad(6.0), protocol, seed=3)
    rec = run_trials(cfg, 20000)
    if protocol == "conventional":
        assert np.all(rec["successes"] <= np.minimum(rec["K"], 7))
        return
    assert np.array_equal(rec["S"] + rec["W"], rec["K"])
    assert np.array_equal(rec["group1_success"], rec["S"])
    assert np.all(rec["group2_success"] <= np.minimum(rec["U"], rec["L_free"]))
    assert np.all(rec["U"] <= rec["W"])
    assert np.all(rec["L_free"] == 7 - rec["S"])
    assert np.array_equal(rec["p_dtp"], analytic.access_probability(rec["L_free"], rec["W"]))


def test_slot_outcome_fields_consistent():
    rng = np.random.default_rng(4)
    cfg = SlotConfig(6, FixedK(9))
    for _ in range(200):
        out = simulate_slot_ep(cfg, 9, rng)
        assert sum(out.k_vec) == 9
        assert out.S == sum(1 for k in out.k_vec if k == 1)
        assert out.W == 9 - out.S and out.L_free == 6 - out.S
        assert out.p_dtp == analytic.access_probability(out.L_free, out.W)


def test_no_free_channel_means_no_group2_success():
    # M=1: any slot with K >= 2 leaves no free channel... unless the only channel is free
    rec = run_trials(SlotConfig(1, FixedK(3), seed=1), 5000)
    assert np.all(rec["group2_success"] <= 1)
    assert np.all(rec["successes"] <= 1)
    # with every channel a singleton there is no Group II at all
    rec = run_trials(SlotConfig(3, FixedK(3), seed=2), 5000)
    full = rec["S"] == 3
    assert full.any() and np.all(rec["group2_success"][full] == 0)
    assert analytic.access_probability(0, 4) == 0.0


def test_fixed_zero_arrivals():
    est = run_experiment(SlotConfig(5, FixedK(0), seed=1), 1000)
    assert est.mean == 0.0 and est.stderr == 0.0


def test_rejects_zero_trials():
    with pytest.raises(ValueError):
        run_experiment(SlotConfig(5, FixedK(2)), 0)


def test_poisson_load_band():
    est = run_experiment(SlotConfig(20, PoissonLoad(20.0), seed=21), 10**5)
    lo, hi = 20 * analytic.INV_E, analytic.ep_throughput_upper_bound(20, 20)
    assert lo + 3 * est.stderr < est.mean < hi - 3 * est.stderr


def test_poisson_sampler_moments():
    load = PoissonLoad(20.0)
    assert load.K_max == 400
    K = np.concatenate([load.draw(block_rng(9, b), 250_000) for b in range(4)])
    assert K.mean() == pytest.approx(20, rel=0.01)
    assert K.var() == pytest.approx(20, rel=0.01)


def test_known_k_average_above_inv_e_under_poisson():
    # E[eta_sa(K)] >= 1/e over K ~ Poisson, K >= 1
    from math import exp
    for lam in (0.5, 2.0, 10.0, 40.0):
        pmf, w = exp(-lam), []
        for k in range(1, 300):
            pmf *= lam / k
            w.append(pmf)
        v = [analytic.single_channel_throughput_known_k(k) for k in range(1, 300)]
        assert sum(a * b for a, b in zip(w, v)) / sum(w) >= analytic.INV_E


def test_determinism_across_threads():
    cfg = SlotConfig(13, PoissonLoad(10.0), seed=2**63 + 5)
    runs = [run_trials(cfg, 30_000, threads=t) for t in (1, 4, 8)]
    for r in runs[1:]:
        for key in runs[0]:
            assert np.array_equal(runs[0][key], r[key])
    ests = [run_experiment(cfg, 30_000, threads=t) for t in (1, 8)]
    assert ests[0] == ests[1]


def test_full_blocks_shared_between_run_lengths():
    cfg = SlotConfig(5, PoissonLoad(4.0), seed=77)
    short = run_trials(cfg, 2 * BLOCK_SIZE)
    long = run_trials(cfg, 3 * BLOCK_SIZE + 17)
    assert np.array_equal(short["successes"], long["successes"][: 2 * BLOCK_SIZE])


def test_effective_mean():
    t = analytic.TimingProfile(10, 100, 5)
    ep = run_experiment(SlotConfig(10, FixedK(10), seed=1), 2000, timing=t)
    assert ep.effective_mean == pytest.approx(0.875 * ep.mean, rel=1e-15)
    assert ep.effective_mean <= ep.mean
    conv = run_experiment(SlotConfig(10, FixedK(10), "conventional", seed=1), 2000, timing=t)
    assert conv.effective_mean == conv.mean


def test_codec_roundtrip_in_engine_is_transparent():
    base = SlotConfig(6, PoissonLoad(5.0), seed=31)
    rt = SlotConfig(6, PoissonLoad(5.0), seed=31, roundtrip_feedback=True)
    a, b = run_trials(base, 3000), run_trials(rt, 3000)
    for key in a:
        assert np.array_equal(a[key], b[key])


def test_trial_record_csv():
    rec = run_trials(SlotConfig(3, FixedK(2), seed=1), 4)
    buf = io.StringIO()
    write_trial_records(rec, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "trial,K,S,W,L_free,U,group1_success,group2_success"
    assert len(lines) == 5
    rec = run_trials(SlotConfig(3, FixedK(2), "conventional", seed=1), 3)
    buf = io.StringIO()
    write_trial_records(rec, buf)
    assert buf.getvalue().splitlines()[0] == "trial,K,successes"


def test_config_validation():
    with pytest.raises(ValueError):
        SlotConfig(0, FixedK(1))
    with pytest.raises(ValueError):
        SlotConfig(3, FixedK(1), protocol="csma")
    with pytest.raises(ValueError):
        PoissonLoad(0.0)
    with pytest.raises(ValueError):
        FixedK(-1)


# -- physical fidelity ------------------------------------------------------------------

@pytest.fixture(scope="module")
def pool11():
    return gen_alltop(11)


def test_physical_high_snr_matches_ideal_mostly(pool11):
    ideal = run_experiment(SlotConfig(4, PoissonLoad(2.0), seed=4), 3000)
    phys = run_experiment(SlotConfig(4, PoissonLoad(2.0), fidelity=PhysicalFidelity(pool11, snr_db=30), seed=4),
                          3000)
    # same seed draws the same K and channels; detection errors are rare at 30 dB with 121 preambles
    assert abs(phys.mean - ideal.mean) < 0.05


def test_physical_collision_undercount_misclassifies():
    # a one-preamble pool forces every pair on a channel to collide: k_hat = 1 for k = 2
    pool = gen_alltop(5).subset(1)
    cfg = SlotConfig(1, FixedK(2), fidelity=PhysicalFidelity(pool, snr_db=30), seed=3)
    out = simulate_slot_ep(cfg, 2, block_rng(3, 0), channels=[0, 0])
    assert out.k_vec == (2,)
    assert out.k_hat == (1,)
    assert out.S == 0 and out.W == 2
    # both users think they are alone and collide in the data phase
    assert out.successes == 0


def test_physical_outcome_uses_ground_truth(pool11):
    cfg = SlotConfig(5, PoissonLoad(4.0), fidelity=PhysicalFidelity(pool11, snr_db=10), seed=12)
    rec = run_trials(cfg, 1500)
    assert np.array_equal(rec["S"] + rec["W"], rec["K"])
    assert np.all(rec["group2_success"] <= rec["U"])
