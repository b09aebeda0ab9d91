"""Membership-inference game, ROC assembly, and the privacy-bound check."""

import dataclasses
import math

import numpy as np
import pytest

from fedlora_dp import attacks
from fedlora_dp.attacks import (
    AttackTrial,
    DpBoundCheck,
    GameConfig,
    NeighborPair,
    RocCurve,
    ScoreReference,
    attack_accuracy,
    check_dp_bound,
    make_neighbors,
    roc_curve,
    run_direct_game,
    run_game,
    score_update,
)
from fedlora_dp.adapters import ClientUpdate, FrozenBase
from fedlora_dp.linalg import RngStream
from fedlora_dp.privacy import MechanismParams, PrivacyBudget, calibrate_sigma


def _record(gen, n=3, m=2):
    return gen.standard_normal(n), gen.standard_normal(m)


def _dataset(seed=0, size=4, n=3, m=2):
    gen = np.random.default_rng(seed)
    return [_record(gen, n, m) for _ in range(size)]


def _game_config(seed=0, m=2, n=3, sigma=0.5, clip=1.0, epochs=2):
    gen = np.random.default_rng(seed + 100)
    return GameConfig(
        base=FrozenBase(gen.standard_normal((m, n))),
        rank=1,
        lora_scale=1.0,
        local_epochs=epochs,
        batch_size=4,
        lr=0.01,
        mechanism=MechanismParams(clip_b=clip, clip_a=clip, sigma_b=sigma, sigma_a=sigma),
        train_stream=RngStream(seed, (50,)),
    )


class TestMakeNeighbors:
    def test_constructs_pair(self):
        data = _dataset()
        replacement = _record(np.random.default_rng(9))
        pair = make_neighbors(data, 0, replacement)
        assert pair.differing_index == 0
        assert np.array_equal(pair.d[1][0], pair.d_prime[1][0])
        assert not np.array_equal(pair.d[0][0], pair.d_prime[0][0])

    def test_identical_replacement_rejected(self):
        data = _dataset()
        with pytest.raises(ValueError, match="degenerate"):
            make_neighbors(data, 1, data[1])

    def test_out_of_range_index(self):
        with pytest.raises(ValueError, match="out of range"):
            make_neighbors(_dataset(), 9, _record(np.random.default_rng(1)))

    def test_mismatched_extra_difference_rejected(self):
        data = _dataset()
        other = list(data)
        other[2] = _record(np.random.default_rng(2))
        with pytest.raises(ValueError, match="index 2"):
            NeighborPair(
                d=tuple(data),
                d_prime=tuple(other),
                differing_index=1,
            )


class TestScoreReference:
    def test_zero_direction_rejected(self):
        mu = np.array([1.0, 2.0])
        with pytest.raises(ValueError, match="coincide"):
            ScoreReference(mu, mu.copy())

    def test_endpoint_and_midpoint_scores(self):
        mu0 = np.array([0.0, 0.0])
        mu1 = np.array([2.0, 0.0])
        ref = ScoreReference(mu0, mu1)
        u0 = ClientUpdate(0, np.array([[0.0]]), np.array([[0.0]]), rank=1)
        u1 = ClientUpdate(0, np.array([[2.0]]), np.array([[0.0]]), rank=1)
        mid = ClientUpdate(0, np.array([[1.0]]), np.array([[0.0]]), rank=1)
        s0 = score_update(u0, ref)
        s1 = score_update(u1, ref)
        sm = score_update(mid, ref)
        assert s0 < sm < s1
        assert sm == pytest.approx((s0 + s1) / 2)
        assert ref.midpoint_score == pytest.approx(sm)


class TestRunGame:
    def test_deterministic_given_seed(self):
        pair = make_neighbors(_dataset(3), 0, _record(np.random.default_rng(4)))
        cfg = _game_config(3)
        t1 = run_game(pair, cfg, 200, RngStream(5, (1,)))
        t2 = run_game(pair, cfg, 200, RngStream(5, (1,)))
        assert [(t.true_bit, t.score) for t in t1] == [(t.true_bit, t.score) for t in t2]

    def test_huge_noise_near_chance(self):
        pair = make_neighbors(_dataset(6), 0, _record(np.random.default_rng(7)))
        cfg = _game_config(6, sigma=1e6)
        trials = run_game(pair, cfg, 2000, RngStream(8, (1,)))
        ref = ScoreReference(
            attacks.mechanism_mean(pair.d, cfg), attacks.mechanism_mean(pair.d_prime, cfg)
        )
        acc = attack_accuracy(trials, ref)
        assert abs(acc - 0.5) <= 3 / math.sqrt(len(trials))

    def test_no_noise_perfect_separation(self):
        pair = make_neighbors(_dataset(9), 0,
                              (np.array([10.0, -8.0, 6.0]), np.array([4.0, -4.0])))
        cfg = _game_config(9, sigma=0.0)
        trials = run_game(pair, cfg, 1000, RngStream(10, (1,)))
        ref = ScoreReference(
            attacks.mechanism_mean(pair.d, cfg), attacks.mechanism_mean(pair.d_prime, cfg)
        )
        assert attack_accuracy(trials, ref) >= 0.99

    def test_score_distributions_gaussian_mean_gap(self):
        # two-sample moment check: equal variances, mean gap = ||mu1 - mu0||
        pair = make_neighbors(_dataset(11), 0,
                              (np.array([5.0, 5.0, -5.0]), np.array([2.0, -2.0])))
        cfg = _game_config(11, sigma=0.3)
        trials = run_game(pair, cfg, 4000, RngStream(12, (1,)))
        mu0 = attacks.mechanism_mean(pair.d, cfg)
        mu1 = attacks.mechanism_mean(pair.d_prime, cfg)
        gap = float(np.linalg.norm(mu1 - mu0))
        s0 = np.array([t.score for t in trials if t.true_bit == 0])
        s1 = np.array([t.score for t in trials if t.true_bit == 1])
        observed_gap = s1.mean() - s0.mean()
        se = math.sqrt(s0.var() / len(s0) + s1.var() / len(s1))
        assert abs(observed_gap - gap) <= 5 * se
        assert s0.std() == pytest.approx(s1.std(), rel=0.15)
        assert s0.std() == pytest.approx(0.3, rel=0.15)

    def test_minimum_trials(self):
        pair = make_neighbors(_dataset(1), 0, _record(np.random.default_rng(2)))
        with pytest.raises(ValueError, match="trials"):
            run_game(pair, _game_config(1), 10, RngStream(0))


class TestRocCurve:
    def test_endpoints(self):
        trials = [AttackTrial(0, 0.1), AttackTrial(1, 0.9), AttackTrial(0, 0.2), AttackTrial(1, 0.8)]
        curve = roc_curve(trials)
        assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0

    def test_perfect_classifier(self):
        trials = [AttackTrial(1, 1.0)] * 5 + [AttackTrial(0, 0.0)] * 5
        curve = roc_curve(trials)
        assert (0.0, 1.0) in zip(curve.fpr, curve.tpr)

    def test_tied_scores_grouped(self):
        trials = [AttackTrial(0, 0.5), AttackTrial(1, 0.5), AttackTrial(0, 0.1), AttackTrial(1, 0.9)]
        curve = roc_curve(trials)
        assert all(b >= a for a, b in zip(curve.fpr, curve.fpr[1:]))
        assert all(b >= a for a, b in zip(curve.tpr, curve.tpr[1:]))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            roc_curve([AttackTrial(1, 0.5)] * 10)


class TestCheckDpBound:
    def test_diagonal_curve_passes_any_epsilon(self):
        curve = RocCurve(
            thresholds=(math.inf, 0.5, 0.0),
            fpr=(0.0, 0.5, 1.0),
            tpr=(0.0, 0.5, 1.0),
            n_negative=100,
            n_positive=100,
        )
        for eps in (0.0, 0.5, 2.0):
            assert check_dp_bound(curve, eps, 1e-5, 10_000).passed

    def test_boundary_curve_at_ln2(self):
        fpr = tuple(np.linspace(0, 1, 101))
        tpr = tuple(min(1.0, 2 * f) for f in fpr)
        curve = RocCurve(
            thresholds=tuple(math.inf for _ in fpr), fpr=fpr, tpr=tpr,
            n_negative=5000, n_positive=5000,
        )
        check = check_dp_bound(curve, math.log(2.0), 1e-5, 10_000)
        assert abs(check.max_violation) <= 1e-5 + 1e-12

    def test_violating_curve_fails(self):
        curve = RocCurve(
            thresholds=(math.inf, 1.0, 0.0),
            fpr=(0.0, 0.1, 1.0),
            tpr=(0.0, 0.9, 1.0),
            n_negative=5000,
            n_positive=5000,
        )
        check = check_dp_bound(curve, 0.5, 1e-5, 10_000)
        assert not check.passed

    def test_reverse_orientation_checked(self):
        # forward direction fine, reverse direction (swap classes) violated
        curve = RocCurve(
            thresholds=(math.inf, 1.0, 0.0),
            fpr=(0.0, 0.9, 1.0),
            tpr=(0.0, 0.1, 1.0),
            n_negative=5000,
            n_positive=5000,
        )
        check = check_dp_bound(curve, 0.1, 1e-5, 10_000)
        assert check.max_violation >= (1 - 0.9) - math.exp(0.1) * (1 - 0.1) - 1e-5


class TestDirectGame:
    def test_calibrated_antipodal_pair_passes_at_half(self):
        eps, delta = 0.5, 1e-5
        clip = 1.0
        sigma = calibrate_sigma(clip, PrivacyBudget(eps, delta))
        mech = MechanismParams(clip_b=clip, clip_a=clip, sigma_b=sigma, sigma_a=sigma)
        u = np.ones((2, 1)) / math.sqrt(2)
        v = np.ones((1, 2)) / math.sqrt(2)
        trials = run_direct_game((u, v), (-u, v), mech, 10_000, RngStream(13, (1,)))
        check = check_dp_bound(roc_curve(trials), eps, delta, 10_000)
        assert check.passed

    def test_undercalibrated_noise_detected(self):
        eps, delta = 0.5, 1e-5
        clip = 1.0
        sigma = calibrate_sigma(clip, PrivacyBudget(eps, delta)) / 2.0
        mech = MechanismParams(clip_b=clip, clip_a=clip, sigma_b=sigma, sigma_a=sigma)
        u = np.ones((2, 1)) / math.sqrt(2)
        v = np.ones((1, 2)) / math.sqrt(2)
        trials = run_direct_game((u, v), (-u, v), mech, 10_000, RngStream(14, (1,)))
        check = check_dp_bound(roc_curve(trials), eps, delta, 10_000)
        assert not check.passed

    def test_monotone_privacy_in_sigma(self):
        clip = 1.0
        u = np.ones((2, 2)) / 2.0
        v = np.eye(2) / math.sqrt(2)
        sigma_star = calibrate_sigma(clip, PrivacyBudget(25.0, 1e-5))
        accs = []
        for i, scale in enumerate((0.0, 1.0, 10.0)):
            mech = MechanismParams(clip_b=clip, clip_a=clip,
                                   sigma_b=sigma_star * scale, sigma_a=sigma_star * scale)
            trials = run_direct_game((u, v), (-u, v), mech, 1000, RngStream(15, (i,)))
            ref = ScoreReference(
                np.concatenate([u.ravel(), v.ravel()]),
                np.concatenate([(-u).ravel(), v.ravel()]),
            )
            accs.append(attack_accuracy(trials, ref))
        se = 2 * math.sqrt(0.25 / 1000)
        assert accs[0] >= accs[1] - se >= accs[2] - 2 * se


class TestAttackTrial:
    def test_bad_bit_rejected(self):
        with pytest.raises(ValueError, match="true_bit"):
            AttackTrial(2, 0.5)

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            AttackTrial(0, math.nan)
