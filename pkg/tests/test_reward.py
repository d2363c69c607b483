import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from preflab.datasets import PairBatch, build_labeled_set, collect_offline
from preflab.envs import make_env
from preflab.numcore import ContractError
from preflab.reward import (
    RewardEnsemble,
    ScreenedBatch,
    SelectionConfig,
    bt_prob,
    bt_prob_from_rewards,
    confidence_uncertainty_from_probs,
    pseudo_label_from_probs,
    screen,
    select,
    select_mask,
)
from oracles import assert_rel_close, fd_grad


def random_batch(rng, n=6, L=4, d=2, da=2, labeled=True):
    y = rng.integers(2, size=n) if labeled else np.full(n, -1)
    return PairBatch(
        s0=rng.normal(size=(n, L, d)), a0=rng.normal(size=(n, L, da)),
        s1=rng.normal(size=(n, L, d)), a1=rng.normal(size=(n, L, da)),
        ret0=rng.normal(size=n), ret1=rng.normal(size=n), y=y.astype(np.int64),
        label_kind="ground_truth" if labeled else "none",
    )


def swapped(b: PairBatch) -> PairBatch:
    return PairBatch(b.s1, b.a1, b.s0, b.a0, b.ret1, b.ret0, np.where(b.y < 0, -1, 1 - b.y), b.label_kind)


def small_ensemble(seed, members=3, hidden=(8,), r_max=2.0, **kw):
    return RewardEnsemble(2, 2, r_max, np.random.default_rng(seed), members, hidden, **kw)


@pytest.fixture(scope="module")
def chain_data():
    env = make_env("chainwalk")
    ds = collect_offline(env, "medium", 20_000, seed=0)
    return env, ds


class TestBTProb:
    def test_identical_segments(self):
        rng = np.random.default_rng(0)
        b = random_batch(rng)
        b.s1, b.a1 = b.s0.copy(), b.a0.copy()
        np.testing.assert_array_equal(small_ensemble(1).bt_prob(b), 0.5)

    def test_ln2_gap(self):
        r0 = np.array([[math.log(2), 0.0]])
        assert bt_prob_from_rewards(r0, np.zeros((1, 2)))[0] == pytest.approx(2 / 3, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            bt_prob_from_rewards(np.zeros((1, 3)), np.zeros((1, 4)))

    def test_complement_sum(self):
        for k in range(100):
            rng = np.random.default_rng(k)
            ens = small_ensemble(k, r_max=3.0)
            b = random_batch(rng, n=1)
            total = ens.bt_prob(b) + ens.bt_prob(swapped(b))
            assert abs(total[0] - 1.0) <= 1e-12

    def test_constant_shift_invariance(self):
        for k in range(100):
            rng = np.random.default_rng(k)
            ens = small_ensemble(k)
            r0, r1 = ens.step_rewards(random_batch(rng, n=1))
            c = rng.normal(scale=5.0)
            shifted = bt_prob_from_rewards(r0 + c, r1 + c).mean(axis=0)
            assert abs(shifted[0] - bt_prob(ens, random_batch(np.random.default_rng(k), n=1))[0]) <= 1e-9


class TestPredictReward:
    def test_zero_init_is_zero(self):
        ens = small_ensemble(0, zero=True)
        assert not ens.predict_reward(np.ones((5, 2)), np.ones((5, 2))).any()

    def test_bounded(self):
        rng = np.random.default_rng(0)
        ens = small_ensemble(0, r_max=1.5)
        for m in ens.members:
            m.set_flat(m.get_flat() * 50)
        r = ens.predict_reward(rng.normal(scale=10, size=(100_000, 2)), rng.normal(scale=10, size=(100_000, 2)))
        assert np.all(np.abs(r) <= 1.5)


class TestPretrain:
    def test_single_pair_overfit(self):
        rng = np.random.default_rng(3)
        b = random_batch(rng, n=1)
        b.y[:] = 1
        ens = small_ensemble(4, hidden=(16, 16))
        ens.pretrain(b, 500)
        assert 1.0 - ens.bt_prob(b)[0] > 0.9

    def test_flipped_labels_anticorrelate(self, chain_data):
        env, ds = chain_data
        lab = build_labeled_set(ds, 10, 100, seed=1)
        flipped = lab.with_labels(1 - lab.y, "ground_truth")
        ens = RewardEnsemble.for_env(env, np.random.default_rng(0))
        ens.pretrain(flipped, 500)
        held = build_labeled_set(ds, 10, 500, seed=77)
        r0, r1 = ens.step_rewards(held)
        pred = np.concatenate([r0.mean(0).sum(1), r1.mean(0).sum(1)])
        true = np.concatenate([held.ret0, held.ret1])
        assert np.corrcoef(pred, true)[0, 1] < 0

    def test_members_differ(self):
        ens = small_ensemble(0, members=2)
        ens.pretrain(random_batch(np.random.default_rng(1)), 5)
        assert ens.members[0].get_flat().tobytes() != ens.members[1].get_flat().tobytes()

    def test_unlabeled_rejected(self):
        with pytest.raises(ContractError):
            small_ensemble(0).pretrain(random_batch(np.random.default_rng(0), labeled=False), 1)

    def test_nan_aborts(self):
        b = random_batch(np.random.default_rng(0))
        b.s0[0, 0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="member 0 step 0"):
            small_ensemble(0).pretrain(b, 1)


class TestPseudoLabels:
    @pytest.mark.parametrize("p1,expected", [(0.7, 1), (0.3, 0), (0.5, 0)])
    def test_threshold(self, p1, expected):
        probs = np.full((3, 1), 1.0 - p1)
        assert pseudo_label_from_probs(probs)[0] == expected

    def test_exact_half_never_selected(self):
        probs = np.full((3, 1), 0.5)
        y = pseudo_label_from_probs(probs)
        p, tau = confidence_uncertainty_from_probs(probs, y)
        assert p[0] == 0.5
        assert not select_mask(p, tau, SelectionConfig(kappa_p=0.5000001, kappa_tau=1.0))[0]

    def test_identical_members_zero_spread(self):
        _, tau = confidence_uncertainty_from_probs(np.full((3, 4), 0.8), np.zeros(4, int))
        assert not tau.any()

    def test_hand_computed_spread(self):
        probs = np.array([[0.6], [0.6], [0.9]])
        y = pseudo_label_from_probs(probs)
        p, tau = confidence_uncertainty_from_probs(probs, y)
        assert y[0] == 0
        assert p[0] == pytest.approx(0.7, abs=1e-15)
        assert tau[0] == pytest.approx(math.sqrt(0.02), abs=1e-12)

    def test_single_member_spread_is_zero(self, caplog):
        p, tau = confidence_uncertainty_from_probs(np.array([[0.9, 0.2]]), np.array([0, 1]))
        assert not tau.any() and "single reward member" in caplog.text

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
    def test_confidence_at_least_half(self, probs):
        member = np.array(probs)[:, None]
        p, _ = confidence_uncertainty_from_probs(member, pseudo_label_from_probs(member))
        assert p[0] >= 0.5 - 1e-15


class TestSelect:
    def test_examples(self):
        cfg = SelectionConfig(0.85, 0.05)
        assert select_mask([0.9], [0.02], cfg)[0]
        assert not select_mask([0.8], [0.0], cfg)[0]
        assert not select_mask([0.8], [1.0], cfg)[0]

    def test_passthrough(self):
        cfg = SelectionConfig(passthrough=True)
        assert select_mask([0.5, 0.6], [0.4, 0.2], cfg).all()

    def test_config_validation(self):
        with pytest.raises(ContractError):
            SelectionConfig(kappa_p=0.5)
        with pytest.raises(ContractError):
            SelectionConfig(kappa_tau=0.0)

    def test_monotone_shrinkage(self):
        for k in range(100):
            rng = np.random.default_rng(k)
            probs = rng.uniform(size=(3, 50))
            y = pseudo_label_from_probs(probs)
            p, tau = confidence_uncertainty_from_probs(probs, y)
            loose = SelectionConfig(rng.uniform(0.55, 0.8), rng.uniform(0.05, 0.3))
            tight = SelectionConfig(rng.uniform(loose.kappa_p, 0.99), rng.uniform(0.001, loose.kappa_tau))
            assert set(np.flatnonzero(select_mask(p, tau, tight))) <= set(np.flatnonzero(select_mask(p, tau, loose)))

    def test_screen_counts(self):
        rng = np.random.default_rng(0)
        cands = random_batch(rng, n=40, labeled=False)
        sb = screen(small_ensemble(0, r_max=4.0), cands, SelectionConfig(0.6, 0.2))
        assert sb.n_total == 40 and sb.n_selected <= 40
        keep = select_mask(sb.p, sb.tau, SelectionConfig(0.6, 0.2))
        np.testing.assert_array_equal(sb.index, np.flatnonzero(keep))
        assert sb.pairs.label_kind == "pseudo"


class TestSemiSupervised:
    def test_empty_screen_equals_labeled_loss(self):
        rng = np.random.default_rng(0)
        lab = random_batch(rng)
        ens = small_ensemble(2)
        empty = ScreenedBatch.empty_like(lab).pairs
        a = ens.loss_and_grads(lab, None)
        b = ens.loss_and_grads(lab, empty)
        assert a[0] == b[0]
        for ga, gb in zip(a[1], b[1]):
            assert ga.tobytes() == gb.tobytes()

    def test_empty_screen_update_equals_pretraining(self):
        lab = random_batch(np.random.default_rng(0))
        one, two = small_ensemble(5), small_ensemble(5)
        one.pretrain(lab, 20)
        two.semi_supervised_update(lab, ScreenedBatch.empty_like(lab), 20)
        for a, b in zip(one.members, two.members):
            assert a.get_flat().tobytes() == b.get_flat().tobytes()

    def test_duplicated_screen_same_gradient(self):
        rng = np.random.default_rng(1)
        lab, unl = random_batch(rng), random_batch(rng, n=5)
        dup = PairBatch.concat([unl, unl])
        ens = small_ensemble(3)
        la, ga = ens.loss_and_grads(lab, unl)
        lb, gb = ens.loss_and_grads(lab, dup)
        assert la == pytest.approx(lb, rel=1e-12)
        for x, y in zip(ga, gb):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-14)

    def test_loss_decreases(self):
        rng = np.random.default_rng(2)
        lab, unl = random_batch(rng, n=20), random_batch(rng, n=30)
        ens = small_ensemble(1, hidden=(16,))
        before = ens.loss_and_grads(lab, unl)[0]
        sb = ScreenedBatch(unl, unl.y, np.ones(30), np.zeros(30), np.arange(30))
        ens.semi_supervised_update(lab, sb, 100)
        assert ens.loss_and_grads(lab, unl)[0] < before

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        lab, unl = random_batch(rng, n=4, L=3), random_batch(rng, n=5, L=3)
        ens = small_ensemble(seed, members=1, hidden=(5,), r_max=1.7)
        net = ens.members[0]
        for b in net.biases:
            b[...] = rng.normal(scale=0.3, size=b.shape)
        _, grads = ens.loss_and_grads(lab, unl)
        analytic = np.concatenate([g.ravel() for g in grads])
        theta = net.get_flat()

        def loss(v):
            net.set_flat(v)
            return ens.loss_and_grads(lab, unl)[0]

        numeric = fd_grad(loss, theta)
        net.set_flat(theta)
        assert_rel_close(analytic, numeric)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ens = small_ensemble(0)
        ens.save(tmp_path / "r")
        back = RewardEnsemble.load(tmp_path / "r")
        x = np.random.default_rng(0).normal(size=(10, 2))
        np.testing.assert_array_equal(back.predict_reward(x, x), ens.predict_reward(x, x))
