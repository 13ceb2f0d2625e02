"""Closed-form block updates: worked examples, stationarity, oracle equality."""

import numpy as np
import pytest

from conftest import make_engine, randomize_state, to_naive
from oracles import (
    fd_gradient,
    naive_nu,
    naive_phi,
    naive_q_padded,
    naive_sigma_k2,
    naive_sweep,
    naive_tau,
)


class TestUpdateSigma:
    def test_zero_activation_returns_prior(self, small_engine):
        state = randomize_state(small_engine, 0)
        state.nu[...] = 0.0
        ch = small_engine.channels[0]
        ch.sigma_a2 = 1.0
        assert small_engine.update_sigma_k2(state, ch.name, 2) == pytest.approx(1.0, abs=0)

    def test_unit_substitution(self, small_engine):
        state = randomize_state(small_engine, 0)
        state.nu[...] = 0.0
        state.nu[0, 3] = 1.0
        ch = small_engine.channels[0]
        ch.sigma_a2 = 1.0
        ch.sigma_n2 = 1.0
        assert small_engine.update_sigma_k2(state, ch.name, 3) == pytest.approx(0.5, abs=0)

    def test_hand_evaluated_case(self, small_engine):
        # prior variance 2, noise 0.5, total activation 3 -> 1/(0.5 + 6) = 2/13
        state = randomize_state(small_engine, 0)
        state.nu[...] = 0.0
        state.nu[0, 4] = 1.0
        state.nu[1, 4] = 1.5 - 0.5  # two tracks at 1.0 and one at ...
        state.nu[2, 4] = 1.0
        ch = small_engine.channels[0]
        ch.sigma_a2 = 2.0
        ch.sigma_n2 = 0.5
        assert small_engine.update_sigma_k2(state, ch.name, 4) == pytest.approx(2.0 / 13.0, rel=1e-15)

    def test_stationary_point(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 3)
        scratch = engine.refresh_scratch(state)
        for ch in engine.channels:
            for k in (0, 2):
                new = engine.update_sigma_k2(state, ch.name, k)

                def f(x, name=ch.name, k=k):
                    old = state.sigma_k2[name][k]
                    state.sigma_k2[name][k] = x[0]
                    val = engine.objective(state, scratch)
                    state.sigma_k2[name][k] = old
                    return val

                grad = fd_gradient(f, [new], step=1e-5)
                assert abs(grad[0]) <= 1e-4


class TestUpdatePhi:
    def test_zero_activation_returns_prior_mean(self, small_engine):
        state = randomize_state(small_engine, 1)
        state.nu[...] = 0.0
        small_engine.update_sigma_k2(state, "subject", 1)
        val = small_engine.update_phi(state, "subject", 1)
        np.testing.assert_array_equal(val, np.zeros(small_engine.channels[0].dim))

    def test_single_observation_limit(self):
        # one bag, one track, one active factor, vague appearance prior:
        # the posterior mean converges to the lone observation
        engine = make_engine(seed=2, num_videos=1, tracks=1, penalty_c=0.0)
        state = engine.init_state()
        state.nu[...] = 0.0
        state.nu[0, 4] = 1.0  # background factor, admissible in every bag
        ch = engine.channels[0]
        ch.sigma_n2 = 1.0
        ch.sigma_a2 = 1e6
        engine.update_sigma_k2(state, ch.name, 4)
        val = engine.update_phi(state, ch.name, 4)
        np.testing.assert_allclose(val, ch.x[0], rtol=1e-4)

    def test_stationary_point(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 4)
        scratch = engine.refresh_scratch(state)
        for ch in engine.channels:
            for k in (1, 3):
                engine.update_sigma_k2(state, ch.name, k)
                new = engine.update_phi(state, ch.name, k)

                def f(vec, name=ch.name, k=k):
                    old = state.phi[name][k].copy()
                    state.phi[name][k] = vec
                    val = engine.objective(state, scratch)
                    state.phi[name][k] = old
                    return val

                grad = fd_gradient(f, new, step=1e-5)
                assert np.max(np.abs(grad)) <= 1e-4


class TestUpdateTau:
    def test_single_factor_truncation(self):
        # with one factor the multinomial is the point mass, so the update
        # reduces to (alpha, 1 + n_tracks) when nu is zero
        engine = make_engine(
            seed=5, num_videos=1, tracks=4, num_subjects=0, num_actions=0,
            num_background=1, k_max=1, alpha=2.5, penalty_c=0.0,
        )
        state = engine.init_state()
        state.nu[...] = 0.0
        scratch = engine.refresh_scratch(state)
        t1, t2 = engine.update_tau(state, scratch, 0, 0)
        assert t1 == pytest.approx(2.5, abs=1e-12)
        assert t2 == pytest.approx(1.0 + 4.0, abs=1e-12)

    def test_saturated_activations(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 6)
        state.nu[...] = 1.0
        scratch = engine.refresh_scratch(state)
        k_max = engine.k_max
        for i in range(engine.num_bags):
            n_i = engine.n_i[i]
            for k in range(k_max):
                t1, t2 = engine.update_tau(state, scratch, i, k)
                assert t1 == pytest.approx(engine.alpha + (k_max - k) * n_i, rel=1e-12)
                assert t2 == pytest.approx(1.0, abs=0)

    def test_matches_naive_loops(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 7)
        scratch = engine.refresh_scratch(state)
        inst, st = to_naive(engine, state)
        for i in range(engine.num_bags):
            q_i = naive_q_padded(st.tau[i], engine.k_max)
            for k in range(engine.k_max):
                got = engine.update_tau(state.copy(), scratch, i, k)
                want = naive_tau(inst, st, q_i, i, k)
                assert got[0] == pytest.approx(want[0], rel=1e-12)
                assert got[1] == pytest.approx(want[1], rel=1e-12)

    def test_exceeds_prior_components(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 8)
        scratch = engine.refresh_scratch(state)
        for i in range(engine.num_bags):
            for k in range(engine.k_max):
                t1, t2 = engine.update_tau(state, scratch, i, k)
                assert t1 >= engine.alpha and t2 >= 1.0

    def test_stationary_point(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 9)
        scratch = engine.refresh_scratch(state)
        for i in range(engine.num_bags):
            for k in range(engine.k_max):
                engine.update_tau(state, scratch, i, k)

                def f(pair, i=i, k=k):
                    old = state.tau[i, k].copy()
                    state.tau[i, k] = pair
                    val = engine.objective(state, scratch)
                    state.tau[i, k] = old
                    return val

                grad = fd_gradient(f, state.tau[i, k], step=1e-5)
                assert np.max(np.abs(grad)) <= 1e-4


class TestUpdateNu:
    def test_masked_factor_forced_to_zero(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 10)
        scratch = engine.refresh_scratch(state)
        hit = False
        for i in range(engine.num_bags):
            for k in range(engine.k_max):
                if engine.mask[i, k] == 0.0:
                    assert engine.update_nu(state, scratch, i, 0, k) == 0.0
                    hit = True
        assert hit

    def test_sigmoid_identity_at_zero_logit(self):
        # first factor with symmetric tau has matching stick terms; driving
        # the appearance terms to zero leaves a zero logit, hence nu = 1/2
        engine = make_engine(
            seed=5, num_videos=1, tracks=2, num_subjects=0, num_actions=0,
            num_background=2, k_max=2, penalty_c=0.0,
        )
        state = engine.init_state()
        state.tau[0, 0] = (1.0, 1.0)
        for name in state.phi:
            state.phi[name][...] = 0.0
            state.sigma_k2[name][...] = 1e-300
        scratch = engine.refresh_scratch(state)
        assert engine.compute_zeta(state, scratch, 0, 0, 0) == pytest.approx(0.0, abs=1e-12)
        assert engine.update_nu(state, scratch, 0, 0, 0) == pytest.approx(0.5, abs=1e-12)

    def test_penalty_difference_matches_coupling_terms(self):
        # the logit with penalties minus the logit without equals the
        # literal sum of the three coupling terms
        engine = make_engine(seed=13, penalty_c=5.0, num_videos=4, tracks=(2, 4))
        state = randomize_state(engine, 13)
        state.nu[...] *= 0.3  # keep expectation constraints unsatisfied
        scratch = engine.refresh_scratch(state)
        labeled = engine.space.num_labeled
        nonzero_cases = 0
        for i in range(engine.num_bags):
            nu_i = state.nu_bag(i)
            pairs = [
                (int(engine.pair_sf[p]), int(engine.pair_af[p]))
                for p in np.flatnonzero(engine.pair_bag == i)
            ]
            for j in range(engine.n_i[i]):
                for k in range(engine.k_max):
                    with_c = engine.compute_zeta(state, scratch, i, j, k)
                    engine.penalty, saved = 0.0, engine.penalty
                    without_c = engine.compute_zeta(state, scratch, i, j, k)
                    engine.penalty = saved
                    expected = 0.0
                    for (sf, af) in pairs:
                        if float(nu_i[:, sf] @ nu_i[:, af]) < 1.0:
                            if sf == k:
                                expected += saved * nu_i[j, af]
                            if af == k:
                                expected += saved * nu_i[j, sf]
                    if k < labeled and nu_i[:, k].sum() < 1.0:
                        expected += saved
                    assert with_c - without_c == pytest.approx(expected, rel=1e-12, abs=1e-12)
                    nonzero_cases += int(expected > 0)
        assert nonzero_cases > 0

    def test_stronger_partner_never_lowers_logit(self):
        # with an unsatisfied pair constraint, raising the subject mean on a
        # track cannot decrease the action factor's logit on that track
        engine = make_engine(seed=21, penalty_c=4.0, num_videos=3, tracks=(2, 4))
        state = randomize_state(engine, 21)
        state.nu[...] *= 0.2
        scratch = engine.refresh_scratch(state)
        checked = 0
        for p in range(len(engine.pair_bag)):
            i = int(engine.pair_bag[p])
            sf, af = int(engine.pair_sf[p]), int(engine.pair_af[p])
            row = int(engine.offsets[i])
            for value_lo, value_hi in [(0.05, 0.6)]:
                base = state.nu[row, sf]
                deltas = []
                for v in (value_lo, value_hi):
                    state.nu[row, sf] = v
                    with_c = engine.compute_zeta(state, scratch, i, 0, af)
                    engine.penalty, saved = 0.0, engine.penalty
                    without_c = engine.compute_zeta(state, scratch, i, 0, af)
                    engine.penalty = saved
                    deltas.append(with_c - without_c)
                state.nu[row, sf] = base
                assert deltas[1] >= deltas[0] - 1e-12
                checked += 1
        assert checked > 0

    def test_matches_naive(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 30)
        scratch = engine.refresh_scratch(state)
        inst, st = to_naive(engine, state)
        for i in range(engine.num_bags):
            q_i = naive_q_padded(st.tau[i], engine.k_max)
            for j in range(min(int(engine.n_i[i]), 2)):
                for k in range(engine.k_max):
                    got = engine.update_nu(state.copy(), scratch, i, j, k)
                    want = naive_nu(inst, st, q_i, i, j, k)
                    assert got == pytest.approx(want, rel=1e-10, abs=1e-12)


class TestOracleSweepEquality:
    @pytest.mark.parametrize("variant", ["wsc-siibp", "wsc-sibp", "ws-s"])
    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_full_sweep_matches_naive(self, variant, seed):
        engine = make_engine(seed=seed, variant=variant, penalty_c=2.0, num_videos=3, tracks=(2, 4))
        state = randomize_state(engine, seed + 100)
        inst, st = to_naive(engine, state)

        scratch = engine.new_scratch()
        engine._sweep_sigma_phi(state)
        engine.refresh_scratch(state, scratch)
        engine._sweep_tau(state, scratch)
        engine.refresh_bounds(state, scratch)
        engine._sweep_nu(state, scratch)

        st_new, q_all = naive_sweep(inst, st)
        for name in state.phi:
            np.testing.assert_allclose(state.phi[name], st_new.phi[name], rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(state.sigma_k2[name], st_new.sigma_k2[name], rtol=1e-10)
        for i in range(engine.num_bags):
            np.testing.assert_allclose(state.tau[i], st_new.tau[i], rtol=1e-10)
            np.testing.assert_allclose(state.nu_bag(i), st_new.nu[i], rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(scratch.q[i], q_all[i], rtol=1e-10, atol=1e-15)

    def test_per_element_ops_match_naive(self, small_engine):
        engine = small_engine
        state = randomize_state(engine, 55)
        inst, st = to_naive(engine, state)
        for ch in engine.channels:
            for k in range(engine.k_max):
                got = engine.update_sigma_k2(state, ch.name, k)
                want = naive_sigma_k2(inst, st, ch.name, k)
                assert got == pytest.approx(want, rel=1e-12)
                st.sigma_k2[ch.name][k] = want
                got_phi = engine.update_phi(state, ch.name, k)
                want_phi = naive_phi(inst, st, ch.name, k)
                np.testing.assert_allclose(got_phi, want_phi, rtol=1e-10, atol=1e-12)
                st.phi[ch.name][k] = want_phi
