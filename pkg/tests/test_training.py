"""Partition-function recursions and parameter fitting."""

import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mapmatch.features import ModelParams
from mapmatch.training import (
    GeneralizedSequence,
    Label,
    TrainingConfig,
    em_train,
    log_partition,
    log_partition_gradient,
    log_partition_hessian,
    penalized_objective,
    supervised_mle,
    to_generalized,
)
from tests.conftest import SIMPLE, make_state_layer, make_transition, make_trellis

rng_global = np.random.default_rng(0)


def random_sequence(rng, max_L=5, max_K=3, max_M=4):
    L = int(rng.integers(1, max_L + 1))
    Ks = [int(rng.integers(1, max_K + 1)) for _ in range(L)]
    M = int(rng.integers(1, max_M + 1))
    feats = [rng.normal(size=(k, M)) for k in Ks]
    compat = []
    chain = [int(rng.integers(k)) for k in Ks]
    for l in range(1, L):
        c = rng.random((Ks[l], Ks[l - 1])) < 0.5
        c[chain[l], chain[l - 1]] = True
        compat.append(c)
    realized = sum(feats[l][chain[l]] for l in range(L))
    return GeneralizedSequence(feats, compat, np.asarray(realized)), chain


def brute_force(seq, theta):
    """(log Z, expected features, feature covariance) by enumeration."""
    Ks = [f.shape[0] for f in seq.features]
    scores = []
    totals = []
    for assign in itertools.product(*[range(k) for k in Ks]):
        if all(seq.compat[l - 1][assign[l], assign[l - 1]] for l in range(1, len(Ks))):
            T = sum(seq.features[l][assign[l]] for l in range(len(Ks)))
            scores.append(float(np.dot(theta, T)))
            totals.append(T)
    scores = np.asarray(scores)
    m = scores.max()
    log_z = m + math.log(np.exp(scores - m).sum())
    w = np.exp(scores - log_z)
    totals = np.asarray(totals)
    mean = w @ totals
    cov = np.einsum("k,ki,kj->ij", w, totals, totals) - np.outer(mean, mean)
    return log_z, mean, cov


class TestLogPartition:
    def test_zero_theta_counts_assignments(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            seq, _ = random_sequence(rng)
            count = brute_force(seq, np.zeros(seq.M))[0]
            assert log_partition(seq, np.zeros(seq.M)) == pytest.approx(count, rel=1e-12)

    def test_single_layer_closed_form(self):
        f = np.array([[1.0], [-2.0]])
        seq = GeneralizedSequence([f], [], np.zeros(1))
        theta = np.array([0.7])
        expected = math.log(math.exp(0.7) + math.exp(-1.4))
        assert log_partition(seq, theta) == pytest.approx(expected, rel=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            seq, _ = random_sequence(rng)
            theta = rng.normal(size=seq.M) * 2.0
            expected = brute_force(seq, theta)[0]
            assert log_partition(seq, theta) == pytest.approx(expected, rel=1e-9)

    def test_extreme_weights_stay_finite(self):
        rng = np.random.default_rng(3)
        seq, _ = random_sequence(rng, max_L=4, max_K=3, max_M=2)
        theta = np.array([500.0, -800.0])[: seq.M]
        assert np.isfinite(log_partition(seq, theta))


class TestGradient:
    def test_symmetric_features_zero_gradient(self):
        f = np.array([[1.0], [-1.0]])
        seq = GeneralizedSequence([f], [], np.zeros(1))
        assert log_partition_gradient(seq, np.zeros(1))[0] == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            seq, _ = random_sequence(rng)
            theta = rng.normal(size=seq.M)
            grad = log_partition_gradient(seq, theta)
            for m in range(seq.M):
                e = np.zeros(seq.M)
                e[m] = 1e-5
                fd = (log_partition(seq, theta + e) - log_partition(seq, theta - e)) / 2e-5
                assert grad[m] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    def test_matches_expected_features(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            seq, _ = random_sequence(rng)
            theta = rng.normal(size=seq.M)
            assert_allclose(log_partition_gradient(seq, theta), brute_force(seq, theta)[1], atol=1e-9)


class TestHessian:
    def test_two_point_variance(self):
        # One layer, two values: the Hessian is the feature variance.
        f = np.array([[2.0], [-1.0]])
        seq = GeneralizedSequence([f], [], np.zeros(1))
        theta = np.array([0.3])
        p = math.exp(0.6) / (math.exp(0.6) + math.exp(-0.3))
        var = p * (1 - p) * (2.0 - (-1.0)) ** 2
        assert log_partition_hessian(seq, theta)[0, 0] == pytest.approx(var, rel=1e-12)

    def test_matches_gradient_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            seq, _ = random_sequence(rng)
            theta = rng.normal(size=seq.M)
            hess = log_partition_hessian(seq, theta)
            for m in range(seq.M):
                e = np.zeros(seq.M)
                e[m] = 1e-5
                fd = (log_partition_gradient(seq, theta + e) - log_partition_gradient(seq, theta - e)) / 2e-5
                assert_allclose(hess[:, m], fd, rtol=1e-5, atol=1e-7)

    def test_symmetric_and_psd(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            seq, _ = random_sequence(rng)
            theta = rng.normal(size=seq.M)
            hess = log_partition_hessian(seq, theta)
            assert_allclose(hess, hess.T, atol=0)
            assert np.linalg.eigvalsh(hess).min() >= -1e-8


class TestToGeneralized:
    def test_single_step(self):
        tr = make_trellis([make_state_layer([0.0, -1.0], d=[3.0, 4.0])], [])
        seq = to_generalized(tr, SIMPLE, labels=Label((1,), ()))
        assert seq.L == 1
        assert seq.M == 2
        assert_allclose(seq.features[0][:, 0], [-4.5, -8.0])
        assert_allclose(seq.realized, [-8.0, 0.0])

    def test_two_step_hand_mapping(self):
        layers = [
            make_state_layer([0.0, 0.0], d=[1.0, 2.0]),
            make_state_layer([0.0], d=[3.0]),
        ]
        trans = make_transition([0, 1], [0, 0], [100.0, 150.0], 2, 1)
        tr = make_trellis(layers, [trans])
        seq = to_generalized(tr, SIMPLE, labels=Label((1, 0), (1,)))
        assert seq.L == 3
        # Realized: point features -d^2/2 at labels plus the labeled path length.
        assert_allclose(seq.realized, [-0.5 * 4.0 - 0.5 * 9.0, 150.0])
        assert seq.compat[0].shape == (2, 2)  # paths x states
        assert seq.compat[0][1, 1] and not seq.compat[0][1, 0]
        assert seq.compat[1].shape == (1, 2)  # next states x paths

    def test_expected_point_mass_equals_labeled(self):
        from mapmatch.inference import PosteriorMarginals

        layers = [
            make_state_layer([0.0, -2.0], d=[1.0, 2.0]),
            make_state_layer([0.0], d=[3.0]),
        ]
        trans = make_transition([0, 1], [0, 0], [100.0, 150.0], 2, 1)
        tr = make_trellis(layers, [trans])
        labeled = to_generalized(tr, SIMPLE, labels=Label((0, 0), (0,)))
        pm = PosteriorMarginals(
            q_bar=[np.log([1.0, 1e-300]), np.array([0.0])],
            r_bar=[np.log([1.0, 1e-300])],
        )
        expected = to_generalized(tr, SIMPLE, marginals=pm)
        assert_allclose(expected.realized, labeled.realized, atol=1e-12)

    def test_label_out_of_range(self):
        tr = make_trellis([make_state_layer([0.0])], [])
        with pytest.raises(IndexError):
            to_generalized(tr, SIMPLE, labels=Label((4,), ()))


class TestSupervised:
    def test_unique_assignment_gives_zero_theta(self):
        # Z equals the realized term, so only the penalty remains.
        feats = [np.array([[1.0, 2.0]]), np.array([[0.5, -1.0]])]
        compat = [np.array([[True]])]
        seq = GeneralizedSequence(feats, compat, feats[0][0] + feats[1][0])
        result = supervised_mle([seq], TrainingConfig())
        assert abs(result.params.mu[0]) < 1e-6
        assert result.params.epsilon <= 1e-4

    def test_objective_concave_along_segments(self):
        rng = np.random.default_rng(8)
        seqs = [random_sequence(rng)[0] for _ in range(3)]
        m = seqs[0].M
        seqs = [s for s in seqs if s.M == m]
        for _ in range(20):
            a = rng.normal(size=m)
            b = rng.normal(size=m)
            ts = np.linspace(0, 1, 7)
            vals = [penalized_objective(seqs, (1 - t) * a + t * b, 1e-2) for t in ts]
            second = np.diff(vals, 2)
            assert (second <= 1e-8).all()

    def test_generate_then_recover_smoke(self):
        """Small-scale recovery; the full-tolerance run is in acceptance."""
        from mapmatch.evaluation import decimate, match_labels
        from mapmatch.inference import build_trellis
        from mapmatch.paths import BackwardPolicy, DiscoveryConfig
        from mapmatch.projection import ProjectionConfig
        from mapmatch.synthetic import GridSpec, SimSpec, add_gps_noise, generate_grid, simulate_trajectory

        net = generate_grid(GridSpec(rows=8, cols=8, block_length=200.0, speed_limit=10.0))
        true = ModelParams.from_sigma(10.0, [-0.005])
        proj = ProjectionConfig(sigma=10.0, radius=40.0, strategy="grid", grid_step=15.0)
        disc = DiscoveryConfig(dt=60.0, backward_policy=BackwardPolicy.GRID_FORWARD_ONLY)
        seqs = []
        for i in range(40):
            sim = SimSpec(true, SIMPLE, duration=540.0, seed=300 + 2 * i, decision_period=60.0)
            truth = simulate_trajectory(net, sim)
            obs = add_gps_noise(truth, 10.0, seed=300 + 2 * i + 1)
            obs60, truth60 = decimate(truth, 60.0, obs, net)
            for tr in build_trellis(obs60, net, proj, disc):
                tindex = {round(t, 6): k for k, t in enumerate(truth60.timestamps)}
                st, pt, _ = match_labels(tr, truth60, tindex)
                if any(v is None for v in st) or any(v is None for v in pt):
                    continue
                seqs.append(to_generalized(tr, SIMPLE, labels=Label(tuple(st), tuple(pt))))
        result = supervised_mle(seqs, TrainingConfig())
        assert 7.0 < result.params.sigma < 14.0
        assert -0.0075 < result.params.mu[0] < -0.0025


class TestEM:
    def build_dominated(self, rng):
        """Labels effectively known: every alternative is dominated.

        The second state candidate sits 60 m away (its mass is driven to
        nearly zero for any sane precision, yet it still identifies the
        precision through the partition function); the paths touching it
        carry an 80 m detour.  The posterior is then a point mass on the
        label and the E-step reproduces supervised training.
        """
        T = 3
        layers = []
        for _ in range(T):
            d_label = float(rng.uniform(2, 12))
            ds = [d_label, 60.0]
            layers.append(make_state_layer([-0.005 * d * d for d in ds], d=ds))
        trans = []
        for _ in range(T - 1):
            base = float(rng.uniform(100, 500))
            trans.append(
                make_transition(
                    [0, 0, 1, 1], [0, 1, 0, 1], [base, base + 80.0, base + 80.0, base + 160.0], 2, 2
                )
            )
        return make_trellis(layers, trans)

    @staticmethod
    def labeled_generative_fit(trellises, labels, config):
        """The M-step objective with the labels plugged in directly."""
        from mapmatch.features import layer_features
        from mapmatch.training import _em_newton_steps, _path_only

        sum_S = 0.0
        n_states = 0
        phi_total = np.zeros(SIMPLE.dim)
        path_seqs = []
        for tr, lab in zip(trellises, labels):
            for t in range(tr.T):
                sum_S += -0.5 * tr.squared_distances(t)[lab.state_indices[t]]
                n_states += 1
            for t in range(tr.T - 1):
                feats = layer_features(tr.transition_layers[t], SIMPLE, tr.network)
                phi_total += feats[lab.path_indices[t]]
            path_seqs.append(_path_only(to_generalized(tr, SIMPLE, labels=lab)))
        theta0 = np.array([1e-2, 0.0])
        theta, _ = _em_newton_steps(theta0, (sum_S, n_states, phi_total), path_seqs, config, 200)
        return ModelParams(float(theta[0]), theta[1:])

    def test_dominated_alternatives_match_labeled_fit(self):
        """With near-degenerate marginals EM reaches the labeled optimum."""
        rng = np.random.default_rng(9)
        trellises = [self.build_dominated(rng) for _ in range(6)]
        labels = [Label((0, 0, 0), (0, 0))] * len(trellises)
        ref = self.labeled_generative_fit(trellises, labels, TrainingConfig())
        config = TrainingConfig(em_iters=10, newton_iters_per_step=50)
        em = em_train(trellises, SIMPLE, ModelParams.from_sigma(20.0, [-0.002]), config)
        assert em.params.sigma == pytest.approx(ref.sigma, rel=1e-3)
        assert em.params.mu[0] == pytest.approx(ref.mu[0], rel=1e-3, abs=1e-6)

    def test_fixed_point_of_converged_em(self):
        """Restarting EM at its converged parameters does not move them."""
        rng = np.random.default_rng(10)
        trellises = [self.build_dominated(rng) for _ in range(6)]
        config = TrainingConfig(em_iters=30, newton_iters_per_step=50)
        first = em_train(trellises, SIMPLE, ModelParams.from_sigma(20.0, [-0.002]), config)
        again = em_train(trellises, SIMPLE, first.params, TrainingConfig(em_iters=2, newton_iters_per_step=50))
        assert again.params.sigma == pytest.approx(first.params.sigma, rel=1e-5)
        assert again.params.mu[0] == pytest.approx(first.params.mu[0], rel=1e-5, abs=1e-9)

    def test_monotone_objective(self):
        rng = np.random.default_rng(11)
        layers = [make_state_layer(rng.normal(size=2), d=rng.uniform(1, 20, size=2)) for _ in range(3)]
        trans = [
            make_transition([0, 0, 1, 1], [0, 1, 0, 1], rng.uniform(50, 600, size=4), 2, 2)
            for _ in range(2)
        ]
        trellises = [make_trellis(layers, trans)]
        em = em_train(trellises, SIMPLE, ModelParams.from_sigma(20.0, [-0.002]), TrainingConfig(em_iters=5))
        objectives = [r["objective"] for r in em.iterations]
        assert all(b >= a - 1e-6 for a, b in zip(objectives, objectives[1:]))
