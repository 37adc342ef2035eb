"""Parameter learning for the exponential-family trajectory model.

A trellis is flattened into a generalized sequence of multinomial layers
(states at odd positions, paths at even positions) whose per-value
feature vectors stack the point feature -d^2/2 with the path features.
The log partition function, its gradient, and its Hessian follow the
layer recursion; all three are carried in normalized form (log partial
sums, gradients and Hessians of the log) so large weights cannot
overflow.

Supervised fitting maximizes the penalized conditional likelihood, which
is strictly concave, by Newton steps with a step-halving line search that
also keeps the precision positive.  EM alternates exact smoothing (the
expected features) with Newton steps on the expected complete-data
log-likelihood of the generative factorization; see :func:`em_train` for
why the conditional objective cannot drive EM.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from mapmatch.errors import InvariantError
from mapmatch.features import FeatureExtractor, ModelParams, layer_features
from mapmatch.inference import PosteriorMarginals, Trellis, retarget_sigma, smooth

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    quadratic_penalty: float = 1e-2
    newton_iters_per_step: int = 1  # M-step; supervised fitting runs to convergence
    em_iters: int = 3
    convergence_tol: float = 1e-8
    max_newton_iters: int = 100

    def __post_init__(self):
        if self.quadratic_penalty < 0:
            raise ValueError("quadratic_penalty must be non-negative")


@dataclass(frozen=True)
class Label:
    """Observed state and path indices of the true trajectory in a trellis."""

    state_indices: tuple
    path_indices: tuple


@dataclass
class GeneralizedSequence:
    """Layered multinomial sequence with per-value features and compatibility.

    ``features[l]`` is the (K_l, M) table of feature vectors; ``compat[l]``
    is a boolean (K_{l+1}, K_l) table marking which consecutive values can
    follow each other.  ``realized`` is the summed feature vector of the
    observed assignment (or its expectation under posterior marginals).
    """

    features: list
    compat: list
    realized: np.ndarray

    def __post_init__(self):
        if len(self.compat) != len(self.features) - 1:
            raise ValueError("need one compatibility table per layer boundary")
        m = self.features[0].shape[1]
        if any(f.shape[1] != m for f in self.features) or self.realized.shape != (m,):
            raise ValueError("inconsistent feature dimensions")

    @property
    def L(self) -> int:
        return len(self.features)

    @property
    def M(self) -> int:
        return self.features[0].shape[1]


def to_generalized(
    trellis: Trellis,
    extractor: FeatureExtractor,
    labels: Label = None,
    marginals: PosteriorMarginals = None,
) -> GeneralizedSequence:
    """Flatten a trellis into a generalized sequence (L = 2T - 1 layers).

    With ``labels`` the realized features come from the observed indices;
    with ``marginals`` each layer's feature vector is replaced by its
    expected value under the posterior.  Exactly one of the two must be
    given.
    """
    if (labels is None) == (marginals is None):
        raise ValueError("provide exactly one of labels or marginals")
    feats: list = []
    compat: list = []
    m = extractor.dim + 1
    realized = np.zeros(m)
    for t in range(trellis.T):
        d2 = trellis.squared_distances(t)
        table = np.zeros((len(d2), m))
        table[:, 0] = -0.5 * d2
        feats.append(table)
        if labels is not None:
            i = labels.state_indices[t]
            if not 0 <= i < len(d2):
                raise IndexError(f"state label out of range at step {t}")
            realized += table[i]
        else:
            realized += np.exp(marginals.q_bar[t]) @ table
        if t < trellis.T - 1:
            layer = trellis.transition_layers[t]
            pf = layer_features(layer, extractor, trellis.network)
            table_p = np.zeros((len(layer), m))
            table_p[:, 1:] = pf
            if labels is not None:
                j = labels.path_indices[t]
                if not 0 <= j < len(layer):
                    raise IndexError(f"path label out of range at step {t}")
                realized += table_p[j]
            else:
                realized += np.exp(marginals.r_bar[t]) @ table_p
            c1 = np.zeros((len(layer), len(d2)), dtype=bool)
            c1[np.arange(len(layer)), layer.start_compat] = True
            n_next = layer.n_end
            c2 = np.zeros((n_next, len(layer)), dtype=bool)
            c2[layer.end_compat, np.arange(len(layer))] = True
            feats.append(table_p)
            compat.append(c1)
            compat.append(c2)
    return GeneralizedSequence(feats, compat, realized)


def _pass(seq: GeneralizedSequence, theta: np.ndarray, order: int):
    """One sweep of the layer recursion.

    Returns ``(log_z, grad, hess)`` of log Z; ``grad``/``hess`` are ``None``
    below the requested order.  Per layer we carry ``alpha`` (log partial
    sums), ``G`` (gradients of the log partials) and ``H`` (Hessians),
    which stay bounded regardless of the weight scale.
    """
    theta = np.asarray(theta, dtype=float)
    m = seq.M
    alpha = seq.features[0] @ theta
    G = seq.features[0].copy() if order >= 1 else None
    H = None
    if order >= 2:
        H = np.einsum("ki,kj->kij", seq.features[0], seq.features[0])
    for l in range(1, seq.L):
        T_l = seq.features[l]
        mask = seq.compat[l - 1]
        scores = np.where(mask, alpha[None, :], -np.inf)
        s = logsumexp(scores, axis=1)
        new_alpha = T_l @ theta + s
        if order >= 1:
            with np.errstate(invalid="ignore"):
                w = np.exp(scores - s[:, None])
            w[~np.isfinite(s)] = 0.0
            S = w @ G
            new_G = T_l + S
            if order >= 2:
                outer_ts = np.einsum("ki,kj->kij", S, T_l)
                new_H = (
                    np.einsum("ki,kj->kij", T_l, T_l)
                    + outer_ts
                    + outer_ts.transpose(0, 2, 1)
                    + np.einsum("kj,jab->kab", w, H)
                )
                H = new_H
            G = new_G
        alpha = new_alpha
    log_z = logsumexp(alpha)
    if not np.isfinite(log_z):
        raise InvariantError("no compatible assignment has positive potential")
    grad = hess = None
    if order >= 1:
        v = np.exp(alpha - log_z)
        grad = v @ G
        if order >= 2:
            hess = np.einsum("k,kab->ab", v, H) - np.outer(grad, grad)
            hess = 0.5 * (hess + hess.T)  # exact symmetry despite float noise
    return float(log_z), grad, hess


def log_partition(seq: GeneralizedSequence, theta) -> float:
    """log Z(theta): the log-sum over all compatible assignments."""
    return _pass(seq, theta, order=0)[0]


def log_partition_gradient(seq: GeneralizedSequence, theta) -> np.ndarray:
    """Gradient of log Z, equal to the expected total feature vector."""
    return _pass(seq, theta, order=1)[1]


def log_partition_hessian(seq: GeneralizedSequence, theta) -> np.ndarray:
    """Hessian of log Z (symmetric positive semidefinite)."""
    return _pass(seq, theta, order=2)[2]


def penalized_objective(sequences: list, theta, penalty: float) -> float:
    """Sum of per-sequence conditional log-likelihoods minus the L2 penalty."""
    theta = np.asarray(theta, dtype=float)
    total = -0.5 * penalty * float(theta @ theta)
    for seq in sequences:
        total += float(theta @ seq.realized) - log_partition(seq, theta)
    return total


def _objective_with_derivs(sequences: list, theta: np.ndarray, penalty: float):
    m = len(theta)
    obj = -0.5 * penalty * float(theta @ theta)
    grad = -penalty * theta.copy()
    hess = -penalty * np.eye(m)
    for seq in sequences:
        log_z, g, h = _pass(seq, theta, order=2)
        obj += float(theta @ seq.realized) - log_z
        grad += seq.realized - g
        hess -= h
    return obj, grad, hess


def _newton_steps(sequences: list, theta0: np.ndarray, config: TrainingConfig, max_iters: int):
    """Maximize the penalized objective from ``theta0``.

    The objective is strictly concave (the penalty bounds the Hessian away
    from singular), so a Newton step with step-halving line search
    converges to the unique maximizer; halving also keeps the precision
    component positive.
    """
    if theta0[0] <= 0:
        raise ValueError("epsilon must start positive")
    theta = np.asarray(theta0, dtype=float).copy()
    obj, grad, hess = _objective_with_derivs(sequences, theta, config.quadratic_penalty)
    for _ in range(max_iters):
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = grad
        if float(step @ grad) <= 0:
            step = grad
        scale = 1.0
        improved = False
        for _ in range(60):
            cand = theta + scale * step
            if cand[0] > 0:
                cand_obj = penalized_objective(sequences, cand, config.quadratic_penalty)
                if np.isfinite(cand_obj) and cand_obj >= obj:
                    improved = True
                    break
            scale *= 0.5
        if not improved:
            break
        moved = cand_obj - obj
        theta = cand
        obj, grad, hess = _objective_with_derivs(sequences, theta, config.quadratic_penalty)
        if moved <= config.convergence_tol * max(1.0, abs(obj)):
            break
    return theta, obj


@dataclass
class TrainingResult:
    params: ModelParams
    iterations: list = field(default_factory=list)  # per-iteration report dicts


def supervised_mle(sequences: list, config: TrainingConfig = TrainingConfig()) -> TrainingResult:
    """Maximum-likelihood parameters from labeled generalized sequences.

    Each sequence's ``realized`` vector must hold its observed features.
    The objective is concave (strictly, with the penalty), so the Newton
    iteration converges to the unique maximizer.
    """
    if not sequences:
        raise ValueError("no training sequences")
    m = sequences[0].M
    theta0 = np.zeros(m)
    theta0[0] = 1e-4  # sigma = 100 m; a weak starting precision
    start = time.perf_counter()
    theta, obj = _newton_steps(sequences, theta0, config, config.max_newton_iters)
    params = ModelParams(epsilon=float(theta[0]), mu=theta[1:])
    report = [
        {
            "iter": 0,
            "objective": obj,
            "theta": [float(v) for v in theta],
            "wallclock_s": time.perf_counter() - start,
        }
    ]
    return TrainingResult(params, report)


LOG_2PI = np.log(2.0 * np.pi)


def _path_only(seq: GeneralizedSequence) -> GeneralizedSequence:
    """The sequence with state features removed.

    Every state value then carries unit weight, and because each path
    determines its endpoint states, the partition over the sequence
    equals the partition of the driver model over compatible path chains.
    """
    feats = []
    for l, table in enumerate(seq.features):
        if l % 2 == 0:  # state layer
            feats.append(np.zeros_like(table))
        else:
            feats.append(table)
    return GeneralizedSequence(feats, seq.compat, np.zeros(seq.M))


def _em_objective(theta, stats, path_seqs, penalty: float):
    """Penalized expected complete-data log-likelihood.

    The observation side is a proper Gaussian density (its normalizer
    keeps the precision identified); the driver side is normalized over
    compatible path chains only.
    """
    eps, mu = theta[0], theta[1:]
    sum_S, n_states, phi_total = stats
    total = eps * sum_S + n_states * (0.5 * np.log(eps) - 0.5 * LOG_2PI)
    total += float(mu @ phi_total)
    for seq in path_seqs:
        total -= log_partition(seq, theta)
    return total - 0.5 * penalty * float(theta @ theta)


def _em_newton_steps(theta0, stats, path_seqs, config: TrainingConfig, max_iters: int):
    """Maximize the M-step objective; concave in epsilon and in mu."""
    theta = np.asarray(theta0, dtype=float).copy()
    sum_S, n_states, phi_total = stats
    m = len(theta)
    obj = _em_objective(theta, stats, path_seqs, config.quadratic_penalty)
    for _ in range(max_iters):
        eps = theta[0]
        grad = np.zeros(m)
        hess = np.zeros((m, m))
        grad[0] = sum_S + n_states / (2.0 * eps)
        hess[0, 0] = -n_states / (2.0 * eps * eps)
        grad[1:] = phi_total
        for seq in path_seqs:
            _, g, h = _pass(seq, theta, order=2)
            grad[1:] -= g[1:]
            hess[1:, 1:] -= h[1:, 1:]
        grad -= config.quadratic_penalty * theta
        hess -= config.quadratic_penalty * np.eye(m)
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = grad
        if float(step @ grad) <= 0:
            step = grad
        scale = 1.0
        improved = False
        for _ in range(60):
            cand = theta + scale * step
            if cand[0] > 0:
                cand_obj = _em_objective(cand, stats, path_seqs, config.quadratic_penalty)
                if np.isfinite(cand_obj) and cand_obj >= obj:
                    improved = True
                    break
            scale *= 0.5
        if not improved:
            break
        moved = cand_obj - obj
        theta, obj = cand, cand_obj
        if moved <= config.convergence_tol * max(1.0, abs(obj)):
            break
    return theta, obj


def em_train(
    trellises: list,
    extractor: FeatureExtractor,
    init: ModelParams,
    config: TrainingConfig = TrainingConfig(),
) -> TrainingResult:
    """Fit parameters from unlabeled trellises by expectation maximization.

    Each iteration smooths every trellis under the current parameters and
    replaces the feature vectors by their expected values; the M-step then
    runs the configured number of Newton steps on the penalized expected
    complete-data log-likelihood.  That objective treats the assignment as
    latent in a generative factorization: Gaussian observation densities
    (normalizer included) times an exponential-family driver prior
    normalized over compatible path chains.  Normalizing over the full
    observation-weighted trellis instead would make every parameter vector
    a stationary point, because the smoothed marginals are exactly the
    expectations that the full partition's gradient produces.

    The tracked per-iteration objective is evaluated after the M-step and
    is non-decreasing for line-searched steps.
    """
    if not trellises:
        raise ValueError("no trellises to train on")
    params = init
    result = TrainingResult(params)
    seq_cache: dict = {}
    for it in range(config.em_iters):
        start = time.perf_counter()
        sum_S = 0.0
        n_states = 0
        phi_total = np.zeros(extractor.dim)
        full_seqs = []
        path_seqs = []
        for idx, trellis in enumerate(trellises):
            try:
                # Observation densities must reflect the current sigma, not
                # whatever sigma the trellis was projected with.
                pm = smooth(retarget_sigma(trellis, params.sigma), params, extractor)
            except InvariantError as exc:
                logger.warning("EM: skipping trellis %d: %s", idx, exc)
                continue
            if idx not in seq_cache:
                zeros = PosteriorMarginals(
                    q_bar=[np.zeros(len(trellis.state_layers[t])) for t in range(trellis.T)],
                    r_bar=[np.zeros(len(l)) for l in trellis.transition_layers],
                )
                full = to_generalized(trellis, extractor, marginals=zeros)
                seq_cache[idx] = (full, _path_only(full))
            full, path = seq_cache[idx]
            for t in range(trellis.T):
                sum_S += float(np.exp(pm.q_bar[t]) @ (-0.5 * trellis.squared_distances(t)))
                n_states += 1
            for t in range(trellis.T - 1):
                feats = layer_features(trellis.transition_layers[t], extractor, trellis.network)
                phi_total += np.exp(pm.r_bar[t]) @ feats
            full_seqs.append(full)
            path_seqs.append(path)
        if not path_seqs:
            raise InvariantError("EM: no trellis has positive probability mass")
        stats = (sum_S, n_states, phi_total)
        theta, q_value = _em_newton_steps(params.theta, stats, path_seqs, config, config.newton_iters_per_step)
        params = ModelParams(epsilon=float(theta[0]), mu=theta[1:])
        result.iterations.append(
            {
                "iter": it + 1,
                "objective": _em_marginal_loglik(theta, n_states, full_seqs, path_seqs, config.quadratic_penalty),
                "q_objective": q_value,
                "theta": [float(v) for v in theta],
                "wallclock_s": time.perf_counter() - start,
            }
        )
    result.params = params
    return result


def _em_marginal_loglik(theta, n_states: int, full_seqs: list, path_seqs: list, penalty: float) -> float:
    """Penalized marginal log-likelihood of the generative factorization.

    The EM iteration cannot decrease this quantity (the classic ascent
    property), so it is the objective reported per iteration.
    """
    eps = theta[0]
    total = n_states * (0.5 * np.log(eps) - 0.5 * LOG_2PI)
    for full, path in zip(full_seqs, path_seqs):
        total += log_partition(full, theta) - log_partition(path, theta)
    return float(total - 0.5 * penalty * float(theta @ theta))
