"""Maximum-likelihood estimation via a generalized EM scheme.

The E-step computes exact component posteriors in log space. The M-step
updates parameters in guarded blocks: shared mixture weights (closed form),
expert parameters (closed-form weighted least squares for linear families,
Armijo-backtracked gradient ascent on the Q-function otherwise), variances
(closed form, floored), and gating parameters (gradient ascent). Every block
is accepted only when the observed-data log-likelihood does not decrease, so
the likelihood trace is monotone up to roundoff regardless of how far the
numerical inner loops got.

Top-K gates are handled by freezing the active-set masks implied by the
current parameters inside one gating block: the inner objective and gradient
use the frozen masks, while the acceptance guard re-evaluates the true
likelihood with masks recomputed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_expit, logsumexp

from .model import (
    Dataset,
    ExpertFamily,
    ExpertKind,
    Gating,
    GatingKind,
    MixingMeasurePair,
    RoutedAtom,
    SharedAtom,
    expert_eval_stack,
    expert_grad,
    gate_scores,
)
from .seeds import derive_seed

__all__ = ["EMConfig", "FitResult", "e_step", "m_step", "fit_mle"]

_VARIANCE_FLOOR = 1e-6
_DEGENERATE_FRACTION = 1e-8
_GUARD_SLACK = 1e-12
_BOX_FACTOR = 15.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EMConfig:
    """Convergence and restart policy for fit_mle."""

    tol: float = 1e-6
    max_iter: int = 1000
    restarts: int = 5
    inner_steps: int = 25
    seed: int = 0
    init_box_scale: float = 1.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1 or self.restarts < 1 or self.inner_steps < 1:
            raise ValueError("max_iter, restarts, inner_steps must be >= 1")
        if self.init_box_scale <= 0:
            raise ValueError("init_box_scale must be positive")


@dataclass(frozen=True)
class FitResult:
    """Best restart's model with its likelihood trace and status flags."""

    model: MixingMeasurePair
    loglik_trace: tuple[float, ...]
    iterations: int
    converged: bool
    restart_index: int
    warnings: tuple[str, ...] = ()


class _State:
    """Mutable array view of a model during one EM run."""

    __slots__ = ("omega", "shared_theta", "tau", "beta0", "beta1", "routed_theta", "nu")

    def __init__(self, omega, shared_theta, tau, beta0, beta1, routed_theta, nu):
        self.omega = np.asarray(omega, dtype=float)
        self.shared_theta = np.asarray(shared_theta, dtype=float)
        self.tau = np.asarray(tau, dtype=float)
        self.beta0 = np.asarray(beta0, dtype=float)
        self.beta1 = np.asarray(beta1, dtype=float)
        self.routed_theta = np.asarray(routed_theta, dtype=float)
        self.nu = np.asarray(nu, dtype=float)

    @classmethod
    def from_model(cls, model: MixingMeasurePair) -> "_State":
        return cls(
            [a.omega for a in model.shared],
            [a.kappa for a in model.shared],
            [a.tau for a in model.shared],
            [a.beta0 for a in model.routed],
            [a.beta1 for a in model.routed],
            [a.eta for a in model.routed],
            [a.nu for a in model.routed],
        )

    def to_model(
        self, shared_family: ExpertFamily, routed_family: ExpertFamily, gating: Gating
    ) -> MixingMeasurePair:
        shared = tuple(
            SharedAtom(w, k, t) for w, k, t in zip(self.omega, self.shared_theta, self.tau)
        )
        routed = tuple(
            RoutedAtom(b0, b1, e, v)
            for b0, b1, e, v in zip(self.beta0, self.beta1, self.routed_theta, self.nu)
        )
        return MixingMeasurePair(shared, routed, gating, shared_family, routed_family)


def _log_density_matrix(
    state: _State,
    shared_family: ExpertFamily,
    routed_family: ExpertFamily,
    gating: Gating,
    X: np.ndarray,
    y: np.ndarray,
) -> np.ndarray:
    """log(prior * normal density) per component; -inf where the prior is 0."""
    gates = gate_scores(gating, state.beta1, state.beta0, X)
    priors = np.concatenate([np.broadcast_to(0.5 * state.omega, (X.shape[0], state.omega.size)),
                             0.5 * gates], axis=1)
    means = np.concatenate(
        [
            expert_eval_stack(shared_family, state.shared_theta, X),
            expert_eval_stack(routed_family, state.routed_theta, X),
        ],
        axis=1,
    )
    variances = np.concatenate([state.tau, state.nu])
    log_normal = -0.5 * ((y[:, None] - means) ** 2 / variances + np.log(variances) + _LOG_2PI)
    with np.errstate(divide="ignore"):
        log_prior = np.log(priors)
    return log_prior + log_normal


def _mean_loglik(state, shared_family, routed_family, gating, X, y) -> float:
    logp = _log_density_matrix(state, shared_family, routed_family, gating, X, y)
    return float(logsumexp(logp, axis=1).mean())


def e_step(model: MixingMeasurePair, data: Dataset) -> np.ndarray:
    """Posterior responsibilities, one row per sample; rows sum to 1."""
    state = _State.from_model(model)
    logp = _log_density_matrix(
        state, model.shared_family, model.routed_family, model.gating, data.x, data.y
    )
    return np.exp(logp - logsumexp(logp, axis=1)[:, None])


def _weighted_linear_fit(X: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Minimizer of sum w_i (y_i - slope.x_i - bias)^2 as (slope..., bias)."""
    Z = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(Z * sw[:, None], y * sw, rcond=None)
    return coef


def _inner_ascent(objective, gradient, theta0, inner_steps, bound):
    """Gradient-driven ascent with line search; returns the improved point.

    Runs at most inner_steps quasi-Newton (L-BFGS) iterations, which build
    curvature from gradient differences; this matters for gating blocks,
    whose likelihood ridges are too shallow for plain steepest ascent to
    traverse. The box keeps the search on a compact parameter set, cutting
    off the escape rays a finite sample cannot pin down (saturating-expert
    scale trades, separating gates). The iterate is kept only when it
    strictly improves the start.
    """
    f0 = objective(theta0)
    result = minimize(
        lambda t: -objective(t),
        np.clip(theta0, -bound, bound),
        jac=lambda t: -np.asarray(gradient(t)),
        method="L-BFGS-B",
        bounds=[(-bound, bound)] * theta0.size,
        options={"maxiter": inner_steps, "ftol": 1e-14, "gtol": 1e-12},
    )
    if np.all(np.isfinite(result.x)) and -result.fun > f0:
        return result.x
    return theta0


def _update_expert_block(
    family: ExpertFamily,
    theta: np.ndarray,
    resp_block: np.ndarray,
    variances: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    active: np.ndarray,
    inner_steps: int,
    bound: float,
) -> np.ndarray:
    """One branch's expert-parameter update proposal (guard applied outside)."""
    new_theta = theta.copy()
    if family.kind is ExpertKind.LINEAR:
        for c in np.nonzero(active)[0]:
            new_theta[c] = _weighted_linear_fit(X, y, resp_block[:, c])
        return new_theta

    act = np.nonzero(active)[0]
    if act.size == 0:
        return new_theta
    weights = resp_block[:, act] / variances[act]

    def objective(flat):
        th = flat.reshape(act.size, family.param_dim)
        h = expert_eval_stack(family, th, X)
        return float(-0.5 * (weights * (y[:, None] - h) ** 2).sum())

    def gradient(flat):
        th = flat.reshape(act.size, family.param_dim)
        h = expert_eval_stack(family, th, X)
        coef = weights * (y[:, None] - h)
        g = np.empty_like(th)
        for idx in range(act.size):
            g[idx] = coef[:, idx] @ expert_grad(family, th[idx], X)
        return g.ravel()

    out = _inner_ascent(objective, gradient, new_theta[act].ravel(), inner_steps, bound)
    new_theta[act] = out.reshape(act.size, family.param_dim)
    return new_theta


def _update_variances(
    family: ExpertFamily,
    theta: np.ndarray,
    resp_block: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    old: np.ndarray,
    active: np.ndarray,
) -> np.ndarray:
    h = expert_eval_stack(family, theta, X)
    mass = resp_block.sum(axis=0)
    out = old.copy()
    for c in np.nonzero(active & (mass > 0))[0]:
        out[c] = max((resp_block[:, c] @ (y - h[:, c]) ** 2) / mass[c], _VARIANCE_FLOOR)
    return out


def _gating_objective_and_gradient(gating: Gating, resp_routed: np.ndarray, X: np.ndarray):
    """Builders for the gating Q-function in (beta1 | beta0) flat coordinates.

    For Top-K the active-set masks are frozen from the parameter point the
    block starts at; the acceptance guard re-checks the true likelihood.
    """
    n, k2 = resp_routed.shape
    rho = resp_routed.sum(axis=1)

    def unpack(flat):
        b1 = flat[: k2 * X.shape[1]].reshape(k2, X.shape[1])
        b0 = flat[k2 * X.shape[1] :]
        return b1, b0

    if gating.kind is GatingKind.SOFTMAX:
        def objective(flat):
            b1, b0 = unpack(flat)
            z = X @ b1.T + b0
            return float((resp_routed * z).sum() - rho @ logsumexp(z, axis=1))

        def gradient(flat):
            b1, b0 = unpack(flat)
            z = X @ b1.T + b0
            soft = np.exp(z - logsumexp(z, axis=1)[:, None])
            dz = resp_routed - rho[:, None] * soft
            return np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])

        return objective, gradient, None

    if gating.kind is GatingKind.SIGMOID:
        def objective(flat):
            b1, b0 = unpack(flat)
            z = X @ b1.T + b0
            log_sig = log_expit(z)
            total = logsumexp(log_sig, axis=1)
            return float((resp_routed * log_sig).sum() - rho @ total)

        def gradient(flat):
            b1, b0 = unpack(flat)
            z = X @ b1.T + b0
            sig = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
            norm = sig / np.maximum(sig.sum(axis=1, keepdims=True), 1e-300)
            dz = (resp_routed - rho[:, None] * norm) * (1.0 - sig)
            return np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])

        return objective, gradient, None

    def make_topk(mask):
        neg = np.where(mask, 0.0, -np.inf)

        def objective(flat):
            b1, b0 = unpack(flat)
            z = X @ b1.T + b0 + neg
            return float((resp_routed * np.where(mask, z, 0.0)).sum()
                         - rho @ logsumexp(z, axis=1))

        def gradient(flat):
            b1, b0 = unpack(flat)
            z = X @ b1.T + b0 + neg
            soft = np.exp(z - logsumexp(z, axis=1)[:, None])
            dz = np.where(mask, resp_routed - rho[:, None] * soft, 0.0)
            return np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])

        return objective, gradient

    return None, None, make_topk


def m_step(
    resp: np.ndarray,
    data: Dataset,
    model: MixingMeasurePair,
    cfg: EMConfig,
) -> MixingMeasurePair:
    """One guarded M-step; the returned model never has lower likelihood."""
    state = _State.from_model(model)
    _m_step_arrays(
        state, resp, data.x, data.y, model.shared_family, model.routed_family,
        model.gating, cfg,
    )
    return state.to_model(model.shared_family, model.routed_family, model.gating)


def _m_step_arrays(
    state: _State,
    resp: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    shared_family: ExpertFamily,
    routed_family: ExpertFamily,
    gating: Gating,
    cfg: EMConfig,
) -> float:
    """Applies accepted blocks to state in place; returns the final likelihood."""
    n = X.shape[0]
    k1 = state.omega.size
    r_shared = resp[:, :k1]
    r_routed = resp[:, k1:]
    shared_mass = r_shared.sum(axis=0)
    routed_mass = r_routed.sum(axis=0)
    shared_active = shared_mass >= _DEGENERATE_FRACTION * n
    routed_active = routed_mass >= _DEGENERATE_FRACTION * n

    def ll() -> float:
        return _mean_loglik(state, shared_family, routed_family, gating, X, y)

    current = ll()
    bound = _BOX_FACTOR * cfg.init_box_scale

    # Block 1: shared mixture weights (closed form on the simplex).
    total = shared_mass.sum()
    if total > 0:
        old = state.omega.copy()
        state.omega = shared_mass / total
        new = ll()
        if new >= current - _GUARD_SLACK:
            current = new
        else:
            state.omega = old

    # Block 2: expert parameters, one branch at a time.
    for label, family, theta_name, rblock, variances, active in (
        ("shared_theta", shared_family, "shared_theta", r_shared, state.tau, shared_active),
        ("routed_theta", routed_family, "routed_theta", r_routed, state.nu, routed_active),
    ):
        old = getattr(state, theta_name).copy()
        proposal = _update_expert_block(
            family, old, rblock, variances, X, y, active, cfg.inner_steps, bound,
        )
        if np.array_equal(proposal, old):
            continue
        setattr(state, theta_name, proposal)
        new = ll()
        if new >= current - _GUARD_SLACK:
            current = new
        else:
            setattr(state, theta_name, old)

    # Block 3: variances (closed form with the accepted means).
    old_tau, old_nu = state.tau.copy(), state.nu.copy()
    state.tau = _update_variances(
        shared_family, state.shared_theta, r_shared, X, y, old_tau, shared_active
    )
    state.nu = _update_variances(
        routed_family, state.routed_theta, r_routed, X, y, old_nu, routed_active
    )
    new = ll()
    if new >= current - _GUARD_SLACK:
        current = new
    else:
        state.tau, state.nu = old_tau, old_nu

    # Block 4: gating parameters.
    d = X.shape[1]
    flat0 = np.concatenate([state.beta1.ravel(), state.beta0])
    objective, gradient, make_topk = _gating_objective_and_gradient(gating, r_routed, X)
    if make_topk is not None:
        gates = gate_scores(gating, state.beta1, state.beta0, X)
        objective, gradient = make_topk(gates > 0)
    flat = _inner_ascent(objective, gradient, flat0, cfg.inner_steps, bound)
    if not np.array_equal(flat, flat0):
        old_b1, old_b0 = state.beta1.copy(), state.beta0.copy()
        k2 = state.beta0.size
        state.beta1 = flat[: k2 * d].reshape(k2, d)
        state.beta0 = flat[k2 * d :]
        new = ll()
        if new >= current - _GUARD_SLACK:
            current = new
        else:
            state.beta1, state.beta0 = old_b1, old_b0
    return current


def _random_state(
    rng: np.random.Generator,
    k1: int,
    k2: int,
    shared_family: ExpertFamily,
    routed_family: ExpertFamily,
    d: int,
    scale: float,
) -> _State:
    box = 10.0 * scale
    omega = rng.dirichlet(np.ones(k1))
    return _State(
        omega=omega,
        shared_theta=rng.uniform(-box, box, size=(k1, shared_family.param_dim)),
        tau=rng.uniform(0.05, 1.0, size=k1),
        beta0=rng.uniform(-1.0, 1.0, size=k2),
        beta1=rng.uniform(-1.0, 1.0, size=(k2, d)),
        routed_theta=rng.uniform(-box, box, size=(k2, routed_family.param_dim)),
        nu=rng.uniform(0.05, 1.0, size=k2),
    )


def fit_mle(
    data: Dataset,
    k1: int,
    k2: int,
    shared_family: ExpertFamily,
    routed_family: ExpertFamily,
    gating: Gating,
    cfg: EMConfig = EMConfig(),
    init_model: MixingMeasurePair | None = None,
) -> FitResult:
    """Best-of-restarts generalized EM fit; deterministic given (data, cfg.seed).

    When init_model is given it replaces the random initialization of the
    first restart. Shared atoms of the returned model are sorted by expert
    parameters lexicographically so equal fits serialize identically.
    """
    if k1 < 1 or k2 < 1:
        raise ValueError("k1 and k2 must be >= 1")
    if data.n < k1 + k2:
        raise ValueError(f"need at least k1+k2={k1 + k2} samples, got {data.n}")
    if shared_family.input_dim != data.d or routed_family.input_dim != data.d:
        raise ValueError("family input_dim must match the data dimension")
    X, y, d = data.x, data.y, data.d

    best: tuple[float, FitResult] | None = None
    for restart in range(cfg.restarts):
        if init_model is not None and restart == 0:
            state = _State.from_model(init_model)
        else:
            rng = np.random.Generator(np.random.Philox(key=derive_seed(cfg.seed, restart)))
            state = _random_state(rng, k1, k2, shared_family, routed_family, d,
                                  cfg.init_box_scale)
        trace = [_mean_loglik(state, shared_family, routed_family, gating, X, y)]
        converged = False
        iterations = 0
        for iterations in range(1, cfg.max_iter + 1):
            logp = _log_density_matrix(state, shared_family, routed_family, gating, X, y)
            resp = np.exp(logp - logsumexp(logp, axis=1)[:, None])
            new_ll = _m_step_arrays(
                state, resp, X, y, shared_family, routed_family, gating, cfg
            )
            trace.append(new_ll)
            if abs(trace[-1] - trace[-2]) < cfg.tol:
                converged = True
                break
        model = state.to_model(shared_family, routed_family, gating)
        model = _sort_shared(model)
        result = FitResult(model, tuple(trace), iterations, converged, restart)
        if best is None or trace[-1] > best[0]:
            best = (trace[-1], result)
    return best[1]


def _sort_shared(model: MixingMeasurePair) -> MixingMeasurePair:
    order = sorted(range(len(model.shared)), key=lambda i: tuple(model.shared[i].kappa))
    if order == list(range(len(model.shared))):
        return model
    return replace(model, shared=tuple(model.shared[i] for i in order))


def attach_warnings(result: FitResult, warnings: Sequence[str]) -> FitResult:
    """Returns a copy of the result with extra warning strings appended."""
    if not warnings:
        return result
    return replace(result, warnings=result.warnings + tuple(warnings))
