"""Gaussian mixture-of-experts model with a shared branch and a routed branch.

The conditional density of an output y given an input x in R^d is

    f(y | x) = 1/2 * sum_i omega_i  * N(y; h1(x, kappa_i), tau_i)
             + 1/2 * sum_j gate_j(x) * N(y; h2(x, eta_j),   nu_j)

with the two branch probabilities fixed at 1/2 (never estimated). The shared
branch mixes k1 experts with weights omega on the simplex; the routed branch
mixes k2 experts through an input-dependent gate computed from affine scores
beta1_j . x + beta0_j under one of three gating laws (dense softmax,
normalized sigmoid, or softmax over the top-K scores). tau_i and nu_j are
Gaussian variances.

Expert mean families and their parameter layouts:

    linear      params = (slope[0:d], bias)          h(x) = slope.x + bias
    gelu_bias   params = (outer, inner[0:d], bias)   h(x) = outer * GELU(inner.x + bias)
    gelu        params = (outer, inner[0:d])         h(x) = outer * GELU(inner.x)

GELU is the exact Gaussian-CDF form z * Phi(z).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp, ndtr

__all__ = [
    "ExpertKind",
    "ExpertFamily",
    "GatingKind",
    "Gating",
    "SharedAtom",
    "RoutedAtom",
    "MixingMeasurePair",
    "Dataset",
    "gelu",
    "gelu_prime",
    "gelu_second",
    "expert_eval",
    "expert_grad",
    "expert_hess",
    "expert_eval_stack",
    "gate_weights",
    "gate_scores",
    "conditional_density",
    "log_likelihood",
    "prior_weights",
    "component_means",
    "component_variances",
    "log_component_densities",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

_LOG_2PI = math.log(2.0 * math.pi)


def gelu(z: np.ndarray) -> np.ndarray:
    """GELU in its exact form z * Phi(z), Phi the standard normal CDF."""
    z = np.asarray(z, dtype=float)
    return z * ndtr(z)


def gelu_prime(z: np.ndarray) -> np.ndarray:
    """First derivative Phi(z) + z * phi(z)."""
    z = np.asarray(z, dtype=float)
    return ndtr(z) + z * _norm_pdf(z)


def gelu_second(z: np.ndarray) -> np.ndarray:
    """Second derivative (2 - z^2) * phi(z)."""
    z = np.asarray(z, dtype=float)
    return (2.0 - z * z) * _norm_pdf(z)


def _norm_pdf(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


class ExpertKind(enum.Enum):
    LINEAR = "linear"
    GELU_BIAS = "gelu_bias"
    GELU = "gelu"


@dataclass(frozen=True, eq=False)
class ExpertFamily:
    """An expert mean family together with the input dimension it acts on."""

    kind: ExpertKind
    input_dim: int

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")

    @property
    def param_dim(self) -> int:
        d = self.input_dim
        if self.kind is ExpertKind.LINEAR:
            return d + 1
        if self.kind is ExpertKind.GELU_BIAS:
            return d + 2
        return d + 1  # gelu: (outer, inner[0:d])

    def check_params(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.param_dim,):
            raise ValueError(
                f"{self.kind.value} expert over R^{self.input_dim} takes "
                f"{self.param_dim} parameters, got shape {params.shape}"
            )
        return params


def _as_input_matrix(x: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    """Coerce x to an (n, d) matrix; report whether the input was a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape != (d,):
            raise ValueError(f"input point has dimension {x.shape[0]}, expected {d}")
        return x.reshape(1, d), True
    if x.ndim == 2 and x.shape[1] == d:
        return x, False
    raise ValueError(f"input must be (d,) or (n, d) with d={d}, got shape {x.shape}")


def expert_eval(family: ExpertFamily, params: np.ndarray, x: np.ndarray):
    """Evaluate the expert mean h(x, params); x may be one point or a batch."""
    params = family.check_params(params)
    X, single = _as_input_matrix(x, family.input_dim)
    out = expert_eval_stack(family, params.reshape(1, -1), X)[:, 0]
    return float(out[0]) if single else out


def expert_eval_stack(family: ExpertFamily, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Evaluate k experts of one family at once; params is (k, p), X is (n, d).

    Returns the (n, k) matrix of mean values. This is the hot path shared by
    density evaluation and the estimator.
    """
    params = np.asarray(params, dtype=float)
    d = family.input_dim
    if params.ndim != 2 or params.shape[1] != family.param_dim:
        raise ValueError(f"params must be (k, {family.param_dim}), got {params.shape}")
    if family.kind is ExpertKind.LINEAR:
        slope = params[:, :d]
        bias = params[:, d]
        return X @ slope.T + bias
    if family.kind is ExpertKind.GELU_BIAS:
        outer = params[:, 0]
        inner = params[:, 1 : 1 + d]
        bias = params[:, 1 + d]
        return outer * gelu(X @ inner.T + bias)
    outer = params[:, 0]
    inner = params[:, 1 : 1 + d]
    return outer * gelu(X @ inner.T)


def expert_grad(family: ExpertFamily, params: np.ndarray, x: np.ndarray):
    """Gradient of the expert mean in its parameters, ordered as the layout.

    Returns (p,) for a single input point or (n, p) for a batch.
    """
    params = family.check_params(params)
    X, single = _as_input_matrix(x, family.input_dim)
    d = family.input_dim
    n = X.shape[0]
    g = np.empty((n, family.param_dim))
    if family.kind is ExpertKind.LINEAR:
        g[:, :d] = X
        g[:, d] = 1.0
    elif family.kind is ExpertKind.GELU_BIAS:
        outer, inner, bias = params[0], params[1 : 1 + d], params[1 + d]
        z = X @ inner + bias
        gp = gelu_prime(z)
        g[:, 0] = gelu(z)
        g[:, 1 : 1 + d] = (outer * gp)[:, None] * X
        g[:, 1 + d] = outer * gp
    else:
        outer, inner = params[0], params[1 : 1 + d]
        z = X @ inner
        gp = gelu_prime(z)
        g[:, 0] = gelu(z)
        g[:, 1 : 1 + d] = (outer * gp)[:, None] * X
    return g[0] if single else g


def expert_hess(family: ExpertFamily, params: np.ndarray, x: np.ndarray):
    """Hessian of the expert mean in its parameters: (p, p) or (n, p, p)."""
    params = family.check_params(params)
    X, single = _as_input_matrix(x, family.input_dim)
    d = family.input_dim
    p = family.param_dim
    n = X.shape[0]
    H = np.zeros((n, p, p))
    if family.kind is ExpertKind.LINEAR:
        pass  # linear in parameters
    elif family.kind is ExpertKind.GELU_BIAS:
        outer, inner, bias = params[0], params[1 : 1 + d], params[1 + d]
        z = X @ inner + bias
        gp = gelu_prime(z)
        gpp = gelu_second(z)
        H[:, 0, 1 : 1 + d] = gp[:, None] * X
        H[:, 1 : 1 + d, 0] = gp[:, None] * X
        H[:, 0, 1 + d] = gp
        H[:, 1 + d, 0] = gp
        H[:, 1 : 1 + d, 1 : 1 + d] = (outer * gpp)[:, None, None] * (
            X[:, :, None] * X[:, None, :]
        )
        H[:, 1 : 1 + d, 1 + d] = (outer * gpp)[:, None] * X
        H[:, 1 + d, 1 : 1 + d] = (outer * gpp)[:, None] * X
        H[:, 1 + d, 1 + d] = outer * gpp
    else:
        outer, inner = params[0], params[1 : 1 + d]
        z = X @ inner
        gp = gelu_prime(z)
        gpp = gelu_second(z)
        H[:, 0, 1 : 1 + d] = gp[:, None] * X
        H[:, 1 : 1 + d, 0] = gp[:, None] * X
        H[:, 1 : 1 + d, 1 : 1 + d] = (outer * gpp)[:, None, None] * (
            X[:, :, None] * X[:, None, :]
        )
    return H[0] if single else H


class GatingKind(enum.Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    TOPK = "topk"


@dataclass(frozen=True)
class Gating:
    """Gating law for the routed branch; top_k is set only for the topk kind."""

    kind: GatingKind
    top_k: int | None = None

    def __post_init__(self) -> None:
        if self.kind is GatingKind.TOPK:
            if self.top_k is None or self.top_k < 1:
                raise ValueError("topk gating requires top_k >= 1")
        elif self.top_k is not None:
            raise ValueError(f"{self.kind.value} gating takes no top_k")


@dataclass(frozen=True, eq=False)
class SharedAtom:
    """One shared-branch expert: weight omega, mean parameters kappa, variance tau."""

    omega: float
    kappa: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "omega", float(self.omega))
        object.__setattr__(self, "tau", float(self.tau))
        kappa = np.array(self.kappa, dtype=float)
        kappa.setflags(write=False)
        object.__setattr__(self, "kappa", kappa)
        if not self.omega >= 0.0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True, eq=False)
class RoutedAtom:
    """One routed-branch expert: gate offset beta0, gate slope beta1, mean
    parameters eta, variance nu."""

    beta0: float
    beta1: np.ndarray
    eta: np.ndarray
    nu: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "nu", float(self.nu))
        for name in ("beta1", "eta"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.nu > 0.0:
            raise ValueError(f"nu must be > 0, got {self.nu}")


@dataclass(frozen=True, eq=False)
class MixingMeasurePair:
    """The full parameterization: shared atoms, routed atoms, gating, families."""

    shared: tuple[SharedAtom, ...]
    routed: tuple[RoutedAtom, ...]
    gating: Gating
    shared_family: ExpertFamily
    routed_family: ExpertFamily

    def __post_init__(self) -> None:
        object.__setattr__(self, "shared", tuple(self.shared))
        object.__setattr__(self, "routed", tuple(self.routed))
        self.validate()

    @property
    def input_dim(self) -> int:
        return self.shared_family.input_dim

    @property
    def k1(self) -> int:
        return len(self.shared)

    @property
    def k2(self) -> int:
        return len(self.routed)

    def validate(self) -> None:
        if not self.shared or not self.routed:
            raise ValueError("need at least one shared and one routed atom")
        d = self.shared_family.input_dim
        if self.routed_family.input_dim != d:
            raise ValueError("shared and routed families disagree on input_dim")
        for atom in self.shared:
            self.shared_family.check_params(atom.kappa)
        for atom in self.routed:
            self.routed_family.check_params(atom.eta)
            if atom.beta1.shape != (d,):
                raise ValueError(
                    f"beta1 must have shape ({d},), got {atom.beta1.shape}"
                )
        total = sum(a.omega for a in self.shared)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"shared weights must sum to 1, got {total!r}")
        if self.gating.kind is GatingKind.TOPK and self.gating.top_k > len(self.routed):
            raise ValueError(
                f"top_k={self.gating.top_k} exceeds the {len(self.routed)} routed atoms"
            )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Paired regression data: x is (n, d), y is (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float)
        y = np.array(self.y, dtype=float)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"bad dataset shapes x{x.shape}, y{y.shape}")
        if x.shape[0] == 0:
            raise ValueError("dataset is empty")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def gate_scores(gating: Gating, beta1: np.ndarray, beta0: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Gate weights from raw score parameters; beta1 is (k, d), beta0 is (k,).

    Returns the (n, k) row-stochastic weight matrix. Rows sum to one for every
    gating law; topk rows are exactly zero off the selected support, ties in
    the ranking scores resolved toward the lowest atom index.
    """
    logits = X @ beta1.T + beta0
    if gating.kind is GatingKind.SOFTMAX:
        return _softmax_rows(logits)
    if gating.kind is GatingKind.SIGMOID:
        s = expit(logits)
        return s / s.sum(axis=1, keepdims=True)
    k = beta1.shape[0]
    kk = min(gating.top_k, k)
    rank_scores = X @ beta1.T
    # stable argsort on the negated scores keeps the lowest index first on ties
    order = np.argsort(-rank_scores, axis=1, kind="stable")
    keep = np.zeros_like(logits, dtype=bool)
    np.put_along_axis(keep, order[:, :kk], True, axis=1)
    masked = np.where(keep, logits, -np.inf)
    return _softmax_rows(masked)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    peak = np.max(logits, axis=1, keepdims=True)
    expd = np.exp(logits - peak)
    return expd / expd.sum(axis=1, keepdims=True)


def gate_weights(gating: Gating, routed: Sequence[RoutedAtom], x: np.ndarray):
    """Gate weights at x for the routed atoms: (k,) for a point, (n, k) batched."""
    routed = tuple(routed)
    if not routed:
        raise ValueError("need at least one routed atom")
    d = routed[0].beta1.shape[0]
    X, single = _as_input_matrix(x, d)
    beta1 = np.stack([a.beta1 for a in routed])
    beta0 = np.array([a.beta0 for a in routed])
    W = gate_scores(gating, beta1, beta0, X)
    return W[0] if single else W


def prior_weights(model: MixingMeasurePair, X: np.ndarray) -> np.ndarray:
    """Per-component prior weights at each input: (n, k1 + k2).

    The first k1 columns are omega_i / 2, the rest are gate_j(x) / 2; every
    row sums to one.
    """
    n = X.shape[0]
    k1 = model.k1
    out = np.empty((n, k1 + model.k2))
    omega = np.array([a.omega for a in model.shared])
    out[:, :k1] = 0.5 * omega
    out[:, k1:] = 0.5 * gate_weights(model.gating, model.routed, X)
    return out


def component_means(model: MixingMeasurePair, X: np.ndarray) -> np.ndarray:
    """Expert mean of every component at each input: (n, k1 + k2)."""
    shared_params = np.stack([a.kappa for a in model.shared])
    routed_params = np.stack([a.eta for a in model.routed])
    return np.hstack(
        [
            expert_eval_stack(model.shared_family, shared_params, X),
            expert_eval_stack(model.routed_family, routed_params, X),
        ]
    )


def component_variances(model: MixingMeasurePair) -> np.ndarray:
    return np.array([a.tau for a in model.shared] + [a.nu for a in model.routed])


def log_component_densities(model: MixingMeasurePair, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """log(prior_c(x) * N(y; mean_c(x), var_c)) per component, -inf where the
    prior weight is exactly zero (masked topk gates)."""
    means = component_means(model, X)
    var = component_variances(model)
    log_norm = -0.5 * (_LOG_2PI + np.log(var) + (y[:, None] - means) ** 2 / var)
    priors = prior_weights(model, X)
    with np.errstate(divide="ignore"):
        log_priors = np.where(priors > 0.0, np.log(np.where(priors > 0.0, priors, 1.0)), -np.inf)
    return log_priors + log_norm


def conditional_density(model: MixingMeasurePair, x: np.ndarray, y) :
    """Density f(y | x); scalar for a single (x, y), (n,) for batches."""
    X, single = _as_input_matrix(x, model.input_dim)
    Y = np.atleast_1d(np.asarray(y, dtype=float))
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"got {X.shape[0]} inputs but {Y.shape[0]} outputs")
    dens = np.exp(logsumexp(log_component_densities(model, X, Y), axis=1))
    return float(dens[0]) if single else dens


def log_likelihood(model: MixingMeasurePair, data: Dataset) -> float:
    """Mean log density of the dataset under the model."""
    logs = logsumexp(log_component_densities(model, data.x, data.y), axis=1)
    return float(np.mean(logs))


_KIND_TO_NAME = {k: k.value for k in ExpertKind}
_NAME_TO_KIND = {k.value: k for k in ExpertKind}


def model_to_dict(model: MixingMeasurePair) -> dict:
    """Serialize to the interchange schema (plain JSON types only)."""
    gating: dict = {"kind": model.gating.kind.value}
    if model.gating.top_k is not None:
        gating["K"] = model.gating.top_k
    return {
        "input_dim": model.input_dim,
        "gating": gating,
        "shared_family": model.shared_family.kind.value,
        "routed_family": model.routed_family.kind.value,
        "shared": [
            {"omega": a.omega, "kappa": a.kappa.tolist(), "tau": a.tau}
            for a in model.shared
        ],
        "routed": [
            {
                "beta0": a.beta0,
                "beta1": a.beta1.tolist(),
                "eta": a.eta.tolist(),
                "nu": a.nu,
            }
            for a in model.routed
        ],
    }


def model_from_dict(payload: dict) -> MixingMeasurePair:
    try:
        d = int(payload["input_dim"])
        gating_spec = payload["gating"]
        kind = GatingKind(gating_spec["kind"])
        gating = Gating(kind, gating_spec.get("K"))
        shared_family = ExpertFamily(_NAME_TO_KIND[payload["shared_family"]], d)
        routed_family = ExpertFamily(_NAME_TO_KIND[payload["routed_family"]], d)
        shared = tuple(
            SharedAtom(a["omega"], np.asarray(a["kappa"], dtype=float), a["tau"])
            for a in payload["shared"]
        )
        routed = tuple(
            RoutedAtom(
                a["beta0"],
                np.asarray(a["beta1"], dtype=float),
                np.asarray(a["eta"], dtype=float),
                a["nu"],
            )
            for a in payload["routed"]
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model payload: {exc}") from exc
    return MixingMeasurePair(shared, routed, gating, shared_family, routed_family)


def save_model(model: MixingMeasurePair, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")


def load_model(path: str) -> MixingMeasurePair:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
