"""Numerical certificates for expert-function linear independence.

The strong certificate examines, expert by expert, the functions that control
local parameter recovery: the first-derivative columns of each expert mean,
their pairwise products together with a constant (shared branch), and the
second-derivative columns together with input-scaled first derivatives
(routed branch). The weak certificate examines first-derivative columns only.

Two failure modes are scored differently. Exact functional collisions
(two columns proportional on the grid) are detected by a near-machine
collinearity scan and force a zero score; this is what rules out families
such as linear experts, whose product set repeats the constant, or
input-free experts, whose derivative columns repeat each other. Smooth
near-degeneracy is scored by the singular-value ratio of each expert's
normalized first-derivative block, and the certificate reports the worst
ratio over experts. Structural redundancies that do not obstruct recovery
are removed before the scan: second-derivative columns that merely repeat a
first-derivative column of the same expert (families whose mean is linear in
an outer coefficient always produce these), and, in the weak certificate,
coincidences between the same coordinate of different experts (slopes of
distinct linear experts all share the column x).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ExpertFamily, expert_grad, expert_hess

__all__ = [
    "PASS_THRESHOLD",
    "IdentifiabilityScore",
    "evaluation_grid",
    "strong_identifiability_score",
    "weak_identifiability_score",
]

PASS_THRESHOLD = 1e-3
_COLLISION_TOL = 1e-9
_DISTINCT_TOL = 1e-6
_ZERO_COLUMN_TOL = 1e-12
_INPUT_LOW = -3.0
_INPUT_HIGH = 3.0


@dataclass(frozen=True)
class IdentifiabilityScore:
    """Outcome of a certificate: worst singular pair and column count."""

    min_singular_value: float
    max_singular_value: float
    gram_dim: int

    @property
    def relative(self) -> float:
        if self.max_singular_value == 0.0:
            return 0.0
        return self.min_singular_value / self.max_singular_value

    def passes(self, threshold: float = PASS_THRESHOLD) -> bool:
        return self.relative > threshold


def evaluation_grid(input_dim: int, grid: int) -> np.ndarray:
    """Uniform evaluation lattice on [-3, 3]^d with about `grid` points."""
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    if input_dim == 1:
        return np.linspace(_INPUT_LOW, _INPUT_HIGH, grid)[:, None]
    per_axis = max(2, int(round(grid ** (1.0 / input_dim))))
    axes = [np.linspace(_INPUT_LOW, _INPUT_HIGH, per_axis) for _ in range(input_dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _check_params(family: ExpertFamily, params: Sequence[np.ndarray], label: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(params, dtype=float))
    if arr.ndim != 2 or arr.shape[1] != family.param_dim:
        raise ValueError(
            f"{label} parameters must be (k, {family.param_dim}), got {arr.shape}"
        )
    if arr.shape[0] < 1:
        raise ValueError(f"need at least one {label} expert")
    for i in range(arr.shape[0]):
        for j in range(i + 1, arr.shape[0]):
            if np.linalg.norm(arr[i] - arr[j]) <= _DISTINCT_TOL:
                raise ValueError(
                    f"duplicate {label} expert parameters at indices {i} and {j}: "
                    f"pairwise distance must exceed {_DISTINCT_TOL}"
                )
    return arr


def _normalize_columns(cols: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop zero columns and scale the rest to unit norm; returns kept count."""
    norms = np.linalg.norm(cols, axis=0)
    scale = max(1.0, float(norms.max(initial=0.0)))
    keep = norms > _ZERO_COLUMN_TOL * scale
    kept = cols[:, keep]
    return kept / np.linalg.norm(kept, axis=0), int(keep.sum())


def _has_collision(unit_cols: np.ndarray, skip_pairs: set | None = None) -> bool:
    """True when any two unit columns are proportional up to the scan tolerance."""
    k = unit_cols.shape[1]
    if k < 2:
        return False
    gram = np.abs(unit_cols.T @ unit_cols)
    for i in range(k):
        for j in range(i + 1, k):
            if skip_pairs is not None and (i, j) in skip_pairs:
                continue
            if 1.0 - gram[i, j] <= _COLLISION_TOL:
                return True
    return False


def _absorb_repeats(base_unit: np.ndarray, extra: np.ndarray) -> np.ndarray:
    """Drop extra columns proportional to a base column (structural repeats)."""
    unit_extra, _ = _normalize_columns(extra)
    if unit_extra.shape[1] == 0 or base_unit.shape[1] == 0:
        return unit_extra
    overlap = np.abs(base_unit.T @ unit_extra).max(axis=0)
    return unit_extra[:, 1.0 - overlap > _COLLISION_TOL]


def _sigma_ratio(unit_cols: np.ndarray) -> tuple[float, float]:
    s = np.linalg.svd(unit_cols, compute_uv=False)
    return float(s[-1]), float(s[0])


def _second_derivative_columns(
    family: ExpertFamily, theta: np.ndarray, X: np.ndarray
) -> np.ndarray:
    H = expert_hess(family, theta, X)
    p = family.param_dim
    iu, ju = np.triu_indices(p)
    return H[:, iu, ju]


def _strong_column_count(
    shared_family: ExpertFamily, k1: int, routed_family: ExpertFamily, k2: int
) -> int:
    p1, p2, d = shared_family.param_dim, routed_family.param_dim, routed_family.input_dim
    shared = k1 * (p1 + p1 * (p1 + 1) // 2 + 1)
    routed = k2 * (p2 + p2 * (p2 + 1) // 2 + d * p2)
    return shared + routed


def strong_identifiability_score(
    shared_family: ExpertFamily,
    shared_params: Sequence[np.ndarray],
    routed_family: ExpertFamily,
    routed_params: Sequence[np.ndarray],
    *,
    grid: int = 512,
) -> IdentifiabilityScore:
    """Certificate on first derivatives, their products, and second derivatives.

    Grid must provide at least four points per examined function. Raises
    ValueError on duplicate expert parameters.
    """
    if shared_family.input_dim != routed_family.input_dim:
        raise ValueError("shared and routed families must share the input dimension")
    sp = _check_params(shared_family, shared_params, "shared")
    rp = _check_params(routed_family, routed_params, "routed")
    needed = 4 * _strong_column_count(shared_family, sp.shape[0], routed_family, rp.shape[0])
    X = evaluation_grid(shared_family.input_dim, grid)
    if X.shape[0] < needed:
        raise ValueError(
            f"grid of {X.shape[0]} points is too coarse for {needed // 4} functions; "
            f"need at least {needed}"
        )

    worst = (np.inf, 1.0, 1.0)  # (ratio, smin, smax)
    total_cols = 0
    collision_smax = None

    for theta in sp:
        d1 = expert_grad(shared_family, theta, X)
        unit_d1, kept = _normalize_columns(d1)
        total_cols += kept
        if _has_collision(unit_d1):
            collision_smax = _sigma_ratio(unit_d1)[1]
            break
        smin, smax = _sigma_ratio(unit_d1)
        if smin / smax < worst[0]:
            worst = (smin / smax, smin, smax)
        products = d1[:, :, None] * d1[:, None, :]
        iu, ju = np.triu_indices(d1.shape[1])
        prod_set = np.concatenate([products[:, iu, ju], np.ones((X.shape[0], 1))], axis=1)
        unit_prod, kept = _normalize_columns(prod_set)
        total_cols += kept
        if _has_collision(unit_prod):
            collision_smax = _sigma_ratio(unit_prod)[1]
            break

    if collision_smax is None:
        for theta in rp:
            d1 = expert_grad(routed_family, theta, X)
            unit_d1, kept = _normalize_columns(d1)
            total_cols += kept
            if _has_collision(unit_d1):
                collision_smax = _sigma_ratio(unit_d1)[1]
                break
            smin, smax = _sigma_ratio(unit_d1)
            if smin / smax < worst[0]:
                worst = (smin / smax, smin, smax)
            d2 = _absorb_repeats(unit_d1, _second_derivative_columns(routed_family, theta, X))
            scaled = (X[:, :, None] * d1[:, None, :]).reshape(X.shape[0], -1)
            unit_scaled, kept_s = _normalize_columns(scaled)
            assembled = np.concatenate([unit_d1, d2, unit_scaled], axis=1)
            total_cols += d2.shape[1] + kept_s
            if _has_collision(assembled):
                collision_smax = _sigma_ratio(assembled)[1]
                break

    if collision_smax is not None:
        return IdentifiabilityScore(0.0, collision_smax, total_cols)
    return IdentifiabilityScore(worst[1], worst[2], total_cols)


def weak_identifiability_score(
    routed_family: ExpertFamily,
    routed_params: Sequence[np.ndarray],
    *,
    grid: int = 512,
) -> IdentifiabilityScore:
    """Certificate on routed first derivatives only.

    Within one expert every derivative column must be distinct; across experts
    only columns of different coordinates are required to differ, so families
    whose experts share a coordinate-wise column (all linear slopes give x)
    are not penalized for it.
    """
    rp = _check_params(routed_family, routed_params, "routed")
    needed = 4 * rp.shape[0] * routed_family.param_dim
    X = evaluation_grid(routed_family.input_dim, grid)
    if X.shape[0] < needed:
        raise ValueError(
            f"grid of {X.shape[0]} points is too coarse for {needed // 4} functions; "
            f"need at least {needed}"
        )

    worst = (np.inf, 1.0, 1.0)
    blocks = []
    tags = []
    total_cols = 0
    for a, theta in enumerate(rp):
        d1 = expert_grad(routed_family, theta, X)
        norms = np.linalg.norm(d1, axis=0)
        scale = max(1.0, float(norms.max(initial=0.0)))
        keep = np.nonzero(norms > _ZERO_COLUMN_TOL * scale)[0]
        unit = d1[:, keep] / norms[keep]
        total_cols += keep.size
        if _has_collision(unit):
            return IdentifiabilityScore(0.0, _sigma_ratio(unit)[1], total_cols)
        smin, smax = _sigma_ratio(unit)
        if smin / smax < worst[0]:
            worst = (smin / smax, smin, smax)
        blocks.append(unit)
        tags.extend((a, int(c)) for c in keep)

    pooled = np.concatenate(blocks, axis=1)
    skip = {
        (i, j)
        for i in range(len(tags))
        for j in range(i + 1, len(tags))
        if tags[i][0] != tags[j][0] and tags[i][1] == tags[j][1]
    }
    same_atom = {
        (i, j)
        for i in range(len(tags))
        for j in range(i + 1, len(tags))
        if tags[i][0] == tags[j][0]
    }
    if _has_collision(pooled, skip_pairs=skip | same_atom):
        return IdentifiabilityScore(0.0, _sigma_ratio(pooled)[1], total_cols)
    return IdentifiabilityScore(worst[1], worst[2], total_cols)
