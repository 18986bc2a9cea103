"""Structured polynomial systems behind the slow-rate exponent tables.

Two systems are supported. System R1 has unknown blocks (s1, s2, s3) and one
equation per total order l:

    sum_i sum_{n1+2n2=l} s3_i^2 s1_i^{n1} s2_i^{n2} / (n1! n2!) = 0.

System R2 (implemented for input dimension 1) has blocks (t1..t5) and one
equation per pair (l1, l2) with 1 <= l1+l2 <= r:

    sum_i sum_alpha t5_i^2 t1^{a1} t2^{a2} t3^{a3} t4^{a4} / (a1!a2!a3!a4!),

summing over a1+a2 = l1 and a3+2a4 = l2-a2. A solution is non-trivial when
every squared-mass variable (s3 or t5) is nonzero and at least one pivot
variable (s1 for R1, t4 for R2) is nonzero. The search enforces this by
parameterizing the mass as 0.1 + u^2 and pinning one pivot coordinate to +-1,
then exploits the systems' scaling structure to normalize the largest pivot
magnitude to 1 in reported solutions. Absence of a solution is always
reported as "not found after N restarts", never as a proof.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .seeds import derive_seed

__all__ = ["SystemKind", "SystemInstance", "SearchResult", "residual", "search_nontrivial"]

_FOUND_TOL = 1e-8
_MASS_FLOOR = 0.1
_GN_ITERS = 200


class SystemKind(enum.Enum):
    R1 = "r1"
    R2 = "r2"


@dataclass(frozen=True)
class SystemInstance:
    """One system: kind, number of unknown blocks m, and max total order r."""

    kind: SystemKind
    m: int
    r: int
    d: int = 1

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.kind is SystemKind.R2 and self.d != 1:
            raise ValueError("system r2 is implemented for d=1 only")

    @property
    def vars_per_block(self) -> int:
        return 3 if self.kind is SystemKind.R1 else 5

    @property
    def num_vars(self) -> int:
        return self.vars_per_block * self.m

    @property
    def equations(self) -> list[tuple[int, ...]]:
        if self.kind is SystemKind.R1:
            return [(l,) for l in range(1, self.r + 1)]
        return [
            (l1, l2)
            for total in range(1, self.r + 1)
            for l1 in range(total, -1, -1)
            for l2 in (total - l1,)
        ]


def _g1_table(s1: np.ndarray, s2: np.ndarray, lmax: int) -> np.ndarray:
    """g[l, i] = sum_{n1+2n2=l} s1_i^n1 s2_i^n2 / (n1! n2!), l = 0..lmax."""
    m = s1.shape[0]
    g = np.zeros((lmax + 1, m))
    for l in range(lmax + 1):
        acc = np.zeros(m)
        for n2 in range(l // 2 + 1):
            n1 = l - 2 * n2
            acc += s1**n1 * s2**n2 / (math.factorial(n1) * math.factorial(n2))
        g[l] = acc
    return g


def _g2_table(t1, t2, t3, t4, l1max: int, l2max: int) -> np.ndarray:
    """g[l1, l2, i] = inner sum of system R2 without the t5^2 factor (d=1)."""
    m = t1.shape[0]
    g = np.zeros((l1max + 1, l2max + 1, m))
    for l1 in range(l1max + 1):
        for l2 in range(l2max + 1):
            acc = np.zeros(m)
            for a2 in range(min(l1, l2) + 1):
                a1 = l1 - a2
                rem = l2 - a2
                for a4 in range(rem // 2 + 1):
                    a3 = rem - 2 * a4
                    coef = (
                        math.factorial(a1)
                        * math.factorial(a2)
                        * math.factorial(a3)
                        * math.factorial(a4)
                    )
                    acc += t1**a1 * t2**a2 * t3**a3 * t4**a4 / coef
            g[l1, l2] = acc
    return g


def _split_vars(sys: SystemInstance, vars_: np.ndarray) -> tuple[np.ndarray, ...]:
    v = np.asarray(vars_, dtype=float)
    if v.shape != (sys.num_vars,):
        raise ValueError(f"vars must have length {sys.num_vars}, got shape {v.shape}")
    return tuple(v[k * sys.m : (k + 1) * sys.m] for k in range(sys.vars_per_block))


def residual(sys: SystemInstance, vars_: np.ndarray) -> np.ndarray:
    """Residual vector, one entry per equation, with exact factorial weights."""
    if sys.kind is SystemKind.R1:
        s1, s2, s3 = _split_vars(sys, vars_)
        g = _g1_table(s1, s2, sys.r)
        return np.array([(s3**2 * g[l]).sum() for (l,) in sys.equations])
    t1, t2, t3, t4, t5 = _split_vars(sys, vars_)
    g = _g2_table(t1, t2, t3, t4, sys.r, sys.r)
    return np.array([(t5**2 * g[l1, l2]).sum() for (l1, l2) in sys.equations])


def _residual_and_jacobian(sys: SystemInstance, free: np.ndarray, pin_idx: int, pin_val: float):
    """Residual and Jacobian in the search coordinates.

    Search coordinates: pivot block with one pinned entry removed, the other
    plain blocks, and u with mass = 0.1 + u^2. Derivatives use the shift
    structure of the coefficient tables: differentiating in s1 lowers l by 1,
    in s2 by 2; for R2, t1 lowers (l1, l2) by (1, 0), t2 by (1, 1), t3 by
    (0, 1), t4 by (0, 2).
    """
    m = sys.m
    if sys.kind is SystemKind.R1:
        s1 = np.empty(m)
        mask = np.arange(m) != pin_idx
        s1[pin_idx] = pin_val
        s1[mask] = free[: m - 1]
        s2 = free[m - 1 : 2 * m - 1]
        u = free[2 * m - 1 : 3 * m - 1]
        s3 = _MASS_FLOOR + u**2
        g = _g1_table(s1, s2, sys.r)
        res = np.array([(s3**2 * g[l]).sum() for (l,) in sys.equations])
        J = np.zeros((len(res), free.shape[0]))
        for row, (l,) in enumerate(sys.equations):
            d_s1 = s3**2 * (g[l - 1] if l >= 1 else 0.0)
            d_s2 = s3**2 * (g[l - 2] if l >= 2 else 0.0)
            d_u = 2.0 * s3 * g[l] * 2.0 * u
            J[row, : m - 1] = d_s1[mask]
            J[row, m - 1 : 2 * m - 1] = d_s2
            J[row, 2 * m - 1 :] = d_u
        return res, J, np.concatenate([s1, s2, s3])

    t4 = np.empty(m)
    mask = np.arange(m) != pin_idx
    t4[pin_idx] = pin_val
    t1 = free[: m]
    t2 = free[m : 2 * m]
    t3 = free[2 * m : 3 * m]
    t4[mask] = free[3 * m : 4 * m - 1]
    u = free[4 * m - 1 : 5 * m - 1]
    t5 = _MASS_FLOOR + u**2
    g = _g2_table(t1, t2, t3, t4, sys.r, sys.r)

    def gat(l1, l2):
        if l1 < 0 or l2 < 0:
            return np.zeros(m)
        return g[l1, l2]

    res = np.array([(t5**2 * g[l1, l2]).sum() for (l1, l2) in sys.equations])
    J = np.zeros((len(res), free.shape[0]))
    for row, (l1, l2) in enumerate(sys.equations):
        J[row, :m] = t5**2 * gat(l1 - 1, l2)
        J[row, m : 2 * m] = t5**2 * gat(l1 - 1, l2 - 1)
        J[row, 2 * m : 3 * m] = t5**2 * gat(l1, l2 - 1)
        J[row, 3 * m : 4 * m - 1] = (t5**2 * gat(l1, l2 - 2))[mask]
        J[row, 4 * m - 1 :] = 2.0 * t5 * g[l1, l2] * 2.0 * u
    return res, J, np.concatenate([t1, t2, t3, t4, t5])


def _rescale_solution(sys: SystemInstance, blocks: np.ndarray) -> np.ndarray:
    """Normalize the pivot scale to 1 using the system's scaling structure."""
    m = sys.m
    if sys.kind is SystemKind.R1:
        s1, s2, s3 = blocks[:m], blocks[m : 2 * m], blocks[2 * m :]
        lam = np.abs(s1).max()
        if lam > 0:
            s1, s2 = s1 / lam, s2 / lam**2
        return np.concatenate([s1, s2, s3])
    t1, t2, t3, t4, t5 = (blocks[k * m : (k + 1) * m] for k in range(5))
    mu2 = np.abs(t4).max()
    if mu2 > 0:
        mu = math.sqrt(mu2)
        t2, t3, t4 = t2 / mu, t3 / mu, t4 / mu2
    lam = np.abs(t1).max()
    if lam > 1:  # only deflate; inflating would amplify residual roundoff
        t1, t2 = t1 / lam, t2 / lam
    return np.concatenate([t1, t2, t3, t4, t5])


@dataclass(frozen=True)
class SearchResult:
    """Best candidate of a restart sweep; vars is None when nothing passed."""

    found: bool
    residual_norm: float
    vars: np.ndarray | None
    restarts: int


def search_nontrivial(sys: SystemInstance, restarts: int, seed: int) -> SearchResult:
    """Randomized damped Gauss-Newton search for a non-trivial solution.

    Deterministic given the seed. Returns the best candidate when its
    residual norm is below 1e-8, otherwise found=False with the best norm
    reached. Pins one pivot coordinate to +-1 per restart (cycling), keeps
    masses at least 0.1 by construction, and rescales reported solutions so
    the largest pivot magnitude is 1.
    """
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    m = sys.m
    n_free = sys.num_vars - 1
    best_norm = math.inf
    best_blocks = None
    for rep in range(restarts):
        rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, rep)))
        pin_idx = rep % m
        pin_val = 1.0 if (rep // m) % 2 == 0 else -1.0
        free = rng.uniform(-2.0, 2.0, size=n_free)
        lam = 1e-3
        res, J, blocks = _residual_and_jacobian(sys, free, pin_idx, pin_val)
        norm = float(np.linalg.norm(res))
        for _ in range(_GN_ITERS):
            if norm < _FOUND_TOL * 0.1:
                break
            A = J.T @ J + lam * np.eye(n_free)
            try:
                step = np.linalg.solve(A, -J.T @ res)
            except np.linalg.LinAlgError:
                break
            new_free = free + step
            new_res, new_J, new_blocks = _residual_and_jacobian(
                sys, new_free, pin_idx, pin_val
            )
            new_norm = float(np.linalg.norm(new_res))
            if new_norm < norm:
                free, res, J, blocks, norm = new_free, new_res, new_J, new_blocks, new_norm
                lam = max(lam * 0.3, 1e-12)
            else:
                lam = min(lam * 10.0, 1e8)
                if lam >= 1e8:
                    break
        if norm < best_norm:
            best_norm = norm
            best_blocks = blocks
    if best_norm < _FOUND_TOL and best_blocks is not None:
        scaled = _rescale_solution(sys, best_blocks)
        final_norm = float(np.linalg.norm(residual(sys, scaled)))
        if final_norm < _FOUND_TOL:
            return SearchResult(True, final_norm, scaled, restarts)
    return SearchResult(False, best_norm, None, restarts)
