"""Max-cut grouping: SDP relaxation, hyperplane rounding, recursive bisection.

The SDP ``max sum_{i!=j} W_ij (1 - X_ij)/2  s.t. diag(X) = 1, X psd`` is solved
with the low-rank mixing method: unit rows ``v_i`` in R^(n+1), ``X = V V^T``,
and coordinate updates ``v_i <- normalize(-sum_j w_ij v_j)``. Iteration stops
when no row moves by more than ``tol`` in a sweep, or when a dual certificate
bounds the objective gap by ``tol`` (relative); the latter rescues nearly
uniform weight matrices whose optimal face is flat and whose rows drift slowly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numba
import numpy as np

GW_RATIO = 0.87854


class SdpNotConverged(RuntimeError):
    def __init__(self, sweeps: int, residual: float):
        super().__init__(f"mixing method did not converge in {sweeps} sweeps "
                         f"(max row change {residual:.3e})")
        self.sweeps = sweeps
        self.residual = residual


@dataclass
class SdpSolution:
    X: np.ndarray
    objective: float
    weights: np.ndarray  # symmetrized weights the solution was computed for
    sweeps: int = 0
    residual: float = 0.0
    gap: float = 0.0  # certified bound on (SDP optimum - objective)
    converged: bool = True


@dataclass
class Bisection:
    users: np.ndarray
    y: np.ndarray
    sdp_objective: float | None  # None in exact mode / pass-through
    cut: float


def validate_edge_graph(W, atol: float = 0.0) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("edge graph must be square")
    off = ~np.eye(W.shape[0], dtype=bool)
    if np.any(W[off] < -atol) or np.any(W[off] > 1 + atol):
        raise ValueError("edge weights must lie in [0, 1]")
    if np.any(np.abs(np.diag(W)) > atol):
        raise ValueError("edge graph diagonal must be zero")
    return W


def edge_graph_to_json(W) -> str:
    return json.dumps(np.asarray(W, dtype=float).tolist())


def edge_graph_from_json(text: str) -> np.ndarray:
    return validate_edge_graph(np.array(json.loads(text), dtype=float))


def _offdiag_sym(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    Wb = 0.5 * (W + W.T)
    np.fill_diagonal(Wb, 0.0)
    return Wb


def cut_value(W, z) -> float:
    W = np.asarray(W, dtype=float)
    z = np.asarray(z)
    diff = z[:, None] != z[None, :]
    return float((W * diff).sum())


def sdp_objective(W, X) -> float:
    Wb = _offdiag_sym(W)
    return float((Wb * (1.0 - X)).sum() / 2.0)


@numba.njit(cache=True)
def _mixing(Wb, V, tol, max_sweeps):
    n, r = V.shape
    g = np.empty(r)
    delta = 0.0
    for sweep in range(max_sweeps):
        delta = 0.0
        for i in range(n):
            for c in range(r):
                g[c] = 0.0
            for j in range(n):
                w = Wb[i, j]
                if j != i and w != 0.0:
                    for c in range(r):
                        g[c] += w * V[j, c]
            norm = 0.0
            for c in range(r):
                norm += g[c] * g[c]
            norm = np.sqrt(norm)
            if norm < 1e-12:
                continue
            for c in range(r):
                new = -g[c] / norm
                d = abs(new - V[i, c])
                if d > delta:
                    delta = d
                V[i, c] = new
        if delta < tol:
            return sweep + 1, delta
    return max_sweeps, delta


def duality_gap(Wb, V) -> float:
    """Upper bound on how far ``V`` is from the SDP optimum, in objective units.

    With ``y_i = v_i . (Wb V)_i`` the primal value of ``<Wb, VV^T>`` equals
    ``sum(y)``; shifting ``y`` by the smallest eigenvalue of ``Wb - diag(y)``
    gives a feasible dual point, so ``-n * lambda_min / 2`` bounds the gap.
    """
    y = np.einsum("ij,ij->i", V, Wb @ V)
    lam = np.linalg.eigvalsh(Wb - np.diag(y))[0]
    return max(0.0, -lam) * Wb.shape[0] / 2.0


def solve_maxcut_sdp(W_sub, tol: float = 1e-6, rng=None, max_sweeps: int = 5000,
                     check_every: int = 100, strict: bool = True) -> SdpSolution:
    """Max-cut SDP by the mixing method.

    Hitting ``max_sweeps`` raises :class:`SdpNotConverged` unless ``strict`` is
    off, in which case the last iterate is returned with ``converged=False``
    and its certified ``gap``.
    """
    W_sub = np.asarray(W_sub, dtype=float)
    n = W_sub.shape[0]
    if W_sub.shape != (n, n) or n < 1:
        raise ValueError("W_sub must be a non-empty square matrix")
    off = ~np.eye(n, dtype=bool)
    if np.any(W_sub[off] < 0):
        raise ValueError("weights must be non-negative")
    Wb = _offdiag_sym(W_sub)
    if n == 1:
        return SdpSolution(X=np.ones((1, 1)), objective=0.0, weights=Wb)
    rng = np.random.default_rng(rng)
    V = rng.standard_normal((n, n + 1))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    sweeps, gap, converged = 0, np.inf, True
    while True:
        done, residual = _mixing(Wb, V, tol, min(check_every, max_sweeps - sweeps))
        sweeps += done
        if residual < tol:
            gap = duality_gap(Wb, V)
            break
        gap = duality_gap(Wb, V)
        X = V @ V.T
        if gap <= tol * max(1.0, abs(sdp_objective(Wb, X))):
            break
        if sweeps >= max_sweeps:
            if strict:
                raise SdpNotConverged(sweeps, residual)
            converged = False
            break
    X = V @ V.T
    np.fill_diagonal(X, 1.0)
    return SdpSolution(X=X, objective=sdp_objective(Wb, X), weights=Wb, sweeps=sweeps,
                       residual=residual, gap=gap, converged=converged)


def _cut_pm(Wb, y) -> float:
    return float((Wb * (1.0 - np.outer(y, y))).sum() / 2.0)


def gw_round(sol: SdpSolution, rng=None, trials: int = 20) -> np.ndarray:
    """Random-hyperplane rounding; best of ``trials`` draws, sign(0) = +1."""
    rng = np.random.default_rng(rng)
    vals, vecs = np.linalg.eigh(sol.X)
    F = vecs * np.sqrt(np.clip(vals, 0.0, None))
    n = sol.X.shape[0]
    best, best_val = None, -np.inf
    for _ in range(max(1, trials)):
        proj = F @ rng.standard_normal(n)
        y = np.where(proj >= 0, 1.0, -1.0)
        val = _cut_pm(sol.weights, y)
        if val > best_val:
            best, best_val = y, val
    return best


def brute_force_maxcut(W, Z: int, max_users: int = 12, chunk: int = 1 << 15):
    """Exhaustive max cut into ``Z`` labelled groups; returns (z in 1..Z, value).

    User 0 is pinned to group 1 to drop part of the relabelling symmetry. Ties
    keep the first assignment in enumeration order, which starts from
    "everyone in group 1".
    """
    W = np.array(W, dtype=float)
    K = W.shape[0]
    if K > max_users:
        raise ValueError(f"brute force limited to {max_users} users, got {K}")
    np.fill_diagonal(W, 0.0)
    if K <= 1 or Z == 1:
        return np.ones(K, dtype=np.int64), 0.0
    total = W.sum()
    n_free = K - 1
    count = Z ** n_free
    powers = Z ** np.arange(n_free - 1, -1, -1)
    best_z, best_val = None, -np.inf
    for start in range(0, count, chunk):
        idx = np.arange(start, min(start + chunk, count))
        digits = (idx[:, None] // powers[None, :]) % Z
        zz = np.concatenate([np.zeros((len(idx), 1), dtype=digits.dtype), digits], axis=1)
        same = zz[:, :, None] == zz[:, None, :]
        vals = total - np.einsum("nij,ij->n", same, W)
        i = int(np.argmax(vals))
        if vals[i] > best_val + 1e-12:
            best_val = float(vals[i])
            best_z = zz[i] + 1
    return best_z.astype(np.int64), best_val


def _bisect(W_sub, rng, exact, trials, tol, max_rel_gap):
    if exact:
        zz, _ = brute_force_maxcut(W_sub, 2)
        return np.where(zz == 1, -1.0, 1.0), None
    sol = solve_maxcut_sdp(W_sub, tol=tol, rng=rng, strict=False)
    if not sol.converged and sol.gap > max_rel_gap * max(1.0, abs(sol.objective)):
        raise SdpNotConverged(sol.sweeps, sol.residual)
    return gw_round(sol, rng, trials), sol.objective


def do_graph_cut(Z: int, W, rng=None, users=None, exact: bool = False, trials: int = 20,
                 tol: float = 1e-6, trace: list | None = None,
                 max_rel_gap: float = 1e-3) -> np.ndarray:
    """Recursive bisection of the users into Z groups; returns labels in 1..Z.

    ``users`` restricts the cut to a subset (others keep label 0). Subsets of
    size <= 1 skip the solver and descend on the left branch. A bisection whose
    SDP stalls at the sweep cap is still used if its certified gap is within
    ``max_rel_gap`` of the objective.
    """
    if Z < 1 or Z & (Z - 1):
        raise ValueError(f"Z must be a power of 2, got {Z}")
    W = np.asarray(W, dtype=float)
    K = W.shape[0]
    rng = np.random.default_rng(rng)
    depth = Z.bit_length() - 1
    users = np.arange(K) if users is None else np.asarray(users, dtype=np.int64)
    z = np.zeros(K, dtype=np.int64)

    def recurse(sub, beta, c):
        if beta == depth:
            z[sub] = c
            return
        if len(sub) <= 1:
            recurse(sub, beta + 1, 2 * c - 1)
            recurse(sub[:0], beta + 1, 2 * c)
            return
        W_sub = W[np.ix_(sub, sub)]
        y, obj = _bisect(W_sub, rng, exact, trials, tol, max_rel_gap)
        if trace is not None:
            trace.append(Bisection(users=sub, y=y, sdp_objective=obj,
                                   cut=_cut_pm(_offdiag_sym(W_sub), y)))
        recurse(sub[y < 0], beta + 1, 2 * c - 1)
        recurse(sub[y > 0], beta + 1, 2 * c)

    recurse(users, 0, 1)
    return z
