"""Inference network, graph-constructing actor and graph-evaluating critic.

All networks live in one :class:`ParamStore` under the prefixes ``omega``,
``mu_dot``, ``efe``, ``nfe``, ``gcn_l{l}_e{e}``, ``hnfe_l{l}`` and ``rof``
(layer and channel counters are 1-based). ``S`` is always the A x K matrix of
normalized states, column k belonging to user k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnkernel import (
    LayerSpec,
    ParamStore,
    gcn_backward,
    gcn_forward,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

BCE_CLAMP = 1e-12
MU_SPEC = LayerSpec((4, 40, 40, 1), "sigmoid")


@dataclass(frozen=True)
class CriticArch:
    M: int = 5  # node feature width
    E: int = 5  # edge feature channels
    zeta: int = 3  # graph convolution layers

    @property
    def efe(self) -> LayerSpec:
        return LayerSpec((3, 30, 30, self.E), "relu")

    @property
    def nfe(self) -> LayerSpec:
        return LayerSpec((1, 10, 10, self.M), "relu")

    @property
    def hnfe(self) -> LayerSpec:
        em = self.E * self.M
        return LayerSpec((em, 10 * em, 10 * em, self.M), "relu")

    @property
    def rof(self) -> LayerSpec:
        m1 = self.M + 1
        return LayerSpec((m1, 10 * m1, 10 * m1, 1), None)


def omega_spec(num_aps: int) -> LayerSpec:
    return LayerSpec((2 * num_aps, 20 * num_aps, 20 * num_aps, 1), "sigmoid")


def init_omega(store: ParamStore, num_aps: int, rng) -> None:
    init_mlp(store, "omega", omega_spec(num_aps), rng)


def init_actor(store: ParamStore, rng) -> None:
    init_mlp(store, "mu_dot", MU_SPEC, rng)


def init_critic(store: ParamStore, rng, arch: CriticArch = CriticArch()) -> None:
    rng = np.random.default_rng(rng)
    init_mlp(store, "efe", arch.efe, rng)
    init_mlp(store, "nfe", arch.nfe, rng)
    bound = np.sqrt(6.0 / arch.M)
    for l in range(1, arch.zeta + 1):
        for e in range(1, arch.E + 1):
            store.add(f"gcn_l{l}_e{e}", rng.uniform(-bound, bound, size=(arch.M, arch.M)))
        init_mlp(store, f"hnfe_l{l}", arch.hnfe, rng)
    init_mlp(store, "rof", arch.rof, rng)


def init_all(num_aps: int, seed, arch: CriticArch = CriticArch()) -> ParamStore:
    ss = np.random.SeedSequence(seed)
    r_omega, r_actor, r_critic = (np.random.default_rng(s) for s in ss.spawn(3))
    store = ParamStore()
    init_omega(store, num_aps, r_omega)
    init_actor(store, r_actor)
    init_critic(store, r_critic, arch)
    return store


def critic_prefixes(arch: CriticArch = CriticArch()) -> list[str]:
    out = ["efe.", "nfe.", "rof."]
    for l in range(1, arch.zeta + 1):
        out.append(f"hnfe_l{l}.")
        out += [f"gcn_l{l}_e{e}" for e in range(1, arch.E + 1)]
    return out


def num_aps_of(store: ParamStore) -> int:
    return store["omega.W0"].shape[0] // 2


# -- preprocessing -------------------------------------------------------------

@dataclass
class Preprocessed:
    a_hat: np.ndarray  # K associations recomputed from S
    s_hat: np.ndarray  # K, own-AP normalized loss
    I: np.ndarray  # K x K, I[i, j] = S[a_hat[j], i], zero diagonal
    O: np.ndarray  # K x K inferred sensing probabilities, zero diagonal


def _offdiag_pairs(K):
    ii, jj = np.nonzero(~np.eye(K, dtype=bool))
    return ii, jj


def _check_S(store, S):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2:
        raise ValueError("S must be an A x K matrix")
    A = num_aps_of(store)
    if S.shape[0] != A:
        raise ValueError(f"S has {S.shape[0]} AP rows but the inference network expects {A}")
    return S


def omega_inputs(S, ii, jj):
    return np.concatenate([S[:, ii].T, S[:, jj].T], axis=1)


def infer_O(store: ParamStore, s_i, s_j) -> float:
    """Probability that user j senses user i, from their state columns."""
    x = np.concatenate([np.asarray(s_i, float), np.asarray(s_j, float)])
    y, _ = mlp_forward(store, "omega", omega_spec(num_aps_of(store)), x)
    return float(y[0])


def infer_O_matrix(store: ParamStore, S):
    S = _check_S(store, S)
    K = S.shape[1]
    ii, jj = _offdiag_pairs(K)
    O = np.zeros((K, K))
    cache = None
    if len(ii):
        y, cache = mlp_forward(store, "omega", omega_spec(S.shape[0]), omega_inputs(S, ii, jj))
        O[ii, jj] = y[:, 0]
    return O, cache


def preprocess(store: ParamStore, S) -> Preprocessed:
    S = _check_S(store, S)
    K = S.shape[1]
    a_hat = np.argmin(S, axis=0)
    s_hat = S[a_hat, np.arange(K)]
    I = S[a_hat[None, :], np.arange(K)[:, None]].copy()
    np.fill_diagonal(I, 0.0)
    O, _ = infer_O_matrix(store, S)
    return Preprocessed(a_hat=a_hat, s_hat=s_hat, I=I, O=O)


# -- actor ---------------------------------------------------------------------

def actor_forward(store: ParamStore, S, pre: Preprocessed | None = None):
    """Edge graph W and the cache needed to backpropagate into mu_dot."""
    pre = preprocess(store, S) if pre is None else pre
    K = len(pre.s_hat)
    ii, jj = _offdiag_pairs(K)
    W = np.zeros((K, K))
    cache = None
    if len(ii):
        x = np.stack([pre.s_hat[jj], pre.I[ii, jj], pre.s_hat[ii], pre.O[ii, jj]], axis=1)
        y, cache = mlp_forward(store, "mu_dot", MU_SPEC, x)
        W[ii, jj] = y[:, 0]
    return W, (ii, jj, cache)


def actor_weights(store: ParamStore, S) -> np.ndarray:
    return actor_forward(store, S)[0]


def actor_backward(store: ParamStore, cache, dW) -> dict:
    ii, jj, c = cache
    if c is None:
        return {n: np.zeros_like(store[n]) for n in store.names("mu_dot.")}
    grads, _ = mlp_backward(store, "mu_dot", MU_SPEC, c, dW[ii, jj][:, None])
    return grads


# -- critic --------------------------------------------------------------------

def critic_forward(store: ParamStore, pre: Preprocessed, W, arch: CriticArch = CriticArch()):
    """Per-user throughput estimates Q (length K) and a cache for backward."""
    W = np.asarray(W, dtype=float)
    K = len(pre.s_hat)
    if W.shape != (K, K):
        raise ValueError(f"W must be {K}x{K}, got {W.shape}")
    ii, jj = _offdiag_pairs(K)
    G = np.zeros((arch.E, K, K))
    efe_cache = None
    if len(ii):
        x = np.stack([pre.I[ii, jj], pre.O[ii, jj], W[ii, jj]], axis=1)
        g, efe_cache = mlp_forward(store, "efe", arch.efe, x)
        G[:, ii, jj] = g.T
    H, nfe_cache = mlp_forward(store, "nfe", arch.nfe, pre.s_hat[:, None])
    layers = []
    for l in range(1, arch.zeta + 1):
        outs, gcs = [], []
        for e in range(arch.E):
            o, gc = gcn_forward(H, G[e], store[f"gcn_l{l}_e{e + 1}"])
            outs.append(o)
            gcs.append(gc)
        H, hc = mlp_forward(store, f"hnfe_l{l}", arch.hnfe, np.concatenate(outs, axis=1))
        layers.append((gcs, hc))
    q, rof_cache = mlp_forward(store, "rof", arch.rof, np.concatenate([H, pre.s_hat[:, None]], axis=1))
    cache = dict(K=K, pairs=(ii, jj), efe=efe_cache, nfe=nfe_cache, layers=layers, rof=rof_cache,
                 arch=arch)
    return q[:, 0], cache


def critic_backward(store: ParamStore, cache, dQ):
    """Gradients of ``sum(Q * dQ)``: (critic param grads, dW)."""
    arch = cache["arch"]
    K = cache["K"]
    ii, jj = cache["pairs"]
    grads, dx = mlp_backward(store, "rof", arch.rof, cache["rof"], np.asarray(dQ, float)[:, None])
    dH = dx[:, : arch.M]
    dG = np.zeros((arch.E, K, K))
    M = arch.M
    for l in range(arch.zeta, 0, -1):
        gcs, hc = cache["layers"][l - 1]
        g, dcat = mlp_backward(store, f"hnfe_l{l}", arch.hnfe, hc, dH)
        grads.update(g)
        dH = np.zeros((K, M))
        for e in range(arch.E):
            dh, dg, dth = gcn_backward(gcs[e], dcat[:, e * M:(e + 1) * M])
            dH += dh
            dG[e] += dg
            grads[f"gcn_l{l}_e{e + 1}"] = dth
    g, _ = mlp_backward(store, "nfe", arch.nfe, cache["nfe"], dH)
    grads.update(g)
    dW = np.zeros((K, K))
    if cache["efe"] is not None:
        g, dx = mlp_backward(store, "efe", arch.efe, cache["efe"], dG[:, ii, jj].T)
        grads.update(g)
        dW[ii, jj] = dx[:, 2]
    else:
        for n in store.names("efe."):
            grads[n] = np.zeros_like(store[n])
    return grads, dW


def critic_estimate(store: ParamStore, S, W, arch: CriticArch = CriticArch()) -> np.ndarray:
    return critic_forward(store, preprocess(store, S), W, arch)[0]


def critic_grad_W(store: ParamStore, pre: Preprocessed, W, k: int,
                  arch: CriticArch = CriticArch()):
    """(Q, dQ_k/dW) with the diagonal of the gradient zeroed."""
    Q, cache = critic_forward(store, pre, W, arch)
    dQ = np.zeros(len(Q))
    dQ[k] = 1.0
    _, dW = critic_backward(store, cache, dQ)
    np.fill_diagonal(dW, 0.0)
    return Q, dW


# -- losses --------------------------------------------------------------------

def bce_loss(O, O_hat) -> float:
    """Summed binary cross-entropy over off-diagonal pairs, O clamped away from 0/1."""
    O = np.clip(np.asarray(O, float), BCE_CLAMP, 1.0 - BCE_CLAMP)
    O_hat = np.asarray(O_hat, float)
    off = ~np.eye(O.shape[0], dtype=bool)
    terms = -O_hat * np.log(O) - (1.0 - O_hat) * np.log1p(-O)
    return float(terms[off].sum())


def inference_loss_grad(store: ParamStore, S, O_hat):
    """Cross-entropy of inferred vs. ground-truth sensing; returns (loss, omega grads, O)."""
    S = _check_S(store, S)
    O_hat = np.asarray(O_hat, float)
    K = S.shape[1]
    O, cache = infer_O_matrix(store, S)
    loss = bce_loss(O, O_hat)
    if cache is None:
        return loss, {n: np.zeros_like(store[n]) for n in store.names("omega.")}, O
    ii, jj = _offdiag_pairs(K)
    # d(BCE)/d(logit) = O - O_hat
    dlogit = (O[ii, jj] - O_hat[ii, jj])[:, None]
    grads, _ = mlp_backward(store, "omega", omega_spec(S.shape[0]), cache, dlogit, wrt_logit=True)
    return loss, grads, O


def critic_loss_grad(store: ParamStore, S, W, r, arch: CriticArch = CriticArch(),
                     pre: Preprocessed | None = None):
    """Squared error between measured and estimated throughput; (loss, critic grads, Q)."""
    pre = preprocess(store, S) if pre is None else pre
    r = np.asarray(r, float)
    Q, cache = critic_forward(store, pre, W, arch)
    diff = Q - r
    grads, _ = critic_backward(store, cache, 2.0 * diff)
    return float((diff ** 2).sum()), grads, Q


@dataclass
class ActorStep:
    loss: float
    grads: dict
    W: np.ndarray
    Q: np.ndarray
    k_star: int


def actor_loss_grad(store: ParamStore, S, arch: CriticArch = CriticArch(),
                    pre: Preprocessed | None = None) -> ActorStep:
    """Negative critic estimate of the worst user, differentiated into mu_dot only."""
    pre = preprocess(store, S) if pre is None else pre
    W, acache = actor_forward(store, S, pre)
    Q, ccache = critic_forward(store, pre, W, arch)
    k = int(np.argmin(Q))  # lowest index on ties
    dQ = np.zeros(len(Q))
    dQ[k] = -1.0
    _, dW = critic_backward(store, ccache, dQ)
    grads = actor_backward(store, acache, dW)
    return ActorStep(loss=-float(Q[k]), grads=grads, W=W, Q=Q, k_star=k)
