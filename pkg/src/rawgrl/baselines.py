"""Reference grouping policies: random, AP-sorted round robin, and fixed-rule max cut."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .actorcritic import infer_O_matrix
from .netmodel import ScenarioConfig
from .nnkernel import ParamStore


class BaselineKind(str, Enum):
    RAND = "rand"
    UNIF = "unif"
    MCON = "mcon"
    MHID = "mhid"
    MINT = "mint"


def rand_group(K: int, Z: int, rng) -> np.ndarray:
    """Every user picks a group uniformly at random."""
    return np.random.default_rng(rng).integers(1, Z + 1, size=K).astype(np.int64)


def unif_group(S, Z: int) -> np.ndarray:
    """Sort users by associated AP (stable, ties by index) and deal groups round robin.

    The i-th user in sorted order (1-based) gets group ``(i mod Z) + 1``.
    """
    S = np.asarray(S, dtype=float)
    a_hat = np.argmin(S, axis=0)
    order = np.argsort(a_hat, kind="stable")
    z = np.empty(S.shape[1], dtype=np.int64)
    z[order] = np.arange(1, len(order) + 1) % Z + 1
    return z


def unnormalize_states(S, cfg: ScenarioConfig) -> np.ndarray:
    """Back to dB attenuation; censored entries map to twice the sensing threshold."""
    return (np.asarray(S, dtype=float) + 1.0) * cfg.sense_threshold_db


def interference_ratio(S, cfg: ScenarioConfig) -> np.ndarray:
    """phi'[i, j]: user j's received power over noise plus user i's power, both at j's AP."""
    loss = unnormalize_states(S, cfg)
    K = loss.shape[1]
    a_hat = np.argmin(loss, axis=0)
    gain = 10.0 ** ((cfg.tx_power_dbm - loss) / 10.0)  # mW received
    noise = 10.0 ** (cfg.noise_dbm / 10.0)
    own = gain[a_hat, np.arange(K)]  # own[j]
    cross = gain[a_hat[None, :], np.arange(K)[:, None]]  # cross[i, j] = power of i at j's AP
    phi = own[None, :] / (noise + cross)
    np.fill_diagonal(phi, 0.0)
    return phi


def fixed_rule_weights(kind, S, store: ParamStore | None, cfg: ScenarioConfig) -> np.ndarray:
    kind = BaselineKind(kind)
    if kind in (BaselineKind.MCON, BaselineKind.MHID):
        if store is None:
            raise ValueError(f"{kind.value} needs a trained inference network")
        O, _ = infer_O_matrix(store, S)
        W = O if kind is BaselineKind.MCON else 1.0 - O
    elif kind is BaselineKind.MINT:
        W = interference_ratio(S, cfg)
        # positive rescaling leaves the max-cut argmax unchanged
        top = W.max() if W.size else 0.0
        if top > 0:
            W = W / top
    else:
        raise ValueError(f"{kind.value} is not a graph-based baseline")
    W = np.array(W, dtype=float)
    np.fill_diagonal(W, 0.0)
    return W
