"""Online fine-tuning of edge weights against the frozen critic while the network runs."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .actorcritic import CriticArch, actor_weights, critic_grad_W, preprocess
from .desim import MacConfig, Simulator
from .maxcut import cut_value, do_graph_cut
from .netmodel import NetworkRealization, ScenarioConfig, observe_states, step_mobility
from .nnkernel import ParamStore, sigmoid, sigmoid_inverse

TRACE_COLUMNS = ("update_index", "k_star", "min_r", "mean_r", "cut_value")


@dataclass(frozen=True)
class OnlineConfig:
    window: int = 200  # slots between updates
    lr: float = 1e-3
    regen: float = 0.1  # weight regeneration rate
    mobility_step_slots: int = 10  # slots between position updates when users move
    cut_trials: int = 20

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.regen <= 1.0:
            raise ValueError("regen must lie in [0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.mobility_step_slots < 1:
            raise ValueError("mobility_step_slots must be >= 1")


@dataclass
class OnlineState:
    V: np.ndarray  # logits, diagonal unused (kept 0)
    W: np.ndarray
    S: np.ndarray
    z: np.ndarray
    window: int
    lr: float
    regen: float

    @classmethod
    def from_weights(cls, W, S, z, cfg: OnlineConfig) -> "OnlineState":
        W = np.array(W, dtype=float)
        np.fill_diagonal(W, 0.0)
        return cls(V=_logits(W), W=W, S=np.asarray(S, float), z=np.asarray(z), window=cfg.window,
                   lr=cfg.lr, regen=cfg.regen)


def _logits(W):
    V = sigmoid_inverse(W)
    np.fill_diagonal(V, 0.0)
    return V


def measure_worst_case(u_window):
    """Windowed per-user rates and the worst user (lowest index on ties)."""
    u = np.asarray(u_window, dtype=float)
    if u.ndim != 2 or u.shape[1] == 0:
        raise ValueError("window must be a non-empty K x T array")
    r = u.mean(axis=1)
    return r, int(np.argmin(r))


def update_weights_online(state: OnlineState, store: ParamStore, k_star: int,
                          arch: CriticArch = CriticArch()) -> OnlineState:
    """One ascent step on the critic's estimate for ``k_star``, taken in logit space."""
    pre = preprocess(store, state.S)
    _, dQ = critic_grad_W(store, pre, state.W, k_star, arch)
    s = sigmoid(state.V)
    grad_V = -dQ * s * (1.0 - s)
    V = state.V - state.lr * grad_V
    np.fill_diagonal(V, 0.0)
    # untouched logits keep their weight bit-for-bit
    W = np.where(V == state.V, state.W, sigmoid(V))
    np.fill_diagonal(W, 0.0)
    state.V, state.W = V, W
    return state


def regenerate_weights(state: OnlineState, store: ParamStore, S_latest, regen: float | None = None):
    """Blend in fresh actor weights: W <- (1 - regen) W + regen * actor(S_latest)."""
    lam = state.regen if regen is None else regen
    if not 0.0 <= lam <= 1.0:
        raise ValueError("regen must lie in [0, 1]")
    state.S = np.asarray(S_latest, float)
    if lam == 0.0:
        return state
    W = (1.0 - lam) * state.W + lam * actor_weights(store, state.S)
    np.fill_diagonal(W, 0.0)
    state.W = W
    state.V = _logits(W)
    return state


@dataclass
class OnlineTrace:
    rows: list = field(default_factory=list)
    groupings: list = field(default_factory=list)
    weights: list = field(default_factory=list)  # optional W snapshots
    u: list = field(default_factory=list)  # per-window K x T success counts

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def trailing_worst(self, n: int = 10) -> float:
        return float(self.column("min_r")[-n:].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            if tuple(r) != TRACE_COLUMNS:
                raise ValueError(f"bad trace row {r}")
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
        return buf.getvalue()

    def weights_json(self) -> str:
        return json.dumps([w.tolist() for w in self.weights])


def run_online(real0: NetworkRealization, store: ParamStore, scfg: ScenarioConfig,
               cfg: OnlineConfig, total_slots: int, seed: int, mac: MacConfig = MacConfig(),
               fine_tune: bool = True, mobile: bool = False, keep_weights: bool = False,
               arch: CriticArch = CriticArch()) -> OnlineTrace:
    """Run the network for ``total_slots``, updating the grouping every window.

    With ``fine_tune`` off the initial actor weights stay frozen; only the
    re-cuts happen, using the same rounding seeds as the fine-tuned arm, so the
    two arms differ in nothing but the weight path.
    """
    if cfg.window <= scfg.num_groups:
        raise ValueError(f"window ({cfg.window}) must exceed Z ({scfg.num_groups})")
    if total_slots < cfg.window:
        raise ValueError(f"total_slots ({total_slots}) is shorter than one window ({cfg.window})")
    Z = scfg.num_groups
    real = real0
    sim = Simulator(real, scfg, mac, seed=seeding.derive(seed, seeding.SIMULATION))
    move_rng = seeding.rng(seed, seeding.MOBILITY)
    S = observe_states(real, scfg)
    W0 = actor_weights(store, S)
    z = do_graph_cut(Z, W0, rng=seeding.rng(seed, seeding.CUT, 0), trials=cfg.cut_trials)
    state = OnlineState.from_weights(W0, S, z, cfg)
    trace = OnlineTrace()
    for upd in range(total_slots // cfg.window):
        if mobile and scfg.mobility_speed > 0:
            chunks = []
            done = 0
            while done < cfg.window:
                n = min(cfg.mobility_step_slots, cfg.window - done)
                chunks.append(sim.run(state.z, n))
                done += n
                real = step_mobility(real, scfg.raw_slot * n, scfg.mobility_speed, move_rng, scfg)
                sim.set_realization(real)
            u = np.concatenate(chunks, axis=1)
        else:
            u = sim.run(state.z, cfg.window)
        r, k = measure_worst_case(u)
        trace.rows.append(dict(update_index=upd, k_star=k, min_r=float(r[k]), mean_r=float(r.mean()),
                               cut_value=cut_value(state.W, state.z)))
        trace.groupings.append(state.z.copy())
        trace.u.append(u)
        if fine_tune:
            update_weights_online(state, store, k, arch)
            regenerate_weights(state, store, observe_states(real, scfg))
        else:
            state.S = observe_states(real, scfg)
        if keep_weights:
            trace.weights.append(state.W.copy())
        state.z = do_graph_cut(Z, state.W, rng=seeding.rng(seed, seeding.CUT, upd + 1),
                               trials=cfg.cut_trials)
    return trace


@dataclass
class PairedOnline:
    tuned: OnlineTrace
    control: OnlineTrace

    def ratio_series(self) -> np.ndarray:
        """Fine-tuned worst-case rate divided by the control's, per window."""
        a = self.tuned.column("min_r")
        b = self.control.column("min_r")
        out = np.ones_like(a)
        nz = b > 0
        out[nz] = a[nz] / b[nz]
        out[~nz & (a > 0)] = np.inf
        return out


def run_paired(real0, store, scfg, cfg: OnlineConfig, total_slots, seed, mac=MacConfig(),
               mobile=False, keep_weights=False) -> PairedOnline:
    kw = dict(scfg=scfg, cfg=cfg, total_slots=total_slots, seed=seed, mac=mac, mobile=mobile,
              keep_weights=keep_weights)
    return PairedOnline(tuned=run_online(real0, store, fine_tune=True, **kw),
                        control=run_online(real0, store, fine_tune=False, **kw))
