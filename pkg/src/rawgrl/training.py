"""Offline learning: inference-network pre-training, actor-critic training, evaluation."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .actorcritic import (
    CriticArch,
    actor_forward,
    actor_loss_grad,
    bce_loss,
    critic_loss_grad,
    critic_prefixes,
    infer_O_matrix,
    inference_loss_grad,
    preprocess,
)
from .baselines import BaselineKind, fixed_rule_weights, rand_group, unif_group
from .desim import MacConfig, run_sim
from .maxcut import do_graph_cut
from .netmodel import (
    NetworkRealization,
    ScenarioConfig,
    generate_realization,
    observe_states,
    sensing_matrix,
)
from .nnkernel import ParamStore, optimizer_step

PRETRAIN_COLUMNS = ("step", "loss", "accuracy", "acc_sensed", "acc_hidden")
TRAIN_COLUMNS = ("step", "explored", "min_r", "mean_r", "critic_loss", "actor_loss", "k_star")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-4
    explore: float = 0.1
    eval_realizations: int = 1000
    sim_slots: int = 2000
    eval_slots: int = 2000
    seed: int = 0
    optimizer: str = "adam"
    batch_size: int = 1
    actor_update_on_explore: bool = True
    checkpoint_every: int = 100
    cut_trials: int = 20

    def __post_init__(self):
        if not 0.0 <= self.explore <= 1.0:
            raise ValueError("explore must lie in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class TrainLog:
    columns: tuple
    rows: list = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def validate(self) -> None:
        for i, r in enumerate(self.rows):
            if tuple(r) != self.columns:
                raise ValueError(f"row {i} has columns {tuple(r)}, expected {self.columns}")
            for k, v in r.items():
                if not math.isfinite(float(v)):
                    raise ValueError(f"row {i}: {k} is not finite")

    def to_csv(self) -> str:
        self.validate()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
        return buf.getvalue()


def _checkpoint(store, ckpt_dir, name):
    if ckpt_dir is not None:
        store.save(os.path.join(ckpt_dir, name))


# -- phase 1 ---------------------------------------------------------------------

def class_accuracy(O, O_hat):
    """(overall, accuracy on sensed pairs, accuracy on hidden pairs) at threshold 0.5."""
    off = ~np.eye(O.shape[0], dtype=bool)
    pred = (O >= 0.5)[off]
    truth = (np.asarray(O_hat) > 0.5)[off]
    overall = float((pred == truth).mean()) if pred.size else 1.0
    pos = float(pred[truth].mean()) if truth.any() else float("nan")
    neg = float((~pred[~truth]).mean()) if (~truth).any() else float("nan")
    return overall, pos, neg


def _nanmean_cols(a):
    # a class absent from every realization in the batch counts as fully correct
    out = []
    for col in a.T:
        ok = col[~np.isnan(col)]
        out.append(float(ok.mean()) if ok.size else 1.0)
    return out


def pretrain_inference(cfg: TrainConfig, scfg: ScenarioConfig, store: ParamStore,
                       ckpt_dir=None) -> TrainLog:
    """Fit the inference network to ground-truth sensing on fresh realizations (in place)."""
    log = TrainLog(PRETRAIN_COLUMNS)
    for step in range(cfg.steps):
        grads = None
        loss_sum = 0.0
        accs = []
        for b in range(cfg.batch_size):
            real = generate_realization(scfg, seeding.derive(cfg.seed, seeding.REALIZATION, step, b))
            S = observe_states(real, scfg)
            O_hat = sensing_matrix(real, scfg)
            loss, g, O = inference_loss_grad(store, S, O_hat)
            loss_sum += loss
            accs.append(class_accuracy(O, O_hat))
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        grads = {k: v / cfg.batch_size for k, v in grads.items()}
        optimizer_step(store, grads, cfg.lr, cfg.optimizer)
        acc = _nanmean_cols(np.array(accs, dtype=float))
        log.append(step=step, loss=loss_sum / cfg.batch_size, accuracy=acc[0],
                   acc_sensed=acc[1], acc_hidden=acc[2])
        if ckpt_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _checkpoint(store.subset(["omega."]), ckpt_dir, f"omega_step{step + 1}.json")
    _checkpoint(store.subset(["omega."]), ckpt_dir, "omega.json")
    return log


@dataclass
class InferenceScore:
    loss: float  # mean cross-entropy per realization
    accuracy: float
    acc_sensed: float
    acc_hidden: float


def score_inference(store: ParamStore, scfg: ScenarioConfig, n: int, seed: int) -> InferenceScore:
    """Held-out cross-entropy and per-class accuracy pooled over ``n`` realizations."""
    losses, preds, truths = [], [], []
    for i in range(n):
        real = generate_realization(scfg, seeding.derive(seed, seeding.HELDOUT, i))
        S = observe_states(real, scfg)
        O_hat = sensing_matrix(real, scfg)
        O, _ = infer_O_matrix(store, S)
        losses.append(bce_loss(O, O_hat))
        off = ~np.eye(O.shape[0], dtype=bool)
        preds.append((O >= 0.5)[off])
        truths.append((O_hat > 0.5)[off])
    p = np.concatenate(preds)
    t = np.concatenate(truths)
    return InferenceScore(
        loss=float(np.mean(losses)),
        accuracy=float((p == t).mean()),
        acc_sensed=float(p[t].mean()) if t.any() else float("nan"),
        acc_hidden=float((~p[~t]).mean()) if (~t).any() else float("nan"),
    )


# -- phase 2 ---------------------------------------------------------------------

def random_edge_graph(K: int, rng) -> np.ndarray:
    W = np.random.default_rng(rng).uniform(0.0, 1.0, size=(K, K))
    np.fill_diagonal(W, 0.0)
    return W


def train_actor_critic(cfg: TrainConfig, scfg: ScenarioConfig, store: ParamStore,
                       mac: MacConfig = MacConfig(), arch: CriticArch = CriticArch(),
                       ckpt_dir=None) -> TrainLog:
    """Actor-critic main loop; updates ``store`` in place, the inference network stays frozen."""
    log = TrainLog(TRAIN_COLUMNS)
    crit = tuple(critic_prefixes(arch))
    explore_rng = seeding.rng(cfg.seed, seeding.EXPLORE)
    for step in range(cfg.steps):
        c_grads, a_grads = None, None
        c_loss = a_loss = 0.0
        mins, means, pending, k_star, explored_any = [], [], [], 0, False
        n_actor = 0
        for b in range(cfg.batch_size):
            real = generate_realization(scfg, seeding.derive(cfg.seed, seeding.REALIZATION, step, b))
            S = observe_states(real, scfg)
            pre = preprocess(store, S)
            W, _ = actor_forward(store, S, pre)
            explored = bool(explore_rng.random() < cfg.explore)
            explored_any |= explored
            if explored:
                W = random_edge_graph(scfg.num_users, explore_rng)
            z = do_graph_cut(scfg.num_groups, W, rng=seeding.rng(cfg.seed, seeding.CUT, step, b),
                             trials=cfg.cut_trials)
            rep = run_sim(real, z, cfg.sim_slots, scfg, mac,
                          seed=seeding.derive(cfg.seed, seeding.SIMULATION, step, b))
            loss, g, _ = critic_loss_grad(store, S, W, rep.r, arch, pre=pre)
            c_loss += loss
            c_grads = g if c_grads is None else {k: c_grads[k] + g[k] for k in c_grads}
            mins.append(rep.r.min())
            means.append(rep.r.mean())
            pending.append((S, pre, explored))
        optimizer_step(store, {k: v / cfg.batch_size for k, v in c_grads.items()
                               if k.startswith(crit)}, cfg.lr, cfg.optimizer)
        for S, pre, explored in pending:
            if explored and not cfg.actor_update_on_explore:
                continue
            st = actor_loss_grad(store, S, arch, pre=pre)
            a_loss += st.loss
            k_star = st.k_star
            a_grads = st.grads if a_grads is None else {k: a_grads[k] + st.grads[k] for k in a_grads}
            n_actor += 1
        if n_actor:
            optimizer_step(store, {k: v / n_actor for k, v in a_grads.items()}, cfg.lr,
                           cfg.optimizer)
        log.append(step=step, explored=int(explored_any), min_r=float(np.mean(mins)),
                   mean_r=float(np.mean(means)), critic_loss=c_loss / cfg.batch_size,
                   actor_loss=a_loss / max(n_actor, 1), k_star=k_star)
        if ckpt_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _checkpoint(store, ckpt_dir, f"actor_critic_step{step + 1}.json")
    _checkpoint(store, ckpt_dir, "actor_critic.json")
    return log


# -- evaluation ------------------------------------------------------------------

POLICY_NAMES = ("proposed",) + tuple(k.value for k in BaselineKind)


def make_policy(name: str, store: ParamStore | None, scfg: ScenarioConfig, trials: int = 20):
    """Grouping policy ``(real, rng) -> z`` by name."""
    if name not in POLICY_NAMES:
        raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
    Z = scfg.num_groups

    def policy(real: NetworkRealization, rng):
        S = observe_states(real, scfg)
        if name == "rand":
            return rand_group(real.num_users, Z, rng)
        if name == "unif":
            return unif_group(S, Z)
        if name == "proposed":
            if store is None:
                raise ValueError("the proposed policy needs trained parameters")
            W, _ = actor_forward(store, S)
        else:
            W = fixed_rule_weights(name, S, store, scfg)
        return do_graph_cut(Z, W, rng=rng, trials=trials)

    return policy


def empirical_cdf(values):
    v = np.sort(np.asarray(values, dtype=float).ravel())
    return v, np.arange(1, len(v) + 1) / len(v)


@dataclass
class EvalSummary:
    worst: np.ndarray  # per realization min_k r_k
    per_user: np.ndarray  # n x K
    groupings: np.ndarray  # n x K

    @property
    def mean_worst(self) -> float:
        return float(self.worst.mean())

    @property
    def mean_user(self) -> float:
        return float(self.per_user.mean())

    @property
    def mean_total(self) -> float:
        return float(self.per_user.sum(axis=1).mean())

    def cdf(self, metric: str = "worst_case"):
        if metric == "worst_case":
            return empirical_cdf(self.worst)
        if metric == "per_user":
            return empirical_cdf(self.per_user)
        raise ValueError(f"unknown metric {metric!r}")

    def summary(self) -> dict:
        return {"mean_worst_case": self.mean_worst, "mean_per_user": self.mean_user,
                "mean_total": self.mean_total, "n": int(len(self.worst))}


def evaluate(policy, scfg: ScenarioConfig, n: int, T: int, seed: int,
             mac: MacConfig = MacConfig(), threads: int = 1) -> EvalSummary:
    """Run ``policy`` on ``n`` seeded realizations; identical seeds give paired comparisons."""

    def one(i):
        real = generate_realization(scfg, seeding.derive(seed, seeding.REALIZATION, i))
        z = policy(real, seeding.rng(seed, seeding.POLICY, i))
        rep = run_sim(real, z, T, scfg, mac, seed=seeding.derive(seed, seeding.SIMULATION, i))
        return rep.r, z

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(one, range(n)))
    else:
        out = [one(i) for i in range(n)]
    per_user = np.array([o[0] for o in out], dtype=float).reshape(n, scfg.num_users)
    groupings = np.array([o[1] for o in out], dtype=np.int64).reshape(n, scfg.num_users)
    return EvalSummary(worst=per_user.min(axis=1), per_user=per_user, groupings=groupings)
