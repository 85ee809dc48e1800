"""Command-line driver: ``rawgrl <pretrain|train|eval|online|sweep-kz|selftest>``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import seeding
from .actorcritic import critic_prefixes, init_actor, init_critic, init_omega, omega_spec
from .config import ConfigError, Profile, load_profile
from .maxcut import SdpNotConverged
from .netmodel import UnservableUser, generate_realization
from .nnkernel import ParamStore
from .online import run_paired
from .training import (
    POLICY_NAMES,
    evaluate,
    make_policy,
    pretrain_inference,
    score_inference,
    train_actor_critic,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CDF_COLUMNS = ("value", "cumulative_prob", "metric")


class UsageError(Exception):
    pass


# -- output helpers ------------------------------------------------------------

def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        if len(r) != len(columns):
            raise ValueError(f"row {r} does not match columns {columns}")
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


class Run:
    """Collects outputs of one command and writes its manifest last."""

    def __init__(self, args, profile: Profile, phase: str, inputs=()):
        self.out = args.out
        self.profile = profile
        self.phase = phase
        self.inputs = {p: _sha256_file(p) for p in inputs}
        self.outputs = {}
        self.extra = {}
        os.makedirs(self.out, exist_ok=True)
        ident = json.dumps({"phase": phase, "config": profile.to_dict(), "seed": args.seed,
                            "inputs": self.inputs, "argv": _stable_argv(args)}, sort_keys=True)
        self.run_id = hashlib.sha256(ident.encode()).hexdigest()[:12]

    def write(self, name: str, text: str) -> str:
        path = os.path.join(self.out, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        self.outputs[name] = hashlib.sha256(text.encode()).hexdigest()
        return path

    def finish(self) -> str:
        manifest = {
            "run_id": self.run_id,
            "phase": self.phase,
            "config": self.profile.to_dict(),
            "seed": self.profile.train.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            **self.extra,
        }
        path = os.path.join(self.out, f"manifest-{self.phase}-{self.run_id}.json")
        if not os.path.exists(path):  # manifests are never rewritten
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
        return path


def _sha256_file(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _stable_argv(args) -> dict:
    skip = {"func", "out", "threads", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _load_params(paths, profile: Profile, need_actor=True, need_critic=False) -> ParamStore:
    if not paths:
        raise UsageError("this command needs --params checkpoint files")
    store = ParamStore()
    for p in paths:
        store = store.merge(ParamStore.load(p))
    _check_omega(store, profile)
    if need_actor and "mu_dot.W0" not in store:
        raise UsageError("checkpoints contain no actor (mu_dot) parameters")
    if need_critic and "rof.W0" not in store:
        raise UsageError("checkpoints contain no critic parameters")
    return store


def _check_omega(store: ParamStore, profile: Profile) -> None:
    if "omega.W0" not in store:
        raise UsageError("checkpoints contain no inference-network (omega) parameters")
    want = omega_spec(profile.scenario.num_aps).dims[0]
    got = store["omega.W0"].shape[0]
    if got != want:
        raise UsageError(f"inference network expects {got // 2} APs but the scenario has "
                         f"{profile.scenario.num_aps}")


# -- commands --------------------------------------------------------------------

def cmd_pretrain(args, profile: Profile) -> int:
    run = Run(args, profile, "pretrain")
    cfg = profile.train
    store = ParamStore()
    init_omega(store, profile.scenario.num_aps, seeding.rng(cfg.seed, seeding.INIT, 0))
    ckpt_dir = os.path.join(args.out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    log = pretrain_inference(cfg, profile.scenario, store, ckpt_dir=ckpt_dir)
    run.write("omega.json", store.to_json())
    run.write("pretrain_log.csv", log.to_csv())
    score = score_inference(store, profile.scenario, args.heldout, cfg.seed + 1)
    run.write("pretrain_score.json", json.dumps(score.__dict__, sort_keys=True, indent=2))
    run.finish()
    return EXIT_OK


def cmd_train(args, profile: Profile) -> int:
    store = ParamStore.load(args.omega)
    _check_omega(store, profile)
    store = store.subset(["omega."])
    run = Run(args, profile, "train", inputs=[args.omega])
    cfg = profile.train
    init_actor(store, seeding.rng(cfg.seed, seeding.INIT, 1))
    init_critic(store, seeding.rng(cfg.seed, seeding.INIT, 2))
    ckpt_dir = os.path.join(args.out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    log = train_actor_critic(cfg, profile.scenario, store, profile.mac, ckpt_dir=ckpt_dir)
    run.write("actor.json", store.subset(["omega.", "mu_dot."]).to_json())
    run.write("critic.json", store.subset(critic_prefixes()).to_json())
    run.write("train_log.csv", log.to_csv())
    run.finish()
    return EXIT_OK


def _policies(names) -> list[str]:
    out = [n.strip().lower() for n in names.split(",") if n.strip()] if isinstance(names, str) \
        else list(names)
    for n in out:
        if n not in POLICY_NAMES:
            raise UsageError(f"unknown policy {n!r}; choose from {', '.join(POLICY_NAMES)}")
    return out


def cmd_eval(args, profile: Profile) -> int:
    policies = _policies(args.policies or profile.run.policies)
    needs_nn = any(p in ("proposed", "mcon", "mhid") for p in policies)
    store = _load_params(args.params, profile, need_actor="proposed" in policies) \
        if needs_nn else None
    run = Run(args, profile, "eval", inputs=args.params or [])
    n = args.n or profile.train.eval_realizations
    T = profile.train.eval_slots
    results = {}
    for name in policies:
        pol = make_policy(name, store, profile.scenario, profile.train.cut_trials)
        res = evaluate(pol, profile.scenario, n, T, profile.train.seed, profile.mac, args.threads)
        results[name] = res
        rows = []
        for metric in ("worst_case", "per_user"):
            v, p = res.cdf(metric)
            rows += [(a, b, metric) for a, b in zip(v, p)]
        run.write(f"cdf_{name}.csv", _csv_text(CDF_COLUMNS, rows))
    summary = {name: res.summary() for name, res in results.items()}
    if "rand" in results:
        for name, res in results.items():
            if name != "rand":
                summary[name]["frac_worst_above_rand"] = float(
                    (res.worst > results["rand"].worst).mean())
    run.write("summary.json", json.dumps(summary, sort_keys=True, indent=2))
    run.finish()
    return EXIT_OK


def cmd_online(args, profile: Profile) -> int:
    store = _load_params(args.params, profile, need_actor=True, need_critic=True)
    scfg = profile.scenario
    if args.mode == "mobile":
        scfg = replace(scfg, mobility_speed=profile.run.mobile_speed)
    run = Run(args, replace(profile, scenario=scfg), "online", inputs=args.params)
    run.extra["mode"] = args.mode
    ocfg = profile.online
    updates = args.updates or profile.run.online_updates
    seed = profile.train.seed
    real = generate_realization(scfg, seeding.derive(seed, seeding.REALIZATION))
    paired = run_paired(real, store, scfg, ocfg, updates * ocfg.window, seed, profile.mac,
                        mobile=args.mode == "mobile", keep_weights=args.weights)
    run.write("online_tuned.csv", paired.tuned.to_csv())
    run.write("online_control.csv", paired.control.to_csv())
    ratio = paired.ratio_series()
    run.write("online_ratio.csv", _csv_text(("update_index", "ratio"),
                                            [(i, float(r)) for i, r in enumerate(ratio)]))
    if args.weights:
        run.write("online_weights.json", paired.tuned.weights_json())
    run.finish()
    return EXIT_OK


def _int_list(text) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from exc


def cmd_sweep_kz(args, profile: Profile) -> int:
    users = _int_list(args.users) if args.users else list(profile.run.sweep_users)
    groups = _int_list(args.groups) if args.groups else list(profile.run.sweep_groups)
    for Z in groups:
        if Z < 1 or Z & (Z - 1):
            raise UsageError(f"Z must be a power of 2, got {Z}")
    for K in users:
        if K < 1:
            raise UsageError(f"K must be >= 1, got {K}")
    policies = _policies(args.policies or "proposed")
    store = _load_params(args.params, profile, need_actor="proposed" in policies) \
        if any(p in ("proposed", "mcon", "mhid") for p in policies) else None
    run = Run(args, profile, "sweep-kz", inputs=args.params or [])
    n = args.n or profile.train.eval_realizations
    rows = []
    for K in users:
        for Z in groups:
            scfg = replace(profile.scenario, num_users=K, num_groups=Z)
            T = max(profile.train.eval_slots, Z)
            for name in policies:
                pol = make_policy(name, store, scfg, profile.train.cut_trials)
                res = evaluate(pol, scfg, n, T, profile.train.seed, profile.mac, args.threads)
                rows.append((K, Z, name, res.mean_worst, res.mean_total))
    run.write("sweep_kz.csv", _csv_text(("K", "Z", "policy", "mean_worst_case", "mean_total"), rows))
    run.finish()
    return EXIT_OK


def cmd_selftest(args, profile: Profile) -> int:
    """Fast end-to-end sanity checks; prints one line per check."""
    from .actorcritic import actor_loss_grad, init_all
    from .desim import run_sim
    from .maxcut import brute_force_maxcut, cut_value, do_graph_cut
    from .netmodel import ScenarioConfig, build_realization, observe_states
    from .nnkernel import finite_diff_check

    checks = []
    scfg = ScenarioConfig(num_users=4)
    real = generate_realization(scfg, 0)
    store = init_all(scfg.num_aps, 0)
    S = observe_states(real, scfg)
    step = actor_loss_grad(store, S)
    gc = finite_diff_check(lambda: actor_loss_grad(store, S).loss, store.values, step.grads,
                           max_per_entry=5, rng=0)
    checks.append(("actor gradient", gc.max_rel_err < 1e-4, f"max rel err {gc.max_rel_err:.1e}"))

    rng = np.random.default_rng(0)
    W = rng.uniform(size=(6, 6))
    np.fill_diagonal(W, 0)
    _, best = brute_force_maxcut(W, 2)
    got = cut_value(W, do_graph_cut(2, W, rng=0))
    checks.append(("max cut", got >= 0.87854 * best, f"{got:.3f} vs optimum {best:.3f}"))

    one = build_realization(np.array([[400.0, 400.0]]), None, scfg.with_(num_users=1, num_groups=1))
    rep = run_sim(one, np.ones(1, dtype=np.int64), 2000, scfg.with_(num_users=1, num_groups=1))
    checks.append(("single-user rate", abs(rep.r[0] - 0.5) < 0.025, f"r = {rep.r[0]:.4f}"))
    ok = True
    for name, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else 1


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommand copies use SUPPRESS so they never clobber values given
        # before the subcommand name
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g.add_argument("--config", default=d(None),
                       help="TOML profile overriding the shipped defaults")
        g.add_argument("--seed", type=int, default=d(None),
                       help="master seed (overrides [train] seed)")
        g.add_argument("--out", default=d("rawgrl-out"), help="output directory")
        g.add_argument("--threads", type=int, default=d(None),
                       help="worker threads for evaluation sweeps (default: $RAWGRL_THREADS or 1)")
        return g

    common = global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="rawgrl", description=__doc__,
                                parents=[global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="train the inference network")
    s.add_argument("--heldout", type=int, default=50, help="held-out realizations for scoring")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="actor-critic training")
    s.add_argument("--omega", required=True, help="inference-network checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="CDFs of worst-case and per-user throughput")
    s.add_argument("--params", nargs="+", help="checkpoint files (merged)")
    s.add_argument("--policies", help=f"comma-separated subset of {','.join(POLICY_NAMES)}")
    s.add_argument("-n", type=int, help="number of realizations")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("online", parents=[common], help="paired online fine-tuning run")
    s.add_argument("--params", nargs="+", required=True, help="checkpoint files (merged)")
    s.add_argument("--mode", choices=("static", "mobile"), default="static")
    s.add_argument("--updates", type=int, help="number of weight updates")
    s.add_argument("--weights", action="store_true", help="also dump W after every update")
    s.set_defaults(func=cmd_online)

    s = sub.add_parser("sweep-kz", parents=[common], help="grid over user and group counts")
    s.add_argument("--params", nargs="+", help="checkpoint files (merged)")
    s.add_argument("--users", help="comma-separated K values")
    s.add_argument("--groups", help="comma-separated Z values (powers of 2)")
    s.add_argument("--policies", help="comma-separated policies (default: proposed)")
    s.add_argument("-n", type=int, help="realizations per cell")
    s.set_defaults(func=cmd_sweep_kz)

    s = sub.add_parser("selftest", parents=[common], help="quick sanity checks")
    s.set_defaults(func=cmd_selftest)
    return p


def _resolve_threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("RAWGRL_THREADS", "1")
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"RAWGRL_THREADS must be an integer, got {env!r}") from exc
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        profile = load_profile(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            profile = replace(profile, train=replace(profile.train, seed=args.seed))
        args.threads = _resolve_threads(args)
        return args.func(args, profile)
    except (ConfigError, UsageError, UnservableUser) as exc:
        print(f"rawgrl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SdpNotConverged, FloatingPointError) as exc:
        print(f"rawgrl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"rawgrl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, json.JSONDecodeError) as exc:
        print(f"rawgrl: malformed checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
