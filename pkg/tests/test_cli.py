import csv
import glob
import json
import os

import pytest

from rawgrl.cli import main

TINY = """
[scenario]
num_users = 4
num_groups = 2

[train]
steps = 3
lr = 1e-3
sim_slots = 10
eval_slots = 10
eval_realizations = 2
checkpoint_every = 2
cut_trials = 2

[online]
window = 10

[run]
online_updates = 3
sweep_users = [3]
sweep_groups = [1, 2]
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    out = root / "run"
    assert main(["--config", str(cfg), "--out", str(out), "pretrain", "--heldout", "2"]) == 0
    assert main(["--config", str(cfg), "--out", str(out), "train",
                 "--omega", str(out / "omega.json")]) == 0
    return cfg, out


def test_pretrain_and_train_outputs(trained):
    cfg, out = trained
    for name in ("omega.json", "pretrain_log.csv", "pretrain_score.json", "actor.json",
                 "critic.json", "train_log.csv"):
        assert (out / name).exists(), name
    assert len(read_rows(out / "train_log.csv")) == 3
    assert len(glob.glob(str(out / "manifest-pretrain-*.json"))) == 1
    assert (out / "checkpoints" / "omega_step2.json").exists()


def test_outputs_are_byte_deterministic(trained, tmp_path):
    cfg, out = trained
    again = tmp_path / "again"
    assert main(["--config", str(cfg), "--out", str(again), "pretrain", "--heldout", "2"]) == 0
    assert main(["--config", str(cfg), "--out", str(again), "train",
                 "--omega", str(again / "omega.json")]) == 0
    for name in ("omega.json", "pretrain_log.csv", "actor.json", "critic.json", "train_log.csv"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_eval_single_realization(trained, tmp_path):
    cfg, out = trained
    dest = tmp_path / "eval"
    code = main(["--config", str(cfg), "--out", str(dest), "eval", "-n", "1",
                 "--params", str(out / "actor.json")])
    assert code == 0
    summary = json.loads((dest / "summary.json").read_text())
    assert set(summary) == {"proposed", "rand", "unif", "mcon", "mhid", "mint"}
    rows = read_rows(dest / "cdf_proposed.csv")
    assert [r["metric"] for r in rows].count("worst_case") == 1
    assert [r["metric"] for r in rows].count("per_user") == 4


def test_online_static_and_mobile(trained, tmp_path):
    cfg, out = trained
    params = [str(out / "actor.json"), str(out / "critic.json")]
    manifests = []
    for mode in ("static", "mobile"):
        dest = tmp_path / mode
        assert main(["--config", str(cfg), "--out", str(dest), "online", "--mode", mode,
                     "--weights", "--params", *params]) == 0
        assert len(read_rows(dest / "online_tuned.csv")) == 3
        assert len(read_rows(dest / "online_ratio.csv")) == 3
        assert len(json.loads((dest / "online_weights.json").read_text())) == 3
        (m,) = glob.glob(str(dest / "manifest-online-*.json"))
        manifests.append(json.loads(open(m).read()))
    assert manifests[0]["mode"] == "static" and manifests[1]["mode"] == "mobile"
    assert manifests[1]["config"]["scenario"]["mobility_speed"] > 0


def test_sweep_row_count(trained, tmp_path):
    cfg, out = trained
    dest = tmp_path / "sweep"
    assert main(["--config", str(cfg), "--out", str(dest), "sweep-kz", "-n", "1",
                 "--params", str(out / "actor.json"), "--users", "3,5",
                 "--groups", "1,2,4", "--policies", "proposed,rand"]) == 0
    assert len(read_rows(dest / "sweep_kz.csv")) == 2 * 3 * 2


def test_selftest(capsys, tmp_path):
    assert main(["--out", str(tmp_path), "selftest"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all(line.startswith("PASS") for line in lines)


def test_missing_config_is_usage_error(tmp_path):
    assert main(["--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path), "selftest"]) == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nsteps = 1\nbogus = 2\n")
    assert main(["--config", str(cfg), "--out", str(tmp_path), "selftest"]) == 2


def test_bad_policy(tmp_path):
    assert main(["--out", str(tmp_path), "eval", "--policies", "greedy", "-n", "1"]) == 2


def test_non_power_of_two_groups(trained, tmp_path):
    cfg, _ = trained
    assert main(["--config", str(cfg), "--out", str(tmp_path), "sweep-kz", "--groups", "3",
                 "--policies", "rand"]) == 2


def test_checkpoint_for_other_ap_count(trained, tmp_path):
    _, out = trained
    cfg = tmp_path / "three.toml"
    cfg.write_text(TINY.replace("[scenario]", "[scenario]\nap_positions = "
                                "[[500.0, 500.0], [-500.0, 500.0], [0.0, -500.0]]"))
    assert main(["--config", str(cfg), "--out", str(tmp_path), "eval", "-n", "1",
                 "--params", str(out / "actor.json")]) == 2
    assert main(["--config", str(cfg), "--out", str(tmp_path), "train",
                 "--omega", str(out / "omega.json")]) == 2


def test_online_needs_critic(trained, tmp_path):
    cfg, out = trained
    assert main(["--config", str(cfg), "--out", str(tmp_path), "online",
                 "--params", str(out / "actor.json")]) == 2


def test_missing_checkpoint_is_io_error(trained, tmp_path):
    cfg, _ = trained
    assert main(["--config", str(cfg), "--out", str(tmp_path), "train",
                 "--omega", str(tmp_path / "missing.json")]) == 3


def test_thread_env_fallback(trained, tmp_path, monkeypatch):
    cfg, _ = trained
    monkeypatch.setenv("RAWGRL_THREADS", "two")
    assert main(["--config", str(cfg), "--out", str(tmp_path), "eval", "--policies", "rand",
                 "-n", "1"]) == 2
    monkeypatch.setenv("RAWGRL_THREADS", "2")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(cfg), "--out", str(a), "eval", "--policies", "rand", "-n", "3"]) == 0
    monkeypatch.delenv("RAWGRL_THREADS")
    assert main(["--config", str(cfg), "--out", str(b), "eval", "--policies", "rand", "-n", "3"]) == 0
    assert (a / "cdf_rand.csv").read_bytes() == (b / "cdf_rand.csv").read_bytes()


def test_seed_flag_changes_outputs(trained, tmp_path):
    cfg, _ = trained
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(cfg), "--out", str(a), "eval", "--policies", "rand", "-n", "3"]) == 0
    assert main(["--config", str(cfg), "--out", str(b), "--seed", "7", "eval",
                 "--policies", "rand", "-n", "3"]) == 0
    assert (a / "cdf_rand.csv").read_bytes() != (b / "cdf_rand.csv").read_bytes()
    assert not os.path.exists(tmp_path / "rawgrl-out")
