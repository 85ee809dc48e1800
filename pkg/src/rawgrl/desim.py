"""Slotted CSMA/CA simulator for RAW-grouped uplink traffic.

Each RAW slot belongs to one group; inside a slot the group's users run DCF
(DIFS, random backoff frozen while the medium is sensed busy, data, SIFS,
ACK). Carrier sensing is binary at the sensing threshold, so users hidden
from each other can overlap and interfere at the receiving AP. Each
reception succeeds with probability ``1 - eps`` where ``eps`` is the
finite-blocklength error probability at the worst SINR seen during the data
portion of the transmission.

The inner loop is event driven (jumps between DIFS/backoff expiries,
transmission ends and arrivals) and compiled with numba.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numba
import numpy as np

from .netmodel import NetworkRealization, ScenarioConfig

_ARRIVAL_BLOCK = 64


@dataclass(frozen=True)
class MacConfig:
    cw_min: int = 15
    cw_max: int = 1023
    mac_slot: float = 52e-6
    difs: float = 264e-6
    sifs: float = 160e-6
    ack_duration: float = 240e-6
    max_retries: int = 7
    # False: a transmission that cannot finish before the RAW slot ends waits
    # for the group's next slot. True: it may run past the boundary.
    allow_straddle: bool = False

    def __post_init__(self):
        if not 0 <= self.cw_min <= self.cw_max:
            raise ValueError("need 0 <= cw_min <= cw_max")
        for name in ("mac_slot", "difs", "sifs", "ack_duration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class ThroughputReport:
    u: np.ndarray  # K x T successes per RAW slot
    r: np.ndarray  # K, packets per slot
    arrived: np.ndarray
    delivered: np.ndarray
    queued: np.ndarray
    dropped_overflow: np.ndarray
    dropped_retry: np.ndarray
    attempts: np.ndarray
    collisions: np.ndarray  # failures overlapping only with sensed users
    interference_failures: np.ndarray  # failures overlapping a hidden user
    channel_failures: np.ndarray  # failures with no overlap

    @property
    def drops(self) -> np.ndarray:
        return self.dropped_overflow + self.dropped_retry

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user", "slot", "successes"])
        K, T = self.u.shape
        for k in range(K):
            for t in range(T):
                w.writerow([k, t, int(self.u[k, t])])
        return buf.getvalue()

    def summary_json(self) -> str:
        d = {
            "r": self.r.tolist(),
            "min_r": float(self.r.min()),
            "mean_r": float(self.r.mean()),
        }
        for name in ("arrived", "delivered", "queued", "dropped_overflow", "dropped_retry",
                     "attempts", "collisions", "interference_failures", "channel_failures"):
            d[name] = getattr(self, name).tolist()
        return json.dumps(d, sort_keys=True)


def sinr_at_ap(real: NetworkRealization, tx_user: int, concurrent_users, ap: int,
               cfg: ScenarioConfig) -> float:
    """Linear SINR of ``tx_user`` at ``ap`` with ``concurrent_users`` transmitting."""
    sig = 10.0 ** ((cfg.tx_power_dbm - real.user_ap_loss[tx_user, ap]) / 10.0)
    noise = 10.0 ** (cfg.noise_dbm / 10.0)
    interf = sum(10.0 ** ((cfg.tx_power_dbm - real.user_ap_loss[j, ap]) / 10.0)
                 for j in concurrent_users if j != tx_user)
    return sig / (noise + interf)


def rx_power_matrix(real: NetworkRealization, cfg: ScenarioConfig) -> np.ndarray:
    """``P[j, k]``: power (mW) of user j at the AP user k transmits to."""
    loss = real.user_ap_loss[:, real.assoc]  # [j, k] -> loss from j to assoc(k)
    return 10.0 ** ((cfg.tx_power_dbm - loss) / 10.0)


@numba.njit(cache=True)
def _error_prob(snr, d, L, B):
    n = d * B
    disp = 1.0 - 1.0 / ((1.0 + snr) * (1.0 + snr))
    if disp <= 0.0:
        return 1.0
    arg = (-L * math.log(2.0) + n * math.log1p(snr)) / math.sqrt(n * disp)
    return 0.5 * math.erfc(arg / math.sqrt(2.0))


@numba.njit(cache=True)
def _take_arrivals(k, t0, now, arr, ptr, q, cap, txing, retry, cw, cw_min, arrived, dropped_ovf):
    # same arithmetic as the arrival event time, so an event at ``now`` is always taken
    while ptr[k] < arr.shape[1] and arr[k, ptr[k]] - t0 <= now:
        arrived[k] += 1
        if q[k] < cap:
            q[k] += 1
        else:
            # queue full: the oldest packet goes; if it was the head-of-line
            # packet (not on air), its retry state goes with it
            dropped_ovf[k] += 1
            if not txing[k]:
                retry[k] = 0
                cw[k] = cw_min
        ptr[k] += 1


@numba.njit(cache=True, nogil=True)
def _simulate(z, n_groups, t_first, n_slots, slot_us, difs_us, sifs_us, ack_us, mac_us,
              cw_min, cw_max, max_retries, cap, straddle, dur_us, sense, power, noise,
              L, B, arr, ptr, q, retry, cw, backoff, arrived, delivered, dropped_ovf,
              dropped_retry, attempts, collisions, interf_fail, channel_fail, u, rng):
    K = z.shape[0]
    members = np.empty(K, dtype=np.int64)
    starters = np.empty(K, dtype=np.int64)
    txing = np.zeros(K, dtype=np.bool_)
    deferred = np.zeros(K, dtype=np.bool_)
    busy = np.zeros(K, dtype=np.bool_)
    difs_rem = np.zeros(K)
    data_end = np.zeros(K)
    tx_end = np.zeros(K)
    min_sinr = np.zeros(K)
    hit_hidden = np.zeros(K, dtype=np.bool_)
    hit_sensed = np.zeros(K, dtype=np.bool_)
    inf = np.inf

    for ts in range(n_slots):
        t = t_first + ts
        g = (t % n_groups) + 1
        # event times are kept relative to the slot start so countdown
        # residues stay far above float resolution however long the run
        t0 = float(t) * slot_us
        t_end = slot_us
        for k in range(K):
            txing[k] = False
            _take_arrivals(k, t0, 0.0, arr, ptr, q, cap, txing, retry, cw, cw_min, arrived,
                           dropped_ovf)
        nm = 0
        for k in range(K):
            if z[k] == g:
                members[nm] = k
                nm += 1
        if nm == 0:
            continue
        for m in range(nm):
            k = members[m]
            deferred[k] = False
            difs_rem[k] = difs_us
            if q[k] > 0 and backoff[k] < 0:
                backoff[k] = rng.integers(0, cw[k] + 1) * mac_us
        now = 0.0
        while True:
            # medium state seen by each member
            for m in range(nm):
                k = members[m]
                b = False
                for mm in range(nm):
                    j = members[mm]
                    if j != k and txing[j] and sense[k, j]:
                        b = True
                        break
                busy[k] = b
                if b:
                    difs_rem[k] = difs_us
            # next event
            ev = inf
            active = False
            for m in range(nm):
                k = members[m]
                if txing[k]:
                    active = True
                    e = data_end[k] if now < data_end[k] else tx_end[k]
                    if e < ev:
                        ev = e
                elif q[k] > 0:
                    if not deferred[k] and not busy[k] and now < t_end:
                        e = now + difs_rem[k] + backoff[k]
                        if e < ev:
                            ev = e
                elif ptr[k] < arr.shape[1] and now < t_end:
                    e = arr[k, ptr[k]] - t0
                    if e < ev:
                        ev = e
            if not active:
                if ev >= t_end:
                    break
            elif not straddle and ev > t_end:
                ev = t_end
            # advance countdowns
            dt = ev - now
            for m in range(nm):
                k = members[m]
                if txing[k] or q[k] == 0 or deferred[k] or busy[k]:
                    continue
                if difs_rem[k] >= dt:
                    difs_rem[k] -= dt
                    if difs_rem[k] < 1e-9:
                        difs_rem[k] = 0.0
                else:
                    backoff[k] -= dt - difs_rem[k]
                    difs_rem[k] = 0.0
                    if backoff[k] < 1e-9:
                        backoff[k] = 0.0
            now = ev
            for m in range(nm):
                k = members[m]
                _take_arrivals(k, t0, now, arr, ptr, q, cap, txing, retry, cw, cw_min, arrived,
                               dropped_ovf)
                if q[k] > 0 and backoff[k] < 0:
                    backoff[k] = rng.integers(0, cw[k] + 1) * mac_us
            # completed exchanges
            for m in range(nm):
                k = members[m]
                if not txing[k] or tx_end[k] > now:
                    continue
                txing[k] = False
                difs_rem[k] = difs_us
                eps = _error_prob(min_sinr[k], dur_us[k] * 1e-6, L, B)
                if rng.random() >= eps:
                    u[k, ts] += 1
                    delivered[k] += 1
                    q[k] -= 1
                    retry[k] = 0
                    cw[k] = cw_min
                else:
                    if hit_hidden[k]:
                        interf_fail[k] += 1
                    elif hit_sensed[k]:
                        collisions[k] += 1
                    else:
                        channel_fail[k] += 1
                    retry[k] += 1
                    if retry[k] > max_retries:
                        dropped_retry[k] += 1
                        q[k] -= 1
                        retry[k] = 0
                        cw[k] = cw_min
                    else:
                        cw[k] = min(2 * cw[k] + 1, cw_max)
                backoff[k] = -1.0
                if q[k] > 0:
                    backoff[k] = rng.integers(0, cw[k] + 1) * mac_us
            # transmission starts (everyone whose countdown expired now)
            started = False
            if now < t_end:
                ns = 0
                for m in range(nm):
                    k = members[m]
                    if txing[k] or q[k] == 0 or deferred[k] or difs_rem[k] > 0 or backoff[k] > 0:
                        continue
                    blocked = False
                    for mm in range(nm):
                        j = members[mm]
                        if j != k and txing[j] and sense[k, j]:
                            blocked = True
                            break
                    if blocked:
                        continue
                    if not straddle and now + dur_us[k] + sifs_us + ack_us > t_end:
                        deferred[k] = True
                        continue
                    starters[ns] = k
                    ns += 1
                for m in range(ns):
                    k = starters[m]
                    txing[k] = True
                    data_end[k] = now + dur_us[k]
                    tx_end[k] = data_end[k] + sifs_us + ack_us
                    min_sinr[k] = inf
                    hit_hidden[k] = False
                    hit_sensed[k] = False
                    attempts[k] += 1
                    started = True
            if started:
                # interference only grows when a data portion starts
                for m in range(nm):
                    k = members[m]
                    if not txing[k] or now >= data_end[k]:
                        continue
                    acc = 0.0
                    for mm in range(nm):
                        j = members[mm]
                        if j != k and txing[j] and now < data_end[j]:
                            acc += power[j, k]
                            if sense[k, j]:
                                hit_sensed[k] = True
                            else:
                                hit_hidden[k] = True
                    s = power[k, k] / (noise + acc)
                    if s < min_sinr[k]:
                        min_sinr[k] = s


class Simulator:
    """Stateful simulator; queues and MAC state persist across ``run`` calls."""

    def __init__(self, real: NetworkRealization, cfg: ScenarioConfig, mac: MacConfig = MacConfig(),
                 seed=0):
        self.cfg = cfg
        self.mac = mac
        K = real.num_users
        if isinstance(seed, np.random.SeedSequence):
            # fresh copy: spawning mutates the caller's sequence
            ss = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
        else:
            ss = np.random.SeedSequence(seed)
        mac_ss, arr_ss = ss.spawn(2)
        self._rng = np.random.default_rng(mac_ss)
        # one arrival stream per user keeps arrivals identical across groupings
        self._arr_rngs = [np.random.default_rng(s) for s in arr_ss.spawn(K)]
        self._arr_buf = [np.empty(0) for _ in range(K)]
        self._arr_last = np.zeros(K)
        self.t = 0
        i64 = np.int64
        self.q = np.zeros(K, i64)
        self.retry = np.zeros(K, i64)
        self.cw = np.full(K, mac.cw_min, i64)
        self.backoff = np.full(K, -1.0)
        self.arrived = np.zeros(K, i64)
        self.delivered = np.zeros(K, i64)
        self.dropped_overflow = np.zeros(K, i64)
        self.dropped_retry = np.zeros(K, i64)
        self.attempts = np.zeros(K, i64)
        self.collisions = np.zeros(K, i64)
        self.interference_failures = np.zeros(K, i64)
        self.channel_failures = np.zeros(K, i64)
        self.set_realization(real)

    @property
    def num_users(self) -> int:
        return self.q.shape[0]

    def set_realization(self, real: NetworkRealization):
        if real.num_users != self.q.shape[0]:
            raise ValueError("user count cannot change")
        cfg = self.cfg
        self.real = real
        self._dur_us = np.round(real.packet_duration * 1e6)
        self._sense = real.user_user_loss <= cfg.sense_threshold_db
        np.fill_diagonal(self._sense, False)
        self._power = rx_power_matrix(real, cfg)

    def _arrivals_until(self, horizon_us: float) -> np.ndarray:
        mean_us = self.cfg.arrival_interval * 1e6
        K = self.num_users
        for k in range(K):
            while self._arr_last[k] <= horizon_us:
                # size the block to the expected shortfall so dense traffic stays linear
                need = (horizon_us - self._arr_last[k]) / mean_us
                n = max(_ARRIVAL_BLOCK, int(need + 4.0 * math.sqrt(need) + 1))
                gaps = self._arr_rngs[k].exponential(mean_us, size=n)
                times = self._arr_last[k] + np.cumsum(gaps)
                self._arr_buf[k] = np.concatenate([self._arr_buf[k], times])
                self._arr_last[k] = times[-1]
        n = max(len(b) for b in self._arr_buf)
        out = np.full((K, n), np.inf)
        for k, b in enumerate(self._arr_buf):
            out[k, : len(b)] = b
        return out

    def run(self, z, n_slots: int) -> np.ndarray:
        """Simulate ``n_slots`` RAW slots under grouping ``z``; returns K x n successes."""
        cfg, mac = self.cfg, self.mac
        z = np.asarray(z, dtype=np.int64)
        K = self.num_users
        if z.shape != (K,):
            raise ValueError(f"grouping must have shape ({K},)")
        if np.any(z < 1) or np.any(z > cfg.num_groups):
            raise ValueError(f"group labels must lie in 1..{cfg.num_groups}")
        slot_us = cfg.raw_slot * 1e6
        arr = self._arrivals_until((self.t + n_slots + 1) * slot_us)
        ptr = np.zeros(K, np.int64)
        u = np.zeros((K, n_slots), np.int64)
        _simulate(
            z, cfg.num_groups, self.t, n_slots, slot_us,
            round(mac.difs * 1e6), round(mac.sifs * 1e6), round(mac.ack_duration * 1e6),
            round(mac.mac_slot * 1e6), mac.cw_min, mac.cw_max, mac.max_retries,
            cfg.queue_capacity, mac.allow_straddle, self._dur_us, self._sense, self._power,
            10.0 ** (cfg.noise_dbm / 10.0), float(cfg.packet_bits), cfg.bandwidth,
            arr, ptr, self.q, self.retry, self.cw, self.backoff, self.arrived, self.delivered,
            self.dropped_overflow, self.dropped_retry, self.attempts, self.collisions,
            self.interference_failures, self.channel_failures, u, self._rng,
        )
        for k in range(K):
            self._arr_buf[k] = self._arr_buf[k][ptr[k]:]
        self.t += n_slots
        return u

    def report(self, u: np.ndarray) -> ThroughputReport:
        return ThroughputReport(
            u=u,
            r=u.sum(axis=1) / u.shape[1],
            arrived=self.arrived.copy(),
            delivered=self.delivered.copy(),
            queued=self.q.copy(),
            dropped_overflow=self.dropped_overflow.copy(),
            dropped_retry=self.dropped_retry.copy(),
            attempts=self.attempts.copy(),
            collisions=self.collisions.copy(),
            interference_failures=self.interference_failures.copy(),
            channel_failures=self.channel_failures.copy(),
        )


def run_sim(real: NetworkRealization, z, T: int, cfg: ScenarioConfig,
            mac: MacConfig = MacConfig(), seed=0) -> ThroughputReport:
    if T < cfg.num_groups:
        raise ValueError(f"T={T} must be at least Z={cfg.num_groups}")
    sim = Simulator(real, cfg, mac, seed)
    u = sim.run(z, T)
    return sim.report(u)
