"""Small numpy neural-network toolkit: dense stacks, GCN layer, Adam, gradient checks."""

from __future__ import annotations

import json
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

SIGMOID_CLAMP = 1e-6


class StaleCacheError(RuntimeError):
    """Backward called with a cache produced before the last parameter update."""


_probe = threading.local()


@contextmanager
def activation_probe():
    """Record the on/off pattern of every ReLU and clamp evaluated in this thread."""
    prev = getattr(_probe, "log", None)
    _probe.log = []
    try:
        yield _probe.log
    finally:
        _probe.log = prev


def _record(mask) -> None:
    log = getattr(_probe, "log", None)
    if log is not None:
        log.append(np.packbits(mask).tobytes())


def relu(x):
    x = np.asarray(x, dtype=float)
    _record(x > 0)
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def sigmoid_inverse(w):
    w = np.asarray(w, dtype=float)
    _record((w < SIGMOID_CLAMP) | (w > 1.0 - SIGMOID_CLAMP))
    w = np.clip(np.asarray(w, dtype=float), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    out = np.log(w) - np.log1p(-w)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LayerSpec:
    dims: tuple
    out_act: str | None = None  # "sigmoid", "relu" or None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 2:
            raise ValueError("a layer stack needs at least input and output widths")
        if self.out_act not in ("sigmoid", "relu", None):
            raise ValueError(f"unknown output activation {self.out_act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1


class ParamStore:
    """Named float64 arrays plus Adam moments and per-entry step counts."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        self.version = 0

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.steps[name] = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.values[name].shape:
            raise ValueError(f"shape of {name!r} is fixed at {self.values[name].shape}")
        self.values[name][...] = value
        self.version += 1

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n in self.values:
            out.values[n] = self.values[n].copy()
            out.m[n] = self.m[n].copy()
            out.v[n] = self.v[n].copy()
            out.steps[n] = self.steps[n]
        return out

    def merge(self, other: "ParamStore") -> "ParamStore":
        """New store holding copies of both stores' entries."""
        out = self.copy()
        o = other.copy()
        for n in o.values:
            if n in out.values:
                raise KeyError(f"duplicate parameter {n!r}")
            out.values[n], out.m[n], out.v[n], out.steps[n] = o.values[n], o.m[n], o.v[n], o.steps[n]
        return out

    def subset(self, prefixes) -> "ParamStore":
        out = ParamStore()
        for n in self.values:
            if any(n.startswith(p) for p in prefixes):
                out.values[n] = self.values[n].copy()
                out.m[n] = self.m[n].copy()
                out.v[n] = self.v[n].copy()
                out.steps[n] = self.steps[n]
        return out

    def to_dict(self) -> dict:
        return {
            n: {
                "shape": list(self.values[n].shape),
                "data": self.values[n].ravel().tolist(),
                "m": self.m[n].ravel().tolist(),
                "v": self.v[n].ravel().tolist(),
                "step": self.steps[n],
            }
            for n in sorted(self.values)
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamStore":
        out = cls()
        for n, e in d.items():
            shape = tuple(e["shape"])
            out.values[n] = np.array(e["data"], dtype=np.float64).reshape(shape)
            out.m[n] = np.array(e.get("m", [0.0] * out.values[n].size), dtype=np.float64).reshape(shape)
            out.v[n] = np.array(e.get("v", [0.0] * out.values[n].size), dtype=np.float64).reshape(shape)
            out.steps[n] = int(e.get("step", 0))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ParamStore":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path) as fh:
            return cls.from_json(fh.read())


# -- dense stacks ------------------------------------------------------------

def init_mlp(store: ParamStore, prefix: str, spec: LayerSpec, rng) -> None:
    """He-uniform for layers feeding a ReLU, Xavier-uniform otherwise; zero biases."""
    rng = np.random.default_rng(rng)
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.dims[i], spec.dims[i + 1]
        last = i == spec.n_layers - 1
        if not last or spec.out_act == "relu":
            bound = math.sqrt(6.0 / fan_in)
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}.W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def _act(name, x):
    if name == "relu":
        return relu(x)
    if name == "sigmoid":
        return sigmoid(x)
    return x


def mlp_forward(store: ParamStore, prefix: str, spec: LayerSpec, x):
    """Forward pass over a batch (rows of ``x``); returns (output, cache)."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != spec.dims[0]:
        raise ValueError(f"{prefix}: expected input width {spec.dims[0]}, got {h.shape[1]}")
    inputs, pre = [], []
    for i in range(spec.n_layers):
        inputs.append(h)
        a = h @ store.values[f"{prefix}.W{i}"] + store.values[f"{prefix}.b{i}"]
        pre.append(a)
        last = i == spec.n_layers - 1
        h = _act(spec.out_act if last else "relu", a)
    cache = {"prefix": prefix, "inputs": inputs, "pre": pre, "out": h, "squeeze": squeeze,
             "version": store.version}
    return (h[0] if squeeze else h), cache


def mlp_backward(store: ParamStore, prefix: str, spec: LayerSpec, cache, dy,
                 wrt_logit: bool = False):
    """Gradients of ``sum(output * dy)``; returns (param grads, input grad).

    With ``wrt_logit`` the upstream gradient is taken to be with respect to the
    final pre-activation, skipping the output activation's derivative.
    """
    if cache["version"] != store.version or cache["prefix"] != prefix:
        raise StaleCacheError(f"cache for {cache['prefix']!r} does not match current parameters")
    dy = np.asarray(dy, dtype=float)
    if cache["squeeze"]:
        dy = dy[None, :]
    grads = {}
    d = dy
    for i in reversed(range(spec.n_layers)):
        last = i == spec.n_layers - 1
        act = spec.out_act if last else "relu"
        if last and wrt_logit:
            pass
        elif act == "relu":
            d = d * (cache["pre"][i] > 0)
        elif act == "sigmoid":
            s = cache["out"] if last else sigmoid(cache["pre"][i])
            d = d * s * (1.0 - s)
        grads[f"{prefix}.W{i}"] = cache["inputs"][i].T @ d
        grads[f"{prefix}.b{i}"] = d.sum(axis=0)
        d = d @ store.values[f"{prefix}.W{i}"].T
    return grads, (d[0] if cache["squeeze"] else d)


# -- graph convolution ---------------------------------------------------------

def gcn_forward(H, G, Theta):
    """ReLU(D^-1/2 (G + I) D^-1/2 H Theta) with D the row sums of G + I."""
    H = np.asarray(H, dtype=float)
    G = np.asarray(G, dtype=float)
    K = G.shape[0]
    A = G + np.eye(K)
    deg = A.sum(axis=1)
    rs = deg ** -0.5
    Ahat = rs[:, None] * A * rs[None, :]
    AH = Ahat @ H
    P = AH @ Theta
    cache = (H, A, deg, rs, Ahat, AH, P, Theta)
    return relu(P), cache


def gcn_backward(cache, dout):
    """Returns (dH, dG, dTheta)."""
    H, A, deg, rs, Ahat, AH, P, Theta = cache
    dP = dout * (P > 0)
    dTheta = AH.T @ dP
    dAH = dP @ Theta.T
    dH = Ahat.T @ dAH
    dAhat = dAH @ H.T
    dA = dAhat * rs[:, None] * rs[None, :]
    t = dAhat * A
    drs = (t * rs[None, :]).sum(axis=1) + (t * rs[:, None]).sum(axis=0)
    ddeg = drs * (-0.5) * deg ** -1.5
    dA = dA + ddeg[:, None]
    return dH, dA, dTheta


# -- optimizers ----------------------------------------------------------------

def adam_step(store: ParamStore, grads: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        p = store.values[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name!r} {p.shape}")
        store.steps[name] += 1
        t = store.steps[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    store.version += 1


def sgd_step(store: ParamStore, grads: dict, lr: float) -> None:
    for name, g in grads.items():
        p = store.values[name]
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match {name!r} {p.shape}")
        store.steps[name] += 1
        p -= lr * np.asarray(g, dtype=float)
    store.version += 1


def optimizer_step(store: ParamStore, grads: dict, lr: float, kind: str = "adam") -> None:
    if kind == "adam":
        adam_step(store, grads, lr)
    elif kind == "sgd":
        sgd_step(store, grads, lr)
    else:
        raise ValueError(f"unknown optimizer {kind!r}")


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_err: float  # every accepted coordinate, after step shrinking
    max_rel_err_clean: float  # coordinates with no kink inside the original step
    n_checked: int
    n_nudged: int  # accepted only after shrinking the step
    n_kinks: int  # excluded: a kink stayed inside every tried step

    def __float__(self):
        return self.max_rel_err


def finite_diff_check(loss_fn, params: dict, analytic: dict, h: float = 1e-5,
                      max_per_entry: int | None = 30, rng=None, floor: float = 1e-6,
                      shrink: tuple = (1.0, 0.1, 0.01)) -> GradCheck:
    """Compare ``analytic`` gradients against central differences of ``loss_fn()``.

    ``params`` maps names to arrays that ``loss_fn`` reads; they are perturbed
    in place and restored. When a perturbation flips any ReLU or clamp the
    step is shrunk by the factors in ``shrink``; coordinates that still
    straddle a kink at the smallest step are excluded and counted.
    """
    rng = np.random.default_rng(rng)
    worst = worst_clean = 0.0
    n_checked = n_nudged = n_kinks = 0
    with activation_probe() as log:
        loss_fn()
        base = list(log)

    def probe():
        with activation_probe() as log:
            val = float(loss_fn())
            return val, list(log)

    for name, grad in analytic.items():
        flat = params[name].reshape(-1)
        g = np.asarray(grad, dtype=float).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_entry is not None and flat.size > max_per_entry:
            idx = rng.choice(flat.size, size=max_per_entry, replace=False)
        for i in idx:
            old = flat[i]
            err = None
            for attempt, factor in enumerate(shrink):
                step = h * factor
                flat[i] = old + step
                fp, pat_p = probe()
                flat[i] = old - step
                fm, pat_m = probe()
                flat[i] = old
                if pat_p != base or pat_m != base:
                    continue
                num = (fp - fm) / (2.0 * step)
                err = abs(num - g[i]) / max(abs(num), abs(g[i]), floor)
                break
            n_checked += 1
            if err is None:
                n_kinks += 1
                continue
            worst = max(worst, err)
            if attempt == 0:
                worst_clean = max(worst_clean, err)
            else:
                n_nudged += 1
    return GradCheck(float(worst), float(worst_clean), n_checked, n_nudged, n_kinks)
