"""Low-level numeric kernels: activations, GRU cell, optimizer, checkpoints.

Everything operates on float64 numpy arrays. Parameters live in a flat
``dict[str, np.ndarray]`` keyed by dotted names ("his_gru.wz", ...); gradient
dicts mirror that layout. All backward functions are hand-derived and are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ValidationError

Params = dict[str, np.ndarray]
Grads = dict[str, np.ndarray]

CHECKPOINT_FORMAT = "grouptopo-checkpoint-v1"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.Philox(seed))


def accumulate(grads: Grads, name: str, value: np.ndarray) -> None:
    """Add ``value`` into ``grads[name]``, creating the slot if needed."""
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# Activations.


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its output ``y``."""
    return grad_out * y * (1.0 - y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad_out, 0.0)


def softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Affine layers.


def affine(params: Mapping[str, np.ndarray], prefix: str, x: np.ndarray) -> np.ndarray:
    """Compute ``W @ x + b`` for the weight pair stored under ``prefix``."""
    return params[f"{prefix}.w"] @ x + params[f"{prefix}.b"]


def affine_backward(
    params: Mapping[str, np.ndarray],
    prefix: str,
    x: np.ndarray,
    grad_out: np.ndarray,
    grads: Grads,
) -> np.ndarray:
    """Accumulate weight gradients for an affine layer; return grad wrt x."""
    accumulate(grads, f"{prefix}.w", np.outer(grad_out, x))
    accumulate(grads, f"{prefix}.b", grad_out)
    return params[f"{prefix}.w"].T @ grad_out


# ---------------------------------------------------------------------------
# GRU cell.
#
# Convention (fixed across the package):
#   z = sigmoid(Wz x + Uz h + bz)          update gate
#   r = sigmoid(Wr x + Ur h + br)          reset gate
#   n = tanh(Wn x + r * (Un h) + bn)       candidate state
#   h' = (1 - z) * n + z * h
# With all weights zero this yields h' = 0.5 * h.

GRU_SUFFIXES = ("wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn")


@dataclass
class GruCache:
    x: np.ndarray
    h: np.ndarray
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray
    un_h: np.ndarray


def gru_step(
    params: Mapping[str, np.ndarray], prefix: str, x: np.ndarray, h: np.ndarray
) -> tuple[np.ndarray, GruCache]:
    """One GRU transition. Returns the next state and a backward cache."""
    p = params
    z = sigmoid(p[f"{prefix}.wz"] @ x + p[f"{prefix}.uz"] @ h + p[f"{prefix}.bz"])
    r = sigmoid(p[f"{prefix}.wr"] @ x + p[f"{prefix}.ur"] @ h + p[f"{prefix}.br"])
    un_h = p[f"{prefix}.un"] @ h
    n = np.tanh(p[f"{prefix}.wn"] @ x + r * un_h + p[f"{prefix}.bn"])
    h_next = (1.0 - z) * n + z * h
    return h_next, GruCache(x=x, h=h, z=z, r=r, n=n, un_h=un_h)


def gru_backward(
    params: Mapping[str, np.ndarray],
    prefix: str,
    cache: GruCache,
    grad_h_next: np.ndarray,
    grads: Grads,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward through one GRU transition.

    Accumulates parameter gradients into ``grads`` and returns
    ``(grad_x, grad_h)`` for the cell inputs.
    """
    p = params
    x, h, z, r, n, un_h = cache.x, cache.h, cache.z, cache.r, cache.n, cache.un_h

    grad_n = grad_h_next * (1.0 - z)
    grad_z = grad_h_next * (h - n)
    grad_h = grad_h_next * z

    # Candidate branch: n = tanh(an), an = Wn x + r * un_h + bn.
    grad_an = grad_n * (1.0 - n * n)
    accumulate(grads, f"{prefix}.wn", np.outer(grad_an, x))
    accumulate(grads, f"{prefix}.bn", grad_an)
    grad_x = p[f"{prefix}.wn"].T @ grad_an
    grad_r = grad_an * un_h
    grad_un_h = grad_an * r
    accumulate(grads, f"{prefix}.un", np.outer(grad_un_h, h))
    grad_h = grad_h + p[f"{prefix}.un"].T @ grad_un_h

    grad_az = sigmoid_backward(z, grad_z)
    accumulate(grads, f"{prefix}.wz", np.outer(grad_az, x))
    accumulate(grads, f"{prefix}.uz", np.outer(grad_az, h))
    accumulate(grads, f"{prefix}.bz", grad_az)
    grad_x = grad_x + p[f"{prefix}.wz"].T @ grad_az
    grad_h = grad_h + p[f"{prefix}.uz"].T @ grad_az

    grad_ar = sigmoid_backward(r, grad_r)
    accumulate(grads, f"{prefix}.wr", np.outer(grad_ar, x))
    accumulate(grads, f"{prefix}.ur", np.outer(grad_ar, h))
    accumulate(grads, f"{prefix}.br", grad_ar)
    grad_x = grad_x + p[f"{prefix}.wr"].T @ grad_ar
    grad_h = grad_h + p[f"{prefix}.ur"].T @ grad_ar

    return grad_x, grad_h


def init_gru(rng: np.random.Generator, dim: int) -> dict[str, np.ndarray]:
    """Fresh GRU weights for equal input/state size ``dim``."""
    scale = 1.0 / np.sqrt(dim)
    out: dict[str, np.ndarray] = {}
    for gate in ("z", "r", "n"):
        out[f"w{gate}"] = rng.normal(0.0, scale, size=(dim, dim))
        out[f"u{gate}"] = rng.normal(0.0, scale, size=(dim, dim))
        out[f"b{gate}"] = np.zeros(dim)
    return out


def init_matrix(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))


# ---------------------------------------------------------------------------
# AdamW with global-norm clipping.


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the step counter."""

    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Params) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def adamw_step(
    params: Params,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    *,
    lr: float,
    weight_decay: float = 0.0,
    clip_norm: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> float:
    """Apply one decoupled-weight-decay Adam update in place.

    Gradients are first clipped jointly to ``clip_norm`` (global L2 norm);
    weight decay multiplies the parameter directly rather than entering the
    moment estimates. Returns the pre-clip global gradient norm.

    Raises:
        ValidationError: if any gradient is non-finite, naming the parameter.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter '{name}'")
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient for parameter '{name}'")

    norm = global_grad_norm(grads)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm > 0.0:
        scale = clip_norm / norm

    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        else:
            g = g * scale
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        p -= lr * (update + weight_decay * p)
    return norm


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_checked: int


def finite_diff_check(
    loss_fn: Callable[[Params], float],
    params: Params,
    grads: Mapping[str, np.ndarray],
    *,
    step: float = 1e-5,
    floor: float = 1e-8,
    names: Iterable[str] | None = None,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be a deterministic function of the parameter dict.
    Relative error per coordinate is |a - f| / max(|a|, |f|, floor). When
    ``sample`` is given, that many coordinates per tensor are spot-checked
    instead of the full sweep.
    """
    worst = 0.0
    worst_param = ""
    worst_index: tuple[int, ...] = ()
    checked = 0
    selected = list(names) if names is not None else sorted(params)
    for name in selected:
        p = params[name]
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(p)
        coords = np.arange(p.size)
        if sample is not None and sample < p.size:
            if rng is None:
                rng = make_rng(0)
            coords = rng.choice(p.size, size=sample, replace=False)
        for idx in coords:
            multi = np.unravel_index(idx, p.shape)
            original = p[multi]
            p[multi] = original + step
            f_plus = loss_fn(params)
            p[multi] = original - step
            f_minus = loss_fn(params)
            p[multi] = original
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[multi])
            rel = abs(a - fd) / max(abs(a), abs(fd), floor)
            checked += 1
            if rel > worst:
                worst = rel
                worst_param = name
                worst_index = tuple(int(i) for i in multi)
    return FiniteDiffReport(
        max_rel_err=worst,
        worst_param=worst_param,
        worst_index=worst_index,
        n_checked=checked,
    )


# ---------------------------------------------------------------------------
# Checkpoint IO. Arrays round-trip bit-exact (float64, no pickling).


def save_checkpoint(
    path: str | os.PathLike,
    params: Params,
    config: Mapping[str, object],
    opt_state: OptimizerState | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {
        "meta/format": np.array(CHECKPOINT_FORMAT),
        "meta/config": np.array(json.dumps(dict(config), sort_keys=True)),
    }
    for name, p in params.items():
        arrays[f"param/{name}"] = np.asarray(p, dtype=np.float64)
    if opt_state is not None:
        arrays["opt/step"] = np.array(opt_state.step, dtype=np.int64)
        for name, m in opt_state.m.items():
            arrays[f"opt/m/{name}"] = np.asarray(m, dtype=np.float64)
        for name, v in opt_state.v.items():
            arrays[f"opt/v/{name}"] = np.asarray(v, dtype=np.float64)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(
    path: str | os.PathLike,
) -> tuple[Params, OptimizerState | None, dict]:
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns ``(params, opt_state, config)``; ``opt_state`` is None for
    checkpoints saved without optimizer moments.
    """
    if not os.path.exists(path):
        raise ValidationError(f"checkpoint not found: {os.fspath(path)}")
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"unreadable checkpoint {os.fspath(path)}: {exc}") from exc
    with data:
        keys = set(data.files)
        if "meta/format" not in keys or str(data["meta/format"]) != CHECKPOINT_FORMAT:
            raise ValidationError(f"not a recognized checkpoint: {os.fspath(path)}")
        config = json.loads(str(data["meta/config"]))
        params: Params = {}
        opt_m: Params = {}
        opt_v: Params = {}
        for key in keys:
            if key.startswith("param/"):
                params[key[len("param/") :]] = np.array(data[key], dtype=np.float64)
            elif key.startswith("opt/m/"):
                opt_m[key[len("opt/m/") :]] = np.array(data[key], dtype=np.float64)
            elif key.startswith("opt/v/"):
                opt_v[key[len("opt/v/") :]] = np.array(data[key], dtype=np.float64)
        opt_state = None
        if "opt/step" in keys:
            if set(opt_m) != set(params) or set(opt_v) != set(params):
                raise ValidationError("optimizer state does not match parameters")
            opt_state = OptimizerState(m=opt_m, v=opt_v, step=int(data["opt/step"]))
    return params, opt_state, config
