"""Numeric substrate: parameter registry, Adam, finite differences, projector.

Tensors are plain numpy arrays (row-major, float64 in tests, float32 allowed
for training). Every learnable module in the package ships a hand-derived
backward pass; ``finite_diff_grad`` plus ``max_rel_err`` form the oracle those
passes are checked against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, FormatError, NonFiniteGradient

CHECKPOINT_MAGIC = b"GSCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not (0.0 < b < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


class ParamStore:
    """Named parameters with aligned gradient and Adam moment buffers.

    Parameters keep the dtype they are registered with; the optimizer and
    gradient buffers match it. ``t`` counts completed optimizer steps.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"parameter '{name}' already registered")
        value = np.asarray(value)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name: str, grad: np.ndarray):
        if grad.shape != self.params[name].shape:
            raise DimensionMismatch(
                f"gradient for '{name}' has shape {grad.shape}, "
                f"parameter has {self.params[name].shape}")
        self.grads[name] += grad

    def n_scalars(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self, include_optimizer: bool = True) -> dict[str, np.ndarray]:
        """Flat name -> array view of the store, moments under .m / .v."""
        out: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            out[name] = p
        if include_optimizer:
            for name in self.params:
                out[name + ".m"] = self.m[name]
                out[name + ".v"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        """Restore parameter values (and moments when present) by name."""
        for name, p in self.params.items():
            if name not in arrays:
                raise FormatError(f"checkpoint is missing parameter '{name}'")
            a = arrays[name]
            if a.shape != p.shape:
                raise DimensionMismatch(
                    f"checkpoint array '{name}' has shape {a.shape}, "
                    f"expected {p.shape}")
            p[...] = a.astype(p.dtype)
            for suffix, dest in ((".m", self.m), (".v", self.v)):
                if name + suffix in arrays:
                    dest[name][...] = arrays[name + suffix].astype(p.dtype)


def adam_step(store: ParamStore, cfg: AdamConfig):
    """Bias-corrected Adam update in place; zeroes gradients, increments t.

    All gradients are scanned before any parameter moves, so a non-finite
    gradient aborts the step without partial updates.
    """
    for name, g in store.grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter '{name}'")

    t = store.t + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        if cfg.weight_decay != 0.0:
            g = g + cfg.weight_decay * p
        m = store.m[name]
        v = store.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    store.t = t
    store.zero_grads()


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Works on a private copy of ``x`` so callers that alias it (for example a
    probe closure restoring a parameter from the same array) stay unharmed.
    """
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for k in range(x.size):
        orig = xf[k]
        xf[k] = orig + h
        fp = float(f(x))
        xf[k] = orig - h
        fm = float(f(x))
        xf[k] = orig
        flat[k] = (fp - fm) / (2.0 * h)
    return out


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest element-wise relative error, floored denominator 1e-8."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionMismatch(f"shapes {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


# ---------------------------------------------------------------------------
# Projection head: Linear(C -> C) -> ReLU -> Linear(C -> D_proj)

PROJECTOR_DIM = 128


def init_projector(store: ParamStore, c_in: int, d_proj: int,
                   rng: np.random.Generator, prefix: str = "proj.",
                   dtype=np.float64):
    """Register projector weights (He-scaled) and zero biases."""
    w1 = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_in))
    w2 = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, d_proj))
    store.add(prefix + "w1", w1.astype(dtype))
    store.add(prefix + "b1", np.zeros(c_in, dtype=dtype))
    store.add(prefix + "w2", w2.astype(dtype))
    store.add(prefix + "b2", np.zeros(d_proj, dtype=dtype))


def mlp_projector_forward(x: np.ndarray, params: dict[str, np.ndarray],
                          prefix: str = "proj.") -> tuple[np.ndarray, dict]:
    """Two-layer perceptron x @ w1 + b1 -> ReLU -> @ w2 + b2.

    Accepts a single vector or a batch of row vectors; returns the output in
    the same arrangement plus a cache for the backward pass.
    """
    w1 = params[prefix + "w1"]
    b1 = params[prefix + "b1"]
    w2 = params[prefix + "w2"]
    b2 = params[prefix + "b2"]
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != w1.shape[0]:
        raise DimensionMismatch(
            f"projector input has shape {x.shape}, expected (*, {w1.shape[0]})")
    h = xb @ w1 + b1
    a = np.maximum(h, 0.0)
    z = a @ w2 + b2
    cache = {"x": xb, "h": h, "a": a, "w1": w1, "w2": w2,
             "single": single, "prefix": prefix}
    return (z[0] if single else z), cache


def mlp_projector_backward(grad_out: np.ndarray, cache: dict
                           ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Exact gradients of the projector w.r.t. input and parameters."""
    prefix = cache["prefix"]
    dz = np.asarray(grad_out)
    if cache["single"]:
        dz = dz[None, :]
    a, h, xb = cache["a"], cache["h"], cache["x"]
    w1, w2 = cache["w1"], cache["w2"]
    if dz.shape != (xb.shape[0], w2.shape[1]):
        raise DimensionMismatch(
            f"grad_out has shape {grad_out.shape}, "
            f"expected ({xb.shape[0]}, {w2.shape[1]})")
    dw2 = a.T @ dz
    db2 = dz.sum(axis=0)
    da = dz @ w2.T
    dh = da * (h > 0.0)
    dw1 = xb.T @ dh
    db1 = dh.sum(axis=0)
    dx = dh @ w1.T
    grads = {prefix + "w1": dw1, prefix + "b1": db1,
             prefix + "w2": dw2, prefix + "b2": db2}
    return (dx[0] if cache["single"] else dx), grads


# ---------------------------------------------------------------------------
# Checkpoint format: magic "GSCK", u32 version, u32 array count, then per
# array u32 name length, UTF-8 name, u32 rank, u32 dims, raw little-endian
# float32 data. Optimizer moments ride along under names suffixed .m / .v.

def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    version: int = CHECKPOINT_VERSION):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", version, len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"checkpoint truncated while reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    off = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "shape"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of '{name}'"), dtype="<f4")
        arrays[name] = data.reshape(shape).copy()
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last array")
    return arrays
