"""Deterministic numeric foundations: RNG, initializers, Adam, clipping.

All tensors are plain numpy arrays (row-major, rank 1-3). Training runs in
float32; gradient checking switches the whole graph to float64 because
finite-difference tolerances are unreachable in single precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32

_UINT64_MASK = (1 << 64) - 1


class NonFiniteError(ValueError):
    """A tensor that must be finite contains NaN or Inf."""


def require_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


class Rng:
    """Seeded, platform-independent random source.

    Wraps numpy's Philox 4x64 counter-based bit generator: the same 64-bit
    seed yields the same value stream on every platform. Uniform doubles
    carry 53 random mantissa bits; standard normals use the ziggurat method.
    One Rng instance drives all sampling of a run (init, RBM noise,
    shuffling) so a recorded seed reproduces the run bit-for-bit.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _UINT64_MASK
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        return self._gen.integers(0, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def glorot_init(fan_in: int, fan_out: int, rng: Rng, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform Glorot sheet of shape [fan_out, fan_in].

    Entries are i.i.d. uniform on (-L, L) with L = sqrt(6 / (fan_in + fan_out)),
    kept strictly inside the bound even after the dtype cast.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, (fan_out, fan_in)).astype(dtype)
    # rounding during the cast may land exactly on +/-L; pull those inside
    bound = np.nextafter(np.asarray(limit, dtype=dtype), np.asarray(0, dtype=dtype))
    return np.clip(w, -bound, bound)


@dataclass
class AdamState:
    """Per-parameter Adam moments; shapes mirror the parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   t=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One Adam update with bias correction; mutates param and state in place.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2;
    param <- param - lr * m_hat / (sqrt(v_hat) + eps).
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}"
        )
    # cheap screen first: a single reduction catches NaN/Inf almost always
    if not math.isfinite(float(grad.sum())):
        require_finite(grad, "adam gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * np.square(grad)
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    denom = np.sqrt(state.v / bc2)
    denom += state.eps
    param -= (lr / bc1) * state.m / denom
    return param, state


class Adam:
    """Adam over a named parameter dict, one moment pair per tensor."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, AdamState] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        for name, p in params.items():
            st = self.state.get(name)
            if st is None:
                st = AdamState.for_param(p, self.beta1, self.beta2, self.eps)
                self.state[name] = st
            adam_step(p, grads[name], st, lr)


def clip_global_norm(grads, threshold: float):
    """Scale a tensor group so its global L2 norm is at most threshold.

    Returns (scaled tensors, applied scale). Inputs are left untouched;
    when the norm is already within the threshold the originals are
    returned with scale 1.0.
    """
    if not threshold > 0:
        raise ValueError(f"clip threshold must be > 0, got {threshold}")
    grads = list(grads)
    total = 0.0
    for g in grads:
        total += float(np.square(g, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite values in gradients passed to clip_global_norm")
    if norm <= threshold:
        return grads, 1.0
    scale = threshold / norm
    return [g * scale for g in grads], scale
