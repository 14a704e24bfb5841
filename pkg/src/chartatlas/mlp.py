"""ReLU MLP charts from the unit square into R^3, with hand-written backprop and Adam.

Weights are stored as ``(fan_out, fan_in)`` matrices; a batch of inputs ``V``
of shape ``(m, d_in)`` maps to ``V @ W.T + b`` at each layer. Everything runs
in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_LAYERS = (2, 128, 256, 512, 512, 3)
CHARTNET_MAGIC = b"CHARTNET1"


class ChartSpecError(ValueError):
    pass


def parameter_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def check_layer_spec(sizes: Sequence[int], chart: bool = True) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2:
        raise ChartSpecError(f"layer spec needs at least two sizes, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ChartSpecError(f"layer sizes must be positive, got {sizes}")
    if chart and (sizes[0] != 2 or sizes[-1] != 3):
        raise ChartSpecError(f"a chart maps 2 -> 3 dimensions, got {sizes[0]} -> {sizes[-1]}")
    return sizes


@dataclass
class ChartNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_params(self) -> int:
        return parameter_count(self.sizes)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ChartNet":
        return ChartNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return forward(self, v)


@dataclass
class Gradient:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: ChartNet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        zeros = [np.zeros_like(p) for p in net.params()]
        return cls(lr, beta1, beta2, eps, 0, zeros, [z.copy() for z in zeros])


def init_chart(sizes: Sequence[int], seed: int, n_fit: Optional[int] = None, chart: bool = True) -> ChartNet:
    """Uniform fan-in initialization, zero biases.

    When ``n_fit`` is given the net must be overparametrized for that many
    target points: at least ``10 * 3 * n_fit`` parameters.
    """
    sizes = check_layer_spec(sizes, chart=chart)
    if n_fit is not None and parameter_count(sizes) < 30 * n_fit:
        raise ChartSpecError(
            f"{parameter_count(sizes)} parameters is too few to overfit {n_fit} points "
            f"(need >= {30 * n_fit})"
        )
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ChartNet(weights, biases)


def _forward_cache(net: ChartNet, v: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    h = v
    acts = [v]
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if k < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h, acts


def forward(net: ChartNet, v: np.ndarray) -> np.ndarray:
    """Evaluate the chart at one point ``(2,)`` or a batch ``(m, 2)``."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    out, _ = _forward_cache(net, np.atleast_2d(v))
    return out[0] if single else out


def forward_with_cache(net: ChartNet, v: np.ndarray):
    return _forward_cache(net, np.atleast_2d(np.asarray(v, dtype=np.float64)))


def backward(net: ChartNet, v: np.ndarray, grad_out: np.ndarray, cache=None) -> Gradient:
    """Gradient of ``sum(grad_out * forward(net, v))`` with respect to the parameters.

    ``grad_out`` holds dL/dphi per input row. ReLU'(0) is taken as 0.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    grad_out = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("backward needs a non-empty batch")
    if cache is None:
        _, acts = _forward_cache(net, v)
    else:
        acts = cache
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    delta = grad_out
    for k in range(len(net.weights) - 1, -1, -1):
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k]) * (acts[k] > 0)
    return Gradient(gw, gb)


def adam_step(net: ChartNet, state: AdamState, grad: Gradient) -> None:
    params = net.params()
    grads = grad.params()
    if len(params) != len(grads) or len(state.m) != len(params):
        raise ValueError("gradient / optimizer state does not match the network")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: parameter {p.shape}, gradient {g.shape}, moment {m.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, s in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(s / c2) + state.eps)


def jacobian(net: ChartNet, v: np.ndarray) -> np.ndarray:
    """Exact Jacobian d phi / d v: ``(3, 2)`` for one point or ``(m, 3, 2)`` for a batch.

    Units with pre-activation exactly 0 count as inactive, matching backward.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    h = np.atleast_2d(v)
    tangent = np.broadcast_to(np.eye(h.shape[1]), (len(h), h.shape[1], h.shape[1]))
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        tangent = np.einsum("oi,mij->moj", w, tangent)
        if k < last:
            mask = z > 0
            tangent = tangent * mask[:, :, None]
            h = np.maximum(z, 0.0)
    return tangent[0] if single else tangent


def chart_normals(jac: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals from Jacobian columns plus a mask of non-degenerate points."""
    jac = np.asarray(jac)
    single = jac.ndim == 2
    jac = jac[None] if single else jac
    n = np.cross(jac[:, :, 0], jac[:, :, 1])
    norm = np.linalg.norm(n, axis=1)
    ok = norm > tol
    out = np.zeros_like(n)
    out[ok] = n[ok] / norm[ok, None]
    if single:
        return out[0], ok[0]
    return out, ok


def save_chart(net: ChartNet, path) -> None:
    """Write the CHARTNET1 container.

    Layout (little-endian): magic ``CHARTNET1``, uint32 number of sizes,
    uint32 sizes, then per layer the row-major float64 weight matrix
    ``(fan_out, fan_in)`` followed by the float64 bias vector.
    """
    sizes = net.sizes
    with open(path, "wb") as fh:
        fh.write(CHARTNET_MAGIC)
        fh.write(struct.pack("<I", len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_chart(path) -> ChartNet:
    data = Path(path).read_bytes()
    if not data.startswith(CHARTNET_MAGIC):
        raise ChartSpecError(f"{path}: not a CHARTNET1 file")
    off = len(CHARTNET_MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    sizes = struct.unpack_from(f"<{count}I", data, off)
    off += 4 * count
    check_layer_spec(sizes, chart=False)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        nw = fan_in * fan_out
        need = off + 8 * (nw + fan_out)
        if need > len(data):
            raise ChartSpecError(f"{path}: truncated at byte {len(data)}, expected {need}")
        weights.append(np.frombuffer(data, "<f8", nw, off).reshape(fan_out, fan_in).astype(np.float64))
        off += 8 * nw
        biases.append(np.frombuffer(data, "<f8", fan_out, off).astype(np.float64))
        off += 8 * fan_out
    if off != len(data):
        raise ChartSpecError(f"{path}: {len(data) - off} trailing bytes")
    return ChartNet(weights, biases)
