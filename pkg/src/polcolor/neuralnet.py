"""A small explicit-backprop neural network engine on numpy.

Layers are described by :class:`LayerSpec` and evaluated by the pure
functions :func:`layer_forward` / :func:`layer_backward`.  Parameters are
plain arrays grouped per layer in :class:`NetParams`; the optimizer returns
fresh arrays instead of mutating, so a forward cache taken before an update
is detectably stale.

Image tensors are ``(batch, channels, height, width)``; dense tensors are
``(batch, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "KINDS",
    "LayerSpec",
    "NetParams",
    "AdamState",
    "init_params",
    "layer_forward",
    "layer_backward",
    "forward",
    "backward",
    "bilinear_upsample",
    "bilinear_upsample_backward",
    "softmax_head",
    "cross_entropy",
    "softmax_cross_entropy",
    "adam_step",
    "activation_pattern",
    "grad_check",
]

KINDS = ("conv3x3", "relu", "maxpool2x2", "fully_connected", "softmax_head")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv3x3" and self.stride != 1:
            raise ValueError("conv3x3 layers use stride 1")
        if self.kind == "maxpool2x2" and self.stride != 2:
            object.__setattr__(self, "stride", 2)
        if self.has_params and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError(f"{self.kind} needs positive in/out channels")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv3x3", "fully_connected")


@dataclass
class NetParams:
    """Per-layer parameter tuples ``(W, b)`` (empty for parameterless layers)."""

    layers: list[tuple[np.ndarray, ...]]
    seed: int = 0

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "NetParams":
        it = iter(arrays)
        layers = [tuple(next(it) for _ in layer) for layer in self.layers]
        return NetParams(layers, self.seed)

    @property
    def dtype(self):
        arrays = self.arrays()
        return arrays[0].dtype if arrays else np.dtype(np.float64)

    def astype(self, dtype) -> "NetParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


def _init_layer(spec: LayerSpec, rng: np.random.Generator, dtype, zero: bool):
    if spec.kind == "conv3x3":
        shape = (spec.out_channels, spec.in_channels, 3, 3)
        fan_in = spec.in_channels * 9
    elif spec.kind == "fully_connected":
        shape = (spec.in_channels, spec.out_channels)
        fan_in = spec.in_channels
    else:
        return ()
    # He-uniform; draws happen even for zeroed layers so the stream is stable
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=shape)
    if zero:
        w = np.zeros(shape)
    return (w.astype(dtype), np.zeros(spec.out_channels, dtype=dtype))


def init_params(specs: Sequence[LayerSpec], seed: int = 0, dtype=np.float64,
                zero_layers: Sequence[int] = ()) -> NetParams:
    """Seeded He-uniform weights and zero biases; layers listed in ``zero_layers`` start at zero."""
    rng = np.random.default_rng(seed)
    zero = set(zero_layers)
    return NetParams([_init_layer(s, rng, dtype, i in zero) for i, s in enumerate(specs)], seed)


@dataclass
class _Cache:
    spec: LayerSpec
    param_ids: tuple[int, ...]
    input_shape: tuple[int, ...]
    data: dict = field(default_factory=dict)
    used: bool = False


def _check_input(spec: LayerSpec, params, x: np.ndarray) -> None:
    if spec.kind == "conv3x3":
        w = params[0]
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError(f"conv3x3 expects (N, {w.shape[1]}, H, W) input, got {x.shape}")
    elif spec.kind == "maxpool2x2":
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"maxpool2x2 expects (N, C, even H, even W) input, got {x.shape}")
    elif spec.kind == "fully_connected":
        w = params[0]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ValueError(f"fully_connected expects (B, {w.shape[0]}) input, got {x.shape}")


def layer_forward(spec: LayerSpec, params, x: np.ndarray):
    """Apply one layer.  Returns ``(output, cache)``."""
    _check_input(spec, params, x)
    cache = _Cache(spec, tuple(id(p) for p in params), x.shape)
    kind = spec.kind
    if kind == "conv3x3":
        w, b = params
        n, c, h, wd = x.shape
        # same-size padding by edge replication: a constant image stays exactly constant
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
        cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, c * 9)
        y = cols @ w.reshape(w.shape[0], -1).T + b
        y = y.reshape(n, h, wd, -1).transpose(0, 3, 1, 2)
        cache.data["cols"] = cols
        return np.ascontiguousarray(y), cache
    if kind == "relu":
        mask = x > 0
        cache.data["mask"] = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False), cache
    if kind == "maxpool2x2":
        n, c, h, wd = x.shape
        win = x.reshape(n, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, wd // 2, 4)
        arg = np.argmax(win, axis=-1)  # first occurrence on ties
        cache.data["arg"] = arg
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], cache
    if kind == "fully_connected":
        w, b = params
        cache.data["x"] = x
        return x @ w + b, cache
    # softmax_head
    y = softmax_head(x)
    cache.data["y"] = y
    return y, cache


def layer_backward(spec: LayerSpec, params, cache: _Cache, grad_out: np.ndarray):
    """Gradient of one layer.  Returns ``(grad_input, grad_params)``.

    A cache can be consumed once, and only with the parameter arrays it was
    produced with.
    """
    if cache.used or cache.spec != spec or cache.param_ids != tuple(id(p) for p in params):
        raise ValueError("stale cache: it does not match this layer's latest forward pass")
    cache.used = True
    kind = spec.kind
    if kind == "conv3x3":
        w, _ = params
        n, c, h, wd = cache.input_shape
        o = w.shape[0]
        g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        cols = cache.data.pop("cols")
        gw = (g.T @ cols).reshape(w.shape)
        gb = g.sum(axis=0)
        dcols = (g @ w.reshape(o, -1)).reshape(n, h, wd, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, wd + 2), dtype=grad_out.dtype)
        for a in range(3):
            for bb in range(3):
                dxp[:, :, a:a + h, bb:bb + wd] += dcols[..., a, bb].transpose(0, 3, 1, 2)
        # fold the replicated border back onto the edge pixels
        dxp[:, :, 1] += dxp[:, :, 0]
        dxp[:, :, -2] += dxp[:, :, -1]
        dxp[:, :, :, 1] += dxp[:, :, :, 0]
        dxp[:, :, :, -2] += dxp[:, :, :, -1]
        return dxp[:, :, 1:-1, 1:-1], (gw, gb)
    if kind == "relu":
        return np.where(cache.data.pop("mask"), grad_out, 0).astype(grad_out.dtype, copy=False), ()
    if kind == "maxpool2x2":
        n, c, h, wd = cache.input_shape
        arg = cache.data.pop("arg")
        win = np.zeros((n, c, h // 2, wd // 2, 4), dtype=grad_out.dtype)
        np.put_along_axis(win, arg[..., None], grad_out[..., None], axis=-1)
        dx = win.reshape(n, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(n, c, h, wd), ()
    if kind == "fully_connected":
        w, _ = params
        x = cache.data.pop("x")
        return grad_out @ w.T, (x.T @ grad_out, grad_out.sum(axis=0))
    y = cache.data.pop("y")
    return y * (grad_out - np.sum(grad_out * y, axis=-1, keepdims=True)), ()


def forward(specs: Sequence[LayerSpec], layer_params: Sequence[tuple], x: np.ndarray):
    """Run a stack of layers, returning the final output and the per-layer caches."""
    caches = []
    for spec, params in zip(specs, layer_params):
        x, cache = layer_forward(spec, params, x)
        caches.append(cache)
    return x, caches


def backward(specs: Sequence[LayerSpec], layer_params: Sequence[tuple], caches, grad: np.ndarray):
    grads = [None] * len(specs)
    for i in range(len(specs) - 1, -1, -1):
        grad, grads[i] = layer_backward(specs[i], layer_params[i], caches[i], grad)
    return grad, grads


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Align-corners bilinear resize of the last two axes."""
    h, w = x.shape[-2:]
    if target_h < h or target_w < w:
        raise ValueError(f"cannot upsample {h}x{w} to smaller {target_h}x{target_w}")
    if (target_h, target_w) == (h, w):
        return x.copy()
    ry = _interp_matrix(h, target_h, x.dtype)
    rx = _interp_matrix(w, target_w, x.dtype)
    return ry @ x @ rx.T


def bilinear_upsample_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    th, tw = grad.shape[-2:]
    if (th, tw) == (in_h, in_w):
        return grad.copy()
    ry = _interp_matrix(in_h, th, grad.dtype)
    rx = _interp_matrix(in_w, tw, grad.dtype)
    return ry.T @ grad @ rx


def softmax_head(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_targets(targets: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match predictions {shape}")
    if np.any(targets < 0) or np.any(targets >= shape[-1]):
        raise ValueError("target index out of range")
    return targets


def cross_entropy(probs: np.ndarray, targets) -> float:
    """Mean negative log-likelihood normalized by ``heads * batch * bins``.

    Args:
        probs: ``(B, heads, K)`` per-head distributions.
        targets: ``(B, heads)`` integer bin indices.
    """
    probs = np.asarray(probs)
    targets = _check_targets(targets, probs.shape)
    b, j, k = probs.shape
    picked = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    return float(-np.sum(np.log(picked)) / (j * b * k))


def softmax_cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Fused softmax + :func:`cross_entropy`; returns the loss and d(loss)/d(logits)."""
    targets = _check_targets(targets, logits.shape)
    b, j, k = logits.shape
    z = logits - np.max(logits, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    norm = j * b * k
    loss = -np.sum(np.take_along_axis(logp, targets[..., None], axis=-1)) / norm
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1, -1)
    return float(loss), grad / norm


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    learning_rate: float = 1e-4

    @classmethod
    def zeros_like(cls, params: NetParams, **hyper) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def adam_step(params: NetParams, grads, state: AdamState) -> tuple[NetParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    ``grads`` is either a flat list aligned with ``params.arrays()`` or a
    per-layer list like ``params.layers``.
    """
    arrays = params.arrays()
    flat = [g for layer in grads for g in layer] if grads and isinstance(grads[0], tuple) else list(grads)
    if len(flat) != len(arrays) or any(g.shape != a.shape for g, a in zip(flat, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, flat, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_params.append((a - step).astype(a.dtype, copy=False))
        new_m.append(m.astype(a.dtype, copy=False))
        new_v.append(v.astype(a.dtype, copy=False))
    new_state = AdamState(new_m, new_v, t, b1, b2, state.epsilon, state.learning_rate)
    return params.with_arrays(new_params), new_state


def activation_pattern(caches) -> np.ndarray:
    """Concatenated ReLU masks and max-pool choices of a forward pass."""
    parts = []
    for cache in caches:
        for key in ("mask", "arg"):
            if key in cache.data:
                parts.append(np.asarray(cache.data[key], dtype=np.int64).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def grad_check(loss_and_grad: Callable[[NetParams], tuple[float, list]], params: NetParams,
               h: float = 1e-5, samples_per_array: int = 100, seed: int = 0,
               atol: float = 1e-12, pattern: Callable[[NetParams], np.ndarray] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must return ``(loss, per-layer grads)``.  Up to
    ``samples_per_array`` randomly chosen entries of every parameter array are
    perturbed.  The error of an entry is ``|analytic - numeric|`` over
    ``max(|analytic|, |numeric|, atol)``, so gradients smaller than ``atol``
    are compared in absolute terms.  Central differences carry a round-off
    of roughly ``eps * |loss| / h``, which is where ``atol`` should sit.

    With ``pattern`` (e.g. :func:`activation_pattern` of a forward pass), an
    entry whose +h or -h perturbation changes the pattern straddles a ReLU or
    max-pool kink; the loss is not differentiable there and the entry is
    excluded.
    """
    if params.dtype != np.float64:
        raise ValueError("gradient checks need double precision parameters")
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grad(params)
    base = None if pattern is None else pattern(params)
    flat_grads = [g for layer in grads for g in layer]
    arrays = params.arrays()
    worst = 0.0
    checked = 0
    for ai, (a, g) in enumerate(zip(arrays, flat_grads)):
        n = min(a.size, samples_per_array)
        picks = rng.choice(a.size, size=n, replace=False)
        for idx in picks:
            plus = [x.copy() if i == ai else x for i, x in enumerate(arrays)]
            minus = [x.copy() if i == ai else x for i, x in enumerate(arrays)]
            plus[ai].flat[idx] += h
            minus[ai].flat[idx] -= h
            p_plus, p_minus = params.with_arrays(plus), params.with_arrays(minus)
            if base is not None and not (np.array_equal(pattern(p_plus), base)
                                         and np.array_equal(pattern(p_minus), base)):
                continue
            lp, _ = loss_and_grad(p_plus)
            lm, _ = loss_and_grad(p_minus)
            numeric = (lp - lm) / (2.0 * h)
            analytic = float(g.flat[idx])
            checked += 1
            scale = max(abs(numeric), abs(analytic), atol)
            worst = max(worst, abs(numeric - analytic) / scale)
    if not checked:
        raise ValueError("every sampled entry sits on a kink; nothing was checked")
    return worst
