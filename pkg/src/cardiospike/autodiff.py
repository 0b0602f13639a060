"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations the rhythmogram detector actually needs are provided:
per-channel dilated convolution with boundary padding, per-timestep channel
mixing, GELU, sigmoid, temporal mean/crop, elementwise add/mul and full sum.
Gradients accumulate additively into ``Value.grad`` until ``zero_grad``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

SQRT1_2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Value:
    """An N-d float64 array participating in reverse-mode differentiation.

    ``data`` holds the payload, ``grad`` the accumulated adjoint (all-zero
    until a backward pass touches it).  Interior nodes keep references to
    their parents plus a vector-Jacobian product so ``backward`` can replay
    the recorded graph in reverse topological order.
    """

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        # out-of-place: adjoint arrays may be shared between siblings
        self._grad = g if self._grad is None else self._grad + g

    def backward(self):
        """Accumulate d(self)/d(node) into every reachable node's grad.

        ``self`` must be a scalar.  Repeated calls without ``zero_grad``
        add another unit of adjoint each time.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        topo = _toposort(self)
        adjoint = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if prev is None else prev + pg

    # operator sugar used by model/training code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _make(data, parents, vjp):
    out = Value(data)
    tracked = tuple(p for p in parents if isinstance(p, Value))
    if any(p.requires_grad for p in tracked):
        out.requires_grad = True
        out._parents = tracked
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Value, b: Value) -> Value:
    data = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), vjp)


def mul(a: Value, b: Value) -> Value:
    data = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), vjp)


def scale(a: Value, c: float) -> Value:
    data = a.data * c

    def vjp(g):
        return (g * c,)

    return _make(data, (a,), vjp)


def vsum(a: Value) -> Value:
    """Sum of all entries, as a scalar Value."""
    data = np.asarray(a.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(data, (a,), vjp)


def channel_mix(x: Value, weight: Value, bias: Value) -> Value:
    """Per-timestep linear map over channels: out[..., j] = b[j] + sum_i x[..., i] w[i, j].

    ``x`` may be a channel vector (Cin,), a segment (T, Cin), or a batch of
    segments (B, T, Cin); the map applies along the last axis.
    """
    cin, cout = weight.data.shape
    if x.data.shape[-1] != cin:
        raise ValueError(f"channel_mix: input has {x.data.shape[-1]} channels, weight expects {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"channel_mix: bias shape {bias.data.shape} != ({cout},)")
    if not 1 <= x.data.ndim <= 3:
        raise ValueError(f"channel_mix: input must be 1-D..3-D, got shape {x.data.shape}")
    data = x.data @ weight.data + bias.data

    def vjp(g):
        gx = g @ weight.data.T if x.requires_grad else None
        if weight.requires_grad:
            gw = x.data.reshape(-1, cin).T @ g.reshape(-1, cout)
        else:
            gw = None
        gb = g.reshape(-1, cout).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(data, (x, weight, bias), vjp)


def _overlap(t, s):
    """Output range [lo, hi) whose reads at offset ``s`` stay inside 0..t-1.

    Empty when |s| >= t; the empty range sits at the end that keeps the
    boundary-fill slices ``[:lo]`` and ``[hi:]`` covering the whole output.
    """
    lo, hi = max(0, -s), min(t, t - s)
    if hi < lo:
        lo = hi = 0 if s > 0 else t
    return lo, hi


def _shifted(x, s):
    """x shifted by s samples along the time axis (-2) with replicate padding."""
    t = x.shape[-2]
    out = np.empty_like(x)
    lo, hi = _overlap(t, s)
    out[..., lo:hi, :] = x[..., lo + s:hi + s, :]
    out[..., :lo, :] = x[..., :1, :]
    out[..., hi:, :] = x[..., -1:, :]
    return out


def conv1d_depthwise(x: Value, kernel: Value, bias: Value, dilation: int,
                     padding: str = "replicate") -> Value:
    """Depthwise (per-channel) 1-d convolution with gaps of ``dilation``.

    out[..., t, c] = bias[c] + sum_j kernel[j, c] * x[..., t + (j - (k-1)/2) * dilation, c]
    with out-of-range time indices clamped to the boundary sample
    (``padding="replicate"``) or contributing zero (``padding="zero"``).
    ``x`` is (T, C) or (B, T, C); output length equals input length.
    """
    k, c = kernel.data.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d_depthwise: kernel size must be odd, got {k}")
    if dilation < 1:
        raise ValueError(f"conv1d_depthwise: dilation must be >= 1, got {dilation}")
    if padding not in ("replicate", "zero"):
        raise ValueError(f"conv1d_depthwise: unknown padding {padding!r}")
    if x.data.ndim not in (2, 3) or x.data.shape[-1] != c:
        raise ValueError(f"conv1d_depthwise: input shape {x.data.shape} does not match kernel channels {c}")
    if bias.data.shape != (c,):
        raise ValueError(f"conv1d_depthwise: bias shape {bias.data.shape} != ({c},)")

    t = x.data.shape[-2]
    half = (k - 1) // 2
    shifts = [(j - half) * dilation for j in range(k)]
    reduce_axes = tuple(range(x.data.ndim - 1))

    if padding == "replicate":
        taps = [_shifted(x.data, s) for s in shifts]
    else:
        taps = []
        for s in shifts:
            tap = np.zeros_like(x.data)
            lo, hi = _overlap(t, s)
            tap[..., lo:hi, :] = x.data[..., lo + s:hi + s, :]
            taps.append(tap)

    data = bias.data + sum(tap * kernel.data[j] for j, tap in enumerate(taps))

    def vjp(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for j, s in enumerate(shifts):
                contrib = g * kernel.data[j]
                lo, hi = _overlap(t, s)
                gx[..., lo + s:hi + s, :] += contrib[..., lo:hi, :]
                if padding == "replicate":
                    if lo:
                        gx[..., 0, :] += contrib[..., :lo, :].sum(axis=-2)
                    if hi < t:
                        gx[..., t - 1, :] += contrib[..., hi:, :].sum(axis=-2)
        gk = None
        if kernel.requires_grad:
            gk = np.stack([(g * tap).sum(axis=reduce_axes) for tap in taps])
        gb = g.sum(axis=reduce_axes) if bias.requires_grad else None
        return gx, gk, gb

    return _make(data, (x, kernel, bias), vjp)


def gelu(x: Value) -> Value:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form)."""
    cdf = 0.5 * (1.0 + erf(x.data * SQRT1_2))
    data = x.data * cdf

    def vjp(g):
        pdf = INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(data, (x,), vjp)


def sigmoid(x: Value) -> Value:
    data = expit(x.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (x,), vjp)


def mean_over_time(x: Value) -> Value:
    """Mean over the time axis: (T, C) -> (C,), or (B, T, C) -> (B, C)."""
    if x.data.ndim < 2:
        raise ValueError(f"mean_over_time: expected at least 2-D input, got shape {x.data.shape}")
    t = x.data.shape[-2]
    if t == 0:
        raise ValueError("mean_over_time: empty time axis")
    data = x.data.mean(axis=-2)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / t, x.data.shape).copy(),)

    return _make(data, (x,), vjp)


def insert_time_axis(x: Value) -> Value:
    """Add a length-1 time axis before channels: (..., C) -> (..., 1, C)."""
    data = np.expand_dims(x.data, -2)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make(data, (x,), vjp)


def crop_time(x: Value, left: int, right: int) -> Value:
    """Drop ``left``/``right`` samples from the ends of the time axis (-2)."""
    if left < 0 or right < 0:
        raise ValueError("crop_time: margins must be non-negative")
    if x.data.ndim < 2:
        raise ValueError(f"crop_time: expected at least 2-D input, got shape {x.data.shape}")
    t = x.data.shape[-2]
    if left + right >= t:
        raise ValueError(f"crop_time: cannot crop {left}+{right} samples from length {t}")
    data = x.data[..., left:t - right, :].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., left:t - right, :] = g
        return (gx,)

    return _make(data, (x,), vjp)


def grad_check(f, x: Value, step: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Worst relative error between reverse-mode and central finite differences.

    ``f`` must deterministically build a scalar Value from ``x``.  Checks every
    coordinate of ``x`` (or a random sample of ``max_coords`` of them).
    """
    was_required = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy()
    x.zero_grad()
    x.requires_grad = was_required

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    numeric = np.empty(len(coords))
    for pos, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        numeric[pos] = (fp - fm) / (2.0 * step)

    picked = analytic.reshape(-1)[coords]
    denom = max(1.0, np.abs(picked).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(picked - numeric).max(initial=0.0) / denom)
