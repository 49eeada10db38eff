"""Four-direction 2D-LSTM context layer.

Each directional pass scans the feature map from one corner. A site receives
hidden and cell state from its vertical and horizontal predecessor (zero
outside the map) and has five gate blocks, stacked in this order:

    input, forget_v, forget_h, output, cell candidate

    s = i*z + f_v*s_v + f_h*s_h
    h = o*tanh(s)

The layer output is the sum of the four directional hidden maps.

Two schedules are provided: ``raster`` visits sites one by one, ``wavefront``
updates every site of an anti-diagonal at once. With ``deterministic=True`` the
recurrent products use a fixed-order accumulation so the two schedules agree
bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GATES = ("input", "forget_v", "forget_h", "output", "cell")
CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")
SCHEDULES = ("wavefront", "raster")


def mdlstm_param_count(d: int, hidden: int) -> int:
    if d < 1 or hidden < 1:
        raise ValueError("channel and hidden sizes must be >= 1")
    return 4 * 5 * (d * hidden + 2 * hidden * hidden + hidden)


@dataclass
class DirectionalLstmParams:
    w: np.ndarray    # (5H, d) input weights
    u_v: np.ndarray  # (5H, H) vertical-predecessor weights
    u_h: np.ndarray  # (5H, H) horizontal-predecessor weights
    b: np.ndarray    # (5H,)

    @property
    def hidden(self) -> int:
        return self.u_v.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.w.size + self.u_v.size + self.u_h.size + self.b.size

    def arrays(self) -> list[np.ndarray]:
        return [self.w, self.u_v, self.u_h, self.b]

    @classmethod
    def zeros(cls, d: int, hidden: int, dtype=np.float64) -> "DirectionalLstmParams":
        return cls(np.zeros((5 * hidden, d), dtype), np.zeros((5 * hidden, hidden), dtype),
                   np.zeros((5 * hidden, hidden), dtype), np.zeros(5 * hidden, dtype))

    @classmethod
    def uniform(cls, d: int, hidden: int, rng: np.random.Generator, scale: float,
                forget_bias: float = 1.0, dtype=np.float32) -> "DirectionalLstmParams":
        # two forget gates feed each cell, so cell gradients along the grid scale
        # like (f_v + f_h) ** distance; on large maps bias 0 (sum near 1) is safer
        p = cls(*(rng.uniform(-scale, scale, shape).astype(dtype)
                  for shape in ((5 * hidden, d), (5 * hidden, hidden), (5 * hidden, hidden))),
                np.zeros(5 * hidden, dtype))
        p.b[hidden:3 * hidden] = forget_bias
        return p


@dataclass
class MdLstmLayer:
    directions: list[DirectionalLstmParams]  # indexed like CORNERS

    def __post_init__(self):
        if len(self.directions) != 4:
            raise ValueError(f"need 4 directional parameter sets, got {len(self.directions)}")

    @property
    def input_channels(self) -> int:
        return self.directions[0].w.shape[1]

    @property
    def hidden(self) -> int:
        return self.directions[0].hidden

    @property
    def parameter_count(self) -> int:
        return sum(p.parameter_count for p in self.directions)

    def arrays(self) -> list[np.ndarray]:
        return [a for p in self.directions for a in p.arrays()]


def _flip_axes(corner: str) -> tuple[int, ...]:
    axes = []
    if corner.startswith("bottom"):
        axes.append(0)
    if corner.endswith("right"):
        axes.append(1)
    return tuple(axes)


def _orient(a: np.ndarray, corner: str) -> np.ndarray:
    """Map a site-major (R, C, ...) array to/from top-left scan order (an involution)."""
    axes = _flip_axes(corner)
    return np.flip(a, axes) if axes else a


def _fixed_order_matmul(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    # row-wise x @ m with a summation order independent of the row count
    out = x[:, 0:1] * m[0]
    for k in range(1, m.shape[0]):
        out += x[:, k:k + 1] * m[k]
    return out


def _sigm(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _diagonal(k: int, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    rr = np.arange(max(0, k - cols + 1), min(k, rows - 1) + 1)
    return rr, k - rr


def _site_batches(rows: int, cols: int, schedule: str):
    if schedule == "wavefront":
        for k in range(rows + cols - 1):
            yield _diagonal(k, rows, cols)
    elif schedule == "raster":
        for r in range(rows):
            for c in range(cols):
                yield np.array([r]), np.array([c])
    else:
        raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


@dataclass
class _DirectionCache:
    x: np.ndarray       # (R, C, d), top-left oriented
    gates: np.ndarray   # (R, C, 5H) activated gate values
    s: np.ndarray       # (R+1, C+1, H) cell state, zero-padded at row/col 0
    h: np.ndarray       # (R+1, C+1, H) hidden state, zero-padded at row/col 0
    tanh_s: np.ndarray  # (R, C, H)


@dataclass
class MdLstmCache:
    layer: MdLstmLayer
    input_shape: tuple[int, int, int]
    schedule: str
    deterministic: bool
    directions: list[_DirectionCache] = field(default_factory=list)


def _scan_forward(x: np.ndarray, p: DirectionalLstmParams, schedule: str,
                  deterministic: bool) -> _DirectionCache:
    rows, cols, _ = x.shape
    hid = p.hidden
    mm = _fixed_order_matmul if deterministic else np.matmul
    xw = x @ p.w.T + p.b
    uvt = np.ascontiguousarray(p.u_v.T)
    uht = np.ascontiguousarray(p.u_h.T)
    h = np.zeros((rows + 1, cols + 1, hid), x.dtype)
    s = np.zeros((rows + 1, cols + 1, hid), x.dtype)
    gates = np.empty((rows, cols, 5 * hid), x.dtype)
    tanh_s = np.empty((rows, cols, hid), x.dtype)
    for rr, cc in _site_batches(rows, cols, schedule):
        hv, hh = h[rr, cc + 1], h[rr + 1, cc]
        a = xw[rr, cc] + mm(hv, uvt) + mm(hh, uht)
        g = np.empty_like(a)
        g[:, :4 * hid] = _sigm(a[:, :4 * hid])
        g[:, 4 * hid:] = np.tanh(a[:, 4 * hid:])
        i, fv, fh, o, z = (g[:, n * hid:(n + 1) * hid] for n in range(5))
        cell = i * z + fv * s[rr, cc + 1] + fh * s[rr + 1, cc]
        ts = np.tanh(cell)
        s[rr + 1, cc + 1] = cell
        h[rr + 1, cc + 1] = o * ts
        gates[rr, cc] = g
        tanh_s[rr, cc] = ts
    return _DirectionCache(x, gates, s, h, tanh_s)


def _scan_backward(cache: _DirectionCache, p: DirectionalLstmParams, grad_h: np.ndarray,
                   schedule: str, deterministic: bool) -> np.ndarray:
    """Gradient w.r.t. the gate pre-activations, shape (R, C, 5H)."""
    rows, cols, _ = grad_h.shape
    hid = p.hidden
    mm = _fixed_order_matmul if deterministic else np.matmul
    dh_acc = np.zeros((rows + 1, cols + 1, hid), grad_h.dtype)
    ds_acc = np.zeros((rows + 1, cols + 1, hid), grad_h.dtype)
    d_pre = np.empty((rows, cols, 5 * hid), grad_h.dtype)
    s = cache.s
    batches = list(_site_batches(rows, cols, schedule))
    for rr, cc in reversed(batches):
        g = cache.gates[rr, cc]
        i, fv, fh, o, z = (g[:, n * hid:(n + 1) * hid] for n in range(5))
        ts = cache.tanh_s[rr, cc]
        dh = grad_h[rr, cc] + dh_acc[rr + 1, cc + 1]
        ds = dh * o * (1 - ts * ts) + ds_acc[rr + 1, cc + 1]
        da = np.empty_like(g)
        da[:, :hid] = ds * z * i * (1 - i)
        da[:, hid:2 * hid] = ds * s[rr, cc + 1] * fv * (1 - fv)
        da[:, 2 * hid:3 * hid] = ds * s[rr + 1, cc] * fh * (1 - fh)
        da[:, 3 * hid:4 * hid] = dh * ts * o * (1 - o)
        da[:, 4 * hid:] = ds * i * (1 - z * z)
        d_pre[rr, cc] = da
        # vertical predecessor first, then horizontal: keeps both schedules in the same order
        dh_acc[rr, cc + 1] += mm(da, p.u_v)
        dh_acc[rr + 1, cc] += mm(da, p.u_h)
        ds_acc[rr, cc + 1] += ds * fv
        ds_acc[rr + 1, cc] += ds * fh
    return d_pre


def lstm_direction_forward(x: np.ndarray, p: DirectionalLstmParams, corner: str = "top_left",
                           schedule: str = "wavefront",
                           deterministic: bool = False) -> tuple[np.ndarray, _DirectionCache]:
    """One directional pass over ``x`` (d, R, C); returns hidden map (H, R, C) and cache."""
    if x.ndim != 3:
        raise ValueError(f"input must be (channels, rows, cols), got shape {x.shape}")
    if x.shape[0] != p.w.shape[1]:
        raise ValueError(f"input channels {x.shape[0]} do not match LSTM input size {p.w.shape[1]}")
    if corner not in CORNERS:
        raise ValueError(f"unknown corner {corner!r}")
    xs = np.ascontiguousarray(_orient(x.transpose(1, 2, 0), corner))
    cache = _scan_forward(xs, p, schedule, deterministic)
    out = _orient(cache.h[1:, 1:], corner).transpose(2, 0, 1)
    return np.ascontiguousarray(out), cache


def lstm_direction_backward(cache: _DirectionCache, p: DirectionalLstmParams, grad_out: np.ndarray,
                            corner: str = "top_left", schedule: str = "wavefront",
                            deterministic: bool = False) -> tuple[np.ndarray, DirectionalLstmParams]:
    rows, cols, _ = cache.x.shape
    if grad_out.shape != (p.hidden, rows, cols):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match cached output "
                         f"{(p.hidden, rows, cols)}")
    gh = np.ascontiguousarray(_orient(grad_out.transpose(1, 2, 0), corner))
    d_pre = _scan_backward(cache, p, gh, schedule, deterministic)
    flat = d_pre.reshape(-1, d_pre.shape[-1])
    hid = p.hidden
    grads = DirectionalLstmParams(
        w=flat.T @ cache.x.reshape(-1, cache.x.shape[-1]),
        u_v=flat.T @ cache.h[:-1, 1:].reshape(-1, hid),
        u_h=flat.T @ cache.h[1:, :-1].reshape(-1, hid),
        b=flat.sum(axis=0),
    )
    gx = (d_pre @ p.w)  # (R, C, d)
    gx = _orient(gx, corner).transpose(2, 0, 1)
    return np.ascontiguousarray(gx), grads


def mdlstm_forward(x: np.ndarray, layer: MdLstmLayer, schedule: str = "wavefront",
                   deterministic: bool = False) -> tuple[np.ndarray, MdLstmCache]:
    """Sum of the four directional hidden maps; output shape (H, R, C)."""
    cache = MdLstmCache(layer, x.shape, schedule, deterministic)
    out = None
    for corner, p in zip(CORNERS, layer.directions):
        h, dc = lstm_direction_forward(x, p, corner, schedule, deterministic)
        cache.directions.append(dc)
        # fixed summation order over corners
        out = h if out is None else out + h
    return out, cache


def mdlstm_backward(cache: MdLstmCache,
                    grad_out: np.ndarray) -> tuple[np.ndarray, list[DirectionalLstmParams]]:
    if not isinstance(cache, MdLstmCache) or len(cache.directions) != 4:
        raise ValueError("mdlstm_backward needs the cache of a completed mdlstm_forward")
    d, rows, cols = cache.input_shape
    if grad_out.shape != (cache.layer.hidden, rows, cols):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output "
                         f"{(cache.layer.hidden, rows, cols)}")
    grad_x = None
    grads = []
    for corner, p, dc in zip(CORNERS, cache.layer.directions, cache.directions):
        gx, gp = lstm_direction_backward(dc, p, grad_out, corner, cache.schedule, cache.deterministic)
        grads.append(gp)
        grad_x = gx if grad_x is None else grad_x + gx
    return grad_x, grads
