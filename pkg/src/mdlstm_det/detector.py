"""Fully-convolutional detector: config, parameters, forward/backward, box decoding.

The network is an ordered stack of valid strided convolutions, 2D-LSTM context
layers and dropout, closed by a 1x1 convolution emitting ``5*K`` channels per
site: four box coordinates and one confidence for each of the ``K`` predictors.

Coordinates are page-normalized: ``x, y`` is the top-left corner as a fraction
of the page width/height, ``w, h`` the size. Site ``(i, j)`` is 1-based with
``i`` the column and ``j`` the row of the last feature map.
"""
from __future__ import annotations

import configparser
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .mdlstm import (CORNERS, DirectionalLstmParams, MdLstmLayer, mdlstm_backward,
                     mdlstm_forward)
from .tensor import (ConvParams, activation_backward, activation_forward, conv2d_backward,
                     conv2d_forward, conv_output_size, dropout, sigmoid)

MAGIC = b"MDLSTMDT"
FORMAT_VERSION = 1
CONF_EPS = 1e-7


class ConfigError(ValueError):
    pass


class InputTooSmall(ValueError):
    def __init__(self, shape, minimal):
        self.minimal = minimal
        super().__init__(f"input of size {shape[0]}x{shape[1]} (h x w) is too small for this "
                         f"architecture; minimal admissible size is {minimal[0]}x{minimal[1]} (h x w)")


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_y: int = 1
    stride_x: int = 1
    activation: str = "tanh"
    kind: str = field(default="conv", init=False)

    @property
    def kernel(self):
        return self.kernel_h, self.kernel_w

    @property
    def stride(self):
        return self.stride_y, self.stride_x


@dataclass(frozen=True)
class MdLstmSpec:
    kind: str = field(default="mdlstm", init=False)


@dataclass(frozen=True)
class DropoutSpec:
    p: Union[float, None] = None  # None: take the trainer's dropout probability
    kind: str = field(default="dropout", init=False)


LayerSpec = Union[ConvSpec, MdLstmSpec, DropoutSpec]


@dataclass
class ArchitectureConfig:
    layers: list
    predictors: int
    reference_size: tuple[int, int] = (838, 598)  # (height, width)
    input_channels: int = 1
    lambda_override: Union[tuple[float, float, float, float], None] = None
    # default position scale in cells: a predictor reaches (span_x, span_y) cells from its own
    position_span: tuple[float, float] = (2.0, 2.0)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.reference_size = tuple(self.reference_size)
        self.position_span = tuple(float(v) for v in self.position_span)
        if self.lambda_override is not None:
            self.lambda_override = tuple(float(v) for v in self.lambda_override)
        self.validate()

    def validate(self) -> None:
        if self.predictors < 1:
            raise ConfigError("predictors per site must be >= 1")
        if not self.layers:
            raise ConfigError("architecture has no layers")
        for idx, spec in enumerate(self.layers, 1):
            if isinstance(spec, ConvSpec):
                if min(spec.out_channels, spec.kernel_h, spec.kernel_w, spec.stride_y, spec.stride_x) < 1:
                    raise ConfigError(f"layer {idx}: conv sizes and strides must be positive")
                if spec.activation not in ("tanh", "sigmoid", "none"):
                    raise ConfigError(f"layer {idx}: unknown activation {spec.activation!r}")
            elif isinstance(spec, DropoutSpec):
                if spec.p is not None and not 0.0 <= spec.p < 1.0:
                    raise ConfigError(f"layer {idx}: dropout p must be in [0, 1)")
            elif not isinstance(spec, MdLstmSpec):
                raise ConfigError(f"layer {idx}: unknown layer spec {spec!r}")
        head = self.layers[-1]
        n = len(self.layers)
        if not isinstance(head, ConvSpec):
            raise ConfigError(f"layer {n}: the last layer must be the 1x1 convolution output head")
        if head.kernel != (1, 1) or head.stride != (1, 1):
            raise ConfigError(f"layer {n}: output head must be a 1x1 convolution with stride 1")
        if head.out_channels != 5 * self.predictors:
            raise ConfigError(f"layer {n}: output head needs 5*K = {5 * self.predictors} channels, "
                              f"got {head.out_channels}")
        if head.activation != "none":
            raise ConfigError(f"layer {n}: output head activation must be 'none' "
                              "(the sigmoid is applied when decoding)")
        if self.lambda_override is not None and (len(self.lambda_override) != 4
                                                 or min(self.lambda_override) <= 0):
            raise ConfigError("lambda override must be 4 positive numbers")
        if len(self.position_span) != 2 or min(self.position_span) <= 0:
            raise ConfigError("position_span must be 2 positive numbers")

    @property
    def total_stride(self) -> tuple[int, int]:
        sy = sx = 1
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                sy *= spec.stride_y
                sx *= spec.stride_x
        return sy, sx

    def without_lstm(self) -> "ArchitectureConfig":
        """Ablation: drop every 2D-LSTM layer and the dropout that follows it."""
        layers, skip = [], False
        for spec in self.layers:
            if isinstance(spec, MdLstmSpec):
                skip = True
                continue
            if isinstance(spec, DropoutSpec) and skip:
                skip = False
                continue
            skip = False
            layers.append(spec)
        return ArchitectureConfig(layers, self.predictors, self.reference_size,
                                  self.input_channels, self.lambda_override, self.position_span)


# --- config text format ----------------------------------------------------

def config_from_ini(text: str) -> ArchitectureConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable architecture config: {exc}") from exc
    if "model" not in cp:
        raise ConfigError("architecture config needs a [model] section")
    m = cp["model"]
    try:
        predictors = m.getint("predictors")
        ref = (m.getint("reference_height", 838), m.getint("reference_width", 598))
        in_ch = m.getint("input_channels", 1)
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from exc
    if predictors is None:
        raise ConfigError("[model] needs 'predictors'")
    lam = m.get("lambda")
    try:
        lam = tuple(float(v) for v in lam.split()) if lam else None
        span = tuple(float(v) for v in m.get("position_span", "2 2").split())
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from exc

    sections = [s for s in cp.sections() if s.startswith("layer.")]
    try:
        sections.sort(key=lambda s: int(s.split(".", 1)[1]))
    except ValueError as exc:
        raise ConfigError(f"layer sections must be named layer.<int>: {exc}") from exc
    layers = []
    for name in sections:
        sec = cp[name]
        kind = sec.get("type")
        try:
            if kind == "conv":
                missing = [k for k in ("out_channels", "kernel_h", "kernel_w") if k not in sec]
                if missing:
                    raise ConfigError(f"[{name}]: missing field(s) {', '.join(missing)}")
                layers.append(ConvSpec(sec.getint("out_channels"), sec.getint("kernel_h"),
                                       sec.getint("kernel_w"), sec.getint("stride_y", 1),
                                       sec.getint("stride_x", 1), sec.get("activation", "tanh")))
            elif kind == "mdlstm":
                layers.append(MdLstmSpec())
            elif kind == "dropout":
                p = sec.get("p")
                layers.append(DropoutSpec(float(p) if p is not None else None))
            else:
                raise ConfigError(f"[{name}]: unknown layer type {kind!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[{name}]: missing or malformed field ({exc})") from exc
    return ArchitectureConfig(layers, predictors, ref, in_ch, lam, span)


def config_to_ini(config: ArchitectureConfig) -> str:
    out = io.StringIO()
    out.write("[model]\n")
    out.write(f"predictors = {config.predictors}\n")
    out.write(f"input_channels = {config.input_channels}\n")
    out.write(f"reference_height = {config.reference_size[0]}\n")
    out.write(f"reference_width = {config.reference_size[1]}\n")
    if config.lambda_override is not None:
        out.write("lambda = " + " ".join(repr(v) for v in config.lambda_override) + "\n")
    if config.position_span != (2.0, 2.0):
        out.write("position_span = " + " ".join(repr(v) for v in config.position_span) + "\n")
    for idx, spec in enumerate(config.layers, 1):
        out.write(f"\n[layer.{idx}]\ntype = {spec.kind}\n")
        if isinstance(spec, ConvSpec):
            out.write(f"out_channels = {spec.out_channels}\nkernel_h = {spec.kernel_h}\n"
                      f"kernel_w = {spec.kernel_w}\nstride_y = {spec.stride_y}\n"
                      f"stride_x = {spec.stride_x}\nactivation = {spec.activation}\n")
        elif isinstance(spec, DropoutSpec) and spec.p is not None:
            out.write(f"p = {spec.p!r}\n")
    return out.getvalue()


def load_config(path) -> ArchitectureConfig:
    with open(path, encoding="utf-8") as f:
        return config_from_ini(f.read())


def default_config_path(name: str = "reference"):
    from importlib.resources import files
    return files("mdlstm_det") / "configs" / f"{name}.ini"


def reference_config() -> ArchitectureConfig:
    return config_from_ini(default_config_path("reference").read_text(encoding="utf-8"))


# --- size chain --------------------------------------------------------------

def feature_map_sizes(config: ArchitectureConfig, height: int, width: int) -> list[tuple[int, int, int]]:
    """(channels, rows, cols) after every layer; dims may be <= 0 for too-small inputs."""
    sizes = []
    c, h, w = config.input_channels, height, width
    for spec in config.layers:
        if isinstance(spec, ConvSpec):
            c = spec.out_channels
            h, w = conv_output_size(h, w, spec.kernel, spec.stride) if h > 0 and w > 0 else (0, 0)
        sizes.append((c, h, w))
    return sizes


def minimal_input_size(config: ArchitectureConfig) -> tuple[int, int]:
    h = w = 1
    for spec in reversed(config.layers):
        if isinstance(spec, ConvSpec):
            h = (h - 1) * spec.stride_y + spec.kernel_h
            w = (w - 1) * spec.stride_x + spec.kernel_w
    return h, w


def output_grid(config: ArchitectureConfig, height: int, width: int) -> tuple[int, int]:
    _, rows, cols = feature_map_sizes(config, height, width)[-1]
    if rows < 1 or cols < 1:
        raise InputTooSmall((height, width), minimal_input_size(config))
    return rows, cols


def parameter_counts(config: ArchitectureConfig) -> list[int]:
    counts, c = [], config.input_channels
    for spec in config.layers:
        if isinstance(spec, ConvSpec):
            counts.append(spec.out_channels * c * spec.kernel_h * spec.kernel_w + spec.out_channels)
            c = spec.out_channels
        elif isinstance(spec, MdLstmSpec):
            counts.append(4 * 5 * (c * c + 2 * c * c + c))
        else:
            counts.append(0)
    return counts


# --- geometry and decoding ------------------------------------------------------

@dataclass(frozen=True)
class PredictorGeometry:
    lam: tuple[float, float, float, float]  # scale of (x, y, w, h)
    delta: tuple[float, float]              # per-cell offset of (x, y)


def derive_geometry(config: ArchitectureConfig, size: Union[tuple[int, int], None] = None) -> PredictorGeometry:
    """Cell stride in page-normalized units for a page of ``size`` = (height, width)."""
    height, width = size if size is not None else config.reference_size
    sy, sx = config.total_stride
    delta = (sx / width, sy / height)
    span_x, span_y = config.position_span
    lam = config.lambda_override or (span_x * delta[0], span_y * delta[1], 1.0, 1.0)
    return PredictorGeometry(tuple(lam), delta)


@dataclass(frozen=True)
class BoxPrediction:
    x: float
    y: float
    w: float
    h: float
    confidence: float
    site: tuple[int, int, int]  # 1-based (i column, j row, k predictor)


@dataclass
class Decoded:
    """Decoded predictions, flattened in (row, column, predictor) order."""
    boxes: np.ndarray        # (M, 4) x, y, w, h
    confidence: np.ndarray   # (M,)
    sig: np.ndarray          # (M, 4) sigmoid of the coordinate pre-activations
    logits: np.ndarray       # (M,) confidence pre-activations
    grid: tuple[int, int, int]  # rows, cols, K
    geometry: PredictorGeometry

    def __len__(self):
        return len(self.confidence)

    def site(self, m: int) -> tuple[int, int, int]:
        rows, cols, k = self.grid
        r, rem = divmod(m, cols * k)
        c, kk = divmod(rem, k)
        return c + 1, r + 1, kk + 1

    def to_list(self) -> list[BoxPrediction]:
        return [BoxPrediction(*map(float, self.boxes[m]), float(self.confidence[m]), self.site(m))
                for m in range(len(self))]


def decode_outputs(raw: np.ndarray, geometry: PredictorGeometry) -> Decoded:
    if raw.ndim != 3 or raw.shape[0] % 5:
        raise ValueError(f"raw output must have 5*K channels, got shape {raw.shape}")
    k = raw.shape[0] // 5
    rows, cols = raw.shape[1:]
    a = raw.reshape(k, 5, rows, cols).transpose(2, 3, 0, 1).reshape(-1, 5).astype(np.float64)
    sig = sigmoid(a[:, :4])
    lam = np.asarray(geometry.lam)
    boxes = sig * lam
    r_idx, c_idx = np.divmod(np.arange(rows * cols).repeat(k), cols)
    boxes[:, 0] += c_idx * geometry.delta[0]
    boxes[:, 1] += r_idx * geometry.delta[1]
    conf = np.clip(sigmoid(a[:, 4]), CONF_EPS, 1 - CONF_EPS)
    return Decoded(boxes, conf, sig, a[:, 4].copy(), (rows, cols, k), geometry)


def encode_output_grads(decoded: Decoded, grad_boxes: np.ndarray, grad_logits: np.ndarray,
                        dtype=np.float64) -> np.ndarray:
    """Chain box/logit gradients back through the decoding to the raw (5K, R, C) map."""
    rows, cols, k = decoded.grid
    g = np.empty((rows * cols * k, 5))
    g[:, :4] = grad_boxes * np.asarray(decoded.geometry.lam) * decoded.sig * (1 - decoded.sig)
    g[:, 4] = grad_logits
    return g.reshape(rows, cols, k, 5).transpose(2, 3, 0, 1).reshape(5 * k, rows, cols).astype(dtype)


# --- model --------------------------------------------------------------------

@dataclass
class NetworkModel:
    config: ArchitectureConfig
    layers: list  # ConvParams | MdLstmLayer | None, aligned with config.layers
    version: int = FORMAT_VERSION

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for p in self.layers:
            if isinstance(p, ConvParams):
                out += [p.weight, p.bias]
            elif isinstance(p, MdLstmLayer):
                out += p.arrays()
        return out

    @property
    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameters())

    def geometry(self, size=None) -> PredictorGeometry:
        return derive_geometry(self.config, size)

    def astype(self, dtype) -> "NetworkModel":
        return _with_arrays(self, [a.astype(dtype) for a in self.parameters()])

    def copy(self) -> "NetworkModel":
        return _with_arrays(self, [a.copy() for a in self.parameters()])


def _empty_layers(config: ArchitectureConfig, dtype) -> list:
    layers, c = [], config.input_channels
    for spec in config.layers:
        if isinstance(spec, ConvSpec):
            layers.append(ConvParams(np.zeros((spec.out_channels, c, spec.kernel_h, spec.kernel_w), dtype),
                                     np.zeros(spec.out_channels, dtype), spec.stride))
            c = spec.out_channels
        elif isinstance(spec, MdLstmSpec):
            layers.append(MdLstmLayer([DirectionalLstmParams.zeros(c, c, dtype) for _ in CORNERS]))
        else:
            layers.append(None)
    return layers


def _with_arrays(model: NetworkModel, arrays: list[np.ndarray]) -> NetworkModel:
    fresh = NetworkModel(model.config, _empty_layers(model.config, arrays[0].dtype if arrays else np.float32),
                         model.version)
    params = fresh.parameters()
    for dst, src in zip(params, arrays):
        dst[...] = src
    return fresh


def build_model(config: ArchitectureConfig, rng: np.random.Generator, init_scale: float = 0.08,
                dtype=np.float32, forget_bias: float = 1.0,
                confidence_prior: Union[float, None] = None, init: str = "uniform") -> NetworkModel:
    """Weights uniform in [-init_scale, init_scale]; biases zero apart from
    ``forget_bias`` on the LSTM forget gates.

    With ``init="fan_in"`` each layer instead uses the bound
    ``init_scale * sqrt(3 / fan_in)`` (unit variance gain at ``init_scale=1``),
    so the input signal neither fades nor grows with depth. A 2D-LSTM cell's
    fan-in counts its input and both recurrent predecessors.

    ``confidence_prior`` sets the head's confidence biases so every predictor
    starts at that confidence instead of 0.5; with thousands of predictors and
    a few objects per page this avoids a huge first update pushing every
    confidence down at once.
    """
    config.validate()
    if init not in ("uniform", "fan_in"):
        raise ValueError(f"unknown init scheme {init!r}")

    def bound(fan_in: int) -> float:
        return init_scale * math.sqrt(3.0 / fan_in) if init == "fan_in" else init_scale

    layers, c = [], config.input_channels
    for spec in config.layers:
        if isinstance(spec, ConvSpec):
            a = bound(c * spec.kernel_h * spec.kernel_w)
            w = rng.uniform(-a, a, (spec.out_channels, c, spec.kernel_h, spec.kernel_w)).astype(dtype)
            layers.append(ConvParams(w, np.zeros(spec.out_channels, dtype), spec.stride))
            c = spec.out_channels
        elif isinstance(spec, MdLstmSpec):
            layers.append(MdLstmLayer([DirectionalLstmParams.uniform(c, c, rng, bound(3 * c), forget_bias, dtype)
                                       for _ in CORNERS]))
        else:
            layers.append(None)
    if confidence_prior is not None:
        if not 0.0 < confidence_prior < 1.0:
            raise ValueError("confidence prior must lie in (0, 1)")
        layers[-1].bias[4::5] = np.log(confidence_prior) - np.log1p(-confidence_prior)
    return NetworkModel(config, layers)


@dataclass
class _LayerCache:
    kind: str
    x: np.ndarray = None
    y: np.ndarray = None
    aux: object = None


def forward(model: NetworkModel, image: np.ndarray, training: bool = False,
            rng: Union[np.random.Generator, None] = None, dropout_p: float = 0.5,
            deterministic: bool = False, schedule: str = "wavefront") -> tuple[np.ndarray, list]:
    """Raw head output (5K, rows, cols) plus per-layer caches for :func:`backward`."""
    if image.ndim != 3 or image.shape[0] != model.config.input_channels:
        raise ValueError(f"image must be shaped ({model.config.input_channels}, H, W), got {image.shape}")
    output_grid(model.config, image.shape[1], image.shape[2])
    if training and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    x = image.astype(model.dtype, copy=False)
    caches = []
    for spec, params in zip(model.config.layers, model.layers):
        if isinstance(spec, ConvSpec):
            pre = conv2d_forward(x, params)
            y = activation_forward(pre, spec.activation)
            caches.append(_LayerCache("conv", x, y))
        elif isinstance(spec, MdLstmSpec):
            y, cache = mdlstm_forward(x, params, schedule, deterministic)
            caches.append(_LayerCache("mdlstm", aux=cache))
        else:
            p = spec.p if spec.p is not None else dropout_p
            y, mask = dropout(x, p, rng, training)
            caches.append(_LayerCache("dropout", aux=mask))
        x = y
    return x, caches


def backward(model: NetworkModel, caches: list, grad_raw: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients aligned with ``model.parameters()``."""
    if len(caches) != len(model.layers):
        raise ValueError("cache does not belong to this model")
    g = grad_raw.astype(model.dtype, copy=False)
    per_layer = []
    for spec, params, cache in zip(reversed(model.config.layers), reversed(model.layers), reversed(caches)):
        if isinstance(spec, ConvSpec):
            g = activation_backward(cache.y, g, spec.activation)
            g, gp = conv2d_backward(cache.x, params, g)
            per_layer.append([gp.weight, gp.bias])
        elif isinstance(spec, MdLstmSpec):
            g, gps = mdlstm_backward(cache.aux, g)
            per_layer.append([a for gp in gps for a in gp.arrays()])
        else:
            g = g * cache.aux
    return [a for grads in reversed(per_layer) for a in grads]


# --- serialization ---------------------------------------------------------------

def serialize(model: NetworkModel) -> bytes:
    dtype = model.dtype
    cfg = config_to_ini(model.config).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IBI", model.version, dtype.itemsize, len(cfg)))
    out.write(cfg)
    for a in model.parameters():
        out.write(np.ascontiguousarray(a, dtype=dtype.newbyteorder("<")).tobytes())
    return out.getvalue()


def deserialize(data: bytes) -> NetworkModel:
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError("bad magic at byte 0: not a model file")
    pos = len(MAGIC)
    header = struct.calcsize("<IBI")
    if len(data) < pos + header:
        raise ValueError(f"truncated header at byte {pos}")
    version, itemsize, cfg_len = struct.unpack_from("<IBI", data, pos)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version} at byte {pos}")
    if itemsize not in (4, 8):
        raise ValueError(f"bad real size {itemsize} at byte {pos + 4}")
    pos += header
    if len(data) < pos + cfg_len:
        raise ValueError(f"truncated config block at byte {pos}")
    config = config_from_ini(data[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    dtype = np.dtype("<f4" if itemsize == 4 else "<f8")
    model = NetworkModel(config, _empty_layers(config, dtype.newbyteorder("=")), version)
    for layer_no, (spec, params) in enumerate(zip(config.layers, model.layers), 1):
        if params is None:
            continue
        arrays = [params.weight, params.bias] if isinstance(params, ConvParams) else params.arrays()
        for a in arrays:
            nbytes = a.size * itemsize
            if len(data) < pos + nbytes:
                raise ValueError(f"truncated stream at byte {pos}: missing data for layer {layer_no} "
                                 f"({spec.kind}), expected {nbytes} bytes, {len(data) - pos} left")
            a[...] = np.frombuffer(data, dtype, a.size, pos).reshape(a.shape)
            pos += nbytes
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes after the last layer at byte {pos}")
    return model


def save_model(model: NetworkModel, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(model))


def load_model(path) -> NetworkModel:
    with open(path, "rb") as f:
        return deserialize(f.read())
