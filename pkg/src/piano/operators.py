"""Convolutional time-stepping and velocity-extraction operators.

Both operators share a three-level encoder-decoder (:class:`EncoderDecoder`)
that stacks the ``s`` input frames along the channel axis.  The time stepper
adds its output to the last observed frame, so a zero head is exactly a
persistence forecast.  The velocity extractor squashes its output with
``v_max * tanh`` so predicted velocities stay inside the stable regime.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .gridcore import DimensionError, FrameSequence, VectorField
from .pdesim import Stability, cfl_check, named_rng

__all__ = [
    "TNOConfig", "VNOConfig", "TranslatorConfig", "Normalizer",
    "EncoderDecoder", "TNO", "VNO", "ParamMaps", "Translator",
    "UntrainedModelError", "init_param_maps", "tno_predict", "vno_extract", "head_translate",
    "save_model", "load_model",
]

LEAKY_SLOPE = 0.1


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class TNOConfig:
    s: int = 8
    channels: int = 1
    widths: list = field(default_factory=lambda: [32, 64, 32])
    depth: int = 1
    use_dem: bool = True

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("window length s must be >= 1")
        if not self.widths or len(self.widths) != 3:
            raise ValueError("widths must list three encoder levels")

    @property
    def in_channels(self):
        return self.s * self.channels + (1 if self.use_dem else 0)


@dataclass
class VNOConfig:
    s: int = 8
    channels: int = 1
    widths: list = field(default_factory=lambda: [32, 64, 32])
    depth: int = 1
    v_max: float = 0.5

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("window length s must be >= 1")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if cfl_check(self.v_max, 0.0) is not Stability.STABLE:
            raise ValueError(f"v_max={self.v_max} is not CFL-stable")

    @property
    def in_channels(self):
        return self.s * self.channels


@dataclass
class TranslatorConfig:
    channels: int = 1
    width: int = 16


@dataclass
class Normalizer:
    """Per-channel ``(x - mean) / std`` with statistics frozen at fit time."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n):
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, data, axis=1):
        """Statistics over every axis except ``axis``."""
        data = np.asarray(data, dtype=np.float64)
        other = tuple(k for k in range(data.ndim) if k != axis)
        mean = data.mean(axis=other)
        std = data.std(axis=other)
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def node(self, x: ad.Node, repeat=1) -> ad.Node:
        dt = x.dtype
        scale = np.tile(1.0 / self.std, repeat).astype(dt)
        shift = np.tile(-self.mean / self.std, repeat).astype(dt)
        return ad.channel_affine(x, scale, shift)

    def to_dict(self):
        return {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def _he(rng, shape, gain=1.0):
    fan_in = int(np.prod(shape[1:]))
    std = gain * np.sqrt(2.0 / ((1.0 + LEAKY_SLOPE**2) * fan_in))
    return rng.normal(0.0, std, size=shape)


class EncoderDecoder:
    """Three-level conv encoder-decoder with skip concatenations.

    Spatial dims must be divisible by 4.  Parameter names are stable so
    checkpoints stay readable.
    """

    def __init__(self, in_ch, out_ch, widths, depth, rng):
        w0, w1, w2 = widths
        plan = []

        def block(name, cin, cout):
            for d in range(depth):
                plan.append((f"{name}.{d}", cin if d == 0 else cout, cout))

        block("enc0", in_ch, w0)
        block("enc1", w0, w1)
        block("enc2", w1, w2)
        block("dec1", w2 + w1, w1)
        block("dec0", w1 + w0, w0)
        self.depth = depth
        self.params = {}
        for name, cin, cout in plan:
            self.params[f"{name}.w"] = _he(rng, (cout, cin, 3, 3))
            self.params[f"{name}.b"] = np.zeros(cout)
        self.params["head.w"] = np.zeros((out_ch, w0, 3, 3))
        self.params["head.b"] = np.zeros(out_ch)

    def _block(self, P, name, x):
        for d in range(self.depth):
            x = ad.leaky_relu(ad.conv2d(x, P[f"{name}.{d}.w"], P[f"{name}.{d}.b"]), LEAKY_SLOPE)
        return x

    def apply(self, P, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise DimensionError(f"encoder-decoder needs dims divisible by 4, got {h}x{w}")
        e0 = self._block(P, "enc0", x)
        e1 = self._block(P, "enc1", ad.avg_down2(e0))
        e2 = self._block(P, "enc2", ad.avg_down2(e1))
        d1 = self._block(P, "dec1", ad.concat([ad.up2(e2), e1]))
        d0 = self._block(P, "dec0", ad.concat([ad.up2(d1), e0]))
        return ad.conv2d(d0, P["head.w"], P["head.b"])


class _Model:
    kind = "model"

    def leaves(self, prefix=""):
        return {f"{prefix}{k}": ad.parameter(v, f"{prefix}{k}") for k, v in self.params.items()}

    def cast(self, dtype):
        for k in self.params:
            self.params[k] = np.ascontiguousarray(self.params[k], dtype=dtype)
        self.dtype = np.dtype(dtype)
        return self

    def _sub(self, P, prefix):
        if prefix:
            return {k[len(prefix):]: v for k, v in P.items() if k.startswith(prefix)}
        return P

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))


class TNO(_Model):
    """Time-stepping operator: ``s`` frames (+ DEM) in, next ``s`` frames out."""

    kind = "tno"

    def __init__(self, cfg: TNOConfig, seed=0, frame_norm=None, dem_norm=None,
                 dtype=np.float32, params=None):
        self.cfg = cfg
        self.frame_norm = frame_norm or Normalizer.identity(cfg.channels)
        self.dem_norm = dem_norm or Normalizer.identity(1)
        net = EncoderDecoder(cfg.in_channels, cfg.s * cfg.channels, cfg.widths, cfg.depth,
                             named_rng(seed, "init/tno"))
        self.net = net
        self.params = net.params if params is None else params
        self.cast(dtype)

    def apply(self, P, history, dem=None, prefix=""):
        """``history`` is ``(N, s*C, H, W)``; returns predictions in that layout."""
        cfg = self.cfg
        history = ad._as_node(history)
        n, sc, h, w = history.shape
        if sc != cfg.s * cfg.channels:
            raise DimensionError(f"history has {sc} channels, expected s*C={cfg.s * cfg.channels}")
        x = self.frame_norm.node(history, repeat=cfg.s)
        if cfg.use_dem:
            if dem is None:
                raise DimensionError("this T-NO expects a DEM input")
            dem = ad._as_node(dem)
            if dem.shape != (n, 1, h, w):
                raise DimensionError(f"DEM shape {dem.shape} does not match frames {(n, 1, h, w)}")
            x = ad.concat([x, self.dem_norm.node(dem)])
        delta = self.net.apply(self._sub(P, prefix), x)
        delta = ad.channel_affine(delta, np.tile(self.frame_norm.std, cfg.s).astype(self.dtype),
                                  np.zeros(sc, self.dtype))
        last = ad.take(history, sc - cfg.channels, sc)
        anchor = ad.concat([last] * cfg.s) if cfg.s > 1 else last
        return ad.add(anchor, delta)

    def predict(self, history, dem=None):
        """Numpy convenience: ``(N, s, C, H, W)`` -> ``(N, s, C, H, W)``."""
        history = np.asarray(history, dtype=self.dtype)
        n, s, c, h, w = history.shape
        x = history.reshape(n, s * c, h, w)
        d = None if dem is None else np.asarray(dem, dtype=self.dtype).reshape(n, 1, h, w)
        out = self.apply(self.leaves(), ad.constant(x), None if d is None else ad.constant(d))
        return out.value.reshape(n, s, c, h, w)

    def config_dict(self):
        return {"kind": self.kind, "config": asdict(self.cfg),
                "frame_norm": self.frame_norm.to_dict(), "dem_norm": self.dem_norm.to_dict()}


class VNO(_Model):
    """Velocity-extraction operator: ``s`` frames in, ``s`` velocity fields out.

    Output field ``k`` drives the transition *into* window frame ``k``; field 0
    therefore pairs the frame preceding the window with the first window frame.
    """

    kind = "vno"

    def __init__(self, cfg: VNOConfig, seed=0, frame_norm=None, dtype=np.float32, params=None):
        self.cfg = cfg
        self.frame_norm = frame_norm or Normalizer.identity(cfg.channels)
        net = EncoderDecoder(cfg.in_channels, 2 * cfg.s, cfg.widths, cfg.depth,
                             named_rng(seed, "init/vno"))
        self.net = net
        self.params = net.params if params is None else params
        self.cast(dtype)

    def apply(self, P, frames, prefix=""):
        """``frames`` is ``(N, s*C, H, W)``; returns ``(N, 2s, H, W)`` as vx, vy pairs."""
        cfg = self.cfg
        frames = ad._as_node(frames)
        if frames.shape[1] != cfg.s * cfg.channels:
            raise DimensionError(f"V-NO expects {cfg.s * cfg.channels} channels, "
                                 f"got {frames.shape[1]}")
        x = self.frame_norm.node(frames, repeat=cfg.s)
        raw = self.net.apply(self._sub(P, prefix), x)
        return ad.scale(ad.tanh(raw), cfg.v_max)

    def extract(self, frames):
        """Numpy convenience: ``(N, s, C, H, W)`` -> ``(N, s, 2, H, W)``."""
        frames = np.asarray(frames, dtype=self.dtype)
        n, s, c, h, w = frames.shape
        out = self.apply(self.leaves(), ad.constant(frames.reshape(n, s * c, h, w)))
        return out.value.reshape(n, s, 2, h, w)

    def config_dict(self):
        return {"kind": self.kind, "config": asdict(self.cfg),
                "frame_norm": self.frame_norm.to_dict()}


_D_INIT_RAW = float(np.log(np.expm1(1.0)))


class ParamMaps(_Model):
    """Trainable per-pixel diffusivity and source maps.

    ``D = softplus(raw_D)`` keeps the diffusivity non-negative; the raw value
    is initialised so that ``D`` starts at exactly 1 and ``R`` at 0.
    """

    kind = "maps"

    def __init__(self, height, width, dtype=np.float64, params=None):
        self.height, self.width = height, width
        if params is None:
            params = {"raw_D": np.full((1, 1, height, width), _D_INIT_RAW),
                      "R": np.zeros((1, 1, height, width))}
        self.params = params
        self.cast(dtype)

    def nodes(self, P, prefix=""):
        return ad.softplus(P[f"{prefix}raw_D"]), P[f"{prefix}R"]

    @property
    def D(self):
        return np.logaddexp(0.0, self.params["raw_D"][0, 0]).astype(self.dtype)

    @property
    def R(self):
        return self.params["R"][0, 0]

    def config_dict(self):
        return {"kind": self.kind, "config": {"height": self.height, "width": self.width}}


def init_param_maps(height, width, dtype=np.float64) -> ParamMaps:
    return ParamMaps(height, width, dtype=dtype)


class Translator(_Model):
    """Supervised conv regressor from satellite channels to rain rate (mm/h)."""

    kind = "translator"

    def __init__(self, cfg: TranslatorConfig, seed=0, frame_norm=None, dtype=np.float32,
                 params=None, trained=False):
        self.cfg = cfg
        self.frame_norm = frame_norm or Normalizer.identity(cfg.channels)
        self.trained = trained
        if params is None:
            rng = named_rng(seed, "init/translator")
            w = cfg.width
            params = {
                "c0.w": _he(rng, (w, cfg.channels, 3, 3)), "c0.b": np.zeros(w),
                "c1.w": _he(rng, (w, w, 3, 3)), "c1.b": np.zeros(w),
                "out.w": _he(rng, (1, w, 1, 1), gain=0.5), "out.b": np.full(1, 0.1),
            }
        self.params = params
        self.cast(dtype)

    def apply(self, P, sat, prefix=""):
        P = self._sub(P, prefix)
        x = self.frame_norm.node(ad._as_node(sat))
        x = ad.leaky_relu(ad.conv2d(x, P["c0.w"], P["c0.b"]), LEAKY_SLOPE)
        x = ad.leaky_relu(ad.conv2d(x, P["c1.w"], P["c1.b"]), LEAKY_SLOPE)
        return ad.relu(ad.conv2d(x, P["out.w"], P["out.b"]))

    def translate(self, sat):
        """``(N, C, H, W)`` satellite frames -> ``(N, H, W)`` rain rate."""
        if not self.trained:
            raise UntrainedModelError("translator has not been trained")
        sat = np.asarray(sat, dtype=self.dtype)
        return self.apply(self.leaves(), ad.constant(sat)).value[:, 0]

    def config_dict(self):
        return {"kind": self.kind, "config": asdict(self.cfg),
                "frame_norm": self.frame_norm.to_dict(), "trained": self.trained}


# -- FrameSequence-level entry points ----------------------------------------

def tno_predict(history: FrameSequence, dem, model: TNO) -> FrameSequence:
    cfg = model.cfg
    if len(history) != cfg.s:
        raise DimensionError(f"history has {len(history)} frames, T-NO window is {cfg.s}")
    dem = np.asarray(dem)
    if dem.shape != tuple(history.grid_shape):
        raise DimensionError(f"DEM {dem.shape} does not match frames {tuple(history.grid_shape)}")
    pred = model.predict(history.frames[None], dem[None] if cfg.use_dem else None)[0]
    ts = history.timestamps
    dt = ts[1] - ts[0] if len(ts) > 1 else 1
    if not np.all(np.isfinite(pred)):
        raise ad.NonFiniteError("T-NO produced non-finite predictions")
    return FrameSequence(pred, ts[-1] + dt * np.arange(1, cfg.s + 1), list(history.channel_labels))


def vno_extract(frames: FrameSequence, model: VNO) -> list:
    if len(frames) != model.cfg.s:
        raise DimensionError(f"V-NO window is {model.cfg.s} frames, got {len(frames)}")
    v = model.extract(frames.frames[None])[0].astype(np.float64)
    return [VectorField(v[k, 0], v[k, 1]) for k in range(model.cfg.s)]


def head_translate(sat_frame, model: Translator) -> np.ndarray:
    """One multi-channel frame ``(C, H, W)`` -> rain-rate field ``(H, W)``."""
    return model.translate(np.asarray(sat_frame)[None])[0]


# -- checkpoints -------------------------------------------------------------

def save_model(path, model, **extra):
    from .gfs import write_checkpoint

    meta = dict(model.config_dict(), dtype=np.dtype(model.dtype).name, **extra)
    write_checkpoint(path, model.params, meta)


def load_model(path):
    """Rebuild any operator saved with :func:`save_model`."""
    from .gfs import read_checkpoint

    params, meta = read_checkpoint(path)
    kind = meta.get("kind")
    dtype = np.dtype(meta.get("dtype", "float32"))
    if kind == "tno":
        return TNO(TNOConfig(**meta["config"]), frame_norm=Normalizer.from_dict(meta["frame_norm"]),
                   dem_norm=Normalizer.from_dict(meta["dem_norm"]), dtype=dtype, params=params)
    if kind == "vno":
        return VNO(VNOConfig(**meta["config"]), frame_norm=Normalizer.from_dict(meta["frame_norm"]),
                   dtype=dtype, params=params)
    if kind == "maps":
        return ParamMaps(meta["config"]["height"], meta["config"]["width"], dtype=dtype,
                         params=params)
    if kind == "translator":
        return Translator(TranslatorConfig(**meta["config"]),
                          frame_norm=Normalizer.from_dict(meta["frame_norm"]), dtype=dtype,
                          params=params, trained=meta.get("trained", False))
    raise ValueError(f"{path}: unknown model kind {kind!r}")
