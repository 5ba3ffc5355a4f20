"""Grid data types and second-order finite-difference stencils.

Axis convention: ``x`` runs along columns (last axis, index ``j``) and ``y``
along rows (second-to-last axis, index ``i``).  All stencil functions accept
arrays with arbitrary leading dimensions and act on the trailing ``(H, W)``
pair, so a ``(C, H, W)`` stack is differentiated channel by channel.

Boundaries use replicate (clamp-to-edge) padding, i.e. a zero normal gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "StencilSpec",
    "VectorField",
    "FrameSequence",
    "check_scalar_field",
    "gradient",
    "gradient_components",
    "divergence",
    "laplacian",
    "grad_kernels",
    "divergence_kernel",
    "laplacian_kernel",
]

MIN_SIZE = 3


class DimensionError(ValueError):
    """Raised when field shapes are too small or do not agree."""


@dataclass(frozen=True)
class StencilSpec:
    scheme: str = "central-2nd-order"
    boundary: str = "replicate"
    spacing: float = 1.0

    def __post_init__(self):
        if self.scheme != "central-2nd-order":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if self.boundary != "replicate":
            raise ValueError(f"unsupported boundary {self.boundary!r}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")


DEFAULT_SPEC = StencilSpec()


def check_scalar_field(f, name="field") -> np.ndarray:
    """Validate a scalar field (or a stack of them) and return it as an array."""
    f = np.asarray(f)
    if f.ndim < 2:
        raise DimensionError(f"{name} must be at least 2-D, got shape {f.shape}")
    h, w = f.shape[-2:]
    if h < MIN_SIZE or w < MIN_SIZE:
        raise DimensionError(f"{name} is {h}x{w}; stencils need at least {MIN_SIZE}x{MIN_SIZE}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite values")
    return f


@dataclass(frozen=True)
class VectorField:
    """Two-component velocity field in cells per frame."""

    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        vx = np.asarray(self.vx)
        vy = np.asarray(self.vy)
        if vx.shape != vy.shape:
            raise DimensionError(f"component shapes differ: vx {vx.shape} vs vy {vy.shape}")
        check_scalar_field(vx, "vx")
        check_scalar_field(vy, "vy")
        object.__setattr__(self, "vx", vx)
        object.__setattr__(self, "vy", vy)

    @property
    def shape(self):
        return self.vx.shape

    @classmethod
    def zeros(cls, height, width, dtype=np.float64):
        return cls(np.zeros((height, width), dtype), np.zeros((height, width), dtype))

    @classmethod
    def uniform(cls, height, width, vx, vy, dtype=np.float64):
        return cls(np.full((height, width), vx, dtype), np.full((height, width), vy, dtype))

    def max_speed(self) -> float:
        """Largest absolute component, the quantity the CFL check uses."""
        return float(max(np.abs(self.vx).max(), np.abs(self.vy).max()))

    def stack(self) -> np.ndarray:
        return np.stack([self.vx, self.vy])


@dataclass
class FrameSequence:
    """``T x C x H x W`` frames with integer timestamps and channel labels."""

    frames: np.ndarray
    timestamps: np.ndarray = None
    channel_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4:
            raise DimensionError(f"frames must be T x C x H x W, got shape {self.frames.shape}")
        t, c = self.frames.shape[:2]
        if self.timestamps is None:
            self.timestamps = np.arange(t)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.timestamps.shape != (t,):
            raise DimensionError(f"need {t} timestamps, got {self.timestamps.shape}")
        if t > 1:
            steps = np.diff(self.timestamps)
            if np.any(steps <= 0) or np.any(steps != steps[0]):
                raise ValueError("timestamps must be strictly increasing with uniform spacing")
        if not self.channel_labels:
            self.channel_labels = [f"ch{k}" for k in range(c)]
        if len(self.channel_labels) != c:
            raise DimensionError(f"{c} channels but {len(self.channel_labels)} labels")
        if self.frames.shape[-1] and t:
            check_scalar_field(self.frames, "frames")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def n_channels(self):
        return self.frames.shape[1]

    @property
    def grid_shape(self):
        return self.frames.shape[2:]


# -- stencil weights ---------------------------------------------------------
# Shared with the differentiable path so both apply identical coefficients.

def grad_kernels(spacing=1.0) -> np.ndarray:
    """3x3 kernels, shape (2, 3, 3), for d/dx and d/dy (correlation form)."""
    c = 1.0 / (2.0 * spacing)
    k = np.zeros((2, 3, 3))
    k[0, 1, 0], k[0, 1, 2] = -c, c
    k[1, 0, 1], k[1, 2, 1] = -c, c
    return k


def divergence_kernel(spacing=1.0) -> np.ndarray:
    """Kernel of shape (2, 3, 3) mapping a stacked (vx, vy) to its divergence."""
    return grad_kernels(spacing)


def laplacian_kernel(spacing=1.0) -> np.ndarray:
    c = 1.0 / spacing**2
    k = np.zeros((3, 3))
    k[1, 0] = k[1, 2] = k[0, 1] = k[2, 1] = c
    k[1, 1] = -4.0 * c
    return k


# -- operators ---------------------------------------------------------------

def _pad(f):
    pad = [(0, 0)] * (f.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(f, pad, mode="edge")


def _ddx(p, spacing):
    return (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / (2.0 * spacing)


def _ddy(p, spacing):
    return (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / (2.0 * spacing)


def gradient_components(f, spec: StencilSpec = DEFAULT_SPEC):
    """``(df/dx, df/dy)`` as plain arrays; no finiteness check on the result."""
    f = check_scalar_field(f)
    p = _pad(f)
    return _ddx(p, spec.spacing), _ddy(p, spec.spacing)


def gradient(f, spec: StencilSpec = DEFAULT_SPEC) -> VectorField:
    """Central-difference gradient ``(df/dx, df/dy)`` with replicate boundary."""
    return VectorField(*gradient_components(f, spec))


def divergence(v: VectorField, spec: StencilSpec = DEFAULT_SPEC) -> np.ndarray:
    if v.vx.shape != v.vy.shape:
        raise DimensionError(f"component shapes differ: {v.vx.shape} vs {v.vy.shape}")
    return _ddx(_pad(v.vx), spec.spacing) + _ddy(_pad(v.vy), spec.spacing)


def laplacian(f, spec: StencilSpec = DEFAULT_SPEC) -> np.ndarray:
    """Five-point Laplacian with replicate boundary."""
    f = check_scalar_field(f)
    p = _pad(f)
    centre = p[..., 1:-1, 1:-1]
    return (p[..., 1:-1, :-2] + p[..., 1:-1, 2:] + p[..., :-2, 1:-1] + p[..., 2:, 1:-1]
            - 4.0 * centre) / spec.spacing**2


def shift_interior(f: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Roll a field by ``(di, dj)`` cells; used for equivariance checks."""
    return np.roll(f, (di, dj), axis=(-2, -1))


def affine_field(height, width, a, b, c=0.0) -> np.ndarray:
    """``a*x + b*y + c`` sampled at cell indices."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    return a * x + b * y + c


def coordinates(shape: Sequence[int]):
    """Return ``(y, x)`` index grids as float64."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return y, x
