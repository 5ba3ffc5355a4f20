"""Explicit advection-diffusion stepping, PDE residuals and synthetic scenarios.

One explicit update is::

    u_next = u + D * lap(u) - v . grad(u) - u * div(v) + R

with unit time step and unit grid spacing unless the stencil spec says
otherwise.  ``D`` multiplies the Laplacian pointwise; this equals the
conservative form ``div(D grad u)`` only for spatially constant ``D``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .gridcore import (
    DEFAULT_SPEC,
    DimensionError,
    FrameSequence,
    StencilSpec,
    VectorField,
    check_scalar_field,
    coordinates,
    divergence,
    gradient_components,
    laplacian,
)

__all__ = [
    "InstabilityError",
    "PDEParams",
    "Stability",
    "CFLLimits",
    "SCENARIO_KINDS",
    "SyntheticScenario",
    "step",
    "rollout",
    "residual",
    "residual_sq_norm",
    "cfl_check",
    "make_scenario",
    "semi_lagrangian_advect",
    "named_rng",
    "synthetic_radar",
]


class InstabilityError(FloatingPointError):
    """Raised when an explicit update produces non-finite values."""

    def __init__(self, message, bad_cells=0, step_index=None):
        super().__init__(message)
        self.bad_cells = bad_cells
        self.step_index = step_index


@dataclass
class PDEParams:
    D: np.ndarray
    R: np.ndarray
    spec: StencilSpec = DEFAULT_SPEC

    def __post_init__(self):
        self.D = check_scalar_field(self.D, "D")
        self.R = check_scalar_field(self.R, "R")
        if self.D.shape != self.R.shape:
            raise DimensionError(f"D {self.D.shape} and R {self.R.shape} differ")
        if np.any(self.D < 0):
            raise ValueError("diffusivity D must be non-negative everywhere")

    @classmethod
    def constant(cls, height, width, D=0.0, R=0.0, spec=DEFAULT_SPEC):
        return cls(np.full((height, width), float(D)), np.full((height, width), float(R)), spec)


class Stability(str, Enum):
    STABLE = "stable"
    MARGINAL = "marginal"
    UNSTABLE = "unstable"


@dataclass(frozen=True)
class CFLLimits:
    """Courant and diffusion-number bounds for the explicit scheme."""

    courant_stable: float = 0.5
    courant_unstable: float = 1.0
    diffusion_stable: float = 0.25
    diffusion_unstable: float = 0.5


def cfl_check(v_max, D_max, spec: StencilSpec = DEFAULT_SPEC, dt=1.0,
              limits: CFLLimits = CFLLimits()) -> Stability:
    courant = abs(v_max) * dt / spec.spacing
    diffusion = abs(D_max) * dt / spec.spacing**2
    if courant > limits.courant_unstable or diffusion > limits.diffusion_unstable:
        return Stability.UNSTABLE
    if courant <= limits.courant_stable and diffusion <= limits.diffusion_stable:
        return Stability.STABLE
    return Stability.MARGINAL


def _check_shapes(u, v, p):
    u = check_scalar_field(u, "u")
    if v.shape != u.shape[-2:]:
        raise DimensionError(f"velocity {v.shape} does not match field {u.shape[-2:]}")
    if p.D.shape != u.shape[-2:]:
        raise DimensionError(f"parameter maps {p.D.shape} do not match field {u.shape[-2:]}")
    return u


def step(u, v: VectorField, p: PDEParams) -> np.ndarray:
    """Advance ``u`` by one frame.  ``u`` may carry leading channel axes."""
    u = _check_shapes(u, v, p)
    # Overflow is detected below and reported with a cell count.
    with np.errstate(over="ignore", invalid="ignore"):
        gx, gy = gradient_components(u, p.spec)
        out = u + p.D * laplacian(u, p.spec) - (v.vx * gx + v.vy * gy) \
            - u * divergence(v, p.spec) + p.R
    bad = int(np.count_nonzero(~np.isfinite(out)))
    if bad:
        raise InstabilityError(f"explicit step produced {bad} non-finite cells", bad_cells=bad)
    return out


def rollout(u0, v_seq, p: PDEParams, n: int, channel_labels=None) -> FrameSequence:
    """Apply :func:`step` ``n`` times; frame ``k+1`` uses ``v_seq[k]``."""
    if len(v_seq) < n:
        raise ValueError(f"need at least {n} velocity fields, got {len(v_seq)}")
    u = np.asarray(u0, dtype=np.float64)
    single = u.ndim == 2
    if single:
        u = u[None]
    frames = [u]
    for k in range(n):
        try:
            u = step(u, v_seq[k], p)
        except (InstabilityError, ValueError) as exc:
            raise InstabilityError(f"rollout diverged at step {k}: {exc}", step_index=k) from exc
        frames.append(u)
    labels = channel_labels or (["u"] if single else None)
    return FrameSequence(np.stack(frames), channel_labels=labels or [])


def residual(u_t, u_next, v: VectorField, p: PDEParams) -> np.ndarray:
    """Pointwise residual ``u_next - step(u_t)``; zero for an exact update."""
    u_next = check_scalar_field(u_next, "u_next")
    if np.shape(u_t) != u_next.shape:
        raise DimensionError(f"u_t {np.shape(u_t)} and u_next {u_next.shape} differ")
    return u_next - step(u_t, v, p)


def residual_sq_norm(frames, v_seq, p: PDEParams) -> float:
    """Sum over transitions and channels of the cell-mean squared residual.

    ``frames`` is ``(T, H, W)`` or ``(T, C, H, W)``; ``v_seq`` holds ``T-1``
    velocity fields shared by all channels.
    """
    frames = np.asarray(frames)
    if isinstance(frames, np.ndarray) and frames.ndim == 3:
        frames = frames[:, None]
    if len(v_seq) != len(frames) - 1:
        raise ValueError(f"{len(frames)} frames need {len(frames) - 1} velocity fields, "
                         f"got {len(v_seq)}")
    total = 0.0
    for k, v in enumerate(v_seq):
        r = residual(frames[k], frames[k + 1], v, p)
        total += float(np.sum(np.mean(r * r, axis=(-2, -1))))
    return total


# -- deterministic randomness ------------------------------------------------

def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Generator for one named stream; new stream names never perturb old ones."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1),
                                                         zlib.crc32(stream.encode())]))


# -- synthetic scenarios -----------------------------------------------------

SCENARIO_KINDS = ("uniform-flow", "rigid-rotation", "shear", "diffusion-only", "source-sink")
V_CAP = 0.5


@dataclass
class SyntheticScenario:
    frames: FrameSequence
    true_v: list
    true_params: PDEParams
    kind: str
    seed: int
    dem: np.ndarray = None
    meta: dict = field(default_factory=dict)


def _gaussian(y, x, cy, cx, sigma):
    return np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma**2))


def _blobs(rng, y, x, h, w, n_blobs=None):
    n = int(rng.integers(1, 5)) if n_blobs is None else n_blobs
    scale = min(h, w)
    u = np.zeros_like(x)
    for _ in range(n):
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        sigma = rng.uniform(0.08, 0.16) * scale
        amp = rng.uniform(0.6, 1.5)
        u += amp * _gaussian(y, x, cy, cx, sigma)
    return u


def _terrain(rng, y, x, h, w):
    """Smooth synthetic elevation map in metres."""
    z = np.zeros_like(x)
    for _ in range(3):
        z += rng.uniform(100.0, 800.0) * _gaussian(
            y, x, rng.uniform(0, h), rng.uniform(0, w), rng.uniform(0.15, 0.35) * min(h, w))
    return z


def make_scenario(kind: str, size=(32, 32), n_frames=24, seed=0, channels=1,
                  velocity=None, diffusivity=None) -> SyntheticScenario:
    """Roll out Gaussian blobs under a known velocity field.

    ``velocity`` overrides the sampled ``(vx, vy)`` for ``uniform-flow``;
    ``diffusivity`` overrides the constant ``D``.
    """
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; choose from {SCENARIO_KINDS}")
    h, w = size
    if h < 16 or w < 16:
        raise DimensionError(f"scenario grid must be at least 16x16, got {h}x{w}")
    if n_frames < 9:
        raise ValueError(f"n_frames must be >= 9, got {n_frames}")
    rng = named_rng(seed, f"scenario/{kind}")
    y, x = coordinates((h, w))
    u0 = np.stack([_blobs(rng, y, x, h, w) for _ in range(channels)])
    dem = _terrain(rng, y, x, h, w)

    vx = np.zeros((h, w))
    vy = np.zeros((h, w))
    D = 0.0
    R = np.zeros((h, w))
    if kind == "uniform-flow":
        if velocity is None:
            speed = rng.uniform(0.1, V_CAP)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            velocity = (speed * np.cos(angle), speed * np.sin(angle))
        vx[:] = velocity[0]
        vy[:] = velocity[1]
    elif kind == "rigid-rotation":
        omega = rng.choice([-1.0, 1.0]) * rng.uniform(0.01, 0.03)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        vx = -omega * (y - cy)
        vy = omega * (x - cx)
        speed = np.hypot(vx, vy)
        factor = np.minimum(1.0, V_CAP / np.maximum(speed, 1e-300))
        vx, vy = vx * factor, vy * factor
    elif kind == "shear":
        a = rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.0)
        vx = a * (y / h - 0.5)
    elif kind == "diffusion-only":
        D = rng.uniform(0.05, 0.2)
    elif kind == "source-sink":
        D = 0.05
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.01, 0.03)
        R = amp * _gaussian(y, x, rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w,
                            0.1 * min(h, w))
    if diffusivity is not None:
        D = float(diffusivity)

    v = VectorField(vx, vy)
    p = PDEParams(np.full((h, w), D), R)
    verdict = cfl_check(v.max_speed(), D, p.spec)
    if verdict is not Stability.STABLE:
        raise ValueError(f"scenario parameters are {verdict.value} under the CFL check "
                         f"(v_max={v.max_speed():.3g}, D={D:.3g})")
    v_seq = [v] * (n_frames - 1)
    labels = [f"sat{k}" for k in range(channels)]
    frames = rollout(u0, v_seq, p, n_frames - 1, channel_labels=labels)
    return SyntheticScenario(frames, v_seq, p, kind, seed, dem)


def semi_lagrangian_advect(u, vx, vy, n_steps, order=3):
    """Independent advection oracle: trace characteristics back and interpolate.

    Works for steady velocity fields; each step samples ``u`` at
    ``(y - vy, x - vx)`` with spline interpolation and edge clamping.
    """
    u = np.asarray(u, dtype=np.float64)
    y, x = coordinates(u.shape)
    src = np.array([y - vy, x - vx])
    for _ in range(n_steps):
        u = ndimage.map_coordinates(u, src, order=order, mode="nearest")
    return u


def synthetic_radar(frames, gain=10.0, offset=0.5):
    """Rain rate (mm/h) coupled to channel 0: ``max(0, gain * (u0 - offset))``.

    ``frames`` is ``(T, C, H, W)``; returns ``(T, 1, H, W)``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    return np.maximum(0.0, gain * (frames[:, :1] - offset))
