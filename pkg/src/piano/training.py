"""Losses and the two-stage training protocol.

Loss conventions (shared with :func:`piano.pdesim.residual_sq_norm`):

* ``L_data``: sum over predicted steps of the mean squared error, the mean
  taken over batch, channels and cells.
* ``L_PDE``: sum over transitions and channels of the cell-mean squared
  residual of the explicit advection-diffusion update.
* ``L_total = L_data + alpha * L_PDE``.

Frames travel through the graph in a flattened ``(N, s*C, H, W)`` layout;
velocity stacks use ``(N, 2s, H, W)`` with interleaved ``vx, vy`` channels.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .gridcore import DEFAULT_SPEC, StencilSpec, divergence_kernel, grad_kernels, laplacian_kernel
from .operators import TNO, VNO, Normalizer, ParamMaps, TNOConfig, VNOConfig, init_param_maps
from .pdesim import named_rng

__all__ = [
    "TrainConfig", "TrainReport", "TrainingDivergence", "Dataset", "Adam",
    "pde_residual_node", "loss_data_node", "loss_pde_node",
    "loss_data", "loss_pde", "loss_total",
    "pretrain_tno", "pretrain_vno", "finetune", "finetune_objective", "predict_windows",
    "persistence_windows",
    "TranslateConfig", "train_translator",
]


class TrainingDivergence(FloatingPointError):
    """Training produced a non-finite loss; ``params`` holds the last good state."""

    def __init__(self, message, step, params=None, report=None):
        super().__init__(message)
        self.step = step
        self.params = params
        self.report = report


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr: float = 1e-3
    steps: int = 200
    batch: int = 4
    seed: int = 0
    seam_pair: bool = False
    precision: int = 32
    param_lr: float = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str = None
    eval_summary: dict = field(default_factory=dict)

    def log(self, step, l_data, l_pde, l_total):
        if l_data < 0 or l_pde < 0:
            raise ValueError(f"negative loss at step {step}: L_data={l_data}, L_PDE={l_pde}")
        self.rows.append((step, float(l_data), float(l_pde), float(l_total)))

    def column(self, name):
        idx = {"step": 0, "L_data": 1, "L_PDE": 2, "L_total": 3}[name]
        return np.array([r[idx] for r in self.rows])

    def to_csv(self, path):
        lines = ["step,L_data,L_PDE,L_total"]
        lines += [f"{s},{d!r},{p!r},{t!r}" for s, d, p, t in self.rows]
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


# -- data --------------------------------------------------------------------

@dataclass
class Dataset:
    """Scenario frames ``(T, C, H, W)`` with DEMs and group tags."""

    frames: list
    dems: list
    tags: list = None
    radar: list = None

    def __post_init__(self):
        if self.tags is None:
            self.tags = ["all"] * len(self.frames)
        shapes = {f.shape[1:] for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"scenarios disagree on C x H x W: {sorted(shapes)}")

    @classmethod
    def from_scenarios(cls, scenarios, radar=None):
        return cls([sc.frames.frames for sc in scenarios], [sc.dem for sc in scenarios],
                   [sc.kind for sc in scenarios], radar)

    def __len__(self):
        return len(self.frames)

    @property
    def channels(self):
        return self.frames[0].shape[1]

    @property
    def grid(self):
        return self.frames[0].shape[2:]

    def windows(self, span, stride=1):
        """``(scenario, t0)`` pairs for every window of ``span`` frames."""
        out = []
        for i, f in enumerate(self.frames):
            out += [(i, t0) for t0 in range(0, f.shape[0] - span + 1, stride)]
        if not out:
            raise ValueError(f"no scenario has {span} frames")
        return out

    def frame_normalizer(self):
        return Normalizer.fit(np.concatenate(self.frames), axis=1)

    def dem_normalizer(self):
        return Normalizer.fit(np.stack(self.dems)[:, None], axis=1)

    def gather(self, picks, start, length, dtype):
        """Stack frames ``[t0+start, t0+start+length)`` as ``(N, length*C, H, W)``."""
        out = np.stack([self.frames[i][t0 + start:t0 + start + length] for i, t0 in picks])
        n, s, c, h, w = out.shape
        return np.ascontiguousarray(out.reshape(n, s * c, h, w), dtype=dtype)

    def gather_dem(self, picks, dtype):
        return np.stack([self.dems[i][None] for i, _ in picks]).astype(dtype)


class _Batches:
    """Seeded shuffle over windows, reshuffled each epoch."""

    def __init__(self, windows, batch, seed, stream):
        self.windows = windows
        self.batch = batch
        self.rng = named_rng(seed, stream)
        self.order = []

    def next(self):
        picks = []
        while len(picks) < self.batch:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.windows)))
            picks.append(self.windows[self.order.pop()])
        return picks


# -- optimiser ---------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, lr_overrides=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.lr_overrides = lr_overrides or {}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def _lr(self, name):
        for prefix, lr in self.lr_overrides.items():
            if name.startswith(prefix):
                return lr
        return self.lr

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = self._lr(k)
            if lr:
                p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# -- differentiable losses ---------------------------------------------------

def _stencil_weights(spec, dtype):
    return (grad_kernels(spec.spacing)[:, None].astype(dtype),
            divergence_kernel(spec.spacing)[None].astype(dtype),
            laplacian_kernel(spec.spacing)[None, None].astype(dtype))


def pde_residual_node(u_t, u_next, v, D, R, spec: StencilSpec = DEFAULT_SPEC):
    """Residual ``u_next - step(u_t)`` for one channel.

    ``u_t``, ``u_next``: ``(N, 1, H, W)``; ``v``: ``(N, 2, H, W)``; ``D`` and
    ``R`` broadcast against ``(N, 1, H, W)``.  The stencils are conv2d nodes
    with frozen kernels, mirroring :mod:`piano.gridcore`.
    """
    kg, kd, kl = _stencil_weights(spec, u_t.dtype)
    g = ad.conv2d(u_t, ad.constant(kg))
    div = ad.conv2d(v, ad.constant(kd))
    lap = ad.conv2d(u_t, ad.constant(kl))
    vx, vy = ad.take(v, 0), ad.take(v, 1)
    advect = ad.add(ad.mul(vx, ad.take(g, 0)), ad.mul(vy, ad.take(g, 1)))
    stepped = ad.add(ad.sub(ad.sub(ad.add(u_t, ad.mul(D, lap)), advect), ad.mul(u_t, div)), R)
    return ad.sub(u_next, stepped)


def loss_pde_node(pairs, channels, D, R, spec=DEFAULT_SPEC):
    """Sum of cell-mean squared residuals over ``(u_t, u_next, v)`` pairs."""
    terms = []
    for u_t, u_next, v in pairs:
        for c in range(channels):
            r = pde_residual_node(ad.take(u_t, c), ad.take(u_next, c), v, D, R, spec)
            terms.append(ad.mean_square(r))
    return ad.add_n(terms)


def loss_data_node(pred, truth):
    """``pred``/``truth`` in flattened layout; one step is ``C`` channels."""
    truth = ad._as_node(truth)
    return ad.mean_square(ad.sub(pred, truth))


def _transition_pairs(frames, v, s, c, seam_prev=None, include_seam=False):
    """PINN pairs over a predicted window; ``v`` field ``k`` drives frame ``k``."""
    pairs = []
    if include_seam:
        pairs.append((seam_prev, ad.take(frames, 0, c), ad.take(v, 0, 2)))
    for k in range(1, s):
        pairs.append((ad.take(frames, (k - 1) * c, k * c), ad.take(frames, k * c, (k + 1) * c),
                      ad.take(v, 2 * k, 2 * k + 2)))
    return pairs


# -- array-level losses ------------------------------------------------------

def _as_frames(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"expected (T, C, H, W) frames, got shape {x.shape}")
    return x


def loss_data(pred, truth) -> float:
    """Sum over steps of the per-step mean squared error."""
    pred, truth = _as_frames(pred), _as_frames(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    t = pred.shape[0]
    total = ad.scale(loss_data_node(ad.constant(pred.reshape(1, -1, *pred.shape[2:])),
                                    truth.reshape(1, -1, *truth.shape[2:])), float(t))
    return float(total.value)


def _v_stack(v_hat):
    out = []
    for v in v_hat:
        out.append(v.stack() if hasattr(v, "stack") else np.asarray(v))
    return np.stack(out).astype(np.float64)


def loss_pde(pred_frames, v_hat, params, spec=DEFAULT_SPEC) -> float:
    """Differentiable-path evaluation of the PDE loss on plain arrays.

    ``pred_frames``: ``(T, C, H, W)``; ``v_hat``: ``T-1`` velocity fields (or
    arrays of shape ``(2, H, W)``); ``params``: :class:`ParamMaps` or any
    object with ``D`` and ``R`` arrays.
    """
    frames = _as_frames(pred_frames)
    vs = _v_stack(v_hat)
    if len(vs) != len(frames) - 1:
        raise ValueError(f"{len(frames)} frames need {len(frames) - 1} velocity fields, "
                         f"got {len(vs)}")
    D = ad.constant(np.asarray(params.D, dtype=np.float64)[None, None])
    R = ad.constant(np.asarray(params.R, dtype=np.float64)[None, None])
    pairs = [(ad.constant(frames[k][None]), ad.constant(frames[k + 1][None]),
              ad.constant(vs[k][None])) for k in range(len(vs))]
    if not pairs:
        return 0.0
    return float(loss_pde_node(pairs, frames.shape[1], D, R, spec).value)


def loss_total(pred, truth, v_hat, params, alpha, spec=DEFAULT_SPEC) -> float:
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return loss_data(pred, truth) + alpha * loss_pde(pred, v_hat, params, spec)


# -- training loops ----------------------------------------------------------

def _snapshot(params):
    return {k: v.copy() for k, v in params.items()}


def _restore(params, good):
    for k, v in good.items():
        params[k][...] = v


def _run(step_fn, params, cfg, report, optimiser):
    """Shared loop: evaluate, log, abort on divergence, update."""
    good = _snapshot(params)
    t0 = time.perf_counter()
    for it in range(cfg.steps):
        try:
            l_data, l_pde, l_total, grads = step_fn(it)
        except ad.NonFiniteError as exc:
            _restore(params, good)
            raise TrainingDivergence(f"non-finite values at step {it}: {exc}", it, good,
                                     report) from exc
        if not np.isfinite(l_total):
            _restore(params, good)
            raise TrainingDivergence(f"loss became non-finite at step {it}", it, good, report)
        report.log(it, l_data, l_pde, l_total)
        good = _snapshot(params)
        optimiser.step(grads)
    report.wall_time = time.perf_counter() - t0
    return report


def _grads_for(leaves, names):
    return {k: (np.zeros_like(leaves[k].value) if leaves[k].grad is None else leaves[k].grad)
            for k in names}


def pretrain_tno(data: Dataset, model_cfg: TNOConfig, cfg: TrainConfig, model: TNO = None):
    """Minimise ``L_data`` on ground-truth windows; returns ``(model, report)``."""
    dtype = cfg.dtype
    if model is None:
        model = TNO(model_cfg, seed=cfg.seed, frame_norm=data.frame_normalizer(),
                    dem_norm=data.dem_normalizer(), dtype=dtype)
    s = model.cfg.s
    batches = _Batches(data.windows(2 * s), cfg.batch, cfg.seed, "shuffle/tno")
    opt = Adam(model.params, cfg.lr)
    report = TrainReport()

    def one(it):
        picks = batches.next()
        hist = data.gather(picks, 0, s, dtype)
        target = data.gather(picks, s, s, dtype)
        dem = data.gather_dem(picks, dtype) if model.cfg.use_dem else None
        leaves = model.leaves()
        pred = model.apply(leaves, ad.constant(hist), None if dem is None else ad.constant(dem))
        loss = ad.scale(loss_data_node(pred, target), float(s))
        ad.backward(loss)
        value = float(loss.value)
        return value, 0.0, value, _grads_for(leaves, model.params)

    _run(one, model.params, cfg, report, opt)
    return model, report


def _vno_models(data, model_cfg, cfg, vno, maps):
    dtype = cfg.dtype
    if vno is None:
        vno = VNO(model_cfg, seed=cfg.seed, frame_norm=data.frame_normalizer(), dtype=dtype)
    if maps is None:
        h, w = data.grid
        maps = init_param_maps(h, w, dtype=dtype)
    return vno, maps


def _joint_params(**models):
    params = {}
    for prefix, m in models.items():
        params.update({f"{prefix}/{k}": v for k, v in m.params.items()})
    return params


def pretrain_vno(data: Dataset, model_cfg: VNOConfig, cfg: TrainConfig, vno: VNO = None,
                 maps: ParamMaps = None):
    """Minimise ``L_PDE`` on ground-truth windows of ``s + 1`` frames.

    Velocity field ``k`` drives the transition from frame ``k`` to ``k + 1``
    of the window, and the V-NO sees frames ``1..s``.  Returns
    ``(vno, maps, report)``.
    """
    dtype = cfg.dtype
    vno, maps = _vno_models(data, model_cfg, cfg, vno, maps)
    s, c = vno.cfg.s, vno.cfg.channels
    batches = _Batches(data.windows(s + 1), cfg.batch, cfg.seed, "shuffle/vno")
    params = _joint_params(vno=vno, maps=maps)
    opt = Adam(params, cfg.lr, lr_overrides={"maps/": cfg.param_lr} if cfg.param_lr is not None
               else None)
    report = TrainReport()

    def one(it):
        picks = batches.next()
        window = ad.constant(data.gather(picks, 0, s + 1, dtype))
        leaves = {**vno.leaves("vno/"), **maps.leaves("maps/")}
        seen = ad.take(window, c, (s + 1) * c)
        v = vno.apply(leaves, seen, prefix="vno/")
        D, R = maps.nodes(leaves, prefix="maps/")
        pairs = _transition_pairs(seen, v, s, c, seam_prev=ad.take(window, 0, c),
                                  include_seam=True)
        loss = loss_pde_node(pairs, c, D, R)
        ad.backward(loss)
        value = float(loss.value)
        return 0.0, value, value, _grads_for(leaves, params)

    _run(one, params, cfg, report, opt)
    return vno, maps, report


def finetune_objective(tno, vno, maps, hist, target, dem, alpha, seam_pair=False):
    """Graph for one fine-tuning batch: ``L_data + alpha * L_PDE``.

    ``hist``/``target`` are ``(N, s*C, H, W)``.  Returns the three loss nodes
    and the parameter leaves (prefixed ``tno/``, ``vno/``, ``maps/``).
    """
    s, c = tno.cfg.s, tno.cfg.channels
    hist = ad._as_node(hist)
    dem = None if dem is None else ad._as_node(dem)
    leaves = {**tno.leaves("tno/"), **vno.leaves("vno/"), **maps.leaves("maps/")}
    pred = tno.apply(leaves, hist, dem, prefix="tno/")
    v = vno.apply(leaves, pred, prefix="vno/")
    D, R = maps.nodes(leaves, prefix="maps/")
    seam = ad.take(hist, (s - 1) * c, s * c)
    pairs = _transition_pairs(pred, v, s, c, seam_prev=seam, include_seam=seam_pair)
    l_data = ad.scale(loss_data_node(pred, target), float(s))
    l_pde = loss_pde_node(pairs, c, D, R) if pairs else ad.constant(np.zeros((), pred.dtype))
    total = ad.add(l_data, ad.scale(l_pde, alpha))
    return l_data, l_pde, total, leaves


def finetune(tno: TNO, vno: VNO, maps: ParamMaps, data: Dataset, cfg: TrainConfig):
    """Joint training on ``L_data + alpha * L_PDE``.

    The V-NO reads the T-NO predictions and PINN residuals are taken over
    consecutive predicted frames (plus the observation/prediction seam when
    ``cfg.seam_pair``).  Models are updated in place; returns the report.
    """
    if cfg.alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {cfg.alpha}")
    if tno.cfg.s != vno.cfg.s or tno.cfg.channels != vno.cfg.channels:
        raise ValueError("T-NO and V-NO disagree on window length or channel count")
    dtype = cfg.dtype
    for m in (tno, vno, maps):
        m.cast(dtype)
    s = tno.cfg.s
    batches = _Batches(data.windows(2 * s), cfg.batch, cfg.seed, "shuffle/finetune")
    params = _joint_params(tno=tno, vno=vno, maps=maps)
    opt = Adam(params, cfg.lr, lr_overrides={"maps/": cfg.param_lr} if cfg.param_lr is not None
               else None)
    report = TrainReport()

    def one(it):
        picks = batches.next()
        hist = data.gather(picks, 0, s, dtype)
        target = data.gather(picks, s, s, dtype)
        dem = data.gather_dem(picks, dtype) if tno.cfg.use_dem else None
        l_data, l_pde, total, leaves = finetune_objective(tno, vno, maps, hist, target, dem,
                                                          cfg.alpha, cfg.seam_pair)
        ad.backward(total)
        return (float(l_data.value), float(l_pde.value), float(total.value),
                _grads_for(leaves, params))

    _run(one, params, cfg, report, opt)
    return report


def predict_windows(model: TNO, data: Dataset, stride=None, batch=8):
    """Run the T-NO on every ``2s`` window; returns ``(pred, truth, picks)``.

    ``pred`` and ``truth`` are ``(N, s, C, H, W)``.  ``model=None`` gives the
    persistence forecast.
    """
    s = model.cfg.s if model is not None else None
    if s is None:
        raise ValueError("persistence needs a window length; use persistence_windows")
    picks = data.windows(2 * s, stride or s)
    preds, truths = [], []
    c = data.channels
    h, w = data.grid
    for k in range(0, len(picks), batch):
        chunk = picks[k:k + batch]
        hist = data.gather(chunk, 0, s, model.dtype).reshape(len(chunk), s, c, h, w)
        dem = data.gather_dem(chunk, model.dtype) if model.cfg.use_dem else None
        preds.append(model.predict(hist, dem).astype(np.float64))
        truths.append(data.gather(chunk, s, s, np.float64).reshape(len(chunk), s, c, h, w))
    return np.concatenate(preds), np.concatenate(truths), picks


def persistence_windows(data: Dataset, s, stride=None):
    picks = data.windows(2 * s, stride or s)
    c = data.channels
    h, w = data.grid
    hist = data.gather(picks, 0, s, np.float64).reshape(len(picks), s, c, h, w)
    truth = data.gather(picks, s, s, np.float64).reshape(len(picks), s, c, h, w)
    pred = np.repeat(hist[:, -1:], s, axis=1)
    return pred, truth, picks


def clone(model):
    return copy.deepcopy(model)


@dataclass
class TranslateConfig:
    lr: float = 3e-3
    steps: int = 300
    batch: int = 8
    seed: int = 0
    precision: int = 32


def train_translator(data: Dataset, cfg: TranslateConfig, model_cfg=None, model=None):
    """Supervised MSE fit of satellite frames to paired radar rain rates."""
    from .operators import Translator, TranslatorConfig

    if data.radar is None:
        raise ValueError("dataset has no paired radar frames")
    dtype = np.float32 if cfg.precision == 32 else np.float64
    if model is None:
        model = Translator(model_cfg or TranslatorConfig(channels=data.channels), seed=cfg.seed,
                           frame_norm=data.frame_normalizer(), dtype=dtype)
    pairs = [(i, t) for i, f in enumerate(data.frames) for t in range(f.shape[0])]
    batches = _Batches(pairs, cfg.batch, cfg.seed, "shuffle/translator")
    opt = Adam(model.params, cfg.lr)
    report = TrainReport()

    def one(it):
        picks = batches.next()
        sat = np.stack([data.frames[i][t] for i, t in picks]).astype(dtype)
        rain = np.stack([data.radar[i][t] for i, t in picks]).astype(dtype)[:, None]
        leaves = model.leaves()
        out = model.apply(leaves, ad.constant(sat))
        if out.shape != rain.shape:
            # sub() would broadcast (N,1,H,W) against (N,H,W) into (N,N,H,W).
            raise ValueError(f"translator output {out.shape} vs target {rain.shape}")
        loss = ad.mean_square(ad.sub(out, rain))
        ad.backward(loss)
        value = float(loss.value)
        return value, 0.0, value, _grads_for(leaves, model.params)

    _run(one, model.params, TrainConfig(steps=cfg.steps, lr=cfg.lr, batch=cfg.batch), report, opt)
    model.trained = True
    return model, report
