"""Categorical and continuous verification by lead time.

Events are cells with rain rate ``>= threshold``.  CSI tables pool the
contingency counts over all samples before dividing; a CSI with a zero
denominator is missing (``None``) and is left out of any aggregate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ContingencyCounts", "LeadTimeTable", "GroupReport", "SweepReport",
    "contingency", "csi", "csi_by_leadtime", "mse_by_leadtime", "group_report",
    "alpha_sweep", "write_pgm",
]


@dataclass(frozen=True)
class ContingencyCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("contingency counts must be non-negative")

    def __add__(self, other):
        return ContingencyCounts(self.tp + other.tp, self.fp + other.fp,
                                 self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def contingency(pred, truth, threshold) -> ContingencyCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    p = pred >= threshold
    t = truth >= threshold
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ContingencyCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def csi(c: ContingencyCounts):
    """``tp / (tp + fp + fn)``, or ``None`` when no event was forecast or observed."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return None
    return c.tp / denom


@dataclass
class LeadTimeTable:
    """One value per lead time for each labelled row (threshold, alpha, group...)."""

    metric: str
    lead_times: list
    rows: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def row(self, label):
        return self.rows[label]

    def to_csv(self, path=None):
        labels = list(self.rows)
        lines = ["lead_time," + ",".join(labels)]
        for k, lead in enumerate(self.lead_times):
            cells = []
            for label in labels:
                v = self.rows[label][k]
                cells.append("" if v is None else repr(float(v)))
            lines.append(f"{lead}," + ",".join(cells))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self):
        width = max(len(lbl) for lbl in self.rows) if self.rows else 5
        head = " " * width + "".join(f"{f'{lt}h':>8}" for lt in self.lead_times)
        out = [self.metric, head]
        for label, values in self.rows.items():
            cells = "".join(f"{'--':>8}" if v is None else f"{v:8.3f}" for v in values)
            out.append(f"{label:<{width}}{cells}")
        return "\n".join(out)


def _rain_stack(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4 and x.shape[2] == 1:
        x = x[:, :, 0]
    if x.ndim != 4:
        raise ValueError(f"expected (samples, lead, H, W) rain rates, got {x.shape}")
    return x


def csi_label(threshold):
    return f"CSI {threshold:g}mm"


def pooled_counts(preds, truths, threshold):
    """Per-lead-time contingency counts summed over samples."""
    preds, truths = _rain_stack(preds), _rain_stack(truths)
    if preds.shape != truths.shape:
        raise ValueError(f"prediction {preds.shape} and truth {truths.shape} differ")
    if preds.shape[0] == 0:
        raise ValueError("empty evaluation set")
    out = []
    for k in range(preds.shape[1]):
        total = ContingencyCounts()
        for i in range(preds.shape[0]):
            total = total + contingency(preds[i, k], truths[i, k], threshold)
        out.append(total)
    return out


def csi_by_leadtime(preds, truths, thresholds=(4.0, 8.0), s=None) -> LeadTimeTable:
    """Pooled CSI per (threshold, lead time); inputs are ``(N, s, H, W)`` rain rates."""
    preds, truths = _rain_stack(preds), _rain_stack(truths)
    s = preds.shape[1] if s is None else s
    if preds.shape[1] != s:
        raise ValueError(f"expected {s} lead times, got {preds.shape[1]}")
    table = LeadTimeTable("CSI", list(range(1, s + 1)))
    for thr in thresholds:
        counts = pooled_counts(preds, truths, thr)
        table.rows[csi_label(thr)] = [csi(c) for c in counts]
        table.counts[csi_label(thr)] = [c.tp + c.fp + c.fn for c in counts]
    return table


def mse_by_leadtime(preds, truths, label="MSE") -> LeadTimeTable:
    """Mean squared error per lead time over samples, channels and cells."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise ValueError(f"prediction {preds.shape} and truth {truths.shape} differ")
    if preds.shape[0] == 0:
        raise ValueError("empty evaluation set")
    axes = (0,) + tuple(range(2, preds.ndim))
    err = np.mean((preds - truths) ** 2, axis=axes)
    table = LeadTimeTable("MSE", list(range(1, preds.shape[1] + 1)))
    table.rows[label] = [float(e) for e in err]
    table.counts[label] = [int(preds.shape[0])] * preds.shape[1]
    return table


@dataclass
class GroupReport:
    tables: dict
    threshold_labels: list

    def mean_csi(self, tag, label):
        vals = [v for v in self.tables[tag].rows[label] if v is not None]
        return float(np.mean(vals)) if vals else None

    def spread(self, label=None):
        """Max minus min across groups of the lead-time-averaged CSI."""
        label = label or self.threshold_labels[0]
        means = [m for m in (self.mean_csi(t, label) for t in self.tables) if m is not None]
        if not means:
            return None
        return max(means) - min(means)

    def as_table(self, label=None) -> LeadTimeTable:
        label = label or self.threshold_labels[0]
        first = next(iter(self.tables.values()))
        out = LeadTimeTable(f"{label} by group", list(first.lead_times))
        for tag, table in self.tables.items():
            out.rows[tag] = table.rows[label]
            out.counts[tag] = table.counts[label]
        return out


def group_report(preds, truths, tags, thresholds=(4.0, 8.0)) -> GroupReport:
    """CSI tables per tag (samples are grouped by ``tags[i]``)."""
    tags = list(tags)
    if not tags:
        raise ValueError("no tags given")
    preds, truths = _rain_stack(preds), _rain_stack(truths)
    if len(tags) != preds.shape[0]:
        raise ValueError(f"{len(tags)} tags for {preds.shape[0]} samples")
    tables = {}
    for tag in sorted(set(tags)):
        idx = [i for i, t in enumerate(tags) if t == tag]
        tables[tag] = csi_by_leadtime(preds[idx], truths[idx], thresholds)
    return GroupReport(tables, [csi_label(t) for t in thresholds])


# -- alpha sweep -------------------------------------------------------------

def alpha_label(alpha):
    return f"alpha={alpha:g}"


@dataclass
class SweepReport:
    alphas: list
    table: LeadTimeTable
    status: dict
    reports: dict = field(default_factory=dict)

    def grid(self):
        """``len(alphas) x s`` array of MSE values (NaN for failed runs)."""
        rows = []
        for a in self.alphas:
            values = self.table.rows.get(alpha_label(a))
            rows.append([math.nan if v is None else v for v in values] if values
                        else [math.nan] * len(self.table.lead_times))
        return np.array(rows)

    def to_csv(self, path=None):
        """One row per alpha, one column per lead time, then the run status."""
        lines = ["alpha," + ",".join(f"{lt}h" for lt in self.table.lead_times) + ",status"]
        for a, row in zip(self.alphas, self.grid()):
            cells = ",".join("" if math.isnan(v) else repr(float(v)) for v in row)
            lines.append(f"{a!r},{cells},{self.status[a]}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def alpha_sweep(alphas, train_data, eval_data, tno, vno, maps, cfg, out_dir=None,
                on_done=None) -> SweepReport:
    """Fine-tune one copy of the pretrained models per alpha and tabulate MSE.

    Every run starts from the same pretrained checkpoints and the same seed.
    With ``out_dir`` each alpha writes ``alpha_<a>/mse.csv`` and is skipped on
    a rerun if that file already exists.  A diverging run is recorded in
    ``status`` and does not stop the sweep.
    """
    from dataclasses import replace

    from .training import TrainingDivergence, clone, finetune, predict_windows

    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alpha sweep needs at least one alpha")
    s = tno.cfg.s
    table = LeadTimeTable("MSE", list(range(1, s + 1)))
    status, reports = {}, {}
    for a in alphas:
        label = alpha_label(a)
        run_dir = Path(out_dir) / f"alpha_{a:g}" if out_dir is not None else None
        done = run_dir / "mse.csv" if run_dir is not None else None
        if done is not None and done.exists():
            table.rows[label] = _read_row(done)
            status[a] = "cached"
            continue
        t, v, m = clone(tno), clone(vno), clone(maps)
        try:
            rep = finetune(t, v, m, train_data, replace(cfg, alpha=a))
        except TrainingDivergence as exc:
            status[a] = f"diverged@{exc.step}"
            table.rows[label] = [None] * s
            continue
        pred, truth, _ = predict_windows(t, eval_data)
        row = mse_by_leadtime(pred, truth, label)
        table.rows[label] = row.rows[label]
        status[a] = "ok"
        reports[a] = rep
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            if on_done is not None:
                on_done(run_dir, a, t, v, m, rep)
            row.to_csv(done)
    return SweepReport(alphas, table, status, reports)


def _read_row(path):
    lines = Path(path).read_text().strip().splitlines()[1:]
    return [float(line.split(",")[1]) if line.split(",")[1] else None for line in lines]


# -- image dumps -------------------------------------------------------------

def write_pgm(path, field_, vmax=None):
    """Binary PGM (P5) of a signed field; mid-grey is zero, ``vmax`` saturates."""
    f = np.asarray(field_, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"PGM needs a 2-D field, got shape {f.shape}")
    vmax = float(np.abs(f).max()) if vmax is None else float(vmax)
    scaled = 0.5 if vmax == 0 else np.clip(0.5 + 0.5 * f / vmax, 0.0, 1.0)
    img = np.round(np.broadcast_to(scaled, f.shape) * 255).astype(np.uint8)
    h, w = f.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
