"""Command-line entry point.

Subcommands: ``gen``, ``train --stage {tno,vno,finetune}``, ``eval``,
``sweep``, ``translate-train`` and ``nowcast``.  Each takes
``--config <json>`` and ``--out <dir>`` and writes its resolved config into
the output directory.

Exit codes: 0 success, 2 configuration error, 3 training divergence or
numerical instability, 4 I/O or data-pairing error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import evalmetrics as em
from . import plotting
from .gfs import GFSFormatError, read_gfs, write_gfs
from .operators import (
    TNO, TNOConfig, TranslatorConfig, VNOConfig, load_model, save_model,
)
from .pdesim import (
    InstabilityError, PDEParams, VectorField, make_scenario, named_rng, residual_sq_norm,
    synthetic_radar,
)
from .training import (
    Dataset, TrainConfig, TrainingDivergence, TranslateConfig, finetune, persistence_windows,
    predict_windows, pretrain_tno, pretrain_vno, train_translator,
)

log = logging.getLogger("piano")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class PairingError(OSError):
    pass


# -- data directory ----------------------------------------------------------

def _scenario_seeds(seed, split, count):
    return [int(s) for s in named_rng(seed, f"scenario/{split}").integers(0, 2**31, count)]


def cmd_gen(cfg, out: Path):
    sc = cfg["scenario"]
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    kinds = sc["kinds"]
    for split, count in (("train", sc["count"]), ("eval", sc["eval_count"])):
        for i, seed in enumerate(_scenario_seeds(cfg["seed"], split, count)):
            kind = kinds[i % len(kinds)]
            velocity = sc["velocity"] if kind == "uniform-flow" else None
            scn = make_scenario(kind, (sc["H"], sc["W"]), sc["n_frames"], seed,
                                channels=sc["channels"], velocity=velocity)
            name = f"{split}_{i:04d}"
            frames = scn.frames.frames
            write_gfs(out / f"{name}.gfs", frames, scn.frames.channel_labels, sc["dtype"])
            truth = np.stack([np.stack([v.vx, v.vy, scn.true_params.D, scn.true_params.R])
                              for v in scn.true_v])
            write_gfs(out / f"{name}.truth.gfs", truth, ["vx", "vy", "D", "R"], sc["dtype"])
            write_gfs(out / f"{name}.dem.gfs", scn.dem[None, None], ["dem"], sc["dtype"])
            if sc["radar"]:
                write_gfs(out / f"{name}.radar.gfs", synthetic_radar(frames), ["rain_rate"],
                          sc["dtype"])
            res = _self_check(out, name)
            if sc["dtype"] == "float64" and not res < 1e-12:
                raise InstabilityError(f"{name}: re-read residual {res:.3g} exceeds 1e-12")
            entries.append({"name": name, "kind": kind, "seed": seed, "split": split,
                            "tag": kind, "residual": res})
    index = {"H": sc["H"], "W": sc["W"], "n_frames": sc["n_frames"],
             "channels": sc["channels"], "scenarios": entries}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d scenarios to %s", len(entries), out)


def _self_check(data_dir: Path, name):
    frames, _ = read_gfs(data_dir / f"{name}.gfs")
    truth, _ = read_gfs(data_dir / f"{name}.truth.gfs")
    frames = frames.astype(np.float64)
    truth = truth.astype(np.float64)
    p = PDEParams(truth[0, 2], truth[0, 3])
    v_seq = [VectorField(t[0], t[1]) for t in truth]
    return residual_sq_norm(frames, v_seq, p)


def load_dataset(data_dir, split="train", need_radar=False) -> Dataset:
    data_dir = Path(data_dir)
    index_path = data_dir / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no index.json in data directory {data_dir}")
    index = json.loads(index_path.read_text())
    entries = [e for e in index["scenarios"] if e["split"] == split]
    if not entries:
        raise FileNotFoundError(f"{data_dir}: no scenarios in split {split!r}")
    frames, dems, tags, radar = [], [], [], []
    for e in entries:
        f, _ = read_gfs(data_dir / f"{e['name']}.gfs")
        d, _ = read_gfs(data_dir / f"{e['name']}.dem.gfs")
        frames.append(f.astype(np.float64))
        dems.append(d[0, 0].astype(np.float64))
        tags.append(e.get("tag", e["kind"]))
        rpath = data_dir / f"{e['name']}.radar.gfs"
        if rpath.exists():
            r, _ = read_gfs(rpath)
            if r.shape[0] != f.shape[0] or r.shape[2:] != f.shape[2:]:
                raise PairingError(f"{rpath.name} does not match {e['name']}.gfs in shape")
            radar.append(r[:, 0].astype(np.float64))
        elif need_radar:
            raise PairingError(f"missing radar pair {rpath.name} for {e['name']}.gfs")
    return Dataset(frames, dems, tags, radar if len(radar) == len(frames) else None)


# -- helpers -----------------------------------------------------------------

def _train_cfg(cfg, **over):
    t = dict(cfg["train"])
    t.update(over)
    return TrainConfig(seed=cfg["seed"], **t)


def _model_cfgs(cfg, channels):
    m = cfg["model"]
    return (TNOConfig(channels=channels, **m["tno"]), VNOConfig(channels=channels, **m["vno"]))


def _checkpoint(cfg, key, required_for):
    path = cfg["paths"]["checkpoints"].get(key)
    if path is None:
        raise config_mod.ConfigError(
            [f"paths.checkpoints.{key} is required for {required_for} (missing {key} checkpoint)"])
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{key} checkpoint not found: {path}")
    return path


def _data_dir(cfg):
    if cfg["paths"]["data"] is None:
        raise config_mod.ConfigError(["paths.data is required"])
    return Path(cfg["paths"]["data"])


def _save_run(out, name, report):
    report.to_csv(out / "metrics.csv")
    if report.rows:
        plotting.plot_losses(report, out / f"{name}_losses.png")


def _handle_divergence(exc, out, models):
    for name, model in models.items():
        save_model(out / f"{name}.last_good.ckpt", model)
    if exc.report is not None:
        exc.report.to_csv(out / "metrics.csv")
    raise exc


# -- commands ----------------------------------------------------------------

def cmd_train(cfg, out: Path, stage):
    data = load_dataset(_data_dir(cfg), "train")
    tno_cfg, vno_cfg = _model_cfgs(cfg, data.channels)
    tcfg = _train_cfg(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "tno":
        model = TNO(tno_cfg, seed=tcfg.seed, frame_norm=data.frame_normalizer(),
                    dem_norm=data.dem_normalizer(), dtype=tcfg.dtype)
        try:
            _, report = pretrain_tno(data, tno_cfg, tcfg, model=model)
        except TrainingDivergence as exc:
            _handle_divergence(exc, out, {"tno": model})
        save_model(out / "tno.ckpt", model)
    elif stage == "vno":
        from .operators import VNO, init_param_maps

        vno = VNO(vno_cfg, seed=tcfg.seed, frame_norm=data.frame_normalizer(), dtype=tcfg.dtype)
        maps = init_param_maps(*data.grid, dtype=tcfg.dtype)
        try:
            _, _, report = pretrain_vno(data, vno_cfg, tcfg, vno=vno, maps=maps)
        except TrainingDivergence as exc:
            _handle_divergence(exc, out, {"vno": vno, "maps": maps})
        save_model(out / "vno.ckpt", vno)
        save_model(out / "maps.ckpt", maps)
    elif stage == "finetune":
        tno_path = _checkpoint(cfg, "tno", "finetune")
        vno_path = _checkpoint(cfg, "vno", "finetune")
        maps_path = cfg["paths"]["checkpoints"].get("maps") or vno_path.with_name("maps.ckpt")
        if not Path(maps_path).exists():
            raise FileNotFoundError(f"maps checkpoint not found: {maps_path}")
        tno, vno, maps = load_model(tno_path), load_model(vno_path), load_model(maps_path)
        try:
            report = finetune(tno, vno, maps, data, tcfg)
        except TrainingDivergence as exc:
            _handle_divergence(exc, out, {"tno": tno, "vno": vno, "maps": maps})
        save_model(out / "tno.ckpt", tno)
        save_model(out / "vno.ckpt", vno)
        save_model(out / "maps.ckpt", maps)
    else:
        raise config_mod.ConfigError([f"unknown stage {stage!r}"])
    _save_run(out, stage, report)


def _predictions(cfg, data, s, stride):
    predictor = cfg["eval"]["predictor"]
    if predictor == "model":
        model = load_model(_checkpoint(cfg, "tno", "eval with predictor=model"))
        if model.cfg.channels != data.channels:
            raise config_mod.ConfigError([f"checkpoint expects {model.cfg.channels} channels, "
                                          f"data has {data.channels}"])
        if model.cfg.s != s:
            raise config_mod.ConfigError([f"checkpoint window {model.cfg.s} != eval.s {s}"])
        return predict_windows(model, data, stride)
    pred, truth, picks = persistence_windows(data, s, stride)
    if predictor == "truth":
        pred = truth.copy()
    return pred, truth, picks


def _rain(cfg, data, picks, pred, s):
    """Predicted and observed rain for each window, or ``None`` without radar."""
    if data.radar is None:
        return None
    truth = np.stack([data.radar[i][t0 + s:t0 + 2 * s] for i, t0 in picks])
    predictor = cfg["eval"]["predictor"]
    tpath = cfg["paths"]["checkpoints"].get("translator")
    if predictor == "truth":
        return truth.copy(), truth
    if tpath is not None:
        translator = load_model(_checkpoint(cfg, "translator", "rain-rate evaluation"))
        rain = np.stack([translator.translate(p) for p in pred]).astype(np.float64)
        return rain, truth
    if predictor == "persistence":
        last = np.stack([data.radar[i][t0 + s - 1] for i, t0 in picks])
        return np.repeat(last[:, None], s, axis=1), truth
    return None


def cmd_eval(cfg, out: Path):
    ev = cfg["eval"]
    data = load_dataset(_data_dir(cfg), "eval")
    s = ev["s"]
    out.mkdir(parents=True, exist_ok=True)
    pred, truth, picks = _predictions(cfg, data, s, ev["stride"])
    mse = em.mse_by_leadtime(pred, truth)
    mse.to_csv(out / "mse_by_leadtime.csv")
    plotting.plot_leadtime(mse, out / "mse_by_leadtime.png", "satellite prediction MSE")
    lines = [mse.summary(), ""]
    rain = _rain(cfg, data, picks, pred, s)
    if rain is not None:
        rain_pred, rain_truth = rain
        table = em.csi_by_leadtime(rain_pred, rain_truth, ev["thresholds"])
        table.to_csv(out / "csi_by_leadtime.csv")
        plotting.plot_leadtime(table, out / "csi_by_leadtime.png", "pooled CSI")
        lines += [table.summary(), ""]
        tags = [data.tags[i] for i, _ in picks]
        if len(set(tags)) > 1:
            groups = em.group_report(rain_pred, rain_truth, tags, ev["thresholds"])
            gt = groups.as_table()
            gt.to_csv(out / "csi_by_group.csv")
            lines += [gt.summary(), f"spread (max - min mean CSI): {groups.spread()!r}", ""]
    else:
        lines.append("CSI skipped: no radar pairs or no translator checkpoint")
    if ev["pgm"]:
        maps_dir = out / "difference_maps"
        maps_dir.mkdir(exist_ok=True)
        for k, (i, t0) in enumerate(picks):
            for lead in range(s):
                em.write_pgm(maps_dir / f"w{k:03d}_s{i:03d}_t{t0:03d}_lead{lead + 1}.pgm",
                             pred[k, lead, 0] - truth[k, lead, 0])
        plotting.plot_difference_maps(truth[0, :, 0], pred[0, :, 0],
                                      out / "difference_maps.png")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


def _pretrained(cfg, out, data):
    """Pretrained T-NO, V-NO and maps: from config paths, cache, or fresh runs."""
    ck = cfg["paths"]["checkpoints"]
    pre = out / "pretrained"
    pre.mkdir(parents=True, exist_ok=True)
    tno_cfg, vno_cfg = _model_cfgs(cfg, data.channels)
    sw = cfg["sweep"]
    tno_path = Path(ck["tno"]) if ck["tno"] else pre / "tno.ckpt"
    if not tno_path.exists():
        if ck["tno"]:
            raise FileNotFoundError(f"tno checkpoint not found: {tno_path}")
        tno, rep = pretrain_tno(data, tno_cfg, _train_cfg(cfg, steps=sw["tno_steps"]))
        save_model(tno_path, tno)
        rep.to_csv(pre / "tno_metrics.csv")
    vno_path = Path(ck["vno"]) if ck["vno"] else pre / "vno.ckpt"
    maps_path = Path(ck["maps"]) if ck["maps"] else vno_path.with_name("maps.ckpt")
    if not vno_path.exists() or not maps_path.exists():
        if ck["vno"]:
            raise FileNotFoundError(f"vno/maps checkpoint not found: {vno_path}, {maps_path}")
        vno, maps, rep = pretrain_vno(data, vno_cfg, _train_cfg(cfg, steps=sw["vno_steps"]))
        save_model(vno_path, vno)
        save_model(maps_path, maps)
        rep.to_csv(pre / "vno_metrics.csv")
    return load_model(tno_path), load_model(vno_path), load_model(maps_path)


def cmd_sweep(cfg, out: Path):
    data_dir = _data_dir(cfg)
    train, evald = load_dataset(data_dir, "train"), load_dataset(data_dir, "eval")
    out.mkdir(parents=True, exist_ok=True)
    tno, vno, maps = _pretrained(cfg, out, train)

    def on_done(run_dir, alpha, t, v, m, rep):
        save_model(run_dir / "tno.ckpt", t)
        save_model(run_dir / "vno.ckpt", v)
        save_model(run_dir / "maps.ckpt", m)
        rep.to_csv(run_dir / "metrics.csv")

    report = em.alpha_sweep(cfg["sweep"]["alphas"], train, evald, tno, vno, maps,
                            _train_cfg(cfg), out_dir=out, on_done=on_done)
    report.to_csv(out / "sweep_mse.csv")
    plotting.plot_sweep(report, out / "sweep_mse.png")
    (out / "summary.txt").write_text(report.table.summary() + "\n\nstatus: "
                                     + json.dumps({f"{a:g}": st for a, st in
                                                   report.status.items()}) + "\n")


def cmd_translate_train(cfg, out: Path):
    data = load_dataset(_data_dir(cfg), "train", need_radar=True)
    out.mkdir(parents=True, exist_ok=True)
    tc = TranslateConfig(seed=cfg["seed"], **cfg["translate"])
    mcfg = TranslatorConfig(channels=data.channels, **cfg["model"]["translator"])
    model, report = train_translator(data, tc, mcfg)
    save_model(out / "translator.ckpt", model)
    _save_run(out, "translator", report)


def cmd_nowcast(cfg, out: Path):
    data = load_dataset(_data_dir(cfg), "eval", need_radar=True)
    tno = load_model(_checkpoint(cfg, "tno", "nowcast"))
    translator = load_model(_checkpoint(cfg, "translator", "nowcast"))
    s = tno.cfg.s
    out.mkdir(parents=True, exist_ok=True)
    rain_dir = out / "nowcast"
    rain_dir.mkdir(exist_ok=True)
    pred, _, picks = predict_windows(tno, data, cfg["eval"]["stride"])
    pers, _, _ = persistence_windows(data, s, cfg["eval"]["stride"])
    truth = np.stack([data.radar[i][t0 + s:t0 + 2 * s] for i, t0 in picks])
    model_rain = np.stack([translator.translate(p) for p in pred]).astype(np.float64)
    pers_rain = np.stack([translator.translate(p) for p in pers]).astype(np.float64)
    for k, (i, t0) in enumerate(picks):
        write_gfs(rain_dir / f"s{i:03d}_t{t0:03d}.gfs", model_rain[k][:, None], ["rain_rate"])
    thresholds = cfg["eval"]["thresholds"]
    model_tab = em.csi_by_leadtime(model_rain, truth, thresholds)
    pers_tab = em.csi_by_leadtime(pers_rain, truth, thresholds)
    table = em.LeadTimeTable("CSI", model_tab.lead_times)
    for label in model_tab.rows:
        table.rows[f"nowcast {label}"] = model_tab.rows[label]
        table.rows[f"persistence {label}"] = pers_tab.rows[label]
    table.to_csv(out / "nowcast_csi.csv")
    plotting.plot_leadtime(table, out / "nowcast_csi.png", "nowcast vs persistence CSI")
    (out / "summary.txt").write_text(table.summary() + "\n")


COMMANDS = {
    "gen": cmd_gen,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "translate-train": cmd_translate_train,
    "nowcast": cmd_nowcast,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="piano", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval", "sweep", "translate-train", "nowcast"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "train":
            p.add_argument("--stage", choices=("tno", "vno", "finetune"), required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        config_mod.write_resolved(cfg, args.out)
        if args.command == "train":
            cmd_train(cfg, args.out, args.stage)
        else:
            COMMANDS[args.command](cfg, args.out)
    except config_mod.ConfigError as exc:
        print(f"piano: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, InstabilityError, FloatingPointError) as exc:
        print(f"piano: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, GFSFormatError) as exc:
        print(f"piano: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
