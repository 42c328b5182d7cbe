"""Operator commands: ``ufo synth|train|evaluate|forecast|analyze``.

One TOML file describes a run.  Every command takes ``--config`` plus any
number of ``--set section.key=value`` overrides; flags win over the file.
Randomness enters only through the named fields of ``[seeds]`` (data,
model_init, latent, injection), so identical config and seeds reproduce
every output file byte for byte; only the manifest's wall-clock field
differs between runs.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # python 3.10
    import tomli as tomllib

from . import __version__, analysis, checkpoint, data, model, scoring
from .errors import (FormatError, IntegrationDivergedError, NumericError,
                     TrainingDivergedError, UfoError)

SEED_NAMES = ("data", "model_init", "latent", "injection")
SPLIT_NAMES = ("train", "val", "test")


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------

def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


def load_config(path: str, overrides=()) -> dict:
    """Read the TOML file, apply ``section.key=value`` overrides, validate."""
    try:
        with open(path, "rb") as f:
            cfg = tomllib.load(f)
    except FileNotFoundError:
        raise FormatError(f"config: no such file {path!r}") from None
    except tomllib.TOMLDecodeError as e:
        raise FormatError(f"config: {e}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) != 2:
            raise FormatError(f"--set needs section.key=value, got {item!r}")
        section = cfg.setdefault(parts[0], {})
        if not isinstance(section, dict):
            raise FormatError(f"--set: {parts[0]} is not a section")
        section[parts[1]] = _parse_scalar(value.strip())
    _validate(cfg)
    return cfg


def _validate(cfg: dict):
    if "seeds" not in cfg:
        raise FormatError("seeds: section is required (no entropy defaults)")
    for name in SEED_NAMES:
        if name not in cfg["seeds"]:
            raise FormatError(f"seeds.{name}: field is required")
        if not isinstance(cfg["seeds"][name], int):
            raise FormatError(f"seeds.{name}: must be an integer")
    if "dataset" not in cfg:
        raise FormatError("dataset: section is required")
    dsc = cfg["dataset"]
    if "path" not in dsc and "kind" not in dsc:
        raise FormatError("dataset.path: field is required "
                          "(or dataset.kind for a synthetic source)")
    if "path" in dsc and not os.path.exists(dsc["path"]):
        raise FormatError(f"dataset.path: no such file {dsc['path']!r}")

    wc = cfg.setdefault("windows", {})
    for key, default in (("context_len", 64), ("horizon_len", 16),
                         ("stride", 32)):
        wc.setdefault(key, default)
        if not isinstance(wc[key], int) or wc[key] < 1:
            raise FormatError(f"windows.{key}: must be a positive integer")

    tr = cfg.setdefault("train", {})
    for key, default in (("epochs", 10), ("batch_size", 32), ("lr", 1e-3),
                         ("patience", 0), ("val_samples", 16)):
        tr.setdefault(key, default)
    if tr["epochs"] < 1:
        raise FormatError("train.epochs: must be >= 1")
    if tr["batch_size"] < 1:
        raise FormatError("train.batch_size: must be >= 1")

    ev = cfg.setdefault("eval", {})
    ev.setdefault("n_samples", 100)
    ev.setdefault("split", "test")
    if ev["split"] not in SPLIT_NAMES:
        raise FormatError("eval.split: must be one of train, val, test")

    ir = cfg.get("irregularity")
    if ir is not None:
        ir.setdefault("fraction", 0.0)
        ir.setdefault("representation", "nan")
        if not 0.0 <= ir["fraction"] < 1.0:
            raise FormatError("irregularity.fraction: must be in [0, 1)")


def build_dataset(cfg: dict):
    """Returns (dataset, clean_truth or None); injection applied here."""
    dsc = cfg["dataset"]
    seeds = cfg["seeds"]
    try:
        if "path" in dsc:
            ds = data.load_csv(dsc["path"])
            truth = None
        else:
            ds = data.synth_dataset(dsc["kind"], n=dsc.get("n", 4096),
                                    d_x=dsc.get("d_x", 1),
                                    seed=seeds["data"],
                                    freq_seconds=dsc.get("freq_seconds",
                                                         3600.0),
                                    noise=dsc.get("noise", 0.1))
            truth = ds.values.copy()
    except ValueError as e:
        raise FormatError(f"dataset: {e}") from None
    ir = cfg.get("irregularity")
    if ir and ir["fraction"] > 0.0:
        ds, _ = data.inject_block_missing(ds, ir["fraction"],
                                          seed=seeds["injection"],
                                          representation=ir["representation"])
        return ds, truth
    return ds, None


def split_windows(ds, truth, wc: dict):
    """Chronological train/val/test window lists; truth rows stay aligned."""
    n = len(ds)
    a = int(0.7 * n)
    b = a + int(0.1 * n)
    parts = data.split_dataset(ds)
    out = []
    for part, (lo, hi) in zip(parts, ((0, a), (a, b), (b, n))):
        tv = None if truth is None else truth[lo:hi]
        out.append(data.make_windows(part, wc["context_len"],
                                     wc["horizon_len"], wc["stride"],
                                     truth_values=tv))
    return tuple(out)


def _model_config(cfg: dict, d_x: int) -> model.ModelConfig:
    try:
        return model.ModelConfig(d_x=d_x, **cfg.get("model", {}))
    except (TypeError, ValueError) as e:
        raise FormatError(f"model: {e}") from None


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _atomic_write(path: str, blob: bytes):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    return f"{float(v):.12g}"


def write_csv(path: str, header, rows, footer=()):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow(row)
    for line in footer:
        buf.write(line + "\n")
    _atomic_write(path, buf.getvalue().encode())


def write_manifest(out_dir: str, cfg: dict, outputs):
    """Hash of the effective config, seeds, and planned outputs; written
    before any result file so a crash cannot orphan results."""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    manifest = {
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "code_version": __version__,
        "seeds": dict(cfg["seeds"]),
        "wall_clock": {"started_unix": time.time()},
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    _atomic_write(path, json.dumps(manifest, sort_keys=True,
                                   indent=2).encode() + b"\n")
    return path


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    ds, _ = build_dataset(cfg)
    out = _outdir(args)
    path = os.path.join(out, "dataset.csv")
    write_manifest(out, cfg, [path])
    data.save_csv(ds, path)
    print(f"wrote {path}: {len(ds)} rows, {ds.n_channels} channels")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    ds, truth = build_dataset(cfg)
    train_w, val_w, _ = split_windows(ds, truth, cfg["windows"])
    if not train_w:
        raise FormatError("windows: the training split produced no windows")
    if not val_w:
        raise FormatError("windows: the validation split produced no windows")
    mcfg = _model_config(cfg, ds.n_channels)
    params = model.init_params(mcfg, cfg["seeds"]["model_init"])

    out = _outdir(args)
    ckpt_path = os.path.join(out, "model.ckpt")
    log_path = os.path.join(out, "train_log.csv")
    write_manifest(out, cfg, [ckpt_path, log_path])

    tr = cfg["train"]
    latent = cfg["seeds"]["latent"]
    best, since, rows = math.inf, 0, []
    for epoch in range(tr["epochs"]):
        hist = model.fit(train_w, mcfg, params, epochs=1,
                         batch_size=tr["batch_size"], seed=latent + epoch,
                         lr=tr["lr"])
        val = model.evaluate(val_w, mcfg, params,
                             n_samples=tr["val_samples"], seed=latent)
        improved = val < best
        rows.append((epoch, _fmt(hist["loss"][0]), _fmt(val)))
        print(f"epoch {epoch}: train {hist['loss'][0]:.4f} "
              f"val {val:.4f}{' *' if improved else ''}")
        if improved:
            best, since = val, 0
            checkpoint.save(ckpt_path, mcfg, params)
        else:
            since += 1
            if tr["patience"] and since >= tr["patience"]:
                print(f"early stop after {epoch + 1} epochs")
                break
    write_csv(log_path, ("epoch", "train_loss", "val_ncrps"), rows)
    print(f"best val NCRPS {_fmt(best)}; checkpoint at {ckpt_path}")
    return 0


def _score_windows(wins, mcfg, params, n_samples, seed, batch_size=32):
    """Aggregate and per-channel NCRPS, averaged per window."""
    agg, per = [], []
    for start in range(0, len(wins), batch_size):
        batch = model.collate(wins[start:start + batch_size], mcfg)
        ens = model.forecast(batch, n_samples, mcfg, params, seed=seed + start)
        for i in range(len(batch)):
            rep = scoring.ncrps(ens.samples[i], batch.hor_values[i])
            agg.append(rep.aggregate)
            per.append(rep.per_channel)
    return float(np.mean(agg)), np.mean(np.stack(per), axis=0)


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.set)
    mcfg, params = checkpoint.load(args.ckpt)
    ds, truth = build_dataset(cfg)
    if ds.n_channels != mcfg.d_x:
        raise FormatError(f"dataset has {ds.n_channels} channels but the "
                          f"checkpoint expects {mcfg.d_x}")
    splits = dict(zip(SPLIT_NAMES, split_windows(ds, truth, cfg["windows"])))
    wins = splits[cfg["eval"]["split"]]
    if not wins:
        raise FormatError(f"eval.split: the {cfg['eval']['split']} split "
                          "produced no windows")
    n_samples = args.samples if args.samples else cfg["eval"]["n_samples"]
    agg, per_channel = _score_windows(wins, mcfg, params, n_samples,
                                      seed=cfg["seeds"]["latent"])
    out = _outdir(args)
    path = os.path.join(out, "evaluation.csv")
    write_manifest(out, cfg, [path])
    rows = [(name, _fmt(val))
            for name, val in zip(ds.channel_names, per_channel)]
    write_csv(path, ("channel", "ncrps"), rows,
              footer=[f"# aggregate,{_fmt(agg)}",
                      f"# windows,{len(wins)}",
                      f"# samples,{n_samples}"])
    print(f"{cfg['eval']['split']} NCRPS {_fmt(agg)} "
          f"({len(wins)} windows, {n_samples} samples)")
    return 0


def cmd_forecast(args) -> int:
    cfg = load_config(args.config, args.set)
    mcfg, params = checkpoint.load(args.ckpt)
    ds, _ = build_dataset(cfg)
    if ds.n_channels != mcfg.d_x:
        raise FormatError(f"dataset has {ds.n_channels} channels but the "
                          f"checkpoint expects {mcfg.d_x}")
    wc = cfg["windows"]
    t, l = wc["context_len"], wc["horizon_len"]
    if len(ds) < t:
        raise FormatError(f"windows.context_len: needs {t} rows of context, "
                          f"dataset has {len(ds)}")
    ctx = slice(len(ds) - t, len(ds))
    hor_times = ds.timestamps[-1] + ds.freq_seconds * np.arange(1, l + 1)
    window = data.TimeSeriesWindow(
        ctx_times=ds.timestamps[ctx], ctx_values=ds.values[ctx],
        ctx_mask=ds.mask[ctx], hor_times=hor_times,
        hor_values=np.zeros((l, ds.n_channels)),
        ctx_covariates=data.time_covariates(ds.timestamps[ctx]),
        hor_covariates=data.time_covariates(hor_times))
    batch = model.collate([window], mcfg)
    ens = model.forecast(batch, args.samples, mcfg, params,
                         seed=cfg["seeds"]["latent"])

    out = _outdir(args)
    path = os.path.join(out, "ensemble.csv")
    write_manifest(out, cfg, [path])
    rows = ((s, step, name, _fmt(ens.samples[0, s, step, j]),
             _fmt(hor_times[step]))
            for s in range(args.samples)
            for step in range(l)
            for j, name in enumerate(ds.channel_names))
    write_csv(path, ("sample", "step", "channel", "value", "timestamp"), rows)
    print(f"wrote {path}: {args.samples} samples x {l} steps "
          f"x {ds.n_channels} channels")
    return 0


# -- analyze subcommands ----------------------------------------------------

def _analyze_cv(args, cfg) -> tuple:
    ds, _ = build_dataset(cfg)
    times = ds.timestamps[ds.mask.any(axis=1)]
    mblock = cfg.get("model", {})
    w = args.w or mblock.get("patch_len", 4)
    levels = args.levels or mblock.get("levels", 2)
    cvs = analysis.cv_study(times, w, levels)
    return ("cv.csv", ("level", "cv"),
            [(lvl, _fmt(v)) for lvl, v in enumerate(cvs)], [])


def _analyze_sensitivity(args, cfg) -> tuple:
    mcfg, params = checkpoint.load(args.ckpt)
    ds, truth = build_dataset(cfg)
    wins = split_windows(ds, truth, cfg["windows"])[2]
    if not wins:
        raise FormatError("windows: the test split produced no windows")
    batch = model.collate(wins[:args.windows], mcfg)
    rep = analysis.sensitivity(batch, mcfg, params,
                               normalized=args.normalized)
    rows = [(i, _fmt(v)) for i, v in enumerate(rep.norms)]
    footer = [f"# r_squared,{_fmt(rep.r_squared)}",
              f"# zero_positions,{len(rep.zero_positions)}"]
    return ("sensitivity.csv", ("position", "norm"), rows, footer)


def _analyze_probe(args, cfg) -> tuple:
    ir = cfg.get("irregularity")
    if not ir or ir["fraction"] <= 0.0:
        raise FormatError("irregularity.fraction: the probe needs an "
                          "injected dataset")
    mcfg, params = checkpoint.load(args.ckpt)
    ds, truth = build_dataset(cfg)
    wc = cfg["windows"]
    wins = data.make_windows(ds, wc["context_len"], wc["horizon_len"],
                             wc["stride"], truth_values=truth)
    rep = analysis.irregularity_probe(wins, mcfg, params, ds.freq_seconds,
                                      seed=cfg["seeds"]["latent"])
    rows = [("kind", mcfg.kind), ("f1", _fmt(rep.f1)),
            ("clean_patches", rep.counts[0]),
            ("affected_patches", rep.counts[1]),
            ("weight_norm", _fmt(rep.weight_norm)),
            ("intercept", _fmt(rep.intercept))]
    return ("probe.csv", ("metric", "value"), rows, [])


def _analyze_timing(args, cfg) -> tuple:
    mcfg, params = checkpoint.load(args.ckpt)
    ds, truth = build_dataset(cfg)
    wins = split_windows(ds, truth, cfg["windows"])[2]
    rep = analysis.timing(wins, mcfg, params, batches=args.batches,
                          batch_size=args.batch_size)
    rows = [("seconds_per_batch", _fmt(rep.seconds_per_batch)),
            ("batch_size", rep.batch_shape[0]),
            ("context_len", rep.batch_shape[1]),
            ("threads", rep.threads)]
    rows += [(f"batch_{i}", _fmt(v)) for i, v in enumerate(rep.per_batch)]
    if args.speedup:
        sp = analysis.speedup_study(workers=args.workers)
        rows += [("speedup_ratio", _fmt(sp.ratio)),
                 ("parallel_seconds", _fmt(sp.parallel_seconds)),
                 ("sequential_seconds", _fmt(sp.sequential_seconds)),
                 ("steps_parallel", sp.steps_parallel),
                 ("steps_sequential", sp.steps_sequential),
                 ("workers", sp.workers)]
    return ("timing.csv", ("metric", "value"), rows, [])


def _analyze_attention(args, cfg) -> tuple:
    mcfg, params = checkpoint.load(args.ckpt)
    ds, truth = build_dataset(cfg)
    wins = split_windows(ds, truth, cfg["windows"])[2]
    if not wins:
        raise FormatError("windows: the test split produced no windows")
    batch = model.collate(wins[:args.windows], mcfg)
    records = model.export_attention(batch, mcfg, params,
                                     seed=cfg["seeds"]["latent"])
    if not records:
        raise FormatError("attention: this checkpoint has no attention "
                          "blocks (a single-level model carries none)")
    rows = ((rec.name, b, h, q, k, _fmt(rec.weights[b, h, q, k]))
            for rec in records
            for b in range(rec.weights.shape[0])
            for h in range(rec.weights.shape[1])
            for q in range(rec.weights.shape[2])
            for k in range(rec.weights.shape[3]))
    return ("attention.csv", ("map", "window", "head", "query", "key",
                              "weight"), rows, [])


_STUDIES = {"cv": _analyze_cv, "sensitivity": _analyze_sensitivity,
            "probe": _analyze_probe, "timing": _analyze_timing,
            "attention": _analyze_attention}


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, args.set)
    name, header, rows, footer = _STUDIES[args.study](args, cfg)
    out = _outdir(args)
    path = os.path.join(out, name)
    write_manifest(out, cfg, [path])
    write_csv(path, header, rows, footer)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ufo",
        description="Probabilistic forecasting over regular and irregular "
                    "multivariate time series.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(sp, default_out):
        sp.add_argument("--config", required=True,
                        help="TOML run configuration")
        sp.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override one config field (repeatable)")
        sp.add_argument("--out", default=default_out,
                        help="output directory")

    sp = sub.add_parser("synth", help="generate a dataset CSV")
    common(sp, "ufo-synth")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train and checkpoint a model")
    common(sp, "ufo-train")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(sp, "ufo-evaluate")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--samples", type=int, default=0,
                    help="ensemble size (default: eval.n_samples)")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("forecast", help="sample forecasts past the dataset")
    common(sp, "ufo-forecast")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--samples", type=int, default=100)
    sp.set_defaults(fn=cmd_forecast)

    sp = sub.add_parser("analyze", help="diagnostic studies")
    study = sp.add_subparsers(dest="study", required=True)
    for name in _STUDIES:
        ssp = study.add_parser(name)
        common(ssp, f"ufo-{name}")
        if name != "cv":
            ssp.add_argument("--ckpt", required=True)
        if name == "cv":
            ssp.add_argument("--w", type=int, default=0)
            ssp.add_argument("--levels", type=int, default=0)
        if name in ("sensitivity", "attention"):
            ssp.add_argument("--windows", type=int, default=8)
        if name == "sensitivity":
            ssp.add_argument("--normalized", action="store_true")
        if name == "timing":
            ssp.add_argument("--batches", type=int, default=6)
            ssp.add_argument("--batch-size", type=int, default=32)
            ssp.add_argument("--speedup", action="store_true")
            ssp.add_argument("--workers", type=int, default=4)
        ssp.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (TrainingDivergedError, IntegrationDivergedError,
            NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except UfoError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
