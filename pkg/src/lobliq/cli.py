"""Command-line front end: generate synthetic days and run the analysis pipeline.

Every artifact is written atomically and carries the hash of the run
configuration; a failing stage removes the partial outputs of the run and
exits with a stage-specific code.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .events import (PRESETS, compute_volatility_profile, decluster, default_bucket_width,
                     detect_large_events, time_of_day_histogram, write_events)
from .flows import CONDITIONS, relative_flow_curve, response_fit
from .ingestion import SessionConfig, load_day
from .liquidity import (CONDITIONINGS, average_profile, compute_norm, window_liquidity,
                        window_profiles)
from .lob import BookSide
from .stats import (InsufficientSampleError, delta_scan, imbalance_conditionals, log_binning,
                    power_law_fit)
from .synthgen import GeneratorConfig, load_generator_config, parse_rule, plant_return_rule, generate

logger = logging.getLogger("lobliq")

EXIT_CODES = {
    "usage": 2,
    "ingestion": 10,
    "detection": 11,
    "flows": 12,
    "liquidity": 13,
    "fit": 14,
    "report": 15,
    "generate": 16,
}

DEFAULT_DELTAS = tuple(float(d) for d in range(1, 21))


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    inputs: list
    preset: str
    delta_t: float
    abs_threshold: float
    vol_multiplier: float
    min_gap: float
    bucket_width: float
    depth_n: int
    bins: int
    delta: Optional[float]
    imbalance_delta: float
    deltas: list
    session_length: float
    open_skip: float
    tick_size: float
    flow_range: float
    subinterval: float
    min_events: int
    seed: Optional[int] = None
    out: str = "."
    workers: int = 1
    version: str = __version__
    input_hashes: list = field(default_factory=list)

    def hashed_fields(self) -> dict:
        # output location and parallelism must not change the results, so they are not hashed
        d = dict(self.__dict__)
        d.pop("out")
        d.pop("workers")
        d["inputs"] = [os.path.basename(p) for p in self.inputs]
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_fields(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def session(self) -> SessionConfig:
        return SessionConfig.from_length(self.session_length, self.open_skip, self.tick_size)


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


class Bundle:
    """Output directory writer: atomic per-file writes, config-hash stamping, rollback."""

    def __init__(self, out: Path, config_hash: str):
        self.out = out
        self.hash = config_hash
        self.written: list[Path] = []
        self.created_dir = not out.exists()

    def _write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(path)
        return path

    def csv(self, name: str, header: Sequence[str], rows, meta: Optional[dict] = None) -> Path:
        buf = io.StringIO()
        buf.write(f"# config_hash: {self.hash}\n")
        if meta:
            buf.write("# " + json.dumps(_jsonable(meta), sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if not isinstance(v, str) else v for v in row])
        return self._write(name, buf.getvalue())

    def text(self, name: str, body: str) -> Path:
        return self._write(name, f"# config_hash: {self.hash}\n" + body)

    def json(self, name: str, payload: dict) -> Path:
        payload = dict(payload, config_hash=self.hash)
        return self._write(name, json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")

    def rollback(self) -> None:
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        self.written.clear()
        if self.created_dir and self.out.exists() and not any(self.out.iterdir()):
            self.out.rmdir()


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, exc) from exc


def manifest_from_args(args) -> RunManifest:
    preset_name = args.preset
    base = PRESETS.get(preset_name)
    if base is None and preset_name != "custom":
        raise ValueError(f"unknown preset {preset_name!r}")
    if base is None and args.delta_t is None:
        raise ValueError("preset 'custom' needs --delta-t")

    def pick(value, attr):
        # a custom run takes unspecified thresholds from the large-scale preset
        return value if value is not None else getattr(base or PRESETS["large_scale"], attr)

    delta_t = pick(args.delta_t, "delta_t")
    overridden = any(v is not None for v in (args.delta_t, args.abs_threshold, args.vol_multiplier,
                                             args.min_gap))
    inputs = [str(p) for p in (args.input or [])]
    return RunManifest(
        inputs=inputs,
        preset="custom" if overridden or base is None else preset_name,
        delta_t=float(delta_t),
        abs_threshold=float(pick(args.abs_threshold, "abs_threshold")),
        vol_multiplier=float(pick(args.vol_multiplier, "vol_multiplier")),
        min_gap=float(args.min_gap if args.min_gap is not None
                      else (base.min_gap if base is not None else delta_t)),
        bucket_width=float(base.bucket_width if base is not None and args.delta_t is None
                           else default_bucket_width(delta_t)),
        depth_n=int(args.depth_n),
        bins=int(args.bins),
        delta=None if args.delta is None else float(args.delta),
        imbalance_delta=float(args.imbalance_delta),
        deltas=[float(d) for d in (args.deltas or DEFAULT_DELTAS)],
        session_length=float(args.session_length),
        open_skip=float(args.open_skip),
        tick_size=float(args.tick_size),
        flow_range=float(args.flow_range),
        subinterval=float(args.subinterval),
        min_events=int(args.min_events),
        seed=args.seed,
        out=str(args.out),
        workers=max(1, int(args.workers)),
    )


def _hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_inputs(m: RunManifest):
    if not m.inputs:
        raise ValueError("no input files given")
    for p in m.inputs:
        if not os.path.isfile(p):
            raise FileNotFoundError(p)
    m.input_hashes = [_hash_file(p) for p in m.inputs]
    cfg = m.session()
    with ThreadPoolExecutor(m.workers) as pool:
        return list(pool.map(lambda a: load_day(a[1], cfg, day=a[0]), enumerate(m.inputs)))


class Pipeline:
    def __init__(self, m: RunManifest, bundle: Bundle):
        self.m = m
        self.bundle = bundle
        self.summary: dict = {"manifest": m.hashed_fields(), "tool_version": __version__}
        self.days = []
        self.events = []

    def detect(self):
        m = self.m
        prof = compute_volatility_profile(self.days, m.delta_t, m.bucket_width)
        raw = detect_large_events(self.days, prof, m.delta_t, m.abs_threshold, m.vol_multiplier)
        self.events = decluster(raw, m.min_gap)
        buf = io.StringIO()
        write_events(self.events, buf)
        self.bundle.text("events.csv", buf.getvalue())
        start = min(d.analysis_start_us for d in self.days)
        end = max(d.session_length_us for d in self.days)
        n_bins = max(1, -(-(end - start) // 1_800_000_000))  # half-hour bins
        self.summary["detection"] = {
            "n_candidates": len(raw),
            "n_events": len(self.events),
            "n_positive": sum(e.sign > 0 for e in self.events),
            "n_negative": sum(e.sign < 0 for e in self.events),
            "time_of_day_histogram": time_of_day_histogram(self.events, start, end, n_bins),
            "volatility_buckets_filled": int(prof.filled.sum()),
        }

    def flows(self):
        m = self.m
        out = {}
        for side in (BookSide.ASK, BookSide.BID):
            for sign, tag in ((1, "positive"), (-1, "negative")):
                key = f"{side.value}_{tag}"
                try:
                    fc = relative_flow_curve(self.days, self.events, side, sign, True, m.flow_range,
                                             m.subinterval, m.min_events)
                except InsufficientSampleError as exc:
                    out[key] = {"skipped": str(exc)}
                    continue
                rows = zip(fc.offsets, fc.r_LO, fc.r_MO, fc.r_C, fc.se_LO, fc.se_MO, fc.se_C, fc.counts)
                self.bundle.csv(f"flow_{key}.csv",
                                ["offset_s", "r_LO", "r_MO", "r_C", "se_LO", "se_MO", "se_C", "n"], rows,
                                meta={"side": side.value, "event_sign": sign, **{
                                    f"baseline_{k}": v for k, v in fc.baselines.items()}})
                out[key] = {"n_events": fc.n_events, "baselines": fc.baselines,
                            "inside_event": fc.segment(-m.delta_t, 0.0)}
        self.summary["flow_curves"] = out

        fits = []
        binned_rows = []
        summ = {}
        for side in (BookSide.ASK, BookSide.BID):
            for cond in CONDITIONS:
                key = f"{side.value}_{cond}"
                try:
                    rf = response_fit(self.days, m.delta_t, cond, side, self.events, True, m.bins)
                except (InsufficientSampleError, ValueError) as exc:
                    summ[key] = {"skipped": str(exc)}
                    continue
                lf = rf.linear
                fits.append([side.value, cond, lf.slope, lf.intercept, lf.se_slope, lf.se_intercept,
                             lf.r_squared, lf.n_points])
                for c, mu, se, n in zip(rf.binned.bin_centers, rf.binned.means, rf.binned.se,
                                        rf.binned.counts):
                    binned_rows.append([side.value, cond, c, mu, se, n])
                summ[key] = lf.to_dict()
        self.bundle.csv("response_fits.csv", ["side", "condition", "a", "b", "se_a", "se_b",
                                              "r_squared", "n"], fits)
        self.bundle.csv("response_binned.csv", ["side", "condition", "q_mo", "mean_q_lo", "se", "n"],
                        binned_rows)
        self.summary["response_fits"] = summ

    def liquidity(self):
        m = self.m
        n = m.depth_n
        norm = compute_norm(self.days, n)
        self.summary["norm"] = norm
        cols, header, counts = [], [], {}
        for side in (BookSide.ASK, BookSide.BID):
            for cond in CONDITIONINGS:
                try:
                    pa = average_profile(self.days, side, cond, self.events, n)
                except InsufficientSampleError:
                    continue
                cols.append(pa.mean_volume)
                header.append(f"{side.value}_{cond}")
                counts[header[-1]] = pa.sample_count
        self.bundle.csv("profiles.csv", ["k"] + header,
                        ([k + 1] + [c[k] for c in cols] for k in range(n)), meta={"sample_counts": counts})
        self.summary["profile_samples"] = counts

        win = window_profiles(self.days, m.delta_t, n)
        scans = {}
        for sign, tag in ((1, "positive"), (-1, "negative")):
            scans[tag] = delta_scan(win.ask, win.bid, win.log_return, m.deltas, sign, norm, m.workers)
        self.bundle.csv("delta_scan.csv", ["delta", "r_squared_positive", "r_squared_negative"],
                        zip(m.deltas, scans["positive"].r_squared, scans["negative"].r_squared))
        best = scans["positive"].best_delta
        self.summary["delta_scan"] = {"best_delta_positive": best,
                                      "best_delta_negative": scans["negative"].best_delta}
        delta = m.delta if m.delta is not None else best
        if delta is None:
            raise InsufficientSampleError("delta scan found no usable fit")
        self.summary["delta_used"] = delta

        la, lb, li = window_liquidity(win, delta, norm)
        # returns in units of the standard deviation of all window returns of the dataset
        sigma = float(np.std(win.log_return))
        if not sigma > 0:
            raise InsufficientSampleError("window returns have zero spread")
        r_sig = win.log_return / sigma
        self.bundle.csv("liquidity_cloud.csv", ["timestamp_us", "delta", "L_A", "L_B", "L_imb", "day",
                                                "log_return", "return_sigma"],
                        zip(win.start_us, np.full(len(win), delta), la, lb, li, win.day,
                            win.log_return, r_sig),
                        meta={"delta": delta, "N": n, "norm": norm, "delta_t_s": m.delta_t,
                              "return_std": sigma})
        self.summary["return_std"] = sigma
        self.summary["power_law"] = self._fit_cloud(la, lb, r_sig)

        _, _, li5 = window_liquidity(win, m.imbalance_delta, norm)
        curve, freq = imbalance_conditionals(li5, win.log_return, m.bins)
        self.bundle.csv("imbalance_conditionals.csv",
                        ["l_imb", "mean_return", "se", "n", "p_positive", "p_zero", "p_negative"],
                        zip(curve.bin_centers, curve.means, curve.se, curve.counts, freq.positive,
                            freq.zero, freq.negative), meta={"delta": m.imbalance_delta})

    def _fit_cloud(self, la, lb, r) -> dict:
        out = {}
        for tag, L, sel in (("positive", la, r > 0), ("negative", lb, r < 0)):
            x, y = L[sel], np.abs(r[sel])
            ok = x > 0
            x, y = x[ok], y[ok]
            try:
                fit = power_law_fit(x, y)
                out[tag] = fit.to_dict()
            except ValueError as exc:
                out[tag] = {"skipped": str(exc)}
                continue
            try:
                lb_curve = log_binning(x, y, self.m.bins)
            except ValueError as exc:
                out[tag]["log_binning"] = {"skipped": str(exc)}
                continue
            self.bundle.csv(f"log_binning_{tag}.csv", ["L", "mean_abs_return", "se", "n"],
                            zip(lb_curve.bin_centers, lb_curve.means, lb_curve.se, lb_curve.counts))
        return out


def _finish(bundle: Bundle, pipe: Pipeline) -> None:
    pipe.summary["manifest"] = pipe.m.hashed_fields()
    bundle.json("summary.json", pipe.summary)


def _run_stages(args, stages: Sequence[str]) -> int:
    m = manifest_from_args(args)
    bundle = Bundle(Path(m.out), "")
    try:
        days = _stage("ingestion", load_inputs, m)
        bundle.hash = m.config_hash  # includes the input content hashes
        pipe = Pipeline(m, bundle)
        pipe.days = days
        _stage("detection", pipe.detect)
        if "flows" in stages:
            _stage("flows", pipe.flows)
        if "liquidity" in stages:
            _stage("liquidity", pipe.liquidity)
        _stage("report", _finish, bundle, pipe)
    except StageError as exc:
        bundle.rollback()
        logger.error("%s", exc)
        return EXIT_CODES[exc.stage]
    logger.info("wrote %d files to %s (config %s)", len(bundle.written), m.out, bundle.hash[:12])
    return 0


def cmd_run(args) -> int:
    return _run_stages(args, ("flows", "liquidity"))


def cmd_detect(args) -> int:
    return _run_stages(args, ())


def cmd_flows(args) -> int:
    return _run_stages(args, ("flows",))


def cmd_liquidity(args) -> int:
    return _run_stages(args, ("liquidity",))


def cmd_fit(args) -> int:
    """Power-law fit and log binning of an existing liquidity cloud file."""
    bundle = Bundle(Path(args.out), "")
    try:
        def read():
            with open(args.input[0], encoding="utf-8") as fh:
                rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
            cols = {name: k for k, name in enumerate(rows[0])}
            ret = "return_sigma" if "return_sigma" in cols else "log_return"
            data = np.array([[float(r[cols[c]]) for c in ("L_A", "L_B", ret)] for r in rows[1:]])
            return data.reshape(-1, 3)
        data = _stage("ingestion", read)
        payload = {"input": os.path.basename(args.input[0]), "input_hash": _hash_file(args.input[0]),
                   "bins": args.bins, "version": __version__}
        bundle.hash = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        pipe = Pipeline.__new__(Pipeline)
        pipe.m = argparse.Namespace(bins=args.bins)
        pipe.bundle = bundle
        fits = _stage("fit", pipe._fit_cloud, data[:, 0], data[:, 1], data[:, 2])
        _stage("report", bundle.json, "fit_summary.json", {"fit": payload, "power_law": fits})
    except StageError as exc:
        bundle.rollback()
        logger.error("%s", exc)
        return EXIT_CODES[exc.stage]
    return 0


def cmd_generate(args) -> int:
    bundle = Bundle(Path(args.out), "")
    try:
        def build():
            cfg = load_generator_config(args.config) if args.config else GeneratorConfig()
            if args.seed is not None:
                cfg = GeneratorConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
            rule = parse_rule(args.plant) if args.plant else None
            return cfg, rule
        cfg, rule = _stage("generate", build)
        desc = {"generator": cfg.to_dict(), "plant": args.plant, "days": args.days, "version": __version__}
        bundle.hash = hashlib.sha256(json.dumps(_jsonable(desc), sort_keys=True).encode()).hexdigest()

        def one(day):
            return plant_return_rule(cfg, rule, day) if rule is not None else generate(cfg, day)

        def write_all():
            # days are independent streams; map keeps the output order fixed
            with ThreadPoolExecutor(max(1, args.workers)) as pool:
                for day, text in enumerate(pool.map(one, range(args.days))):
                    bundle.text(f"day_{day:03d}.csv", text)
            bundle.json("generator.json", desc)
        _stage("generate", write_all)
    except StageError as exc:
        bundle.rollback()
        logger.error("%s", exc)
        return EXIT_CODES[exc.stage]
    return 0


def _add_analysis_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", nargs="+", required=True, help="message files, one per trading day")
    p.add_argument("--preset", default="large_scale", choices=sorted(PRESETS) + ["custom"])
    p.add_argument("--delta-t", type=float, help="window length in seconds")
    p.add_argument("--abs-threshold", type=float, help="absolute log-return threshold x")
    p.add_argument("--vol-multiplier", type=float, help="volatility multiple n")
    p.add_argument("--min-gap", type=float, help="declustering gap in seconds")
    p.add_argument("--delta", type=float, help="liquidity decay scale in ticks (default: scan argmax)")
    p.add_argument("--deltas", type=float, nargs="+", help="delta values to scan")
    p.add_argument("--imbalance-delta", type=float, default=5.0)
    p.add_argument("--depth-n", type=int, default=100, help="profile depth N in ticks")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--session-length", type=float, default=8.5 * 3600)
    p.add_argument("--open-skip", type=float, default=1800.0)
    p.add_argument("--tick-size", type=float, default=0.01)
    p.add_argument("--flow-range", type=float, default=3600.0)
    p.add_argument("--subinterval", type=float, default=30.0)
    p.add_argument("--min-events", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lobliq", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic message files")
    g.add_argument("--out", required=True)
    g.add_argument("--days", type=int, default=1)
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="generator config (.json or .toml)")
    g.add_argument("--plant", help="planted return rule, e.g. cubic:c=0.004 or powerlaw:K=0.002,alpha=0.5")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    for name, func, text in (("detect", cmd_detect, "detect large events"),
                             ("flows", cmd_flows, "events plus relative flows and response fits"),
                             ("liquidity", cmd_liquidity, "events plus liquidity analyses"),
                             ("run", cmd_run, "full pipeline")):
        p = sub.add_parser(name, help=text)
        _add_analysis_flags(p)
        p.set_defaults(func=func)

    f = sub.add_parser("fit", help="power-law fit of a liquidity cloud file")
    f.add_argument("--input", nargs=1, required=True)
    f.add_argument("--bins", type=int, default=20)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:  # bad flag combinations caught before any stage runs
        logger.error("%s", exc)
        return EXIT_CODES["usage"]


if __name__ == "__main__":
    sys.exit(main())
