"""Command-line entry point: ``onlinesar <subcommand> ...`` (or ``python -m onlinesar``).

Exit codes: 0 success, 2 usage or unknown configuration key, 3 malformed
file or stream, 4 violated input contract, 5 I/O failure, 6 numerical
divergence.
"""
from __future__ import annotations

import argparse
import csv
import socket
import sys
import time
import traceback
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, downstream, loss, rda, sarcore, simgen, ssm, train

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_CONTRACT, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration helpers
# --------------------------------------------------------------------------

def parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | None, overrides: list[str] | None) -> dict[str, str]:
    d = sarcore.parse_kv(Path(path).read_text()) if path else {}
    d.update(parse_overrides(overrides))
    return d


def split_sections(d: dict[str, str], sections: tuple[str, ...]) -> dict[str, dict[str, str]]:
    """Group ``section.key`` entries; anything else is an unknown key."""
    out = {s: {} for s in sections}
    for k, v in d.items():
        sec, _, key = k.partition(".")
        if sec not in out or not key:
            raise KeyError(f"unknown key {k!r}; expected one of {', '.join(s + '.*' for s in sections)}")
        out[sec][key] = v
    return out


def strict_fields(cls, d: dict[str, str], casts=None):
    """Build a frozen config dataclass from strings, rejecting unknown keys."""
    names = {f for f in cls.__dataclass_fields__}
    unknown = set(d) - names
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kw = {}
    for k, v in d.items():
        default = getattr(cls(), k)
        kw[k] = type(default)(float(v)) if isinstance(default, (int, float)) else v
    return cls(**kw)


def scene_from_args(args) -> simgen.SceneSpec:
    d = load_config(args.config, args.set)
    return simgen.SceneSpec.from_mapping(d)


def params_of(r: sarcore.Raster) -> sarcore.RadarParams:
    if r.params is None:
        raise ValueError("raster header carries no radar parameters")
    return r.params


def write_image(data, path, mode="db") -> None:
    sarcore.write_pgm(sarcore.to_image(np.asarray(data), mode), path)


def load_model(path: str | None, seed: int = 42) -> ssm.TinyModel:
    return ssm.load_model(path) if path else ssm.TinyModel.init(ssm.STUDENT, seed)


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = scene_from_args(args)
    if args.random_targets:
        spec = replace(spec, targets=spec.targets + simgen.random_targets(
            spec, args.random_targets, spec.seed,
            margin_pulses=spec.n_pulses // 8, margin_bins=spec.n_range_bins // 8))
    raw = simgen.synth_raw(spec)
    sarcore.write_raster(raw, args.out)
    if args.scene_out:
        Path(args.scene_out).write_text(spec.to_text())
    log(f"wrote {raw.rows}x{raw.cols} RAW raster with {len(spec.targets)} targets to {args.out}")
    return EXIT_OK


def focus_raster(raw: sarcore.Raster, method: str, model_path=None, n_b=None, threads=1) -> sarcore.Raster:
    params = params_of(raw)
    if method == "rda":
        return rda.focus_batched(raw, rda.batched_filters_for(raw))
    if method == "linewise":
        out, _ = rda.focus_linewise(raw, params, n_b)
        return out
    model = load_model(model_path)
    proc = ssm.OnlineProcessor(model, params, raw.cols, range_threads=threads)
    rows = np.stack([proc.push(raw.data[k], k).data for k in range(raw.rows)])
    proc.close()
    return raw.with_data(rows, sarcore.Stage.AZ)


def cmd_focus(args) -> int:
    raw = sarcore.read_raster(args.input)
    if raw.stage != sarcore.Stage.RAW:
        raise ValueError(f"focus expects a RAW raster, got {raw.stage.name}")
    out = focus_raster(raw, args.method, args.model, args.n_b, args.range_threads)
    sarcore.write_raster(out, args.out)
    if args.pgm:
        write_image(out.data, args.pgm)
    log(f"{args.method}: wrote focused {out.rows}x{out.cols} raster to {args.out}")
    return EXIT_OK


def training_data(raw: sarcore.Raster, cfg: train.TrainConfig, bins: str | None):
    f = rda.batched_filters_for(raw)
    rc = rda.range_compress(raw, f.h_r).data
    az = rda.focus_batched(raw, f).data
    if bins:
        a, b = (int(v) for v in bins.split(":"))
        rc, az = rc[:, a:b], az[:, a:b]
    return train.strip_dataset(rc, az, cfg)


def train_configs(args):
    d = split_sections(load_config(args.config, args.set), ("train", "loss", "kd"))
    cfg = train.TrainConfig.from_mapping(d["train"])
    w = loss.LossWeights.from_mapping(d["loss"]) if d["loss"] else loss.LossWeights.student()
    kw = loss.KdWeights.from_mapping(d["kd"])
    return cfg, w, kw


def cmd_train(args) -> int:
    cfg, w, kw = train_configs(args)
    raw = sarcore.read_raster(args.input)
    data = training_data(raw, cfg, args.bins)
    student = load_model(args.init, cfg.seed)
    teacher = train.TeacherRef()
    if args.teacher:
        teacher = train.TeacherRef(train.TeacherKind.SSM_TEACHER, ssm.load_model(args.teacher))
    res = train.train_student(student, data, cfg, teacher, w, kw,
                              progress=lambda r, m: log(f"epoch {r['epoch']}: loss {r['train_loss']:.6g}"
                                                        f" val {r['val_loss']:.6g}"))
    ssm.save_model(res.model, args.out)
    if args.history:
        res.write_history(args.history)
    log(f"trained {res.model.n_params()} parameters for {len(res.history)} epochs -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, w, _ = train_configs(args)
    raw = sarcore.read_raster(args.input)
    data = training_data(raw, cfg, args.bins)
    data = data.subset(np.arange(min(len(data), cfg.batch_strips)))
    model = load_model(args.model, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    coords = sorted(rng.choice(model.n_params(), min(args.coords, model.n_params()), replace=False))
    out = csv.writer(sys.stdout)
    out.writerow(["term", "coord", "param", "central", "fourth_order", "rel_err"])
    worst = 0.0
    for name in loss.TERMS:
        if name == "fw":
            continue   # piecewise constant: no useful derivative
        single = replace(loss.LossWeights.zeros(), eps=w.eps, psd_band=w.psd_band,
                         **{_weight_field(name): 1.0})
        for row in train.gradcheck(model, data, single, coords, cfg.fd_step):
            out.writerow([name, row["coord"], row["param"], repr(row["central"]),
                          repr(row["fourth_order"]), repr(row["rel_err"])])
            if abs(row["fourth_order"]) > 1e-9:
                worst = max(worst, row["rel_err"])
    log(f"largest relative disagreement {worst:.3g}")
    return EXIT_OK


def _weight_field(term: str) -> str:
    return {"complex": "w_c", "logamp": "w_log", "ampcorr": "w_ac", "tail": "w_tail", "grad": "w_grad",
            "psd": "w_psd", "fw": "w_fw", "edge": "w_edge"}[term]


def cmd_detect(args) -> int:
    d = load_config(args.config, args.set)
    cfg = strict_fields(downstream.CfarConfig, d)
    img = sarcore.read_raster(args.input)
    rows = list(downstream.cfar_stream(cfg, img.data))
    mask = np.zeros(img.data.shape, dtype=bool)
    for r in rows:
        mask[r.k] = r.mask
    clean = downstream.remove_small_components(mask, cfg.min_component, 8)
    for r in rows:
        r.mask = clean[r.k]
    n = downstream.write_detections_csv(rows, args.out)
    if args.mask:
        write_mask(clean, args.mask)
    log(f"{n} detections (alpha {cfg.alpha:.6g}, {cfg.n_train} training cells)")
    return EXIT_OK


def write_mask(mask: np.ndarray, path) -> None:
    sarcore.write_pgm(np.where(mask, 65535, 0).astype(np.uint16), path)
    Path(str(path) + ".rle").write_text(downstream.mask_rle(mask))


def cmd_segment(args) -> int:
    d = load_config(args.config, args.set)
    cfg = strict_fields(downstream.SegConfig, d)
    img = sarcore.read_raster(args.input)
    mask = downstream.water_mask(img.data, cfg)
    write_mask(mask, args.out)
    log(f"water fraction {mask.mean():.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.paper_point:
        p = bench.PUBLISHED_POINT
        rows = bench.cost_table(p["n_a"], p["n_r"], p["n_b"])
        summary = bench.published_point_summary()
        print("Published operating point: 20000 x 20000, N_b = 972")
        print(f"  batched RDA      {summary['batched_gflops']:.1f} GFLOPs, {summary['batched_mem_gb']:.0f} GB")
        print(f"  linewise RDA     {summary['linewise_gflops_per_iter']:.2f} GFLOPs/iteration, "
              f"{summary['linewise_gflops_per_scan']:,.0f} GFLOPs/scan, {summary['linewise_mem_mb']:.0f} MB")
        print(f"  online processor {summary['osp_front_mflops']:.2f} + {summary['osp_model_mflops']:.1f} = "
              f"{summary['osp_mflops_per_line']:.2f} MFLOPs/line, {summary['osp_mflops_per_scan']:,.0f} MFLOPs/scan, "
              f"{summary['osp_mem_mb']:.1f} MB")
        model = ssm.TinyModel.init()
        per_layer = ssm.layer_flops(ssm.STUDENT)
        print(f"  this build's student: {model.n_params()} parameters (published: ~200), "
              f"{sum(f for _, f in per_layer)} FLOPs per cell (published: 660)")
        print()
    else:
        spec = scene_from_args(args)
        n_b = args.n_b or simgen.buffer_length(spec.params)
        rows = bench.cost_table(spec.n_pulses, spec.n_range_bins, n_b)
    cols = ["method", "mode", "complexity", "gflops_per_row", "gflops_per_scan", "memory"]
    if args.measure and not args.paper_point:
        raw = simgen.synth_raw(spec)
        model = load_model(args.model)
        for r in rows:
            if r["mode"] != "strict":   # published-mode rounding is meant for the published point
                continue
            method = bench.Method(r["method"])
            m = bench.measure(lambda: bench.make_processor(method, spec.params, raw.cols, model, n_b),
                              raw.data, prf=spec.params.prf)
            r.update(row_ms_median=None if method is bench.Method.RDA_BATCHED else m.per_row_ms_median,
                     row_ms_p95=None if method is bench.Method.RDA_BATCHED else m.per_row_ms_p95,
                     full_ms=m.full_ms, peak_traced=m.peak_traced_bytes, delay_rows=m.buffer_delay_rows)
        cols += ["row_ms_median", "row_ms_p95", "full_ms", "peak_traced", "delay_rows"]
    print(bench.format_table(rows, cols))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            wr.writeheader()
            wr.writerows(rows)
    return EXIT_OK


@contextmanager
def open_stream(path: str | None, mode: str, tcp: str | None = None, listen: bool = False):
    if tcp:
        host, port = tcp.rsplit(":", 1)
        if listen:
            srv = socket.create_server((host, int(port)))
            conn, _ = srv.accept()
            srv.close()
        else:
            conn = socket.create_connection((host, int(port)))
        f = conn.makefile(mode)
        try:
            yield f
        finally:
            f.close()
            conn.close()
        return
    if path in (None, "-"):
        yield sys.stdout.buffer if "w" in mode else sys.stdin.buffer
        return
    with open(path, mode) as f:
        yield f


def cmd_stream_serve(args) -> int:
    raw = sarcore.read_raster(args.input)
    period = 0.0 if args.no_pace else 1.0 / params_of(raw).prf
    with open_stream(args.out, "wb", args.tcp, listen=True) as out:
        t0 = time.perf_counter()
        for k in range(raw.rows):
            if period:
                delay = t0 + k * period - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            out.write(sarcore.encode_pulse_frame(raw.data[k], k))
            out.flush()
    return EXIT_OK


def cmd_stream_focus(args) -> int:
    spec = scene_from_args(args)
    params = spec.params
    if args.params_from:
        params = params_of(sarcore.read_raster(args.params_from))
    stamps = []
    proc = None
    with open_stream(args.input, "rb", args.tcp) as src, open_stream(args.out, "wb") as dst:
        frames = sarcore.iter_frames(src)
        while True:
            try:
                k, row = next(frames)
            except StopIteration:
                break
            t_in = time.perf_counter()
            if proc is None:
                if args.method == "osp":
                    proc = bench.OnlineAdapter(ssm.OnlineProcessor(
                        load_model(args.model), params, row.size, range_threads=args.range_threads))
                else:
                    proc = rda.LinewiseRda(params, row.size, args.n_b)
            for fr in proc.push(row, k):
                dst.write(sarcore.encode_pulse_frame(fr.data, fr.k))
                dst.flush()
                stamps.append((fr.k, k, t_in, time.perf_counter()))
        if proc is not None:
            for fr in proc.flush():
                dst.write(sarcore.encode_pulse_frame(fr.data, fr.k))
                dst.flush()
                stamps.append((fr.k, -1, float("nan"), time.perf_counter()))
    if args.timestamps:
        with open(args.timestamps, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["row", "input_pulse", "t_ingest", "t_emit"])
            wr.writerows(stamps)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onlinesar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp, what):
        sp.add_argument("--config", help=f"key: value file with {what} settings")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")

    sp = sub.add_parser("simulate", help="synthesize a RAW phase-history raster")
    config_args(sp, "scene")
    sp.add_argument("--random-targets", type=int, default=0, help="add N unit targets at seeded positions")
    sp.add_argument("--scene-out", help="also write the resolved scene description")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("focus", help="focus a RAW raster")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", choices=("rda", "linewise", "osp"), default="rda")
    sp.add_argument("--model", help="OSPM checkpoint for --method osp (default: untrained seed-42 student)")
    sp.add_argument("--n-b", type=int, help="linewise buffer length (default: two aperture lengths)")
    sp.add_argument("--range-threads", type=int, default=1)
    sp.add_argument("--pgm", help="also write a dB image")
    sp.set_defaults(func=cmd_focus)

    for name, func, helptext in (("train", cmd_train, "train the student on a RAW scene"),
                                 ("gradcheck", cmd_gradcheck, "compare central and 4th-order FD gradients")):
        sp = sub.add_parser(name, help=helptext)
        config_args(sp, "train.*, loss.* and kd.*")
        sp.add_argument("--in", dest="input", required=True, help="RAW raster used to build strips")
        sp.add_argument("--bins", help="range-bin slice START:STOP of the scene to use")
        if name == "train":
            sp.add_argument("--out", required=True)
            sp.add_argument("--history", help="per-epoch CSV")
            sp.add_argument("--init", help="starting checkpoint")
            sp.add_argument("--teacher", help="frozen SSM teacher checkpoint (default: RDA output)")
        else:
            sp.add_argument("--model", help="checkpoint to probe")
            sp.add_argument("--coords", type=int, default=20)
        sp.set_defaults(func=func)

    sp = sub.add_parser("detect", help="streaming CA-CFAR on a focused raster")
    config_args(sp, "CFAR (guard_half, train_half, p_fa, min_component)")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True, help="detections CSV")
    sp.add_argument("--mask", help="mask PGM (run-length sidecar written next to it)")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("segment", help="water segmentation of a focused raster")
    config_args(sp, "segmentation (kernel, tau_db, a_min, connectivity)")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True, help="mask PGM (run-length sidecar written next to it)")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("bench", help="cost model table, optionally with measurements")
    config_args(sp, "scene")
    sp.add_argument("--paper-point", action="store_true", help="evaluate at 20000 x 20000, N_b = 972")
    sp.add_argument("--measure", action="store_true", help="time all three processors on the scene")
    sp.add_argument("--model")
    sp.add_argument("--n-b", type=int)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("stream-serve", help="send a RAW raster as pulse frames at PRF pace")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", default="-", help="file or - for stdout")
    sp.add_argument("--tcp", help="serve on HOST:PORT instead")
    sp.add_argument("--no-pace", action="store_true")
    sp.set_defaults(func=cmd_stream_serve)

    sp = sub.add_parser("stream-focus", help="focus pulse frames as they arrive")
    config_args(sp, "scene (radar parameters)")
    sp.add_argument("--in", dest="input", default="-", help="file or - for stdin")
    sp.add_argument("--tcp", help="read from HOST:PORT instead")
    sp.add_argument("--out", default="-", help="focused frames: file or - for stdout")
    sp.add_argument("--method", choices=("osp", "linewise"), default="osp")
    sp.add_argument("--model")
    sp.add_argument("--n-b", type=int)
    sp.add_argument("--params-from", help="take radar parameters from this SARB header")
    sp.add_argument("--range-threads", type=int, default=1)
    sp.add_argument("--timestamps", help="CSV of per-row ingest/emit times")
    sp.set_defaults(func=cmd_stream_focus)
    return p


def _failing_module(exc: BaseException) -> str:
    mods = [f.filename for f in traceback.extract_tb(exc.__traceback__)]
    for fn in reversed(mods):
        stem = Path(fn).stem
        if "onlinesar" in fn and stem not in ("cli", "__main__"):
            return f"onlinesar.{stem}"
    return "onlinesar.cli"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, KeyError) as exc:
        log(f"usage error: {exc}")
        return EXIT_USAGE
    except sarcore.SarFormatError as exc:
        log(f"{_failing_module(exc)}: malformed input: {exc}")
        return EXIT_FORMAT
    except FloatingPointError as exc:
        log(f"{_failing_module(exc)}: numerical failure: {exc}")
        return EXIT_DIVERGED
    except (ValueError, RuntimeError) as exc:
        log(f"{_failing_module(exc)}: contract violated: {exc}")
        return EXIT_CONTRACT
    except OSError as exc:
        log(f"{_failing_module(exc)}: I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
