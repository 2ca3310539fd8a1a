"""Operation counts, FLOP and memory models, and a wall-clock harness for the three processors.

FLOP conventions: a real multiply or add is 1 FLOP, a complex-complex
multiply 6, a complex-real multiply 2, a complex add 2, and a length-N
radix-2 FFT ``5 N log2 N``.

``published`` mode reproduces the published breakdown tables, row by row,
including the places where the printed rows do not follow their own stated
convention, and rounds every row to its printed precision before summing.
``strict`` mode applies the conventions uniformly and does not round.
"""
from __future__ import annotations

import enum
import math
import resource
import sys
import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .rda import FocusedRow, LinewiseRda, build_filters, focus_array
from .radix2 import next_pow2
from .sarcore import RadarParams
from .simgen import buffer_length
from .ssm import STUDENT, ModelConfig, OnlineProcessor, TinyModel, layer_flops

PUBLISHED_POINT = dict(n_a=20000, n_r=20000, n_b=972)
# published per-cell FLOPs of the tiny model, layer by layer
PUBLISHED_MODEL_FLOPS = (("fc1", 18), ("ssm2", 146), ("act", 2), ("fc3", 10), ("ssm4", 146), ("act", 2),
                     ("fc5", 10), ("ssm6", 146), ("act", 2), ("fc7", 10), ("ssm8", 146), ("act", 2),
                     ("fc9", 10), ("fc10", 10))
# state sizing used by the published memory table: 4 layers x 2 channels x 4 modes
PUBLISHED_STATE = dict(layers=4, channels=2, modes=4)
PUBLISHED_PARAM_BYTES = 96 * 8 + 48 * 4
BYTES_C64 = 8


class Method(enum.Enum):
    RDA_BATCHED = "rda"
    RDA_LINEWISE = "linewise"
    OSP = "osp"


@dataclass(frozen=True)
class CostModel:
    method: Method
    n_a: int
    n_r: int
    n_b: int = 972
    x_flops: float = 0.0

    def __post_init__(self):
        if min(self.n_a, self.n_r, self.n_b) < 1:
            raise ValueError("dimensions must be positive")


def round_sig(x: float, sig: int) -> float:
    if x == 0:
        return 0.0
    return round(x, sig - 1 - int(math.floor(math.log10(abs(x)))))


def fft_flops(n: int) -> float:
    return 5 * n * math.log2(n)


# --------------------------------------------------------------------------
# complexity
# --------------------------------------------------------------------------

def complexity_count(m: CostModel) -> float:
    """Complex operations for a full scene of ``n_a`` pulses."""
    na, nr, nb = m.n_a, m.n_r, m.n_b
    if m.method is Method.RDA_BATCHED:
        return na * nr * (2 * math.log2(na * nr) + 3)
    if m.method is Method.RDA_LINEWISE:
        return na * nr * (math.log2(nr) + nb * (3 + 2 * math.log2(nr) + math.log2(nb)))
    return na * nr * (2 * math.log2(nr) + 1 + m.x_flops)


# --------------------------------------------------------------------------
# FLOPs
# --------------------------------------------------------------------------

@dataclass
class FlopReport:
    method: Method
    rows: list[tuple[str, float]]     # per-stage FLOPs, per iteration
    per_iteration: float
    per_scan: float
    unit: float                       # 1e9 for GFLOPs, 1e6 for MFLOPs
    mode: str

    def scaled(self) -> list[tuple[str, float]]:
        return [(n, v / self.unit) for n, v in self.rows]


def model_flops(config: ModelConfig | None = STUDENT, published: bool = False) -> list[tuple[str, int]]:
    return list(PUBLISHED_MODEL_FLOPS) if published else layer_flops(config)


def real_flops(m: CostModel, strict: bool = False, config: ModelConfig | None = STUDENT) -> FlopReport:
    """Per-stage FLOPs of one iteration and of the whole scan.

    One iteration is the whole scene for batched RDA and one range line for
    the linewise and online processors.
    """
    na, nr, nb = m.n_a, m.n_r, m.n_b
    mode = "strict" if strict else "published"
    if m.method is Method.RDA_BATCHED:
        unit, digits = 1e9, 1
        fa, fr = nr * fft_flops(na), na * fft_flops(nr)
        mul = 6.0 * na * nr
        rows = [("FFT dim=1", fr), ("FFT dim=0", fa), ("Multiply (RC)", mul), ("Multiply (RCMC)", mul),
                ("Multiply (AC)", mul), ("IFFT dim=1", fr), ("IFFT dim=0", fa)]
        if not strict:
            rows = [(n, round(v / unit, digits) * unit) for n, v in rows]
        total = sum(v for _, v in rows)
        if not strict:
            total = round(total / unit, digits) * unit
        return FlopReport(m.method, rows, total, total, unit, mode)

    if m.method is Method.RDA_LINEWISE:
        unit = 1e9
        if strict:
            rows = [("FFT dim=1", fft_flops(nr)), ("FFT dim=0", nr * fft_flops(nb)),
                    ("Multiply (RC filter)", 6.0 * nb * nr), ("Multiply (RCMC filter)", 6.0 * nb * nr),
                    ("Multiply (AC filter)", 6.0 * nb * nr), ("IFFT dim=1", nb * fft_flops(nr)),
                    ("IFFT dim=0", nr * fft_flops(nb))]
            total = sum(v for _, v in rows)
            return FlopReport(m.method, rows, total, total * na, unit, mode)
        # as printed: the single-row FFT is a tenth of its expression, the multiplies
        # drop the factor 6 and the range IFFT drops the factor 5
        mul = 1.0 * nb * nr
        rows = [("FFT dim=1", fft_flops(nr) / 10), ("FFT dim=0", nr * fft_flops(nb)),
                ("Multiply (RC filter)", mul), ("Multiply (RCMC filter)", mul), ("Multiply (AC filter)", mul),
                ("IFFT dim=1", nb * nr * math.log2(nr)), ("IFFT dim=0", nr * fft_flops(nb))]
        rows = [(n, round_sig(v / unit, 3) * unit) for n, v in rows]
        total = round(sum(v for _, v in rows) / unit, 2) * unit
        return FlopReport(m.method, rows, total, total * na, unit, mode)

    # online processor: range compression front end plus one model step per cell
    unit = 1e6
    x = m.x_flops or sum(f for _, f in model_flops(config, published=not strict))
    rows = [("FFT dim=1", fft_flops(nr)), ("Multiply (RC filter)", 6.0 * nr), ("IFFT dim=1", fft_flops(nr))]
    if not strict:
        rows = [(n, round(v / unit, 2) * unit) for n, v in rows]
    front = sum(v for _, v in rows)
    rows.append(("Front end", front))
    rows.append(("Tiny model", x * nr))
    total = front + x * nr
    if not strict:
        total = round(total / unit, 2) * unit
    return FlopReport(m.method, rows, total, total * na, unit, mode)


# --------------------------------------------------------------------------
# memory
# --------------------------------------------------------------------------

@dataclass
class MemoryReport:
    method: Method
    rows: list[tuple[str, float]]   # bytes
    total: float
    mode: str


def memory_model(m: CostModel, strict: bool = False, config: ModelConfig | None = STUDENT) -> MemoryReport:
    """Peak working-set estimate in bytes (complex64 tensors).

    Batched and linewise RDA hold four full-size tensors (data and three
    filters) plus one FFT scratch buffer. The online processor holds one
    line and its range filter, the recurrent state, parameters and the
    per-bin input tensor.
    """
    na, nr, nb = m.n_a, m.n_r, m.n_b
    mode = "strict" if strict else "published"
    if m.method in (Method.RDA_BATCHED, Method.RDA_LINEWISE):
        rows_n = na if m.method is Method.RDA_BATCHED else nb
        tensor = rows_n * nr * BYTES_C64
        if not strict:
            tensor = round_sig(tensor, 3 if m.method is Method.RDA_LINEWISE else 2)
        rows = [(name, tensor) for name in ("x", "rc_filter", "rcmc_filter", "ac_filter", "fft scratch")]
        return MemoryReport(m.method, rows, 5 * tensor, mode)

    if strict and config is not None:
        model = TinyModel.init(config, 0)
        state = nr * sum(config.widths) * config.state_dim * BYTES_C64
        params = model.n_params() * 4
        embed = nr * config.in_dim * 4
    else:
        p = PUBLISHED_STATE
        state = p["layers"] * nr * p["channels"] * p["modes"] * BYTES_C64
        params = PUBLISHED_PARAM_BYTES
        embed = nr * 4 * 4
    rows = [("signal tensors", 2 * nr * BYTES_C64), ("state", state),
            ("parameters", params), ("embedding", embed)]
    return MemoryReport(m.method, rows, float(sum(v for _, v in rows)), mode)


def published_point_summary() -> dict[str, float]:
    """Headline figures at the published operating point (20000 x 20000, N_b = 972)."""
    b = real_flops(CostModel(Method.RDA_BATCHED, **PUBLISHED_POINT))
    lw = real_flops(CostModel(Method.RDA_LINEWISE, **PUBLISHED_POINT))
    osp = real_flops(CostModel(Method.OSP, **PUBLISHED_POINT))
    return {
        "batched_gflops": b.per_scan / 1e9,
        "linewise_gflops_per_iter": lw.per_iteration / 1e9,
        "linewise_gflops_per_scan": lw.per_scan / 1e9,
        "osp_front_mflops": dict(osp.rows)["Front end"] / 1e6,
        "osp_model_mflops": dict(osp.rows)["Tiny model"] / 1e6,
        "osp_mflops_per_line": osp.per_iteration / 1e6,
        "osp_mflops_per_scan": osp.per_scan / 1e6,
        "batched_mem_gb": memory_model(CostModel(Method.RDA_BATCHED, **PUBLISHED_POINT)).total / 1e9,
        "linewise_mem_mb": memory_model(CostModel(Method.RDA_LINEWISE, **PUBLISHED_POINT)).total / 1e6,
        "osp_mem_mb": round_sig(memory_model(CostModel(Method.OSP, **PUBLISHED_POINT)).total / 1e6, 2),
    }


# --------------------------------------------------------------------------
# measurement
# --------------------------------------------------------------------------

class BatchedProcessor:
    """Row-stream wrapper around batched RDA: rows are collected and focused at flush.

    The azimuth axis is zero-padded to the next power of two and cropped back.
    """

    def __init__(self, params: RadarParams, n_r: int):
        self.params, self.n_r = params, n_r
        self.rows: list[np.ndarray] = []

    def push(self, row, k=None) -> list[FocusedRow]:
        self.rows.append(np.asarray(row))
        return []

    def flush(self) -> list[FocusedRow]:
        if not self.rows:
            return []
        n = len(self.rows)
        raw = np.zeros((next_pow2(n), self.n_r), dtype=np.complex128)
        raw[:n] = self.rows
        img = focus_array(raw, build_filters(self.params, raw.shape[0], self.n_r))
        return [FocusedRow(k, img[k]) for k in range(n)]


class OnlineAdapter:
    def __init__(self, proc: OnlineProcessor):
        self.proc = proc

    def push(self, row, k=None) -> list[FocusedRow]:
        return [self.proc.push(row, k)]

    def flush(self) -> list[FocusedRow]:
        return []


def make_processor(method: Method, params: RadarParams, n_r: int, model: TinyModel | None = None,
                   n_b: int | None = None):
    if method is Method.RDA_BATCHED:
        return BatchedProcessor(params, n_r)
    if method is Method.RDA_LINEWISE:
        return LinewiseRda(params, n_r, n_b)
    return OnlineAdapter(OnlineProcessor(model or TinyModel.init(), params, n_r))


@dataclass
class Measurement:
    rows_in: int
    rows_out: int
    per_row_ms_median: float
    per_row_ms_p95: float
    full_ms: float
    peak_traced_bytes: int | None
    peak_rss_bytes: int
    buffer_delay_rows: int = 0
    buffer_delay_s: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _peak_rss() -> int:
    r = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(r if sys.platform == "darwin" else r * 1024)


def measure(factory: Callable[[], object], rows: Iterable, warmup: int = 8,
            track_memory: bool = True, prf: float | None = None) -> Measurement:
    """Time every ``push`` of a row-stream processor, then its ``flush``.

    Per-row statistics use pushes that emitted a row, after ``warmup`` of
    them. Peak memory is the traced Python/numpy allocation peak during the
    run in a separate pass (tracing slows numpy); outputs are discarded as
    they arrive so only the processor's own state counts. The process-wide
    peak RSS is reported as well, for information.
    """
    rows = list(rows) if not isinstance(rows, (list, np.ndarray)) else rows
    proc = factory()
    times, emitted = [], 0
    t_start = time.perf_counter()
    for k, row in enumerate(rows):
        t0 = time.perf_counter()
        out = proc.push(row, k)
        dt = time.perf_counter() - t0
        if out:
            times.append(dt)
            emitted += len(out)
    t0 = time.perf_counter()
    tail = proc.flush()
    flush_t = time.perf_counter() - t0
    emitted += len(tail)
    full = time.perf_counter() - t_start
    steady = times[warmup:] if len(times) > warmup else times
    if not steady and tail:
        steady = [flush_t]
    med = float(np.median(steady)) * 1e3 if steady else 0.0
    p95 = float(np.percentile(steady, 95)) * 1e3 if steady else 0.0

    peak = None
    if track_memory:
        proc = None
        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            p = factory()
            for k, row in enumerate(rows):
                p.push(row, k)
            p.flush()
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()

    delay = getattr(proc if proc is not None else factory(), "delay", 0) or 0
    return Measurement(len(rows), emitted, med, p95, full * 1e3, peak, _peak_rss(),
                       int(delay), float(delay / prf) if prf else 0.0)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def _fmt_bytes(b: float) -> str:
    for unit, div in (("GB", 1e9), ("MB", 1e6), ("KB", 1e3)):
        if b >= div:
            return f"{b / div:.4g} {unit}"
    return f"{b:.0f} B"


def cost_table(n_a: int, n_r: int, n_b: int, config: ModelConfig | None = STUDENT) -> list[dict]:
    """Table-1 style analytic rows for all methods in both accounting modes."""
    out = []
    x_published = sum(f for _, f in PUBLISHED_MODEL_FLOPS)
    x_model = sum(f for _, f in layer_flops(config))
    for method in Method:
        for strict in (False, True):
            x = x_model if strict else x_published
            cm = CostModel(method, n_a, n_r, n_b, x)
            fl = real_flops(cm, strict, config)
            mem = memory_model(cm, strict, config)
            per_row = None if method is Method.RDA_BATCHED else fl.per_iteration / 1e9
            out.append({
                "method": method.value, "mode": fl.mode,
                "complexity": complexity_count(cm),
                "gflops_per_scan": fl.per_scan / 1e9,
                "gflops_per_row": per_row,
                "memory_bytes": mem.total,
                "memory": _fmt_bytes(mem.total),
            })
    return out


def format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        if v is None:
            return "N/A"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    grid = [columns] + [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in grid) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in grid]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
