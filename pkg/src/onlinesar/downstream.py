"""Row-streaming CA-CFAR detection and intensity-threshold water segmentation.

Both axes use symmetric reflection at the borders (``d c b a | a b c d``),
which is ``mode='reflect'`` in ``scipy.ndimage``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from scipy import ndimage

from .sarcore import DB_EPS, PulseOrderError


@dataclass(frozen=True)
class CfarConfig:
    guard_half: int = 10
    train_half: int = 28
    p_fa: float = 1e-6
    min_component: int = 3

    def __post_init__(self):
        if self.guard_half < 0 or self.train_half < 1:
            raise ValueError("need guard_half >= 0 and train_half >= 1")
        if not 0 < self.p_fa < 1:
            raise ValueError("p_fa must lie in (0, 1)")

    @property
    def half(self) -> int:
        return self.guard_half + self.train_half

    @property
    def side(self) -> int:
        return 2 * self.half + 1

    @property
    def n_train(self) -> int:
        return self.side**2 - (2 * self.guard_half + 1) ** 2

    @property
    def alpha(self) -> float:
        return cfar_alpha(self.n_train, self.p_fa)

    @property
    def latency(self) -> int:
        return self.half


@dataclass(frozen=True)
class SegConfig:
    kernel: int = 5
    tau_db: float = -9.0
    a_min: int = 600
    connectivity: int = 8

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError("kernel must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


def cfar_alpha(n_train: int, p_fa: float) -> float:
    """Threshold multiplier for cell averaging over exponential clutter."""
    if n_train < 1 or not 0 < p_fa < 1:
        raise ValueError("need n_train >= 1 and 0 < p_fa < 1")
    return n_train * math.expm1(-math.log(p_fa) / n_train)


def reflect_index(i: int, n: int) -> int:
    """Symmetric reflection of index ``i`` into ``[0, n)``."""
    i %= 2 * n
    return i if i < n else 2 * n - 1 - i


def _box_along_range(col_sums: np.ndarray, half: int) -> np.ndarray:
    """Running sum of width ``2 half + 1`` along the last axis with symmetric padding."""
    padded = np.pad(col_sums, (half, half), mode="symmetric")
    c = np.concatenate(([0.0], np.cumsum(padded)))
    return c[2 * half + 1:] - c[:-(2 * half + 1)]


@dataclass
class DetectionRow:
    k: int
    mask: np.ndarray           # bool, one flag per range bin
    intensity: np.ndarray
    threshold: np.ndarray


class CfarStream:
    """CA-CFAR over a stream of focused rows with a fixed ``G + T`` row latency.

    Holds ``2 (G + T) + 1`` intensity rows and two running column sums (outer
    and guard windows). The decision for row ``k`` is emitted when row
    ``k + G + T`` arrives; ``flush`` resolves the last rows by reflection.
    """

    def __init__(self, cfg: CfarConfig = CfarConfig()):
        self.cfg = cfg
        self.alpha = cfg.alpha
        self.ring: np.ndarray | None = None
        self.n_in = 0        # rows ingested
        self.n_out = 0       # rows decided
        self.outer: np.ndarray | None = None
        self.inner: np.ndarray | None = None
        self.closed = False

    @property
    def n_r(self) -> int | None:
        return None if self.ring is None else self.ring.shape[1]

    @property
    def nbytes(self) -> int:
        arrays = (self.ring, self.outer, self.inner)
        return sum(a.nbytes for a in arrays if a is not None)

    def _row(self, i: int, n: int | None) -> np.ndarray:
        """Intensity row ``i``, reflected at the start (and at the end once ``n`` is known)."""
        if i < 0 or (n is not None and i >= n):
            i = reflect_index(i, n if n is not None else self.n_in)
        return self.ring[i % self.cfg.side]

    def _decide(self, n: int | None) -> DetectionRow:
        # on entry: outer sums rows c-h..c+h, inner sums rows c-g..c+g
        c = self.n_out
        cfg = self.cfg
        h, g = cfg.half, cfg.guard_half
        if c == 0:
            self.outer = sum(self._row(i, n) for i in range(-h, h + 1))
            self.inner = sum(self._row(i, n) for i in range(-g, g + 1))
        train = _box_along_range(self.outer, h) - _box_along_range(self.inner, g)
        x = self._row(c, n).copy()
        thr = self.alpha * train / cfg.n_train
        out = DetectionRow(c, x > thr, x, thr)
        # slide towards row c + 1; the outer window's new row is added when it arrives
        self.outer = self.outer - self._row(c - h, n)
        self.inner = self.inner - self._row(c - g, n) + self._row(c + g + 1, n)
        self.n_out += 1
        return out

    def push(self, row, k: int | None = None) -> list[DetectionRow]:
        if self.closed:
            raise RuntimeError("stream already flushed")
        if k is not None and k != self.n_in:
            raise PulseOrderError(self.n_in, k)
        x = np.abs(np.asarray(row)).astype(np.float64) ** 2
        if self.ring is None:
            self.ring = np.zeros((self.cfg.side, x.size))
        elif x.shape != (self.n_r,):
            raise ValueError(f"row has {x.size} bins, stream has {self.n_r}")
        self.ring[self.n_in % self.cfg.side] = x
        self.n_in += 1
        if self.n_out:
            self.outer = self.outer + x
        if self.n_in > self.cfg.half:
            return [self._decide(None)]
        return []

    def flush(self) -> list[DetectionRow]:
        """Decide the last ``G + T`` rows (or all of a short stream) by reflecting at the end."""
        self.closed = True
        n = self.n_in
        out = []
        while self.n_out < n:
            if self.n_out:
                self.outer = self.outer + self._row(self.n_out + self.cfg.half, n)
            out.append(self._decide(n))
        return out


def cfar_stream(cfg: CfarConfig, rows: Iterable) -> Iterator[DetectionRow]:
    s = CfarStream(cfg)
    for row in rows:
        yield from s.push(row)
    yield from s.flush()


def cfar_detect(image, cfg: CfarConfig = CfarConfig()) -> np.ndarray:
    """Run the streaming detector over every row of a focused raster."""
    data = np.asarray(getattr(image, "data", image))
    mask = np.zeros(data.shape, dtype=bool)
    for d in cfar_stream(cfg, data):
        mask[d.k] = d.mask
    return mask


def cfar_image(image, cfg: CfarConfig = CfarConfig(), intensity: bool = False,
               return_threshold: bool = False):
    """Whole-image CA-CFAR using separable box filters with symmetric borders."""
    x = np.asarray(getattr(image, "data", image))
    x = x.astype(np.float64) if intensity else np.abs(x).astype(np.float64) ** 2
    h, g = cfg.half, cfg.guard_half
    outer = ndimage.uniform_filter(x, 2 * h + 1, mode="reflect") * (2 * h + 1) ** 2
    inner = ndimage.uniform_filter(x, 2 * g + 1, mode="reflect") * (2 * g + 1) ** 2
    thr = cfg.alpha * (outer - inner) / cfg.n_train
    mask = x > thr
    return (mask, thr) if return_threshold else mask


# --------------------------------------------------------------------------
# connected components and segmentation
# --------------------------------------------------------------------------

def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError("connectivity must be 4 or 8")


def remove_small_components(mask, k_min: int, connectivity: int = 8) -> np.ndarray:
    """Clear connected components with fewer than ``k_min`` pixels."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= k_min
    keep[0] = False
    return keep[labels]


def intensity_db(image, kernel: int = 5) -> np.ndarray:
    """Boxcar-smoothed intensity in dB relative to its scene mean."""
    x = np.asarray(getattr(image, "data", image))
    if kernel > min(x.shape):
        raise ValueError(f"kernel {kernel} is larger than the {x.shape} raster")
    smooth = ndimage.uniform_filter(np.abs(x).astype(np.float64) ** 2, kernel, mode="reflect")
    mean = smooth.mean()
    rel = smooth / mean if mean > 0 else np.zeros_like(smooth)
    return 10 * np.log10(rel + DB_EPS)


def water_mask(image, cfg: SegConfig = SegConfig()) -> np.ndarray:
    """Dark regions (below ``tau_db`` relative to the scene mean) of at least ``a_min`` pixels."""
    dark = intensity_db(image, cfg.kernel) < cfg.tau_db
    return remove_small_components(dark, cfg.a_min, cfg.connectivity)


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

def write_detections_csv(rows: Iterable[DetectionRow], path, k_min: int | None = None) -> int:
    """One CSV line per detected cell: row, col, intensity, threshold. Returns the count."""
    n = 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "col", "intensity", "threshold"])
        for d in rows:
            for col in np.nonzero(d.mask)[0]:
                wr.writerow([d.k, int(col), repr(float(d.intensity[col])), repr(float(d.threshold[col]))])
                n += 1
    return n


def mask_rle(mask) -> str:
    """Run-length encoding, one line per row: ``row: start+length ...`` for set runs."""
    mask = np.asarray(mask, dtype=bool)
    lines = [f"shape: {mask.shape[0]} {mask.shape[1]}"]
    for k, row in enumerate(mask):
        d = np.diff(np.concatenate(([0], row.astype(np.int8), [0])))
        starts, ends = np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]
        if starts.size:
            lines.append(f"{k}: " + " ".join(f"{s}+{e - s}" for s, e in zip(starts, ends)))
    return "\n".join(lines) + "\n"


def mask_from_rle(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    rows, cols = map(int, lines[0].split(":")[1].split())
    mask = np.zeros((rows, cols), dtype=bool)
    for line in lines[1:]:
        k, runs = line.split(":")
        for run in runs.split():
            s, n = map(int, run.split("+"))
            mask[int(k), s:s + n] = True
    return mask
