"""Range-Doppler reference processors: batched full scene and linewise rolling buffer.

Both follow the same seven steps: range FFT, azimuth FFT, range matched
filter, RCMC multiply, range IFFT, azimuth matched filter, azimuth IFFT.
The RCMC kernel is all ones by default (linear-aperture assumption) but the
multiply is still executed so the operation count matches the cost tables.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .radix2 import fft, ifft, is_pow2, next_pow2
from .sarcore import PulseOrderError, RadarParams, Raster, Stage
from .simgen import buffer_length, chirp_replica

# fraction of the processed Doppler band given a cosine taper at each edge
AZ_ROLLOFF = 0.2


@dataclass(frozen=True, eq=False)
class RdaFilters:
    h_r: np.ndarray       # (N_r,) range matched filter, range-frequency domain
    h_rcmc: np.ndarray    # (N_az, N_r) 2-D frequency-domain RCMC kernel
    h_a: np.ndarray       # (N_az, N_r) azimuth matched filter, range-Doppler domain

    @property
    def n_az(self) -> int:
        return self.h_a.shape[0]

    @property
    def n_r(self) -> int:
        return self.h_r.shape[0]


def doppler_rate(params: RadarParams, r) -> np.ndarray:
    """Azimuth FM rate K_a = 2 v^2 / (lambda R) for range bin(s) ``r``."""
    return 2.0 * params.platform_velocity**2 / (params.wavelength * params.slant_range(r))


def range_filter(params: RadarParams, n_r: int) -> np.ndarray:
    return np.conj(fft(chirp_replica(params, n_r)))


def processed_bandwidth(params: RadarParams) -> float:
    """Azimuth Doppler bandwidth of the rect beam, 2 v / L_ant."""
    return 2.0 * params.platform_velocity / params.antenna_length


def band_window(f: np.ndarray, bandwidth: float, rolloff: float = AZ_ROLLOFF) -> np.ndarray:
    """Tukey window over ``|f| <= bandwidth/2``; ``rolloff`` is the tapered fraction."""
    x = np.abs(f) / (bandwidth / 2)              # 0 at centre, 1 at band edge
    w = np.zeros_like(x)
    w[x <= 1.0] = 1.0
    if rolloff > 0:
        edge = (x > 1.0 - rolloff) & (x <= 1.0)
        w[edge] = 0.5 * (1.0 + np.cos(np.pi * (x[edge] - 1.0 + rolloff) / rolloff))
    return w


def azimuth_filter(params: RadarParams, n_az: int, n_r: int,
                   rolloff: float | None = AZ_ROLLOFF) -> np.ndarray:
    """Azimuth matched filter on the ``n_az``-point Doppler grid.

    Restricted to the processed Doppler band with a short cosine roll-off at
    the band edges; ``rolloff=None`` gives the unwindowed all-band phase filter.
    """
    # Echo phase is -4 pi R / lambda ~ -pi K_a t^2; with an e^{-j2pi f t}
    # forward FFT its spectrum carries +pi f^2 / K_a, so the filter is the conjugate.
    f_eta = np.fft.fftfreq(n_az, d=1.0 / params.prf)
    ka = doppler_rate(params, np.arange(n_r))
    h = np.exp(-1j * np.pi * f_eta[:, None] ** 2 / ka[None, :])
    if rolloff is not None:
        h *= band_window(f_eta, processed_bandwidth(params), rolloff)[:, None]
    return h


def build_filters(params: RadarParams, n_az: int, n_r: int,
                  h_rcmc: np.ndarray | None = None) -> RdaFilters:
    if not (is_pow2(n_az) and is_pow2(n_r)):
        raise ValueError(f"filter grid must be powers of two, got {n_az}x{n_r}")
    params.check_grid(n_r)
    if h_rcmc is None:
        h_rcmc = np.ones((n_az, n_r), dtype=np.complex128)
    elif h_rcmc.shape != (n_az, n_r):
        raise ValueError(f"h_rcmc must have shape {(n_az, n_r)}, got {h_rcmc.shape}")
    return RdaFilters(range_filter(params, n_r), np.asarray(h_rcmc, np.complex128),
                      azimuth_filter(params, n_az, n_r))


def _check_dims(shape, f: RdaFilters) -> None:
    if shape != (f.n_az, f.n_r):
        raise ValueError(f"raster {shape} does not match filter grid {(f.n_az, f.n_r)}")


def focus_array(raw: np.ndarray, f: RdaFilters) -> np.ndarray:
    _check_dims(raw.shape, f)
    x = fft(raw, axis=1)          # 1 range FFT
    x = fft(x, axis=0)            # 2 azimuth FFT
    x = x * f.h_r[None, :]        # 3 range compression
    x = x * f.h_rcmc              # 4 RCMC
    x = ifft(x, axis=1)           # 5 range IFFT -> range-Doppler
    x = x * f.h_a                 # 6 azimuth compression
    return ifft(x, axis=0)        # 7 azimuth IFFT


def focus_batched(raw: Raster, f: RdaFilters) -> Raster:
    return raw.with_data(focus_array(raw.data, f), Stage.AZ)


def range_compress_row(row, h_r: np.ndarray) -> np.ndarray:
    row = np.asarray(row)
    if row.shape != h_r.shape:
        raise ValueError(f"row length {row.shape} does not match filter {h_r.shape}")
    return ifft(fft(row) * h_r)


def range_compress(raw: Raster, h_r: np.ndarray) -> Raster:
    if raw.cols != h_r.size:
        raise ValueError("range filter length does not match raster width")
    return raw.with_data(ifft(fft(raw.data, axis=1) * h_r[None, :], axis=1), Stage.RC)


# --------------------------------------------------------------------------
# linewise
# --------------------------------------------------------------------------

@dataclass
class FocusedRow:
    k: int                  # pulse index of the focused row
    data: np.ndarray
    partial: bool = False   # True for edge rows lacking full look-back or look-ahead


@dataclass
class LinewiseState:
    n_b: int
    n_r: int
    buf: np.ndarray = field(init=False, repr=False)   # ring of range-FFT'd rows
    fill: int = 0
    next_k: int = 0

    def __post_init__(self):
        if self.n_b < 2 or self.n_b % 2:
            raise ValueError("buffer length must be even and >= 2")
        self.buf = np.zeros((self.n_b, self.n_r), dtype=np.complex128)

    @property
    def delay(self) -> int:
        return self.n_b // 2

    def ordered(self) -> np.ndarray:
        """Buffer rows oldest first."""
        start = self.next_k % self.n_b
        return np.roll(self.buf, -start, axis=0)


class LinewiseRda:
    """Rolling-buffer RDA emitting one focused row per input row once warm.

    Row ``k`` of the input produces focused pulse ``k - N_b/2``. The buffer
    FFT length is the next power of two at or above ``N_b``; the buffer is
    zero-padded up to it.
    """

    def __init__(self, params: RadarParams, n_r: int, n_b: int | None = None,
                 h_rcmc: np.ndarray | None = None):
        self.params = params
        self.n_b = buffer_length(params) if n_b is None else n_b
        self.n_fft = next_pow2(self.n_b)
        self.filters = build_filters(params, self.n_fft, n_r, h_rcmc)
        self.state = LinewiseState(self.n_b, n_r)

    @property
    def delay(self) -> int:
        return self.state.delay

    def _focus_buffer(self) -> np.ndarray:
        f = self.filters
        x = np.zeros((self.n_fft, f.n_r), dtype=np.complex128)
        x[: self.n_b] = self.state.ordered()   # 1 cached range FFTs
        x = fft(x, axis=0)                      # 2 azimuth FFT over the buffer
        x = x * f.h_r[None, :]                  # 3
        x = x * f.h_rcmc                        # 4
        x = ifft(x, axis=1)                     # 5
        x = x * f.h_a                           # 6
        return ifft(x, axis=0)[: self.n_b]      # 7

    def push(self, row, k: int | None = None) -> list[FocusedRow]:
        st = self.state
        if k is not None and k != st.next_k:
            raise PulseOrderError(st.next_k, k)
        row = np.asarray(row)
        if row.shape != (st.n_r,):
            raise ValueError(f"row length {row.shape} != ({st.n_r},)")
        st.buf[st.next_k % st.n_b] = fft(row)
        st.next_k += 1
        st.fill = min(st.fill + 1, st.n_b)
        if st.fill < st.n_b:
            return []
        img = self._focus_buffer()
        first = st.next_k - st.n_b              # pulse index of buffer row 0
        centre = st.delay - 1
        out = []
        if first == 0:
            out += [FocusedRow(j, img[j], True) for j in range(centre)]
        out.append(FocusedRow(first + centre, img[centre]))
        return out

    def flush(self) -> list[FocusedRow]:
        """Emit the trailing edge rows (partially focused) after the last pulse."""
        st = self.state
        if st.next_k == 0:
            return []
        if st.fill < st.n_b:
            # stream shorter than the buffer: focus whatever arrived
            n = st.fill
            saved = st.buf.copy()
            st.buf[:] = 0
            st.buf[:n] = saved[:n]
            st.next_k, st.fill = st.n_b, st.n_b
            img = self._focus_buffer()
            st.buf, st.next_k, st.fill = saved, n, n
            return [FocusedRow(j, img[j], True) for j in range(n)]
        img = self._focus_buffer()
        first = st.next_k - st.n_b
        return [FocusedRow(first + j, img[j], True) for j in range(st.delay, st.n_b)]


def focus_linewise(raw: Raster, params: RadarParams | None = None, n_b: int | None = None) -> tuple[Raster, np.ndarray]:
    """Run the linewise processor over a whole raster.

    Returns the AZ raster and a boolean vector flagging partially focused rows.
    """
    params = params or raw.params
    proc = LinewiseRda(params, raw.cols, n_b)
    out = np.zeros(raw.data.shape, dtype=np.complex128)
    partial = np.zeros(raw.rows, dtype=bool)
    for k in range(raw.rows):
        for fr in proc.push(raw.data[k], k):
            out[fr.k], partial[fr.k] = fr.data, fr.partial
    for fr in proc.flush():
        out[fr.k], partial[fr.k] = fr.data, fr.partial
    return raw.with_data(out, Stage.AZ), partial


def batched_filters_for(raw: Raster, params: RadarParams | None = None) -> RdaFilters:
    params = params or raw.params
    if params is None:
        raise ValueError("raster carries no radar parameters")
    return build_filters(params, raw.rows, raw.cols)
