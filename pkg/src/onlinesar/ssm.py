"""Diagonal state-space (S4D) layers and the tiny online focusing network.

Every S4D layer can be evaluated two ways:

* convolution mode over a whole strip (used for training), via a kernel
  ``k[l] = 2 Re(sum_n c_n lam_bar_n^l b_bar_n)`` and a zero-padded FFT of
  length ``2L`` cropped back to ``L``;
* recurrent mode one sample at a time (used online), with a fixed-size
  complex state per channel.

Both start from a zero state and give the same causal output.

The network maps per-range-bin samples ``(re, im, p_r)`` to ``(re, im)``::

    fc1 -> ssm2 -> act -> fc3 -> ssm4 -> act -> fc5 -> ssm6 -> act
        -> fc7 -> ssm8 -> act -> fc9 -> fc10
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .rda import FocusedRow, range_compress_row, range_filter
from .sarcore import (
    NormalizationSpec,
    PulseOrderError,
    RadarParams,
    SarFormatError,
    MagicError,
    TruncatedPayloadError,
    format_kv,
    parse_kv,
)

CHAIN = ("fc1", "ssm2", "act", "fc3", "ssm4", "act", "fc5", "ssm6", "act",
         "fc7", "ssm8", "act", "fc9", "fc10")
FC_NAMES = ("fc1", "fc3", "fc5", "fc7", "fc9", "fc10")
SSM_NAMES = ("ssm2", "ssm4", "ssm6", "ssm8")
OSPM_MAGIC = b"OSPM"


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation after layer {layer}")
        self.layer = layer


# --------------------------------------------------------------------------
# S4D layer
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class S4DLayer:
    """One diagonal SSM layer with ``channels`` independent channels.

    The continuous eigenvalues are stored as ``-exp(log_a_re) + i a_im`` so
    the real part stays negative for any parameter value.
    """

    log_a_re: np.ndarray      # (H, N)
    a_im: np.ndarray          # (H, N)
    b: np.ndarray             # (H, N) complex
    c: np.ndarray             # (H, N) complex
    d: np.ndarray             # (H,)
    log_dt: np.ndarray        # (H,)
    discretization: str = "zoh"

    @property
    def channels(self) -> int:
        return self.d.shape[0]

    @property
    def state_dim(self) -> int:
        return self.b.shape[1]

    @property
    def lam(self) -> np.ndarray:
        return -np.exp(self.log_a_re) + 1j * self.a_im

    @property
    def dt(self) -> np.ndarray:
        return np.exp(self.log_dt)

    @cached_property
    def discrete(self) -> tuple[np.ndarray, np.ndarray]:
        return discretize(self)

    def n_params(self) -> int:
        h, n = self.b.shape
        return 6 * h * n + 2 * h

    def kernel_spectrum(self, length: int) -> np.ndarray:
        """``rfft`` of the kernel at the 2L padding length, cached per layer."""
        cache = self.__dict__.setdefault("_kernel_spectra", {})
        if length not in cache:
            cache[length] = np.fft.rfft(s4d_kernel(self, length), 2 * length)
        return cache[length]


def s4d_lin_init(state_dim: int, channels: int, seed: int,
                 discretization: str = "zoh") -> S4DLayer:
    """S4D-Lin initialisation: ``lam_n = -1/2 + i pi n``."""
    if state_dim < 1 or channels < 1:
        raise ValueError("state_dim and channels must be >= 1")
    rng = np.random.default_rng(seed)
    n = np.arange(state_dim)
    log_a_re = np.full((channels, state_dim), np.log(0.5))
    a_im = np.tile(np.pi * n, (channels, 1)).astype(np.float64)

    def cgauss():
        g = rng.standard_normal((2, channels, state_dim))
        return (g[0] + 1j * g[1]) / np.sqrt(2.0)

    b, c = cgauss(), cgauss()
    log_dt = rng.uniform(np.log(1e-3), np.log(1e-1), channels)
    return S4DLayer(log_a_re, a_im, b, c, np.ones(channels), log_dt, discretization)


def discretize(layer: S4DLayer) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(lam_bar, b_bar)``; zero-order hold unless the layer says bilinear."""
    lam = layer.lam
    dt = layer.dt[:, None]
    if layer.discretization == "zoh":
        lam_bar = np.exp(lam * dt)
        b_bar = (lam_bar - 1.0) / lam * layer.b
    elif layer.discretization == "bilinear":
        denom = 1.0 - lam * dt / 2
        lam_bar = (1.0 + lam * dt / 2) / denom
        b_bar = dt / denom * layer.b
    else:
        raise ValueError(f"unknown discretization {layer.discretization!r}")
    return lam_bar, b_bar


def s4d_kernel(layer: S4DLayer, length: int) -> np.ndarray:
    """Real convolution kernel, shape ``(H, length)``."""
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    lam_bar, b_bar = layer.discrete
    powers = np.exp(np.log(lam_bar)[..., None] * np.arange(length))     # (H, N, L)
    return 2.0 * np.einsum("hn,hnl->hl", layer.c * b_bar, powers).real


def causal_conv(u: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Linear causal convolution along the last axis through a 2L-point FFT."""
    n = u.shape[-1]
    m = 2 * n
    y = np.fft.irfft(np.fft.rfft(u, m) * np.fft.rfft(k, m), m)
    return y[..., :n]


def s4d_forward_conv(layer: S4DLayer, u: np.ndarray) -> np.ndarray:
    """Convolution-mode evaluation; ``u`` has shape ``(..., L, H)``."""
    u = np.asarray(u, dtype=np.float64)
    ut = np.moveaxis(u, -1, -2)                      # (..., H, L)
    n = ut.shape[-1]
    conv = np.fft.irfft(np.fft.rfft(ut, 2 * n) * layer.kernel_spectrum(n), 2 * n)[..., :n]
    y = conv + layer.d[:, None] * ut
    return np.moveaxis(y, -2, -1)


def s4d_zero_state(layer: S4DLayer, batch_shape=()) -> np.ndarray:
    return np.zeros((*batch_shape, layer.channels, layer.state_dim), dtype=np.complex128)


def s4d_step(layer: S4DLayer, state: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One recurrent step. ``state`` is ``(..., H, N)``, ``u`` is ``(..., H)``."""
    lam_bar, b_bar = layer.discrete
    if state.shape[-2:] != lam_bar.shape:
        raise ValueError(f"state shape {state.shape} does not match layer {lam_bar.shape}")
    state = lam_bar * state + b_bar * u[..., None]
    y = 2.0 * np.einsum("hn,...hn->...h", layer.c, state).real + layer.d * u
    return state, y


# --------------------------------------------------------------------------
# the tiny network
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Layer sizes. ``widths[i]`` is the channel count of the i-th S4D layer."""

    widths: tuple[int, ...] = (3, 2, 2, 2)
    state_dim: int = 8
    in_dim: int = 3
    out_dim: int = 2
    leak: float = 0.01
    discretization: str = "zoh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != len(SSM_NAMES) or min(self.widths) < 1:
            raise ValueError(f"need {len(SSM_NAMES)} positive S4D widths, got {self.widths}")
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if self.discretization not in ("zoh", "bilinear"):
            raise ValueError(f"unknown discretization {self.discretization!r}")

    def fc_shapes(self) -> dict[str, tuple[int, int]]:
        """``(out, in)`` of every dense layer."""
        w = self.widths
        return {"fc1": (w[0], self.in_dim), "fc3": (w[1], w[0]), "fc5": (w[2], w[1]),
                "fc7": (w[3], w[2]), "fc9": (w[3], w[3]), "fc10": (self.out_dim, w[3])}

    def to_dict(self) -> dict[str, object]:
        return {"widths": ",".join(map(str, self.widths)), "state_dim": self.state_dim,
                "in_dim": self.in_dim, "out_dim": self.out_dim, "leak": self.leak,
                "discretization": self.discretization}

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(tuple(int(v) for v in str(d["widths"]).split(",")), int(d["state_dim"]),
                   int(d["in_dim"]), int(d["out_dim"]), float(d["leak"]), str(d["discretization"]))


STUDENT = ModelConfig()
TEACHER = ModelConfig(widths=(4, 4, 4, 4), state_dim=64)


@dataclass(frozen=True, eq=False)
class Dense:
    w: np.ndarray    # (out, in)
    b: np.ndarray    # (out,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.T + self.b


@dataclass(frozen=True, eq=False)
class TinyModel:
    config: ModelConfig
    fcs: dict[str, Dense]
    ssms: dict[str, S4DLayer]

    # -- construction -------------------------------------------------------
    @classmethod
    def init(cls, config: ModelConfig = STUDENT, seed: int = 42) -> "TinyModel":
        rng = np.random.default_rng(seed)
        fcs = {}
        for name, (o, i) in config.fc_shapes().items():
            bound = 1.0 / np.sqrt(i)
            fcs[name] = Dense(rng.uniform(-bound, bound, (o, i)), np.zeros(o))
        ssm_seeds = rng.integers(0, 2**31, len(SSM_NAMES))
        ssms = {name: s4d_lin_init(config.state_dim, h, int(s), config.discretization)
                for name, h, s in zip(SSM_NAMES, config.widths, ssm_seeds)}
        return cls(config, fcs, ssms)

    # -- parameter vector ---------------------------------------------------
    def param_vector(self) -> np.ndarray:
        """All trainable values flattened in chain order.

        Dense: ``w`` (row-major) then ``b``. S4D: ``log_a_re, a_im, b.re,
        b.im, c.re, c.im, d, log_dt``, each row-major over ``(H, N)``.
        """
        parts = []
        for name in CHAIN:
            if name in self.fcs:
                fc = self.fcs[name]
                parts += [fc.w.ravel(), fc.b.ravel()]
            elif name in self.ssms:
                s = self.ssms[name]
                parts += [s.log_a_re.ravel(), s.a_im.ravel(), s.b.real.ravel(), s.b.imag.ravel(),
                          s.c.real.ravel(), s.c.imag.ravel(), s.d.ravel(), s.log_dt.ravel()]
        return np.concatenate(parts).astype(np.float64)

    def param_slices(self) -> list[tuple[int, str, int, int]]:
        """``(chain index, layer name, start, stop)`` of each layer in the parameter vector."""
        out, pos = [], 0
        for i, name in enumerate(CHAIN):
            if name in self.fcs:
                size = self.fcs[name].w.size + self.fcs[name].b.size
            elif name in self.ssms:
                size = self.ssms[name].n_params()
            else:
                continue
            out.append((i, name, pos, pos + size))
            pos += size
        return out

    def layer_from_vector(self, name: str, vec: np.ndarray):
        """Rebuild one layer of the same shape from its slice of the parameter vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if name in self.fcs:
            o, i = self.fcs[name].w.shape
            return Dense(vec[:o * i].reshape(o, i), vec[o * i:])
        h, n = self.ssms[name].channels, self.config.state_dim
        p = vec[:6 * h * n].reshape(6, h, n)
        return S4DLayer(p[0], p[1], p[2] + 1j * p[3], p[4] + 1j * p[5],
                        vec[6 * h * n:6 * h * n + h], vec[6 * h * n + h:], self.config.discretization)

    def with_params(self, theta: np.ndarray) -> "TinyModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params():
            raise ValueError(f"expected {self.n_params()} parameters, got {theta.size}")
        fcs, ssms = {}, {}
        for _, name, start, stop in self.param_slices():
            layer = self.layer_from_vector(name, theta[start:stop])
            (fcs if name in self.fcs else ssms)[name] = layer
        return TinyModel(self.config, fcs, ssms)

    def n_params(self) -> int:
        return (sum(fc.w.size + fc.b.size for fc in self.fcs.values())
                + sum(s.n_params() for s in self.ssms.values()))

    # -- evaluation ---------------------------------------------------------
    def _act(self, x):
        return np.where(x >= 0, x, self.config.leak * x)

    def run_chain(self, y: np.ndarray, start: int = 0, override: dict | None = None,
                  trace: list | None = None, check: bool = True) -> np.ndarray:
        """Evaluate ``CHAIN[start:]`` in convolution mode on the input of layer ``start``.

        ``override`` maps layer names to replacement layers; ``trace`` collects
        the input of every evaluated layer.
        """
        override = override or {}
        for name in CHAIN[start:]:
            if trace is not None:
                trace.append(y)
            if name == "act":
                y = self._act(y)
            elif name in self.fcs:
                y = override.get(name, self.fcs[name])(y)
            else:
                y = s4d_forward_conv(override.get(name, self.ssms[name]), y)
            if check and not np.isfinite(y).all():
                raise NonFiniteActivationError(name)
        return y

    def forward_strip(self, x: np.ndarray, check: bool = True) -> np.ndarray:
        """Convolution-mode evaluation over strips; ``x`` is ``(..., L, in_dim)``."""
        return self.run_chain(np.asarray(x, dtype=np.float64), check=check)

    def zero_state(self, batch_shape=()) -> list[np.ndarray]:
        return [s4d_zero_state(self.ssms[name], batch_shape) for name in SSM_NAMES]

    def step(self, states: list[np.ndarray], x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Recurrent evaluation of one sample per batch element; ``x`` is ``(..., in_dim)``."""
        if len(states) != len(SSM_NAMES):
            raise ValueError(f"expected {len(SSM_NAMES)} layer states, got {len(states)}")
        y = np.asarray(x, dtype=np.float64)
        new_states = []
        i = 0
        for name in CHAIN:
            if name == "act":
                y = self._act(y)
            elif name in self.fcs:
                y = self.fcs[name](y)
            else:
                s, y = s4d_step(self.ssms[name], states[i], y)
                new_states.append(s)
                i += 1
        return new_states, y


def tiny_forward_strip(model: TinyModel, strip: np.ndarray) -> np.ndarray:
    return model.forward_strip(strip)


def tiny_step(model: TinyModel, state: list[np.ndarray], z, p_r) -> tuple[list[np.ndarray], np.ndarray]:
    """Single-sample update for one or many range bins.

    ``z`` is complex (scalar or ``(n,)``) in normalised units; returns the new
    state and the complex output.
    """
    z = np.asarray(z)
    x = np.stack([z.real, z.imag, np.broadcast_to(p_r, z.shape)], axis=-1)
    state, y = model.step(state, x)
    return state, y[..., 0] + 1j * y[..., 1]


def strip_inputs(z: np.ndarray, p_r) -> np.ndarray:
    """Stack complex strips ``(..., L)`` and range positions into ``(..., L, 3)``."""
    z = np.asarray(z)
    p = np.broadcast_to(np.asarray(p_r, dtype=np.float64)[..., None], z.shape)
    return np.stack([z.real, z.imag, p], axis=-1)


def predict_strips(model: TinyModel, z: np.ndarray, p_r) -> np.ndarray:
    """Complex strips in, complex strips out (normalised units)."""
    y = model.forward_strip(strip_inputs(z, p_r))
    return y[..., 0] + 1j * y[..., 1]


# --------------------------------------------------------------------------
# per-layer FLOP accounting
# --------------------------------------------------------------------------

def layer_flops(config: ModelConfig = STUDENT) -> list[tuple[str, int]]:
    """Real FLOPs per range cell per pulse for each layer in the chain.

    Dense ``in -> out`` with bias: ``2 in out``. S4D per channel and mode:
    complex-complex multiply (6) + complex-real multiply (2) + complex add
    (2) for the state, ``Re(c s)`` (3) and the mode sum; plus the doubling
    and the ``d u`` skip. LeakyReLU: one FLOP per element.
    """
    n = config.state_dim
    shapes = config.fc_shapes()
    width = dict(zip(SSM_NAMES, config.widths))
    out = []
    h = 0
    for name in CHAIN:
        if name == "act":
            out.append(("act", h))
        elif name in shapes:
            o, i = shapes[name]
            out.append((name, 2 * o * i))
        else:
            h = width[name]
            per_channel = 10 * n + 3 * n + (n - 1) + 1 + 2
            out.append((name, h * per_channel))
    return out


# --------------------------------------------------------------------------
# streaming
# --------------------------------------------------------------------------

@dataclass
class StateBank:
    """Per-range-bin hidden state of every S4D layer."""

    n_r: int
    states: list[np.ndarray]
    k: int = 0

    @classmethod
    def zeros(cls, model: TinyModel, n_r: int) -> "StateBank":
        return cls(n_r, model.zero_state((n_r,)))

    @property
    def nbytes(self) -> int:
        return sum(s.nbytes for s in self.states)


def range_positions(n_r: int) -> np.ndarray:
    if n_r == 1:
        return np.zeros(1)
    return np.arange(n_r) / (n_r - 1)


class OnlineProcessor:
    """Range-compress each pulse, then one recurrent model step per range bin.

    Emits focused row ``k`` as soon as pulse ``k`` has been pushed; nothing
    in the learned stage grows with the number of pulses.
    """

    def __init__(self, model: TinyModel, params: RadarParams, n_r: int,
                 norm: NormalizationSpec = NormalizationSpec(), use_range_feature: bool = True,
                 range_threads: int = 1):
        if range_threads < 1:
            raise ValueError("range_threads must be >= 1")
        self.model = model
        self.params = params
        self.norm = norm
        self.h_r = range_filter(params, n_r)
        self.bank = StateBank.zeros(model, n_r)
        p = range_positions(n_r) if use_range_feature else np.zeros(n_r)
        self._x = np.zeros((n_r, model.config.in_dim))
        self._x[:, 2] = p        # cached range feature
        self._pool = None
        self._chunks = [slice(0, n_r)]
        if range_threads > 1:
            edges = np.linspace(0, n_r, range_threads + 1).astype(int)
            self._chunks = [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]
            self._pool = ThreadPoolExecutor(len(self._chunks))

    @property
    def n_r(self) -> int:
        return self.bank.n_r

    def _step_bins(self, sl: slice):
        return self.model.step([s[sl] for s in self.bank.states], self._x[sl])

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def push(self, row, k: int | None = None) -> FocusedRow:
        bank = self.bank
        if k is not None and k != bank.k:
            raise PulseOrderError(bank.k, k)
        row = np.asarray(row)
        if row.shape != (bank.n_r,):
            raise ValueError(f"row has {row.shape} samples, state bank has {bank.n_r} range bins")
        rc = range_compress_row(row, self.h_r) / self.norm.scale
        self._x[:, 0] = rc.real
        self._x[:, 1] = rc.imag
        if self._pool is None:
            bank.states, y = self.model.step(bank.states, self._x)
        else:
            # range bins never interact, so disjoint slices step independently
            parts = list(self._pool.map(self._step_bins, self._chunks))
            bank.states = [np.concatenate([p[0][i] for p in parts]) for i in range(len(bank.states))]
            y = np.concatenate([p[1] for p in parts])
        out = FocusedRow(bank.k, (y[:, 0] + 1j * y[:, 1]) * self.norm.scale)
        bank.k += 1
        return out


def osp_focus_stream(model: TinyModel, params: RadarParams, rows: Iterable,
                     n_r: int | None = None, norm: NormalizationSpec = NormalizationSpec()) -> Iterator[FocusedRow]:
    """Focus an iterable of raw range lines, yielding one focused row per pulse."""
    proc = None
    for row in rows:
        if proc is None:
            proc = OnlineProcessor(model, params, n_r or len(row), norm)
        yield proc.push(row)


def osp_focus_strip(model: TinyModel, rc: np.ndarray, norm: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Convolution-mode focusing of a whole range-compressed raster (``N_a x N_r``)."""
    z = np.asarray(rc, dtype=np.complex128).T / norm.scale      # azimuth sequences per bin
    y = predict_strips(model, z, range_positions(z.shape[0]))
    return y.T * norm.scale


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_model(model: TinyModel, path) -> None:
    header = dict(model.config.to_dict())
    header["n_params"] = model.n_params()
    header["layer_order"] = " ".join(CHAIN)
    head = format_kv(header).encode("utf-8")
    blob = model.param_vector().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(OSPM_MAGIC + struct.pack("<I", len(head)) + head + blob)


def load_model(path) -> TinyModel:
    blob = Path(path).read_bytes()
    if blob[:4] != OSPM_MAGIC:
        raise MagicError(f"bad checkpoint magic {blob[:4]!r}")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    try:
        h = parse_kv(blob[8:8 + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(h)
        n = int(h["n_params"])
    except (KeyError, ValueError) as exc:
        raise SarFormatError(f"bad checkpoint header: {exc}") from exc
    data = blob[8 + hlen:]
    if len(data) != 4 * n:
        raise TruncatedPayloadError(f"checkpoint holds {len(data) // 4} values, header says {n}")
    theta = np.frombuffer(data, dtype="<f4").astype(np.float64)
    return TinyModel.init(cfg, 0).with_params(theta)
