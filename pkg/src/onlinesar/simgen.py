"""Synthetic stripmap phase history under a straight, broadside flight line.

Point targets are rendered with the exact hyperbolic range history, a hard
rect beam window and a rect-windowed LFM chirp centred on the two-way delay.
Clutter is circular complex Gaussian, generated row by row from a per-row
seed so the output does not depend on how rows are scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .radix2 import is_pow2
from .sarcore import (
    SPEED_OF_LIGHT,
    RadarParams,
    Raster,
    Stage,
    format_kv,
    parse_kv,
)


@dataclass(frozen=True)
class PointTarget:
    az_position: float        # m along track, platform is at v*k/prf at pulse k
    range_offset: float       # m beyond r0 at closest approach
    amplitude: float = 1.0
    phase: float = 0.0

    def az_index(self, params: RadarParams) -> float:
        return self.az_position / params.pulse_spacing

    def range_index(self, params: RadarParams) -> float:
        return self.range_offset / params.range_bin_spacing


@dataclass(frozen=True)
class SceneSpec:
    params: RadarParams = field(default_factory=RadarParams.desk)
    n_pulses: int = 1024
    n_range_bins: int = 1024
    targets: tuple[PointTarget, ...] = ()
    clutter_mean_power: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if not (is_pow2(self.n_pulses) and is_pow2(self.n_range_bins)):
            raise ValueError("n_pulses and n_range_bins must be powers of two")
        if self.clutter_mean_power < 0:
            raise ValueError("clutter_mean_power must be >= 0")
        self.params.check_grid(self.n_range_bins)

    # textual key:value form; targets as "target.<i>: az, range_offset, amp, phase"
    def to_text(self) -> str:
        d: dict[str, object] = dict(self.params.to_dict())
        d.update(
            n_pulses=self.n_pulses,
            n_range_bins=self.n_range_bins,
            clutter_mean_power=float(self.clutter_mean_power),
            seed=self.seed,
        )
        for i, t in enumerate(self.targets):
            d[f"target.{i}"] = ", ".join(repr(float(v)) for v in
                                         (t.az_position, t.range_offset, t.amplitude, t.phase))
        return format_kv(d)

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "SceneSpec":
        d = parse_kv(text)
        d.update(overrides or {})
        return cls.from_mapping(d)

    @classmethod
    def from_mapping(cls, d: dict[str, str]) -> "SceneSpec":
        pnames = {f.name for f in fields(RadarParams)}
        known = pnames | {"n_pulses", "n_range_bins", "clutter_mean_power", "seed"}
        unknown = [k for k in d if k not in known and not k.startswith("target.")]
        if unknown:
            raise KeyError(f"unknown scene keys: {', '.join(sorted(unknown))}")
        base = RadarParams.desk().to_dict()
        base.update({k: float(v) for k, v in d.items() if k in pnames})
        targets = []
        for key in sorted((k for k in d if k.startswith("target.")), key=lambda k: int(k.split(".")[1])):
            vals = [float(v) for v in d[key].split(",")]
            targets.append(PointTarget(*vals))
        return cls(
            params=RadarParams(**base),
            n_pulses=int(d.get("n_pulses", 1024)),
            n_range_bins=int(d.get("n_range_bins", 1024)),
            targets=tuple(targets),
            clutter_mean_power=float(d.get("clutter_mean_power", 0.0)),
            seed=int(d.get("seed", 0)),
        )


def aperture_cells(params: RadarParams, slant_range: float | None = None) -> int:
    """Number of azimuth samples spanned by the synthetic aperture."""
    r = params.r0 if slant_range is None else slant_range
    return int(round(r * params.wavelength / (params.antenna_length * params.az_spacing)))


def buffer_length(params: RadarParams) -> int:
    """Linewise history buffer N_b: look-back plus look-ahead, forced even."""
    nb = 2 * aperture_cells(params)
    return nb + (nb % 2)


def aperture_half_length(params: RadarParams, slant_range: float) -> float:
    return slant_range * params.wavelength / (2.0 * params.antenna_length)


def chirp(params: RadarParams, tau: np.ndarray) -> np.ndarray:
    """Baseband LFM pulse centred on tau = 0, zero outside ``|tau| <= T/2``."""
    inside = np.abs(tau) <= params.chirp_duration / 2
    return np.where(inside, np.exp(1j * np.pi * params.chirp_rate * tau**2), 0.0)


def chirp_replica(params: RadarParams, n_range_bins: int) -> np.ndarray:
    """The transmitted pulse sampled on the range grid, centred (circularly) on bin 0."""
    n = np.arange(n_range_bins)
    n = np.where(n < n_range_bins // 2, n, n - n_range_bins)
    return chirp(params, n / params.range_sample_rate)


def _check_target(spec: SceneSpec, t: PointTarget) -> None:
    p = spec.params
    swath = spec.n_range_bins * p.range_bin_spacing
    track = spec.n_pulses * p.pulse_spacing
    if not (0.0 <= t.range_offset < swath and 0.0 <= t.az_position < track):
        raise ValueError(
            f"target at az={t.az_position} m, range_offset={t.range_offset} m "
            f"is outside the {track:g} m x {swath:g} m scene"
        )


def render_target(spec: SceneSpec, t: PointTarget, out: np.ndarray) -> None:
    """Accumulate one target's echoes into ``out`` (complex128, n_pulses x n_range_bins)."""
    p = spec.params
    c = SPEED_OF_LIGHT
    r_close = p.r0 + t.range_offset
    half = aperture_half_length(p, r_close)
    k = np.arange(spec.n_pulses)
    along = p.platform_velocity * k / p.prf - t.az_position
    lit = np.nonzero(np.abs(along) <= half)[0]
    if lit.size == 0:
        return
    rng = np.sqrt(r_close**2 + along[lit] ** 2)
    t_near = 2.0 * p.r0 / c
    fast = t_near + np.arange(spec.n_range_bins) / p.range_sample_rate
    tau = fast[None, :] - 2.0 * rng[:, None] / c
    carrier = np.exp(-4j * np.pi * rng / p.wavelength + 1j * t.phase)
    out[lit] += t.amplitude * carrier[:, None] * chirp(p, tau)


def row_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(k)])


def clutter_rows(rows: int, cols: int, mean_power: float, seed: int) -> np.ndarray:
    out = np.empty((rows, cols), dtype=np.complex128)
    sigma = np.sqrt(mean_power / 2.0)
    for k in range(rows):
        g = row_rng(seed, k).standard_normal((2, cols))
        out[k] = sigma * (g[0] + 1j * g[1])
    return out


def synth_clutter(rows: int, cols: int, mean_power: float, seed: int = 0,
                  stage: Stage = Stage.RAW) -> Raster:
    """I.i.d. circular complex Gaussian samples; ``|z|^2`` is exponential with the given mean."""
    if not mean_power > 0:
        raise ValueError("mean_power must be > 0")
    return Raster(clutter_rows(rows, cols, mean_power, seed), stage)


def synth_raw_array(spec: SceneSpec) -> np.ndarray:
    out = np.zeros((spec.n_pulses, spec.n_range_bins), dtype=np.complex128)
    for t in spec.targets:
        _check_target(spec, t)
        render_target(spec, t, out)
    if spec.clutter_mean_power > 0:
        out += clutter_rows(spec.n_pulses, spec.n_range_bins, spec.clutter_mean_power, spec.seed)
    return out


def synth_raw(spec: SceneSpec) -> Raster:
    return Raster(synth_raw_array(spec), Stage.RAW, spec.params)


def shifted(spec: SceneSpec, pulses: int) -> SceneSpec:
    """Same scene with every target moved ``pulses`` samples along track."""
    dx = pulses * spec.params.pulse_spacing
    return replace(spec, targets=tuple(replace(t, az_position=t.az_position + dx) for t in spec.targets))


def random_targets(spec: SceneSpec, n: int, seed: int, margin_pulses: int = 0,
                   margin_bins: int = 0, on_grid: bool = True) -> tuple[PointTarget, ...]:
    """``n`` unit targets at random positions, optionally snapped to sample centres."""
    rng = np.random.default_rng(seed)
    p = spec.params
    ks = rng.uniform(margin_pulses, spec.n_pulses - margin_pulses, n)
    rs = rng.uniform(margin_bins, spec.n_range_bins - margin_bins, n)
    if on_grid:
        ks, rs = np.floor(ks), np.floor(rs)
    return tuple(
        PointTarget(float(k * p.pulse_spacing), float(r * p.range_bin_spacing), 1.0,
                    float(rng.uniform(-np.pi, np.pi)))
        for k, r in zip(ks, rs)
    )
