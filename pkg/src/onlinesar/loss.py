"""Azimuth-focusing loss, strip informativeness weights, distillation terms and metrics.

Strips are complex arrays in normalised units with azimuth along the last
axis; any leading axes are treated as a batch and every term returns one
value per strip. The complex term (and the distillation MSE) is computed in
normalised units; everything else works on physical amplitudes, i.e. after
multiplying back by the normalisation scale.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .sarcore import format_kv, parse_kv

EPS = 1e-3
PSD_BAND = (0.15, 0.50)
DEFAULT_SCALE = 2000.0
TERMS = ("complex", "logamp", "ampcorr", "tail", "grad", "psd", "fw", "edge")


@dataclass(frozen=True)
class LossWeights:
    w_c: float = 0.35
    w_log: float = 0.08
    w_ac: float = 0.08
    w_tail: float = 0.03
    w_grad: float = 0.02
    w_psd: float = 0.01
    w_fw: float = 0.0
    w_edge: float = 0.005
    eps: float = EPS
    psd_band: tuple[float, float] = PSD_BAND

    def __post_init__(self):
        if min(self.as_vector()) < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        lo, hi = self.psd_band
        if not 0 <= lo < hi <= 0.5:
            raise ValueError(f"psd_band must satisfy 0 <= f_min < f_max <= 0.5, got {self.psd_band}")

    @classmethod
    def teacher(cls) -> "LossWeights":
        return cls(0.04, 0.18, 0.18, 0.12, 0.24, 0.04, 0.04, 0.08)

    @classmethod
    def student(cls) -> "LossWeights":
        return cls()

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(*([0.0] * len(TERMS)))

    def as_vector(self) -> np.ndarray:
        return np.array([self.w_c, self.w_log, self.w_ac, self.w_tail,
                         self.w_grad, self.w_psd, self.w_fw, self.w_edge])

    def to_text(self) -> str:
        d = asdict(self)
        d["psd_band"] = f"{self.psd_band[0]!r}, {self.psd_band[1]!r}"
        return format_kv(d)

    @classmethod
    def from_text(cls, text: str) -> "LossWeights":
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def from_mapping(cls, d) -> "LossWeights":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown loss keys: {', '.join(sorted(unknown))}")
        kw = {k: float(v) for k, v in d.items() if k != "psd_band"}
        if "psd_band" in d:
            band = d["psd_band"]
            kw["psd_band"] = tuple(float(v) for v in (band.split(",") if isinstance(band, str) else band))
        return cls(**kw)


@dataclass(frozen=True)
class KdWeights:
    lambda_kd: float = 0.05
    alpha_c: float = 0.25
    alpha_l: float = 0.0
    alpha_rho: float = 0.08
    alpha_phi: float = 0.05
    eps_phi: float = 1e-6
    p_phi: float = 1.0

    def __post_init__(self):
        if min(self.lambda_kd, self.alpha_c, self.alpha_l, self.alpha_rho, self.alpha_phi) < 0:
            raise ValueError("distillation weights must be >= 0")
        if not self.eps_phi > 0:
            raise ValueError("eps_phi must be > 0")

    @classmethod
    def from_mapping(cls, d) -> "KdWeights":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown distillation keys: {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class StripPair:
    pred: np.ndarray
    target: np.ndarray
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        pred, target = np.asarray(self.pred), np.asarray(self.target)
        if pred.shape != target.shape:
            raise ValueError(f"strip shapes differ: {pred.shape} vs {target.shape}")
        if pred.ndim == 0 or pred.shape[-1] < 3:
            raise ValueError("strips need at least 3 samples")
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "target", target)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def amplitude(z, scale: float = DEFAULT_SCALE) -> np.ndarray:
    return np.abs(z) * scale


def log_amplitude(z, scale: float = DEFAULT_SCALE, eps: float = EPS) -> np.ndarray:
    return np.log(amplitude(z, scale) + eps)


def psd_band_mask(n: int, band=PSD_BAND) -> np.ndarray:
    f = np.fft.rfftfreq(n)
    mask = (f >= band[0]) & (f <= band[1])
    if not mask.any():
        raise ValueError(f"no real-FFT bins of a length-{n} strip fall in band {band}")
    return mask


def periodogram(ell: np.ndarray) -> np.ndarray:
    """``|rfft(ell - mean)|^2`` along the last axis."""
    c = ell - ell.mean(axis=-1, keepdims=True)
    return np.abs(np.fft.rfft(c, axis=-1)) ** 2


def nearest_rank_quantile(x: np.ndarray, p: float) -> np.ndarray:
    """Smallest sample with at least a fraction ``p`` of the samples at or below it."""
    n = x.shape[-1]
    idx = max(math.ceil(p * n), 1) - 1
    return np.sort(x, axis=-1)[..., idx]


def autocorrelation(ell: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Normalised linear autocorrelation (lags ``0..L-1``) of the centred strip."""
    n = ell.shape[-1]
    c = ell - ell.mean(axis=-1, keepdims=True)
    spec = np.fft.fft(c, 2 * n, axis=-1)
    r = np.fft.ifft(np.abs(spec) ** 2, axis=-1).real[..., :n]
    return r / (r[..., :1] + eps)


def focus_width(ell: np.ndarray, eps: float = EPS) -> np.ndarray:
    """First lag where the autocorrelation drops below 0.5; ``L`` if it never does."""
    below = autocorrelation(ell, eps) < 0.5
    n = ell.shape[-1]
    return np.where(below.any(axis=-1), below.argmax(axis=-1), n)


# --------------------------------------------------------------------------
# the eight focusing terms
# --------------------------------------------------------------------------

def l_complex(pred, target) -> np.ndarray:
    return np.abs(pred - target).mean(axis=-1)


def l_logamp(pred, target, scale=DEFAULT_SCALE, eps=EPS) -> np.ndarray:
    return np.abs(log_amplitude(pred, scale, eps) - log_amplitude(target, scale, eps)).mean(axis=-1)


def l_ampcorr(pred, target, scale=DEFAULT_SCALE, eps=EPS) -> np.ndarray:
    a_hat, a = amplitude(pred, scale), amplitude(target, scale)
    da = a_hat - a_hat.mean(axis=-1, keepdims=True)
    db = a - a.mean(axis=-1, keepdims=True)
    num = (da * db).sum(axis=-1)
    den = np.sqrt((da * da).sum(axis=-1) * (db * db).sum(axis=-1)) + eps
    return 1.0 - np.clip(num / den, -1.0, 1.0)


def l_tail(pred, target, scale=DEFAULT_SCALE, eps=EPS) -> np.ndarray:
    a_hat, a = amplitude(pred, scale), amplitude(target, scale)
    out = 0.0
    for p, w in ((0.95, 1.0), (0.99, 0.5)):
        out = out + w * np.abs(np.log((nearest_rank_quantile(a_hat, p) + eps)
                                      / (nearest_rank_quantile(a, p) + eps)))
    return out


def l_grad(pred, target, scale=DEFAULT_SCALE, eps=EPS) -> np.ndarray:
    d = np.diff(log_amplitude(pred, scale, eps), axis=-1) - np.diff(log_amplitude(target, scale, eps), axis=-1)
    return np.abs(d).mean(axis=-1)


def l_psd(pred, target, scale=DEFAULT_SCALE, eps=EPS, band=PSD_BAND) -> np.ndarray:
    mask = psd_band_mask(np.shape(pred)[-1], band)

    def normed(z):
        p = periodogram(log_amplitude(z, scale, eps))[..., mask]
        return p / (p.sum(axis=-1, keepdims=True) + eps)

    return np.abs(normed(pred) - normed(target)).mean(axis=-1)


def l_focuswidth(pred, target, scale=DEFAULT_SCALE, eps=EPS) -> np.ndarray:
    fw_hat = focus_width(log_amplitude(pred, scale, eps), eps)
    fw = focus_width(log_amplitude(target, scale, eps), eps)
    return np.abs(fw_hat - fw) / (fw + eps)


def l_edge(pred, target, scale=DEFAULT_SCALE, eps=EPS) -> np.ndarray:
    d = (np.diff(log_amplitude(pred, scale, eps), 2, axis=-1)
         - np.diff(log_amplitude(target, scale, eps), 2, axis=-1))
    return np.abs(d).mean(axis=-1)


def loss_terms(pred, target, w: LossWeights = LossWeights(), scale=DEFAULT_SCALE,
               skip=()) -> dict[str, np.ndarray]:
    """Every focusing term per strip; names in ``skip`` are reported as zero without being computed."""
    pred, target = np.asarray(pred), np.asarray(target)
    e = w.eps
    fns = {
        "complex": lambda: l_complex(pred, target),
        "logamp": lambda: l_logamp(pred, target, scale, e),
        "ampcorr": lambda: l_ampcorr(pred, target, scale, e),
        "tail": lambda: l_tail(pred, target, scale, e),
        "grad": lambda: l_grad(pred, target, scale, e),
        "psd": lambda: l_psd(pred, target, scale, e, w.psd_band),
        "fw": lambda: l_focuswidth(pred, target, scale, e),
        "edge": lambda: l_edge(pred, target, scale, e),
    }
    zero = np.zeros(pred.shape[:-1])
    return {name: (zero if name in skip else fns[name]()) for name in TERMS}


def af_loss(pred, target, w: LossWeights = LossWeights(), scale=DEFAULT_SCALE,
            skip=()) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Weighted focusing loss per strip and its per-term breakdown.

    Terms whose weight is zero are skipped (reported as 0) to save work.
    """
    skip = set(skip) | {n for n, v in zip(TERMS, w.as_vector()) if v == 0}
    terms = loss_terms(pred, target, w, scale, skip)
    total = sum(wi * terms[n] for n, wi in zip(TERMS, w.as_vector()))
    return np.asarray(total, dtype=np.float64), terms


# --------------------------------------------------------------------------
# informativeness weighting
# --------------------------------------------------------------------------

def informativeness(target, scale=DEFAULT_SCALE, eps=EPS, band=PSD_BAND) -> np.ndarray:
    """``I = G + H/2``: mean absolute log-amplitude step plus half the in-band PSD mean."""
    ell = log_amplitude(np.asarray(target), scale, eps)
    g = np.abs(np.diff(ell, axis=-1)).mean(axis=-1)
    h = periodogram(ell)[..., psd_band_mask(ell.shape[-1], band)].mean(axis=-1)
    return g + 0.5 * h


def informativeness_weights(targets, scale=DEFAULT_SCALE, eps=EPS, band=PSD_BAND) -> np.ndarray:
    """Per-strip weights in ``[0.75, 1.25]`` from min-max normalised informativeness."""
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None]
    info = informativeness(targets, scale, eps, band)
    eta = (info - info.min()) / (info.max() - info.min() + eps)
    return 0.75 + 0.5 * eta


def batch_loss(pred, target, w: LossWeights = LossWeights(), scale=DEFAULT_SCALE,
               weights: np.ndarray | None = None, skip=()) -> tuple[float, dict[str, float]]:
    """Informativeness-weighted mean over a batch of strips ``(B, L)``."""
    per_strip, terms = af_loss(pred, target, w, scale, skip)
    if weights is None:
        weights = informativeness_weights(target, scale, w.eps, w.psd_band)
    total = float(np.mean(weights * per_strip))
    return total, {n: float(np.mean(v)) for n, v in terms.items()}


# --------------------------------------------------------------------------
# distillation
# --------------------------------------------------------------------------

def kd_complex_mse(student, teacher) -> np.ndarray:
    return (np.abs(student - teacher) ** 2).mean(axis=-1)


def kd_phase(student, teacher, scale=DEFAULT_SCALE, eps_phi=1e-6, p_phi=1.0) -> np.ndarray:
    """Teacher-amplitude weighted distance between unit phasors."""
    zs, zt = np.asarray(student) * scale, np.asarray(teacher) * scale
    vs = zs / (np.abs(zs) + eps_phi)
    vt = zt / (np.abs(zt) + eps_phi)
    at = np.abs(zt) ** p_phi
    m = at / (at.mean(axis=-1, keepdims=True) + eps_phi)
    return (m * np.abs(vs - vt) ** 2).sum(axis=-1) / (m.sum(axis=-1) + eps_phi)


def kd_terms(student, teacher, kw: KdWeights = KdWeights(), scale=DEFAULT_SCALE, eps=EPS) -> dict[str, np.ndarray]:
    student, teacher = np.asarray(student), np.asarray(teacher)
    return {
        "kd_complex": kd_complex_mse(student, teacher),
        "kd_logamp": l_logamp(student, teacher, scale, eps),
        "kd_ampcorr": l_ampcorr(student, teacher, scale, eps),
        "kd_phase": kd_phase(student, teacher, scale, kw.eps_phi, kw.p_phi),
    }


def kd_loss(student, teacher, kw: KdWeights = KdWeights(), scale=DEFAULT_SCALE, eps=EPS) -> np.ndarray:
    t = kd_terms(student, teacher, kw, scale, eps)
    return (kw.alpha_c * t["kd_complex"] + kw.alpha_l * t["kd_logamp"]
            + kw.alpha_rho * t["kd_ampcorr"] + kw.alpha_phi * t["kd_phase"])


def student_loss(pred, target, teacher_pred, w: LossWeights = LossWeights(),
                 kw: KdWeights = KdWeights(), scale=DEFAULT_SCALE) -> np.ndarray:
    """Focusing loss against the target plus ``lambda_kd`` times the distillation loss.

    The teacher prediction is a fixed array here, so nothing flows back into it.
    """
    gt, _ = af_loss(pred, target, w, scale)
    if kw.lambda_kd == 0:
        return gt
    return gt + kw.lambda_kd * kd_loss(pred, np.asarray(teacher_pred), kw, scale, w.eps)


# --------------------------------------------------------------------------
# evaluation metrics
# --------------------------------------------------------------------------

METRIC_NAMES = ("rmse", "amp_corr", "complex_coh", "phase_coh", "phase_mae_deg",
                "phase_rmse_deg", "psnr", "enl_ratio")


def _enl(mag: np.ndarray) -> float:
    var = mag.var()
    return float(mag.mean() ** 2 / var) if var > 0 else math.inf


def metrics(pred, target, support_eps: float = 1e-12) -> dict[str, float]:
    """Image-quality metrics between two complex rasters of equal shape."""
    p = np.asarray(pred, dtype=np.complex128).ravel()
    t = np.asarray(target, dtype=np.complex128).ravel()
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(target)}")
    ap, at = np.abs(p), np.abs(t)
    rmse = float(np.sqrt(np.mean(np.abs(p - t) ** 2)))

    dp, dt = ap - ap.mean(), at - at.mean()
    den = np.sqrt((dp @ dp) * (dt @ dt))
    amp_corr = float((dp @ dt) / den) if den > 0 else 0.0

    den = np.sqrt(np.sum(ap**2) * np.sum(at**2))
    complex_coh = float(np.abs(np.vdot(t, p)) / den) if den > 0 else 0.0

    sup = (ap > support_eps) & (at > support_eps)
    if sup.any():
        dphi = np.angle(p[sup] * np.conj(t[sup]))
        phase_coh = float(np.abs(np.mean(np.exp(1j * dphi))))
        phase_mae = float(np.degrees(np.mean(np.abs(dphi))))
        phase_rmse = float(np.degrees(np.sqrt(np.mean(dphi**2))))
    else:
        phase_coh, phase_mae, phase_rmse = 0.0, math.nan, math.nan

    mag_err = np.sqrt(np.mean((ap - at) ** 2))
    psnr = float(20 * np.log10(at.max() / mag_err)) if mag_err > 0 else math.inf

    enl_t = _enl(at)
    enl_ratio = _enl(ap) / enl_t if np.isfinite(enl_t) and enl_t > 0 else math.nan
    return dict(rmse=rmse, amp_corr=amp_corr, complex_coh=complex_coh, phase_coh=phase_coh,
                phase_mae_deg=phase_mae, phase_rmse_deg=phase_rmse, psnr=psnr, enl_ratio=enl_ratio)


def dense_rank(values, descending: bool = False) -> np.ndarray:
    """1-based dense ranks; ties share a rank and the next value gets the next integer."""
    v = np.asarray(values, dtype=np.float64)
    uniq = np.unique(-v if descending else v)
    return np.searchsorted(uniq, -v if descending else v) + 1


def rank_score(runs) -> np.ndarray:
    """``(rank of RMSE ascending + rank of amplitude correlation descending) / 2`` per run."""
    runs = list(runs)
    if not runs:
        return np.zeros(0)
    rk_r = dense_rank([r["rmse"] for r in runs])
    rk_c = dense_rank([r["amp_corr"] for r in runs], descending=True)
    return 0.5 * (rk_r + rk_c)
