"""Slow reference formulas written independently of the library.

Everything works on one strip at a time with plain Python loops, a direct
DFT and direct lag sums, so no code path is shared with the vectorised
implementations under test.
"""
import cmath
import math

import numpy as np

EPS = 1e-3
SCALE = 2000.0


def logamp(z, scale=SCALE, eps=EPS):
    return [math.log(abs(complex(v)) * scale + eps) for v in z]


def amps(z, scale=SCALE):
    return [abs(complex(v)) * scale for v in z]


def mean(xs):
    return math.fsum(xs) / len(xs)


def dft_power(xs):
    """|X_k|^2 for k = 0..floor(n/2) of the centred sequence."""
    n = len(xs)
    m = mean(xs)
    c = [x - m for x in xs]
    out = []
    for k in range(n // 2 + 1):
        s = sum(c[t] * cmath.exp(-2j * math.pi * k * t / n) for t in range(n))
        out.append(abs(s) ** 2)
    return out


def band_bins(n, lo=0.15, hi=0.5):
    return [k for k in range(n // 2 + 1) if lo <= k / n <= hi]


def quantile_nearest_rank(xs, p):
    s = sorted(xs)
    rank = max(1, math.ceil(p * len(s)))
    return s[rank - 1]


def complex_l1(p, t):
    return mean([abs(complex(a) - complex(b)) for a, b in zip(p, t)])


def logamp_l1(p, t):
    return mean([abs(a - b) for a, b in zip(logamp(p), logamp(t))])


def ampcorr(p, t, eps=EPS):
    a, b = amps(p), amps(t)
    ma, mb = mean(a), mean(b)
    num = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    rho = num / (math.sqrt(va * vb) + eps)
    return 1 - min(1.0, max(-1.0, rho))


def tail(p, t, eps=EPS):
    a, b = amps(p), amps(t)
    out = 0.0
    for q, w in ((0.95, 1.0), (0.99, 0.5)):
        out += w * abs(math.log(quantile_nearest_rank(a, q) + eps) - math.log(quantile_nearest_rank(b, q) + eps))
    return out


def diffs(xs, order):
    for _ in range(order):
        xs = [xs[i + 1] - xs[i] for i in range(len(xs) - 1)]
    return xs


def grad(p, t):
    return mean([abs(a - b) for a, b in zip(diffs(logamp(p), 1), diffs(logamp(t), 1))])


def edge(p, t):
    return mean([abs(a - b) for a, b in zip(diffs(logamp(p), 2), diffs(logamp(t), 2))])


def psd(p, t, eps=EPS):
    bins = band_bins(len(p))

    def normed(z):
        pw = dft_power(logamp(z))
        sel = [pw[k] for k in bins]
        tot = math.fsum(sel)
        return [v / (tot + eps) for v in sel]

    return mean([abs(a - b) for a, b in zip(normed(p), normed(t))])


def autocorr(xs, eps=EPS):
    n = len(xs)
    m = mean(xs)
    c = [x - m for x in xs]
    r = [math.fsum(c[i] * c[i + lag] for i in range(n - lag)) for lag in range(n)]
    return [v / (r[0] + eps) for v in r]


def focus_width(xs):
    for lag, v in enumerate(autocorr(xs)):
        if v < 0.5:
            return lag
    return len(xs)


def focuswidth(p, t, eps=EPS):
    a, b = focus_width(logamp(p)), focus_width(logamp(t))
    return abs(a - b) / (b + eps)


TERM_ORACLES = {
    "complex": complex_l1, "logamp": logamp_l1, "ampcorr": ampcorr, "tail": tail,
    "grad": grad, "psd": psd, "fw": focuswidth, "edge": edge,
}


def informativeness(t, eps=EPS):
    ell = logamp(t)
    g = mean([abs(v) for v in diffs(ell, 1)])
    pw = dft_power(ell)
    h = mean([pw[k] for k in band_bins(len(t))])
    return g + h / 2


def info_weights(targets, eps=EPS):
    info = [informativeness(t) for t in targets]
    lo, hi = min(info), max(info)
    return [0.75 + 0.5 * (i - lo) / (hi - lo + eps) for i in info]


def kd_mse(s, t):
    return mean([abs(complex(a) - complex(b)) ** 2 for a, b in zip(s, t)])


def kd_phase(s, t, scale=SCALE, eps_phi=1e-6, p_phi=1.0):
    zs = [complex(v) * scale for v in s]
    zt = [complex(v) * scale for v in t]
    ws = [abs(z) ** p_phi for z in zt]
    mw = mean(ws)
    m = [w / (mw + eps_phi) for w in ws]
    num = 0.0
    for mi, a, b in zip(m, zs, zt):
        ua = a / (abs(a) + eps_phi)
        ub = b / (abs(b) + eps_phi)
        num += mi * abs(ua - ub) ** 2
    return num / (math.fsum(m) + eps_phi)


# --------------------------------------------------------------------------
# state-space layer: explicit diagonal recurrence
# --------------------------------------------------------------------------

def s4d_recurrence(lam, b, c, d, dt, u, method="zoh"):
    """One channel: x_l = a x_{l-1} + g u_l, y_l = 2 Re(c . x_l) + d u_l."""
    n = len(lam)
    a, g = [], []
    for i in range(n):
        z = lam[i] * dt
        if method == "zoh":
            a.append(cmath.exp(z))
            g.append((cmath.exp(z) - 1) / lam[i] * b[i])
        else:
            a.append((1 + z / 2) / (1 - z / 2))
            g.append(dt / (1 - z / 2) * b[i])
    x = [0j] * n
    out = []
    for uk in u:
        x = [a[i] * x[i] + g[i] * uk for i in range(n)]
        out.append(2 * sum(c[i] * x[i] for i in range(n)).real + d * uk)
    return np.array(out)


# --------------------------------------------------------------------------
# detection
# --------------------------------------------------------------------------

def cfar_alpha_bisect(n, p_fa):
    """Solve (1 + alpha/N)^(-N) = P_fa by bisection."""
    lo, hi = 0.0, 1e12
    for _ in range(400):
        mid = (lo + hi) / 2
        if (1 + mid / n) ** (-n) > p_fa:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def reflect(i, n):
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - 1 - i
    return i


def cfar_direct(x, guard, train, alpha):
    """Cell-by-cell CA-CFAR on intensity ``x`` with symmetric reflection."""
    rows, cols = x.shape
    h = guard + train
    n_train = (2 * h + 1) ** 2 - (2 * guard + 1) ** 2
    mask = np.zeros(x.shape, dtype=bool)
    for r in range(rows):
        for c in range(cols):
            s = 0.0
            for dr in range(-h, h + 1):
                for dc in range(-h, h + 1):
                    if abs(dr) <= guard and abs(dc) <= guard:
                        continue
                    s += x[reflect(r + dr, rows), reflect(c + dc, cols)]
            mask[r, c] = x[r, c] > alpha * s / n_train
    return mask


def flood_components(mask, connectivity=8):
    """Component sizes via explicit stack flood fill; returns a label image."""
    rows, cols = mask.shape
    labels = np.zeros(mask.shape, dtype=int)
    if connectivity == 8:
        nbrs = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]
    else:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    nxt = 0
    for r in range(rows):
        for c in range(cols):
            if mask[r, c] and not labels[r, c]:
                nxt += 1
                stack = [(r, c)]
                labels[r, c] = nxt
                while stack:
                    i, j = stack.pop()
                    for a, b in nbrs:
                        u, v = i + a, j + b
                        if 0 <= u < rows and 0 <= v < cols and mask[u, v] and not labels[u, v]:
                            labels[u, v] = nxt
                            stack.append((u, v))
    return labels


def keep_large(mask, k_min, connectivity=8):
    labels = flood_components(mask, connectivity)
    out = np.zeros(mask.shape, dtype=bool)
    for lab in range(1, labels.max() + 1):
        sel = labels == lab
        if sel.sum() >= k_min:
            out |= sel
    return out


# --------------------------------------------------------------------------
# image measurements
# --------------------------------------------------------------------------

def pslr_db(img, k, r, exclude=2):
    """Peak over the largest sample outside a (2 exclude + 1)^2 main-lobe box, in dB."""
    a = np.abs(np.asarray(img))
    peak = a[k, r]
    side = a.copy()
    side[max(k - exclude, 0):k + exclude + 1, max(r - exclude, 0):r + exclude + 1] = 0
    return 20 * np.log10(peak / side.max())


def width_3db(x, upsample=16):
    """3-dB main-lobe width of a sequence in samples, by spectral zero-padding."""
    x = np.asarray(x, dtype=complex)
    n = len(x)
    spec = np.fft.fft(x)
    z = np.zeros(n * upsample, complex)
    z[:n // 2] = spec[:n // 2]
    z[-(n // 2):] = spec[-(n // 2):]
    u = np.abs(np.fft.ifft(z))
    pk = int(u.argmax())
    half = u[pk] / np.sqrt(2)
    i = j = pk
    while u[i % u.size] > half:
        i += 1
    while u[j % u.size] > half:
        j -= 1
    return (i - j) / upsample
