"""Stochastic twin-beam generator and correlation metrology.

The sampler is formulated on count fields rather than individual
photons: pair births are a Poisson field, detection is a correlated
binomial thinning of that field, and transverse transport (pair
correlation spread, phase-gradient displacement, imaging blur) is a
multinomial redistribution of counts with separable per-axis kernels.
The per-axis kernel is the exact distribution of
``uniform(0,1) + shift + N(0, s)`` binned to unit pixels, so the
measured conditional collection efficiency matches the continuous
double-integral model at every binning, with no per-photon loops.

Generation happens on an internally padded grid and is cropped to the
requested region, so border pixels keep their correlation partners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import integrate, optimize
from scipy.special import ndtr

from .core import (
    FWHM_TO_SIGMA,
    ObjectSpec,
    OpticalSystem,
    RngStream,
    ScalarField2D,
    TwinBeamConfig,
)

_SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class TwinBeamFrame:
    """One acquisition: signal and idler photon-count images.

    ``n_s`` is taken at defocus ``dz`` (mm, signed); the idler is always
    object-free at z = 0.  ``spill`` is the fraction of detected photons
    that left the simulation grid and were dropped.
    """

    n_s: ScalarField2D
    n_i: ScalarField2D
    dz: float
    stream_index: int
    spill: float = 0.0

    def __post_init__(self):
        self.n_s.require_same_grid(self.n_i)
        for f in (self.n_s, self.n_i):
            v = f.values
            if np.any(v < 0) or np.any(v != np.round(v)):
                raise ValueError("counts must be non-negative integers")


@dataclass(frozen=True)
class NrfPoint:
    """Measured noise statistics at one binning."""

    d_factor: float
    nrf: float
    fano: float
    n_frames: int
    nrf_stderr: float = float("nan")

    def __post_init__(self):
        if self.nrf < 0:
            raise ValueError("nrf must be non-negative")
        if not self.fano > 0:
            raise ValueError("fano must be positive")


class EfficiencyFit(NamedTuple):
    eta0: float
    epsilon: float
    residual: float
    converged: bool


# ---------------------------------------------------------------------------
# Conditional collection efficiency and the NRF model
# ---------------------------------------------------------------------------

def _eta_c_1d(d_factor: float, epsilon: float) -> float:
    """One transverse axis of the pair-collection efficiency.

    The double integral of the Gaussian pair correlation over two
    matched segments of length D (in correlation-length units, center
    offset epsilon) reduces to a single integral against the triangular
    overlap density.
    """
    if d_factor <= 0:
        return 0.0
    s = FWHM_TO_SIGMA  # sigma in units of l_cff

    def integrand(w):
        pdf = math.exp(-0.5 * ((w + epsilon) / s) ** 2) / (s * _SQRT2PI)
        return (d_factor - abs(w)) * pdf

    lo = max(-d_factor, -epsilon - 8 * s)
    hi = min(d_factor, -epsilon + 8 * s)
    if hi <= lo:
        return 0.0
    val, _ = integrate.quad(integrand, lo, hi, points=[0.0], epsabs=1e-10, limit=200)
    return min(val / d_factor, 1.0)


def eta_c(d_factor: float, epsilon: float) -> float:
    """Pair-collection efficiency eta_c(D, epsilon), in [0, 1].

    Product of two identical one-axis factors (the correlation is
    treated as symmetric along both transverse directions, with equal
    misalignment on both axes).
    """
    if d_factor < 0 or epsilon < 0:
        raise ValueError("d_factor and epsilon must be non-negative")
    return _eta_c_1d(d_factor, epsilon) ** 2


def nrf_predicted(eta0: float, d_factor: float, epsilon: float) -> float:
    """Closed-form noise reduction factor 1 - eta0 * eta_c(D, epsilon)."""
    if not 0.0 <= eta0 <= 1.0:
        raise ValueError("eta0 must lie in [0, 1]")
    return 1.0 - eta0 * eta_c(d_factor, epsilon)


def d_factor_for_bin(bin_px: int, pitch: float, l_cff: float) -> float:
    """Resolution factor D of a bin_px x bin_px integration area."""
    return bin_px * pitch / l_cff


# ---------------------------------------------------------------------------
# Count redistribution kernels
# ---------------------------------------------------------------------------

def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / _SQRT2PI


def _cdf_integral(z):
    """Antiderivative of the standard normal CDF: z*Phi(z) + phi(z)."""
    return z * ndtr(z) + _norm_pdf(z)


def _shift_cdf(t, s):
    """P(uniform(0,1) + N(0, s) < t); with s = 0 this is clip(t, 0, 1)."""
    t = np.asarray(t, dtype=float)
    if s == 0.0:
        return np.clip(t, 0.0, 1.0)
    return s * (_cdf_integral(t / s) - _cdf_integral((t - 1.0) / s))


def _scatter_shift(out, take, j, axis):
    """Add ``take`` shifted by integer offset j along axis; return spill."""
    n = out.shape[axis]
    if abs(j) >= n:
        return int(take.sum())
    sl_all = [slice(None), slice(None)]
    if j == 0:
        out += take
        return 0
    dst, src, lost = list(sl_all), list(sl_all), list(sl_all)
    if j > 0:
        dst[axis] = slice(j, None)
        src[axis] = slice(None, -j)
        lost[axis] = slice(-j, None)
    else:
        dst[axis] = slice(None, j)
        src[axis] = slice(-j, None)
        lost[axis] = slice(None, -j)
    out[tuple(dst)] += take[tuple(src)]
    return int(take[tuple(lost)].sum())


def _shift_axis(counts, shift, s, axis, rng):
    """Redistribute counts along one axis by ``uniform + shift + N(0, s)``.

    ``shift`` may be a scalar or a per-pixel array (pixels).  With
    ``rng`` set the redistribution is a multinomial sample (iterated
    binomial over offsets); with ``rng=None`` it is the exact
    expectation, for deterministic mean-count computations.
    Returns (out, spill).
    """
    scalar_shift = np.isscalar(shift) or np.ndim(shift) == 0
    d = float(shift) if scalar_shift else np.asarray(shift, dtype=float)
    dmin = d if scalar_shift else float(d.min())
    dmax = d if scalar_shift else float(d.max())
    jmin = int(math.floor(dmin - 6.0 * s))
    jmax = int(math.ceil(dmax + 6.0 * s))

    sampled = rng is not None
    out = np.zeros_like(counts) if sampled else np.zeros(counts.shape)
    rem = counts.copy() if sampled else np.asarray(counts, dtype=float)
    rem_w = np.ones(() if scalar_shift else counts.shape)
    spill = 0
    cdf_prev = _shift_cdf(jmin - d, s)
    for j in range(jmin, jmax + 1):
        cdf_next = _shift_cdf(j + 1 - d, s)
        prob = cdf_next - cdf_prev
        cdf_prev = cdf_next
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(rem_w > 0, prob / np.maximum(rem_w, 1e-300), 0.0)
        p = np.clip(p, 0.0, 1.0)
        if sampled:
            take = rng.binomial(rem, p)
        else:
            take = rem * p
        rem = rem - take
        rem_w = np.maximum(rem_w - prob, 0.0)
        spill += _scatter_shift(out, take, j, axis)
    # kernel truncation tail (< 1e-8 of the mass)
    spill += int(np.sum(rem)) if sampled else float(np.sum(rem))
    return out, spill


def _redistribute(counts, shift_x, shift_y, s, rng):
    out, spill_y = _shift_axis(counts, shift_y, s, 0, rng)
    out, spill_x = _shift_axis(out, shift_x, s, 1, rng)
    return out, spill_y + spill_x


# ---------------------------------------------------------------------------
# Twin-beam frame sampling
# ---------------------------------------------------------------------------

def _pair_rate(twin: TwinBeamConfig, width, height, pitch, margin):
    """Per-pixel pair birth rate on the padded grid.

    Births extend one kernel reach beyond the requested region (so
    border pixels keep their correlation partners) and the padded grid
    extends one further reach (so no reachable photon ever leaves it).
    The illumination weight is normalized to unit mean over the
    requested region, so the detected signal marginal averages
    mean_photons_per_pixel there.
    """
    pw, ph = width + 4 * margin, height + 4 * margin
    if twin.beam_profile == "uniform":
        weight = np.ones((ph, pw))
    else:
        radius = float(twin.beam_profile)
        x = (np.arange(pw) - (pw - 1) / 2.0) * pitch
        y = (np.arange(ph) - (ph - 1) / 2.0) * pitch
        weight = np.exp(-2.0 * (x[np.newaxis, :] ** 2 + y[:, np.newaxis] ** 2) / radius**2)
        roi = weight[2 * margin : 2 * margin + height, 2 * margin : 2 * margin + width]
        weight = weight / roi.mean()
    # no births in the outermost reach ring
    weight[:margin, :] = 0.0
    weight[-margin:, :] = 0.0
    weight[:, :margin] = 0.0
    weight[:, -margin:] = 0.0
    return weight * (twin.mean_photons_per_pixel / twin.eta0)


def _phase_displacement(obj: Optional[ObjectSpec], sys: OpticalSystem, dz, margin):
    """Geometric-optics transverse displacement (dz/k) grad phi, in pixels."""
    if obj is None or dz == 0.0:
        return 0.0, 0.0
    phi = np.pad(obj.phi.values, margin, mode="edge")
    pitch = obj.phi.pitch
    gy, gx = np.gradient(phi, pitch)
    scale = (dz * 1e3) / sys.wavenumber  # um^2
    return scale * gx / pitch, scale * gy / pitch


def sample_twin_frame(
    obj: Optional[ObjectSpec],
    sys: OpticalSystem,
    twin: TwinBeamConfig,
    dz: float,
    rng: RngStream,
    grid: Optional[ScalarField2D] = None,
) -> TwinBeamFrame:
    """Monte-Carlo sample one correlated signal/idler photon-count frame.

    Pairs are born from the illumination profile; the idler photon is
    detected with probability eta0 at the point-reflected position plus
    a Gaussian of width sigma offset by the misalignment Delta; the
    signal photon survives the object with probability tau, is detected
    with probability eta0, and lands at the birth position plus the
    phase-gradient displacement (dz/k) grad phi and the imaging blur.
    ``dz`` is signed (mm); pass ``grid`` for object-free frames.
    """
    if obj is not None:
        template = obj.tau
    elif grid is not None:
        template = grid
    else:
        raise ValueError("need an object or a grid template")
    width, height, pitch = template.width, template.height, template.pitch
    gen = rng.generator()

    sigma_px = twin.sigma / pitch
    delta_px = twin.delta / pitch
    blur_px = sys.blur_fwhm * FWHM_TO_SIGMA / pitch
    disp_x, disp_y = _phase_displacement(obj, sys, dz, 0)
    max_disp = 0.0
    if not np.isscalar(disp_x):
        max_disp = max(float(np.abs(disp_x).max()), float(np.abs(disp_y).max()))
    margin = int(math.ceil(6 * sigma_px + abs(delta_px) + 6 * blur_px + max_disp)) + 1

    if twin.eta0 == 0.0:
        zero = template.with_values(np.zeros((height, width)))
        return TwinBeamFrame(zero, zero, dz, rng.stream_index, 0.0)

    rate = _pair_rate(twin, width, height, pitch, margin)
    pairs = gen.poisson(rate)

    if obj is not None:
        tau = np.pad(obj.tau.values, 2 * margin, mode="edge")
        disp_x, disp_y = _phase_displacement(obj, sys, dz, 2 * margin)
    else:
        tau = 1.0

    # Correlated thinning: per pair the signal survives the object with
    # probability tau and is detected with eta0; the idler is detected
    # with eta0; outcomes share the same birth.
    eta0 = twin.eta0
    p_both = eta0 * eta0 * tau
    p_s_only = eta0 * tau * (1.0 - eta0)
    p_i_only = eta0 * (1.0 - eta0 * tau)
    k_both = gen.binomial(pairs, p_both)
    rem = pairs - k_both
    with np.errstate(divide="ignore", invalid="ignore"):
        p1 = np.clip(p_s_only / np.maximum(1.0 - p_both, 1e-300), 0.0, 1.0)
    k_s_only = gen.binomial(rem, np.broadcast_to(p1, rem.shape))
    rem = rem - k_s_only
    with np.errstate(divide="ignore", invalid="ignore"):
        p2 = np.clip(
            p_i_only / np.maximum(1.0 - p_both - p_s_only, 1e-300), 0.0, 1.0
        )
    k_i_only = gen.binomial(rem, np.broadcast_to(p2, rem.shape))

    s_births = k_both + k_s_only
    i_births = k_both + k_i_only
    total_detected = int(s_births.sum() + i_births.sum())

    # Idler arm: point-reflect about the grid center, then spread by the
    # pair correlation with the misalignment offset.
    i_mirrored = i_births[::-1, ::-1]
    n_i, spill_i = _redistribute(i_mirrored, delta_px, delta_px, sigma_px, gen)

    # Signal arm: phase-gradient displacement plus imaging blur.
    n_s, spill_s = _redistribute(s_births, disp_x, disp_y, blur_px, gen)

    crop = (slice(2 * margin, 2 * margin + height), slice(2 * margin, 2 * margin + width))
    spill = (spill_i + spill_s) / max(total_detected, 1)
    return TwinBeamFrame(
        n_s=template.with_values(n_s[crop].astype(float)),
        n_i=template.with_values(n_i[crop].astype(float)),
        dz=dz,
        stream_index=rng.stream_index,
        spill=spill,
    )


def expected_counts(
    obj: Optional[ObjectSpec],
    sys: OpticalSystem,
    twin: TwinBeamConfig,
    dz: float,
    grid: Optional[ScalarField2D] = None,
):
    """Exact per-pixel means of sample_twin_frame: (signal, idler).

    Deterministic counterpart of the sampler (same kernels applied as
    expectations); used for calibration references instead of averaging
    large frame sets.
    """
    if obj is not None:
        template = obj.tau
    elif grid is not None:
        template = grid
    else:
        raise ValueError("need an object or a grid template")
    width, height, pitch = template.width, template.height, template.pitch
    sigma_px = twin.sigma / pitch
    delta_px = twin.delta / pitch
    blur_px = sys.blur_fwhm * FWHM_TO_SIGMA / pitch
    disp_x, disp_y = _phase_displacement(obj, sys, dz, 0)
    max_disp = 0.0
    if not np.isscalar(disp_x):
        max_disp = max(float(np.abs(disp_x).max()), float(np.abs(disp_y).max()))
    margin = int(math.ceil(6 * sigma_px + abs(delta_px) + 6 * blur_px + max_disp)) + 1

    rate = _pair_rate(twin, width, height, pitch, margin)
    if obj is not None:
        tau = np.pad(obj.tau.values, 2 * margin, mode="edge")
        disp_x, disp_y = _phase_displacement(obj, sys, dz, 2 * margin)
    else:
        tau = 1.0
    eta0 = twin.eta0
    mean_s_births = rate * eta0 * tau
    mean_i_births = rate * eta0

    mean_i, _ = _redistribute(mean_i_births[::-1, ::-1], delta_px, delta_px, sigma_px, None)
    mean_s, _ = _redistribute(mean_s_births, disp_x, disp_y, blur_px, None)
    crop = (slice(2 * margin, 2 * margin + height), slice(2 * margin, 2 * margin + width))
    return template.with_values(mean_s[crop]), template.with_values(mean_i[crop])


# ---------------------------------------------------------------------------
# Metrology
# ---------------------------------------------------------------------------

def register_idler(field: ScalarField2D) -> ScalarField2D:
    """Map each idler pixel onto its correlated signal pixel.

    The idler partner of signal pixel x is the point-reflected pixel -x
    about the beam center, so registration is a flip along both axes.
    """
    return field.with_values(field.values[::-1, ::-1])


def bin_counts(img: ScalarField2D, bin_px: int, origin=None) -> ScalarField2D:
    """Non-overlapping bin_px x bin_px sums; pitch scales by bin_px.

    When bin_px does not divide the image size the largest centered
    region that bins evenly is used and the remainder is cropped.
    ``origin`` overrides the (row, col) crop start, e.g. for the
    shifted-bin edge metrology.
    """
    if bin_px < 1 or bin_px != int(bin_px):
        raise ValueError("bin_px must be a positive integer")
    bin_px = int(bin_px)
    if bin_px == 1 and origin is None:
        return img
    h, w = img.height, img.width
    if origin is None:
        nh, nw = h // bin_px, w // bin_px
        r0 = (h - nh * bin_px) // 2
        c0 = (w - nw * bin_px) // 2
    else:
        r0, c0 = origin
        nh = (h - r0) // bin_px
        nw = (w - c0) // bin_px
    if nh <= 0 or nw <= 0:
        raise ValueError(f"bin_px {bin_px} larger than image {h}x{w}")
    block = img.values[r0 : r0 + nh * bin_px, c0 : c0 + nw * bin_px]
    summed = block.reshape(nh, bin_px, nw, bin_px).sum(axis=(1, 3))
    return ScalarField2D(nw, nh, img.pitch * bin_px, summed)


def measure_nrf(frames, bin_px: int, l_cff: float = None) -> NrfPoint:
    """Noise reduction factor and signal-arm Fano factor of a frame set.

    Variances are per-pixel temporal variances over frames, averaged
    over pixels, normalized by the mean photon sum.  ``l_cff`` (um)
    fixes the reported resolution factor D; it defaults to nan.
    """
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    s_stack = np.stack([bin_counts(f.n_s, bin_px).values for f in frames])
    i_stack = np.stack(
        [bin_counts(register_idler(f.n_i), bin_px).values for f in frames]
    )
    diff = s_stack - i_stack
    var_d = diff.var(axis=0, ddof=1)
    mean_sum = (s_stack + i_stack).mean()
    nrf = float(var_d.mean() / mean_sum)
    stderr = float(var_d.std(ddof=1) / math.sqrt(var_d.size) / mean_sum)
    fano = float(s_stack.var(axis=0, ddof=1).mean() / s_stack.mean())
    pitch = frames[0].n_s.pitch
    d = d_factor_for_bin(bin_px, pitch, l_cff) if l_cff else float("nan")
    return NrfPoint(
        d_factor=d, nrf=nrf, fano=fano, n_frames=len(frames), nrf_stderr=stderr
    )


def fit_efficiencies(curve) -> EfficiencyFit:
    """Least-squares fit of NRF(D) = 1 - eta0 * eta_c(D, epsilon).

    Needs points on both sides of D = 1 to separate the two parameters.
    """
    points = sorted(curve, key=lambda p: p.d_factor)
    if len(points) < 4:
        raise ValueError("need at least 4 NRF points")
    d = np.array([p.d_factor for p in points])
    y = np.array([p.nrf for p in points])
    if d.min() >= 1.0 or d.max() <= 3.0:
        raise ValueError("curve must span D < 1 and D > 3")

    def residuals(params):
        e0, eps = params
        return np.array([1.0 - e0 * eta_c(di, eps) for di in d]) - y

    result = optimize.least_squares(
        residuals,
        x0=[0.5, 0.1],
        bounds=([0.0, 0.0], [1.0, 2.0]),
        xtol=1e-12,
        ftol=1e-12,
        max_nfev=400,
    )
    res_norm = float(np.linalg.norm(result.fun))
    return EfficiencyFit(
        eta0=float(result.x[0]),
        epsilon=float(result.x[1]),
        residual=res_norm,
        converged=bool(result.success),
    )
