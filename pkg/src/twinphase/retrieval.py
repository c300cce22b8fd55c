"""Estimation core: transmittance estimator, quantum-corrected
intensities, correction-weight factors, and the two-step TIE phase
solver with spectral Dirichlet Poisson solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.fft import dstn, idstn

from .core import ScalarField2D
from .twinbeam import bin_counts, eta_c, register_idler


@dataclass(frozen=True)
class RetrievalConfig:
    """Parameters of a reconstruction run.

    ``k_mode`` selects the idler-subtraction weight: "classical" (k=0),
    "tau" (eta0*eta_c at the working binning), "tie" (eta0), or an
    explicit numeric value.  ``reference_mean`` / ``reference_mean_idler``
    are object-free calibration means of the signal and idler arms at
    bin_px = 1.
    """

    dz: float  # mm
    wavenumber: float  # rad / um
    k_mode: Union[str, float] = "classical"
    bin_px: int = 1
    intensity_floor: float = 1e-3
    reference_mean: Optional[ScalarField2D] = None
    reference_mean_idler: Optional[ScalarField2D] = None
    eta0: float = 0.7
    epsilon: float = 0.2
    l_cff: float = 5.0  # um

    def __post_init__(self):
        if not self.dz > 0:
            raise ValueError("dz must be positive")
        if not self.intensity_floor > 0:
            raise ValueError("intensity_floor must be positive")
        if self.bin_px < 1:
            raise ValueError("bin_px must be >= 1")


@dataclass(frozen=True)
class PhaseImage:
    """Retrieved phase map (radians), zero on the border by convention."""

    values: ScalarField2D
    dz: float
    k_value: float
    provenance: str = "classical"


def k_tau_opt(eta0: float, d_factor: float, epsilon: float) -> float:
    """Variance-optimal subtraction weight for transmittance estimation."""
    return eta0 * eta_c(d_factor, epsilon)


def k_tie_opt(eta0: float) -> float:
    """Subtraction weight for TIE phase retrieval: the large-area limit
    of k_tau_opt, independent of the working resolution."""
    if not 0.0 <= eta0 <= 1.0:
        raise ValueError("eta0 must lie in [0, 1]")
    return eta0


def resolve_k(config: RetrievalConfig, pitch: float) -> float:
    """Numeric subtraction weight implied by the configured k_mode."""
    mode = config.k_mode
    if isinstance(mode, str):
        if mode == "classical":
            return 0.0
        if mode == "tau":
            d = config.bin_px * pitch / config.l_cff
            return k_tau_opt(config.eta0, d, config.epsilon)
        if mode == "tie":
            return k_tie_opt(config.eta0)
        return float(mode)
    return float(mode)


def quantum_correct(
    n_s: ScalarField2D, n_i: ScalarField2D, mean_i: ScalarField2D, k: float
) -> ScalarField2D:
    """Zero-mean idler subtraction: n_s - k * (n_i - <n_i>).

    All inputs must share one grid, with the idler already registered
    onto signal coordinates.
    """
    n_s.require_same_grid(n_i)
    n_s.require_same_grid(mean_i)
    return n_s.with_values(n_s.values - k * (n_i.values - mean_i.values))


@dataclass(frozen=True)
class TransmittanceEstimate:
    tau: ScalarField2D
    valid: np.ndarray  # False where the reference mean is below the floor
    k_value: float


def estimate_transmittance(
    n_s_obj: ScalarField2D, n_i: ScalarField2D, config: RetrievalConfig
) -> TransmittanceEstimate:
    """Unbiased transmittance estimator from an in-focus frame.

    tau_hat = (n_s' - k * delta n_i) / <n_s>, evaluated at the working
    binning.  ``n_i`` is the raw (unregistered) idler image.
    """
    if config.reference_mean is None or config.reference_mean_idler is None:
        raise ValueError("calibration reference means are required")
    b = config.bin_px
    s = bin_counts(n_s_obj, b)
    i = bin_counts(register_idler(n_i), b)
    mean_s = bin_counts(config.reference_mean, b)
    mean_i = bin_counts(config.reference_mean_idler, b)
    k = resolve_k(config, n_s_obj.pitch)
    corrected = quantum_correct(s, i, mean_i, k)
    floor = config.intensity_floor * float(mean_s.values.mean())
    valid = mean_s.values >= floor
    denom = np.where(valid, mean_s.values, 1.0)
    tau_hat = np.where(valid, corrected.values / denom, 1.0)
    return TransmittanceEstimate(tau=s.with_values(tau_hat), valid=valid, k_value=k)


def axial_derivative(
    i_plus: ScalarField2D, i_minus: ScalarField2D, dz: float
) -> ScalarField2D:
    """Centered finite difference (i_plus - i_minus) / (2 dz), counts per mm."""
    i_plus.require_same_grid(i_minus)
    if not dz > 0:
        raise ValueError("dz must be positive")
    return i_plus.with_values((i_plus.values - i_minus.values) / (2.0 * dz))


def poisson_solve_dirichlet(rhs: ScalarField2D) -> ScalarField2D:
    """Solve laplacian(u) = rhs with u = 0 on the image border.

    Spectral sine-basis (DST-I) solver with continuum eigenvalues
    -pi^2 (n^2 + m^2) / L^2 on the interior nodes; the zero boundary is
    enforced by the odd extension, with no zero-frequency singularity.
    """
    h, w = rhs.height, rhs.width
    pitch = rhs.pitch
    interior = rhs.values[1:-1, 1:-1]
    coeffs = dstn(interior, type=1)
    ny, nx = interior.shape
    ly = (h - 1) * pitch
    lx = (w - 1) * pitch
    ky = (np.arange(1, ny + 1) * math.pi / ly) ** 2
    kx = (np.arange(1, nx + 1) * math.pi / lx) ** 2
    eig = -(ky[:, np.newaxis] + kx[np.newaxis, :])
    u_int = idstn(coeffs / eig, type=1)
    u = np.zeros((h, w))
    u[1:-1, 1:-1] = u_int
    return rhs.with_values(u)


def laplacian_dirichlet(u: ScalarField2D) -> ScalarField2D:
    """Spectral sine-basis Laplacian, the exact inverse of the solver."""
    h, w = u.height, u.width
    pitch = u.pitch
    interior = u.values[1:-1, 1:-1]
    coeffs = dstn(interior, type=1)
    ny, nx = interior.shape
    ly = (h - 1) * pitch
    lx = (w - 1) * pitch
    ky = (np.arange(1, ny + 1) * math.pi / ly) ** 2
    kx = (np.arange(1, nx + 1) * math.pi / lx) ** 2
    eig = -(ky[:, np.newaxis] + kx[np.newaxis, :])
    out = np.zeros((h, w))
    out[1:-1, 1:-1] = idstn(coeffs * eig, type=1)
    return u.with_values(out)


def _trig_bases(n: int, length: float):
    """Interior sine / cosine bases on an n-point grid of extent ``length``.

    Returns (wavenumbers, S, C) where S[j, m] = sin(k_m x_j) and
    C[j, m] = cos(k_m x_j) for the n - 2 interior Dirichlet modes
    k_m = m pi / length.
    """
    m = np.arange(1, n - 1)
    k = m * math.pi / length
    theta = np.pi * np.outer(np.arange(n), m) / (n - 1)
    return k, np.sin(theta), np.cos(theta)


def _teague_second_step(psi: np.ndarray, i0: np.ndarray, pitch: float) -> np.ndarray:
    """Solve laplacian(phi) = div(grad(psi) / I0) with zero-border phi.

    Gradients, divergence and the Poisson inverse all act in the same
    sine/cosine spectral basis, so for uniform I0 the step reduces
    exactly to phi = psi / I0 with no numerical smoothing.
    """
    h, w = psi.shape
    ly, lx = (h - 1) * pitch, (w - 1) * pitch
    ky, sy, cy = _trig_bases(h, ly)
    kx, sx, cx = _trig_bases(w, lx)

    norm = 4.0 / ((h - 1) * (w - 1))
    coeffs = norm * (sy.T @ psi @ sx)
    gy = cy @ (ky[:, np.newaxis] * coeffs) @ sx.T
    gx = sy @ (coeffs * kx[np.newaxis, :]) @ cx.T

    fy = gy / i0
    fx = gx / i0
    # Cosine projections carry half weight at the two boundary rows/cols.
    cyw = cy.copy()
    cyw[0] *= 0.5
    cyw[-1] *= 0.5
    cxw = cx.copy()
    cxw[0] *= 0.5
    cxw[-1] *= 0.5
    a = norm * (cyw.T @ fy @ sx)
    b = norm * (sy.T @ fx @ cxw)

    eig = ky[:, np.newaxis] ** 2 + kx[np.newaxis, :] ** 2
    phi_coeffs = (ky[:, np.newaxis] * a + b * kx[np.newaxis, :]) / eig
    return sy @ phi_coeffs @ sx.T


def tie_retrieve(
    i_zero: ScalarField2D,
    i_plus: ScalarField2D,
    i_minus: ScalarField2D,
    config: RetrievalConfig,
    provenance: str = "classical",
    k_value: float = 0.0,
) -> PhaseImage:
    """Two-step Teague TIE solve of the transverse phase.

    First Poisson solve: laplacian(psi) = -k_wave * dI/dz.  Second:
    laplacian(phi) = div(grad(psi) / I0) with I0 clamped below at
    intensity_floor * mean(I0).  Dirichlet (zero-border) conditions on
    both solves, with spectrally consistent gradient and divergence
    operators in the second step.
    """
    i_zero.require_same_grid(i_plus)
    i_zero.require_same_grid(i_minus)
    mean_i0 = float(i_zero.values.mean())
    if mean_i0 <= 0:
        raise ValueError("i_zero must have positive mean")
    dz_um = config.dz * 1e3
    didz = (i_plus.values - i_minus.values) / (2.0 * dz_um)
    rhs1 = i_zero.with_values(-config.wavenumber * didz)
    psi = poisson_solve_dirichlet(rhs1)

    floor = config.intensity_floor * mean_i0
    i0 = np.maximum(i_zero.values, floor)
    phi = _teague_second_step(psi.values, i0, i_zero.pitch)
    return PhaseImage(
        values=i_zero.with_values(phi),
        dz=config.dz,
        k_value=k_value,
        provenance=provenance,
    )


def phase_from_counts(
    stack_minus: ScalarField2D,
    stack_zero: ScalarField2D,
    stack_plus: ScalarField2D,
    config: RetrievalConfig,
    provenance: str = "classical",
    k_value: float = 0.0,
) -> PhaseImage:
    """tie_retrieve after binning the three planes to config.bin_px."""
    b = config.bin_px
    return tie_retrieve(
        bin_counts(stack_zero, b),
        bin_counts(stack_plus, b),
        bin_counts(stack_minus, b),
        config,
        provenance=provenance,
        k_value=k_value,
    )


def phase_from_twin_frames(
    frame_minus,
    frame_zero,
    frame_plus,
    config: RetrievalConfig,
) -> PhaseImage:
    """Full quantum-corrected single-shot reconstruction.

    Each plane's signal counts are corrected with its own idler frame
    (zero-mean subtraction against the calibration idler mean), then
    binned and fed to the TIE solver.
    """
    if config.reference_mean_idler is None:
        raise ValueError("calibration idler mean is required")
    pitch = frame_zero.n_s.pitch
    k = resolve_k(config, pitch)
    mean_i = register_idler(config.reference_mean_idler)

    def corrected(frame):
        return quantum_correct(frame.n_s, register_idler(frame.n_i), mean_i, k)

    provenance = "classical" if k == 0.0 else "quantum"
    return phase_from_counts(
        corrected(frame_minus),
        corrected(frame_zero),
        corrected(frame_plus),
        config,
        provenance=provenance,
        k_value=k,
    )


def phase_noise_spectrum(
    sigma_field: ScalarField2D, i0: float, dz: float, wavenumber: float
):
    """Phase-noise spectrum implied by an intensity-noise map.

    Returns k * sigma_tilde(q) / (4 pi^2 sqrt(2) I0 dz |q|^2) on the
    FFT frequency grid (cycles per um), with the q = 0 element set to
    zero as the gauge choice.  ``dz`` in mm.
    """
    if not i0 > 0 or not dz > 0:
        raise ValueError("i0 and dz must be positive")
    dz_um = dz * 1e3
    st = np.fft.fft2(sigma_field.values)
    fx = np.fft.fftfreq(sigma_field.width, d=sigma_field.pitch)
    fy = np.fft.fftfreq(sigma_field.height, d=sigma_field.pitch)
    q2 = fx[np.newaxis, :] ** 2 + fy[:, np.newaxis] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        spec = wavenumber * st / (4.0 * math.pi**2 * math.sqrt(2.0) * i0 * dz_um * q2)
    spec[0, 0] = 0.0
    return spec
