"""Domain types, configuration, deterministic RNG streams and the test target.

Conventions used throughout the package:

* lengths are micrometers at the object plane, defocus distances are
  millimeters, wavelengths are nanometers (converted internally);
* a 2D field stores ``values[row, col]`` with ``row`` increasing downwards;
* a positive phase advances the optical path (thicker sample).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

MIN_GRID = 8
MIN_TARGET_GRID = 220


class ConfigError(ValueError):
    """A configuration invariant is violated."""


class GridError(ValueError):
    """Grid metadata of two fields is incompatible."""


def _frozen_array(values, dtype):
    arr = np.array(values, dtype=dtype, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField2D:
    """Real 2D map with a physical pixel pitch (micrometers per pixel)."""

    width: int
    height: int
    pitch: float
    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.values, np.float64)
        object.__setattr__(self, "values", arr)
        if arr.shape != (self.height, self.width):
            raise GridError(
                f"values shape {arr.shape} != (height, width) = "
                f"({self.height}, {self.width})"
            )
        if self.width < MIN_GRID or self.height < MIN_GRID:
            raise GridError(f"grid must be at least {MIN_GRID}x{MIN_GRID}")
        if not self.pitch > 0:
            raise GridError("pitch must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field contains non-finite values")

    def with_values(self, values) -> "ScalarField2D":
        """Same grid metadata, new values."""
        return ScalarField2D(self.width, self.height, self.pitch, values)

    def same_grid(self, other) -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and math.isclose(self.pitch, other.pitch, rel_tol=1e-12)
        )

    def require_same_grid(self, other):
        if not self.same_grid(other):
            raise GridError(
                f"grid mismatch: ({self.height}x{self.width}, pitch {self.pitch}) vs "
                f"({other.height}x{other.width}, pitch {other.pitch})"
            )


@dataclass(frozen=True)
class ComplexField2D:
    """Complex 2D map (wavefront carrier) with the same grid metadata."""

    width: int
    height: int
    pitch: float
    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.values, np.complex128)
        object.__setattr__(self, "values", arr)
        if arr.shape != (self.height, self.width):
            raise GridError(
                f"values shape {arr.shape} != (height, width) = "
                f"({self.height}, {self.width})"
            )
        if self.width < MIN_GRID or self.height < MIN_GRID:
            raise GridError(f"grid must be at least {MIN_GRID}x{MIN_GRID}")
        if not self.pitch > 0:
            raise GridError("pitch must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field contains non-finite values")

    def with_values(self, values) -> "ComplexField2D":
        return ComplexField2D(self.width, self.height, self.pitch, values)

    def same_grid(self, other) -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and math.isclose(self.pitch, other.pitch, rel_tol=1e-12)
        )

    def require_same_grid(self, other):
        if not self.same_grid(other):
            raise GridError("grid mismatch")

    def intensity(self) -> ScalarField2D:
        return ScalarField2D(
            self.width, self.height, self.pitch, np.abs(self.values) ** 2
        )


@dataclass(frozen=True)
class ObjectSpec:
    """Paired transmittance map tau(x) in [0, 1] and phase map phi(x) in rad."""

    tau: ScalarField2D
    phi: ScalarField2D

    def __post_init__(self):
        self.tau.require_same_grid(self.phi)
        if np.any(self.tau.values < 0) or np.any(self.tau.values > 1):
            raise ValueError("tau values must lie in [0, 1]")


@dataclass(frozen=True)
class OpticalSystem:
    """Imaging-chain parameters of the twin-beam microscope."""

    wavelength: float = 810.0  # nm
    magnification: float = 8.0
    camera_pixel: float = 13.0  # um
    blur_fwhm: float = 1.5  # um, PSF surrogate at the object plane

    @property
    def wavelength_um(self) -> float:
        return self.wavelength * 1e-3

    @property
    def wavenumber(self) -> float:
        """k = 2 pi / lambda, rad per micrometer."""
        return 2.0 * math.pi / self.wavelength_um

    @property
    def object_pixel(self) -> float:
        """Camera pixel projected to the object plane (um); 13/8 = 1.625 by default."""
        return self.camera_pixel / self.magnification


@dataclass(frozen=True)
class TwinBeamConfig:
    """Source correlation and flux parameters of the twin-beam generator."""

    l_cff: float = 5.0  # um, FWHM of the pair correlation at the object plane
    eta0: float = 0.7  # single-channel detection efficiency
    epsilon: float = 0.2  # misalignment Delta / l_cff, equal on both axes
    mean_photons_per_pixel: float = 600.0
    beam_profile: object = "uniform"  # "uniform" or Gaussian 1/e^2 radius in um
    sigma: float = field(default=None)  # um; derived from l_cff unless given

    def __post_init__(self):
        if self.sigma is None:
            object.__setattr__(self, "sigma", self.l_cff * FWHM_TO_SIGMA)

    @property
    def delta(self) -> float:
        """Misalignment in micrometers."""
        return self.epsilon * self.l_cff


@dataclass(frozen=True)
class RngStream:
    """Deterministic, frame-indexed randomness source.

    Identical (master_seed, stream_index) yields an identical sample
    sequence; distinct stream indices give statistically independent
    streams, so frame generation is order-independent.
    """

    master_seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        )

    def child(self, stream_index: int) -> "RngStream":
        return replace(self, stream_index=stream_index)


def validate_config(optical: OpticalSystem, twin: TwinBeamConfig):
    """Check all cross-field invariants; return the pair or raise ConfigError.

    Every violated invariant is reported, not just the first one.
    """
    problems = []
    if not 0.0 <= twin.eta0 <= 1.0:
        problems.append(f"efficiency out of range: eta0 = {twin.eta0}")
    if not twin.l_cff > 0:
        problems.append("l_cff must be positive")
    if not twin.epsilon >= 0:
        problems.append("epsilon must be non-negative")
    if not twin.mean_photons_per_pixel > 0:
        problems.append("mean_photons_per_pixel must be positive")
    if twin.l_cff > 0:
        expected_sigma = twin.l_cff * FWHM_TO_SIGMA
        if abs(twin.sigma - expected_sigma) > 1e-9 * expected_sigma:
            problems.append(
                f"FWHM relation violated: sigma = {twin.sigma}, "
                f"l_cff/(2 sqrt(2 ln 2)) = {expected_sigma}"
            )
    if not isinstance(twin.beam_profile, str):
        if not float(twin.beam_profile) > 0:
            problems.append("Gaussian beam_profile radius must be positive")
    elif twin.beam_profile != "uniform":
        problems.append(f"unknown beam_profile {twin.beam_profile!r}")
    for name in ("wavelength", "magnification", "camera_pixel"):
        if not getattr(optical, name) > 0:
            problems.append(f"{name} must be positive")
    if not optical.blur_fwhm >= 0:
        problems.append("blur_fwhm must be non-negative")
    if problems:
        raise ConfigError("; ".join(problems))
    return optical, twin


# ---------------------------------------------------------------------------
# Engineered test target: a pi-shaped pure-phase glyph plus a slashed-ring
# glyph carrying both a phase step and a transmittance step.
# ---------------------------------------------------------------------------

def _design_coords(width, height):
    """Pixel coordinates relative to a centered 220x220 design box."""
    if width < MIN_TARGET_GRID or height < MIN_TARGET_GRID:
        raise GridError(
            f"target grid must be at least {MIN_TARGET_GRID}x{MIN_TARGET_GRID} "
            f"to hold both glyphs, got {height}x{width}"
        )
    x0 = (width - MIN_TARGET_GRID) // 2
    y0 = (height - MIN_TARGET_GRID) // 2
    yy, xx = np.mgrid[0:height, 0:width]
    return xx - x0, yy - y0


def target_masks(width, height):
    """Boolean masks (pi_region, null_region) of the two glyphs.

    Glyph geometry is fixed in pixels inside a centered 220x220 design
    box; every stroke is at least 12 px wide so edges span several
    correlation lengths at the default pitch.
    """
    xx, yy = _design_coords(width, height)

    # pi glyph: top bar plus two vertical legs (the legs provide the
    # straight vertical edges used by the resolution metrology).
    bar = (yy >= 34) & (yy < 48) & (xx >= 32) & (xx < 102)
    left_leg = (yy >= 48) & (yy < 110) & (xx >= 44) & (xx < 58)
    right_leg = (yy >= 48) & (yy < 110) & (xx >= 76) & (xx < 90)
    pi_region = bar | left_leg | right_leg

    # slashed-ring glyph: annulus plus a diagonal stroke.
    cx, cy = 150.0, 150.0
    r = np.hypot(xx - cx, yy - cy)
    ring = (r >= 26.0) & (r < 40.0)
    slash = (np.abs((xx - cx) + (yy - cy)) <= 9.0) & (r < 52.0)
    null_region = ring | slash

    return pi_region, null_region


def generate_test_target(
    width: int,
    height: int,
    pitch: float,
    phase_pi: float = -0.226,
    phase_null: float = 0.345,
    tau_null: float = 0.94,
) -> ObjectSpec:
    """Render the engineered phase/transmittance test object.

    The pi glyph is a pure phase structure at ``phase_pi``; the slashed
    ring carries phase ``phase_null`` and transmittance ``tau_null``;
    the background is phase 0, transmittance 1.  Deterministic:
    identical inputs produce bit-identical output.
    """
    pi_region, null_region = target_masks(width, height)
    phi = np.zeros((height, width))
    phi[pi_region] = phase_pi
    phi[null_region] = phase_null
    tau = np.ones((height, width))
    tau[null_region] = tau_null
    return ObjectSpec(
        tau=ScalarField2D(width, height, pitch, tau),
        phi=ScalarField2D(width, height, pitch, phi),
    )


def generate_edge_target(
    width: int,
    height: int,
    pitch: float,
    phase_step: float = -0.3,
    band: tuple = (90, 170),
) -> ObjectSpec:
    """Render the metrology target: a vertical pure-phase stripe.

    Columns band[0] (inclusive) to band[1] (exclusive) carry
    ``phase_step``; transmittance is 1 everywhere.  The left stripe
    boundary provides a long straight edge with wide flat plateaus on
    both sides, suitable for edge-spread resolution fits at any
    binning.
    """
    if not 0 <= band[0] < band[1] <= width:
        raise ValueError("band must satisfy 0 <= lo < hi <= width")
    phi = np.zeros((height, width))
    phi[:, band[0] : band[1]] = phase_step
    tau = np.ones((height, width))
    return ObjectSpec(
        tau=ScalarField2D(width, height, pitch, tau),
        phi=ScalarField2D(width, height, pitch, phi),
    )
