"""2D discrete Fourier analysis: forward transform, power spectra, and
azimuthal integration of power over radial bins.

The forward DFT is unnormalized (no 1/(HW) factor) and computed through
explicit cosine/sine basis matrices in float64 rather than a library FFT,
so the same basis construction can be reused on the differentiable loss
path.  Radial binning rounds the Euclidean distance from the DC pixel to
the nearest integer; bins run over [0, floor(min(H, W)/2)) and anything
farther out is discarded.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericError, UsageError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class ComplexGrid:
    """Real/imaginary parts of a 2D spectrum, both H x W."""

    real: np.ndarray
    imag: np.ndarray

    @property
    def shape(self):
        return self.real.shape


@dataclass
class RadialSpectrum:
    """Azimuthally integrated power: bins[k] sums power at rounded radius k.

    bin_edges holds the radial-frequency boundaries in cycles per image;
    bin k covers [bin_edges[k], bin_edges[k + 1]).
    """

    bins: np.ndarray
    bin_edges: np.ndarray


@lru_cache(maxsize=16)
def dft_basis(n: int):
    """Cosine and sine basis matrices for a length-n DFT, float64.

    Both are symmetric: basis[k, m] = cos/sin(2*pi*k*m/n).
    """
    k = np.arange(n, dtype=np.float64)
    angles = 2.0 * np.pi * np.outer(k, k) / n
    return np.cos(angles), np.sin(angles)


def dft2d(image) -> ComplexGrid:
    """Unnormalized forward 2D DFT of a real H x W image."""
    image = np.asarray(image, np.float64)
    if image.ndim != 2:
        raise UsageError(f"dft2d expects an H x W image, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise NumericError("dft2d input contains non-finite values")
    h, w = image.shape
    ch, sh = dft_basis(h)
    cw, sw = dft_basis(w)
    # F = (C_h - i S_h) @ img @ (C_w - i S_w)
    a = ch @ image
    b = sh @ image
    real = a @ cw - b @ sw
    imag = -(a @ sw + b @ cw)
    return ComplexGrid(real=real, imag=imag)


def power_spectrum(grid: ComplexGrid) -> np.ndarray:
    """Pointwise squared magnitude real^2 + imag^2."""
    return grid.real * grid.real + grid.imag * grid.imag


def fftshift(field):
    """Quadrant swap placing frequency (0, 0) at (H//2, W//2)."""
    field = np.asarray(field)
    h, w = field.shape
    return np.roll(field, (h // 2, w // 2), axis=(0, 1))


@lru_cache(maxsize=16)
def _radial_bin_index(h: int, w: int):
    """Rounded distance from the DC pixel of a shifted H x W grid, plus the
    bin count and the per-bin pixel counts for the retained disk."""
    cy, cx = h // 2, w // 2
    ys = np.arange(h, dtype=np.float64)[:, None] - cy
    xs = np.arange(w, dtype=np.float64)[None, :] - cx
    dist = np.sqrt(ys * ys + xs * xs)
    # squared distances are integers, so a distance never lands exactly on
    # k + 0.5 and half-up rounding is tie-free
    radius = np.floor(dist + 0.5).astype(np.int64)
    nbins = min(h, w) // 2
    keep = radius < nbins
    counts = np.bincount(radius[keep], minlength=nbins).astype(np.float64)
    return radius, keep, nbins, counts


def _bin_edges(nbins: int):
    edges = np.arange(nbins + 1, dtype=np.float64) - 0.5
    edges[0] = 0.0
    return edges


def azimuthal_integration(power, shifted: bool = False) -> RadialSpectrum:
    """Sum power over annuli of integer rounded radius about the DC pixel.

    If shifted is false the field is assumed to be in raw DFT layout and is
    shifted internally first.
    """
    power = np.asarray(power, np.float64)
    if not shifted:
        power = fftshift(power)
    h, w = power.shape
    radius, keep, nbins, _ = _radial_bin_index(h, w)
    bins = np.bincount(radius[keep], weights=power[keep], minlength=nbins)
    return RadialSpectrum(bins=bins, bin_edges=_bin_edges(nbins))


def radial_bin_counts(h: int, w: int) -> np.ndarray:
    """Number of pixels falling in each radial bin of an H x W grid."""
    _, _, _, counts = _radial_bin_index(h, w)
    return counts.copy()


def image_ai_curve(image, normalize_dc: bool = False) -> RadialSpectrum:
    """Azimuthal integration of one image's power spectrum."""
    spec = azimuthal_integration(power_spectrum(dft2d(image)), shifted=False)
    if normalize_dc:
        spec.bins = spec.bins / spec.bins[0]
    return spec


def average_ai_curve(batch, normalize_dc: bool = False) -> RadialSpectrum:
    """Per-bin mean of the azimuthal power curves of a batch of N x H x W
    grayscale images.

    With normalize_dc each curve is divided by its own DC bin before
    averaging; the default leaves curves unnormalized.
    """
    batch = np.asarray(batch, np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise UsageError(f"expected a nonempty N x H x W batch, got shape {batch.shape}")
    total = None
    edges = None
    for image in batch:
        spec = image_ai_curve(image, normalize_dc=normalize_dc)
        total = spec.bins if total is None else total + spec.bins
        edges = spec.bin_edges
    return RadialSpectrum(bins=total / batch.shape[0], bin_edges=edges)


def to_grayscale(image) -> np.ndarray:
    """Collapse a C x H x W image to H x W luma; 1-channel passes through."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise UsageError(f"expected a 1- or 3-channel C x H x W image, got shape {image.shape}")
    if image.shape[0] == 1:
        return image[0]
    r, g, b = GRAY_WEIGHTS
    return r * image[0] + g * image[1] + b * image[2]
