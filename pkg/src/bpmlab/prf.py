"""Reader point-response extraction from readback images.

Two estimators are provided.  Correlating the image with the bit impulse
train is cheap but only unbiased for uncorrelated bits; anticorrelated
patterns (AC-demagnetized media) leak neighbor terms into the estimate.
Frequency-domain deconvolution of the bit train is insensitive to bit
correlations; the image is low-pass filtered first and the filtered kernel
``R * F_LP`` is returned, since decoding can equally use the filtered image.

When the bits are unknown they are bootstrapped with a threshold decode and
refined by alternating deconvolution with a proper 2D decoder, which settles
within a few iterations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.fft import next_fast_len

from . import sieve as sieve_mod
from . import viterbi2d
from .channel import (
    BitAssignment,
    FWHM_TO_SIGMA,
    ReadbackImage,
    ResponseKernel,
    island_amplitudes,
    sample_at_islands,
)
from .lattice import IslandLattice

#: Default kernel crop half-widths, 1.5x the nominal reader FWHM (30 x 35 nm).
DEFAULT_CROP_HALF_X = 45.0
DEFAULT_CROP_HALF_Y = 52.5


class IllConditionedDeconvolutionError(ValueError):
    """The bit-train spectrum is too weak over too much of the kept band."""


def rasterize_bits(image: ReadbackImage, lattice: IslandLattice, bits: np.ndarray) -> np.ndarray:
    """Bilinear splat of the island impulse train onto the image pixel grid.

    Sub-pixel island positions matter at nm pitches, so each island's
    amplitude is spread over the four surrounding pixels with bilinear
    weights (unit total mass per island).
    """
    amps = island_amplitudes(lattice, bits)
    grid = np.zeros((image.ny, image.nx))
    fx = (lattice.x - image.origin_x) / image.pixel_pitch_x
    fy = (lattice.y - image.origin_y) / image.pixel_pitch_y
    ix = np.floor(fx).astype(int)
    iy = np.floor(fy).astype(int)
    wx = fx - ix
    wy = fy - iy
    ok = (ix >= 0) & (ix < image.nx - 1) & (iy >= 0) & (iy < image.ny - 1)
    for dx, dy, w in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        np.add.at(grid, (iy[ok] + dy, ix[ok] + dx), amps[ok] * w[ok])
    return grid


def _crop_window(image: ReadbackImage, half_x: float, half_y: float) -> tuple[int, int]:
    wx = int(round(half_x / image.pixel_pitch_x))
    wy = int(round(half_y / image.pixel_pitch_y))
    return wx, wy


def _wrap_crop(arr: np.ndarray, wy: int, wx: int) -> np.ndarray:
    """Window around circular lag zero: rows/cols -w..+w with wraparound."""
    rows = np.arange(-wy, wy + 1) % arr.shape[0]
    cols = np.arange(-wx, wx + 1) % arr.shape[1]
    return arr[np.ix_(rows, cols)]


def _kernel_pitch(image: ReadbackImage) -> float:
    if not np.isclose(image.pixel_pitch_x, image.pixel_pitch_y):
        raise ValueError("PRF extraction expects square pixels")
    return image.pixel_pitch_x


def extract_prf_correlation(
    image: ReadbackImage,
    lattice: IslandLattice,
    bits: np.ndarray,
    *,
    window_half_x: float = DEFAULT_CROP_HALF_X,
    window_half_y: float = DEFAULT_CROP_HALF_Y,
) -> ResponseKernel:
    """Kernel estimate by cross-correlating the image with the bit train.

    Normalized by the summed squared bit amplitudes; exact only in the limit
    of many uncorrelated bits.
    """
    pitch = _kernel_pitch(image)
    amps = island_amplitudes(lattice, bits)
    n_active = int(np.count_nonzero(amps))
    if n_active < 100:
        warnings.warn(
            f"insufficient statistics: only {n_active} contributing islands",
            stacklevel=2,
        )
    raster = rasterize_bits(image, lattice, bits)
    wx, wy = _crop_window(image, window_half_x, window_half_y)
    shape = (next_fast_len(image.ny + 2 * wy + 1), next_fast_len(image.nx + 2 * wx + 1))
    df = np.fft.rfft2(image.data, shape)
    bf = np.fft.rfft2(raster, shape)
    corr = np.fft.irfft2(df * np.conj(bf), shape)
    norm = float(np.sum(amps**2))
    crop = _wrap_crop(corr, wy, wx) / max(norm, 1e-300)
    return ResponseKernel(crop, pitch, float(wx), float(wy))


def _lp_transfer(shape: tuple[int, int], pitches: tuple[float, float], fwhm: float) -> np.ndarray:
    ky = 2.0 * np.pi * np.fft.fftfreq(shape[0], d=pitches[0])[:, None]
    kx = 2.0 * np.pi * np.fft.rfftfreq(shape[1], d=pitches[1])[None, :]
    sigma = fwhm * FWHM_TO_SIGMA
    return np.exp(-0.5 * sigma**2 * (kx**2 + ky**2))


def lowpass_image(image: ReadbackImage, fwhm: float) -> ReadbackImage:
    """Gaussian low-pass (given spatial FWHM) applied in the frequency domain."""
    shape = (next_fast_len(image.ny), next_fast_len(image.nx))
    f = np.fft.rfft2(image.data, shape)
    f *= _lp_transfer(shape, (image.pixel_pitch_y, image.pixel_pitch_x), fwhm)
    out = np.fft.irfft2(f, shape)[: image.ny, : image.nx]
    return ReadbackImage(
        out, image.pixel_pitch_x, image.pixel_pitch_y, image.origin_x, image.origin_y
    )


def extract_prf_deconv(
    image: ReadbackImage,
    lattice: IslandLattice,
    bits: np.ndarray,
    lp_fwhm: float = 5.0,
    *,
    window_half_x: float = DEFAULT_CROP_HALF_X,
    window_half_y: float = DEFAULT_CROP_HALF_Y,
    regularization: float = 1e-3,
    band_floor: float = 0.01,
) -> ResponseKernel:
    """Kernel estimate by deconvolving the bit train from the image.

    Works in the frequency domain with a Gaussian low-pass ``F_LP`` applied
    to the image and a Tikhonov floor (``regularization`` times the spectrum
    peak, added in quadrature) protecting spectral nulls of the bit train.
    The returned kernel is the low-pass-filtered response; deconvolving
    ``F_LP`` itself is unnecessary when decoding uses the filtered image.
    """
    pitch = _kernel_pitch(image)
    raster = rasterize_bits(image, lattice, bits)
    wx, wy = _crop_window(image, window_half_x, window_half_y)
    shape = (next_fast_len(image.ny + 2 * wy + 1), next_fast_len(image.nx + 2 * wx + 1))
    df = np.fft.rfft2(image.data, shape)
    bf = np.fft.rfft2(raster, shape)
    flp = _lp_transfer(shape, (image.pixel_pitch_y, image.pixel_pitch_x), lp_fwhm)

    bmag = np.abs(bf)
    eps = regularization * float(bmag.max())
    band = flp > band_floor
    weak = float(np.mean(bmag[band] < eps)) if band.any() else 1.0
    if weak > 0.20:
        raise IllConditionedDeconvolutionError(
            f"bit-train spectrum below the regularization floor over {weak:.0%} of the kept band"
        )
    rf = df * flp * np.conj(bf) / (bmag**2 + eps**2)
    rec = np.fft.irfft2(rf, shape)
    return ResponseKernel(_wrap_crop(rec, wy, wx), pitch, float(wx), float(wy))


def threshold_decode(samples: np.ndarray) -> BitAssignment:
    """Sign detector: ``b_i = sign(sample_i)`` with exact zeros mapped to +1."""
    samples = np.asarray(samples, dtype=float)
    bits = np.where(samples >= 0.0, 1, -1).astype(np.int8)
    return BitAssignment(bits, np.abs(samples))


@dataclass
class PrfIterationResult:
    kernel: ResponseKernel
    assignment: BitAssignment
    iterations: int
    converged: bool


def iterate_prf(
    image: ReadbackImage,
    lattice: IslandLattice,
    decoder: str = "sieve",
    max_iters: int = 8,
    *,
    lp_fwhm: float = 5.0,
    window_half_x: float = DEFAULT_CROP_HALF_X,
    window_half_y: float = DEFAULT_CROP_HALF_Y,
    weights: viterbi2d.ErrorWeights | None = None,
    change_tolerance: float = 1e-2,
) -> PrfIterationResult:
    """Bootstrap bits by thresholding, then alternate deconvolution and decoding.

    Stops when an iteration changes fewer than ``change_tolerance`` of the
    bits; otherwise returns the last iterate with ``converged=False``.  At
    realistic noise a fraction of marginal islands keeps trading places
    between otherwise-identical decodes (a few tenths of a percent), so the
    tolerance marks where refinement stops rather than demanding bitwise
    identity.
    """
    if decoder not in ("sieve", "viterbi"):
        raise ValueError(f"unknown decoder {decoder!r}")
    im_lp = lowpass_image(image, lp_fwhm)
    samples = sample_at_islands(im_lp, lattice.x, lattice.y)
    assign = threshold_decode(samples)

    kernel = None
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        kernel = extract_prf_deconv(
            image, lattice, assign.bits, lp_fwhm,
            window_half_x=window_half_x, window_half_y=window_half_y,
        )
        if decoder == "sieve":
            new_assign = sieve_mod.decode(samples, kernel, lattice).assignment
        else:
            model = viterbi2d.build_local_model(kernel, lattice)
            new_assign = viterbi2d.decode(
                samples, model, weights or viterbi2d.ErrorWeights.uniform(1.0)
            )
        changed = float(np.mean(new_assign.bits != assign.bits))
        assign = new_assign
        if changed < change_tolerance:
            converged = True
            break
    return PrfIterationResult(kernel, assign, iterations, converged)


@dataclass
class PrfValidation:
    curve_img: np.ndarray
    curve_model: np.ndarray
    rel_error: float


def validate_prf(
    image: ReadbackImage,
    lattice: IslandLattice,
    bits: np.ndarray,
    kernel: ResponseKernel,
    lp_fwhm: float = 5.0,
    *,
    window_half_x: float = DEFAULT_CROP_HALF_X,
    window_half_y: float = DEFAULT_CROP_HALF_Y,
) -> PrfValidation:
    """Gauge kernel/bit consistency by comparing two cross-correlations.

    The filtered image correlated with the bit train should match the
    model-side product (kernel convolved with the bit train, correlated with
    the bit train again) when both the kernel and the bits are right.
    """
    raster = rasterize_bits(image, lattice, bits)
    wx, wy = _crop_window(image, window_half_x, window_half_y)
    shape = (next_fast_len(image.ny + 2 * wy + 1), next_fast_len(image.nx + 2 * wx + 1))
    df = np.fft.rfft2(image.data, shape)
    bf = np.fft.rfft2(raster, shape)
    flp = _lp_transfer(shape, (image.pixel_pitch_y, image.pixel_pitch_x), lp_fwhm)

    c_img = _wrap_crop(np.fft.irfft2(df * flp * np.conj(bf), shape), wy, wx)

    emb = np.zeros(shape)
    ky, kx = kernel.data.shape
    rows = (np.arange(ky) - int(kernel.center_iy)) % shape[0]
    cols = (np.arange(kx) - int(kernel.center_ix)) % shape[1]
    emb[np.ix_(rows, cols)] = kernel.data
    kf = np.fft.rfft2(emb)
    c_model = _wrap_crop(np.fft.irfft2(kf * bf * np.conj(bf), shape), wy, wx)

    denom = float(np.linalg.norm(c_img))
    rel = float(np.linalg.norm(c_img - c_model)) / denom if denom > 0 else 0.0
    if denom == 0 and float(np.linalg.norm(c_model)) == 0:
        rel = 0.0
    return PrfValidation(c_img, c_model, rel)
