"""Island lattices and their recovery from readback images.

A rectangular island lattice makes the readback image periodic along the
down-track (DT) and cross-track (CT) axes.  Rectifying the image (absolute
value) concentrates spectral power at the lattice frequency; fitting short
windowed segments to ``A*cos(k*x + phi)`` yields local amplitude, wavevector
and phase.  Islands sit wherever both unwrapped total phases cross integer
multiples of 2*pi, which localizes them even when drift distorts the lattice
image by tens of nanometres over a scan.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from ._rng import substream

DEFECT_NONE = 0
DEFECT_MISSING = 1
DEFECT_MERGED = 2

DEFECT_NAMES = {DEFECT_NONE: "none", DEFECT_MISSING: "missing", DEFECT_MERGED: "merged"}
DEFECT_CODES = {v: k for k, v in DEFECT_NAMES.items()}


class LatticeNotDetectedError(ValueError):
    """No periodic lattice signal found in the fitted segment(s)."""


@dataclass(frozen=True)
class LatticeParams:
    """Geometry and disorder statistics of an island lattice (lengths in nm)."""

    bit_pitch_dt: float = 18.5
    track_pitch_ct: float = 22.0
    sigma_pos_dt: float = 1.1
    sigma_pos_ct: float = 1.2
    sigma_size: float = 0.0
    defect_rate: float = 0.0
    extent_dt: float = 1000.0
    extent_ct: float = 300.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.bit_pitch_dt <= 0 or self.track_pitch_ct <= 0:
            raise ValueError("pitches must be positive")
        if self.sigma_pos_dt < 0 or self.sigma_pos_ct < 0 or self.sigma_size < 0:
            raise ValueError("sigmas must be non-negative")
        if not 0.0 <= self.defect_rate < 1.0:
            raise ValueError("defect_rate must be in [0, 1)")
        if self.extent_dt < self.bit_pitch_dt or self.extent_ct < self.track_pitch_ct:
            raise ValueError("degenerate lattice: extent smaller than one pitch")


@dataclass
class IslandLattice:
    """Rectangular lattice of magnetic islands with per-island jitter and defects.

    Islands are stored row-major: island ``id = row * n_cols + col`` where rows
    run cross-track and columns down-track.  ``x``/``y`` are actual (jittered)
    positions; nominal grid positions are recoverable from the indices.
    """

    params: LatticeParams
    n_rows: int
    n_cols: int
    x: np.ndarray
    y: np.ndarray
    scale: np.ndarray
    defect: np.ndarray
    merge_partner: np.ndarray

    @property
    def n_islands(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.n_islands)

    @property
    def rows(self) -> np.ndarray:
        return self.ids // self.n_cols

    @property
    def cols(self) -> np.ndarray:
        return self.ids % self.n_cols

    @property
    def active(self) -> np.ndarray:
        """Mask of islands that physically exist (not missing)."""
        return self.defect != DEFECT_MISSING

    def nominal_x(self) -> np.ndarray:
        return (self.cols + 0.5) * self.params.bit_pitch_dt

    def nominal_y(self) -> np.ndarray:
        return (self.rows + 0.5) * self.params.track_pitch_ct

    def positions(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])


def generate_lattice(params: LatticeParams, *, island_size_nm: float = 16.0) -> IslandLattice:
    """Draw a jittered, defected island lattice.

    Positions get independent Gaussian offsets (``sigma_pos_dt``/``ct``) about
    the nominal grid.  ``magnetization_scale`` is Gaussian with mean 1 and
    std ``sigma_size / island_size_nm`` (zero by default; amplitude variation
    normally enters the channel as media noise instead).  Defects are i.i.d.
    at ``defect_rate``, split evenly between missing and merged; a merged
    island shares the bit of its down-track predecessor.  Deterministic for a
    fixed ``params.rng_seed``.
    """
    params.validate()
    n_cols = int(params.extent_dt // params.bit_pitch_dt)
    n_rows = int(params.extent_ct // params.track_pitch_ct)
    if n_cols < 1 or n_rows < 1:
        raise ValueError("degenerate lattice: extent smaller than one pitch")
    n = n_rows * n_cols

    rng = substream(params.rng_seed, "lattice")
    cols = np.arange(n) % n_cols
    rows = np.arange(n) // n_cols
    x = (cols + 0.5) * params.bit_pitch_dt + rng.normal(0.0, params.sigma_pos_dt, n)
    y = (rows + 0.5) * params.track_pitch_ct + rng.normal(0.0, params.sigma_pos_ct, n)

    scale_sigma = params.sigma_size / island_size_nm if params.sigma_size > 0 else 0.0
    scale = np.ones(n) if scale_sigma == 0.0 else rng.normal(1.0, scale_sigma, n)

    defect = np.zeros(n, dtype=np.int8)
    merge_partner = np.full(n, -1, dtype=np.int32)
    if params.defect_rate > 0:
        u = rng.random(n)
        bad = u < params.defect_rate
        kind = rng.random(n) < 0.5
        defect[bad & kind] = DEFECT_MISSING
        merged = bad & ~kind
        defect[merged] = DEFECT_MERGED
        idx = np.nonzero(merged)[0]
        partner = np.where(cols[idx] > 0, idx - 1, idx + 1)
        partner = np.clip(partner, 0, n - 1)
        merge_partner[idx] = partner

    return IslandLattice(params, n_rows, n_cols, x, y, scale, defect, merge_partner)


def distort_lattice(
    lattice: IslandLattice,
    dx: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    dy: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> IslandLattice:
    """Apply a smooth position distortion field, e.g. a cumulative scan stretch."""
    x = lattice.x + (dx(lattice.x, lattice.y) if dx is not None else 0.0)
    y = lattice.y + (dy(lattice.x, lattice.y) if dy is not None else 0.0)
    return replace(lattice, x=np.asarray(x, float), y=np.asarray(y, float))


# ---------------------------------------------------------------------------
# Windowed cosine fits


@dataclass
class SegmentFit:
    amplitude: float
    wavevector: float
    phase: float
    residual_ratio: float


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _fit_segments(
    signals: np.ndarray,
    sample_pitch: float,
    pitch_hint: float,
    k_span: float = 0.2,
    n_coarse: int = 401,
    refine_iters: int = 30,
    detrend: bool = True,
):
    """Fit ``A*cos(k*x + phi)`` to each row of ``signals``.

    The cosine model has no DC term, so the local baseline is removed first:
    a running average over one nominal period, which passes the lattice
    frequency unattenuated while suppressing the slow envelope power that
    rectification leaves behind (domain patterns, bit-run beats).  The
    wavevector is located by a coarse grid over ``k`` (closed-form
    amplitude/phase per candidate via linear least squares on a cos/sin
    basis) followed by a golden-section refinement, which resolves ``k``
    well below the FFT bin width of the segment.  Phase is referenced to the
    first sample of the segment.

    Returns arrays ``(amplitude, wavevector, phase, residual_ratio)``, one
    entry per row.
    """
    from scipy.ndimage import uniform_filter1d

    sig = np.asarray(signals, dtype=float)
    n = sig.shape[1]
    x = np.arange(n) * sample_pitch
    if detrend:
        window = max(3, int(round(pitch_hint / sample_pitch)))
        sig = sig - uniform_filter1d(sig, window, axis=1, mode="nearest")
        # The running average is biased within half a window of the ends;
        # keep the phase reference but fit on the interior only.
        half = window // 2 + 1
        if n - 2 * half >= window:
            sig = sig[:, half : n - half]
            x = x[half : n - half]
    sig = sig - sig.mean(axis=1, keepdims=True)
    ss_tot = np.einsum("ij,ij->i", sig, sig)
    k0 = 2.0 * np.pi / pitch_hint
    ks = k0 * np.linspace(1.0 - k_span, 1.0 + k_span, n_coarse)

    def explained(k_vec):
        # k_vec: (m, q) candidate wavevectors per row; returns explained energy
        # plus the LSQ coefficients (a, b) of the cos/sin basis.
        ph = x[None, None, :] * k_vec[:, :, None]
        c = np.cos(ph)
        s = np.sin(ph)
        sc = np.einsum("ij,iqj->iq", sig, c)
        ssn = np.einsum("ij,iqj->iq", sig, s)
        cc = np.einsum("iqj,iqj->iq", c, c)
        ss = np.einsum("iqj,iqj->iq", s, s)
        cs = np.einsum("iqj,iqj->iq", c, s)
        det = cc * ss - cs * cs
        det = np.where(np.abs(det) < 1e-30, 1e-30, det)
        a = (sc * ss - ssn * cs) / det
        b = (ssn * cc - sc * cs) / det
        return a * sc + b * ssn, a, b

    # Coarse pass: all rows share the k grid, so a single GEMM does the work.
    c = np.cos(np.outer(x, ks))
    s = np.sin(np.outer(x, ks))
    sc = sig @ c
    ssn = sig @ s
    cc = np.einsum("ij,ij->j", c, c)
    ss = np.einsum("ij,ij->j", s, s)
    cs = np.einsum("ij,ij->j", c, s)
    det = np.where(np.abs(cc * ss - cs * cs) < 1e-30, 1e-30, cc * ss - cs * cs)
    a = (sc * ss - ssn * cs) / det
    b = (ssn * cc - sc * cs) / det
    expl = a * sc + b * ssn
    best = np.argmax(expl, axis=1)

    # Golden-section refinement per row, vectorized across rows.
    lo = ks[np.maximum(best - 1, 0)]
    hi = ks[np.minimum(best + 1, n_coarse - 1)]
    c1 = hi - _GOLDEN * (hi - lo)
    c2 = lo + _GOLDEN * (hi - lo)
    f1 = explained(np.column_stack([c1, c2]))[0]
    f2 = f1[:, 1]
    f1 = f1[:, 0]
    for _ in range(refine_iters):
        take_left = f1 >= f2
        hi = np.where(take_left, c2, hi)
        lo = np.where(take_left, lo, c1)
        c1 = hi - _GOLDEN * (hi - lo)
        c2 = lo + _GOLDEN * (hi - lo)
        fnew = explained(np.column_stack([np.where(take_left, c1, c2)]))[0][:, 0]
        f2_new = np.where(take_left, f1, fnew)
        f1_new = np.where(take_left, fnew, f2)
        f1, f2 = f1_new, f2_new
    k_best = 0.5 * (lo + hi)

    expl_f, a_f, b_f = explained(k_best[:, None])
    expl_f = expl_f[:, 0]
    a_f = a_f[:, 0]
    b_f = b_f[:, 0]
    amp = np.hypot(a_f, b_f)
    phase = np.arctan2(-b_f, a_f)
    with np.errstate(invalid="ignore", divide="ignore"):
        res_ratio = np.where(ss_tot > 0, 1.0 - expl_f / ss_tot, 1.0)
    return amp, k_best, phase, np.clip(res_ratio, 0.0, 1.0)


def fit_segment(
    signal: np.ndarray,
    sample_pitch: float,
    pitch_hint: float,
    *,
    k_span: float = 0.2,
    max_residual_ratio: float = 0.9,
) -> SegmentFit:
    """Fit one rectified readback segment to ``A*cos(k*x + phi)``.

    ``pitch_hint`` must be within the searched band (default +-20%) of the
    true lattice pitch.  The segment mean is removed before fitting since
    the cosine model carries no DC term.  Raises
    :class:`LatticeNotDetectedError` when the fit leaves more than
    ``max_residual_ratio`` of the signal variance unexplained.
    """
    signal = np.asarray(signal, dtype=float)
    if signal.ndim != 1:
        raise ValueError("signal must be 1D")
    amp, k, phi, res = _fit_segments(signal[None, :], sample_pitch, pitch_hint, k_span=k_span)
    fit = SegmentFit(float(amp[0]), float(k[0]), float(phi[0]), float(res[0]))
    if fit.residual_ratio > max_residual_ratio:
        raise LatticeNotDetectedError(
            f"no lattice detected: residual ratio {fit.residual_ratio:.3f}"
        )
    return fit


# ---------------------------------------------------------------------------
# Phase fields


@dataclass
class PhaseField:
    """Local lattice parameters on a (line, segment) grid.

    ``phase`` holds the unwrapped total phase ``k*u + phi`` evaluated at the
    segment centers, where ``u`` is the coordinate along the fit axis
    (x for DT, y for CT).  ``line_pos`` is the transverse coordinate of each
    fitted line.
    """

    direction: str
    line_pos: np.ndarray
    seg_pos: np.ndarray
    amplitude: np.ndarray
    wavevector: np.ndarray
    phase: np.ndarray
    valid: np.ndarray
    axis_lo: float = 0.0
    axis_hi: float = 0.0
    #: fraction of cells whose fit cleared the residual criterion, before
    #: the deliberate weak-line and consistency culls.
    detected_fraction: float = 1.0

    @property
    def n_lines(self) -> int:
        return len(self.line_pos)

    @property
    def n_segments(self) -> int:
        return len(self.seg_pos)

    def deviation_nm(self) -> np.ndarray:
        """Phase deviation from its best-fit linear trend, in length units.

        This is the map form used to visualize scan distortion: subtract a
        plane (linear in segment position and line position) from the
        unwrapped phase and divide by the mean wavevector.  NaN where
        invalid.
        """
        k_mean = np.nanmean(np.where(self.valid, self.wavevector, np.nan))
        uu = np.broadcast_to(self.seg_pos[None, :], self.phase.shape)
        vv = np.broadcast_to(self.line_pos[:, None], self.phase.shape)
        m = self.valid
        design = np.column_stack([uu[m], vv[m], np.ones(m.sum())])
        coef, *_ = np.linalg.lstsq(design, self.phase[m], rcond=None)
        trend = coef[0] * uu + coef[1] * vv + coef[2]
        dev = np.where(m, self.phase - trend, np.nan)
        return dev / k_mean


def _segment_grid(n_samples: int, pitch: float, target_length: float, min_periods_nm: float):
    """Split an axis into equal segments near ``target_length``; returns
    (n_segments, samples_per_segment)."""
    total = n_samples * pitch
    n_seg = max(1, int(total // target_length))
    while n_seg > 1 and (n_samples // n_seg) * pitch < min_periods_nm:
        n_seg -= 1
    return n_seg, n_samples // n_seg


def _unwrap_line(phi_wrapped, k_vals, positions, valid):
    """Unwrap per-segment phases along one line.

    Predicting the next center's phase across a multi-period gap needs a
    wavevector far more accurate than a single noisy cell provides, so the
    line median of the valid cells' wavevectors is used for prediction.
    """
    out = np.full_like(phi_wrapped, np.nan)
    if not valid.any():
        return out
    k_ref = float(np.median(k_vals[valid]))
    prev_idx = -1
    for j in range(len(phi_wrapped)):
        if not valid[j]:
            continue
        total = phi_wrapped[j]
        if prev_idx < 0:
            out[j] = total
        else:
            pred = out[prev_idx] + k_ref * (positions[j] - positions[prev_idx])
            out[j] = total + 2.0 * np.pi * np.round((pred - total) / (2.0 * np.pi))
        prev_idx = j
    return out


def _extract_field(
    data: np.ndarray,
    axis_pitch: float,
    line_pos: np.ndarray,
    axis_origin: float,
    pitch_hint: float,
    segment_length: float,
    direction: str,
    max_residual_ratio: float = 0.9,
    min_line_strength: float = 0.35,
) -> PhaseField:
    """Fit every (line, segment) cell of ``data`` (lines on axis 0) and
    assemble an unwrapped phase field.

    Lines whose mean fitted amplitude falls below ``min_line_strength`` of
    the strong-line level are invalidated wholesale: between island rows the
    residual ripple is faint and its phase untrustworthy, and letting the
    line-to-line anchoring chain through such lines causes 2*pi slips.
    """
    n_lines, n_samples = data.shape
    n_seg, spseg = _segment_grid(n_samples, axis_pitch, segment_length, 10.0 * pitch_hint)
    used = n_seg * spseg
    sigs = data[:, :used].reshape(n_lines * n_seg, spseg)
    amp, k, phi, res = _fit_segments(sigs, axis_pitch, pitch_hint)
    amp = amp.reshape(n_lines, n_seg)
    k = k.reshape(n_lines, n_seg)
    phi = phi.reshape(n_lines, n_seg)
    valid = (res < max_residual_ratio).reshape(n_lines, n_seg)
    detected_fraction = float(valid.mean())
    if min_line_strength > 0 and valid.any():
        counts = valid.sum(axis=1)
        strength = np.where(counts > 0, np.where(valid, amp, 0.0).sum(axis=1), 0.0)
        strength /= np.maximum(counts, 1)
        floor = min_line_strength * np.percentile(strength, 95)
        valid &= (strength >= floor)[:, None]

    seg_start = axis_origin + np.arange(n_seg) * spseg * axis_pitch
    center_local = 0.5 * (spseg - 1) * axis_pitch
    seg_pos = seg_start + center_local

    # Total phase at each segment center.  Every cell is branch-aligned
    # directly against one reference line (the strongest), rather than
    # chaining unwraps within and across lines: the lattice phase differs
    # between lines by far less than pi, so a per-cell 2*pi rounding to the
    # reference is exact and a single bad cell cannot corrupt its neighbors.
    phase_c = phi + k * center_local
    if not valid.any():
        raise LatticeNotDetectedError("no valid segment fits")
    counts = valid.sum(axis=1)
    line_amp = np.where(valid, amp, 0.0).sum(axis=1) / np.maximum(counts, 1)
    i_ref = int(np.argmax(line_amp * (counts == counts.max())))
    ref = _unwrap_line(phase_c[i_ref], k[i_ref], seg_pos, valid[i_ref])
    ok = np.isfinite(ref)
    if ok.sum() < len(ref):
        k_med = float(np.median(k[i_ref][valid[i_ref]]))
        filled = np.interp(seg_pos, seg_pos[ok], ref[ok])
        lo, hi = np.nonzero(ok)[0][[0, -1]]
        filled[:lo] = ref[lo] + k_med * (seg_pos[:lo] - seg_pos[lo])
        filled[hi + 1 :] = ref[hi] + k_med * (seg_pos[hi + 1 :] - seg_pos[hi])
        ref = filled
    two_pi = 2.0 * np.pi
    phase = phase_c + two_pi * np.round((ref[None, :] - phase_c) / two_pi)
    phase[~valid] = np.nan

    # Lines vary from the reference by well under a radian (the lattice is
    # rectangular and drift moves all lines together); a cell stranded far
    # from the reference has locked onto something other than the lattice.
    with np.errstate(invalid="ignore"):
        valid &= np.abs(phase - ref[None, :]) < 2.0
    valid &= np.isfinite(phase)
    return PhaseField(
        direction, np.asarray(line_pos, float), seg_pos, amp, k, phase, valid,
        axis_lo=axis_origin, axis_hi=axis_origin + used * axis_pitch,
        detected_fraction=detected_fraction,
    )


def extract_phase_fields(
    image,
    segment_length: float = 750.0,
    *,
    pitch_hint_dt: float = 18.5,
    pitch_hint_ct: float = 22.0,
    max_invalid_frac: float = 0.5,
) -> tuple[PhaseField, PhaseField]:
    """Extract DT and CT phase fields from a readback image.

    The DT field comes from per-segment cosine fits on each scan line of the
    rectified image.  The CT field is then fit across lines of the DT
    amplitude map rather than the raw image, which keeps the cross-track
    analysis insensitive to down-track phase structure.
    """
    rect = np.abs(image.data)
    ny, nx = rect.shape
    if nx * image.pixel_pitch_x < 10.0 * pitch_hint_dt:
        raise ValueError("image spans fewer than 10 bit pitches down-track")
    if ny * image.pixel_pitch_y < 3.0 * pitch_hint_ct:
        raise ValueError("image spans fewer than 3 tracks cross-track")

    # Trim signal-free margins so the fitted span ends near the lattice
    # edge: the phase otherwise extrapolates happily into empty margin and
    # reports phantom rows and columns there, and margin cells would count
    # against the detection statistics.
    col_strength = rect.mean(axis=0)
    floor_c = 0.3 * np.percentile(col_strength, 95)
    strong_c = np.nonzero(col_strength >= floor_c)[0]
    row_strength = rect.mean(axis=1)
    floor_r = 0.3 * np.percentile(row_strength, 95)
    strong_r = np.nonzero(row_strength >= floor_r)[0]
    if len(strong_c) == 0 or len(strong_r) == 0:
        raise LatticeNotDetectedError("image has no signal above the margin floor")
    col_lo, col_hi = int(strong_c[0]), int(strong_c[-1]) + 1
    row_lo, row_hi = int(strong_r[0]), int(strong_r[-1]) + 1
    rect = rect[row_lo:row_hi, col_lo:col_hi]

    y_pos = image.origin_y + np.arange(row_lo, row_hi) * image.pixel_pitch_y
    field_dt = _extract_field(
        rect, image.pixel_pitch_x, y_pos,
        image.origin_x + col_lo * image.pixel_pitch_x,
        pitch_hint_dt, segment_length, "DT",
    )
    if field_dt.detected_fraction < (1.0 - max_invalid_frac):
        raise LatticeNotDetectedError(
            f"no lattice detected in {1 - field_dt.detected_fraction:.0%} of DT cells"
        )

    # CT analysis on |A(x, y)|: lines are now the DT segment columns.  The
    # raw fitted amplitude is used for every image row; the bright/dark row
    # contrast IS the cross-track lattice signal, and rows that failed the
    # phase-validity culls still carry genuine amplitude.
    amp_map = field_dt.amplitude.T  # (n_seg_dt, n_rows)
    field_ct = _extract_field(
        amp_map, image.pixel_pitch_y, field_dt.seg_pos, float(field_dt.line_pos[0]),
        pitch_hint_ct, segment_length, "CT",
    )
    if field_ct.detected_fraction < (1.0 - max_invalid_frac):
        raise LatticeNotDetectedError(
            f"no lattice detected in {1 - field_ct.detected_fraction:.0%} of CT cells"
        )
    return field_dt, field_ct


def _line_phase_knots(field: PhaseField, i: int):
    """Piecewise-linear (position, phase) knots for one line, extended to the
    spans of the outermost valid segments with the local wavevector."""
    v = field.valid[i]
    if not v.any():
        return None
    width = (field.axis_hi - field.axis_lo) / field.n_segments
    us = field.seg_pos[v]
    ph = field.phase[i, v]
    ks = field.wavevector[i, v]
    idx = np.nonzero(v)[0]
    lo = field.axis_lo + idx[0] * width
    hi = field.axis_lo + (idx[-1] + 1) * width
    pos = [lo] + list(us) + [hi]
    phi = (
        [ph[0] - ks[0] * (us[0] - lo)]
        + list(ph)
        + [ph[-1] + ks[-1] * (hi - us[-1])]
    )
    return np.asarray(pos), np.asarray(phi)


def _crossing_valid_mask(field: PhaseField, i: int, positions: np.ndarray) -> np.ndarray:
    """True where a crossing position falls inside a valid segment's span
    (half a nominal period of slack at the edges)."""
    width = (field.axis_hi - field.axis_lo) / field.n_segments
    k_med = np.nanmedian(np.where(field.valid, field.wavevector, np.nan))
    slack = np.pi / k_med if np.isfinite(k_med) and k_med > 0 else 0.0
    j = np.floor((positions - field.axis_lo) / width).astype(int)
    ok = np.zeros(len(positions), dtype=bool)
    inb = (j >= 0) & (j < field.n_segments)
    ok[inb] = field.valid[i][j[inb]]
    # Allow the slack band around valid segments' edges.
    for jj in np.nonzero(field.valid[i])[0]:
        lo = field.axis_lo + jj * width - slack
        hi = field.axis_lo + (jj + 1) * width + slack
        ok |= (positions >= lo) & (positions <= hi)
    return ok


def _phase_crossings(field: PhaseField):
    """Positions along the fit axis where the unwrapped phase crosses 2*pi*m.

    Returns (m_values, crossings) with ``crossings[i, line]`` the position of
    phase 2*pi*m_values[i] on that line (NaN where out of range).  Within
    and beyond segment centers the phase is taken piecewise linear with the
    fitted local wavevector.
    """
    two_pi = 2.0 * np.pi
    knots = [_line_phase_knots(field, i) for i in range(field.n_lines)]
    los = [np.ceil(k[1].min() / two_pi) for k in knots if k is not None]
    his = [np.floor(k[1].max() / two_pi) for k in knots if k is not None]
    if not los or max(his) < min(los):
        raise LatticeNotDetectedError("phase fields cover no full lattice period")
    lo = int(min(los))
    hi = int(max(his))
    ms = np.arange(lo, hi + 1)
    out = np.full((len(ms), field.n_lines), np.nan)
    targets = two_pi * ms
    for i, kn in enumerate(knots):
        if kn is None:
            continue
        pos, phi = kn
        inside = (targets >= phi[0]) & (targets <= phi[-1])
        cross = np.interp(targets[inside], phi, pos)
        keep = _crossing_valid_mask(field, i, cross)
        vals = np.where(keep, cross, np.nan)
        out[inside, i] = vals
    return ms, out


def _interp_lines(values: np.ndarray, line_pos: np.ndarray, at: np.ndarray) -> np.ndarray:
    """Row-wise linear interpolation: ``out[i] = interp(at[i])`` over the
    per-line samples ``values[i]``."""
    at = np.clip(at, line_pos[0], line_pos[-1])
    idx = np.clip(np.searchsorted(line_pos, at) - 1, 0, len(line_pos) - 2)
    w = (at - line_pos[idx]) / (line_pos[idx + 1] - line_pos[idx])
    rows = np.arange(values.shape[0])
    return values[rows, idx] * (1.0 - w) + values[rows, idx + 1] * w


def island_locations(field_dt: PhaseField, field_ct: PhaseField) -> np.ndarray:
    """Island positions implied by the two phase fields.

    One location per integer pair (m, n) where the DT phase crosses 2*pi*m
    and the CT phase crosses 2*pi*n, interpolated between field cells.  The
    crossing curves are nearly axis-aligned, so a few fixed-point sweeps of
    alternating interpolation converge to the intersection.

    Returns an (N, 2) array of [x, y] in nm.
    """
    ms, x_cross = _phase_crossings(field_dt)   # x of DT crossings per image line (y)
    ns, y_cross = _phase_crossings(field_ct)   # y of CT crossings per DT column (x)
    y_lines = field_dt.line_pos
    x_cols = field_ct.line_pos
    track_pitch = 2.0 * np.pi / np.median(field_ct.wavevector[field_ct.valid])

    from scipy.ndimage import median_filter

    # Per-m crossing curves x_m(y), each over the lines where it is defined.
    # The curves are nearly vertical, so a short running median across lines
    # rejects isolated outlier lines without distorting real structure.
    curves = []
    for i in range(len(ms)):
        ok = np.isfinite(x_cross[i])
        if ok.sum() < 1:
            curves.append(None)
            continue
        cx = x_cross[i, ok]
        if len(cx) >= 5:
            cx = median_filter(cx, size=5, mode="nearest")
        curves.append((y_lines[ok], cx))

    pts = []
    for j, _n in enumerate(ns):
        yc = y_cross[j]            # (n_cols,) y of this CT crossing vs x
        ok_c = np.isfinite(yc)
        if ok_c.sum() < 1:
            continue
        for i, curve in enumerate(curves):
            if curve is None:
                continue
            cy, cx = curve
            x = float(np.median(cx))
            y = np.nan
            for _ in range(3):
                y = float(np.interp(x, x_cols[ok_c], yc[ok_c]))
                if not (cy[0] - track_pitch <= y <= cy[-1] + track_pitch):
                    y = np.nan
                    break
                x = float(np.interp(y, cy, cx))
            if np.isfinite(y):
                pts.append((x, y))
    if not pts:
        return np.empty((0, 2))
    return np.asarray(pts)
