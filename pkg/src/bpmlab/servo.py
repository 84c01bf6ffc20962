"""Head trajectories, servo lines, and write registration.

The static-tester head does not move linearly: friction can slow or deflect
it by tens of nanometres over a scan.  A servo line (readback acquired while
writing) cross-correlated against a previously acquired servo image recovers
the actual head path, from which the down-track write phase and cross-track
offset of every write event follow.

The write process itself is modeled phenomenologically: a write event
reverses an island when the event's registration plus a Gaussian jitter of
scale ``sigma_eff / sqrt(2)`` lands inside the bit cell (down-track) and the
write bubble (cross-track).  This makes the on-track error rate follow the
erfc law that the fitting code assumes, with the injected sigmas as ground
truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import uniform_filter1d
from scipy.signal import correlate
from scipy.spatial import cKDTree

from ._rng import substream
from .channel import ReadbackImage, sample_at_islands
from .lattice import DEFECT_MISSING, IslandLattice


@dataclass
class Trajectory:
    """Head positions per time sample, plus the write-clock edge indices."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    clock_edges: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.t)


@dataclass
class ServoLine:
    """1D readback acquired along a trajectory.

    ``nominal_x0`` and ``sample_pitch`` describe the commanded scan (sample
    ``i`` was nominally at ``nominal_x0 + i * sample_pitch``); the actual
    positions deviate from this by the drift that reconstruction recovers.
    """

    samples: np.ndarray
    sample_pitch: float
    nominal_x0: float = 0.0


@dataclass(frozen=True)
class DriftModel:
    """Smooth low-frequency head-motion error.

    The deviation is a sum of random-phase sinusoids plus a heavily smoothed
    random walk, rescaled so its largest down-track excursion equals
    ``max_deviation_dt * scan_length / reference_length`` (50 nm per 30 um
    by default): friction builds one cumulative excursion over a scan, so
    the sinusoid periods default to the scan length and longer.  Cross-track
    drift uses the same shape machinery with its own budget.
    """

    max_deviation_dt: float = 50.0
    max_deviation_ct: float = 15.0
    reference_length: float = 30000.0
    n_sinusoids: int = 3
    walk_fraction: float = 0.2
    min_period: float | None = None


def _drift_shape(n: int, pitch: float, model: DriftModel, rng: np.random.Generator) -> np.ndarray:
    x = np.arange(n) * pitch
    total = n * pitch
    period_lo = model.min_period if model.min_period is not None else total
    out = np.zeros(n)
    for _ in range(model.n_sinusoids):
        period = rng.uniform(period_lo, 2.0 * period_lo)
        out += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * x / period + rng.uniform(0, 2 * np.pi))
    if model.walk_fraction > 0:
        walk = np.cumsum(rng.normal(0, 1, n))
        walk = uniform_filter1d(walk, max(3, n // 8), mode="nearest")
        span = np.ptp(walk)
        if span > 0:
            out += model.walk_fraction * (walk - walk.mean()) / span * 2.0
    return out


def simulate_trajectory(
    scan_length: float,
    drift: DriftModel | None = None,
    *,
    sample_pitch: float = 2.0,
    y_center: float = 0.0,
    x_start: float = 0.0,
    clock_pitch: float = 18.5,
    clock_phase: float = 0.0,
    seed: int = 0,
) -> Trajectory:
    """Constant-velocity scan plus smooth drift, deterministic per seed.

    Write-clock edges fire at fixed time intervals, i.e. wherever the
    nominal position crosses ``k * clock_pitch + clock_phase``; motion error
    therefore shows up as write phase error, and the clock phase sets where
    the writes land within the bit cell.
    """
    if scan_length <= 0:
        raise ValueError("scan_length must be positive")
    n = int(round(scan_length / sample_pitch)) + 1
    x_nom = x_start + np.arange(n) * sample_pitch
    dx = np.zeros(n)
    dy = np.zeros(n)
    if drift is not None:
        rng = substream(seed, "trajectory")
        budget = scan_length / drift.reference_length
        for arr, amp in ((dx, drift.max_deviation_dt), (dy, drift.max_deviation_ct)):
            if amp <= 0:
                continue
            shape = _drift_shape(n, sample_pitch, drift, rng)
            peak = np.max(np.abs(shape))
            if peak > 0:
                arr += shape * (amp * budget / peak)
    ticks = np.floor((x_nom - clock_phase) / clock_pitch).astype(int)
    edges = np.nonzero(np.diff(ticks) > 0)[0] + 1
    return Trajectory(np.arange(n), x_nom + dx, y_center + dy, edges)


def read_servo_line(
    servo_image: ReadbackImage,
    trajectory: Trajectory,
    read_snr_db: float | None = None,
    *,
    seed: int = 0,
    sample_pitch: float | None = None,
) -> ServoLine:
    """Interpolate the servo image along the trajectory and add read noise.

    Noise sigma is the noiseless line std divided by the read SNR (amplitude
    ratio), mirroring the image-domain convention.
    """
    x, y = trajectory.x, trajectory.y
    x_max = servo_image.origin_x + (servo_image.nx - 1) * servo_image.pixel_pitch_x
    y_max = servo_image.origin_y + (servo_image.ny - 1) * servo_image.pixel_pitch_y
    outside = (
        (x < servo_image.origin_x) | (x > x_max) | (y < servo_image.origin_y) | (y > y_max)
    )
    if outside.any():
        raise ValueError(f"trajectory exits the servo image at index {int(np.argmax(outside))}")
    vals = sample_at_islands(servo_image, x, y)
    if read_snr_db is not None:
        sigma = float(np.std(vals)) / 10.0 ** (read_snr_db / 20.0)
        vals = vals + substream(seed, "servo-read-noise").normal(0.0, sigma, len(vals))
    # Commanded-scan estimate: constant velocity fitted through the actual
    # path (drift averages out; residual offsets stay inside the search
    # window of the reconstruction).
    coef = np.polyfit(np.arange(len(x), dtype=float), x, 1)
    pitch = sample_pitch if sample_pitch is not None else float(coef[0])
    return ServoLine(vals, pitch, float(coef[1]))


def _parabolic_offset(fm, f0, fp):
    denom = fm - 2.0 * f0 + fp
    if abs(denom) < 1e-12:
        return 0.0
    return float(np.clip(0.5 * (fm - fp) / denom, -0.5, 0.5))


@dataclass
class SegmentMatch:
    t_center: float
    x: float
    y: float
    score: float
    trusted: bool


@dataclass
class ReconstructionResult:
    trajectory: Trajectory
    segments: list[SegmentMatch]

    @property
    def scores(self) -> np.ndarray:
        return np.array([s.score for s in self.segments])

    @property
    def trusted(self) -> np.ndarray:
        return np.array([s.trusted for s in self.segments])


def reconstruct_trajectory(
    servo_line: ServoLine,
    servo_image: ReadbackImage,
    segment_length: float = 1000.0,
    *,
    overlap: float = 0.5,
    max_offset: float = 100.0,
    min_correlation: float = 0.5,
) -> ReconstructionResult:
    """Recover the head path by normalized cross-correlation of line segments.

    Each segment is matched against the servo image over every row and a
    bounded down-track lag window, the peak refined to sub-pixel by
    quadratic interpolation in both axes, and the per-segment positions
    stitched into a smooth trajectory with a monotone cubic spline.
    Segments whose best correlation falls below ``min_correlation`` are
    flagged untrusted and excluded from the stitch.
    """
    px = servo_image.pixel_pitch_x
    py = servo_image.pixel_pitch_y
    line = np.asarray(servo_line.samples, dtype=float)
    if not np.isclose(servo_line.sample_pitch, px):
        # Resample the line onto the image pixel pitch.
        pos = np.arange(len(line)) * servo_line.sample_pitch
        new_pos = np.arange(0.0, pos[-1], px)
        line = np.interp(new_pos, pos, line)
        pitch_ratio = servo_line.sample_pitch / px
    else:
        pitch_ratio = 1.0
    # Column of the image nominally under sample 0.
    col0 = (servo_line.nominal_x0 - servo_image.origin_x) / px

    m = max(8, int(round(segment_length / px)))
    hop = max(1, int(round(m * (1.0 - overlap))))
    lag = int(round(max_offset / px))
    img = servo_image.data
    ny, nx = img.shape

    matches = []
    for a in range(0, len(line) - m + 1, hop):
        seg = line[a : a + m]
        seg0 = seg - seg.mean()
        seg_norm = float(np.sqrt(np.sum(seg0**2)))
        j_nom = int(round(col0 + a))  # nominal start column of this segment
        j_lo = max(0, j_nom - lag)
        j_hi = min(nx, j_nom + m + lag)
        sub = img[:, j_lo:j_hi]
        if sub.shape[1] < m or seg_norm == 0:
            continue
        dots = correlate(sub, seg0[None, :], mode="valid")  # (ny, n_lags)
        csum = np.cumsum(np.pad(sub, ((0, 0), (1, 0))), axis=1)
        csq = np.cumsum(np.pad(sub**2, ((0, 0), (1, 0))), axis=1)
        wsum = csum[:, m:] - csum[:, :-m]
        wsq = csq[:, m:] - csq[:, :-m]
        var = np.maximum(wsq - wsum**2 / m, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            ncc = dots / (np.sqrt(var) * seg_norm)
        ncc[~np.isfinite(ncc)] = 0.0

        r_best, d_best = np.unravel_index(np.argmax(ncc), ncc.shape)
        score = float(ncc[r_best, d_best])
        # Sub-pixel refinement along the lag axis and across rows.
        ddx = 0.0
        if 0 < d_best < ncc.shape[1] - 1:
            ddx = _parabolic_offset(*ncc[r_best, d_best - 1 : d_best + 2])
        ddy = 0.0
        if 0 < r_best < ny - 1:
            ddy = _parabolic_offset(*ncc[r_best - 1 : r_best + 2, d_best])

        center = 0.5 * (m - 1)
        x_c = servo_image.origin_x + (j_lo + d_best + ddx + center) * px
        y_c = servo_image.origin_y + (r_best + ddy) * py
        t_c = (a + center) / pitch_ratio
        matches.append(SegmentMatch(t_c, x_c, y_c, score, score >= min_correlation))

    n_t = int(round((len(servo_line.samples) - 1)))
    t = np.arange(n_t + 1)
    good = [s for s in matches if s.trusted]
    if len(good) >= 2:
        tc = np.array([s.t_center for s in good])
        sx = PchipInterpolator(tc, [s.x for s in good], extrapolate=True)
        sy = PchipInterpolator(tc, [s.y for s in good], extrapolate=True)
        x = sx(t)
        y = sy(t)
    elif len(good) == 1:
        x = good[0].x + (t - good[0].t_center) * servo_line.sample_pitch
        y = np.full_like(t, good[0].y, dtype=float)
    else:
        x = t * servo_line.sample_pitch
        y = np.zeros_like(t, dtype=float)
    return ReconstructionResult(Trajectory(t, np.asarray(x, float), np.asarray(y, float), np.array([], int)), matches)


# ---------------------------------------------------------------------------
# Write registration and the phenomenological writer


REGISTRATION_DTYPE = np.dtype(
    [("island", np.int64), ("edge", np.int64), ("phase", np.float64), ("ct_offset", np.float64)]
)


def write_registration(
    trajectory: Trajectory,
    lattice: IslandLattice,
    reader_writer_offset: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Down-track phase and cross-track offset of the writer at each clock edge.

    The writer sits at a fixed offset from the reader whose trajectory is
    known; each edge is registered against the nearest island.
    """
    if len(trajectory.clock_edges) == 0:
        raise ValueError("trajectory has no write clock edges")
    dx, dy = reader_writer_offset
    xw = trajectory.x[trajectory.clock_edges] + dx
    yw = trajectory.y[trajectory.clock_edges] + dy
    tree = cKDTree(np.column_stack([lattice.x, lattice.y]))
    _, idx = tree.query(np.column_stack([xw, yw]))
    out = np.empty(len(xw), dtype=REGISTRATION_DTYPE)
    out["island"] = idx
    out["edge"] = np.arange(len(xw))
    out["phase"] = xw - lattice.x[idx]
    out["ct_offset"] = yw - lattice.y[idx]
    return out


def pass_registrations(
    trajectory: Trajectory,
    lattice: IslandLattice,
    ct_window: float,
    reader_writer_offset: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Registration of every island within ``ct_window`` of the pass.

    For each such island the write attempt is the clock edge nearest in
    down-track position, which is what populates error-rate maps out to
    large cross-track offsets.
    """
    dx, dy = reader_writer_offset
    xw = trajectory.x[trajectory.clock_edges] + dx
    yw = trajectory.y[trajectory.clock_edges] + dy
    order = np.argsort(xw)
    xw_s = xw[order]

    near = np.clip(np.searchsorted(xw_s, lattice.x), 1, len(xw_s) - 1)
    left = near - 1
    pick = np.where(
        np.abs(xw_s[near] - lattice.x) < np.abs(xw_s[left] - lattice.x), near, left
    )
    edge = order[pick]
    ct = yw[edge] - lattice.y
    keep = np.abs(ct) <= ct_window
    out = np.empty(int(keep.sum()), dtype=REGISTRATION_DTYPE)
    out["island"] = lattice.ids[keep]
    out["edge"] = edge[keep]
    out["phase"] = (xw[edge] - lattice.x)[keep]
    out["ct_offset"] = ct[keep]
    return out


@dataclass(frozen=True)
class WriterModel:
    """Effective write window widths (nm); see the module docstring."""

    sigma_eff_dt: float = 2.4
    sigma_eff_ct: float = 4.0
    mean_write_width: float = 110.0
    bit_pitch: float = 18.5

    def write_probability(self, phase: np.ndarray, ct_offset: np.ndarray) -> np.ndarray:
        """Probability that an event at this registration reverses the island."""
        from scipy.special import erf

        h = self.bit_pitch / 2.0
        w = self.mean_write_width / 2.0
        p_dt = 0.5 * (
            erf((h - phase) / self.sigma_eff_dt) + erf((h + phase) / self.sigma_eff_dt)
        )
        p_ct = 0.5 * (
            erf((w - ct_offset) / self.sigma_eff_ct) + erf((w + ct_offset) / self.sigma_eff_ct)
        )
        return p_dt * p_ct


def apply_write_pass(
    bits_pre: np.ndarray,
    lattice: IslandLattice,
    trajectory: Trajectory,
    pattern: np.ndarray,
    writer: WriterModel,
    rng: np.random.Generator,
    reader_writer_offset: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Write one track pass; returns the post-pass bit array.

    Every clock edge attempts to write its pattern bit to every island whose
    jittered registration falls inside the write window; the jitter draws
    are independent per (edge, island) and later edges override earlier
    ones.  Missing islands never change state.
    """
    dx, dy = reader_writer_offset
    xw = trajectory.x[trajectory.clock_edges] + dx
    yw = trajectory.y[trajectory.clock_edges] + dy
    n_edges = len(xw)
    intended = np.asarray(pattern)[np.arange(n_edges) % len(pattern)]

    p = lattice.params
    margin_dt = p.bit_pitch_dt / 2.0 + 4.0 * writer.sigma_eff_dt + 8.0
    margin_ct = writer.mean_write_width / 2.0 + 4.0 * writer.sigma_eff_ct + 8.0
    dr_max = int(np.ceil(margin_ct / p.track_pitch_ct))
    dc_max = int(np.ceil(margin_dt / p.bit_pitch_dt))

    c0 = np.clip(np.round(xw / p.bit_pitch_dt - 0.5).astype(int), 0, lattice.n_cols - 1)
    r0 = np.clip(np.round(yw / p.track_pitch_ct - 0.5).astype(int), 0, lattice.n_rows - 1)

    post = np.asarray(bits_pre, dtype=np.int8).copy()
    sqrt2 = np.sqrt(2.0)
    edge_ids = np.arange(n_edges)
    writes_edge, writes_isl, writes_val = [], [], []
    for dr in range(-dr_max, dr_max + 1):
        for dc in range(-dc_max, dc_max + 1):
            r = r0 + dr
            c = c0 + dc
            ok = (r >= 0) & (r < lattice.n_rows) & (c >= 0) & (c < lattice.n_cols)
            if not ok.any():
                continue
            isl = (r * lattice.n_cols + c)[ok]
            phase = xw[ok] - lattice.x[isl]
            ct = yw[ok] - lattice.y[isl]
            jit_dt = rng.normal(0.0, writer.sigma_eff_dt / sqrt2, len(isl))
            jit_ct = rng.normal(0.0, writer.sigma_eff_ct / sqrt2, len(isl))
            hit = (np.abs(phase + jit_dt) < p.bit_pitch_dt / 2.0) & (
                np.abs(ct + jit_ct) < writer.mean_write_width / 2.0
            )
            if hit.any():
                writes_edge.append(edge_ids[ok][hit])
                writes_isl.append(isl[hit])
                writes_val.append(intended[ok][hit])
    if writes_isl:
        # Time-order all (edge, island) writes so that later edges win.
        edge_all = np.concatenate(writes_edge)
        order = np.argsort(edge_all, kind="stable")
        isl_o = np.concatenate(writes_isl)[order]
        val_o = np.concatenate(writes_val)[order]
        uniq, last_rev = np.unique(isl_o[::-1], return_index=True)
        post[uniq] = val_o[::-1][last_rev]
    missing = lattice.defect == DEFECT_MISSING
    post[missing] = np.asarray(bits_pre, dtype=np.int8)[missing]
    return post
