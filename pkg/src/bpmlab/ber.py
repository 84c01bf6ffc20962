"""Error-rate statistics: 2D registration maps, jitter fits, SNR estimation,
and decoder benchmarks.

The on-track error rate as a function of down-track registration follows

    OTER(d) = 1/4 * ( erfc((d + BP/2)/sigma_eff) + erfc(-(d - BP/2)/sigma_eff) )

which saturates at 50% far from the bit cell (a failed write leaves the
random pre-state in place).  The same machinery fits bit-flip-rate
cross-sections with the bit pitch replaced by the negative mean write width
and independent left/right widths.  The effective jitter decomposes in
quadrature into field-gradient, lithography, and servo terms.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import erfc

from ._rng import substream
from . import sieve as sieve_mod
from . import viterbi2d
from .channel import (
    NoiseParams,
    ReadbackImage,
    Renderer,
    ResponseKernel,
    bit_error_rate,
    prbs,
    random_bits,
)
from .lattice import DEFECT_MISSING, IslandLattice, LatticeParams, generate_lattice
from .prf import threshold_decode
from .servo import DriftModel, WriterModel, apply_write_pass, pass_registrations, simulate_trajectory

EVENT_DTYPE = np.dtype(
    [
        ("island", np.int64),
        ("phase", np.float64),
        ("ct_offset", np.float64),
        ("intended", np.int8),
        ("pre", np.int8),
        ("post", np.int8),
        ("decoded", np.int8),
    ]
)


class FitConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Registration maps


@dataclass
class ErrorRateMap:
    """Binned event statistics over (down-track phase, cross-track offset)."""

    kind: str
    phase_edges: np.ndarray
    ct_edges: np.ndarray
    trials: np.ndarray
    counts: np.ndarray

    @property
    def phase_centers(self) -> np.ndarray:
        return 0.5 * (self.phase_edges[:-1] + self.phase_edges[1:])

    @property
    def ct_centers(self) -> np.ndarray:
        return 0.5 * (self.ct_edges[:-1] + self.ct_edges[1:])

    @property
    def rate(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.trials > 0, self.counts / self.trials, np.nan)

    def phase_cross_section(self, ct_at: float = 0.0, ct_halfwidth: float = 2.0):
        """Aggregate bins near one cross-track offset -> (delta, rate, trials)."""
        sel = np.abs(self.ct_centers - ct_at) <= ct_halfwidth
        trials = self.trials[:, sel].sum(axis=1)
        counts = self.counts[:, sel].sum(axis=1)
        ok = trials > 0
        return self.phase_centers[ok], counts[ok] / trials[ok], trials[ok]

    def ct_cross_section(self, phase_at: float = 0.0, phase_halfwidth: float = 1.0):
        sel = np.abs(self.phase_centers - phase_at) <= phase_halfwidth
        trials = self.trials[sel].sum(axis=0)
        counts = self.counts[sel].sum(axis=0)
        ok = trials > 0
        return self.ct_centers[ok], counts[ok] / trials[ok], trials[ok]


@dataclass
class MapStats:
    n_events: int
    out_of_range: int
    empty_bins: int


def compile_maps(
    events: np.ndarray,
    phase_bin: float = 1.0,
    ct_bin: float = 2.0,
    phase_range: tuple[float, float] | None = None,
    ct_range: tuple[float, float] | None = None,
) -> tuple[ErrorRateMap, ErrorRateMap, MapStats]:
    """Compile OTER and BFR maps from write events.

    OTER counts events whose decoded bit differs from the intended one, BFR
    events whose write flipped the island.  Bin totals conserve the event
    count minus those outside the given ranges.
    """
    ev = np.asarray(events)
    if phase_range is None:
        lim = float(np.ceil(np.abs(ev["phase"]).max() / phase_bin)) * phase_bin
        phase_range = (-lim, lim)
    if ct_range is None:
        lim = float(np.ceil(np.abs(ev["ct_offset"]).max() / ct_bin)) * ct_bin
        ct_range = (-lim, lim)
    p_edges = np.arange(phase_range[0], phase_range[1] + 0.5 * phase_bin, phase_bin)
    c_edges = np.arange(ct_range[0], ct_range[1] + 0.5 * ct_bin, ct_bin)

    def hist(mask=None):
        sel = slice(None) if mask is None else mask
        h, _, _ = np.histogram2d(
            ev["phase"][sel], ev["ct_offset"][sel], bins=(p_edges, c_edges)
        )
        return h

    trials = hist()
    errors = hist(ev["decoded"] != ev["intended"])
    flips = hist(ev["post"] != ev["pre"])
    out_of_range = int(len(ev) - trials.sum())
    stats = MapStats(len(ev), out_of_range, int((trials == 0).sum()))
    oter = ErrorRateMap("oter", p_edges, c_edges, trials, errors)
    bfr = ErrorRateMap("bfr", p_edges, c_edges, trials.copy(), flips)
    return oter, bfr, stats


@dataclass
class BerSmrMap:
    phase_edges: np.ndarray
    ct_edges: np.ndarray
    rate: np.ndarray
    excluded: np.ndarray


def ber_smr(oter: ErrorRateMap, bfr: ErrorRateMap, track_pitch: float) -> BerSmrMap:
    """Shingled-recording BER: OTER plus the adjacent-track flip rate.

    For positive cross-track registrations the adjacent pass sits one track
    pitch further out (shingling toward increasing tracks), and mirrored for
    negative registrations.  Bins whose shifted partner falls outside the
    map are flagged excluded.
    """
    if not (
        np.allclose(oter.phase_edges, bfr.phase_edges)
        and np.allclose(oter.ct_edges, bfr.ct_edges)
    ):
        raise ValueError("OTER and BFR maps must share binning")
    ct_bin = oter.ct_edges[1] - oter.ct_edges[0]
    n_shift = int(round(track_pitch / ct_bin))
    if not np.isclose(n_shift * ct_bin, track_pitch, rtol=0.02):
        raise ValueError("track pitch is not a multiple of the ct bin width")
    centers = oter.ct_centers
    n_ct = len(centers)
    rate = np.array(oter.rate)
    excluded = ~np.isfinite(rate)
    bfr_rate = bfr.rate
    for j, ct in enumerate(centers):
        j_adj = j + n_shift if ct >= 0 else j - n_shift
        if 0 <= j_adj < n_ct:
            rate[:, j] = rate[:, j] + bfr_rate[:, j_adj]
            excluded[:, j] |= ~np.isfinite(bfr_rate[:, j_adj])
        else:
            rate[:, j] = np.nan
            excluded[:, j] = True
    return BerSmrMap(oter.phase_edges, oter.ct_edges, rate, excluded)


# ---------------------------------------------------------------------------
# Jitter fits


def oter_model(delta, sigma_eff: float, center: float, bit_pitch: float):
    """Write-error probability vs down-track registration (erfc law)."""
    d = np.asarray(delta, dtype=float) - center
    h = bit_pitch / 2.0
    return 0.25 * (erfc((d + h) / sigma_eff) + erfc(-(d - h) / sigma_eff))


def bfr_model(ct, mww: float, center: float, sigma_neg: float, sigma_pos: float):
    """Flip probability vs cross-track offset; independent edge widths."""
    from scipy.special import erf

    u = np.asarray(ct, dtype=float) - center
    w = mww / 2.0
    return 0.25 * (erf((w - u) / sigma_pos) + erf((w + u) / sigma_neg))


@dataclass
class JitterFit:
    sigma_eff: float
    center: float
    residual: float
    covariance: np.ndarray


@dataclass
class BfrFit:
    mww: float
    center: float
    sigma_neg: float
    sigma_pos: float
    residual: float


def _binomial_weights(rate, trials):
    p = np.clip((rate * trials + 0.5) / (trials + 1.0), 1e-4, 1.0 - 1e-4)
    return np.sqrt(trials / (p * (1.0 - p)))


def _weighted_fit(fun, x0, bounds, name):
    res = optimize.least_squares(fun, x0, bounds=bounds)
    if not res.success:
        raise FitConvergenceError(f"{name} fit did not converge; last iterate {res.x}")
    return res


def fit_oter(
    delta: np.ndarray,
    rate: np.ndarray,
    trials: np.ndarray,
    bit_pitch: float,
    *,
    sigma0: float | None = None,
) -> JitterFit:
    """Weighted least-squares fit of the erfc law to an OTER cross-section.

    Weights are inverse binomial standard deviations per bin.  Requires
    enough bins to bracket the bit-cell edges.
    """
    delta = np.asarray(delta, float)
    rate = np.asarray(rate, float)
    trials = np.asarray(trials, float)
    if len(delta) < 5:
        raise ValueError("need at least 5 bins to fit")
    if delta.max() - delta.min() < bit_pitch:
        raise ValueError("cross-section must span beyond +-BP/2")
    w = _binomial_weights(rate, trials)
    s0 = sigma0 if sigma0 is not None else bit_pitch / 8.0

    def resid(params):
        return w * (oter_model(delta, params[0], params[1], bit_pitch) - rate)

    res = _weighted_fit(
        resid, [s0, 0.0], ([1e-3, -bit_pitch], [2.0 * bit_pitch, bit_pitch]), "OTER"
    )
    # Gauss-Newton covariance estimate from the weighted Jacobian.
    jac = res.jac
    dof = max(len(delta) - 2, 1)
    try:
        cov = np.linalg.inv(jac.T @ jac) * 2.0 * res.cost / dof
    except np.linalg.LinAlgError:
        cov = np.full((2, 2), np.nan)
    return JitterFit(float(res.x[0]), float(res.x[1]), float(res.cost), cov)


def fit_bfr(
    ct: np.ndarray,
    rate: np.ndarray,
    trials: np.ndarray,
    *,
    mww_init: float = 110.0,
) -> BfrFit:
    """Fit the flip-rate cross-section; the negative and positive cross-track
    edges carry independent widths."""
    ct = np.asarray(ct, float)
    rate = np.asarray(rate, float)
    trials = np.asarray(trials, float)
    if len(ct) < 6:
        raise ValueError("need at least 6 bins to fit")
    w = _binomial_weights(rate, trials)

    def resid(params):
        return w * (bfr_model(ct, *params) - rate)

    res = _weighted_fit(
        resid,
        [mww_init, 0.0, 4.0, 4.0],
        ([10.0, -50.0, 0.5, 0.5], [500.0, 50.0, 30.0, 30.0]),
        "BFR",
    )
    return BfrFit(float(res.x[0]), float(res.x[1]), float(res.x[2]), float(res.x[3]), float(res.cost))


@dataclass
class JitterDecomposition:
    sigma_servo: float
    sigma_mag_position: float


def jitter_decomposition(
    sigma_eff: float, sfd_oe: float, gradient_oe_per_nm: float, sigma_litho: float
) -> JitterDecomposition:
    """Split the effective jitter into its quadrature components.

    The field-gradient term is ``SFD / (dH/dx)``; what remains after removing
    it and the lithographic placement error is attributed to servo error.
    """
    sigma_mag = sfd_oe / gradient_oe_per_nm
    rad = sigma_eff**2 - sigma_mag**2 - sigma_litho**2
    if rad <= 0:
        raise ValueError(
            "inconsistent inputs: gradient and litho terms exceed the effective jitter"
        )
    return JitterDecomposition(math.sqrt(rad), sigma_mag)


# ---------------------------------------------------------------------------
# Decoder benchmark (media-SNR sweep)


def wilson_interval(errors: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial rate (robust at small counts)."""
    if n == 0:
        return (0.0, 1.0)
    p = errors / n
    denom = 1.0 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class SweepConfig:
    """Fig.-7-style benchmark: BER vs media SNR at fixed read SNR."""

    lattice_params: LatticeParams
    kernel: ResponseKernel
    media_snr_db: tuple = tuple(float(v) for v in range(6, 17))
    read_snr_db: float = 22.0
    decoders: tuple = ("viterbi", "sieve")
    trials: int = 100
    seed: int = 0
    weights: viterbi2d.ErrorWeights = field(default_factory=lambda: viterbi2d.ErrorWeights.uniform(1.0))
    threads: int = 1


@dataclass
class SweepPoint:
    media_snr_db: float
    decoder: str
    n_bits: int
    n_errors: int
    ber: float
    ci_low: float
    ci_high: float


def snr_sweep(config: SweepConfig) -> list[SweepPoint]:
    """Monte-Carlo BER of the requested decoders across media SNR points.

    All decoders see identical noisy samples at each point (common random
    numbers); the island lattice is drawn once from the lattice seed and
    reused, as in repeated writes on one medium.
    """
    lattice = generate_lattice(config.lattice_params)
    renderer = Renderer(lattice, config.kernel)
    model = viterbi2d.build_local_model(config.kernel, lattice)
    matrix = renderer.matrix
    active = lattice.active
    n = lattice.n_islands

    def run_point(i_point: int) -> list[SweepPoint]:
        snr = config.media_snr_db[i_point]
        point_seed = int(substream(config.seed, f"sweep-point-{i_point}").integers(2**62))
        bits = random_bits((config.trials, n), substream(point_seed, "bits"))
        noise = NoiseParams(snr, config.read_snr_db, rng_seed=point_seed)
        stack = renderer.render_batch(bits, noise)
        samples = renderer.sample_islands(stack)
        out = []
        for dec in config.decoders:
            if dec == "viterbi":
                decoded, _ = viterbi2d.decode_batch(
                    samples.reshape(config.trials, lattice.n_rows, lattice.n_cols),
                    model,
                    config.weights,
                )
            elif dec == "sieve":
                decoded = np.empty_like(bits)
                for b in range(config.trials):
                    decoded[b] = sieve_mod.decode(
                        samples[b], config.kernel, lattice, matrix=matrix
                    ).assignment.bits
            elif dec == "threshold":
                decoded = threshold_decode(samples).bits
            else:
                raise ValueError(f"unknown decoder {dec!r}")
            n_bits = int(config.trials * active.sum())
            n_err = int(np.sum(decoded[:, active] != bits[:, active]))
            lo, hi = wilson_interval(n_err, n_bits)
            out.append(SweepPoint(snr, dec, n_bits, n_err, n_err / n_bits, lo, hi))
        return out

    results: list[SweepPoint] = []
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            for chunk in pool.map(run_point, range(len(config.media_snr_db))):
                results.extend(chunk)
    else:
        for i in range(len(config.media_snr_db)):
            results.extend(run_point(i))
    return results


def snr_at_ber(points: list[SweepPoint], decoder: str, target_ber: float) -> float:
    """Media SNR at which a decoder's BER curve crosses ``target_ber``
    (log-linear interpolation)."""
    pts = sorted((p for p in points if p.decoder == decoder), key=lambda p: p.media_snr_db)
    snrs = np.array([p.media_snr_db for p in pts])
    bers = np.array([max(p.ber, 1e-12) for p in pts])
    logt = math.log10(target_ber)
    logs = np.log10(bers)
    for i in range(len(pts) - 1):
        a, b = logs[i], logs[i + 1]
        if (a - logt) * (b - logt) <= 0 and a != b:
            return float(snrs[i] + (snrs[i + 1] - snrs[i]) * (logt - a) / (b - a))
    raise ValueError(f"BER curve for {decoder!r} does not cross {target_ber}")


# ---------------------------------------------------------------------------
# End-to-end registration-map pipeline


@dataclass
class WriteErrorMapConfig:
    """Synthetic write/read campaign for OTER/BFR maps.

    Uses the phenomenological writer; its sigma parameters are the ground
    truth the cross-section fits must recover.  Decoding is represented by
    an injected error floor so map statistics can be gathered at scale.
    """

    lattice_params: LatticeParams
    writer: WriterModel = field(default_factory=WriterModel)
    passes: int = 200
    seed: int = 0
    decode_error_floor: float = 3e-3
    ct_window: float = 80.0
    prbs_order: int = 15
    drift: DriftModel | None = None


def simulate_write_error_map(config: WriteErrorMapConfig) -> np.ndarray:
    """Run repeated track writes and return the event table.

    Each pass writes a PRBS at a random clock phase and random cross-track
    offset inside one track pitch, cycling target rows across the interior
    of the lattice.  Every island within ``ct_window`` of the pass
    contributes one event registered against its nearest clock edge.
    """
    p = config.lattice_params
    lattice = generate_lattice(p)
    rng = substream(config.seed, "write-map")
    bits = random_bits(lattice.n_islands, rng)

    guard_rows = int(np.ceil(config.ct_window / p.track_pitch_ct)) + 1
    rows = np.arange(guard_rows, max(guard_rows + 1, lattice.n_rows - guard_rows))
    events = []
    for i_pass in range(config.passes):
        row = rows[i_pass % len(rows)]
        y_c = (row + 0.5) * p.track_pitch_ct + rng.uniform(-0.5, 0.5) * p.track_pitch_ct
        traj = simulate_trajectory(
            p.extent_dt - p.bit_pitch_dt,
            config.drift,
            sample_pitch=p.bit_pitch_dt / 8.0,
            y_center=y_c,
            clock_pitch=p.bit_pitch_dt,
            clock_phase=rng.uniform(0.0, p.bit_pitch_dt),
            seed=int(rng.integers(2**62)),
        )
        pattern = prbs(len(traj.clock_edges), seed=int(rng.integers(1, 2**31)), order=config.prbs_order)
        regs = pass_registrations(traj, lattice, config.ct_window)
        pre = bits.copy()
        bits = apply_write_pass(bits, lattice, traj, pattern, config.writer, rng)
        decoded = bits.copy()
        if config.decode_error_floor > 0:
            flip = rng.random(lattice.n_islands) < config.decode_error_floor
            decoded[flip] = -decoded[flip]

        ev = np.empty(len(regs), dtype=EVENT_DTYPE)
        ev["island"] = regs["island"]
        ev["phase"] = regs["phase"]
        ev["ct_offset"] = regs["ct_offset"]
        ev["intended"] = pattern[regs["edge"] % len(pattern)]
        ev["pre"] = pre[regs["island"]]
        ev["post"] = bits[regs["island"]]
        ev["decoded"] = decoded[regs["island"]]
        events.append(ev)
    return np.concatenate(events)


# ---------------------------------------------------------------------------
# SNR estimation from repeat images


@dataclass
class SnrEstimate:
    db: float
    unbounded: bool
    excluded_fragments: list[int] = field(default_factory=list)


def _fragment_shift(ref: np.ndarray, img: np.ndarray) -> tuple[float, float, float]:
    """(dy, dx, peak NCC) aligning ``img`` onto ``ref`` by cross-correlation."""
    a = ref - ref.mean()
    b = img - img.mean()
    fa = np.fft.rfft2(a)
    fb = np.fft.rfft2(b)
    corr = np.fft.irfft2(fa * np.conj(fb), a.shape)
    norm = math.sqrt(float(np.sum(a**2)) * float(np.sum(b**2)))
    if norm == 0:
        return 0.0, 0.0, 1.0 if np.array_equal(ref, img) else 0.0
    corr /= norm
    iy, ix = np.unravel_index(np.argmax(corr), corr.shape)
    score = float(corr[iy, ix])

    def sub(i, axis_len, take):
        prev = take((i - 1) % axis_len)
        nxt = take((i + 1) % axis_len)
        denom = prev - 2 * corr[iy, ix] + nxt
        if abs(denom) < 1e-12:
            return 0.0
        return float(np.clip(0.5 * (prev - nxt) / denom, -0.5, 0.5))

    dy = sub(iy, corr.shape[0], lambda i: corr[i, ix])
    dx = sub(ix, corr.shape[1], lambda i: corr[iy, i])
    sy = iy + dy
    sx = ix + dx
    if sy > corr.shape[0] / 2:
        sy -= corr.shape[0]
    if sx > corr.shape[1] / 2:
        sx -= corr.shape[1]
    return sy, sx, score


def _fourier_shift(arr: np.ndarray, dy: float, dx: float, pad: int = 8) -> np.ndarray:
    """Sub-pixel shift by an FFT phase ramp (preserves white-noise power).

    Reflect padding keeps the implicit periodic extension continuous, which
    suppresses the ringing a raw circular shift would spread over the tile.
    """
    padded = np.pad(arr, pad, mode="reflect")
    f = np.fft.rfft2(padded)
    ky = np.fft.fftfreq(padded.shape[0])[:, None]
    kx = np.fft.rfftfreq(padded.shape[1])[None, :]
    out = np.fft.irfft2(f * np.exp(-2j * np.pi * (ky * dy + kx * dx)), padded.shape)
    return out[pad:-pad, pad:-pad]


def snr_readback(
    images: list[ReadbackImage],
    fragments: int = 100,
    *,
    align: bool = True,
    min_correlation: float = 0.5,
    trim: int = 4,
) -> SnrEstimate:
    """Readback SNR from repeat images of the same region.

    Images are subdivided into fragments that are aligned to the first image
    separately (removing image-to-image drift), then averaged.  Noise is the
    RMS deviation from the fragment average, signal the standard deviation
    of the average itself.  Identical inputs yield the unbounded sentinel.
    """
    if len(images) < 3:
        raise ValueError("need at least 3 repeat images")
    data = [np.asarray(im.data, dtype=float) for im in images]
    shape = data[0].shape
    if any(d.shape != shape for d in data):
        raise ValueError("repeat images must share a shape")
    per_side = max(1, int(round(math.sqrt(fragments))))
    ys = np.linspace(0, shape[0], per_side + 1).astype(int)
    xs = np.linspace(0, shape[1], per_side + 1).astype(int)

    sig_pixels = []
    noise_sq_sum = 0.0
    noise_n = 0
    excluded = []
    frag_id = -1
    for iy in range(per_side):
        for ix in range(per_side):
            frag_id += 1
            sl = (slice(ys[iy], ys[iy + 1]), slice(xs[ix], xs[ix + 1]))
            ref = data[0][sl]
            stack = [ref]
            failed = False
            for d in data[1:]:
                frag = d[sl]
                if align:
                    dy, dx, score = _fragment_shift(ref, frag)
                    if score < min_correlation:
                        failed = True
                        break
                    if abs(dy) > 1e-9 or abs(dx) > 1e-9:
                        frag = _fourier_shift(frag, dy, dx)
                        # One refinement pass trims the parabolic-peak bias.
                        dy2, dx2, _ = _fragment_shift(ref, frag)
                        if 1e-9 < abs(dy2) + abs(dx2) < 1.0:
                            frag = _fourier_shift(frag, dy2, dx2)
                stack.append(frag)
            if failed:
                excluded.append(frag_id)
                continue
            arr = np.stack(stack)
            if trim > 0 and arr.shape[1] > 2 * trim and arr.shape[2] > 2 * trim:
                arr = arr[:, trim:-trim, trim:-trim]
            avg = arr.mean(axis=0)
            dev = arr - avg
            noise_sq_sum += float(np.sum(dev**2))
            noise_n += dev.size
            sig_pixels.append(avg.ravel())
    if not sig_pixels:
        raise ValueError("all fragments failed alignment")
    signal = float(np.std(np.concatenate(sig_pixels)))
    noise = math.sqrt(noise_sq_sum / noise_n) if noise_n else 0.0
    if noise <= 1e-9 * max(signal, 1e-30):
        return SnrEstimate(math.inf, True, excluded)
    return SnrEstimate(20.0 * math.log10(signal / noise), False, excluded)


@dataclass
class MediaSnrEstimate:
    snr_tot_db: float
    snr_media_db: float
    unbounded: bool


def snr_media(
    image: ReadbackImage,
    simulated: ReadbackImage,
    *,
    read_snr_db: float,
    stat_tolerance_sigmas: float = 3.0,
) -> MediaSnrEstimate:
    """Media SNR from the difference between measured and simulated images.

    Signal is the std of the simulated image; total noise the std of the
    difference.  Read noise (from the repeat-image estimate) is removed in
    quadrature.  If the difference power is consistent with read noise alone
    (within the statistical tolerance) the media SNR is unbounded; if it
    falls significantly below, the inputs are inconsistent.
    """
    if image.data.shape != simulated.data.shape:
        raise ValueError("images must be co-registered and equal shape")
    sig = float(np.std(simulated.data))
    diff = image.data - simulated.data
    noise_tot_sq = float(np.var(diff))
    if sig == 0 or noise_tot_sq == 0:
        return MediaSnrEstimate(math.inf, math.inf, True)
    snr_tot = 10.0 * math.log10(sig**2 / noise_tot_sq)
    noise_rd_sq = sig**2 * 10.0 ** (-read_snr_db / 10.0)
    media_sq = noise_tot_sq - noise_rd_sq
    tol = stat_tolerance_sigmas * noise_tot_sq * math.sqrt(2.0 / diff.size)
    if media_sq <= tol:
        if media_sq < -tol:
            raise ValueError("read noise exceeds total noise")
        return MediaSnrEstimate(snr_tot, math.inf, True)
    return MediaSnrEstimate(snr_tot, 10.0 * math.log10(sig**2 / media_sq), False)
