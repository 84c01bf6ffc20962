"""2D Viterbi detector with 9-bit neighborhood states.

Each lattice site carries a 512-way state hypothesizing the 3x3 block of
bits around it.  Labels 1..9 map onto the block as

    1 2 3      (row above / next track)
    4 5 6      (own track; 5 is the site itself)
    7 8 9      (row below / previous track)

and label ``j`` occupies integer bit ``j-1`` of the state word.  Decision
information flows in two directions: D2 steps down-track from (r, c) to
(r, c+1) and D1 steps cross-track from (r, c) to (r+1, c).  The forward pass
visits sites row-major, so both predecessors of a site are always resolved
before it.

For the D1 message, bits 1..6 (shared with the successor) index the message
and bits 7..9 are minimized over; along D2 the shared bits are
{2,3,5,6,8,9} and bits {1,4,7} are optimized.  A message carries three
components per decision index: the producer's direct squared error and the
two weighted accumulations it consumed from its own predecessors, so the
consumer can weight the seven error sources

    E_tot = E_00 + sum_ij a_ij * E_ij

independently.  With all ``a_ij = 1`` this reproduces the naive scheme in
which errors passed along both directions multiply as they are duplicated.

The backward pass starts at the final site's lowest-total-error state.  When
the states implied along D1 and D2 disagree, six bits are fixed, the shared
2x2 block (F0) from whichever candidate has lower cumulative error, bit 1
(F1) from the D1 candidate and bit 9 (F2) from the D2 candidate, and the
remaining bits {4,7,8} (O3), whose sites border the not-yet-decided region,
are re-optimized against the site's cumulative weighted squared error.  The
group membership is configurable (:class:`ConflictGroups`); the default was
selected by measured decode BER among the partitions consistent with the
published description.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ._rng import substream
from .channel import (
    BitAssignment,
    NoiseParams,
    Renderer,
    ResponseKernel,
    bit_error_rate,
    random_bits,
)
from .lattice import DEFECT_MISSING, IslandLattice, LatticeParams, generate_lattice

logger = logging.getLogger(__name__)

N_STATES = 512

#: label -> (row offset, col offset) of the neighborhood member.
NEIGHBOR_OFFSETS = {
    1: (1, -1), 2: (1, 0), 3: (1, 1),
    4: (0, -1), 5: (0, 0), 6: (0, 1),
    7: (-1, -1), 8: (-1, 0), 9: (-1, 1),
}

MASK_CENTER = 1 << (5 - 1)


def _mask(labels: Iterable[int]) -> int:
    return sum(1 << (j - 1) for j in labels)


@dataclass(frozen=True)
class ConflictGroups:
    """Bit groups used when the D1 and D2 traceback decisions disagree.

    F0 is taken from the lower-cumulative-error candidate, F1 from the D1
    candidate, F2 from the D2 candidate; the O3 bits are re-optimized
    against the site's cumulative metric with the rest held fixed.  The
    groups must partition the nine labels.
    """

    f0: tuple = (2, 3, 5, 6)
    f1: tuple = (1,)
    f2: tuple = (9,)
    o3: tuple = (4, 7, 8)

    def masks(self) -> tuple[int, int, int, tuple[int, ...]]:
        all_bits = self.f0 + self.f1 + self.f2 + self.o3
        if sorted(all_bits) != list(range(1, 10)):
            raise ValueError("conflict groups must partition labels 1..9")
        return _mask(self.f0), _mask(self.f1), _mask(self.f2), tuple(j - 1 for j in self.o3)


#: Six bits fixed, three re-optimized (measured-best partition).
DEFAULT_CONFLICT_GROUPS = ConflictGroups()
#: Alternative with the 2x2 block plus both unique pairs fixed, bit 7 free.
COMPACT_CONFLICT_GROUPS = ConflictGroups(f0=(2, 3, 5, 6), f1=(1, 4), f2=(8, 9), o3=(7,))


def _pack(states: np.ndarray, labels: Iterable[int]) -> np.ndarray:
    out = np.zeros_like(states)
    for w, j in enumerate(labels):
        out |= ((states >> (j - 1)) & 1) << w
    return out


_S = np.arange(N_STATES)
#: per-state +-1 value of each label.
BITS_PM = np.stack([2.0 * ((_S >> j) & 1) - 1.0 for j in range(9)], axis=1)

# D1 producer: decision bits 1..6 are the low word, optimization bits 7..9 the
# high word, so reshape(8, 64) groups states by decision index directly.
IDX1_CONSUME = (_S >> 3) & 63            # consumer bits 4..9 -> producer decision index
IDX2_CONSUME = _pack(_S, (1, 2, 4, 5, 7, 8))
_DEC2 = _pack(_S, (2, 3, 5, 6, 8, 9))
_OPT2 = _pack(_S, (1, 4, 7))
ORDER2 = np.empty(N_STATES, dtype=np.int64)
ORDER2[_OPT2 * 64 + _DEC2] = _S
STATE2 = ORDER2.reshape(8, 64)           # STATE2[opt, dec] -> state word


def _verify_tables() -> None:
    """Structural trellis consistency (successor/predecessor bit relations)."""
    s = _S[:, None]
    new = np.arange(8)[None, :]
    # D1 successor: its bits {4..9} are the predecessor's bits {1..6}.
    t = ((s & 63) << 3) | ((new >> 0) & 1) | (((new >> 1) & 1) << 1) | (((new >> 2) & 1) << 2)
    assert np.all(IDX1_CONSUME[t] == (s & 63))
    # D2 successor: its bits {1,2,4,5,7,8} are the predecessor's {2,3,5,6,8,9}.
    u = (
        ((s >> 1) & 1)
        | (((s >> 2) & 1) << 1)
        | (((s >> 4) & 1) << 3)
        | (((s >> 5) & 1) << 4)
        | (((s >> 7) & 1) << 6)
        | (((s >> 8) & 1) << 7)
        | (((new >> 0) & 1) << 2)
        | (((new >> 1) & 1) << 5)
        | (((new >> 2) & 1) << 8)
    )
    assert np.all(IDX2_CONSUME[u] == _DEC2[:, None])
    # The (opt, dec) factorization of the D2 grouping is a bijection.
    assert np.array_equal(np.sort(ORDER2), _S)
    assert np.array_equal(_pack(STATE2.ravel(), (2, 3, 5, 6, 8, 9)), np.tile(np.arange(64), 8))
    assert np.array_equal(_pack(STATE2.ravel(), (1, 4, 7)), np.repeat(np.arange(8), 64))
    # The conflict groups partition the nine bits.
    for groups in (DEFAULT_CONFLICT_GROUPS, COMPACT_CONFLICT_GROUPS):
        f0, f1, f2, o3 = groups.masks()
        assert f0 | f1 | f2 | _mask(groups.o3) == N_STATES - 1


@dataclass(frozen=True)
class ErrorWeights:
    """Weights ``a_ij`` of the six non-direct error sources in E_tot.

    ``a_0j`` weight the predecessors' direct errors, ``a_ij`` (i in {1,2})
    the accumulations those predecessors received along their own D1/D2.
    """

    a01: float = 1.0
    a02: float = 1.0
    a11: float = 1.0
    a12: float = 1.0
    a21: float = 1.0
    a22: float = 1.0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("a01", "a02", "a11", "a12", "a21", "a22")}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorWeights":
        return cls(**{k: float(d[k]) for k in ("a01", "a02", "a11", "a12", "a21", "a22")})

    @classmethod
    def uniform(cls, value: float) -> "ErrorWeights":
        return cls(value, value, value, value, value, value)

    @property
    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.as_dict().values())

    def validate(self) -> None:
        for k, v in self.as_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {k} must be finite and >= 0")


@dataclass
class LocalChannelModel:
    """Expected on-site readback for every neighborhood configuration.

    ``weights[r, c, j]`` is the kernel response of neighborhood member ``j+1``
    (at its actual jittered position) sampled at the island center (r, c);
    the expected value of state S is the +-1-weighted sum of the nine.
    Out-of-lattice and missing neighbors contribute zero.
    """

    n_rows: int
    n_cols: int
    weights: np.ndarray

    def expected(self, r: int, c: int) -> np.ndarray:
        """(512,) expected signal at site (r, c) for every state."""
        return self.weights[r, c] @ BITS_PM.T

    def site_weights(self, r: int, c: int) -> np.ndarray:
        return self.weights[r, c]


def build_local_model(kernel: ResponseKernel, lattice: IslandLattice) -> LocalChannelModel:
    """Channel model for the 3x3 neighborhood at each site."""
    p = lattice.params
    if kernel.half_extent_x > 1.5 * p.bit_pitch_dt or kernel.half_extent_y > 1.5 * p.track_pitch_ct:
        logger.info(
            "kernel support (%.0f x %.0f nm) extends beyond the 3x3 neighborhood; "
            "contributions outside it are truncated",
            2 * kernel.half_extent_x, 2 * kernel.half_extent_y,
        )
    nr, nc = lattice.n_rows, lattice.n_cols
    rows, cols = lattice.rows, lattice.cols
    w = np.zeros((nr, nc, 9))
    for j, (dr, dc) in NEIGHBOR_OFFSETS.items():
        ok = (rows + dr >= 0) & (rows + dr < nr) & (cols + dc >= 0) & (cols + dc < nc)
        i = lattice.ids[ok]
        nbr = i + dr * nc + dc
        present = lattice.defect[nbr] != DEFECT_MISSING
        i, nbr = i[present], nbr[present]
        vals = kernel.evaluate(lattice.x[i] - lattice.x[nbr], lattice.y[i] - lattice.y[nbr])
        w[rows[i], cols[i], j - 1] = vals * lattice.scale[nbr]
    return LocalChannelModel(nr, nc, w)


def _local_ml_decode(samples: np.ndarray, model: LocalChannelModel):
    """Per-site argmin over the 512 configurations (no information flow)."""
    nb, nr, nc = samples.shape
    bits = np.empty((nb, nr * nc), dtype=np.int8)
    conf = np.empty((nb, nr * nc))
    for r in range(nr):
        for c in range(nc):
            exp_vals = model.expected(r, c)
            e = (samples[:, r, c, None] - exp_vals[None, :]) ** 2
            s_best = np.argmin(e, axis=1)
            s_flip = s_best ^ MASK_CENTER
            x = samples[:, r, c]
            bits[:, r * nc + c] = np.where((s_best >> 4) & 1, 1, -1)
            conf[:, r * nc + c] = np.abs(
                (x - exp_vals[s_best]) ** 2 - (x - exp_vals[s_flip]) ** 2
            )
    return bits, conf


def decode_batch(
    samples: np.ndarray,
    model: LocalChannelModel,
    weights: ErrorWeights,
    *,
    conflict_groups: ConflictGroups = DEFAULT_CONFLICT_GROUPS,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode a (B, n_rows, n_cols) batch of sample grids.

    Returns ``(bits, confidence)`` with shape (B, n_sites); confidence is the
    squared-error margin of flipping the site's own bit in its final state.
    With all weights zero no information flows between sites and the decode
    degenerates to the per-site local maximum-likelihood choice.
    """
    weights.validate()
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[None]
    nb, nr, nc = samples.shape
    if (nr, nc) != (model.n_rows, model.n_cols):
        raise ValueError(
            f"samples grid {nr}x{nc} does not match the model's {model.n_rows}x{model.n_cols} site array"
        )
    if weights.is_zero:
        return _local_ml_decode(samples, model)
    mask_f0, mask_f1, mask_f2, o3_bits = conflict_groups.masks()

    n_sites = nr * nc
    cols64 = np.arange(64)
    bp1 = np.empty((n_sites, nb, 64), dtype=np.uint8)
    bp2 = np.empty((n_sites, nb, 64), dtype=np.uint8)
    ctab1 = np.zeros((n_sites, nb, 64), dtype=np.float32)
    ctab2 = np.zeros((n_sites, nb, 64), dtype=np.float32)

    m1_prev = None      # (3, nb, nc, 64) messages from the previous row
    etot_last = None
    for r in range(nr):
        m1_new = np.zeros((3, nb, nc, 64))
        m2 = None
        for c in range(nc):
            s = r * nc + c
            exp_vals = model.expected(r, c)
            e00 = (samples[:, r, c, None] - exp_vals[None, :]) ** 2
            if r > 0:
                t1 = (
                    weights.a01 * m1_prev[0, :, c]
                    + weights.a11 * m1_prev[1, :, c]
                    + weights.a21 * m1_prev[2, :, c]
                )
                ctab1[s] = t1
            else:
                t1 = ctab1[s]
            if c > 0:
                t2 = weights.a02 * m2[0] + weights.a12 * m2[1] + weights.a22 * m2[2]
                ctab2[s] = t2
            else:
                t2 = ctab2[s]
            etot = e00 + t1[:, IDX1_CONSUME] + t2[:, IDX2_CONSUME]

            o1 = etot.reshape(nb, 8, 64).argmin(axis=1)
            bp1[s] = o1
            s_star = (o1 << 6) | cols64
            m1_new[0, :, c] = np.take_along_axis(e00, s_star, 1)
            m1_new[1, :, c] = np.take_along_axis(t1, IDX1_CONSUME[s_star], 1)
            m1_new[2, :, c] = np.take_along_axis(t2, IDX2_CONSUME[s_star], 1)

            o2 = etot[:, ORDER2].reshape(nb, 8, 64).argmin(axis=1)
            bp2[s] = o2
            s_star2 = STATE2[o2, cols64]
            m2 = np.stack(
                [
                    np.take_along_axis(e00, s_star2, 1),
                    np.take_along_axis(t1, IDX1_CONSUME[s_star2], 1),
                    np.take_along_axis(t2, IDX2_CONSUME[s_star2], 1),
                ]
            )
            if s == n_sites - 1:
                etot_last = etot
        m1_prev = m1_new

    # Backward pass with conflict resolution.
    final = np.empty((nb, n_sites), dtype=np.int64)
    bits = np.empty((nb, n_sites), dtype=np.int8)
    conf = np.empty((nb, n_sites))
    ar_b = np.arange(nb)
    o3_combos = [
        sum(1 << bit for i, bit in enumerate(o3_bits) if (k >> i) & 1)
        for k in range(1 << len(o3_bits))
    ]
    for s in range(n_sites - 1, -1, -1):
        r, c = divmod(s, nc)
        exp_vals = model.expected(r, c)
        x = samples[:, r, c]

        def cost(v):
            return (
                (x - exp_vals[v]) ** 2
                + ctab1[s][ar_b, IDX1_CONSUME[v]]
                + ctab2[s][ar_b, IDX2_CONSUME[v]]
            )

        v1 = v2 = None
        if r < nr - 1:
            t_state = final[:, s + nc]
            d1 = (t_state >> 3) & 63
            v1 = (bp1[s][ar_b, d1].astype(np.int64) << 6) | d1
        if c < nc - 1:
            u_state = final[:, s + 1]
            d2 = IDX2_CONSUME[u_state]
            v2 = STATE2[bp2[s][ar_b, d2], d2]
        if v1 is None and v2 is None:
            state = np.argmin(etot_last, axis=1)
        elif v1 is None:
            state = v2
        elif v2 is None:
            state = v1
        else:
            base = np.where(cost(v1) <= cost(v2), v1, v2)
            core = (base & mask_f0) | (v1 & mask_f1) | (v2 & mask_f2)
            cands = np.stack([core | combo for combo in o3_combos])
            costs = np.stack([cost(v) for v in cands])
            resolved = cands[np.argmin(costs, axis=0), ar_b]
            state = np.where(v1 == v2, v1, resolved)
        final[:, s] = state
        flipped = state ^ MASK_CENTER
        bits[:, s] = np.where((state >> 4) & 1, 1, -1)
        conf[:, s] = np.abs((x - exp_vals[state]) ** 2 - (x - exp_vals[flipped]) ** 2)
    return bits, conf


def decode(
    samples: np.ndarray,
    model: LocalChannelModel,
    weights: ErrorWeights,
    *,
    conflict_groups: ConflictGroups = DEFAULT_CONFLICT_GROUPS,
) -> BitAssignment:
    """Decode one rectangular sample grid into per-island bits.

    ``samples`` may be (n_rows, n_cols) or flat (n_sites,) in row-major
    island-id order.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        if samples.size != model.n_rows * model.n_cols:
            raise ValueError("flat samples length does not match the rectangular site array")
        samples = samples.reshape(model.n_rows, model.n_cols)
    bits, conf = decode_batch(samples, model, weights, conflict_groups=conflict_groups)
    return BitAssignment(bits[0], conf[0])


# ---------------------------------------------------------------------------
# Weight optimization


@dataclass
class WeightOptimizationConfig:
    """Simulation setup for tuning the error-source weights.

    BER is minimized by coordinate descent over a fixed grid per coefficient,
    evaluating each candidate on one shared batch of simulated readback
    images (common random numbers), so the search is deterministic per seed.
    """

    lattice_params: LatticeParams
    kernel: ResponseKernel
    media_snr_db: float = 10.0
    read_snr_db: float = 22.0
    trials: int = 20
    seed: int = 0
    grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
    sweeps: int = 2
    start: ErrorWeights = field(default_factory=lambda: ErrorWeights.uniform(1.0))


@dataclass
class WeightOptimizationResult:
    weights: ErrorWeights
    ber: float
    evaluations: int


def optimize_weights(config: WeightOptimizationConfig) -> WeightOptimizationResult:
    """Coordinate-descent search for the error weights minimizing decoded BER."""
    lattice = generate_lattice(config.lattice_params)
    renderer = Renderer(lattice, config.kernel)
    rng = substream(config.seed, "weight-opt-bits")
    bits = random_bits((config.trials, lattice.n_islands), rng)
    noise = NoiseParams(config.media_snr_db, config.read_snr_db, rng_seed=config.seed)
    stack = renderer.render_batch(bits, noise)
    samples = renderer.sample_islands(stack).reshape(
        config.trials, lattice.n_rows, lattice.n_cols
    )
    model = build_local_model(config.kernel, lattice)
    active = lattice.active

    evals = 0

    def ber_of(w: ErrorWeights) -> float:
        nonlocal evals
        evals += 1
        decoded, _ = decode_batch(samples, model, w)
        return bit_error_rate(decoded, bits, mask=active)

    current = config.start
    best_ber = ber_of(current)
    names = ("a01", "a02", "a11", "a12", "a21", "a22")
    for _ in range(config.sweeps):
        for name in names:
            vals = current.as_dict()
            for g in config.grid:
                if g == vals[name]:
                    continue
                cand = ErrorWeights.from_dict({**vals, name: g})
                b = ber_of(cand)
                if b < best_ber:
                    best_ber = b
                    current = cand
    return WeightOptimizationResult(current, best_ber, evals)
