"""Shipped parameter presets for the 1.6 Td/in^2 demonstration geometry.

The default lattice is 18.5 nm down-track by 22 nm cross-track with 1.1 /
1.2 nm Gaussian placement jitter and a defect rate below 1e-3; the reader
response is approximated by a 30 x 35 nm FWHM Gaussian (about 1.6 bit
pitches in both directions).  Optimized Viterbi error weights for this
geometry ship as package data, regenerated by
``bpmlab experiment optimize_weights`` if needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources

from .channel import ResponseKernel, gaussian_kernel
from .lattice import LatticeParams
from .servo import DriftModel, WriterModel
from .viterbi2d import ErrorWeights


@dataclass(frozen=True)
class Preset:
    name: str
    lattice: LatticeParams
    reader_fwhm_dt: float
    reader_fwhm_ct: float
    pixel_pitch: float
    read_snr_db: float
    media_snr_db: float
    lp_fwhm: float
    media_snr_sweep: tuple
    writer: WriterModel
    drift: DriftModel
    servo_read_snr_db: float
    sfd_oe: float
    gradient_dt_oe_per_nm: float
    gradient_ct_oe_per_nm: float
    sigma_litho_dt: float
    sigma_litho_ct: float

    def kernel(self, amplitude: float = 1.0) -> ResponseKernel:
        return gaussian_kernel(
            self.reader_fwhm_dt, self.reader_fwhm_ct, amplitude, self.pixel_pitch
        )

    def lattice_params(self, extent_dt: float, extent_ct: float, *, rng_seed: int = 0,
                       defect_rate: float | None = None) -> LatticeParams:
        return replace(
            self.lattice,
            extent_dt=extent_dt,
            extent_ct=extent_ct,
            rng_seed=rng_seed,
            defect_rate=self.lattice.defect_rate if defect_rate is None else defect_rate,
        )


TDIN2_1P6 = Preset(
    name="tdin2_1p6",
    lattice=LatticeParams(
        bit_pitch_dt=18.5,
        track_pitch_ct=22.0,
        sigma_pos_dt=1.1,
        sigma_pos_ct=1.2,
        sigma_size=0.0,
        defect_rate=1e-3,
    ),
    reader_fwhm_dt=30.0,
    reader_fwhm_ct=35.0,
    pixel_pitch=2.0,
    read_snr_db=22.0,
    media_snr_db=9.5,
    lp_fwhm=5.0,
    media_snr_sweep=tuple(float(v) for v in range(6, 17)),
    writer=WriterModel(sigma_eff_dt=2.4, sigma_eff_ct=4.0, mean_write_width=110.0, bit_pitch=18.5),
    drift=DriftModel(max_deviation_dt=50.0, max_deviation_ct=15.0),
    # Servo lines are read while the writer fires; the level is calibrated so
    # trajectory reconstruction lands at the demonstrated sigma_servo of
    # roughly 1.0-1.4 nm.
    servo_read_snr_db=0.0,
    sfd_oe=540.0,
    gradient_dt_oe_per_nm=300.0,
    gradient_ct_oe_per_nm=150.0,
    sigma_litho_dt=1.1,
    sigma_litho_ct=1.2,
)

PRESETS = {TDIN2_1P6.name: TDIN2_1P6}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


def viterbi_weights(preset_name: str = "tdin2_1p6") -> ErrorWeights:
    """Optimized error-source weights shipped for a preset."""
    text = resources.files("bpmlab.data").joinpath("viterbi_weights.json").read_text()
    doc = json.loads(text)
    return ErrorWeights.from_dict(doc[preset_name]["weights"])
