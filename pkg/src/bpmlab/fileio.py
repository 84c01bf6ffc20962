"""File formats: the BPMIMG1 binary container, lattice JSON, and CSV exports.

A BPMIMG1 file is the magic line ``BPMIMG1\\n``, a little-endian uint32
header length, a UTF-8 JSON header, then the payload as little-endian
float32, row-major.  Images and kernels share the container and are told
apart by the header's ``kind`` field.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .channel import ReadbackImage, ResponseKernel
from .lattice import DEFECT_CODES, DEFECT_NAMES, IslandLattice, LatticeParams
from .servo import Trajectory
from .viterbi2d import ErrorWeights

MAGIC = b"BPMIMG1\n"


def _write_container(path, header: dict, data: np.ndarray) -> None:
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def _read_container(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a BPMIMG1 container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f4")
    ny, nx = header["shape"]
    return header, data.reshape(ny, nx).astype(float)


def write_image(path, image: ReadbackImage) -> None:
    header = {
        "kind": "image",
        "shape": [image.ny, image.nx],
        "pixel_pitch_x_nm": image.pixel_pitch_x,
        "pixel_pitch_y_nm": image.pixel_pitch_y,
        "origin_x_nm": image.origin_x,
        "origin_y_nm": image.origin_y,
    }
    _write_container(path, header, image.data)


def read_image(path) -> ReadbackImage:
    header, data = _read_container(path)
    if header.get("kind") != "image":
        raise ValueError(f"{path}: container holds a {header.get('kind')!r}, not an image")
    return ReadbackImage(
        data,
        header["pixel_pitch_x_nm"],
        header["pixel_pitch_y_nm"],
        header["origin_x_nm"],
        header["origin_y_nm"],
    )


def write_kernel(path, kernel: ResponseKernel) -> None:
    header = {
        "kind": "kernel",
        "shape": list(kernel.data.shape),
        "pixel_pitch_nm": kernel.pixel_pitch,
        "center_ix": kernel.center_ix,
        "center_iy": kernel.center_iy,
        "fwhm_x_nm": kernel.fwhm_x,
        "fwhm_y_nm": kernel.fwhm_y,
        "amplitude": kernel.amplitude,
    }
    _write_container(path, header, kernel.data)


def read_kernel(path) -> ResponseKernel:
    header, data = _read_container(path)
    if header.get("kind") != "kernel":
        raise ValueError(f"{path}: container holds a {header.get('kind')!r}, not a kernel")
    return ResponseKernel(
        data,
        header["pixel_pitch_nm"],
        header["center_ix"],
        header["center_iy"],
        header.get("fwhm_x_nm"),
        header.get("fwhm_y_nm"),
        header.get("amplitude"),
    )


# ---------------------------------------------------------------------------
# Lattice JSON


def write_lattice(path, lattice: IslandLattice) -> None:
    doc = {
        "params": {
            "bit_pitch_dt": lattice.params.bit_pitch_dt,
            "track_pitch_ct": lattice.params.track_pitch_ct,
            "sigma_pos_dt": lattice.params.sigma_pos_dt,
            "sigma_pos_ct": lattice.params.sigma_pos_ct,
            "sigma_size": lattice.params.sigma_size,
            "defect_rate": lattice.params.defect_rate,
            "extent_dt": lattice.params.extent_dt,
            "extent_ct": lattice.params.extent_ct,
            "rng_seed": lattice.params.rng_seed,
        },
        "n_rows": lattice.n_rows,
        "n_cols": lattice.n_cols,
        "islands": [
            {
                "id": int(i),
                "x_nm": float(lattice.x[i]),
                "y_nm": float(lattice.y[i]),
                "scale": float(lattice.scale[i]),
                "defect": DEFECT_NAMES[int(lattice.defect[i])],
            }
            for i in range(lattice.n_islands)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def read_lattice(path) -> IslandLattice:
    doc = json.loads(Path(path).read_text())
    params = LatticeParams(**doc["params"])
    islands = doc["islands"]
    n = len(islands)
    x = np.empty(n)
    y = np.empty(n)
    scale = np.empty(n)
    defect = np.zeros(n, dtype=np.int8)
    for rec in islands:
        i = rec["id"]
        x[i] = rec["x_nm"]
        y[i] = rec["y_nm"]
        scale[i] = rec["scale"]
        defect[i] = DEFECT_CODES[rec["defect"]]
    n_rows, n_cols = doc["n_rows"], doc["n_cols"]
    merge_partner = np.full(n, -1, dtype=np.int32)
    merged = np.nonzero(defect == DEFECT_CODES["merged"])[0]
    cols = merged % n_cols
    merge_partner[merged] = np.where(cols > 0, merged - 1, merged + 1)
    return IslandLattice(params, n_rows, n_cols, x, y, scale, defect, merge_partner)


# ---------------------------------------------------------------------------
# Weights JSON


def save_weights(path, preset_name: str, weights: ErrorWeights, meta: dict | None = None) -> None:
    """Persist optimized error weights keyed by preset name (merging)."""
    path = Path(path)
    doc = json.loads(path.read_text()) if path.exists() else {}
    entry = {"weights": weights.as_dict()}
    if meta:
        entry["meta"] = meta
    doc[preset_name] = entry
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_weights(path, preset_name: str) -> ErrorWeights:
    doc = json.loads(Path(path).read_text())
    return ErrorWeights.from_dict(doc[preset_name]["weights"])


# ---------------------------------------------------------------------------
# CSV exports (metadata lines prefixed with '#')


def _write_csv(path, meta: dict, columns: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def write_trajectory_csv(path, trajectory: Trajectory) -> None:
    edges = set(int(e) for e in trajectory.clock_edges)
    rows = (
        (int(t), f"{x:.6f}", f"{y:.6f}", int(int(t) in edges))
        for t, x, y in zip(trajectory.t, trajectory.x, trajectory.y)
    )
    _write_csv(path, {"format": "trajectory"}, ["t", "x_nm", "y_nm", "is_clock_edge"], rows)


def read_trajectory_csv(path) -> Trajectory:
    t, x, y, edges = [], [], [], []
    with open(path) as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        if header[:3] != ["t", "x_nm", "y_nm"]:
            raise ValueError(f"{path}: not a trajectory CSV")
        for row in reader:
            t.append(int(row[0]))
            x.append(float(row[1]))
            y.append(float(row[2]))
            if int(row[3]):
                edges.append(int(row[0]))
    return Trajectory(np.asarray(t), np.asarray(x), np.asarray(y), np.asarray(edges, int))


def write_sweep_csv(path, points, meta: dict | None = None) -> None:
    rows = (
        (p.media_snr_db, p.decoder, p.n_bits, p.n_errors,
         f"{p.ber:.6e}", f"{p.ci_low:.6e}", f"{p.ci_high:.6e}")
        for p in points
    )
    _write_csv(
        path,
        {"format": "snr_sweep", **(meta or {})},
        ["media_snr_db", "decoder", "bits", "errors", "ber", "ci_low", "ci_high"],
        rows,
    )


def write_map_csv(path, rate_map, meta: dict | None = None) -> None:
    """Flatten a 2D registration map to (phase, ct, trials, count, rate) rows."""
    rows = []
    rate = rate_map.rate
    for i, ph in enumerate(rate_map.phase_centers):
        for j, ct in enumerate(rate_map.ct_centers):
            rows.append(
                (
                    f"{ph:.3f}",
                    f"{ct:.3f}",
                    int(rate_map.trials[i, j]),
                    int(rate_map.counts[i, j]),
                    "" if not np.isfinite(rate[i, j]) else f"{rate[i, j]:.6e}",
                )
            )
    _write_csv(
        path,
        {"format": f"{rate_map.kind}_map", **(meta or {})},
        ["phase_nm", "ct_nm", "trials", "count", "rate"],
        rows,
    )


def write_phase_field_csv(path, fld) -> None:
    rows = []
    for i in range(fld.n_lines):
        for j in range(fld.n_segments):
            rows.append(
                (
                    f"{fld.line_pos[i]:.3f}",
                    f"{fld.seg_pos[j]:.3f}",
                    f"{fld.amplitude[i, j]:.6e}",
                    f"{fld.wavevector[i, j]:.8f}",
                    f"{fld.phase[i, j]:.6f}" if fld.valid[i, j] else "",
                    int(fld.valid[i, j]),
                )
            )
    _write_csv(
        path,
        {"format": "phase_field", "direction": fld.direction},
        ["line_nm", "segment_nm", "amplitude", "wavevector_rad_per_nm", "phase_rad", "valid"],
        rows,
    )
