"""Command-line orchestration: artifact generation, decoding, experiments.

Every command is deterministic given its config and seed; a run manifest
(config hash, seed, library versions) is written next to the outputs, and
failures produce machine-readable JSON on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import scipy

import bpmlab

from . import ber, fileio, prf, presets, servo, sieve, viterbi2d
from ._rng import substream
from .channel import (
    NoiseParams,
    Renderer,
    ac_demag_pattern,
    bit_error_rate,
    random_bits,
    sample_at_islands,
)
from .lattice import generate_lattice


class ConfigError(ValueError):
    pass


#: configuration fields accepted in a run config document, with types.
CONFIG_SCHEMA = {
    "preset": str,
    "extent_dt": (int, float),
    "extent_ct": (int, float),
    "defect_rate": (int, float),
    "media_snr_db": (int, float),
    "read_snr_db": (int, float),
    "pattern": str,
    "trials": int,
    "passes": int,
    "media_snr_sweep": list,
    "decoders": list,
    "scan_length": (int, float),
    "segment_length": (int, float),
    "servo_read_snr_db": (int, float),
    "decode_error_floor": (int, float),
}

DEFAULT_CONFIG = {
    "preset": "tdin2_1p6",
    "extent_dt": 18.5 * 64,
    "extent_ct": 22.0 * 32,
    "pattern": "prbs",
}


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON at line {exc.lineno}: {exc.msg}")
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path}: top level must be an object")
        for key, value in doc.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"config {path}: unknown field {key!r}")
            if not isinstance(value, CONFIG_SCHEMA[key]):
                raise ConfigError(
                    f"config {path}: field {key!r} expects {CONFIG_SCHEMA[key]}, got {type(value).__name__}"
                )
        cfg.update(doc)
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    if "preset" not in cfg or not cfg["preset"]:
        raise ConfigError("missing required field: preset")
    return cfg


def _config_hash(cfg: dict, seed: int) -> str:
    blob = json.dumps({"config": cfg, "seed": seed}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(out_dir: Path, cfg: dict, seed: int, command: str, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": _config_hash(cfg, seed),
        "seed": seed,
        "outputs": sorted(outputs),
        "versions": {
            "bpmlab": bpmlab.__version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _preset_and_lattice(cfg: dict, seed: int):
    preset = presets.get_preset(cfg["preset"])
    params = preset.lattice_params(
        float(cfg.get("extent_dt", DEFAULT_CONFIG["extent_dt"])),
        float(cfg.get("extent_ct", DEFAULT_CONFIG["extent_ct"])),
        rng_seed=seed,
        defect_rate=cfg.get("defect_rate"),
    )
    return preset, generate_lattice(params)


def _pattern_bits(cfg: dict, lattice, seed: int) -> np.ndarray:
    kind = cfg.get("pattern", "prbs")
    if kind == "prbs":
        from .channel import prbs

        return prbs(lattice.n_islands, seed=seed + 1)
    if kind == "random":
        return random_bits(lattice.n_islands, substream(seed, "pattern"))
    if kind == "ac_demag":
        return ac_demag_pattern(lattice, 1.0, seed=seed)
    if kind == "checkerboard":
        return ac_demag_pattern(lattice, np.inf)
    raise ConfigError(f"unknown pattern {kind!r}")


def cmd_generate(args) -> int:
    cfg = load_config(args.config, {"preset": args.preset})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preset, lattice = _preset_and_lattice(cfg, args.seed)
    kernel = preset.kernel()
    bits = _pattern_bits(cfg, lattice, args.seed)
    noise = NoiseParams(
        cfg.get("media_snr_db", preset.media_snr_db),
        cfg.get("read_snr_db", preset.read_snr_db),
        rng_seed=args.seed,
    )
    image = Renderer(lattice, kernel).render(bits, noise)

    fileio.write_lattice(out / "lattice.json", lattice)
    fileio.write_image(out / "image.bpmimg", image)
    fileio.write_kernel(out / "kernel.bpmimg", kernel)
    (out / "bits.json").write_text(json.dumps({"bits": bits.tolist()}))
    write_manifest(out, cfg, args.seed, "generate",
                   ["lattice.json", "image.bpmimg", "kernel.bpmimg", "bits.json"])
    return 0


def cmd_decode(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lattice = fileio.read_lattice(args.lattice)
    image = fileio.read_image(args.image)
    kernel = fileio.read_kernel(args.kernel)
    if not np.isclose(kernel.pixel_pitch, image.pixel_pitch_x):
        raise ConfigError(
            f"kernel pitch {kernel.pixel_pitch} nm does not match image pitch {image.pixel_pitch_x} nm"
        )
    samples = sample_at_islands(image, lattice.x, lattice.y)
    if args.algo == "threshold":
        assignment = prf.threshold_decode(samples)
    elif args.algo == "sieve":
        assignment = sieve.decode(samples, kernel, lattice).assignment
    elif args.algo == "viterbi":
        model = viterbi2d.build_local_model(kernel, lattice)
        try:
            weights = presets.viterbi_weights(args.preset)
        except (KeyError, FileNotFoundError):
            weights = viterbi2d.ErrorWeights.uniform(1.0)
        assignment = viterbi2d.decode(samples, model, weights)
    else:  # argparse choices guard this
        raise ConfigError(f"unknown algo {args.algo!r}")

    doc = {"algo": args.algo, "bits": assignment.bits.tolist()}
    (out / "decoded.json").write_text(json.dumps(doc))
    metrics = {"algo": args.algo, "islands": int(lattice.n_islands)}
    if args.bits:
        truth = np.asarray(json.loads(Path(args.bits).read_text())["bits"], dtype=np.int8)
        metrics["ber"] = bit_error_rate(assignment.bits, truth, mask=lattice.active)
        metrics["errors"] = int(np.sum(assignment.bits[lattice.active] != truth[lattice.active]))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    write_manifest(out, {"algo": args.algo}, args.seed, "decode", ["decoded.json", "metrics.json"])
    return 0


def _experiment_fig7(cfg: dict, seed: int, out: Path, threads: int) -> list[str]:
    preset = presets.get_preset(cfg["preset"])
    params = preset.lattice_params(
        float(cfg.get("extent_dt", 18.5 * 32)), float(cfg.get("extent_ct", 22.0 * 32)),
        rng_seed=seed, defect_rate=0.0,
    )
    sweep_cfg = ber.SweepConfig(
        lattice_params=params,
        kernel=preset.kernel(),
        media_snr_db=tuple(cfg.get("media_snr_sweep", preset.media_snr_sweep)),
        read_snr_db=float(cfg.get("read_snr_db", preset.read_snr_db)),
        decoders=tuple(cfg.get("decoders", ("viterbi", "sieve"))),
        trials=int(cfg.get("trials", 100)),
        seed=seed,
        weights=presets.viterbi_weights(cfg["preset"]),
        threads=threads,
    )
    points = ber.snr_sweep(sweep_cfg)
    fileio.write_sweep_csv(out / "fig7_sweep.csv", points, {"preset": cfg["preset"], "seed": seed})
    return ["fig7_sweep.csv"]


def _experiment_ber_map(cfg: dict, seed: int, out: Path) -> list[str]:
    preset = presets.get_preset(cfg["preset"])
    params = preset.lattice_params(
        float(cfg.get("extent_dt", 18.5 * 40)), float(cfg.get("extent_ct", 22.0 * 40)),
        rng_seed=seed, defect_rate=0.0,
    )
    map_cfg = ber.WriteErrorMapConfig(
        lattice_params=params,
        writer=preset.writer,
        passes=int(cfg.get("passes", 400)),
        seed=seed,
        decode_error_floor=float(cfg.get("decode_error_floor", 3e-3)),
    )
    events = ber.simulate_write_error_map(map_cfg)
    oter, bfr, stats = ber.compile_maps(events)
    smr = ber.ber_smr(oter, bfr, params.track_pitch_ct)
    meta = {"preset": cfg["preset"], "seed": seed, "events": stats.n_events}
    fileio.write_map_csv(out / "oter_map.csv", oter, meta)
    fileio.write_map_csv(out / "bfr_map.csv", bfr, meta)

    d, rate, trials = oter.phase_cross_section(0.0, 2.0)
    fit = ber.fit_oter(d, rate, trials, params.bit_pitch_dt)
    u, rate_c, trials_c = bfr.ct_cross_section(0.0, 1.0)
    bfit = ber.fit_bfr(u, rate_c, trials_c, mww_init=preset.writer.mean_write_width)
    summary = {
        "sigma_eff_dt_nm": fit.sigma_eff,
        "oter_center_nm": fit.center,
        "sigma_eff_ct_neg_nm": bfit.sigma_neg,
        "sigma_eff_ct_pos_nm": bfit.sigma_pos,
        "mean_write_width_nm": bfit.mww,
        "events": stats.n_events,
        "smr_min_rate": float(np.nanmin(smr.rate)),
    }
    (out / "ber_map_summary.json").write_text(json.dumps(summary, indent=1))
    return ["oter_map.csv", "bfr_map.csv", "ber_map_summary.json"]


def _experiment_prf_roundtrip(cfg: dict, seed: int, out: Path) -> list[str]:
    preset = presets.get_preset(cfg["preset"])
    params = preset.lattice_params(
        float(cfg.get("extent_dt", 18.5 * 64)), float(cfg.get("extent_ct", 22.0 * 48)),
        rng_seed=seed, defect_rate=0.0,
    )
    lattice = generate_lattice(params)
    kernel = preset.kernel()
    bits = random_bits(lattice.n_islands, substream(seed, "pattern"))
    noise = NoiseParams(preset.media_snr_db, preset.read_snr_db, rng_seed=seed)
    image = Renderer(lattice, kernel).render(bits, noise)
    result = prf.iterate_prf(image, lattice, decoder="sieve")
    accuracy = 1.0 - bit_error_rate(result.assignment.bits, bits, mask=lattice.active)
    fileio.write_kernel(out / "extracted_kernel.bpmimg", result.kernel)
    report = {
        "iterations": result.iterations,
        "converged": result.converged,
        "decode_accuracy": accuracy,
    }
    (out / "prf_roundtrip.json").write_text(json.dumps(report, indent=1))
    return ["extracted_kernel.bpmimg", "prf_roundtrip.json"]


def _experiment_servo_roundtrip(cfg: dict, seed: int, out: Path) -> list[str]:
    preset = presets.get_preset(cfg["preset"])
    scan = float(cfg.get("scan_length", 15000.0))
    params = preset.lattice_params(scan + 2000.0, 22.0 * 14, rng_seed=seed, defect_rate=0.0)
    lattice = generate_lattice(params)
    image = Renderer(lattice, preset.kernel()).render(
        random_bits(lattice.n_islands, substream(seed, "pattern"))
    )
    traj = servo.simulate_trajectory(
        scan, preset.drift, sample_pitch=preset.pixel_pitch,
        y_center=params.extent_ct / 2.0, x_start=500.0, seed=seed,
    )
    rows = []
    for label, snr in (("noiseless", None), ("paper_like", cfg.get("servo_read_snr_db", preset.servo_read_snr_db))):
        line = servo.read_servo_line(image, traj, snr, seed=seed + 7)
        rec = servo.reconstruct_trajectory(line, image, float(cfg.get("segment_length", 1000.0)))
        centers = [s.t_center for s in rec.segments]
        mask = (rec.trajectory.t >= min(centers)) & (rec.trajectory.t <= max(centers))
        err = np.hypot(rec.trajectory.x[mask] - traj.x[mask], rec.trajectory.y[mask] - traj.y[mask])
        rows.append((label, "" if snr is None else f"{snr:.1f}",
                     f"{float(np.sqrt(np.mean(err**2))):.4f}", f"{rec.scores.min():.3f}"))
    fileio._write_csv(
        out / "servo_roundtrip.csv",
        {"format": "servo_roundtrip", "seed": seed},
        ["case", "servo_read_snr_db", "rms_nm", "min_score"],
        rows,
    )
    fileio.write_trajectory_csv(out / "trajectory.csv", traj)
    return ["servo_roundtrip.csv", "trajectory.csv"]


def _experiment_optimize_weights(cfg: dict, seed: int, out: Path) -> list[str]:
    preset = presets.get_preset(cfg["preset"])
    params = preset.lattice_params(
        float(cfg.get("extent_dt", 18.5 * 32)), float(cfg.get("extent_ct", 22.0 * 32)),
        rng_seed=seed, defect_rate=0.0,
    )
    opt = viterbi2d.optimize_weights(
        viterbi2d.WeightOptimizationConfig(
            lattice_params=params,
            kernel=preset.kernel(),
            media_snr_db=float(cfg.get("media_snr_db", 10.5)),
            read_snr_db=float(cfg.get("read_snr_db", preset.read_snr_db)),
            trials=int(cfg.get("trials", 40)),
            seed=seed,
        )
    )
    fileio.save_weights(
        out / "viterbi_weights.json", cfg["preset"], opt.weights,
        meta={"training_ber": opt.ber, "seed": seed},
    )
    return ["viterbi_weights.json"]


EXPERIMENTS = {
    "fig7_sweep": lambda cfg, seed, out, threads: _experiment_fig7(cfg, seed, out, threads),
    "ber_map": lambda cfg, seed, out, threads: _experiment_ber_map(cfg, seed, out),
    "prf_roundtrip": lambda cfg, seed, out, threads: _experiment_prf_roundtrip(cfg, seed, out),
    "servo_roundtrip": lambda cfg, seed, out, threads: _experiment_servo_roundtrip(cfg, seed, out),
    "optimize_weights": lambda cfg, seed, out, threads: _experiment_optimize_weights(cfg, seed, out),
}


def cmd_experiment(args) -> int:
    cfg = load_config(args.config, {"preset": args.preset})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = EXPERIMENTS[args.name](cfg, args.seed, out, args.threads)
    write_manifest(out, cfg, args.seed, f"experiment {args.name}", outputs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bpmlab",
        description="Bit-patterned-media read-channel workbench",
    )
    parser.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    parser.add_argument("--threads", type=int, default=1, help="parallel trial execution")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="synthesize lattice + readback image files")
    gen.add_argument("--config", help="JSON run config")
    gen.add_argument("--preset", default=None, help="preset name (default from config)")
    gen.add_argument("--out-dir", required=True)
    gen.set_defaults(func=cmd_generate)

    dec = sub.add_parser("decode", help="decode an image into per-island bits")
    dec.add_argument("--image", required=True)
    dec.add_argument("--lattice", required=True)
    dec.add_argument("--kernel", required=True)
    dec.add_argument("--algo", required=True, choices=["threshold", "viterbi", "sieve"])
    dec.add_argument("--bits", help="ground-truth bits JSON for BER reporting")
    dec.add_argument("--preset", default="tdin2_1p6")
    dec.add_argument("--out-dir", required=True)
    dec.set_defaults(func=cmd_decode)

    exp = sub.add_parser("experiment", help="run a canned experiment, emit CSV reports")
    exp.add_argument("name", choices=sorted(EXPERIMENTS))
    exp.add_argument("--config", help="JSON run config")
    exp.add_argument("--preset", default=None)
    exp.add_argument("--out-dir", required=True)
    exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
