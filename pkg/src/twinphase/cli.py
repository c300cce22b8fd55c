"""Batch front-end: config parsing, subcommands, reproducible manifests.

Subcommands:

* ``target``    render the engineered test object to QPF1 files
* ``simulate``  Monte-Carlo twin-beam frame sets (three exposures per frame)
* ``retrieve``  phase + transmittance reconstruction from a frame set
* ``scan``      nrf / advantage / resolution / noise CSV curves

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure.  Identical config + seed produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

# QPI_THREADS caps BLAS/FFT worker pools; must be set before numpy loads.
if os.environ.get("QPI_THREADS"):
    _t = os.environ["QPI_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _t)

import numpy as np

from . import __version__, metrics, optics, qpf, retrieval, twinbeam
from .core import (
    ConfigError,
    GridError,
    ObjectSpec,
    OpticalSystem,
    RngStream,
    ScalarField2D,
    TwinBeamConfig,
    generate_edge_target,
    generate_test_target,
    validate_config,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

_OPTICAL_KEYS = {
    "wavelength": float,
    "magnification": float,
    "camera_pixel": float,
    "blur_fwhm": float,
}
_TWIN_KEYS = {
    "l_cff": float,
    "eta0": float,
    "epsilon": float,
    "mean_photons_per_pixel": float,
    "beam_profile": str,
}
_RUN_KEYS = {
    "dz": float,
    "bin_px": int,
    "k_mode": str,
    "grid_size": int,
    "intensity_floor": float,
}


class NumericalError(RuntimeError):
    """A fit or solver failed to produce a usable result."""


def parse_config_file(path):
    """Parse the flat `key = value` config format (UTF-8, # comments).

    Returns (OpticalSystem, TwinBeamConfig, dict of run keys); unknown
    keys raise ConfigError.
    """
    optical, twin, run = {}, {}, {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            if key in _OPTICAL_KEYS:
                optical[key] = _OPTICAL_KEYS[key](value)
            elif key in _TWIN_KEYS:
                twin[key] = _TWIN_KEYS[key](value)
            elif key in _RUN_KEYS:
                run[key] = _RUN_KEYS[key](value)
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key `{key}`")
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for `{key}`: {exc}")
    if "beam_profile" in twin:
        bp = twin["beam_profile"]
        if bp != "uniform":
            try:
                twin["beam_profile"] = float(bp)
            except ValueError:
                raise ConfigError(
                    f"beam_profile must be `uniform` or a radius, got `{bp}`"
                )
    try:
        sys_cfg = OpticalSystem(**optical)
        twin_cfg = TwinBeamConfig(**twin)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    validate_config(sys_cfg, twin_cfg)
    return sys_cfg, twin_cfg, run


def fmt(value) -> str:
    """Fixed numeric formatting for CSV cells: 9 significant digits."""
    if isinstance(value, float):
        return "%.9g" % value
    return str(value)


def write_csv(path, header, rows):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}")


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, config_snapshot, seed, outputs):
    """Emit manifest.json with checksums of every data file in the run."""
    manifest = {
        "tool_version": __version__,
        "master_seed": seed,
        "config": config_snapshot,
        "files": {
            os.path.basename(p): _sha256(p) for p in sorted(outputs)
        },
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _config_snapshot(sys_cfg, twin_cfg, extra=None):
    snap = {
        "wavelength": sys_cfg.wavelength,
        "magnification": sys_cfg.magnification,
        "camera_pixel": sys_cfg.camera_pixel,
        "blur_fwhm": sys_cfg.blur_fwhm,
        "l_cff": twin_cfg.l_cff,
        "eta0": twin_cfg.eta0,
        "epsilon": twin_cfg.epsilon,
        "mean_photons_per_pixel": twin_cfg.mean_photons_per_pixel,
        "beam_profile": twin_cfg.beam_profile,
    }
    if extra:
        snap.update(extra)
    return snap


def _load_configs(args):
    if args.config:
        sys_cfg, twin_cfg, run = parse_config_file(args.config)
    else:
        sys_cfg, twin_cfg, run = OpticalSystem(), TwinBeamConfig(), {}
        validate_config(sys_cfg, twin_cfg)
    return sys_cfg, twin_cfg, run


def _parse_dz_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --dz list: `{text}`")
    if not values or any(v <= 0 for v in values):
        raise ConfigError("--dz values must be positive")
    return values


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_target(args):
    sys_cfg, twin_cfg, run = _load_configs(args)
    size = args.size or run.get("grid_size", 220)
    pitch = sys_cfg.object_pixel
    obj = generate_test_target(size, size, pitch)
    if args.pure_phase:
        obj = ObjectSpec(
            tau=obj.tau.with_values(np.ones_like(obj.tau.values)), phi=obj.phi
        )
    os.makedirs(args.out, exist_ok=True)
    tau_path = os.path.join(args.out, "target_tau.qpf")
    phi_path = os.path.join(args.out, "target_phi.qpf")
    qpf.write_qpf(tau_path, obj.tau)
    qpf.write_qpf(phi_path, obj.phi)
    snap = _config_snapshot(sys_cfg, twin_cfg, {"grid_size": size})
    write_manifest(args.out, snap, args.seed, [tau_path, phi_path])
    print(f"wrote target ({size}x{size}) to {args.out}")
    return EXIT_OK


def cmd_simulate(args):
    sys_cfg, twin_cfg, run = _load_configs(args)
    size = run.get("grid_size", 220)
    pitch = sys_cfg.object_pixel
    obj = generate_test_target(size, size, pitch)
    dz_list = _parse_dz_list(args.dz)
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    calib_s, calib_i = twinbeam.expected_counts(
        None, sys_cfg, twin_cfg, 0.0, grid=obj.tau
    )
    for name, field in (("calib_mean_signal", calib_s), ("calib_mean_idler", calib_i)):
        path = os.path.join(args.out, name + ".qpf")
        qpf.write_qpf(path, field)
        outputs.append(path)

    base = RngStream(args.seed)
    stream = 0
    for dz in dz_list:
        for frame in range(args.frames):
            for tag, signed_dz in (("m", -dz), ("0", 0.0), ("p", +dz)):
                tf = twinbeam.sample_twin_frame(
                    obj, sys_cfg, twin_cfg, signed_dz, base.child(stream)
                )
                stream += 1
                stem = f"dz{fmt(dz)}_f{frame:04d}_{tag}"
                for arm, field in (("s", tf.n_s), ("i", tf.n_i)):
                    path = os.path.join(args.out, f"{stem}_{arm}.qpf")
                    qpf.write_qpf(path, field)
                    outputs.append(path)
    snap = _config_snapshot(
        sys_cfg,
        twin_cfg,
        {"grid_size": size, "dz_list": dz_list, "frames": args.frames},
    )
    write_manifest(args.out, snap, args.seed, outputs)
    print(f"wrote {len(outputs)} files ({args.frames} frames x {len(dz_list)} dz)")
    return EXIT_OK


def _read_manifest(frames_dir):
    path = os.path.join(frames_dir, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise OSError(f"missing manifest in {frames_dir}: {exc}")


def cmd_retrieve(args):
    manifest = _read_manifest(args.frames)
    conf = manifest["config"]
    sys_cfg = OpticalSystem(
        wavelength=conf["wavelength"],
        magnification=conf["magnification"],
        camera_pixel=conf["camera_pixel"],
        blur_fwhm=conf["blur_fwhm"],
    )
    dz_list = conf.get("dz_list", [])
    n_frames = conf.get("frames", 0)
    if not dz_list or not n_frames:
        raise ConfigError("frame set contains no frames to retrieve")
    dz = float(args.dz) if args.dz else dz_list[0]
    if dz not in dz_list:
        raise ConfigError(f"dz = {dz} not present in frame set {dz_list}")

    calib_s = qpf.read_qpf(os.path.join(args.frames, "calib_mean_signal.qpf"))
    calib_i = qpf.read_qpf(os.path.join(args.frames, "calib_mean_idler.qpf"))
    config = retrieval.RetrievalConfig(
        dz=dz,
        wavenumber=sys_cfg.wavenumber,
        k_mode=args.k_mode,
        bin_px=args.bin,
        reference_mean=calib_s,
        reference_mean_idler=calib_i,
        eta0=conf["eta0"],
        epsilon=conf["epsilon"],
        l_cff=conf["l_cff"],
    )
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    def load(frame, tag, arm):
        stem = f"dz{fmt(dz)}_f{frame:04d}_{tag}_{arm}.qpf"
        return qpf.read_qpf(os.path.join(args.frames, stem))

    sum_m = sum_0 = sum_p = None
    tag_dz = {"m": -dz, "0": 0.0, "p": +dz}
    phase_rows = []
    for frame in range(n_frames):
        tf = {
            tag: twinbeam.TwinBeamFrame(
                n_s=load(frame, tag, "s"),
                n_i=load(frame, tag, "i"),
                dz=tag_dz[tag],
                stream_index=frame,
            )
            for tag in ("m", "0", "p")
        }
        phase = retrieval.phase_from_twin_frames(tf["m"], tf["0"], tf["p"], config)
        out_path = os.path.join(args.out, f"phase_f{frame:04d}.qpf")
        qpf.write_qpf(out_path, phase.values)
        outputs.append(out_path)
        phase_rows.append((frame, phase.k_value, phase.provenance))
        if sum_m is None:
            sum_m = tf["m"].n_s.values.copy()
            sum_0 = tf["0"].n_s.values.copy()
            sum_p = tf["p"].n_s.values.copy()
        else:
            sum_m += tf["m"].n_s.values
            sum_0 += tf["0"].n_s.values
            sum_p += tf["p"].n_s.values
        tau_est = retrieval.estimate_transmittance(tf["0"].n_s, tf["0"].n_i, config)
        if frame == 0:
            tau_path = os.path.join(args.out, "transmittance_f0000.qpf")
            qpf.write_qpf(tau_path, tau_est.tau)
            outputs.append(tau_path)

    # all-frame averaged classical reference reconstruction
    grid = calib_s
    avg_cfg = replace(config, k_mode="classical")
    avg_phase = retrieval.phase_from_counts(
        grid.with_values(sum_m / n_frames),
        grid.with_values(sum_0 / n_frames),
        grid.with_values(sum_p / n_frames),
        avg_cfg,
        provenance="reference",
    )
    avg_path = os.path.join(args.out, "phase_average.qpf")
    qpf.write_qpf(avg_path, avg_phase.values)
    outputs.append(avg_path)

    steps = metrics.step_heights(
        avg_phase.values,
        bin_px=args.bin,
        fine_shape=(calib_s.width, calib_s.height),
    )
    step_path = os.path.join(args.out, "steps.csv")
    write_csv(
        step_path,
        ["region", "step_rad"],
        [("pi", steps["pi"]), ("null", steps["null"])],
    )
    outputs.append(step_path)
    k_path = os.path.join(args.out, "frames.csv")
    write_csv(k_path, ["frame", "k_value", "provenance"], phase_rows)
    outputs.append(k_path)
    write_manifest(args.out, conf, manifest.get("master_seed"), outputs)
    print(
        f"retrieved {n_frames} frames at dz={dz} bin={args.bin} "
        f"(pi step {steps['pi']:.4f}, null step {steps['null']:.4f})"
    )
    return EXIT_OK


def _scan_nrf(args, sys_cfg, twin_cfg):
    pitch = sys_cfg.object_pixel
    size = 220
    grid = ScalarField2D(size, size, pitch, np.zeros((size, size)))
    base = RngStream(args.seed)
    frames = [
        twinbeam.sample_twin_frame(None, sys_cfg, twin_cfg, 0.0, base.child(i), grid=grid)
        for i in range(args.frames)
    ]
    rows = []
    for bin_px in (1, 3, 6, 12, 25):
        point = twinbeam.measure_nrf(frames, bin_px, l_cff=twin_cfg.l_cff)
        rows.append(
            (
                point.d_factor,
                point.nrf,
                point.nrf_stderr,
                point.fano,
                twinbeam.nrf_predicted(twin_cfg.eta0, point.d_factor, twin_cfg.epsilon),
            )
        )
    return ["D", "nrf", "nrf_stderr", "fano_signal", "nrf_model"], rows


def _scan_advantage(args, sys_cfg, twin_cfg):
    pitch = sys_cfg.object_pixel
    obj = generate_test_target(220, 220, pitch)
    dz_list = _parse_dz_list(args.dz)
    mean_s, mean_i = twinbeam.expected_counts(None, sys_cfg, twin_cfg, 0.0, grid=obj.tau)
    base = RngStream(args.seed)
    rows = []
    stream = 0
    for dz in dz_list:
        triples = []
        for _ in range(args.frames):
            fm = twinbeam.sample_twin_frame(obj, sys_cfg, twin_cfg, -dz, base.child(stream))
            f0 = twinbeam.sample_twin_frame(obj, sys_cfg, twin_cfg, 0.0, base.child(stream + 1))
            fp = twinbeam.sample_twin_frame(obj, sys_cfg, twin_cfg, +dz, base.child(stream + 2))
            stream += 3
            triples.append((fm, f0, fp))
        for bin_px in (1, 3):
            config = retrieval.RetrievalConfig(
                dz=dz,
                wavenumber=sys_cfg.wavenumber,
                bin_px=bin_px,
                reference_mean=mean_s,
                reference_mean_idler=mean_i,
                eta0=twin_cfg.eta0,
                epsilon=twin_cfg.epsilon,
                l_cff=twin_cfg.l_cff,
            )
            phi_ref = metrics.reference_phase(obj, sys_cfg, twin_cfg, config)
            for mode in ("tie", "tau"):
                adv = metrics.quantum_advantage(
                    triples, replace(config, k_mode=mode), phi_ref
                )
                rows.append(
                    (
                        dz,
                        adv.d_factor,
                        mode,
                        adv.c_quant,
                        adv.c_clas,
                        adv.ratio,
                        adv.ratio_stderr,
                    )
                )
    return ["dz", "D", "k_mode", "C_quant", "C_clas", "ratio", "stderr"], rows


def _scan_resolution(args, sys_cfg, twin_cfg):
    pitch = sys_cfg.object_pixel
    target = generate_edge_target(220, 220, pitch)
    dz_list = _parse_dz_list(args.dz)
    rows_raw = metrics.resolution_scan(
        target,
        dz_list,
        (1, 3, 6, 12),
        sys_cfg,
        twin_cfg,
        edge_row_um=110 * pitch,
        edge_window_um=(40 * pitch, 128 * pitch),
    )
    if not all(r["ok"] for r in rows_raw):
        raise NumericalError("edge-spread fit failed at one or more scan points")
    rows = [
        (r["dz"], r["d_factor"], r["r_phase_um"], r["se_r_um"]) for r in rows_raw
    ]
    return ["dz", "D", "r_phase_um", "se_r_um"], rows


def _scan_noise(args, sys_cfg, twin_cfg):
    pitch = sys_cfg.object_pixel
    rng = RngStream(args.seed)
    l_values = (1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 60.0, 80.0)
    rows = metrics.noise_suppression_scan(
        l_values,
        220,
        220,
        pitch,
        dz=0.025,
        i0=twin_cfg.mean_photons_per_pixel,
        wavenumber=sys_cfg.wavenumber,
        rng=rng,
    )
    return ["l_cff_um", "suppression_pct"], [
        (r["l_cff_um"], r["suppression_pct"]) for r in rows
    ]


def cmd_scan(args):
    sys_cfg, twin_cfg, _ = _load_configs(args)
    runner = {
        "nrf": _scan_nrf,
        "advantage": _scan_advantage,
        "resolution": _scan_resolution,
        "noise": _scan_noise,
    }[args.scan_type]
    header, rows = runner(args, sys_cfg, twin_cfg)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"{args.scan_type}.csv")
    write_csv(csv_path, header, rows)
    snap = _config_snapshot(sys_cfg, twin_cfg, {"scan": args.scan_type})
    write_manifest(args.out, snap, args.seed, [csv_path])
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="twinphase",
        description="Twin-beam quantitative phase imaging simulator",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0, help="master seed (u64)")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("target", help="render the engineered test object")
    common(p)
    p.add_argument("--size", type=int, default=None, help="grid size in pixels")
    p.add_argument("--pure-phase", action="store_true", help="force tau = 1")
    p.set_defaults(func=cmd_target)

    p = sub.add_parser("simulate", help="sample twin-beam frame sets")
    common(p)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--dz", default="0.025", help="defocus list, mm (comma separated)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("retrieve", help="reconstruct phase and transmittance")
    common(p)
    p.add_argument("--frames", dest="frames", required=True, help="simulate output dir")
    p.add_argument("--dz", default=None, help="defocus to retrieve, mm")
    p.add_argument("--bin", type=int, default=1, help="binning in pixels")
    p.add_argument(
        "--k-mode", default="classical", help="classical | tau | tie | numeric value"
    )
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("scan", help="characterization scans")
    common(p)
    p.add_argument(
        "scan_type", choices=("nrf", "advantage", "resolution", "noise")
    )
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--dz", default="0.0125,0.025,0.05,0.1")
    p.set_defaults(func=cmd_scan)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        # includes QpfFormatError: a malformed field file is an I/O error
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
