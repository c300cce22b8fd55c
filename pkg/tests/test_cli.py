"""Tests of config parsing, CSV/manifest emission and CLI exit codes."""

import hashlib
import json
import os

import numpy as np
import pytest

from twinphase import qpf
from twinphase.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    fmt,
    main,
    parse_config_file,
    write_csv,
)
from twinphase.core import ConfigError


class TestConfigParsing:
    def write(self, tmp_path, text):
        path = tmp_path / "run.cfg"
        path.write_text(text, encoding="utf-8")
        return str(path)

    def test_valid_file(self, tmp_path):
        path = self.write(
            tmp_path,
            """
            # comment line
            wavelength = 810
            l_cff = 5.0   # trailing comment
            eta0 = 0.7
            mean_photons_per_pixel = 600
            bin_px = 12
            k_mode = tie
            """,
        )
        sys_cfg, twin_cfg, run = parse_config_file(path)
        assert sys_cfg.wavelength == 810.0
        assert twin_cfg.l_cff == 5.0
        assert run == {"bin_px": 12, "k_mode": "tie"}

    def test_unknown_key_rejected(self, tmp_path):
        path = self.write(tmp_path, "volume = 11\n")
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_file(path)

    def test_bad_value_rejected(self, tmp_path):
        path = self.write(tmp_path, "eta0 = loud\n")
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_file(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = self.write(tmp_path, "eta0 0.7\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file(path)

    def test_invariant_violation_rejected(self, tmp_path):
        path = self.write(tmp_path, "eta0 = 1.5\n")
        with pytest.raises(ConfigError, match="efficiency out of range"):
            parse_config_file(path)

    def test_numeric_beam_profile(self, tmp_path):
        path = self.write(tmp_path, "beam_profile = 800\n")
        _, twin_cfg, _ = parse_config_file(path)
        assert twin_cfg.beam_profile == 800.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config_file(str(tmp_path / "absent.cfg"))


class TestFormatting:
    def test_nine_significant_digits(self):
        assert fmt(1.0 / 3.0) == "0.333333333"
        assert fmt(0.0125) == "0.0125"
        assert fmt(3) == "3"
        assert fmt("tie") == "tie"

    def test_csv_newlines(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(str(path), ["a", "b"], [(1.5, "x"), (2.0, "y")])
        raw = path.read_bytes()
        assert raw == b"a,b\n1.5,x\n2,y\n"


class TestExitCodes:
    def test_bad_config_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("eta0 = 2.0\n")
        code = main(["target", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG

    def test_missing_manifest_exits_3(self, tmp_path):
        code = main(
            ["retrieve", "--frames", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]
        )
        assert code == EXIT_IO

    def test_corrupt_field_file_exits_3(self, tmp_path):
        frames = tmp_path / "frames"
        frames.mkdir()
        (frames / "manifest.json").write_text(
            json.dumps(
                {
                    "master_seed": 0,
                    "config": {
                        "wavelength": 810.0,
                        "magnification": 8.0,
                        "camera_pixel": 13.0,
                        "blur_fwhm": 1.5,
                        "l_cff": 5.0,
                        "eta0": 0.7,
                        "epsilon": 0.2,
                        "mean_photons_per_pixel": 600.0,
                        "beam_profile": "uniform",
                        "grid_size": 220,
                        "dz_list": [0.025],
                        "frames": 1,
                    },
                    "files": {},
                }
            )
        )
        (frames / "calib_mean_signal.qpf").write_bytes(b"JUNKDATA")
        code = main(["retrieve", "--frames", str(frames), "--out", str(tmp_path / "o")])
        assert code == EXIT_IO


class TestTargetCommand:
    def test_writes_target_and_manifest(self, tmp_path):
        out = tmp_path / "tgt"
        assert main(["target", "--out", str(out)]) == EXIT_OK
        tau = qpf.read_qpf(out / "target_tau.qpf")
        phi = qpf.read_qpf(out / "target_phi.qpf")
        assert tau.width == 220 and phi.height == 220
        manifest = json.loads((out / "manifest.json").read_text())
        for name, digest in manifest["files"].items():
            data = (out / name).read_bytes()
            assert hashlib.sha256(data).hexdigest() == digest

    def test_size_flag(self, tmp_path):
        out = tmp_path / "tgt"
        assert main(["target", "--out", str(out), "--size", "256"]) == EXIT_OK
        assert qpf.read_qpf(out / "target_tau.qpf").width == 256

    def test_pure_phase_flag(self, tmp_path):
        out = tmp_path / "tgt"
        assert main(["target", "--out", str(out), "--pure-phase"]) == EXIT_OK
        tau = qpf.read_qpf(out / "target_tau.qpf")
        assert np.all(tau.values == 1.0)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["target", "--out", str(a)])
        main(["target", "--out", str(b)])
        assert (a / "target_phi.qpf").read_bytes() == (b / "target_phi.qpf").read_bytes()


class TestSimulateCommand:
    def test_zero_frames_manifest_only(self, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--out", str(out), "--frames", "0"]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        # calibration means only, no frame files
        assert sorted(manifest["files"]) == [
            "calib_mean_idler.qpf",
            "calib_mean_signal.qpf",
        ]

    def test_file_count_arithmetic(self, tmp_path):
        out = tmp_path / "sim"
        assert (
            main(
                [
                    "simulate",
                    "--out",
                    str(out),
                    "--frames",
                    "1",
                    "--dz",
                    "0.025",
                    "--seed",
                    "1",
                ]
            )
            == EXIT_OK
        )
        manifest = json.loads((out / "manifest.json").read_text())
        # 3 exposures x 2 arms per frame plus 2 calibration means
        frame_files = [n for n in manifest["files"] if n.startswith("dz")]
        assert len(frame_files) == 6
        assert len(manifest["files"]) == 8
        assert manifest["master_seed"] == 1

    def test_bad_dz_list_exits_2(self, tmp_path):
        code = main(["simulate", "--out", str(tmp_path / "s"), "--dz", "0,-1"])
        assert code == EXIT_CONFIG
