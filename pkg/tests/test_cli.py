import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nucspin_lab.cli import (KEYS, Config, ConfigError, build_config, config_values,
                             format_csv, main, parse_config, render_config)
from nucspin_lab.readout import multi_atom_click_probability


def run(argv, environ=None):
    out, err = io.StringIO(), io.StringIO()
    code = main(argv, stdout=out, stderr=err, environ=environ or {})
    return code, out.getvalue(), err.getvalue()


def read_csv(text):
    lines = text.splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return dict(zip(header, rows.T))


class TestParse:
    def test_empty_is_default(self):
        assert parse_config("") == Config()
        assert parse_config("# only a comment\n\n") == Config()

    def test_rate_with_unit(self):
        cfg = parse_config("relax.gamma_m = 8 /s\n")
        assert cfg.apparatus.relax.gamma_m == 8.0

    def test_angular_units(self):
        cfg = parse_config("relax.larmor = 2.5 kHz  # Zeeman splitting\ncavity.g = 2.8 MHz\n")
        assert cfg.apparatus.relax.larmor == pytest.approx(2 * math.pi * 2.5e3)
        assert cfg.apparatus.cavity.g == pytest.approx(2 * math.pi * 2.8e6)

    def test_time_and_length_units(self):
        cfg = parse_config("readout.window = 500 us\nlattice.tau_transport = 100 ms\n"
                           "lattice.wavelength = 532 nm\n")
        assert cfg.apparatus.readout.window == pytest.approx(500e-6)
        assert cfg.apparatus.lattice.tau_transport == pytest.approx(0.1)
        assert cfg.apparatus.lattice.wavelength == pytest.approx(532e-9)

    def test_range_error_names_key_and_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("# header\nreadout.p_det = 1.5\n")
        assert exc.value.line == 2 and exc.value.key == "readout.p_det"
        assert "readout.p_det" in str(exc.value)

    @pytest.mark.parametrize("text,line", [
        ("bogus.key = 1\n", 1),
        ("seed = 1\nshots = many\n", 2),
        ("relax.gamma_m 8\n", 1),
        ("relax.gamma_m = 8 mG\n", 1),
        ("relax.gamma_m = 8 parsecs\n", 1),
        ("seed = 1.5\n", 1),
        ("seed = 1\nseed = 2\n", 2),
        ("pulse_relaxation = maybe\n", 1),
        ("mode = fast\n", 1),
    ])
    def test_errors_carry_line_numbers(self, text, line):
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        assert exc.value.line == line

    def test_field_unit_is_understood_but_rejected_for_rates(self):
        with pytest.raises(ConfigError, match="field"):
            parse_config("relax.gamma_m = 9 mG\n")

    def test_every_apparatus_field_has_a_key(self):
        values = config_values(Config())
        assert "pulse_relaxation" in values and "relax.equilibrium_rz" in values
        assert set(values) == set(KEYS)

    def test_round_trip_default(self):
        cfg = Config()
        assert parse_config(render_config(cfg)) == cfg

    @given(st.floats(0, 1), st.floats(1e-3, 1e3), st.floats(-1e5, 1e5), st.integers(0, 2**31),
           st.booleans(), st.sampled_from(["sampled", "analytic"]))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, p_det, gamma_m, larmor, seed, pulse_relax, mode):
        cfg = build_config({"readout.p_det": p_det, "relax.gamma_m": gamma_m,
                            "relax.larmor": larmor, "seed": seed,
                            "pulse_relaxation": pulse_relax, "mode": mode})
        assert parse_config(render_config(cfg)) == cfg


class TestFormats:
    def test_csv_layout(self):
        text = format_csv({"t": np.array([0.0, 1 / 3]), "n": np.array([1, 2])})
        assert text == "t,n\n0,1\n0.333333333333,2\n"
        assert text.endswith("\n")


class TestDispatch:
    def test_transport(self):
        code, out, _ = run(["transport"])
        assert code == 0
        cols = read_csv(out)
        assert list(cols) == ["t", "delta", "velocity", "position"]
        assert cols["position"][-1] * 1e3 == pytest.approx(11.854, abs=1e-3)

    def test_two_atom_rabi(self):
        code, out, _ = run(["rabi", "--atoms", "2", "--mode", "analytic"])
        assert code == 0
        cols = read_csv(out)
        omega = math.pi / (2 * 3.2e-3)
        # the run starts in |down>, so each atom clicks with cos^2(Omega t / 2)
        p = np.cos(omega * cols["t"] / 2) ** 2
        assert np.allclose(cols["p_down"], p, atol=1e-9)
        q = multi_atom_click_probability(2, p, Config().apparatus.readout)
        assert np.allclose(cols["click_probability"], q, atol=1e-11)

    def test_two_atom_rabi_ideal_readout(self, tmp_path):
        cfg = tmp_path / "ideal.cfg"
        cfg.write_text("readout.n_emit = 1\nreadout.p_det = 1\nreadout.eps_up = 0\n")
        code, out, _ = run(["rabi", "--atoms", "2", "--mode", "analytic", "--config", str(cfg)])
        cols = read_csv(out)
        x = math.pi / (2 * 3.2e-3) * cols["t"] / 2
        assert np.allclose(cols["click_probability"], 1 - np.sin(x) ** 4, atol=1e-9)

    def test_tomo_report(self, tmp_path):
        out = tmp_path / "a.json"
        code, _, err = run(["tomo", "--state", "a", "--shots", "200", "--seed", "7",
                            "--out", str(out), "--resamples", "100"])
        assert code == 0, err
        body = json.loads(out.read_text())
        for key in ("purity", "fidelity", "sigma_purity", "sigma_fidelity", "provenance"):
            assert key in body
        assert body["shots_per_basis"] == 200
        prov = body["provenance"]
        assert prov["seed"] == 7 and len(prov["config_sha256"]) == 64
        assert "numpy" in prov["versions"]

    def test_tomo_rejects_analytic(self):
        code, _, err = run(["tomo", "--mode", "analytic"])
        assert code != 0 and json.loads(err)["error"] == "usage"

    def test_summary_json(self, tmp_path):
        summary = tmp_path / "s.json"
        code, _, _ = run(["t2", "--mode", "analytic", "--summary", str(summary)])
        body = json.loads(summary.read_text())
        assert body["derived"]["t2"] == pytest.approx(0.1, rel=1e-9)

    def test_report(self, tmp_path):
        cfg = tmp_path / "r.cfg"
        cfg.write_text("tomo.resamples = 20\n")
        code, out, err = run(["report", "--config", str(cfg)])
        assert code == 0, err
        body = json.loads(out)
        assert body["formulas"]["operation_budget"] == pytest.approx(200.0)
        assert set(body["tomography"]) == {"a", "b", "c"}


class TestPrecedence:
    def test_flag_beats_file_beats_env(self, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text("seed = 5\n")
        args = ["tomo", "--resamples", "10", "--config", str(cfg)]
        seed = lambda a, env: json.loads(run(a, env)[1])["provenance"]["seed"]
        assert seed(args, {"NUCSPIN_SEED": "9"}) == 5
        assert seed(args + ["--seed", "3"], {"NUCSPIN_SEED": "9"}) == 3
        assert seed(["tomo", "--resamples", "10"], {"NUCSPIN_SEED": "9"}) == 9
        assert seed(["tomo", "--resamples", "10"], {}) == 0

    def test_bad_env_seed(self):
        code, _, err = run(["transport"], {"NUCSPIN_SEED": "x"})
        assert code != 0 and "NUCSPIN_SEED" in json.loads(err)["message"]

    def test_shots_flag(self):
        code, out, _ = run(["rabi", "--shots", "37"])
        assert set(read_csv(out)["shots"]) == {37}


class TestDeterminism:
    def test_csv_byte_identical(self):
        a = run(["t1", "--seed", "4"])[1]
        b = run(["t1", "--seed", "4"])[1]
        c = run(["t1", "--seed", "5"])[1]
        assert a == b and a != c

    def test_json_independent_of_workers(self):
        base = ["tomo", "--seed", "2", "--resamples", "40"]
        a = run(base + ["--workers", "1"])[1]
        b = run(base + ["--workers", "2"])[1]
        assert a == b


class TestErrors:
    def test_unknown_command(self):
        code, _, err = run(["teleport"])
        assert code == 2
        assert json.loads(err)["error"] == "usage"

    def test_config_error_line(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("seed = 1\nreadout.p_det = 1.5\n")
        code, _, err = run(["rabi", "--config", str(cfg)])
        msg = json.loads(err)
        assert code == 2 and msg["line"] == 2 and msg["key"] == "readout.p_det"

    def test_missing_config_file(self, tmp_path):
        code, _, err = run(["rabi", "--config", str(tmp_path / "nope.cfg")])
        assert code == 3 and json.loads(err)["error"] == "io"

    def test_unwritable_output(self, tmp_path):
        code, _, err = run(["transport", "--out", str(tmp_path / "no" / "dir" / "x.csv")])
        assert code == 3 and json.loads(err)["error"] == "io"


def test_console_entry_point(tmp_path):
    out = tmp_path / "t.csv"
    proc = subprocess.run([sys.executable, "-m", "nucspin_lab.cli", "transport", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.read_text().startswith("t,delta,velocity,position\n")
