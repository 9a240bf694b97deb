import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from bsg import cli
from bsg import spectroscopy as sp
from bsg.config import ConfigError, json_schema, parse_config

FAST_SE = {
    "device": {"n_junctions": 400, "loss_floor": 1e-4},
    "sweep": {"flux": [0.45], "temperature_mK": 0, "points": 2001, "band_GHz": [2.5, 5.0],
              "grid": {"n_points": 32768}},
    "model": "self-energy",
    "solver": {"cutoff_fraction": 0.5},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return p


def _run(tmp_path, command, cfg, out="out", extra=()):
    p = _write(tmp_path, cfg)
    code = cli.main([command, "--config", str(p), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def _read_csv(path):
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# configuration

def test_defaults_describe_the_reference_device():
    cfg = parse_config("{}")
    dev = cfg.device.build()
    assert dev.array.n_junctions == 4250
    assert dev.array.inductance == pytest.approx(0.54e-9)
    assert dev.squid.capacitance == pytest.approx(14.5e-15)
    assert dev.array.series_resistance == pytest.approx(3e-6 * dev.array.characteristic_impedance)


def test_unknown_keys_are_rejected_at_every_level():
    for text in ('{"colour": 1}', '{"device": {"n_junction": 3}}', '{"sweep": {"grid": {"size": 8}}}'):
        with pytest.raises(ConfigError):
            parse_config(text)


def test_error_messages_carry_line_numbers():
    text = '{\n  "device": {\n    "inductance_nH": -1\n  }\n}'
    with pytest.raises(ConfigError, match=r"<config>:3: device\.inductance_nH"):
        parse_config(text)
    with pytest.raises(ConfigError, match=r":2:\d+: invalid JSON"):
        parse_config('{\n "a": }')


@pytest.mark.parametrize("bad", [
    {"sweep": {"flux": []}},
    {"sweep": {"band_GHz": [5, 2]}},
    {"sweep": {"grid": {"n_points": 1000}}},
    {"solver": {"mixing": 0}},
    {"model": "exact"},
    {"device": {"asymmetry": 1.0}},
])
def test_invalid_values_are_rejected(bad):
    with pytest.raises(ConfigError):
        parse_config(json.dumps(bad))


def test_digest_depends_only_on_content():
    a = parse_config('{"seed": 1, "noise": 0.0}')
    b = parse_config('{"noise": 0.0,\n "seed": 1}')
    c = parse_config('{"seed": 2}')
    assert a.digest() == b.digest() != c.digest()


def test_schema_is_published():
    schema = json_schema()
    assert schema["additionalProperties"] is False
    assert "device" in schema["properties"]


# exit codes and manifest

def test_empty_flux_list_is_a_usage_error(tmp_path):
    code, out = _run(tmp_path, "spectrum", {"sweep": {"flux": []}})
    assert code == 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "config-error" and man["exit_code"] == 2


def test_missing_config_file_is_a_usage_error(tmp_path):
    code = cli.main(["scha-sweep", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert (tmp_path / "o" / "manifest.json").exists()


def test_bad_arguments_are_usage_errors(tmp_path, capsys):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["spectrum"]) == 2
    p = _write(tmp_path, {})
    assert cli.main(["spectrum", "--config", str(p), "--jobs", "0", "--out", str(tmp_path / "o")]) == 2


def test_scha_sweep_succeeds_and_follows_the_flux_trend(tmp_path):
    code, out = _run(tmp_path, "scha-sweep", {"sweep": {"flux": [0.0, 0.35, 0.4, 0.45, 0.47]}})
    assert code == 0
    rows = _read_csv(out / "scha.csv")
    ratio = np.array([float(r["ratio"]) for r in rows])
    ej = np.array([float(r["ej_GHz"]) for r in rows])
    ej_star = np.array([float(r["ej_star_GHz"]) for r in rows])
    assert ratio[0] == pytest.approx(0.9, abs=0.05)
    assert np.all(np.diff(ej) < 0) and np.all(np.diff(ej_star) < 0)
    assert np.all(np.diff(ratio) < 0)
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["outputs"] == ["scha.csv"]
    assert len(man["points"]) == 5


def test_unrenormalized_limit_with_stiff_array(tmp_path):
    # a huge ground capacitance makes the environment impedance vanish
    cfg = {"device": {"ground_capacitance_fF": 1e9}, "sweep": {"flux": [0.0, 0.3]}}
    code, out = _run(tmp_path, "scha-sweep", cfg)
    assert code == 0
    for r in _read_csv(out / "scha.csv"):
        assert float(r["ratio"]) == pytest.approx(1.0, abs=1e-4)


def test_non_convergence_exits_one_with_partial_outputs(tmp_path):
    cfg = json.loads(json.dumps(FAST_SE))
    cfg["solver"]["max_iter"] = 1
    code, out = _run(tmp_path, "damping-sweep", cfg)
    assert code == 1
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "non-converged"
    assert (out / "damping.csv").exists() and (out / "sigma.csv").exists()


def test_csv_header_carries_config_hash(tmp_path):
    cfg = {"sweep": {"flux": [0.35]}}
    code, out = _run(tmp_path, "scha-sweep", cfg)
    raw = (out / "scha.csv").read_bytes()
    digest = parse_config(json.dumps(cfg)).digest()
    assert raw.decode("utf-8").splitlines()[1] == f"# config_sha256: {digest}"
    assert b"\r\n" in raw  # RFC 4180 record separator


def test_json_mirror(tmp_path):
    cfg = {"sweep": {"flux": [0.35]}, "outputs": {"json_mirror": True}}
    code, out = _run(tmp_path, "scha-sweep", cfg)
    assert code == 0
    data = json.loads((out / "scha.json").read_text())
    assert data[0]["flux"] == 0.35


def test_spectrum_shows_the_array_modes(tmp_path):
    cfg = {"sweep": {"flux": [0.35], "band_GHz": [2.5, 5.4], "points": 200001}}
    code, out = _run(tmp_path, "spectrum", cfg)
    assert code == 0
    rows = _read_csv(out / "spectrum.csv")
    f = np.array([float(r["f_GHz"]) for r in rows]) * 1e9
    s = np.array([float(r["re_s21"]) + 1j * float(r["im_s21"]) for r in rows])
    assert len(sp.find_resonances(sp.Trace(f, s))) >= 7


def test_losses_table(tmp_path):
    code, out = _run(tmp_path, "losses", {"sweep": {"flux": [0.0, 0.44], "points": 101}})
    assert code == 0
    rows = _read_csv(out / "losses.csv")
    assert len(rows) == 202
    vals = np.array([[float(r[c]) for c in ("gamma_diel_MHz", "gamma_dielJ_MHz", "gamma_qp_MHz", "df_flux_MHz")]
                     for r in rows])
    assert np.all(vals >= 0)
    assert np.all(vals[:101, 3] == 0)  # no flux noise sensitivity at zero flux


# fit and trace input

def _trace_csv(path, qi=5e3, qe=1e3):
    f = np.linspace(4.98e9, 5.02e9, 2001)
    s = sp.lineshape(f, 5e9, 1 / qi, 1 / qe, 0.0)
    lines = ["# synthetic", "f_GHz,re_s21,im_s21"] + [f"{a / 1e9:.12g},{b.real:.15g},{b.imag:.15g}"
                                                      for a, b in zip(f, s)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_fit_recovers_generator_parameters(tmp_path):
    _trace_csv(tmp_path / "trace.csv")
    code, out = _run(tmp_path, "fit", {"fit": {"traces": ["trace.csv"]}})
    assert code == 0
    (row,) = _read_csv(out / "fits.csv")
    assert float(row["f_GHz"]) == pytest.approx(5.0, rel=1e-9)
    assert float(row["q_internal"]) == pytest.approx(5e3, rel=1e-5)
    assert float(row["q_external"]) == pytest.approx(1e3, rel=1e-5)


def test_corrupt_trace_names_row_and_column(tmp_path, capsys):
    _trace_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    lines[10] = "5.0,abc,0.1"
    (tmp_path / "trace.csv").write_text("\n".join(lines))
    code, out = _run(tmp_path, "fit", {"fit": {"traces": ["trace.csv"]}})
    assert code == 2
    err = capsys.readouterr().err
    assert "trace.csv:11" in err and "re_s21" in err
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 2


def test_trace_with_missing_column_is_rejected(tmp_path):
    (tmp_path / "t.csv").write_text("f_GHz,re_s21\n1,2\n")
    with pytest.raises(ConfigError, match="im_s21"):
        cli.read_trace_csv(tmp_path / "t.csv")


def test_fit_without_traces_is_a_usage_error(tmp_path):
    code, _ = _run(tmp_path, "fit", {})
    assert code == 2


# determinism

def test_noisy_spectrum_is_byte_identical_on_repeat(tmp_path):
    cfg = {"sweep": {"flux": [0.3, 0.35], "band_GHz": [3.0, 3.5], "points": 5001}, "noise": 0.01}
    _, a = _run(tmp_path, "spectrum", cfg, out="a", extra=("--seed", "4"))
    _, b = _run(tmp_path, "spectrum", cfg, out="b", extra=("--seed", "4"))
    _, c = _run(tmp_path, "spectrum", cfg, out="c", extra=("--seed", "5"))
    assert (a / "spectrum.csv").read_bytes() == (b / "spectrum.csv").read_bytes()
    assert (a / "spectrum.csv").read_bytes() != (c / "spectrum.csv").read_bytes()


def test_parallel_run_matches_serial_bytes(tmp_path):
    cfg = _write(tmp_path, {"sweep": {"flux": [0.47, 0.0, 0.35], "band_GHz": [3.0, 3.5], "points": 2001},
                            "noise": 0.01})
    outs = []
    for jobs in ("1", "2"):
        out = tmp_path / f"j{jobs}"
        proc = subprocess.run([sys.executable, "-m", "bsg.cli", "spectrum", "--config", str(cfg), "--jobs", jobs,
                               "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append((out / "spectrum.csv").read_bytes())
    assert outs[0] == outs[1]
    # rows follow the configured flux order
    flux = [r["flux"] for r in _read_csv(tmp_path / "j2" / "spectrum.csv")]
    assert flux[0] == "0.47" and flux[-1] == "0.35"


def test_self_energy_damping_is_byte_identical_on_repeat(tmp_path):
    _, a = _run(tmp_path, "damping-sweep", FAST_SE, out="a")
    _, b = _run(tmp_path, "damping-sweep", FAST_SE, out="b")
    for name in ("damping.csv", "sigma.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_log_level_from_environment(tmp_path):
    cfg = _write(tmp_path, {"sweep": {"flux": [0.3]}})
    args = [sys.executable, "-m", "bsg.cli", "scha-sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]
    quiet = subprocess.run(args, capture_output=True, text=True, env={**os.environ, "BSG_LOG": "warning"})
    loud = subprocess.run(args, capture_output=True, text=True, env={**os.environ, "BSG_LOG": "debug"})
    assert quiet.returncode == loud.returncode == 0
    assert quiet.stderr == ""
    assert "DEBUG" in loud.stderr


def test_validate_suite_passes(tmp_path):
    assert cli.main(["validate", "--out", str(tmp_path / "v")]) == 0
    rows = _read_csv(tmp_path / "v" / "validate.csv")
    assert rows and all(r["passed"] == "1" for r in rows)
