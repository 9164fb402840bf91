import csv
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmqt import cli


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_fig3_preset():
    cfg = cli.build_config({"mode": "simulate-nmqt", "preset": "fig3"})
    p = cfg.params
    assert (p.Omega, p.nu, p.delta_omega, p.kappa) == (2.0, 2.0, 0.0, 10.0)


def test_fig5_preset():
    cfg = cli.build_config({"mode": "compare-paired", "preset": "fig5"})
    p = cfg.params
    assert (p.kappa, p.Omega, p.delta_omega, p.nu) == (8.0, 2.0, 0.0, 0.0)


def test_dt_is_derived_from_memory_cutoff():
    cfg = cli.build_config({"mode": "simulate-nmqt", "preset": "fig3", "N": "10", "epsilon_mem": "0.02"})
    assert cfg.params.dt == pytest.approx(2 * math.log(50) / (10 * 10))
    assert cfg.params.dt == pytest.approx(0.078, abs=5e-4)
    assert math.exp(-0.5 * cfg.params.kappa * cfg.params.memory_time) == pytest.approx(0.02)


def test_overrides_win_over_file_and_preset(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nmode = simulate-esm\npreset = fig3\nkappa = 12  # inline\nseed = 5\n")
    cfg = cli.parse_config(path, {"seed": "9"})
    assert cfg.params.kappa == 12.0
    assert cfg.params.seed == 9
    assert cfg.mode == "simulate-esm"


@pytest.mark.parametrize(
    "values, key",
    [
        ({"mode": "simulate-nmqt", "bogus": "1"}, "bogus"),
        ({"preset": "fig3"}, "mode"),
        ({"mode": "simulate-nmqt", "kappa": "ten"}, "kappa"),
        ({"mode": "simulate-nmqt", "N": "2.5"}, "N"),
        ({"mode": "simulate-nmqt", "kernel": "flat", "N": "1", "dt": "0.1"}, "Gamma"),
        ({"mode": "simulate-nmqt", "kappa": "-1"}, "kappa"),
        ({"mode": "teleport"}, "mode"),
    ],
)
def test_config_errors_name_the_key(values, key):
    with pytest.raises(cli.ConfigError, match=key):
        cli.build_config(values)


def test_malformed_config_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("mode simulate-nmqt\n")
    with pytest.raises(cli.ConfigError, match="line 1"):
        cli.parse_config(path)


configs = st.fixed_dictionaries(
    {
        "mode": st.sampled_from(cli.MODES[:4]),
        "kappa": st.floats(1.0, 50.0),
        "nu": st.floats(-5.0, 5.0),
        "Omega": st.floats(0.0, 5.0),
        "N": st.integers(1, 14),
        "epsilon_mem": st.floats(1e-4, 0.5),
        "seed": st.integers(0, 2**64 - 1),
        "n_traj": st.integers(1, 10_000),
    },
    optional={
        "preset": st.sampled_from(["fig3", "fig5"]),
        "dt": st.floats(1e-4, 0.5),
        "max_detections": st.integers(1, 100),
        "hann": st.booleans(),
        "initial": st.sampled_from(["g", "e"]),
    },
)


@settings(max_examples=60)
@given(configs)
def test_write_then_parse_roundtrip(values):
    cfg = cli.build_config({k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()})
    again = cli.build_config(cli.read_config_text(cli.config_to_text(cfg)))
    assert again == cfg


def test_flat_kernel_roundtrip():
    cfg = cli.build_config({"mode": "simulate-nmqt", "kernel": "flat", "Gamma": "0.4", "N": "1", "dt": "0.01"})
    assert cli.build_config(cli.read_config_text(cli.config_to_text(cfg))) == cfg


def run_main(tmp_path, *args):
    out = tmp_path / "out"
    code = cli.main([*args, "--out", str(out)])
    return code, out


def test_zero_coupling_writes_empty_detection_file(tmp_path):
    code, out = run_main(tmp_path, "--mode", "simulate-nmqt", "--set", "gamma=0", "--set", "t_total=5", "--n-traj", "2")
    assert code == 0
    assert read_csv(out / "detections.csv") == [["trajectory", "t"]]
    header = read_csv(out / "pclick.csv")[0]
    assert header == ["trajectory", "t", "p", "outcome"]
    assert read_csv(out / "sigmaz.csv")[0] == ["t", "mean", "stderr"]
    manifest = json.loads((out / "manifest.json").read_text())
    for key in ("git_describe", "wall_time_s", "dt", "memory_time", "seed", "params"):
        assert key in manifest


@pytest.mark.parametrize("mode", ["simulate-nmqt", "simulate-esm"])
def test_runs_are_byte_identical(tmp_path, mode):
    args = ["--mode", mode, "--preset", "fig3", "--N", "6", "--n-traj", "3", "--seed", "17", "--set", "t_total=15"]
    code_a = cli.main([*args, "--out", str(tmp_path / "a")])
    code_b = cli.main([*args, "--out", str(tmp_path / "b"), "--set", "workers=2"])
    assert code_a == code_b == 0
    for name in ("detections.csv", "pclick.csv", "sigmaz.csv", "waits.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare_paired_mode(tmp_path):
    code, out = run_main(
        tmp_path, "--mode", "compare-paired", "--preset", "fig5", "--N", "8", "--set", "t_total=10"
    )
    assert code == 0
    rows = read_csv(out / "paired.csv")
    assert rows[0] == ["trajectory", "t", "p_nmqt", "p_esm", "outcome_nmqt", "outcome_esm"]
    summary = json.loads((out / "manifest.json").read_text())["summary"]
    assert 0 <= summary["match_fraction"] <= 1


def test_correlation_spectrum_mode(tmp_path):
    code, out = run_main(tmp_path, "--mode", "correlation-spectrum", "--preset", "fig3", "--set", "tau_max=30")
    assert code == 0
    assert read_csv(out / "spectrum.csv")[0] == ["omega", "S"]
    assert read_csv(out / "correlation.csv")[0] == ["tau", "re", "im"]
    peaks = json.loads((out / "manifest.json").read_text())["summary"]["peaks"]
    assert len(peaks) == 3


def test_validate_kernels_mode(tmp_path):
    code, out = run_main(tmp_path, "--mode", "validate-kernels", "--preset", "fig3")
    assert code == 0
    summary = json.loads((out / "manifest.json").read_text())["summary"]
    assert summary["max_relative_deviation"] <= 1e-6


def test_config_error_exit_code(tmp_path, capsys):
    code, _ = run_main(tmp_path, "--mode", "simulate-nmqt", "--set", "kappa=oops")
    assert code == 2
    assert "kappa" in capsys.readouterr().err


def test_engine_error_exit_code(tmp_path, capsys):
    code, _ = run_main(
        tmp_path, "--mode", "simulate-nmqt", "--set", "kernel=flat", "--set", "Gamma=1",
        "--N", "1", "--set", "dt=3", "--set", "initial=e", "--set", "t_total=9",
    )
    assert code == 3
    assert "StepSizeError" in capsys.readouterr().err
