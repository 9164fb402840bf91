"""Command-line driver: config parsing, run orchestration and CSV output.

Config files are flat ``key = value`` text; ``#`` starts a comment. Command
line flags override file values, which override preset values. Rates are in
units of ``gamma`` and times in units of ``1/gamma``.

Exit codes: 0 success, 2 configuration error, 3 numerical or engine error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analysis, esm, kernels
from .engine import Engine, EngineError, SimParams, TrajectoryRecord
from .hilbert import EXCITED, GROUND, basis

logger = logging.getLogger("nmqt")

MODES = ("simulate-nmqt", "simulate-esm", "compare-paired", "correlation-spectrum", "validate-kernels")

# rates in units of gamma = 1
PRESETS = {
    "fig3": {"Omega": 2.0, "nu": 2.0, "delta_omega": 0.0, "kappa": 10.0},
    "fig5": {"kappa": 8.0, "Omega": 2.0, "delta_omega": 0.0, "nu": 0.0},
}

_FLOAT_KEYS = ("gamma", "kappa", "nu", "Omega", "delta_omega", "dt", "t_total", "epsilon_mem", "Gamma", "tau_max", "dtau")
_INT_KEYS = ("N", "n_traj", "seed", "n_fock", "max_detections", "workers")
_BOOL_KEYS = ("hann", "incoherent")
_CHOICE_KEYS = {
    "mode": MODES,
    "kernel": ("lorentzian", "flat"),
    "initial": ("g", "e"),
    "propagator": ("exact", "euler"),
    "preset": tuple(PRESETS),
}
_STR_KEYS = ("output_dir",)
KEYS = _FLOAT_KEYS + _INT_KEYS + _BOOL_KEYS + tuple(_CHOICE_KEYS) + _STR_KEYS

_DEFAULTS = {
    "gamma": 1.0,
    "kappa": 10.0,
    "nu": 0.0,
    "Omega": 0.0,
    "delta_omega": 0.0,
    "t_total": 20.0,
    "epsilon_mem": 0.02,
    "N": 10,
    "n_traj": 1,
    "seed": 0,
    "n_fock": 8,
    "workers": 1,
    "kernel": "lorentzian",
    "initial": "g",
    "propagator": "exact",
    "tau_max": 40.0,
    "dtau": 0.02,
    "hann": False,
    "incoherent": True,
    "output_dir": "out",
}


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass(frozen=True)
class RunConfig:
    mode: str
    params: SimParams
    kernel: str = "lorentzian"
    Gamma: float | None = None
    output_dir: str = "out"
    epsilon_mem: float = 0.02
    preset: str | None = None
    initial: str = "g"
    propagator: str = "exact"
    max_detections: int | None = None
    workers: int = 1
    tau_max: float = 40.0
    dtau: float = 0.02
    hann: bool = False
    incoherent: bool = True
    dt_explicit: bool = field(default=False, compare=True)

    def make_kernel(self):
        if self.kernel == "flat":
            return kernels.FlatKernel(self.Gamma)
        return self.params.kernel()

    def initial_ket(self) -> np.ndarray:
        return basis(2, EXCITED if self.initial == "e" else GROUND)


def _convert(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _FLOAT_KEYS:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        if key in _INT_KEYS:
            return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if key in _BOOL_KEYS:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key in _CHOICE_KEYS:
        if raw not in _CHOICE_KEYS[key]:
            raise ConfigError(f"{key}: must be one of {', '.join(_CHOICE_KEYS[key])}, got {raw!r}")
        return raw
    return raw


def read_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r} (line {lineno})")
        values[key] = raw
    return values


def build_config(file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge presets, file values and overrides into a validated :class:`RunConfig`."""
    raw = dict(file_values or {})
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    for key in raw:
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
    parsed = {k: _convert(k, v) for k, v in raw.items()}

    if "mode" not in parsed:
        raise ConfigError("mode: required key is missing")
    values = dict(_DEFAULTS)
    preset = parsed.get("preset")
    if preset is not None:
        values.update(PRESETS[preset])
    values.update(parsed)

    if values["gamma"] < 0:
        raise ConfigError(f"gamma: must be non-negative, got {values['gamma']}")
    for key in ("kappa", "epsilon_mem", "tau_max", "dtau"):
        if not values[key] > 0:
            raise ConfigError(f"{key}: must be positive, got {values[key]}")
    if not values["epsilon_mem"] < 1:
        raise ConfigError(f"epsilon_mem: must lie in (0, 1), got {values['epsilon_mem']}")
    for key in ("N", "n_traj", "workers"):
        if values[key] < 1:
            raise ConfigError(f"{key}: must be a positive integer, got {values[key]}")
    if values["n_fock"] < 2:
        raise ConfigError(f"n_fock: must be >= 2, got {values['n_fock']}")
    if values["t_total"] < 0:
        raise ConfigError(f"t_total: must be non-negative, got {values['t_total']}")
    if "max_detections" in values and values["max_detections"] < 1:
        raise ConfigError("max_detections: must be a positive integer")
    if values["seed"] < 0 or values["seed"] >= 2**64:
        raise ConfigError("seed: must be a 64-bit unsigned integer")

    gamma_flat = values.get("Gamma")
    if values["kernel"] == "flat":
        if gamma_flat is None:
            raise ConfigError("Gamma: required key for kernel = flat")
        if gamma_flat < 0:
            raise ConfigError("Gamma: must be non-negative")
        if values["N"] != 1:
            raise ConfigError("N: a flat kernel requires N = 1")
        if "dt" not in values:
            raise ConfigError("dt: required key for kernel = flat")
    if values["mode"] == "validate-kernels" and values["kernel"] != "lorentzian":
        raise ConfigError("kernel: validate-kernels needs a lorentzian kernel")

    sim_keys = dict(
        gamma=values["gamma"],
        kappa=values["kappa"],
        nu=values["nu"],
        Omega=values["Omega"],
        delta_omega=values["delta_omega"],
        t_total=values["t_total"],
        n_traj=values["n_traj"],
        seed=values["seed"],
        n_fock=values["n_fock"],
    )
    dt_explicit = "dt" in values
    try:
        if dt_explicit:
            params = SimParams(dt=values["dt"], N=values["N"], epsilon_mem=values["epsilon_mem"], **sim_keys)
        else:
            params = SimParams.with_memory_cutoff(values["N"], values["epsilon_mem"], **sim_keys)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    return RunConfig(
        mode=values["mode"],
        params=params,
        kernel=values["kernel"],
        Gamma=gamma_flat,
        output_dir=values["output_dir"],
        epsilon_mem=values["epsilon_mem"],
        preset=preset,
        initial=values["initial"],
        propagator=values["propagator"],
        max_detections=values.get("max_detections"),
        workers=values["workers"],
        tau_max=values["tau_max"],
        dtau=values["dtau"],
        hann=values["hann"],
        incoherent=values["incoherent"],
        dt_explicit=dt_explicit,
    )


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    file_values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        file_values = read_config_text(text)
    return build_config(file_values, overrides)


def config_to_text(cfg: RunConfig) -> str:
    """Serialize a config so that parsing the text gives back an equal :class:`RunConfig`."""
    p = cfg.params
    items = {
        "mode": cfg.mode,
        "gamma": p.gamma,
        "kappa": p.kappa,
        "nu": p.nu,
        "Omega": p.Omega,
        "delta_omega": p.delta_omega,
        "N": p.N,
        "epsilon_mem": cfg.epsilon_mem,
        "t_total": p.t_total,
        "n_traj": p.n_traj,
        "seed": p.seed,
        "n_fock": p.n_fock,
        "kernel": cfg.kernel,
        "initial": cfg.initial,
        "propagator": cfg.propagator,
        "workers": cfg.workers,
        "tau_max": cfg.tau_max,
        "dtau": cfg.dtau,
        "hann": cfg.hann,
        "incoherent": cfg.incoherent,
        "output_dir": cfg.output_dir,
    }
    if cfg.dt_explicit:
        items["dt"] = p.dt
    if cfg.Gamma is not None:
        items["Gamma"] = cfg.Gamma
    if cfg.max_detections is not None:
        items["max_detections"] = cfg.max_detections
    # the preset is recorded for reference only; its values are already resolved above
    if cfg.preset is not None:
        items["preset"] = cfg.preset
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in items.items())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --- orchestration --------------------------------------------------------------


def _nmqt_job(args) -> TrajectoryRecord:
    cfg, index = args
    engine = Engine(cfg.params, cfg.make_kernel())
    return engine.run_trajectory(cfg.initial_ket(), traj_index=index, max_detections=cfg.max_detections)


def _esm_model(cfg: RunConfig) -> esm.EsmModel:
    if cfg.kernel == "flat":
        return esm.build_markov_atom_model(cfg.params, cfg.Gamma)
    return esm.build_esm_model(cfg.params)


def _esm_job(args) -> TrajectoryRecord:
    cfg, index = args
    return esm.run_esm_trajectory(
        cfg.params,
        traj_index=index,
        initial_atom_ket=cfg.initial_ket(),
        model=_esm_model(cfg),
        max_detections=cfg.max_detections,
        propagator=cfg.propagator,
    )


def _map_ordered(fn, cfg: RunConfig) -> list[TrajectoryRecord]:
    jobs = [(cfg, i) for i in range(cfg.params.n_traj)]
    if cfg.workers == 1:
        return [fn(job) for job in jobs]
    # Executor.map yields in submission order whatever the completion order
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, jobs))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_records(out: Path, records: list[TrajectoryRecord], gamma: float) -> dict:
    _write_csv(
        out / "detections.csv",
        ["trajectory", "t"],
        ((r.traj_index, float(t)) for r in records for t in r.detection_times),
    )
    _write_csv(
        out / "pclick.csv",
        ["trajectory", "t", "p", "outcome"],
        (
            (r.traj_index, float(t), float(p), int(o))
            for r in records
            for t, p, o in zip(r.step_times, r.p_click_series, r.outcomes)
        ),
    )
    n_common = min(len(r.sigma_z_series) for r in records)
    times = records[0].sigma_z_times[:n_common]
    series = np.stack([r.sigma_z_series[:n_common] for r in records])
    if len(records) >= 2:
        mean, stderr = analysis.ensemble_average_array(series)
    else:
        mean, stderr = series[0], np.full(n_common, np.nan)
    _write_csv(out / "sigmaz.csv", ["t", "mean", "stderr"], zip(times, mean, stderr))
    waits = analysis.pooled_waiting_times(records)
    hist = analysis.waiting_time_histogram(waits, gamma=gamma if gamma > 0 else 1.0)
    _write_csv(
        out / "waits.csv",
        ["bin_lo", "bin_hi", "count", "density"],
        zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts, hist.normalized_density),
    )
    return {
        "n_detections": int(sum(len(r.detection_time_indices) for r in records)),
        "n_waits": int(waits.size),
    }


def _run_simulate(cfg: RunConfig, out: Path, which: str) -> dict:
    job = _nmqt_job if which == "nmqt" else _esm_job
    records = _map_ordered(job, cfg)
    return _write_records(out, records, cfg.params.gamma)


def _run_paired(cfg: RunConfig, out: Path) -> dict:
    nmqt_records = _map_ordered(_nmqt_job, cfg)
    esm_records = _map_ordered(_esm_job, cfg)
    rows = []
    reports = []
    for a, b in zip(nmqt_records, esm_records):
        rep = analysis.paired_compare(a, b)
        reports.append(rep)
        n = len(rep.delta_p)
        for k in range(n):
            rows.append(
                (
                    a.traj_index,
                    float(a.step_times[k]),
                    float(a.p_click_series[k]),
                    float(b.p_click_series[k]),
                    int(a.outcomes[k]),
                    int(b.outcomes[k]),
                )
            )
    _write_csv(out / "paired.csv", ["trajectory", "t", "p_nmqt", "p_esm", "outcome_nmqt", "outcome_esm"], rows)
    dt = cfg.params.dt
    return {
        "max_abs_delta_p": max(r.max_abs_delta for r in reports),
        "mean_abs_delta_p_over_dt": float(np.mean([r.mean_abs_delta for r in reports]) / dt),
        "match_fraction": float(np.mean([r.match_fraction for r in reports])),
    }


def _run_spectrum(cfg: RunConfig, out: Path) -> dict:
    taus, C = esm.regression_correlation(cfg.params, cfg.tau_max, cfg.dtau, model=_esm_model(cfg))
    _write_csv(out / "correlation.csv", ["tau", "re", "im"], zip(taus, C.real, C.imag))
    coherent = C[-1] if cfg.incoherent else 0.0
    spec = analysis.spectrum(taus, C - coherent, hann=cfg.hann)
    _write_csv(out / "spectrum.csv", ["omega", "S"], zip(spec.frequencies, spec.power))
    return {
        "C0": float(C[0].real),
        "coherent_subtracted": [float(np.real(coherent)), float(np.imag(coherent))],
        "peaks": [float(w) for w in analysis.find_peaks(spec, 1e-3 * spec.power.max())],
    }


def validate_kernels(kernel: kernels.LorentzianKernel, t_max: float, n_points: int = 40) -> tuple[list[tuple], float, float]:
    """Closed forms against quadrature and the factorization integral on ``(0, t_max]``.

    Returns ``(rows, max_relative_deviation, max_factorization_deviation)``.
    """
    rows = []
    max_rel = 0.0
    max_fact = 0.0
    for tau in np.linspace(t_max / n_points, t_max, n_points):
        for kind, closed in ((kernels.MEMORY, kernel.memory(tau)), (kernels.RESPONSE, kernel.response(tau))):
            quad, _ = kernels.quadrature_oracle(kernel, kind, float(tau))
            closed = complex(closed)
            rel = abs(quad - closed) / abs(closed)
            max_rel = max(max_rel, rel)
            rows.append((float(tau), kind, closed.real, closed.imag, quad.real, quad.imag, rel))
        fact = abs(kernels.factorization_integral(kernel, float(tau)) - complex(kernel.memory(tau)))
        max_fact = max(max_fact, fact)
    return rows, max_rel, max_fact


def _run_validate(cfg: RunConfig, out: Path) -> tuple[dict, bool]:
    kernel = cfg.params.kernel()
    rows, max_rel, max_fact = validate_kernels(kernel, cfg.params.memory_time)
    _write_csv(out / "kernels.csv", ["tau", "function", "closed_re", "closed_im", "quad_re", "quad_im", "rel_dev"], rows)
    ok = max_rel <= 1e-6 and max_fact <= 1e-8 * cfg.params.gamma
    return {"max_relative_deviation": max_rel, "max_factorization_deviation": max_fact, "passed": ok}, ok


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def run(cfg: RunConfig) -> int:
    """Execute one configured run; returns the process exit code."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    ok = True
    if cfg.mode == "simulate-nmqt":
        summary = _run_simulate(cfg, out, "nmqt")
    elif cfg.mode == "simulate-esm":
        summary = _run_simulate(cfg, out, "esm")
    elif cfg.mode == "compare-paired":
        summary = _run_paired(cfg, out)
    elif cfg.mode == "correlation-spectrum":
        summary = _run_spectrum(cfg, out)
    else:
        summary, ok = _run_validate(cfg, out)
    manifest = {
        "version": __version__,
        "git_describe": git_describe(),
        "mode": cfg.mode,
        "preset": cfg.preset,
        "params": dataclasses.asdict(cfg.params),
        "dt": cfg.params.dt,
        "dt_derived": not cfg.dt_explicit,
        "memory_time": cfg.params.memory_time,
        "n_steps": cfg.params.n_steps,
        "seed": cfg.params.seed,
        "kernel": cfg.kernel,
        "Gamma": cfg.Gamma,
        "initial": cfg.initial,
        "propagator": cfg.propagator,
        "max_detections": cfg.max_detections,
        "tau_max": cfg.tau_max,
        "dtau": cfg.dtau,
        "hann": cfg.hann,
        "incoherent": cfg.incoherent,
        "workers": cfg.workers,
        "stream_scheme": "PCG64(SeedSequence(entropy=seed, spawn_key=(trajectory,)))",
        "summary": summary,
        "wall_time_s": time.perf_counter() - start,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.txt").write_text(config_to_text(cfg))
    return 0 if ok else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nmqt", description="Non-Markovian quantum trajectory simulator")
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--mode", help=f"one of {', '.join(MODES)}")
    parser.add_argument("--preset", help=f"parameter preset ({', '.join(PRESETS)})")
    parser.add_argument("--seed")
    parser.add_argument("--n-traj", dest="n_traj")
    parser.add_argument("--N", dest="N", help="steps per memory time")
    parser.add_argument("--epsilon-mem", dest="epsilon_mem")
    parser.add_argument("--out", dest="output_dir")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"config error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in ("mode", "preset", "seed", "n_traj", "N", "epsilon_mem", "output_dir"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except (EngineError, esm.TruncationError, esm.IntegrationError, kernels.QuadratureError, FloatingPointError) as exc:
        print(f"engine error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
