"""Experiment driver: config file -> bath pools -> ensembles -> CSV series + manifest.

Config files are INI style with sections [system], [bath], [ensemble] and
[output]. Every key has a default (see ``DEFAULTS``); a preset (desk or paper)
replaces some defaults, explicit keys beat the preset, command-line flags beat
the file.
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import platform
import re
import sys
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .ensemble import (ConfigurationError, EnsembleSpec, FlaggedFractionError, build_ensemble,
                       propagate_all, propagate_control)
from .forcefield import BathMode, BreathingSphere, ForceField, PairLJ
from .md import EquilibrationProtocol, IntegrationPlan, build_pool
from .morse import MorseSpec, bound_count
from .observables import (BinGeometry, lyapunov, purity_series, read_series_csv, write_series_csv)
from .units import DEFAULT_UNITS
from .wigner import Superposition, build_wigner

MANIFEST_SCHEMA = 1

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "system": {
        "superpositions": "0+2",
        "alpha": "1.0",
        "n_particles": "108",
        "density": "0.85",
        "cutoff": "2.5",
        "coupling_cutoff": "2.5",
    },
    "bath": {
        "temperatures": "1.0",
        "modes": "liquid, ideal_gas",
        "pool_size": "64",
        "pool_spacing": "500",
        "equilibration_steps": "20000",
        "equilibration_dt": "0.002",
    },
    "ensemble": {
        "preset": "desk",
        "n_trajectories": "20000",
        "dt": "0.0002",
        "t_end": "1.5",
        "record_stride": "250",
        "master_seed": "20240601",
        "chunk_size": "50",
        "drift_tolerance": "0.001",
        "bins": "128",
        "isolated_control": "yes",
        "lyapunov_replicas": "4",
        "lyapunov_delta0": "1e-6",
    },
    "output": {
        "directory": "results",
        "checkpoint": "yes",
        "trajectory_dump": "0",
    },
}

PRESETS = {
    "desk": {
        ("system", "n_particles"): "108",
        ("bath", "temperatures"): "177.36 K, 221.7 K, 554.25 K",
        ("ensemble", "n_trajectories"): "20000",
        ("ensemble", "t_end"): "1.5",
    },
    "paper": {
        ("system", "n_particles"): "512",
        ("system", "superpositions"): "0+2, 5+8",
        ("bath", "temperatures"): "177.36 K, 221.7 K, 554.25 K",
        ("ensemble", "n_trajectories"): "2000000",
        ("ensemble", "t_end"): "1.5",
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    temperatures: list[float]  # reduced
    modes: list[str]
    superpositions: list[str]
    n_trajectories: int
    n_particles: int
    density: float
    alpha: float
    cutoff: float
    coupling_cutoff: float
    dt: float
    t_end: float
    record_stride: int
    master_seed: int
    output_dir: str
    preset: str = "desk"
    pool_size: int = 64
    pool_spacing: int = 500
    equilibration_steps: int = 20000
    equilibration_dt: float = 2e-3
    chunk_size: int = 50
    drift_tolerance: float = 1e-3
    bins: int = 128
    isolated_control: bool = True
    lyapunov_replicas: int = 4
    lyapunov_delta0: float = 1e-6
    checkpoint: bool = True
    trajectory_dump: int = 0
    workers: int = 1

    @property
    def plan(self) -> IntegrationPlan:
        return IntegrationPlan(self.dt, int(round(self.t_end / self.dt)), self.record_stride)

    def to_text(self) -> str:
        """Config file text that parses back to this config."""
        d = asdict(self)
        temps = ", ".join(repr(t) for t in self.temperatures)
        lines = [
            "[system]",
            f"superpositions = {', '.join(self.superpositions)}",
            *(f"{k} = {d[k]!r}" for k in ("alpha", "n_particles", "density", "cutoff", "coupling_cutoff")),
            "", "[bath]",
            f"temperatures = {temps}",
            f"modes = {', '.join(self.modes)}",
            *(f"{k} = {d[k]!r}" for k in ("pool_size", "pool_spacing", "equilibration_steps", "equilibration_dt")),
            "", "[ensemble]",
            f"preset = {self.preset}",
            *(f"{k} = {d[k]!r}" for k in ("n_trajectories", "dt", "t_end", "record_stride", "master_seed",
                                           "chunk_size", "drift_tolerance", "bins", "lyapunov_replicas",
                                           "lyapunov_delta0")),
            f"isolated_control = {'yes' if self.isolated_control else 'no'}",
            "", "[output]",
            f"directory = {self.output_dir}",
            f"checkpoint = {'yes' if self.checkpoint else 'no'}",
            f"trajectory_dump = {self.trajectory_dump}",
        ]
        return "\n".join(lines) + "\n"


def _locate(text: str, section: str, key: str | None = None) -> str:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return f"line {no}"
        elif current == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return f"line {no}"
    return "default value" if key else "unknown line"


def _parse_temperature(item: str) -> float:
    m = re.fullmatch(r"\s*([-+0-9.eE]+)\s*(K)?\s*", item)
    if not m:
        raise ValueError(f"cannot read temperature {item!r}")
    value = float(m.group(1))
    if not value > 0 or not math.isfinite(value):
        raise ValueError(f"temperature must be positive, got {item.strip()!r}")
    return DEFAULT_UNITS.reduce(value, "temperature") if m.group(2) else value


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def parse_config(text: str = "", preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Validated experiment config; every problem is reported with its line."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"{_locate(text, sec)}: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"{_locate(text, sec, key)}: unknown key '{key}' in [{sec}]")

    values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
    chosen = preset or (cp["ensemble"].get("preset") if cp.has_section("ensemble") else None) or "desk"
    if chosen not in PRESETS:
        raise ConfigError(f"{_locate(text, 'ensemble', 'preset')}: unknown preset '{chosen}'")
    for (sec, key), v in PRESETS[chosen].items():
        values[sec][key] = v
    values["ensemble"]["preset"] = chosen
    for sec in cp.sections():
        for key, v in cp[sec].items():
            if key != "preset":
                values[sec][key] = v
    for (sec, key), v in (overrides or {}).items():
        values[sec][key] = str(v)

    def get(sec, key, conv, check=None, what="must be positive"):
        raw = values[sec][key]
        try:
            v = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{_locate(text, sec, key)}: [{sec}] {key} = {raw!r}: {exc}") from None
        if check is not None and not check(v):
            raise ConfigError(f"{_locate(text, sec, key)}: [{sec}] {key} = {raw!r} {what}")
        return v

    def boolean(raw):
        low = raw.strip().lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ValueError("expected yes or no")

    def superpositions(raw):
        items = _split(raw)
        if not items:
            raise ValueError("no superposition given")
        limit = bound_count(MorseSpec.i2())
        for it in items:
            top = max(n for n, _ in Superposition.parse(it).terms)
            if top >= limit:
                raise ValueError(f"level {top} is not bound (the well holds {limit} states)")
        return items

    def modes(raw):
        items = _split(raw)
        if not items:
            raise ValueError("no bath mode given")
        return [BathMode(m).value for m in items]

    def temps(raw):
        items = [_parse_temperature(t) for t in _split(raw)]
        if not items:
            raise ValueError("no temperature given")
        return items

    pos = lambda v: v > 0 and math.isfinite(v)  # noqa: E731
    cfg = ExperimentConfig(
        temperatures=get("bath", "temperatures", temps),
        modes=get("bath", "modes", modes),
        superpositions=get("system", "superpositions", superpositions),
        n_trajectories=get("ensemble", "n_trajectories", int, lambda v: v >= 2, "must be at least 2"),
        n_particles=get("system", "n_particles", int, lambda v: v >= 2, "must be at least 2"),
        density=get("system", "density", float, pos),
        alpha=get("system", "alpha", float, lambda v: 0 < v <= 1, "must lie in (0, 1]"),
        cutoff=get("system", "cutoff", float, pos),
        coupling_cutoff=get("system", "coupling_cutoff", float, pos),
        dt=get("ensemble", "dt", float, pos),
        t_end=get("ensemble", "t_end", float, lambda v: v >= 0, "must not be negative"),
        record_stride=get("ensemble", "record_stride", int, lambda v: v > 0),
        master_seed=get("ensemble", "master_seed", int, lambda v: 0 <= v < 2**64, "must be a 64-bit unsigned int"),
        output_dir=values["output"]["directory"],
        preset=chosen,
        pool_size=get("bath", "pool_size", int, lambda v: v > 0),
        pool_spacing=get("bath", "pool_spacing", int, lambda v: v > 0),
        equilibration_steps=get("bath", "equilibration_steps", int, lambda v: v > 0),
        equilibration_dt=get("bath", "equilibration_dt", float, pos),
        chunk_size=get("ensemble", "chunk_size", int, lambda v: v > 0),
        drift_tolerance=get("ensemble", "drift_tolerance", float, pos),
        bins=get("ensemble", "bins", int, lambda v: v > 0),
        isolated_control=get("ensemble", "isolated_control", boolean),
        lyapunov_replicas=get("ensemble", "lyapunov_replicas", int, lambda v: v >= 0, "must not be negative"),
        lyapunov_delta0=get("ensemble", "lyapunov_delta0", float, pos),
        checkpoint=get("output", "checkpoint", boolean),
        trajectory_dump=get("output", "trajectory_dump", int, lambda v: v >= 0, "must not be negative"),
    )
    try:
        cfg.plan
    except ValueError as exc:
        raise ConfigError(f"{_locate(text, 'ensemble', 'dt')}: {exc}") from None
    box = (cfg.n_particles / cfg.density) ** (1 / 3)
    for key, rc in (("cutoff", cfg.cutoff), ("coupling_cutoff", cfg.coupling_cutoff)):
        if rc > box / 2:
            raise ConfigError(f"{_locate(text, 'system', key)}: {key} {rc} exceeds half the box ({box / 2:.4g})")
    return cfg


# -- running -------------------------------------------------------------------

def _tag(x: float) -> str:
    return f"{x:g}".replace(".", "p")


def cell_name(mode: str, temperature: float, label: str) -> str:
    return f"{mode}_T{_tag(temperature)}_{label}"


def control_name(label: str) -> str:
    return f"isolated_{label}"


def _force_field(cfg: ExperimentConfig, mode: str) -> ForceField:
    return ForceField(
        morse=MorseSpec.i2(),
        bath=PairLJ(cutoff=cfg.cutoff),
        coupling=BreathingSphere.i2_xe(alpha=cfg.alpha, cutoff=cfg.coupling_cutoff),
        mode=BathMode(mode),
    )


def _seed(cfg, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.master_seed, *tags]))


def _temperature_key(t: float) -> int:
    return int(round(t * 1e6))


def _dump_trajectories(path, result, count, ps_per_unit):
    with open(path, "w") as fh:
        fh.write("trajectory,t_star,t_ps,q,p_q,E_total,T_inst,sign\n")
        for i in range(min(count, result.q.shape[0])):
            for k, t in enumerate(result.times):
                fh.write(f"{i},{t!r},{t * ps_per_unit!r},{result.q[i, k]!r},{result.p_q[i, k]!r},"
                         f"{result.energy[i, k]!r},{result.temperature[i, k]!r},{int(result.sign[i])}\n")


def run_experiment(cfg: ExperimentConfig, log=sys.stderr) -> dict:
    """Run every (temperature, mode, superposition) cell and the isolated controls.

    Returns the manifest (also written to ``manifest.json``). Failed cells are
    recorded and the rest still run.
    """
    t_start = time.time()
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    os.makedirs(os.path.join(out, "cells"), exist_ok=True)
    morse = MorseSpec.i2()
    plan = cfg.plan
    ps = DEFAULT_UNITS.time_ps(1.0)
    protocol = EquilibrationProtocol(dt=cfg.equilibration_dt, steps=cfg.equilibration_steps)
    grids = {}
    for label in cfg.superpositions:
        sp = Superposition.parse(label)
        grids[label] = (sp, build_wigner(morse, sp))

    def spec_for(sp, temperature, mode):
        return EnsembleSpec(cfg.n_trajectories, cfg.master_seed, sp, temperature, BathMode(mode), plan,
                            cfg.pool_size, cfg.chunk_size, cfg.drift_tolerance)

    def purity_columns(result, grid):
        geom = BinGeometry.from_grid(grid, cfg.bins)
        return purity_series(result, morse.hbar, geom)

    cells, controls = [], []
    if cfg.isolated_control:
        for label, (sp, grid) in grids.items():
            entry = {"superposition": label, "csv": f"cells/{control_name(label)}.csv", "status": "ok"}
            t0 = time.time()
            try:
                spec = spec_for(sp, 1.0, BathMode.LIQUID)
                result = propagate_control(spec, build_ensemble(spec, grid, None), morse)
                ser = purity_columns(result, grid)
                write_series_csv(os.path.join(out, entry["csv"]), result.times, ps, ser.chi, ser.chi_err,
                                 ser.chi_raw, np.nan, result.kept_mean(result.energy), np.nan)
                entry.update(n_flagged=result.n_flagged, auto_ranged=ser.auto_ranged)
            except Exception as exc:  # a failed cell must not stop the others
                entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            entry["wall_time"] = round(time.time() - t0, 3)
            controls.append(entry)

    for ti, temperature in enumerate(cfg.temperatures):
        for mode in cfg.modes:
            ff = _force_field(cfg, mode)
            mode_id = list(BathMode).index(BathMode(mode))
            pool_err = None
            t0 = time.time()
            try:
                pool = build_pool(temperature, ff, cfg.n_particles, cfg.density, cfg.pool_size,
                                  _seed(cfg, 1, mode_id, _temperature_key(temperature)), protocol,
                                  cfg.pool_spacing)
                d_lyap = np.full(plan.n_records, np.nan)
                if cfg.lyapunov_replicas:
                    refs = [pool.state(k % len(pool), morse.q0, 0.0) for k in range(cfg.lyapunov_replicas)]
                    ly = lyapunov(refs, cfg.lyapunov_delta0, plan, ff,
                                  _seed(cfg, 2, mode_id, _temperature_key(temperature)))
                    d_lyap = ly.distance
            except Exception as exc:
                pool_err = f"{type(exc).__name__}: {exc}"
            pool_time = time.time() - t0
            for label, (sp, grid) in grids.items():
                name = cell_name(mode, temperature, label)
                entry = {"temperature": temperature, "temperature_K": DEFAULT_UNITS.expand(temperature, "temperature"),
                         "mode": mode, "superposition": label, "csv": f"cells/{name}.csv", "status": "ok"}
                t0 = time.time()
                if pool_err:
                    entry.update(status="failed", error=pool_err)
                    cells.append(entry)
                    continue
                print(f"cell {name}: propagating {cfg.n_trajectories} trajectories", file=log, flush=True)
                try:
                    spec = spec_for(sp, temperature, mode)
                    ckpt = os.path.join(out, "cells", f"{name}.checkpoint.npz") if cfg.checkpoint else None
                    result = propagate_all(spec, build_ensemble(spec, grid, pool), ff, cfg.workers, ckpt,
                                           progress=log is not None)
                    ser = purity_columns(result, grid)
                    write_series_csv(os.path.join(out, entry["csv"]), result.times, ps, ser.chi, ser.chi_err,
                                     ser.chi_raw, d_lyap, result.kept_mean(result.energy),
                                     result.kept_mean(result.temperature))
                    if cfg.trajectory_dump:
                        _dump_trajectories(os.path.join(out, "cells", f"{name}.trajectories.csv"), result,
                                           cfg.trajectory_dump, ps)
                    if ckpt and os.path.exists(ckpt):
                        os.remove(ckpt)
                    entry.update(n_flagged=result.n_flagged, auto_ranged=ser.auto_ranged)
                except FlaggedFractionError as exc:
                    entry.update(status="failed", error=f"too many flagged trajectories: {exc}")
                except Exception as exc:
                    entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                entry["wall_time"] = round(time.time() - t0 + pool_time, 3)
                pool_time = 0.0
                cells.append(entry)

    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "software": {"package": "wignerbath", "version": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        "platform": platform.platform(),
        "config": asdict(cfg),
        "config_text": cfg.to_text(),
        "wall_time": round(time.time() - t_start, 3),
        "cells": cells,
        "controls": controls,
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def manifest_ok(manifest: dict) -> bool:
    entries = manifest.get("cells", []) + manifest.get("controls", [])
    return all(e["status"] == "ok" for e in entries)


def emit_plots(manifest: dict, out_dir: str | None = None) -> list[str]:
    """Join cell series on the time axis, one CSV per figure panel.

    Purity panels: per (superposition, temperature) the liquid, ideal-gas and
    isolated curves. Divergence panels: per temperature ln d for each mode.
    Missing inputs skip the panel with a warning; nothing is drawn.
    """
    out_dir = out_dir or manifest.get("config", {}).get("output_dir", ".")
    base = out_dir
    ok = {}
    for e in manifest.get("cells", []):
        if e["status"] == "ok":
            ok[(e["superposition"], e["temperature"], e["mode"])] = e["csv"]
    controls = {e["superposition"]: e["csv"] for e in manifest.get("controls", []) if e["status"] == "ok"}
    if not ok and not controls:
        warnings.warn("manifest lists no completed cells; no figure data written")
        return []
    os.makedirs(os.path.join(out_dir, "figures"), exist_ok=True)
    written = []
    labels = sorted({k[0] for k in ok} | set(controls))
    temps = sorted({k[1] for k in ok})
    modes = [m.value for m in BathMode]

    def load(rel):
        return read_series_csv(os.path.join(base, rel))

    def write(name, header, columns):
        path = os.path.join(out_dir, "figures", name)
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in zip(*columns):
                fh.write(",".join("nan" if math.isnan(v) else repr(float(v)) for v in row) + "\n")
        written.append(path)

    for label in labels:
        for t in temps:
            series = [(m, ok.get((label, t, m))) for m in modes] + [("isolated", controls.get(label))]
            missing = [m for m, rel in series if rel is None]
            if missing:
                warnings.warn(f"purity panel {label} T*={t:g} skipped: missing {', '.join(missing)}")
                continue
            data = [(m, load(rel)) for m, rel in series]
            times = data[0][1]["t_star"]
            header, cols = ["t_star", "t_ps"], [times, data[0][1]["t_ps"]]
            for m, d in data:
                if d["t_star"].size != times.size or not np.allclose(d["t_star"], times):
                    raise ValueError(f"time axes differ for panel {label} T*={t:g}")
                header += [f"chi_{m}", f"chi_err_{m}"]
                cols += [d["chi"], d["chi_err"]]
            write(f"purity_{label}_T{_tag(t)}.csv", header, cols)
    for t in temps:
        rels = [(m, next((ok[k] for k in sorted(ok) if k[1] == t and k[2] == m), None)) for m in modes]
        if any(rel is None for _, rel in rels):
            warnings.warn(f"divergence panel T*={t:g} skipped: missing a bath mode")
            continue
        data = [(m, load(rel)) for m, rel in rels]
        header = ["t_star", "t_ps"] + [f"ln_d_{m}" for m, _ in data]
        cols = [data[0][1]["t_star"], data[0][1]["t_ps"]] + [d["ln_d_lyap"] for _, d in data]
        write(f"divergence_T{_tag(t)}.csv", header, cols)
    return written


# -- command line -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wignerbath", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI config file, or a manifest.json to re-run")
    ap.add_argument("--preset", choices=sorted(PRESETS), help="preset defaults (desk or paper)")
    ap.add_argument("--seed", type=int, help="master seed")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    return ap


def load_config(args) -> ExperimentConfig:
    text = ""
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        if text.lstrip().startswith("{"):
            try:
                text = json.loads(text)["config_text"]
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{args.config} is not a run manifest: {exc}") from None
    overrides = {}
    if args.seed is not None:
        overrides[("ensemble", "master_seed")] = args.seed
    if args.out:
        overrides[("output", "directory")] = args.out
    cfg = parse_config(text, args.preset, overrides)
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    cfg.workers = args.workers
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        os.makedirs(cfg.output_dir, exist_ok=True)
        if not os.access(cfg.output_dir, os.W_OK):
            raise ConfigError(f"output directory {cfg.output_dir} is not writable")
    except (ConfigError, ConfigurationError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = run_experiment(cfg)
    emit_plots(manifest)
    for e in manifest["cells"] + manifest["controls"]:
        if e["status"] != "ok":
            print(f"failed: {e['csv']}: {e['error']}", file=sys.stderr)
    return EXIT_OK if manifest_ok(manifest) else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
