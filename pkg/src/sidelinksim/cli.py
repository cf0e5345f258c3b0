"""Experiment runner: config parsing, sweep orchestration, result files.

Configuration is one flat ``key = value`` text file with units spelled out in
the key names. Results are written as CSV or JSON-lines with a reproducibility
header (resolved config, its hash, package version); rendered figures land
next to the delimited output unless disabled.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__, engine, metrics
from .metrics import ProbeSettings
from .phy import RadioParams
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

WORKERS_ENV = "SIDELINKSIM_WORKERS"

SWEEP_AXES = ("lambda_b_per_s", "lambda_g_per_s", "platoon_size",
              "latency_budget_ms", "k_b")

# preset -> (sweep axis, default sweep values)
PRESETS = {
    "plr-curves": ("lambda_g_per_s",
                   (1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0)),
    "capacity-vs-lambda_b": ("lambda_b_per_s",
                             (0.6, 1.0, 1.8, 2.6, 3.4, 4.2, 5.0, 6.0, 7.0, 8.0, 9.0)),
    "capacity-vs-platoon-size": ("platoon_size",
                                 (2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)),
    "capacity-vs-latency": ("latency_budget_ms", (5.0, 10.0, 20.0)),
    "single-run": (None, ()),
}

COLUMNS = (
    "preset", "sweep_axis", "sweep_value", "psfch", "k_g",
    "lambda_b_per_s", "lambda_g_per_s", "capacity_per_s", "is_best_k",
    "plr_b", "plr_b_lo", "plr_b_hi", "plr_b_n",
    "plr_g", "plr_g_lo", "plr_g_hi", "plr_g_n",
    "occupancy", "mean_groupcast_attempts", "probe_duration_s", "n_runs", "seeds",
)


class ConfigError(ValueError):
    """Configuration file problem; the message carries the offending line."""


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully resolved experiment: preset, base scenario, sweep and outputs."""

    preset: str
    base: ScenarioConfig
    sweep_axis: str | None
    sweep_values: tuple
    seeds: tuple
    output_path: str = "results"
    output_format: str = "csv"
    k_g_candidates: tuple | None = None
    plr_k_g: tuple = (3, 5)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    render_figures: bool = True


# -- config file parsing -----------------------------------------------------

def _read_entries(path) -> dict[str, tuple[str, int]]:
    entries: dict[str, tuple[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not key:
                raise ConfigError(f"line {lineno}: empty key")
            if key in entries:
                raise ConfigError(f"duplicate key {key!r} on lines "
                                  f"{entries[key][1]} and {lineno}")
            entries[key] = (value, lineno)
    return entries


class _Entries:
    def __init__(self, entries):
        self.entries = entries
        self.used = set()

    def line(self, key):
        return self.entries[key][1] if key in self.entries else None

    def _raw(self, key):
        self.used.add(key)
        return self.entries.get(key)

    def pop_str(self, key, default, choices=None):
        raw = self._raw(key)
        if raw is None:
            return default
        value, lineno = raw
        if choices and value not in choices:
            raise ConfigError(f"line {lineno}: {key} must be one of "
                              f"{', '.join(choices)} (got {value!r})")
        return value

    def pop_float(self, key, default, lo=None, hi=None, lo_open=False):
        raw = self._raw(key)
        if raw is None:
            return default
        value, lineno = raw
        try:
            x = float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} must be a number "
                              f"(got {value!r})") from None
        if lo is not None and (x <= lo if lo_open else x < lo):
            op = ">" if lo_open else ">="
            raise ConfigError(f"line {lineno}: {key} must be {op} {lo:g}")
        if hi is not None and x > hi:
            raise ConfigError(f"line {lineno}: {key} must be <= {hi:g}")
        return x

    def pop_int(self, key, default, lo=None, hi=None):
        raw = self._raw(key)
        if raw is None:
            return default
        value, lineno = raw
        try:
            x = int(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} must be an integer "
                              f"(got {value!r})") from None
        if lo is not None and x < lo:
            raise ConfigError(f"line {lineno}: {key} must be >= {lo}")
        if hi is not None and x > hi:
            raise ConfigError(f"line {lineno}: {key} must be <= {hi}")
        return x

    def pop_bool(self, key, default):
        raw = self._raw(key)
        if raw is None:
            return default
        value, lineno = raw
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"line {lineno}: {key} must be a boolean (got {value!r})")

    def pop_list(self, key, default, cast=float):
        raw = self._raw(key)
        if raw is None:
            return default
        value, lineno = raw
        try:
            items = tuple(cast(part.strip()) for part in value.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} must be a comma-separated "
                              f"list (got {value!r})") from None
        if not items:
            raise ConfigError(f"line {lineno}: {key} must not be empty")
        return items

    def pop_prefixed_floats(self, prefix):
        out = {}
        for key in list(self.entries):
            if key.startswith(prefix):
                value, lineno = self.entries[key]
                self.used.add(key)
                try:
                    out[key[len(prefix):]] = float(value)
                except ValueError:
                    raise ConfigError(f"line {lineno}: {key} must be a number "
                                      f"(got {value!r})") from None
        return out

    def reject_unknown(self):
        for key, (_value, lineno) in self.entries.items():
            if key not in self.used:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")


def _line_hint(entries, message: str) -> str:
    hints = [f"{key}: line {lineno}" for key, (_v, lineno) in entries.items()
             if key in message]
    return f"{message} ({', '.join(hints)})" if hints else message


def load_config(path, *, preset: str | None = None, output: str | None = None,
                output_format: str | None = None) -> ExperimentSpec:
    """Parse and validate an experiment config file; unset keys take defaults.

    Keyword overrides mirror the command-line flags.
    """
    raw = _read_entries(path)
    e = _Entries(raw)

    radio = RadioParams(
        tx_power_dbm=e.pop_float("tx_power_dbm", 23.0),
        noise_figure_db=e.pop_float("noise_figure_db", 5.0, lo=0.0),
        ref_loss_db=e.pop_float("ref_loss_db", 46.7),
        ref_distance_m=e.pop_float("ref_distance_m", 1.0, lo=0.0, lo_open=True),
        pathloss_exponent=e.pop_float("pathloss_exponent", 3.0, lo=0.0, lo_open=True),
        mcs_pssch=e.pop_int("mcs_pssch", 6, lo=0),
        mcs_pscch=e.pop_int("mcs_pscch", 0, lo=0),
        subcarrier_spacing_khz=e.pop_float("subcarrier_spacing_khz", 30.0,
                                           lo=0.0, lo_open=True),
        prbs_per_subchannel=e.pop_int("prbs_per_subchannel", 10, lo=1),
        n_subchannels=e.pop_int("n_subchannels", 10, lo=1),
        slot_duration_us=e.pop_float("slot_duration_us", 500.0, lo=0.0, lo_open=True),
        packet_size_bytes=e.pop_int("packet_size_bytes", 290, lo=1),
        error_model=e.pop_str("error_model", "logistic"),
        error_model_params=e.pop_prefixed_floats("error_model."),
    )
    base = ScenarioConfig(
        n_ues=e.pop_int("n_ues", 200, lo=2),
        platoon_size=e.pop_int("platoon_size", 5, lo=2),
        mean_spacing_m=e.pop_float("mean_spacing_m", 10.0, lo=0.0, lo_open=True),
        lambda_b=e.pop_float("lambda_b_per_s", 1.8, lo=0.0),
        lambda_g=e.pop_float("lambda_g_per_s", 1.0, lo=0.0),
        comm_range_m=e.pop_float("comm_range_m", 200.0, lo=0.0, lo_open=True),
        latency_budget_ms=e.pop_float("latency_budget_ms", 10.0, lo=0.0, lo_open=True),
        plr_qos=e.pop_float("plr_qos", 0.01),
        k_g=e.pop_int("k_g", 3, lo=1),
        k_b=e.pop_int("k_b", 2, lo=1),
        psfch_enabled=e.pop_bool("psfch_enabled", False),
        ack_delay_ms=e.pop_float("ack_delay_ms", 2.0, lo=0.0, lo_open=True),
        sim_duration_s=e.pop_float("sim_duration_s", 100.0, lo=0.0, lo_open=True),
        seed=e.pop_int("seed", 1),
        half_duplex=e.pop_bool("half_duplex", True),
        psfch_ideal=e.pop_bool("psfch_ideal", True),
        harq_combining=e.pop_bool("harq_combining", False),
        radio=radio,
    )

    preset_name = preset or e.pop_str("preset", "single-run", choices=tuple(PRESETS))
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}")
    default_axis, default_values = PRESETS[preset_name]
    axis = e.pop_str("sweep_axis", default_axis, choices=SWEEP_AXES)
    values = e.pop_list("sweep_values", default_values, cast=float)
    if preset_name != "single-run" and not values:
        raise ConfigError("sweep_values must not be empty for a sweep preset")

    probe = ProbeSettings(
        n_seeds=e.pop_int("n_probe_seeds", 2, lo=1),
        resolution=e.pop_float("bisect_resolution_per_s", 0.1, lo=0.0, lo_open=True),
        lambda_max=e.pop_float("lambda_g_max_per_s", 50.0, lo=0.0, lo_open=True),
        target_packets=e.pop_int("probe_target_packets", 2000, lo=1),
        zero_target_packets=e.pop_int("probe_zero_target_packets", 10000, lo=1),
        min_duration_s=e.pop_float("probe_min_duration_s", 30.0, lo=0.0, lo_open=True),
        max_duration_s=e.pop_float("probe_max_duration_s", 200.0, lo=0.0, lo_open=True),
        tx_budget=e.pop_float("probe_tx_budget", 400_000.0, lo=0.0, lo_open=True),
    )
    spec = ExperimentSpec(
        preset=preset_name,
        base=base,
        sweep_axis=axis if preset_name != "single-run" else None,
        sweep_values=values if preset_name != "single-run" else (),
        seeds=e.pop_list("seeds", (1, 2, 3), cast=int),
        output_path=output or e.pop_str("output_path", "results"),
        output_format=output_format
        or e.pop_str("output_format", "csv", choices=("csv", "jsonl")),
        k_g_candidates=e.pop_list("k_g_candidates", None, cast=int),
        plr_k_g=e.pop_list("plr_k_g", (3, 5), cast=int),
        probe=probe,
        render_figures=e.pop_bool("render_figures", True),
    )
    e.reject_unknown()
    try:
        base.validate()
    except ValueError as exc:
        raise ConfigError(_line_hint(raw, str(exc))) from None
    if spec.probe.max_duration_s < spec.probe.min_duration_s:
        raise ConfigError("probe_max_duration_s below probe_min_duration_s")
    return spec


# -- sweep orchestration ------------------------------------------------------

def _apply_axis(config: ScenarioConfig, axis: str, value: float) -> ScenarioConfig:
    if axis == "lambda_b_per_s":
        return config.replace(lambda_b=value)
    if axis == "lambda_g_per_s":
        return config.replace(lambda_g=value)
    if axis == "platoon_size":
        return config.replace(platoon_size=int(value))
    if axis == "latency_budget_ms":
        return config.replace(latency_budget_ms=value)
    if axis == "k_b":
        return config.replace(k_b=int(value))
    raise ValueError(f"unknown sweep axis {axis!r}")


def _probe_row(spec, sweep_value, result, cand, probe):
    return {
        "preset": spec.preset,
        "sweep_axis": spec.sweep_axis,
        "sweep_value": sweep_value,
        "psfch": result.psfch_enabled,
        "k_g": cand.k_g,
        "lambda_b_per_s": result.lambda_b,
        "lambda_g_per_s": probe.lambda_g,
        "capacity_per_s": cand.capacity,
        "is_best_k": cand.k_g == result.best_k_g,
        "plr_b": probe.plr_b.point, "plr_b_lo": probe.plr_b.lo,
        "plr_b_hi": probe.plr_b.hi, "plr_b_n": probe.plr_b.n_samples,
        "plr_g": probe.plr_g.point, "plr_g_lo": probe.plr_g.lo,
        "plr_g_hi": probe.plr_g.hi, "plr_g_n": probe.plr_g.n_samples,
        "occupancy": probe.occupancy,
        "mean_groupcast_attempts": probe.mean_groupcast_attempts,
        "probe_duration_s": probe.duration_s,
        "n_runs": len(result.seeds),
        "seeds": "|".join(str(s) for s in result.seeds),
    }


def _capacity_rows(spec, run_many):
    rows = []
    for value in sorted(spec.sweep_values):
        cfg = _apply_axis(spec.base, spec.sweep_axis, value)
        with ThreadPoolExecutor(max_workers=2) as pool:
            futures = [
                pool.submit(metrics.capacity_search, cfg, cfg.lambda_b, mode,
                            k_candidates=spec.k_g_candidates,
                            settings=spec.probe, run_many=run_many)
                for mode in (False, True)
            ]
            results = [f.result() for f in futures]
        for result in results:
            for cand in result.candidates:
                probe = cand.boundary or result.zero_load_probe
                rows.append(_probe_row(spec, value, result, cand, probe))
            log.info("preset=%s %s=%g psfch=%s capacity=%.2f best_k=%d",
                     spec.preset, spec.sweep_axis, value, result.psfch_enabled,
                     result.capacity, result.best_k_g)
    return rows


def _group_stats_row(spec, sweep_value, psfch, k_g, configs, stats):
    plr_b = metrics.pooled_estimate(stats, "broadcast_units")
    plr_g = metrics.pooled_estimate(stats, "groupcast_units")
    n = len(stats)
    return {
        "preset": spec.preset,
        "sweep_axis": spec.sweep_axis,
        "sweep_value": sweep_value,
        "psfch": psfch,
        "k_g": k_g,
        "lambda_b_per_s": configs[0].lambda_b,
        "lambda_g_per_s": configs[0].lambda_g,
        "capacity_per_s": None,
        "is_best_k": None,
        "plr_b": plr_b.point, "plr_b_lo": plr_b.lo, "plr_b_hi": plr_b.hi,
        "plr_b_n": plr_b.n_samples,
        "plr_g": plr_g.point, "plr_g_lo": plr_g.lo, "plr_g_hi": plr_g.hi,
        "plr_g_n": plr_g.n_samples,
        "occupancy": sum(s.occupancy for s in stats) / n,
        "mean_groupcast_attempts": sum(s.mean_groupcast_attempts for s in stats) / n,
        "probe_duration_s": configs[0].sim_duration_s,
        "n_runs": n,
        "seeds": "|".join(str(s) for s in spec.seeds),
    }


def _plr_curve_rows(spec, run_many):
    groups = []
    jobs = []
    for value in sorted(spec.sweep_values):
        for psfch in (False, True):
            for k in spec.plr_k_g:
                cfgs = [_apply_axis(spec.base, spec.sweep_axis, value)
                        .replace(psfch_enabled=psfch, k_g=k, seed=s)
                        for s in spec.seeds]
                groups.append((value, psfch, k, cfgs))
                jobs.extend(cfgs)
    stats = run_many(jobs)
    rows, pos = [], 0
    for value, psfch, k, cfgs in groups:
        chunk = stats[pos:pos + len(cfgs)]
        pos += len(cfgs)
        rows.append(_group_stats_row(spec, value, psfch, k, cfgs, chunk))
        log.info("preset=%s %s=%g psfch=%s k_g=%d done",
                 spec.preset, spec.sweep_axis, value, psfch, k)
    return rows


def _single_run_rows(spec, run_many, trace_path=None):
    cfgs = [spec.base.replace(seed=s) for s in spec.seeds]
    stats = run_many(cfgs)
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            engine.run(cfgs[0], trace=fh)
    return [_group_stats_row(spec, None, spec.base.psfch_enabled,
                             spec.base.k_g, cfgs, stats)]


# -- output writing -----------------------------------------------------------

def canonical_config(spec: ExperimentSpec) -> dict:
    d = {
        "preset": spec.preset,
        "sweep_axis": spec.sweep_axis,
        "sweep_values": list(spec.sweep_values),
        "seeds": list(spec.seeds),
        "k_g_candidates": list(spec.k_g_candidates) if spec.k_g_candidates else None,
        "plr_k_g": list(spec.plr_k_g),
        "probe": asdict(spec.probe),
        "scenario": asdict(spec.base),
        "output_format": spec.output_format,
    }
    return d


def config_hash(spec: ExperimentSpec) -> str:
    blob = json.dumps(canonical_config(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def _sort_rows(rows):
    def key(r):
        sv = r["sweep_value"]
        return (sv if sv is not None else -1.0, bool(r["psfch"]), r["k_g"])
    rows.sort(key=key)


def write_rows(path: Path, spec: ExperimentSpec, rows, complete: bool) -> None:
    meta = {
        "format": "sidelinksim-results-v1",
        "version": __version__,
        "config_hash": config_hash(spec),
        "master_seed": spec.base.seed,
        "config": canonical_config(spec),
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if spec.output_format == "csv":
            fh.write("# sidelinksim-results-v1\n")
            fh.write(f"# version={__version__}\n")
            fh.write(f"# config_hash={meta['config_hash']}\n")
            fh.write(f"# config={json.dumps(meta['config'], sort_keys=True)}\n")
            fh.write(",".join(COLUMNS) + "\n")
            for row in rows:
                fh.write(",".join(_fmt_cell(row[c]) for c in COLUMNS) + "\n")
            if not complete:
                fh.write(f"# INCOMPLETE: flushed {len(rows)} rows; rerun with the "
                         f"same config to regenerate the remainder\n")
        else:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
            for row in rows:
                fh.write(json.dumps({c: row[c] for c in COLUMNS}, sort_keys=True) + "\n")
            if not complete:
                fh.write(json.dumps({"_incomplete": len(rows)}) + "\n")


def run_experiment(spec: ExperimentSpec, *, workers: int | None = None,
                   trace: bool = False) -> dict:
    """Execute an experiment spec and write its result files.

    Returns a dict of written paths. Partial rows are flushed with a
    resumption marker when a sweep fails midway; the exception propagates.
    """
    outdir = Path(spec.output_path)
    outdir.mkdir(parents=True, exist_ok=True)
    results_path = outdir / f"results.{spec.output_format}"
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "0")) or (os.cpu_count() or 1)

    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(max_workers=workers)

        def run_many(configs):
            return list(pool.map(metrics.collect_run_stats, configs, chunksize=1))
    else:
        run_many = metrics._serial_run_many

    rows: list = []
    paths = {"results": results_path}
    try:
        if spec.preset == "single-run":
            trace_path = outdir / "trace.txt" if trace else None
            rows = _single_run_rows(spec, run_many, trace_path)
            if trace_path is not None:
                paths["trace"] = trace_path
        elif spec.preset == "plr-curves":
            rows = _plr_curve_rows(spec, run_many)
        else:
            rows = _capacity_rows(spec, run_many)
    except Exception:
        _sort_rows(rows)
        write_rows(results_path, spec, rows, complete=False)
        raise
    finally:
        if pool is not None:
            pool.shutdown()

    _sort_rows(rows)
    write_rows(results_path, spec, rows, complete=True)
    if spec.render_figures:
        from . import report
        for name, fig_path in report.render_figures(rows, spec, outdir).items():
            paths[name] = fig_path
    return paths


# -- entry point ---------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sidelinksim",
        description="Slot-level sidelink simulator: loss curves and groupcast "
                    "capacity with and without the feedback channel.")
    parser.add_argument("config", help="experiment config file (key = value lines; "
                                       "an empty file runs pure defaults)")
    parser.add_argument("-p", "--preset", choices=tuple(PRESETS),
                        help="override the preset from the config file")
    parser.add_argument("-o", "--output", help="output directory (default: results)")
    parser.add_argument("-f", "--format", choices=("csv", "jsonl"),
                        help="output format override")
    parser.add_argument("-w", "--workers", type=int,
                        help=f"simulation worker processes (default: ${WORKERS_ENV} "
                             f"or the CPU count)")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v progress, -vv debug")
    parser.add_argument("--trace", action="store_true",
                        help="write a per-slot transmission trace (single-run preset)")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip figure rendering")
    args = parser.parse_args(argv)

    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        spec = load_config(args.config, preset=args.preset, output=args.output,
                           output_format=args.format)
        if args.no_figures:
            spec = dataclasses.replace(spec, render_figures=False)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        paths = run_experiment(spec, workers=args.workers, trace=args.trace)
    except Exception as exc:  # noqa: BLE001 - map any runtime failure to exit 2
        log.debug("experiment failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
