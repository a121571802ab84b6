"""Command-line front end: ``lora-ranging {synth,fit,eval,bench,replay}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Log verbosity comes from ``LORA_RANGING_LOG`` (e.g. ``DEBUG``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import RunConfig
from .dataset import load_geometry, sample_geometry
from .evaluate import emit_report, render_summary
from .exceptions import ConfigError, DataError, RangingError
from .features import ModelVariant
from .fit import load_model, save_model
from .pipeline import evaluate_variants, fit_variants, prepare, time_stream
from .ranging import write_estimates_csv
from .stats import fmt
from .synth import GEOMETRY_FILE, export_campaign, generate_campaign, replay_external

log = logging.getLogger("lora_ranging")


def _geometry_path(cfg: RunConfig) -> str:
    return cfg["paths.geometry"] or os.path.join(cfg["paths.data_dir"], GEOMETRY_FILE)


def _load_data(cfg: RunConfig):
    data = replay_external(cfg["paths.data_dir"], _geometry_path(cfg))
    for name, rows in data.rejected.items():
        log.warning("%s: %d rows rejected (first: line %d, %s)", name, len(rows), rows[0].line, rows[0].reason)
    return data


def _model_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg["paths.model_dir"], f"model_{name}.txt")


def cmd_synth(cfg: RunConfig) -> int:
    geometry = sample_geometry()
    if cfg["paths.geometry"]:
        geometry = load_geometry(cfg["paths.geometry"])
    records, _ = generate_campaign(cfg.synth_config(geometry))
    paths = export_campaign(records, geometry, cfg["paths.data_dir"])
    print(f"wrote {len(records)} uplinks for {len(geometry)} devices to {cfg['paths.data_dir']}")
    for p in paths:
        print(f"  {p}")
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    prepared = prepare(data.records, cfg)
    print("preprocessing: " + ", ".join(f"{k}={v}" for k, v in prepared.counts.items()))
    models = fit_variants(prepared.train, data.geometry, cfg, test=prepared.test)
    os.makedirs(cfg["paths.model_dir"], exist_ok=True)
    for name, c in models.items():
        save_model(c, _model_path(cfg, name))
        d = c.diagnostics
        print(f"{name:<10} n={c.n:.4f} beta0={c.beta0:.3f} omega=({c.omega[0]:.3f}, {c.omega[1]:.3f}) "
              f"k_gamma={c.k_gamma:.4f}")
        print(f"{'':<10} train RMSE {d['train_rmse_db']:.3f} dB R2 {fmt(d['train_r2'], '.4f')} | "
              f"CV RMSE {d.get('cv_rmse_db_mean', float('nan')):.3f}±{d.get('cv_rmse_db_std', float('nan')):.3f} dB "
              f"R2 {fmt(d.get('cv_r2_mean', float('nan')), '.4f')} | "
              f"test RMSE {d.get('test_rmse_db', float('nan')):.3f} dB R2 {fmt(d.get('test_r2', float('nan')), '.4f')}")
        print(f"{'':<10} -> {_model_path(cfg, name)}")
    return 0


def _load_models(cfg: RunConfig):
    models = {}
    for name in cfg.variants:
        key = ModelVariant.from_name(name).name
        path = _model_path(cfg, key)
        if not os.path.isfile(path):
            raise DataError(f"model file not found: {path} (run `fit` first)")
        models[key] = load_model(path)
    return models


def cmd_eval(cfg: RunConfig, bench_runs: int = 1) -> int:
    data = _load_data(cfg)
    prepared = prepare(data.records, cfg)
    models = _load_models(cfg)
    timed = next((m for m in models.values() if m.variant.rssi_source.value == "FILTERED"),
                 next(iter(models.values())))
    latency = time_stream(prepared.test, data.geometry, timed, cfg.filter_params(), runs=bench_runs)
    latency = {"variant": timed.variant.name, **latency}
    report, estimates = evaluate_variants(prepared.test, data.geometry, models, cfg, latency=latency)
    out_dir = cfg["paths.out_dir"]
    paths = emit_report(report, out_dir)
    for name, est in estimates.items():
        path = os.path.join(out_dir, f"estimates_{name}.csv")
        write_estimates_csv(est, path)
        paths.append(path)
    print(render_summary(report).split("Resolved configuration:")[0].rstrip())
    print(f"\nmean per-packet latency ({timed.variant.name}): {latency['mean_us']:.3f} us "
          f"over {latency['packets']} packets")
    print(f"report files in {out_dir}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    prepared = prepare(data.records, cfg)
    models = _load_models(cfg)
    for name, c in models.items():
        stats = time_stream(prepared.test, data.geometry, c, cfg.filter_params(), runs=cfg["bench.runs"])
        print(f"{name:<10} {stats['mean_us']:.3f} ± {stats['std_us']:.3f} us/packet over {stats['packets']} "
              f"packets x {stats['runs']} runs (first/last decile {stats['first_decile_us']:.3f}/"
              f"{stats['last_decile_us']:.3f} us)")
    return 0


def cmd_replay(cfg: RunConfig) -> int:
    rc = cmd_fit(cfg)
    return rc or cmd_eval(cfg)


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "eval": cmd_eval, "bench": cmd_bench, "replay": cmd_replay}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lora-ranging", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI-style config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--data-dir")
    common.add_argument("--geometry")
    common.add_argument("--model-dir")
    common.add_argument("--out-dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--variants", help="comma-separated, e.g. MWM,MWM-EP,MWM-EP-KF")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic campaign")
    sub.add_parser("fit", parents=[common], help="preprocess and calibrate the model variants")
    sub.add_parser("eval", parents=[common], help="range the test split and write the report")
    sub.add_parser("bench", parents=[common], help="time per-packet filtering and inversion")
    rp = sub.add_parser("replay", parents=[common], help="fit + eval on an external dataset directory")
    rp.add_argument("dataset_dir", help="directory with uplink CSVs and geometry.csv")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    flag_map = {"data_dir": "paths.data_dir", "geometry": "paths.geometry", "model_dir": "paths.model_dir",
                "out_dir": "paths.out_dir", "seed": "pipeline.seed", "variants": "pipeline.variants"}
    if getattr(args, "dataset_dir", None):
        overrides.append(f"paths.data_dir={args.dataset_dir}")
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LORA_RANGING_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except RangingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

