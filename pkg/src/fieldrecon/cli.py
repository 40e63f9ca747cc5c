"""``recon`` command-line entry point.

    recon COMMAND --config PATH [--set key=value ...] [--seed N]

Commands: gen-data, train, make-obs, reconstruct, evaluate, benchmark. Config
files are flat ``key = value`` text; ``reconstruct`` also accepts repeated
``[observation]`` blocks. Relative paths are resolved against the config
file's directory. Every command writes ``run_manifest.txt`` (effective config
and seeds) into its output directory before doing any work.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training divergence,
5 sampler non-finite state.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import aodf
from .benchmark import run_grid, write_table
from .config import format_config, parse_bool, parse_config
from .denoiser import NetConfig, load_model, save_model
from .errors import ConfigError, DivergedLoss, FormatError, NonFiniteState, ShapeError
from .grid import GridSpec
from .metrics import RAPSD_CONVENTION, dataset_std, melr, nrmse, rapsd, temporal_acf
from .observe import (Downsample, Identity, Masking, cloudlike_mask, observation_from_settings,
                      observe_noisy, save_observation)
from .sampler import (AnnealSchedule, DapsConfig, ReconResult, dps_reconstruct,
                      ensemble_reconstruct, member_seed)
from .seeding import derive_seed
from .synth import CloudConfig, GrfConfig, load_dataset, make_dataset, read_manifest
from .train import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_NONFINITE = 0, 2, 3, 4, 5
REQUIRED = object()
MANIFEST = "run_manifest.txt"

_SAMPLER_KEYS = {
    "n_steps": (int, 30), "sigma_max": (float, 80.0), "sigma_min": (float, 0.002),
    "rho": (float, 7.0), "n_langevin": (int, 50), "eta": (float, 1e-2),
    "eta_decay": (float, 1.0), "sigma_prior_rule": (str, "equal_to_sigma_tau"),
    "sigma_prior_value": (float, 1.0), "ode_substeps": (int, 5), "solver": (str, "heun"),
    "step_cap": (float, 0.1), "mask_mode": (str, "ones"), "guidance_scale": (float, 1.0),
    "ambient_masks": (int, 4), "ambient_rate": (float, 0.37),
}

SCHEMAS = {
    "gen-data": {
        "out_dir": (Path, REQUIRED), "height": (int, 32), "width": (int, 32), "n_time": (int, 16),
        "n_sequences": (int, 8), "spectral_slope": (float, 2.0), "temporal_rho": (float, 0.8),
        "amplitude": (float, 0.5), "offset": (float, -1.0), "seed": (int, 0),
        "clouds": (parse_bool, False), "gamma": (float, 0.7), "correlation_length": (float, 4.0),
        "cloud_rho": (float, 0.8),
    },
    "train": {
        "manifest": (Path, REQUIRED), "out_dir": (Path, REQUIRED), "window": (int, 3),
        "base_channels": (int, 16), "n_levels": (int, 2), "attn_heads": (int, 2),
        "p_mean": (float, -1.2), "p_std": (float, 1.2), "dropout_kind": (str, "none"),
        "dropout_rate": (float, 0.0), "batch_size": (int, 8), "n_steps": (int, 1000),
        "lr": (float, 1e-3), "lr_schedule": (str, "constant"), "ema_decay": (float, 0.999),
        "seed": (int, 0), "record_time": (parse_bool, False),
    },
    "make-obs": {
        "field": (Path, REQUIRED), "out_dir": (Path, REQUIRED), "kind": (str, REQUIRED),
        "missing_ratio": (float, 0.45), "s_step": (int, 2), "t_step": (int, 1),
        "sigma_m": (float, 0.0), "lambda_m": (float, 1.0), "stem": (str, "obs"), "seed": (int, 0),
    },
    "reconstruct": {
        "checkpoint": (Path, REQUIRED), "out_dir": (Path, REQUIRED), "sampler": (str, "daps"),
        "n_ensemble": (int, 2), "n_time": (int, 0), "height": (int, 0), "width": (int, 0),
        "seed": (int, 0), **_SAMPLER_KEYS,
    },
    "evaluate": {
        "gen": (Path, REQUIRED), "gt": (Path, REQUIRED), "out_dir": (Path, REQUIRED),
        "sigma_x": (float, 0.0), "max_lag": (int, 1), "case": (str, "case0"), "seed": (int, 0),
    },
    "benchmark": {
        "clean_checkpoint": (Path, REQUIRED), "corrupt_checkpoint": (Path, REQUIRED),
        "test_manifest": (Path, REQUIRED), "out_dir": (Path, REQUIRED),
        "methods": (str, "daps,dps"), "priors": (str, "clean,corrupt"), "factors": (str, "1"),
        "missing_ratios": (str, "0.45"), "n_cases": (int, 4), "sigma_m": (float, 0.0),
        "lambda_m": (float, 1.0), "seed": (int, 0), "corrupt_mask_mode": (str, "ambient"),
        **_SAMPLER_KEYS,
    },
}
OBSERVATION_KEYS = {"kind", "y", "mask", "s_step", "t_step", "sigma_m", "lambda_m", "gamma"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _resolve(schema: dict, raw: dict, base: Path) -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, (conv, default) in schema.items():
        if key not in raw:
            if default is REQUIRED:
                raise ConfigError(f"missing required key: {key}")
            out[key] = default
            continue
        try:
            value = conv(raw[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        if conv is Path and not value.is_absolute():
            value = base / value
        out[key] = value
    return out


def _write_manifest(out_dir: Path, command: str, cfg: dict, extra: dict | None = None,
                    blocks=()) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = {"command": command, **{k: str(v) for k, v in cfg.items()}, **(extra or {})}
    (out_dir / MANIFEST).write_text(format_config(settings, blocks), encoding="utf-8")


def _sampler_parts(cfg: dict):
    schedule = AnnealSchedule.karras(cfg["n_steps"], cfg["sigma_max"], cfg["sigma_min"], cfg["rho"])
    daps = DapsConfig(cfg["n_langevin"], cfg["eta"], cfg["eta_decay"], cfg["sigma_prior_rule"],
                      cfg["sigma_prior_value"], cfg["ode_substeps"], cfg["solver"],
                      cfg["step_cap"], cfg["mask_mode"], cfg["seed"], cfg["ambient_masks"],
                      cfg["ambient_rate"])
    return schedule, daps


def _csv_list(text: str, conv) -> list:
    return [conv(t.strip()) for t in text.split(",") if t.strip()]


# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg: dict, blocks) -> int:
    spec = GridSpec(cfg["height"], cfg["width"], cfg["n_time"])
    grf = GrfConfig(spec, cfg["spectral_slope"], cfg["temporal_rho"], cfg["amplitude"],
                    cfg["offset"], cfg["seed"])
    cloud = (CloudConfig(spec, cfg["correlation_length"], cfg["cloud_rho"], cfg["seed"])
             if cfg["clouds"] else None)
    seeds = [derive_seed(cfg["seed"], "sequence", i) for i in range(cfg["n_sequences"])]
    _write_manifest(cfg["out_dir"], "gen-data", cfg, {"sequence_seeds": " ".join(map(str, seeds))})
    manifest = make_dataset(grf, cfg["n_sequences"], cfg["out_dir"], cloud,
                            cfg["gamma"] if cloud else None)
    print(f"wrote {cfg['n_sequences']} sequences of shape {spec.shape} -> {manifest}")
    return EXIT_OK


def cmd_train(cfg: dict, blocks) -> int:
    net_cfg = NetConfig(cfg["window"], cfg["base_channels"], cfg["n_levels"], cfg["attn_heads"])
    train_cfg = TrainConfig(**{k: cfg[k] for k in TrainConfig.__dataclass_fields__})
    out = cfg["out_dir"]
    _write_manifest(out, "train", cfg, {"init_seed": str(derive_seed(cfg["seed"], "init"))})
    (out / "train_config.txt").write_text(train_cfg.to_text(), encoding="utf-8")
    try:
        _, log, model = train(cfg["manifest"], net_cfg, train_cfg, cfg["record_time"])
    except DivergedLoss as exc:
        if getattr(exc, "log", None) is not None:
            exc.log.write_csv(out / "train_log.csv")
        raise
    save_model(out / "checkpoint.aodp", model)
    log.params_path = str(out / "checkpoint.aodp")
    log.write_csv(out / "train_log.csv")
    last = log.losses()
    tail = f", final loss {last[-1]:.4f}" if last.size else ""
    print(f"trained {train_cfg.n_steps} steps{tail} -> {out / 'checkpoint.aodp'}")
    return EXIT_OK


def cmd_make_obs(cfg: dict, blocks) -> int:
    x = aodf.read_field(cfg["field"])
    kind_name = cfg["kind"].lower()
    if kind_name == "masking":
        kind = Masking(cloudlike_mask(x.shape, cfg["missing_ratio"],
                                      derive_seed(cfg["seed"], "obs-mask")))
    elif kind_name == "downsample":
        kind = Downsample(cfg["s_step"], cfg["t_step"])
    elif kind_name == "identity":
        kind = Identity()
    else:
        raise ConfigError(f"kind must be masking, downsample or identity, got {cfg['kind']!r}")
    _write_manifest(cfg["out_dir"], "make-obs", cfg)
    obs = observe_noisy(kind, x.values, cfg["sigma_m"], derive_seed(cfg["seed"], "obs-noise"),
                        cfg["lambda_m"])
    path = save_observation(obs, cfg["out_dir"], cfg["stem"])
    print(f"wrote {kind_name} observation -> {path}")
    return EXIT_OK


def cmd_reconstruct(cfg: dict, blocks) -> int:
    base = cfg["_base"]
    model = load_model(cfg["checkpoint"])
    observations = []
    for block in blocks:
        unknown = sorted(set(block) - OBSERVATION_KEYS)
        if unknown:
            raise ConfigError(f"unknown observation keys: {', '.join(unknown)}")
        try:
            observations.append(observation_from_settings(block, base))
        except KeyError as exc:
            raise ConfigError(f"observation block missing key: {exc.args[0]}") from exc
        except FormatError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    shape = None
    if cfg["n_time"] and cfg["height"] and cfg["width"]:
        shape = (cfg["n_time"], cfg["height"], cfg["width"])
    elif not any(isinstance(o.kind, (Identity, Masking)) for o in observations):
        raise ConfigError("n_time, height and width are required without a full-grid observation")
    schedule, daps = _sampler_parts(cfg)
    if cfg["sampler"] not in ("daps", "dps"):
        raise ConfigError(f"sampler must be daps or dps, got {cfg['sampler']!r}")
    if cfg["n_ensemble"] < 2:
        raise ConfigError("n_ensemble must be >= 2")
    seeds = [member_seed(cfg["seed"], i) for i in range(cfg["n_ensemble"])]
    obs_blocks = [("observation", b) for b in blocks]
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    mode = cfg["sampler"] if observations else f"{cfg['sampler']}-unconditional"
    _write_manifest(cfg["out_dir"], "reconstruct", public,
                    {"mode": mode, "member_seeds": " ".join(map(str, seeds))}, obs_blocks)
    if cfg["sampler"] == "daps":
        result = ensemble_reconstruct(model, observations, schedule, daps, cfg["n_ensemble"],
                                      model.norm, shape, member_seeds=seeds)
    else:
        samples = [dps_reconstruct(model, observations, schedule, cfg["guidance_scale"], s,
                                   model.norm, shape, daps.mask_mode, daps.ambient_masks,
                                   daps.ambient_rate) for s in seeds]
        result = ReconResult.from_samples(samples, seeds)
    result.meta.clear()
    result.meta.update({"sampler": cfg["sampler"], "mode": mode})
    result.save(cfg["out_dir"])
    print(f"{mode}: {cfg['n_ensemble']} members -> {cfg['out_dir']}")
    return EXIT_OK


def cmd_evaluate(cfg: dict, blocks) -> int:
    gen = aodf.read_field(cfg["gen"])
    gt = aodf.read_field(cfg["gt"])
    if gen.shape != gt.shape:
        raise ShapeError(f"gen shape {gen.shape} != gt shape {gt.shape}")
    sigma_x = cfg["sigma_x"] or dataset_std([gt.values])
    out = cfg["out_dir"]
    _write_manifest(out, "evaluate", cfg, {"sigma_x_effective": repr(sigma_x)})
    rows = [("nrmse", cfg["case"], nrmse(gen.values, gt.values, sigma_x)),
            ("melr", cfg["case"], melr(gen.values, gt.values))]
    if gen.spec.n_time > cfg["max_lag"]:
        for name, x in (("gen", gen), ("gt", gt)):
            acf = temporal_acf(x.values, cfg["max_lag"])
            rows += [(f"acf_{name}_lag{lag}", cfg["case"], v)
                     for lag, v in zip(acf.lags, acf.values)]
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "case", "value"])
        for name, case, value in rows:
            wr.writerow([name, case, repr(float(value))])
    for name, x in (("gen", gen), ("gt", gt)):
        specs = [rapsd(frame) for frame in x.values]
        k = specs[0].wavenumbers
        power = np.mean([s.power for s in specs], axis=0)
        with open(out / f"spectrum_{name}.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {RAPSD_CONVENTION}; averaged over frames\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["k", "power"])
            for kk, pp in zip(k, power):
                wr.writerow([int(kk), repr(float(pp))])
    print(f"nrmse={rows[0][2]:.6g} melr={rows[1][2]:.6g} -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_benchmark(cfg: dict, blocks) -> int:
    methods = _csv_list(cfg["methods"], str)
    priors = _csv_list(cfg["priors"], str)
    factors = _csv_list(cfg["factors"], int)
    ratios = _csv_list(cfg["missing_ratios"], float)
    for m in methods:
        if m not in ("daps", "dps"):
            raise ConfigError(f"unknown method {m!r}")
    for p in priors:
        if p not in ("clean", "corrupt"):
            raise ConfigError(f"unknown prior {p!r}")
    if not (methods and priors and factors and ratios):
        raise ConfigError("methods, priors, factors and missing_ratios must be non-empty")
    schedule, daps = _sampler_parts(cfg)
    out = cfg["out_dir"]
    _write_manifest(out, "benchmark", cfg,
                    {"case_seeds": " ".join(str(derive_seed(cfg["seed"], "case-sampler", i))
                                            for i in range(cfg["n_cases"]))})
    models = {p: load_model(cfg[f"{p}_checkpoint"]) for p in priors}
    entries = read_manifest(cfg["test_manifest"])[: cfg["n_cases"]]
    if len(entries) < cfg["n_cases"]:
        raise ConfigError(f"test set has {len(entries)} sequences, need {cfg['n_cases']}")
    fields = [aodf.read_field(e.path) for e in entries]
    sigma_x = dataset_std([x for x, _ in load_dataset(cfg["test_manifest"])])
    # The corrupt prior never saw a complete window in training, so it gets its own mask mode.
    cfgs = {p: replace(daps, mask_mode=cfg["corrupt_mask_mode"]) if p == "corrupt" else daps
            for p in priors}
    results = run_grid(models, fields, methods, factors, ratios, schedule, cfgs,
                       cfg["guidance_scale"], cfg["seed"], sigma_x, cfg["sigma_m"], cfg["lambda_m"])
    write_table(results, out / "benchmark.csv")
    print(f"{len(results)} grid cells -> {out / 'benchmark.csv'}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "make-obs": cmd_make_obs,
    "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate, "benchmark": cmd_benchmark,
}


def _parse_args(argv):
    ap = argparse.ArgumentParser(prog="recon", description="Diffusion-prior field reconstruction")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seed", type=int)
    return ap.parse_args(argv)


def run(argv=None) -> int:
    try:
        args = _parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config: {exc}") from exc
        parsed = parse_config(text, str(args.config))
        raw = dict(parsed.settings)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        blocks = parsed.sections("observation")
        if args.command != "reconstruct" and parsed.blocks:
            raise ConfigError("section blocks are only allowed for reconstruct")
        if len(blocks) != len(parsed.blocks):
            raise ConfigError("only [observation] sections are supported")
        base = args.config.resolve().parent
        cfg = _resolve(SCHEMAS[args.command], raw, base)
        cfg["_base"] = base
        handler = COMMANDS[args.command]
        if args.command != "reconstruct":
            cfg.pop("_base")
        return handler(cfg, blocks)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NonFiniteState as exc:
        print(f"sampler failed: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
