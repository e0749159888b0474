"""Command-line interface: ``viosfm {simulate,reconstruct,evaluate,sweep-batch-size}``.

Configuration is a JSON object with flat dotted keys (nested objects are
flattened), for example ``{"seed": 3, "batch.batch_size_k": 25}``.
Precedence is flags > config file > defaults; unknown keys are rejected.
Every command writes the fully resolved configuration to ``run_config.json``
in its output directory, and feeding that file back with ``--config``
reproduces the run.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io as _io
import json
import logging
import sys
import time
from pathlib import Path

from .bundle_adjust import BaConfig
from .geometry import GeometryError
from .io import DataFormatError, FileDataset, MatchCountRetrieval, ensure_dir, read_poses, write_dataset, write_ply, write_poses
from .reconstruction import BatchConfig, RegistrationError, reconstruct
from .simulation import EvaluationError, GenerationError, ScenarioConfig, evaluate_ate, generate
from .verification import PairingConfig

log = logging.getLogger("viosfm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PIPELINE = 0, 1, 2, 3

_SECTIONS = {"scenario": ScenarioConfig, "pairing": PairingConfig, "batch": BatchConfig, "ba": BaConfig}


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    """Flat dotted-key defaults for every tunable."""
    cfg = {"seed": 0}
    for name, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if name == "scenario" and f.name == "seed":
                continue
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            cfg[f"{name}.{f.name}"] = default
    cfg.update(
        {
            "retrieval.exclude_window": 0,
            "retrieval.min_shared": 1,
            "verification.screening": True,
            "evaluate.with_scale": True,
            "sweep.batch_sizes": [10, 25, 50, 100, 200],
            "dataset": None,
        }
    )
    return cfg


def _flatten(obj, prefix=""):
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _key_line(text, key):
    for needle in (f'"{key}"', f'"{key.split(".")[-1]}"'):
        for i, line in enumerate(text.splitlines(), 1):
            if needle in line:
                return i
    return None


def _check_value(key, value, default, where=""):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}field {key!r}: expected {type(default).__name__}, got {value!r}")
    return value


def load_config(path=None, overrides=None) -> dict:
    """Merge defaults, an optional JSON file and explicit overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        for key, value in _flatten(raw).items():
            line = _key_line(text, key)
            where = f"{path}:{line}: " if line else f"{path}: "
            if key not in cfg:
                raise ConfigError(f"{where}unknown field {key!r}")
            cfg[key] = _check_value(key, value, cfg[key], where)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in cfg:
            raise ConfigError(f"unknown field {key!r}")
        cfg[key] = _check_value(key, value, cfg[key])
    return cfg


def section(cfg: dict, name: str):
    """Instantiate the dataclass of one config section, reporting the offending field."""
    cls = _SECTIONS[name]
    kwargs = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith(name + ".")}
    if name == "scenario":
        kwargs["seed"] = cfg["seed"]
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def _echo(cfg: dict, out: Path) -> None:
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out) -> dict:
    scen = section(cfg, "scenario")
    ds = generate(scen)
    out = ensure_dir(out)
    pairs = write_dataset(ds, out)
    echo = dict(cfg, dataset=None)
    _echo(echo, out)
    summary = {
        "frames": len(ds),
        "points": int(len(ds.points)),
        "pairs": len(pairs),
        "doppelganger_pairs": len(ds.doppelganger_pairs),
    }
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return summary


def _configs(cfg):
    return section(cfg, "pairing"), section(cfg, "batch"), section(cfg, "ba")


def _run_reconstruction(ds, cfg, pairing, batch, ba):
    retrieval = MatchCountRetrieval(ds, cfg["retrieval.exclude_window"], cfg["retrieval.min_shared"])
    return reconstruct(
        ds, pairing, batch, ba, retrieval=retrieval, seed=cfg["seed"], screening=cfg["verification.screening"]
    )


def _ate_or_none(est, ref, with_scale):
    try:
        return evaluate_ate(est, ref, with_scale).to_dict()
    except EvaluationError:
        return None


def cmd_reconstruct(cfg: dict, dataset_dir, out) -> dict:
    pairing, batch, ba = _configs(cfg)
    ds = FileDataset(dataset_dir)
    model, rep = _run_reconstruction(ds, cfg, pairing, batch, ba)
    out = ensure_dir(out)
    write_poses(out / "poses.csv", model.poses)
    write_ply(out / "points.ply", model)
    report = rep.to_dict()
    report["num_tracks"] = len(model.tracks)
    report["num_observations"] = model.num_observations()
    report["ate"] = _ate_or_none(model.poses, ds.gt_poses, cfg["evaluate.with_scale"])
    report["vio_ate"] = _ate_or_none(ds.vio, ds.gt_poses, cfg["evaluate.with_scale"])
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _echo(dict(cfg, dataset=str(dataset_dir)), out)
    msg = f"frames={len(model.poses)} tracks={len(model.tracks)} batches={rep.num_ba_invocations}"
    if report["ate"]:
        msg += f" ate_rmse={report['ate']['rmse']:.6f}"
    if report["vio_ate"]:
        msg += f" vio_ate_rmse={report['vio_ate']['rmse']:.6f}"
    print(msg)
    return report


def cmd_evaluate(cfg: dict, estimated, reference, out=None) -> dict:
    res = evaluate_ate(read_poses(estimated), read_poses(reference), cfg["evaluate.with_scale"])
    d = res.to_dict()
    print(f"rmse {d['rmse']:.9f}")
    print(f"median {d['median']:.9f}")
    print(json.dumps(d, sort_keys=True))
    if out is not None:
        out = ensure_dir(out)
        (out / "ate.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        _echo(cfg, out)
    return d


def cmd_sweep(cfg: dict, dataset_dir, out) -> list[dict]:
    pairing, _, ba = _configs(cfg)
    ds = FileDataset(dataset_dir)
    rows = []
    for k in cfg["sweep.batch_sizes"]:
        batch = section(dict(cfg, **{"batch.batch_size_k": int(k)}), "batch")
        t0 = time.perf_counter()
        model, rep = _run_reconstruction(ds, cfg, pairing, batch, ba)
        wall = time.perf_counter() - t0
        ate = evaluate_ate(model.poses, ds.gt_poses, cfg["evaluate.with_scale"])
        rows.append({"k": int(k), "rmse": ate.rmse, "wall_time": wall, "batches": rep.num_ba_invocations})
        print(f"k={k} rmse={ate.rmse:.6f} wall_time={wall:.2f}s", flush=True)
    out = ensure_dir(out)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "rmse", "wall_time"])
    for r in rows:
        w.writerow([r["k"], repr(r["rmse"]), f"{r['wall_time']:.6f}"])
    (out / "sweep.csv").write_text(buf.getvalue())
    _echo(dict(cfg, dataset=str(dataset_dir)), out)
    return rows


# ---------------------------------------------------------------------------
# argument parsing


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with flat dotted keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--batch-size", type=int, dest="batch_size")
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--t-ee", type=float, dest="t_ee")
    common.add_argument("--n1", type=int)
    common.add_argument("--n2", type=int)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="viosfm", description="VIO-aided batched structure from motion")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset directory")
    s.add_argument("--out", required=True)
    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct a dataset directory")
    r.add_argument("dataset", nargs="?")
    r.add_argument("--out", required=True)
    e = sub.add_parser("evaluate", parents=[common], help="ATE between two pose CSV files")
    e.add_argument("estimated")
    e.add_argument("reference")
    e.add_argument("--no-scale", action="store_true", help="rigid instead of similarity alignment")
    e.add_argument("--out")
    w = sub.add_parser("sweep-batch-size", parents=[common], help="reconstruct over several batch sizes")
    w.add_argument("dataset", nargs="?")
    w.add_argument("--batch-sizes", help="comma separated list, e.g. 10,25,50")
    w.add_argument("--out", required=True)
    return p


def _overrides(args) -> dict:
    ov = _parse_set(args.set)
    flags = {
        "seed": args.seed,
        "batch.batch_size_k": args.batch_size,
        "ba.alpha": args.alpha,
        "ba.beta": args.beta,
        "pairing.t_ee": args.t_ee,
        "pairing.n1_temporal": args.n1,
        "pairing.n2_retrieval": args.n2,
    }
    if getattr(args, "no_scale", False):
        flags["evaluate.with_scale"] = False
    if getattr(args, "batch_sizes", None):
        try:
            flags["sweep.batch_sizes"] = [int(v) for v in args.batch_sizes.split(",")]
        except ValueError:
            raise ConfigError(f"--batch-sizes: expected comma separated integers, got {args.batch_sizes!r}") from None
    if getattr(args, "dataset", None):
        flags["dataset"] = args.dataset
    ov.update({k: v for k, v in flags.items() if v is not None})
    return ov


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.command in ("reconstruct", "sweep-batch-size"):
            if not cfg["dataset"]:
                raise ConfigError("no dataset directory given (positional argument or 'dataset' key)")
            run = cmd_reconstruct if args.command == "reconstruct" else cmd_sweep
            run(cfg, cfg["dataset"], args.out)
        else:
            cmd_evaluate(cfg, args.estimated, args.reference, args.out)
    except (ConfigError, GenerationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RegistrationError, EvaluationError, GeometryError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
