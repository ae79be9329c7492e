"""Command-line entry point: ingest, synth, train, eval, sweep, report.

Every command that writes to an output directory also writes ``manifest.json``
there: config digest, seed, sha256 of every artifact, status and the only
timestamp the run produces. Failures print one JSON line prefixed with
``error:`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

from .data import (
    Normalizer,
    format_cmapss,
    load_cmapss,
    parse_cmapss,
    save_window_cache,
    stack_windows,
    synth_generate,
)
from .evaluate import QuantileEvalReport, emit_blob_data, evaluate, quantile_table, run_seed_sweep
from .train import Checkpoint, TrainConfig, load_dataset, train, train_targets

LOG_ENV = "SSMRUL_LOG_LEVEL"
SYNTH_SUBSET = "SYN"

log = logging.getLogger("ssmrul")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(base: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; every path must already exist in ``base``."""
    out = json.loads(json.dumps(base))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise CliError(f"override {item!r} is not of the form key=value")
        node = out
        parts = key.split(".")
        for i, part in enumerate(parts):
            if not isinstance(node, dict) or part not in node:
                raise CliError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
            if i < len(parts) - 1:
                node = node[part]
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path: str | None, overrides: list[str]) -> TrainConfig:
    base = TrainConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"malformed config {p}: {exc}") from None
        if not isinstance(user, dict):
            raise CliError(f"malformed config {p}: top level must be an object")
        base = TrainConfig.from_dict(user).to_dict()
    try:
        return TrainConfig.from_dict(apply_overrides(base, overrides))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None


# ---------------------------------------------------------------------------
# manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, artifacts: list[Path], cfg: TrainConfig | None, status: str, error: str | None = None, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "status": status,
        "config_digest": cfg.digest() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "artifacts": {str(p.relative_to(out)): sha256_file(p) for p in sorted(artifacts) if p.is_file()},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        **(extra or {}),
    }
    if error is not None:
        manifest["error"] = error
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _write_config(out: Path, cfg: TrainConfig) -> Path:
    p = out / "config.json"
    p.write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    return p


# ---------------------------------------------------------------------------
# commands; each returns (artifacts, config or None, extra manifest fields)


def cmd_ingest(args, out: Path):
    raw = Path(args.raw)
    cfg = load_config(args.config, args.set)
    if raw.is_dir():
        train_cycles, _ = load_cmapss(raw, args.subset or cfg.data.subset)
    elif raw.is_file():
        with open(raw) as f:
            train_cycles = parse_cmapss(f)
    else:
        raise FileNotFoundError(f"raw input not found: {raw}")
    norm = Normalizer.fit(train_cycles)
    L = cfg.model.window_len
    windows = stack_windows([norm.apply_cycle(c) for c in train_cycles], L, train_targets(train_cycles, cfg.data.rul_cap))
    cache = out / "windows.npz"
    save_window_cache(cache, windows, L, norm, {"source": raw.name, "n_units": len(train_cycles)})
    log.info("wrote %d windows to %s", len(windows), cache)
    return [cache], cfg, {}


def cmd_synth(args, out: Path):
    cfg = load_config(args.config, args.set)
    d = cfg.data
    train_cycles, test_cycles = synth_generate(d.n_units, d.noise_scale, d.seed, d.n_test_units, slope_jitter=d.slope_jitter)
    paths = [out / f"{k}_{SYNTH_SUBSET}.txt" for k in ("train", "test", "RUL")]
    paths[0].write_text(format_cmapss(train_cycles))
    paths[1].write_text(format_cmapss(test_cycles))
    paths[2].write_text("".join(f"{int(c.rul[-1])}\n" for c in test_cycles))
    return paths, cfg, {}


def cmd_train(args, out: Path):
    cfg = load_config(args.config, args.set)
    train_cycles, _ = load_dataset(cfg.data)
    ckpt, history = train(cfg, train_cycles)
    ck = out / "checkpoint.ckpt"
    ckpt.save(ck)
    hist = out / "history.json"
    hist.write_text(json.dumps(history, sort_keys=True) + "\n")
    return [ck, hist, _write_config(out, cfg)], cfg, {}


def cmd_eval(args, out: Path):
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    ckpt = Checkpoint.load(ck)
    cfg = load_config(args.config, args.set) if args.config or args.set else ckpt.config
    _, test_cycles = load_dataset(cfg.data)
    report = evaluate(ckpt, test_cycles, cfg.eval_taus, cfg.eval_mode)
    return report.write(out), ckpt.config, {"checkpoint_sha256": sha256_file(ck)}


def parse_seeds(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"seeds must be comma separated integers, got {raw!r}") from None
    if not seeds:
        raise CliError("need at least one seed")
    return seeds


def cmd_sweep(args, out: Path):
    cfg = load_config(args.config, args.set)
    seeds = parse_seeds(args.seeds)
    mean, per_seed = run_seed_sweep(cfg, seeds, workers=args.workers)
    artifacts = mean.write(out)
    for seed, rep in zip(seeds, per_seed):
        artifacts += rep.write(out / f"seed_{seed}")
    artifacts.append(_write_config(out, cfg))
    return artifacts, cfg, {"seeds": seeds}


def cmd_report(args, out: Path):
    reports = [QuantileEvalReport.load(d) for d in args.dirs]
    table = out / "quantile_rmse.csv"
    table.write_text(quantile_table(reports))
    blob = out / "blob.csv"
    blob.write_text(emit_blob_data(reports))
    artifacts = [table, blob]
    for i, (d, r) in enumerate(zip(args.dirs, reports)):
        dest = out / "intervals" / f"{i:02d}_{r.name}"
        dest.mkdir(parents=True, exist_ok=True)
        for src in sorted((Path(d) / "intervals").glob("unit_*.csv")):
            shutil.copyfile(src, dest / src.name)
            artifacts.append(dest / src.name)
    return artifacts, None, {"sources": [str(d) for d in args.dirs]}


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


class Parser(argparse.ArgumentParser):
    """Usage errors follow the same single-line format as runtime errors."""

    def error(self, message):
        print(_error_line(None, CliError(message)), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="ssmrul", description="State space models for quantile RUL estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("-o", "--output", required=True, help="output directory")
        if config:
            p.add_argument("-c", "--config", help="JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")

    p = sub.add_parser("ingest", help="parse C-MAPSS files into a window cache")
    p.add_argument("raw", help="C-MAPSS directory or a single train file")
    p.add_argument("--subset", help="subset name, e.g. FD001")
    common(p)
    common(sub.add_parser("synth", help="write a synthetic dataset in C-MAPSS format"))
    common(sub.add_parser("train", help="train one model"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test set")
    p.add_argument("--checkpoint", required=True)
    common(p)
    p = sub.add_parser("sweep", help="train and evaluate over several seeds")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--workers", type=int, default=1)
    common(p)
    p = sub.add_parser("report", help="summarise report directories")
    p.add_argument("dirs", nargs="+")
    common(p, config=False)
    return parser


def _error_line(command: str | None, exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    return "error: " + json.dumps({"command": command, "type": type(exc).__name__, "message": msg}, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    out = Path(args.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        artifacts, cfg, extra = COMMANDS[args.command](args, out)
    except Exception as exc:
        print(_error_line(args.command, exc), file=sys.stderr)
        try:
            write_manifest(out, args.command, [], None, "failed", f"{type(exc).__name__}: {exc}")
        except OSError:
            pass
        return 1
    write_manifest(out, args.command, artifacts, cfg, "ok", extra=extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
