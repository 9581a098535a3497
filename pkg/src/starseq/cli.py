"""Command-line entry point: ``starseq <command> [options]``.

Every command writes one primary artifact into ``--out`` plus a
``<artifact>.manifest.json`` recording the effective configuration, its
hash, the seed, the data hash and the build. Failures print a single
``starseq: error: <kind>: <message>`` line to stderr; configuration
problems exit with 2, runtime failures with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, RunConfig
from .data import (
    activity_buckets,
    load_snapshot,
    load_tsv,
    preprocess,
    save_snapshot,
    split_leave_one_out,
    synthetic_cycle,
    synthetic_log_lines,
)
from .metrics import evaluate
from .model import build_model, load_checkpoint, save_checkpoint
from .probes import attention_entropy, bench_runtime, loglog_slope, op_counts, runtime_csv, smoothing_profile
from .train import fit

logger = logging.getLogger("starseq")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_manifest_only(out_dir: Path, name: str, cfg: RunConfig, command: str, data_hash: str | None) -> None:
    manifest = {
        "command": command,
        "artifact": name,
        "build": f"starseq {__version__}",
        "seed": cfg["run"]["seed"],
        "config": cfg.echo(),
        "config_hash": cfg.digest(),
        "data_hash": data_hash,
        "paths": dict(cfg["paths"]),
    }
    (out_dir / f"{name}.manifest.json").write_text(_dump(manifest), encoding="utf-8")


def _write(out_dir: Path, name: str, text: str, cfg: RunConfig, command: str, data_hash: str | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text, encoding="utf-8")
    _write_manifest_only(out_dir, name, cfg, command, data_hash)
    return path


def _require(cfg: RunConfig, key: str, flag: str) -> str:
    value = cfg["paths"][key]
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def _report(cfg: RunConfig, data_hash: str | None, body: dict) -> dict:
    return {"config": cfg.echo(), "config_hash": cfg.digest(), "data_hash": data_hash, **body}


# --- commands -----------------------------------------------------------------


def cmd_prep(cfg: RunConfig, args) -> Path:
    log = load_tsv(_require(cfg, "input", "--input"))
    d = cfg["data"]
    ds = preprocess(log, d["min_user"], d["min_item"], d["rating_threshold"])
    split = split_leave_one_out(ds)
    meta = {
        "records": len(log),
        "malformed": log.malformed,
        "duplicates": log.duplicates,
        "users": ds.num_users,
        "items": ds.num_items,
        "excluded_users": len(split.excluded),
    }
    out = Path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    digest = save_snapshot(out / "dataset.json", ds, split, meta)
    _write_manifest_only(out, "dataset.json", cfg, "prep", digest)
    print(json.dumps(meta, sort_keys=True))
    return out / "dataset.json"


def cmd_synth(cfg: RunConfig, args) -> Path:
    s = cfg["synth"]
    ds = synthetic_cycle(s["users"], s["items"], s["steps"], seed=cfg["run"]["seed"])
    text = "\n".join(synthetic_log_lines(ds)) + "\n"
    return _write(Path(cfg["paths"]["out"]), "synthetic.tsv", text, cfg, "synth")


def _load_data(cfg: RunConfig):
    return load_snapshot(_require(cfg, "data", "--data"))


def cmd_train(cfg: RunConfig, args) -> Path:
    ds, split, digest = _load_data(cfg)
    mcfg = cfg.model_config(ds.num_users, ds.catalog_size)
    tcfg = cfg.train_config()
    model = build_model(mcfg, seed=cfg["run"]["seed"])
    out = Path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8") as log_fh:

        def on_epoch(record: dict) -> None:
            line = json.dumps(record, sort_keys=True)
            log_fh.write(line + "\n")
            log_fh.flush()
            print(line)

        ckpt = fit(model, split, tcfg, on_epoch=on_epoch, meta={"data_hash": digest, "config_hash": cfg.digest()})
    save_checkpoint(out / "checkpoint.zip", ckpt)
    _write_manifest_only(out, "checkpoint.zip", cfg, "train", digest)
    return out / "checkpoint.zip"


def _model_for(cfg: RunConfig, ds, digest: str, required: bool):
    path = cfg["paths"]["checkpoint"]
    if not path:
        if required:
            raise ConfigError("--checkpoint is required")
        mcfg = cfg.model_config(ds.num_users, ds.catalog_size)
        return build_model(mcfg, seed=cfg["run"]["seed"]), None
    ckpt = load_checkpoint(path)
    trained_on = ckpt.meta.get("data_hash")
    if trained_on and trained_on != digest:
        raise ValueError(f"checkpoint was trained on data {trained_on[:12]}, snapshot is {digest[:12]}")
    return ckpt.build(), ckpt


def cmd_eval(cfg: RunConfig, args) -> Path:
    ds, split, digest = _load_data(cfg)
    model, ckpt = _model_for(cfg, ds, digest, required=True)
    e = cfg["eval"]
    buckets = activity_buckets(split) if e["buckets"] and len(split) >= 10 else None
    report = evaluate(
        model,
        split,
        e["mode"],
        ks=cfg.int_list("eval", "ks"),
        buckets=buckets,
        batch_size=e["batch_size"],
        num_negatives=e["num_negatives"] or None,
        seed=cfg["run"]["seed"],
    )
    body = _report(cfg, digest, {"metrics": report.to_dict(), "model": ckpt.config.kind, "checkpoint": ckpt.meta})
    return _write(Path(cfg["paths"]["out"]), "metrics.json", _dump(body), cfg, "eval", digest)


def cmd_probe(cfg: RunConfig, args) -> Path:
    ds, split, digest = _load_data(cfg)
    model, _ = _model_for(cfg, ds, digest, required=False)
    p = cfg["probe"]
    if args.probe == "smoothing":
        prof = smoothing_profile(model, split, p["sample_size"], cfg["run"]["seed"], p["mode"], p["include_diagonal"])
        body = {"probe": "smoothing", "model": model.cfg.kind, "a": prof.a, "num_users": len(prof.uids),
                "zero_norm_pairs": prof.zero_norm_pairs, "include_diagonal": prof.include_diagonal}
    else:
        rep = attention_entropy(model, split, p["sample_size"], cfg["run"]["seed"], p["mode"], block=p["block"] - 1)
        body = {"probe": "entropy", "model": model.cfg.kind, **rep.to_dict()}
    name = f"{args.probe}.json"
    return _write(Path(cfg["paths"]["out"]), name, _dump(_report(cfg, digest, body)), cfg, f"probe {args.probe}", digest)


def cmd_bench(cfg: RunConfig, args) -> Path:
    b = cfg["bench"]
    out = Path(cfg["paths"]["out"])
    if args.bench == "ops":
        ns = [args.n] if args.n else [b["n"]]
        ds_ = [args.d] if args.d else [b["d"]]
        rows = [op_counts(n, d) for n in ns for d in ds_]
        body = rows[0] if len(rows) == 1 else {"grid": rows}
        return _write(out, "ops.json", _dump(_report(cfg, None, body)), cfg, "bench ops")
    grid = cfg.int_list("bench", "n_grid")
    samples = []
    for kind in [k.strip() for k in b["kinds"].split(",") if k.strip()]:
        samples.extend(bench_runtime(kind, grid, b["d"], b["n_blocks"], b["reps"], b["n_heads"], seed=cfg["run"]["seed"]))
    slopes = {}
    for kind in {s.kind for s in samples}:
        sel = [s for s in samples if s.kind == kind]
        if len(sel) >= 2:
            slopes[kind] = loglog_slope([s.n for s in sel], [s.median_us for s in sel])
    out.mkdir(parents=True, exist_ok=True)
    (out / "runtime.csv").write_text(runtime_csv(samples), encoding="utf-8")
    body = {"samples": [vars(s) for s in samples], "loglog_slope": slopes}
    return _write(out, "runtime.json", _dump(_report(cfg, None, body)), cfg, "bench runtime")


# --- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--model", choices=("star", "baseline"))
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="starseq", description="Star-graph sequential recommendation toolkit.")
    parser.add_argument("--version", action="version", version=f"starseq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="preprocess a TSV interaction log into a dataset snapshot")
    _common(p)
    p.add_argument("--input", help="user/item/rating/timestamp TSV")

    p = sub.add_parser("synth", help="write the deterministic-successor synthetic log")
    _common(p)

    for name, helptext in (("train", "train a model"), ("eval", "evaluate a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data", help="dataset snapshot from `prep`")
        if name == "eval":
            p.add_argument("--checkpoint")

    p = sub.add_parser("probe", help="smoothing / entropy analyses")
    p.add_argument("probe", choices=("smoothing", "entropy"))
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="omit to probe a freshly initialized model")

    p = sub.add_parser("bench", help="op-count formulas or forward runtime")
    p.add_argument("bench", choices=("ops", "runtime"))
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    return parser


COMMANDS = {"prep": cmd_prep, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "bench": cmd_bench}


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out:
        overrides.append(f"paths.out={args.out}")
    if args.model:
        overrides.append(f"model.kind={args.model}")
    for key in ("input", "data", "checkpoint"):
        value = getattr(args, key, None)
        if value:
            overrides.append(f"paths.{key}={value}")
    if args.command == "bench":
        if args.n is not None and args.n < 1 or args.d is not None and args.d < 1:
            raise ConfigError("--n and --d must be >= 1")
        if args.d is not None and args.bench == "runtime":
            overrides.append(f"bench.d={args.d}")
    return RunConfig.load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"starseq: error: config: {exc}", file=sys.stderr)
        return 2
    threads = os.environ.get("STARSEQ_THREADS")
    limit = threadpool_limits(limits=int(threads)) if threads and threads.isdigit() else nullcontext()
    try:
        with limit:
            path = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"starseq: error: config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  one-line diagnostics for every runtime failure
        print(f"starseq: error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    logger.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
