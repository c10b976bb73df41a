"""Command-line entry point: ``halluaudio <command> [options]``.

Exit codes: 0 success, 1 operational error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import kernels
from .audio import DecodeError, mel_filterbank, process_clip, read_wav
from .cache import read_fingerprint, write_spectrogram
from .checkpoint import CheckpointError, load_checkpoint, model_digest
from .config import RunConfigError, cell_name, format_grid, load_config, parse_grid, to_dict
from .episodes import (DatasetError, Entry, load_esc50_index, load_manifest_index, make_split, read_index,
                       read_split, write_index, write_split)
from .evaluation import (AccuracySummary, accuracy_summary, embed_clips, evaluate, export_results,
                         frequency_importance, gain_table, write_importance_csv)
from .fewshot import make_masks
from .gradcheck import run_gradcheck
from .training import TrainingDiverged, load_clips, train

log = logging.getLogger("halluaudio")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG = 0, 1, 2


class ConfigFailure(Exception):
    """Raised for problems that must stop a command before it writes anything."""


# ----------------------------------------------------------------------- prepare


def cmd_prepare(cfg) -> int:
    cfg.validate(need_data=True)
    if cfg.kind == "esc50":
        index = load_esc50_index(cfg.meta_path, cfg.audio_root)
    else:
        index = load_manifest_index(cfg.meta_path, cfg.data_root)
    spec = cfg.spectrogram
    fp = spec.fingerprint()
    fb = mel_filterbank(spec)
    cfg.cache_dir.mkdir(parents=True, exist_ok=True)

    def work(e: Entry):
        target = cfg.cache_dir / f"{e.clip_id}.halu"
        if read_fingerprint(target) == fp:
            return e, target, "hit", None
        try:
            write_spectrogram(target, process_clip(read_wav(e.path), spec, fb))
        except (OSError, DecodeError, ValueError) as exc:
            return e, target, "failed", str(exc)
        return e, target, "computed", None

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, index.entries))
    else:
        results = [work(e) for e in index.entries]

    failures = [(e.path, msg) for e, _, status, msg in results if status == "failed"]
    counts = {s: sum(r[2] == s for r in results) for s in ("computed", "hit", "failed")}
    cached = type(index)([replace(e, path=str(t.resolve())) for e, t, status, _ in results], index.classes)
    write_index(cached, cfg.index_path)
    if cfg.split_file and Path(cfg.split_file).is_file():
        split = read_split(cfg.split_file)
    else:
        split = make_split(index, cfg.n_novel, cfg.split_seed)
        write_split(split, cfg.split_path)
    (cfg.out_dir / "prepare.json").write_text(json.dumps(
        {"fingerprint": fp.hex(), "shape": list(spec.shape), "clips": len(index), "classes": index.n_classes,
         **counts}, indent=2, sort_keys=True) + "\n")
    print(f"prepared {len(index)} clips ({counts['computed']} computed, {counts['hit']} cached, "
          f"{counts['failed']} failed); {index.n_classes} classes, split "
          f"{len(split.base_classes)} base / {len(split.novel_classes)} novel")
    for path, msg in failures:
        print(f"  FAILED {path}: {msg}", file=sys.stderr)
    return EXIT_ERROR if failures else EXIT_OK


def _load_prepared(cfg):
    if not cfg.index_path.is_file():
        raise ConfigFailure(f"no prepared index at {cfg.index_path}; run 'prepare' first")
    if not cfg.split_path.is_file():
        raise ConfigFailure(f"no split file at {cfg.split_path}")
    index = read_index(cfg.index_path)
    split = read_split(cfg.split_path)
    prep = cfg.out_dir / "prepare.json"
    fp = json.loads(prep.read_text())["fingerprint"] if prep.is_file() else cfg.spectrogram.fingerprint().hex()
    if fp != cfg.spectrogram.fingerprint().hex():
        raise ConfigFailure("spectrogram config differs from the prepared cache; re-run 'prepare'")
    return index, split, fp


# ------------------------------------------------------------------------- train


def cmd_train(cfg, out_dir=None) -> int:
    cfg.validate()
    index, split, fp = _load_prepared(cfg)
    out_dir = Path(out_dir or cfg.out_dir / f"train_{cfg.mask_mode}")
    t0 = time.perf_counter()
    try:
        bank, history = train(cfg, index, split, out_dir, input_fingerprint=fp)
    except TrainingDiverged as exc:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "diverged.json").write_text(json.dumps(exc.diagnostic, indent=2) + "\n")
        print(f"training aborted: {exc} (details in {out_dir / 'diverged.json'})", file=sys.stderr)
        return EXIT_ERROR
    print(f"trained {cfg.mask_mode} model: {bank.param_count()} parameters, "
          f"final loss {history[-1].loss:.4f}, {time.perf_counter() - t0:.0f}s -> {out_dir / 'model.ckpt'}")
    return EXIT_OK


# -------------------------------------------------------------------------- eval


def _check_cell(novel, w, k):
    if w > len(novel):
        raise ConfigFailure(f"cell {w}-way needs {w} novel classes, split has {len(novel)}")
    short = [c for c, v in novel.items() if len(v) < k + 1]
    if short:
        raise ConfigFailure(f"cell {k}-shot needs {k + 1} clips per novel class; classes {short[:5]} have fewer")


def _load_model(cfg, checkpoint, fp):
    try:
        bank, masks, meta = load_checkpoint(checkpoint)
    except (OSError, CheckpointError) as exc:
        raise ConfigFailure(f"cannot load checkpoint: {exc}") from None
    expected = model_digest(cfg.backbone, make_masks(cfg.mask_mode, cfg.spectrogram.shape, cfg.split_band), fp)
    if meta.get("model_digest") != expected:
        raise ConfigFailure(f"checkpoint {checkpoint} does not match the configured model "
                            f"(mask mode {cfg.mask_mode}, backbone {cfg.backbone.channels}, cache {fp}); refusing")
    return bank, masks, meta


def read_summary(path) -> dict[str, AccuracySummary]:
    doc = json.loads(Path(path).read_text())
    return {cell: AccuracySummary(v["mean"], v["ci95"], v["episodes"]) for cell, v in doc["cells"].items()}


def cmd_eval(cfg, checkpoint, compare=()) -> int:
    cfg.validate()
    index, split, fp = _load_prepared(cfg)
    novel = index.by_class(split.novel_classes)
    for w, k in cfg.grid:
        _check_cell(novel, w, k)
    bank, masks, meta = _load_model(cfg, checkpoint, fp)
    others = {name: read_summary(p) for name, p in compare}

    t0 = time.perf_counter()
    clips = load_clips(index, [c for v in novel.values() for c in v])
    table = embed_clips(bank, masks, clips, threads=cfg.threads)
    out = cfg.out_dir / f"eval_{cfg.mask_mode}_{cfg.distance}"
    cells = {}
    for w, k in cfg.grid:
        t1 = time.perf_counter()
        records = evaluate(table, novel, cfg.episode_spec(w, k), cfg.seed, cfg.squared, cfg.threads)
        s = accuracy_summary(records, per=cfg.ci)
        cells[cell_name(w, k)] = s
        export_results(records, s, out / cell_name(w, k), {
            "n_way": w, "k_shot": k, "repetitions": cfg.repetitions, "seed": cfg.seed,
            "mask_mode": cfg.mask_mode, "distance": cfg.distance, "ci": cfg.ci,
            "checkpoint": str(checkpoint), "spectrogram_fingerprint": fp,
            "split": {"seed": split.seed, "novel": list(split.novel_classes)},
            "runtime_seconds": round(time.perf_counter() - t1, 3),
        })
        print(f"{cfg.mask_mode:>9} {w:>2}-way {k}-shot: {s}  ({s.episodes} episodes)")
    (out / "summary.json").write_text(json.dumps({
        "schema": 1, "mask_mode": cfg.mask_mode, "distance": cfg.distance, "seed": cfg.seed,
        "grid": format_grid(cfg.grid), "repetitions": cfg.repetitions, "spectrogram_fingerprint": fp,
        "checkpoint_meta": meta, "config": to_dict(cfg),
        "cells": {c: s.to_dict() for c, s in cells.items()},
        "runtime_seconds": round(time.perf_counter() - t0, 3),
    }, indent=2, sort_keys=True) + "\n")
    if others:
        name = {"none": "baseline", "frequency": "freq.", "time": "time"}[cfg.mask_mode]
        runs = {**others, name: cells}
        base = "baseline" if "baseline" in runs else next(iter(runs))
        print(gain_table({n: {c: r[c] for c in cells} for n, r in runs.items()}, base).format())
    return EXIT_OK


def cmd_ablate_time(cfg, compare=()) -> int:
    cfg = replace(cfg, mask_mode="time")
    rc = cmd_train(cfg)
    if rc != EXIT_OK:
        return rc
    return cmd_eval(cfg, cfg.out_dir / "train_time" / "model.ckpt", compare)


# -------------------------------------------------------------------- importance


def cmd_importance(cfg, checkpoint, classes=None) -> int:
    cfg.validate()
    index, split, fp = _load_prepared(cfg)
    if cfg.mask_mode != "frequency":
        raise ConfigFailure("importance is defined for frequency-concept models only")
    bank, masks, _ = _load_model(cfg, checkpoint, fp)
    if masks.axis != "frequency":
        raise ConfigFailure("checkpoint does not hold a frequency-concept model")
    novel = index.by_class(split.novel_classes)
    _check_cell(novel, *cfg.importance_cell)
    chosen = []
    for item in classes or []:
        cid = int(item) if item.isdigit() else (index.classes.index(item) if item in index.classes else -1)
        if cid not in novel:
            raise ConfigFailure(f"class {item!r} is not a novel class of this split")
        chosen.append(cid)
    clips = load_clips(index, [c for v in novel.values() for c in v])
    table = embed_clips(bank, masks, clips, threads=cfg.threads)
    counts = frequency_importance(table, novel, masks, chosen or None, index.classes,
                                  cfg.episode_spec(*cfg.importance_cell), cfg.seed, cfg.squared, cfg.threads)
    out = cfg.out_dir / "importance.csv"
    write_importance_csv(counts, out)
    for c in counts:
        print(f"{c.label:<24} Q_high={c.q_high:<6} Q_low={c.q_low:<6} ratio={c.ratio_text()}")
    print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------- gradcheck


def cmd_gradcheck(seed: int = 0) -> int:
    report = run_gradcheck(seed)
    print("\n".join(report.lines()))
    print(f"kernel backend: {kernels.BACKEND}")
    if not report.passed:
        print(f"gradcheck FAILED: {', '.join(report.failures)}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# --------------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="run seed (initialisation, episodes)")
    common.add_argument("--threads", type=int, help="worker threads (training is bitwise-deterministic at 1)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--mask-mode", choices=["none", "frequency", "time"])
    common.add_argument("--split-file", help="base/novel split file to use")
    common.add_argument("--distance", choices=["euclidean", "squared"])
    common.add_argument("-v", "--verbose", action="store_true")

    evalopts = argparse.ArgumentParser(add_help=False)
    evalopts.add_argument("--grid", help="evaluation cells, e.g. 5x1,5x5,10x1,10x5")
    evalopts.add_argument("--repetitions", type=int, help="support resamplings per query")
    evalopts.add_argument("--compare", action="append", default=[], metavar="NAME=SUMMARY",
                          help="other run's summary.json for a gain table (repeatable)")

    p = argparse.ArgumentParser(prog="halluaudio", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="build spectrogram cache, index and split")
    sub.add_parser("train", parents=[common], help="episodic training")
    e = sub.add_parser("eval", parents=[common, evalopts], help="query-centric test protocol")
    e.add_argument("--checkpoint", required=True)
    sub.add_parser("ablate-time", parents=[common, evalopts], help="train and evaluate the time-concept model")
    i = sub.add_parser("importance", parents=[common, evalopts], help="high/low frequency importance per class")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--classes", help="comma-separated class ids or labels (default: all novel)")
    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--seed", type=int, default=0)
    return p


def _config_from_args(args):
    return load_config(
        args.config,
        seed=args.seed, threads=args.threads, out=args.out, mask_mode=args.mask_mode,
        split_file=args.split_file, distance=args.distance,
        grid=parse_grid(args.grid) if getattr(args, "grid", None) else None,
        repetitions=getattr(args, "repetitions", None),
    )


def _parse_compare(items):
    out = []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not Path(path).is_file():
            raise ConfigFailure(f"--compare expects NAME=path/to/summary.json, got {item!r}")
        out.append((name, path))
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "gradcheck":
        with threadpool_limits(1):
            return cmd_gradcheck(args.seed)
    try:
        cfg = _config_from_args(args).validate()
        compare = _parse_compare(getattr(args, "compare", []))
        with threadpool_limits(cfg.threads if args.command in ("prepare", "train", "ablate-time") else 1):
            if args.command == "prepare":
                return cmd_prepare(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint, compare)
            if args.command == "ablate-time":
                return cmd_ablate_time(cfg, compare)
            if args.command == "importance":
                classes = [c.strip() for c in args.classes.split(",") if c.strip()] if args.classes else None
                return cmd_importance(cfg, args.checkpoint, classes)
    except (RunConfigError, ConfigFailure) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
