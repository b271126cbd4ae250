"""Command-line front end.

    ctvis-engine [--config PATH] [--seed N] [--out DIR] [--force] [--jobs N] \\
        {generate,train,track,eval,ablate,report} [--set KEY=VALUE ...]

Each command reads a flat JSON config; ``--set`` and the command's path flags
override file values.  Unknown keys are rejected.  Exit codes: 0 success,
1 runtime error, 2 configuration error, 3 missing input artifact.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .association import track_video, video_level_scores, write_trace
from .benchmark import frame_detections, make_benchmark, run_cell
from .errors import EngineError, InvalidConfig, MissingArtifact
from .memory_bank import MemoryBank
from .metrics import EvalReport, TrackPrediction, embedding_margins, tracking_quality, vis_ap
from .pseudo_video import (AugmentConfig, PseudoVideoStream, make_pseudo_video, observe, read_dataset,
                           rle_decode, rle_encode, write_dataset)
from .synthetic import FeatureWorld, StreamConfig, SyntheticStream, WorldConfig
from .trainer import (COMPONENT_ROWS, NEGATIVE_ROWS, Ablation, TrainerConfig, config_hash, load_head,
                      save_run, train_baseline, train_consistent)

logger = logging.getLogger("ctvis_engine")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

STREAM_KEYS = ("clutter_rate", "corrupt_prob", "occlusion_prob", "duplicate_prob")
WORLD_KEYS = ("world_seed",)

TRAIN_DEFAULTS = {
    **{f.name: f.default for f in fields(TrainerConfig)},
    "baseline": False, "memory_bank": True, "momentum": True, "noise": True,
    "data": "",
    **{k: getattr(StreamConfig(), k) for k in STREAM_KEYS},
    **{k: getattr(WorldConfig(), k) for k in WORLD_KEYS},
}

DEFAULTS = {
    "generate": {**{f.name: f.default for f in fields(AugmentConfig)}, "count": 10},
    "train": TRAIN_DEFAULTS,
    "track": {"run": "", "data": "", "match_threshold": 0.5, "conf_threshold": 0.3,
              **{k: getattr(StreamConfig(), k) for k in STREAM_KEYS},
              **{k: getattr(WorldConfig(), k) for k in WORLD_KEYS}},
    "eval": {"tracks": "", "data": ""},
    "ablate": {"seeds": 20, "cells": [], "num_videos": 20, "iterations": 200, "lr": 0.05,
               "clip_length": 8, **{k: getattr(StreamConfig(), k) for k in STREAM_KEYS}},
    "report": {"ablation": "", "eval": ""},
}

ABLATION_CELLS = {
    **{name: (ab, {}) for name, ab in COMPONENT_ROWS.items()},
    **{mode: (Ablation(), {"negative_mode": mode}) for mode in NEGATIVE_ROWS},
}


# -- config -------------------------------------------------------------

def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise InvalidConfig(f"{key} expects a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, int) or (isinstance(value, float) and value.is_integer()):
            return int(value)
    elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    elif isinstance(default, str) and isinstance(value, str):
        return value
    elif isinstance(default, (tuple, list)) and isinstance(value, (list, tuple)):
        return list(value)
    raise InvalidConfig(f"{key} expects {type(default).__name__}, got {value!r}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command: str, file_cfg: dict, overrides: dict) -> dict:
    defaults = DEFAULTS[command]
    merged = {**file_cfg, **overrides}
    unknown = sorted(set(merged) - set(defaults))
    if unknown:
        raise InvalidConfig(f"unknown keys for {command}: {unknown}")
    out = dict(defaults)
    for k, v in merged.items():
        out[k] = _coerce(k, v, defaults[k])
    return out


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"config file {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidConfig("config must be a flat JSON object")
    return data


class OverwriteRefused(InvalidConfig):
    pass


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise OverwriteRefused(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path_str: str, what: str, marker: str | None = None) -> Path:
    if not path_str:
        raise InvalidConfig(f"{what} path is required")
    p = Path(path_str)
    if not p.exists() or (marker and not (p / marker).exists()):
        raise MissingArtifact(f"{what} {p} not found")
    return p


def _stream_config(cfg: dict) -> StreamConfig:
    return StreamConfig(**{k: cfg[k] for k in STREAM_KEYS if k in cfg})


def _world(cfg: dict) -> FeatureWorld:
    return FeatureWorld(WorldConfig(**{k: cfg[k] for k in WORLD_KEYS if k in cfg}))


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------

def cmd_generate(cfg: dict, seed: int, out: Path) -> dict:
    aug = AugmentConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                           for k, v in cfg.items() if k != "count"})
    if cfg["count"] < 0:
        raise InvalidConfig("count must be non-negative")
    videos = [make_pseudo_video(np.random.default_rng([seed, k]), aug) for k in range(cfg["count"])]
    manifest = write_dataset(out, videos, seed, params=cfg)
    logger.info("wrote %d videos to %s", len(videos), out)
    return manifest


def cmd_train(cfg: dict, seed: int, out: Path) -> dict:
    tcfg = TrainerConfig.from_dict({**{f.name: cfg[f.name] for f in fields(TrainerConfig)}, "seed": seed})
    if cfg["data"]:
        _, videos = read_dataset(_need(cfg["data"], "dataset", "manifest.json"))
        stream = PseudoVideoStream(videos, _world(cfg), _stream_config(cfg))
    else:
        stream = SyntheticStream(_world(cfg), _stream_config(cfg))
    if cfg["baseline"]:
        result = train_baseline(tcfg, stream)
        ablation = Ablation(False, False, False)
    else:
        ablation = Ablation(cfg["memory_bank"], cfg["momentum"], cfg["noise"])
        result = train_consistent(tcfg, stream, ablation)
    extra = {k: cfg[k] for k in cfg if k not in asdict(tcfg)}
    save_run(out, tcfg, result, {"final_loss": result.losses[-1] if result.losses else None,
                                 "noise_injections": result.noise_injections,
                                 "ablation": ablation.name}, extra)
    return {"run": str(out), "iterations": len(result.losses)}


def _tracks_payload(bank: MemoryBank, num_frames: int) -> list[dict]:
    scores = video_level_scores(bank)
    out = []
    for tid, track in bank.tracks.items():
        out.append({
            "track_id": tid,
            "scores": [float(s) for s in scores[tid]],
            "masks": {str(t): rle_encode(m) for t, m in sorted(track.masks.items()) if m is not None},
        })
    return out


def cmd_track(cfg: dict, seed: int, out: Path) -> dict:
    run = _need(cfg["run"], "run", "head.json")
    data = _need(cfg["data"], "dataset", "manifest.json")
    head = load_head(run)
    manifest, videos = read_dataset(data)
    world, scfg = _world(cfg), _stream_config(cfg)
    clips = []
    for k, (entry, video) in enumerate(zip(manifest["videos"], videos)):
        clip = observe(video, np.random.default_rng([seed, k]), world, scfg)
        clips.append(clip)
        bank = MemoryBank()
        results = track_video(bank, (frame_detections(fr, head) for fr in clip.frames),
                              match_threshold=cfg["match_threshold"], conf_threshold=cfg["conf_threshold"])
        stem = Path(entry["file"]).stem
        write_trace(results, out / f"{stem}.trace.jsonl")
        gt = [{"frame": fr.frame_index, "detection": i, "gt": g}
              for fr in clip.frames for i, g in enumerate(fr.gt_ids) if g is not None]
        (out / f"{stem}.gt.jsonl").write_text("".join(json.dumps(r) + "\n" for r in gt))
        _dump(out / f"{stem}.tracks.json", _tracks_payload(bank, len(clip)))
    intra, inter = embedding_margins(head, clips)
    summary = {"data": str(data), "run": str(run), "videos": [e["file"] for e in manifest["videos"]],
               "intra_margin": intra, "inter_margin": inter}
    _dump(out / "tracking.json", summary)
    return summary


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_eval(cfg: dict, seed: int, out: Path) -> EvalReport:
    tracks_dir = _need(cfg["tracks"], "tracks", "tracking.json")
    data = _need(cfg["data"] or json.loads((tracks_dir / "tracking.json").read_text())["data"],
                 "dataset", "manifest.json")
    summary = json.loads((tracks_dir / "tracking.json").read_text())
    manifest, videos = read_dataset(data)
    preds, gts = [], []
    switches, accs = 0, []
    for entry, video in zip(manifest["videos"], videos):
        stem = Path(entry["file"]).stem
        tracks_file = tracks_dir / f"{stem}.tracks.json"
        if not tracks_file.exists():
            raise MissingArtifact(f"no tracks for {entry['file']}")
        for g in video.track_ids():
            masks = {t: video.mask(t, g) for t in range(len(video)) if video.frames[t].get(g) is not None}
            gts.append(TrackPrediction(g, masks, video_id=stem, category=video.classes()[g]))
        for tr in json.loads(tracks_file.read_text()):
            masks = {int(t): rle_decode(r) for t, r in tr["masks"].items()}
            preds.append(TrackPrediction(tr["track_id"], masks, np.asarray(tr["scores"]), video_id=stem))
        trace_file = tracks_dir / f"{stem}.trace.jsonl"
        if trace_file.exists():
            gt_map = {(r["frame"], r["detection"]): r["gt"] for r in _read_jsonl(tracks_dir / f"{stem}.gt.jsonl")}
            sw, acc = tracking_quality(_read_jsonl(trace_file), gt_map)
            switches += sw
            accs.append(acc)
    ap = vis_ap(preds, gts) if gts else {}
    nan = float("nan")
    report = EvalReport(
        **ap,
        id_switches=switches,
        assoc_accuracy=float(np.mean(accs)) if accs else 1.0,
        intra_margin=nan if summary.get("intra_margin") is None else summary["intra_margin"],
        inter_margin=nan if summary.get("inter_margin") is None else summary["inter_margin"],
        extra={"videos": len(videos), "tracks": str(tracks_dir)},
    )
    (out / "report.json").write_text(report.to_json() + "\n")
    return report


CELL_FIELDS = ("assoc_accuracy", "id_switches", "reid_assoc_accuracy", "reid_id_switches",
               "intra_margin", "inter_margin", "final_loss")


def _run_one(args) -> dict:
    name, seed, cfg = args
    ablation, overrides = ABLATION_CELLS[name]
    stream = SyntheticStream(config=_stream_config(cfg))
    bench = make_benchmark(stream, seed, cfg["num_videos"])
    tcfg = TrainerConfig(seed=seed, iterations=cfg["iterations"], lr=cfg["lr"],
                         clip_length=cfg["clip_length"], **overrides)
    return run_cell(name, tcfg, ablation, stream, bench).to_dict()


def summarize(runs: list[dict]) -> list[dict]:
    rows = []
    for name in dict.fromkeys(r["name"] for r in runs):
        cell = [r for r in runs if r["name"] == name]
        row = {"cell": name, "seeds": len(cell)}
        for f in CELL_FIELDS:
            vals = np.array([r[f] for r in cell], dtype=float)
            row[f"{f}_mean"] = float(vals.mean())
            row[f"{f}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


def cmd_ablate(cfg: dict, seed: int, out: Path, jobs: int = 1) -> list[dict]:
    cells = cfg["cells"] or list(ABLATION_CELLS)
    bad = [c for c in cells if c not in ABLATION_CELLS]
    if bad:
        raise InvalidConfig(f"unknown ablation cells {bad}; choose from {list(ABLATION_CELLS)}")
    if cfg["seeds"] < 1:
        raise InvalidConfig("seeds must be at least 1")
    seeds = [seed + k for k in range(cfg["seeds"])]
    tasks = [(c, s, cfg) for c in cells for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_one, tasks))
    else:
        runs = [_run_one(t) for t in tasks]
    run_dir = out / "runs"
    run_dir.mkdir(exist_ok=True)
    for r in runs:
        _dump(run_dir / f"{r['name']}__seed{r['seed']}.json", r)
    rows = summarize(runs)
    _dump(out / "summary.json", {"engine_version": __version__, "config_hash": config_hash(cfg),
                                 "seeds": seeds, "cells": rows})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_report(cfg: dict, seed: int, out: Path) -> str:
    if not cfg["ablation"] and not cfg["eval"]:
        raise InvalidConfig("report needs an ablation or eval directory")
    lines = []
    if cfg["ablation"]:
        summary = json.loads((_need(cfg["ablation"], "ablation", "summary.json") / "summary.json").read_text())
        lines += ["| cell | seeds | assoc acc | ID switches | re-id acc |", "|---|---|---|---|---|"]
        for r in summary["cells"]:
            lines.append(f"| {r['cell']} | {r['seeds']} | {r['assoc_accuracy_mean']:.4f} ± {r['assoc_accuracy_std']:.4f}"
                         f" | {r['id_switches_mean']:.2f} ± {r['id_switches_std']:.2f}"
                         f" | {r['reid_assoc_accuracy_mean']:.4f} ± {r['reid_assoc_accuracy_std']:.4f} |")
    if cfg["eval"]:
        rep = json.loads((_need(cfg["eval"], "eval", "report.json") / "report.json").read_text())
        if lines:
            lines.append("")
        lines += ["| metric | value |", "|---|---|"]
        lines += [f"| {k} | {rep[k]} |" for k in ("ap", "ap50", "ap75", "ar1", "ar10", "id_switches",
                                                   "assoc_accuracy", "intra_margin", "inter_margin")]
    text = "\n".join(lines) + "\n"
    (out / "report.md").write_text(text)
    return text


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctvis-engine", description="Memory-bank instance association engine.")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for ablate")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, paths in [("generate", ()), ("train", ("data",)), ("track", ("run", "data")),
                        ("eval", ("tracks", "data")), ("ablate", ()), ("report", ("ablation", "eval"))]:
        sp = sub.add_parser(name)
        for key in paths:
            sp.add_argument(f"--{key}", dest=f"path_{key}")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (value parsed as JSON when possible)")
    return p


def main(argv=None) -> int:
    level = os.environ.get("CTVIS_ENGINE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise InvalidConfig("--jobs must be at least 1")
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise InvalidConfig(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k] = _parse_value(v)
        for k, v in vars(args).items():
            if k.startswith("path_") and v is not None:
                overrides[k[5:]] = v
        cfg = resolve_config(args.command, _load_config_file(args.config), overrides)
        if not args.out:
            raise InvalidConfig("--out is required")
        out = Path(args.out)
        # validate inputs before touching the output directory
        for key, marker in (("run", "head.json"), ("data", "manifest.json"), ("tracks", "tracking.json"),
                            ("ablation", "summary.json"), ("eval", "report.json")):
            if cfg.get(key):
                _need(cfg[key], key, marker)
        out = _prepare_out(out, args.force)
        if args.command == "ablate":
            result = cmd_ablate(cfg, args.seed, out, args.jobs)
        else:
            result = COMMANDS[args.command](cfg, args.seed, out)
        if isinstance(result, EvalReport):
            print(result.to_json())
        elif isinstance(result, str):
            print(result, end="")
        else:
            print(json.dumps(result, indent=2, sort_keys=True, default=str))
        return EXIT_OK
    except MissingArtifact as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except InvalidConfig as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (EngineError, OSError, ValueError, FloatingPointError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "report": cmd_report,
}

if __name__ == "__main__":
    sys.exit(main())
