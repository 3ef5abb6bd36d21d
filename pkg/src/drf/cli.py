"""``drf`` command line: synth, render, pav, train, eval, ablate, infer, cam.

Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .errors import DataError, DRFError, PoseIOError
from .evaluation import AblationSpec, ablation_csv, cam_heatmap, evaluate, metrics_csv, run_ablation
from .model import EncoderConfig
from .normalize import normalize_sequence
from .pav import MinMaxStats, apply_minmax, raw_pav, to_csv
from .pose_io import LABEL_TO_ID, LABELS, load_directory, load_sequence, save_sequence
from .skeleton_map import RenderConfig, render_sequence, write_pgm
from .synth import DEFAULT_PROFILES, GaitParams, generate_dataset, split_by_subject
from .training import (
    CHECKPOINT_MAGIC,
    TrainConfig,
    load_checkpoint,
    log_to_csv,
    prepare,
    save_checkpoint,
    train,
)

log = logging.getLogger("drf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

_TRAIN_KEYS = {
    "margin": float, "lr": float, "momentum": float, "epochs": int, "p": int, "k": int,
    "seed": int, "guidance": str, "channel_branch": "bool", "spatial_branch": "bool",
    "c_min": float, "guidance_seed": int, "embed_dim": int,
}
_RENDER_KEYS = {"width": int, "height": int, "sigma": float, "span_frac": float, "origin_y_frac": float}
_MODEL_KEYS = {"widths": "ints", "channels": int, "strips": int}


def _convert(raw: str, kind, key: str):
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "on", "off", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "on", "1", "yes")
        if kind == "ints":
            return tuple(int(v) for v in raw.split(","))
        return kind(raw.strip())
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def resolve_config(path: str | None, overrides: list[str]) -> TrainConfig:
    """Build a TrainConfig from an INI file ([train], [render], [model]) plus ``section.key=value`` overrides."""
    parser = configparser.ConfigParser()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)

    schema = {"train": _TRAIN_KEYS, "render": _RENDER_KEYS, "model": _MODEL_KEYS}
    values: dict[str, dict] = {s: {} for s in schema}
    for section in parser.sections():
        if section not in schema:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in schema[section]:
                raise UsageError(f"unknown key {section}.{key}")
            values[section][key] = _convert(raw, schema[section][key], f"{section}.{key}")
    try:
        return TrainConfig(
            **values["train"],
            render=RenderConfig(**values["render"]),
            encoder=EncoderConfig(**values["model"]),
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, argv: list[str], inputs: list[Path], outputs: list[Path], config: dict, seed) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.is_file()},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_split(data_dir: str, split: str):
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    sub = root / split
    files_dir = sub if sub.is_dir() else root
    seqs = load_directory(files_dir)
    if not seqs:
        raise DataError(f"no *.jsonl sequences in {files_dir}")
    return seqs, sorted(files_dir.glob("*.jsonl"))


def _load_stats(path: str) -> MinMaxStats:
    p = Path(path)
    try:
        head = p.read_bytes()[: len(CHECKPOINT_MAGIC)]
    except OSError as exc:
        raise DataError(f"cannot read stats {path}: {exc}") from exc
    if head == CHECKPOINT_MAGIC:
        return load_checkpoint(p).stats
    try:
        return MinMaxStats.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path} is neither a checkpoint nor a stats JSON file ({exc})") from None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    profile = {}
    inputs = []
    if args.profile:
        inputs.append(Path(args.profile))
        try:
            profile = json.loads(Path(args.profile).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read profile {args.profile}: {exc}") from None
    classes = profile.get("profiles", DEFAULT_PROFILES)
    classes = {label: {k: tuple(v) for k, v in ranges.items()} for label, ranges in classes.items()}
    n = int(profile.get("n_per_class", args.n_per_class))
    mode = profile.get("mode", "balanced")
    base = GaitParams(num_frames=int(profile.get("num_frames", 30)), noise=float(profile.get("noise", 1.0)))
    test_fraction = float(profile.get("test_fraction", 1 / 3))
    seqs = generate_dataset(n, classes, seed=args.seed, mode=mode, base=base)
    train_set, test_set = split_by_subject(seqs, test_fraction, seed=args.seed)

    out = Path(args.out)
    outputs = []
    for name, subset in (("train", train_set), ("test", test_set)):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for s in subset:
            f = d / f"{s.subject_id}.jsonl"
            save_sequence(s, f)
            outputs.append(f)
    config = {"profiles": {k: {kk: list(vv) for kk, vv in v.items()} for k, v in classes.items()},
              "n_per_class": n, "mode": mode, "num_frames": base.num_frames, "noise": base.noise,
              "test_fraction": test_fraction}
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out / "manifest.json", "synth", args.argv, inputs, outputs, config, args.seed)
    print(f"wrote {len(train_set)} train and {len(test_set)} test sequences to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = resolve_config(args.config, args.set)
    seq = load_sequence(args.input)
    maps = render_sequence(normalize_sequence(seq, cfg.c_min), cfg.render)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for t, frame in enumerate(maps):
        for ch, name in enumerate(("J", "L")):
            f = out / f"frame{t:04d}_{name}.pgm"
            write_pgm(frame[ch], f)
            outputs.append(f)
    config = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out / "manifest.json", "render", args.argv, [Path(args.input)], outputs, config, None)
    print(f"wrote {len(outputs)} maps to {out}")
    return EXIT_OK


def cmd_pav(args) -> int:
    stats = _load_stats(args.stats)
    seq = load_sequence(args.input)
    v = apply_minmax(raw_pav(normalize_sequence(seq, args.c_min), args.c_min), stats)
    out = Path(args.out)
    out.write_text(to_csv(v), encoding="utf-8")
    config = {"c_min": args.c_min, "stats": stats.to_dict()}
    write_manifest(out.with_name(out.name + ".manifest.json"), "pav", args.argv, [Path(args.input), Path(args.stats)], [out], config, None)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    seqs, files = _load_split(args.data, "train")
    result = train(seqs, cfg)
    ckpt_path = Path(args.out)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, ckpt_path)
    log_path = ckpt_path.with_name(ckpt_path.name + ".log.csv")
    log_path.write_text(log_to_csv(result.log), encoding="utf-8")
    config = cfg.to_dict()
    cfg_path = ckpt_path.with_name(ckpt_path.name + ".config.json")
    cfg_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    inputs = files + ([Path(args.config)] if args.config else [])
    write_manifest(ckpt_path.with_name(ckpt_path.name + ".manifest.json"), "train", args.argv, inputs, [ckpt_path, log_path], config, cfg.seed)
    print(f"final train accuracy {result.checkpoint.meta['final_train_acc']:.4f}; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    seqs, files = _load_split(args.data, "test")
    m = evaluate(ckpt, seqs)
    text = metrics_csv(m)
    sys.stdout.write(text)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(Path(args.ckpt).name + ".metrics.csv")
    out.write_text(text, encoding="utf-8")
    write_manifest(out.with_name(out.name + ".manifest.json"), "eval", args.argv, [Path(args.ckpt), *files], [out], {}, ckpt.meta.get("train_seed"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, args.set)
    try:
        spec = AblationSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read ablation spec {args.spec}: {exc}") from None
    train_seqs, train_files = _load_split(args.data, "train")
    test_seqs, test_files = _load_split(args.data, "test")
    train_x = prepare(train_seqs, cfg.render, cfg.c_min)
    test_x = prepare(test_seqs, cfg.render, cfg.c_min)
    rows = run_ablation(spec, train_x, test_x, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.csv"
    table.write_text(ablation_csv(rows), encoding="utf-8")
    config = {"train": cfg.to_dict(), "spec": [asdict(r) for r in spec.runs]}
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out / "manifest.json", "ablate", args.argv, [Path(args.spec), *train_files, *test_files], [table], config, cfg.seed)
    sys.stdout.write(table.read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    seq = load_sequence(args.input)
    ex = prepare([seq], ckpt.render, ckpt.c_min)[0]
    pav = apply_minmax(ex.raw_pav, ckpt.stats)
    with T.no_grad():
        out = model([ex.maps], pav[None] if model.cfg.guidance == "pav" else None)
    logits = out.logits.data[0]
    result = {
        "label": LABELS[int(np.argmax(logits))],
        "logits": logits.tolist(),
        "pav": pav.tolist(),
        "attention": {
            "channel": out.w_c.data[0, :, 0].tolist(),
            "spatial": out.w_s.data[0, 0, :].tolist(),
        },
    }
    sys.stdout.write(json.dumps(result) + "\n")
    return EXIT_OK


def cmd_cam(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cls = args.cls
    if cls in LABEL_TO_ID:
        class_id = LABEL_TO_ID[cls]
    elif cls.isdigit() and int(cls) < len(LABELS):
        class_id = int(cls)
    else:
        raise UsageError(f"unknown class {cls!r}; use one of {', '.join(LABELS)} or 0-2")
    heat = cam_heatmap(ckpt, load_sequence(args.input), class_id)
    out = Path(args.out)
    write_pgm(heat, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "cam", args.argv, [Path(args.ckpt), Path(args.input)], [out], {"class": class_id}, None)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"drf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="INI file with [train], [render], [model] sections")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")

    p = sub.add_parser("synth", help="generate a labelled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--profile")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=30)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="dump skeleton-map channels as PGM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pav", help="compute a normalized PAV as CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--stats", required=True, help="checkpoint or min-max stats JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--c-min", type=float, default=0.3)
    p.set_defaults(func=cmd_pav)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a guidance/branch ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="classify one sequence (JSON to stdout)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("cam", help="class activation map as PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--class", dest="cls", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cam)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"drf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PoseIOError) as exc:
        print(f"drf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DRFError, OSError, ValueError) as exc:
        print(f"drf: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
