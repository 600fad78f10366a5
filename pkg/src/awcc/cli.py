"""Command-line entry point: train / evaluate / predict / probe.

Exit codes: 0 success, 2 configuration or checkpoint problems, 3 data
problems, 4 numerical aborts. All structured output is JSON.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig
from .evaluation import (
    build_query_gallery,
    evaluate_dataset,
    export_density,
    infer_count,
    probe_weather_neighbors,
    render_density,
)
from .exceptions import ConfigError, DataError, NumericalError
from .training import load_checkpoint, run_training


def _resolve_data_path(path_str: str) -> Path:
    path = Path(path_str)
    root = os.environ.get("AWCC_DATA_ROOT")
    if not path.is_absolute() and root:
        candidate = Path(root) / path
        if candidate.exists():
            return candidate
    return path


def _apply_determinism(seed: int):
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def cmd_train(args) -> int:
    config = RunConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.deterministic:
        config.deterministic = True

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        def on_report(report):
            line = report.to_json_line()
            log.write(line + "\n")
            print(line)
        run_training(config, resume=args.resume, on_report=on_report)
    return 0


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    if args.deterministic:
        _apply_determinism(state.master_seed)
    subset = args.subset if args.subset else state.config.subset_key
    report = evaluate_dataset(state.model, _resolve_data_path(args.annotations),
                              subset_key=subset)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_predict(args) -> int:
    state = load_checkpoint(args.checkpoint)
    image_path = _resolve_data_path(args.image)
    if not image_path.exists():
        raise DataError(f"image file not found: {image_path}")
    try:
        with Image.open(image_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # noqa: BLE001
        raise DataError(f"failed to read image {image_path}: {exc}") from exc
    count, density = infer_count(state.model, arr)
    print(count)
    if args.out:
        export_density(density, args.out)
    if args.render:
        render_density(density, args.render)
    return 0


def cmd_probe(args) -> int:
    state = load_checkpoint(args.checkpoint)
    gallery = build_query_gallery(state.model, _resolve_data_path(args.annotations))
    try:
        neighbors = probe_weather_neighbors(gallery, args.query_id, args.topk)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tags = {iid: tag for iid, _, tag in gallery.entries}
    print(json.dumps({
        "query_id": args.query_id,
        "neighbors": [
            {"image_id": iid, "distance": dist, "weather": tags[iid]}
            for iid, dist in neighbors
        ],
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="awcc", description="Weather-adaptive crowd counting toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the optimization loop")
    train.add_argument("--config", required=True, help="flat JSON run configuration")
    train.add_argument("--resume", default=None, help="checkpoint to continue from")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--deterministic", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="MAE/MSE report over an annotation file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--annotations", required=True)
    ev.add_argument("--subset", default=None, choices=["weather"],
                    help="also report clear/adverse splits")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--deterministic", action="store_true")
    ev.set_defaults(func=cmd_evaluate)

    pred = sub.add_parser("predict", help="count a single image")
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--image", required=True)
    pred.add_argument("--out", default=None, help="write the density grid here")
    pred.add_argument("--render", default=None, help="write a colorized raster here")
    pred.add_argument("--seed", type=int, default=None)
    pred.add_argument("--deterministic", action="store_true")
    pred.set_defaults(func=cmd_predict)

    probe = sub.add_parser("probe", help="nearest weather-query neighbors")
    probe.add_argument("--checkpoint", required=True)
    probe.add_argument("--annotations", required=True)
    probe.add_argument("--query-id", required=True)
    probe.add_argument("--topk", type=int, default=4)
    probe.add_argument("--seed", type=int, default=None)
    probe.add_argument("--deterministic", action="store_true")
    probe.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
