"""Command-line interface: split, synth, train, eval, explain, embed."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import CONFIG_SCHEMA, parse_config_file, resolve_config
from .data import load_image, load_split, make_kshot_split, save_split, scan_dataset
from .evaluate import evaluate_split, export_embeddings
from .exceptions import FsadError
from .interpret import explain, save_heatmap
from .synthetic import generate_synthetic
from .training import load_checkpoint, train_from_split


def _write_snapshot(target: Path, config_dict: dict, extra: dict | None = None) -> None:
    """Provenance: resolved run configuration next to every artifact."""
    payload = dict(config_dict)
    if extra:
        payload.update(extra)
    if target.suffix:
        path = target.with_name(target.stem + ".run_config.json")
    else:
        target.mkdir(parents=True, exist_ok=True)
        path = target / "run_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _add_config_overrides(parser: argparse.ArgumentParser) -> None:
    grp = parser.add_argument_group("config overrides")
    for key, kind in CONFIG_SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        grp.add_argument(flag, dest=f"cfg_{key}", type=kind, default=None, metavar=key.upper())


def _collect_overrides(args: argparse.Namespace) -> dict:
    return {
        key: getattr(args, f"cfg_{key}")
        for key in CONFIG_SCHEMA
        if getattr(args, f"cfg_{key}", None) is not None
    }


def _load_run_config(args: argparse.Namespace):
    file_values = parse_config_file(args.config) if args.config else {}
    return resolve_config(file_values, _collect_overrides(args))


def _cmd_split(args) -> int:
    index = scan_dataset(args.root, args.category)
    split = make_kshot_split(index, k=args.k, seed=args.seed)
    out = Path(args.out)
    save_split(split, out)
    _write_snapshot(
        out,
        {"root": str(Path(args.root).resolve()), "category": args.category,
         "k": args.k, "seed": args.seed},
    )
    print(f"wrote {out} ({len(split.train_normals)} normals, "
          f"{len(split.train_anomalies)} anomalous shots, {len(split.test_items)} test items)")
    return 0


def _cmd_synth(args) -> int:
    out = Path(args.out)
    index = generate_synthetic(
        out,
        n_normal=args.n_normal,
        n_anomalous=args.n_anomalous,
        size=args.size,
        seed=args.seed,
        category=args.category,
    )
    _write_snapshot(
        out,
        {"n_normal": args.n_normal, "n_anomalous": args.n_anomalous,
         "size": args.size, "seed": args.seed, "category": args.category},
    )
    print(f"wrote {out}: {len(index.normal_train)} train normals, "
          f"{len(index.test_items)} test items")
    return 0


def _lambda_grid(grid: str) -> list[float]:
    try:
        start, stop, step = (float(v) for v in grid.split(":"))
    except ValueError as e:
        raise FsadError(f"--sweep-lambda expects start:stop:step, got {grid!r}") from e
    if step <= 0 or stop < start:
        raise FsadError(f"invalid lambda sweep {grid!r}")
    values = []
    v = start
    while v <= stop + 1e-9:
        values.append(round(v, 10))
        v += step
    return values


def _cmd_train(args) -> int:
    config = _load_run_config(args)
    split = load_split(args.split, root=args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep_lambda:
        rows = []
        for lam in _lambda_grid(args.sweep_lambda):
            cfg = resolve_config(config.to_dict(), {"lambda": lam})
            run_dir = out / f"lambda_{lam:g}"
            result = train_from_split(split, cfg, out_dir=run_dir)
            _write_snapshot(run_dir, cfg.to_dict())
            rows.append((lam, result.best_epoch, result.best_val))
            print(f"lambda={lam:g}: best_val={result.best_val:.6f} "
                  f"at epoch {result.best_epoch}")
        summary = out / "sweep_summary.csv"
        with summary.open("w") as fh:
            fh.write("lambda,best_epoch,best_val\n")
            for lam, epoch, val in rows:
                fh.write(f"{lam:g},{epoch},{val:.8g}\n")
        print(f"wrote {summary}")
        return 0
    result = train_from_split(split, config, out_dir=out)
    _write_snapshot(out, config.to_dict())
    print(f"wrote {result.checkpoint_path} (best epoch {result.best_epoch}, "
          f"val loss {result.best_val:.6f})")
    return 0


def _cmd_eval(args) -> int:
    model, config, _ = load_checkpoint(args.checkpoint)
    split = load_split(args.split, root=args.root)
    report = evaluate_split(
        model,
        split,
        config,
        heat_source=args.heat_source,
        pixel_source=args.pixel_source,
        seed=config.seed,
    )
    out = Path(args.out)
    if out.is_dir() or not out.suffix:
        out = out / "report.json"
    report.save(out)
    print(f"wrote {out}")
    for name in ("image_auroc", "pixel_auroc", "road", "recall_at_1", "map_at_r"):
        value = getattr(report, name)
        print(f"  {name} = {value:.4f}" if value is not None else f"  {name} = n/a")
    return 0


def _cmd_explain(args) -> int:
    model, config, _ = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out) if args.out else None
    for image_path in args.image:
        image_path = Path(image_path)
        image = load_image(image_path, config.image_size)
        hm = explain(
            model,
            image,
            top_h=min(config.top_h, model.head.d_prime),
            sigma=config.sigma,
            heat_source=args.heat_source,
        )
        stem = (out_dir / image_path.stem) if out_dir else image_path.with_suffix("")
        written = save_heatmap(hm, stem, png=not args.no_png)
        _write_snapshot(Path(str(stem) + ".heat"), config.to_dict())
        print(f"wrote {', '.join(str(p) for p in written)}")
    return 0


def _cmd_embed(args) -> int:
    import numpy as np
    import torch

    model, config, _ = load_checkpoint(args.checkpoint)
    split = load_split(args.split, root=args.root)
    groups = {
        "test": list(split.test_items),
        "train": list(split.train_normals) + list(split.train_anomalies),
    }
    groups["all"] = groups["train"] + groups["test"]
    records = groups[args.items]
    if records:
        images = torch.stack(
            [load_image(split.root / r.path, config.image_size) for r in records]
        )
    else:
        images = torch.empty(0, 3, config.image_size, config.image_size)
    labels = np.array([r.label for r in records], dtype=np.int64)
    out = Path(args.out)
    export_embeddings(model, images, labels, [r.path for r in records], out)
    _write_snapshot(out, config.to_dict(), {"items": args.items})
    print(f"wrote {out} ({len(records)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsad",
        description="Few-shot interpretable anomaly detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="build a deterministic k-shot split")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--category", required=True)
    p.add_argument("--k", type=int, required=True, help="anomalous training shots")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output split JSON path")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic defect dataset")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--n-normal", type=int, default=200)
    p.add_argument("--n-anomalous", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--category", default="synthetic")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a split")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--split", required=True)
    p.add_argument("--root", help="dataset root (default: split file directory)")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--sweep-lambda", metavar="START:STOP:STEP",
                   help="train once per lambda value on the inclusive grid")
    _add_config_overrides(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--root")
    p.add_argument("--out", default="report.json")
    p.add_argument("--heat-source", choices=("grad_x_act", "gradient"),
                   default="grad_x_act")
    p.add_argument("--pixel-source", choices=("heatmap", "score_map"),
                   default="heatmap")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("explain", help="write interpretation heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--out", help="output directory (default: next to each image)")
    p.add_argument("--heat-source", choices=("grad_x_act", "gradient"),
                   default="grad_x_act")
    p.add_argument("--no-png", action="store_true")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("embed", help="export pooled embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--root")
    p.add_argument("--out", required=True)
    p.add_argument("--items", choices=("test", "train", "all"), default="test")
    p.set_defaults(func=_cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FsadError, OSError) as e:
        message = " ".join(str(e).split())
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
