"""Command-line pipeline: extract, fit, score, evaluate, benchmark, report.

The staged commands pass artifacts through the documented file formats
(images -> FPAK packs, packs -> PBNK bank, bank + packs -> scores and anomaly
maps, scores + ground truth -> metrics JSON); `benchmark` runs the same code
path fully in memory over a (category, k, seed) grid and `report` renders the
collected metrics.

Exit codes: 0 success, 1 partial failure (some grid cells failed), 2
configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import cv2
import numpy as np

from . import augment as aug
from .bank import load_bank, save_bank, score_image
from .datasets import index_dataset, load_image, load_mask, sample_kshot
from .errors import ConfigError, FormatError, IndexingError, PatchbankError
from .extractor import (
    ExtractorSpec,
    FeaturePack,
    extract_image,
    extractor_fingerprint,
    read_pack,
    write_pack,
)
from .features import merge_layers, neighborhood_pool
from .metrics import aggregate_report, hproc, image_auroc, pixel_aupr
from .pipeline import (
    BenchmarkConfig,
    atomic_write_bytes,
    atomic_write_text,
    config_from_file,
    fit_bank_from_grids,
    run_benchmark,
)
from .reporting import fmt, metrics_csv_text, summary_json_text, write_report


def _parse_int_list(text: str) -> tuple[int, ...]:
    """Accepts '1,5,10' and '0..4' range shorthand."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def _spec_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", default="pixels:4", help=".onnx path or pixels[:stride]")
    parser.add_argument("--taps", default="", help="comma-separated model output names")
    parser.add_argument("--input-size", type=int, default=224, dest="native_input_size",
                        help="native input side in pixels")
    parser.add_argument("--input-scale", type=float, default=1.0, dest="scale")
    parser.add_argument("--norm-mean", default=None, help="comma-separated per-channel mean")
    parser.add_argument("--norm-std", default=None, help="comma-separated per-channel std")


def _spec_from_args(args) -> ExtractorSpec:
    kwargs = {}
    if args.norm_mean:
        kwargs["mean"] = tuple(float(v) for v in args.norm_mean.split(","))
    if args.norm_std:
        kwargs["std"] = tuple(float(v) for v in args.norm_std.split(","))
    taps = tuple(t for t in args.taps.split(",") if t)
    return ExtractorSpec(
        model=args.model,
        taps=taps,
        native_input_size=args.native_input_size,
        scale=args.scale,
        **kwargs,
    )


def _pack_path(out_dir: Path, image_id: str) -> Path:
    return out_dir / (image_id.replace("/", "__") + ".fpak")


def _grid_from_pack(pack: FeaturePack, patch_size: int):
    pooled = [neighborhood_pool(m, patch_size) for m in pack.maps]
    return merge_layers(pooled, image_id=pack.image_id)


# ---------------------------------------------------------------------------
# extract


def cmd_extract(args) -> int:
    index = index_dataset(args.dataset_root, args.profile)
    spec = _spec_from_args(args)
    fingerprint = extractor_fingerprint(spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    if args.split == "test":
        images = [
            (t.image_id, load_image(index.resolve(args.category, t.image_id)), False,
             t.label, t.mask_id)
            for t in index.category(args.category).test
        ]
    else:
        sample = sample_kshot(index, args.category, args.k, args.seed)
        loaded = [
            (image_id, load_image(index.resolve(args.category, image_id)))
            for image_id in sample.image_ids
        ]
        aug_types = (
            tuple(t for t in args.aug_types.split(",") if t)
            if args.aug_types
            else aug.active_set_for(args.profile)
        )
        cfg = aug.AugmentConfig(
            num_augs_per_image=args.num_augs, active_types=aug_types if args.num_augs else (),
            seed=args.seed,
        )
        images = [
            (out_id, img, is_augmented, None, None)
            for out_id, img, is_augmented, _ in aug.generate_augmented_set(loaded, cfg)
        ]

    for image_id, img, augmented, label, mask_id in images:
        maps = extract_image(img, spec)
        pack = FeaturePack(image_id=image_id, fingerprint=fingerprint, maps=tuple(maps))
        path = _pack_path(out_dir, image_id)
        write_pack(pack, path)
        entries.append(
            {
                "id": image_id,
                "pack": path.name,
                "h": int(img.shape[0]),
                "w": int(img.shape[1]),
                "augmented": bool(augmented),
                "label": label,
                "mask_id": mask_id,
            }
        )

    manifest = {
        "dataset_root": str(args.dataset_root),
        "profile": args.profile,
        "category": args.category,
        "split": args.split,
        "k": getattr(args, "k", None),
        "seed": getattr(args, "seed", None),
        "fingerprint": fingerprint,
        "spec": {
            "model": spec.model,
            "taps": list(spec.taps),
            "native_input_size": spec.native_input_size,
            "scale": spec.scale,
            "mean": list(spec.mean),
            "std": list(spec.std),
        },
        "images": entries,
    }
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    print(f"extracted {len(entries)} packs -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# fit


def _load_manifest(packs_dir: Path) -> dict:
    manifest_path = packs_dir / "manifest.json" if packs_dir.is_dir() else packs_dir
    if not manifest_path.is_file():
        raise ConfigError(f"no manifest.json under {packs_dir}")
    return json.loads(manifest_path.read_text())


def cmd_fit(args) -> int:
    packs_dir = Path(args.packs)
    manifest = _load_manifest(packs_dir)
    base = packs_dir if packs_dir.is_dir() else packs_dir.parent
    reference = manifest["fingerprint"]
    grids, flags = [], []
    for entry in manifest["images"]:
        pack = read_pack(base / entry["pack"])
        if pack.fingerprint != reference:
            raise FormatError(
                f"{entry['pack']}: fingerprint {pack.fingerprint} does not match "
                f"manifest fingerprint {reference}"
            )
        grids.append(_grid_from_pack(pack, args.patch_size))
        flags.append(bool(entry.get("augmented")))
    coreset_size = "all" if args.coreset_size == "all" else int(args.coreset_size)
    bank = fit_bank_from_grids(
        grids, flags, coreset_size, args.seed, projection=args.coreset_projection
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_bank(bank, args.out)
    print(f"bank of {bank.size} points (dim {bank.dim}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# score


def cmd_score(args) -> int:
    bank = load_bank(args.bank)
    packs_dir = Path(args.packs)
    manifest = _load_manifest(packs_dir)
    base = packs_dir if packs_dir.is_dir() else packs_dir.parent
    out_dir = Path(args.out)
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    meta_images = []
    for entry in manifest["images"]:
        pack = read_pack(base / entry["pack"])
        if pack.fingerprint != manifest["fingerprint"]:
            raise FormatError(f"{entry['pack']}: fingerprint mismatch against manifest")
        grid = _grid_from_pack(pack, args.patch_size)
        result = score_image(bank, grid, (entry["h"], entry["w"]), args.sigma)
        stem = entry["id"].replace("/", "__")
        png_path = maps_dir / f"{stem}.png"
        amap = result.anomaly_map
        span = float(amap.max() - amap.min())
        norm = (amap - amap.min()) / span if span > 0 else np.zeros_like(amap)
        ok, png_bytes = cv2.imencode(".png", np.round(norm * 65535.0).astype(np.uint16))
        if not ok:
            raise RuntimeError(f"failed to encode anomaly map for {entry['id']}")
        atomic_write_bytes(png_path, png_bytes.tobytes())
        npy_name = None
        if not args.no_sidecar:
            npy_name = f"{stem}.npy"
            with open(maps_dir / npy_name, "wb") as fh:
                np.save(fh, amap)
        rows.append((entry["id"], entry.get("label"), result.image_score))
        meta_images.append(
            {
                "id": entry["id"],
                "label": entry.get("label"),
                "mask_id": entry.get("mask_id"),
                "h": entry["h"],
                "w": entry["w"],
                "map_png": f"maps/{stem}.png",
                "map_npy": f"maps/{npy_name}" if npy_name else None,
            }
        )

    lines = ["image_id,label,image_score"]
    for image_id, label, score in rows:
        lines.append(f"{image_id},{'' if label is None else label},{fmt(float(score))}")
    atomic_write_text(out_dir / "scores.csv", "\n".join(lines) + "\n")
    atomic_write_text(
        out_dir / "meta.json",
        json.dumps(
            {
                "dataset_root": manifest["dataset_root"],
                "profile": manifest["profile"],
                "category": manifest["category"],
                "sigma": args.sigma,
                "patch_size": args.patch_size,
                "images": meta_images,
            },
            indent=2,
            sort_keys=True,
        ),
    )
    print(f"scored {len(rows)} images -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    scores_dir = Path(args.scores)
    meta = json.loads((scores_dir / "meta.json").read_text())
    dataset_root = Path(args.dataset_root or meta["dataset_root"])
    category = meta["category"]

    image_scores, labels = [], []
    pixel_scores, pixel_labels = [], []
    for entry in meta["images"]:
        if entry["label"] is None:
            raise ConfigError(f"{entry['id']}: no label recorded; score a test split")
        if entry["map_npy"] is None:
            raise ConfigError(
                f"{entry['id']}: raw anomaly-map sidecar missing; rerun score without --no-sidecar"
            )
        amap = np.load(scores_dir / entry["map_npy"])
        labels.append(int(entry["label"]))
        if entry["mask_id"] is not None:
            mask = load_mask(dataset_root / category / entry["mask_id"], amap.shape)
        else:
            mask = np.zeros(amap.shape, dtype=bool)
        pixel_scores.append(amap.ravel())
        pixel_labels.append(mask.ravel())

    scores_csv = (scores_dir / "scores.csv").read_text().strip().splitlines()[1:]
    by_id = {line.split(",")[0]: float(line.rsplit(",", 1)[1]) for line in scores_csv}
    image_scores = [by_id[e["id"]] for e in meta["images"]]

    auroc = image_auroc(image_scores, labels)
    aupr = pixel_aupr(
        np.concatenate(pixel_scores), np.concatenate(pixel_labels), bins=args.pixel_binning
    )
    doc = {
        "category": category,
        "image_auroc": auroc,
        "pixel_aupr": aupr,
        "hproc": hproc(auroc * 100.0, aupr * 100.0),
    }
    out = Path(args.out) if args.out else scores_dir / "metrics.json"
    atomic_write_text(out, json.dumps(doc, indent=2, sort_keys=True))
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# benchmark


def cmd_benchmark(args) -> int:
    overrides = {
        "dataset_root": args.dataset_root,
        "profile": args.profile,
        "out_dir": args.out,
        "model": args.model,
        "native_input_size": args.native_input_size,
        "scale": args.scale,
        "patch_size": args.patch_size,
        "num_augs": args.num_augs,
        "coreset_size": args.coreset_size,
        "smoothing_sigma": args.sigma,
        "pixel_binning": args.pixel_binning,
        "jobs": args.jobs,
    }
    if args.taps:
        overrides["taps"] = tuple(t for t in args.taps.split(",") if t)
    if args.shots:
        overrides["shots"] = _parse_int_list(args.shots)
    if args.seeds:
        overrides["seeds"] = _parse_int_list(args.seeds)
    if args.categories:
        overrides["categories"] = tuple(c for c in args.categories.split(",") if c)
    if args.aug_types:
        overrides["aug_types"] = tuple(t for t in args.aug_types.split(",") if t)
    if args.norm_mean:
        overrides["mean"] = tuple(float(v) for v in args.norm_mean.split(","))
    if args.norm_std:
        overrides["std"] = tuple(float(v) for v in args.norm_std.split(","))

    if args.config:
        cfg = config_from_file(args.config, overrides)
    else:
        missing = [k for k in ("dataset_root", "profile", "out_dir") if overrides.get(k) is None]
        if missing:
            raise ConfigError(f"--config or explicit flags required; missing {missing}")
        cfg = BenchmarkConfig.from_dict({k: v for k, v in overrides.items() if v is not None})

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "config.json", cfg.to_json())

    def progress(category, k, seed, payload):
        status = payload["status"]
        detail = "" if status == "ok" else f" ({payload['message']})"
        print(f"[{status}] {category} k={k} seed={seed}{detail}")

    rows, failures = run_benchmark(cfg, progress=progress)
    if rows:
        atomic_write_text(out_dir / "metrics.csv", metrics_csv_text(rows))
    if rows and not failures:
        report = aggregate_report(
            [r.as_dict() for r in rows],
            shots=list(cfg.shots),
            seeds=list(cfg.seeds),
        )
        atomic_write_text(
            out_dir / "summary.json", summary_json_text(report, json.loads(cfg.to_json()))
        )
    for category, k, seed, message in failures:
        print(f"FAILED {category} k={k} seed={seed}: {message}", file=sys.stderr)
    print(f"{len(rows)} cells ok, {len(failures)} failed -> {out_dir}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    metrics_path = Path(args.metrics)
    if metrics_path.is_dir():
        metrics_path = metrics_path / "metrics.csv"
    if not metrics_path.is_file():
        raise ConfigError(f"no metrics CSV at {metrics_path}")
    index = None
    if args.dataset_root:
        index = index_dataset(args.dataset_root, args.profile)
    written = write_report(metrics_path, args.out, index=index)
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchbank",
        description="Patch-feature memory-bank anomaly detection benchmark pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="images -> FPAK feature packs")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--profile", required=True, choices=("mvtec", "visa"))
    p.add_argument("--category", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--k", type=int, default=1, help="shots for the train split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-augs", type=int, default=0)
    p.add_argument("--aug-types", default="", help="comma-separated; default = profile set")
    _spec_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit", help="FPAK packs -> PBNK memory bank")
    p.add_argument("--packs", required=True, help="pack directory or manifest.json")
    p.add_argument("--patch-size", type=int, default=3)
    p.add_argument("--coreset-size", default="all")
    p.add_argument("--coreset-projection", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="bank + test packs -> scores CSV + anomaly maps")
    p.add_argument("--bank", required=True)
    p.add_argument("--packs", required=True)
    p.add_argument("--patch-size", type=int, default=3)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--no-sidecar", action="store_true", help="skip raw float32 .npy maps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="scores + ground truth -> metrics JSON")
    p.add_argument("--scores", required=True)
    p.add_argument("--dataset-root", default=None, help="override the recorded root")
    p.add_argument("--pixel-binning", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="full (category, k, seed) grid")
    p.add_argument("--config", default=None, help="JSON config; flags override file keys")
    p.add_argument("--dataset-root", default=None)
    p.add_argument("--profile", default=None, choices=("mvtec", "visa"))
    p.add_argument("--categories", default=None, help="comma-separated filter")
    p.add_argument("--shots", default=None, help="e.g. 1,5,10")
    p.add_argument("--seeds", default=None, help="e.g. 0..4")
    p.add_argument("--model", default=None)
    p.add_argument("--taps", default=None)
    p.add_argument("--input-size", type=int, default=None, dest="native_input_size")
    p.add_argument("--input-scale", type=float, default=None, dest="scale")
    p.add_argument("--norm-mean", default=None)
    p.add_argument("--norm-std", default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--num-augs", type=int, default=None)
    p.add_argument("--aug-types", default=None)
    p.add_argument("--coreset-size", default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--pixel-binning", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="metrics -> curve CSV + SVG plots")
    p.add_argument("--metrics", required=True, help="benchmark out dir or metrics.csv")
    p.add_argument("--dataset-root", default=None, help="enables the defect-size histogram")
    p.add_argument("--profile", default="mvtec", choices=("mvtec", "visa"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IndexingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PatchbankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
