"""Command line entry points: preprocess, precompute, train, eval, ablate-noise, report.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
The embedding cache root defaults to ``$BOXPROMPT_CACHE`` when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .backbone import (CacheMissError, EmbeddingCache, ExternalBackbone, StaleCacheError, ToyBackbone,
                       precompute_embeddings)
from .datapipe import (DatasetManifest, ManifestEntry, ManifestError, filter_slices, fingerprint,
                       generate_synthetic, load_volume, preprocess, read_manifest, write_manifest)
from .domain import ConfigError, Image, validate_config
from .geometry import box_from_mask
from .metrics import aggregate, evaluate_masks, read_report, write_report
from .presets import ABLATIONS, PRESETS, apply_ablation, generator_config, get_preset, merge_overrides
from .prompt_generator import CheckpointError, load_weights, read_checkpoint_header
from .trainer import (NOISE_BANDS, evaluate_generator, parse_band, prepare_samples, run_noise_ablation,
                      run_trials, train, validation_gate, predict)

log = logging.getLogger("boxprompt")

CACHE_ENV = "BOXPROMPT_CACHE"
BACKBONES = ("toy", "external")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers

def _backbone(name: str, image_size=(256, 256), export_dir=None):
    if name == "toy":
        return ToyBackbone(input_size=tuple(image_size))
    if name == "external":
        if export_dir is None:
            raise UsageError("--backbone external needs --export-dir")
        return ExternalBackbone(export_dir)
    raise UsageError(f"unknown backbone {name!r}; available: {', '.join(BACKBONES)}")


def _cache_dir(args, manifest_path) -> Path:
    if getattr(args, "cache", None):
        return Path(args.cache)
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(manifest_path).parent / "cache"


def _load_manifest(path) -> DatasetManifest:
    if not Path(path).exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    return read_manifest(path)


def _samples(manifest: DatasetManifest, split: str):
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} samples")
    return [(e.sample_id, manifest.load_image(e), e.box) for e in entries]


def _test_set(manifest: DatasetManifest, split: str):
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} samples")
    return ([manifest.load_image(e) for e in entries], [manifest.load_mask(e) for e in entries],
            [e.sample_id for e in entries])


def _resolve_preset(args):
    preset = get_preset(args.preset)
    if getattr(args, "config", None):
        try:
            overrides = yaml.safe_load(Path(args.config).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{args.config}: {e}") from None
        if not isinstance(overrides, dict):
            raise ConfigError(f"{args.config}: expected a mapping of config keys")
        preset = merge_overrides(preset, overrides)
    extra = {}
    if getattr(args, "epochs", None) is not None:
        extra["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        extra["seed"] = args.seed
    if extra:
        preset = merge_overrides(preset, extra)
    train_cfg = apply_ablation(preset.train, getattr(args, "ablate", None) or "full")
    validate_config(train_cfg)
    return preset, train_cfg


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# commands

def cmd_preprocess(args) -> int:
    out = Path(args.out)
    manifest_path = out / "manifest.jsonl"
    fractions = [float(x) for x in args.splits.split(",")]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-6:
        raise UsageError("--splits takes three nonnegative fractions summing to 1, e.g. 0.5,0,0.5")
    if args.synthetic:
        params = {"synthetic": True, "n": args.n, "seed": args.seed, "image_size": [args.image_size] * 2,
                  "splits": fractions, "version": __version__}
    else:
        if not args.input:
            raise UsageError("give --synthetic or --input DIR")
        files = sorted(p.name for p in Path(args.input).iterdir() if p.suffix in (".png", ".npz"))
        params = {"input": str(Path(args.input).resolve()), "files": files, "crop": args.crop,
                  "size": [args.image_size] * 2, "seed": args.seed, "splits": fractions, "version": __version__}
    fp = fingerprint(params)
    if manifest_path.exists():
        try:
            old = read_manifest(manifest_path, check_files=True)
            if old.provenance.get("fingerprint") == fp:
                _emit({"manifest": str(manifest_path), "entries": len(old), "fingerprint": fp, "rewritten": False})
                return 0
        except ManifestError:
            pass
    if args.synthetic:
        ds = generate_synthetic(args.n, (args.image_size, args.image_size), np.random.default_rng(args.seed),
                                split_fractions=tuple(fractions))
        ds.provenance = {"source": "synthetic", "fingerprint": fp, "params": params}
    else:
        ds = _ingest(Path(args.input), args, fractions, fp, params)
    write_manifest(ds, manifest_path)
    _emit({"manifest": str(manifest_path), "entries": len(ds), "fingerprint": fp, "rewritten": True})
    return 0


def _ingest(root: Path, args, fractions, fp, params) -> DatasetManifest:
    """Volumes (.npz) and 2D images (.png, masks in ``masks/``) to preprocessed slices."""
    size = (args.image_size, args.image_size)
    crop = tuple(args.crop) if args.crop else None
    items = []
    for path in sorted(root.iterdir()):
        if path.suffix == ".npz":
            vol, spacing, mask = load_volume(path)
            if mask is None:
                raise ValueError(f"{path.name}: volume has no mask; boxes are derived from masks")
            # default crop keeps the whole slice after resampling to 1 mm pixels
            full = tuple(int(round(n * sp)) for n, sp in zip(vol.shape[1:], spacing[1:]))
            pairs = preprocess(vol, crop or full, size, spacing=spacing, mask=mask)
        elif path.suffix == ".png":
            mpath = root / "masks" / path.name
            if not mpath.exists():
                raise FileNotFoundError(f"{path.name}: no mask at {mpath}")
            from PIL import Image as PILImage
            with PILImage.open(path) as im:
                raw = np.asarray(im.convert("L"), dtype=np.float64)
            with PILImage.open(mpath) as im:
                m = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
            pairs = preprocess(raw, crop or raw.shape, size, mask=m)
        else:
            continue
        keep, kept = filter_slices([m for _, m in pairs])
        for k, m in zip(keep, kept):
            img = np.rint(pairs[k][0].pixels)
            items.append((f"{path.stem}_{k:03d}", Image(img), m))
    if not items:
        raise ValueError(f"no usable slices found in {root}")
    order = np.random.default_rng(args.seed).permutation(len(items))
    n_train = int(round(len(items) * fractions[0]))
    n_val = int(round(len(items) * fractions[1]))
    entries = []
    for rank, idx in enumerate(order):
        sid, img, m = items[idx]
        split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        entries.append(ManifestEntry(sid, box_from_mask(m), split, image=img, mask=m))
    entries.sort(key=lambda e: e.sample_id)
    return DatasetManifest(entries, {"source": str(root), "fingerprint": fp, "params": params})


def cmd_precompute(args) -> int:
    manifest = _load_manifest(args.manifest)
    size = manifest.load_image(manifest.entries[0]).shape if len(manifest) else (256, 256)
    bb = _backbone(args.backbone, size, getattr(args, "export_dir", None))
    cache_dir = _cache_dir(args, args.manifest)
    samples = [(e.sample_id, manifest.load_image(e)) for e in manifest]
    try:
        summary = precompute_embeddings(bb, samples, cache_dir)
    except StaleCacheError as e:
        raise StaleCacheError(f"embedding cache at {cache_dir} is damaged: {e}") from None
    summary["cache"] = str(cache_dir)
    _emit(summary)
    return 0


def _build(args, manifest):
    preset, cfg = _resolve_preset(args)
    bb = _backbone(args.backbone, preset.image_size if args.backbone == "external" else
                   manifest.load_image(manifest.entries[0]).shape, getattr(args, "export_dir", None))
    return preset, cfg, bb, generator_config(preset, bb)


def _cache_for(args, manifest_path):
    d = _cache_dir(args, manifest_path)
    return EmbeddingCache(d) if (d / "manifest.json").exists() else None


def cmd_train(args) -> int:
    if args.print_config:
        preset, cfg = _resolve_preset(args)
        _emit({"preset": preset.name, "fingerprint": preset.fingerprint(), "train": cfg.to_dict(),
               "generator": {k: list(v) if isinstance(v, tuple) else v for k, v in preset.generator.items()},
               "image_size": list(preset.image_size)})
        return 0
    if not args.manifest or not args.out:
        raise UsageError("train needs --manifest and --out (or --print-config)")
    manifest = _load_manifest(args.manifest)
    preset, cfg, bb, gcfg = _build(args, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = _cache_for(args, args.manifest)
    prepared = prepare_samples(bb, _samples(manifest, "train"), cache=cache, require_cache=args.require_cache)
    meta = {"preset": preset.name, "ablation": args.ablate or "full", "train_config": cfg.to_dict(),
            "n_train": len(prepared), "backbone": bb.descriptor.to_dict(), "version": __version__}
    _write_json(out / "config.json", meta)

    if args.trials > 1:
        n_seeds = 3 if args.trials % 3 == 0 else 1
        test = _test_set(manifest, args.eval_split)
        res = run_trials(cfg, prepared, test, bb, n_subsets=args.trials // n_seeds, n_seeds=n_seeds,
                         subset_size=min(args.subset_size, len(prepared)), gen_config=gcfg, metrics=("dsc",))
        with open(out / "trials.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subset", "seed", "dsc"])
            for r in res["rows"]:
                w.writerow([r["subset"], r["seed"], f"{r['dsc']:.6f}"])
        mean, std = res["aggregate"]["dsc"]
        _write_json(out / "trials.json", {**res, "meta": meta})
        _emit({"trials": len(res["rows"]), "dsc_mean": mean, "dsc_std": std, "out": str(out)})
        return 0

    gen, _ = train(cfg, prepared, bb, gcfg, log_path=out / "log.jsonl")
    ckpt = gen.save_weights(out / "generator.ckpt", meta=meta)
    val = manifest.split("val") or manifest.split("train")
    probs = predict(gen, bb, [manifest.load_image(e) for e in val])
    dice, ratio, ok = validation_gate([(p >= 0.5) for p in probs], [e.box for e in val])
    gate = {"split": "val" if manifest.split("val") else "train", "box_dice": dice, "fg_box_ratio": ratio,
            "pass": ok}
    _write_json(out / "gate.json", gate)
    _emit({"checkpoint": str(ckpt), "log": str(out / "log.jsonl"), "gate": gate})
    return 0


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.manifest)
    metrics = tuple(dict.fromkeys(args.metric or ["dsc", "assd"]))
    header = read_checkpoint_header(args.checkpoint)
    gen = load_weights(args.checkpoint)
    size = gen.config.input_size
    bb = _backbone(args.backbone, size, getattr(args, "export_dir", None))
    entries = manifest.split(args.split)
    if not entries:
        raise ValueError(f"manifest has no {args.split!r} samples")
    images = [manifest.load_image(e) for e in entries]
    gts = [manifest.load_mask(e) for e in entries]
    rep = evaluate_generator(gen, bb, images, gts, [e.sample_id for e in entries], metrics)
    out = Path(args.out)
    write_report(rep, out, metrics)
    summary = {"checkpoint": str(args.checkpoint), "split": args.split, "n": len(entries),
               "aggregate": rep["aggregate"], "both_empty": rep["both_empty"],
               "n_train": header.get("meta", {}).get("n_train"), "ablation": header.get("meta", {}).get("ablation")}
    _write_json(out.with_suffix(".json"), summary)
    if args.overlays:
        _write_overlays(Path(args.overlays), entries, images, rep["predictions"], gts)
    _emit({"report": str(out), **{m: rep["aggregate"][m] for m in metrics}})
    return 0


def _write_overlays(root: Path, entries, images, preds, gts):
    from PIL import Image as PILImage
    from scipy import ndimage
    root.mkdir(parents=True, exist_ok=True)
    for e, img, p, g in zip(entries, images, preds, gts):
        grey = np.clip(img.pixels[0], 0, 255).astype(np.uint8)
        rgb = np.stack([grey] * 3, axis=-1).astype(np.float32)
        pm = p.astype(bool)
        rgb[pm] = 0.55 * rgb[pm] + 0.45 * np.array([40, 90, 255])
        edge = g.astype(bool) & ~ndimage.binary_erosion(g.astype(bool))
        rgb[edge] = (255, 40, 40)
        b = e.box
        rgb[b.y_min, b.x_min:b.x_max + 1] = rgb[b.y_max, b.x_min:b.x_max + 1] = (40, 220, 40)
        rgb[b.y_min:b.y_max + 1, b.x_min] = rgb[b.y_min:b.y_max + 1, b.x_max] = (40, 220, 40)
        PILImage.fromarray(rgb.astype(np.uint8)).save(root / f"{e.sample_id}.png")


def cmd_ablate_noise(args) -> int:
    try:
        bands = {b: parse_band(b) for b in args.bands.split(",")}
    except ValueError as e:
        raise UsageError(str(e)) from None
    manifest = _load_manifest(args.manifest)
    preset, cfg, bb, gcfg = _build(args, manifest)
    seeds = [cfg.seed + 1000 * k for k in range(args.seeds)]
    res = run_noise_ablation(cfg, _samples(manifest, "train"), _test_set(manifest, args.eval_split), bb,
                             bands, seeds, gcfg, cache=_cache_for(args, args.manifest))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "noise_table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["band", "low", "high", "dsc_mean", "dsc_std", "n"])
        for label, (lo, hi) in bands.items():
            m, s = res["table"][label]["dsc"]
            w.writerow([label, lo, hi, f"{m:.6f}", f"{s:.6f}", len(seeds)])
    with open(out / "noise_trials.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["band", "seed", "dsc"])
        for r in res["rows"]:
            w.writerow([r["band"], r["seed"], f"{r['dsc']:.6f}"])
    _emit({"table": str(out / "noise_table.csv"),
           "dsc": {k: v["dsc"] for k, v in res["table"].items()}})
    return 0


def _kind(path: Path) -> str:
    if path.suffix == ".jsonl":
        return "log"
    with open(path, newline="") as f:
        head = next(csv.reader(f), [])
    if head and head[0] == "band":
        return "noise"
    if head and head[0] == "sample_id":
        return "report"
    if head[:2] == ["subset", "seed"]:
        return "trials"
    raise ValueError(f"{path}: unrecognised input (expected eval report, trials, noise table or log)")


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = [Path(p) for p in args.inputs]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"{p} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = {p: _kind(p) for p in paths}
    written = []

    reports = [p for p in paths if kinds[p] == "report"]
    if reports:
        loaded = {p: read_report(p) for p in reports}
        id_sets = {p: {r["sample_id"] for r in rep["rows"]} for p, rep in loaded.items()}
        union = set().union(*id_sets.values())
        common = set.intersection(*id_sets.values())
        if union != common:
            diff = sorted(union - common)
            log.warning("runs were evaluated on different samples; symmetric difference: %s", ", ".join(diff))
            print(f"warning: sample_id sets differ; symmetric difference: {', '.join(diff)}", file=sys.stderr)
        metrics = sorted({m for rep in loaded.values() for m in rep["metrics"]})
        table = out / "comparison.csv"
        with open(table, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["run", "n", *metrics])
            for p, rep in loaded.items():
                cells = []
                for m in metrics:
                    vals = [r[m] for r in rep["rows"] if m in r]
                    cells.append("%.2f ± %.2f" % aggregate(vals) if vals else "")
                w.writerow([p.stem, len(rep["rows"]), *cells])
        written.append(table)
        sizes = []
        for p in reports:
            js = p.with_suffix(".json")
            if js.exists():
                meta = json.loads(js.read_text())
                if meta.get("n_train") and "dsc" in loaded[p]["aggregate"]:
                    sizes.append((meta["n_train"], *loaded[p]["aggregate"]["dsc"]))
        if len({s[0] for s in sizes}) > 1:
            sizes.sort()
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.errorbar([s[0] for s in sizes], [s[1] for s in sizes], yerr=[s[2] for s in sizes], marker="o")
            ax.set_xlabel("training samples")
            ax.set_ylabel("DSC (%)")
            fig.tight_layout()
            fig.savefig(out / "dsc_vs_train_size.png", dpi=100)
            plt.close(fig)
            written.append(out / "dsc_vs_train_size.png")

    for p in paths:
        if kinds[p] == "log":
            recs = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
            if not recs:
                raise ValueError(f"{p}: empty log")
            fig, axes = plt.subplots(1, 5, figsize=(16, 3))
            ep = [r["epoch"] for r in recs]
            for ax, key in zip(axes, ("total", "pseudo", "size", "empty", "cons")):
                ax.plot(ep, [r[key] for r in recs])
                ax.set_title(key)
                ax.set_xlabel("epoch")
            fig.tight_layout()
            target = out / f"loss_curves_{p.parent.name or p.stem}.png"
            fig.savefig(target, dpi=100)
            plt.close(fig)
            written.append(target)
        elif kinds[p] == "noise":
            with open(p, newline="") as f:
                rows = list(csv.DictReader(f))
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.errorbar(range(len(rows)), [float(r["dsc_mean"]) for r in rows],
                        yerr=[float(r["dsc_std"]) for r in rows], marker="o")
            ax.set_xticks(range(len(rows)), [r["band"] + "%" for r in rows])
            ax.set_xlabel("box noise band")
            ax.set_ylabel("DSC (%)")
            fig.tight_layout()
            target = out / f"dsc_vs_noise_{p.stem}.png"
            fig.savefig(target, dpi=100)
            plt.close(fig)
            written.append(target)
        elif kinds[p] == "trials":
            with open(p, newline="") as f:
                vals = [float(r["dsc"]) for r in csv.DictReader(f)]
            target = out / f"trials_{p.parent.name or p.stem}.csv"
            m, s = aggregate(vals)
            target.write_text(f"trials,dsc_mean,dsc_std\n{len(vals)},{m:.6f},{s:.6f}\n")
            written.append(target)
    _emit({"written": [str(w) for w in written]})
    return 0


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boxprompt", description="Box-supervised prompt learning for a frozen "
                                 "promptable segmentation model.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build a dataset manifest")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", help="generate synthetic blob images")
    src.add_argument("--input", help="directory of .npz volumes and/or .png images with masks/")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--splits", default="0.3333333333333333,0,0.6666666666666667",
                   help="train,val,test fractions")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("precompute", help="cache image embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", default="toy")
    p.add_argument("--export-dir")
    p.add_argument("--cache", help=f"cache directory (default ${CACHE_ENV} or <manifest dir>/cache)")
    p.set_defaults(func=cmd_precompute)

    def train_args(p):
        p.add_argument("--manifest")
        p.add_argument("--preset", default="desk-synthetic")
        p.add_argument("--config", help="YAML file of config overrides")
        p.add_argument("--ablate", choices=sorted(ABLATIONS))
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--backbone", default="toy")
        p.add_argument("--export-dir")
        p.add_argument("--cache")
        p.add_argument("--eval-split", default="test")

    p = sub.add_parser("train", help="train the prompt generator")
    train_args(p)
    p.add_argument("--out")
    p.add_argument("--trials", type=int, default=1, help="9 = 3 subsets x 3 seeds")
    p.add_argument("--subset-size", type=int, default=20)
    p.add_argument("--require-cache", action="store_true")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metric", action="append", choices=["dsc", "assd"])
    p.add_argument("--out", required=True)
    p.add_argument("--overlays")
    p.add_argument("--backbone", default="toy")
    p.add_argument("--export-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-noise", help="train and evaluate under box-noise bands")
    train_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--bands", default=",".join(NOISE_BANDS), help="comma-separated percent bands")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate_noise)

    p = sub.add_parser("report", help="tables and plots from reports and logs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        ap.exit(2, f"{ap.prog}: error: {e}\n")
    except (ManifestError, StaleCacheError, CacheMissError, CheckpointError, FileNotFoundError,
            ValueError, FloatingPointError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"{ap.prog}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
