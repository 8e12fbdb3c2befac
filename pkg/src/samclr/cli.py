"""Command line: samclr {gen-synthetic,preprocess,train,eval,purity,plot}.

Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluation as E
from .config import ConfigError, RunConfig, load_config
from .contrastive import EncoderConfig, HeadConfig, Model, TrainingAborted, metrics_csv, train_loop
from .data import DataError, load_labels, load_manifest, load_region_masks, load_samples, precompute_regions, read_cache
from .image_ops import ImageDecodeError, read_image
from .masks import DEFAULT_MIN_AREA, DEFAULT_THETA
from .plot import PlotError, read_metrics, render_svg
from .synthetic import SceneGroundTruth, SceneSpec, generate_dataset, purity_benchmark, write_purity_csv
from .tensor import load_checkpoint, save_checkpoint

log = logging.getLogger("samclr")


class UsageError(Exception):
    """Maps to exit code 2."""


class _HelpFormatter(argparse.HelpFormatter):
    """Show every non-empty default, even for flags without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default not in (None, argparse.SUPPRESS) and not action.required and action.option_strings \
                and "%(default)" not in text and not isinstance(action, argparse._HelpAction):
            text += " (default: %(default)s)"
        return text


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


# -- gen-synthetic -------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    fields = ("size", "min_objects", "max_objects", "min_scale", "max_scale", "max_coverage")
    try:
        spec = SceneSpec(**{k: getattr(args, k) for k in fields})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = generate_dataset(spec, args.n, args.out, args.seed)
    entries = load_manifest(manifest)
    masks = sum(len(e.masks) for e in entries)
    classes = Counter(e.label for e in entries)
    print(f"wrote {len(entries)} images, {masks} masks to {args.out}")
    print("majority class counts: " + ", ".join(f"{c}={classes[c]}" for c in sorted(classes)))
    return 0


# -- preprocess ----------------------------------------------------------------

def cmd_preprocess(args) -> int:
    entries = load_manifest(args.manifest)
    regions, up_to_date = precompute_regions(entries, args.cache, args.min_area, args.theta)
    if up_to_date:
        print("cache up to date")
    else:
        print(f"wrote {args.cache} ({len(regions)} images)")
    hist = Counter(len(rs) for rs in regions.values())
    print("surviving regions per image:")
    for k in sorted(hist):
        print(f"  {k}: {hist[k]}")
    return 0


# -- train ---------------------------------------------------------------------

def _labels_for(entries, labels_path: Optional[Path]) -> Optional[list[int]]:
    table = load_labels(labels_path) if labels_path is not None else {}
    out = []
    for e in entries:
        label = table.get(e.image_id, e.label)
        if label is None:
            return None
        out.append(label)
    return out


def _split_bank(images, labels, fraction: float):
    cut = max(1, min(len(images) - 1, int(len(images) * fraction)))
    return (images[:cut], labels[:cut]), (images[cut:], labels[cut:])


def make_knn_evaluator(cfg: RunConfig, images, labels):
    """KNN accuracy of a model on the configured bank/query split."""
    if len(images) < 2:
        raise DataError("evaluation needs at least 2 labeled images")
    (bi, bl), (qi, ql) = _split_bank(images, labels, cfg.eval.bank_fraction)
    classes = max(labels) + 1
    knn = replace(cfg.knn, k=min(cfg.knn.k, len(bi)))
    size = cfg.sampler.view_size

    def evaluate(model: Model) -> float:
        bank = E.make_bank(bi, bl, model, size, classes)
        return E.knn_accuracy(bank, E.make_bank(qi, ql, model, size, classes), knn)

    return evaluate


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    sampler = replace(cfg.sampler, mode=args.mode)
    manifest = cfg.path("manifest")
    entries = load_manifest(manifest)
    regions = None
    if args.mode == "samclr":
        cache_path = cfg.path("cache")
        if cache_path is None or not cache_path.exists():
            raise UsageError(f"region cache {cache_path} not found; run `samclr preprocess` first")
        cached = read_cache(cache_path)
        missing = [e.image_id for e in entries if e.image_id not in cached]
        if missing:
            raise UsageError(f"region cache lacks {missing[0]} (and {len(missing) - 1} more); "
                             "re-run `samclr preprocess`")
        regions = {k: v.regions for k, v in cached.items()}
    samples = load_samples(entries, regions)

    eval_manifest = cfg.path("eval_manifest")
    eval_entries = load_manifest(eval_manifest) if eval_manifest is not None else entries
    eval_labels_path = cfg.path("eval_labels") if eval_manifest is not None else cfg.path("labels")
    eval_labels = _labels_for(eval_entries, eval_labels_path)
    evaluate = None
    if eval_labels is None:
        log.warning("no labels for the evaluation set; knn_acc will be nan")
    else:
        images = [s.image for s in samples] if eval_manifest is None else [read_image(e.image) for e in eval_entries]
        evaluate = make_knn_evaluator(cfg, images, eval_labels)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_loop(samples, cfg.train, sampler, cfg.encoder, cfg.head, cfg.jitter, evaluate,
                        progress=lambda msg: print(msg, file=sys.stderr, flush=True))
    ckpt = out / f"{args.mode}.ck"
    save_checkpoint(ckpt, result.model.named_arrays())
    (out / f"{args.mode}.csv").write_text(metrics_csv(result.metrics), encoding="utf-8")
    last = result.metrics[-1]
    final_loss = result.losses[-1] if result.losses else last.loss
    if evaluate is None:
        knn = float("nan")
    else:
        knn = last.knn_acc if last.step == len(result.losses) else evaluate(result.model)
    print(f"final loss {final_loss:.6f}")
    print(f"final knn_acc {knn:.6f}")
    print(f"wrote {ckpt} and {out / (args.mode + '.csv')}")
    return 0


# -- eval ----------------------------------------------------------------------

def model_from_checkpoint(arrays: dict[str, np.ndarray], cfg: RunConfig) -> Model:
    """Rebuild the architecture from parameter shapes; stride comes from the config."""
    widths = []
    while f"encoder.conv{len(widths)}.weight" in arrays:
        widths.append(arrays[f"encoder.conv{len(widths)}.weight"].shape[0])
    if not widths or "head.fc1.weight" not in arrays or "head.fc2.weight" not in arrays:
        raise DataError("checkpoint does not hold an encoder and projection head")
    kernel = arrays["encoder.conv0.weight"].shape[2]
    enc = EncoderConfig(tuple(widths), kernel, cfg.encoder.stride)
    head = HeadConfig(arrays["head.fc1.weight"].shape[1], arrays["head.fc2.weight"].shape[1])
    model = Model(enc, head)
    try:
        model.load_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint mismatch: {exc}") from None
    return model


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint), cfg)
    entries = load_manifest(args.manifest)
    labels = _labels_for(entries, Path(args.labels) if args.labels else None)
    if labels is None:
        raise DataError("missing class labels: pass --labels or add a label to every manifest line")
    images = [read_image(e.image) for e in entries]
    (bi, bl), (qi, ql) = _split_bank(images, labels, cfg.eval.bank_fraction)
    classes = max(labels) + 1
    size = cfg.sampler.view_size
    train_bank = E.make_bank(bi, bl, model, size, classes)
    test_bank = E.make_bank(qi, ql, model, size, classes)
    dataset = Path(args.manifest).resolve().parent.name or "dataset"
    mode = Path(args.checkpoint).stem
    rows = []
    if args.protocol in ("knn", "both"):
        knn = replace(cfg.knn, k=min(cfg.knn.k, len(train_bank)))
        rows.append(("knn_top1", dataset, mode, E.knn_accuracy(train_bank, test_bank, knn)))
    if args.protocol in ("linear", "both"):
        probe = E.train_linear_probe(train_bank, cfg.probe)
        rows.append(("linear_top1", dataset, mode, E.linear_accuracy(probe, test_bank)))
    report = E.report_csv(rows)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.csv")
    out.write_text(report, encoding="utf-8")
    for metric, _, _, value in rows:
        print(f"{metric} {value:.6f}")
    print(f"wrote {out}")
    return 0


# -- purity --------------------------------------------------------------------

def cmd_purity(args) -> int:
    entries = load_manifest(args.manifest)
    if not Path(args.cache).exists():
        raise UsageError(f"region cache {args.cache} not found; run `samclr preprocess` first")
    cached = read_cache(args.cache)
    truths, sets = [], []
    for e in entries:
        masks = load_region_masks(e)
        if not masks:
            raise DataError(f"{e.image_id}: no ground-truth masks")
        total = np.zeros(masks[0].bitmap.shape, dtype=np.int32)
        for m in masks:
            total += m.bitmap
        if total.max() > 1:
            raise DataError(f"{e.image_id}: masks overlap, not usable as per-object ground truth")
        if e.image_id not in cached:
            raise UsageError(f"region cache lacks {e.image_id}; re-run `samclr preprocess`")
        truths.append(SceneGroundTruth(masks, [0] * len(masks)))
        sets.append(cached[e.image_id].regions)
    cfg = load_config(args.config).sampler
    results = purity_benchmark(truths, sets, cfg, args.pairs, args.seed, args.c)
    text = write_purity_csv(results, args.out)
    sys.stdout.write(text)
    base = results[0].purity
    for r in results[1:]:
        print(f"purity gap samclr(c={r.expansion:g}) - simclr: {r.purity - base:+.4f}")
    return 0


# -- plot ----------------------------------------------------------------------

def cmd_plot(args) -> int:
    series = [read_metrics(p) for p in args.metrics]
    Path(args.out).write_text(render_svg(series), encoding="utf-8")
    print(f"wrote {args.out} ({len(series)} series)")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="samclr", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic multi-object dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=_positive_int, required=True, help="number of images (>= 1)")
    g.add_argument("--seed", type=int, default=0, help="dataset seed")
    g.add_argument("--size", type=int, default=SceneSpec.size, help="image side in pixels")
    g.add_argument("--min-objects", type=int, default=SceneSpec.min_objects, help="fewest objects per image")
    g.add_argument("--max-objects", type=int, default=SceneSpec.max_objects, help="most objects per image")
    g.add_argument("--min-scale", type=int, default=SceneSpec.min_scale,
                   help="smallest object scale (square root of the drawn area)")
    g.add_argument("--max-scale", type=int, default=SceneSpec.max_scale, help="largest object scale")
    g.add_argument("--max-coverage", type=float, default=SceneSpec.max_coverage,
                   help="max fraction of pixels covered by objects")
    g.set_defaults(func=cmd_gen_synthetic)

    pp = sub.add_parser("preprocess", help="filter masks and write the region cache", formatter_class=fmt)
    pp.add_argument("--manifest", required=True, help="manifest.jsonl")
    pp.add_argument("--cache", required=True, help="region cache file to write")
    pp.add_argument("--min-area", type=_positive_int, default=DEFAULT_MIN_AREA, help="drop regions below this area")
    pp.add_argument("--theta", type=float, default=DEFAULT_THETA, help="containment threshold of the coarse filter")
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="contrastive pretraining", formatter_class=fmt)
    t.add_argument("--config", default=None, help="TOML run config (built-in defaults when omitted)")
    t.add_argument("--mode", choices=("simclr", "samclr"), default="samclr", help="view sampler")
    t.add_argument("--out", required=True, help="output directory for <mode>.ck and <mode>.csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="KNN / linear-probe evaluation of a checkpoint", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    e.add_argument("--manifest", required=True, help="labeled evaluation images")
    e.add_argument("--labels", default=None, help="labels CSV image_id,class_id (else manifest labels)")
    e.add_argument("--protocol", choices=("knn", "linear", "both"), default="both", help="evaluation protocol")
    e.add_argument("--config", default=None, help="TOML run config for stride, view size, knn and probe")
    e.add_argument("--out", default=None, help="report CSV (default: <checkpoint>.eval.csv)")
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("purity", help="positive-pair purity benchmark", formatter_class=fmt)
    u.add_argument("--manifest", required=True, help="manifest whose masks are disjoint per-object ground truth")
    u.add_argument("--cache", required=True, help="region cache from preprocess")
    u.add_argument("--pairs", type=_positive_int, default=10_000, help="pairs per mode")
    u.add_argument("--c", type=float, nargs="+", default=[1.3], help="expansion factors for samclr")
    u.add_argument("--seed", type=int, default=0, help="sampling seed")
    u.add_argument("--config", default=None, help="TOML run config for the sampler settings")
    u.add_argument("--out", default=None, help="also write the CSV report here")
    u.set_defaults(func=cmd_purity)

    pl = sub.add_parser("plot", help="SVG learning curves from metrics CSVs", formatter_class=fmt)
    pl.add_argument("--metrics", nargs="+", required=True, help="metrics CSV files, one series each")
    pl.add_argument("--out", required=True, help="SVG file to write")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "c", None) and any(c < 1 for c in args.c):
        parser.error("--c values must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"samclr {args.command}: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"samclr {args.command}: training aborted: {exc}", file=sys.stderr)
        return 1
    except (DataError, PlotError, ImageDecodeError, OSError, ValueError) as exc:
        print(f"samclr {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
