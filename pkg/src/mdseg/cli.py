"""Command-line entry point: gen-data, train, eval, infer, grad-check.

All commands read one optional JSON config (see config.py) and accept
``--set section.key=value`` overrides. Outputs are deterministic given the
config and seeds, regardless of MDSEG_THREADS.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import domain_arrays, generate_dataset, load_dataset
from .errors import ConfigError, FilesystemError, MdsegError
from .metrics import boundary_mask, evaluate_masks
from .model import build_model, train
from .nn_core import LayerSpec, bilinear_resize, grad_check, nearest_resize
from .pgm import read_image, write_mask_pgm, write_pgm
from .refine import refine_iterate, segment_once
from .utils import thread_map


def _load_run_config(args) -> dict:
    if getattr(args, "config", None):
        cfg = cfgmod.load_config(args.config)
    else:
        cfg = cfgmod.default_config()
    return cfgmod.apply_overrides(cfg, getattr(args, "set", None) or [])


def _resize_domain(images: np.ndarray, masks: np.ndarray, resolution: int):
    """Resample one domain's stack to the network's input size."""
    if images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images, masks
    images = bilinear_resize(images, resolution, resolution).astype(np.float32)
    masks = nearest_resize(masks, resolution, resolution)
    return images, masks


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    triples = cfgmod.domain_specs(cfg)
    manifest = generate_dataset(triples, cfg["data"]["resolution"],
                                cfg["data"]["seed"], args.out)
    name_w = max(len("domain"), *(len(s.name) for s, _, _ in triples))
    print(f"{'domain'.ljust(name_w)}  train  test")
    for spec, n_train, n_test in triples:
        print(f"{spec.name.ljust(name_w)}  {n_train:5d}  {n_test:4d}")
    print(f"manifest: {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args, parser: argparse.ArgumentParser) -> int:
    cfg = _load_run_config(args)
    variant = args.variant or cfg["train"]["variant"]
    if variant not in ("ml", "sd", "md"):
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == "sd" and args.domain is None:
        parser.error("the sd variant trains on one domain: pass --domain")
    if variant != "sd" and args.domain is not None:
        parser.error("--domain only applies to the sd variant")

    train_cfg = cfgmod.train_config(cfg)
    dataset = load_dataset(args.data, "train")
    arrays = domain_arrays(dataset)
    if variant == "sd":
        if not 0 <= args.domain < len(arrays):
            raise ConfigError(f"--domain {args.domain} out of range: dataset "
                              f"has {len(arrays)} domains")
        arrays = [arrays[args.domain]]
        domain_names = [dataset.domain_names[args.domain]]
    else:
        domain_names = list(dataset.domain_names)
    arrays = [_resize_domain(imgs, masks, train_cfg.working_resolution)
              for imgs, masks in arrays]

    params = build_model(variant, num_domains=len(arrays),
                         arch_preset=cfg["train"]["arch_preset"],
                         rng_seed=train_cfg.seed)
    history = train(params, arrays, train_cfg)
    save_checkpoint(params, args.out)

    stats_path = Path(args.stats) if args.stats else Path(str(args.out) + ".csv")
    try:
        with open(stats_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "domain", "mean_fidelity",
                             "mean_batch_loss"])
            for row in history:
                for d, name in enumerate(domain_names):
                    writer.writerow([row["epoch"], name,
                                     f"{row['per_domain_fidelity'][d]:.6f}",
                                     f"{row['mean_batch_loss']:.6f}"])
    except OSError as e:
        raise FilesystemError(f"cannot write stats {stats_path}: {e}") from e

    last = history[-1]
    print(f"trained {variant} for {len(history)} epochs; "
          f"final mean batch loss {last['mean_batch_loss']:.4f}")
    print(f"checkpoint: {args.out}")
    print(f"stats: {stats_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _segment_fn(params, refine_params, refine_cfg, use_refine):
    def run(model_domain, image):
        if use_refine:
            result = refine_iterate(params, model_domain, image, refine_cfg,
                                    refine_params=refine_params)
        else:
            result = segment_once(params, model_domain, image, refine_cfg)
        return result.final_mask
    return run


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    refine_cfg = cfgmod.refine_config(cfg)
    dataset = load_dataset(args.data, args.split)
    if args.domain is not None and not 0 <= args.domain < len(dataset.domain_names):
        raise ConfigError(f"--domain {args.domain} out of range: dataset has "
                          f"{len(dataset.domain_names)} domains")
    eval_domains = ([args.domain] if args.domain is not None
                    else range(len(dataset.domain_names)))

    pairs_by_domain = {}
    if args.oracle:
        for d in eval_domains:
            pairs_by_domain[dataset.domain_names[d]] = [
                (s.mask, s.mask) for s in dataset.samples(d)]
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --oracle is set")
        params = load_checkpoint(args.checkpoint)
        if args.domain is None and params.num_domains != len(dataset.domain_names):
            raise ConfigError(
                f"checkpoint covers {params.num_domains} domains but the "
                f"dataset has {len(dataset.domain_names)}; pass --domain to "
                "evaluate a single one")
        if args.domain is not None and params.num_domains not in (1, len(dataset.domain_names)):
            raise ConfigError(
                f"checkpoint covers {params.num_domains} domains, which "
                f"matches neither this dataset nor a single-domain model")
        refine_params = (load_checkpoint(args.refine_checkpoint)
                         if args.refine_checkpoint else None)
        segment = _segment_fn(params, refine_params, refine_cfg, args.refine)
        for d in eval_domains:
            model_domain = 0 if params.num_domains == 1 else d
            masks = thread_map(lambda s: segment(model_domain, s.image),
                               dataset.samples(d))
            pairs_by_domain[dataset.domain_names[d]] = [
                (pred, s.mask) for pred, s in zip(masks, dataset.samples(d))]

    report = evaluate_masks(pairs_by_domain)
    text = report.to_text()
    print(text)
    if args.report_out:
        base = Path(args.report_out)
        try:
            base.with_suffix(".txt").write_text(text + "\n")
            base.with_suffix(".json").write_text(report.to_json() + "\n")
        except OSError as e:
            raise FilesystemError(f"cannot write report {base}: {e}") from e
        print(f"reports: {base.with_suffix('.txt')}, {base.with_suffix('.json')}")
    return 0


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args) -> int:
    cfg = _load_run_config(args)
    refine_cfg = cfgmod.refine_config(cfg)

    t0 = time.perf_counter()
    params = load_checkpoint(args.checkpoint)
    refine_params = (load_checkpoint(args.refine_checkpoint)
                     if args.refine_checkpoint else None)
    image = read_image(args.image)
    t_load = time.perf_counter() - t0
    if not 0 <= args.domain < params.num_domains:
        raise ConfigError(f"--domain {args.domain} out of range: checkpoint "
                          f"covers {params.num_domains} domains")

    t1 = time.perf_counter()
    if args.refine:
        result = refine_iterate(params, args.domain, image, refine_cfg,
                                refine_params=refine_params)
    else:
        result = segment_once(params, args.domain, image, refine_cfg)
    t_seg = time.perf_counter() - t1

    t2 = time.perf_counter()
    write_mask_pgm(args.out, result.final_mask)
    if args.overlay:
        overlay = image.copy()
        overlay[boundary_mask(result.final_mask)] = 1.0
        write_pgm(args.overlay, overlay)
    t_write = time.perf_counter() - t2

    print(f"iterations: {result.iterations}")
    print(f"load time: {t_load:.3f} s")
    print(f"segmentation time: {t_seg:.3f} s")
    print(f"write time: {t_write:.3f} s")
    print(f"total time: {time.perf_counter() - t0:.3f} s")
    print(f"mask: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# grad-check

# one instance of every layer geometry the presets use, at toy channel
# counts so the float64 finite-difference sweep stays fast
CHECK_SPECS = (
    LayerSpec("conv", in_channels=3, out_channels=4,
              kernel_h=3, kernel_w=3, stride=1, padding=1),
    LayerSpec("conv", in_channels=4, out_channels=3,
              kernel_h=1, kernel_w=1, stride=1, padding=0),
    LayerSpec("deconv", in_channels=3, out_channels=2,
              kernel_h=4, kernel_w=4, stride=2),
    LayerSpec("maxpool", kernel_h=2, kernel_w=2, stride=2),
    LayerSpec("relu"),
)


def cmd_grad_check(args) -> int:
    failures = []
    for spec in CHECK_SPECS:
        for offset in range(args.seeds):
            seed = args.seed + offset
            report = grad_check(spec, rng_seed=seed, tolerance=args.tolerance)
            status = "PASS" if report.passed else "FAIL"
            print(f"{status} {report.layer} seed={seed} "
                  f"max_rel_err={report.max_rel_error:.3e}")
            if not report.passed:
                failures.append(report.layer)
    if failures:
        print(f"{len(failures)} gradient check(s) failed", file=sys.stderr)
        return 1
    print(f"all gradient checks passed at tolerance {args.tolerance:g}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(sub):
    sub.add_argument("--config", help="JSON run config (defaults apply if omitted)")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config field, e.g. train.epochs=3")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdseg",
        description="Multi-domain FCN segmentation: synthetic data, "
                    "training, evaluation, and iterative refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic PGM dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a segmentation network")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--variant", choices=("ml", "sd", "md"),
                   help="network variant (default from config)")
    p.add_argument("--domain", type=int,
                   help="dataset domain to train on (sd variant only)")
    p.add_argument("--stats", help="per-epoch loss CSV (default: <out>.csv)")
    train_parser = p
    p.set_defaults(func=lambda a: cmd_train(a, train_parser))

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--domain", type=int, help="evaluate one domain only")
    p.add_argument("--refine", action="store_true",
                   help="run iterative crop-and-refine instead of one pass")
    p.add_argument("--refine-checkpoint",
                   help="separate crop-trained network for refinement passes")
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (harness check)")
    p.add_argument("--report-out", help="basename for .txt/.json reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one PGM image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input P5 PGM")
    p.add_argument("--out", required=True, help="output mask PGM")
    p.add_argument("--domain", type=int, default=0)
    p.add_argument("--refine", action="store_true")
    p.add_argument("--refine-checkpoint")
    p.add_argument("--overlay", help="also write a boundary-overlay PGM")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("grad-check",
                       help="verify analytical gradients by finite differences")
    p.add_argument("--seed", type=int, default=0, help="base rng seed")
    p.add_argument("--seeds", type=int, default=5,
                   help="number of seeds per layer kind")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MdsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
