"""Command-line entry point: ``advaug <command> [flags]``.

Every command prints line-delimited JSON records on stdout. Exit codes:
0 success, 1 check failed, 2 usage error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(ValueError):
    pass


def _emit(record: dict, stream=None) -> None:
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    from .data import PhantomSpec, generate_phantoms, save_dataset, spec_to_dict

    spec = PhantomSpec(n_classes=args.classes, size=args.size)
    samples = generate_phantoms(spec, args.n + args.test, args.seed)
    splits = ["train"] * args.n + ["test"] * args.test
    out = save_dataset(args.out, samples, splits, meta={"seed": args.seed, "phantom": spec_to_dict(spec)})
    _emit({"command": "gen-data", "out": str(out), "train": args.n, "test": args.test, "seed": args.seed})
    return EXIT_OK


# ---------------------------------------------------------------- train


def _train_config(args):
    from .trainer import TrainConfig, load_config

    cfg = load_config(args.config).to_dict() if args.config else TrainConfig().to_dict()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg[key] = _parse_value(value)
    if args.strategy is not None:
        cfg["strategy"] = args.strategy
    if args.seed is not None:
        cfg["seed"] = args.seed
    return TrainConfig.from_dict(cfg)


def cmd_train(args) -> int:
    from .data import load_dataset
    from .segnet import NumericalError, save_checkpoint
    from .trainer import finetune, pretrain

    cfg = _train_config(args)
    pool = load_dataset(args.data, "train")
    if args.labeled < 1 or args.labeled + args.unlabeled > len(pool):
        raise UsageError(f"need 1 <= labeled and labeled + unlabeled <= {len(pool)} training samples")
    labeled = pool[: args.labeled]
    unlabeled = pool[args.labeled : args.labeled + args.unlabeled]
    val = load_dataset(args.data, "test") if args.validate else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_dict(), "labeled": [s.subject_id for s in labeled], "unlabeled": [s.subject_id for s in unlabeled]}

    with open(out / "reports.jsonl", "w") as log:

        def on_report(r):
            log.write(r.to_json() + "\n")
            log.flush()
            if args.verbose:
                print(r.to_json(), flush=True)

        try:
            model, _ = pretrain(cfg, labeled, val, on_report)
            model, ema, _ = finetune(cfg, model, labeled, unlabeled, val, on_report)
        except NumericalError as err:
            if err.model is not None:
                save_checkpoint(out / "checkpoint", err.model, None, {**meta, "diverged": str(err)})
            _emit({"command": "train", "error": "numerical", "detail": str(err), "out": str(out)}, sys.stderr)
            return EXIT_NUMERICAL
    ckpt = save_checkpoint(out / "checkpoint", model, ema, meta)
    _emit({"command": "train", "checkpoint": str(ckpt), "reports": str(out / "reports.jsonl"), "strategy": cfg.strategy})
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .segnet import load_checkpoint
    from .trainer import evaluate

    model, ema, _ = load_checkpoint(args.checkpoint)
    use_raw = args.raw_weights or ema is None
    test = load_dataset(args.data, args.split)
    if not test:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    n_classes = model.config["n_classes"]
    result = evaluate(model if use_raw else ema, test, n_classes)
    weights = "raw" if use_raw else "ema"
    for c, d in result["per_class"].items():
        _emit({"command": "eval", "weights": weights, "class": int(c), "dice": d})
    _emit({"command": "eval", "weights": weights, "foreground_mean": result["foreground_mean"], "n_images": len(test)})
    return EXIT_OK


# ---------------------------------------------------------------- augment


def _to_u8(img: torch.Tensor) -> np.ndarray:
    return (img.clamp(0, 1) * 255).round().to(torch.uint8).numpy()


def _labels_u8(prob: torch.Tensor) -> np.ndarray:
    n = prob.shape[0]
    return (prob.argmax(0) * (255 // max(n - 1, 1))).to(torch.uint8).numpy()


def render_panel(x, x_aug, before, after, pulled) -> np.ndarray:
    """Five tiles side by side: input, augmented, prediction before, after, after pull-back."""
    tiles = [_to_u8(x[0]), _to_u8(x_aug[0]), _labels_u8(before), _labels_u8(after), _labels_u8(pulled)]
    h = tiles[0].shape[0]
    sep = np.full((h, 2), 128, np.uint8)
    row = []
    for t in tiles:
        row += [t, sep]
    return np.concatenate(row[:-1], axis=1)


def cmd_augment(args) -> int:
    from PIL import Image

    from . import transforms as tf
    from .adversary import AdversaryConfig, optimize_chain
    from .chain import Chain, apply_chain, pull_back
    from .data import load_dataset, stack
    from .losses import DistanceConfig, consistency_loss
    from .segnet import load_checkpoint

    if not Path(args.checkpoint, "manifest.json").exists():
        raise FileNotFoundError(f"no model checkpoint at {args.checkpoint}")
    model, ema, _ = load_checkpoint(args.checkpoint)
    f = model if args.raw_weights or ema is None else ema.model
    f.eval()
    samples = load_dataset(args.data, args.split)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index must be in [0, {len(samples)})")
    x = stack([samples[args.index]])[0]
    strategy = "advchain" if args.mode == "adversarial" else "randchain"
    cfg = AdversaryConfig(k=args.k, alpha=args.alpha, strategy=strategy, p=args.p, distance=DistanceConfig(0.5, args.distance))
    rng = torch.Generator().manual_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        before = f(x)
    losses, dumps = [], []
    for trial in range(args.trials):
        chain, _ = optimize_chain(x, f, cfg, rng, before)
        if args.identity:
            shape = (1, x.shape[2], x.shape[3])
            chain = Chain(tuple(tf.identity_params(m.family, shape, cfg.constraints, x.dtype) for m in chain.members), chain.p)
        with torch.no_grad():
            x_aug = apply_chain(chain, x)
            after = f(x_aug)
            pulled = pull_back(chain, after)
            loss = float(consistency_loss(x, f, chain, cfg.distance, before))
        losses.append(loss)
        record = {"command": "augment", "trial": trial, "mode": args.mode, "families": list(chain.families), "consistency": loss}
        if trial < args.panels:
            path = out / f"panel_{trial:03d}.png"
            Image.fromarray(render_panel(x[0], x_aug[0], before[0], after[0], pulled[0])).save(path)
            record["panel"] = str(path)
        if args.dump_params:
            dumps.append(chain.to_dict())
        _emit(record)
    if args.dump_params:
        Path(args.dump_params).write_text(json.dumps({"mode": args.mode, "chains": dumps}, indent=2))
    _emit({"command": "augment", "mode": args.mode, "trials": args.trials, "mean_consistency": float(np.mean(losses))})
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASE_GROUPS, TOLERANCE, run_suite, summarize

    groups = args.groups or tuple(CASE_GROUPS)
    unknown = sorted(set(groups) - set(CASE_GROUPS))
    if unknown:
        raise UsageError(f"unknown groups {unknown}; choose from {sorted(CASE_GROUPS)}")
    t0 = time.perf_counter()
    results = run_suite(n_instances=args.instances, seed=args.seed, groups=groups)
    failed = 0
    for (name, block, dtype), err in sorted(summarize(results).items()):
        tol = args.tolerance if args.tolerance is not None else TOLERANCE[getattr(torch, dtype)]
        ok = err < tol
        failed += not ok
        _emit({"command": "gradcheck", "op": name, "block": block, "dtype": dtype, "max_rel_error": err, "tolerance": tol, "pass": ok})
    _emit({"command": "gradcheck", "failed": failed, "instances": args.instances, "seconds": round(time.perf_counter() - t0, 2)})
    return EXIT_OK if failed == 0 else EXIT_FAILED


# ---------------------------------------------------------------- bench-chain


def bench_regularizer(f, x, cfg, seed: int = 0) -> dict:
    """Forward passes and wall time of one regularizer evaluation plus backward.

    The clean prediction is computed once and shared; ``perturbed_passes``
    counts predictor calls on transformed images (PGD and regularization).
    """
    from .adversary import CountingPredictor, regularizer

    counter = CountingPredictor(f)
    rng = torch.Generator().manual_seed(seed)
    t0 = time.perf_counter()
    with torch.no_grad():
        reference = f(x)
    loss, chains = regularizer(x, counter, cfg, rng, reference)
    loss.backward()
    seconds = time.perf_counter() - t0
    return {
        "clean_passes": 1,
        "perturbed_passes": counter.calls,
        "total_passes": counter.calls + 1,
        "passes_per_item": (counter.items + x.shape[0]) / x.shape[0],
        "seconds": seconds,
        "families": [list(c.families) for c in chains],
    }


def cmd_bench_chain(args) -> int:
    from . import transforms as tf
    from .adversary import AdversaryConfig
    from .chain import enumerate_diversity
    from .data import PhantomSpec, generate_phantoms, stack
    from .segnet import SegNet, load_checkpoint

    for n in range(1, 5):
        chains, combos = enumerate_diversity(n)
        _emit({"command": "bench-chain", "n_families": n, "chain": chains, "combination": combos})
    if args.checkpoint:
        f = load_checkpoint(args.checkpoint)[0]
    else:
        torch.manual_seed(args.seed)
        f = SegNet()
    x = stack(generate_phantoms(PhantomSpec(size=args.size), args.batch, args.seed))[0]
    for l in range(1, 5):
        families = tf.FAMILIES[:l]
        for strategy in ("advchain", "advcomb"):
            cfg = AdversaryConfig(k=args.k, strategy=strategy, p=1.0, families=families)
            f.zero_grad(set_to_none=True)
            r = bench_regularizer(f, x, cfg, args.seed)
            _emit({"command": "bench-chain", "strategy": strategy, "l": l, "k": args.k, "batch": args.batch, **r})
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advaug", description="Adversarial chained data augmentation for segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=22, help="training samples")
    p.add_argument("--test", type=int, default=0, help="additional test samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pre-train then fine-tune with a regularization strategy")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--strategy", choices=("advchain", "advcomb", "randchain", "none"))
    p.add_argument("--labeled", type=int, default=2)
    p.add_argument("--unlabeled", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (JSON value)")
    p.add_argument("--validate", action="store_true", help="report test-split Dice every epoch")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class Dice of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--raw-weights", action="store_true", help="evaluate raw weights instead of the EMA shadow")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="render random or adversarial augmentations of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", choices=("random", "adversarial"), default="adversarial")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--panels", type=int, default=1, help="write panels for the first N trials")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--distance", default="mse+contour")
    p.add_argument("--identity", action="store_true", help="replace sampled parameters by the identity")
    p.add_argument("--raw-weights", action="store_true")
    p.add_argument("--dump-params", metavar="PATH", help="write chain parameters as JSON")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    p.add_argument("--tolerance", type=float, help="override the per-precision tolerances")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--groups", nargs="+", metavar="GROUP", help="restrict to these operation groups")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-chain", help="diversity table and AdvChain vs AdvComb cost")
    p.add_argument("--checkpoint")
    p.add_argument("--batch", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_chain)
    return parser


def main(argv=None) -> int:
    from .data import CorruptFileError
    from .segnet import NumericalError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as err:
        _emit({"error": "numerical", "detail": str(err)}, sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CorruptFileError) as err:
        _emit({"error": "io", "detail": str(err)}, sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError, KeyError) as err:
        _emit({"error": "usage", "detail": str(err)}, sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
