"""Command-line entry point: ``agrp <command> ...``.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric
failure (divergence, gradient check failure), 4 artifact mismatch
(checkpoint incompatible with data, malformed files).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, evaluator, gradsuite
from .config import ExperimentConfig, build_dataset
from .data import gen_synthetic, inject_noise, load_dataset, load_idx, noise_summary, save_dataset, stack_pixels
from .errors import (
    AgrpError,
    CapabilityError,
    ConfigurationError,
    ConsistencyError,
    DimensionError,
    DomainError,
    EvaluationError,
    FormatError,
    TruncatedFileError,
)
from .trainer import UNGROUPED, TrainConfig, train

log = logging.getLogger("agrp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4

HISTORY_HEADER = ("epoch", "l_class", "r_term", "total", "lr")
SWEEP_HEADER = ("noise_level", "group_size", "seed", "variant", "accuracy", "map")
PREDICTION_HEADER = ("image_id", "true_label", "predicted", "correct")


class UsageError(Exception):
    """Bad command-line flags."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConfigurationError, DomainError)):
        return EXIT_CONFIG
    if isinstance(exc, EvaluationError):
        return EXIT_NUMERIC
    if isinstance(exc, (DimensionError, ConsistencyError, FormatError, TruncatedFileError, CapabilityError, OSError)):
        return EXIT_MISMATCH
    return EXIT_CONFIG


def _metric(name: str, value) -> None:
    print(f"{name}={value}")


# ----------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    if args.idx_images:
        if not (args.idx_labels and args.distractor_images and args.distractor_labels):
            raise UsageError("--idx-images needs --idx-labels, --distractor-images and --distractor-labels")
        if not 0.0 <= args.noise_level < 1.0:
            raise DomainError(f"noise level must lie in [0, 1), got {args.noise_level}")
        clean = load_idx(args.idx_images, args.idx_labels)
        distractors = load_idx(args.distractor_images, args.distractor_labels)
        test = load_idx(args.test_images, args.test_labels) if args.test_images else None
        ds = inject_noise(clean, args.noise_level, distractors, args.seed, test=test)
    else:
        ds = gen_synthetic(args.classes, args.per_class, args.image_side, args.noise_level, args.seed, args.background)
    save_dataset(ds, args.out)
    counts = noise_summary(ds)
    print(json.dumps({"train": len(ds.train), "test": len(ds.test), "negatives": len(ds.negatives), **counts}, sort_keys=True))
    _metric("noise_level", ds.observed_noise())
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def write_history(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_HEADER)
        for r in history.records:
            w.writerow([r.epoch, repr(r.l_class), repr(r.r_term), repr(r.total), repr(r.lr)])


def cmd_train(args) -> int:
    exp = ExperimentConfig.load(args.config)
    out = Path(args.out or exp.output_dir)
    cfg = exp.train.resolved()
    exp = dataclasses.replace(exp, train=cfg, output_dir=str(out))
    ds = build_dataset(exp.dataset)
    exp.echo(out)
    model, history = train(cfg, ds)
    checkpoint.save(model, out / "model.agrp")
    write_history(history, out / "history.csv")
    for r in history.records:
        log.info("epoch %d lr=%g l_class=%.4f r=%.4f total=%.4f", r.epoch, r.lr, r.l_class, r.r_term, r.total)
    _metric("accuracy", evaluator.accuracy(model, ds.test) if ds.test else float("nan"))
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval / rerank / attmap


def _load_pair(args):
    model = checkpoint.load(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.image_shape != tuple(model.image_shape):
        raise DimensionError(f"checkpoint expects images {tuple(model.image_shape)}, dataset has {ds.image_shape}")
    if ds.class_count != model.class_count:
        raise ConsistencyError(f"checkpoint has {model.class_count} classes, dataset has {ds.class_count}")
    return model, ds


def cmd_eval(args) -> int:
    model, ds = _load_pair(args)
    images = getattr(ds, args.split)
    if not images:
        raise DomainError(f"split {args.split!r} is empty")
    scores = evaluator.predict_batch(model, stack_pixels(images))
    predicted = np.argmax(scores, axis=1)
    truth = [im.true_label if args.split == "test" else im.given_label for im in images]
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(PREDICTION_HEADER)
            for im, t, p in zip(images, truth, predicted):
                w.writerow([im.id, t, int(p), int(t == p)])
    _metric("accuracy", evaluator.accuracy_from_scores(scores, truth))
    return EXIT_OK


def cmd_rerank(args) -> int:
    model, ds = _load_pair(args)
    result = evaluator.rerank(model, ds.train)
    for c in result.skipped_classes:
        print(f"warning: class {c} has no correctly labelled image; AP undefined and skipped", file=sys.stderr)
    evaluator.write_ranking_csv(result, args.out)
    if args.summary:
        evaluator.write_summary_csv(result, args.summary)
    _metric("map", result.map)
    return EXIT_OK


def cmd_attmap(args) -> int:
    model, ds = _load_pair(args)
    images = getattr(ds, args.split)
    if args.ids:
        wanted = {int(v) for v in args.ids.split(",")}
        images = [im for im in images if im.id in wanted]
        missing = wanted - {im.id for im in images}
        if missing:
            raise DomainError(f"no {args.split} images with ids {sorted(missing)}")
    else:
        images = images[: args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = evaluator.attention_maps(model, stack_pixels(images)) if images else []
    for im, a in zip(images, maps):
        evaluator.write_pgm(out / f"{args.split}_{im.id:06d}.pgm", evaluator.rescale_unit(a))
    boxed = [im for im in images if im.signature_box is not None]
    if boxed:
        _metric("localization", evaluator.localization_score(model, boxed))
    else:
        _metric("maps", len(images))
    return EXIT_OK


# ----------------------------------------------------------------------------
# sweep


def sweep_cells(exp: ExperimentConfig):
    """Every (noise_level, group_size, seed, variant) cell, K=1 mapped to its ungrouped variant."""
    cells = []
    for xi in exp.noise_levels:
        for K in exp.group_sizes:
            for seed in exp.seeds:
                for variant in exp.variants:
                    v = UNGROUPED[variant] if K == 1 else variant
                    cell = (float(xi), int(K), int(seed), v)
                    if cell not in cells:
                        cells.append(cell)
    return cells


def _read_done(path: Path) -> set:
    if not path.exists():
        return set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return set()
        if tuple(header) != SWEEP_HEADER:
            raise FormatError(f"{path}: unexpected header {header}")
        return {(float(r[0]), int(r[1]), int(r[2]), r[3]) for r in reader if r}


def run_cell(exp_dict: dict, cell) -> tuple:
    """Train and score one sweep cell; module-level so worker processes can pickle it."""
    exp = ExperimentConfig.from_dict(exp_dict)
    xi, K, seed, variant = cell
    cfg = TrainConfig.from_dict({**exp.train.to_dict(), "variant": variant, "group_size": K, "seed": seed})
    ds = build_dataset(exp.dataset, noise_level=xi, seed=seed)
    model, _ = train(cfg, ds)
    return cell, evaluator.accuracy(model, ds.test), evaluator.rerank(model, ds.train).map


def _append_row(path: Path, row) -> None:
    """Append one fully formatted CSV line in a single write."""
    buf = io.StringIO()
    csv.writer(buf).writerow(row)
    with open(path, "a", newline="") as f:
        f.write(buf.getvalue())
        f.flush()
        os.fsync(f.fileno())


def thread_budget() -> int:
    raw = os.environ.get("AGRP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"AGRP_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigurationError(f"AGRP_THREADS must be >= 1, got {n}")
    return n


def cmd_sweep(args) -> int:
    exp = ExperimentConfig.load(args.config)
    out = Path(args.out or exp.output_dir)
    exp = dataclasses.replace(exp, output_dir=str(out))
    exp.echo(out)
    path = out / "sweep.csv"
    done = _read_done(path)
    if not path.exists() or path.stat().st_size == 0:
        _append_row(path, SWEEP_HEADER)
    todo = [c for c in sweep_cells(exp) if c not in done]
    log.info("%d cells, %d already done", len(todo) + len(done), len(done))
    failures = []
    workers = min(thread_budget(), max(len(todo), 1))

    def record(cell, acc, mean_ap):
        xi, K, seed, variant = cell
        _append_row(path, [repr(xi), K, seed, variant, repr(acc), repr(mean_ap)])

    exp_dict = exp.to_dict()
    if workers == 1:
        for cell in todo:
            try:
                record(*run_cell(exp_dict, cell))
            except EvaluationError as exc:
                failures.append((cell, exc))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_cell, exp_dict, cell): cell for cell in todo}
            for fut, cell in futures.items():
                try:
                    record(*fut.result())
                except EvaluationError as exc:
                    failures.append((cell, exc))
    for cell, exc in failures:
        print(f"cell {cell} failed: {exc}", file=sys.stderr)
    _metric("cells", len(todo) - len(failures))
    return EXIT_NUMERIC if failures else EXIT_OK


# ----------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    worst = gradsuite.run_suite(seeds=args.seeds, perturb=args.perturb)
    ok = True
    for name, err in worst.items():
        passed = err < gradsuite.TOLERANCE
        ok &= passed
        print(f"{name:<14} {err:.3e} {'PASS' if passed else 'FAIL'}")
    _metric("max_rel_error", max(worst.values()))
    return EXIT_OK if ok else EXIT_NUMERIC


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agrp", description="Noise-robust training with random grouping and attention pooling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate or ingest a noisy dataset")
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--image-side", type=int, default=16)
    g.add_argument("--background", type=float, default=1.0, help="width of the uniform background interval")
    g.add_argument("--noise-level", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--idx-images")
    g.add_argument("--idx-labels")
    g.add_argument("--distractor-images")
    g.add_argument("--distractor-labels")
    g.add_argument("--test-images")
    g.add_argument("--test-labels")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model from an experiment config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (default: the config's output_dir)")
    t.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("eval", cmd_eval, "test accuracy of a checkpoint"),
        ("rerank", cmd_rerank, "re-rank training images per class and report MAP"),
        ("attmap", cmd_attmap, "write attention heatmaps as PGM files"),
    ):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True, help="dataset directory written by gen-data")
        e.set_defaults(func=func)
        if name == "eval":
            e.add_argument("--split", choices=("test", "train"), default="test")
            e.add_argument("--out", help="per-image prediction CSV")
        elif name == "rerank":
            e.add_argument("--out", required=True, help="ranking CSV")
            e.add_argument("--summary", help="per-class AP CSV")
        else:
            e.add_argument("--split", choices=("test", "train"), default="test")
            e.add_argument("--ids", help="comma-separated image ids")
            e.add_argument("--limit", type=int, default=16)
            e.add_argument("--out", required=True, help="directory for .pgm files")

    s = sub.add_parser("sweep", help="train a grid of variants, group sizes, noise levels and seeds")
    s.add_argument("config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--perturb", action="store_true", help="scale analytic gradients by 1.01 to prove failures are caught")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except (UsageError, AgrpError, OSError, ValueError, ArithmeticError) as exc:
        print(f"agrp: error: {exc}".splitlines()[0], file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
