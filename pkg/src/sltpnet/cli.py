"""Command-line entry point: ``sltpnet <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure (including invariant violations
such as a weights count mismatch), 2 usage error or missing input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import labeler as L
from . import model as M
from . import phantom as P
from . import roi as R
from . import stats as S
from .seeding import substream
from .train import TrainConfig, TrainingError, evaluate, train

log = logging.getLogger("sltpnet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input not found: {path}")
    return p


def _write_manifest(out: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"command": command, "version": __version__, "config": resolved}
    if extra:
        doc.update(extra)
    (out / f"{command}_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------


def _phantom_spec(args) -> P.PhantomSpec:
    return P.PhantomSpec(
        dims=tuple(args.dims),
        n_subjects=args.subjects,
        class_sd=args.class_sd,
        blobs_per_class=args.blobs_per_class,
        repeat_noise_sd=args.repeat_noise,
        repeat_jitter=args.repeat_jitter,
        seed=args.seed,
    )


def cmd_phantom(args) -> int:
    spec = _phantom_spec(args)
    spec.validate()
    out = _out_dir(args.out)
    manifest = P.write_cohort(spec, out, repeat=args.repeat)
    _write_manifest(out, "phantom", args, {"spec": spec.to_dict()})
    print(f"wrote {spec.n_subjects} subjects to {manifest}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    if args.dry_run is not None:
        counts = R.dry_run_counts(args.dry_run, tuple(args.ratios))
        print(f"balanced per class: {int(counts.per_class_balanced[0])}  total: {counts.total_balanced}")
        print(f"train: {counts.train}  val: {counts.val}  test: {counts.test}")
        print(f"augmented train: {counts.train_augmented}")
        return EXIT_OK
    cohort = _existing(args.cohort)
    subjects = P.read_cohort(cohort)
    out = _out_dir(args.out)
    ds = R.build_dataset(
        subjects,
        args.max_per_subject,
        lambda i: substream(args.seed, "roi.sample", i),
        substream(args.seed, "roi.balance"),
        substream(args.seed, "roi.split"),
        tuple(args.ratios),
        args.seed,
        args.max_attempts,
    )
    index = R.export_dataset(ds, out)
    counts = ds.counts()
    _write_manifest(out, "build-dataset", args, {"counts": counts})
    print(f"wrote {len(ds.samples)} ROIs to {index}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    ds = R.load_dataset(_existing(args.dataset), args.seed)
    out = _out_dir(args.out)
    tc = TrainConfig(
        batch_size=args.batch,
        epochs=args.epochs,
        lr0=args.lr,
        momentum=args.momentum,
        decay=args.decay,
        seed=args.seed,
        augment=not args.no_augment,
    )
    weights, history = train(ds, M.SECNNConfig(), tc)
    M.save_weights(weights, out / "weights.ewt")
    history.write_csv(out / "history.csv")
    _write_manifest(out, "train", args, {"best_epoch": history.best_epoch})
    print(f"best epoch {history.best_epoch}: val accuracy {100 * history.val_acc[history.best_epoch - 1]:.2f}%")
    return EXIT_OK


def cmd_eval(args) -> int:
    weights = M.load_weights(_existing(args.weights))
    ds = R.load_dataset(_existing(args.dataset))
    samples = ds.subset(args.split) if args.split != "all" else ds.samples
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    out = _out_dir(args.out)
    res = evaluate(weights, samples, args.batch)
    true = np.array([s.label for s in samples])
    cm = S.confusion(true, res.predictions)
    cc = S.collapse_to_ctes(cm)
    S.write_confusion_csv(cm, out / "confusion_sltp.csv")
    S.write_confusion_csv(cc, out / "confusion_ctes.csv")
    (out / "confusion_sltp.svg").write_text(S.confusion_svg(cm, "sLTP"))
    (out / "confusion_ctes.svg").write_text(S.confusion_svg(cc, "CTES"))
    groups = S.stratify_accuracy(
        [s.scanner_model for s in samples], [s.subject_id for s in samples], true, res.predictions
    )
    S.write_group_csv(groups, out / "per_scanner.csv")
    with open(out / "predictions.csv", "w") as fh:
        fh.write("index,subject_id,scanner_model,label,predicted\n")
        for i, (s, p) in enumerate(zip(samples, res.predictions)):
            fh.write(f"{i},{s.subject_id},{s.scanner_model},{s.label},{int(p)}\n")
    _write_manifest(out, "eval", args, {"sltp_accuracy": cm.accuracy, "ctes_accuracy": cc.accuracy})
    print(f"sLTP accuracy: {100 * cm.accuracy:.2f}%")
    print(f"CTES accuracy: {100 * cc.accuracy:.2f}%")
    return EXIT_OK


def _label_one(job):
    weights_path, subject, spacing, batch, seed, index = job
    weights = M.load_weights(weights_path)
    return L.label_subject(weights, subject, spacing, batch, rng=substream(seed, "labeler.surs", index, 0))


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_label(args) -> int:
    weights_path = _existing(args.weights)
    subjects = P.read_cohort(_existing(args.cohort))
    out = _out_dir(args.out)
    jobs = [(weights_path, s, args.spacing, args.batch, args.seed, i) for i, s in enumerate(subjects)]
    results = _map(_label_one, jobs, args.workers)
    (out / "centroids").mkdir(exist_ok=True)
    for r in results:
        r.write_centroids_csv(out / "centroids" / f"{r.subject_id}.csv")
    L.write_histograms_csv(results, out / "histograms.csv", "visit")
    L.write_timing_json(results, out / "timing.json")
    _write_manifest(out, "label", args)
    rep = L.timing_report(results)
    if rep["ms_per_roi"] is not None:
        print(f"labelled {rep['n_classified']} ROIs: {rep['ms_per_roi']:.2f} ms/ROI, {rep['rois_per_second']:.1f} ROIs/s")
    else:
        print("no ROI passed the emphysema gate")
    return EXIT_OK


def cmd_repro(args) -> int:
    weights = M.load_weights(_existing(args.weights))
    cohort = _existing(args.cohort)
    visits = P.read_cohort(cohort)
    repeats = P.read_cohort(cohort, repeat=True)
    out = _out_dir(args.out)
    res = L.reproducibility_run(
        weights, list(zip(visits, repeats)), args.spacing, args.seed, args.batch, shared_phase=args.shared_phase
    )
    S.write_repro_csv(res.rows, out / "repro.csv")
    L.write_histograms_csv(res.visit, out / "histograms_visit.csv", "visit")
    L.write_histograms_csv(res.repeat, out / "histograms_repeat.csv", "repeat")
    L.write_timing_json(res.visit + res.repeat, out / "timing.json")
    _write_manifest(out, "repro", args)
    for r in res.rows:
        print(f"{r['level']:5s} {r['class']:>18s}  {r['display']}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sltpnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, workers=False):
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        if workers:
            sp.add_argument("--workers", type=_positive_int, default=1, help="worker processes; outputs do not depend on it")

    sp = sub.add_parser("phantom", help="generate a synthetic cohort")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=_positive_int, default=4)
    sp.add_argument("--dims", type=_positive_int, nargs=3, default=list(P.PhantomSpec().dims), metavar=("NX", "NY", "NZ"))
    sp.add_argument("--class-sd", type=float, default=P.PhantomSpec().class_sd)
    sp.add_argument("--blobs-per-class", type=_positive_int, default=P.PhantomSpec().blobs_per_class)
    sp.add_argument("--repeat", action="store_true", help="also write a repeat scan per subject")
    sp.add_argument("--repeat-noise", type=float, default=P.PhantomSpec().repeat_noise_sd)
    sp.add_argument("--repeat-jitter", type=int, default=P.PhantomSpec().repeat_jitter)
    common(sp)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("build-dataset", help="sample, balance and split ROIs")
    sp.add_argument("--cohort", help="cohort.csv written by 'phantom'")
    sp.add_argument("--out")
    sp.add_argument("--max-per-subject", type=_positive_int, default=None)
    sp.add_argument("--max-attempts", type=_positive_int, default=4000)
    sp.add_argument("--ratios", type=float, nargs=3, default=[0.6, 0.2, 0.2])
    sp.add_argument(
        "--dry-run", type=_positive_int, nargs="+", metavar="COUNT",
        help="count-only mode: per-class sampled counts (one value applies to all 10 classes)",
    )
    common(sp)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("train", help="train the classifier")
    sp.add_argument("--dataset", required=True, help="index.csv written by 'build-dataset'")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=_positive_int, default=350)
    sp.add_argument("--batch", type=_positive_int, default=32)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--momentum", type=float, default=0.6)
    sp.add_argument("--decay", type=float, default=1e-6)
    sp.add_argument("--no-augment", action="store_true", help="skip the fourfold reflection augmentation")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy, confusion matrices and per-scanner table")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--batch", type=_positive_int, default=64)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("label", help="dense SURS labelling with emphysema gating")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--spacing", type=_positive_int, default=L.DEFAULT_SPACING)
    sp.add_argument("--batch", type=_positive_int, default=64)
    common(sp, workers=True)
    sp.set_defaults(func=cmd_label)

    sp = sub.add_parser("repro", help="scan-rescan R^2 and ICC(3,1) tables")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--cohort", required=True, help="cohort.csv with repeat scans")
    sp.add_argument("--out", required=True)
    sp.add_argument("--spacing", type=_positive_int, default=L.DEFAULT_SPACING)
    sp.add_argument("--batch", type=_positive_int, default=64)
    sp.add_argument("--shared-phase", action="store_true", help="use one SURS phase for both scans of a subject")
    common(sp)
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "build-dataset" and args.dry_run is None and not (args.cohort and args.out):
        parser.error("build-dataset needs --cohort and --out unless --dry-run is given")
    if args.command == "build-dataset" and args.dry_run is not None and len(args.dry_run) not in (1, R.NUM_CLASSES):
        print(f"error: --dry-run takes 1 or {R.NUM_CLASSES} counts", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "build-dataset" and args.dry_run is not None and len(args.dry_run) == 1:
        args.dry_run = args.dry_run * R.NUM_CLASSES
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        M.WeightsError,
        M.ConfigError,
        P.PhantomError,
        R.DatasetError,
        S.StatsError,
        TrainingError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
