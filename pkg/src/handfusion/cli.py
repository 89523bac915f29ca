"""Command-line entry point.

    handfusion [--config PATH] [--run-dir PATH] [--seed N] [--dry-run] COMMAND ...

Commands: dataset build|qa|toy, train, infer, eval, ablate lambda|trainsize.
Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 adapter failures over budget.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import adapters
from .artifacts import MetricReport, write_json
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("handfusion")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_ADAPTER = 0, 1, 2, 3


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handfusion", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--run-dir", help="root directory for run outputs")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan, write nothing")
    p.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build, score or synthesize a dataset")
    dsub = ds.add_subparsers(dest="action", required=True)
    b = dsub.add_parser("build", help="caption and enrich <images>/<gesture>/*.png")
    b.add_argument("--images", required=True)
    b.add_argument("--labels", required=True, help="comma-separated gesture labels")
    b.add_argument("--out", required=True)
    b.add_argument("--n-train", type=int, required=True)
    b.add_argument("--n-test", type=int, required=True)
    b.add_argument("--captioner", choices=["remote", "glyph"], default="remote")
    b.add_argument("--enricher", choices=["remote", "template"], default="remote")
    b.add_argument("--retries", type=int, default=2)
    b.add_argument("--failure-budget", type=float, default=0.01)
    b.add_argument("--workers", type=int, default=8)
    q = dsub.add_parser("qa", help="image-caption consistency and caption-caption similarity")
    q.add_argument("--dataset", help="dataset root (default: config dataset_dir)")
    q.add_argument("--embedder", choices=["glyph", "remote", "identity", "orthogonal"], default="glyph")
    q.add_argument("--label", help="row label (default: the captioner recorded in the dataset)")
    q.add_argument("--split", choices=["train", "test", "all"], default="all")
    q.add_argument("--max-pairs", type=int, default=100_000)
    q.add_argument("--out", help="write the JSON report here")
    t = dsub.add_parser("toy", help="render the synthetic glyph dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--n-per-gesture", type=int, default=700)
    t.add_argument("--n-test", type=int, default=200)
    t.add_argument("--gestures", default="phone call,four,like")
    t.add_argument("--image-size", type=int, default=16)

    tr = sub.add_parser("train", help="stages I-III for the configured gesture")
    tr.add_argument("--dataset", help="override dataset_dir")
    tr.add_argument("--stop-after", choices=["stage1", "stage2", "stage3"])
    tr.add_argument("--eval", action="store_true", help="evaluate on the test split afterwards")

    inf = sub.add_parser("infer", help="generate images from a trained run")
    inf.add_argument("--prompt", required=True)
    inf.add_argument("--mu", type=float, help="inference fusion coefficient (default: configured)")
    inf.add_argument("--n", type=int, default=8)
    inf.add_argument("--steps", type=int, help="DDIM steps (default: configured)")
    inf.add_argument("--raw-text", action="store_true", help="condition on the plain text embedding")
    inf.add_argument("--out", help="output directory (default: <run>/samples/infer)")

    ev = sub.add_parser("eval", help="score generated images against real ones")
    ev.add_argument("--real", help="directory of real PNGs")
    ev.add_argument("--gen", help="directory of generated PNGs")
    ev.add_argument("--dataset", help="override dataset_dir (run evaluation)")
    ev.add_argument("--out", help="write the MetricReport JSON here")

    ab = sub.add_parser("ablate", help="lambda or training-size sweep")
    asub = ab.add_subparsers(dest="action", required=True)
    al = asub.add_parser("lambda")
    al.add_argument("--values", type=_floats, default=None, help="comma-separated, default 0.1..0.9")
    at = asub.add_parser("trainsize")
    at.add_argument("--sizes", type=_ints, default=None, help="comma-separated, default 200,500,800,1000,1200")
    for a in (al, at):
        a.add_argument("--dataset", help="override dataset_dir")
        a.add_argument("--out", default="ablation")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {}
    if args.run_dir is not None:
        overrides["run_dir"] = args.run_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.log_level is not None:
        overrides["log_level"] = args.log_level
    if getattr(args, "dataset", None):
        overrides["dataset_dir"] = args.dataset
    return load_config(args.config, overrides)


def _require_dataset(cfg: RunConfig) -> None:
    if not (Path(cfg.dataset_dir) / "manifest.jsonl").exists():
        raise ConfigError(f"dataset directory {cfg.dataset_dir!r} missing or has no manifest.jsonl")


def _emit(obj: Any) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _image_hash(img: np.ndarray) -> str:
    return hashlib.sha256(adapters.image_to_png(img)).hexdigest()


def _load_png_dir(directory: str) -> list[np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{directory!r} is not a directory")
    files = sorted(p for p in d.rglob("*.png") if p.name != "grid.png")
    if not files:
        raise ConfigError(f"no PNG images under {directory!r}")
    return [adapters.load_png(p) for p in files]


# ---------------------------------------------------------------------------
# Commands


def cmd_dataset(args, cfg: RunConfig) -> int:
    from . import dataset as dsm

    if args.action == "toy":
        gestures = [g.strip() for g in args.gestures.split(",") if g.strip()]
        if args.dry_run:
            _emit({"command": "dataset toy", "out": args.out, "gestures": gestures,
                   "n_per_gesture": args.n_per_gesture, "n_test": args.n_test, "seed": cfg.seed})
            return EXIT_OK
        recs = dsm.make_toy_dataset(args.out, args.n_per_gesture, gestures, args.image_size, cfg.seed, args.n_test)
        _emit({"records": len(recs), "out": args.out, "fingerprint": dsm.dataset_fingerprint(args.out)})
        return EXIT_OK

    if args.action == "build":
        if not Path(args.images).is_dir():
            raise ConfigError(f"image directory {args.images!r} does not exist")
        labels = [g.strip() for g in args.labels.split(",") if g.strip()]
        if args.dry_run:
            _emit({"command": "dataset build", "images": args.images, "labels": labels, "out": args.out,
                   "n_train": args.n_train, "n_test": args.n_test, "captioner": args.captioner,
                   "enricher": args.enricher, "seed": cfg.seed})
            return EXIT_OK
        captioner = dsm.RemoteCaptioner() if args.captioner == "remote" else dsm.GlyphSceneCaptioner()
        enricher = dsm.RemoteEnricher() if args.enricher == "remote" else dsm.TemplateEnricher()
        recs = dsm.build_dataset(args.images, labels, captioner, enricher, args.n_train, args.n_test,
                                 cfg.seed, args.out, args.retries, args.failure_budget, args.workers)
        _emit({"records": len(recs), "out": args.out})
        return EXIT_OK

    # qa
    root = args.dataset or cfg.dataset_dir
    if not (Path(root) / "manifest.jsonl").exists():
        raise ConfigError(f"dataset directory {root!r} missing or has no manifest.jsonl")
    if args.dry_run:
        _emit({"command": "dataset qa", "dataset": root, "embedder": args.embedder, "split": args.split})
        return EXIT_OK
    records = dsm.read_manifest(root)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    embedder = {
        "glyph": lambda: dsm.GlyphConceptEmbedder(),
        "remote": lambda: dsm.RemoteJointEmbedder(),
        "identity": lambda: dsm.ConstantJointEmbedder(8, 0, 0),
        "orthogonal": lambda: dsm.ConstantJointEmbedder(8, 0, 1),
    }[args.embedder]()
    label = args.label
    if label is None:
        meta = Path(root) / "dataset.json"
        label = json.loads(meta.read_text())["captioner"] if meta.exists() else "captioner"
    rows = dsm.qa_rows(records, embedder, root, label, args.max_pairs, cfg.seed)
    report = {"dataset": root, "embedder": embedder.name, "split": args.split, "rows": rows}
    if args.out:
        write_json(args.out, report)
    print(dsm.qa_table(rows))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .pipeline import run_pipeline

    _require_dataset(cfg)
    run_dir = Path(cfg.run_dir) / cfg.digest()[:8]
    if args.dry_run:
        _emit({"command": "train", "run_dir": str(run_dir), "config_hash": cfg.digest(),
               "stop_after": args.stop_after, "evaluate": args.eval, "config": cfg.to_dict()})
        return EXIT_OK
    manifest = run_pipeline(cfg, evaluate=args.eval, stop_after=args.stop_after)
    summary = {"run_dir": str(run_dir), "status": manifest["status"], "stages": manifest["stages"]}
    if "report" in manifest:
        report = MetricReport.from_dict(manifest["report"])
        print(report.table())
        summary["report"] = manifest["report"]
    _emit(summary)
    return EXIT_OK


def _trained_run(cfg: RunConfig):
    from .diffusion import load_checkpoint
    from .fusion import GestureBundle

    run_dir = Path(cfg.run_dir) / cfg.digest()[:8]
    if not (run_dir / "checkpoints" / "final" / "manifest.json").exists():
        raise FileNotFoundError(f"no trained checkpoint in {run_dir}; run `train` with this config first")
    backend = load_checkpoint(run_dir / "checkpoints" / "final")
    bundle = GestureBundle.load(run_dir / "bundle") if cfg.feature_fusion else None
    return run_dir, backend, bundle


def cmd_infer(args, cfg: RunConfig) -> int:
    from .pipeline import make_encoder, run_lock, save_contact_sheet
    from .training import generate_batch

    mu = cfg.mu_infer if args.mu is None else args.mu
    if not 0.0 <= mu <= 1.0:
        raise ConfigError(f"mu={mu} outside [0, 1]")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    steps = args.steps or cfg.eval.n_infer_steps
    seeds = [cfg.seed + i for i in range(args.n)]
    run_dir = Path(cfg.run_dir) / cfg.digest()[:8]
    out = Path(args.out) if args.out else run_dir / "samples" / "infer"
    if args.dry_run:
        _emit({"command": "infer", "run_dir": str(run_dir), "prompt": args.prompt, "mu": mu,
               "seeds": seeds, "steps": steps, "raw_text": args.raw_text, "out": str(out)})
        return EXIT_OK
    run_dir, backend, bundle = _trained_run(cfg)
    if args.raw_text:
        bundle = None
    images = generate_batch([args.prompt] * args.n, bundle, backend, backend.schedule,
                            make_encoder(cfg), mu, seeds, steps)
    out.mkdir(parents=True, exist_ok=True)
    with run_lock(out):
        files = []
        for s, img in zip(seeds, images):
            path = adapters.save_png(out / f"seed{s:06d}.png", img)
            files.append({"seed": s, "path": str(path), "sha256": _image_hash(img)})
        grid = save_contact_sheet(out / "grid.png", list(images))
    _emit({"prompt": args.prompt, "mu": mu, "raw_text": args.raw_text, "images": files, "grid": str(grid)})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluation import evaluate_sets
    from .pipeline import evaluate_run, make_encoder, make_extractor, make_recognizer

    if (args.real is None) != (args.gen is None):
        raise ConfigError("--real and --gen must be given together")
    if args.real is not None:
        if args.dry_run:
            _emit({"command": "eval", "real": args.real, "gen": args.gen, "extractor": cfg.eval.extractor})
            return EXIT_OK
        real, gen = _load_png_dir(args.real), _load_png_dir(args.gen)
        report = evaluate_sets(real, gen, make_recognizer(cfg.stage1.recognizer), make_extractor(cfg, real[0].shape),
                               cfg.eval.patch_size, cfg.eval.kid_subset_size, cfg.eval.kid_subsets,
                               cfg.seed, cfg.digest())
    else:
        _require_dataset(cfg)
        if args.dry_run:
            _emit({"command": "eval", "run_dir": str(Path(cfg.run_dir) / cfg.digest()[:8])})
            return EXIT_OK
        from .pipeline import run_lock

        run_dir, backend, bundle = _trained_run(cfg)
        with run_lock(run_dir):
            report = evaluate_run(cfg, run_dir, backend, bundle, make_encoder(cfg))
    if args.out:
        report.save(args.out)
    print(report.table())
    _emit(report.to_dict())
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from . import ablation

    _require_dataset(cfg)
    if args.action == "lambda":
        values = args.values or list(ablation.DEFAULT_LAMBDAS)
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ConfigError("lambda values must lie in [0, 1]")
        param, points = "lambda", values
    else:
        points = args.sizes or list(ablation.DEFAULT_SIZES)
        if any(s < 1 for s in points):
            raise ConfigError("training sizes must be >= 1")
        param = "train_size"
    if args.dry_run:
        plan = [{param: v, "run_dir": str(Path(cfg.run_dir) / cfg.replace(**{param: v}).digest()[:8])} for v in points]
        _emit({"command": f"ablate {args.action}", "out": args.out, "points": plan})
        return EXIT_OK
    rows = ablation.sweep(cfg, param, points, args.out)
    failed = [r for r in rows if r["status"] != "ok"]
    _emit({"out": args.out, "rows": rows})
    return EXIT_FAILURE if failed else EXIT_OK


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Sequence[str] | None = None) -> int:
    from .dataset import FailureBudgetExceeded

    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper()), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FailureBudgetExceeded, adapters.AdapterError) as exc:
        print(f"adapter failure: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
