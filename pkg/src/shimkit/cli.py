"""``shimkit`` command line: simulate, reference, mls, train, eval, bench.

Exit codes: 0 success, 2 invalid configuration or usage, 3 I/O or dataset
failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import config as C
from .errors import (
    DatasetError,
    DimensionError,
    DomainError,
    IntegrityError,
    NumericalError,
    SpecError,
    UsageError,
)

log = logging.getLogger("shimkit")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# (flag, config key, help) per subcommand; defaults come from the config layer
_SIM_FLAGS = [
    ("--phantoms", "phantom.count", "number of phantoms (scales spread over phantom.scale_min..max)"),
    ("--grid", "phantom.grid", "simulation grid HxWxD"),
    ("--voxel-size", "phantom.voxel_size", "voxel edge in metres, or 'auto' to fit the largest phantom"),
    ("--coils", "coil.count", "number of transmit coils"),
    ("--segments", "coil.segments_per_loop", "straight segments per coil loop"),
    ("--slices-per-phantom", "data.slices_per_phantom", "axial slices kept per phantom"),
    ("--augment", "data.augment", "comma-separated rotation angles in degrees (0 = unrotated copy)"),
    ("--jitter", "data.jitter", "uniform random jitter added to every rotation angle, degrees"),
    ("--min-mask-voxels", "data.min_mask_voxels", "smallest usable mask"),
    ("--lambda", "data.lambda", "power regularisation weight stored with each slice"),
    ("--target", "data.target", "target |B1+| magnitude"),
]
_REF_FLAGS = [
    ("--restarts", "restart.n_random", "random Adam starts per slice"),
    ("--include-quadrature", "restart.include_quadrature", "also start from the quadrature drive"),
    ("--adam-iters", "adam.max_iters", "Adam iteration budget per start"),
    ("--step-size", "adam.step_size", "Adam step size"),
    ("--lambda", "data.lambda", "override the per-slice regularisation weight"),
    ("--jobs", "run.jobs", "worker processes (0 = all cores); results do not depend on it"),
]
_MLS_FLAGS = [
    ("--lambda", "data.lambda", "override the per-slice regularisation weight"),
    ("--max-iters", "mls.max_outer_iters", "variable-exchange iteration budget"),
    ("--tol", "mls.rel_tol", "stop when the relative objective decrease falls below this"),
]
_TRAIN_FLAGS = [
    ("--fold-seed", "train.fold_seed", "train/val/test split seed (none = run.seed)"),
    ("--epochs", "train.epochs", "training epochs (0 writes the initialised network)"),
    ("--batch", "train.batch_size", "mini-batch size"),
    ("--lr", "train.lr", "initial Adam step size"),
    ("--decay-every", "train.decay_every", "halve the step size every this many epochs"),
    ("--paper-scale", "net.paper_scale", "use the wide network (widths 64..512)"),
]
_BENCH_FLAGS = [
    ("--folds", "bench.folds", "number of folds"),
    ("--repeats", "bench.repeats", "timed repetitions per slice (>= 3)"),
] + [f for f in _TRAIN_FLAGS if f[0] != "--fold-seed"]


def _fmt_default(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return "none" if value is None else str(value)


class _Formatter(argparse.RawDescriptionHelpFormatter):
    pass


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="config file of 'section.key = value' lines (default: none)")
    p.add_argument("--seed", metavar="S", help=f"master seed; overrides ${C.SEED_ENV} (default: {C.default_of('run.seed')})")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="set any config key, e.g. --set coil.gap=0.012 (repeatable; default: none)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")


def _add_config_flags(p, flags):
    for flag, key, text in flags:
        p.add_argument(flag, dest="cfg:" + key, metavar=key.split(".")[1].upper(),
                       help=f"{text} [{key}] (default: {_fmt_default(C.default_of(key))})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shimkit", description=__doc__, formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"shimkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, text, flags=()):
        p = sub.add_parser(name, help=text, description=text, formatter_class=_Formatter)
        _add_common(p)
        _add_config_flags(p, flags)
        return p

    p = command("simulate", "simulate phantoms and write a slice dataset", _SIM_FLAGS)
    p.add_argument("--out", required=True, metavar="DIR", help="dataset directory to create (required)")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset (default: off)")
    p.set_defaults(func=cmd_simulate)

    p = command("reference", "compute best-of-restarts reference weights", _REF_FLAGS)
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory (required)")
    p.add_argument("--force", action="store_true", help="recompute slices that already have references (default: off)")
    p.set_defaults(func=cmd_reference)

    p = command("mls", "solve every slice by MLS variable exchange", _MLS_FLAGS)
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory (required)")
    p.add_argument("--out", metavar="FILE", help="results JSON (default: DIR/mls_results.json)")
    p.set_defaults(func=cmd_mls)

    p = command("train", "train the surrogate on one split", _TRAIN_FLAGS)
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory (required)")
    p.add_argument("--out", metavar="CKPT", help="checkpoint path (default: DIR/model.ckpt)")
    p.set_defaults(func=cmd_train)

    p = command("eval", "evaluate a checkpoint on its test split")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory (required)")
    p.add_argument("--ckpt", required=True, metavar="CKPT", help="checkpoint from 'train' (required)")
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test",
                   help="which samples to evaluate (default: test)")
    p.add_argument("--out", metavar="FILE", help="metrics JSON (default: CKPT.eval.json)")
    p.set_defaults(func=cmd_eval)

    p = command("bench", "fold-wise MLS vs surrogate comparison", _BENCH_FLAGS)
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory (required)")
    p.add_argument("--out", required=True, metavar="DIR", help="report directory (required)")
    p.set_defaults(func=cmd_bench)

    p = command("config", "print the resolved configuration")
    p.set_defaults(func=cmd_config)
    return parser


def resolve_config(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            overrides[name[4:]] = value
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    return C.resolve(args.config, overrides, base=_recorded_config(getattr(args, "data", None)))


def _recorded_config(directory):
    """Config echoed into an existing dataset, so later stages inherit it."""
    from .dataset import MANIFEST

    path = Path(directory) / MANIFEST if directory else None
    if path is None or not path.exists():
        return None
    try:
        return json.loads(path.read_text()).get("run_config", {}).get("config")
    except (ValueError, AttributeError):
        return None  # unreadable manifests are reported by the stage itself


def _given(args, key) -> bool:
    return getattr(args, "cfg:" + key, None) is not None or any(s.split("=", 1)[0].strip() == key for s in args.set)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


def _open_dataset(directory):
    from .dataset import MANIFEST, load_dataset

    if not (Path(directory) / MANIFEST).exists():
        raise C.ConfigError(f"--data {directory}: no dataset there (run 'shimkit simulate' first)")
    return load_dataset(directory)


def _apply_lambda(args, cfg, samples):
    if _given(args, "data.lambda"):
        lam = cfg["data"]["lambda"]
        for s in samples:
            if s.target.lam != lam:
                s.target = type(s.target)(s.target.magnitude, lam)
                s.ref_weights, s.ref_rmse = None, None


def _stage(manifest, name, cfg, **extra):
    manifest.extra.setdefault("stages", {})[name] = {**C.echo(cfg), **extra}


# ---------------------------------------------------------------- simulate

def cmd_simulate(args, cfg):
    from .coils import augment_rotations, generate_volume, slice_and_mask
    from .dataset import MANIFEST, DatasetManifest, save_dataset
    from .field import TargetProfile

    out = Path(args.out)
    if (out / MANIFEST).exists() and not args.force:
        raise C.ConfigError(f"--out {out}: a dataset already exists (use --force to overwrite)")
    arr, wave, phantoms = C.coil_array(cfg), C.wave_model(cfg), C.phantoms(cfg)
    d = cfg["data"]
    target = TargetProfile(d["target"], d["lambda"])
    samples = []
    for pid, ph in enumerate(phantoms):
        t0 = time.perf_counter()
        volume, density = generate_volume(arr, ph, wave)
        kept = slice_and_mask(volume, density, ph, keep=d["slices_per_phantom"],
                              min_mask_voxels=d["min_mask_voxels"], phantom_id=pid, target=target)
        if len(kept) < d["slices_per_phantom"]:
            log.warning("phantom %d: only %d usable slices", pid, len(kept))
        samples += augment_rotations(kept, d["augment"], seed=cfg["run"]["seed"] * 1000 + pid, jitter=d["jitter"])
        log.info("phantom %d/%d simulated in %.1fs", pid + 1, len(phantoms), time.perf_counter() - t0)
    if not samples:
        raise DomainError("no usable slices; enlarge the grid or lower data.min_mask_voxels")
    manifest = DatasetManifest(
        coil_array=asdict(arr),
        phantoms=[asdict(p) for p in phantoms],
        wave=asdict(wave),
        seed=cfg["run"]["seed"],
        run_config=C.echo(cfg),
    )
    save_dataset(samples, manifest, out)
    print(f"wrote {len(samples)} slices to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- reference

def _reference_job(job):
    from .optimize import reference_weights

    sample, adam, policy = job
    res = reference_weights(sample, adam, policy)
    return res.weights, res.rmse


def cmd_reference(args, cfg):
    from .dataset import write_manifest

    manifest, samples = _open_dataset(args.data)
    _apply_lambda(args, cfg, samples)
    todo = [s for s in samples if args.force or s.ref_rmse is None]
    if not todo:
        print(f"all {len(samples)} slices already have references; nothing to do")
        return EXIT_OK
    adam, policy = C.adam_config(cfg), C.restart_policy(cfg)
    jobs = min(C.jobs(cfg), len(todo))
    work = [(s, adam, policy) for s in todo]
    t0 = time.perf_counter()
    if jobs == 1:
        results = []
        for i, job in enumerate(work):
            results.append(_reference_job(job))
            if (i + 1) % 50 == 0:
                log.info("%d/%d references (%.0fs)", i + 1, len(work), time.perf_counter() - t0)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_reference_job, work, chunksize=max(1, len(work) // (4 * jobs))))
    for s, (w, r) in zip(todo, results):
        s.ref_weights, s.ref_rmse = w, r
    _stage(manifest, "reference", cfg)
    write_manifest(args.data, samples, manifest)
    print(f"computed {len(todo)} references, skipped {len(samples) - len(todo)}")
    return EXIT_OK


# ---------------------------------------------------------------- mls

def cmd_mls(args, cfg):
    from .optimize import mls_variable_exchange

    _, samples = _open_dataset(args.data)
    _apply_lambda(args, cfg, samples)
    mcfg = C.mls_config(cfg)
    rows = []
    for s in samples:
        res = mls_variable_exchange(s, mcfg)
        rows.append({
            "key": s.key,
            "rmse": res.rmse,
            "objective": res.objective,
            "iterations": res.iterations,
            "weights": [[z.real, z.imag] for z in res.weights.values.tolist()],
            "wall_time": res.wall_time,
        })
    mean = math.fsum(r["rmse"] for r in rows) / len(rows)
    out = Path(args.out) if args.out else Path(args.data) / "mls_results.json"
    _write_json(out, {**C.echo(cfg), "mean_rmse": mean, "slices": rows})
    print(f"MLS mean RMSE {100 * mean:.4f}% over {len(rows)} slices -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train / eval

def _geometry(samples):
    h, w, c = samples[0].b1.data.shape
    return c, h, w


def cmd_train(args, cfg):
    from .surrogate import save_checkpoint, split_indices, train

    _, samples = _open_dataset(args.data)
    net_cfg = C.net_config(cfg, *_geometry(samples))
    tcfg = C.train_config(cfg)
    split = split_indices(samples, tcfg.ratios, tcfg.seed)
    missing = [samples[i].key for i in split[0] + split[1] if samples[i].ref_rmse is None]
    if missing:
        raise DomainError(f"{len(missing)} training slices lack references (run 'shimkit reference' first)")
    progress = (lambda e: log.info("epoch %(epoch)d train %(train_loss).5f", e)) if args.verbose else None
    res = train(samples, net_cfg, tcfg, split=split, progress=progress)
    out = Path(args.out) if args.out else Path(args.data) / "model.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {**C.echo(cfg), "fold_seed": tcfg.seed, "ratios": list(tcfg.ratios), "best_epoch": res.best_epoch,
             "log": res.log, "split_sizes": [len(p) for p in split]}
    save_checkpoint(res.net, out, extra)
    print(f"trained {tcfg.epochs} epochs (best {res.best_epoch}) -> {out}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .surrogate import NetConfig, load_checkpoint, predict, split_indices

    _, samples = _open_dataset(args.data)
    net, header = load_checkpoint(args.ckpt)
    c, h, w = _geometry(samples)
    got = NetConfig(**header["net"])
    if (got.coils, got.height, got.width) != (c, h, w):
        raise DimensionError(f"checkpoint expects {got.coils} coils on {got.height}x{got.width}, "
                             f"dataset has {c} on {h}x{w}")
    extra = header.get("extra", {})
    if args.split == "all":
        idx = list(range(len(samples)))
    else:
        parts = split_indices(samples, tuple(extra.get("ratios", (0.8, 0.1, 0.1))), extra.get("fold_seed", 0))
        idx = list(parts[("train", "val", "test").index(args.split)])
    if not idx:
        raise SpecError(f"the {args.split} split is empty")
    rows = []
    for i in idx:
        s = samples[i]
        weights, err, wall = predict(net, s)
        rows.append({"key": s.key, "rmse": err, "ref_rmse": s.ref_rmse, "wall_time": wall,
                     "weights": [[z.real, z.imag] for z in weights.values.tolist()]})
    vals = [r["rmse"] for r in rows]
    summary = {
        "n": len(rows),
        "mean_rmse_pct": 100 * math.fsum(vals) / len(vals),
        "best_rmse_pct": 100 * min(vals),
        "worst_rmse_pct": 100 * max(vals),
        "mean_wall_time": math.fsum(r["wall_time"] for r in rows) / len(rows),
    }
    out = Path(args.out) if args.out else Path(str(args.ckpt) + ".eval.json")
    _write_json(out, {**C.echo(cfg), "checkpoint_config_hash": extra.get("config_hash"), "split": args.split,
                      "summary": summary, "slices": rows})
    print(f"{args.split}: mean RMSE {summary['mean_rmse_pct']:.4f}% over {len(rows)} slices -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- bench

def cmd_bench(args, cfg):
    from .bench import emit_report, fold_specs, run_bench, summary_text

    _, samples = _open_dataset(args.data)
    folds = fold_specs(cfg["bench"]["folds"], cfg["run"]["seed"], C.train_config(cfg).ratios)
    net_cfg = C.net_config(cfg, *_geometry(samples))
    progress = (lambda e: log.info("epoch %(epoch)d train %(train_loss).5f", e)) if args.verbose else None
    report = run_bench(samples, folds, C.mls_config(cfg), net_cfg, C.train_config(cfg),
                       repeats=cfg["bench"]["repeats"], config=C.echo(cfg), progress=progress)
    emit_report(report, args.out)
    sys.stdout.write(summary_text(report))
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_config(args, cfg):
    sys.stdout.write(C.dump(cfg))
    print(f"# hash {C.config_hash(cfg)}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except NumericalError as exc:
        print(f"shimkit: numerical failure: {exc}", file=sys.stderr)
        if getattr(exc, "diagnostics", None):
            print(json.dumps(exc.diagnostics, indent=1, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, UsageError, DomainError, DimensionError) as exc:
        print(f"shimkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, IntegrityError, OSError) as exc:
        print(f"shimkit: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
