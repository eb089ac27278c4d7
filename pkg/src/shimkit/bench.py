"""Fold-wise comparison of MLS variable exchange against the trained surrogate.

Each fold splits the dataset by parent slice, trains the network on the
training part, and evaluates both methods on the same test slices. Per-slice
RMSE (percent of target) and wall time are recorded, summarised per fold
(mean / best / worst RMSE, mean runtime), and the paired per-slice RMSEs are
compared with a two-sided Wilcoxon signed-rank test.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import __version__
from .errors import DomainError, IntegrityError, SpecError
from .optimize import MlsConfig, mls_variable_exchange
from .surrogate import NetConfig, TrainConfig, predict, split_indices, train

log = logging.getLogger(__name__)

MLS = "MLS"
SURROGATE = "ResNet"
METHODS = (MLS, SURROGATE)
EXACT_MAX_N = 25


@dataclass(frozen=True)
class FoldSpec:
    index: int
    seed: int
    ratios: tuple = (0.8, 0.1, 0.1)


def fold_specs(n_folds: int = 5, base_seed: int = 0, ratios=(0.8, 0.1, 0.1)) -> list[FoldSpec]:
    """Folds ``1..n`` with distinct split seeds derived from ``base_seed``."""
    seeds = np.random.SeedSequence(base_seed).generate_state(n_folds, dtype=np.uint32)
    if len(set(seeds.tolist())) != n_folds:
        raise SpecError("fold seeds collided")
    return [FoldSpec(i + 1, int(s), tuple(ratios)) for i, s in enumerate(seeds)]


@dataclass(frozen=True)
class SignedRank:
    statistic: float
    p_value: float
    n: int
    no_effect: bool = False


def _exact_upper_tail(doubled_ranks, w2: int) -> tuple[Fraction, Fraction]:
    """``P(W+ <= w)`` and ``P(W+ >= w)`` under H0, with ranks and ``w`` doubled to integers."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    denom = 2 ** len(doubled_ranks)
    lower = Fraction(sum(counts[: w2 + 1]), denom)
    upper = Fraction(sum(counts[w2:]), denom)
    return lower, upper


def paired_significance(a, b) -> SignedRank:
    """Two-sided Wilcoxon signed-rank test on the paired differences ``a - b``.

    Zero differences are dropped. The null distribution is enumerated exactly
    for up to 25 non-zero pairs (average ranks for ties); above that a normal
    approximation with tie and continuity corrections is used. The statistic
    is the sum of ranks of the positive differences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError("paired samples differ in length")
    if a.size < 6:
        raise DomainError(f"need at least 6 pairs, got {a.size}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return SignedRank(0.0, 1.0, 0, no_effect=True)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        lower, upper = _exact_upper_tail(doubled, int(round(2 * w_plus)))
        p = min(1.0, float(2 * min(lower, upper)))
    else:
        mean = n * (n + 1) / 4
        _, ties = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(ties**3 - ties)) / 48
        z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2)))
    return SignedRank(w_plus, p, n)


@dataclass
class SliceRecord:
    fold: int
    method: str
    slice_id: str
    rmse_pct: float
    time_ms: float


@dataclass
class FoldResult:
    index: int
    seed: int
    summary: dict
    records: list
    test: dict
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    best_epoch: int = 0
    train_log: list = field(default_factory=list)


@dataclass
class BenchReport:
    folds: list
    config: dict = field(default_factory=dict)
    tool_version: str = __version__


def aggregate(records) -> dict:
    """``{method: {mean_rmse, best_rmse, worst_rmse, runtime_ms, n}}`` from per-slice records."""
    out = {}
    present = {r.method for r in records}
    for method in [m for m in METHODS if m in present] + sorted(present - set(METHODS)):
        rs = [r for r in records if r.method == method]
        vals = [r.rmse_pct for r in rs]
        # clamp: a correctly rounded mean can still land one ulp outside [min, max]
        mean = min(max(math.fsum(vals) / len(vals), min(vals)), max(vals))
        out[method] = {
            "mean_rmse": mean,
            "best_rmse": min(vals),
            "worst_rmse": max(vals),
            "runtime_ms": math.fsum(r.time_ms for r in rs) / len(rs),
            "n": len(rs),
        }
    return out


def _timed(fn, repeats):
    times = []
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, math.fsum(times) / len(times)


def run_fold(samples, fold: FoldSpec, mls_cfg: MlsConfig = MlsConfig(), net_cfg: NetConfig | None = None,
             train_cfg: TrainConfig = TrainConfig(), repeats: int = 3, progress=None) -> FoldResult:
    """Train on the fold's training split and compare both methods on its test split."""
    if repeats < 3:
        raise SpecError("timing needs at least 3 repetitions per slice")
    split = split_indices(samples, fold.ratios, fold.seed)
    train_idx, val_idx, test_idx = split
    if not test_idx:
        raise SpecError(f"fold {fold.index}: test split is empty")
    missing = [samples[i].key for i in train_idx + val_idx if samples[i].ref_rmse is None]
    if missing:
        raise DomainError(
            f"fold {fold.index}: {len(missing)} training/validation slices lack references "
            "(run the 'reference' stage first)"
        )
    if net_cfg is None:
        h, w, c = samples[0].b1.data.shape
        net_cfg = NetConfig(coils=c, height=h, width=w)
    tcfg = replace(train_cfg, ratios=fold.ratios, seed=fold.seed)
    result = train(samples, net_cfg, tcfg, split=split, progress=progress)
    net = result.net
    test = [samples[i] for i in test_idx]
    # warm-up, excluded from timing
    mls_variable_exchange(test[0], mls_cfg)
    predict(net, test[0])
    records = []
    for s in test:
        sol, t_mls = _timed(lambda: mls_variable_exchange(s, mls_cfg), repeats)
        records.append(SliceRecord(fold.index, MLS, s.key, 100.0 * sol.rmse, 1e3 * t_mls))
        walls = []
        for _ in range(repeats):
            _, err, wall = predict(net, s)
            walls.append(wall)
        records.append(SliceRecord(fold.index, SURROGATE, s.key, 100.0 * err, 1e3 * math.fsum(walls) / repeats))
    mls_r = [r.rmse_pct for r in records if r.method == MLS]
    net_r = [r.rmse_pct for r in records if r.method == SURROGATE]
    if len(mls_r) >= 6:
        test_result = asdict(paired_significance(mls_r, net_r))
    else:
        log.warning("fold %d: %d test pairs, too few for a signed-rank test", fold.index, len(mls_r))
        test_result = {"statistic": None, "p_value": None, "n": len(mls_r), "no_effect": False}
    return FoldResult(
        index=fold.index,
        seed=fold.seed,
        summary=aggregate(records),
        records=records,
        test=test_result,
        n_train=len(train_idx),
        n_val=len(val_idx),
        n_test=len(test_idx),
        best_epoch=result.best_epoch,
        train_log=result.log,
    )


def run_bench(samples, folds, mls_cfg=MlsConfig(), net_cfg=None, train_cfg=TrainConfig(), repeats=3,
              config=None, progress=None) -> BenchReport:
    out = []
    for fold in folds:
        log.info("fold %d (seed %d)", fold.index, fold.seed)
        out.append(run_fold(samples, fold, mls_cfg, net_cfg, train_cfg, repeats, progress))
    return BenchReport(folds=out, config=config or {})


def format_runtime(ms: float) -> str:
    return f"{ms:.4f}".rstrip("0").rstrip(".") + "ms"


def summary_row(fold: int, method: str, stats: dict) -> str:
    return ",".join([
        str(fold), method,
        f"{stats['mean_rmse']:.4f}", f"{stats['best_rmse']:.4f}", f"{stats['worst_rmse']:.4f}",
        format_runtime(stats["runtime_ms"]),
    ])


SUMMARY_HEADER = "fold,method,mean_rmse,best_rmse,worst_rmse,runtime_per_slice"
PER_SLICE_HEADER = ["fold", "method", "slice_id", "rmse_pct", "time_ms"]


def summary_csv(folds_summary) -> str:
    """``folds_summary`` is a list of ``(fold_index, {method: stats})``."""
    lines = [SUMMARY_HEADER]
    for index, summary in folds_summary:
        for method, stats in summary.items():
            lines.append(summary_row(index, method, stats))
    return "\n".join(lines) + "\n"


def _p_text(p) -> str:
    return "n/a" if p is None else f"{p:.3g}"


def summary_text(report: BenchReport) -> str:
    head = ["Fold", "Method", "Mean RMSE", "Best RMSE", "Worst RMSE", "Runtime/slice", "p (Wilcoxon)"]
    rows = [head]
    for f in report.folds:
        for method, s in f.summary.items():
            rows.append([str(f.index), method, f"{s['mean_rmse']:.4f}", f"{s['best_rmse']:.4f}",
                         f"{s['worst_rmse']:.4f}", format_runtime(s["runtime_ms"]), _p_text(f.test.get("p_value"))])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    lines = [fmt(rows[0]), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows[1:]]
    lines.append("")
    lines.append("RMSE in % of target flip angle; runtime is the mean wall time per slice.")
    return "\n".join(lines) + "\n"


def per_slice_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PER_SLICE_HEADER)
    for r in records:
        writer.writerow([r.fold, r.method, r.slice_id, repr(r.rmse_pct), repr(r.time_ms)])
    return buf.getvalue()


def read_per_slice_csv(text: str) -> list[SliceRecord]:
    rows = csv.DictReader(io.StringIO(text))
    return [SliceRecord(int(r["fold"]), r["method"], r["slice_id"], float(r["rmse_pct"]), float(r["time_ms"]))
            for r in rows]


def check_report(report: BenchReport):
    if not report.folds:
        raise IntegrityError("report has no folds")
    for f in report.folds:
        if not f.records:
            raise IntegrityError(f"fold {f.index} has no per-slice records")
        again = aggregate(f.records)
        if again != f.summary:
            raise IntegrityError(f"fold {f.index}: summary does not match its per-slice records")
        for method, s in f.summary.items():
            if not s["best_rmse"] <= s["mean_rmse"] <= s["worst_rmse"]:
                raise IntegrityError(f"fold {f.index} {method}: best <= mean <= worst violated")


def report_dict(report: BenchReport) -> dict:
    return {
        "tool_version": report.tool_version,
        "config": report.config,
        "folds": [
            {
                "fold": f.index,
                "seed": f.seed,
                "n_train": f.n_train,
                "n_val": f.n_val,
                "n_test": f.n_test,
                "best_epoch": f.best_epoch,
                "summary": f.summary,
                "wilcoxon": f.test,
                "train_log": f.train_log,
                "records": [asdict(r) for r in f.records],
            }
            for f in report.folds
        ],
    }


def emit_report(report: BenchReport, directory) -> dict:
    """Write ``summary.txt``, ``summary.csv``, ``per_slice.csv`` and ``report.json``."""
    check_report(report)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = [r for f in report.folds for r in f.records]
    files = {
        "summary.txt": summary_text(report),
        "summary.csv": summary_csv([(f.index, f.summary) for f in report.folds]),
        "per_slice.csv": per_slice_csv(records),
        "report.json": json.dumps(report_dict(report), indent=1, sort_keys=True) + "\n",
    }
    for name, text in files.items():
        (directory / name).write_text(text, encoding="utf-8")
    return {name: directory / name for name in files}
