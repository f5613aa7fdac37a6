"""Seed sweeps over distillation settings and the four-row FAD ablation."""
from __future__ import annotations

import csv
import io
import logging
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .data import DatasetManifest
from .losses import FADVariant, LossWeights
from .models import EncoderConfig, HeadConfig, Model
from .training import RunRecord, TrainConfig, distill

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ("run", "method", "variant", "alpha", "beta", "gamma", "seed",
                  "best_test_acc", "final_test_acc", "teacher_test_acc", "gap")


@dataclass(frozen=True)
class Job:
    method: str  # row label, e.g. "MEAN" or "Norm KD"
    weights: LossWeights
    variant: FADVariant
    seed: int

    @property
    def name(self) -> str:
        a, b, g = self.weights.as_tuple()
        tag = self.method.lower().replace(" ", "-")
        return f"{tag}_{self.variant.value}_a{a:.4g}_b{b:.4g}_g{g:.4g}_seed{self.seed}"


@dataclass
class JobResult:
    job: Job
    student: Optional[Model]
    record: Optional[RunRecord]
    error: Optional[str] = None


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("FAD_THREADS", "1")))
    except ValueError:
        return 1


def run_jobs(jobs: Sequence[Job], encoder: EncoderConfig, head: HeadConfig, teacher: Model,
             base: TrainConfig, data: DatasetManifest, adapter: bool = False,
             threads: Optional[int] = None) -> list:
    """Run every job; failures are captured per job instead of aborting the sweep.

    Results come back in job order regardless of the thread count.
    """

    def one(job: Job) -> JobResult:
        cfg = replace(base, seed=job.seed, weights=job.weights, variant=job.variant)
        try:
            student, record = distill(encoder, head, teacher, cfg, data, adapter=adapter)
        except Exception as exc:  # reported per run by the caller
            logger.exception("run %s failed", job.name)
            return JobResult(job, None, None, f"{type(exc).__name__}: {exc}")
        logger.info("%s: best test acc %.4f (gap %.4f)", job.name, record.best_test_acc, record.transfer_gap)
        return JobResult(job, student, record)

    threads = threads or max_threads()
    if threads == 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, jobs))


def norm_kd_weights(weights: LossWeights) -> LossWeights:
    """Drop the feature term and renormalize KD/CE so they still sum to one."""
    total = weights.beta + weights.gamma
    if total <= 0:
        raise ValueError("norm KD needs beta + gamma > 0")
    return LossWeights(0.0, weights.beta / total, 1.0 - weights.beta / total)


ABLATION_ROWS = ("Norm KD", "MIN", "MAX", "MEAN")


def ablation_jobs(weights: LossWeights, seeds: Sequence[int]) -> list:
    jobs = []
    for method in ABLATION_ROWS:
        if method == "Norm KD":
            w, variant = norm_kd_weights(weights), FADVariant.MEAN
        else:
            w, variant = weights, FADVariant(method.lower())
        jobs.extend(Job(method, w, variant, s) for s in seeds)
    return jobs


@dataclass
class MethodSummary:
    method: str
    accs: list
    gaps: list

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accs)

    @property
    def std(self) -> float:
        return statistics.stdev(self.accs) if len(self.accs) > 1 else float("nan")

    @property
    def mean_gap(self) -> float:
        return statistics.fmean(self.gaps)


def summarize(results: Sequence[JobResult]) -> list:
    by_method: dict = {}
    for r in results:
        if r.record is None:
            continue
        s = by_method.setdefault(r.job.method, MethodSummary(r.job.method, [], []))
        s.accs.append(r.record.best_test_acc)
        s.gaps.append(r.record.transfer_gap)
    return list(by_method.values())


def summary_csv(results: Sequence[JobResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in results:
        if r.record is None:
            continue
        a, b, g = r.job.weights.as_tuple()
        rec = r.record
        w.writerow([r.job.name, r.job.method, r.job.variant.value, repr(a), repr(b), repr(g), r.job.seed,
                    repr(rec.best_test_acc), repr(rec.final_test_acc), repr(rec.teacher_test_acc),
                    repr(rec.transfer_gap)])
    return buf.getvalue()


def ablation_table(summaries: Sequence[MethodSummary], teacher_acc: float) -> str:
    """Teacher reference row, then the method rows in fixed order with their rank by mean accuracy."""
    order = sorted(summaries, key=lambda s: -s.mean)
    rank = {s.method: i + 1 for i, s in enumerate(order)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "loss", "mean_acc", "std_acc", "n_seeds", "mean_gap", "rank"))
    w.writerow(("Teacher", "CE", repr(teacher_acc), "", "", "", ""))
    for s in summaries:
        w.writerow(("Student", s.method, repr(s.mean), repr(s.std), len(s.accs), repr(s.mean_gap), rank[s.method]))
    return buf.getvalue()


def curves_csv(results: Sequence[JobResult]) -> str:
    """Long-format series: one (epoch, test_acc) curve per method, averaged over seeds."""
    series: dict = {}
    for r in results:
        if r.record is None:
            continue
        per_epoch = series.setdefault(r.job.method, {})
        for row in r.record.rows:
            per_epoch.setdefault(row.epoch, []).append((row.test_acc, row.train_acc))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "epoch", "test_acc", "train_acc"))
    for method, per_epoch in series.items():
        for epoch in sorted(per_epoch):
            vals = per_epoch[epoch]
            w.writerow((method, epoch, repr(statistics.fmean(v[0] for v in vals)),
                        repr(statistics.fmean(v[1] for v in vals))))
    return buf.getvalue()
