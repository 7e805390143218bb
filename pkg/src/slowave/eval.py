"""Metrics and cross-validation.

AUC comes from the rank statistic with averaged ties, AUPRC from
step-wise precision-recall integration; ACC/BAC/SEN/SPE from the
confusion at a fixed operating point (0.5 on calibrated scores).

LOSO runs one fold per subject within each site, retraining the whole
system per fold; LOIO runs one fold per site under an explicit plan whose
detector-training and classifier-training pools may differ, including
test-only sites. Every fold asserts that no test subject reaches any
training pool.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import LeakageError

logger = logging.getLogger(__name__)

SCORE_THRESHOLD = 0.5


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_scores(
        cls, scores: np.ndarray, labels: np.ndarray, threshold: float = SCORE_THRESHOLD
    ) -> "Confusion":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        pred = scores > threshold
        pos = labels == 1
        return cls(
            tp=int(np.sum(pred & pos)),
            fp=int(np.sum(pred & ~pos)),
            tn=int(np.sum(~pred & ~pos)),
            fn=int(np.sum(~pred & pos)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, other: "Confusion") -> "Confusion":
        return Confusion(
            self.tp + other.tp, self.fp + other.fp,
            self.tn + other.tn, self.fn + other.fn,
        )


def auc_rank(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Mann-Whitney AUC with averaged ranks on ties; None for one class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc_step(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Average precision via step-wise integration, grouping tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = 0
    fp = 0
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp_new = tp + int(np.sum(sorted_labels[i : j + 1] == 1))
        fp_new = fp + int(np.sum(sorted_labels[i : j + 1] == 0))
        if tp_new > tp:
            precision = tp_new / (tp_new + fp_new)
            ap += (tp_new - tp) / n_pos * precision
        tp, fp = tp_new, fp_new
        i = j + 1
    return ap


@dataclass
class MetricSet:
    """AUC, AUPRC, ACC, BAC, SEN, SPE. AUC/AUPRC are absent (None) when the
    labels hold a single class."""

    auc: float | None
    auprc: float | None
    acc: float
    bac: float
    sen: float
    spe: float

    COLUMNS = ("auc", "auprc", "acc", "bac", "sen", "spe")

    def as_row(self) -> list[float | None]:
        return [self.auc, self.auprc, self.acc, self.bac, self.sen, self.spe]

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.COLUMNS}


def metrics_from_confusion(conf: Confusion) -> tuple[float, float, float, float]:
    acc = (conf.tp + conf.tn) / conf.total if conf.total else float("nan")
    sen = conf.tp / (conf.tp + conf.fn) if (conf.tp + conf.fn) else float("nan")
    spe = conf.tn / (conf.tn + conf.fp) if (conf.tn + conf.fp) else float("nan")
    bac = (sen + spe) / 2.0
    return acc, bac, sen, spe


def metrics(
    scores: np.ndarray, labels: np.ndarray, threshold: float = SCORE_THRESHOLD
) -> MetricSet:
    conf = Confusion.from_scores(scores, labels, threshold)
    acc, bac, sen, spe = metrics_from_confusion(conf)
    return MetricSet(
        auc=auc_rank(scores, labels),
        auprc=auprc_step(scores, labels),
        acc=acc, bac=bac, sen=sen, spe=spe,
    )


def mean_metric_sets(sets: list[MetricSet]) -> MetricSet:
    """Field-wise mean; optional fields average over the folds where they
    exist (absent stays absent if absent everywhere)."""

    def opt_mean(values: list[float | None]) -> float | None:
        present = [v for v in values if v is not None]
        return float(np.mean(present)) if present else None

    return MetricSet(
        auc=opt_mean([m.auc for m in sets]),
        auprc=opt_mean([m.auprc for m in sets]),
        acc=float(np.mean([m.acc for m in sets])),
        bac=float(np.mean([m.bac for m in sets])),
        sen=float(np.mean([m.sen for m in sets])),
        spe=float(np.mean([m.spe for m in sets])),
    )


def intra_rater_agreement(labels_a, labels_b) -> float:
    """Percent of positions with equal labels on duplicated annotations."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("label lists must be non-empty and equally long")
    return 100.0 * float(np.mean(a == b))


# ---------------------------------------------------------------------------
# Cross-validation


def assert_no_leakage(test_ids: set[str], pools: dict[str, list[str]]) -> None:
    """Raise when any test subject id appears in a training pool."""
    for pool_name, ids in pools.items():
        overlap = test_ids.intersection(ids)
        if overlap:
            raise LeakageError(
                f"test subject(s) {sorted(overlap)} leak into the {pool_name} pool"
            )


@dataclass(frozen=True)
class LoioFold:
    test_site: str
    detector_sites: tuple[str, ...]
    level_sites: tuple[str, ...]


@dataclass
class LoioPlan:
    folds: list[LoioFold]

    def validate(self, known_sites: set[str]) -> None:
        if not self.folds:
            raise ValueError("empty LOIO plan")
        for fold in self.folds:
            for site in (fold.test_site, *fold.detector_sites, *fold.level_sites):
                if site not in known_sites:
                    raise ValueError(f"plan references unknown site {site!r}")
            if fold.test_site in fold.detector_sites or fold.test_site in fold.level_sites:
                raise LeakageError(
                    f"fold testing {fold.test_site!r} trains on the same site"
                )


def make_loio_plan(
    sites: list[str],
    eval_sites: list[str] | None = None,
    channel_only: tuple[str, ...] = (),
    excluded_from_training: tuple[str, ...] = (),
) -> LoioPlan:
    """One fold per evaluated site; the rest train.

    channel_only sites contribute to the detector pool but never to the
    segment/EEG classifier pool; excluded_from_training sites (the
    distorted-spectrum case) are test-only.
    """
    eval_sites = list(eval_sites) if eval_sites is not None else list(sites)
    folds = []
    for test in eval_sites:
        others = [s for s in sites if s != test and s not in excluded_from_training]
        detector = tuple(others)
        level = tuple(s for s in others if s not in channel_only)
        folds.append(LoioFold(test, detector, level))
    return LoioPlan(folds)


@dataclass
class FoldRecord:
    site: str
    subject_id: str
    scores: np.ndarray
    labels: np.ndarray


@dataclass
class CvResult:
    mode: str
    per_site: dict[str, MetricSet]
    mean: MetricSet
    pooled_confusion: Confusion
    folds: list[FoldRecord] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "per_site": {s: m.to_json_dict() for s, m in self.per_site.items()},
            "mean": self.mean.to_json_dict(),
            "pooled_confusion": vars(self.pooled_confusion),
        }


def _site_metrics(folds: list[FoldRecord], threshold: float) -> dict[str, MetricSet]:
    per_site: dict[str, MetricSet] = {}
    for site in sorted({f.site for f in folds}):
        scores = np.concatenate([f.scores for f in folds if f.site == site])
        labels = np.concatenate([f.labels for f in folds if f.site == site])
        per_site[site] = metrics(scores, labels, threshold)
    return per_site


def _finish(mode: str, folds: list[FoldRecord], threshold: float) -> CvResult:
    per_site = _site_metrics(folds, threshold)
    mean = mean_metric_sets(list(per_site.values()))
    pooled = Confusion()
    for f in folds:
        pooled = pooled.add(Confusion.from_scores(f.scores, f.labels, threshold))
    return CvResult(mode, per_site, mean, pooled, folds)


def run_loso(
    subjects: list,
    system,
    seed: int = 0,
    threshold: float = SCORE_THRESHOLD,
    detector_pool_override: dict[str, list] | None = None,
    progress: bool = False,
) -> CvResult:
    """Leave-one-subject-out within each site.

    Every fold retrains the full system (detector, normalizer, classifier,
    SMOTE) on the remaining same-site subjects. detector_pool_override maps
    a site to an external detector-training pool, for sites without usable
    channel-level labels.
    """
    subjects = sorted(subjects, key=lambda s: (s.site, s.subject_id))
    if len(subjects) < 2:
        raise ValueError("LOSO needs at least two subjects")
    folds: list[FoldRecord] = []
    by_site: dict[str, list] = {}
    for s in subjects:
        by_site.setdefault(s.site, []).append(s)
    fold_idx = 0
    for site, members in by_site.items():
        if len(members) < 2:
            raise ValueError(f"site {site!r} has fewer than two subjects")
        for test_subject in members:
            train = [s for s in members if s.subject_id != test_subject.subject_id]
            detector_pool = train
            if detector_pool_override and site in detector_pool_override:
                detector_pool = detector_pool_override[site]
            assert_no_leakage(
                {test_subject.subject_id},
                {
                    "detector": [s.subject_id for s in detector_pool],
                    "classifier": [s.subject_id for s in train],
                },
            )
            fitted = system.fit(detector_pool, train, seed=seed + fold_idx)
            scores, labels = fitted.predict(test_subject)
            folds.append(
                FoldRecord(site, test_subject.subject_id,
                           np.atleast_1d(scores), np.atleast_1d(labels))
            )
            if progress:
                logger.info("LOSO fold %s/%s done", site, test_subject.subject_id)
            fold_idx += 1
    return _finish("loso", folds, threshold)


def run_loio(
    site_subjects: dict[str, list],
    system,
    plan: LoioPlan | None = None,
    seed: int = 0,
    threshold: float = SCORE_THRESHOLD,
) -> CvResult:
    """Leave-one-institution-out under an explicit (validated) plan."""
    if len(site_subjects) < 2:
        raise ValueError("LOIO needs at least two sites")
    plan = plan or make_loio_plan(sorted(site_subjects))
    plan.validate(set(site_subjects))
    folds: list[FoldRecord] = []
    for fold_idx, fold in enumerate(plan.folds):
        detector_pool = [s for site in fold.detector_sites for s in site_subjects[site]]
        level_pool = [s for site in fold.level_sites for s in site_subjects[site]]
        test_ids = {s.subject_id for s in site_subjects[fold.test_site]}
        assert_no_leakage(
            test_ids,
            {
                "detector": [s.subject_id for s in detector_pool],
                "classifier": [s.subject_id for s in level_pool],
            },
        )
        fitted = system.fit(detector_pool, level_pool, seed=seed + fold_idx)
        for test_subject in site_subjects[fold.test_site]:
            scores, labels = fitted.predict(test_subject)
            folds.append(
                FoldRecord(fold.test_site, test_subject.subject_id,
                           np.atleast_1d(scores), np.atleast_1d(labels))
            )
    return _finish("loio", folds, threshold)


def results_csv(results: dict[str, CvResult]) -> str:
    """Flat CSV: System, Dataset, AUC, AUPRC, ACC, BAC, SEN, SPE."""
    lines = ["System,Dataset,AUC,AUPRC,ACC,BAC,SEN,SPE"]

    def fmt(v: float | None) -> str:
        return "" if v is None else f"{v:.3f}"

    for system_name, result in results.items():
        for site, m in result.per_site.items():
            lines.append(f"{system_name},{site}," + ",".join(fmt(v) for v in m.as_row()))
        lines.append(f"{system_name},Mean," + ",".join(fmt(v) for v in result.mean.as_row()))
    return "\n".join(lines) + "\n"
