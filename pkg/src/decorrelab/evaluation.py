"""Training protocol: k-fold cross-validation, ROC-AUC on the three test
sets (full, adversarial, manipulated), correlation histograms and report
aggregation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import BiasSpec, PairedData, Sample, adversarial_testset, biased_sample, full_testset
from .decorrelation import CorrelationRecord, DecorreConfig
from .engine import seeded_rng
from .estimator import DecorreClassifier

TESTSETS = ("full", "adversarial", "manipulated")


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Mann-Whitney formulation with average ranks, so ties count one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic shuffled partition into k folds, sizes within one."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = seeded_rng(seed, "kfold").permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, k)]


@dataclass
class TrainConfig:
    """One training condition of the evaluation matrix."""

    name: str = "run"
    arch: str = "small"
    bias: BiasSpec | None = None
    decorre_enabled: bool = False
    decorre_cfg: DecorreConfig = field(default_factory=DecorreConfig)
    insertion_points: list[str] | None = None
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    folds: int = 5
    seed: int = 0
    record_every: int = 10
    record_batches: int = 8
    augment: bool = True

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if self.decorre_enabled and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when decorrelation is enabled")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    @property
    def checkpoint_epoch(self) -> int:
        """AUC is reported at half of the allocated training budget."""
        return max(1, self.epochs // 2)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["checkpoint_epoch"] = self.checkpoint_epoch
        return out


@dataclass
class EvalReport:
    """Per-fold and mean ROC-AUC for one training condition."""

    name: str
    config: dict
    testsets: list[str]
    fold_aucs: dict[str, list[float]]
    diverged: list[bool]
    loss_curves: list[list[float]]
    records: list[list[CorrelationRecord]]
    fold_states: list[dict[str, np.ndarray]] = field(default_factory=list)

    def _valid(self, testset: str) -> list[float]:
        return [a for a, d in zip(self.fold_aucs[testset], self.diverged) if not d]

    def mean_auc(self, testset: str) -> float:
        vals = self._valid(testset)
        return float(np.mean(vals)) if vals else float("nan")

    def std_auc(self, testset: str) -> float:
        vals = self._valid(testset)
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def all_records(self, epoch: int | None = None) -> list[CorrelationRecord]:
        out = [r for fold in self.records for r in fold]
        if epoch is not None:
            out = [r for r in out if r.epoch == epoch]
        return out


def _clean_pairs(samples: list[Sample]) -> PairedData:
    rows_roi = np.stack([s.roi_clean for s in samples]).astype(np.float32)
    rows_cr = np.stack([s.cr_clean for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    ids = np.array([s.id for s in samples], dtype=np.int64)
    return PairedData(rows_roi, rows_cr, labels, ids, np.array(["clean"] * len(samples)))


def build_testsets(samples: list[Sample], bias: BiasSpec | None,
                   seed: int, fold: int) -> dict[str, PairedData]:
    """Held-out evaluation views: unbiased full set, deterministic
    adversarial inversion, and a manipulated set biased like the training
    data (from a held-out stream)."""
    if bias is None:
        return {"full": _clean_pairs(samples)}
    return {
        "full": full_testset(samples, bias, seeded_rng(seed, "test-full", fold)),
        "adversarial": adversarial_testset(samples, bias),
        "manipulated": biased_sample(samples, bias, seeded_rng(seed, "test-manip", fold)),
    }


def train_run(cfg: TrainConfig, samples: list[Sample]) -> EvalReport:
    """Cross-validated training of one condition.

    Per fold: inject the configured bias into the training split, fit the
    classifier (with or without decorrelation), and score ROC-AUC on the
    full/adversarial/manipulated views of the held-out split using the
    checkpoint-epoch weights. Folds whose loss diverges are flagged and
    excluded from the means rather than aborting the run.
    """
    folds = kfold_split(len(samples), cfg.folds, cfg.seed)
    testsets = list(TESTSETS) if cfg.bias is not None else ["full"]
    fold_aucs: dict[str, list[float]] = {t: [] for t in testsets}
    diverged: list[bool] = []
    loss_curves: list[list[float]] = []
    records: list[list[CorrelationRecord]] = []
    fold_states: list[dict[str, np.ndarray]] = []

    for f, test_idx in enumerate(folds):
        train_mask = np.ones(len(samples), dtype=bool)
        train_mask[test_idx] = False
        train_samples = [samples[i] for i in np.flatnonzero(train_mask)]
        test_samples = [samples[i] for i in test_idx]

        if cfg.bias is not None:
            train_pairs = biased_sample(train_samples, cfg.bias, seeded_rng(cfg.seed, "train-bias", f))
        else:
            train_pairs = _clean_pairs(train_samples)

        est = DecorreClassifier(
            arch=cfg.arch, decorre=cfg.decorre_enabled,
            mode=cfg.decorre_cfg.mode, threshold=cfg.decorre_cfg.threshold,
            low_factor=cfg.decorre_cfg.low_factor, midpoint=cfg.decorre_cfg.midpoint,
            floor=cfg.decorre_cfg.floor, steepness=cfg.decorre_cfg.steepness,
            guarantee=cfg.decorre_cfg.guarantee, insertion_points=cfg.insertion_points,
            epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
            seed=_fold_seed(cfg.seed, f), checkpoint_epoch=cfg.checkpoint_epoch,
            record_every=cfg.record_every, record_batches=cfg.record_batches,
            augment=cfg.augment)
        est.fit(train_pairs.roi, train_pairs.labels, cr=train_pairs.cr)

        diverged.append(est.diverged_)
        loss_curves.append(est.loss_curve_)
        records.append(est.records_)
        fold_states.append(est.model_.state_dict())
        views = build_testsets(test_samples, cfg.bias, cfg.seed, f)
        for t in testsets:
            if est.diverged_:
                fold_aucs[t].append(float("nan"))
            else:
                view = views[t]
                fold_aucs[t].append(roc_auc(est.decision_function(view.roi), view.labels))

    return EvalReport(cfg.name, cfg.to_dict(), testsets, fold_aucs,
                      diverged, loss_curves, records, fold_states)


def _fold_seed(seed: int, fold: int) -> int:
    return (int(seed) * 1_000_003 + fold) & 0x7FFFFFFF


@dataclass
class HoCData:
    """Normalized correlation histogram of one layer across conditions."""

    layer_id: str
    bin_edges: np.ndarray
    counts: dict[str, np.ndarray]


def histogram_of_correlations(records_by_condition: dict[str, list[CorrelationRecord]],
                              bins: int, epoch: int | None = None) -> list[HoCData]:
    """Histogram of correlation-unit outputs per layer, one histogram per
    training condition, normalized by that condition's total activation
    count. ``epoch`` selects a single snapshot; None pools every epoch.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if not records_by_condition:
        raise ValueError("no records given")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    layer_order: list[str] = []
    pooled: dict[tuple[str, str], list[np.ndarray]] = {}
    for cond, records in records_by_condition.items():
        kept = [r for r in records if epoch is None or r.epoch == epoch]
        if not any(len(r) for r in kept):
            raise ValueError(f"condition {cond!r} has no correlation records"
                             + (f" at epoch {epoch}" if epoch is not None else ""))
        for r in kept:
            if r.layer_id not in layer_order:
                layer_order.append(r.layer_id)
            pooled.setdefault((cond, r.layer_id), []).append(np.asarray(r.correlations))
    out = []
    for layer_id in layer_order:
        counts = {}
        for cond in records_by_condition:
            values = pooled.get((cond, layer_id))
            if values is None:
                continue
            hist, _ = np.histogram(np.concatenate(values), bins=edges)
            counts[cond] = hist / hist.sum()
        out.append(HoCData(layer_id, edges, counts))
    return out


def hoc_rows(hoc: list[HoCData]) -> list[tuple]:
    """Flatten histograms to (layer_id, bin_left, bin_right, condition, count)."""
    rows = []
    for h in hoc:
        for cond, counts in h.counts.items():
            for b, c in enumerate(counts):
                rows.append((h.layer_id, float(h.bin_edges[b]),
                             float(h.bin_edges[b + 1]), cond, float(c)))
    return rows


def mean_correlation(records: list[CorrelationRecord]) -> float:
    """Mean over every recorded correlation value, all layers pooled."""
    values = [r.correlations for r in records if len(r)]
    if not values:
        raise ValueError("no correlation records")
    return float(np.mean(np.concatenate(values)))


def mean_correlation_per_layer(records: list[CorrelationRecord]) -> dict[str, float]:
    """Mean correlation of each layer's recorded outputs."""
    by_layer: dict[str, list[np.ndarray]] = {}
    for r in records:
        if len(r):
            by_layer.setdefault(r.layer_id, []).append(r.correlations)
    if not by_layer:
        raise ValueError("no correlation records")
    return {k: float(np.mean(np.concatenate(v))) for k, v in by_layer.items()}


def mean_correlation_across_layers(records: list[CorrelationRecord]) -> float:
    """Layer means averaged with equal weight per layer, so a wide fully
    connected layer does not drown the few-channel convolutional ones."""
    return float(np.mean(list(mean_correlation_per_layer(records).values())))


def summarize(reports: list[EvalReport]) -> list[dict]:
    """Comparison grid: one row per (condition, test set) with mean and std."""
    rows = []
    for rep in reports:
        for t in rep.testsets:
            rows.append({
                "condition": rep.name,
                "testset": t,
                "mean_auc": rep.mean_auc(t),
                "std_auc": rep.std_auc(t),
                "folds_used": sum(1 for d in rep.diverged if not d),
                "folds_diverged": sum(1 for d in rep.diverged if d),
            })
    return rows


# -- serialization -------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def report_csv_lines(report: EvalReport) -> list[str]:
    lines = ["condition,fold,testset,auc,diverged"]
    for t in report.testsets:
        for f, auc in enumerate(report.fold_aucs[t]):
            lines.append(f"{report.name},{f},{t},{_fmt(auc)},{int(report.diverged[f])}")
    return lines


def report_json(report: EvalReport) -> str:
    payload = {
        "name": report.name,
        "config": report.config,
        "testsets": report.testsets,
        "mean_auc": {t: report.mean_auc(t) for t in report.testsets},
        "std_auc": {t: report.std_auc(t) for t in report.testsets},
        "fold_aucs": report.fold_aucs,
        "diverged": report.diverged,
        "loss_curves": report.loss_curves,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def records_csv_lines(records: list[list[CorrelationRecord]]) -> list[str]:
    lines = ["fold,layer_id,epoch,feature,correlation"]
    for f, fold_records in enumerate(records):
        for r in fold_records:
            for i, c in enumerate(r.correlations):
                lines.append(f"{f},{r.layer_id},{r.epoch},{i},{_fmt(float(c))}")
    return lines


def records_from_csv_lines(lines: list[str]) -> list[CorrelationRecord]:
    """Rebuild records from a dump; one record per (fold, layer, epoch) group."""
    header, *rows = [ln for ln in lines if ln.strip()]
    if header.strip() != "fold,layer_id,epoch,feature,correlation":
        raise ValueError(f"unexpected records header: {header!r}")
    grouped: dict[tuple[int, str, int], list[float]] = {}
    for ln in rows:
        fold_s, layer_id, epoch_s, _feat, corr_s = ln.strip().split(",")
        grouped.setdefault((int(fold_s), layer_id, int(epoch_s)), []).append(float(corr_s))
    return [CorrelationRecord(layer_id, epoch, np.array(vals))
            for (_fold, layer_id, epoch), vals in grouped.items()]
