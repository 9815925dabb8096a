"""Segmentation metrics inside the field of view and the evaluation protocols.

Vessel is the positive class. Single-image metrics come from confusion
counts restricted to FOV pixels; dataset-level numbers pool raw counts and
concatenate scores over images. Undefined ratios (zero denominators) are
reported as None, never as 0 or 1.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInputError, ShapeError
from .pipeline import extract_overlapping_patches, recompose

THRESHOLD = 0.5  # p >= 0.5 is vessel


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass
class MetricsReport:
    scope: str
    counts: ConfusionCounts
    se: float            # sensitivity TP/(TP+FN)
    sp: float            # specificity TN/(TN+FP)
    ac: float            # accuracy (TP+TN)/total
    pr: float            # precision TP/(TP+FP)
    f1: float            # 2TP/(2TP+FP+FN)
    auc: float = None

    def metric_row(self):
        return [self.auc, self.se, self.sp, self.ac, self.f1]


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def confusion_within_fov(pred_binary, gt, fov):
    """Confusion counts over FOV pixels only."""
    pred_binary = np.asarray(pred_binary)
    gt = np.asarray(gt)
    fov = np.asarray(fov)
    if not (pred_binary.shape == gt.shape == fov.shape):
        raise ShapeError(
            f"confusion_within_fov dims disagree: pred {pred_binary.shape}, "
            f"gt {gt.shape}, fov {fov.shape}"
        )
    p = pred_binary.astype(bool)[fov.astype(bool)]
    t = gt.astype(bool)[fov.astype(bool)]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num, den):
    return num / den if den > 0 else None


def compute_metrics(counts, scope="image", auc=None):
    """Derive SE/SP/AC/PR/F1 from confusion counts."""
    if counts.total == 0:
        raise DegenerateInputError("no pixels to evaluate (empty FOV?)")
    return MetricsReport(
        scope=scope,
        counts=counts,
        se=_ratio(counts.tp, counts.tp + counts.fn),
        sp=_ratio(counts.tn, counts.tn + counts.fp),
        ac=_ratio(counts.tp + counts.tn, counts.total),
        pr=_ratio(counts.tp, counts.tp + counts.fp),
        f1=_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
        auc=auc,
    )


def roc_auc(scores, labels):
    """Trapezoidal ROC area with tied scores grouped.

    Sweeping descending unique scores and integrating with the trapezoid
    rule equals the Mann-Whitney statistic with half credit for ties.
    Returns (auc, RocCurve).
    """
    scores = np.asarray(scores, np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise DegenerateInputError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    # last index of each tied group
    boundary = np.nonzero(np.diff(s))[0]
    ends = np.concatenate([boundary, [s.size - 1]])
    cum_tp = np.cumsum(l)[ends]
    cum_fp = np.cumsum(~l)[ends]
    tpr = np.concatenate([[0.0], cum_tp / pos])
    fpr = np.concatenate([[0.0], cum_fp / neg])
    auc = float(np.trapezoid(tpr, fpr))
    thresholds = np.concatenate([[np.inf], s[ends]])
    return auc, RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def predict_image(model, image, stride=5, batch_size=64):
    """Tiled eval-mode inference: stride grid, forward, averaged recompose."""
    tiles = extract_overlapping_patches(image, stride=stride)
    preds = np.empty((len(tiles), tiles.patches.shape[1], tiles.patches.shape[2]), np.float32)
    for start in range(0, len(tiles), batch_size):
        batch = tiles.patches[start:start + batch_size]
        out = model.forward(batch, training=False)
        preds[start:start + len(batch)] = out.prediction.data[..., 0]
    return recompose(preds, tiles)


def _score_sample(prob, gt, fov):
    binary = prob >= THRESHOLD
    counts = confusion_within_fov(binary, gt, fov)
    scores = prob[fov.astype(bool)]
    labels = gt[fov.astype(bool)].astype(bool)
    try:
        auc, curve = roc_auc(scores, labels)
    except DegenerateInputError:
        auc, curve = None, None
    return counts, scores, labels, auc, curve


def evaluate_model(model, samples, stride=5, batch_size=64, probability_maps=None):
    """Per-image and pooled reports over a list of cached samples.

    Soft maps score AUC; binary maps at 0.5 feed the confusion counts; both
    stay inside each sample's FOV. ``probability_maps`` collects the soft
    maps by sample id when a dict is passed.
    """
    if not samples:
        raise DataError("no samples to evaluate")
    per_image = []
    pooled_counts = ConfusionCounts(0, 0, 0, 0)
    pooled_scores = []
    pooled_labels = []
    for sample in samples:
        prob = predict_image(model, sample.image, stride=stride, batch_size=batch_size)
        if probability_maps is not None:
            probability_maps[sample.id] = prob
        counts, scores, labels, auc, _ = _score_sample(prob, sample.gt1, sample.fov)
        per_image.append(compute_metrics(counts, scope=f"image:{sample.id}", auc=auc))
        pooled_counts = pooled_counts + counts
        pooled_scores.append(scores)
        pooled_labels.append(labels)
    pooled_auc, pooled_curve = roc_auc(
        np.concatenate(pooled_scores), np.concatenate(pooled_labels)
    )
    pooled = compute_metrics(pooled_counts, scope="pooled", auc=pooled_auc)
    return per_image, pooled, pooled_curve


def cross_train_eval(model, samples_b, stride=5, batch_size=64, probability_maps=None):
    """Evaluate a model on a foreign dataset.

    The caller prepares dataset B with B's own normalization statistics;
    the scoring itself is evaluate_model unchanged.
    """
    return evaluate_model(
        model, samples_b, stride=stride, batch_size=batch_size, probability_maps=probability_maps
    )


def inter_rater_eval(model, samples, stride=5, batch_size=64):
    """Score the model and expert 1 against expert 2's annotations.

    The model stays trained on expert 1; its binary maps are scored against
    gt2, and expert 1's own annotation is scored as a predictor against gt2
    (the human baseline). Returns (model report, human baseline report),
    each as a (per-image list, pooled) pair.
    """
    missing = [s.id for s in samples if s.gt2 is None]
    if missing:
        raise DataError(f"samples lack second-expert annotations: {missing}")
    model_per, model_counts = [], ConfusionCounts(0, 0, 0, 0)
    human_per, human_counts = [], ConfusionCounts(0, 0, 0, 0)
    pooled_scores, pooled_labels = [], []
    for sample in samples:
        prob = predict_image(model, sample.image, stride=stride, batch_size=batch_size)
        counts, scores, labels, auc, _ = _score_sample(prob, sample.gt2, sample.fov)
        model_per.append(compute_metrics(counts, scope=f"image:{sample.id}", auc=auc))
        model_counts = model_counts + counts
        pooled_scores.append(scores)
        pooled_labels.append(labels)
        hcounts = confusion_within_fov(sample.gt1, sample.gt2, sample.fov)
        human_per.append(compute_metrics(hcounts, scope=f"image:{sample.id}"))
        human_counts = human_counts + hcounts
    pooled_auc, _ = roc_auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
    model_pooled = compute_metrics(model_counts, scope="pooled", auc=pooled_auc)
    human_pooled = compute_metrics(human_counts, scope="pooled")
    return (model_per, model_pooled), (human_per, human_pooled)
