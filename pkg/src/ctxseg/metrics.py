"""Segmentation metrics over seen/unseen/overall splits, plus analysis maps.

Conventions (the usual 0/0 cases):
  - categories with zero truth and zero prediction pixels are excluded from
    the mIoU average;
  - categories with zero truth pixels are excluded from the mean-accuracy
    average (recall is undefined there);
  - predictions are scored at full image resolution after nearest-neighbor
    upsampling of the feature-resolution argmax map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .constants import IGNORE
from .errors import ContractError
from .imageio import write_pgm
from .rng import RngState
from .synthetic import upsample_nearest


class ConfusionMatrix:
    """[truth][prediction] pixel counts; IGNORE truth pixels are skipped."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def update(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise ContractError(f"shape mismatch: {truth.shape} vs {pred.shape}")
        valid = truth != IGNORE
        self.ignored += int((~valid).sum())
        t = truth[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        k = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ContractError(f"truth ids outside [0,{k})")
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ContractError(f"prediction ids outside [0,{k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        out.ignored = self.ignored + other.ignored
        return out

    def __add__(self, other):
        return self.merge(other)


def _subset_array(subset) -> np.ndarray:
    s = np.asarray(sorted(subset), dtype=np.int64)
    if s.size == 0:
        raise ContractError("metric subset is empty")
    return s


def miou(cm: ConfusionMatrix, subset) -> float:
    s = _subset_array(subset)
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    present = [c for c in s if denom[c] > 0]
    if not present:
        raise ContractError("no subset category appears in the confusion matrix")
    return float(np.mean([tp[c] / denom[c] for c in present]))


def pixel_acc(cm: ConfusionMatrix, subset) -> float:
    s = _subset_array(subset)
    tp = int(np.diag(cm.counts)[s].sum())
    total = int(cm.counts[s, :].sum())
    if total == 0:
        raise ContractError("no subset category appears in the confusion matrix")
    return tp / total


def mean_acc(cm: ConfusionMatrix, subset) -> float:
    s = _subset_array(subset)
    rows = cm.counts.sum(axis=1)
    present = [c for c in s if rows[c] > 0]
    if not present:
        raise ContractError("no subset category appears in the confusion matrix")
    tp = np.diag(cm.counts)
    return float(np.mean([tp[c] / rows[c] for c in present]))


def hiou(miou_seen: float, miou_unseen: float) -> float:
    """Harmonic mean of the two split mIoUs; 0 when both vanish."""
    if miou_seen + miou_unseen == 0:
        return 0.0
    return 2.0 * miou_seen * miou_unseen / (miou_seen + miou_unseen)


@dataclass
class MetricReport:
    pixel_acc_overall: float
    mean_acc_overall: float
    miou_overall: float
    pixel_acc_seen: float
    mean_acc_seen: float
    miou_seen: float
    pixel_acc_unseen: float
    mean_acc_unseen: float
    miou_unseen: float
    hiou: float

    CSV_HEADER = "iter,split,pixel_acc,mean_acc,miou_seen,miou_unseen,hiou"

    def csv_row(self, iteration: int, split: str) -> str:
        return (f"{iteration},{split},{self.pixel_acc_overall:.6f},"
                f"{self.mean_acc_overall:.6f},{self.miou_seen:.6f},"
                f"{self.miou_unseen:.6f},{self.hiou:.6f}")


def score(cm: ConfusionMatrix, seen_ids, unseen_ids) -> MetricReport:
    all_ids = tuple(seen_ids) + tuple(unseen_ids)
    s = miou(cm, seen_ids)
    try:
        u = miou(cm, unseen_ids)
    except ContractError:
        u = 0.0  # unseen never appears at all (e.g. degenerate corpora)
    return MetricReport(
        pixel_acc_overall=pixel_acc(cm, all_ids),
        mean_acc_overall=mean_acc(cm, all_ids),
        miou_overall=miou(cm, all_ids),
        pixel_acc_seen=pixel_acc(cm, seen_ids),
        mean_acc_seen=mean_acc(cm, seen_ids),
        miou_seen=s,
        pixel_acc_unseen=_safe(pixel_acc, cm, unseen_ids),
        mean_acc_unseen=_safe(mean_acc, cm, unseen_ids),
        miou_unseen=u,
        hiou=hiou(s, u),
    )


def _safe(fn, cm, subset) -> float:
    try:
        return fn(cm, subset)
    except ContractError:
        return 0.0


def evaluate_model(model, samples, seen_ids, unseen_ids):
    """Segment every sample, score against full-resolution labels."""
    cm = ConfusionMatrix(model.num_classes)
    for sample in samples:
        pred = model.segment(sample.image)
        factor = sample.labels.shape[0] // pred.shape[0]
        cm.update(sample.labels, upsample_nearest(pred, factor))
    return score(cm, seen_ids, unseen_ids), cm


# ---------------------------------------------------------------------------
# analysis operations
# ---------------------------------------------------------------------------

def kmeans_features(features: np.ndarray, k: int, seed: int,
                    max_iters: int = 100, tol: float = 1e-9):
    """Seeded Lloyd's algorithm on [P,dim] rows.

    Returns (labels, centers, objective_history); empty clusters keep their
    previous center so the run stays deterministic.
    """
    features = np.asarray(features, dtype=np.float64)
    p = features.shape[0]
    if k < 1 or p < k:
        raise ContractError(f"kmeans needs at least k={k} points, got {p}")
    rng = RngState(seed).spawn("kmeans")
    centers = features[rng.permutation(p)[:k]].copy()
    labels = np.zeros(p, dtype=np.int64)
    history = []
    for _ in range(max_iters):
        d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(p), labels].sum()))
        new_centers = centers.copy()
        for c in range(k):
            members = features[labels == c]
            if len(members):
                new_centers[c] = members.mean(axis=0)
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < tol:
            break
    return labels, centers, history


def rec_loss_map(x, x_fake) -> np.ndarray:
    """Per-pixel squared L2 distance between real and generated features."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    fd = x_fake.data if isinstance(x_fake, Tensor) else np.asarray(x_fake)
    if xd.shape != fd.shape:
        raise ContractError(f"shape mismatch: {xd.shape} vs {fd.shape}")
    diff = xd - fd
    return (diff * diff).sum(axis=-3)


def save_gray_map(path, values: np.ndarray) -> None:
    """Min-max normalize to 8-bit PGM; raw range recorded in header comments."""
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    img = np.round((values - lo) / span * 255).astype(np.uint8)
    write_pgm(path, img, comments=[f"min={lo:.17g}", f"max={hi:.17g}"])


def scale_selection_map(a) -> np.ndarray:
    """Argmax over the 3 scale weights -> gray levels {0,128,255}."""
    ad_ = a.data if isinstance(a, Tensor) else np.asarray(a)
    if ad_.ndim == 4:
        ad_ = ad_[0]
    choice = np.argmax(ad_, axis=0)
    return (choice * 127.5).round().astype(np.uint8)
