"""Feature-geometry and domain-discrepancy metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError

MMD_ESTIMATOR = "mmd2-biased-rbf-median"
KL_ESTIMATOR = "kl-diag-gaussian-ridge1e-6"
KL_RIDGE = 1e-6


def accuracy(predictions, labels):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise DataError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def per_class_accuracy(predictions, labels, n_classes):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    out = []
    for k in range(n_classes):
        sel = labels == k
        out.append(float(np.mean(predictions[sel] == k)) if sel.any() else float("nan"))
    return out


@dataclass
class ClassDistanceStats:
    D1: float
    D2: float
    variance: float
    r: float
    r_infinite: bool = False


def class_distance_stats(features, labels):
    """Inner-class distance, inter-class distance, variance and their ratio.

    ``D1``: mean distance of each sample to its own class centroid.
    ``D2``: mean distance of each sample to every other class centroid.
    ``variance``: mean squared deviation from the own-class centroid,
    averaged over samples and dimensions.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if len(X) != len(y) or len(X) == 0:
        raise DataError("features and labels must be non-empty and equally long")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DataError("inter-class distance D2 is undefined with fewer than 2 classes")
    centroids = np.stack([X[y == k].mean(axis=0) for k in classes])
    own = np.searchsorted(classes, y)
    dist = cdist(X, centroids)
    rows = np.arange(len(X))
    d_own = dist[rows, own]
    D1 = float(d_own.mean())
    other = np.ones_like(dist, dtype=bool)
    other[rows, own] = False
    D2 = float(dist[other].mean())
    variance = float(((X - centroids[own]) ** 2).mean())
    if D1 == 0.0:
        return ClassDistanceStats(D1, D2, variance, float("inf"), r_infinite=True)
    return ClassDistanceStats(D1, D2, variance, D2 / D1)


def median_bandwidth(X, Y):
    pooled = np.concatenate([X, Y])
    d2 = cdist(pooled, pooled, "sqeuclidean")
    off = d2[~np.eye(len(pooled), dtype=bool)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


def mmd(X, Y, bandwidth=None):
    """Biased (V-statistic) squared MMD with an RBF kernel.

    ``k(x, y) = exp(-|x - y|^2 / bandwidth)``; by default ``bandwidth`` is
    the median pairwise squared distance of the pooled sample.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0 or len(Y) == 0:
        raise DataError("mmd needs non-empty samples")
    if X.shape[1] != Y.shape[1]:
        raise DataError(f"feature widths differ: {X.shape[1]} vs {Y.shape[1]}")
    bw = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)

    def k(A, B):
        return np.exp(-cdist(A, B, "sqeuclidean") / bw)

    value = k(X, X).mean() + k(Y, Y).mean() - 2 * k(X, Y).mean()
    return float(max(value, 0.0))


def kl_diag_gaussian(mu_x, var_x, mu_y, var_y):
    """Closed-form KL(N(mu_x, var_x) || N(mu_y, var_y)) for diagonal covariances."""
    mu_x, var_x, mu_y, var_y = (np.asarray(a, dtype=np.float64) for a in (mu_x, var_x, mu_y, var_y))
    return float(0.5 * np.sum(np.log(var_y / var_x) + (var_x + (mu_x - mu_y) ** 2) / var_y - 1.0))


def kl_gaussian(X, Y):
    """KL between diagonal Gaussians fitted to ``X`` and ``Y``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) < 2 or len(Y) < 2:
        raise DataError("kl_gaussian needs at least 2 samples per set")
    return kl_diag_gaussian(X.mean(0), X.var(0) + KL_RIDGE, Y.mean(0), Y.var(0) + KL_RIDGE)


@dataclass
class MetricReport:
    accuracy: float | None = None
    D1: float | None = None
    D2: float | None = None
    inner_variance: float | None = None
    r: float | None = None
    mmd: float | None = None
    kl: float | None = None
    per_domain: dict = field(default_factory=dict)
    provenance: str = ""

    def records(self):
        """``(name, value, estimator id, provenance)`` tuples, one per metric."""
        est = {"mmd": MMD_ESTIMATOR, "kl": KL_ESTIMATOR, "r": "D2/D1"}
        out = []
        for name, value in asdict(self).items():
            if name in ("per_domain", "provenance") or value is None:
                continue
            out.append((name, value, est.get(name, "exact"), self.provenance))
        for domain, sub in self.per_domain.items():
            for name, value in sub.items():
                if value is not None:
                    out.append((f"{domain}.{name}", value, est.get(name, "exact"), self.provenance))
        return out

    def to_text(self):
        lines = ["# name\tvalue\testimator\tprovenance"]
        for name, value, est, prov in self.records():
            if isinstance(value, float) and np.isinf(value):
                shown = "inf(flagged:D1=0)"
            else:
                shown = repr(value)
            lines.append(f"{name}\t{shown}\t{est}\t{prov}")
        return "\n".join(lines) + "\n"


def domain_report(source, target, source_labels=None, target_labels=None,
                  predictions=None, provenance=""):
    """Discrepancy between two feature sets plus per-domain geometry."""
    report = MetricReport(provenance=provenance)
    if len(source) >= 2 and len(target) >= 2:
        report.mmd = mmd(source, target)
        report.kl = kl_gaussian(source, target)
    for name, feats, labels in (("source", source, source_labels),
                                ("target", target, target_labels)):
        if labels is None or len(np.unique(labels)) < 2:
            continue
        s = class_distance_stats(feats, labels)
        report.per_domain[name] = {"D1": s.D1, "D2": s.D2, "inner_variance": s.variance, "r": s.r}
    if predictions is not None and target_labels is not None:
        report.accuracy = accuracy(predictions, target_labels)
    return report
