"""Alignment branch: per-class feature banks and image-guided feature tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import BankConstructionError, DimensionError, ParameterError

log = logging.getLogger(__name__)


@dataclass
class FeatureBank:
    """``K x d`` class centroids for one domain plus which samples built them."""

    centroids: np.ndarray
    domain: str
    shots: int
    support: list           # per class: list of (sample_id, confidence)

    @property
    def n_classes(self):
        return self.centroids.shape[0]

    def as_tensor(self):
        return nx.tensor(self.centroids)


def _select_top(features, confidences, labels, n_classes, shots):
    ids = np.arange(len(labels))
    # lexsort: last key is primary -> confidence descending, then id ascending
    order = np.lexsort((ids, -confidences))
    means = np.zeros((n_classes, features.shape[1]))
    support = []
    for k in range(n_classes):
        chosen = order[labels[order] == k][:shots]
        if chosen.size:
            means[k] = features[chosen].mean(axis=0)
        support.append([(int(i), float(confidences[i])) for i in chosen])
    empty = [k for k in range(n_classes) if not support[k]]
    return means, support, empty


def _check_bank_inputs(features, confidences, labels, n_classes, shots):
    features = np.asarray(features, dtype=nx.DTYPE)
    confidences = np.asarray(confidences, dtype=nx.DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if not (len(features) == len(confidences) == len(labels)):
        raise DimensionError("features, confidences and labels must have equal length")
    if shots < 1:
        raise ParameterError("shots must be >= 1")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DimensionError(f"labels outside [0, {n_classes})")
    return features, confidences, labels


def build_feature_bank(features, confidences, labels, n_classes, shots, domain="source"):
    """Average the ``shots`` most confident features of each class.

    Ties in confidence go to the lower sample id.  Centroids are L2-normalised.
    """
    features, confidences, labels = _check_bank_inputs(
        features, confidences, labels, n_classes, shots)
    means, support, empty = _select_top(features, confidences, labels, n_classes, shots)
    if empty:
        raise BankConstructionError(empty, domain)
    centroids = nx.l2_normalize_rows(means).data
    return FeatureBank(centroids=centroids, domain=domain, shots=shots, support=support)


def build_domain_banks(source_features, source_conf, source_labels,
                       target_features, target_conf, target_pseudo, n_classes, shots):
    """Source and target banks; missing target classes borrow the source centroid."""
    source = build_feature_bank(source_features, source_conf, source_labels,
                                n_classes, shots, "source")
    features, conf, pseudo = _check_bank_inputs(
        target_features, target_conf, target_pseudo, n_classes, shots)
    means, support, empty = _select_top(features, conf, pseudo, n_classes, shots)
    if empty:
        log.warning("target bank: classes %s have no pseudo-labeled samples; "
                    "using source centroids", empty)
        means[empty] = source.centroids[empty]
    target = FeatureBank(centroids=nx.l2_normalize_rows(means).data, domain="target",
                         shots=shots, support=support)
    return source, target


class MLP3:
    """Three linear layers with ReLU between them; the last layer is linear."""

    def __init__(self, weights, biases, prefix="mlp"):
        self.weights = [nx.parameter(w, name=f"{prefix}.w{i}") for i, w in enumerate(weights)]
        self.biases = [nx.parameter(b, name=f"{prefix}.b{i}") for i, b in enumerate(biases)]

    @classmethod
    def init(cls, d, rng, last_std=None, prefix="mlp"):
        """He-scaled hidden layers; ``last_std`` overrides the output layer."""
        he = math.sqrt(2.0 / d)
        stds = [he, he, he if last_std is None else last_std]
        return cls([rng.normal(0, s, (d, d)) for s in stds],
                   [np.zeros(d) for _ in range(3)], prefix)

    def __call__(self, x):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < 2:
                x = nx.relu(x)
        return x

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class IFTParams:
    f_pre: MLP3
    f_post: MLP3
    scale: float
    beta1: float = 0.1
    beta2: float = 0.1

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError(f"attention scale must be positive, got {self.scale}")

    @classmethod
    def init(cls, d, seed=0, beta1=0.1, beta2=0.1, scale=None, out_std=0.02):
        # small f_post output: the residual starts close to the plain feature
        rng = np.random.default_rng(seed)
        return cls(
            f_pre=MLP3.init(d, rng, prefix="f_pre"),
            f_post=MLP3.init(d, rng, out_std, "f_post"),
            scale=math.sqrt(d) if scale is None else scale,
            beta1=beta1, beta2=beta2,
        )

    @property
    def dim(self):
        return self.f_pre.weights[0].shape[0]

    def parameters(self):
        return self.f_pre.parameters() + self.f_post.parameters()

    def named_arrays(self):
        return {p.name: p.data for p in self.parameters()}

    def load_arrays(self, arrays):
        for p in self.parameters():
            p.data = np.array(arrays[p.name], dtype=nx.DTYPE)


def project_qkv(z, source_centroids, target_centroids, params: IFTParams):
    """Shared-projector queries/keys/values; each bank's key is its value."""
    z = nx.tensor(z)
    d = params.dim
    for name, m in (("image features", z), ("source bank", source_centroids),
                    ("target bank", target_centroids)):
        if m.shape[-1] != d:
            raise DimensionError(f"{name} width {m.shape[-1]} != projector width {d}")
    q = params.f_pre(z)
    k_s = params.f_pre(nx.tensor(source_centroids))
    k_t = params.f_pre(nx.tensor(target_centroids))
    return q, k_s, k_s, k_t, k_t


def attention_weights(q, keys, scale):
    return nx.softmax_rows(q @ nx.swap_last(keys), t=scale)


def attend(q, keys, values, scale, f_post):
    """``f_post(softmax(q keys^T / scale) values)``."""
    if not scale > 0:
        raise ParameterError(f"attention scale must be positive, got {scale}")
    if keys.shape != values.shape:
        raise DimensionError(f"keys {keys.shape} and values {values.shape} differ")
    return f_post(attention_weights(q, keys, scale) @ values)


def add_norm(z_a, z):
    if z_a.shape != nx.tensor(z).shape:
        raise DimensionError(f"add_norm shape mismatch: {z_a.shape} vs {z.shape}")
    return nx.l2_normalize_rows(nx.add(z_a, z))


def ift_branches(z, source_bank, target_bank, params: IFTParams):
    """Return ``(z_vs, z_vt)``: image features enhanced by each bank."""
    src = source_bank.centroids if isinstance(source_bank, FeatureBank) else source_bank
    tgt = target_bank.centroids if isinstance(target_bank, FeatureBank) else target_bank
    q, k_s, v_s, k_t, v_t = project_qkv(z, src, tgt, params)
    z_vs = add_norm(attend(q, k_s, v_s, params.scale, params.f_post), z)
    z_vt = add_norm(attend(q, k_t, v_t, params.scale, params.f_post), z)
    return z_vs, z_vt


def ift_forward(z, source_bank, target_bank, params: IFTParams):
    """``h(z) = beta1 * z_vs + beta2 * z_vt``."""
    z_vs, z_vt = ift_branches(z, source_bank, target_bank, params)
    return nx.add(nx.scale(z_vs, params.beta1), nx.scale(z_vt, params.beta2))
