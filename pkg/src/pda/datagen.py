"""Synthetic source/target benchmarks with a controllable domain shift."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class SyntheticShiftSpec:
    n_classes: int = 5
    n_source: int = 40          # per class
    n_target: int = 40          # per class
    d_in: int = 32
    n_patches: int = 9
    class_sep: float = 3.0
    domain_shift: float = 3.0
    noise_std: float = 0.5
    rotation_per_shift: float = 0.1   # radians of target rotation per unit of shift
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticDataset:
    X_source: np.ndarray        # (N_s, n_patches, d_in)
    y_source: np.ndarray
    X_target: np.ndarray        # (N_t, n_patches, d_in)
    y_target: np.ndarray        # evaluation only
    class_means: np.ndarray     # (K, d_in), shared by both domains before the shift
    prototypes: np.ndarray      # (K, d_in) class-token rows for the frozen text tower
    rotation: np.ndarray
    shift: np.ndarray

    @property
    def n_classes(self):
        return self.class_means.shape[0]


def _plane_rotation(rng, d, angle):
    basis, _ = np.linalg.qr(rng.normal(size=(d, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    return (np.eye(d) + (c - 1) * (np.outer(u, u) + np.outer(v, v))
            + s * (np.outer(v, u) - np.outer(u, v)))


def generate_synthetic(spec: SyntheticShiftSpec) -> SyntheticDataset:
    """Draw a labeled source set and a rotated + translated target set.

    Class means are ``class_sep / sqrt(2)`` times orthonormal directions, so
    every pair sits exactly ``class_sep`` apart.  Each patch of a sample is
    its class mean plus isotropic noise; target patches are then mapped
    through ``x -> R x + s`` with ``|s| = domain_shift``.
    """
    K, d = spec.n_classes, spec.d_in
    if K < 2:
        raise ParameterError("need at least 2 classes")
    if K > d:
        raise ParameterError(f"n_classes={K} exceeds d_in={d}")
    if not spec.class_sep > 0:
        raise ParameterError(f"class_sep must be positive, got {spec.class_sep}")
    if not spec.noise_std > 0:
        raise ParameterError(f"noise_std must be positive, got {spec.noise_std}")
    if spec.domain_shift < 0:
        raise ParameterError("domain_shift must be non-negative")

    rng = np.random.default_rng(spec.seed)
    directions, _ = np.linalg.qr(rng.normal(size=(d, K)))
    directions = directions.T
    means = directions * (spec.class_sep / np.sqrt(2.0))

    R = _plane_rotation(rng, d, spec.rotation_per_shift * spec.domain_shift)
    s = rng.normal(size=d)
    s *= spec.domain_shift / np.linalg.norm(s)

    def draw(n_per_class):
        y = np.repeat(np.arange(K), n_per_class)
        X = means[y][:, None, :] + rng.normal(0, spec.noise_std, (len(y), spec.n_patches, d))
        return X, y

    Xs, ys = draw(spec.n_source)
    Xt, yt = draw(spec.n_target)
    Xt = Xt @ R.T + s
    return SyntheticDataset(
        X_source=Xs, y_source=ys, X_target=Xt, y_target=yt,
        class_means=means, prototypes=directions * np.sqrt(d), rotation=R, shift=s,
    )
