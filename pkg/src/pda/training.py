"""Two-branch training: pseudo-labels, the four contrastive losses, SGD."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .alignment import FeatureBank, IFTParams, build_domain_banks, ift_forward
from .encoder import EncoderConfig, FrozenWeights, PromptSet, encode_images, encode_text
from .errors import ContractError, DataError, NumericalError, ParameterError

log = logging.getLogger(__name__)

ENCODE_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.8
    gamma: float = 1.0
    beta1: float = 0.1
    beta2: float = 0.1
    temperature: float = 0.01
    lr: float = 0.003
    epochs: int = 10
    batch_size: int = 32
    shots: int = 5
    context_length: int = 2
    warmup_epochs: int = 0
    ensemble_weight: float = 0.5
    bank_refresh_epochs: int = 0
    use_lx: bool = True
    use_lu: bool = True
    use_lxa: bool = True
    use_lua: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.tau <= 1.01:
            # 1.01 is allowed as the "discard everything" setting
            raise ParameterError(f"tau must lie in [0, 1] (or 1.01 to disable), got {self.tau}")
        if self.gamma < 0:
            raise ParameterError("gamma must be >= 0")
        if not 0 <= self.ensemble_weight <= 1:
            raise ParameterError("ensemble_weight must lie in [0, 1]")
        if self.lr < 0:
            raise ParameterError("lr must be >= 0")
        if not self.temperature > 0:
            raise ParameterError("temperature must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.shots < 1 or self.warmup_epochs < 0:
            raise ParameterError("epochs/warmup_epochs must be >= 0; batch_size/shots >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def config_hash(self, encoder: EncoderConfig | None = None):
        payload = {"train": self.to_dict()}
        if encoder is not None:
            payload["encoder"] = encoder.to_dict()
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class LossReport:
    L_x: float
    L_u: float
    L_xa: float
    L_ua: float
    total: float
    n_pseudo_kept: int
    epoch: int = 0
    step: int = 0
    lr: float = 0.0

    def as_row(self):
        return [self.step, self.lr, self.L_x, self.L_u, self.L_xa, self.L_ua,
                self.total, self.n_pseudo_kept]


@dataclass
class UDADataset:
    """Labeled source inputs and unlabeled target inputs.

    ``kind`` is ``"raw"`` (``N x n_patches x d_model`` patch features sent
    through the image tower) or ``"embedding"`` (``N x d_proj`` precomputed
    image features).
    """

    X_source: np.ndarray
    y_source: np.ndarray
    X_target: np.ndarray
    n_classes: int
    kind: str = "raw"

    def __post_init__(self):
        self.y_source = np.asarray(self.y_source, dtype=np.int64)
        if self.kind not in ("raw", "embedding"):
            raise DataError(f"unknown feature kind {self.kind!r}")
        if len(self.X_source) != len(self.y_source):
            raise DataError("X_source and y_source lengths differ")
        missing = sorted(set(range(self.n_classes)) - set(self.y_source.tolist()))
        if missing:
            raise DataError(f"source set has no samples for classes {missing}")


class PDAModel:
    """Frozen encoder + learnable prompts + IFT module + feature banks."""

    def __init__(self, weights: FrozenWeights, prompts: PromptSet, ift: IFTParams,
                 kind="raw", source_bank: FeatureBank | None = None,
                 target_bank: FeatureBank | None = None):
        self.weights = weights
        self.prompts = prompts
        self.ift = ift
        self.kind = kind
        self.source_bank = source_bank
        self.target_bank = target_bank

    @classmethod
    def init(cls, weights: FrozenWeights, config: TrainConfig, kind="raw"):
        enc = weights.config
        prompts = PromptSet.init(enc, seed=config.seed, visual=kind == "raw")
        ift = IFTParams.init(enc.d_proj, seed=config.seed + 1,
                             beta1=config.beta1, beta2=config.beta2)
        return cls(weights, prompts, ift, kind)

    @property
    def temperature(self):
        return self.weights.temperature

    def parameters(self):
        return self.prompts.parameters() + self.ift.parameters()

    def text_features(self):
        return encode_text(self.weights, self.prompts)

    def image_features(self, X):
        if self.kind == "embedding":
            return nx.l2_normalize_rows(nx.tensor(X))
        return encode_images(self.weights, self.prompts, X)

    def image_features_np(self, X):
        """Detached image features, encoded in chunks."""
        X = np.asarray(X)
        if len(X) == 0:
            return np.zeros((0, self.weights.config.d_proj))
        return np.concatenate([self.image_features(X[i:i + ENCODE_CHUNK]).data
                               for i in range(0, len(X), ENCODE_CHUNK)])

    def aligned(self, Z):
        if self.source_bank is None or self.target_bank is None:
            raise ContractError("feature banks have not been built")
        return ift_forward(Z, self.source_bank, self.target_bank, self.ift)

    def predict_proba(self, X, ensemble_weight=0.5, t=None):
        W = self.text_features().data
        Z = self.image_features_np(X)
        return ensemble_probs(W, Z, self.aligned(Z).data, ensemble_weight,
                              self.temperature if t is None else t)


def _softmax_np(logits):
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def branch_probs(W, Z, t):
    """Softmax of temperature-scaled cosine similarity; ``Z`` rows need not be unit."""
    Z = np.asarray(Z)
    Zn = Z / np.linalg.norm(Z, axis=-1, keepdims=True)
    return _softmax_np(Zn @ np.asarray(W).T / t)


def ensemble_probs(W, Z, H, lam, t):
    if not 0 <= lam <= 1:
        raise ParameterError(f"ensemble weight must lie in [0, 1], got {lam}")
    return lam * branch_probs(W, Z, t) + (1 - lam) * branch_probs(W, H, t)


def predict(model: PDAModel, X, ensemble_weight=0.5):
    """Weighted sum of base- and alignment-branch predictions."""
    probs = model.predict_proba(X, ensemble_weight)
    return probs.argmax(axis=-1), probs


def pseudo_label(probs, tau):
    """Argmax labels and the keep-mask ``max prob >= tau``."""
    probs = np.asarray(probs, dtype=nx.DTYPE)
    if probs.ndim != 2:
        raise ContractError(f"probabilities must be 2-D, got shape {probs.shape}")
    if probs.size and (np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-6)):
        raise ContractError("probability rows must be non-negative and sum to 1")
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    return probs.argmax(axis=1), probs.max(axis=1) >= tau


def contrastive_loss(W, Z, labels, mask, t):
    """Mean over kept rows of ``-log softmax(sim(Z, W) / t)[label]``.

    Returns a constant zero when nothing is kept.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    K = W.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels outside [0, {K})")
    n_kept = int(mask.sum())
    if n_kept == 0:
        return nx.tensor(0.0)
    if n_kept < mask.size:
        keep = np.flatnonzero(mask)
        Z = nx.index(nx.tensor(Z), keep)
        labels = labels[keep]
    sim = nx.l2_normalize_rows(Z) @ nx.swap_last(W)
    nll = nx.pick(nx.log_softmax_rows(sim, t), labels)
    return nx.scale(nx.sum_all(nll), -1.0 / n_kept)


def total_loss(model: PDAModel, Xs, ys, Xt, pseudo, mask, config: TrainConfig):
    """``L_x + L_u + gamma (L_xa + L_ua)``; returns ``(total tensor, parts, W, Zt)``."""
    t = model.temperature
    W = model.text_features()
    Zs = model.image_features(Xs)
    ones = np.ones(len(ys), dtype=bool)
    zero = nx.tensor(0.0)
    has_t = len(Xt) > 0 and bool(np.any(mask))
    Zt = model.image_features(Xt) if len(Xt) else None

    Lx = contrastive_loss(W, Zs, ys, ones, t) if config.use_lx else zero
    Lu = contrastive_loss(W, Zt, pseudo, mask, t) if (config.use_lu and has_t) else zero
    Lxa = Lua = zero
    if config.gamma != 0 and (config.use_lxa or config.use_lua):
        if config.use_lxa:
            Lxa = contrastive_loss(W, model.aligned(Zs), ys, ones, t)
        if config.use_lua and has_t:
            Lua = contrastive_loss(W, model.aligned(Zt), pseudo, mask, t)
    total = Lx + Lu + nx.scale(Lxa + Lua, config.gamma)
    parts = (float(Lx.data), float(Lu.data), float(Lxa.data), float(Lua.data))
    return total, parts, W, Zt


def cosine_lr(step, total_steps, lr0):
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class CheckpointState:
    prompts: dict
    ift: dict
    source_bank: np.ndarray
    target_bank: np.ndarray
    step: int
    epoch: int
    rng_state: dict
    config_hash: str
    config: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    kind: str = "raw"

    def arrays(self):
        out = {f"prompt:{k}": v for k, v in self.prompts.items()}
        out.update({f"ift:{k}": v for k, v in self.ift.items()})
        out["bank:source"] = self.source_bank
        out["bank:target"] = self.target_bank
        return out

    def meta(self):
        return {"step": self.step, "epoch": self.epoch, "rng_state": self.rng_state,
                "config_hash": self.config_hash, "config": self.config,
                "encoder": self.encoder, "kind": self.kind}

    @classmethod
    def from_parts(cls, meta, arrays):
        def sub(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        return cls(prompts=sub("prompt:"), ift=sub("ift:"),
                   source_bank=arrays["bank:source"], target_bank=arrays["bank:target"],
                   step=int(meta["step"]), epoch=int(meta["epoch"]), rng_state=meta["rng_state"],
                   config_hash=meta["config_hash"], config=meta.get("config", {}),
                   encoder=meta.get("encoder", {}), kind=meta.get("kind", "raw"))


def epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


@dataclass
class ZeroShot:
    """Frozen predictions of the initial model, used for banks and warm-up labels."""

    W: np.ndarray
    Z_source: np.ndarray
    Z_target: np.ndarray
    probs_source: np.ndarray
    probs_target: np.ndarray


def zero_shot(model: PDAModel, data: UDADataset):
    t = model.temperature
    W = model.text_features().data
    Zs = model.image_features_np(data.X_source)
    Zt = model.image_features_np(data.X_target)
    return ZeroShot(W, Zs, Zt, branch_probs(W, Zs, t),
                    branch_probs(W, Zt, t) if len(Zt) else np.zeros((0, len(W))))


def build_banks(model: PDAModel, data: UDADataset, Zs, Zt, probs_s, probs_t, shots):
    if len(Zt):
        pseudo_t, conf_t = probs_t.argmax(1), probs_t.max(1)
    else:
        pseudo_t, conf_t = np.zeros(0, np.int64), np.zeros(0)
        Zt = np.zeros((0, Zs.shape[1]))
    model.source_bank, model.target_bank = build_domain_banks(
        Zs, probs_s.max(1), data.y_source, Zt, conf_t, pseudo_t, data.n_classes, shots)


@dataclass
class TrainResult:
    model: PDAModel
    state: CheckpointState
    steps: list
    epochs: list
    zero_shot: ZeroShot


def _domain_mmd(model, data):
    from .metrics import mmd

    if len(data.X_target) < 2:
        return float("nan")
    return mmd(model.image_features_np(data.X_source), model.image_features_np(data.X_target))


def train(data: UDADataset, config: TrainConfig, weights: FrozenWeights,
          resume: CheckpointState | None = None, stop_after_epoch: int | None = None,
          step_callback=None, track_mmd=False) -> TrainResult:
    """Plain SGD with cosine annealing over prompts and IFT parameters.

    Target labels are never an input.  Banks are built once from the initial
    (zero-shot) model before the first epoch.  ``stop_after_epoch`` ends the
    run early so it can be resumed from the returned state.
    """
    enc = weights.config
    if enc.context_length != config.context_length:
        raise ParameterError(f"encoder context_length {enc.context_length} != "
                             f"config context_length {config.context_length}")
    if enc.temperature != config.temperature:
        weights = dataclasses.replace(weights, config=dataclasses.replace(
            enc, temperature=config.temperature))
        enc = weights.config
    chash = config.config_hash(enc)
    model = PDAModel.init(weights, config, data.kind)
    zs = zero_shot(model, data)
    build_banks(model, data, zs.Z_source, zs.Z_target, zs.probs_source, zs.probs_target,
                config.shots)

    n_s, n_t, bs = len(data.X_source), len(data.X_target), config.batch_size
    steps_per_epoch = math.ceil(n_s / bs)
    total_steps = config.epochs * steps_per_epoch
    start_epoch, step = 0, 0
    if resume is not None:
        if resume.config_hash != chash:
            raise ContractError("checkpoint was produced with a different configuration")
        model.prompts.load_arrays(resume.prompts)
        model.ift.load_arrays(resume.ift)
        model.source_bank.centroids = np.array(resume.source_bank)
        model.target_bank.centroids = np.array(resume.target_bank)
        start_epoch, step = resume.epoch, resume.step

    params = model.parameters()
    step_reports, epoch_reports = [], []
    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last_epoch):
        if config.bank_refresh_epochs and epoch > 0 and epoch % config.bank_refresh_epochs == 0:
            W = model.text_features().data
            Zs, Zt = model.image_features_np(data.X_source), model.image_features_np(data.X_target)
            build_banks(model, data, Zs, Zt, branch_probs(W, Zs, model.temperature),
                        branch_probs(W, Zt, model.temperature) if n_t else None, config.shots)
        use_zero_shot = config.warmup_epochs == 0 or epoch < config.warmup_epochs
        rng = epoch_rng(config.seed, epoch)
        perm_s = rng.permutation(n_s)
        perm_t = np.resize(rng.permutation(n_t), steps_per_epoch * bs) if n_t else None
        reports = []
        for b in range(steps_per_epoch):
            idx_s = perm_s[b * bs:(b + 1) * bs]
            idx_t = perm_t[b * bs:b * bs + len(idx_s)] if n_t else np.zeros(0, np.int64)
            Xs, ys, Xt = data.X_source[idx_s], data.y_source[idx_s], data.X_target[idx_t]
            lr = cosine_lr(step, total_steps, config.lr)
            if use_zero_shot:
                pseudo, mask = pseudo_label(zs.probs_target[idx_t], config.tau)
            else:
                W_now = model.text_features().data
                Zt_now = model.image_features_np(Xt)
                pseudo, mask = pseudo_label(branch_probs(W_now, Zt_now, model.temperature)
                                            if len(Xt) else np.zeros((0, data.n_classes)),
                                            config.tau)
            with nx.Tape() as tape:
                loss, parts, _, _ = total_loss(model, Xs, ys, Xt, pseudo, mask, config)
            report = LossReport(*parts, total=float(loss.data), n_pseudo_kept=int(mask.sum()),
                                epoch=epoch, step=step, lr=lr)
            if not np.isfinite(report.total):
                raise NumericalError(f"non-finite loss at step {step}", report)
            if loss.requires_grad:
                grads = tape.backward(loss)
                for p in params:
                    g = grads.get(p)
                    if g is not None:
                        p.data = p.data - lr * g
            reports.append(report)
            step_reports.append(report)
            if step_callback is not None:
                step_callback(report)
            step += 1
        summary = {
            "epoch": epoch,
            **{k: float(np.mean([getattr(r, k) for r in reports]))
               for k in ("L_x", "L_u", "L_xa", "L_ua", "total")},
            "n_pseudo_kept": int(sum(r.n_pseudo_kept for r in reports)),
        }
        if track_mmd:
            summary["mmd"] = _domain_mmd(model, data)
        epoch_reports.append(summary)
        log.info("epoch %d: %s", epoch, summary)

    end_epoch = max(start_epoch, last_epoch)
    state = CheckpointState(
        prompts={k: v.copy() for k, v in model.prompts.named_arrays().items()},
        ift={k: v.copy() for k, v in model.ift.named_arrays().items()},
        source_bank=model.source_bank.centroids.copy(),
        target_bank=model.target_bank.centroids.copy(),
        step=step, epoch=end_epoch,
        rng_state={"seed": config.seed, "next_epoch": end_epoch,
                   "bit_generator": epoch_rng(config.seed, end_epoch).bit_generator.state},
        config_hash=chash, config=config.to_dict(), encoder=enc.to_dict(), kind=data.kind,
    )
    return TrainResult(model, state, step_reports, epoch_reports, zs)


def model_from_state(state: CheckpointState, weights: FrozenWeights, n_classes=None):
    """Rebuild an inference-ready model from checkpoint state."""
    config = TrainConfig(**state.config) if state.config else TrainConfig()
    model = PDAModel.init(weights, config, state.kind)
    model.prompts.load_arrays(state.prompts)
    model.ift.load_arrays(state.ift)
    k = state.source_bank.shape[0]
    model.source_bank = FeatureBank(np.array(state.source_bank), "source", config.shots, [[]] * k)
    model.target_bank = FeatureBank(np.array(state.target_bank), "target", config.shots, [[]] * k)
    return model


TOY_ENCODER = EncoderConfig(d_model=8, n_layers=3, n_heads=2, d_proj=4, n_patches=3,
                            coupled_layers=2, context_length=2, d_ff=8, seed=0)


def toy_problem(seed=0, encoder: EncoderConfig = TOY_ENCODER):
    """A 2-class, 4-sample-per-domain instance with banks already built."""
    rng = np.random.default_rng(seed)
    enc = dataclasses.replace(encoder, seed=seed)
    weights = FrozenWeights.init(enc, 2)
    X = rng.normal(size=(8, enc.n_patches, enc.d_model))
    data = UDADataset(X[:4], np.array([0, 1, 0, 1]), X[4:], 2)
    config = TrainConfig(tau=0.0, shots=2, seed=seed, context_length=enc.context_length,
                         temperature=enc.temperature)
    model = PDAModel.init(weights, config)
    # zero biases let a fully dead hidden layer emit exact zeros, which puts
    # the next ReLU on its kink; jitter them so the check runs at a generic point
    for m in (model.ift.f_pre, model.ift.f_post):
        for b in m.biases:
            b.data = rng.normal(0, 0.1, b.shape)
    zs = zero_shot(model, data)
    build_banks(model, data, zs.Z_source, zs.Z_target, zs.probs_source, zs.probs_target,
                config.shots)
    pseudo, mask = pseudo_label(zs.probs_target, config.tau)
    return model, data, config, pseudo, mask


def toy_gradcheck(seed=0, h=1e-6):
    """Max relative error of tape vs finite-difference gradients of the full loss."""
    model, data, config, pseudo, mask = toy_problem(seed)

    def objective(_params):
        loss, _, _, _ = total_loss(model, data.X_source, data.y_source, data.X_target,
                                   pseudo, mask, config)
        return loss

    return nx.finite_diff_check(objective, model.parameters(), h=h)
