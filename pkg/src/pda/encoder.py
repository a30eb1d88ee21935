"""Frozen toy dual encoder with multi-modal prompts.

The text side sees ``[v_j, c]`` at layer ``j``: ``M`` learnable context rows
followed by the class token carried forward from the previous layer.  The
image side sees ``[p_j, e, cls]`` where ``p_j`` is ``v_j @ F`` for the first
``coupled_layers`` layers and an independent deep prompt afterwards.  Prompt
rows are replaced at every layer; everything else is carried.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DataError, ParameterError

LAYER_KEYS = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    d_proj: int = 16
    n_patches: int = 9
    coupled_layers: int = 2
    context_length: int = 2
    d_ff: int = 64
    init_std: float = 0.02
    temperature: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 1 <= self.coupled_layers <= self.n_layers:
            raise ParameterError(
                f"coupled_layers must lie in [1, n_layers={self.n_layers}], got {self.coupled_layers}")
        if self.context_length < 1:
            raise ParameterError("context_length must be >= 1")
        if not self.temperature > 0:
            raise ParameterError("temperature must be positive")

    def to_dict(self):
        return asdict(self)


def _readonly(a):
    a = np.array(a, dtype=nx.DTYPE)
    a.setflags(write=False)
    return a


@dataclass
class FrozenWeights:
    """Encoder weights that never receive gradients.

    ``token_embedding`` holds one row per class id.  Each layer dict carries
    the attention projections and the two feed-forward matrices.
    """

    config: EncoderConfig
    token_embedding: np.ndarray
    image_cls: np.ndarray
    text_layers: list
    image_layers: list
    text_proj: np.ndarray
    image_proj: np.ndarray

    @property
    def temperature(self):
        return self.config.temperature

    @classmethod
    def init(cls, config: EncoderConfig, n_classes: int, class_embeddings=None):
        """Seeded random weights.

        Attention query/key and the MLP are small Gaussians; the value and
        output maps are identity plus Gaussian noise so each class token
        pools the rest of its sequence.  Both towers share one output
        projection, and class-token rows can be injected (e.g. class
        prototypes) in place of random ones.
        """
        rng = np.random.default_rng(config.seed)
        d, std = config.d_model, config.init_std
        eye = np.eye(d)

        def layer():
            return {
                "wq": rng.normal(0, std, (d, d)),
                "wk": rng.normal(0, std, (d, d)),
                "wv": eye + rng.normal(0, std, (d, d)),
                "wo": eye + rng.normal(0, std, (d, d)),
                "w1": rng.normal(0, std, (d, config.d_ff)),
                "w2": rng.normal(0, std, (config.d_ff, d)),
            }

        text_layers = [layer() for _ in range(config.n_layers)]
        image_layers = [layer() for _ in range(config.n_layers)]
        proj = rng.normal(0, 1.0 / math.sqrt(d), (d, config.d_proj))
        image_cls = rng.normal(0, std, (1, d))
        if class_embeddings is None:
            tokens = rng.normal(0, 1.0, (n_classes, d))
        else:
            tokens = np.asarray(class_embeddings, dtype=nx.DTYPE)
            if tokens.shape != (n_classes, d):
                raise DataError(
                    f"class_embeddings shape {tokens.shape} != ({n_classes}, {d})")
        return cls.from_arrays(config, {
            "token_embedding": tokens,
            "image_cls": image_cls,
            "text_proj": proj,
            "image_proj": proj,
            **_flatten_layers("text", text_layers),
            **_flatten_layers("image", image_layers),
        })

    @classmethod
    def identity(cls, config: EncoderConfig, token_embedding, image_cls=None, proj=None):
        """Layers whose attention is uniform and whose value path is the identity.

        With zero query/key maps every token attends uniformly, so each layer
        adds the mean of the layer-normalised sequence to every position.
        """
        d = config.d_model
        zeros = np.zeros((d, d))
        lay = {"wq": zeros, "wk": zeros, "wv": np.eye(d), "wo": np.eye(d),
               "w1": np.zeros((d, config.d_ff)), "w2": np.zeros((config.d_ff, d))}
        if proj is None:
            proj = np.eye(d)[:, : config.d_proj]
        if image_cls is None:
            image_cls = np.zeros((1, d))
        layers = [dict(lay) for _ in range(config.n_layers)]
        return cls.from_arrays(config, {
            "token_embedding": token_embedding,
            "image_cls": image_cls,
            "text_proj": proj,
            "image_proj": proj,
            **_flatten_layers("text", layers),
            **_flatten_layers("image", layers),
        })

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: dict):
        """Loader hook: build weights from a flat ``{name: array}`` mapping."""
        layers = {}
        for tower in ("text", "image"):
            layers[tower] = [
                {k: _readonly(arrays[f"{tower}.{j}.{k}"]) for k in LAYER_KEYS}
                for j in range(config.n_layers)
            ]
        return cls(
            config=config,
            token_embedding=_readonly(arrays["token_embedding"]),
            image_cls=_readonly(arrays["image_cls"]),
            text_layers=layers["text"],
            image_layers=layers["image"],
            text_proj=_readonly(arrays["text_proj"]),
            image_proj=_readonly(arrays["image_proj"]),
        )

    def to_arrays(self) -> dict:
        out = {
            "token_embedding": self.token_embedding,
            "image_cls": self.image_cls,
            "text_proj": self.text_proj,
            "image_proj": self.image_proj,
        }
        out.update(_flatten_layers("text", self.text_layers))
        out.update(_flatten_layers("image", self.image_layers))
        return out

    @property
    def n_classes(self):
        return self.token_embedding.shape[0]


def _flatten_layers(tower, layers):
    return {f"{tower}.{j}.{k}": lay[k] for j, lay in enumerate(layers) for k in LAYER_KEYS}


@dataclass
class PromptSet:
    """All learnable prompt tensors.

    ``text``: one ``M x d_model`` context block per layer.
    ``coupling``: the ``d_model x d_model`` text-to-visual projection.
    ``deep``: independent visual prompts for layers past ``coupled_layers``.
    ``coupling`` is ``None`` and ``deep`` empty when visual prompts are off.
    """

    text: list
    coupling: nx.Tensor | None = None
    deep: list = field(default_factory=list)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0, visual: bool = True):
        rng = np.random.default_rng(seed)
        M, d, J = config.context_length, config.d_model, config.n_layers
        text = [nx.parameter(rng.normal(0, 0.02, (M, d)), name=f"text.{j}") for j in range(J)]
        if not visual:
            return cls(text=text)
        coupling = nx.parameter(np.eye(d) + rng.normal(0, 0.01, (d, d)), name="coupling")
        deep = [
            nx.parameter(rng.normal(0, 0.02, (M, d)), name=f"deep.{j}")
            for j in range(config.coupled_layers, J)
        ]
        return cls(text=text, coupling=coupling, deep=deep)

    @property
    def visual(self):
        return self.coupling is not None

    def parameters(self):
        out = list(self.text)
        if self.coupling is not None:
            out.append(self.coupling)
        out.extend(self.deep)
        return out

    def named_arrays(self):
        return {p.name: p.data for p in self.parameters()}

    def load_arrays(self, arrays):
        for p in self.parameters():
            p.data = np.array(arrays[p.name], dtype=nx.DTYPE)

    def n_params(self):
        return sum(p.data.size for p in self.parameters())


def expected_prompt_param_count(config: EncoderConfig):
    J, M, d, Jc = config.n_layers, config.context_length, config.d_model, config.coupled_layers
    return J * M * d + d * d + (J - Jc) * M * d


def _block(x, layer, n_heads):
    """Pre-norm transformer block on a ``B x L x d`` tensor."""
    B, L, d = x.shape
    h = nx.layer_norm(x)
    q, k, v = h @ layer["wq"], h @ layer["wk"], h @ layer["wv"]
    dh = d // n_heads
    if n_heads > 1:
        def split(t):
            return nx.transpose(nx.reshape(t, (B, L, n_heads, dh)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
    attn = nx.softmax_rows(q @ nx.swap_last(k), t=math.sqrt(dh))
    a = attn @ v
    if n_heads > 1:
        a = nx.reshape(nx.transpose(a, (0, 2, 1, 3)), (B, L, d))
    x = x + a @ layer["wo"]
    return x + nx.gelu(nx.layer_norm(x) @ layer["w1"]) @ layer["w2"]


def couple_visual_prompts(prompts: PromptSet, config: EncoderConfig):
    """Image prompts for the first ``coupled_layers`` layers: ``v_j @ F``."""
    return [prompts.text[j] @ prompts.coupling for j in range(config.coupled_layers)]


def visual_prompts(prompts: PromptSet, config: EncoderConfig):
    """Per-layer image prompts: coupled early layers, independent deep ones."""
    return couple_visual_prompts(prompts, config) + list(prompts.deep)


def encode_text(weights: FrozenWeights, prompts: PromptSet, class_ids=None):
    """Unit-norm text features, one row per class id (K x d_proj)."""
    cfg = weights.config
    n_tok = weights.token_embedding.shape[0]
    if class_ids is None:
        class_ids = np.arange(n_tok)
    class_ids = np.asarray(class_ids)
    if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= n_tok):
        raise DataError(f"class id out of range [0, {n_tok}): {class_ids.tolist()}")
    K, M, d = len(class_ids), cfg.context_length, cfg.d_model
    c = nx.tensor(weights.token_embedding[class_ids][:, None, :])
    for j, layer in enumerate(weights.text_layers):
        ctx = nx.broadcast_to(prompts.text[j], (K, M, d))
        x = _block(nx.concat([ctx, c], axis=1), layer, cfg.n_heads)
        c = nx.slice_rows(x, M, M + 1, axis=1)
    out = nx.layer_norm(nx.reshape(c, (K, d))) @ weights.text_proj
    return nx.l2_normalize_rows(out)


def encode_images(weights: FrozenWeights, prompts: PromptSet, X):
    """Unit-norm image features for a batch ``B x n_patches x d_model``."""
    cfg = weights.config
    X = nx.tensor(X)
    if X.ndim != 3 or X.shape[1] != cfg.n_patches or X.shape[2] != cfg.d_model:
        raise DataError(
            f"expected patches of shape (B, {cfg.n_patches}, {cfg.d_model}), got {X.shape}")
    B, n, d, M = X.shape[0], cfg.n_patches, cfg.d_model, cfg.context_length
    cls = nx.tensor(np.broadcast_to(weights.image_cls, (B, 1, d)))
    e = X
    vis = visual_prompts(prompts, cfg) if prompts.visual else [None] * cfg.n_layers
    for layer, p in zip(weights.image_layers, vis):
        parts = [e, cls] if p is None else [nx.broadcast_to(p, (B, M, d)), e, cls]
        x = _block(nx.concat(parts, axis=1), layer, cfg.n_heads)
        off = 0 if p is None else M
        e = nx.slice_rows(x, off, off + n, axis=1)
        cls = nx.slice_rows(x, off + n, off + n + 1, axis=1)
    out = nx.layer_norm(nx.reshape(cls, (B, d))) @ weights.image_proj
    return nx.l2_normalize_rows(out)


def encode_image(weights: FrozenWeights, prompts: PromptSet, x):
    """Single-sample form of :func:`encode_images`; returns a ``d_proj`` tensor."""
    x = np.asarray(x.data if isinstance(x, nx.Tensor) else x)
    if x.ndim != 2 or x.shape[0] != weights.config.n_patches:
        raise DataError(f"expected {weights.config.n_patches} patch rows, got shape {x.shape}")
    return nx.reshape(encode_images(weights, prompts, x[None]), (weights.config.d_proj,))


def zero_shot_probs(W, z, t):
    """Class probabilities from temperature-scaled cosine similarity.

    ``W`` (K x d) and ``z`` (d, or B x d) must already be unit rows.
    """
    W = np.asarray(W.data if isinstance(W, nx.Tensor) else W, dtype=nx.DTYPE)
    z = np.asarray(z.data if isinstance(z, nx.Tensor) else z, dtype=nx.DTYPE)
    if not t > 0:
        raise ParameterError(f"temperature must be positive, got {t}")
    for name, m in (("W", W), ("z", z)):
        norms = np.linalg.norm(np.atleast_2d(m), axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError(f"{name} rows must be unit norm (max deviation "
                                f"{np.abs(norms - 1).max():.2e})")
    logits = z @ W.T / t
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)
