"""Capsule network for text: gated front-end, capsule layers, routing, losses.

The architecture reads an embedded document ``[l, e]``, builds a feature
map with a gated (or ablation) convolution front-end, folds the map into a
small set of capsule vectors, and routes those to one capsule per class.
Class scores are capsule lengths.  An optional three-layer decoder
reconstructs the embedded document from the selected class capsule.

All forward functions accept either raw arrays (plain evaluation) or tape
nodes (recorded for backprop), and either a single example or a batch with
a leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .config import ModelConfig
from .errors import ConfigError
from .optim import dropout_mask, l2_penalty

TensorLike = Union[np.ndarray, Node]

# Margin loss constants (capsule-length classification).
MARGIN_POS = 0.9
MARGIN_NEG = 0.1
MARGIN_LAMBDA = 0.5

# Keeps squash away from 0/0 on zero capsules.
SQUASH_EPS = 1e-8

# Ablation front-end: per-size filter banks and the pooling kernel rows.
MULTI_FILTER_SIZES = (3, 4, 5)
MULTI_FILTER_COUNT = 100

# Fan-in-aware init targets.  Squash is roughly quadratic below norm 1, so
# capsule pre-activations must start near these norms or the stacked
# squashes flatten the loss and training stalls in a bias-only optimum.
CAPSULE_NORM_TARGET = 1.5
EMBED_INIT_STD = 1.0
DEFAULT_PERTURB_LIMIT = 0.3


# ---------------------------------------------------------------------------
# Parameter bundles
# ---------------------------------------------------------------------------


@dataclass
class GateConvParams:
    """Two parallel convolutions: a linear path and its multiplicative gate."""

    W: TensorLike  # [f, e, n]
    V: TensorLike  # [f, e, n]
    b: TensorLike  # [n]
    c: TensorLike  # [n]


@dataclass
class PlainConvParams:
    W: TensorLike  # [f, e, n]
    b: TensorLike  # [n]


@dataclass
class MultiFilterParams:
    """One filter bank per kernel size, concatenated on channels."""

    W3: TensorLike
    W4: TensorLike
    W5: TensorLike
    b3: TensorLike
    b4: TensorLike
    b5: TensorLike

    def banks(self):
        return ((self.W3, self.b3), (self.W4, self.b4), (self.W5, self.b5))


@dataclass
class PrimaryCapsuleParams:
    """Full-height convolution producing ``count`` capsules of ``dim`` units."""

    kernel: TensorLike  # [height, 1, channels, count * dim]
    bias: TensorLike    # [count * dim]
    count: int
    dim: int


@dataclass
class RoutingParams:
    """One transform matrix per (lower capsule, class capsule) pair."""

    weights: TensorLike  # [a, k, M, N]


@dataclass
class RoutingState:
    """Logits after the final agreement update and the coefficients they induce."""

    b_logits: np.ndarray  # [..., a, k]
    c_coef: np.ndarray    # softmax_rows(b_logits)
    iteration: int


@dataclass
class DecoderParams:
    """Three affine layers mapping the masked class capsule back to [l, e]."""

    W1: TensorLike
    b1: TensorLike
    W2: TensorLike
    b2: TensorLike
    W3: TensorLike
    b3: TensorLike
    out_rows: int  # l
    out_cols: int  # e


@dataclass
class ModelParams:
    embedding: TensorLike  # [vocab, e]
    frontend: GateConvParams | PlainConvParams | MultiFilterParams
    primary: PrimaryCapsuleParams
    routing: RoutingParams
    decoder: DecoderParams | None = None


# ---------------------------------------------------------------------------
# Layer math
# ---------------------------------------------------------------------------


def embed_lookup(token_ids, embedding: TensorLike, pad_id: int = 0):
    """Embed ids ``[l]`` (or ``[batch, l]``) to ``[..., l, e]`` rows.

    The padding row stays frozen: it is all zeros and never receives
    gradient.
    """
    return ad.gather_rows(embedding, np.asarray(token_ids), frozen_rows=(pad_id,))


def elu_gate_forward(doc, p: GateConvParams):
    """Gated convolution: (doc * W + b) elementwise-times elu(doc * V + c)."""
    linear = ad.conv1d_valid(doc, p.W, p.b)
    gate = ad.elu(ad.conv1d_valid(doc, p.V, p.c))
    return ad.mul(linear, gate)


def frontend_forward(doc, params, variant: str):
    """Dispatch to the configured front-end (main model or an ablation)."""
    if variant == "elu_gate":
        return elu_gate_forward(doc, params)
    if variant == "conv_plain":
        return ad.elu(ad.conv1d_valid(doc, params.W, params.b))
    if variant in ("multi_filter", "multi_filter_maxpool"):
        maps = [ad.conv1d_valid(doc, W, b) for W, b in params.banks()]
        if variant == "multi_filter_maxpool":
            maps = [ad.maxpool_pairs(m) for m in maps]
        height = min(np.shape(ad._value(m))[-2] for m in maps)
        return ad.concat([ad.crop_rows(m, height) for m in maps], axis=-1)
    raise ConfigError(f"unknown front-end variant {variant!r}")


def frontend_output_shape(cfg: ModelConfig, max_len: int) -> tuple[int, int]:
    """(rows, channels) the configured front-end emits for documents of ``max_len``."""
    if cfg.frontend in ("elu_gate", "conv_plain"):
        if max_len < cfg.filter_size:
            raise ConfigError(
                f"max_len {max_len} shorter than filter size {cfg.filter_size}"
            )
        return max_len - cfg.filter_size + 1, cfg.filters
    heights = [max_len - f + 1 for f in MULTI_FILTER_SIZES]
    if min(heights) < 1:
        raise ConfigError(
            f"max_len {max_len} too short for filter sizes {MULTI_FILTER_SIZES}"
        )
    if cfg.frontend == "multi_filter_maxpool":
        heights = [h // 2 for h in heights]
        if min(heights) < 1:
            raise ConfigError(f"max_len {max_len} too short to pool by pairs")
    return min(heights), MULTI_FILTER_COUNT * len(MULTI_FILTER_SIZES)


def squash(s):
    """Scale capsule vectors into the open unit ball, keeping direction.

    Vectors live on the last axis; a zero vector maps to a zero vector.
    """
    n = ad.vector_norm(s, keepdims=True)
    n2 = ad.square(n)
    scale = ad.div(n2, ad.mul(ad.add(n2, 1.0), ad.add(n, SQUASH_EPS)))
    return ad.mul(s, scale)


def primary_capsules_forward(features, p: PrimaryCapsuleParams):
    """Fold the whole feature map into ``count`` squashed capsule vectors."""
    kv = ad._value(p.kernel)
    height, _, channels, out_channels = kv.shape
    fv = ad._value(features)
    if fv.shape[-2] != height:
        raise ValueError(
            f"feature map height {fv.shape[-2]} does not match kernel height {height}"
        )
    if fv.shape[-1] != channels:
        raise ValueError(
            f"feature channels {fv.shape[-1]} do not match kernel channels {channels}"
        )
    single = fv.ndim == 2
    flat = ad.reshape(features, (1, height * channels) if single else (-1, height * channels))
    kernel_matrix = ad.reshape(p.kernel, (height * channels, out_channels))
    mixed = ad.add(ad.matmul(flat, kernel_matrix), p.bias)
    caps_shape = (p.count, p.dim) if single else (-1, p.count, p.dim)
    return squash(ad.reshape(mixed, caps_shape))


def predict_upper(h, routing: RoutingParams):
    """Per-pair transform of lower capsules into class-capsule predictions."""
    spec = "am,akmn->akn" if ad._value(h).ndim == 2 else "bam,akmn->bakn"
    return ad.einsum(spec, h, routing.weights)


def dynamic_route(h_hat, iterations: int):
    """Iterative routing by agreement over prediction vectors.

    Coupling logits start at zero (uniform coefficients on the first pass)
    and every iteration reweights, squashes, and adds the agreement update.
    Returns the class capsules and the final routing state.
    """
    if iterations < 1:
        raise ConfigError(f"routing needs at least 1 iteration, got {iterations}")
    hv = ad._value(h_hat)
    single = hv.ndim == 3
    weight_spec = "ak,akn->kn" if single else "bak,bakn->bkn"
    agree_spec = "kn,akn->ak" if single else "bkn,bakn->bak"
    logits = np.zeros(hv.shape[:-1], dtype=hv.dtype)
    v = None
    for _ in range(iterations):
        c = ad.softmax_rows(logits)
        s = ad.einsum(weight_spec, c, h_hat)
        v = squash(s)
        logits = ad.add(logits, ad.einsum(agree_spec, v, h_hat))
    final_logits = np.array(ad._value(logits))
    state = RoutingState(
        b_logits=final_logits,
        c_coef=ad.softmax_rows(final_logits),
        iteration=iterations,
    )
    return v, state


def static_route(h, routing: RoutingParams):
    """Route without coefficients: plain sum of transformed lower capsules."""
    spec = "am,akmn->kn" if ad._value(h).ndim == 2 else "bam,akmn->bkn"
    return squash(ad.einsum(spec, h, routing.weights))


def capsule_lengths(v) -> np.ndarray:
    return np.asarray(ad._value(ad.vector_norm(v)))


def classify(v):
    """Class = capsule with the longest vector; ties go to the lowest index."""
    lengths = capsule_lengths(v)
    picked = lengths.argmax(axis=-1)
    return picked if lengths.ndim > 1 else int(picked)


def margin_loss(v, label):
    """Two-sided hinge on capsule lengths.

    For a single example this is the sum over classes; for a batch, the
    mean of the per-example sums.  ``label`` is an int or an int array
    matching the batch shape.
    """
    value = ad._value(v)
    k = value.shape[-2]
    labels = np.asarray(label)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes: {labels}")
    onehot = np.zeros(value.shape[:-1], dtype=value.dtype)
    np.put_along_axis(
        onehot.reshape(-1, k), labels.reshape(-1, 1).astype(np.int64), 1.0, axis=-1
    )
    lengths = ad.vector_norm(v)
    present = ad.square(ad.relu(ad.sub(MARGIN_POS, lengths)))
    absent = ad.square(ad.relu(ad.sub(lengths, MARGIN_NEG)))
    per_class = ad.add(ad.mul(onehot, present), ad.mul((1.0 - onehot) * MARGIN_LAMBDA, absent))
    per_example = ad.sum(per_class, axis=-1)
    if value.ndim == 2:
        return ad.sum(per_example)
    return ad.mean(per_example)


def reconstruct_forward(v, class_index, decoder: DecoderParams):
    """Decode the selected class capsule back to an ``[l, e]`` document.

    All other class capsules are masked to zero before the affine chain.
    """
    value = ad._value(v)
    k, n_dim = value.shape[-2], value.shape[-1]
    expected_in = ad._value(decoder.W1).shape[0]
    if k * n_dim != expected_in:
        raise ValueError(
            f"decoder expects {expected_in} inputs, capsules provide {k * n_dim}"
        )
    out_size = ad._value(decoder.W3).shape[1]
    if decoder.out_rows * decoder.out_cols != out_size:
        raise ValueError(
            f"decoder output {out_size} does not reshape to "
            f"{decoder.out_rows}x{decoder.out_cols}"
        )
    labels = np.asarray(class_index)
    mask = np.zeros(value.shape[:-1], dtype=value.dtype)
    np.put_along_axis(
        mask.reshape(-1, k), labels.reshape(-1, 1).astype(np.int64), 1.0, axis=-1
    )
    single = value.ndim == 2
    masked = ad.mul(v, mask[..., None])
    flat = ad.reshape(masked, (1, k * n_dim) if single else (-1, k * n_dim))
    hidden1 = ad.elu(ad.add(ad.matmul(flat, decoder.W1), decoder.b1))
    hidden2 = ad.elu(ad.add(ad.matmul(hidden1, decoder.W2), decoder.b2))
    out = ad.add(ad.matmul(hidden2, decoder.W3), decoder.b3)
    shape = (decoder.out_rows, decoder.out_cols)
    return ad.reshape(out, shape if single else (-1,) + shape)


def reconstruction_mse(target: np.ndarray, decoded):
    """Mean squared error against a fixed (non-differentiated) target."""
    diff = ad.sub(decoded, np.asarray(target))
    return ad.mean(ad.square(diff))


def capsule_dim_perturb(v: np.ndarray, class_index: int, dim: int, noise: float,
                        limit: float = DEFAULT_PERTURB_LIMIT) -> np.ndarray:
    """Copy of ``v`` with ``noise`` added to one coordinate of one capsule."""
    value = np.array(ad._value(v))
    k, n_dim = value.shape[-2], value.shape[-1]
    if not 0 <= class_index < k:
        raise ValueError(f"class index {class_index} out of range for {k} capsules")
    if not 0 <= dim < n_dim:
        raise ValueError(f"dimension {dim} out of range for {n_dim}-unit capsules")
    if abs(noise) > limit:
        raise ValueError(f"|noise| = {abs(noise)} exceeds limit {limit}")
    value[..., class_index, dim] += noise
    return value


# ---------------------------------------------------------------------------
# The assembled model
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    capsules: TensorLike            # [..., k, N]
    routing_state: RoutingState | None
    doc: TensorLike                 # embedded input [..., l, e]
    reconstruction: TensorLike | None


class CapsTextModel:
    """Owns the parameter arrays and wires the layers together.

    Parameters are mutated only by the training loop; forward passes are
    pure, so a fixed model is safe for concurrent evaluation.
    """

    def __init__(self, cfg: ModelConfig, vocab_size: int, max_len: int,
                 rng: np.random.Generator | None = None,
                 embedding: np.ndarray | None = None):
        cfg.validate()
        if max_len < 1:
            raise ConfigError(f"max_len must be positive, got {max_len}")
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.max_len = max_len
        dtype = cfg.dtype
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)

        def weight(sigma, *shape):
            return rng.normal(0.0, sigma, size=shape).astype(dtype)

        def bias(size):
            return np.zeros(size, dtype=dtype)

        height, channels = frontend_output_shape(cfg, max_len)
        if embedding is not None:
            if embedding.shape != (vocab_size, cfg.embed_dim):
                raise ConfigError(
                    f"embedding shape {embedding.shape} does not match "
                    f"({vocab_size}, {cfg.embed_dim})"
                )
            emb = embedding.astype(dtype)
        else:
            emb = rng.normal(0.0, EMBED_INIT_STD,
                             size=(vocab_size, cfg.embed_dim)).astype(dtype)
        emb[0] = 0.0  # padding row is pinned to zero
        e, n = cfg.embed_dim, cfg.filters
        # calibrate the front-end against the actual embedding scale so
        # feature maps start near unit variance for random and pretrained
        # vectors alike
        input_std = max(float(emb[1:].std()), 1e-3) if vocab_size > 1 else 1.0

        def conv_sigma(filter_rows):
            return 1.0 / (input_std * np.sqrt(filter_rows * e))

        if cfg.frontend == "elu_gate":
            sigma = conv_sigma(cfg.filter_size)
            frontend = GateConvParams(
                W=weight(sigma, cfg.filter_size, e, n),
                V=weight(sigma, cfg.filter_size, e, n),
                b=bias(n), c=bias(n),
            )
        elif cfg.frontend == "conv_plain":
            frontend = PlainConvParams(
                W=weight(conv_sigma(cfg.filter_size), cfg.filter_size, e, n), b=bias(n)
            )
        else:
            frontend = MultiFilterParams(
                W3=weight(conv_sigma(3), 3, e, MULTI_FILTER_COUNT),
                W4=weight(conv_sigma(4), 4, e, MULTI_FILTER_COUNT),
                W5=weight(conv_sigma(5), 5, e, MULTI_FILTER_COUNT),
                b3=bias(MULTI_FILTER_COUNT), b4=bias(MULTI_FILTER_COUNT),
                b5=bias(MULTI_FILTER_COUNT),
            )
        a, m_dim, n_dim, k = cfg.capsules, cfg.caps_dim, cfg.class_caps_dim, cfg.num_classes
        primary = PrimaryCapsuleParams(
            kernel=weight(CAPSULE_NORM_TARGET / np.sqrt(m_dim * height * channels),
                          height, 1, channels, a * m_dim),
            bias=bias(a * m_dim), count=a, dim=m_dim,
        )
        # dynamic routing averages predictions through 1/k first-pass
        # coefficients, so its transform starts k times larger to reach
        # the same pre-squash norm as the coefficient-free mode
        route_sigma = CAPSULE_NORM_TARGET / np.sqrt(n_dim * a * m_dim)
        if cfg.routing == "dynamic":
            route_sigma *= k
        routing = RoutingParams(weights=weight(route_sigma, a, k, m_dim, n_dim))
        decoder = None
        if cfg.with_decoder:
            h1, h2 = cfg.decoder_hidden
            decoder = DecoderParams(
                W1=weight(1.0 / np.sqrt(k * n_dim), k * n_dim, h1), b1=bias(h1),
                W2=weight(1.0 / np.sqrt(h1), h1, h2), b2=bias(h2),
                W3=weight(1.0 / np.sqrt(h2), h2, max_len * e), b3=bias(max_len * e),
                out_rows=max_len, out_cols=e,
            )
        self.params = ModelParams(
            embedding=emb, frontend=frontend, primary=primary,
            routing=routing, decoder=decoder,
        )

    # -- parameter plumbing -------------------------------------------------

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor."""
        out: dict[str, np.ndarray] = {"embedding": self.params.embedding}
        for holder, prefix in ((self.params.frontend, "frontend"),
                               (self.params.primary, "primary"),
                               (self.params.routing, "routing"),
                               (self.params.decoder, "decoder")):
            if holder is None:
                continue
            for f in fields(holder):
                value = getattr(holder, f.name)
                if isinstance(value, np.ndarray):
                    out[f"{prefix}.{f.name}"] = value
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        current = self.named_tensors()
        missing = set(current) - set(tensors)
        extra = set(tensors) - set(current)
        if missing or extra:
            raise ConfigError(
                f"tensor set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, arr in tensors.items():
            if arr.shape != current[name].shape:
                raise ConfigError(
                    f"tensor {name!r} shape {arr.shape} != expected {current[name].shape}"
                )
        self.params = self._rebuild(lambda name, _: tensors[name].astype(self.cfg.dtype))

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def _rebuild(self, transform) -> ModelParams:
        """New ModelParams with each named tensor replaced by transform(name, arr)."""
        def map_holder(holder, prefix):
            if holder is None:
                return None
            updates = {
                f.name: transform(f"{prefix}.{f.name}", getattr(holder, f.name))
                for f in fields(holder)
                if isinstance(getattr(holder, f.name), np.ndarray)
            }
            return replace(holder, **updates)

        return ModelParams(
            embedding=transform("embedding", self.params.embedding),
            frontend=map_holder(self.params.frontend, "frontend"),
            primary=map_holder(self.params.primary, "primary"),
            routing=map_holder(self.params.routing, "routing"),
            decoder=map_holder(self.params.decoder, "decoder"),
        )

    def bind(self, tape: ad.Tape) -> ModelParams:
        """Register every tensor on ``tape`` and return a node-backed mirror."""
        return self._rebuild(lambda name, arr: tape.parameter(name, arr))

    def l2_groups(self, params: ModelParams | None = None):
        """Weight tensors by regularization group; biases are excluded.

        The front-end weights carry the per-dataset constant, every other
        weight layer shares ``l2_other``, and embeddings go unpenalized.
        """
        p = params if params is not None else self.params
        front = p.frontend
        if isinstance(front, GateConvParams):
            gate_weights = [front.W, front.V]
        elif isinstance(front, PlainConvParams):
            gate_weights = [front.W]
        else:
            gate_weights = [front.W3, front.W4, front.W5]
        other = [p.primary.kernel, p.routing.weights]
        if p.decoder is not None:
            other += [p.decoder.W1, p.decoder.W2, p.decoder.W3]
        groups = {"gate": gate_weights, "other": other, "embedding": [p.embedding]}
        constants = {"gate": self.cfg.l2_gate, "other": self.cfg.l2_other, "embedding": 0.0}
        return groups, constants

    # -- forward passes -----------------------------------------------------

    def forward(self, ids, params: ModelParams | None = None, *,
                train: bool = False, dropout_rng: np.random.Generator | None = None,
                mask_labels=None) -> ForwardResult:
        """Run the network on padded id sequences ``[l]`` or ``[batch, l]``.

        During training the front-end output is dropout-masked and, when a
        decoder is present, the reconstruction mask uses ``mask_labels``
        (true labels).  At inference the predicted class is masked instead.
        """
        p = params if params is not None else self.params
        cfg = self.cfg
        doc = embed_lookup(ids, p.embedding)
        features = frontend_forward(doc, p.frontend, cfg.frontend)
        if train and cfg.dropout > 0:
            if dropout_rng is None:
                raise ConfigError("training forward needs a dropout generator")
            mask = dropout_mask(np.shape(ad._value(features)), cfg.dropout,
                                dropout_rng, dtype=cfg.dtype)
            features = ad.mul(features, mask)
        h = primary_capsules_forward(features, p.primary)
        if cfg.routing == "dynamic":
            v, state = dynamic_route(predict_upper(h, p.routing), cfg.route_iters)
        else:
            v, state = static_route(h, p.routing), None
        reconstruction = None
        if p.decoder is not None:
            selected = mask_labels if (train and mask_labels is not None) else classify(v)
            reconstruction = reconstruct_forward(v, selected, p.decoder)
        return ForwardResult(capsules=v, routing_state=state, doc=doc,
                             reconstruction=reconstruction)

    def predict(self, ids) -> np.ndarray:
        """Class predictions with no recording (evaluation fast path)."""
        return np.asarray(classify(self.forward(ids).capsules))

    def loss(self, result: ForwardResult, labels, bound: ModelParams | None = None):
        """Margin loss plus reconstruction and L2 terms where configured."""
        total = margin_loss(result.capsules, labels)
        if result.reconstruction is not None and self.cfg.recon_weight > 0:
            target = np.asarray(ad._value(result.doc))
            recon = reconstruction_mse(target, result.reconstruction)
            total = ad.add(total, ad.mul(recon, self.cfg.recon_weight))
        groups, constants = self.l2_groups(bound)
        return ad.add(total, l2_penalty(groups, constants))
