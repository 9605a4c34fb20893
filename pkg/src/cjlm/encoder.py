"""Convolutional source-sentence encoders.

The encoder is a fixed six-stage pipeline over a left-padded source sentence:
word embeddings, a width-3 sigmoid convolution, a local fusion step pairing
adjacent convolution windows, a second width-3 convolution, a global fusion
step over all remaining locations, and a final sigmoid projection to the
representation consumed by the next-word predictor.

Four architectures share the pipeline and differ only in the guide signal:

* ``generic``    no guide; the representation depends on the source alone.
* ``tag``        an extra 0/1 embedding column marks the source words tied to
                 the predicted target word by the word alignment.
* ``tag_dep``    a second 0/1 column additionally marks the dependency heads
                 of those marked words.
* ``attention``  a signal computed from the target history is prepended to the
                 input of every first-layer convolution window.

Fusion is either content-conditioned gating (a logistic gate over window pairs
locally, a softmax-weighted sum globally) or the max-pooling ablation (pairwise
max locally, mean of the per-feature top-k globally). Both produce identically
shaped inputs for the projection.

Single-sample operations here are the readable reference path; ``forward_batch``
and ``backward_batch`` are the vectorized kernels used by training and bulk
scoring, and the tests pin the two paths against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .vocab import PAD_ID

ARCHS = ("generic", "tag", "tag_dep", "attention")
FUSIONS = ("gating", "pooling")
CONV_WINDOW = 3  # both convolution layers use width-3 windows
LOCAL_PAIR = 2  # local fusion pairs windows two at a time

INIT_SCALE = 0.08
PARAM_DTYPE = np.float32


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction; the bare formula overflows in low precision."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and dimensions of one encoder instance.

    Defaults follow the reference setup: 100-dim embeddings, 100 filters per
    convolution layer, a 100-dim representation, 40-word padded sources, and a
    3-word target history.
    """

    arch: str = "generic"
    emb_dim: int = 100
    tgt_emb_dim: int = 100
    attn_dim: int = 100
    filters1: int = 100
    filters3: int = 100
    repr_dim: int = 100
    maxlen: int = 40
    history: int = 3
    fusion: str = "gating"
    pool_k: int = 2
    attn_depth: int = 1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(
                f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}"
            )
        for name in ("emb_dim", "tgt_emb_dim", "filters1", "filters3", "repr_dim",
                     "history", "attn_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.arch == "attention" and self.attn_dim < 1:
            raise ConfigError("attn_dim must be positive for the attention arch")
        if self.conv_locs1 < 2 or self.conv_locs1 % LOCAL_PAIR != 0:
            raise ConfigError(
                f"maxlen {self.maxlen} gives {self.conv_locs1} first-layer windows; "
                f"local fusion needs a positive even count"
            )
        if self.conv_locs3 < 1:
            raise ConfigError(
                f"maxlen {self.maxlen} leaves no locations after the second convolution"
            )
        if self.fusion == "pooling" and not 1 <= self.pool_k <= self.conv_locs3:
            raise ConfigError(
                f"pool_k {self.pool_k} out of range; must be in [1, {self.conv_locs3}]"
            )

    # Layer geometry. Both convolutions are narrow: each drops two locations.
    @property
    def conv_locs1(self) -> int:
        return self.maxlen - (CONV_WINDOW - 1)

    @property
    def fused_locs(self) -> int:
        return self.conv_locs1 // LOCAL_PAIR

    @property
    def conv_locs3(self) -> int:
        return self.fused_locs - (CONV_WINDOW - 1)

    @property
    def tag_bits(self) -> int:
        return {"generic": 0, "tag": 1, "tag_dep": 2, "attention": 0}[self.arch]

    @property
    def input_dim(self) -> int:
        """Width of one input row: embedding plus any tag columns."""
        return self.emb_dim + self.tag_bits

    @property
    def prefix_dim(self) -> int:
        return self.attn_dim if self.arch == "attention" else 0

    @property
    def conv1_width(self) -> int:
        return self.prefix_dim + CONV_WINDOW * self.input_dim


@dataclass
class EncoderParams:
    """All learnable encoder tensors. Shapes are fixed by an EncoderConfig.

    Gate tensors exist only under gating fusion; attention layers only for the
    attention arch. The PAD embedding row is fixed at zero and never trained.
    """

    src_embeddings: np.ndarray
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    gate_local_w: np.ndarray | None = None
    gate_local_b: np.ndarray | None = None
    gate_global_w: np.ndarray | None = None
    attn_layers: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    @classmethod
    def initialize(cls, cfg: EncoderConfig, vocab_size: int,
                   rng: np.random.Generator,
                   init_scale: float = INIT_SCALE) -> "EncoderParams":
        def w(*shape):
            return rng.uniform(-init_scale, init_scale, shape).astype(PARAM_DTYPE)

        def b(*shape):
            return np.zeros(shape, dtype=PARAM_DTYPE)

        emb = w(vocab_size, cfg.emb_dim)
        emb[PAD_ID] = 0.0
        params = cls(
            src_embeddings=emb,
            conv1_w=w(cfg.filters1, cfg.conv1_width),
            conv1_b=b(cfg.filters1),
            conv3_w=w(cfg.filters3, CONV_WINDOW * cfg.filters1),
            conv3_b=b(cfg.filters3),
            proj_w=w(cfg.repr_dim, cfg.filters3),
            proj_b=b(cfg.repr_dim),
        )
        if cfg.fusion == "gating":
            params.gate_local_w = w(2 * LOCAL_PAIR * cfg.input_dim)
            params.gate_local_b = b(1)
            params.gate_global_w = w(cfg.filters3)
        if cfg.arch == "attention":
            layers = []
            in_dim = cfg.history * cfg.tgt_emb_dim
            for _ in range(cfg.attn_depth):
                layers.append((w(cfg.attn_dim, in_dim), b(cfg.attn_dim)))
                in_dim = cfg.attn_dim
            params.attn_layers = tuple(layers)
        return params

    def tensors(self) -> dict[str, np.ndarray]:
        """Named learnable tensors in a fixed, serialization-stable order."""
        out = {
            "src_embeddings": self.src_embeddings,
            "conv1_w": self.conv1_w,
            "conv1_b": self.conv1_b,
            "conv3_w": self.conv3_w,
            "conv3_b": self.conv3_b,
            "proj_w": self.proj_w,
            "proj_b": self.proj_b,
        }
        if self.gate_local_w is not None:
            out["gate_local_w"] = self.gate_local_w
            out["gate_local_b"] = self.gate_local_b
            out["gate_global_w"] = self.gate_global_w
        for i, (w, b) in enumerate(self.attn_layers):
            out[f"attn_{i}_w"] = w
            out[f"attn_{i}_b"] = b
        return out

    def astype(self, dtype) -> "EncoderParams":
        return replace(
            self,
            **{
                name: arr.astype(dtype)
                for name, arr in (
                    ("src_embeddings", self.src_embeddings),
                    ("conv1_w", self.conv1_w),
                    ("conv1_b", self.conv1_b),
                    ("conv3_w", self.conv3_w),
                    ("conv3_b", self.conv3_b),
                    ("proj_w", self.proj_w),
                    ("proj_b", self.proj_b),
                )
            },
            gate_local_w=None if self.gate_local_w is None
            else self.gate_local_w.astype(dtype),
            gate_local_b=None if self.gate_local_b is None
            else self.gate_local_b.astype(dtype),
            gate_global_w=None if self.gate_global_w is None
            else self.gate_global_w.astype(dtype),
            attn_layers=tuple(
                (w.astype(dtype), b.astype(dtype)) for w, b in self.attn_layers
            ),
        )


@dataclass
class ForwardTrace:
    """Intermediate activations of one encode call.

    Holds everything backpropagation or replay needs: the layer activations,
    the local gate values or pooling choices, and the global gate weights or
    top-k indices. ``replay`` recomputes the pipeline from the stored inputs
    and must reproduce ``representation`` exactly.
    """

    layer0: np.ndarray
    layer1: np.ndarray
    layer2: np.ndarray
    layer3: np.ndarray
    layer4: np.ndarray
    representation: np.ndarray
    attention_signal: np.ndarray | None = None
    local_gate: np.ndarray | None = None
    local_take_first: np.ndarray | None = None
    global_gate: np.ndarray | None = None
    global_top_indices: np.ndarray | None = None

    def replay(self, cfg: EncoderConfig, params: "EncoderParams") -> np.ndarray:
        p = params.astype(np.float64)
        z1 = convolve(self.layer0, p.conv1_w, p.conv1_b, prefix=self.attention_signal)
        if cfg.fusion == "gating":
            z2 = (self.local_gate[:, None] * z1[0::2]
                  + (1.0 - self.local_gate)[:, None] * z1[1::2])
        else:
            z2 = np.where(self.local_take_first, z1[0::2], z1[1::2])
        z3 = convolve(z2, p.conv3_w, p.conv3_b)
        if cfg.fusion == "gating":
            z4 = self.global_gate @ z3
        else:
            z4 = np.take_along_axis(z3, self.global_top_indices, axis=0).mean(axis=0)
        return project_final(z4, p.proj_w, p.proj_b)


# ---------------------------------------------------------------------------
# Single-sample operations
# ---------------------------------------------------------------------------

def embed_source(
    source_ids: Sequence[int],
    affiliated: frozenset[int] | set[int],
    head_positions: frozenset[int] | set[int],
    cfg: EncoderConfig,
    params: EncoderParams,
) -> np.ndarray:
    """Build the input matrix: one row per padded source position.

    Rows are word embeddings with tag columns appended under the tag archs.
    PAD rows are all-zero, tag columns included; they are constants, not
    trainable parameters.
    """
    if len(source_ids) != cfg.maxlen:
        raise ConfigError(
            f"expected {cfg.maxlen} padded source ids, got {len(source_ids)}"
        )
    if head_positions and cfg.arch != "tag_dep":
        raise ConfigError(
            f"head positions supplied but arch {cfg.arch!r} has no head tag column"
        )
    bad = [i for i in set(affiliated) | set(head_positions)
           if not 0 <= i < cfg.maxlen]
    if bad:
        raise ConfigError(f"guide positions {sorted(bad)} outside [0, {cfg.maxlen})")
    ids = np.asarray(source_ids, dtype=np.int64)
    rows = params.src_embeddings.astype(np.float64)[ids]
    if cfg.tag_bits:
        cols = [rows]
        aff_col = np.zeros((cfg.maxlen, 1))
        aff_col[sorted(affiliated)] = 1.0
        cols.append(aff_col)
        if cfg.arch == "tag_dep":
            head_col = np.zeros((cfg.maxlen, 1))
            head_col[sorted(head_positions)] = 1.0
            cols.append(head_col)
        rows = np.concatenate(cols, axis=1)
    rows[ids == PAD_ID] = 0.0
    return rows


def convolve(
    inputs: np.ndarray,
    filters: np.ndarray,
    biases: np.ndarray,
    prefix: np.ndarray | None = None,
) -> np.ndarray:
    """Narrow width-3 sigmoid convolution over location-indexed vectors.

    Location i sees [prefix; v_i; v_{i+1}; v_{i+2}]; the output has two fewer
    locations than the input and one column per filter, all values in (0, 1).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n_locs, width = inputs.shape
    if n_locs < CONV_WINDOW:
        raise ConfigError(f"convolution needs at least {CONV_WINDOW} locations, got {n_locs}")
    p = 0 if prefix is None else len(prefix)
    if filters.shape[1] != p + CONV_WINDOW * width:
        raise ConfigError(
            f"filter width {filters.shape[1]} does not match prefix {p} + "
            f"{CONV_WINDOW} x input width {width}"
        )
    out_locs = n_locs - (CONV_WINDOW - 1)
    windows = np.concatenate(
        [inputs[t : t + out_locs] for t in range(CONV_WINDOW)], axis=1
    )
    pre = windows @ filters[:, p:].T + biases
    if prefix is not None:
        pre = pre + filters[:, :p] @ np.asarray(prefix, dtype=np.float64)
    return sigmoid(pre)


def _local_gate_values(layer0, gate_w, gate_b, n_pairs):
    # Gate input for pair j is the span of input rows feeding both windows:
    # rows 2j .. 2j+3.
    span = 2 * LOCAL_PAIR
    gate_in = np.concatenate(
        [layer0[t : t + 2 * n_pairs - 1 : 2] for t in range(span)], axis=1
    )
    return sigmoid(gate_in @ np.asarray(gate_w, dtype=np.float64)
                   + np.asarray(gate_b, dtype=np.float64)), gate_in


def local_gate(
    layer1: np.ndarray,
    layer0: np.ndarray,
    gate_w: np.ndarray,
    gate_b: np.ndarray,
) -> np.ndarray:
    """Blend non-overlapping window pairs with a content-conditioned weight.

    A logistic regression over the four input rows spanning the pair produces
    one scalar per pair, weighting the pair's first window against its second.
    """
    layer1 = np.asarray(layer1, dtype=np.float64)
    n_locs = layer1.shape[0]
    if n_locs % LOCAL_PAIR != 0:
        raise ConfigError(f"local fusion needs an even window count, got {n_locs}")
    n_pairs = n_locs // LOCAL_PAIR
    alpha, _ = _local_gate_values(
        np.asarray(layer0, dtype=np.float64), gate_w, gate_b, n_pairs
    )
    return alpha[:, None] * layer1[0::2] + (1.0 - alpha)[:, None] * layer1[1::2]


def global_gate_weights(layer3: np.ndarray, gate_w: np.ndarray) -> np.ndarray:
    """Normalized location weights: a softmax over per-location scores."""
    scores = np.asarray(layer3, dtype=np.float64) @ np.asarray(gate_w, dtype=np.float64)
    return softmax(scores, axis=0)


def global_gate(layer3: np.ndarray, gate_w: np.ndarray) -> np.ndarray:
    """Fuse all locations into one vector by their softmax gate weights."""
    weights = global_gate_weights(layer3, gate_w)
    return weights @ np.asarray(layer3, dtype=np.float64)


def pool_local(layer1: np.ndarray) -> np.ndarray:
    """Elementwise max over non-overlapping window pairs (ablation mode)."""
    layer1 = np.asarray(layer1, dtype=np.float64)
    if layer1.shape[0] % LOCAL_PAIR != 0:
        raise ConfigError(
            f"local pooling needs an even window count, got {layer1.shape[0]}"
        )
    return np.maximum(layer1[0::2], layer1[1::2])


def pool_global(layer3: np.ndarray, pool_k: int) -> np.ndarray:
    """Mean of the top pool_k values per feature map (ablation mode)."""
    layer3 = np.asarray(layer3, dtype=np.float64)
    n_locs = layer3.shape[0]
    if not 1 <= pool_k <= n_locs:
        raise ConfigError(f"pool_k {pool_k} out of range [1, {n_locs}]")
    return _global_top_indices(layer3, pool_k)[1]


def _global_top_indices(layer3, pool_k):
    # Stable argsort on negated values: ties resolve to the lowest location.
    idx = np.argsort(-layer3, axis=0, kind="stable")[:pool_k]
    vals = np.take_along_axis(layer3, idx, axis=0)
    return idx, vals.mean(axis=0)


def project_final(layer4: np.ndarray, proj_w: np.ndarray, proj_b: np.ndarray) -> np.ndarray:
    """Affine + sigmoid map from the fused vector to the final representation."""
    return sigmoid(
        np.asarray(proj_w, dtype=np.float64) @ np.asarray(layer4, dtype=np.float64)
        + np.asarray(proj_b, dtype=np.float64)
    )


def compute_attention_signal(
    history: Sequence[int],
    tgt_embeddings: np.ndarray,
    attn_layers: Sequence[tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """Transform the concatenated history embeddings into the guide signal."""
    if not attn_layers:
        raise ConfigError("attention arch has no attention layers")
    x = tgt_embeddings.astype(np.float64)[np.asarray(history, dtype=np.int64)].ravel()
    if attn_layers[0][0].shape[1] != x.shape[0]:
        raise ConfigError(
            f"history length {len(history)} does not match attention input width "
            f"{attn_layers[0][0].shape[1]}"
        )
    for w, b in attn_layers:
        x = sigmoid(w.astype(np.float64) @ x + b.astype(np.float64))
    return x


def encode(
    source_ids: Sequence[int],
    affiliated: frozenset[int] | set[int] | None,
    head_positions: frozenset[int] | set[int] | None,
    history: Sequence[int] | None,
    cfg: EncoderConfig,
    params: EncoderParams,
    tgt_embeddings: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the full pipeline for one sample and capture all intermediates.

    ``affiliated`` must be present (possibly empty) for the tag archs;
    ``history`` and ``tgt_embeddings`` are required by the attention arch.
    The generic arch ignores every guide input.
    """
    if cfg.arch in ("tag", "tag_dep") and affiliated is None:
        raise ConfigError(f"arch {cfg.arch!r} requires affiliated source positions")
    if cfg.arch == "attention":
        if history is None:
            raise ConfigError("arch 'attention' requires a target history")
        if tgt_embeddings is None:
            raise ConfigError("arch 'attention' requires the target embedding table")
        if len(history) != cfg.history:
            raise ConfigError(
                f"history length {len(history)} != configured {cfg.history}"
            )
    affiliated = affiliated or frozenset()
    head_positions = head_positions or frozenset()
    if cfg.arch not in ("tag", "tag_dep"):
        affiliated = frozenset()

    p = params.astype(np.float64)
    layer0 = embed_source(source_ids, affiliated, head_positions, cfg, p)
    signal = None
    if cfg.arch == "attention":
        signal = compute_attention_signal(history, tgt_embeddings, p.attn_layers)
    layer1 = convolve(layer0, p.conv1_w, p.conv1_b, prefix=signal)

    alpha = take = None
    if cfg.fusion == "gating":
        alpha, _ = _local_gate_values(
            layer0, p.gate_local_w, p.gate_local_b, cfg.fused_locs
        )
        layer2 = alpha[:, None] * layer1[0::2] + (1.0 - alpha)[:, None] * layer1[1::2]
    else:
        take = layer1[0::2] >= layer1[1::2]
        layer2 = np.where(take, layer1[0::2], layer1[1::2])

    layer3 = convolve(layer2, p.conv3_w, p.conv3_b)

    omega = top_idx = None
    if cfg.fusion == "gating":
        omega = global_gate_weights(layer3, p.gate_global_w)
        layer4 = omega @ layer3
    else:
        top_idx, layer4 = _global_top_indices(layer3, cfg.pool_k)

    phi = project_final(layer4, p.proj_w, p.proj_b)
    trace = ForwardTrace(
        layer0=layer0, layer1=layer1, layer2=layer2, layer3=layer3, layer4=layer4,
        representation=phi, attention_signal=signal, local_gate=alpha,
        local_take_first=take, global_gate=omega, global_top_indices=top_idx,
    )
    return phi, trace


# ---------------------------------------------------------------------------
# Batched kernels
# ---------------------------------------------------------------------------

@dataclass
class BatchCache:
    """Everything the batched backward pass needs from the forward pass."""

    ids: np.ndarray
    content_mask: np.ndarray
    hist: np.ndarray | None
    hist_flat: np.ndarray | None
    layer0: np.ndarray
    windows1: np.ndarray
    signal_acts: list[np.ndarray] = field(default_factory=list)
    z1: np.ndarray = None
    alpha: np.ndarray = None
    gate_in: np.ndarray = None
    take: np.ndarray = None
    z2: np.ndarray = None
    windows3: np.ndarray = None
    z3: np.ndarray = None
    omega: np.ndarray = None
    top_idx: np.ndarray = None
    z4: np.ndarray = None
    phi: np.ndarray = None


def _windows(x: np.ndarray, out_locs: int) -> np.ndarray:
    """Stack 3 consecutive location rows into one window row, batched."""
    return np.concatenate([x[:, t : t + out_locs] for t in range(CONV_WINDOW)], axis=2)


def forward_batch(
    ids: np.ndarray,
    aff_mask: np.ndarray,
    head_mask: np.ndarray,
    hist: np.ndarray | None,
    cfg: EncoderConfig,
    p: EncoderParams,
    tgt_emb: np.ndarray | None,
    dtype=np.float64,
) -> tuple[np.ndarray, BatchCache]:
    """Vectorized encoder forward over a batch of prepared samples.

    ``p`` and ``tgt_emb`` must already be cast to ``dtype``. Masks are boolean
    (batch, maxlen); ``hist`` is int (batch, history) and may be None for the
    non-attention archs.
    """
    batch = ids.shape[0]
    content = ids != PAD_ID
    rows = p.src_embeddings[ids]
    rows[~content] = 0.0
    if cfg.tag_bits:
        cols = [rows, aff_mask[..., None].astype(dtype)]
        if cfg.arch == "tag_dep":
            cols.append(head_mask[..., None].astype(dtype))
        rows = np.concatenate(cols, axis=2)
    layer0 = rows

    n1 = cfg.conv_locs1
    w1 = _windows(layer0, n1)
    cache = BatchCache(
        ids=ids, content_mask=content, hist=hist, hist_flat=None,
        layer0=layer0, windows1=w1,
    )

    pre1 = w1 @ p.conv1_w[:, cfg.prefix_dim :].T + p.conv1_b
    if cfg.arch == "attention":
        hist_flat = tgt_emb[hist].reshape(batch, -1)
        cache.hist_flat = hist_flat
        act = hist_flat
        for w, b in p.attn_layers:
            act = sigmoid(act @ w.T + b)
            cache.signal_acts.append(act)
        pre1 = pre1 + (act @ p.conv1_w[:, : cfg.prefix_dim].T)[:, None, :]
    z1 = sigmoid(pre1)
    cache.z1 = z1

    n2 = cfg.fused_locs
    z1e, z1o = z1[:, 0::2], z1[:, 1::2]
    if cfg.fusion == "gating":
        span = 2 * LOCAL_PAIR
        gate_in = np.concatenate(
            [layer0[:, t : t + 2 * n2 - 1 : 2] for t in range(span)], axis=2
        )
        alpha = sigmoid(gate_in @ p.gate_local_w + p.gate_local_b)
        z2 = alpha[..., None] * z1e + (1.0 - alpha)[..., None] * z1o
        cache.alpha, cache.gate_in = alpha, gate_in
    else:
        take = z1e >= z1o
        z2 = np.where(take, z1e, z1o)
        cache.take = take
    cache.z2 = z2

    n3 = cfg.conv_locs3
    w3 = _windows(z2, n3)
    z3 = sigmoid(w3 @ p.conv3_w.T + p.conv3_b)
    cache.windows3, cache.z3 = w3, z3

    if cfg.fusion == "gating":
        scores = z3 @ p.gate_global_w
        omega = softmax(scores, axis=1)
        z4 = np.einsum("bl,blf->bf", omega, z3)
        cache.omega = omega
    else:
        top_idx = np.argsort(-z3, axis=1, kind="stable")[:, : cfg.pool_k]
        z4 = np.take_along_axis(z3, top_idx, axis=1).mean(axis=1)
        cache.top_idx = top_idx
    cache.z4 = z4

    phi = sigmoid(z4 @ p.proj_w.T + p.proj_b)
    cache.phi = phi
    return phi, cache


def backward_batch(
    cache: BatchCache,
    dphi: np.ndarray,
    cfg: EncoderConfig,
    p: EncoderParams,
    dtype=np.float64,
) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Exact gradients of the encoder for a given representation gradient.

    Returns the gradient dict keyed like ``EncoderParams.tensors`` plus the
    gradient with respect to the flattened history embeddings (attention arch
    only; None otherwise). PAD rows contribute nothing to the embedding
    gradient because their zero rows are constants.
    """
    grads = {}
    phi = cache.phi
    dpre_phi = dphi * phi * (1.0 - phi)
    grads["proj_w"] = dpre_phi.T @ cache.z4
    grads["proj_b"] = dpre_phi.sum(axis=0)
    dz4 = dpre_phi @ p.proj_w

    z3 = cache.z3
    if cfg.fusion == "gating":
        omega = cache.omega
        dz3 = omega[..., None] * dz4[:, None, :]
        domega = np.einsum("bf,blf->bl", dz4, z3)
        inner = np.einsum("bl,bl->b", omega, domega)
        dscores = omega * (domega - inner[:, None])
        grads["gate_global_w"] = np.einsum("bl,blf->f", dscores, z3)
        dz3 += dscores[..., None] * p.gate_global_w
    else:
        dz3 = np.zeros_like(z3)
        batch, pool_k, f3 = cache.top_idx.shape[0], cfg.pool_k, cfg.filters3
        bidx = np.arange(batch)[:, None, None]
        fidx = np.arange(f3)[None, None, :]
        np.add.at(dz3, (bidx, cache.top_idx, fidx), (dz4 / pool_k)[:, None, :])

    dpre3 = dz3 * z3 * (1.0 - z3)
    grads["conv3_w"] = np.einsum("blf,blw->fw", dpre3, cache.windows3)
    grads["conv3_b"] = dpre3.sum(axis=(0, 1))
    dw3 = dpre3 @ p.conv3_w
    f1 = cfg.filters1
    dz2 = np.zeros_like(cache.z2)
    n3 = cfg.conv_locs3
    for t in range(CONV_WINDOW):
        dz2[:, t : t + n3] += dw3[:, :, t * f1 : (t + 1) * f1]

    z1 = cache.z1
    z1e, z1o = z1[:, 0::2], z1[:, 1::2]
    dlayer0 = np.zeros_like(cache.layer0)
    n2 = cfg.fused_locs
    if cfg.fusion == "gating":
        alpha = cache.alpha
        dz1 = np.empty_like(z1)
        dz1[:, 0::2] = alpha[..., None] * dz2
        dz1[:, 1::2] = (1.0 - alpha)[..., None] * dz2
        dalpha = np.einsum("blf,blf->bl", dz2, z1e - z1o)
        du = dalpha * alpha * (1.0 - alpha)
        grads["gate_local_w"] = np.einsum("bl,blw->w", du, cache.gate_in)
        grads["gate_local_b"] = np.asarray([du.sum()], dtype=dtype)
        dgate_in = du[..., None] * p.gate_local_w
        d0 = cfg.input_dim
        for t in range(2 * LOCAL_PAIR):
            dlayer0[:, t : t + 2 * n2 - 1 : 2] += dgate_in[:, :, t * d0 : (t + 1) * d0]
    else:
        take = cache.take
        dz1 = np.empty_like(z1)
        dz1[:, 0::2] = np.where(take, dz2, 0.0)
        dz1[:, 1::2] = np.where(take, 0.0, dz2)

    dpre1 = dz1 * z1 * (1.0 - z1)
    word_w = p.conv1_w[:, cfg.prefix_dim :]
    grads_conv1_word = np.einsum("blf,blw->fw", dpre1, cache.windows1)
    grads["conv1_b"] = dpre1.sum(axis=(0, 1))
    dw1 = dpre1 @ word_w
    d0 = cfg.input_dim
    n1 = cfg.conv_locs1
    for t in range(CONV_WINDOW):
        dlayer0[:, t : t + n1] += dw1[:, :, t * d0 : (t + 1) * d0]

    dhist_flat = None
    if cfg.arch == "attention":
        signal = cache.signal_acts[-1]
        dsignal = np.einsum("blf,fp->bp", dpre1, p.conv1_w[:, : cfg.prefix_dim])
        grads_conv1_prefix = np.einsum("blf,bp->fp", dpre1, signal)
        grads["conv1_w"] = np.concatenate([grads_conv1_prefix, grads_conv1_word], axis=1)
        da = dsignal
        for i in range(len(p.attn_layers) - 1, -1, -1):
            w, _ = p.attn_layers[i]
            act = cache.signal_acts[i]
            prev = cache.hist_flat if i == 0 else cache.signal_acts[i - 1]
            dpre = da * act * (1.0 - act)
            grads[f"attn_{i}_w"] = dpre.T @ prev
            grads[f"attn_{i}_b"] = dpre.sum(axis=0)
            da = dpre @ w
        dhist_flat = da
    else:
        grads["conv1_w"] = grads_conv1_word

    demb_rows = dlayer0[..., : cfg.emb_dim]
    demb = np.zeros_like(p.src_embeddings)
    mask = cache.content_mask
    np.add.at(demb, cache.ids[mask], demb_rows[mask])
    grads["src_embeddings"] = demb
    return grads, dhist_flat
