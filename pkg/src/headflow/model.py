"""Toy multimodal decoder-only transformer.

Image embeddings occupy positions ``0..n_image-1`` and text tokens follow.
Each layer is pre-RMS-norm attention followed by a pre-RMS-norm GELU FFN,
both summed into the residual stream. Logits are read at the final position.
Everything runs in float32.
"""
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
from scipy.special import erf

from headflow.errors import ConfigError
from headflow.kernels import attend

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    vocab_size: int = 64
    n_image: int = 16
    n_text_max: int = 8

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError("n_heads * d_head must equal d_model")
        side = int(round(np.sqrt(self.n_image)))
        if side * side != self.n_image:
            raise ConfigError(f"n_image={self.n_image} is not a perfect square")

    @property
    def max_seq(self):
        return self.n_image + self.n_text_max

    @property
    def d_ff(self):
        return 4 * self.d_model

    @property
    def n_components(self):
        return self.n_layers * self.n_heads

    @property
    def grid_side(self):
        return int(round(np.sqrt(self.n_image)))

    def to_dict(self):
        return {f.name: int(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


_WEIGHT_SHAPES = {
    "tok_embed": lambda c: (c.vocab_size, c.d_model),
    "pos_embed": lambda c: (c.max_seq, c.d_model),
    "attn_norm": lambda c: (c.n_layers, c.d_model),
    "W_Q": lambda c: (c.n_layers, c.n_heads, c.d_model, c.d_head),
    "W_K": lambda c: (c.n_layers, c.n_heads, c.d_model, c.d_head),
    "W_V": lambda c: (c.n_layers, c.n_heads, c.d_model, c.d_head),
    "W_O": lambda c: (c.n_layers, c.n_heads, c.d_head, c.d_model),
    "ffn_norm": lambda c: (c.n_layers, c.d_model),
    "W_in": lambda c: (c.n_layers, c.d_model, c.d_ff),
    "W_out": lambda c: (c.n_layers, c.d_ff, c.d_model),
    "final_norm": lambda c: (c.d_model,),
    "W_U": lambda c: (c.d_model, c.vocab_size),
}

WEIGHT_NAMES = tuple(_WEIGHT_SHAPES)


@dataclass
class WeightSet:
    tok_embed: np.ndarray
    pos_embed: np.ndarray
    attn_norm: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    ffn_norm: np.ndarray
    W_in: np.ndarray
    W_out: np.ndarray
    final_norm: np.ndarray
    W_U: np.ndarray

    def __post_init__(self):
        for name in WEIGHT_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))

    @classmethod
    def zeros(cls, config):
        return cls(**{n: np.zeros(s(config), np.float32) for n, s in _WEIGHT_SHAPES.items()})

    def tensors(self):
        return {n: getattr(self, n) for n in WEIGHT_NAMES}

    def validate(self, config):
        for name, shape_fn in _WEIGHT_SHAPES.items():
            arr = getattr(self, name)
            if arr.shape != shape_fn(config):
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape_fn(config)}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")


@dataclass
class MultimodalSequence:
    image_embeddings: np.ndarray
    text_tokens: tuple
    target_token: int
    label: Optional[int] = None

    def __post_init__(self):
        self.image_embeddings = np.ascontiguousarray(self.image_embeddings, dtype=np.float32)
        self.text_tokens = tuple(int(t) for t in self.text_tokens)
        self.target_token = int(self.target_token)

    @property
    def n_image(self):
        return self.image_embeddings.shape[0]

    @property
    def n_text(self):
        return len(self.text_tokens)

    def validate(self, config):
        if self.image_embeddings.shape != (config.n_image, config.d_model):
            raise ConfigError(
                f"image block {self.image_embeddings.shape} does not match "
                f"({config.n_image}, {config.d_model})"
            )
        if not 1 <= self.n_text <= config.n_text_max:
            raise ConfigError(f"text length {self.n_text} outside 1..{config.n_text_max}")
        ids = self.text_tokens + (self.target_token,)
        if min(ids) < 0 or max(ids) >= config.vocab_size:
            raise ConfigError("token id outside vocabulary")
        if not np.all(np.isfinite(self.image_embeddings)):
            raise ConfigError("image embeddings contain non-finite values")


@dataclass
class ForwardTrace:
    attention: np.ndarray  # (L, H, T, T)
    head_outputs: np.ndarray  # (L, H, T, d)
    keys: np.ndarray  # (L, H, T, d_head), as computed (pre-substitution)
    values: np.ndarray
    final_residual: np.ndarray  # (d,)


def rms_norm(x, gain):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(RMS_EPS)) * gain).astype(np.float32)


def gelu(x):
    return (np.float32(0.5) * x * (np.float32(1.0) + erf(x / np.float32(np.sqrt(2.0))))).astype(
        np.float32
    )


@dataclass
class ImageSide:
    """Per-layer image-position activations of one sequence.

    Interventions only ever touch what text queries see, so this block is the
    same under every plan and can be computed once per sequence.
    """

    keys: np.ndarray  # (L, H, P, d_head)
    values: np.ndarray
    attention: np.ndarray  # (L, H, P, P)
    head_outputs: np.ndarray  # (L, H, P, d)


def _ffn(x, weights, layer):
    f = rms_norm(x, weights.ffn_norm[layer])
    return (x + gelu(f @ weights.W_in[layer]) @ weights.W_out[layer]).astype(np.float32)


def image_side(config, weights, image_embeddings):
    L, H, P, dh = config.n_layers, config.n_heads, config.n_image, config.d_head
    x = (np.asarray(image_embeddings, np.float32) + weights.pos_embed[:P]).astype(np.float32)
    empty = np.zeros((H, 0, dh), np.float32)
    no_replace = np.zeros((1, H, P, 0), dtype=bool)
    keys = np.zeros((L, H, P, dh), np.float32)
    values = np.zeros_like(keys)
    attention = np.zeros((L, H, P, P), np.float32)
    head_outputs = np.zeros((L, H, P, config.d_model), np.float32)
    for layer in range(L):
        h = rms_norm(x, weights.attn_norm[layer])[None, None]
        q = h @ weights.W_Q[layer]
        k = h @ weights.W_K[layer]
        v = h @ weights.W_V[layer]
        attn, z = attend(q, empty, empty, empty, empty, no_replace, k, v)
        ho = z[0] @ weights.W_O[layer]
        x = (x + ho.sum(axis=0)).astype(np.float32)
        x = _ffn(x, weights, layer)
        keys[layer], values[layer] = k[0], v[0]
        attention[layer], head_outputs[layer] = attn[0], ho
    return ImageSide(keys, values, attention, head_outputs)


def _text_side(config, weights, seq, image, replace, baseline, want_trace):
    """Text positions for a batch of B substitution patterns.

    ``replace`` is (B, L, H, Pt, P) bool or None (a single plain run).
    Returns (logits (B, V), per-layer trace pieces or None).
    """
    L, H = config.n_layers, config.n_heads
    P, Pt = config.n_image, seq.n_text
    B = 1 if replace is None else replace.shape[0]
    x0 = (weights.tok_embed[list(seq.text_tokens)] + weights.pos_embed[P:P + Pt]).astype(np.float32)
    x = np.ascontiguousarray(np.broadcast_to(x0, (B, Pt, config.d_model)))
    pieces = [] if want_trace else None
    for layer in range(L):
        h = rms_norm(x, weights.attn_norm[layer])[:, None]
        q = h @ weights.W_Q[layer]
        k = h @ weights.W_K[layer]
        v = h @ weights.W_V[layer]
        k_img, v_img = image.keys[layer], image.values[layer]
        if replace is None:
            rep, k_base, v_base = np.zeros((1, H, Pt, P), dtype=bool), k_img, v_img
        else:
            rep = np.ascontiguousarray(replace[:, layer])
            k_base, v_base = baseline.k[layer], baseline.v[layer]
        attn, z = attend(q, k_img, v_img, k_base, v_base, rep, k, v)
        ho = z @ weights.W_O[layer]
        x = (x + ho.sum(axis=1)).astype(np.float32)
        x = _ffn(x, weights, layer)
        if want_trace:
            pieces.append((attn[0], ho[0], k[0], v[0]))
    final = rms_norm(x[:, -1:], weights.final_norm)
    logits = (final @ weights.W_U)[:, 0]
    return logits, x[:, -1], pieces


def forward(config, weights, seq, plan=None, want_trace=False, image=None):
    """Run the model on ``seq`` and return ``(raw_logits, trace_or_None)``.

    ``plan`` is an ``InterventionPlan`` (None runs the plain model). ``image``
    is a precomputed ``ImageSide`` for ``seq``; pass it to skip recomputing
    the image positions when evaluating many plans on one sequence.
    """
    seq.validate(config)
    L, H = config.n_layers, config.n_heads
    P, Pt = config.n_image, seq.n_text
    if plan is not None:
        plan.check(config, Pt)
    if image is None:
        image = image_side(config, weights, seq.image_embeddings)
    replace = baseline = None
    if plan is not None:
        replace = np.stack([plan.replace_mask(layer) for layer in range(L)])[None]
        baseline = plan.baseline
    logits, last, pieces = _text_side(config, weights, seq, image, replace, baseline, want_trace)
    trace = None
    if want_trace:
        text_attn, text_heads, text_k, text_v = (np.stack(p) for p in zip(*pieces))
        img_attn = np.concatenate(
            [image.attention, np.zeros((L, H, P, Pt), np.float32)], axis=-1
        )
        trace = ForwardTrace(
            attention=np.concatenate([img_attn, text_attn], axis=2),
            head_outputs=np.concatenate([image.head_outputs, text_heads], axis=2),
            keys=np.concatenate([image.keys, text_k], axis=2),
            values=np.concatenate([image.values, text_v], axis=2),
            final_residual=last[0].copy(),
        )
    return logits[0], trace


def replace_masks(config, n_text, head_masks, text_masks=None, image_masks=None):
    """OR-composed substitution pattern for a batch of masks.

    Masks use 1 = keep, 0 = ablate; shapes (B, L*H), (B, n_text), (B, P).
    Returns (B, L, H, n_text, P) bool, True where the baseline row is used.
    """
    L, H, P = config.n_layers, config.n_heads, config.n_image
    hm = np.asarray(head_masks).astype(bool).reshape(-1, L, H)
    B = hm.shape[0]
    rep = np.broadcast_to(~hm[:, :, :, None, None], (B, L, H, n_text, P))
    if text_masks is not None:
        tm = np.asarray(text_masks).astype(bool).reshape(B, n_text)
        rep = rep | ~tm[:, None, None, :, None]
    if image_masks is not None:
        im = np.asarray(image_masks).astype(bool).reshape(B, P)
        rep = rep | ~im[:, None, None, None, :]
    return np.ascontiguousarray(rep)


def forward_masks(config, weights, seq, baseline, replace, image=None):
    """Raw logits (B, V) for a batch of substitution patterns from ``replace_masks``."""
    if image is None:
        image = image_side(config, weights, seq.image_embeddings)
    logits, _, _ = _text_side(config, weights, seq, image, replace, baseline, False)
    return logits


def adjusted_logit(raw_logits, target_token):
    """Target logit minus the vocabulary-mean logit (computed in float64)."""
    raw = np.asarray(raw_logits, dtype=np.float64)
    return float(raw[int(target_token)] - raw.mean())


def logit_lens_head(head_output, weights, k=10):
    """Top-k ``(token_id, score)`` for a head output read through W_U.

    The final-norm gain is applied but the RMS division is not, so head
    contributions stay on a common scale. Ties go to the lower id.
    """
    vocab = weights.W_U.shape[1]
    if not 1 <= k <= vocab:
        raise ConfigError(f"k={k} outside 1..{vocab}")
    v = np.asarray(head_output, dtype=np.float64) * weights.final_norm.astype(np.float64)
    scores = v @ weights.W_U.astype(np.float64)
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]


def image_attention_per_head(trace, n_image):
    """Mean over text queries of the attention mass each puts on image columns.

    Returns a flat ``L*H`` vector indexed ``layer * H + head``.
    """
    a = trace.attention
    text_rows = a[:, :, n_image:, :n_image].astype(np.float64)
    per_head = text_rows.sum(axis=-1).mean(axis=-1)
    return per_head.reshape(-1)
