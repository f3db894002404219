"""Mean-ablation baselines and the key/value substitution rule.

A text query ``i`` in head ``n`` sees baseline image row ``j`` instead of the
original one iff the head, the text token or the image token is masked out
(OR over the three axes). Image queries and text-to-text attention are never
touched.
"""
from dataclasses import dataclass, field

import numpy as np

from headflow.errors import ConfigError, InputError
from headflow.model import image_side

ORIGINAL = "original"
BASELINE = "baseline"


@dataclass
class BaselineKV:
    k: np.ndarray  # (L, H, n_image, d_head)
    v: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.k = np.ascontiguousarray(self.k, dtype=np.float32)
        self.v = np.ascontiguousarray(self.v, dtype=np.float32)
        if self.k.shape != self.v.shape or self.k.ndim != 4:
            raise ConfigError(f"baseline K {self.k.shape} / V {self.v.shape} malformed")
        if not (np.all(np.isfinite(self.k)) and np.all(np.isfinite(self.v))):
            raise ConfigError("baseline contains non-finite values")

    def check(self, config):
        want = (config.n_layers, config.n_heads, config.n_image, config.d_head)
        if self.k.shape != want:
            raise ConfigError(f"baseline shape {self.k.shape} does not match {want}")

    def tensors(self):
        out = {}
        L, H = self.k.shape[:2]
        for layer in range(L):
            for h in range(H):
                out[f"baseline.k.{layer}.{h}"] = self.k[layer, h]
                out[f"baseline.v.{layer}.{h}"] = self.v[layer, h]
        return out

    @classmethod
    def from_tensors(cls, tensors, n_layers, n_heads, provenance=None):
        try:
            k = np.stack(
                [np.stack([tensors[f"baseline.k.{l}.{h}"] for h in range(n_heads)]) for l in range(n_layers)]
            )
            v = np.stack(
                [np.stack([tensors[f"baseline.v.{l}.{h}"] for h in range(n_heads)]) for l in range(n_layers)]
            )
        except KeyError as exc:
            raise InputError(f"baseline tensor missing: {exc}") from None
        return cls(k, v, dict(provenance or {}))


def _bits(mask, n, name):
    if mask is None:
        return np.ones(n, dtype=bool)
    arr = np.asarray(mask)
    if arr.shape != (n,):
        raise ConfigError(f"{name} has length {arr.size}, expected {n}")
    return arr.astype(bool)


class InterventionPlan:
    """Head / text / image intactness masks plus the baseline they swap in."""

    def __init__(self, config, baseline, head_mask=None, text_mask=None, image_mask=None, n_text=None):
        self.n_heads = config.n_heads
        self.n_text = config.n_text_max if n_text is None else int(n_text)
        self.head_mask = _bits(head_mask, config.n_components, "head_mask")
        self.text_mask = _bits(text_mask, self.n_text, "text_mask")
        self.image_mask = _bits(image_mask, config.n_image, "image_mask")
        baseline.check(config)
        self.baseline = baseline

    @property
    def is_noop(self):
        return bool(self.head_mask.all() and self.text_mask.all() and self.image_mask.all())

    def check(self, config, n_text):
        if n_text != self.n_text:
            raise ConfigError(f"plan built for {self.n_text} text tokens, sequence has {n_text}")

    def replace_mask(self, layer):
        """(H, n_text, n_image) bool: True where a baseline row is substituted."""
        H = self.n_heads
        heads_off = ~self.head_mask[layer * H:(layer + 1) * H]
        return (
            heads_off[:, None, None]
            | ~self.text_mask[None, :, None]
            | ~self.image_mask[None, None, :]
        )

    def __and__(self, other):
        plan = object.__new__(InterventionPlan)
        plan.n_heads, plan.n_text, plan.baseline = self.n_heads, self.n_text, self.baseline
        plan.head_mask = self.head_mask & other.head_mask
        plan.text_mask = self.text_mask & other.text_mask
        plan.image_mask = self.image_mask & other.image_mask
        return plan


def substitution_rule(layer, head, query_position, image_row, plan, n_image):
    """Which image K/V row ``image_row`` the query at ``query_position`` sees."""
    if query_position < n_image:
        return ORIGINAL
    n = layer * plan.n_heads + head
    i = query_position - n_image
    if not plan.head_mask[n] or not plan.text_mask[i] or not plan.image_mask[image_row]:
        return BASELINE
    return ORIGINAL


def compute_baseline_kv(config, weights, calibration, provenance=None):
    """Average the per-layer image keys/values over clean forwards."""
    calibration = list(calibration)
    if not calibration:
        raise InputError("calibration set is empty")
    P = config.n_image
    k_sum = np.zeros((config.n_layers, config.n_heads, P, config.d_head), np.float64)
    v_sum = np.zeros_like(k_sum)
    for seq in calibration:
        if seq.n_image != P:
            raise InputError(f"calibration sequence has {seq.n_image} image tokens, expected {P}")
        seq.validate(config)
        side = image_side(config, weights, seq.image_embeddings)
        k_sum += side.keys
        v_sum += side.values
    n = len(calibration)
    prov = {"size": n}
    prov.update(provenance or {})
    return BaselineKV(k_sum / n, v_sum / n, prov)
