"""Ground-truth generators: random models and hand-wired copy-head models.

Copy-head residual layout (d_model dims)::

    0              anchor      large constant at every position, pins the RMS
    1              receiver    set at receive positions, drives wired queries
    2              marker      set at signal image tokens, drives wired keys
    3              image flag  set at every image position
    4 .. 4+dh      class block orthonormal class directions live here
    ..  +n_classes answer block one axis per class, read by W_U
    rest           junk        distractor heads read and write only here

A wired head attends from receive positions to the signal tokens, reads the
class coordinates and writes ``a_k - mean(a)`` into the answer block. Mean
ablation swaps in the calibration-average class vector, which the head maps to
exactly zero, so an ablated wired head contributes nothing. In
``any-one-suffices`` mode every wired head carries the full signal and the last
FFN clamps each answer channel, so one intact head already saturates.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from headflow.errors import ConfigError
from headflow.model import ModelConfig, MultimodalSequence, WeightSet, forward, rms_norm

EXCLUSIVE = "exclusive"
ANY_ONE = "any-one-suffices"

ANCHOR, RECEIVER, MARKER, IMG_FLAG = 0, 1, 2, 3
ANCHOR_SCALE = 32.0
TEXT_EMBED_SCALE = 0.3
SIGNAL_GAP = 24.0  # wired-head score margin of signal tokens over everything else
LOGIT_GAIN = 8.0
CLAMP_HI = 0.25
CLAMP_SLOPE = 160.0
CLASS_SCALE = 4.0  # planted class vector length; keeps image noise small next to it


@dataclass(frozen=True)
class WiringSpec:
    wired_heads: tuple = ((1, 2), (2, 1), (3, 0))
    redundancy: str = EXCLUSIVE
    signal_tokens: tuple = (5,)
    receive_positions: Optional[tuple] = None  # text indices; None = final token only
    n_classes: int = 8

    def __post_init__(self):
        object.__setattr__(self, "wired_heads", tuple(sorted(tuple(int(x) for x in s) for s in self.wired_heads)))
        object.__setattr__(self, "signal_tokens", tuple(sorted(int(j) for j in self.signal_tokens)))
        if self.receive_positions is not None:
            object.__setattr__(self, "receive_positions", tuple(sorted(int(i) for i in self.receive_positions)))
        if self.redundancy not in (EXCLUSIVE, ANY_ONE):
            raise ConfigError(f"unknown redundancy mode {self.redundancy!r}")
        if not self.wired_heads:
            raise ConfigError("wiring needs at least one wired head")
        if len(set(self.wired_heads)) != len(self.wired_heads):
            raise ConfigError("duplicate wired head")
        if not self.signal_tokens:
            raise ConfigError("wiring needs at least one signal token")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")

    def head_indices(self, n_heads):
        return sorted(l * n_heads + h for l, h in self.wired_heads)

    def receive(self, n_text):
        return self.receive_positions if self.receive_positions is not None else (n_text - 1,)

    def to_dict(self):
        return {
            "wired_heads": [list(s) for s in self.wired_heads],
            "redundancy": self.redundancy,
            "signal_tokens": list(self.signal_tokens),
            "receive_positions": None if self.receive_positions is None else list(self.receive_positions),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d):
        rp = d.get("receive_positions")
        return cls(
            wired_heads=tuple(tuple(s) for s in d["wired_heads"]),
            redundancy=d["redundancy"],
            signal_tokens=tuple(d["signal_tokens"]),
            receive_positions=None if rp is None else tuple(rp),
            n_classes=int(d["n_classes"]),
        )


@dataclass
class SyntheticModel:
    """A generated model plus what generators need to emit matching tasks."""

    config: ModelConfig
    weights: WeightSet
    class_dirs: np.ndarray  # (n_classes, d_model); zero rows for random models
    class_map: tuple  # class index -> target token id
    prompt: tuple  # text token ids
    wiring: Optional[WiringSpec] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.class_map)

    @property
    def signal_tokens(self):
        if self.wiring is None:
            return tuple(range(self.config.n_image))
        return self.wiring.signal_tokens


def layout(config, n_classes):
    """Slices of the class, answer and junk blocks for ``config``."""
    cb = config.d_head
    class_block = slice(4, 4 + cb)
    answer_block = slice(4 + cb, 4 + cb + n_classes)
    junk = slice(4 + cb + n_classes, config.d_model)
    return class_block, answer_block, junk


def _check_wiring(config, wiring):
    L, H = config.n_layers, config.n_heads
    for l, h in wiring.wired_heads:
        if not (0 <= l < L and 0 <= h < H):
            raise ConfigError(f"wired head ({l}, {h}) outside {L}x{H}")
    if any(not 0 <= j < config.n_image for j in wiring.signal_tokens):
        raise ConfigError("signal token outside the image block")
    if any(not 0 <= i < config.n_text_max for i in wiring.receive(config.n_text_max)):
        raise ConfigError("receive position outside the text block")
    if wiring.n_classes > config.d_head:
        raise ConfigError(f"n_classes={wiring.n_classes} exceeds d_head={config.d_head}")
    if config.d_model - (4 + config.d_head + wiring.n_classes) < 4:
        raise ConfigError("d_model too small for the copy-head layout")
    if config.vocab_size < config.n_text_max + wiring.n_classes + 1:
        raise ConfigError("vocabulary too small for prompt plus class tokens")
    if 2 * wiring.n_classes > config.d_ff:
        raise ConfigError("FFN too narrow for the saturation units")


def orthonormal_directions(n, block, d, rng):
    """``n`` orthonormal rows supported on ``block`` (Gram-Schmidt via QR)."""
    width = block.stop - block.start
    g = rng.standard_normal((width, n))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # make the factorization unique
    out = np.zeros((n, d))
    out[:, block] = q.T
    return out


def _prompt_and_targets(config, n_classes, rng):
    prompt = tuple(range(1, config.n_text_max + 1))
    rest = np.arange(config.n_text_max + 1, config.vocab_size)
    targets = tuple(int(t) for t in rng.choice(rest, size=n_classes, replace=False))
    return prompt, targets


def gen_random_model(config, scale=1.0, seed=0):
    """Gaussian weights scaled by ``scale / sqrt(d_model)``; norm gains are 1."""
    rng = np.random.default_rng(seed)
    w = WeightSet.zeros(config)
    s = scale / np.sqrt(config.d_model)
    for name, arr in w.tensors().items():
        if name.endswith("_norm"):
            arr[...] = 1.0
        else:
            arr[...] = rng.standard_normal(arr.shape) * s
    w.__post_init__()
    return w


def random_synthetic_model(config, scale=1.0, seed=0, n_classes=4):
    """Wrap ``gen_random_model`` so task generators can be pointed at it."""
    weights = gen_random_model(config, scale, seed)
    rng = np.random.default_rng([seed, 1])
    dirs = orthonormal_directions(n_classes, slice(0, config.d_model), config.d_model, rng)
    prompt, targets = _prompt_and_targets(config, n_classes, rng)
    return SyntheticModel(config, weights, dirs, targets, prompt, None, {"kind": "random", "scale": scale})


def gen_copyhead_model(config, wiring, seed=0):
    """Build a model whose only image-to-answer pathway is ``wiring.wired_heads``."""
    _check_wiring(config, wiring)
    rng = np.random.default_rng(seed)
    d, dh, H, L = config.d_model, config.d_head, config.n_heads, config.n_layers
    nc = wiring.n_classes
    P, Pt = config.n_image, config.n_text_max
    class_block, answer_block, junk = layout(config, nc)
    n_junk = junk.stop - junk.start
    w = WeightSet.zeros(config)

    dirs = orthonormal_directions(nc, class_block, d, rng)
    prompt, targets = _prompt_and_targets(config, nc, rng)
    answer = np.zeros((nc, d))
    answer[:, answer_block] = np.eye(nc)
    centered_answer = answer - answer.mean(axis=0)

    w.tok_embed[:, junk] = rng.standard_normal((config.vocab_size, n_junk)) * TEXT_EMBED_SCALE
    w.pos_embed[:, ANCHOR] = ANCHOR_SCALE
    w.pos_embed[:P, IMG_FLAG] = 1.0
    w.pos_embed[list(wiring.signal_tokens), MARKER] = 1.0
    for i in wiring.receive(Pt):
        w.pos_embed[P + i, RECEIVER] = 1.0
    for name in ("attn_norm", "ffn_norm", "final_norm"):
        getattr(w, name)[...] = 1.0

    # nominal RMS of a signal image token and of a text token
    rho_img = np.sqrt((ANCHOR_SCALE ** 2 + 2.0 + CLASS_SCALE ** 2) / d)
    rho_txt = np.sqrt((ANCHOR_SCALE ** 2 + 1.0 + n_junk * TEXT_EMBED_SCALE ** 2) / d)

    wired = set(wiring.wired_heads)
    share = 1.0 / len(wired) if wiring.redundancy == EXCLUSIVE else 1.0
    beta = np.sqrt(SIGNAL_GAP * np.sqrt(dh) * rho_img * rho_txt)
    for l in range(L):
        for h in range(H):
            if (l, h) in wired:
                w.W_Q[l, h, RECEIVER, 0] = beta
                w.W_K[l, h, MARKER, 0] = beta
                w.W_V[l, h, :, :nc] = dirs.T * rho_img / CLASS_SCALE
                w.W_O[l, h, :nc, :] = centered_answer * share
            else:
                # distractor: attends to image tokens with a random strength,
                # moves junk only
                strength = rng.uniform(-1.0, 4.0)
                g = np.sqrt(abs(strength) * np.sqrt(dh) * rho_txt * rho_img / ANCHOR_SCALE)
                w.W_Q[l, h, ANCHOR, 1] = g
                w.W_K[l, h, IMG_FLAG, 1] = g * np.sign(strength)
                w.W_Q[l, h, junk, 2:] = rng.standard_normal((n_junk, dh - 2)) * 0.3
                w.W_K[l, h, junk, 2:] = rng.standard_normal((n_junk, dh - 2)) * 0.3
                w.W_V[l, h, junk, :] = rng.standard_normal((n_junk, dh)) * rho_txt / np.sqrt(n_junk)
                w.W_O[l, h, :, junk] = rng.standard_normal((dh, n_junk)) * 0.2 / np.sqrt(dh)

    if wiring.redundancy == ANY_ONE:
        # clamp each answer channel to [lo, hi]; the anchor supplies the bias
        last = L - 1
        lo = -CLAMP_HI / nc
        rho_out = np.sqrt((ANCHOR_SCALE ** 2 + 1.0 + n_junk * TEXT_EMBED_SCALE ** 2) / d)
        s_hi, s_lo = CLAMP_SLOPE, CLAMP_SLOPE * nc
        for k in range(nc):
            col = answer_block.start + k
            u_hi, u_lo = 2 * k, 2 * k + 1
            w.W_in[last, col, u_hi] = s_hi
            w.W_in[last, ANCHOR, u_hi] = -s_hi * CLAMP_HI / ANCHOR_SCALE
            w.W_out[last, u_hi, col] = -rho_out / s_hi
            w.W_in[last, col, u_lo] = -s_lo
            w.W_in[last, ANCHOR, u_lo] = s_lo * lo / ANCHOR_SCALE
            w.W_out[last, u_lo, col] = rho_out / s_lo

    rho_final = rho_txt
    for k, tok in enumerate(targets):
        w.W_U[answer_block.start + k, tok] = LOGIT_GAIN * rho_final

    w.__post_init__()
    w.validate(config)
    meta = {"kind": "copyhead", "seed": int(seed)}
    return SyntheticModel(config, w, dirs * CLASS_SCALE, targets, prompt, wiring, meta)


def _image_block(model, label, noise, rng):
    cfg = model.config
    img = rng.standard_normal((cfg.n_image, cfg.d_model)) * noise
    if label is not None:
        img[list(model.signal_tokens)] += model.class_dirs[label]
    return img


def gen_tasks(model, n_instances, noise=0.1, seed=0):
    """Task instances with uniformly drawn classes."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, model.n_classes, size=n_instances)
    return [
        MultimodalSequence(_image_block(model, int(k), noise, rng), model.prompt, model.class_map[k], int(k))
        for k in labels
    ]


def gen_calibration_pool(model, n=100, noise=0.1, seed=0):
    """Class-balanced pool (labels cycle through the classes)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = i % model.n_classes
        out.append(MultimodalSequence(_image_block(model, k, noise, rng), model.prompt, model.class_map[k], k))
    return out


def final_answer_channels(model, seq):
    """Debug helper: the normalized answer block at the final position."""
    _, trace = forward(model.config, model.weights, seq, want_trace=True)
    _, answer_block, _ = layout(model.config, model.n_classes)
    return rms_norm(trace.final_residual[None], model.weights.final_norm)[0, answer_block]


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    bound: str


@dataclass
class VerifyReport:
    wiring: dict
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {
            "wiring": self.wiring,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "value": float(c.value), "bound": c.bound}
                for c in self.checks
            ],
        }


def verify_construction(model, noise=0.1, seed=0, n_calibration=100):
    """Direct-forward self-test of a copy-head model against its wiring.

    Checks argmax = target for one instance of every class, then single-head
    and joint ablations of the wired set on each of those instances.
    """
    # local imports: intervention/oracle import this module's dependencies
    from headflow.intervention import compute_baseline_kv
    from headflow.oracle import ModelOracle

    if model.wiring is None:
        raise ConfigError("verify needs a copy-head model")
    cfg, wiring = model.config, model.wiring
    rng = np.random.default_rng(seed)
    pool = gen_calibration_pool(model, n_calibration, noise, seed=int(rng.integers(2 ** 31)))
    baseline = compute_baseline_kv(cfg, model.weights, pool, {"seed": seed})
    instances = [
        MultimodalSequence(_image_block(model, k, noise, rng), model.prompt, model.class_map[k], k)
        for k in range(model.n_classes)
    ]
    N = cfg.n_components
    S = wiring.head_indices(cfg.n_heads)
    others = [n for n in range(N) if n not in S]
    checks = []

    wrong = 0
    for seq in instances:
        logits, _ = forward(cfg, model.weights, seq)
        wrong += int(np.argmax(logits) != seq.target_token)
    checks.append(Check("argmax matches class target", wrong == 0, wrong, "misclassified == 0"))

    single_wired, single_other, joint = [], [], []
    for seq in instances:
        oracle = ModelOracle(cfg, model.weights, seq, baseline)
        raw_zero, raw_one = oracle.anchors()
        masks = []
        for n in range(N):
            m = np.ones(N, bool)
            m[n] = False
            masks.append(m)
        m = np.ones(N, bool)
        m[S] = False
        masks.append(m)
        raw = np.asarray(oracle.evaluate_batch([oracle.query(m) for m in masks]))
        pi = (raw - raw_zero) / (raw_one - raw_zero)
        single_wired.append(pi[S])
        single_other.append(np.abs(1.0 - pi[others]) if others else np.zeros(1))
        joint.append(pi[-1])
    single_wired = np.concatenate(single_wired)
    single_other = np.concatenate(single_other)
    joint = np.asarray(joint)

    checks.append(Check(
        "ablating one non-wired head moves pi < 0.01",
        bool(single_other.max() < 0.01), single_other.max(), "< 0.01",
    ))
    # a single wired head is the whole set, so both modes reduce to one check
    if wiring.redundancy == EXCLUSIVE or len(S) == 1:
        if len(S) == 1:
            checks.append(Check(
                "ablating the wired head drops pi < 0.05",
                bool(single_wired.max() < 0.05), single_wired.max(), "< 0.05",
            ))
        else:
            expect = 1.0 - 1.0 / len(S)
            dev = np.abs(single_wired - expect).max()
            checks.append(Check(
                f"ablating one wired head leaves pi ~ {expect:.3f}",
                bool(dev < 0.05), dev, "|pi - (1 - 1/|S|)| < 0.05",
            ))
            checks.append(Check(
                "ablating all wired heads drops pi < 0.05",
                bool(joint.max() < 0.05), joint.max(), "< 0.05",
            ))
    else:
        checks.append(Check(
            "ablating one wired head keeps pi > 0.9",
            bool(single_wired.min() > 0.9), single_wired.min(), "> 0.9",
        ))
        checks.append(Check(
            "ablating all wired heads drops pi < 0.1",
            bool(joint.max() < 0.1), joint.max(), "< 0.1",
        ))
    return VerifyReport(wiring.to_dict(), checks)
