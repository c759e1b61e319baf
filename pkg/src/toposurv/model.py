"""Stage-1 encoder/decoder and the Stage-2 attention survival head,
assembled from the autodiff primitives at configurable desk scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


@dataclass
class EncoderConfig:
    extents: tuple[int, int, int] = (16, 16, 16)
    channels: tuple[int, ...] = (8, 16, 32)
    latent_dim: int = 64
    in_channels: int = 4
    kernel_size: int = 3

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.channels = tuple(int(c) for c in self.channels)
        down = 2 ** len(self.channels)
        if any(e % down for e in self.extents):
            raise ValueError(
                f"extents {self.extents} not divisible by 2^{len(self.channels)}")
        side = int(round(np.sqrt(self.latent_dim)))
        if side * side != self.latent_dim:
            raise ValueError(f"latent_dim {self.latent_dim} is not a perfect square")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    @property
    def bottleneck_extents(self) -> tuple[int, int, int]:
        down = 2 ** len(self.channels)
        return tuple(e // down for e in self.extents)

    @property
    def flat_dim(self) -> int:
        return self.channels[-1] * int(np.prod(self.bottleneck_extents))


@dataclass
class HeadConfig:
    latent_dim: int = 64
    clinical_dim: int = 1
    attention_dim: int = 32
    heads: int = 4
    num_bins: int = 5
    gate_bottleneck: int | None = None  # defaults to latent_dim // 4
    ln_affine: bool = True

    def __post_init__(self):
        if self.gate_bottleneck is None:
            self.gate_bottleneck = max(1, self.latent_dim // 4)
        if self.attention_dim % self.heads:
            raise ValueError(
                f"attention_dim {self.attention_dim} not divisible by {self.heads} heads")
        if self.num_bins < 2:
            raise ValueError("need at least 2 survival bins")


def _normal(rng, shape, fan_in) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_stage1_params(config: EncoderConfig, rng) -> dict[str, Tensor]:
    """Encoder, decoder and the linear stage-1 hazard head."""
    k = config.kernel_size
    params: dict[str, Tensor] = {}
    c_prev = config.in_channels
    for i, c in enumerate(config.channels):
        fan = c_prev * k ** 3
        params[f"enc/block{i}/kernel"] = Tensor(_normal(rng, (c, c_prev, k, k, k), fan), True)
        params[f"enc/block{i}/bias"] = Tensor(np.zeros(c), True)
        c_prev = c
    params["enc/project/weight"] = Tensor(
        _normal(rng, (config.latent_dim, config.flat_dim), config.flat_dim), True)
    params["enc/project/bias"] = Tensor(np.zeros(config.latent_dim), True)

    params["dec/expand/weight"] = Tensor(
        _normal(rng, (config.flat_dim, config.latent_dim), config.latent_dim), True)
    params["dec/expand/bias"] = Tensor(np.zeros(config.flat_dim), True)
    up_channels = list(config.channels[::-1][1:]) + [config.in_channels]
    c_prev = config.channels[-1]
    for i, c in enumerate(up_channels):
        fan = c_prev * 8
        params[f"dec/block{i}/kernel"] = Tensor(_normal(rng, (c_prev, c, 2, 2, 2), fan), True)
        params[f"dec/block{i}/bias"] = Tensor(np.zeros(c), True)
        c_prev = c

    params["hazard/weight"] = Tensor(_normal(rng, (1, config.latent_dim), config.latent_dim), True)
    params["hazard/bias"] = Tensor(np.zeros(()), True)
    return params


def init_head_params(config: HeadConfig, rng) -> dict[str, Tensor]:
    d, m, p = config.latent_dim, config.attention_dim, config.clinical_dim
    r = config.gate_bottleneck
    k = config.num_bins
    params = {
        "gate/w1": Tensor(_normal(rng, (r, d), d), True),
        "gate/b1": Tensor(np.zeros(r), True),
        "gate/w2": Tensor(_normal(rng, (d, r), r), True),
        "gate/b2": Tensor(np.zeros(d), True),
        "proj_feat/weight": Tensor(_normal(rng, (m, d), d), True),
        "proj_feat/bias": Tensor(np.zeros(m), True),
        "proj_clin/weight": Tensor(_normal(rng, (m, p), p), True),
        "proj_clin/bias": Tensor(np.zeros(m), True),
        "attn/wq": Tensor(_normal(rng, (m, m), m), True),
        "attn/wk": Tensor(_normal(rng, (m, m), m), True),
        "attn/wv": Tensor(_normal(rng, (m, m), m), True),
        "attn/wo": Tensor(_normal(rng, (m, m), m), True),
        "mlp/w1": Tensor(_normal(rng, (max(1, m // 2), m), m), True),
        "mlp/b1": Tensor(np.zeros(max(1, m // 2)), True),
        "mlp/w2": Tensor(_normal(rng, (k, max(1, m // 2)), max(1, m // 2)), True),
        "mlp/b2": Tensor(np.zeros(k), True),
    }
    if config.ln_affine:
        params["ln_feat/gain"] = Tensor(np.ones(m), True)
        params["ln_feat/bias"] = Tensor(np.zeros(m), True)
        params["ln_clin/gain"] = Tensor(np.ones(m), True)
        params["ln_clin/bias"] = Tensor(np.zeros(m), True)
    return params


def _linear(tape, weight: Tensor, x: Tensor, bias: Tensor) -> Tensor:
    return ad.add(tape, ad.matmul(tape, weight, x), bias)


def encode(tape: Tape, params: dict, config: EncoderConfig, x) -> Tensor:
    """conv3d -> relu -> maxpool per block, then flatten and project."""
    h = ad.as_tensor(x)
    pad = config.kernel_size // 2
    for i in range(len(config.channels)):
        h = ad.conv3d(tape, h, params[f"enc/block{i}/kernel"], stride=1, padding=pad)
        h = ad.add_channel_bias(tape, h, params[f"enc/block{i}/bias"])
        h = ad.relu(tape, h)
        h = ad.maxpool3d(tape, h)
    flat = ad.reshape(tape, h, (config.flat_dim,))
    return _linear(tape, params["enc/project/weight"], flat, params["enc/project/bias"])


def decode(tape: Tape, params: dict, config: EncoderConfig, z) -> Tensor:
    """Linear expansion, then stride-2 transposed conv blocks; the final
    block keeps a linear activation so outputs span the full range."""
    z = ad.as_tensor(z)
    flat = _linear(tape, params["dec/expand/weight"], z, params["dec/expand/bias"])
    h = ad.reshape(tape, flat, (config.channels[-1],) + config.bottleneck_extents)
    n_blocks = len(config.channels)
    for i in range(n_blocks):
        h = ad.conv_transpose3d(tape, h, params[f"dec/block{i}/kernel"], stride=2)
        h = ad.add_channel_bias(tape, h, params[f"dec/block{i}/bias"])
        if i < n_blocks - 1:
            h = ad.relu(tape, h)
    return h


def stage1_hazard(tape: Tape, params: dict, z) -> Tensor:
    """Linear map from embedding to a scalar log-hazard."""
    out = ad.matmul(tape, params["hazard/weight"], ad.as_tensor(z))
    return ad.add(tape, ad.reshape(tape, out, ()), params["hazard/bias"])


def gate_features(tape: Tape, params: dict, z) -> Tensor:
    """Multiplicative sigmoid gate over the embedding."""
    z = ad.as_tensor(z)
    hidden = ad.relu(tape, _linear(tape, params["gate/w1"], z, params["gate/b1"]))
    gate = ad.sigmoid(tape, _linear(tape, params["gate/w2"], hidden, params["gate/b2"]))
    return ad.mul(tape, z, gate), gate


def _maybe_affine_ln(tape, params, config, x, which):
    if config.ln_affine:
        gain = params[f"ln_{which}/gain"]
        bias = params[f"ln_{which}/bias"]
    else:
        gain = Tensor(np.ones(config.attention_dim))
        bias = Tensor(np.zeros(config.attention_dim))
    return ad.layer_norm(tape, x, gain, bias)


def fuse_attention(tape: Tape, params: dict, config: HeadConfig,
                   z_gated, clinical) -> Tensor:
    """Clinical-query attention over the single projected feature token,
    with residual clinical-centric fusion."""
    m, h = config.attention_dim, config.heads
    mh = m // h
    f = _maybe_affine_ln(tape, params, config,
                         _linear(tape, params["proj_feat/weight"], ad.as_tensor(z_gated),
                                 params["proj_feat/bias"]), "feat")
    c = _maybe_affine_ln(tape, params, config,
                         _linear(tape, params["proj_clin/weight"], ad.as_tensor(clinical),
                                 params["proj_clin/bias"]), "clin")
    q = ad.reshape(tape, ad.matmul(tape, params["attn/wq"], c), (h, mh))
    k = ad.reshape(tape, ad.matmul(tape, params["attn/wk"], f), (h, mh))
    v = ad.reshape(tape, ad.matmul(tape, params["attn/wv"], f), (h, mh))
    scale = 1.0 / np.sqrt(m)
    head_outputs = []
    for i in range(h):
        qi, ki, vi = (ad.take_row(tape, t, i) for t in (q, k, v))
        score = ad.mul(tape, ad.sum_all(tape, ad.mul(tape, qi, ki)), scale)
        # one key token: the softmax weight is identically 1
        weight = ad.softmax(tape, ad.reshape(tape, score, (1,)))
        head_outputs.append(ad.mul(tape, vi, ad.reshape(tape, weight, ())))
    concat = ad.reshape(tape, ad.stack(tape, head_outputs), (m,))
    fused = ad.matmul(tape, params["attn/wo"], concat)
    return ad.add(tape, c, fused)


def head_logits(tape: Tape, params: dict, config: HeadConfig, u) -> Tensor:
    hidden = ad.relu(tape, _linear(tape, params["mlp/w1"], ad.as_tensor(u), params["mlp/b1"]))
    return _linear(tape, params["mlp/w2"], hidden, params["mlp/b2"])


def head_forward(tape: Tape, params: dict, config: HeadConfig,
                 z_values, clinical_values) -> Tensor:
    """Embedding + standardized clinical covariates -> bin logits."""
    z_gated, _ = gate_features(tape, params, ad.as_tensor(z_values))
    u = fuse_attention(tape, params, config, z_gated, ad.as_tensor(clinical_values))
    return head_logits(tape, params, config, u)


def risk_from_logits(tape: Tape, logits) -> Tensor:
    """Negated expected bin index under softmax(logits)."""
    logits = ad.as_tensor(logits)
    p = ad.softmax(tape, logits)
    bins = np.arange(logits.values.size, dtype=np.float64)
    return ad.neg(tape, ad.sum_all(tape, ad.mul(tape, p, Tensor(bins))))


def risk_value(logits_values: np.ndarray) -> float:
    """Plain-numpy risk for evaluation paths."""
    shifted = logits_values - logits_values.max()
    p = np.exp(shifted)
    p /= p.sum()
    return float(-(np.arange(p.size) * p).sum())
