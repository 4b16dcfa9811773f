"""Latent target-content predictor.

A narrow transformer that receives the action embedding, the projected
source patch features, and one mask token per target patch position to
predict, and outputs latent features for those positions. Each block
computes

    X_att = softmax(Q K^T / sqrt(d_head)) V          (multi-head)
    X     = FFW(X_att + X_prev) + X_att

with pre-norm layer normalization feeding both the attention input and
the FFW input. The second residual deliberately re-adds the attention
output rather than the FFW input; ``standard_residual`` switches to the
conventional wiring if a configuration wants it.

Mask tokens are a single shared learnable vector plus a per-position
entry of a learnable positional table over the g x g patch grid. One
learned linear projection bridges encoder width d to predictor width p
and is shared by the action, the source patches, and the target patches
used in the prediction loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .views import MaskBlock

__all__ = [
    "PredictorConfig",
    "PredictorParams",
    "PredictorOutput",
    "PredictorError",
    "init_predictor_params",
    "build_mask_tokens",
    "predictor_forward",
    "prediction_loss",
    "project_patches",
]

LN_EPS = 1e-6


class PredictorError(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    d: int  # encoder feature width
    p: int = 384  # predictor width
    blocks: int = 12
    heads: int = 8
    grid: int = 16
    ffw_ratio: int = 4
    standard_residual: bool = False

    def __post_init__(self):
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        if self.p % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide width ({self.p})")


@dataclass
class PredictorParams:
    cfg: PredictorConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def init_predictor_params(
    cfg: PredictorConfig, rng: np.random.Generator, dtype=np.float64
) -> PredictorParams:
    dt = np.dtype(dtype)

    def normal(shape, fan_in):
        return ad.parameter((rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dt))

    def zeros(shape):
        return ad.parameter(np.zeros(shape, dtype=dt))

    def ones(shape):
        return ad.parameter(np.ones(shape, dtype=dt))

    t: dict[str, Tensor] = {
        "in_proj.w": normal((cfg.d, cfg.p), cfg.d),
        "in_proj.b": zeros((cfg.p,)),
        "mask_token": ad.parameter((rng.standard_normal(cfg.p) * 0.02).astype(dt)),
        "pos_embed": ad.parameter(
            (rng.standard_normal((cfg.grid * cfg.grid, cfg.p)) * 0.02).astype(dt)
        ),
    }
    hidden = cfg.ffw_ratio * cfg.p
    for i in range(cfg.blocks):
        pre = f"block{i}."
        t[pre + "ln1.g"] = ones((cfg.p,))
        t[pre + "ln1.b"] = zeros((cfg.p,))
        for name in ("wq", "wk", "wv", "wo"):
            t[pre + f"attn.{name}"] = normal((cfg.p, cfg.p), cfg.p)
        # no key bias: a constant added to every key shifts each softmax row
        # uniformly, leaving the output unchanged (its gradient is identically 0)
        for name in ("qb", "vb", "ob"):
            t[pre + f"attn.{name}"] = zeros((cfg.p,))
        t[pre + "ln2.g"] = ones((cfg.p,))
        t[pre + "ln2.b"] = zeros((cfg.p,))
        t[pre + "ffw.w1"] = normal((cfg.p, hidden), cfg.p)
        t[pre + "ffw.b1"] = zeros((hidden,))
        t[pre + "ffw.w2"] = normal((hidden, cfg.p), hidden)
        t[pre + "ffw.b2"] = zeros((cfg.p,))
    return PredictorParams(cfg=cfg, tensors=t)


@dataclass
class PredictorOutput:
    enhanced_source: Tensor  # (m-1, p)
    predicted_patches: Tensor  # (|B|, p), rows follow MaskBlock index order
    action_out: Tensor | None  # (1, p); None when the action input is disabled


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
    inv = ad.div(1.0, ad.sqrt(ad.add(var, LN_EPS)))
    return ad.add(ad.mul(ad.mul(centered, inv), gain), bias)


def multi_head_attention(x: Tensor, params: PredictorParams, block: int) -> Tensor:
    cfg = params.cfg
    pre = f"block{block}.attn."
    q = ad.add(ad.matmul(x, params[pre + "wq"]), params[pre + "qb"])
    k = ad.matmul(x, params[pre + "wk"])
    v = ad.add(ad.matmul(x, params[pre + "wv"]), params[pre + "vb"])
    dh = cfg.p // cfg.heads
    outs = []
    for h in range(cfg.heads):
        qh = ad.narrow(q, 1, h * dh, dh)
        kh = ad.narrow(k, 1, h * dh, dh)
        vh = ad.narrow(v, 1, h * dh, dh)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        outs.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
    heads = ad.concat(outs, axis=1)
    return ad.add(ad.matmul(heads, params[pre + "wo"]), params[pre + "ob"])


def feed_forward(x: Tensor, params: PredictorParams, block: int) -> Tensor:
    pre = f"block{block}.ffw."
    h = ad.gelu(ad.add(ad.matmul(x, params[pre + "w1"]), params[pre + "b1"]))
    return ad.add(ad.matmul(h, params[pre + "w2"]), params[pre + "b2"])


def project_patches(features: np.ndarray | Tensor, params: PredictorParams) -> Tensor:
    """Shared d -> p projection for actions, source patches, and loss targets."""
    x = ad.as_tensor(features)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    return ad.add(ad.matmul(x, params["in_proj.w"]), params["in_proj.b"])


def build_mask_tokens(block: MaskBlock, params: PredictorParams) -> Tensor:
    """One row per block position: shared mask vector + positional entry."""
    cfg = params.cfg
    if block.grid != cfg.grid:
        raise ValueError(f"mask block grid {block.grid} != predictor grid {cfg.grid}")
    pos = ad.take_rows(params["pos_embed"], np.asarray(block.indices))
    shared = ad.reshape(params["mask_token"], (1, cfg.p))
    return ad.add(pos, shared)


def predictor_forward(
    action: np.ndarray | Tensor | None,
    source_patches: np.ndarray | Tensor,
    block: MaskBlock,
    params: PredictorParams,
) -> PredictorOutput:
    """Run the predictor on one item.

    ``action`` may be None (the action-free variant); otherwise it occupies
    row 0, followed by the projected source patches and the mask tokens.
    """
    cfg = params.cfg
    src = ad.as_tensor(source_patches)
    if src.ndim != 2 or src.shape[1] != cfg.d:
        raise ValueError(f"source patches must be (m-1, {cfg.d}), got {src.shape}")
    n_src = src.shape[0]
    parts = []
    if action is not None:
        act = ad.as_tensor(action)
        if act.data.reshape(-1).shape != (cfg.d,):
            raise ValueError(f"action must have width {cfg.d}, got {act.shape}")
        parts.append(project_patches(act, params))
    parts.append(project_patches(src, params))
    parts.append(build_mask_tokens(block, params))
    x = ad.concat(parts, axis=0)

    # transient non-finite intermediates surface through the per-block check
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(cfg.blocks):
            normed = layer_norm(x, params[f"block{i}.ln1.g"], params[f"block{i}.ln1.b"])
            x_att = multi_head_attention(normed, params, i)
            z = ad.add(x_att, x)
            ffw_out = feed_forward(
                layer_norm(z, params[f"block{i}.ln2.g"], params[f"block{i}.ln2.b"]), params, i
            )
            x = ad.add(ffw_out, z if cfg.standard_residual else x_att)
            if not np.isfinite(x.data).all():
                raise PredictorError(f"non-finite activations after block {i}")

    offset = 1 if action is not None else 0
    action_out = ad.narrow(x, 0, 0, 1) if action is not None else None
    enhanced = ad.narrow(x, 0, offset, n_src)
    predicted = ad.narrow(x, 0, offset + n_src, len(block))
    return PredictorOutput(
        enhanced_source=enhanced, predicted_patches=predicted, action_out=action_out
    )


def prediction_loss(predicted: Tensor, target_patches: np.ndarray | Tensor) -> Tensor:
    """Squared L2 distance between predicted and target patch features,
    summed over the block (per item; callers average across the batch)."""
    pred = ad.as_tensor(predicted)
    tgt = ad.as_tensor(target_patches)
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction/target shape mismatch: {pred.shape} vs {tgt.shape}")
    diff = ad.sub(pred, tgt)
    return ad.tsum(ad.mul(diff, diff))
