"""Gated fusion into a pseudo-word token and the contrastive alignment loss.

The pseudo-word token combines a mapping of the global source feature with
a tanh-gated average of the predictor's output rows:

    S* = f_Ms(v_g) + tanh(alpha) * mean_rows(f_Mp(rows))

where ``rows`` stacks the enhanced source patches and the predicted target
patches. The gate scalar alpha starts at 0, so at initialization S* depends
only on the source mapping, and the prediction branch is phased in as the
gate opens. ``avg_before_map`` switches to averaging the rows first and
mapping the single pooled vector (the alternative operand order); the
gate-free variant adds the prediction branch unscaled.

Alignment uses a symmetric InfoNCE loss between prompt-sentence embeddings
and global target features, both L2-normalized inside the loss, with a
temperature multiplier on the cosine logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import PromptSequence, TextEncoderBase

__all__ = [
    "FusionParams",
    "PseudoToken",
    "AlignmentBatch",
    "init_fusion_params",
    "fuse_pseudo_token",
    "contrastive_loss",
    "total_loss",
    "build_training_prompt",
    "TRAINING_PROMPT",
]

TRAINING_PROMPT = "a photo of [*]"


@dataclass
class FusionParams:
    d: int
    p: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def gate_value(self) -> float:
        return float(np.tanh(self.tensors["gate_alpha"].data))


@dataclass(frozen=True)
class PseudoToken:
    vec: Tensor  # (d,)


@dataclass(frozen=True)
class AlignmentBatch:
    prompt_embeddings: Tensor  # (B, d)
    target_globals: Tensor  # (B, d)
    temperature: float

    def __post_init__(self):
        if self.prompt_embeddings.shape != self.target_globals.shape:
            raise ValueError("prompt/target batches differ in shape")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def init_fusion_params(d: int, p: int, rng: np.random.Generator, dtype=np.float64) -> FusionParams:
    """Two 3-layer feed-forward maps (hidden width d, tanh between layers)
    plus the zero-initialized gate scalar."""
    dt = np.dtype(dtype)

    def normal(shape, fan_in):
        return ad.parameter((rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dt))

    def zeros(shape):
        return ad.parameter(np.zeros(shape, dtype=dt))

    t: dict[str, Tensor] = {"gate_alpha": ad.parameter(np.zeros((), dtype=dt))}
    for name, d_in in (("map_pred", p), ("map_src", d)):
        dims = (d_in, d, d, d)
        for layer in range(3):
            t[f"{name}.w{layer}"] = normal((dims[layer], dims[layer + 1]), dims[layer])
            t[f"{name}.b{layer}"] = zeros((dims[layer + 1],))
    return FusionParams(d=d, p=p, tensors=t)


def _three_layer_map(x: Tensor, params: FusionParams, name: str) -> Tensor:
    h = x
    for layer in range(3):
        h = ad.add(ad.matmul(h, params[f"{name}.w{layer}"]), params[f"{name}.b{layer}"])
        if layer < 2:
            h = ad.tanh(h)
    return h


def fuse_pseudo_token(
    enhanced_source: Tensor,
    predicted: Tensor,
    global_source: np.ndarray | Tensor,
    params: FusionParams,
    use_gate: bool = True,
    avg_before_map: bool = False,
) -> PseudoToken:
    """Combine predictor outputs and the global source feature into S*."""
    v_g = ad.as_tensor(global_source)
    if v_g.data.reshape(-1).shape != (params.d,):
        raise ValueError(f"global source feature must have width {params.d}")
    rows = ad.concat([ad.as_tensor(enhanced_source), ad.as_tensor(predicted)], axis=0)
    if rows.shape[1] != params.p:
        raise ValueError(f"predictor rows must have width {params.p}, got {rows.shape[1]}")
    if avg_before_map:
        pooled = ad.tmean(rows, axis=0, keepdims=True)
        branch = _three_layer_map(pooled, params, "map_pred")
    else:
        branch = ad.tmean(_three_layer_map(rows, params, "map_pred"), axis=0, keepdims=True)
    if use_gate:
        branch = ad.mul(branch, ad.tanh(params["gate_alpha"]))
    src = _three_layer_map(ad.reshape(v_g, (1, params.d)), params, "map_src")
    return PseudoToken(vec=ad.reshape(ad.add(src, branch), (params.d,)))


def _normalize_rows(x: Tensor) -> Tensor:
    sq = ad.tsum(ad.mul(x, x), axis=1, keepdims=True)
    return ad.div(x, ad.sqrt(sq))


def _nll_of_diagonal(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    eye = Tensor(np.eye(n, dtype=logits.dtype))
    probs = ad.softmax(logits, axis=-1)
    diag = ad.tsum(ad.mul(probs, eye), axis=1)
    return ad.mul(ad.tsum(ad.log(diag)), -1.0 / n)


def contrastive_loss(batch: AlignmentBatch) -> Tensor:
    """Symmetric InfoNCE over matched (prompt, target) rows.

    Both directions share the cosine logit matrix scaled by the temperature;
    rows are L2-normalized here, so any positive rescaling of the inputs
    leaves the loss unchanged.
    """
    n = batch.prompt_embeddings.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    t_p = _normalize_rows(ad.as_tensor(batch.prompt_embeddings))
    v_g = _normalize_rows(ad.as_tensor(batch.target_globals))
    logits = ad.mul(ad.matmul(t_p, ad.transpose(v_g)), batch.temperature)
    return ad.add(_nll_of_diagonal(logits), _nll_of_diagonal(ad.transpose(logits)))


def total_loss(pred_loss: Tensor, align_loss: Tensor) -> Tensor:
    """Unweighted sum of the prediction and alignment terms."""
    for name, term in (("prediction", pred_loss), ("alignment", align_loss)):
        if not np.isfinite(ad.as_tensor(term).data).all():
            raise FloatingPointError(f"non-finite {name} loss")
    return ad.add(pred_loss, align_loss)


def build_training_prompt(token: PseudoToken, text_encoder: TextEncoderBase) -> PromptSequence:
    """The fixed training-time prompt with S* in its trailing slot."""
    return text_encoder.prompt_sequence(TRAINING_PROMPT).inject(token.vec)
