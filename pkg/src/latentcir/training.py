"""Training orchestration: batching, AdamW, warmup, checkpoints, metrics.

Only the predictor and fusion parameters train; the encoder pair is frozen
by construction (its weights never enter the optimizer). One step draws a
batch of pairs, synthesizes fresh source views, runs the predictor and
fusion, and applies a single AdamW update at the warmed-up learning rate

    lr(step) = lr * min(1, step / warmup_steps).

Every stochastic choice (batch composition, crops, mask blocks) is drawn
from one generator whose state is captured in checkpoints, so a resumed
run continues the exact step sequence of an uninterrupted one.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import (
    AlignmentBatch,
    FusionParams,
    build_training_prompt,
    contrastive_loss,
    fuse_pseudo_token,
    init_fusion_params,
    total_loss,
)
from .config import TrainConfig, config_from_json, config_to_json
from .encoders import TextEncoderBase, VisionEncoderBase, build_toy_encoders
from .predictor import (
    PredictorConfig,
    PredictorParams,
    init_predictor_params,
    prediction_loss,
    predictor_forward,
    project_patches,
)
from .views import (
    CropConfig,
    RawPair,
    ViewTriplet,
    full_grid_block,
    load_manifest,
    load_pair,
    make_triplet,
    resize_bilinear,
    sample_mask_block,
)

__all__ = [
    "MapperModel",
    "AdamWState",
    "TrainState",
    "StepMetrics",
    "TrainingError",
    "init_mapper",
    "build_encoders",
    "init_train_state",
    "train_step",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
    "load_mapper",
    "learning_rate_at",
    "METRIC_KEYS",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
METRIC_KEYS = ("step", "L_pred", "L_align", "L", "gate_value", "lr")

# structural parameters kept out of weight decay
_NO_DECAY = ("fusion.gate_alpha", "predictor.mask_token", "predictor.pos_embed")


class TrainingError(RuntimeError):
    pass


@dataclass
class MapperModel:
    """The trainable image-to-word mapper: predictor plus fusion."""

    cfg: TrainConfig
    predictor: PredictorParams
    fusion: FusionParams

    def trainable(self) -> dict[str, ad.Tensor]:
        out = {f"predictor.{k}": v for k, v in self.predictor.tensors.items()}
        out.update({f"fusion.{k}": v for k, v in self.fusion.tensors.items()})
        return out

    def zero_grads(self) -> None:
        for t in self.trainable().values():
            t.grad = None


def init_mapper(cfg: TrainConfig) -> MapperModel:
    root = np.random.SeedSequence(cfg.seed)
    pred_rng, fusion_rng = (np.random.default_rng(s) for s in root.spawn(2))
    pred_cfg = PredictorConfig(
        d=cfg.encoder_d,
        p=cfg.predictor_dim,
        blocks=cfg.predictor_blocks,
        heads=cfg.predictor_heads,
        grid=cfg.encoder_g,
        ffw_ratio=cfg.ffw_ratio,
        standard_residual=cfg.standard_residual,
    )
    predictor = init_predictor_params(pred_cfg, pred_rng, dtype=cfg.np_dtype)
    fusion = init_fusion_params(cfg.encoder_d, cfg.predictor_dim, fusion_rng, dtype=cfg.np_dtype)
    return MapperModel(cfg=cfg, predictor=predictor, fusion=fusion)


def build_encoders(cfg: TrainConfig) -> tuple[VisionEncoderBase, TextEncoderBase]:
    if cfg.encoder_profile != "toy":
        raise ValueError(
            f"encoder profile {cfg.encoder_profile!r} needs an adapter with loaded "
            "weights; only the 'toy' profile ships with this package"
        )
    return build_toy_encoders(
        d=cfg.encoder_d,
        g=cfg.encoder_g,
        seed=cfg.encoder_seed,
        resolution=cfg.encoder_resolution,
        dtype=cfg.np_dtype,
    )


# optimizer ------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    updates: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MapperModel) -> "AdamWState":
        params = model.trainable()
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def adamw_update(
    params: dict[str, ad.Tensor], opt: AdamWState, lr: float, weight_decay: float
) -> None:
    opt.updates += 1
    bc1 = 1.0 - opt.beta1**opt.updates
    bc2 = 1.0 - opt.beta2**opt.updates
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * (g * g)
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        if weight_decay and name not in _NO_DECAY:
            p.data -= lr * weight_decay * p.data


def global_grad_norm(params: dict[str, ad.Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(params: dict[str, ad.Tensor], norm: float, max_norm: float) -> None:
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale


# state ----------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    model: MapperModel
    opt: AdamWState
    rng: np.random.Generator
    step: int = 0
    vision: VisionEncoderBase | None = None
    text: TextEncoderBase | None = None
    _cache: dict = field(default_factory=dict)

    def crop_config(self) -> CropConfig:
        return CropConfig(
            scale=(self.cfg.crop_scale_lo, self.cfg.crop_scale_hi),
            aspect=(self.cfg.crop_aspect_lo, self.cfg.crop_aspect_hi),
        )

    def block_config(self) -> CropConfig:
        return CropConfig(
            scale=(self.cfg.block_scale_lo, self.cfg.block_scale_hi),
            aspect=(self.cfg.block_aspect_lo, self.cfg.block_aspect_hi),
        )

    def target_features(self, triplet: ViewTriplet):
        """Frozen target features and action embedding, cached per pair id."""
        cached = self._cache.get(triplet.id)
        if cached is None:
            feats = self.vision.encode_image(
                resize_bilinear(
                    triplet.target_image,
                    self.cfg.encoder_resolution,
                    self.cfg.encoder_resolution,
                )
            )
            _, action = self.text.encode_text(triplet.action_text)
            cached = (feats, action.vec)
            self._cache[triplet.id] = cached
        return cached


@dataclass
class StepMetrics:
    step: int
    loss_pred: float
    loss_align: float
    loss: float
    gate_value: float
    grad_norm: float
    lr: float

    def log_record(self) -> dict:
        return {
            "step": self.step,
            "L_pred": self.loss_pred,
            "L_align": self.loss_align,
            "L": self.loss,
            "gate_value": self.gate_value,
            "lr": self.lr,
        }


def init_train_state(cfg: TrainConfig) -> TrainState:
    model = init_mapper(cfg)
    vision, text = build_encoders(cfg)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x64617461]))
    return TrainState(
        cfg=cfg,
        model=model,
        opt=AdamWState.for_model(model),
        rng=data_rng,
        vision=vision,
        text=text,
    )


def make_training_batch(pairs: list[RawPair], state: TrainState) -> list[ViewTriplet]:
    cfg = state.cfg
    if cfg.batch_size > len(pairs):
        raise TrainingError(
            f"batch_size {cfg.batch_size} exceeds the {len(pairs)}-pair dataset"
        )
    ids = state.rng.choice(len(pairs), size=cfg.batch_size, replace=False)
    return [
        make_triplet(
            pairs[i],
            state.crop_config(),
            state.rng,
            identity_crop=cfg.no_crop,
            mask_source=cfg.mask_source,
        )
        for i in ids
    ]


def _item_forward(triplet: ViewTriplet, state: TrainState):
    """Per-item graph: returns (prediction-loss term, prompt-embedding row)."""
    cfg = state.cfg
    res = cfg.encoder_resolution
    source_feats = state.vision.encode_image(
        resize_bilinear(triplet.source_image, res, res)
    )
    target_feats, action_vec = state.target_features(triplet)

    if cfg.predict_entire:
        block = full_grid_block(cfg.encoder_g)
    else:
        block = sample_mask_block(cfg.encoder_g, state.block_config(), state.rng)

    out = predictor_forward(
        None if cfg.no_action else action_vec,
        source_feats.patches,
        block,
        state.model.predictor,
    )
    target_rows = project_patches(
        target_feats.patches[np.asarray(block.indices)], state.model.predictor
    )
    loss_pred_item = prediction_loss(out.predicted_patches, target_rows)

    token = fuse_pseudo_token(
        out.enhanced_source,
        out.predicted_patches,
        source_feats.global_vec,
        state.model.fusion,
        use_gate=not cfg.no_gate,
        avg_before_map=cfg.avg_before_map,
    )
    prompt_vec = state.text.encode_prompt(build_training_prompt(token, state.text))
    row = ad.reshape(prompt_vec, (1, cfg.encoder_d))
    return loss_pred_item, row, target_feats.global_vec


def batch_losses(triplets: list[ViewTriplet], state: TrainState):
    """Assemble (L_pred, L_align) over a batch of triplets."""
    pred_terms, rows, globals_ = [], [], []
    for triplet in triplets:
        l_pred, row, v_yg = _item_forward(triplet, state)
        pred_terms.append(l_pred)
        rows.append(row)
        globals_.append(v_yg)
    loss_pred = ad.mul(functools.reduce(ad.add, pred_terms), 1.0 / len(pred_terms))
    loss_align = contrastive_loss(
        AlignmentBatch(
            prompt_embeddings=ad.concat(rows, axis=0),
            target_globals=ad.Tensor(np.stack(globals_)),
            temperature=state.cfg.tau,
        )
    )
    return loss_pred, loss_align


def train_step(triplets: list[ViewTriplet], state: TrainState) -> StepMetrics:
    """One optimizer update on the predictor and fusion parameters."""
    cfg = state.cfg
    loss_pred, loss_align = batch_losses(triplets, state)
    try:
        loss = total_loss(loss_pred, loss_align)
    except FloatingPointError as exc:
        ids = [t.id for t in triplets]
        raise TrainingError(f"{exc} at step {state.step} (batch ids {ids})") from exc

    gate_value = state.model.fusion.gate_value  # value the forward pass used
    params = state.model.trainable()
    state.model.zero_grads()
    loss.backward()
    norm = global_grad_norm(params)
    clip_gradients(params, norm, cfg.clip_norm)
    lr = learning_rate_at(state.step, cfg)
    adamw_update(params, state.opt, lr, cfg.weight_decay)
    state.model.zero_grads()

    metrics = StepMetrics(
        step=state.step,
        loss_pred=loss_pred.item(),
        loss_align=loss_align.item(),
        loss=loss.item(),
        gate_value=gate_value,
        grad_norm=norm,
        lr=lr,
    )
    state.step += 1
    return metrics


# checkpointing ----------------------------------------------------------


def save_checkpoint(path: str | Path, state: TrainState) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in state.model.trainable().items():
        arrays[f"param.{name}"] = tensor.data
    for name, m in state.opt.m.items():
        arrays[f"adam_m.{name}"] = m
    for name, v in state.opt.v.items():
        arrays[f"adam_v.{name}"] = v
    arrays["meta.version"] = np.array(CHECKPOINT_VERSION)
    arrays["meta.step"] = np.array(state.step)
    arrays["meta.updates"] = np.array(state.opt.updates)
    arrays["meta.config"] = np.array(config_to_json(state.cfg))
    arrays["meta.rng"] = np.array(json.dumps(state.rng.bit_generator.state))
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["meta.version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = config_from_json(str(archive["meta.config"]))
        state = init_train_state(cfg)
        params = state.model.trainable()
        for name, tensor in params.items():
            stored = archive[f"param.{name}"]
            if stored.shape != tensor.data.shape:
                raise ValueError(f"checkpoint parameter {name} has shape {stored.shape}, "
                                 f"expected {tensor.data.shape}")
            tensor.data = stored
        for name in params:
            state.opt.m[name] = archive[f"adam_m.{name}"]
            state.opt.v[name] = archive[f"adam_v.{name}"]
        state.opt.updates = int(archive["meta.updates"])
        state.step = int(archive["meta.step"])
        state.rng.bit_generator.state = json.loads(str(archive["meta.rng"]))
    return state


def load_mapper(path: str | Path):
    """Load a checkpoint for inference: (model, vision encoder, text encoder)."""
    state = load_checkpoint(path)
    return state.model, state.vision, state.text


# full runs ---------------------------------------------------------------


def load_pairs(manifest_path: str | Path, workers: int = 1) -> list[RawPair]:
    entries = load_manifest(manifest_path)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda e: load_pair(e, manifest_path), entries))
    return [load_pair(entry, manifest_path) for entry in entries]


def _model_config_key(cfg: TrainConfig) -> str:
    values = asdict(cfg)
    for run_extent_field in ("max_steps", "checkpoint_every"):
        values.pop(run_extent_field)
    return json.dumps(values, sort_keys=True)


def run_training(
    cfg: TrainConfig,
    manifest_path: str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
    workers: int = 1,
) -> tuple[Path, Path]:
    """Train on a dataset manifest; returns (checkpoint path, metrics path).

    With ``resume`` the saved state (parameters, optimizer moments, data
    generator) continues from its recorded step, appending to an existing
    metrics log so the step sequence stays gapless. ``workers`` parallelizes
    the initial image loading only; the step loop itself is serialized.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = load_pairs(manifest_path, workers=workers)

    if resume is not None:
        state = load_checkpoint(resume)
        if _model_config_key(state.cfg) != _model_config_key(cfg):
            raise TrainingError("resume checkpoint was produced by a different config")
        # run-extent fields (max_steps, checkpoint cadence) may change on resume
        state.cfg = cfg
        state.model.cfg = cfg
    else:
        state = init_train_state(cfg)

    metrics_path = out / "metrics.jsonl"
    mode = "a" if (resume is not None and metrics_path.exists()) else "w"
    checkpoint_path = out / "checkpoint.npz"
    with metrics_path.open(mode) as log:
        while state.step < cfg.max_steps:
            batch = make_training_batch(pairs, state)
            metrics = train_step(batch, state)
            log.write(json.dumps(metrics.log_record()) + "\n")
            if cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_step{state.step:06d}.npz", state)
    save_checkpoint(checkpoint_path, state)
    return checkpoint_path, metrics_path
