import json

import numpy as np
import pytest

from latentcir.config import ConfigError, TrainConfig, apply_overrides, parse_config_file
from latentcir.predictor import predictor_forward
from latentcir.training import (
    METRIC_KEYS,
    TrainingError,
    init_train_state,
    learning_rate_at,
    load_checkpoint,
    make_training_batch,
    run_training,
    save_checkpoint,
    train_step,
)
from latentcir.views import full_grid_block, synth_dataset, write_dataset


def toy_config(**overrides):
    base = dict(
        seed=0,
        max_steps=8,
        batch_size=4,
        dtype="float64",
        lr=1e-3,
        weight_decay=0.1,
        warmup_steps=4,
        tau=20.0,
        encoder_d=32,
        encoder_g=4,
        predictor_blocks=2,
        predictor_dim=16,
        predictor_heads=8,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pairs():
    return synth_dataset(8, np.random.default_rng(0))


def snapshot(state):
    return {k: t.data.copy() for k, t in state.model.trainable().items()}


# schedule ---------------------------------------------------------------


def test_warmup_schedule_endpoints():
    cfg = toy_config(lr=1e-5, warmup_steps=100)
    assert learning_rate_at(0, cfg) == 0.0
    assert learning_rate_at(50, cfg) == pytest.approx(5e-6)
    assert learning_rate_at(100, cfg) == pytest.approx(1e-5)
    assert learning_rate_at(10_000, cfg) == pytest.approx(1e-5)
    assert learning_rate_at(0, toy_config(warmup_steps=0)) == toy_config().lr


def test_step_zero_updates_nothing(pairs):
    state = init_train_state(toy_config(warmup_steps=100))
    before = snapshot(state)
    metrics = train_step(make_training_batch(pairs, state), state)
    assert metrics.lr == 0.0
    after = snapshot(state)
    for name in before:
        assert np.array_equal(before[name], after[name]), name


def test_train_step_touches_only_trainable_parameters(pairs):
    state = init_train_state(toy_config(warmup_steps=0))
    vision_sum = state.vision.weights_checksum()
    text_sum = state.text.weights_checksum()
    before = snapshot(state)
    train_step(make_training_batch(pairs, state), state)
    assert state.vision.weights_checksum() == vision_sum
    assert state.text.weights_checksum() == text_sum
    changed = [k for k in before if not np.array_equal(before[k], snapshot(state)[k])]
    assert "predictor.in_proj.w" in changed
    assert "fusion.map_src.w0" in changed
    assert "fusion.gate_alpha" in changed


def test_metrics_are_finite_and_complete(pairs):
    state = init_train_state(toy_config(warmup_steps=0))
    metrics = train_step(make_training_batch(pairs, state), state)
    record = metrics.log_record()
    assert tuple(record) == METRIC_KEYS
    assert all(np.isfinite(v) for v in record.values())
    assert metrics.gate_value == pytest.approx(np.tanh(0.0))
    assert metrics.grad_norm > 0


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_loss_aborts_with_batch_ids(pairs):
    state = init_train_state(toy_config(warmup_steps=0))
    state.model.fusion.tensors["map_src.w0"].data[:] = np.inf
    with pytest.raises(TrainingError, match="synth-"):
        train_step(make_training_batch(pairs, state), state)


def test_batch_larger_than_dataset_rejected(pairs):
    state = init_train_state(toy_config(batch_size=64))
    with pytest.raises(TrainingError, match="exceeds"):
        make_training_batch(pairs, state)


# end-to-end runs ----------------------------------------------------------


@pytest.fixture()
def dataset_dir(tmp_path):
    pairs = synth_dataset(8, np.random.default_rng(1))
    return write_dataset(pairs, tmp_path / "data")


def test_identical_seed_runs_are_bitwise_identical(dataset_dir, tmp_path):
    cfg = toy_config()
    run_training(cfg, dataset_dir, tmp_path / "a")
    run_training(cfg, dataset_dir, tmp_path / "b")
    log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    log_b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert log_a == log_b
    ck_a = load_checkpoint(tmp_path / "a" / "checkpoint.npz")
    ck_b = load_checkpoint(tmp_path / "b" / "checkpoint.npz")
    for name, tensor in ck_a.model.trainable().items():
        assert np.array_equal(tensor.data, ck_b.model.trainable()[name].data), name


def test_metric_log_schema_and_progression(dataset_dir, tmp_path):
    cfg = toy_config(max_steps=5)
    _, metrics_path = run_training(cfg, dataset_dir, tmp_path / "run")
    lines = [json.loads(l) for l in metrics_path.read_text().splitlines()]
    assert [rec["step"] for rec in lines] == list(range(5))
    assert all(tuple(rec) == METRIC_KEYS for rec in lines)


def test_checkpoint_round_trip_forward_bitwise(dataset_dir, tmp_path):
    cfg = toy_config(max_steps=3)
    ckpt, _ = run_training(cfg, dataset_dir, tmp_path / "run")
    state = load_checkpoint(ckpt)
    rng = np.random.default_rng(0)
    action = rng.standard_normal(32)
    src = rng.standard_normal((16, 32))
    blk = full_grid_block(4)
    out1 = predictor_forward(action, src, blk, state.model.predictor)
    resaved = save_checkpoint(tmp_path / "resaved.npz", state)
    reloaded = load_checkpoint(resaved)
    out2 = predictor_forward(action, src, blk, reloaded.model.predictor)
    assert out1.predicted_patches.data.tobytes() == out2.predicted_patches.data.tobytes()
    assert out1.enhanced_source.data.tobytes() == out2.enhanced_source.data.tobytes()


def test_resume_reproduces_uninterrupted_run(dataset_dir, tmp_path):
    cfg = toy_config(max_steps=10, checkpoint_every=5)
    run_training(cfg, dataset_dir, tmp_path / "full")
    full_lines = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()

    short = toy_config(max_steps=5)
    run_training(short, dataset_dir, tmp_path / "part")
    resumed_cfg = toy_config(max_steps=10)
    _, metrics_path = run_training(
        resumed_cfg,
        dataset_dir,
        tmp_path / "part",
        resume=tmp_path / "part" / "checkpoint.npz",
    )
    part_lines = metrics_path.read_text().splitlines()
    assert part_lines[5:] == full_lines[5:]
    assert [json.loads(l)["step"] for l in part_lines] == list(range(10))


def test_resume_requires_matching_config(dataset_dir, tmp_path):
    cfg = toy_config(max_steps=3)
    ckpt, _ = run_training(cfg, dataset_dir, tmp_path / "run")
    with pytest.raises(TrainingError, match="different config"):
        run_training(toy_config(max_steps=3, tau=7.0), dataset_dir, tmp_path / "other", resume=ckpt)


def test_resume_checkpoint_mid_run_cadence(dataset_dir, tmp_path):
    cfg = toy_config(max_steps=6, checkpoint_every=2)
    run_training(cfg, dataset_dir, tmp_path / "run")
    for step in (2, 4, 6):
        assert (tmp_path / "run" / f"checkpoint_step{step:06d}.npz").exists()


# config files ----------------------------------------------------------------


def test_parse_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        """
        # toy run
        seed = 3
        lr = 0.001
        batch_size = 4
        no_gate = true
        dtype = float64
        """
    )
    cfg = parse_config_file(path)
    assert cfg.seed == 3 and cfg.lr == 0.001 and cfg.no_gate and cfg.dtype == "float64"


def test_unknown_key_suggests_nearest(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown config key 'learning_rate'"):
        parse_config_file(path)
    path.write_text("warmup_step = 10\n")
    with pytest.raises(ConfigError, match="did you mean 'warmup_steps'"):
        parse_config_file(path)


def test_overrides_win_and_validate():
    cfg = toy_config()
    out = apply_overrides(cfg, {"lr": "0.5", "no_crop": "true"})
    assert out.lr == 0.5 and out.no_crop
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"warmupsteps": "1"})
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"batch_size": "1"})


def test_config_validation_rules():
    with pytest.raises(ConfigError, match="mutually exclusive"):
        toy_config(no_crop=True, mask_source=True)
    with pytest.raises(ConfigError, match="dtype"):
        toy_config(dtype="float16")
    with pytest.raises(ConfigError, match="lr"):
        toy_config(lr=0.0)


def test_shipped_toy_config_matches_preset():
    from pathlib import Path

    from latentcir.config import toy_config

    shipped = parse_config_file(Path(__file__).parent.parent / "configs" / "toy.cfg")
    assert shipped == toy_config()


def test_no_crop_flag_yields_identity_views(pairs):
    state = init_train_state(toy_config(no_crop=True))
    batch = make_training_batch(pairs, state)
    for triplet in batch:
        assert triplet.crop_spec.scale == 1.0
        np.testing.assert_array_equal(triplet.source_image, triplet.target_image)


def test_mask_source_flag_zeroes_instead_of_cropping(pairs):
    state = init_train_state(toy_config(mask_source=True))
    batch = make_training_batch(pairs, state)
    for triplet in batch:
        assert triplet.source_image.shape == triplet.target_image.shape
        s = triplet.crop_spec
        assert np.all(triplet.source_image[s.y:s.y + s.height, s.x:s.x + s.width] == 0.0)
