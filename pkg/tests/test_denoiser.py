import math

import numpy as np
import pytest
import torch

from denoiser import (
    AttentionBlock,
    CheckpointCorruptError,
    CheckpointVersionError,
    DenoiserTrainer,
    GlyphUNet,
    ModelConfig,
    ModelConfigError,
    NonFiniteLossError,
    ParameterStore,
    ResBlock,
    TrainConfig,
    TrainingBatch,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    timestep_embedding,
)
from diffusion_core import hybrid_loss, make_linear_schedule, q_sample


def toy_batch(config, n=4, seed=0):
    generator = torch.Generator().manual_seed(seed)
    size = config.image_size
    x0 = torch.rand((n, 1, size, size), generator=generator) * 2 - 1
    glyph = torch.rand((n, 1, size, size), generator=generator) * 2 - 1
    writer = torch.randint(0, max(config.writer_count, 1), (n,), generator=generator)
    return TrainingBatch(x0, glyph, writer)


# ============================================================================
# CONFIG AND BLOCKS
# ============================================================================

def test_default_config_feature_sizes():
    config = ModelConfig()
    assert config.feature_sizes() == (32, 16, 8)
    assert config.null_writer_index == 8


@pytest.mark.parametrize('overrides', [
    {'attention_resolutions': (4,)},
    {'writer_embed_dim': 64},
    {'channel_multipliers': (1, 2)},
    {'image_size': 30},
    {'num_heads': 3},
])
def test_invalid_model_config(overrides):
    with pytest.raises(ModelConfigError):
        ModelConfig(**overrides)


def test_timestep_embedding_zero():
    emb = timestep_embedding(0, 8)
    torch.testing.assert_close(emb[:4], torch.zeros(4, dtype=torch.float64))
    torch.testing.assert_close(emb[4:], torch.ones(4, dtype=torch.float64))


def test_timestep_embedding_hand_value():
    emb = timestep_embedding(1, 4)
    expected = torch.tensor([math.sin(1.0), math.sin(1e-4), math.cos(1.0), math.cos(1e-4)], dtype=torch.float64)
    torch.testing.assert_close(emb, expected)


def test_timestep_embedding_distinct_steps():
    emb = timestep_embedding(torch.arange(0, 1001), 128)
    distances = torch.cdist(emb, emb)
    distances.fill_diagonal_(1.0)
    assert distances.min().item() > 1e-6


def test_block_parameter_counts():
    assert count_parameters(ResBlock(4, 8, 4)) == 384
    assert count_parameters(AttentionBlock(8, 2)) == 304


def test_resblock_resampling_shapes():
    x, emb = torch.randn(2, 4, 8, 8), torch.randn(2, 8)
    assert ResBlock(4, 8, 6, down=True)(x, emb).shape == (2, 6, 4, 4)
    assert ResBlock(4, 8, 4, up=True)(x, emb).shape == (2, 4, 16, 16)


# ============================================================================
# U-NET
# ============================================================================

def test_forward_shapes_and_nu_range(toy_model, toy_config):
    batch = toy_batch(toy_config)
    out = toy_model(batch.x0, torch.tensor([1, 5, 9, 10]), batch.glyph, batch.writer)
    assert out.epsilon.shape == batch.x0.shape
    assert out.nu.shape == batch.x0.shape
    assert bool(((out.nu >= 0) & (out.nu <= 1)).all())


def test_null_conditions_accepted(toy_model, toy_config):
    batch = toy_batch(toy_config)
    explicit_null = torch.full_like(batch.glyph, -1.0)
    a = toy_model(batch.x0, 3, None, None)
    b = toy_model(batch.x0, 3, explicit_null, torch.full((4,), toy_config.null_writer_index))
    torch.testing.assert_close(a.epsilon, b.epsilon)


def test_writer_out_of_range(toy_model, toy_config):
    batch = toy_batch(toy_config)
    with pytest.raises(IndexError):
        toy_model(batch.x0, 3, batch.glyph, torch.full((4,), 7))


def test_writer_vectors_unit_norm(toy_model, toy_config):
    idx = torch.arange(toy_config.writer_count + 1)
    norms = toy_model.writer_vectors(idx).norm(dim=-1)
    torch.testing.assert_close(norms, torch.ones_like(norms), atol=1e-6, rtol=0)


def test_timestep_changes_output(toy_model, toy_config):
    batch = toy_batch(toy_config, n=1)
    a = toy_model(batch.x0, 1, batch.glyph, batch.writer).epsilon
    b = toy_model(batch.x0, 9, batch.glyph, batch.writer).epsilon
    assert not torch.allclose(a, b)


def test_writer_independent_model_ignores_writer(toy_config):
    config = ModelConfig(**{**toy_config.to_dict(), 'writer_count': 0})
    model = GlyphUNet(config)
    batch = toy_batch(config)
    a = model(batch.x0, 2, batch.glyph, torch.zeros(4, dtype=torch.long)).epsilon
    b = model(batch.x0, 2, batch.glyph, None).epsilon
    torch.testing.assert_close(a, b)


def test_interpolated_vector_matches_index(toy_model, toy_config):
    batch = toy_batch(toy_config, n=1)
    vector = toy_model.writer_vectors(torch.tensor([1]))
    a = toy_model(batch.x0, 4, batch.glyph, 1).epsilon
    b = toy_model(batch.x0, 4, batch.glyph, vector.detach()).epsilon
    torch.testing.assert_close(a, b)


# one parameter per layer type of the toy U-Net (8px, stages (1, 2), attention at 4px)
GRADIENT_PARAMS = {
    'input_conv': lambda m: m.input_conv.weight,
    'down_res_in_conv': lambda m: m.down_blocks[0][0].in_conv.weight,
    'res_emb_proj': lambda m: m.down_blocks[0][0].emb_proj.weight,
    'downsample_res': lambda m: m.down_blocks[1][0].in_conv.weight,
    'down_attention_qkv': lambda m: m.down_blocks[2][1].qkv.weight,
    'middle_attention_proj': lambda m: m.middle[1].proj.weight,
    'up_res_out_conv': lambda m: m.up_blocks[0][0].out_conv.weight,
    'upsample_res': lambda m: m.up_blocks[1][2].in_conv.weight,
    'time_ffn': lambda m: m.time_ffn[0].weight,
    'writer_embed': lambda m: m.writer_embed.weight,
    'out_conv': lambda m: m.out[2].weight,
}


def test_toy_layout_matches_gradient_params(toy_config):
    model = GlyphUNet(toy_config)
    assert model.down_blocks[1][0].down and model.up_blocks[1][2].up
    assert isinstance(model.down_blocks[2][1], AttentionBlock)
    assert isinstance(model.up_blocks[0][0], ResBlock)


@pytest.mark.parametrize('name', sorted(GRADIENT_PARAMS))
def test_hybrid_loss_gradient_matches_finite_differences(toy_config, name):
    torch.manual_seed(7)
    model = GlyphUNet(toy_config).double()
    sched = make_linear_schedule(10, 1e-3, 0.2)
    batch = toy_batch(toy_config, n=3, seed=3)
    x0, glyph = batch.x0.double(), batch.glyph.double()
    eps = torch.randn(x0.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    t = torch.tensor([1, 4, 9])

    def loss_fn():
        x_t = q_sample(x0, t, eps, sched)
        out = model(x_t, t, glyph, batch.writer)
        return hybrid_loss(x0, eps, t, out, sched, lambda_vlb=0.5, stop_mean_gradient=False).loss

    param = GRADIENT_PARAMS[name](model)
    direction = torch.randn(param.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    (grad,) = torch.autograd.grad(loss_fn(), param)
    analytic = float((grad * direction).sum())

    h = 1e-6
    with torch.no_grad():
        param.add_(h * direction)
        plus = float(loss_fn())
        param.sub_(2 * h * direction)
        minus = float(loss_fn())
        param.add_(h * direction)
    numeric = (plus - minus) / (2 * h)
    assert abs(analytic - numeric) / max(abs(numeric), 1e-6) < 1e-3


# ============================================================================
# TRAINING
# ============================================================================

def make_trainer(config, **train_overrides):
    torch.manual_seed(11)
    model = GlyphUNet(config)
    train_config = TrainConfig(**{'batch_size': 4, 'learning_rate': 1e-3, 'seed': 3, **train_overrides})
    return DenoiserTrainer(model, make_linear_schedule(10, 1e-3, 0.2), train_config)


def test_zero_learning_rate_keeps_parameters(toy_config):
    trainer = make_trainer(toy_config, learning_rate=0.0)
    before = {k: v.clone() for k, v in trainer.model.state_dict().items()}
    trainer.train_step(toy_batch(toy_config))
    for name, value in trainer.model.state_dict().items():
        assert torch.equal(value, before[name]), name


def test_training_is_deterministic(toy_config):
    losses = []
    for _ in range(2):
        trainer = make_trainer(toy_config)
        batch = toy_batch(toy_config, n=8)
        losses.append([r.loss for r in trainer.fit(batch.x0, batch.glyph, batch.writer, steps=5)])
    assert losses[0] == losses[1]


def test_step_counter_and_records(toy_config):
    trainer = make_trainer(toy_config)
    batch = toy_batch(toy_config, n=8)
    seen = []
    records = trainer.fit(batch.x0, batch.glyph, batch.writer, steps=3, callback=seen.append)
    assert [r.step for r in records] == [1, 2, 3]
    assert seen == records
    assert set(records[0].as_row()) == {'step', 'loss', 'simple', 'vlb'}


def test_non_finite_loss_aborts(toy_config):
    trainer = make_trainer(toy_config)
    batch = toy_batch(toy_config)
    batch.x0[0, 0, 0, 0] = float('nan')
    with pytest.raises(NonFiniteLossError, match='step 0'):
        trainer.train_step(batch)


def test_flip_augment_runs(toy_config):
    trainer = make_trainer(toy_config, flip_augment=True)
    record = trainer.train_step(toy_batch(toy_config))
    assert math.isfinite(record.loss)


def test_training_reduces_loss_on_toy_set():
    config = ModelConfig(image_size=8, num_stages=2, base_channels=8, channel_multipliers=(1, 2),
                         blocks_per_stage=1, attention_resolutions=(4,), num_heads=2, writer_count=0,
                         writer_embed_dim=16, timestep_embed_dim=16)
    torch.manual_seed(0)
    model = GlyphUNet(config)
    trainer = DenoiserTrainer(model, make_linear_schedule(50, 1e-3, 0.1),
                              TrainConfig(batch_size=16, learning_rate=2e-3, seed=1))
    # four "categories": bars at different rows/columns, glyph = image
    images = torch.full((4, 1, 8, 8), -1.0)
    images[0, 0, 2, :] = 1.0
    images[1, 0, :, 5] = 1.0
    images[2, 0, 6, :] = 1.0
    images[3, 0, :, 1] = 1.0
    x0 = images.repeat(8, 1, 1, 1)
    records = trainer.fit(x0, x0.clone(), None, steps=500)
    losses = np.array([r.loss for r in records])
    assert losses[-100:].mean() < losses[:100].mean()


# ============================================================================
# CHECKPOINTS
# ============================================================================

def test_checkpoint_round_trip_is_bit_identical(tmp_path, toy_config):
    trainer = make_trainer(toy_config)
    batch = toy_batch(toy_config)
    trainer.fit(batch.x0, batch.glyph, batch.writer, steps=2)
    path = save_checkpoint(ParameterStore.from_trainer(trainer, 'test'), tmp_path / 'ckpt.npz')

    store = load_checkpoint(path, expected_config=toy_config)
    restored = store.build_model()
    trainer.model.eval()
    with torch.no_grad():
        a = trainer.model(batch.x0, 5, batch.glyph, batch.writer)
        b = restored(batch.x0, 5, batch.glyph, batch.writer)
    assert torch.equal(a.epsilon, b.epsilon) and torch.equal(a.nu, b.nu)
    assert store.step == 2 and store.tool_version == 'test'


def test_resumed_training_matches_uninterrupted(tmp_path, toy_config):
    batch = toy_batch(toy_config, n=8)
    straight = make_trainer(toy_config)
    straight_losses = [r.loss for r in straight.fit(batch.x0, batch.glyph, batch.writer, steps=4)]

    first = make_trainer(toy_config)
    first.fit(batch.x0, batch.glyph, batch.writer, steps=2)
    path = save_checkpoint(ParameterStore.from_trainer(first), tmp_path / 'half.npz')
    resumed = load_checkpoint(path).build_trainer()
    assert resumed.step == 2
    tail = [r.loss for r in resumed.fit(batch.x0, batch.glyph, batch.writer, steps=2)]
    assert tail == pytest.approx(straight_losses[2:], rel=1e-6)


def test_truncated_checkpoint(tmp_path, toy_model):
    path = save_checkpoint(ParameterStore.from_model(toy_model), tmp_path / 'ckpt.npz')
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / 'nope.npz')


def test_mismatched_config_names_field(tmp_path, toy_model, toy_config):
    path = save_checkpoint(ParameterStore.from_model(toy_model), tmp_path / 'ckpt.npz')
    other = ModelConfig(**{**toy_config.to_dict(), 'base_channels': 16})
    with pytest.raises(CheckpointVersionError) as info:
        load_checkpoint(path, expected_config=other)
    assert info.value.field == 'base_channels'
    assert 'base_channels' in str(info.value)
