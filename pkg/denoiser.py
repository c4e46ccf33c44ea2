"""
Glyph-conditional U-Net denoiser, its trainer and checkpoint store.

Network:
- input: [x_t, glyph] concatenated (2 channels)
- timestep: sinusoidal features -> 2-layer FFN
- writer: lookup-and-normalize embedding (row writer_count is the null writer),
  summed with the timestep embedding and injected into every residual block
  through FiLM (scale/shift after the second normalization)
- up/down-sampling happens inside residual blocks
- multi-head self-attention at the configured feature-map sizes
- output: 2 channels -> (epsilon, sigmoid(nu))

Checkpoints: see CHECKPOINT_FORMAT.md.
"""

import dataclasses
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from diffusion_core import LAMBDA_VLB, NoisePrediction, NoiseSchedule, hybrid_loss, q_sample
from guidance import DROPOUT_PROB, dropout_masks

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
META_KEY = '__meta__'
NULL_GLYPH_VALUE = -1.0


class ModelConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointCorruptError(RuntimeError):
    pass


class CheckpointVersionError(RuntimeError):
    """Format version or config echo does not match; `field` names the culprit."""

    def __init__(self, message: str, field: str = ''):
        super().__init__(message)
        self.field = field


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class ModelConfig:
    image_size: int = 32
    num_stages: int = 3
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2, 4)
    blocks_per_stage: int = 2
    attention_resolutions: Tuple[int, ...] = (16, 8)
    num_heads: int = 2
    writer_count: int = 8
    writer_embed_dim: int = 128
    timestep_embed_dim: int = 128

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_resolutions = tuple(sorted({int(r) for r in self.attention_resolutions}, reverse=True))
        self.validate()

    @property
    def null_writer_index(self) -> int:
        return self.writer_count

    def feature_sizes(self) -> Tuple[int, ...]:
        return tuple(self.image_size // (2 ** s) for s in range(self.num_stages))

    def validate(self) -> None:
        if self.num_stages < 1:
            raise ModelConfigError("num_stages must be >= 1")
        if self.image_size % (2 ** (self.num_stages - 1)) != 0:
            raise ModelConfigError(
                f"image_size {self.image_size} not divisible by 2^(num_stages-1) = {2 ** (self.num_stages - 1)}"
            )
        if len(self.channel_multipliers) != self.num_stages:
            raise ModelConfigError(
                f"channel_multipliers needs {self.num_stages} entries, got {len(self.channel_multipliers)}"
            )
        missing = set(self.attention_resolutions) - set(self.feature_sizes())
        if missing:
            raise ModelConfigError(
                f"attention_resolutions {sorted(missing)} not among feature sizes {self.feature_sizes()}"
            )
        if self.writer_embed_dim != self.timestep_embed_dim:
            raise ModelConfigError("writer_embed_dim must equal timestep_embed_dim (embeddings are summed)")
        if self.timestep_embed_dim % 2:
            raise ModelConfigError("timestep_embed_dim must be even")
        if self.writer_count < 0 or self.blocks_per_stage < 1 or self.base_channels < 1:
            raise ModelConfigError("writer_count >= 0, blocks_per_stage >= 1 and base_channels >= 1 required")
        for mult in self.channel_multipliers:
            if (self.base_channels * mult) % self.num_heads:
                raise ModelConfigError(
                    f"stage width {self.base_channels * mult} not divisible by num_heads {self.num_heads}"
                )

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out['channel_multipliers'] = list(self.channel_multipliers)
        out['attention_resolutions'] = list(self.attention_resolutions)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        return cls(**data)


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 2e-4
    weight_decay: float = 0.0
    steps: int = 6000
    dropout_prob: float = DROPOUT_PROB
    lambda_vlb: float = LAMBDA_VLB
    flip_augment: bool = False
    checkpoint_every: int = 1000
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ModelConfigError(f"train.dropout_prob must be in [0, 1], got {self.dropout_prob}")
        if self.batch_size < 1 or self.steps < 0 or self.learning_rate < 0:
            raise ModelConfigError("train.batch_size >= 1, train.steps >= 0, train.learning_rate >= 0 required")


# ============================================================================
# BUILDING BLOCKS
# ============================================================================

def timestep_embedding(t: Union[int, torch.Tensor], dim: int) -> torch.Tensor:
    """
    [sin(t w_k), cos(t w_k)] with w_k geometric from 1 to 1/10000 over dim/2
    frequencies (both ends included). (B,) -> (B, dim); int -> (dim,).
    """
    if dim % 2:
        raise ModelConfigError(f"Embedding dim must be even, got {dim}")
    half = dim // 2
    scalar = not isinstance(t, torch.Tensor)
    steps = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    args = steps[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if scalar else emb


def normalization(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class ResBlock(nn.Module):
    """Residual block with FiLM conditioning and optional in-block up/down."""

    def __init__(self, channels: int, emb_channels: int, out_channels: Optional[int] = None,
                 up: bool = False, down: bool = False):
        super().__init__()
        self.out_channels = out_channels or channels
        self.in_norm = normalization(channels)
        self.in_conv = nn.Conv2d(channels, self.out_channels, 3, padding=1)
        self.up, self.down = up, down
        self.emb_proj = nn.Linear(emb_channels, 2 * self.out_channels)
        self.out_norm = normalization(self.out_channels)
        self.out_conv = nn.Conv2d(self.out_channels, self.out_channels, 3, padding=1)
        if self.out_channels == channels:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(channels, self.out_channels, 1)

    def _resample(self, x: torch.Tensor) -> torch.Tensor:
        if self.up:
            return F.interpolate(x, scale_factor=2, mode='nearest')
        if self.down:
            return F.avg_pool2d(x, 2)
        return x

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.in_norm(x))
        h = self.in_conv(self._resample(h))
        x = self._resample(x)

        scale, shift = self.emb_proj(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.out_norm(h) * (1 + scale) + shift
        h = self.out_conv(F.silu(h))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Multi-head self-attention over spatial positions."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads:
            raise ModelConfigError(f"{channels} channels not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.norm = normalization(channels)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.proj = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, *spatial = x.shape
        flat = x.reshape(b, c, -1)
        qkv = self.qkv(self.norm(flat))
        head_dim = c // self.num_heads
        q, k, v = qkv.reshape(b * self.num_heads, 3 * head_dim, -1).split(head_dim, dim=1)
        scale = 1.0 / math.sqrt(math.sqrt(head_dim))
        weight = torch.softmax(torch.einsum('bct,bcs->bts', q * scale, k * scale), dim=-1)
        a = torch.einsum('bts,bcs->bct', weight, v).reshape(b, c, -1)
        return (flat + self.proj(a)).reshape(b, c, *spatial)


class CondSequential(nn.Sequential):
    """Passes the conditioning embedding to residual blocks only."""

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        for layer in self:
            x = layer(x, emb) if isinstance(layer, ResBlock) else layer(x)
        return x


# ============================================================================
# U-NET
# ============================================================================

class GlyphUNet(nn.Module):
    """Predicts (epsilon, nu) from (x_t ++ glyph, t, writer)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        emb = config.timestep_embed_dim

        self.time_ffn = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.writer_embed = nn.Embedding(config.writer_count + 1, config.writer_embed_dim)

        ch = config.base_channels
        self.input_conv = nn.Conv2d(2, ch, 3, padding=1)
        skip_channels = [ch]
        size = config.image_size
        attn = set(config.attention_resolutions)
        last = config.num_stages - 1

        self.down_blocks = nn.ModuleList()
        for level, mult in enumerate(config.channel_multipliers):
            for _ in range(config.blocks_per_stage):
                layers = [ResBlock(ch, emb, config.base_channels * mult)]
                ch = config.base_channels * mult
                if size in attn:
                    layers.append(AttentionBlock(ch, config.num_heads))
                self.down_blocks.append(CondSequential(*layers))
                skip_channels.append(ch)
            if level != last:
                self.down_blocks.append(CondSequential(ResBlock(ch, emb, ch, down=True)))
                skip_channels.append(ch)
                size //= 2

        self.middle = CondSequential(
            ResBlock(ch, emb, ch),
            AttentionBlock(ch, config.num_heads),
            ResBlock(ch, emb, ch),
        )

        self.up_blocks = nn.ModuleList()
        for level, mult in reversed(list(enumerate(config.channel_multipliers))):
            for i in range(config.blocks_per_stage + 1):
                layers = [ResBlock(ch + skip_channels.pop(), emb, config.base_channels * mult)]
                ch = config.base_channels * mult
                if size in attn:
                    layers.append(AttentionBlock(ch, config.num_heads))
                if level and i == config.blocks_per_stage:
                    layers.append(ResBlock(ch, emb, ch, up=True))
                    size *= 2
                self.up_blocks.append(CondSequential(*layers))

        self.out = nn.Sequential(normalization(ch), nn.SiLU(), nn.Conv2d(ch, 2, 3, padding=1))

    def writer_vectors(self, indices: torch.Tensor) -> torch.Tensor:
        """Lookup-and-normalize: unit-norm rows (null row included)."""
        return F.normalize(self.writer_embed(indices), dim=-1)

    def null_glyph(self, like: torch.Tensor) -> torch.Tensor:
        return torch.full_like(like, NULL_GLYPH_VALUE)

    def _writer_condition(self, writer, batch: int, device, dtype) -> torch.Tensor:
        null = self.config.null_writer_index
        if self.config.writer_count == 0 or writer is None:
            idx = torch.full((batch,), null, dtype=torch.long, device=device)
            return self.writer_vectors(idx).to(dtype)
        if isinstance(writer, int):
            writer = torch.full((batch,), writer, dtype=torch.long)
        writer = writer.to(device)
        if writer.is_floating_point():
            # already-normalized style vectors (e.g. interpolated writers)
            vectors = writer if writer.dim() == 2 else writer.unsqueeze(0).expand(batch, -1)
            if vectors.shape != (batch, self.config.writer_embed_dim):
                raise ValueError(f"Writer vectors must be ({batch}, {self.config.writer_embed_dim}), "
                                 f"got {tuple(vectors.shape)}")
            return vectors.to(dtype)
        writer = writer.reshape(-1).long()
        if writer.numel() == 1 and batch > 1:
            writer = writer.expand(batch)
        if writer.numel() != batch:
            raise ValueError(f"Expected {batch} writer indices, got {writer.numel()}")
        if bool(((writer < 0) | (writer > null)).any()):
            raise IndexError(f"Writer index out of range [0, {self.config.writer_count}) (null = {null})")
        return self.writer_vectors(writer).to(dtype)

    def forward(self, x_t: torch.Tensor, t, glyph: Optional[torch.Tensor] = None, writer=None) -> NoisePrediction:
        if x_t.dim() != 4 or x_t.shape[1] != 1:
            raise ValueError(f"x_t must be (B, 1, H, W), got {tuple(x_t.shape)}")
        batch = x_t.shape[0]
        if glyph is None:
            glyph = self.null_glyph(x_t)
        elif glyph.shape != x_t.shape:
            if glyph.dim() == 4 and glyph.shape[0] == 1 and glyph.shape[1:] == x_t.shape[1:]:
                glyph = glyph.expand_as(x_t)
            else:
                raise ValueError(f"glyph shape {tuple(glyph.shape)} does not match x_t {tuple(x_t.shape)}")

        if not isinstance(t, torch.Tensor):
            t = torch.full((batch,), int(t), dtype=torch.long)
        emb = timestep_embedding(t.reshape(-1).cpu(), self.config.timestep_embed_dim)
        emb = emb.to(device=x_t.device, dtype=x_t.dtype)
        if emb.shape[0] == 1 and batch > 1:
            emb = emb.expand(batch, -1)
        emb = self.time_ffn(emb) + self._writer_condition(writer, batch, x_t.device, x_t.dtype)

        h = self.input_conv(torch.cat([x_t, glyph.to(x_t.dtype)], dim=1))
        skips = [h]
        for block in self.down_blocks:
            h = block(h, emb)
            skips.append(h)
        h = self.middle(h, emb)
        for block in self.up_blocks:
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        out = self.out(h)
        return NoisePrediction(epsilon=out[:, :1], nu=torch.sigmoid(out[:, 1:]))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class TrainingBatch:
    x0: torch.Tensor
    glyph: torch.Tensor
    writer: Optional[torch.Tensor] = None


@dataclass
class LossRecord:
    step: int
    loss: float
    simple: float
    vlb: float

    def as_row(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


def flip_batch(batch: TrainingBatch, generator: torch.Generator) -> TrainingBatch:
    """Random horizontal mirror and vertical flip, same for image and glyph."""
    n = batch.x0.shape[0]
    draws = torch.rand((2, n), generator=generator)
    x0, glyph = batch.x0.clone(), batch.glyph.clone()
    mirror, flip = draws[0] < 0.5, draws[1] < 0.5
    x0[mirror] = x0[mirror].flip(-1)
    glyph[mirror] = glyph[mirror].flip(-1)
    x0[flip] = x0[flip].flip(-2)
    glyph[flip] = glyph[flip].flip(-2)
    return TrainingBatch(x0, glyph, batch.writer)


class DenoiserTrainer:
    """
    Single-writer training loop around a GlyphUNet.

    Owns the AdamW optimizer (decoupled weight decay), the torch RNG used for
    timesteps / noise / dropout / batch picks, and the step counter.
    """

    def __init__(self, model: GlyphUNet, sched: NoiseSchedule, config: TrainConfig):
        self.model = model
        self.sched = sched
        self.config = config
        self.step = 0
        self.generator = torch.Generator().manual_seed(config.seed)
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )

    @property
    def device(self) -> torch.device:
        return next(self.model.parameters()).device

    def sample_batch(self, x0: torch.Tensor, glyphs: torch.Tensor, writers: Optional[torch.Tensor]) -> TrainingBatch:
        """Uniform batch pick (with replacement) from in-memory tensors."""
        idx = torch.randint(0, x0.shape[0], (self.config.batch_size,), generator=self.generator)
        return TrainingBatch(x0[idx], glyphs[idx], None if writers is None else writers[idx])

    def train_step(self, batch: TrainingBatch) -> LossRecord:
        """
        One AdamW update on the hybrid loss.

        Raises:
            NonFiniteLossError: loss is NaN/inf (step and timestep range in message)
        """
        g = self.generator
        if self.config.flip_augment:
            batch = flip_batch(batch, g)
        n = batch.x0.shape[0]
        device = self.device

        t = torch.randint(1, self.sched.num_steps + 1, (n,), generator=g)
        eps = torch.randn(batch.x0.shape, generator=g)
        drop_glyph, drop_writer = dropout_masks(n, self.config.dropout_prob, g)

        x0 = batch.x0.to(device)
        eps = eps.to(device=device, dtype=x0.dtype)
        glyph = torch.where(drop_glyph.to(device).view(n, 1, 1, 1),
                            torch.full_like(batch.glyph.to(device), NULL_GLYPH_VALUE),
                            batch.glyph.to(device))
        writer = None
        if batch.writer is not None and self.model.config.writer_count > 0:
            null = torch.full_like(batch.writer, self.model.config.null_writer_index)
            writer = torch.where(drop_writer, null, batch.writer).to(device)

        self.model.train()
        x_t = q_sample(x0, t, eps, self.sched)
        prediction = self.model(x_t, t.to(device), glyph, writer)
        losses = hybrid_loss(x0, eps, t, prediction, self.sched, lambda_vlb=self.config.lambda_vlb)

        if not torch.isfinite(losses.loss):
            raise NonFiniteLossError(
                f"Non-finite loss at step {self.step}: loss={losses.loss.item()} "
                f"simple={losses.simple_term.item()} vlb={losses.vlb_term.item()} "
                f"t in [{int(t.min())}, {int(t.max())}]"
            )

        self.optimizer.zero_grad(set_to_none=True)
        losses.loss.backward()
        self.optimizer.step()
        self.step += 1
        return LossRecord(self.step, losses.loss.item(), losses.simple_term.item(), losses.vlb_term.item())

    def fit(self, x0: torch.Tensor, glyphs: torch.Tensor, writers: Optional[torch.Tensor],
            steps: int, callback=None):
        """Run `steps` updates; callback(record) after each."""
        records = []
        for _ in range(steps):
            record = self.train_step(self.sample_batch(x0, glyphs, writers))
            records.append(record)
            if callback is not None:
                callback(record)
        return records


# ============================================================================
# CHECKPOINTS
# ============================================================================

@dataclass
class ParameterStore:
    """Everything needed to rebuild a model and resume its training."""
    model_config: ModelConfig
    model_state: Dict[str, np.ndarray]
    step: int = 0
    train_config: Optional[Dict[str, Any]] = None
    schedule: Optional[Dict[str, Any]] = None
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_groups: Optional[list] = None
    rng_state: Optional[np.ndarray] = None
    seed: Optional[int] = None
    tool_version: str = ''

    @classmethod
    def from_model(cls, model: GlyphUNet, **kwargs) -> 'ParameterStore':
        state = OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in model.state_dict().items())
        return cls(model_config=model.config, model_state=state, **kwargs)

    @classmethod
    def from_trainer(cls, trainer: DenoiserTrainer, tool_version: str = '') -> 'ParameterStore':
        opt = trainer.optimizer.state_dict()
        flat = {}
        for idx, slot in opt['state'].items():
            for key, value in slot.items():
                flat[f'{idx}/{key}'] = (value.detach().cpu().numpy().copy()
                                        if isinstance(value, torch.Tensor) else np.asarray(value))
        return cls.from_model(
            trainer.model,
            step=trainer.step,
            train_config=dataclasses.asdict(trainer.config),
            schedule={'betas': trainer.sched.betas.tolist()},
            optimizer_state=flat,
            optimizer_groups=opt['param_groups'],
            rng_state=trainer.generator.get_state().numpy().copy(),
            seed=trainer.config.seed,
            tool_version=tool_version,
        )

    def build_model(self) -> GlyphUNet:
        model = GlyphUNet(self.model_config)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.model_state.items()})
        model.eval()
        return model

    def build_schedule(self) -> Optional[NoiseSchedule]:
        if not self.schedule:
            return None
        return NoiseSchedule(self.schedule['betas'])

    def build_trainer(self, sched: Optional[NoiseSchedule] = None) -> DenoiserTrainer:
        """Model + optimizer moments + RNG state + step counter."""
        sched = sched or self.build_schedule()
        if sched is None or self.train_config is None:
            raise CheckpointVersionError("Checkpoint holds no training state", field='train_config')
        trainer = DenoiserTrainer(self.build_model(), sched, TrainConfig(**self.train_config))
        if self.optimizer_groups is not None:
            state: Dict[int, Dict[str, Any]] = {}
            for name, value in self.optimizer_state.items():
                idx, key = name.split('/', 1)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(value))
            trainer.optimizer.load_state_dict({'state': state, 'param_groups': self.optimizer_groups})
        if self.rng_state is not None:
            trainer.generator.set_state(torch.from_numpy(np.array(self.rng_state, dtype=np.uint8)))
        trainer.step = self.step
        return trainer


def save_checkpoint(store: ParameterStore, path: Union[str, Path]) -> Path:
    """Write an .npz container atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'tool_version': store.tool_version,
        'model_config': store.model_config.to_dict(),
        'train_config': store.train_config,
        'schedule': store.schedule,
        'step': store.step,
        'seed': store.seed,
        'optimizer_groups': store.optimizer_groups,
    }
    arrays = {META_KEY: np.frombuffer(json.dumps(meta, sort_keys=True).encode('utf-8'), dtype=np.uint8)}
    arrays.update({f'model/{k}': v for k, v in store.model_state.items()})
    arrays.update({f'optim/{k}': v for k, v in store.optimizer_state.items()})
    if store.rng_state is not None:
        arrays['rng/torch'] = store.rng_state

    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)
    logger.info(f"Checkpoint saved: {path} (step {store.step})")
    return path


def load_checkpoint(path: Union[str, Path], expected_config: Optional[ModelConfig] = None) -> ParameterStore:
    """
    Raises:
        FileNotFoundError: path missing
        CheckpointCorruptError: truncated/undecodable container
        CheckpointVersionError: format version or config echo mismatch
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {name: npz[name] for name in npz.files}
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode('utf-8'))
    except Exception as e:  # BadZipFile, truncated members, bad JSON
        raise CheckpointCorruptError(f"Corrupt checkpoint {path}: {e}") from e

    version = meta.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint format version {version} != {CHECKPOINT_FORMAT_VERSION}", field='format_version'
        )

    echoed = meta['model_config']
    if expected_config is not None:
        wanted = expected_config.to_dict()
        for key in sorted(set(wanted) | set(echoed)):
            if wanted.get(key) != echoed.get(key):
                raise CheckpointVersionError(
                    f"Checkpoint config mismatch on field '{key}': "
                    f"checkpoint={echoed.get(key)!r} expected={wanted.get(key)!r}",
                    field=key,
                )

    try:
        model_config = ModelConfig.from_dict(echoed)
    except (TypeError, ValueError) as e:
        raise CheckpointVersionError(f"Checkpoint config echo unusable: {e}", field='model_config') from e

    return ParameterStore(
        model_config=model_config,
        model_state=OrderedDict((k[len('model/'):], v) for k, v in arrays.items() if k.startswith('model/')),
        step=int(meta.get('step') or 0),
        train_config=meta.get('train_config'),
        schedule=meta.get('schedule'),
        optimizer_state={k[len('optim/'):]: v for k, v in arrays.items() if k.startswith('optim/')},
        optimizer_groups=meta.get('optimizer_groups'),
        rng_state=arrays.get('rng/torch'),
        seed=meta.get('seed'),
        tool_version=meta.get('tool_version', ''),
    )
