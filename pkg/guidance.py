"""
Multi-conditional classifier-free guidance, training-time condition
dropout and spherical writer interpolation.

Null conditions:
- glyph None  -> all-background image (-1 everywhere), substituted by the model
- writer None -> the model's dedicated null embedding row
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import torch

from diffusion_core import NoisePrediction, NoiseSchedule, ShapeMismatchError, ddim_sample_loop

logger = logging.getLogger(__name__)

DROPOUT_PROB = 0.1
SYNTHESIS_MODES = ('wi', 'wd', 'wd_interp')

Writer = Optional[Union[int, torch.Tensor]]


class GuidanceScaleError(ValueError):
    pass


class ZeroVectorError(ValueError):
    """Spherical combination collapsed (antipodal embeddings)."""


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class GuidanceScales:
    """Content (gamma) and writer (eta) guidance scales."""
    gamma: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        for name in ('gamma', 'eta'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise GuidanceScaleError(f"{name} must be finite and >= 0, got {value}")

    @property
    def unguided(self) -> bool:
        return self.gamma == 0 and self.eta == 0


@dataclass(frozen=True)
class ConditionPair:
    """glyph None = empty glyph; writer None = null writer."""
    glyph: Optional[torch.Tensor] = None
    writer: Optional[int] = None


@dataclass
class SamplingConfig:
    inference_steps: int = 50
    gamma: float = 0.0
    eta: float = 0.0
    batch_size: int = 64
    seed: int = 1234
    mode: str = 'wd'
    interp_lambda: float = 0.5
    count: int = 8
    categories: Tuple[int, ...] = ()
    writer: int = -1
    writer_j: int = 1
    lambdas: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        if self.mode not in SYNTHESIS_MODES:
            raise GuidanceScaleError(f"sampling.mode must be one of {SYNTHESIS_MODES}, got '{self.mode}'")
        if not 0.0 <= self.interp_lambda <= 1.0:
            raise GuidanceScaleError(f"sampling.interp_lambda must be in [0, 1], got {self.interp_lambda}")
        self.scales()

    def scales(self) -> GuidanceScales:
        return GuidanceScales(self.gamma, self.eta)


# ============================================================================
# GUIDANCE COMPOSITION
# ============================================================================

def compose_guided_eps(
    eps_full: torch.Tensor,
    eps_glyph_only: torch.Tensor,
    eps_writer_only: torch.Tensor,
    eps_uncond: torch.Tensor,
    scales: GuidanceScales,
) -> torch.Tensor:
    """
    eps_full + gamma * eps(g, 0) + eta * eps(0, w) - (gamma + eta) * eps(0, 0).

    Coefficients sum to 1 for any scales.
    """
    shape = eps_full.shape
    for other in (eps_glyph_only, eps_writer_only, eps_uncond):
        if other.shape != shape:
            raise ShapeMismatchError(f"Guidance inputs differ in shape: {tuple(shape)} vs {tuple(other.shape)}")
    return (
        eps_full
        + scales.gamma * eps_glyph_only
        + scales.eta * eps_writer_only
        - (scales.gamma + scales.eta) * eps_uncond
    )


def guided_denoise_fn(model, x_t, t, glyph, writer: Writer, scales: GuidanceScales) -> NoisePrediction:
    """
    Evaluate the model under the condition pairs the composition needs and combine them.

    Passes: (g,w) always; (g,0) if gamma > 0; (0,w) if eta > 0; (0,0) if either.
    nu is taken from the fully conditional pass.
    """
    full = model(x_t, t, glyph, writer)
    if scales.unguided:
        return full

    zeros = torch.zeros_like(full.epsilon)
    eps_glyph_only = model(x_t, t, glyph, None).epsilon if scales.gamma > 0 else zeros
    eps_writer_only = model(x_t, t, None, writer).epsilon if scales.eta > 0 else zeros
    eps_uncond = model(x_t, t, None, None).epsilon

    eps = compose_guided_eps(full.epsilon, eps_glyph_only, eps_writer_only, eps_uncond, scales)
    return NoisePrediction(epsilon=eps, nu=full.nu)


def make_guided_denoise_fn(model, glyph, writer: Writer, scales: GuidanceScales) -> Callable:
    """(x_t, t) -> NoisePrediction closure for the samplers, under no_grad."""
    def denoise(x_t, t):
        with torch.no_grad():
            return guided_denoise_fn(model, x_t, t, glyph, writer, scales)
    return denoise


def guided_sample(
    model,
    sched: NoiseSchedule,
    glyph: Optional[torch.Tensor],
    writer: Writer,
    scales: GuidanceScales,
    num_inference_steps: int,
    x_T: torch.Tensor,
) -> torch.Tensor:
    """Guided deterministic DDIM for one batch; returns images in [-1, 1]."""
    denoise = make_guided_denoise_fn(model, glyph, writer, scales)
    return ddim_sample_loop(denoise, sched, num_inference_steps, x_T)


# ============================================================================
# CONDITION DROPOUT
# ============================================================================

def dropout_conditions(pair: ConditionPair, p: float, rng: np.random.Generator) -> ConditionPair:
    """Drop glyph and writer independently, each with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Dropout probability must be in [0, 1], got {p}")
    drop_glyph = rng.random() < p
    drop_writer = rng.random() < p
    return replace(
        pair,
        glyph=None if drop_glyph else pair.glyph,
        writer=None if drop_writer else pair.writer,
    )


def dropout_masks(batch_size: int, p: float, generator: Optional[torch.Generator] = None):
    """Batched dropout: two independent boolean masks (True = dropped)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Dropout probability must be in [0, 1], got {p}")
    draws = torch.rand((2, batch_size), generator=generator)
    return draws[0] < p, draws[1] < p


# ============================================================================
# WRITER INTERPOLATION
# ============================================================================

def slerp(z_i: torch.Tensor, z_j: torch.Tensor, lam: float, renormalize: bool = True) -> torch.Tensor:
    """
    z = z_i cos(lam pi/2) + z_j sin(lam pi/2), renormalized to unit norm.

    Endpoints return copies of z_i / z_j. Works on (D,) or (B, D).

    Raises:
        ZeroVectorError: combination norm < 1e-8
    """
    if z_i.shape != z_j.shape:
        raise ShapeMismatchError(f"Embeddings differ in shape: {tuple(z_i.shape)} vs {tuple(z_j.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"Interpolation factor must be in [0, 1], got {lam}")
    if lam == 0.0:
        return z_i.clone()
    if lam == 1.0:
        return z_j.clone()

    angle = lam * math.pi / 2.0
    z = z_i * math.cos(angle) + z_j * math.sin(angle)
    norm = z.norm(dim=-1, keepdim=True)
    if bool((norm < 1e-8).any()):
        raise ZeroVectorError("Spherical interpolation produced a zero vector (antipodal embeddings)")
    return z / norm if renormalize else z


def interpolate_writers(model, writer_i: int, writer_j: int, lam: float) -> torch.Tensor:
    """Slerp between two learned (normalized) writer embeddings -> (D,)."""
    with torch.no_grad():
        z = model.writer_vectors(torch.tensor([writer_i, writer_j], dtype=torch.long))
    return slerp(z[0], z[1], lam)


def writer_conditions(
    model,
    mode: str,
    batch_size: int,
    rng: np.random.Generator,
    interp_lambda: float = 0.5,
) -> Tuple[Writer, List[str]]:
    """
    Writer condition for one synthesis batch.

    wi        -> None (null writer)
    wd        -> one random writer index per sample
    wd_interp -> slerp of two random writers per sample at interp_lambda

    Returns:
        (writer condition, per-sample style tags)
    """
    count = model.config.writer_count
    if mode == 'wi' or count == 0:
        return None, ['null'] * batch_size
    if mode == 'wd':
        picks = rng.integers(0, count, size=batch_size)
        return torch.from_numpy(picks.astype(np.int64)), [f'w{int(w)}' for w in picks]
    if mode == 'wd_interp':
        if count < 2:
            raise GuidanceScaleError("wd_interp needs at least two writers")
        vectors, tags = [], []
        for _ in range(batch_size):
            i, j = rng.choice(count, size=2, replace=False)
            vectors.append(interpolate_writers(model, int(i), int(j), interp_lambda))
            tags.append(f'w{int(i)}~w{int(j)}@{interp_lambda:g}')
        return torch.stack(vectors), tags
    raise GuidanceScaleError(f"Unknown synthesis mode '{mode}'")
