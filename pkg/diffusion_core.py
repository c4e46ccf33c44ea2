"""
Diffusion core: noise schedule, forward process, posterior, learnable
variance, hybrid loss and the DDPM / DDIM reverse samplers.

Conventions:
- Steps are 1-based: t in [1, T]. Table index is t - 1.
- alpha_bar_0 = 1, so posterior_betas[0] (t = 1) is exactly 0.
- Schedule tables are float64 NumPy arrays (read-only); tensors passed in
  keep their own dtype.
- t may be a python int (whole batch at one step) or a LongTensor of shape
  (B,) with one step per example.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)

LAMBDA_VLB = 0.001
DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

Step = Union[int, torch.Tensor]


class ScheduleRangeError(ValueError):
    """Schedule parameters outside 0 < beta_start <= beta_end < 1 or T < 1."""


class ShapeMismatchError(ValueError):
    pass


class VarianceDomainError(ValueError):
    """log(posterior beta) undefined at t = 1 without the clamped floor."""


class StrideError(ValueError):
    pass


# ============================================================================
# TYPES
# ============================================================================

@dataclass
class ScheduleConfig:
    num_steps: int = DEFAULT_NUM_STEPS
    beta_start: float = 0.0
    beta_end: float = 0.0
    inference_steps: int = 50

    def build(self) -> 'NoiseSchedule':
        """Zero endpoints mean 'use the 1e-4 -> 0.02 convention scaled to T'."""
        if self.beta_start <= 0.0 and self.beta_end <= 0.0:
            return default_schedule(self.num_steps)
        return make_linear_schedule(self.num_steps, self.beta_start, self.beta_end)


@dataclass
class NoisePrediction:
    """Network output: predicted noise and variance interpolation (in [0, 1])."""
    epsilon: torch.Tensor
    nu: torch.Tensor


class NoiseSchedule:
    """Immutable beta/alpha/alpha_bar/posterior-beta tables."""

    def __init__(self, betas: Sequence[float]):
        betas = np.asarray(betas, dtype=np.float64).reshape(-1)
        if betas.size < 1:
            raise ScheduleRangeError("Schedule needs at least one step")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ScheduleRangeError("Every beta must lie in (0, 1)")

        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars_prev = np.append(1.0, alpha_bars[:-1])
        posterior_betas = (1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas

        # floor at posterior_betas[1] keeps log finite at t = 1
        floor = posterior_betas[1] if betas.size > 1 else betas[0]
        posterior_log_clipped = np.log(np.maximum(posterior_betas, floor))

        self.betas = betas
        self.alphas = alphas
        self.alpha_bars = alpha_bars
        self.alpha_bars_prev = alpha_bars_prev
        self.posterior_betas = posterior_betas
        self.posterior_log_variance_clipped = posterior_log_clipped
        self.log_betas = np.log(betas)
        for table in (self.betas, self.alphas, self.alpha_bars, self.alpha_bars_prev,
                      self.posterior_betas, self.posterior_log_variance_clipped, self.log_betas):
            table.setflags(write=False)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> 'NoiseSchedule':
        return cls(betas)

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)

    def check_step(self, t: Step) -> None:
        lo, hi = _step_range(t)
        if lo < 1 or hi > self.num_steps:
            raise ScheduleRangeError(f"Step out of range [1, {self.num_steps}]: {lo}..{hi}")

    def to_dict(self) -> dict:
        return {'num_steps': self.num_steps,
                'beta_first': float(self.betas[0]),
                'beta_last': float(self.betas[-1])}

    def __repr__(self) -> str:
        return f"NoiseSchedule(T={self.num_steps}, beta=[{self.betas[0]:.3g}, {self.betas[-1]:.3g}])"


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """
    Linearly spaced betas, endpoints inclusive.

    Raises:
        ScheduleRangeError: T < 1 or not 0 < beta_start <= beta_end < 1
    """
    if int(T) != T or T < 1:
        raise ScheduleRangeError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleRangeError(
            f"Need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def default_schedule(T: int = DEFAULT_NUM_STEPS) -> NoiseSchedule:
    """1e-4 -> 0.02 at T = 1000, betas scaled by 1000 / T otherwise."""
    scale = DEFAULT_NUM_STEPS / T
    return make_linear_schedule(T, DEFAULT_BETA_START * scale, DEFAULT_BETA_END * scale)


# ============================================================================
# TABLE LOOKUP
# ============================================================================

def _step_range(t: Step):
    if isinstance(t, torch.Tensor):
        return int(t.min()), int(t.max())
    return int(t), int(t)


def _extract(table: np.ndarray, t: Step, like: torch.Tensor) -> torch.Tensor:
    """Table value(s) at step t, broadcastable against `like` (B, C, H, W)."""
    if isinstance(t, torch.Tensor):
        idx = t.detach().to('cpu', torch.long) - 1
        values = torch.from_numpy(np.ascontiguousarray(table[idx.numpy()]))
        values = values.to(device=like.device, dtype=like.dtype)
        return values.reshape(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(table[int(t) - 1], dtype=like.dtype, device=like.device)


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for other in tensors[1:]:
        if other.shape != shape:
            raise ShapeMismatchError(f"Shape mismatch: {tuple(shape)} vs {tuple(other.shape)}")


# ============================================================================
# FORWARD PROCESS AND POSTERIOR
# ============================================================================

def q_sample(x0: torch.Tensor, t: Step, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    _check_same_shape(x0, eps)
    sched.check_step(t)
    sqrt_ab = _extract(np.sqrt(sched.alpha_bars), t, x0)
    sqrt_one_minus = _extract(np.sqrt(1.0 - sched.alpha_bars), t, x0)
    return sqrt_ab * x0 + sqrt_one_minus * eps


def predict_x0(x_t: torch.Tensor, t: Step, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(x_t, eps)
    sqrt_ab = _extract(np.sqrt(sched.alpha_bars), t, x_t)
    sqrt_one_minus = _extract(np.sqrt(1.0 - sched.alpha_bars), t, x_t)
    return (x_t - sqrt_one_minus * eps) / sqrt_ab


def posterior_mean_variance(x_t: torch.Tensor, eps_hat: torch.Tensor, t: Step, sched: NoiseSchedule):
    """
    Mean of p(x_{t-1} | x_t) from a noise prediction, and posterior beta.

    Returns:
        (mean, variance): variance is a float for int t, a (B,1,1,1) tensor
        for per-example t.
    """
    _check_same_shape(x_t, eps_hat)
    sched.check_step(t)
    coef = _extract((1.0 - sched.alphas) / np.sqrt(1.0 - sched.alpha_bars), t, x_t)
    inv_sqrt_alpha = _extract(1.0 / np.sqrt(sched.alphas), t, x_t)
    mean = inv_sqrt_alpha * (x_t - coef * eps_hat)
    if isinstance(t, torch.Tensor):
        variance = _extract(sched.posterior_betas, t, x_t)
    else:
        variance = float(sched.posterior_betas[int(t) - 1])
    return mean, variance


def posterior_q_mean_variance(x0: torch.Tensor, x_t: torch.Tensor, t: Step, sched: NoiseSchedule):
    """True posterior q(x_{t-1} | x_t, x0): mean and clipped log variance."""
    _check_same_shape(x0, x_t)
    coef1 = _extract(np.sqrt(sched.alpha_bars_prev) * sched.betas / (1.0 - sched.alpha_bars), t, x_t)
    coef2 = _extract(np.sqrt(sched.alphas) * (1.0 - sched.alpha_bars_prev) / (1.0 - sched.alpha_bars), t, x_t)
    mean = coef1 * x0 + coef2 * x_t
    log_var = _extract(sched.posterior_log_variance_clipped, t, x_t)
    return mean, log_var


def model_log_variance(nu: torch.Tensor, t: Step, sched: NoiseSchedule, clamp: bool = True) -> torch.Tensor:
    """nu * log(beta_t) + (1 - nu) * log(posterior beta_t)."""
    sched.check_step(t)
    if clamp:
        log_post = _extract(sched.posterior_log_variance_clipped, t, nu)
    else:
        lo, _ = _step_range(t)
        if lo == 1:
            raise VarianceDomainError("log posterior beta is undefined at t = 1 (posterior beta is 0)")
        log_post = _extract(np.log(sched.posterior_betas), t, nu)
    log_beta = _extract(sched.log_betas, t, nu)
    return nu * log_beta + (1.0 - nu) * log_post


def model_variance(nu: torch.Tensor, t: Step, sched: NoiseSchedule, clamp: bool = True) -> torch.Tensor:
    """
    Learned variance: exp(nu log beta_t + (1 - nu) log posterior_beta_t).

    With clamp=True posterior_beta is floored at posterior_beta_2 inside the log,
    which makes t = 1 well defined. With clamp=False t = 1 raises
    VarianceDomainError.
    """
    return torch.exp(model_log_variance(nu, t, sched, clamp=clamp))


# ============================================================================
# LOSS
# ============================================================================

class HybridLoss(NamedTuple):
    loss: torch.Tensor
    simple_term: torch.Tensor
    vlb_term: torch.Tensor


def normal_kl(mean1, logvar1, mean2, logvar2) -> torch.Tensor:
    """KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))) in nats, elementwise."""
    tensor = next(x for x in (mean1, logvar1, mean2, logvar2) if isinstance(x, torch.Tensor))
    logvar1, logvar2 = [x if isinstance(x, torch.Tensor) else torch.tensor(x, dtype=tensor.dtype)
                        for x in (logvar1, logvar2)]
    return 0.5 * (
        -1.0 + logvar2 - logvar1
        + torch.exp(logvar1 - logvar2)
        + (mean1 - mean2) ** 2 * torch.exp(-logvar2)
    )


def _approx_standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * torch.pow(x, 3))))


def discretized_gaussian_log_likelihood(x: torch.Tensor, means: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """
    Log-likelihood of 8-bit data rescaled to [-1, 1] under a Gaussian
    discretized into 255 bins (edge bins open-ended).
    """
    _check_same_shape(x, means)
    centered = x - means
    inv_stdv = torch.exp(-log_scales)
    cdf_plus = _approx_standard_normal_cdf(inv_stdv * (centered + 1.0 / 255.0))
    cdf_min = _approx_standard_normal_cdf(inv_stdv * (centered - 1.0 / 255.0))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    cdf_delta = cdf_plus - cdf_min
    return torch.where(
        x < -0.999,
        log_cdf_plus,
        torch.where(x > 0.999, log_one_minus_cdf_min, torch.log(cdf_delta.clamp(min=1e-12))),
    )


def _mean_flat(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=list(range(1, x.dim()))) if x.dim() > 1 else x


def hybrid_loss(
    x0: torch.Tensor,
    eps_true: torch.Tensor,
    t: Step,
    model_output: NoisePrediction,
    sched: NoiseSchedule,
    lambda_vlb: float = LAMBDA_VLB,
    stop_mean_gradient: bool = True,
) -> HybridLoss:
    """
    L = L_simple + lambda_vlb * L_vlb.

    L_simple is the MSE on the noise. L_vlb is KL(q(x_{t-1}|x_t,x0) ||
    p(x_{t-1}|x_t)) with the model mean frozen, and the discretized decoder
    NLL of x0 where t = 1. Terms are batch means in nats.
    """
    _check_same_shape(x0, eps_true, model_output.epsilon, model_output.nu)
    sched.check_step(t)

    x_t = q_sample(x0, t, eps_true, sched)
    simple = _mean_flat((eps_true - model_output.epsilon) ** 2)

    eps_for_mean = model_output.epsilon.detach() if stop_mean_gradient else model_output.epsilon
    model_mean, _ = posterior_mean_variance(x_t, eps_for_mean, t, sched)
    model_logvar = model_log_variance(model_output.nu, t, sched)
    true_mean, true_logvar = posterior_q_mean_variance(x0, x_t, t, sched)

    kl = _mean_flat(normal_kl(true_mean, true_logvar, model_mean, model_logvar))
    decoder_nll = -_mean_flat(discretized_gaussian_log_likelihood(x0, model_mean, 0.5 * model_logvar))

    if isinstance(t, torch.Tensor):
        first = (t.to(kl.device) == 1)
        vlb = torch.where(first, decoder_nll, kl)
    else:
        vlb = decoder_nll if int(t) == 1 else kl

    simple_term = simple.mean()
    vlb_term = vlb.mean()
    return HybridLoss(simple_term + lambda_vlb * vlb_term, simple_term, vlb_term)


# ============================================================================
# SAMPLERS
# ============================================================================

def ddpm_step(
    x_t: torch.Tensor,
    t: int,
    prediction: NoisePrediction,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """x_{t-1} = posterior mean + sqrt(Sigma_theta) * noise; noise forced to 0 at t = 1."""
    _check_same_shape(x_t, noise, prediction.epsilon, prediction.nu)
    mean, _ = posterior_mean_variance(x_t, prediction.epsilon, t, sched)
    if int(t) == 1:
        return mean
    variance = model_variance(prediction.nu, t, sched)
    return mean + torch.sqrt(variance) * noise


def ddpm_sample_loop(
    denoise_fn: Callable[[torch.Tensor, int], NoisePrediction],
    sched: NoiseSchedule,
    x_T: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Ancestral sampling over every step T..1; noise drawn from `generator`."""
    x = x_T
    for t in range(sched.num_steps, 0, -1):
        prediction = denoise_fn(x, t)
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device='cpu').to(x.device)
        x = ddpm_step(x, t, prediction, noise, sched)
    return x


def ddim_timesteps(T: int, num_inference_steps: int) -> List[int]:
    """Descending uniform stride that starts at T and ends at 1."""
    if num_inference_steps < 1 or num_inference_steps > T:
        raise StrideError(f"num_inference_steps must be in [1, {T}], got {num_inference_steps}")
    if num_inference_steps == 1:
        return [int(T)]
    steps = np.round(np.linspace(1, T, num_inference_steps)).astype(int)
    return [int(s) for s in steps[::-1]]


def ddim_sample_loop(
    denoise_fn: Callable[[torch.Tensor, int], NoisePrediction],
    sched: NoiseSchedule,
    num_inference_steps: int,
    x_T: torch.Tensor,
    clip_denoised: bool = True,
) -> torch.Tensor:
    """
    Deterministic DDIM (no added noise). Returns the predicted x0 of the
    last selected step.
    """
    steps = ddim_timesteps(sched.num_steps, num_inference_steps)
    x = x_T
    x0_hat = x_T
    for i, t in enumerate(steps):
        eps = denoise_fn(x, t).epsilon
        x0_hat = predict_x0(x, t, eps, sched)
        if clip_denoised:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        if i == len(steps) - 1:
            break
        t_next = steps[i + 1]
        sqrt_ab_next = _extract(np.sqrt(sched.alpha_bars), t_next, x)
        sqrt_one_minus_next = _extract(np.sqrt(1.0 - sched.alpha_bars), t_next, x)
        x = sqrt_ab_next * x0_hat + sqrt_one_minus_next * eps
    return x0_hat
