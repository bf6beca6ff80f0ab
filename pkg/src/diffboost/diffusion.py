"""Forward/reverse mathematics of the denoising diffusion chain.

The forward process destroys an image x0 over T steps,

    q(x_t | x_{t-1}) = N(x_t; sqrt(1 - beta_t) x_{t-1}, beta_t I),

which has the closed-form marginal

    x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps,   eps ~ N(0, I),

with abar_t the cumulative product of alpha_t = 1 - beta_t (abar_0 = 1 by
convention; steps are 1-based). The reverse chain is parameterized through a
noise predictor: given eps_hat the step mean is

    mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)

and the step variance is fixed at the forward posterior variance
betatilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t (zero at t = 1, where
the chain emits the mean).

Everything here is plain numpy and pure given an explicit Generator; neural
networks only enter through the ``denoiser`` callables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError

INTERNAL_MIN, INTERNAL_MAX = -1.0, 1.0

# Bin width of the discretized decoder likelihood: 256 gray levels over [-1, 1].
DECODER_BIN_WIDTH = 2.0 / 255.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: betas for steps 1..T plus derived alpha products."""

    betas: np.ndarray        # (T,), betas[i] is beta_{i+1}
    alphas: np.ndarray       # (T,), 1 - betas
    alpha_bars: np.ndarray   # (T+1,), alpha_bars[t] = prod_{s<=t} alpha_s, alpha_bars[0] = 1

    @property
    def steps(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise ValueError(f"step index {t} outside [0, {self.steps}]")
        return float(self.alpha_bars[t])

    def posterior_variance(self, t: int) -> float:
        """betatilde_t; exactly 0 at t = 1 because abar_0 = 1."""
        self._check_step(t)
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ValueError(f"step index {t} outside [1, {self.steps}]")

    def spec(self) -> dict:
        """Parameters sufficient to rebuild the schedule bit-identically."""
        return {
            "steps": self.steps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def make_linear_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated betas from beta_start to beta_end inclusive."""
    if steps < 1:
        raise ConfigError(f"need at least one step, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def schedule_from_spec(spec: dict) -> NoiseSchedule:
    return make_linear_schedule(int(spec["steps"]), float(spec["beta_start"]), float(spec["beta_end"]))


@dataclass(frozen=True)
class NoisySample:
    """One draw of the forward marginal at step t (x0 and values in [-1, 1])."""

    x0: np.ndarray
    t: int
    epsilon: np.ndarray
    xt: np.ndarray


@dataclass(frozen=True)
class ReverseStepParams:
    mu: np.ndarray
    sigma2: float


@dataclass(frozen=True)
class LossReport:
    simple_loss: Optional[float] = None
    vlb_terms: Optional[list] = None   # [L_0, L_1, ..., L_T], length T+1


def _check_same_shape(name_a: str, a: np.ndarray, name_b: str, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{name_a} shape {np.shape(a)} != {name_b} shape {np.shape(b)}")


def to_internal(x01: np.ndarray) -> np.ndarray:
    """Map external [0, 1] pixel values to the internal [-1, 1] range."""
    return 2.0 * np.asarray(x01) - 1.0


def to_external(xpm: np.ndarray) -> np.ndarray:
    """Map internal [-1, 1] values back to external [0, 1]."""
    return (np.asarray(xpm) + 1.0) / 2.0


def q_sample(x0: np.ndarray, t: int, epsilon: np.ndarray, schedule: NoiseSchedule) -> NoisySample:
    """Draw x_t from the closed-form forward marginal given x0 and eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    _check_same_shape("x0", x0, "epsilon", epsilon)
    schedule._check_step(t)
    if x0.size and (x0.min() < INTERNAL_MIN - 1e-9 or x0.max() > INTERNAL_MAX + 1e-9):
        raise ValueError("x0 values must lie in [-1, 1] (internal range)")
    ab = schedule.alpha_bar(t)
    xt = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * epsilon
    return NoisySample(x0=x0, t=t, epsilon=epsilon, xt=xt)


def posterior_mean_variance(
    xt: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule
) -> ReverseStepParams:
    """Reverse-step mean from the predicted noise, with the fixed posterior variance."""
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_same_shape("xt", xt, "eps_hat", eps_hat)
    schedule._check_step(t)
    a = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    mu = (xt - schedule.beta(t) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    return ReverseStepParams(mu=mu, sigma2=schedule.posterior_variance(t))


def true_posterior_mean(x0: np.ndarray, xt: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form mean of q(x_{t-1} | x_t, x_0); independent check for the eps route."""
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    schedule._check_step(t)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    coef0 = math.sqrt(ab_prev) * schedule.beta(t) / (1.0 - ab_t)
    coeft = math.sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab_t)
    return coef0 * x0 + coeft * xt


def reverse_step(
    xt: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample x_{t-1} ~ N(mu, sigma2 I); at t = 1 the mean is returned directly."""
    params = posterior_mean_variance(xt, t, eps_hat, schedule)
    if params.sigma2 == 0.0:
        return params.mu
    z = rng.standard_normal(np.shape(xt))
    return params.mu + math.sqrt(params.sigma2) * z


def ancestral_sample(
    denoiser: Callable[[np.ndarray, int, object], np.ndarray],
    conditioning: object,
    schedule: NoiseSchedule,
    shape: tuple,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run the full reverse chain from pure noise; returns an image in [0, 1].

    ``denoiser(xt, t, conditioning)`` must return a noise prediction with the
    same shape as ``xt``. ``shape`` may carry a leading batch axis; the
    conditioning object is passed through untouched.
    """
    xt = rng.standard_normal(shape)
    for t in range(schedule.steps, 0, -1):
        eps_hat = np.asarray(denoiser(xt, t, conditioning), dtype=np.float64)
        if eps_hat.shape != xt.shape:
            raise ValueError(
                f"denoiser returned shape {eps_hat.shape}, expected {xt.shape}"
            )
        xt = reverse_step(xt, t, eps_hat, schedule, rng)
    return to_external(np.clip(xt, INTERNAL_MIN, INTERNAL_MAX))


def simple_loss(epsilon: np.ndarray, eps_hat: np.ndarray) -> LossReport:
    """Mean squared error between true and predicted noise."""
    epsilon = np.asarray(epsilon, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_same_shape("epsilon", epsilon, "eps_hat", eps_hat)
    return LossReport(simple_loss=float(np.mean((epsilon - eps_hat) ** 2)))


def _gaussian_kl_to_standard(mu: np.ndarray, var: float) -> float:
    """KL( N(mu, var I) || N(0, I) ) summed over components."""
    return float(0.5 * np.sum(mu**2 + var - 1.0 - math.log(var)))


def _discretized_gaussian_nll(x0: np.ndarray, mu: np.ndarray, var: float) -> float:
    """Negative log-likelihood of x0 under a Gaussian discretized to gray-level bins.

    Bins are DECODER_BIN_WIDTH wide and open at the ends of [-1, 1], so the
    bin probability never exceeds 1 and the term is nonnegative.
    """
    sigma = math.sqrt(var)
    half = DECODER_BIN_WIDTH / 2.0
    upper = ndtr((x0 + half - mu) / sigma)
    lower = ndtr((x0 - half - mu) / sigma)
    prob = np.where(
        x0 >= INTERNAL_MAX - half,
        1.0 - lower,
        np.where(x0 <= INTERNAL_MIN + half, upper, upper - lower),
    )
    return float(-np.sum(np.log(np.maximum(prob, 1e-300))))


def vlb_diagnostics(
    x0: np.ndarray,
    noises: Sequence[np.ndarray],
    denoiser: Callable[[np.ndarray, int], np.ndarray],
    schedule: NoiseSchedule,
) -> LossReport:
    """Single-draw variational-bound terms [L_0, ..., L_T]; diagnostic only.

    ``noises[t-1]`` is the draw used to form x_t. L_T compares the terminal
    marginal to the prior, each L_{t-1} is the KL between the forward posterior
    and the model step (both with variance betatilde_t), and L_0 is the
    discretized decoder likelihood at x_0. Because betatilde_1 = 0, the L_0
    density uses betatilde_2 (clamped to beta_1 when T = 1).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    T = schedule.steps
    if len(noises) != T:
        raise ValueError(f"need {T} noise draws, got {len(noises)}")

    terms = np.zeros(T + 1)
    ab_T = schedule.alpha_bar(T)
    terms[T] = _gaussian_kl_to_standard(math.sqrt(ab_T) * x0, 1.0 - ab_T)

    for t in range(T, 1, -1):
        xt = q_sample(x0, t, noises[t - 1], schedule).xt
        eps_hat = np.asarray(denoiser(xt, t), dtype=np.float64)
        mu_model = posterior_mean_variance(xt, t, eps_hat, schedule).mu
        mu_true = true_posterior_mean(x0, xt, t, schedule)
        var = schedule.posterior_variance(t)
        terms[t - 1] = float(np.sum((mu_true - mu_model) ** 2) / (2.0 * var))

    x1 = q_sample(x0, 1, noises[0], schedule).xt
    eps_hat = np.asarray(denoiser(x1, 1), dtype=np.float64)
    mu_model = posterior_mean_variance(x1, 1, eps_hat, schedule).mu
    decoder_var = schedule.posterior_variance(2) if T >= 2 else schedule.beta(1)
    terms[0] = _discretized_gaussian_nll(x0, mu_model, decoder_var)

    return LossReport(vlb_terms=[float(v) for v in terms])
