"""Diagonal Gaussians and the tanh-squashed policy distribution.

All operations are built from tape ops so gradients flow to the
distribution parameters. Batched means/log-variances have shape
(..., d); log-probabilities and KLs sum over the final axis.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

LOG_2PI = math.log(2.0 * math.pi)


class DiagGaussian:
    """Gaussian with diagonal covariance, parameterized by mean and log-variance."""

    def __init__(self, mean, log_var=None):
        self.mean = as_tensor(mean)
        if log_var is None:
            log_var = Tensor(np.zeros(self.mean.shape))
        self.log_var = as_tensor(log_var)
        if self.log_var.shape != self.mean.shape:
            raise T.DimensionError(
                f"DiagGaussian: log_var shape {self.log_var.shape} != mean {self.mean.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, z) -> Tensor:
        """Sum_i [ -0.5 ln(2 pi var_i) - (z_i - mu_i)^2 / (2 var_i) ]."""
        z = as_tensor(z)
        diff = T.square(T.sub(z, self.mean))
        inv_var = T.exp(T.mul(self.log_var, -1.0))
        per_dim = T.add(self.log_var, T.mul(diff, inv_var))
        return T.mul(T.add(T.sum(per_dim, axis=-1), self.dim * LOG_2PI), -0.5)

    def rsample(self, noise) -> Tensor:
        """mu + sigma * noise, differentiable w.r.t. mean and log-variance."""
        noise = as_tensor(noise)
        if noise.shape != self.mean.shape:
            raise T.DimensionError(
                f"rsample: noise shape {noise.shape} != mean {self.mean.shape}")
        sigma = T.exp(T.mul(self.log_var, 0.5))
        return T.add(self.mean, T.mul(sigma, noise))


def kl_divergence(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """Closed-form KL(p || q), summed over the final axis."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise T.DimensionError(
            f"kl_divergence: dims {p.mean.shape[-1]} != {q.mean.shape[-1]}")
    var_ratio = T.exp(T.sub(p.log_var, q.log_var))
    diff = T.square(T.sub(q.mean, p.mean))
    scaled_diff = T.mul(diff, T.exp(T.mul(q.log_var, -1.0)))
    per_dim = T.add(T.add(var_ratio, scaled_diff),
                    T.sub(q.log_var, T.add(p.log_var, 1.0)))
    return T.mul(T.sum(per_dim, axis=-1), 0.5)


class TanhGaussian:
    """Gaussian squashed through tanh onto per-dimension action bounds."""

    def __init__(self, mean, log_var, low, high):
        self.base = DiagGaussian(mean, log_var)
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        if not (np.all(np.isfinite(self.low)) and np.all(np.isfinite(self.high))):
            raise ValueError("TanhGaussian: bounds must be finite")
        self.scale = (self.high - self.low) / 2.0
        self.center = (self.high + self.low) / 2.0

    def _squash(self, pre: Tensor) -> Tensor:
        return T.add(T.mul(T.tanh(pre), self.scale), self.center)

    def _log_det(self, pre: Tensor) -> Tensor:
        # ln(scale * (1 - tanh(x)^2)) = ln(scale) + 2 (ln 2 - x - softplus(-2x)),
        # the numerically stable form.
        two_x = T.mul(pre, 2.0)
        stable = T.mul(T.sub(T.sub(math.log(2.0), pre), T.softplus(T.mul(two_x, -1.0))), 2.0)
        return T.add(stable, np.log(self.scale))

    def sample_with_log_prob(self, noise) -> tuple[Tensor, Tensor]:
        """Reparameterized action and its log-density under the squashed policy."""
        pre = self.base.rsample(noise)
        action = self._squash(pre)
        log_prob = T.sub(self.base.log_prob(pre), T.sum(self._log_det(pre), axis=-1))
        return action, log_prob

    def mode(self) -> Tensor:
        """Deterministic action used by the evaluation policy."""
        return self._squash(self.base.mean)
