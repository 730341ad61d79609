"""Fusing several Gaussian pose predictions into one.

Three strategies are supported:

- the implicit multi-head ensemble of a single network (``fuse_qaerts``),
- explicit deep ensembles of independently trained mean-variance models
  (``de_predict``),
- Monte-Carlo dropout, i.e. repeated stochastic passes of one model
  (``mcd_predict``).

The first one is also what the training loss consumes, so ``fuse_mean`` works
on plain arrays and on autograd tensors alike.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, EnsembleMismatchError, InvalidInputError
from .geom import PlanePose


def fuse_mean(items: Sequence):
    """Arithmetic mean by left-to-right summation; arrays or tensors."""
    if len(items) == 0:
        raise InvalidInputError("nothing to fuse")
    total = items[0]
    for it in items[1:]:
        total = total + it
    return total / float(len(items))


def fuse_qaerts(heads) -> tuple[PlanePose, np.ndarray]:
    """Coordinate-wise mean pose and mean variance of the head predictions."""
    mu = fuse_mean([np.asarray(h.pose, dtype=np.float64).reshape(9) for h in heads])
    var = fuse_mean([np.asarray(h.variance, dtype=np.float64) for h in heads])
    return PlanePose(mu), var


def mixture_moments(means, variances) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of a uniform mixture of Gaussians along axis 0.

    ``var* = mean(var_m + mu_m^2) - mu*^2``, evaluated in the centered form
    ``mean(var_m) + mean((mu_m - mu*)^2)`` to avoid cancellation, clamped at zero.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.shape != variances.shape:
        raise InvalidInputError(f"means {means.shape} and variances {variances.shape} differ")
    if len(means) == 1:
        return means[0].copy(), variances[0].copy()
    mu = means.mean(axis=0)
    var = variances.mean(axis=0) + ((means - mu) ** 2).mean(axis=0)
    return mu, np.maximum(var, 0.0)


def de_predict(models, images) -> tuple[np.ndarray, np.ndarray]:
    """Deep-ensemble moments for a batch of images; rows are images."""
    if len(models) == 0:
        raise InvalidInputError("a deep ensemble needs at least one member")
    first = models[0].config
    for m in models[1:]:
        if m.config != first:
            raise EnsembleMismatchError("ensemble members have different model configs")
    outs = [m.predict_moments(images) for m in models]
    means = np.stack([o[0] for o in outs])
    variances = np.stack([o[1] for o in outs])
    return mixture_moments(means, variances)


def mcd_predict(model, images, passes: int = 5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo dropout moments over ``passes`` stochastic forward passes."""
    rate = model.config.dropout
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"MC dropout needs a rate in (0, 1), got {rate}")
    if passes < 1:
        raise ConfigError("MC dropout needs at least one pass")
    rng = np.random.default_rng(seed)
    means = np.stack([model.predict_moments(images, rng=rng, mc=True)[0] for _ in range(passes)])
    # passes are point masses: a single pass carries no spread
    return mixture_moments(means, np.zeros_like(means))
