"""Scoring rules for pose regression.

All losses take ``(B, 9)`` (or a single ``(9,)``) prediction and target and
return a scalar tensor: summed over the 9 coordinates, averaged over the batch.
Plain arrays are accepted and treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidEvidenceError, InvalidVarianceError


def _batch(x) -> Tensor:
    x = ag.as_tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


def gnll(mu, var, target) -> Tensor:
    """Heteroscedastic Gaussian negative log-likelihood (constant dropped).

    ``sum_coords [ 0.5 * log(var) + (mu - target)^2 / (2 var) ]``, batch mean.
    """
    mu, var = _batch(mu), _batch(var)
    target = _batch(target)
    if np.any(var.data <= 0) or not np.all(np.isfinite(var.data)):
        raise InvalidVarianceError("variances must be positive and finite")
    resid = mu - target
    per = 0.5 * ag.log(var) + resid * resid / (2.0 * var)
    return per.sum(axis=1).mean()


def mse(pred, target) -> Tensor:
    """Mean squared coordinate error per image, averaged over the batch."""
    pred, target = _batch(pred), _batch(target)
    resid = pred - target
    return (resid * resid).mean(axis=1).mean()


@dataclass
class NIGParams:
    """Normal-Inverse-Gamma evidence per coordinate: mean, nu > 0, alpha > 1, beta > 0."""

    gamma: object
    nu: object
    alpha: object
    beta: object

    def validate(self):
        nu, alpha, beta = (np.asarray(ag.as_tensor(v).data) for v in (self.nu, self.alpha, self.beta))
        if np.any(nu <= 0) or np.any(alpha <= 1) or np.any(beta <= 0):
            raise InvalidEvidenceError("NIG evidence needs nu > 0, alpha > 1, beta > 0")

    def aleatoric_variance(self) -> np.ndarray:
        a = ag.as_tensor(self.alpha).data
        return ag.as_tensor(self.beta).data / (a - 1.0)

    def predictive_variance(self) -> np.ndarray:
        nu = ag.as_tensor(self.nu).data
        return self.aleatoric_variance() * (1.0 + nu) / nu


def nig_loss(h: NIGParams, target, lam: float = 0.01) -> Tensor:
    """Evidential regression loss: Student-t NLL plus ``lam * |err| * (2 nu + alpha)``."""
    if not isinstance(h, NIGParams):
        h = NIGParams(*h)
    h.validate()
    gamma, nu, alpha, beta = (_batch(v) for v in (h.gamma, h.nu, h.alpha, h.beta))
    target = _batch(target)
    err = target - gamma
    omega = 2.0 * beta * (1.0 + nu)
    nll = (
        0.5 * ag.log(np.pi / nu)
        - alpha * ag.log(omega)
        + (alpha + 0.5) * ag.log(nu * err * err + omega)
        + ag.lgamma(alpha)
        - ag.lgamma(alpha + 0.5)
    )
    reg = ag.tabs(err) * (2.0 * nu + alpha)
    return (nll + lam * reg).sum(axis=1).mean()
