"""Pinball loss and the masked Simultaneous Quantile Regression objective."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _check_tau(tau) -> None:
    t = np.asarray(tau)
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError(f"quantile levels must lie in (0, 1), got {tau}")


def pinball(y: float, yhat: float, tau: float) -> float:
    _check_tau(tau)
    if y >= yhat:
        return tau * (y - yhat)
    return (1.0 - tau) * (yhat - y)


def pinball_tensor(y, yhat: Tensor, tau) -> Tensor:
    """Elementwise pinball loss; ``tau`` broadcasts against ``yhat``.

    At ``y == yhat`` the value is 0 on either branch; the gradient is taken from
    the overestimate branch so it is ``1 - tau`` with respect to ``yhat``.
    """
    y = T.as_tensor(y)
    yhat = T.as_tensor(yhat)
    tau = T.as_tensor(tau)
    _check_tau(tau.data)
    diff = y - yhat
    under = diff.data > 0
    return T.where(under, tau * diff, (1.0 - tau) * (-diff))


def masked_objective(y, mask, yhat: Tensor, taus) -> Tensor:
    """Mean pinball loss over entries with ``mask == 1``; row ``i`` uses ``taus[i]``."""
    y = T.as_tensor(y)
    yhat = T.as_tensor(yhat)
    mask = np.asarray(mask, dtype=np.float64)
    taus = T.as_tensor(taus)
    if y.shape != yhat.shape or mask.shape != yhat.shape:
        raise T.ShapeError(f"targets {y.shape}, mask {mask.shape} and predictions {yhat.shape} must agree")
    if taus.shape != yhat.shape[:1]:
        raise T.ShapeError(f"need one quantile per row: taus {taus.shape} vs predictions {yhat.shape}")
    count = mask.sum()
    if count == 0:
        raise ValueError("every entry of the batch is masked")
    losses = pinball_tensor(y, yhat, taus.reshape(-1, *([1] * (yhat.ndim - 1))))
    return (losses * mask).sum() * (1.0 / count)


def sample_taus(rng: np.random.Generator, lo: float, hi: float, B: int) -> np.ndarray:
    if not 0 < lo < hi < 1:
        raise ValueError(f"need 0 < lo < hi < 1, got lo={lo}, hi={hi}")
    return rng.uniform(lo, hi, B)


def empirical_quantile(samples: Sequence[float], tau: float) -> float:
    """inf{y : F(y) >= tau} under the empirical CDF of ``samples``."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    n = s.size
    if n == 0:
        raise ValueError("empirical quantile of an empty sample")
    # smallest rank r (1-based) with r / n >= tau; compare in integers where possible
    r = int(np.ceil(tau * n - 1e-12))
    return float(s[min(max(r, 1), n) - 1])
