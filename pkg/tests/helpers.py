"""Shared oracles for the test suite."""

import numpy as np

from ssmrul import tensor as T
from ssmrul.backbones import Model, ModelConfig, build_model
from ssmrul.sqr import masked_objective

SMALL = dict(input_features=5, latent_dim=8, state_dim=4, layers=2, window_len=16)


def small_model(backbone: str, seed: int = 0, **kw) -> Model:
    return build_model(ModelConfig(backbone=backbone, seed=seed, **{**SMALL, **kw}))


def random_batch(model: Model, seed: int, B: int = 2):
    rng = np.random.default_rng(seed + 1000)
    L, F = model.cfg.window_len, model.cfg.input_features
    x = rng.normal(size=(B, L, F))
    y = rng.uniform(0.0, 2.0, size=(B, L))
    mask = np.ones((B, L))
    mask[-1, L // 2 :] = 0.0  # one padded tail
    taus = rng.uniform(0.1, 0.9, B)
    return x, y, mask, taus


def model_gradient_error(model: Model, batch, eps: float = 1e-5) -> tuple[float, str]:
    """Worst relative error over every parameter scalar of the masked SQR loss.

    Analytic gradients come from one reverse pass; numeric ones from central
    differences with relative error |a - n| / max(|a|, |n|, 1e-8).
    """
    x, y, mask, taus = batch
    params = model.parameters()
    for p in params.values():
        p.grad = None
    T.backward(masked_objective(y, mask, model(x, taus), taus))
    base = {k: p.data.copy() for k, p in params.items()}
    analytic = {k: np.zeros(p.shape) if p.grad is None else p.grad.copy() for k, p in params.items()}

    def loss_at(values):
        model.load_parameters(values)
        with T.no_grad():
            return masked_objective(y, mask, model(x, taus), taus).item()

    worst, where = 0.0, ""
    for name, arr in base.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            vals = dict(base)
            hi, lo = flat.copy(), flat.copy()
            hi[i] += eps
            lo[i] -= eps
            vals[name] = hi.reshape(arr.shape)
            f_hi = loss_at(vals)
            vals[name] = lo.reshape(arr.shape)
            f_lo = loss_at(vals)
            num = (f_hi - f_lo) / (2 * eps)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if err > worst:
                worst, where = err, f"{name}[{i}]"
    model.load_parameters(base)
    return worst, where
