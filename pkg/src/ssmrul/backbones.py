"""Encoder -> sequence backbone -> decoder models with quantile conditioning.

Each backbone block is pre-norm residual::

    h = h + dropout(mix(act(layer(norm(h)))))

where ``mix`` is a position-wise H -> H linear map for the SISO SSMs (S4, S4D),
which otherwise never combine channels, and absent for S5 and LSTM.

Mult-Add accounting (one window of length L, batch 1):

=====================  =========================================================
affine in -> out       in * out * L
LSTM (input i, hid h)  4 * L * (h*h + h*i)
SISO SSM, FFT mode     3 * L' * log2(L') * H + L' * H   (L' = FFT size)
                       + L * H for the feedthrough D
S5, scan mode          2 * L * N * H (input/output projections) + L * N (state
                       update) + L * H (feedthrough)
=====================  =========================================================

Normalisation, activations, the output softplus and the quantile factor are
elementwise and not counted; kernel generation depends only on parameters and
is not counted either.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .fft import conv_fft_size
from .ssm import conv_forward, discretize, init_ssm, materialize_kernel, s5_scan
from .tensor import Tensor

BACKBONES = ("s4", "s4d", "s5", "lstm")
CONDITIONING = ("concat", "multiplicative", "multiplicative_raw", "learned")


@dataclass
class ModelConfig:
    backbone: str = "s4"
    input_features: int = 24
    latent_dim: int = 64
    state_dim: int = 16
    layers: int = 2
    window_len: int = 100
    dropout: float = 0.0
    conditioning: str = "concat"
    activation: str = "gelu"
    norm: str = "layernorm"
    seed: int = 0
    discretization: str | None = None  # default: bilinear for s4, zoh otherwise
    s5_mode: str = "scan"
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"unknown conditioning {self.conditioning!r}; expected one of {CONDITIONING}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm not in ("layernorm", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.s5_mode not in ("scan", "conv"):
            raise ValueError(f"unknown s5_mode {self.s5_mode!r}")
        for name in ("input_features", "latent_dim", "state_dim", "layers", "window_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def method(self) -> str:
        if self.discretization:
            return self.discretization
        return "bilinear" if self.backbone == "s4" else "zoh"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias_init: float | None = None):
        bound = 1.0 / math.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.W = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        b = rng.uniform(-bound, bound, n_out) if bias_init is None else np.full(n_out, bias_init)
        self.b = Tensor(b, requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def mult_adds(self, L: int) -> int:
        return self.n_in * self.n_out * L


class LayerNorm:
    eps = 1e-5

    def __init__(self, H: int):
        self.gamma = Tensor(np.ones(H), requires_grad=True)
        self.beta = Tensor(np.zeros(H), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.gamma + self.beta


class SsmLayer:
    def __init__(self, rng: np.random.Generator, variant: str, N: int, H: int, method: str, s5_mode: str, dt_min: float, dt_max: float):
        self.variant, self.N, self.H = variant, N, H
        self.method, self.s5_mode = method, s5_mode
        self.ssm = init_ssm(variant, N, H, rng, dt_min, dt_max)

    def params(self) -> dict[str, Tensor]:
        return dict(self.ssm.params)

    def __call__(self, u: Tensor) -> Tensor:
        d = discretize(self.ssm, self.method)
        if self.variant == "S5" and self.s5_mode == "scan":
            return s5_scan(d, u)
        return conv_forward(materialize_kernel(d, u.shape[1]), u, d.D)

    def mult_adds(self, L: int) -> int:
        H, N = self.H, self.N
        if self.variant == "S5" and self.s5_mode == "scan":
            return 2 * L * N * H + L * N + L * H
        n = conv_fft_size(L)
        channels = H * H if self.variant == "S5" else H
        return 3 * n * int(math.log2(n)) * channels + n * channels + L * H


class LstmLayer:
    """Single-bias LSTM: gates = x W_ih + h W_hh + b, gate order (i, f, g, o)."""

    def __init__(self, rng: np.random.Generator, n_in: int, H: int):
        self.n_in, self.H = n_in, H
        bound = 1.0 / math.sqrt(H)
        self.W_ih = Tensor(rng.uniform(-bound, bound, (n_in, 4 * H)), requires_grad=True)
        self.W_hh = Tensor(rng.uniform(-bound, bound, (H, 4 * H)), requires_grad=True)
        b = rng.uniform(-bound, bound, 4 * H)
        b[H : 2 * H] += 1.0  # forget gate starts open
        self.b = Tensor(b, requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"W_ih": self.W_ih, "W_hh": self.W_hh, "b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        H = self.H
        xs = x @ self.W_ih + self.b
        h = T.zeros((B, H))
        c = T.zeros((B, H))
        outs = []
        for t in range(L):
            z = xs[:, t] + h @ self.W_hh
            i = T.sigmoid(z[:, :H])
            f = T.sigmoid(z[:, H : 2 * H])
            g = T.tanh(z[:, 2 * H : 3 * H])
            o = T.sigmoid(z[:, 3 * H :])
            c = f * c + i * g
            h = o * T.tanh(c)
            outs.append(h)
        return T.stack(outs, axis=1)

    def mult_adds(self, L: int) -> int:
        return 4 * L * (self.H * self.H + self.H * self.n_in)


class Block:
    def __init__(self, layer, norm: LayerNorm | None, mix: Linear | None, activation: str, dropout: float):
        self.layer, self.norm, self.mix = layer, norm, mix
        self.activation, self.dropout = activation, dropout

    def params(self) -> dict[str, Tensor]:
        out = {}
        if self.norm is not None:
            out.update({f"norm.{k}": v for k, v in self.norm.params().items()})
        kind = "lstm" if isinstance(self.layer, LstmLayer) else "ssm"
        out.update({f"{kind}.{k}": v for k, v in self.layer.params().items()})
        if self.mix is not None:
            out.update({f"mix.{k}": v for k, v in self.mix.params().items()})
        return out

    def __call__(self, h: Tensor, rng: np.random.Generator | None) -> Tensor:
        z = self.norm(h) if self.norm is not None else h
        z = self.layer(z)
        z = T.gelu(z) if self.activation == "gelu" else T.relu(z)
        if self.mix is not None:
            z = self.mix(z)
        if rng is not None and self.dropout > 0:
            keep = rng.random(z.shape) >= self.dropout
            z = z * (keep / (1.0 - self.dropout))
        return h + z


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        H = cfg.latent_dim
        n_in = cfg.input_features + (1 if cfg.conditioning == "concat" else 0)
        self.encoder = Linear(rng, n_in, H)
        self.blocks: list[Block] = []
        for _ in range(cfg.layers):
            norm = LayerNorm(H) if cfg.norm == "layernorm" else None
            mix = None
            if cfg.backbone == "lstm":
                layer = LstmLayer(rng, H, H)
            else:
                variant = {"s4": "S4", "s4d": "S4D", "s5": "S5"}[cfg.backbone]
                layer = SsmLayer(rng, variant, cfg.state_dim, H, cfg.method, cfg.s5_mode, cfg.dt_min, cfg.dt_max)
                if variant != "S5":
                    mix = Linear(rng, H, H)
            self.blocks.append(Block(layer, norm, mix, cfg.activation, cfg.dropout))
        self.decoder = Linear(rng, H, 1)
        self.cond_a = Tensor(np.zeros(1), requires_grad=True) if cfg.conditioning == "learned" else None

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.params().items()})
        out.update({f"decoder.{k}": v for k, v in self.decoder.params().items()})
        if self.cond_a is not None:
            out["cond.a"] = self.cond_a
        return out

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(values) != set(params):
            missing = sorted(set(params) - set(values))
            extra = sorted(set(values) - set(params))
            raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{name}: shape {v.shape} != {p.shape}")
            arr = v.copy()
            arr.flags.writeable = False
            p.data = arr

    def base(self, windows, tau=None, rng: np.random.Generator | None = None) -> Tensor:
        """Nonnegative per-timestep prediction before any multiplicative factor."""
        x = np.asarray(windows.data if isinstance(windows, Tensor) else windows, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.cfg.input_features:
            raise T.ShapeError(f"expected windows (B, L, {self.cfg.input_features}), got {x.shape}")
        B, L, _ = x.shape
        if self.cfg.conditioning == "concat":
            if tau is None:
                raise ValueError("concat conditioning needs tau")
            x = np.concatenate([x, np.broadcast_to(np.asarray(tau, dtype=np.float64)[:, None, None], (B, L, 1))], axis=-1)
        h = self.encoder(Tensor(x))
        for blk in self.blocks:
            h = blk(h, rng)
        return T.softplus(self.decoder(h).reshape(B, L))

    def __call__(self, windows, tau, rng: np.random.Generator | None = None) -> Tensor:
        return forward(self, windows, tau, rng)


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def forward(m: Model, windows, tau, rng: np.random.Generator | None = None) -> Tensor:
    """(B, L, F) windows and (B,) quantile levels -> (B, L) RUL estimates.

    ``rng`` enables dropout (training); pass None for deterministic inference.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if np.any(tau <= 0) or np.any(tau >= 1):
        raise ValueError(f"quantile levels must lie in (0, 1), got {tau}")
    B = np.shape(windows.data if isinstance(windows, Tensor) else windows)[0]
    if tau.shape == (1,) and B != 1:
        tau = np.full(B, tau[0])
    if tau.shape != (B,):
        raise T.ShapeError(f"need one quantile level per window: {tau.shape} vs batch {B}")
    out = m.base(windows, tau, rng)
    mode = m.cfg.conditioning
    if mode == "concat":
        return out
    if mode == "multiplicative":
        factor = Tensor(2.0 * tau)
    elif mode == "multiplicative_raw":
        factor = Tensor(tau)
    else:
        factor = (2.0 * tau) * T.exp(m.cond_a * (tau - 0.5))
    return out * factor.reshape(B, 1)


def count_params(m: Model) -> int:
    return int(sum(p.size for p in m.parameters().values()))


def mult_adds_breakdown(m: Model, L: int) -> dict[str, int]:
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    out = {"encoder": m.encoder.mult_adds(L)}
    for i, blk in enumerate(m.blocks):
        kind = "lstm" if isinstance(blk.layer, LstmLayer) else "ssm"
        out[f"blocks.{i}.{kind}"] = blk.layer.mult_adds(L)
        if blk.mix is not None:
            out[f"blocks.{i}.mix"] = blk.mix.mult_adds(L)
    out["decoder"] = m.decoder.mult_adds(L)
    return out


def count_mult_adds(m: Model, L: int | None = None) -> int:
    return int(sum(mult_adds_breakdown(m, m.cfg.window_len if L is None else L).values()))
