"""Deterministic SQR training loop, AdamW optimiser and checkpoint container."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbones import Model, ModelConfig, build_model
from .data import (
    Normalizer,
    RunToFailureCycle,
    cap_rul,
    load_cmapss,
    stack_windows,
    synth_generate,
)
from .sqr import masked_objective, sample_taus

log = logging.getLogger(__name__)

EVAL_TAUS = (0.1, 0.25, 0.5, 0.75, 0.9)
# parameters of the SSM transition and step size: own learning rate, no decay
SSM_KERNEL_PARAMS = ("log_neg_lambda_re", "lambda_im", "log_dt")


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" or "cmapss"
    path: str | None = None
    subset: str = "FD001"
    n_units: int = 50
    n_test_units: int = 20
    noise_scale: float = 0.5
    slope_jitter: float = 0.05
    seed: int = 0
    rul_cap: float | None = None

    def validate(self) -> None:
        if self.source not in ("synth", "cmapss"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "cmapss" and not self.path:
            raise ValueError("data.path is required for source 'cmapss'")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    ssm_learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    tau_range: tuple[float, float] = (0.1, 0.9)
    seed: int = 0
    target_scale: float | None = None  # default: max training RUL
    windows_per_epoch: int | None = None  # subsample the shuffled windows
    eval_taus: tuple[float, ...] = EVAL_TAUS
    eval_mode: str = "full"  # "full" signal or "last" observed step

    def validate(self) -> None:
        self.model.validate()
        self.data.validate()
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        lo, hi = self.tau_range
        if not 0 < lo < hi < 1:
            raise ValueError(f"tau_range must satisfy 0 < lo < hi < 1, got {self.tau_range}")
        if self.eval_mode not in ("full", "last"):
            raise ValueError(f"unknown eval_mode {self.eval_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        data_d = d.pop("data", {})
        unknown = set(data_d) - {f.name for f in fields(DataConfig)}
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        for key in ("tau_range", "eval_taus"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(model=model, data=DataConfig(**data_d), **d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau_range"] = list(self.tau_range)
        d["eval_taus"] = list(self.eval_taus)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed))


def load_dataset(cfg: DataConfig) -> tuple[list[RunToFailureCycle], list[RunToFailureCycle]]:
    cfg.validate()
    if cfg.source == "synth":
        return synth_generate(cfg.n_units, cfg.noise_scale, cfg.seed, cfg.n_test_units, slope_jitter=cfg.slope_jitter)
    return load_cmapss(cfg.path, cfg.subset)


# ---------------------------------------------------------------------------
# optimiser


class AdamW:
    """Adam with decoupled weight decay and per-group learning rates."""

    def __init__(self, named_params: dict[str, T.Tensor], groups: dict[str, dict], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = named_params
        self.groups = groups  # name -> {"lr": float, "weight_decay": float}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in named_params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in named_params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(p.grad**2) for p in self.params.values() if p.grad is not None)))

    def clip(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            s = max_norm / (norm + 1e-12)
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * s
        return norm

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = np.zeros(p.shape) if p.grad is None else p.grad
            hp = self.groups[name]
            lr, wd = hp["lr"], hp["weight_decay"]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            new = p.data * (1.0 - lr * wd) - lr * update
            new.flags.writeable = False
            p.data = new


def param_groups(named: dict[str, T.Tensor], cfg: TrainConfig) -> dict[str, dict]:
    out = {}
    for name in named:
        if name.rsplit(".", 1)[-1] in SSM_KERNEL_PARAMS:
            out[name] = {"lr": cfg.ssm_learning_rate, "weight_decay": 0.0}
        else:
            out[name] = {"lr": cfg.learning_rate, "weight_decay": cfg.weight_decay}
    return out


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SSMRULCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    normalizer: Normalizer
    target_scale: float
    rng_state: dict
    steps: int = 0

    def model(self) -> Model:
        m = build_model(self.config.model)
        m.load_parameters(self.params)
        return m

    def to_bytes(self) -> bytes:
        index = []
        blobs = []
        offset = 0
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            blobs.append(arr.tobytes())
            offset += arr.size
        header = {
            "config": self.config.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "target_scale": self.target_scale,
            "rng_state": self.rng_state,
            "steps": self.steps,
            "params": index,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[: len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", buf, pos)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos += struct.calcsize("<IQ")
        header = json.loads(buf[pos : pos + hlen].decode())
        pos += hlen
        data = np.frombuffer(buf, dtype="<f8", offset=pos)
        params = {}
        for e in header["params"]:
            params[e["name"]] = data[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        return cls(
            TrainConfig.from_dict(header["config"]),
            params,
            Normalizer.from_dict(header["normalizer"]),
            header["target_scale"],
            header["rng_state"],
            header["steps"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


def train_targets(cycles, cap: float | None) -> list[np.ndarray]:
    return [c.rul if cap is None else cap_rul(c, cap) for c in cycles]


def train(cfg: TrainConfig, train_cycles: list[RunToFailureCycle] | None = None) -> tuple[Checkpoint, dict]:
    """Minimise the masked SQR objective. Returns the final checkpoint and loss history."""
    cfg.validate()
    if train_cycles is None:
        train_cycles, _ = load_dataset(cfg.data)
    F = train_cycles[0].features.shape[1]
    if F != cfg.model.input_features:
        raise ValueError(f"data has {F} features, model expects {cfg.model.input_features}")
    rng = np.random.default_rng(cfg.seed)
    norm = Normalizer.fit(train_cycles)
    targets = train_targets(train_cycles, cfg.data.rul_cap)
    scale = cfg.target_scale or float(max(t.max() for t in targets))
    windows = stack_windows([norm.apply_cycle(c) for c in train_cycles], cfg.model.window_len, targets)
    ys = windows.y / scale

    model = build_model(cfg.model)
    params = model.parameters()
    opt = AdamW(params, param_groups(params, cfg), cfg.beta1, cfg.beta2, cfg.eps)
    use_dropout = cfg.model.dropout > 0
    lo, hi = cfg.tau_range
    history: dict[str, list[float]] = {"loss": [], "step_loss": []}

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        if cfg.windows_per_epoch is not None:
            order = order[: cfg.windows_per_epoch]
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            taus = sample_taus(rng, lo, hi, len(idx))
            out = model(windows.x[idx], taus, rng if use_dropout else None)
            loss = masked_objective(ys[idx], windows.mask[idx], out, taus)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(epoch, b, value)
            opt.zero_grad()
            T.backward(loss)
            if cfg.grad_clip is not None:
                opt.clip(cfg.grad_clip)
            opt.step()
            losses.append(value)
            history["step_loss"].append(value)
        history["loss"].append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, history["loss"][-1])

    ckpt = Checkpoint(
        config=cfg,
        params={k: p.data.copy() for k, p in params.items()},
        normalizer=norm,
        target_scale=scale,
        rng_state=rng.bit_generator.state,
        steps=opt.t,
    )
    return ckpt, history
