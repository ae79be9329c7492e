"""C-MAPSS ingestion, linear RUL labels, normalisation, windowing and synthetic data."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

N_COLUMNS = 26
N_FEATURES = 24  # 3 operating settings + 21 sensors
COLUMN_NAMES = ["unit", "cycle", "setting1", "setting2", "setting3"] + [f"s{i}" for i in range(1, 22)]
STD_FLOOR = 1e-8


class FormatError(ValueError):
    pass


@dataclass
class RunToFailureCycle:
    unit_id: int
    features: np.ndarray  # (T, F)
    rul: np.ndarray  # (T,) cycles
    truncated: bool = False

    @property
    def T(self) -> int:
        return len(self.rul)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.rul = np.asarray(self.rul, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.rul.shape[0]:
            raise ValueError(f"unit {self.unit_id}: features {self.features.shape} vs rul {self.rul.shape}")
        if self.T > 1 and not np.all(np.diff(self.rul) == -1):
            raise ValueError(f"unit {self.unit_id}: RUL must fall by exactly one per step")
        if not self.truncated and self.T and self.rul[-1] != 0:
            raise ValueError(f"unit {self.unit_id}: complete cycle must end at RUL 0")


@dataclass
class WindowedSample:
    x: np.ndarray  # (L, F)
    y: np.ndarray  # (L,)
    mask: np.ndarray  # (L,)
    unit_id: int
    offset: int


# ---------------------------------------------------------------------------
# parsing


def parse_cmapss(stream: TextIO | str) -> list[RunToFailureCycle]:
    """Parse whitespace separated 26-column rows into complete cycles.

    Labels are the linear run-to-failure rule ``rul[t] = T - 1 - t``.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows: dict[int, list[tuple[int, list[float]]]] = {}
    order: list[int] = []
    for lineno, line in enumerate(stream, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != N_COLUMNS:
            raise FormatError(f"line {lineno}: expected {N_COLUMNS} columns, found {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        unit, cycle = int(vals[0]), int(vals[1])
        if unit not in rows:
            rows[unit] = []
            order.append(unit)
        prev = rows[unit][-1][0] if rows[unit] else None
        if prev is not None and cycle <= prev:
            raise FormatError(f"line {lineno}: cycle index {cycle} of unit {unit} does not follow {prev}")
        rows[unit].append((cycle, vals[2:]))
    cycles = []
    for unit in order:
        feats = np.array([r[1] for r in rows[unit]])
        T = len(feats)
        cycles.append(RunToFailureCycle(unit, feats, np.arange(T - 1, -1, -1, dtype=np.float64)))
    return cycles


def parse_rul_file(stream: TextIO | str) -> list[int]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    out = []
    for lineno, line in enumerate(stream, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 1:
            raise FormatError(f"RUL file line {lineno}: expected one value, found {len(parts)}")
        out.append(int(float(parts[0])))
    return out


def attach_test_rul(cycle: RunToFailureCycle, rul_at_last: int) -> RunToFailureCycle:
    if rul_at_last < 0:
        raise ValueError(f"RUL at the last observed step must be >= 0, got {rul_at_last}")
    T = cycle.T
    rul = rul_at_last + np.arange(T - 1, -1, -1, dtype=np.float64)
    return replace(cycle, rul=rul, truncated=rul_at_last > 0)


def load_cmapss(directory: str | Path, subset: str = "FD001") -> tuple[list[RunToFailureCycle], list[RunToFailureCycle]]:
    """Read ``train_<subset>.txt``, ``test_<subset>.txt`` and ``RUL_<subset>.txt``."""
    directory = Path(directory)
    paths = {k: directory / f"{k}_{subset}.txt" for k in ("train", "test", "RUL")}
    for p in paths.values():
        if not p.is_file():
            raise FileNotFoundError(f"missing C-MAPSS file: {p}")
    with open(paths["train"]) as f:
        train = parse_cmapss(f)
    with open(paths["test"]) as f:
        test = parse_cmapss(f)
    with open(paths["RUL"]) as f:
        ruls = parse_rul_file(f)
    if len(ruls) != len(test):
        raise FormatError(f"{paths['RUL']}: {len(ruls)} values for {len(test)} test units")
    return train, [attach_test_rul(c, r) for c, r in zip(test, ruls)]


def format_cmapss(cycles: Sequence[RunToFailureCycle]) -> str:
    """Inverse of :func:`parse_cmapss`; floats are written with round-trip precision."""
    lines = []
    for c in cycles:
        for t in range(c.T):
            vals = " ".join(repr(float(v)) for v in c.features[t])
            lines.append(f"{c.unit_id} {t + 1} {vals}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, cycles: Iterable[RunToFailureCycle]) -> "Normalizer":
        X = np.concatenate([c.features for c in cycles], axis=0)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    def apply(self, features: np.ndarray) -> np.ndarray:
        # constant features sit at their mean, so they normalise to exactly 0
        return (features - self.mean) / self.std

    def apply_cycle(self, cycle: RunToFailureCycle) -> RunToFailureCycle:
        return replace(cycle, features=self.apply(cycle.features))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def cap_rul(cycle: RunToFailureCycle, cap: float) -> np.ndarray:
    """Piecewise-linear target (min(rul, cap)); only for literature comparisons."""
    return np.minimum(cycle.rul, cap)


# ---------------------------------------------------------------------------
# windows


def window_count(T: int, L: int) -> int:
    return max(T - L + 1, 1)


def make_windows(cycle: RunToFailureCycle, L: int, target: np.ndarray | None = None) -> list[WindowedSample]:
    if L < 1:
        raise ValueError(f"window length must be >= 1, got {L}")
    T, F = cycle.features.shape
    y = cycle.rul if target is None else np.asarray(target, dtype=np.float64)
    if T <= L:
        x = np.zeros((L, F))
        x[:T] = cycle.features
        yy = np.zeros(L)
        yy[:T] = y
        mask = np.zeros(L)
        mask[:T] = 1.0
        return [WindowedSample(x, yy, mask, cycle.unit_id, 0)]
    ones = np.ones(L)
    return [
        WindowedSample(cycle.features[o : o + L], y[o : o + L], ones, cycle.unit_id, o)
        for o in range(T - L + 1)
    ]


def aggregate_predictions(windows: Sequence[tuple[int, np.ndarray]], T: int) -> np.ndarray:
    """Average overlapping window predictions onto the cycle's T timesteps.

    Positions past ``T`` (zero padding) are ignored. The mean is updated
    incrementally so that equal contributions reproduce their value exactly.
    """
    mean = np.zeros(T)
    count = np.zeros(T)
    for offset, pred in windows:
        pred = np.asarray(pred, dtype=np.float64)
        if offset < 0 or offset >= T:
            raise ValueError(f"window offset {offset} outside cycle of length {T}")
        n = min(len(pred), T - offset)
        sl = slice(offset, offset + n)
        count[sl] += 1
        mean[sl] += (pred[:n] - mean[sl]) / count[sl]
    if np.any(count == 0):
        missing = int(np.flatnonzero(count == 0)[0])
        raise ValueError(f"timestep {missing} is covered by no window")
    return mean


@dataclass
class WindowArrays:
    """Stacked windows: x (W, L, F), y (W, L), mask (W, L), unit (W,), offset (W,)."""

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    unit: np.ndarray
    offset: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def stack_windows(cycles: Sequence[RunToFailureCycle], L: int, targets: Sequence[np.ndarray] | None = None) -> WindowArrays:
    ws: list[WindowedSample] = []
    for i, c in enumerate(cycles):
        ws.extend(make_windows(c, L, None if targets is None else targets[i]))
    return WindowArrays(
        np.stack([w.x for w in ws]),
        np.stack([w.y for w in ws]),
        np.stack([w.mask for w in ws]),
        np.array([w.unit_id for w in ws], dtype=np.int64),
        np.array([w.offset for w in ws], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# window cache: a .npz archive whose "header" entry holds JSON metadata

CACHE_VERSION = 1


def save_window_cache(path: str | Path, windows: WindowArrays, L: int, normalizer: Normalizer, extra: dict | None = None) -> None:
    header = {
        "version": CACHE_VERSION,
        "window_len": L,
        "n_features": int(windows.x.shape[-1]),
        "n_windows": len(windows),
        "normalizer": normalizer.to_dict(),
        **(extra or {}),
    }
    with open(path, "wb") as f:
        np.savez(
            f,
            header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            x=windows.x,
            y=windows.y,
            mask=windows.mask,
            unit=windows.unit,
            offset=windows.offset,
        )


def load_window_cache(path: str | Path) -> tuple[WindowArrays, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("version") != CACHE_VERSION:
            raise FormatError(f"{path}: unsupported cache version {header.get('version')}")
        w = WindowArrays(z["x"], z["y"], z["mask"], z["unit"], z["offset"])
    return w, header


# ---------------------------------------------------------------------------
# synthetic run-to-failure data


def _synth_unit(rng: np.random.Generator, W: np.ndarray, bias: np.ndarray, noise_scale: float, T: int, rate: float) -> np.ndarray:
    rul = np.arange(T - 1, -1, -1, dtype=np.float64)
    health = rate * rul  # falls linearly, reaches 0 at failure
    sigma = noise_scale * (0.25 + 1.5 * np.clip(1.0 - health, 0.0, None))
    return health[:, None] * W[None, :] + bias[None, :] + sigma[:, None] * rng.standard_normal((T, len(W)))


def synth_generate(
    n_units: int,
    noise_scale: float,
    seed: int,
    n_test_units: int | None = None,
    min_len: int = 80,
    max_len: int = 250,
    slope_jitter: float = 0.05,
) -> tuple[list[RunToFailureCycle], list[RunToFailureCycle]]:
    """Heteroscedastic linear-degradation units in the C-MAPSS feature layout.

    Each unit lives T ~ U[min_len, max_len] cycles. Its latent health falls
    linearly to 0 at failure with a per-unit slope of (1 +/- slope_jitter) /
    max_len, so a longer-lived unit starts healthier. The 24 features are
    fixed random affine maps of health plus Gaussian noise whose scale grows
    with degradation. Test units are cut at a random point and carry the RUL
    that remains.
    """
    if n_units < 1:
        raise ValueError(f"need at least one unit, got {n_units}")
    n_test = n_units if n_test_units is None else n_test_units
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0, N_FEATURES)
    bias = rng.normal(0.0, 1.0, N_FEATURES)

    def unit():
        T = int(rng.integers(min_len, max_len + 1))
        rate = (1.0 + slope_jitter * rng.uniform(-1.0, 1.0)) / max_len
        return T, _synth_unit(rng, W, bias, noise_scale, T, rate)

    train = []
    for u in range(n_units):
        T, x = unit()
        train.append(RunToFailureCycle(u + 1, x, np.arange(T - 1, -1, -1, dtype=np.float64)))
    test = []
    for u in range(n_test):
        T, x = unit()
        cut = int(rng.integers(max(T // 3, 1), T + 1))
        full = RunToFailureCycle(u + 1, x[:cut], np.arange(cut - 1, -1, -1, dtype=np.float64))
        test.append(attach_test_rul(full, T - cut))
    return train, test
