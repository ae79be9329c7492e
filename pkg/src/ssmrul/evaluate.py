"""Per-quantile RMSE evaluation, coverage, seed sweeps and report files."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbones import Model, count_mult_adds, count_params
from .data import RunToFailureCycle, aggregate_predictions, make_windows
from .train import Checkpoint, TrainConfig, load_dataset, train

PREDICT_CHUNK = 256


def rmse(y, yhat, mask=None) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    m = np.ones_like(y, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if not m.any():
        raise ValueError("rmse over zero valid entries")
    return float(np.sqrt(np.mean((y[m] - yhat[m]) ** 2)))


def coverage(preds, targets, mask=None) -> float:
    """Fraction of valid entries whose target is at or below the prediction."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    m = np.ones_like(y, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if not m.any():
        raise ValueError("coverage over zero valid entries")
    return float(np.mean(y[m] <= p[m]))


def tau_label(tau: float) -> str:
    return f"q{int(round(tau * 100)):02d}"


@dataclass
class QuantileEvalReport:
    name: str
    taus: tuple[float, ...]
    rmse: dict[float, float]
    predictions: dict[int, dict[float, np.ndarray]]  # unit -> tau -> (T,) cycles
    truth: dict[int, np.ndarray]
    param_count: int
    mult_adds: int
    seeds: list[int]
    config_digest: str
    per_seed: dict[int, dict[float, float]] = field(default_factory=dict)
    coverage: dict[float, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "name": self.name,
            "config_digest": self.config_digest,
            "taus": list(self.taus),
            "rmse": {tau_label(t): self.rmse[t] for t in self.taus},
            "coverage": {tau_label(t): self.coverage[t] for t in self.taus if t in self.coverage},
            "per_seed": {str(s): {tau_label(t): v[t] for t in self.taus} for s, v in self.per_seed.items()},
            "seeds": list(self.seeds),
            "param_count": self.param_count,
            "mult_adds": self.mult_adds,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"

    def interval_csv(self, unit: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "rul_true"] + [f"pred_{tau_label(t)}" for t in self.taus])
        truth = self.truth[unit]
        preds = self.predictions[unit]
        for i in range(len(truth)):
            w.writerow([i, repr(float(truth[i]))] + [repr(float(preds[t][i])) for t in self.taus])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        (out / "intervals").mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json"]
        paths[0].write_text(self.to_json())
        for unit in sorted(self.truth):
            p = out / "intervals" / f"unit_{unit:04d}.csv"
            p.write_text(self.interval_csv(unit))
            paths.append(p)
        return paths

    @classmethod
    def load(cls, out_dir: str | Path) -> "QuantileEvalReport":
        """Rebuild a report from the files written by :meth:`write`."""
        out = Path(out_dir)
        path = out / "report.json"
        if not path.is_file():
            raise FileNotFoundError(f"no report.json in {out}")
        d = json.loads(path.read_text())
        taus = tuple(d["taus"])
        labels = {tau_label(t): t for t in taus}
        predictions, truth = {}, {}
        for p in sorted((out / "intervals").glob("unit_*.csv")):
            unit = int(p.stem.split("_")[1])
            with open(p, newline="") as f:
                rows = list(csv.DictReader(f))
            truth[unit] = np.array([float(r["rul_true"]) for r in rows])
            predictions[unit] = {t: np.array([float(r[f"pred_{lab}"]) for r in rows]) for lab, t in labels.items()}
        return cls(
            name=d["name"],
            taus=taus,
            rmse={labels[k]: v for k, v in d["rmse"].items()},
            predictions=predictions,
            truth=truth,
            param_count=d["param_count"],
            mult_adds=d["mult_adds"],
            seeds=d["seeds"],
            config_digest=d["config_digest"],
            per_seed={int(s): {labels[k]: v for k, v in r.items()} for s, r in d["per_seed"].items()},
            coverage={labels[k]: v for k, v in d["coverage"].items()},
        )


def quantile_table(reports: Sequence[QuantileEvalReport]) -> str:
    """One row per model, one RMSE column per quantile."""
    if not reports:
        raise ValueError("need at least one report")
    taus = reports[0].taus
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "seeds"] + [tau_label(t) for t in taus])
    for r in reports:
        if r.taus != taus:
            raise ValueError(f"report {r.name!r} has quantiles {r.taus}, expected {taus}")
        w.writerow([r.name, len(r.seeds)] + [repr(r.rmse[t]) for t in taus])
    return buf.getvalue()


def predict_cycle(model: Model, features: np.ndarray, tau: float, L: int) -> np.ndarray:
    """Aggregated per-timestep prediction (model units) for one normalised cycle."""
    cyc = RunToFailureCycle(0, features, np.arange(len(features), 0, -1.0), truncated=True)
    ws = make_windows(cyc, L)
    x = np.stack([w.x for w in ws])
    preds = []
    with T.no_grad():
        for s in range(0, len(x), PREDICT_CHUNK):
            chunk = x[s : s + PREDICT_CHUNK]
            preds.append(model(chunk, np.full(len(chunk), tau)).data)
    out = np.concatenate(preds)
    return aggregate_predictions([(w.offset, p) for w, p in zip(ws, out)], len(features))


def evaluate(
    ckpt: Checkpoint,
    test_cycles: Sequence[RunToFailureCycle],
    taus: Sequence[float] | None = None,
    mode: str | None = None,
) -> QuantileEvalReport:
    cfg = ckpt.config
    taus = tuple(cfg.eval_taus if taus is None else taus)
    mode = mode or cfg.eval_mode
    F = cfg.model.input_features
    model = ckpt.model()
    predictions: dict[int, dict[float, np.ndarray]] = {}
    truth: dict[int, np.ndarray] = {}
    for c in test_cycles:
        if c.features.shape[1] != F:
            raise ValueError(f"unit {c.unit_id} has {c.features.shape[1]} features, checkpoint expects {F}")
        if c.unit_id in truth:
            raise ValueError(f"unit {c.unit_id} appears twice in the test set")
        feats = ckpt.normalizer.apply(c.features)
        truth[c.unit_id] = c.rul.copy()
        predictions[c.unit_id] = {t: predict_cycle(model, feats, t, cfg.model.window_len) * ckpt.target_scale for t in taus}
    scores, covs = {}, {}
    for t in taus:
        per_cycle = []
        hits = []
        for unit, y in truth.items():
            p = predictions[unit][t]
            if mode == "last":
                per_cycle.append(abs(float(y[-1] - p[-1])))
            else:
                per_cycle.append(rmse(y, p))
            hits.append(y <= p)
        scores[t] = float(np.mean(per_cycle))
        covs[t] = float(np.mean(np.concatenate(hits)))
    return QuantileEvalReport(
        name=cfg.model.backbone,
        taus=taus,
        rmse=scores,
        predictions=predictions,
        truth=truth,
        param_count=count_params(model),
        mult_adds=count_mult_adds(model),
        seeds=[cfg.seed],
        config_digest=cfg.digest(),
        per_seed={cfg.seed: dict(scores)},
        coverage=covs,
    )


class SeedRunError(RuntimeError):
    def __init__(self, seed: int, exc: BaseException):
        super().__init__(f"seed {seed}: {type(exc).__name__}: {exc}")
        self.seed = seed


def _run_one(cfg: TrainConfig, seed: int, train_cycles, test_cycles) -> QuantileEvalReport:
    try:
        c = cfg.with_seed(seed)
        ckpt, _ = train(c, train_cycles)
        return evaluate(ckpt, test_cycles)
    except Exception as exc:  # re-raised with the failing seed attached
        raise SeedRunError(seed, exc) from exc


def average_reports(reports: Sequence[QuantileEvalReport], digest: str | None = None) -> QuantileEvalReport:
    if not reports:
        raise ValueError("nothing to average")
    first = reports[0]
    taus = first.taus
    per_seed = {}
    for r in reports:
        per_seed.update(r.per_seed)
    rmse_mean = {t: float(np.mean([r.rmse[t] for r in reports])) for t in taus}
    cov_mean = {t: float(np.mean([r.coverage[t] for r in reports])) for t in taus if all(t in r.coverage for r in reports)}
    preds = {
        u: {t: np.mean([r.predictions[u][t] for r in reports], axis=0) for t in taus} for u in first.predictions
    }
    return QuantileEvalReport(
        name=first.name,
        taus=taus,
        rmse=rmse_mean,
        predictions=preds,
        truth=first.truth,
        param_count=first.param_count,
        mult_adds=first.mult_adds,
        seeds=[s for r in reports for s in r.seeds],
        config_digest=digest or first.config_digest,
        per_seed=per_seed,
        coverage=cov_mean,
    )


def run_seed_sweep(
    cfg: TrainConfig,
    seeds: Sequence[int],
    train_cycles=None,
    test_cycles=None,
    workers: int = 1,
) -> tuple[QuantileEvalReport, list[QuantileEvalReport]]:
    """Train and evaluate once per seed; returns the averaged report and the per-seed ones."""
    if not seeds:
        raise ValueError("need at least one seed")
    if train_cycles is None or test_cycles is None:
        train_cycles, test_cycles = load_dataset(cfg.data)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            futures = [ex.submit(_run_one, cfg, s, train_cycles, test_cycles) for s in seeds]
            reports = [f.result() for f in futures]
    else:
        reports = [_run_one(cfg, s, train_cycles, test_cycles) for s in seeds]
    return average_reports(reports, cfg.digest()), reports


def blob_rows(reports: Sequence[QuantileEvalReport], median: float = 0.5) -> list[dict]:
    if not reports:
        raise ValueError("need at least one report")
    return [
        {"name": r.name, "param_count": r.param_count, "mult_adds": r.mult_adds, "rmse_median": r.rmse[median]}
        for r in reports
    ]


def emit_blob_data(reports: Sequence[QuantileEvalReport]) -> str:
    """CSV with the three axes of the size / cost / accuracy blob plot, one row per model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "param_count", "mult_adds", "rmse_q50"])
    for row in blob_rows(reports):
        w.writerow([row["name"], row["param_count"], row["mult_adds"], repr(row["rmse_median"])])
    return buf.getvalue()
