"""Experiment execution: train to a target accuracy, then measure."""

from __future__ import annotations

import json
import logging
import time
import uuid
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..diffcore import NonFiniteLoss
from ..modelzoo import Dataset, MLPObjective, SpecError, make_dataset, make_mlp
from ..sharpopt import (
    STEPS,
    BaseOptimizerState,
    NonFiniteGradient,
    generalization_gap,
    measure_sharpness,
)
from ..spectrum import SpectrumReport, full_report
from .config import OPTIMIZER_ORDER, ExperimentConfig, loads, to_flat

log = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
CURVES_DIR = "curves"
CURVE_COLUMNS = (
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "perturbed_loss_mean",
    "surrogate_gap_mean",
)


@dataclass
class RunRecord:
    run_id: str
    optimizer: str
    label: str
    seed: int
    status: str = "OK"
    diagnostic: str = ""
    test_accuracy: float = float("nan")
    train_accuracy_final: float = float("nan")
    train_loss: float = float("nan")
    test_loss: float = float("nan")
    wall_clock_seconds: float = 0.0
    epochs_used: int = 0
    generalization_gap: float = float("nan")
    sharpness_rho_ball: float = float("nan")
    spectrum: Optional[SpectrumReport] = None
    curves: list = field(default_factory=list)
    final_params: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "OK"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spectrum"] = self.spectrum.to_dict() if self.spectrum else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        if d.get("spectrum"):
            d["spectrum"] = SpectrumReport.from_dict(d["spectrum"])
        return cls(**d)

    def comparable(self) -> dict:
        """Everything except the run id and timing, for determinism checks."""
        d = self.to_dict()
        d.pop("run_id")
        d.pop("wall_clock_seconds")
        return d


class RecordSink:
    """Append-only JSON-lines store plus one curves CSV per run."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.out_dir / RECORDS_FILE

    def append(self, record: RunRecord) -> None:
        line = json.dumps(record.to_dict(), allow_nan=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        curves = self.out_dir / CURVES_DIR
        curves.mkdir(exist_ok=True)
        (curves / f"{record.run_id}.csv").write_text(emit_curves(record), encoding="utf-8")

    def records(self) -> list[RunRecord]:
        return read_records(self.path)


def read_records(path) -> list[RunRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS_FILE
    out = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(RunRecord.from_dict(json.loads(line)))
    return out


def emit_curves(run: RunRecord) -> str:
    """Per-epoch trajectory as CSV with the fixed header ``CURVE_COLUMNS``."""
    lines = [",".join(CURVE_COLUMNS)]
    for row in run.curves:
        lines.append(",".join(repr(row[c]) if c != "epoch" else str(row[c]) for c in CURVE_COLUMNS))
    return "\n".join(lines) + "\n"


def init_seed_for(cfg: ExperimentConfig, seed: int) -> int:
    """Model initialization seed for one run, derived from the config's base seed."""
    return int(np.random.SeedSequence([cfg.model.init_seed, seed]).generate_state(1)[0])


def build_model(cfg: ExperimentConfig, seed: int) -> MLPObjective:
    return make_mlp(replace(cfg.model, init_seed=init_seed_for(cfg, seed)))


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    return make_dataset(cfg.dataset.name, **cfg.dataset.params())


def epoch_batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(ds.train_indices)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def analysis_batches(ds: Dataset, batch_size: int):
    idx = ds.train_indices
    return [ds.subset(idx[i : i + batch_size], index=k) for k, i in enumerate(range(0, len(idx), batch_size))]


def train_one(
    cfg: ExperimentConfig,
    ds: Dataset,
    seed: int,
    on_batch: Optional[Callable[[np.ndarray], None]] = None,
) -> RunRecord:
    obj = build_model(cfg, seed)
    w = obj.init_params()
    state = BaseOptimizerState.init(
        obj.param_count,
        cfg.effective_base,
        cfg.lr,
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_eps=cfg.adam_eps,
    )
    step = STEPS[cfg.optimizer.value]
    train_mask = np.zeros(ds.n, dtype=bool)
    train_mask[ds.train_indices] = True
    train, test = ds.train(), ds.test()

    record = RunRecord(
        run_id=uuid.uuid4().hex[:12],
        optimizer=cfg.optimizer.value,
        label=cfg.display_name,
        seed=seed,
        config=to_flat(cfg),
    )
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.stop.max_epochs + 1):
            pert, gap = [], []
            for k, idx in enumerate(epoch_batches(ds, cfg.batch_size, seed, epoch)):
                if not train_mask[idx].all():
                    raise AssertionError("held-out example reached the optimizer")
                if on_batch is not None:
                    on_batch(idx)
                w, state, rep = step(obj, w, ds.subset(idx, index=k), state, cfg.sharpness)
                pert.append(rep.perturbed_loss)
                gap.append(rep.surrogate_gap)
            train_loss = obj.eval(w, train)
            if not np.isfinite(train_loss):
                raise NonFiniteLoss(f"non-finite training loss after epoch {epoch}")
            train_acc = obj.accuracy(w, train.features, train.labels)
            test_acc = obj.accuracy(w, test.features, test.labels)
            record.curves.append(
                {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "train_acc": train_acc,
                    "test_acc": test_acc,
                    "perturbed_loss_mean": float(np.mean(pert)),
                    "surrogate_gap_mean": float(np.mean(gap)),
                }
            )
            record.epochs_used = epoch
            if train_acc >= cfg.stop.target_train_accuracy:
                break
    except (NonFiniteLoss, NonFiniteGradient, FloatingPointError) as exc:
        record.wall_clock_seconds = time.perf_counter() - t0
        record.status = "FAILED"
        record.diagnostic = f"{type(exc).__name__}: {exc}"
        log.warning("run %s (seed %d) failed: %s", record.run_id, seed, record.diagnostic)
        return record
    record.wall_clock_seconds = time.perf_counter() - t0

    record.final_params = [float(x) for x in w]
    record.train_loss = obj.eval(w, train)
    record.test_loss = obj.eval(w, test)
    record.train_accuracy_final = obj.accuracy(w, train.features, train.labels)
    record.test_accuracy = obj.accuracy(w, test.features, test.labels)
    record.generalization_gap = generalization_gap(record.train_loss, record.test_loss)
    record.sharpness_rho_ball = measure_sharpness(
        obj, w, train, cfg.sharpness, cfg.ascent_steps, seed=seed
    )
    record.spectrum = full_report(obj, w, analysis_batches(ds, cfg.batch_size), cfg.spectrum)
    return record


def run_experiment(
    cfg: ExperimentConfig,
    out_dir=None,
    seeds: Optional[Sequence[int]] = None,
    on_batch: Optional[Callable[[np.ndarray], None]] = None,
) -> list[RunRecord]:
    """Train and evaluate one run per seed; persist each record as it completes."""
    ds = load_dataset(cfg)
    sink = RecordSink(out_dir) if out_dir is not None else None
    records = []
    for seed in seeds if seeds is not None else cfg.seeds:
        rec = train_one(cfg, ds, int(seed), on_batch)
        log.info(
            "%s seed=%d status=%s epochs=%d test_acc=%.4f",
            rec.label, rec.seed, rec.status, rec.epochs_used, rec.test_accuracy,
        )
        if sink is not None:
            sink.append(rec)
        records.append(rec)
    return records


def recompute_spectrum(record: RunRecord, settings=None) -> SpectrumReport:
    """Spectrum of a stored run's final weights, optionally with new settings."""
    if not record.ok or not record.final_params:
        raise SpecError(f"run {record.run_id} has no final weights")
    cfg = loads(dumps_flat(record.config))
    ds = load_dataset(cfg)
    obj = build_model(cfg, record.seed)
    return full_report(
        obj,
        np.asarray(record.final_params),
        analysis_batches(ds, cfg.batch_size),
        settings or cfg.spectrum,
    )


def dumps_flat(flat: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat.items())


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TableRow:
    label: str
    test_accuracy_pct: float
    training_time_min: float
    top_eigenvalue: float
    hessian_median: float
    hessian_mean: float
    hessian_sd: float
    hessian_trace: float
    n_runs: int = 1

    @classmethod
    def from_record(cls, r: RunRecord) -> "TableRow":
        s = r.spectrum
        nan = float("nan")
        return cls(
            r.label,
            100.0 * r.test_accuracy,
            r.wall_clock_seconds / 60.0,
            s.top_eigenvalue if s else nan,
            s.curvature_median if s else nan,
            s.curvature_mean if s else nan,
            s.curvature_sd if s else nan,
            s.trace if s else nan,
        )


def aggregate(label: str, records: Sequence[RunRecord]) -> TableRow:
    """Median of every metric over the successful runs."""
    rows = [TableRow.from_record(r) for r in records if r.ok]
    if not rows:
        nan = float("nan")
        return TableRow(label, nan, nan, nan, nan, nan, nan, nan, 0)
    med = lambda attr: float(np.median([getattr(r, attr) for r in rows]))  # noqa: E731
    return TableRow(
        label,
        med("test_accuracy_pct"),
        med("training_time_min"),
        med("top_eigenvalue"),
        med("hessian_median"),
        med("hessian_mean"),
        med("hessian_sd"),
        med("hessian_trace"),
        len(rows),
    )


def _order_key(cfg: ExperimentConfig):
    return OPTIMIZER_ORDER.index(cfg.optimizer.value)


def check_comparable(cfgs: Sequence[ExperimentConfig]) -> None:
    if not cfgs:
        raise SpecError("nothing to compare")
    first = cfgs[0]
    for c in cfgs[1:]:
        if c.dataset != first.dataset or c.model != first.model:
            raise SpecError("compared configs must share dataset and model")


def compare(
    cfgs: Sequence[ExperimentConfig],
    out_dir=None,
    runner: Callable = run_experiment,
) -> list[TableRow]:
    """One aggregated row per config, baseline optimizers first."""
    check_comparable(cfgs)
    ordered = sorted(cfgs, key=_order_key)
    return [aggregate(c.display_name, runner(c, out_dir)) for c in ordered]
