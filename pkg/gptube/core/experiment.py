"""
Experiment: runs the pipeline data → GP → tube → MM → Monte-Carlo checks for
one configuration, caching every stage.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .control import ControlInput
from .gp import Dataset, FitReport, GpModel, fit_hyperparameters
from .moment_matching import GaussianBelief, mm_rollout
from .regions import Box
from .tail_bound import BoundSchedule, BoundSettings, SafetyReport, bound_trajectory, safety_check
from .validation import (TrajectoryBatch, ValidationSummary, sample_gp_trajectories,
                         sample_system_trajectories, summarize)
from ..systems.dynamics import SystemSpec, collect_dataset
from ..systems.presets import Preset, preset

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ExperimentConfig:
    name:             str
    system:           Optional[SystemSpec]
    controls:         ControlInput
    init_mean:        np.ndarray
    init_cov:         np.ndarray
    epsilon:          float
    horizon:          int
    settings:         BoundSettings = field(default_factory=BoundSettings)
    dataset_source:   str = "collect"
    dataset_path:     Optional[str] = None
    dataset_size:     int = 300
    sampling:         str = "uniform-states"
    sampling_args:    Dict = field(default_factory=dict)
    data_seed:        int = 0
    fit_restarts:     int = 3
    fit_seed:         int = 0
    sampling_seed:    int = 0
    n_trajectories:   int = 1000
    include_noise:    bool = False
    sigma_multiplier: float = 2.0
    safe_box:         Optional[Box] = None
    out:              str = "results"

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.dataset_source not in ("collect", "file"):
            raise ValueError(f"Unsupported dataset source: {self.dataset_source}. Supported: collect, file")
        if self.dataset_source == "collect" and self.system is None:
            raise ValueError("collecting a dataset needs a system")
        if self.dataset_source == "file" and not self.dataset_path:
            raise ValueError("dataset source 'file' needs a path")
        self.init_mean = np.atleast_1d(np.asarray(self.init_mean, dtype=float))
        self.init_cov = np.asarray(self.init_cov, dtype=float)

    @classmethod
    def from_preset(cls, p: Preset, variant: Optional[str] = None, **overrides) -> "ExperimentConfig":
        safe = None if p.safe_box is None else Box(p.safe_box["lower"], p.safe_box["upper"])
        base = dict(
            name          = p.name if variant is None else f"{p.name}:{variant}",
            system        = p.system,
            controls      = p.control_input(variant),
            init_mean     = p.init_mean,
            init_cov      = p.init_cov,
            epsilon       = p.epsilon,
            horizon       = p.horizon,
            settings      = replace(p.settings),
            dataset_size  = p.dataset_size,
            sampling      = p.sampling,
            sampling_args = dict(p.sampling_args),
            safe_box      = safe,
            out           = os.path.join("results", p.name),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> Dict:
        """Run parameters echoed into reports."""
        return {
            "name":           self.name,
            "system":         None if self.system is None else self.system.to_dict(),
            "controls":       self.controls.to_dict(),
            "init_mean":      self.init_mean.tolist(),
            "init_cov":       self.init_cov.tolist(),
            "epsilon":        self.epsilon,
            "horizon":        self.horizon,
            "tube":           self.settings.tube.value,
            "k_grid":         self.settings.grid.to_dict(),
            "k0":             self.settings.k0,
            "dudley_n":       self.settings.dudley_n,
            "predictor":      self.settings.predictor,
            "dataset":        {"source": self.dataset_source, "size": self.dataset_size,
                               "sampling": self.sampling, "seed": self.data_seed},
            "fit":            {"restarts": self.fit_restarts, "seed": self.fit_seed},
            "n_trajectories": self.n_trajectories,
            "sampling_seed":  self.sampling_seed,
        }


class Experiment:
    """Lazily computed stages; pass ``dataset``/``model`` to skip collection or fitting."""

    def __init__(self, cfg: ExperimentConfig, dataset: Optional[Dataset] = None,
                 model: Optional[GpModel] = None):
        self.cfg = cfg
        self._dataset = model.dataset if model is not None and dataset is None else dataset
        self._model = model
        self.fit_report: Optional[FitReport] = None
        self._schedule: Optional[BoundSchedule] = None
        self._rollout: Optional[List[GaussianBelief]] = None

    @property
    def init(self):
        return self.cfg.init_mean, self.cfg.init_cov

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            c = self.cfg
            self._dataset = collect_dataset(c.system, c.sampling, c.dataset_size, c.data_seed,
                                            **c.sampling_args)
        return self._dataset

    @property
    def model(self) -> GpModel:
        if self._model is None:
            self.fit()
        return self._model

    def fit(self) -> GpModel:
        hyps, self.fit_report = fit_hyperparameters(self.dataset, self.cfg.fit_restarts, self.cfg.fit_seed)
        self._model = GpModel(self.dataset, hyps)
        if self.fit_report.warning:
            logger.warning("%s: hyperparameter fit flagged: %s", self.cfg.name,
                           "; ".join(self.fit_report.messages))
        return self._model

    def bound(self) -> BoundSchedule:
        if self._schedule is None:
            c = self.cfg
            self._schedule = bound_trajectory(self.model, self.init, c.controls, None,
                                              c.horizon, c.epsilon, None, c.settings)
        return self._schedule

    @property
    def supports_mm(self) -> bool:
        return self.cfg.controls.is_linear

    def mm(self) -> List[GaussianBelief]:
        if self._rollout is None:
            init = GaussianBelief(self.cfg.init_mean, self.cfg.init_cov)
            self._rollout = mm_rollout(self.model, init, self.cfg.controls, self.cfg.horizon,
                                       include_noise=self.cfg.include_noise)
        return self._rollout

    def sample(self, mode: str = "gp", n: Optional[int] = None, seed: Optional[int] = None) -> TrajectoryBatch:
        c = self.cfg
        n = c.n_trajectories if n is None else n
        seed = c.sampling_seed if seed is None else seed
        if mode == "gp":
            return sample_gp_trajectories(self.model, self.init, c.controls, c.horizon, n, seed,
                                          c.include_noise)
        if mode == "system":
            if c.system is None:
                raise ValueError("ground-truth sampling needs a system")
            return sample_system_trajectories(c.system, self.init, c.controls, c.horizon, n, seed)
        raise ValueError(f"Unsupported sampling mode: {mode}. Supported: gp, system")

    def validate(self, schedule: Optional[BoundSchedule] = None,
                 batch: Optional[TrajectoryBatch] = None, mode: str = "gp") -> ValidationSummary:
        schedule = self.bound() if schedule is None else schedule
        batch = self.sample(mode) if batch is None else batch
        if batch.horizon > schedule.horizon:
            batch = batch.truncate(schedule.horizon)
        rollout = self.mm() if self.supports_mm and len(self.mm()) == batch.horizon + 1 else None
        return summarize(batch, schedule, rollout, self.cfg.sigma_multiplier, self.cfg.name)

    def safety(self) -> Optional[SafetyReport]:
        if self.cfg.safe_box is None:
            return None
        return safety_check(self.bound(), self.cfg.safe_box)


# ------------------------------------------------------------------ #
def _preset_experiment(name: str, variant: Optional[str] = None, seed: int = 0, **overrides) -> Experiment:
    cfg = ExperimentConfig.from_preset(preset(name), variant, data_seed=seed, fit_seed=seed,
                                       sampling_seed=seed, **overrides)
    return Experiment(cfg)


def _coverage_rows(exp: Experiment, schedule: BoundSchedule, batch: TrajectoryBatch,
                   extra: Dict):
    summary = exp.validate(schedule, batch)
    rollout = exp.mm() if exp.supports_mm else None
    rows = []
    for c in schedule.steps:
        row = dict(extra)
        row["t"] = c.t
        for i, v in enumerate(c.center):
            row[f"xhat_{i + 1}"] = float(v)
        for i, v in enumerate(c.half_widths):
            row[f"K_{i + 1}"] = float(v)
        row["p_t"] = c.p
        if rollout is not None:
            for i, (mu, sd) in enumerate(zip(rollout[c.t].mean, rollout[c.t].std)):
                row[f"mm_mean_{i + 1}"] = float(mu)
                row[f"mm_std_{i + 1}"] = float(sd)
        row["tube_coverage"] = summary.per_step_coverage[c.t]
        if summary.mm_coverage is not None:
            row["mm_coverage"] = summary.mm_coverage[c.t]
        rows.append(row)
    return rows, summary


def reproduce_table1(seed: int = 0, n_trajectories: int = 1000) -> Dict:
    """Mountain car, open-loop actions: tube vs ground-truth trajectories."""
    exp = _preset_experiment("mountain-car", seed=seed, n_trajectories=n_trajectories)
    schedule = exp.bound()
    batch = exp.sample("system")
    actions = exp.cfg.controls.sequence[:, 0]
    rows, summary = _coverage_rows(exp, schedule, batch, {})
    for r in rows:
        r["u_t"] = float(actions[r["t"]]) if r["t"] < actions.size else None
    return {"rows": rows, "summary": summary, "experiments": [exp]}


def reproduce_table2(seed: int = 0, n_trajectories: int = 1000) -> Dict:
    """Closed-loop systems: bound rows t = 1..H plus the GP-sampled violation ratio."""
    runs = [("system1", "open"), ("system1", "controlled"), ("system2", None),
            ("system3", None), ("system4", None), ("system5", None)]
    rows, summaries, experiments = [], {}, []
    for name, variant in runs:
        exp = _preset_experiment(name, variant, seed=seed, n_trajectories=n_trajectories)
        schedule = exp.bound()
        summary = exp.validate(schedule)
        summaries[exp.cfg.name] = summary
        experiments.append(exp)
        for c in schedule.steps[1:]:
            row = {"system": name, "variant": variant or "controlled", "t": c.t}
            for i, v in enumerate(c.half_widths):
                row[f"K_{i + 1}"] = float(v)
            row["p_t"] = c.p
            row["violation_ratio"] = summary.violation_ratio
            rows.append(row)
    return {"rows": rows, "summaries": summaries, "experiments": experiments}


def reproduce_fig1(seed: int = 0, n_trajectories: int = 100) -> Dict:
    """Synthetic 1-D system: tube and MM ±kσ band against GP samples."""
    exp = _preset_experiment("synthetic-1d", seed=seed, n_trajectories=n_trajectories)
    schedule = exp.bound()
    batch = exp.sample("gp")
    rows, summary = _coverage_rows(exp, schedule, batch, {})
    return {"rows": rows, "summary": summary, "experiments": [exp]}


def reproduce_fig3(seed: int = 0, n_trajectories: int = 1000) -> Dict:
    """Quartic map over the initial-variance sweep: MM collapse vs the certified tube."""
    base = preset("quartic")
    rows, summaries, experiments = [], {}, []
    model = None
    for var in base.cov_sweep:
        p = base.with_covariance(var)
        cfg = ExperimentConfig.from_preset(p, data_seed=seed, fit_seed=seed, sampling_seed=seed,
                                           n_trajectories=n_trajectories)
        cfg.name = f"quartic:{var:g}"
        # one model for the whole sweep
        exp = Experiment(cfg, model=model)
        model = exp.model
        schedule = exp.bound()
        batch = exp.sample("gp")
        step_rows, summaries[cfg.name] = _coverage_rows(exp, schedule, batch, {"init_var": var})
        rows.extend(step_rows)
        experiments.append(exp)
    return {"rows": rows, "summaries": summaries, "experiments": experiments}


REPRODUCTIONS = {
    "table1": reproduce_table1,
    "table2": reproduce_table2,
    "fig1":   reproduce_fig1,
    "fig3":   reproduce_fig3,
}
