import csv
import io
import json
import logging
import os
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..core.gp import Dataset, GpModel, Hyperparams
from ..core.moment_matching import GaussianBelief
from ..core.regions import Box
from ..core.tail_bound import BoundSchedule, StepCertificate, TubeShape
from ..core.validation import TrajectoryBatch

logger = logging.getLogger(__name__)

MODEL_FORMAT = "gptube-model"
SCHEDULE_FORMAT = "gptube-schedule"
FORMAT_VERSION = 1


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _open_for_write(path: str):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """
    CSV whose first line is a ``# gptube generated <timestamp>`` comment;
    everything after it depends only on the data.
    """
    with _open_for_write(path) as f:
        f.write(f"# gptube generated {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    logger.info("wrote %s", path)


def write_dict_rows(path: str, rows: List[Dict]) -> None:
    header: List[str] = []
    for r in rows:
        header.extend(k for k in r if k not in header)
    write_csv(path, header, ([r.get(k) for k in header] for r in rows))


def read_csv(path: str) -> List[List[str]]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.reader(io.StringIO("".join(lines))))


def write_json(path: str, obj) -> None:
    with _open_for_write(path) as f:
        json.dump(obj, f, indent=2, sort_keys=False)
        f.write("\n")
    logger.info("wrote %s", path)


def read_json(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ------------------------------------------------------------------ #
def model_to_dict(m: GpModel) -> Dict:
    return {
        "format":      MODEL_FORMAT,
        "version":     FORMAT_VERSION,
        "hyperparams": [{"signal_variance": h.signal_variance,
                         "lengthscales":    list(h.lengthscales),
                         "noise_variance":  h.noise_variance} for h in m.hyperparams],
        "inputs":      m.dataset.inputs.tolist(),
        "targets":     m.dataset.targets.tolist(),
    }


def model_from_dict(d: Dict) -> GpModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document (format={d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')}")
    hyps = [Hyperparams(signal_variance = float(h["signal_variance"]),
                        lengthscales    = tuple(float(l) for l in h["lengthscales"]),
                        noise_variance  = float(h["noise_variance"])) for h in d["hyperparams"]]
    return GpModel(Dataset(d["inputs"], d["targets"]), hyps)


def save_model(path: str, m: GpModel) -> None:
    write_json(path, model_to_dict(m))


def load_model(path: str) -> GpModel:
    return model_from_dict(read_json(path))


# ------------------------------------------------------------------ #
def save_dataset(path: str, d: Dataset) -> None:
    header = [f"x_{i + 1}" for i in range(d.input_dim)] + [f"y_{i + 1}" for i in range(d.n_state)]
    write_csv(path, header, np.hstack([d.inputs, d.targets]).tolist())


def load_dataset(path: str) -> Dataset:
    rows = read_csv(path)
    if not rows:
        raise ValueError(f"dataset file {path} is empty")
    header, body = rows[0], rows[1:]
    n_in = sum(1 for h in header if h.startswith("x_"))
    n_out = sum(1 for h in header if h.startswith("y_"))
    if n_in + n_out != len(header) or n_out == 0:
        raise ValueError(f"dataset file {path} needs x_* and y_* columns, got {header}")
    data = np.array([[float(v) for v in r] for r in body if r], dtype=float)
    return Dataset(data[:, :n_in], data[:, n_in:])


# ------------------------------------------------------------------ #
def _vec(x) -> Optional[List[float]]:
    return None if x is None else np.atleast_1d(x).tolist()


def schedule_to_dict(s: BoundSchedule) -> Dict:
    return {
        "format":    SCHEDULE_FORMAT,
        "version":   FORMAT_VERSION,
        "epsilon":   s.epsilon,
        "horizon":   s.horizon,
        "tube":      s.tube.value,
        "complete":  s.complete,
        "diagnosis": s.diagnosis,
        "steps": [{
            "t":               c.t,
            "K":               c.k,
            "half_widths":     c.half_widths.tolist(),
            "p":               c.p,
            "q":               c.q,
            "center":          c.center.tolist(),
            "region":          c.region.to_dict(),
            "eta":             _vec(c.eta),
            "xi":              _vec(c.xi),
            "lambda":          _vec(c.lam),
            "lipschitz":       _vec(c.lipschitz),
            "sup_mean":        _vec(c.sup_mean),
            "dudley":          _vec(c.dudley),
            "vacuous":         c.vacuous,
            "budget_exceeded": c.budget_exceeded,
        } for c in s.steps],
    }


def _array(v):
    return None if v is None else np.asarray(v, dtype=float)


def schedule_from_dict(d: Dict) -> BoundSchedule:
    if d.get("format") != SCHEDULE_FORMAT:
        raise ValueError(f"not a {SCHEDULE_FORMAT} document (format={d.get('format')!r})")
    tube = TubeShape(d.get("tube", "l1"))
    steps = [StepCertificate(
        t               = int(c["t"]),
        k               = float(c["K"]),
        p               = float(c["p"]),
        center          = np.asarray(c["center"], dtype=float),
        region          = Box(c["region"]["lower"], c["region"]["upper"]),
        half_widths     = np.asarray(c["half_widths"], dtype=float),
        tube            = tube,
        q               = c.get("q"),
        eta             = _array(c.get("eta")),
        xi              = _array(c.get("xi")),
        lam             = _array(c.get("lambda")),
        lipschitz       = _array(c.get("lipschitz")),
        sup_mean        = _array(c.get("sup_mean")),
        dudley          = _array(c.get("dudley")),
        vacuous         = bool(c.get("vacuous", False)),
        budget_exceeded = bool(c.get("budget_exceeded", False)),
    ) for c in d["steps"]]
    return BoundSchedule(epsilon=float(d["epsilon"]), horizon=int(d["horizon"]), steps=steps,
                         tube=tube, diagnosis=d.get("diagnosis"))


def save_schedule(path: str, s: BoundSchedule) -> None:
    write_json(path, schedule_to_dict(s))


def load_schedule(path: str) -> BoundSchedule:
    return schedule_from_dict(read_json(path))


def save_schedule_csv(path: str, s: BoundSchedule) -> None:
    """t, K_t (per dim for box tubes), p_t, q_t, x̂_t…, region lo/hi…"""
    n = s.steps[0].center.size if s.steps else 0
    k_cols = ["K_t"] if s.tube is TubeShape.L1 else [f"K_{i + 1}" for i in range(n)]
    header = (["t"] + k_cols + ["p_t", "q_t"] + [f"xhat_{i + 1}" for i in range(n)]
              + [f"lo_{i + 1}" for i in range(n)] + [f"hi_{i + 1}" for i in range(n)] + ["vacuous"])
    rows = []
    for c in s.steps:
        ks = [c.k] if s.tube is TubeShape.L1 else c.half_widths.tolist()
        rows.append([c.t] + ks + [c.p, c.q] + c.center.tolist()
                    + c.region.lower.tolist() + c.region.upper.tolist() + [c.vacuous])
    write_csv(path, header, rows)


# ------------------------------------------------------------------ #
def save_batch(path: str, batch: TrajectoryBatch) -> None:
    """Long format: one row per (trajectory, t)."""
    n = batch.n_state
    m = 0 if batch.controls is None else batch.controls.shape[2]
    header = ["trajectory", "t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
    rows = []
    for j in range(batch.size):
        for t in range(batch.horizon + 1):
            u = batch.controls[j, t].tolist() if m and t < batch.horizon else [None] * m
            rows.append([j, t] + batch.states[j, t].tolist() + u)
    write_csv(path, header, rows)


def load_batch(path: str, seed: int = 0, mode: str = "ground-truth") -> TrajectoryBatch:
    rows = read_csv(path)
    header, body = rows[0], [r for r in rows[1:] if r]
    x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
    u_cols = [i for i, h in enumerate(header) if h.startswith("u_")]
    N = 1 + max(int(r[0]) for r in body)
    T = 1 + max(int(r[1]) for r in body)
    states = np.empty((N, T, len(x_cols)))
    controls = np.zeros((N, T - 1, len(u_cols)))
    for r in body:
        j, t = int(r[0]), int(r[1])
        states[j, t] = [float(r[i]) for i in x_cols]
        if u_cols and t < T - 1:
            controls[j, t] = [float(r[i]) for i in u_cols]
    return TrajectoryBatch(states, controls, seed, mode)


def save_mm_rollout(path: str, rollout: Sequence[GaussianBelief]) -> None:
    n = rollout[0].mean.size
    header = (["t"] + [f"mean_{i + 1}" for i in range(n)] + [f"std_{i + 1}" for i in range(n)]
              + [f"cov_{i + 1}_{j + 1}" for i in range(n) for j in range(i, n)])
    rows = []
    for t, b in enumerate(rollout):
        upper = [b.covariance[i, j] for i in range(n) for j in range(i, n)]
        rows.append([t] + b.mean.tolist() + b.std.tolist() + upper)
    write_csv(path, header, rows)


# ------------------------------------------------------------------ #
def setup_run_log(out_dir: str, level: int = logging.INFO) -> logging.Handler:
    """Adds a ``run.log`` file handler in ``out_dir`` to the root logger."""
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"), mode="w", encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def save_trace(path: str, s: BoundSchedule) -> None:
    """Branch-and-bound node logs of every step that recorded one."""
    write_json(path, [{"t": c.t, "outputs": c.trace} for c in s.steps if c.trace is not None])
