"""
Ejecuta un experimento gptube a partir de un archivo YAML.

Opciones:
  • Desde raíz del proyecto .............  python -m gptube.main bound
  • Desde dentro de carpeta `gptube/` ....  python main.py bound

Subcomandos: fit | bound | mm | validate | reproduce {table1,table2,fig1,fig3}
"""

# --- PATH FIX para ejecución como script -----------------------------------
import sys, pathlib
root_path = pathlib.Path(__file__).resolve().parent.parent  # <repo_root>
if str(root_path) not in sys.path:
    sys.path.insert(0, str(root_path))

# ---------------------------------------------------------------------------
import argparse, json, logging, os, time, yaml
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

#  IMPORTS ABSOLUTOS (funcionan en ambos modos)
from gptube.core.control      import ControlInput, load_policy
from gptube.core.experiment   import REPRODUCTIONS, Experiment, ExperimentConfig
from gptube.core.gp           import GpFactorizationError
from gptube.core.regions      import Box
from gptube.core.tail_bound   import BoundSettings, InfeasibleStepError, KGrid
from gptube.core.validation   import summarize
from gptube.systems.dynamics  import SystemKind, SystemSpec, load_system
from gptube.systems.presets   import PRESET_NAMES, preset
from gptube.utils             import file_io
from gptube.utils.evaluator   import evaluate_schedule, evaluate_validation
from gptube.utils.template_manager import TemplateManager

logger = logging.getLogger("gptube")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2

# variable de entorno -> (clave de config, tipo)
ENV_OVERRIDES = {
    "GPTUBE_EPSILON":  ("epsilon", float),
    "GPTUBE_HORIZON":  ("horizon", int),
    "GPTUBE_SEED":     ("seed", int),
    "GPTUBE_OUT":      ("out", str),
    "GPTUBE_PRESET":   ("preset", str),
    "GPTUBE_DUDLEY_N": ("dudley_n", float),
    "GPTUBE_DT":       ("dt", float),
}


# claves que describen un preset concreto; se descartan si --preset o
# GPTUBE_PRESET eligen otro distinto al del archivo
PRESET_KEYS = ("system", "policy", "controls", "initial", "epsilon", "horizon", "dataset",
               "tube", "k0", "k_grid", "settings", "safe_box", "name", "out")


class CommandFailed(RuntimeError):
    """Structured failure: exit code plus the diagnostic payload."""

    def __init__(self, code: int, status: str, error: str, detail=None):
        super().__init__(error)
        self.code, self.status, self.error, self.detail = code, status, error, detail

    def to_dict(self) -> Dict:
        return {"status": self.status, "error": self.error, "detail": self.detail}


# ------------------------------------------------------------------ #
def load_raw_config(cfg_path: Optional[str]) -> Dict:
    if not cfg_path:
        return {}
    if not os.path.exists(cfg_path):
        raise ValueError(f"Config file {cfg_path} does not exist")
    with open(cfg_path, "r", encoding="utf-8") as f:
        cfg = yaml.safe_load(f) or {}          # <-- evita None
    if not isinstance(cfg, dict):
        raise ValueError(f"Config file {cfg_path} must hold a mapping")
    return cfg


def apply_overrides(cfg: Dict, overrides: Optional[Dict] = None, environ=None) -> Dict:
    """CLI flag > environment > file."""
    environ = os.environ if environ is None else environ
    out = dict(cfg)
    for var, (key, cast) in ENV_OVERRIDES.items():
        value = environ.get(var)
        if value not in (None, ""):
            try:
                out[key] = cast(value)
            except ValueError:
                raise ValueError(f"{var}={value!r} is not a valid {cast.__name__}") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            out[key] = value
    return out


def _mk_grid(d: Optional[Dict], base: KGrid) -> KGrid:
    if not d:
        return base
    return KGrid.from_dict({**base.to_dict(), **d})


def _opt_float(value) -> Optional[float]:
    return None if value is None else float(value)


def _mk_settings(cfg: Dict, base: BoundSettings) -> BoundSettings:
    s = cfg.get("settings", {})
    return replace(
        base,
        mean_tol      = float(s.get("mean_tol", base.mean_tol)),
        variance_rtol = float(s.get("variance_rtol", base.variance_rtol)),
        node_budget   = int(s.get("node_budget", base.node_budget)),
        initial_share = float(s.get("initial_share", base.initial_share)),
        predictor     = s.get("predictor", base.predictor),
        grid          = _mk_grid(cfg.get("k_grid"), base.grid),
        tube          = cfg.get("tube", base.tube),
        k0            = _opt_float(cfg.get("k0", base.k0)),
        dudley_n      = _opt_float(cfg.get("dudley_n", base.dudley_n)),
    )


def _with_dt(system: SystemSpec, dt: Optional[float]) -> SystemSpec:
    if dt is None:
        return system
    if system.kind is SystemKind.MOUNTAIN_CAR:
        return replace(system, params={**system.params, "dt": float(dt)})
    return replace(system, dt=float(dt))


def _mk_controls(cfg: Dict, system: Optional[SystemSpec], default: Optional[ControlInput],
                 p=None) -> ControlInput:
    pol = cfg.get("policy")
    if isinstance(pol, str):
        if p is None:
            raise ValueError(f"policy variant '{pol}' needs a preset")
        return p.control_input(pol)
    if isinstance(pol, dict):
        return ControlInput(policy=load_policy(pol))
    if cfg.get("controls") is not None:
        n_control = system.n_control if system is not None else 1
        return ControlInput(n_control=n_control, sequence=cfg["controls"])
    if default is not None:
        return default
    return ControlInput(n_control=0 if system is None else system.n_control)


def _forced_seed(overrides: Optional[Dict], environ) -> Optional[int]:
    """--seed or GPTUBE_SEED replace every seed of the file."""
    if overrides and overrides.get("seed") is not None:
        return int(overrides["seed"])
    value = (os.environ if environ is None else environ).get("GPTUBE_SEED")
    return int(value) if value not in (None, "") else None


def build_from_config(cfg_path: Optional[str], overrides: Optional[Dict] = None,
                      environ=None) -> ExperimentConfig:
    raw = load_raw_config(cfg_path)
    cfg = apply_overrides(raw, overrides, environ)
    if cfg.get("preset") and cfg["preset"] != raw.get("preset"):
        dropped = sorted(k for k in PRESET_KEYS if k in raw)
        if dropped:
            logger.info("preset %s replaces %s of %s: ignoring %s", cfg["preset"],
                        raw.get("preset", "the custom system"), cfg_path, ", ".join(dropped))
        cfg = apply_overrides({k: v for k, v in raw.items() if k not in PRESET_KEYS}, overrides, environ)
    if "preset" not in cfg and "system" not in cfg:
        raise ValueError(f"Config file {cfg_path} is missing required sections (preset or system)")

    p = preset(cfg["preset"]) if cfg.get("preset") else None
    system = load_system(cfg["system"]) if "system" in cfg else p.system
    system = _with_dt(system, cfg.get("dt"))

    seeds = {k: cfg["seed"] for k in ("data", "fit", "sampling")} if cfg.get("seed") is not None else {}
    seeds.update(cfg.get("seeds", {}))
    forced = _forced_seed(overrides, environ)
    if forced is not None:
        seeds = {k: forced for k in ("data", "fit", "sampling")}
    data = cfg.get("dataset", {})
    fit = cfg.get("fit", {})
    val = cfg.get("validation", {})
    initial = cfg.get("initial", {})

    if p is not None:
        base = ExperimentConfig.from_preset(p, cfg["policy"] if isinstance(cfg.get("policy"), str) else None)
    else:
        n = system.n_state
        if "mean" not in initial or "cov" not in initial:
            raise ValueError(f"Config file {cfg_path}: custom systems need initial.mean and initial.cov")
        base = ExperimentConfig(name="custom", system=system, controls=_mk_controls(cfg, system, None),
                                init_mean=np.zeros(n), init_cov=np.zeros((n, n)), epsilon=0.05,
                                horizon=10)

    sampling_args = dict(base.sampling_args)
    sampling_args.update({k: data[k] for k in ("state_region", "control_region", "x0",
                                                "episode_length", "reset_spread") if k in data})
    if data.get("source") == "file" and data.get("path") and not os.path.exists(data["path"]):
        raise ValueError(f"dataset file {data['path']} does not exist")

    return ExperimentConfig(
        name             = cfg.get("name", base.name),
        system           = system,
        controls         = _mk_controls(cfg, system, base.controls, p),
        init_mean        = initial.get("mean", base.init_mean),
        init_cov         = initial.get("cov", base.init_cov),
        epsilon          = float(cfg.get("epsilon", base.epsilon)),
        horizon          = int(cfg.get("horizon", base.horizon)),
        settings         = _mk_settings(cfg, base.settings),
        dataset_source   = data.get("source", "collect"),
        dataset_path     = data.get("path"),
        dataset_size     = int(data.get("size", base.dataset_size)),
        sampling         = data.get("sampling", base.sampling),
        sampling_args    = sampling_args,
        data_seed        = int(seeds.get("data", data.get("seed", base.data_seed))),
        fit_restarts     = int(fit.get("restarts", base.fit_restarts)),
        fit_seed         = int(seeds.get("fit", fit.get("seed", base.fit_seed))),
        sampling_seed    = int(seeds.get("sampling", base.sampling_seed)),
        n_trajectories   = int(val.get("n_trajectories", base.n_trajectories)),
        include_noise    = bool(val.get("include_noise", base.include_noise)),
        sigma_multiplier = float(val.get("sigma_multiplier", base.sigma_multiplier)),
        safe_box         = Box(cfg["safe_box"]["lower"], cfg["safe_box"]["upper"])
                           if "safe_box" in cfg else base.safe_box,
        out              = str(cfg.get("out", base.out)),
    )


# ------------------------------------------------------------------ #
def _experiment(cfg: ExperimentConfig, model_path: Optional[str] = None) -> Experiment:
    dataset = file_io.load_dataset(cfg.dataset_path) if cfg.dataset_source == "file" else None
    model = file_io.load_model(model_path) if model_path else None
    return Experiment(cfg, dataset=dataset, model=model)


def _out(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def _report(cfg: ExperimentConfig, command: str, files: List[str], **ctx) -> str:
    path = _out(cfg, "report.md")
    TemplateManager().write(path, "report.md.j2", title=cfg.name, command=command,
                            config=cfg.to_dict(), files=files, **ctx)
    return path


def cmd_fit(cfg: ExperimentConfig, model_path: Optional[str] = None) -> Dict:
    exp = _experiment(cfg)
    m = exp.fit()
    files = [_out(cfg, "model.json"), _out(cfg, "dataset.csv"), _out(cfg, "fit.json")]
    file_io.save_model(files[0], m)
    file_io.save_dataset(files[1], exp.dataset)
    file_io.write_json(files[2], asdict(exp.fit_report))
    files.append(_report(cfg, "fit", files, fit=exp.fit_report))

    print("\n==== RESULTS ====")
    for i, h in enumerate(m.hyperparams):
        print(f"output {i + 1}: σ_f²={h.signal_variance:.4g}  ℓ={np.round(h.lengthscales, 4).tolist()}  "
              f"σ_n²={h.noise_variance:.3g}  log evidence={exp.fit_report.log_likelihood[i]:.4g}")
    if exp.fit_report.warning:
        print("warning: " + "; ".join(exp.fit_report.messages))
    return {"model": files[0], "files": files}


def cmd_bound(cfg: ExperimentConfig, model_path: Optional[str] = None) -> Dict:
    exp = _experiment(cfg, model_path)
    files = []
    if model_path is None:
        files.append(_out(cfg, "model.json"))
        file_io.save_model(files[-1], exp.model)
    try:
        schedule = exp.bound()
    except InfeasibleStepError as exc:
        if exc.partial is not None and exc.partial.steps:
            file_io.save_schedule(_out(cfg, "schedule.partial.json"), exc.partial)
            file_io.save_schedule_csv(_out(cfg, "schedule.partial.csv"), exc.partial)
        raise CommandFailed(EXIT_INFEASIBLE, "infeasible", str(exc), exc.to_dict()) from exc

    files += [_out(cfg, "schedule.json"), _out(cfg, "schedule.csv")]
    file_io.save_schedule(files[-2], schedule)
    file_io.save_schedule_csv(files[-1], schedule)
    if cfg.settings.trace:
        files.append(_out(cfg, "trace.json"))
        file_io.save_trace(files[-1], schedule)
    safety = exp.safety()
    summary = evaluate_schedule(schedule)
    files.append(_report(cfg, "bound", files, schedule=schedule, schedule_summary=summary,
                         safety=safety, fit=exp.fit_report))

    print("\n==== RESULTS ====")
    for c in schedule.steps:
        print(f"t={c.t}: K={np.round(c.half_widths, 6).tolist()}  p={c.p:.4g}  "
              f"x̂={np.round(c.center, 4).tolist()}{'  (vacuous)' if c.vacuous else ''}")
    print(f"\nTrend -> {summary['trend']}")
    if safety is not None:
        print(f"Safety -> {'safe' if safety.safe else f'unsafe from t={safety.first_violation}'}")
    return {"schedule": schedule, "files": files}


def cmd_mm(cfg: ExperimentConfig, model_path: Optional[str] = None) -> Dict:
    exp = _experiment(cfg, model_path)
    if not exp.supports_mm:
        raise ValueError("moment matching needs open-loop controls or a linear policy")
    rollout = exp.mm()
    files = [_out(cfg, "mm.csv")]
    file_io.save_mm_rollout(files[0], rollout)

    print("\n==== RESULTS ====")
    for t, b in enumerate(rollout):
        print(f"t={t}: mean={np.round(b.mean, 4).tolist()}  std={np.round(b.std, 4).tolist()}")
    return {"rollout": rollout, "files": files}


def cmd_validate(cfg: ExperimentConfig, model_path: Optional[str] = None,
                 schedule_path: Optional[str] = None, batch_path: Optional[str] = None,
                 mode: str = "gp") -> Dict:
    exp = _experiment(cfg, model_path)
    schedule = file_io.load_schedule(schedule_path) if schedule_path else None
    if schedule is None:
        schedule = exp.bound()
    if batch_path:
        batch = file_io.load_batch(batch_path, cfg.sampling_seed)
    else:
        batch = exp.sample(mode)
        file_io.save_batch(_out(cfg, "trajectories.csv"), batch)
    if batch.horizon > schedule.horizon:
        batch = batch.truncate(schedule.horizon)

    if model_path or batch_path is None:
        summary = exp.validate(schedule, batch)
    else:
        summary = summarize(batch, schedule, preset=cfg.name)
    path = _out(cfg, "validation.json")
    file_io.write_json(path, summary.to_dict())
    results, agg = evaluate_validation({cfg.name: summary})
    _report(cfg, "validate", [path], schedule=schedule, validation={cfg.name: summary})

    print("\n==== RESULTS ====")
    r = results[cfg.name]
    print(f"{cfg.name}: violation ratio={r['violation_ratio']:.4f}  containment={r['containment']:.4f}  "
          f"min coverage={r['min_coverage']:.4f}  sound={r['sound']}")
    return {"summary": summary, "files": [path]}


def cmd_reproduce(name: str, cfg: ExperimentConfig, seed: int = 0,
                  n_trajectories: Optional[int] = None) -> Dict:
    if name not in REPRODUCTIONS:
        raise ValueError(f"Unknown reproduction: {name}. Available: {', '.join(REPRODUCTIONS)}")
    kwargs = {} if n_trajectories is None else {"n_trajectories": n_trajectories}
    result = REPRODUCTIONS[name](seed=seed, **kwargs)
    files = [_out(cfg, f"{name}.csv"), _out(cfg, f"{name}.json")]
    file_io.write_dict_rows(files[0], result["rows"])
    summaries = result.get("summaries") or {result["summary"].preset: result["summary"]}
    results, agg = evaluate_validation(summaries)
    file_io.write_json(files[1], {"reproduction": name, "seed": seed, "runs": results, "aggregate": agg,
                                  "details": {k: v.to_dict() for k, v in summaries.items()}})
    first = result["experiments"][0]
    files.append(_report(replace(cfg, name=name), f"reproduce {name}", files,
                         schedule=first.bound() if len(result["experiments"]) == 1 else None,
                         validation=summaries))

    print("\n==== RESULTS ====")
    for rid, r in results.items():
        print(f"{rid}: violation ratio={r['violation_ratio']:.4f}  containment={r['containment']:.4f}  "
              f"min coverage={r['min_coverage']:.4f}  sound={r['sound']}")
    if agg:
        print(f"\nMax violation -> {agg['max_violation']:.4f}  all sound -> {agg['all_sound']}")
    return {"result": result, "files": files}


# ------------------------------------------------------------------ #
def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gptube", description="Certified multi-step GP prediction tubes")
    default_cfg = Path(__file__).resolve().parent / "config.yaml"
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=str(default_cfg))
    common.add_argument("--epsilon", type=float)
    common.add_argument("--horizon", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--preset", choices=PRESET_NAMES)
    common.add_argument("--model", help="fitted model JSON (skips fitting)")
    common.add_argument("--verbose", "-v", action="store_true")

    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="collect data and fit the GP")
    sub.add_parser("bound", parents=[common], help="certify the probability tube")
    sub.add_parser("mm", parents=[common], help="moment-matching rollout")
    v = sub.add_parser("validate", parents=[common], help="Monte-Carlo check of a tube")
    v.add_argument("--schedule", help="schedule JSON from `bound`")
    v.add_argument("--batch", help="trajectory CSV to check instead of sampling")
    v.add_argument("--mode", choices=("gp", "system"), default="gp")
    r = sub.add_parser("reproduce", parents=[common], help="run a benchmark end to end")
    r.add_argument("name", choices=sorted(REPRODUCTIONS))
    r.add_argument("--trajectories", type=int)
    return ap


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(exc: CommandFailed, out_dir: Optional[str]) -> int:
    payload = exc.to_dict()
    print(json.dumps(payload), file=sys.stderr)
    if out_dir:
        try:
            file_io.write_json(os.path.join(out_dir, "diagnostic.json"), payload)
        except OSError as err:
            logger.error("could not write diagnostic: %s", err)
    return exc.code


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    _setup_logging(args.verbose)
    out_dir = args.out
    handler = None
    t0 = time.time()
    try:
        overrides = {"epsilon": args.epsilon, "horizon": args.horizon, "seed": args.seed,
                     "out": args.out, "preset": args.preset}
        cfg = build_from_config(args.config, overrides)
        if args.verbose:
            cfg.settings.trace = True
        out_dir = cfg.out
        handler = file_io.setup_run_log(out_dir, logging.DEBUG if args.verbose else logging.INFO)
        logger.info("%s on %s (ε=%g, H=%d)", args.command, cfg.name, cfg.epsilon, cfg.horizon)

        if args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "bound":
            cmd_bound(cfg, args.model)
        elif args.command == "mm":
            cmd_mm(cfg, args.model)
        elif args.command == "validate":
            cmd_validate(cfg, args.model, args.schedule, args.batch, args.mode)
        else:
            seed = args.seed if args.seed is not None else cfg.data_seed
            cmd_reproduce(args.name, cfg, seed, args.trajectories)
    except CommandFailed as exc:
        logger.warning("%s", exc.error)
        return _fail(exc, out_dir)
    except (ValueError, OSError, GpFactorizationError) as exc:
        logger.error("%s", exc)
        return _fail(CommandFailed(EXIT_ERROR, "error", str(exc), type(exc).__name__), out_dir)
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()

    print(f"\nCompleted in {time.time() - t0:.1f}s")
    return EXIT_OK


# ------------------------------------------------------------------ #
if __name__ == "__main__":
    sys.exit(main())
