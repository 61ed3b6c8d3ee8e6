"""Command-line entry point: gen-data, train, eval, analyze, bench.

Settings come from three layers, later ones winning: built-in defaults
(planner defaults follow the environment's profile), an INI config file
(``--config``), and command-line flags. ``RCAUX_SEED`` overrides the seed
from the config file; an explicit ``--seed`` flag still wins over it. Every
command writes its fully resolved config into the output directory as
``config.<command>.ini``, so a run can be repeated from that file alone.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import DatasetFormatError, POLICIES, generate_trajectories, load_dataset, save_dataset
from .env import ENVS, make_env
from .model import CheckpointFormatError, load_checkpoint, save_checkpoint
from .planner import PlannerConfig, profile
from .train import LossWeights, TrainConfig, fit

log = logging.getLogger("rcaux")

EXIT_OK = 0
EXIT_CONFIG = 2  # config parse error or bad flag value
EXIT_MISSING = 3  # referenced file does not exist
EXIT_VERSION = 4  # file format / version / shape mismatch
EXIT_CHECK = 5  # an analysis check reported violations

DATASET_FILE = "dataset.rcd"
CHECKPOINT_FILE = "model.ckpt"


class ConfigError(ValueError):
    pass


class MissingFile(FileNotFoundError):
    pass


class VersionMismatch(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class RunSettings:
    env: str = "tworoom"
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class DataSettings:
    policy: str = "waypoint"
    n_traj: int = 200
    length: int = 64
    epsilon: float = 0.3


@dataclass(frozen=True)
class EvalSettings:
    n_groups: int = 5
    group_size: int = 50


@dataclass(frozen=True)
class BenchSettings:
    n_warmup: int = 5
    n_measured: int = 20


@dataclass(frozen=True)
class AnalysisSettings:
    analysis_K: int = 6
    n_segments: int = 200
    n_distortion: int = 500
    n_margin: int = 500
    n_preference: int = 10_000


# section name -> settings class; TrainConfig.seed is driven by the run seed
SECTIONS: dict[str, type] = {
    "run": RunSettings,
    "data": DataSettings,
    "train": TrainConfig,
    "weights": LossWeights,
    "planner": PlannerConfig,
    "eval": EvalSettings,
    "bench": BenchSettings,
    "analysis": AnalysisSettings,
}
SKIP = {("train", "seed")}


def _keys() -> dict[str, tuple[str, type, Any]]:
    """Flat key -> (section, field type, default). Keys are unique across sections."""
    out = {}
    for sec, cls in SECTIONS.items():
        for f in fields(cls):
            if (sec, f.name) in SKIP:
                continue
            if f.name in out:
                raise AssertionError(f"duplicate config key {f.name}")
            out[f.name] = (sec, f.type, f.default)
    return out


KEYS = _keys()


def parse_value(key: str, text: str):
    """Convert a config/flag string to the field's type."""
    _, typ, _ = KEYS[key]
    typ = str(typ)
    s = text.strip()
    try:
        if "tuple" in typ:
            if s.lower() in ("", "none"):
                return None
            return tuple(float(x) for x in s.split(","))
        if typ == "bool":
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        if typ == "int":
            return int(s)
        if typ == "float":
            return float(s)
        return s
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    def to_ini(self) -> str:
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            obj = getattr(self, sec)
            for f in fields(obj):
                if (sec, f.name) in SKIP:
                    continue
                lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


def read_config_file(path) -> dict[str, str]:
    """Flat key -> raw string from an INI file; unknown sections or keys are errors."""
    p = Path(path)
    if not p.exists():
        raise MissingFile(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (H, K, H_max)
    try:
        parser.read_string(p.read_text(), source=str(p))
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {p}: {e}".replace("\n", " ")) from None
    out = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}] in {p}")
        for key, val in parser.items(sec):
            if key not in KEYS or KEYS[key][0] != sec:
                raise ConfigError(f"unknown key {key!r} in section [{sec}] of {p}")
            out[key] = val
    return out


def resolve(file_values: dict[str, str], flag_values: dict[str, str],
            environ: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults < file < RCAUX_SEED < flags into a validated RunConfig."""
    environ = os.environ if environ is None else environ
    raw = dict(file_values)
    if "RCAUX_SEED" in environ:
        raw["seed"] = environ["RCAUX_SEED"]
    raw.update(flag_values)
    values = {k: parse_value(k, v) for k, v in raw.items()}
    per_section: dict[str, dict] = {sec: {} for sec in SECTIONS}
    for k, v in values.items():
        per_section[KEYS[k][0]][k] = v
    try:
        run = RunSettings(**per_section["run"])
        if run.env not in ENVS:
            raise ValueError(f"unknown env {run.env!r}; choose from {sorted(ENVS)}")
        data = DataSettings(**per_section["data"])
        if data.policy not in POLICIES:
            raise ValueError(f"unknown policy {data.policy!r}; choose from {POLICIES}")
        cfg = RunConfig(
            run=run,
            data=data,
            train=TrainConfig(**per_section["train"], seed=run.seed),
            weights=LossWeights(**per_section["weights"]),
            planner=profile(run.env, **per_section["planner"]),
            eval=EvalSettings(**per_section["eval"]),
            bench=BenchSettings(**per_section["bench"]),
            analysis=AnalysisSettings(**per_section["analysis"]),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def echo_config(cfg: RunConfig, command: str) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / f"config.{command}.ini"
    path.write_text(cfg.to_ini())
    return path


# --- file access with typed failures ------------------------------------------------


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingFile(f"file not found: {p}")
    return p


def open_dataset(path):
    try:
        return load_dataset(_need(path))
    except DatasetFormatError as e:
        raise VersionMismatch(f"{path}: {e}") from None


def open_checkpoint(path, cfg: RunConfig):
    try:
        model, extra = load_checkpoint(_need(path))
    except CheckpointFormatError as e:
        raise VersionMismatch(f"{path}: {e}") from None
    env = extra.get("env")
    if env is not None and env != cfg.run.env:
        raise VersionMismatch(f"{path} was trained on env {env!r}, config says {cfg.run.env!r}")
    return model, extra


# --- commands ---------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> Path:
    spec = make_env(cfg.run.env)
    d = cfg.data
    ds = generate_trajectories(spec, d.policy, d.n_traj, d.length, seed=cfg.run.seed,
                               epsilon=d.epsilon)
    out = Path(args.output) if args.output else cfg.out_dir / DATASET_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} trajectories to {out}")
    return out


def cmd_train(cfg: RunConfig, args) -> Path:
    ds = open_dataset(args.dataset or cfg.out_dir / DATASET_FILE)
    if ds.spec.name != cfg.run.env:
        raise VersionMismatch(f"dataset env {ds.spec.name!r} != config env {cfg.run.env!r}")
    out = Path(args.output) if args.output else cfg.out_dir / CHECKPOINT_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = out.with_name(out.stem + ".metrics.csv")
    res = fit(ds, cfg.train, cfg.weights, metrics_path=metrics)
    save_checkpoint(res.model, out, {"env": cfg.run.env, "mode": cfg.train.mode})
    last = res.metrics[-1] if res.metrics else {}
    print(f"wrote {out} and {metrics}; final loss {last.get('loss_total', float('nan')):.6f}")
    return out


def cmd_eval(cfg: RunConfig, args) -> Path:
    from .evaluate import (build_groups, evaluate_success, matched_delta, paired_outcomes,
                           write_results)

    ckpts = args.checkpoint or [str(cfg.out_dir / CHECKPOINT_FILE)]
    if len(ckpts) > 2:
        raise ConfigError("eval takes one or two checkpoints")
    names = args.method or [Path(c).stem for c in ckpts]
    if len(names) != len(ckpts) or len(set(names)) != len(names):
        raise ConfigError("need one distinct --method name per checkpoint")
    models = [open_checkpoint(c, cfg)[0] for c in ckpts]
    spec = make_env(cfg.run.env)
    groups = build_groups(spec, cfg.eval.n_groups, cfg.eval.group_size, seed=cfg.run.seed)
    reports = []
    for name, model in zip(names, models):
        rep = evaluate_success(spec, model, cfg.planner, groups, method=name)
        print(f"{name}: success {rep.mean:.4f} +- {rep.std:.4f} per group "
              f"{[round(r, 4) for r in rep.per_group]}")
        reports.append(rep)
    out = Path(args.output) if args.output else cfg.out_dir / "results.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results(reports, out)
    if len(reports) == 2:
        a, b = reports
        po = paired_outcomes(a, b)
        paired = out.with_name(out.stem + ".paired.csv")
        paired.write_text("a,b,both_fail,a_only,b_only,both_succeed,matched_delta_points\n"
                          f"{a.method},{b.method},{po.both_fail},{po.a_only},{po.b_only},"
                          f"{po.both_succeed},{matched_delta(a, b)!r}\n")
        print(f"paired {a.method} vs {b.method}: {po}; wrote {paired}")
    print(f"wrote {out}")
    return out


def cmd_analyze(cfg: RunConfig, args) -> Path:
    from . import analysis as an

    model, _ = open_checkpoint(args.checkpoint or cfg.out_dir / CHECKPOINT_FILE, cfg)
    ds = open_dataset(args.dataset or cfg.out_dir / DATASET_FILE)
    if ds.obs_dim != model.cfg.obs_dim:
        raise VersionMismatch(f"dataset obs_dim {ds.obs_dim} != checkpoint obs_dim "
                              f"{model.cfg.obs_dim}")
    a, seed = cfg.analysis, cfg.run.seed
    out_dir = Path(args.output) if args.output else cfg.out_dir / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    term, mh = an.check_cost_distortion(model, ds, H=cfg.planner.H, n_samples=a.n_distortion,
                                        seed=seed)
    margin = an.check_margin_robustness(model, ds, K=a.analysis_K, H_max=model.cfg.H_max,
                                        n=a.n_margin, seed=seed)
    reports = [
        an.check_compounding(model, ds, K=a.analysis_K, n_segments=a.n_segments, seed=seed),
        term, mh, margin.report,
        an.check_data_competitiveness(ds),
        an.check_preference_inequality(n=a.n_preference, m=cfg.planner.m, seed=seed),
    ]
    failed = []
    for r in reports:
        r.to_csv(out_dir / f"{r.name}.csv")
        print(f"{r.name}: {r.violations} violations over {len(r.measured)} samples")
        if r.violations:
            failed.append(r.name)
    if failed:
        raise CheckFailed(f"bound violations in {', '.join(failed)}")
    return out_dir


def cmd_bench(cfg: RunConfig, args) -> Path:
    from .evaluate import cost_call_benchmark, write_bench

    model, _ = open_checkpoint(args.checkpoint or cfg.out_dir / CHECKPOINT_FILE, cfg)
    spec = make_env(cfg.run.env)
    res = cost_call_benchmark(spec, model, cfg.planner, cfg.bench.n_warmup,
                              cfg.bench.n_measured, seed=cfg.run.seed)
    out = Path(args.output) if args.output else cfg.out_dir / "bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench(res, out)
    print(f"base {res.ms_base:.4f} ms/call, gated {res.ms_gated:.4f} ms/call, "
          f"overhead {100 * res.overhead:.1f}%")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcaux", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--output", help="output path (default: inside the run's out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "analyze"):
            p.add_argument("--dataset", help="dataset file")
        if name == "eval":
            p.add_argument("--checkpoint", action="append",
                           help="checkpoint to evaluate; give twice for a paired comparison")
            p.add_argument("--method", action="append", help="label per checkpoint")
        elif name in ("analyze", "bench"):
            p.add_argument("--checkpoint", help="checkpoint file")
        group = p.add_argument_group("settings (override the config file)")
        for key, (sec, _, _) in KEYS.items():
            group.add_argument(_flag(key), dest=f"set_{key}", metavar=sec.upper())
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_") and v is not None}
        cfg = resolve(file_values, flags)
        echo_config(cfg, args.command)
        COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"rcaux: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingFile as e:
        print(f"rcaux: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except VersionMismatch as e:
        print(f"rcaux: version mismatch: {e}", file=sys.stderr)
        return EXIT_VERSION
    except CheckFailed as e:
        print(f"rcaux: check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
