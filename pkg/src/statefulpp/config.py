"""Scenario configuration: YAML in, fully resolved dataclasses out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1
SCENARIOS = ("scalar", "credit_gdr", "credit_kgroups", "credit_stateless")


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    n: int = 1000
    p: int = 5
    class_balance: float = 0.5
    separation: float = 1.0


@dataclass
class CsvSpec:
    path: str = ""
    label_column: str = "SeriousDlqin2yrs"
    feature_columns: list | None = None
    subsample: list | None = None
    negative_subsample: list | None = None


@dataclass
class DatasetConfig:
    synthetic: SyntheticSpec | None = None
    csv: CsvSpec | None = None
    normalize: bool = True
    strategic_columns: list | None = None


@dataclass
class EngineSection:
    max_iters: int | None = None
    conv_tol: float | None = None
    divergence_ceiling: float = 1e9
    oscillation_window: int = 10
    oscillation_rel_tol: float = 1e-3


@dataclass
class MinimizerSection:
    tolerance: float = 1e-8
    max_steps: int = 100_000
    step_rule: str = "fixed"


@dataclass
class Seeds:
    partition: int = 0
    synthetic: int = 0
    probes: int = 0


@dataclass
class OutputSection:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["jsonl", "csv"])


@dataclass
class VerifySection:
    n_probes: int = 1000
    rate_steps: int = 30
    grid_step: float = 0.01


@dataclass
class ScenarioConfig:
    scenario: str
    epsilon: list
    delta: float | None = None
    k: int | None = None
    lam: float = 1.0
    penalize_intercept: bool = True
    d0: float = 5.0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    engine: EngineSection = field(default_factory=EngineSection)
    minimizer: MinimizerSection = field(default_factory=MinimizerSection)
    seeds: Seeds = field(default_factory=Seeds)
    output: OutputSection = field(default_factory=OutputSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out


_SECTIONS = {
    "dataset": DatasetConfig,
    "engine": EngineSection,
    "minimizer": MinimizerSection,
    "seeds": Seeds,
    "output": OutputSection,
    "verify": VerifySection,
}


class _Lines:
    """Key path -> line number lookup built from the YAML node tree."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.lines: dict[tuple, int] = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError:
            node = None
        if node is not None:
            self._walk(node, ())

    def _walk(self, node, path):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                p = path + (key.value,)
                self.lines[p] = key.start_mark.line + 1
                self._walk(value, p)

    def error(self, path: tuple, message: str) -> ConfigError:
        for cut in range(len(path), 0, -1):
            if path[:cut] in self.lines:
                return ConfigError(f"{self.source}:{self.lines[path[:cut]]}: {message}")
        # a missing key has no line; point at the scenario that requires it
        if ("scenario",) in self.lines:
            return ConfigError(f"{self.source}:{self.lines[('scenario',)]}: {message}")
        return ConfigError(f"{self.source}: {message}")


def _build(cls, raw, path, lines: _Lines):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise lines.error(path, f"section {'.'.join(path)} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise lines.error(path + (unknown[0],), f"unknown key {'.'.join(path + (unknown[0],))!r}")
    kwargs = dict(raw)
    if cls is DatasetConfig:
        if raw.get("synthetic") is not None or "synthetic" in raw:
            kwargs["synthetic"] = _build(SyntheticSpec, raw.get("synthetic"), path + ("synthetic",), lines)
        if raw.get("csv") is not None:
            kwargs["csv"] = _build(CsvSpec, raw["csv"], path + ("csv",), lines)
    return cls(**kwargs)


def parse_config(text: str, source: str = "<config>", epsilon_override=None) -> ScenarioConfig:
    lines = _Lines(text, source)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    raw = dict(raw)
    if "lambda" in raw:
        lines.lines[("lam",)] = lines.lines.get(("lambda",), 0)
        raw["lam"] = raw.pop("lambda")

    scenario = raw.get("scenario")
    if scenario not in SCENARIOS:
        raise lines.error(("scenario",), f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")

    top = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise lines.error((unknown[0],), f"unknown key {unknown[0]!r}")

    kwargs: dict[str, Any] = {k: v for k, v in raw.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, raw.get(name), (name,), lines)

    eps = epsilon_override if epsilon_override is not None else raw.get("epsilon")
    if eps is None:
        raise lines.error(("epsilon",), "epsilon is required (a number or a list)")
    eps = eps if isinstance(eps, list) else [eps]
    try:
        eps = [float(e) for e in eps]
    except (TypeError, ValueError):
        raise lines.error(("epsilon",), f"epsilon values must be numbers, got {eps!r}") from None
    if not eps or any(not (e >= 0) or e != e or e == float("inf") for e in eps):
        raise lines.error(("epsilon",), f"epsilon values must be finite and >= 0, got {eps!r}")
    kwargs["epsilon"] = eps

    try:
        cfg = ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    _resolve_defaults(cfg)
    _validate(cfg, lines)
    return cfg


def load_config(path, epsilon_override=None) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return parse_config(text, str(path), epsilon_override)


def _resolve_defaults(cfg: ScenarioConfig):
    scalar = cfg.scenario == "scalar"
    if cfg.engine.max_iters is None:
        cfg.engine.max_iters = 10_000 if scalar else 100
    if cfg.engine.conv_tol is None:
        cfg.engine.conv_tol = 1e-7 if scalar else 1e-5
    if cfg.scenario == "credit_stateless" and cfg.delta is None:
        cfg.delta = 1.0
    if not scalar and cfg.dataset.synthetic is None and cfg.dataset.csv is None:
        cfg.dataset.synthetic = SyntheticSpec()
    if cfg.dataset.csv is not None and cfg.dataset.csv.feature_columns is None:
        from .data import GMSC_FEATURES

        cfg.dataset.csv.feature_columns = list(GMSC_FEATURES)


def _validate(cfg: ScenarioConfig, lines: _Lines):
    def need(cond, path, msg):
        if not cond:
            raise lines.error(path, msg)

    if cfg.scenario == "credit_gdr":
        need(cfg.delta is not None, ("delta",), "credit_gdr needs delta")
    elif cfg.scenario != "credit_stateless":
        need(cfg.delta is None, ("delta",), f"delta is only used by credit_gdr, not {cfg.scenario}")
    if cfg.delta is not None:
        need(0.0 <= float(cfg.delta) <= 1.0, ("delta",), f"delta must lie in [0, 1], got {cfg.delta!r}")
    if cfg.scenario == "credit_kgroups":
        need(isinstance(cfg.k, int) and cfg.k >= 1, ("k",), "credit_kgroups needs a positive integer k")
    else:
        need(cfg.k is None, ("k",), f"k is only used by credit_kgroups, not {cfg.scenario}")
    need(cfg.lam >= 0, ("lam",), "lambda must be nonnegative")
    need(cfg.d0 >= 1, ("d0",), "d0 must be >= 1")
    need(cfg.engine.max_iters >= 1, ("engine", "max_iters"), "max_iters must be >= 1")
    need(cfg.engine.conv_tol > 0, ("engine", "conv_tol"), "conv_tol must be positive")
    need(cfg.minimizer.step_rule in ("fixed", "backtracking"), ("minimizer", "step_rule"),
         f"unknown step rule {cfg.minimizer.step_rule!r}")
    need(set(cfg.output.formats) <= {"jsonl", "csv"}, ("output", "formats"),
         f"unknown output format in {cfg.output.formats!r}")
    if cfg.scenario != "scalar":
        need(cfg.lam > 0, ("lam",), "credit scenarios need lambda > 0 for strong convexity")
        need(bool(cfg.dataset.strategic_columns), ("dataset", "strategic_columns"),
             "credit scenarios need dataset.strategic_columns (no default)")
        need(cfg.dataset.synthetic is None or cfg.dataset.csv is None, ("dataset",),
             "choose either dataset.synthetic or dataset.csv, not both")
        if cfg.dataset.csv is not None:
            need(bool(cfg.dataset.csv.path), ("dataset", "csv", "path"), "dataset.csv.path is required")
