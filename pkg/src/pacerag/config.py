"""Run configuration: an INI file with [run], [backend], [generation], [retrieval] and [paths].

Values from the file are overridden by environment variables
(``PACERAG_BACKEND_URL``, ``PACERAG_MODEL``) and then by command-line
flags. API keys are read from ``PACERAG_API_KEY`` only and never written
back to an effective-config file.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from pacerag.cohort import SplitSpec
from pacerag.evaluation import DEFAULT_SEEDS
from pacerag.llm import PROFILES, BackendDescriptor, GenerationParams
from pacerag.pipeline import METHODS, PipelineConfig
from pacerag.retrieval import RetrievalParams

ENV_URL = "PACERAG_BACKEND_URL"
ENV_KEY = "PACERAG_API_KEY"
ENV_MODEL = "PACERAG_MODEL"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    flavor: str = "soap"
    method: str = "pace"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    backbone: str = ""
    min_visit_index: int = 1
    limit: int = 0
    averaging: str = "macro"
    with_summary: bool = True
    refine_with_guidelines: bool = False


@dataclass(frozen=True)
class BackendSection:
    kind: str = "scripted"
    url: str = ""
    model: str = ""
    script: str = ""
    timeout: float = 120.0
    retries: int = 3
    parallelism: int = 4
    max_attempts: int = 3


@dataclass(frozen=True)
class GenerationSection:
    profile: str = "qwen"
    temperature: float = 0.6
    max_tokens: int = 220
    context_window: int = 4096


@dataclass(frozen=True)
class RetrievalSection:
    k: int = 7
    tau: float = 0.9
    focus_cap: int = 2
    embedder: str = "hashing:384:0"
    scope: str = "latest"
    segmentation: str = "field"
    guideline_k: int = 3
    guideline_tau: float = 0.3
    chunk_size: int = 1200
    chunk_overlap: int = 200


@dataclass(frozen=True)
class PathsSection:
    cohort: str = ""
    guidelines: str = ""
    index_dir: str = ""
    runs_dir: str = "runs"
    split_mode: str = "ratio"
    split_value: float = 0.8
    split_seed: int = 42


_SECTIONS = {
    "run": RunSection,
    "backend": BackendSection,
    "generation": GenerationSection,
    "retrieval": RetrievalSection,
    "paths": PathsSection,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    backend: BackendSection = field(default_factory=BackendSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    paths: PathsSection = field(default_factory=PathsSection)
    # Directory the config file was read from; relative paths resolve against it.
    base_dir: str = field(default="", compare=False)

    def __post_init__(self):
        validate(self)

    # -- derived views ---------------------------------------------------

    @property
    def backbone(self) -> str:
        if self.run.backbone:
            return self.run.backbone
        return self.backend.model or self.backend.kind

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir:
            p = Path(self.base_dir) / p
        return p

    def generation_params(self, seed: int) -> GenerationParams:
        g = self.generation
        return GenerationParams(g.temperature, g.max_tokens, g.context_window, seed)

    def pipeline_config(self, seed: int) -> PipelineConfig:
        r = self.retrieval
        return PipelineConfig(
            flavor=self.run.flavor,
            params=self.generation_params(seed),
            retrieval=RetrievalParams(r.k, r.tau),
            guideline_retrieval=RetrievalParams(r.guideline_k, r.guideline_tau),
            focus_cap=r.focus_cap,
            max_attempts=self.backend.max_attempts,
            with_summary=self.run.with_summary,
            refine_with_guidelines=self.run.refine_with_guidelines,
        )

    def split_spec(self) -> SplitSpec:
        p = self.paths
        value = int(p.split_value) if p.split_mode == "fixed-test-count" else p.split_value
        return SplitSpec(p.split_mode, value, p.split_seed)

    def backend_descriptor(self) -> BackendDescriptor:
        b = self.backend
        return BackendDescriptor(b.kind, b.url, b.model, str(self.resolve(b.script)) if b.script else "",
                                 os.environ.get(ENV_KEY, ""), b.timeout, b.retries, b.parallelism)

    # -- updates -----------------------------------------------------------

    def with_updates(self, section: str, **values) -> "RunConfig":
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        return replace(self, **{section: replace(getattr(self, section), **values)})

    def absolute_paths(self) -> "RunConfig":
        """Copy with every file path made absolute, so the file can live anywhere."""
        def absolute(path: str) -> str:
            return str(self.resolve(path).resolve()) if path else ""

        cfg = self.with_updates("backend", script=absolute(self.backend.script))
        return cfg.with_updates("paths", cohort=absolute(self.paths.cohort),
                                guidelines=absolute(self.paths.guidelines),
                                index_dir=absolute(self.paths.index_dir), runs_dir=absolute(self.paths.runs_dir))

    def with_seeds(self, seeds) -> "RunConfig":
        return self.with_updates("run", seeds=tuple(int(s) for s in seeds))

    # -- INI ----------------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in _SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(cls, name: str, raw: str, where: str):
    default = getattr(cls(), name)
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace(";", ",").split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{where}: bad value {raw!r} for {name}") from None
    return raw.strip()


def from_ini(text: str, base_dir: str = "", source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sections = {}
    for name, cls in _SECTIONS.items():
        known = {f.name for f in fields(cls)}
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key [{name}] {key}")
                values[key] = _coerce(cls, key, raw, f"{source} [{name}]")
        # A chosen profile supplies generation defaults that explicit keys override.
        if name == "generation" and "profile" in values:
            prof = values["profile"]
            if prof not in PROFILES:
                raise ConfigError(f"{source}: unknown generation profile {prof!r}")
            p = PROFILES[prof]
            values = {"temperature": p.temperature, "max_tokens": p.max_tokens,
                      "context_window": p.context_window, **values}
        sections[name] = cls(**values)
    extra = set(cp.sections()) - set(_SECTIONS)
    if extra:
        raise ConfigError(f"{source}: unknown sections {sorted(extra)}")
    return RunConfig(**sections, base_dir=base_dir)


def load_config(path: str | Path | None = None, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    if path is None:
        cfg = RunConfig()
    else:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = from_ini(text, base_dir=str(path.parent.resolve()), source=str(path))
    if env.get(ENV_URL):
        cfg = cfg.with_updates("backend", url=env[ENV_URL])
    if env.get(ENV_MODEL):
        cfg = cfg.with_updates("backend", model=env[ENV_MODEL])
    return cfg


def validate(cfg: RunConfig) -> None:
    r, b, g, q, p = cfg.run, cfg.backend, cfg.generation, cfg.retrieval, cfg.paths
    if r.flavor not in ("soap", "diagnosis"):
        raise ConfigError(f"unknown flavor {r.flavor!r}")
    if r.method not in METHODS:
        raise ConfigError(f"unknown method {r.method!r}; known: {', '.join(METHODS)}")
    if not r.seeds or len(set(r.seeds)) != len(r.seeds):
        raise ConfigError("seeds must be a non-empty list of distinct integers")
    if r.averaging not in ("macro", "micro"):
        raise ConfigError(f"unknown averaging {r.averaging!r}")
    if r.min_visit_index < 0 or r.limit < 0:
        raise ConfigError("min_visit_index and limit must be >= 0")
    if b.kind not in ("scripted", "http", "replay"):
        raise ConfigError(f"unknown backend kind {b.kind!r}")
    if b.parallelism < 1 or b.retries < 1 or b.max_attempts < 1:
        raise ConfigError("parallelism, retries and max_attempts must be >= 1")
    if g.profile not in PROFILES:
        raise ConfigError(f"unknown generation profile {g.profile!r}")
    if g.temperature < 0 or g.max_tokens < 1 or g.context_window < 1:
        raise ConfigError("bad generation parameters")
    if q.k < 1 or q.guideline_k < 1:
        raise ConfigError("k must be >= 1")
    if not (-1.0 <= q.tau <= 1.0 and -1.0 <= q.guideline_tau <= 1.0):
        raise ConfigError("tau must lie in [-1, 1]")
    if q.focus_cap < 0:
        raise ConfigError("focus_cap must be >= 0")
    if q.scope not in ("latest", "all") or q.segmentation not in ("field", "sentence"):
        raise ConfigError("scope must be latest|all and segmentation field|sentence")
    if q.chunk_size < 1 or not 0 <= q.chunk_overlap < q.chunk_size:
        raise ConfigError("need chunk_size >= 1 and 0 <= chunk_overlap < chunk_size")
    if p.split_mode not in ("ratio", "fixed-test-count"):
        raise ConfigError(f"unknown split mode {p.split_mode!r}")


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.axis not in ("k", "tau"):
            raise ConfigError(f"sweep axis must be k or tau, not {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        for v in self.values:
            if self.axis == "k" and (v != int(v) or v < 1):
                raise ConfigError(f"k values must be positive integers, got {v}")
            if self.axis == "tau" and not -1.0 <= v <= 1.0:
                raise ConfigError(f"tau values must lie in [-1, 1], got {v}")

    @classmethod
    def parse(cls, axis: str, values: str) -> "SweepSpec":
        try:
            parsed = tuple(float(v) for v in values.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"bad sweep values {values!r}") from None
        return cls(axis, parsed)

    def apply(self, cfg: RunConfig, value: float) -> RunConfig:
        if self.axis == "k":
            return cfg.with_updates("retrieval", k=int(value))
        return cfg.with_updates("retrieval", tau=float(value))

    def label(self, value: float) -> str:
        return f"k={int(value)}" if self.axis == "k" else f"tau={value:g}"
