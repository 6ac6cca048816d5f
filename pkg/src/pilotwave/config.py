"""Sectioned ``key = value`` scenario configuration.

::

    [run]
    scenario = relax
    seed = 1

    [relax]
    N = 100000
    t_end = 12.566370614359172

Lines starting with ``#`` or ``;`` are comments. Every problem (syntax,
unknown section or key, type mismatch, range violation) is collected with
its line number and reported together in one :class:`ConfigError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .io import config_hash

SCENARIOS = ("relax", "measure", "signal", "sterngerlach", "bohm-instability", "subq", "cosmo")
# keys that describe where and how fast a run happens, not what it computes
ENVIRONMENT_KEYS = ("workers", "out")

_STRICT = ConfigDict(extra="forbid", allow_inf_nan=False, frozen=True)
PI = math.pi


class RunSection(BaseModel):
    model_config = _STRICT
    scenario: Literal[SCENARIOS]
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, ge=1, le=256)
    out: str | None = None


def _mode_tuple(text, dims=None):
    parts = [p.strip() for p in str(text).split(",")]
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError("expected comma-separated integers") from None
    if dims is not None and len(vals) != dims:
        raise ValueError(f"expected {dims} integers")
    return vals


class RelaxSection(BaseModel):
    """Box ensemble relaxation (or preservation with ``initial = born``)."""

    model_config = _STRICT
    dimension: int = Field(2, ge=1, le=2)
    length: float = Field(PI, gt=0)
    max_mode: int = Field(4, ge=1, le=16)
    phase_seed: int = Field(7, ge=0)
    initial: Literal["eigen", "born"] = "eigen"
    initial_mode: str = "1,1"
    N: int = Field(100000, ge=1, le=10**8)
    cells: int = Field(32, ge=2, le=1024)
    t_end: float = Field(4 * PI, gt=0)
    n_times: int = Field(9, ge=2, le=10000)
    rtol: float = Field(1e-6, gt=0, lt=1)
    atol: float = Field(1e-8, gt=0, lt=1)
    n_boot: int = Field(64, ge=0, le=10000)

    @field_validator("initial_mode")
    @classmethod
    def _mode(cls, v):
        if min(_mode_tuple(v)) < 1:
            raise ValueError("box mode indices start at 1")
        return ",".join(str(i) for i in _mode_tuple(v))

    @model_validator(mode="after")
    def _mode_matches_dimension(self):
        if len(_mode_tuple(self.initial_mode)) != self.dimension:
            raise ValueError(f"initial_mode needs {self.dimension} indices")
        return self


class MeasureSection(BaseModel):
    """Pointer measurement of ``sqrt(w) e^{i n1 x} + sqrt(1 - w) e^{i n2 x}`` on a ring of length 2 pi."""

    model_config = _STRICT
    observable: Literal["momentum", "kinetic-energy"] = "momentum"
    modes: str = "1,-1"
    weight: float = Field(0.64, gt=0, lt=1)
    coupling: float = Field(1.0, gt=0)
    sigma: float = Field(0.1, gt=0)
    duration: float = Field(1.0, gt=0)
    N: int = Field(10000, ge=1, le=10**8)
    rtol: float = Field(1e-9, gt=0, lt=1)
    atol: float = Field(1e-11, gt=0, lt=1)

    @field_validator("modes")
    @classmethod
    def _two_modes(cls, v):
        a, b = _mode_tuple(v, 2)
        if a == b:
            raise ValueError("the two ring modes must differ")
        return f"{a},{b}"


class SignalSection(BaseModel):
    """Entangled pair with a field switch at B."""

    model_config = _STRICT
    force: float = 5.0
    switch_time: float = Field(1.0, ge=0)
    t_probe: float = Field(3.0, gt=0)
    field_modes: int = Field(16, ge=2, le=256)
    spec: Literal["equilibrium", "nonequilibrium"] = "nonequilibrium"
    N: int = Field(100000, ge=1, le=10**8)
    cells: int = Field(32, ge=2, le=1024)
    n_null: int = Field(200, ge=1, le=100000)


class SternGerlachSection(BaseModel):
    model_config = _STRICT
    up_weight: float = Field(0.5, ge=0, le=1)
    width: float = Field(1.0, gt=0)
    kick: float = Field(4.0, gt=0)
    t_end: float = Field(3.0, gt=0)
    N: int = Field(1000, ge=1, le=10**8)


class BohmSection(BaseModel):
    """Bohm ensemble started off the guidance surface ``p = grad S + kick``."""

    model_config = _STRICT
    max_mode: int = Field(4, ge=1, le=16)
    phase_seed: int = Field(7, ge=0)
    kick: float = 0.1
    N: int = Field(200, ge=1, le=10**7)
    periods: float = Field(10.0, gt=0)
    n_times: int = Field(11, ge=2, le=10000)
    cells: int = Field(32, ge=2, le=1024)


class SubqSection(BaseModel):
    """Position measurement with a narrow nonequilibrium pointer ensemble."""

    model_config = _STRICT
    sigma: float = Field(50.0, gt=0)
    width: float = Field(0.5, gt=0)
    a_dt: float = Field(1.0, gt=0)
    N: int = Field(1000, ge=1, le=10**8)


class CosmoSection(BaseModel):
    model_config = _STRICT
    expansion: Literal["static", "de-sitter", "power-law"] = "de-sitter"
    hubble: float = Field(1.0, ge=0)
    a0: float = Field(1.0, gt=0)
    t0: float = Field(1.0, gt=0)
    power: float = Field(0.5, gt=0)
    k: float = Field(10.0, gt=0)
    levels: int = Field(24, ge=4, le=128)
    superposed: int = Field(3, ge=1, le=8)
    phase_seed: int = Field(3, ge=0)
    initial: Literal["ground", "born"] = "ground"
    N: int = Field(10000, ge=1, le=10**8)
    cells: int = Field(16, ge=2, le=1024)
    t_start: float = 0.0
    t_end: float = Field(0.5, gt=0)
    n_times: int = Field(9, ge=2, le=10000)


SECTIONS = {
    "relax": RelaxSection,
    "measure": MeasureSection,
    "signal": SignalSection,
    "sterngerlach": SternGerlachSection,
    "bohm-instability": BohmSection,
    "subq": SubqSection,
    "cosmo": CosmoSection,
}


@dataclass(frozen=True)
class ScenarioConfig:
    run: RunSection
    params: BaseModel

    @property
    def scenario(self):
        return self.run.scenario

    @property
    def seed(self):
        return self.run.seed

    @property
    def workers(self):
        return self.run.workers

    def replace_run(self, **changes):
        data = self.run.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        return ScenarioConfig(RunSection(**data), self.params)

    def canonical(self, include_environment=True) -> str:
        """Full config text with every key present, in declaration order."""
        lines = ["[run]"]
        for key, val in self.run.model_dump().items():
            if val is None or (not include_environment and key in ENVIRONMENT_KEYS):
                continue
            lines.append(f"{key} = {_render(val)}")
        lines += ["", f"[{self.scenario}]"]
        for key, val in self.params.model_dump().items():
            lines.append(f"{key} = {_render(val)}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self):
        """Hash of the canonical text without the worker count and output location."""
        return config_hash(self.canonical(include_environment=False))


def _render(val):
    if isinstance(val, float):
        return repr(val)
    return str(val)


def _lex(text):
    """Sections as ``{name: (header_line, {key: (value, line)})}`` plus syntax violations."""
    sections = {}
    violations = []
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                violations.append((no, f"malformed section header {line!r}"))
                current = None
                continue
            name = line[1:-1].strip()
            if name in sections:
                violations.append((no, f"duplicate section [{name}]"))
            sections.setdefault(name, (no, {}))
            current = name
            continue
        if "=" not in line:
            violations.append((no, f"expected 'key = value', got {line!r}"))
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if current is None:
            violations.append((no, f"key {key!r} outside any section"))
            continue
        if not key:
            violations.append((no, "empty key"))
            continue
        entries = sections[current][1]
        if key in entries:
            violations.append((no, f"duplicate key {key!r} in [{current}]"))
            continue
        entries[key] = (val, no)
    return sections, violations


def _validate(model, section, header_line, entries, violations):
    data = {k: v for k, (v, _) in entries.items()}
    try:
        return model(**data)
    except ValidationError as exc:
        for err in exc.errors():
            key = str(err["loc"][0]) if err["loc"] else ""
            line = entries[key][1] if key in entries else header_line
            if err["type"] == "extra_forbidden":
                msg = f"unknown key {key!r} in [{section}]"
            elif err["type"] == "missing":
                msg = f"missing required key {key!r} in [{section}]"
            else:
                msg = f"[{section}] {key}: {err['msg']} (got {data.get(key)!r})"
            violations.append((line, msg))
        return None


def parse_config(text: str, scenario: str | None = None) -> ScenarioConfig:
    """Validate config text; ``scenario`` fills in or must match ``[run] scenario``."""
    sections, violations = _lex(text)
    run_line, run_entries = sections.get("run", (0, {}))
    run_entries = dict(run_entries)
    if scenario is not None:
        given = run_entries.get("scenario")
        if given is not None and given[0] != scenario:
            violations.append((given[1], f"config scenario {given[0]!r} does not match requested {scenario!r}"))
        run_entries.setdefault("scenario", (scenario, run_line))
    for name, (line, _) in sections.items():
        if name != "run" and name not in SECTIONS:
            violations.append((line, f"unknown section [{name}]"))
    run = _validate(RunSection, "run", run_line, run_entries, violations)
    params = None
    chosen = run_entries.get("scenario", (None, 0))[0]
    if chosen in SECTIONS:
        for name, (line, _) in sections.items():
            if name in SECTIONS and name != chosen:
                violations.append((line, f"section [{name}] does not belong to scenario {chosen!r}"))
        line, entries = sections.get(chosen, (run_line, {}))
        params = _validate(SECTIONS[chosen], chosen, line, entries, violations)
    if violations:
        raise ConfigError(sorted(violations))
    return ScenarioConfig(run, params)


def default_config(scenario: str) -> ScenarioConfig:
    return parse_config("", scenario)


def mode_tuple(text, dims=None):
    """Public parser for comma-separated mode indices (``"1,1"`` -> ``(1, 1)``)."""
    return _mode_tuple(text, dims)
