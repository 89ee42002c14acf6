"""
Experiment configuration documents.

Complex numbers are written either as plain reals or as ``[re, im]``
pairs. Matrices that may be complex (regressor covariances) accept either
a real nested list or ``{"re": ..., "im": ...}``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, ValidationError,
                      field_validator, model_validator)

from . import channel as ch
from .combiners import COMBINERS
from .topology import NetworkTopology, TopologyError, generate_topology, load_topology


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` is a dotted path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
        self.message = message


Scalar = Union[float, list]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeneratedTopology(_Model):
    seed: int = 0
    node_count: int = Field(10, ge=1)
    r_o: float = Field(0.5, gt=0)
    region_side: float = Field(1.0, gt=0)


class TopologySource(_Model):
    """Exactly one of ``generate``, ``file`` or ``inline``."""

    generate: Optional[GeneratedTopology] = None
    file: Optional[str] = None
    inline: Optional[dict[str, Any]] = None

    @model_validator(mode="after")
    def _one_source(self):
        given = [n for n in ("generate", "file", "inline") if getattr(self, n) is not None]
        if len(given) != 1:
            raise ValueError("give exactly one of 'generate', 'file' or 'inline'")
        return self


class ChannelConfig(_Model):
    tx_power: float = Field(1.0, gt=0)
    pathloss_exp: float = Field(2.5, gt=0)
    fading_var: Scalar = 1.0
    chan_noise_var: Scalar = 0.01
    sinr_threshold_db: float = -10.0
    ideal: bool = False


class NodeConfig(_Model):
    step_size: Scalar = 0.01
    meas_noise_var: Scalar = 0.01
    regressor_cov: Union[float, list, dict[str, Any]] = 1.0


class CombinerConfig(_Model):
    names: list[str] = Field(default_factory=lambda: list(COMBINERS))
    adaptive_tau: float = Field(0.1, gt=0, lt=1)
    adaptive_init: float = Field(1.0, gt=0)

    @field_validator("names")
    @classmethod
    def _known(cls, v):
        if not v:
            raise ValueError("at least one combiner is required")
        bad = [n for n in v if n not in COMBINERS]
        if bad:
            raise ValueError(f"unknown combiner(s) {bad}; choose from {list(COMBINERS)}")
        return v


def _parse_complex(x) -> complex:
    if isinstance(x, bool):
        raise ValueError("booleans are not numbers")
    if isinstance(x, (int, float)):
        return complex(x)
    if isinstance(x, (list, tuple)) and len(x) == 2 and all(
            isinstance(p, (int, float)) and not isinstance(p, bool) for p in x):
        return complex(x[0], x[1])
    raise ValueError("complex values are written as a number or [re, im]")


class ExperimentConfig(_Model):
    topology: TopologySource = Field(default_factory=lambda: TopologySource(
        generate=GeneratedTopology()))
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    nodes: NodeConfig = Field(default_factory=NodeConfig)
    truth: list[Any] = Field(default_factory=lambda: [[1.0, 1.0], [-0.5, -0.5]])
    dim: Optional[int] = Field(None, ge=1)
    horizon: int = Field(2000, ge=1)
    trials: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    combiners: CombinerConfig = Field(default_factory=CombinerConfig)
    equalizers: list[Literal["zf", "mmse", "none"]] = Field(default_factory=lambda: ["zf", "mmse"])
    theory: bool = True
    moment_samples: int = Field(100_000, ge=1)
    bound_constant: Optional[float] = Field(None, gt=0)
    tail_window: Optional[int] = Field(None, ge=1)
    output_dir: str = "results"
    workers: int = Field(1, ge=1)

    @field_validator("truth")
    @classmethod
    def _truth(cls, v):
        if not v:
            raise ValueError("truth must have at least one entry")
        for i, x in enumerate(v):
            try:
                _parse_complex(x)
            except ValueError as exc:
                raise ValueError(f"entry {i}: {exc}") from None
        return v

    @field_validator("equalizers")
    @classmethod
    def _eqs(cls, v):
        if not v:
            raise ValueError("at least one equalizer is required")
        if len(set(v)) != len(v):
            raise ValueError("equalizers must be distinct")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.dim is not None and self.dim != len(self.truth):
            raise ValueError(f"dim={self.dim} but truth has {len(self.truth)} entries")
        if self.tail_window is not None and self.tail_window > self.horizon:
            raise ValueError("tail_window must not exceed horizon")
        return self

    # -- derived objects -------------------------------------------------

    @property
    def truth_vector(self) -> np.ndarray:
        return np.array([_parse_complex(x) for x in self.truth])

    @property
    def window(self) -> int:
        return self.tail_window if self.tail_window is not None else max(1, self.horizon // 5)

    def build_topology(self) -> NetworkTopology:
        src = self.topology
        try:
            if src.generate is not None:
                g = src.generate
                return generate_topology(g.seed, g.node_count, g.r_o, g.region_side)
            if src.file is not None:
                path = Path(src.file)
                try:
                    text = path.read_text()
                except OSError as exc:
                    raise ConfigError("topology.file", f"cannot read {path}: {exc.strerror}") from exc
                return load_topology(text)
            return load_topology(src.inline)
        except TopologyError as exc:
            where = "topology." + next(n for n in ("generate", "file", "inline")
                                       if getattr(src, n) is not None)
            raise ConfigError(where, str(exc)) from exc

    def build_channel(self, K: int) -> ch.ChannelParams:
        c = self.channel
        try:
            return ch.ChannelParams.build(
                K, tx_power=c.tx_power, pathloss_exp=c.pathloss_exp,
                fading_var=np.asarray(c.fading_var, dtype=float),
                chan_noise_var=np.asarray(c.chan_noise_var, dtype=float),
                sinr_threshold_db=c.sinr_threshold_db, ideal=c.ideal)
        except (ch.ChannelError, ValueError) as exc:
            raise ConfigError("channel", str(exc)) from exc

    def regressor_cov_array(self) -> np.ndarray:
        rc = self.nodes.regressor_cov
        try:
            if isinstance(rc, dict):
                if set(rc) - {"re", "im"} or "re" not in rc:
                    raise ValueError("object form needs 're' and optional 'im'")
                re = np.asarray(rc["re"], dtype=float)
                im = np.asarray(rc.get("im", np.zeros_like(re)), dtype=float)
                if re.shape != im.shape:
                    raise ValueError("'re' and 'im' shapes differ")
                return re + 1j * im
            return np.asarray(rc, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError("nodes.regressor_cov", str(exc)) from exc

    def with_overrides(self, **changes) -> "ExperimentConfig":
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        return parse_config(data)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _format_loc(loc) -> str:
    parts = []
    for p in loc:
        if isinstance(p, int):
            parts.append(f"[{p}]")
        else:
            parts.append(("." if parts else "") + str(p))
    return "".join(parts)


def parse_config(document: dict | str) -> ExperimentConfig:
    """Validate a configuration document (or its JSON text)."""
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"config is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError("", "config must be a JSON object")
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        err = exc.errors()[0]
        msg = err["msg"].removeprefix("Value error, ")
        raise ConfigError(_format_loc(err["loc"]), msg) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"config is not valid JSON: {exc}") from exc
    # topology files are resolved relative to the config file
    topo = doc.get("topology") if isinstance(doc, dict) else None
    if isinstance(topo, dict) and isinstance(topo.get("file"), str):
        f = Path(topo["file"])
        if not f.is_absolute():
            topo["file"] = str((path.parent / f).resolve())
    return parse_config(doc)


def reference_config() -> ExperimentConfig:
    """The bundled K=10, M=2 reference experiment."""
    from importlib.resources import files

    return parse_config((files("wdlms") / "data" / "reference_config.json").read_text())
