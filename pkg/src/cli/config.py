# src/cli/config.py

"""Run configuration: one YAML file, environment overrides, flag overrides.

Precedence, lowest first: file values, ``DILOCO_*`` environment variables
(a ``.env`` file in the working directory is loaded first), command-line
flags. Relative paths in the file resolve against the file's directory.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.core.errors import ConfigError
from src.core.transport import LinkFault, LinkSpec
from src.patterns.elastic import JoinMode
from src.pipelines.diloco import MeshConfig, TrainerConfig

logger = logging.getLogger(__name__)

ENV_METRICS_PATH = "DILOCO_METRICS_PATH"
ENV_SEED = "DILOCO_SEED"
ENV_COORDINATOR = "DILOCO_COORDINATOR"
ENV_LOG_LEVEL = "DILOCO_LOG_LEVEL"

ChurnAction = Literal[
    "join-blocking", "join-nonblocking", "leave", "crash", "degrade-link"
]
Role = Literal["coordinator", "worker", "simulate"]

JOIN_ACTIONS: Dict[str, JoinMode] = {
    "join-blocking": "blocking",
    "join-nonblocking": "nonblocking",
}


def parse_endpoint(endpoint: str) -> Tuple[str, int]:
    """Split ``host:port``.

    Raises:
        ConfigError: Missing port or a port that is not a number.
    """
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ConfigError("coordinator", f"expected host:port, got '{endpoint}'")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError("coordinator", f"port '{port}' is not a number") from None


# ---------------------------------------------------------------------------
# Churn scripts
# ---------------------------------------------------------------------------


class ChurnEvent(BaseModel):
    """One scripted membership or link change.

    Exactly one of ``step`` (fires at that outer-step boundary) or ``at``
    (simulated seconds) is set.
    """

    model_config = ConfigDict(extra="forbid")

    node: str = Field(..., min_length=1)
    action: ChurnAction
    step: Optional[int] = Field(default=None, ge=0)
    at: Optional[float] = Field(default=None, ge=0)
    peer: Optional[str] = Field(default=None, description="Far end of degrade-link")
    bandwidth_bps: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _check_shape(self) -> "ChurnEvent":
        if (self.step is None) == (self.at is None):
            raise ValueError(
                f"event for '{self.node}' needs exactly one of step, at"
            )
        if self.action == "degrade-link":
            if self.peer is None or self.bandwidth_bps is None:
                raise ValueError("degrade-link needs peer and bandwidth_bps")
        if self.step == 0 and (self.action in JOIN_ACTIONS or self.action == "leave"):
            raise ValueError(
                f"'{self.node}' cannot {self.action} at step 0; adjust the founders"
            )
        return self

    @property
    def join_mode(self) -> Optional[JoinMode]:
        return JOIN_ACTIONS.get(self.action)


class ChurnScript(BaseModel):
    """Ordered churn events; one YAML list entry per event."""

    events: List[ChurnEvent] = Field(default_factory=list)

    @model_validator(mode="after")
    def _nondecreasing(self) -> "ChurnScript":
        steps = [e.step for e in self.events if e.step is not None]
        times = [e.at for e in self.events if e.at is not None]
        if steps != sorted(steps):
            raise ValueError("step-keyed events must have nondecreasing steps")
        if times != sorted(times):
            raise ValueError("time-keyed events must have nondecreasing times")
        return self

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ChurnScript":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or []
        if isinstance(raw, list):
            raw = {"events": raw}
        return _validate(cls, raw, "churn")

    def check_nodes(self, founders: List[str]) -> None:
        """Every event must name a node that exists (or not, for joins) then.

        Raises:
            ValueError: On the first event that cannot be resolved.
        """
        live = set(founders)
        for event in self.events:
            if event.join_mode is not None:
                if event.node in live:
                    raise ValueError(f"'{event.node}' joins but is already running")
                live.add(event.node)
                continue
            if event.node not in live:
                raise ValueError(f"{event.action} names unknown node '{event.node}'")
            if event.action == "degrade-link" and event.peer not in live:
                raise ValueError(f"degrade-link names unknown peer '{event.peer}'")
            if event.action in ("leave", "crash"):
                live.discard(event.node)

    def by_step(self, step: int) -> List[ChurnEvent]:
        return [e for e in self.events if e.step == step]

    @property
    def timed(self) -> List[ChurnEvent]:
        return [e for e in self.events if e.at is not None]


# ---------------------------------------------------------------------------
# Simulation and run configuration
# ---------------------------------------------------------------------------


class LinkOverride(BaseModel):
    """Spec for one unordered node pair."""

    a: str
    b: str
    bandwidth_bps: float = Field(default=1e9, gt=0)
    latency_ms: float = Field(default=0.0, ge=0)
    faults: List[LinkFault] = Field(default_factory=list)

    def spec(self) -> LinkSpec:
        return LinkSpec(
            bandwidth_bps=self.bandwidth_bps,
            latency_ms=self.latency_ms,
            faults=self.faults,
        )


class SimConfig(BaseModel):
    """Everything the simulated transport needs."""

    model_config = ConfigDict(extra="forbid")

    initial_nodes: int = Field(default=4, ge=1, description="Founders node0..")
    node_prefix: str = Field(default="node", min_length=1)
    default_link: LinkSpec = Field(default_factory=LinkSpec)
    links: List[LinkOverride] = Field(default_factory=list)
    codec_bytes_per_second: Optional[float] = Field(default=None, gt=0)
    churn: Optional[str] = Field(default=None, description="Churn script path")
    churn_events: List[ChurnEvent] = Field(
        default_factory=list, description="Inline events, run after the file's"
    )
    resume_on_fatal: bool = Field(default=False)
    time_limit: float = Field(default=1e6, gt=0, description="Simulated seconds")

    def founders(self) -> List[str]:
        return [f"{self.node_prefix}{i}" for i in range(self.initial_nodes)]

    def link_table(self) -> Dict[Tuple[str, str], LinkSpec]:
        return {(link.a, link.b): link.spec() for link in self.links}

    def script(self) -> ChurnScript:
        events: List[ChurnEvent] = []
        if self.churn:
            events.extend(ChurnScript.load(self.churn).events)
        events.extend(self.churn_events)
        return ChurnScript(events=events)


class RunConfig(BaseModel):
    """One invocation's full configuration."""

    model_config = ConfigDict(extra="forbid")

    role: Role = Field(default="simulate")
    transport: Literal["tcp", "sim"] = Field(default="sim")
    coordinator: Optional[str] = Field(default=None, description="host:port")
    node_id: Optional[str] = Field(default=None)
    host: str = Field(default="127.0.0.1", description="Listen address (tcp)")
    port: int = Field(default=0, ge=0, le=65535, description="Listen port (tcp)")
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    sim: Optional[SimConfig] = Field(default=None)
    metrics_path: Optional[str] = Field(default=None)
    log_level: str = Field(default="INFO")

    @model_validator(mode="after")
    def _check_role(self) -> "RunConfig":
        if self.transport == "tcp" and self.sim is not None:
            raise ValueError("sim settings are only valid with transport: sim")
        if self.role == "simulate" and self.transport != "sim":
            raise ValueError("simulate runs on transport: sim")
        if self.role == "coordinator" and self.transport != "tcp":
            raise ValueError("coordinator runs on transport: tcp")
        if self.role == "worker":
            if self.transport != "tcp":
                raise ValueError("worker runs on transport: tcp")
            if not self.coordinator:
                raise ValueError("worker needs a coordinator endpoint")
            if not self.node_id:
                raise ValueError("worker needs a node_id")
        if self.coordinator:
            parse_endpoint(self.coordinator)
        if self.sim is not None:
            if self.sim.churn and not Path(self.sim.churn).is_file():
                raise ValueError(f"churn script '{self.sim.churn}' does not exist")
            if self.sim.resume_on_fatal and not self.trainer.checkpoint_every:
                raise ValueError("resume_on_fatal needs trainer.checkpoint_every")
            self.sim.script().check_nodes(self.sim.founders())
        return self

    @property
    def simulation(self) -> SimConfig:
        return self.sim or SimConfig()


def _field_of(exc: ValidationError) -> Tuple[str, str]:
    first = exc.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "config"
    return field, str(first["msg"])


def _validate(model: Any, data: Any, root: str) -> Any:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        field, message = _field_of(exc)
        raise ConfigError(f"{root}.{field}" if field != "config" else root, message)


def _resolve(base: Path, value: Optional[str]) -> Optional[str]:
    if value is None or Path(value).is_absolute():
        return value
    return str((base / value).resolve())


def _set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def _read_file(path: Path) -> Dict[str, Any]:
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError("config", f"cannot read '{path}': {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"'{path}' is not valid YAML: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("config", f"'{path}' must hold a mapping at top level")
    base = path.parent
    sim = raw.get("sim")
    if isinstance(sim, dict):
        sim["churn"] = _resolve(base, sim.get("churn"))
    trainer = raw.get("trainer")
    if isinstance(trainer, dict):
        trainer["checkpoint_dir"] = _resolve(base, trainer.get("checkpoint_dir"))
    raw["metrics_path"] = _resolve(base, raw.get("metrics_path"))
    return raw


def _env_overrides(env: Mapping[str, str]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if env.get(ENV_METRICS_PATH):
        overrides["metrics_path"] = env[ENV_METRICS_PATH]
    if env.get(ENV_SEED):
        try:
            overrides["trainer.seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(
                ENV_SEED, f"'{env[ENV_SEED]}' is not an integer"
            ) from None
    if env.get(ENV_COORDINATOR):
        overrides["coordinator"] = env[ENV_COORDINATOR]
    if env.get(ENV_LOG_LEVEL):
        overrides["log_level"] = env[ENV_LOG_LEVEL]
    return overrides


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Build a :class:`RunConfig` from file, environment and flags.

    Args:
        path: YAML file; omitted means all defaults.
        overrides: Dotted keys (``trainer.seed``) to values; ``None`` values
            are skipped so unset flags do not clobber the file.
        env: Environment to read; defaults to ``os.environ`` after loading
            ``.env``.

    Raises:
        ConfigError: Unreadable file or any validation failure, naming the
            offending field.
    """
    if env is None:
        load_dotenv()
        env = os.environ
    data: Dict[str, Any] = _read_file(Path(path)) if path is not None else {}
    layered = dict(_env_overrides(env))
    layered.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key, value in layered.items():
        _set_dotted(data, key, value)
    config: RunConfig = _validate(RunConfig, data, "config")
    logger.debug(f"loaded run config from {path or 'defaults'}: role={config.role}")
    return config
