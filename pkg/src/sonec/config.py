"""Experiment configuration and the flat ``key = value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

ALGORITHMS = ("dlms_nl", "dlms_clean", "sonec_fd", "sonec_sd", "sonec_comb_only")


class ConfigError(ValueError):
    """Raised for malformed config files, unknown keys and range violations."""


@dataclass(frozen=True)
class ExperimentConfig:
    n_nodes: int = 16
    L: int = 20
    n_iters: int = 1000
    n_runs: int = 100
    mu: float = 0.01
    mu_b: float = 0.005
    b_max: float = 0.4
    sigma_theta: float = 0.045
    sigma_v: float = 0.0
    sigma_eta: float = 0.0
    sigma_u: float = 1.0
    topology_degree: int = 4
    pilot_len: int = 200
    link_nonlinearity: bool = False
    normalize_omega: bool = True
    algorithms: tuple[str, ...] = ALGORITHMS
    master_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_nodes", "L", "n_iters", "n_runs", "pilot_len", "topology_degree"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("mu", "mu_b", "b_max", "sigma_u"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("sigma_theta", "sigma_v", "sigma_eta"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.n_nodes > 1 and self.topology_degree >= self.n_nodes:
            raise ConfigError(f"topology_degree must be < n_nodes ({self.n_nodes}), got {self.topology_degree}")
        if not self.algorithms:
            raise ConfigError("algorithms must name at least one algorithm")
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown:
            raise ConfigError(f"algorithms: unknown name(s) {unknown}; choose from {list(ALGORITHMS)}")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError(f"master_seed must be an unsigned 64-bit integer, got {self.master_seed}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


def _convert(key: str, text: str):
    kind = _FIELDS[key].type
    if kind == "int":
        return int(text, 0)
    if kind == "float":
        return float(text)
    if kind == "bool":
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected on/off, got {text!r}")
    # tuple of algorithm names
    return tuple(part.strip() for part in text.replace(",", " ").split() if part.strip())


def parse_config_text(text: str, source: str = "<config>", **overrides) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keyword ``overrides`` (e.g. from CLI flags) are applied last. Unknown keys,
    duplicate keys and unparsable values raise :class:`ConfigError` with the
    offending line.
    """
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown override {key!r}")
        if value is not None:
            values[key] = value
    return ExperimentConfig(**values)


def parse_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Load a config file (or just defaults when ``path`` is None)."""
    if path is None:
        return parse_config_text("", **overrides)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, source=str(path), **overrides)


def format_config(config: ExperimentConfig) -> str:
    """Render a config back to the file format (round-trips through parse)."""
    lines = []
    for name in _FIELDS:
        value = getattr(config, name)
        if isinstance(value, bool):
            text = "on" if value else "off"
        elif isinstance(value, tuple):
            text = ", ".join(value)
        else:
            text = repr(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"
