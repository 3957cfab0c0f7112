"""Flat key=value configuration files, hyperparameters, and run metadata."""

from __future__ import annotations

import subprocess
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .errors import ConfigError

ACTIVATIONS = ("identity", "sigmoid", "tanh")


def write_kv(path: Path | str, values: dict) -> None:
    """Write ``key=value`` lines, keys sorted for byte-stable output."""
    lines = []
    for key in sorted(values):
        value = values[key]
        text = repr(value) if isinstance(value, float) else str(value)
        if "\n" in key or "=" in key or "\n" in text:
            raise ConfigError(f"cannot serialize key/value pair {key!r}={value!r}")
        lines.append(f"{key}={text}\n")
    Path(path).write_text("".join(lines))


def read_kv(path: Path | str) -> dict[str, str]:
    """Read a ``key=value`` file back into a string dict."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise ConfigError(f"{path}: line {lineno} is not key=value: {line!r}")
        values[key] = value
    return values


@dataclass
class Hyperparams:
    """Model and training hyperparameters shared by both training phases.

    ``dim`` is the width of the base embeddings; the propagation layers are
    concatenated with them, so final embeddings (and binary codes) have
    ``3 * dim`` columns.
    """

    dim: int = 64
    activation: str = "sigmoid"
    lr: float = 1e-3
    epochs: int = 200
    seed: int = 0
    reg_lambda: float = 1e-3
    alpha: float = 10.0
    temp: float = 1.0
    tau: float = 0.2
    beta: float = 1e-3
    nu: float = 1e-3

    def validate(self) -> "Hyperparams":
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.temp <= 0:
            raise ConfigError(f"temp must be positive, got {self.temp}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for name in ("reg_lambda", "alpha", "beta", "nu"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        return self

    @property
    def code_dim(self) -> int:
        return 3 * self.dim


_FIELD_TYPES = {f.name: f.type for f in fields(Hyperparams)}


def coerce(key: str, text: str):
    """Parse a config string into the declared type of a hyperparameter."""
    kind = _FIELD_TYPES.get(key, "str")
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {kind}") from exc
    return text


def build_tag() -> str:
    """Version tag plus the git revision when the source tree is available."""
    tag = f"binrec-{__version__}"
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            tag += f"+{rev.stdout.strip()}"
    except OSError:
        pass
    return tag
