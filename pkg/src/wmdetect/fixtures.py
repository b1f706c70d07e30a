"""The two benchmark systems and a key/value file format for custom ones.

File format: one ``key = value`` per line, ``#`` starts a comment, values are
Python literals (numbers or row-major nested lists). Keys mirror the model
symbols: A, B, C, Q, R, W, U, A_a, Q_a, rho.
"""

from __future__ import annotations

import ast
from pathlib import Path

import numpy as np

from .linalg import StabilityError, SystemModel
from .plant import AttackModel

RHO = 0.001

SYSTEM_A = {
    "A": [[0.75, 0.2], [0.2, 1.0]],
    "B": [[0.9, 0.5], [0.1, 1.2]],
    "C": [[1.0, -1.0]],
    "Q": [[1.0, 0.0], [0.0, 1.0]],
    "R": [[1.0]],
    "W": [[1.0, 0.0], [0.0, 2.0]],
    "U": [[0.4, 0.0], [0.0, 0.7]],
    "A_a": [[0.5]],
    "Q_a": [[7.5]],
    "rho": RHO,
}

# A_a is listed as four numbers for a two-output system; read row-major as 2x2.
SYSTEM_B = {
    "A": [[0.968, 0, 0.082, 0], [0, 0.978, 0, 0.064], [0, 0, 0.917, 0], [0, 0, 0, 0.935]],
    "B": [[0.164, 0.004], [0.002, 0.124], [0, 0.092], [0.060, 0]],
    "C": [[5, 0, 0, 0], [0, 5, 0, 0]],
    "Q": np.diag([0.25] * 4).tolist(),
    "R": np.diag([0.5, 0.5]).tolist(),
    "W": np.diag([5, 5, 1, 1]).tolist(),
    "U": np.diag([2, 2]).tolist(),
    "A_a": [[0.4, 0.1], [0.1, 0.7]],
    "Q_a": np.diag([6, 6]).tolist(),
    "rho": RHO,
}

FIXTURES = {"system-a": SYSTEM_A, "system-b": SYSTEM_B}
REQUIRED_KEYS = ("A", "B", "C", "Q", "R", "W", "U", "A_a", "Q_a", "rho")


class ConfigError(ValueError):
    """Malformed key/value file; carries the offending line and key."""

    def __init__(self, message: str, path=None, line: int | None = None, key: str | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path, self.line, self.key = path, line, key


def parse_kv_text(text: str, path=None, lines: dict | None = None) -> dict:
    """Parse ``key = value`` lines. When ``lines`` is given it receives key -> line number."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key.replace("_", "").replace("-", "").isalnum():
            raise ConfigError("invalid key", path, lineno, key)
        if key in out:
            raise ConfigError("duplicate key", path, lineno, key)
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"cannot parse value ({exc.__class__.__name__})", path, lineno, key) from None
        if lines is not None:
            lines[key] = lineno
    return out


def parse_kv_file(path, lines: dict | None = None) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read file ({exc.strerror})", path) from None
    return parse_kv_text(text, path, lines)


def build_models(params: dict, source=None) -> tuple[SystemModel, AttackModel]:
    missing = [k for k in REQUIRED_KEYS if k not in params]
    if missing:
        raise ConfigError(f"missing keys {missing}", source)
    try:
        model = SystemModel(*(np.asarray(params[k], dtype=float) for k in "ABCQRWU"))
    except StabilityError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), source) from None
    try:
        attack = AttackModel(np.asarray(params["A_a"], dtype=float), np.asarray(params["Q_a"], dtype=float), float(params["rho"]))
    except StabilityError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), source, key="A_a/Q_a/rho") from None
    if attack.m != model.m:
        raise ConfigError(f"attacker dimension {attack.m} does not match output dimension {model.m}", source)
    return model, attack


def load_fixture(name_or_path) -> tuple[SystemModel, AttackModel]:
    """Load ``system-a``, ``system-b`` or a key/value file."""
    key = str(name_or_path).lower()
    if key in FIXTURES:
        return build_models(FIXTURES[key], key)
    return build_models(parse_kv_file(name_or_path), name_or_path)
