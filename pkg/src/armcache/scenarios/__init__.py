"""Shipped experiment scenarios (JSON, ``schema_version`` 1)."""
from __future__ import annotations

import json
from pathlib import Path

SCHEMA_VERSION = 1
HERE = Path(__file__).parent
SHIPPED = tuple(sorted(p.stem for p in HERE.glob("*.json")))


class ScenarioError(ValueError):
    pass


def load_scenario(name_or_path: str | Path, kind: str | None = None) -> dict:
    """Read a shipped scenario by name or any scenario file by path."""
    p = Path(name_or_path)
    if not p.suffix and (HERE / f"{p}.json").exists():
        p = HERE / f"{p}.json"
    try:
        d = json.loads(p.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"no scenario {str(name_or_path)!r}; shipped: {', '.join(SHIPPED)}") from None
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioError(f"{p.name}: unsupported schema_version {d.get('schema_version')!r}")
    if kind is not None and d.get("kind") != kind:
        raise ScenarioError(f"{p.name}: a {d.get('kind')!r} scenario, expected {kind!r}")
    return d
