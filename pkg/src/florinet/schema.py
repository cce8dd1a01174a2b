"""Checked-in JSON schemas for every wire body, with cross-referenced loading."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources as importlib_resources

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from .errors import ProtocolError

_PACKAGE = "florinet.schemas"


def schema_names() -> list[str]:
    root = importlib_resources.files(_PACKAGE)
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


@lru_cache(maxsize=1)
def _registry() -> Registry:
    registry = Registry()
    for name in schema_names():
        doc = load_schema(name)
        registry = registry.with_resource(doc["$id"], Resource.from_contents(doc))
    return registry


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    path = importlib_resources.files(_PACKAGE) / f"{name}.json"
    return json.loads(path.read_text())


@lru_cache(maxsize=None)
def validator(name: str) -> Draft202012Validator:
    return Draft202012Validator(load_schema(name), registry=_registry())


def validate(name: str, instance) -> None:
    """Raise ProtocolError naming the schema and first violation."""
    errors = sorted(validator(name).iter_errors(instance), key=str)
    if errors:
        first = errors[0]
        raise ProtocolError(
            f"body does not match schema {name!r}: {first.json_path}: {first.message}",
            code="invalid_spec",
        )
