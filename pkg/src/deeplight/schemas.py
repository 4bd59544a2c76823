"""Access to the JSON schemas shipped with the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

SCHEMAS = ("manifest", "eval_report", "train_log", "checkpoint")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(f"unknown schema {name!r}")
    text = resources.files("deeplight").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(instance, name: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``instance`` does not match the schema."""
    import jsonschema

    jsonschema.validate(instance, load_schema(name))
