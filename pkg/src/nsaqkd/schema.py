"""JSON-schema validation for every file the workbench reads."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema


class SchemaError(ValueError):
    """Input failed schema validation; ``errors`` lists ``path: message`` strings."""

    def __init__(self, what: str, errors: list[str]):
        self.errors = errors
        super().__init__(f"invalid {what}:\n  " + "\n  ".join(errors))


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("nsaqkd.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(data, name: str, what: str | None = None) -> None:
    validator = jsonschema.Draft202012Validator(load_schema(name))
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for err in errors:
            path = "/".join(str(p) for p in err.absolute_path) or "<root>"
            msgs.append(f"{path}: {err.message}")
        raise SchemaError(what or name, msgs)
