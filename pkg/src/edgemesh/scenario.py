"""Scenario files: JSON schema, semantic checks and loading."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import jsonschema

from .aggregation import BUILTIN_PROCESSORS
from .federation import STRATEGIES, Edge, Topology


class ScenarioError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


_ACTION = {
    "type": "object",
    "required": ["at", "do"],
    "properties": {
        "at": {"type": "number", "minimum": 0},
        "do": {"enum": ["subscribe", "unsubscribe", "publish", "move", "disconnect"]},
        "expr": {"type": "string"},
        "id": {"type": "integer"},
        "qos": {"enum": [0, 1]},
        "scope": {"enum": ["local", "global"]},
        "topic": {"type": "string"},
        "payload": {},
        "json": {},
        "size": {"type": "integer", "minimum": 0},
        "link": {"type": "string"},
    },
    "allOf": [
        {"if": {"properties": {"do": {"const": "subscribe"}}}, "then": {"required": ["expr"]}},
        {"if": {"properties": {"do": {"const": "publish"}}}, "then": {"required": ["topic"]}},
        {"if": {"properties": {"do": {"const": "move"}}}, "then": {"required": ["link"]}},
    ],
}

_CAPS = {"type": "object", "additionalProperties": {"type": "integer", "exclusiveMinimum": 0}}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["brokers", "links", "t_end"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "t_end": {"type": "number", "minimum": 0},
        "strategy": {
            "oneOf": [
                {"enum": list(STRATEGIES)},
                {
                    "type": "object",
                    "required": ["name"],
                    "properties": {
                        "name": {"enum": list(STRATEGIES)},
                        "rn_count": {"type": "integer", "minimum": 1},
                        "rn_set": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    },
                },
            ]
        },
        "rn_count": {"type": "integer", "minimum": 1},
        "rn_set": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "demand": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
        "capabilities": _CAPS,
        "budget": {"type": "integer", "minimum": 0},
        "retry_timeout": {"type": "number", "exclusiveMinimum": 0},
        "beacon_period": {"type": "number", "exclusiveMinimum": 0},
        "window_grace": {"type": "number", "minimum": 0},
        "rf_latency": {"type": "number", "exclusiveMinimum": 0},
        "brokers": {
            "type": "array",
            "items": {
                "oneOf": [
                    {"type": "string", "minLength": 1},
                    {
                        "type": "object",
                        "required": ["id"],
                        "properties": {
                            "id": {"type": "string", "minLength": 1},
                            "budget": {"type": "integer", "minimum": 0},
                            "capabilities": _CAPS,
                            "beacon_offset": {"type": "number", "minimum": 0},
                        },
                    },
                ]
            },
        },
        "links": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["a", "b", "latency"],
                "properties": {
                    "a": {"type": "string"},
                    "b": {"type": "string"},
                    "latency": {"type": "number", "exclusiveMinimum": 0},
                    "drop": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "kind": {"enum": ["X2", "S1"]},
                },
            },
        },
        "access": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "brokers"],
                "properties": {
                    "id": {"type": "string"},
                    "brokers": {"type": "array", "items": {"type": "string"}},
                    "latency": {"type": "number", "exclusiveMinimum": 0},
                    "drop": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                },
            },
        },
        "clients": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "attach"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "attach": {"type": "string"},
                    "join": {"type": "number", "minimum": 0},
                    "script": {"type": "array", "items": _ACTION},
                },
            },
        },
    },
}


def _field_path(error: jsonschema.ValidationError) -> str:
    path = list(error.absolute_path)
    if error.validator == "required":
        missing = error.message.split("'")[1] if "'" in error.message else ""
        path.append(missing)
    return ".".join(str(p) for p in path) or "<root>"


def _line_of(text: str | None, field_name: str) -> int | None:
    if text is None:
        return None
    key = field_name.split(".")[-1]
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return lineno
    return None


def validate(scenario: Any, text: str | None = None) -> dict:
    """Schema plus cross-reference checks; raises :class:`ScenarioError`."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(scenario), key=lambda e: (len(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        field_name = _field_path(err)
        raise ScenarioError(err.message, field_name, _line_of(text, field_name) if err.absolute_path else None)

    broker_ids = [b if isinstance(b, str) else b["id"] for b in scenario["brokers"]]
    if len(set(broker_ids)) != len(broker_ids):
        raise ScenarioError("duplicate broker id", "brokers")
    known = set(broker_ids)
    for i, link in enumerate(scenario["links"]):
        for end in ("a", "b"):
            if link[end] not in known:
                raise ScenarioError(f"unknown broker {link[end]!r}", f"links.{i}.{end}")
    try:
        topo = Topology(broker_ids, [Edge(l["a"], l["b"], l["latency"]) for l in scenario["links"]])
    except ValueError as exc:
        raise ScenarioError(str(exc), "links") from None
    if not topo.is_connected():
        raise ScenarioError("broker overlay must be connected", "links")

    caps = [scenario.get("capabilities", {})] + [
        b.get("capabilities", {}) for b in scenario["brokers"] if isinstance(b, dict)
    ]
    for registry in caps:
        for name in registry:
            if name not in BUILTIN_PROCESSORS:
                raise ScenarioError(f"no processor available for capability {name!r}", "capabilities")

    strategy = scenario.get("strategy", "bridge")
    extras = strategy if isinstance(strategy, dict) else scenario
    for rn in extras.get("rn_set", []) or []:
        if rn not in known:
            raise ScenarioError(f"rendezvous node {rn!r} is not a broker", "rn_set")
    if extras.get("rn_count", 1) > max(1, len(known)):
        raise ScenarioError("rn_count exceeds the number of brokers", "rn_count")

    access_ids = set()
    for i, ap in enumerate(scenario.get("access", [])):
        access_ids.add(ap["id"])
        for b in ap["brokers"]:
            if b not in known:
                raise ScenarioError(f"unknown broker {b!r}", f"access.{i}.brokers")
    if "access" not in scenario:
        access_ids = known
    client_ids = set()
    for i, client in enumerate(scenario.get("clients", [])):
        if client["id"] in client_ids:
            raise ScenarioError("duplicate client id", f"clients.{i}.id")
        client_ids.add(client["id"])
        if client["attach"] not in access_ids:
            raise ScenarioError(f"unknown access link {client['attach']!r}", f"clients.{i}.attach")
        for j, action in enumerate(client.get("script", [])):
            if action["do"] == "move" and action["link"] not in access_ids:
                raise ScenarioError(f"unknown access link {action['link']!r}", f"clients.{i}.script.{j}.link")
    return scenario


def loads(text: str) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, line=exc.lineno) from None
    return validate(data, text)


def load(path: str | Path) -> dict:
    return loads(Path(path).read_text(encoding="utf-8"))


def with_overrides(scenario: dict, *, seed: int | None = None, strategy: str | None = None) -> dict:
    """Copy of ``scenario`` with command-line overrides applied."""
    out = json.loads(json.dumps(scenario))
    if seed is not None:
        out["seed"] = seed
    if strategy is not None:
        if strategy not in STRATEGIES:
            raise ScenarioError(f"unknown strategy {strategy!r}", "strategy")
        current = out.get("strategy")
        if isinstance(current, dict):
            out["strategy"] = {**current, "name": strategy}
        else:
            out["strategy"] = strategy
    return out
