"""Case file schema: parsing, defaulting and serialization.

A case document is a UTF-8 JSON object with the pinned schema tag
``"schema": "mtdc-opf/1"`` and the top-level sections ``bases``,
``ac_buses``, ``ac_branches``, ``generators``, ``dc_buses``,
``dc_branches``, ``converters`` and ``fixed_injections``.  Every section
except ``bases`` may be omitted (empty).  Electrical quantities are
per-unit on ``bases``; angles are radians.  Unknown keys are a hard error
so that typos never silently change a study.
"""

from __future__ import annotations

import json
import math
from dataclasses import fields as dataclass_fields
from typing import Any

from .model import (
    AcBranch,
    AcBus,
    Bases,
    ConverterStation,
    DcBranch,
    DcBus,
    DroopSettings,
    FixedInjection,
    Generator,
    NetworkCase,
    BUS_KINDS,
    CONTROL_MODES,
    STATUS_VALUES,
)

SCHEMA_TAG = "mtdc-opf/1"


class CaseError(Exception):
    """Base error for case documents; ``locus`` points at the offending spot."""

    def __init__(self, message: str, locus: str = ""):
        self.locus = locus
        super().__init__(f"{message}" + (f" (at {locus})" if locus else ""))


class CaseSyntaxError(CaseError):
    pass


class CaseSchemaError(CaseError):
    pass


def _require_keys(obj: dict, allowed: set[str], required: set[str], locus: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise CaseSchemaError(f"unknown key(s) {sorted(unknown)}", locus)
    missing = required - set(obj)
    if missing:
        raise CaseSchemaError(f"missing required key(s) {sorted(missing)}", locus)


def _number(obj: dict, key: str, locus: str, default=None) -> float:
    if key not in obj:
        if default is None:
            raise CaseSchemaError(f"missing numeric field {key!r}", locus)
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise CaseSchemaError(f"field {key!r} must be a number", f"{locus}.{key}")
    if not math.isfinite(float(val)):
        raise CaseSchemaError(f"field {key!r} must be finite", f"{locus}.{key}")
    return float(val)


def _integer(obj: dict, key: str, locus: str, default=None) -> int:
    if key not in obj:
        if default is None:
            raise CaseSchemaError(f"missing integer field {key!r}", locus)
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise CaseSchemaError(f"field {key!r} must be an integer", f"{locus}.{key}")
    return val


def _choice(obj: dict, key: str, options, locus: str, default=None) -> str:
    if key not in obj:
        if default is None:
            raise CaseSchemaError(f"missing field {key!r}", locus)
        return default
    val = obj[key]
    if val not in options:
        raise CaseSchemaError(f"field {key!r} must be one of {list(options)}", f"{locus}.{key}")
    return val


def _section(doc: dict, key: str) -> list:
    entries = doc.get(key, [])
    if not isinstance(entries, list):
        raise CaseSchemaError(f"section {key!r} must be a list", key)
    return entries


def _check_unique_ids(entries, label: str) -> None:
    seen = set()
    for e in entries:
        if e.id in seen:
            raise CaseSchemaError(f"duplicate id {e.id}", f"{label}.id={e.id}")
        seen.add(e.id)


_TOP_KEYS = {
    "schema", "bases", "ac_buses", "ac_branches", "generators",
    "dc_buses", "dc_branches", "converters", "fixed_injections",
}


def parse_case(text: str) -> NetworkCase:
    """Parse a case document into a fully-defaulted :class:`NetworkCase`.

    Raises :class:`CaseSyntaxError` for malformed JSON (with line/column)
    and :class:`CaseSchemaError` for schema violations, duplicate ids and
    dangling references (with a field locus).
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}, column {exc.colno}") from exc
    if not isinstance(doc, dict):
        raise CaseSchemaError("top level must be a JSON object")
    _require_keys(doc, _TOP_KEYS, {"schema", "bases"}, "<top>")
    if doc["schema"] != SCHEMA_TAG:
        raise CaseSchemaError(f"unsupported schema {doc['schema']!r}; expected {SCHEMA_TAG!r}", "schema")

    braw = doc["bases"]
    _require_keys(braw, {"s_nom", "v_dc_nom", "f_nom"}, {"s_nom", "v_dc_nom", "f_nom"}, "bases")
    bases = Bases(
        s_nom=_number(braw, "s_nom", "bases"),
        v_dc_nom=_number(braw, "v_dc_nom", "bases"),
        f_nom=_number(braw, "f_nom", "bases"),
    )

    ac_buses = []
    for i, raw in enumerate(_section(doc, "ac_buses")):
        locus = f"ac_buses[{i}]"
        _require_keys(raw, {"id", "bus_kind", "u_min", "u_max", "delta_min", "delta_max",
                            "p_demand", "q_demand", "area"}, {"id", "bus_kind"}, locus)
        ac_buses.append(AcBus(
            id=_integer(raw, "id", locus),
            bus_kind=_choice(raw, "bus_kind", BUS_KINDS, locus),
            u_min=_number(raw, "u_min", locus, 0.9),
            u_max=_number(raw, "u_max", locus, 1.1),
            delta_min=_number(raw, "delta_min", locus, -math.pi / 2.0),
            delta_max=_number(raw, "delta_max", locus, math.pi / 2.0),
            p_demand=_number(raw, "p_demand", locus, 0.0),
            q_demand=_number(raw, "q_demand", locus, 0.0),
            area=_integer(raw, "area", locus, 1),
        ))
    ac_buses.sort(key=lambda bus: bus.id)
    _check_unique_ids(ac_buses, "ac_buses")
    ac_ids = {bus.id for bus in ac_buses}

    ac_branches = []
    for i, raw in enumerate(_section(doc, "ac_branches")):
        locus = f"ac_branches[{i}]"
        _require_keys(raw, {"id", "from_bus", "to_bus", "g", "b", "b_shunt", "status"},
                      {"id", "from_bus", "to_bus", "g", "b"}, locus)
        br = AcBranch(
            id=_integer(raw, "id", locus),
            from_bus=_integer(raw, "from_bus", locus),
            to_bus=_integer(raw, "to_bus", locus),
            g=_number(raw, "g", locus),
            b=_number(raw, "b", locus),
            b_shunt=_number(raw, "b_shunt", locus, 0.0),
            status=_choice(raw, "status", STATUS_VALUES, locus, "in"),
        )
        for end_name in ("from_bus", "to_bus"):
            if getattr(br, end_name) not in ac_ids:
                raise CaseSchemaError(
                    f"AC branch {br.id} references unknown AC bus {getattr(br, end_name)}",
                    f"{locus}.{end_name}")
        ac_branches.append(br)
    ac_branches.sort(key=lambda br: br.id)
    _check_unique_ids(ac_branches, "ac_branches")

    generators = []
    for i, raw in enumerate(_section(doc, "generators")):
        locus = f"generators[{i}]"
        _require_keys(raw, {"id", "bus", "p_min", "p_max", "q_min", "q_max",
                            "alpha", "beta", "gamma", "governor_droop", "status"},
                      {"id", "bus", "p_min", "p_max", "q_min", "q_max",
                       "alpha", "beta", "gamma"}, locus)
        gen = Generator(
            id=_integer(raw, "id", locus),
            bus=_integer(raw, "bus", locus),
            p_min=_number(raw, "p_min", locus),
            p_max=_number(raw, "p_max", locus),
            q_min=_number(raw, "q_min", locus),
            q_max=_number(raw, "q_max", locus),
            alpha=_number(raw, "alpha", locus),
            beta=_number(raw, "beta", locus),
            gamma=_number(raw, "gamma", locus),
            governor_droop=_number(raw, "governor_droop", locus, 0.0),
            status=_choice(raw, "status", STATUS_VALUES, locus, "in"),
        )
        if gen.bus not in ac_ids:
            raise CaseSchemaError(f"generator {gen.id} references unknown AC bus {gen.bus}",
                                  f"{locus}.bus")
        generators.append(gen)
    generators.sort(key=lambda gen: gen.id)
    _check_unique_ids(generators, "generators")

    dc_buses = []
    for i, raw in enumerate(_section(doc, "dc_buses")):
        locus = f"dc_buses[{i}]"
        _require_keys(raw, {"id", "u_dc_rated", "u_dc_min", "u_dc_max"}, {"id"}, locus)
        dc_buses.append(DcBus(
            id=_integer(raw, "id", locus),
            u_dc_rated=_number(raw, "u_dc_rated", locus, 1.0),
            u_dc_min=_number(raw, "u_dc_min", locus, 0.9),
            u_dc_max=_number(raw, "u_dc_max", locus, 1.1),
        ))
    dc_buses.sort(key=lambda bus: bus.id)
    _check_unique_ids(dc_buses, "dc_buses")
    dc_ids = {bus.id for bus in dc_buses}

    dc_branches = []
    for i, raw in enumerate(_section(doc, "dc_branches")):
        locus = f"dc_branches[{i}]"
        _require_keys(raw, {"id", "from_bus", "to_bus", "y_dc", "status"},
                      {"id", "from_bus", "to_bus", "y_dc"}, locus)
        br = DcBranch(
            id=_integer(raw, "id", locus),
            from_bus=_integer(raw, "from_bus", locus),
            to_bus=_integer(raw, "to_bus", locus),
            y_dc=_number(raw, "y_dc", locus),
            status=_choice(raw, "status", STATUS_VALUES, locus, "in"),
        )
        for end_name in ("from_bus", "to_bus"):
            if getattr(br, end_name) not in dc_ids:
                raise CaseSchemaError(
                    f"DC branch {br.id} references unknown DC bus {getattr(br, end_name)}",
                    f"{locus}.{end_name}")
        dc_branches.append(br)
    dc_branches.sort(key=lambda br: br.id)
    _check_unique_ids(dc_branches, "dc_branches")

    converters = []
    for i, raw in enumerate(_section(doc, "converters")):
        locus = f"converters[{i}]"
        _require_keys(raw, {"id", "ac_bus", "dc_bus", "p_dc_min", "p_dc_max",
                            "loss_a", "loss_b", "loss_c_rec", "loss_c_inv",
                            "control_mode", "setpoints", "status"},
                      {"id", "ac_bus", "dc_bus", "p_dc_min", "p_dc_max"}, locus)
        sp_raw = raw.get("setpoints", {})
        sp_locus = f"{locus}.setpoints"
        if not isinstance(sp_raw, dict):
            raise CaseSchemaError("setpoints must be an object", sp_locus)
        _require_keys(sp_raw, {"p_dc_0", "u_dc_0", "f_ref", "k_v", "k_f", "k_min", "k_max"},
                      set(), sp_locus)
        k_f = None
        if "k_f" in sp_raw and sp_raw["k_f"] is not None:
            k_f = _number(sp_raw, "k_f", sp_locus)
        setpoints = DroopSettings(
            p_dc_0=_number(sp_raw, "p_dc_0", sp_locus, 0.0),
            u_dc_0=_number(sp_raw, "u_dc_0", sp_locus, 1.0),
            f_ref=_number(sp_raw, "f_ref", sp_locus, 1.0),
            k_v=_number(sp_raw, "k_v", sp_locus, 0.1),
            k_f=k_f,
            k_min=_number(sp_raw, "k_min", sp_locus, 0.001),
            k_max=_number(sp_raw, "k_max", sp_locus, 1.0),
        )
        conv = ConverterStation(
            id=_integer(raw, "id", locus),
            ac_bus=_integer(raw, "ac_bus", locus),
            dc_bus=_integer(raw, "dc_bus", locus),
            p_dc_min=_number(raw, "p_dc_min", locus),
            p_dc_max=_number(raw, "p_dc_max", locus),
            loss_a=_number(raw, "loss_a", locus, 0.011),
            loss_b=_number(raw, "loss_b", locus, 0.003),
            loss_c_rec=_number(raw, "loss_c_rec", locus, 0.004),
            loss_c_inv=_number(raw, "loss_c_inv", locus, 0.007),
            control_mode=_choice(raw, "control_mode", CONTROL_MODES, locus, "active-power"),
            setpoints=setpoints,
            status=_choice(raw, "status", STATUS_VALUES, locus, "in"),
        )
        if conv.ac_bus not in ac_ids:
            raise CaseSchemaError(f"converter {conv.id} references unknown AC bus {conv.ac_bus}",
                                  f"{locus}.ac_bus")
        if conv.dc_bus not in dc_ids:
            raise CaseSchemaError(f"converter {conv.id} references unknown DC bus {conv.dc_bus}",
                                  f"{locus}.dc_bus")
        converters.append(conv)
    converters.sort(key=lambda conv: conv.id)
    _check_unique_ids(converters, "converters")

    fixed = []
    for i, raw in enumerate(_section(doc, "fixed_injections")):
        locus = f"fixed_injections[{i}]"
        _require_keys(raw, {"bus", "p", "q"}, {"bus", "p"}, locus)
        inj = FixedInjection(
            bus=_integer(raw, "bus", locus),
            p=_number(raw, "p", locus),
            q=_number(raw, "q", locus, 0.0),
        )
        if inj.bus not in ac_ids:
            raise CaseSchemaError(f"fixed injection references unknown AC bus {inj.bus}",
                                  f"{locus}.bus")
        fixed.append(inj)
    fixed.sort(key=lambda inj: inj.bus)

    return NetworkCase(
        bases=bases,
        ac_buses=tuple(ac_buses),
        ac_branches=tuple(ac_branches),
        generators=tuple(generators),
        dc_buses=tuple(dc_buses),
        dc_branches=tuple(dc_branches),
        converters=tuple(converters),
        fixed_injections=tuple(fixed),
    )


def load_case(path) -> NetworkCase:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_case(fh.read())


def _plain(obj: Any) -> Any:
    if hasattr(obj, "__dataclass_fields__"):
        out = {}
        for f in dataclass_fields(obj):
            val = getattr(obj, f.name)
            if val is None:
                continue
            out[f.name] = _plain(val)
        return out
    if isinstance(obj, tuple):
        return [_plain(x) for x in obj]
    return obj


def serialize_case(case: NetworkCase) -> str:
    """Serialize to the case schema; ``parse_case`` round-trips exactly."""
    doc = {
        "schema": SCHEMA_TAG,
        "bases": _plain(case.bases),
        "ac_buses": _plain(case.ac_buses),
        "ac_branches": _plain(case.ac_branches),
        "generators": _plain(case.generators),
        "dc_buses": _plain(case.dc_buses),
        "dc_branches": _plain(case.dc_branches),
        "converters": _plain(case.converters),
        "fixed_injections": _plain(case.fixed_injections),
    }
    return json.dumps(doc, indent=2)
