"""Scenario application and quasi-steady-state post-disturbance analysis.

A scenario is an ordered list of actions (element trips, load scaling)
applied to an immutable case, producing a modified copy.  The
post-disturbance equilibrium under *fixed* converter controls — droop and
governor response only, no re-optimization — is computed by
:func:`equilibrium_after`; :func:`sharing_metrics` then quantifies how the
imbalance was shared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping

from .model import NetworkCase, validate_case
from .steadystate import (
    OperatingPoint,
    PowerFlowControls,
    ConverterControl,
    solve_power_flow,
)

ACTION_TYPES = ("trip-generator", "trip-converter", "scale-load",
                "trip-ac-branch", "trip-dc-branch")

DROOP_MODES = ("voltage-droop", "voltage-frequency-droop")


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class Action:
    type: str
    id: int | None = None
    bus: int | None = None
    factor: float | None = None


@dataclass(frozen=True)
class ControlOverride:
    """Operator intervention tied to a scenario (e.g. re-mode a converter)."""

    converter: int
    mode: str
    u_dc_set: float | None = None
    p_dc_set: float | None = None
    strategies: tuple[str, ...] | None = None   # None: applies under any strategy


@dataclass(frozen=True)
class Scenario:
    id: str
    actions: tuple[Action, ...] = ()
    control_overrides: tuple[ControlOverride, ...] = ()


def parse_scenario(text: str, default_id: str = "scenario") -> Scenario:
    """Parse a scenario document.

    Accepts either a bare JSON list of action objects or an object with
    ``id``, ``actions`` and optional ``control_overrides``.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid scenario JSON: {exc.msg} (line {exc.lineno})") from exc
    if isinstance(doc, list):
        doc = {"id": default_id, "actions": doc}
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON list or object")
    unknown = set(doc) - {"id", "actions", "control_overrides"}
    if unknown:
        raise ScenarioError(f"unknown scenario key(s) {sorted(unknown)}")
    actions = []
    for i, raw in enumerate(doc.get("actions", [])):
        if not isinstance(raw, dict) or "type" not in raw:
            raise ScenarioError(f"actions[{i}]: expected an object with a 'type'")
        typ = raw["type"]
        if typ not in ACTION_TYPES:
            raise ScenarioError(f"actions[{i}]: unknown action type {typ!r}")
        unknown = set(raw) - {"type", "id", "bus", "factor"}
        if unknown:
            raise ScenarioError(f"actions[{i}]: unknown key(s) {sorted(unknown)}")
        if typ == "scale-load":
            if "bus" not in raw or "factor" not in raw:
                raise ScenarioError(f"actions[{i}]: scale-load needs 'bus' and 'factor'")
        elif "id" not in raw:
            raise ScenarioError(f"actions[{i}]: {typ} needs an 'id'")
        actions.append(Action(type=typ, id=raw.get("id"), bus=raw.get("bus"),
                              factor=raw.get("factor")))
    overrides = []
    for i, raw in enumerate(doc.get("control_overrides", [])):
        unknown = set(raw) - {"converter", "mode", "u_dc_set", "p_dc_set", "strategies"}
        if unknown:
            raise ScenarioError(f"control_overrides[{i}]: unknown key(s) {sorted(unknown)}")
        if "converter" not in raw or "mode" not in raw:
            raise ScenarioError(f"control_overrides[{i}]: needs 'converter' and 'mode'")
        strategies = tuple(raw["strategies"]) if "strategies" in raw else None
        overrides.append(ControlOverride(converter=raw["converter"], mode=raw["mode"],
                                         u_dc_set=raw.get("u_dc_set"),
                                         p_dc_set=raw.get("p_dc_set"),
                                         strategies=strategies))
    return Scenario(id=doc.get("id", default_id), actions=tuple(actions),
                    control_overrides=tuple(overrides))


def load_scenario(path) -> Scenario:
    import os
    with open(path, "r", encoding="utf-8") as fh:
        default_id = os.path.splitext(os.path.basename(path))[0]
        return parse_scenario(fh.read(), default_id=default_id)


def apply_scenario(case: NetworkCase, scenario: Scenario) -> NetworkCase:
    """Return a modified copy of ``case`` with the scenario's actions applied.

    Trips flip element status; a tripped converter keeps its DC bus in the
    grid (the cable stays energized).  Actions referencing missing or
    already out-of-service elements raise :class:`ScenarioError`.
    """
    out = case
    for act in scenario.actions:
        if act.type == "trip-generator":
            try:
                gen = out.generator(act.id)
            except KeyError as exc:
                raise ScenarioError(f"trip-generator: unknown generator {act.id}") from exc
            if not gen.in_service:
                raise ScenarioError(f"trip-generator: generator {act.id} already out of service")
            out = out.with_element(replace(gen, status="out"))
        elif act.type == "trip-converter":
            try:
                conv = out.converter(act.id)
            except KeyError as exc:
                raise ScenarioError(f"trip-converter: unknown converter {act.id}") from exc
            if not conv.in_service:
                raise ScenarioError(f"trip-converter: converter {act.id} already out of service")
            out = out.with_element(replace(conv, status="out"))
        elif act.type == "trip-ac-branch":
            try:
                br = out.ac_branch(act.id)
            except KeyError as exc:
                raise ScenarioError(f"trip-ac-branch: unknown AC branch {act.id}") from exc
            if not br.in_service:
                raise ScenarioError(f"trip-ac-branch: AC branch {act.id} already out of service")
            out = out.with_element(replace(br, status="out"))
        elif act.type == "trip-dc-branch":
            try:
                br = out.dc_branch(act.id)
            except KeyError as exc:
                raise ScenarioError(f"trip-dc-branch: unknown DC branch {act.id}") from exc
            if not br.in_service:
                raise ScenarioError(f"trip-dc-branch: DC branch {act.id} already out of service")
            out = out.with_element(replace(br, status="out"))
        elif act.type == "scale-load":
            try:
                bus = out.ac_bus(act.bus)
            except KeyError as exc:
                raise ScenarioError(f"scale-load: unknown AC bus {act.bus}") from exc
            out = out.with_element(replace(bus, p_demand=bus.p_demand * act.factor,
                                           q_demand=bus.q_demand * act.factor))
        else:
            raise ScenarioError(f"unknown action type {act.type!r}")
    return out


def apply_control_overrides(controls: PowerFlowControls, scenario: Scenario,
                            strategy: str | None = None) -> PowerFlowControls:
    """Apply the scenario's control overrides matching ``strategy``."""
    convs = dict(controls.converters)
    for ov in scenario.control_overrides:
        if ov.strategies is not None and strategy not in ov.strategies:
            continue
        if ov.converter not in convs:
            continue
        old = convs[ov.converter]
        droop = old.droop
        if ov.u_dc_set is not None:
            droop = replace(droop, u_dc_0=ov.u_dc_set)
        if ov.p_dc_set is not None:
            droop = replace(droop, p_dc_0=ov.p_dc_set)
        convs[ov.converter] = ConverterControl(mode=ov.mode, droop=droop,
                                               q_c_set=old.q_c_set)
    return PowerFlowControls(converters=convs, u_set=controls.u_set, p_set=controls.p_set)


def equilibrium_after(case_pre: NetworkCase, case_post: NetworkCase,
                      controls: PowerFlowControls, pre_point: OperatingPoint,
                      tol: float = 1e-8, max_iter: int = 50) -> OperatingPoint:
    """Passive post-disturbance equilibrium under fixed controls.

    Solves the droop-governed power flow on ``case_post``, warm-started
    from the pre-disturbance point; generators move only through their
    governors, converters only along their droop characteristics.  This is
    the settling point *before* any re-dispatch.
    """
    report = validate_case(case_post)
    if not report.ok:
        raise ScenarioError("post-disturbance case invalid: "
                            + "; ".join(v.message for v in report))
    live = {c.id for c in case_post.in_service_converters()}
    trimmed = PowerFlowControls(
        converters={cid: ctrl for cid, ctrl in controls.converters.items() if cid in live},
        u_set={b: v for b, v in controls.u_set.items()
               if any(g.bus == b for g in case_post.in_service_generators())},
        p_set={g: v for g, v in controls.p_set.items()
               if any(gen.id == g for gen in case_post.in_service_generators())},
    )
    return solve_power_flow(case_post, trimmed, warm_start=pre_point,
                            tol=tol, max_iter=max_iter)


@dataclass
class SharingMetrics:
    """How a disturbance was shared between converters."""

    delta_p_per_converter: dict[int, float]
    voltage_deviation: float
    max_delta_f: float
    sharing_ratios: dict[int, float] = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {
            "delta_p_per_converter": {str(k): v for k, v in self.delta_p_per_converter.items()},
            "voltage_deviation": self.voltage_deviation,
            "max_delta_f": self.max_delta_f,
            "sharing_ratios": {str(k): v for k, v in self.sharing_ratios.items()},
        }


def sharing_metrics(pre: OperatingPoint, post: OperatingPoint, case: NetworkCase,
                    responding: tuple[int, ...] | None = None) -> SharingMetrics:
    """Per-converter power shifts and deviation metrics between two states.

    ``responding`` names the converters participating in droop sharing;
    by default those in a droop mode and in service in ``case``.  Ratios
    are normalized over that set (they sum to one when its total shift is
    nonzero); tripped converters still appear in ``delta_p_per_converter``
    with the negative of their pre-disturbance injection.
    """
    missing = set(pre.p_dc) - set(post.p_dc)
    if missing:
        raise ValueError(f"operating points disagree on converters {sorted(missing)}")
    delta_p = {cid: post.p_dc.get(cid, 0.0) - pre.p_dc[cid] for cid in sorted(pre.p_dc)}
    if responding is None:
        responding = tuple(c.id for c in case.in_service_converters()
                           if c.control_mode in DROOP_MODES)
    total = sum(delta_p[cid] for cid in responding if cid in delta_p)
    ratios: dict[int, float] = {}
    if abs(total) > 1e-12:
        ratios = {cid: delta_p[cid] / total for cid in responding if cid in delta_p}
    deviation = 0.0
    for bus in case.dc_buses:
        du = post.u_dc[bus.id] - bus.u_dc_rated
        deviation += du * du
    max_df = max((abs(v) for v in post.delta_f.values()), default=0.0)
    return SharingMetrics(delta_p_per_converter=delta_p, voltage_deviation=deviation,
                          max_delta_f=max_df, sharing_ratios=ratios)
