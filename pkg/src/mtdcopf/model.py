"""Domain model for hybrid AC / multi-terminal DC networks.

All electrical quantities are stored in per-unit on the system bases
(``Bases``); angles are in radians.  A ``NetworkCase`` is immutable once
built, so a validated case can be shared freely between concurrent solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

BUS_KINDS = ("slack-candidate", "pv", "pq")
CONTROL_MODES = ("active-power", "voltage-droop", "voltage-frequency-droop")
# Runtime-only mode: a converter holding its DC-side voltage constant.  It is
# settable through power-flow controls and scenario overrides, never in a
# case file.
MODE_DC_VOLTAGE = "dc-voltage"
STATUS_VALUES = ("in", "out")

DEFAULT_K_MIN = 0.001
DEFAULT_K_MAX = 1.0
DEFAULT_ANGLE_BOUND = math.pi / 2.0


@dataclass(frozen=True)
class Bases:
    """System bases: apparent power (MVA), DC voltage (kV), frequency (Hz)."""

    s_nom: float
    v_dc_nom: float
    f_nom: float


@dataclass(frozen=True)
class AcBus:
    id: int
    bus_kind: str
    u_min: float = 0.9
    u_max: float = 1.1
    delta_min: float = -DEFAULT_ANGLE_BOUND
    delta_max: float = DEFAULT_ANGLE_BOUND
    p_demand: float = 0.0
    q_demand: float = 0.0
    area: int = 1


@dataclass(frozen=True)
class AcBranch:
    id: int
    from_bus: int
    to_bus: int
    g: float
    b: float
    b_shunt: float = 0.0
    status: str = "in"

    @property
    def in_service(self) -> bool:
        return self.status == "in"


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    alpha: float
    beta: float
    gamma: float
    governor_droop: float = 0.0
    status: str = "in"

    @property
    def in_service(self) -> bool:
        return self.status == "in"

    def cost(self, p: float) -> float:
        return self.alpha * p * p + self.beta * p + self.gamma


@dataclass(frozen=True)
class DcBus:
    id: int
    u_dc_rated: float = 1.0
    u_dc_min: float = 0.9
    u_dc_max: float = 1.1


@dataclass(frozen=True)
class DcBranch:
    id: int
    from_bus: int
    to_bus: int
    y_dc: float
    status: str = "in"

    @property
    def in_service(self) -> bool:
        return self.status == "in"


@dataclass(frozen=True)
class DroopSettings:
    """References and gains of the converter droop characteristic.

    ``p_dc_0``/``u_dc_0`` anchor the characteristic, ``k_v`` and ``k_f``
    are the voltage and frequency gains, and ``f_ref`` is the reference
    frequency at the point of common coupling (per-unit of nominal).
    ``k_f`` is ``None`` for converters without a frequency term.
    """

    p_dc_0: float = 0.0
    u_dc_0: float = 1.0
    f_ref: float = 1.0
    k_v: float = 0.1
    k_f: float | None = None
    k_min: float = DEFAULT_K_MIN
    k_max: float = DEFAULT_K_MAX


@dataclass(frozen=True)
class ConverterStation:
    """One MMC terminal coupling an AC bus (the PCC) to a DC bus.

    Losses follow a + b*i + c*i^2 in the reactor current i, with the
    quadratic coefficient depending on the power direction (rectifier:
    AC to DC, inverter: DC to AC).
    """

    id: int
    ac_bus: int
    dc_bus: int
    p_dc_min: float
    p_dc_max: float
    loss_a: float = 0.011
    loss_b: float = 0.003
    loss_c_rec: float = 0.004
    loss_c_inv: float = 0.007
    control_mode: str = "active-power"
    setpoints: DroopSettings = field(default_factory=DroopSettings)
    status: str = "in"

    @property
    def in_service(self) -> bool:
        return self.status == "in"


@dataclass(frozen=True)
class FixedInjection:
    """Constant power source at an AC bus (e.g. an aggregated wind farm)."""

    bus: int
    p: float
    q: float = 0.0


@dataclass(frozen=True)
class NetworkCase:
    bases: Bases
    ac_buses: tuple[AcBus, ...] = ()
    ac_branches: tuple[AcBranch, ...] = ()
    generators: tuple[Generator, ...] = ()
    dc_buses: tuple[DcBus, ...] = ()
    dc_branches: tuple[DcBranch, ...] = ()
    converters: tuple[ConverterStation, ...] = ()
    fixed_injections: tuple[FixedInjection, ...] = ()

    # -- lookup helpers -------------------------------------------------
    def ac_bus(self, bus_id: int) -> AcBus:
        return _by_id(self.ac_buses, bus_id, "AC bus")

    def dc_bus(self, bus_id: int) -> DcBus:
        return _by_id(self.dc_buses, bus_id, "DC bus")

    def generator(self, gen_id: int) -> Generator:
        return _by_id(self.generators, gen_id, "generator")

    def converter(self, conv_id: int) -> ConverterStation:
        return _by_id(self.converters, conv_id, "converter")

    def ac_branch(self, branch_id: int) -> AcBranch:
        return _by_id(self.ac_branches, branch_id, "AC branch")

    def dc_branch(self, branch_id: int) -> DcBranch:
        return _by_id(self.dc_branches, branch_id, "DC branch")

    def areas(self) -> tuple[int, ...]:
        return tuple(sorted({b.area for b in self.ac_buses}))

    def in_service_generators(self) -> tuple[Generator, ...]:
        return tuple(g for g in self.generators if g.in_service)

    def in_service_converters(self) -> tuple[ConverterStation, ...]:
        return tuple(c for c in self.converters if c.in_service)

    def in_service_ac_branches(self) -> tuple[AcBranch, ...]:
        return tuple(br for br in self.ac_branches if br.in_service)

    def in_service_dc_branches(self) -> tuple[DcBranch, ...]:
        return tuple(br for br in self.dc_branches if br.in_service)

    def with_element(self, element) -> "NetworkCase":
        """Return a copy with one element (matched by type and id) replaced."""
        mapping = {
            AcBus: "ac_buses",
            AcBranch: "ac_branches",
            Generator: "generators",
            DcBus: "dc_buses",
            DcBranch: "dc_branches",
            ConverterStation: "converters",
        }
        attr = mapping[type(element)]
        current = getattr(self, attr)
        updated = tuple(element if e.id == element.id else e for e in current)
        return replace(self, **{attr: updated})


def _by_id(items: Iterable, item_id: int, label: str):
    for item in items:
        if item.id == item_id:
            return item
    raise KeyError(f"{label} {item_id} not found")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __iter__(self):
        return iter(self.violations)

    def __len__(self):
        return len(self.violations)


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb

    def n_components(self) -> int:
        return len({self.find(i) for i in self.parent})


def validate_case(case: NetworkCase) -> ValidationReport:
    """Check every model invariant plus graph connectivity.

    Returns a report with one entry per violation; an empty report means the
    case is safe to hand to any solver in this package.
    """
    v: list[Violation] = []

    def bad(code: str, message: str) -> None:
        v.append(Violation(code, message))

    b = case.bases
    if not (b.s_nom > 0 and b.v_dc_nom > 0 and b.f_nom > 0):
        bad("bases", "all bases must be strictly positive")

    ac_ids = {bus.id for bus in case.ac_buses}
    dc_ids = {bus.id for bus in case.dc_buses}

    slack_per_area: dict[int, int] = {}
    for bus in case.ac_buses:
        if bus.bus_kind not in BUS_KINDS:
            bad("bus-kind", f"AC bus {bus.id}: unknown bus_kind {bus.bus_kind!r}")
        if bus.u_min > bus.u_max:
            bad("bus-bounds", f"AC bus {bus.id}: u_min > u_max")
        if bus.delta_min > bus.delta_max:
            bad("bus-bounds", f"AC bus {bus.id}: delta_min > delta_max")
        if bus.bus_kind == "slack-candidate":
            slack_per_area[bus.area] = slack_per_area.get(bus.area, 0) + 1
    for area in sorted({bus.area for bus in case.ac_buses}):
        n_slack = slack_per_area.get(area, 0)
        if n_slack != 1:
            bad("slack-count", f"area {area}: {n_slack} slack-candidate buses (need exactly 1)")

    for br in case.ac_branches:
        if br.from_bus == br.to_bus:
            bad("branch-loop", f"AC branch {br.id}: from_bus equals to_bus")
        for end in (br.from_bus, br.to_bus):
            if end not in ac_ids:
                bad("dangling", f"AC branch {br.id}: unknown AC bus {end}")
        if br.from_bus in ac_ids and br.to_bus in ac_ids:
            if case.ac_bus(br.from_bus).area != case.ac_bus(br.to_bus).area:
                bad("area-span", f"AC branch {br.id}: endpoints in different areas")

    for gen in case.generators:
        if gen.bus not in ac_ids:
            bad("dangling", f"generator {gen.id}: unknown AC bus {gen.bus}")
        if gen.p_min > gen.p_max:
            bad("gen-bounds", f"generator {gen.id}: p_min > p_max")
        if gen.q_min > gen.q_max:
            bad("gen-bounds", f"generator {gen.id}: q_min > q_max")
        if gen.alpha < 0:
            bad("gen-cost", f"generator {gen.id}: alpha < 0 (cost must be convex)")
        if gen.governor_droop < 0:
            bad("gen-governor", f"generator {gen.id}: governor_droop < 0")

    for bus in case.dc_buses:
        if not (bus.u_dc_min <= bus.u_dc_rated <= bus.u_dc_max):
            bad("dcbus-bounds", f"DC bus {bus.id}: rated voltage outside [min, max]")

    for br in case.dc_branches:
        if br.from_bus == br.to_bus:
            bad("branch-loop", f"DC branch {br.id}: from_bus equals to_bus")
        for end in (br.from_bus, br.to_bus):
            if end not in dc_ids:
                bad("dangling", f"DC branch {br.id}: unknown DC bus {end}")
        if br.in_service and br.y_dc <= 0:
            bad("dc-admittance", f"DC branch {br.id}: y_dc must be > 0 in service")

    for conv in case.converters:
        if conv.ac_bus not in ac_ids:
            bad("dangling", f"converter {conv.id}: unknown AC bus {conv.ac_bus}")
        if conv.dc_bus not in dc_ids:
            bad("dangling", f"converter {conv.id}: unknown DC bus {conv.dc_bus}")
        if conv.p_dc_min > conv.p_dc_max:
            bad("conv-bounds", f"converter {conv.id}: p_dc_min > p_dc_max")
        for name in ("loss_a", "loss_b", "loss_c_rec", "loss_c_inv"):
            if getattr(conv, name) < 0:
                bad("conv-loss", f"converter {conv.id}: {name} < 0")
        if conv.control_mode not in CONTROL_MODES:
            bad("conv-mode", f"converter {conv.id}: unknown control_mode {conv.control_mode!r}")
        sp = conv.setpoints
        if sp.k_min > sp.k_max:
            bad("droop-range", f"converter {conv.id}: k_min > k_max")
        if not (sp.k_min <= sp.k_v <= sp.k_max):
            bad("droop-range", f"converter {conv.id}: k_v outside [k_min, k_max]")
        if sp.k_f is not None and not (sp.k_min <= sp.k_f <= sp.k_max):
            bad("droop-range", f"converter {conv.id}: k_f outside [k_min, k_max]")
        if conv.control_mode == "voltage-frequency-droop":
            if sp.k_f is None or not math.isfinite(sp.k_f):
                bad("droop-kf", f"converter {conv.id}: voltage-frequency-droop requires finite k_f")

    for inj in case.fixed_injections:
        if inj.bus not in ac_ids:
            bad("dangling", f"fixed injection at unknown AC bus {inj.bus}")

    # Connectivity: each AC area must be one component over in-service
    # branches, and the DC grid one component over in-service DC branches.
    for area in sorted({bus.area for bus in case.ac_buses}):
        members = [bus.id for bus in case.ac_buses if bus.area == area]
        uf = _UnionFind(members)
        for br in case.in_service_ac_branches():
            if br.from_bus in uf.parent and br.to_bus in uf.parent:
                uf.union(br.from_bus, br.to_bus)
        if uf.n_components() > 1:
            bad("ac-connectivity", f"area {area}: AC graph not connected over in-service branches")

    if len(dc_ids) > 1:
        uf = _UnionFind(sorted(dc_ids))
        for br in case.in_service_dc_branches():
            if br.from_bus in uf.parent and br.to_bus in uf.parent:
                uf.union(br.from_bus, br.to_bus)
        if uf.n_components() > 1:
            bad("dc-connectivity", "DC grid not connected over in-service DC branches")

    return ValidationReport(tuple(v))


# ---------------------------------------------------------------------------
# Per-unit conversions and modulation index
# ---------------------------------------------------------------------------

_PU_KINDS = ("power", "dc-voltage")


def _base_for(bases: Bases, kind: str) -> float:
    if kind == "power":
        return bases.s_nom
    if kind == "dc-voltage":
        return bases.v_dc_nom
    raise ValueError(f"unknown per-unit kind {kind!r}; expected one of {_PU_KINDS}")


def to_per_unit(value: float, bases: Bases, kind: str) -> float:
    """Convert a physical quantity (MW/MVA or kV) to per-unit."""
    base = _base_for(bases, kind)
    if base <= 0:
        raise ValueError("base must be strictly positive")
    return value / base


def from_per_unit(value: float, bases: Bases, kind: str) -> float:
    """Inverse of :func:`to_per_unit`; exact round-trip."""
    base = _base_for(bases, kind)
    if base <= 0:
        raise ValueError("base must be strictly positive")
    return value * base


def modulation_index(n_active: int, n_total: int) -> float:
    """Fraction of converter submodules inserted for voltage synthesis."""
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    if n_active < 0 or n_active > n_total:
        raise ValueError("n_active must lie in [0, n_total]")
    return n_active / n_total
