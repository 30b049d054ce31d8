"""Steady-state physics kernels and the droop-governed Newton power flow.

Conventions
-----------
* ``p_c``/``q_c`` are the powers a converter draws from its AC bus at the
  point of common coupling; ``p_c > 0`` means AC-to-DC conversion
  (rectifying).
* ``p_dc`` is the power a converter injects into the DC grid.  The two are
  tied by ``p_c = p_dc + p_loss``.
* The DC grid is a symmetric monopole: the grid absorbs
  ``2 * u_dc_i * i_dc_i`` at bus ``i`` with
  ``i_dc_i = sum_j y_ij (u_dc_i - u_dc_j)``.
* Steady-state frequency in each synchronous area is ``1 + delta_f`` with
  ``delta_f`` set by aggregate governor response: each in-service generator
  contributes ``p_g = p_set - governor_droop * delta_f``.

The reactor-current equation ``3 u i = sqrt(p^2 + q^2)`` is smoothed with a
fixed ``SMOOTH_EPS`` inside the square root so residuals stay twice
differentiable at zero transfer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .model import DroopSettings, NetworkCase, MODE_DC_VOLTAGE

SMOOTH_EPS = 1e-8

RECTIFIER = "rectifier"
INVERTER = "inverter"

PF_MODES = ("active-power", "voltage-droop", "voltage-frequency-droop", MODE_DC_VOLTAGE)


class PowerFlowError(Exception):
    pass


class MissingVoltageRegulationError(PowerFlowError):
    """A connected DC grid has no droop or constant-voltage converter."""


class SingularFrequencyError(PowerFlowError):
    """An AC area has no governor response and no frequency-coupled converter."""


class SingularJacobianError(PowerFlowError):
    pass


class PowerFlowNonConvergence(PowerFlowError):
    def __init__(self, message: str, trace: list):
        self.trace = trace
        super().__init__(message)


# ---------------------------------------------------------------------------
# Operating point
# ---------------------------------------------------------------------------

@dataclass
class OperatingPoint:
    """A solved network state, keyed by element id."""

    u: dict[int, float]
    delta: dict[int, float]
    u_dc: dict[int, float]
    p_g: dict[int, float]
    q_g: dict[int, float]
    p_c: dict[int, float]
    q_c: dict[int, float]
    p_dc: dict[int, float]
    i_c: dict[int, float]
    p_loss: dict[int, float]
    delta_f: dict[int, float]

    def to_json(self) -> str:
        doc = {
            "ac_buses": {str(i): {"u": self.u[i], "delta": self.delta[i]} for i in sorted(self.u)},
            "dc_buses": {str(i): {"u_dc": self.u_dc[i]} for i in sorted(self.u_dc)},
            "generators": {str(i): {"p_g": self.p_g[i], "q_g": self.q_g[i]} for i in sorted(self.p_g)},
            "converters": {str(i): {"p_c": self.p_c[i], "q_c": self.q_c[i],
                                    "p_dc": self.p_dc[i], "i_c": self.i_c[i],
                                    "p_loss": self.p_loss[i]} for i in sorted(self.p_c)},
            "areas": {str(a): {"delta_f": self.delta_f[a]} for a in sorted(self.delta_f)},
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "OperatingPoint":
        doc = json.loads(text)
        return cls(
            u={int(i): rec["u"] for i, rec in doc["ac_buses"].items()},
            delta={int(i): rec["delta"] for i, rec in doc["ac_buses"].items()},
            u_dc={int(i): rec["u_dc"] for i, rec in doc["dc_buses"].items()},
            p_g={int(i): rec["p_g"] for i, rec in doc["generators"].items()},
            q_g={int(i): rec["q_g"] for i, rec in doc["generators"].items()},
            p_c={int(i): rec["p_c"] for i, rec in doc["converters"].items()},
            q_c={int(i): rec["q_c"] for i, rec in doc["converters"].items()},
            p_dc={int(i): rec["p_dc"] for i, rec in doc["converters"].items()},
            i_c={int(i): rec["i_c"] for i, rec in doc["converters"].items()},
            p_loss={int(i): rec["p_loss"] for i, rec in doc["converters"].items()},
            delta_f={int(a): rec["delta_f"] for a, rec in doc["areas"].items()},
        )


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def build_ybus(case: NetworkCase) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Dense bus conductance/susceptance matrices over in-service branches.

    Returns (G, B, bus_ids) with rows/columns ordered by ascending bus id.
    """
    ids = sorted(bus.id for bus in case.ac_buses)
    idx = {bus_id: i for i, bus_id in enumerate(ids)}
    n = len(ids)
    Y = np.zeros((n, n), dtype=complex)
    for br in case.in_service_ac_branches():
        i, j = idx[br.from_bus], idx[br.to_bus]
        y = br.g + 1j * br.b
        Y[i, i] += y + 1j * br.b_shunt / 2.0
        Y[j, j] += y + 1j * br.b_shunt / 2.0
        Y[i, j] -= y
        Y[j, i] -= y
    return Y.real.copy(), Y.imag.copy(), ids


def ac_injections(u: np.ndarray, delta: np.ndarray, case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """Active/reactive power flowing from each AC bus into the network.

    p_i = u_i * sum_j u_j (G_ij cos d_ij + B_ij sin d_ij)
    q_i = u_i * sum_j u_j (G_ij sin d_ij - B_ij cos d_ij)
    """
    u = np.asarray(u, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(u <= 0):
        raise ValueError("voltage magnitudes must be strictly positive")
    G, B, _ = build_ybus(case)
    dd = delta[:, None] - delta[None, :]
    cos, sin = np.cos(dd), np.sin(dd)
    p = u * ((G * cos + B * sin) @ u)
    q = u * ((G * sin - B * cos) @ u)
    return p, q


def dc_laplacian(case: NetworkCase) -> tuple[np.ndarray, list[int]]:
    ids = sorted(bus.id for bus in case.dc_buses)
    idx = {bus_id: i for i, bus_id in enumerate(ids)}
    m = len(ids)
    M = np.zeros((m, m))
    for br in case.in_service_dc_branches():
        i, j = idx[br.from_bus], idx[br.to_bus]
        M[i, i] += br.y_dc
        M[j, j] += br.y_dc
        M[i, j] -= br.y_dc
        M[j, i] -= br.y_dc
    return M, ids


def dc_injections(u_dc: np.ndarray, case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus DC current and the grid-side power ``2 u i`` it implies."""
    u_dc = np.asarray(u_dc, dtype=float)
    if np.any(u_dc <= 0):
        raise ValueError("DC voltages must be strictly positive")
    M, _ = dc_laplacian(case)
    i_dc = M @ u_dc
    return i_dc, 2.0 * u_dc * i_dc


def dc_line_losses(case: NetworkCase, u_dc: Mapping[int, float]) -> float:
    """Total DC line losses computed branch by branch (both poles)."""
    total = 0.0
    for br in case.in_service_dc_branches():
        du = u_dc[br.from_bus] - u_dc[br.to_bus]
        total += 2.0 * br.y_dc * du * du
    return total


def reactor_current(p_c: float, q_c: float, u_c: float) -> float:
    """Phase reactor current from apparent power: ``sqrt(p^2+q^2) / (3 u)``."""
    if u_c <= 0:
        raise ValueError("PCC voltage must be strictly positive")
    return math.sqrt(p_c * p_c + q_c * q_c) / (3.0 * u_c)


def converter_loss(i_c: float, direction: str, station) -> float:
    """Converter losses ``a + b*i + c*i^2``; ``c`` depends on direction."""
    if i_c < 0:
        raise ValueError("reactor current must be nonnegative")
    if direction == RECTIFIER:
        c = station.loss_c_rec
    elif direction == INVERTER:
        c = station.loss_c_inv
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return station.loss_a + station.loss_b * i_c + c * i_c * i_c


def loss_direction(p_c: float) -> str:
    """AC-to-DC flow uses rectifier coefficients; the boundary p_c = 0 too."""
    return RECTIFIER if p_c >= 0 else INVERTER


def droop_residual(settings: DroopSettings, p_dc: float, u_dc: float, f_pcc: float,
                   include_frequency: bool | None = None) -> float:
    """Deviation from the converter droop characteristic.

    r = (p_dc - p_dc_0) + (u_dc - u_dc_0)/k_v [+ (f_pcc - f_ref)/k_f]

    The frequency term is included when the converter carries a frequency
    gain (``include_frequency=None`` infers this from ``k_f``).
    """
    if settings.k_v <= 0:
        raise ValueError("k_v must be strictly positive")
    if include_frequency is None:
        include_frequency = settings.k_f is not None
    r = (p_dc - settings.p_dc_0) + (u_dc - settings.u_dc_0) / settings.k_v
    if include_frequency:
        if settings.k_f is None or settings.k_f <= 0:
            raise ValueError("k_f must be strictly positive when the frequency term is active")
        r += (f_pcc - settings.f_ref) / settings.k_f
    return r


def area_frequency_balance(delta_f: Mapping[int, float], p_g_set: Mapping[int, float],
                           area_drain: Mapping[int, float], case: NetworkCase) -> dict[int, float]:
    """Area power mismatch as a function of the frequency deviation.

    ``area_drain`` holds, per area, everything generation must cover:
    demand plus converter AC draw plus network losses minus fixed
    injections.  Each in-service generator responds with
    ``p_set - governor_droop * delta_f``.
    """
    residual: dict[int, float] = {}
    for area in case.areas():
        gen_total = 0.0
        for gen in case.in_service_generators():
            if case.ac_bus(gen.bus).area == area:
                gen_total += p_g_set.get(gen.id, 0.0) - gen.governor_droop * delta_f[area]
        residual[area] = gen_total - area_drain.get(area, 0.0)
    return residual


def solve_area_frequency(p_g_set: Mapping[int, float], area_drain: Mapping[int, float],
                         case: NetworkCase) -> dict[int, float]:
    """Closed-form frequency deviation from the aggregate governor response."""
    out: dict[int, float] = {}
    for area in case.areas():
        total_droop = sum(g.governor_droop for g in case.in_service_generators()
                          if case.ac_bus(g.bus).area == area)
        imbalance = sum(p_g_set.get(g.id, 0.0) for g in case.in_service_generators()
                        if case.ac_bus(g.bus).area == area) - area_drain.get(area, 0.0)
        if total_droop <= 0.0:
            if abs(imbalance) > 1e-12:
                raise SingularFrequencyError(
                    f"area {area}: zero governor response with nonzero imbalance")
            out[area] = 0.0
        else:
            out[area] = imbalance / total_droop
    return out


def smooth_apparent(p: float, q: float) -> float:
    return math.sqrt(p * p + q * q + SMOOTH_EPS)


# ---------------------------------------------------------------------------
# Power-flow controls
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConverterControl:
    """Fixed control assignment of one converter during a power flow.

    ``droop`` carries references for every mode: active-power reads
    ``p_dc_0`` as its setpoint, dc-voltage reads ``u_dc_0``, droop modes use
    the full characteristic.
    """

    mode: str
    droop: DroopSettings = field(default_factory=DroopSettings)
    q_c_set: float = 0.0


@dataclass(frozen=True)
class PowerFlowControls:
    converters: Mapping[int, ConverterControl]
    u_set: Mapping[int, float] = field(default_factory=dict)    # per voltage-controlled AC bus
    p_set: Mapping[int, float] = field(default_factory=dict)    # per generator

    @staticmethod
    def from_case(case: NetworkCase) -> "PowerFlowControls":
        convs = {c.id: ConverterControl(mode=c.control_mode, droop=c.setpoints)
                 for c in case.in_service_converters()}
        return PowerFlowControls(converters=convs)


def controls_holding_point(case: NetworkCase, point: OperatingPoint,
                           modes: Mapping[int, str] | None = None,
                           droop: Mapping[int, DroopSettings] | None = None) -> PowerFlowControls:
    """Controls that reproduce ``point`` as a power-flow fixed point.

    Generator setpoints, AVR voltage targets and converter reactive
    setpoints are frozen at the given operating point; converter modes and
    droop settings default to the case definition unless overridden.
    """
    convs = {}
    for c in case.in_service_converters():
        mode = (modes or {}).get(c.id, c.control_mode)
        settings = (droop or {}).get(c.id, c.setpoints)
        if mode == "active-power":
            settings = DroopSettings(p_dc_0=point.p_dc[c.id], u_dc_0=settings.u_dc_0,
                                     f_ref=settings.f_ref, k_v=settings.k_v, k_f=settings.k_f,
                                     k_min=settings.k_min, k_max=settings.k_max)
        convs[c.id] = ConverterControl(mode=mode, droop=settings, q_c_set=point.q_c[c.id])
    u_set = {}
    for gen in case.in_service_generators():
        u_set[gen.bus] = point.u[gen.bus]
    p_set = {gen.id: point.p_g[gen.id] for gen in case.in_service_generators()}
    return PowerFlowControls(converters=convs, u_set=u_set, p_set=p_set)


# ---------------------------------------------------------------------------
# Newton power flow
# ---------------------------------------------------------------------------

class _PfLayout:
    """Index bookkeeping for the square droop-governed power-flow system."""

    def __init__(self, case: NetworkCase, controls: PowerFlowControls):
        self.case = case
        self.controls = controls
        self.ac_ids = sorted(bus.id for bus in case.ac_buses)
        self.n = len(self.ac_ids)
        self.ac_index = {b: i for i, b in enumerate(self.ac_ids)}
        self.areas = list(case.areas())
        self.area_index = {a: i for i, a in enumerate(self.areas)}
        self.bus_area = np.array([case.ac_bus(b).area for b in self.ac_ids])
        self.bus_area_idx = np.array([self.area_index[a] for a in self.bus_area])

        self.ref_buses = {}
        for bus in case.ac_buses:
            if bus.bus_kind == "slack-candidate":
                self.ref_buses[bus.area] = bus.id
        self.nonref_ids = [b for b in self.ac_ids if b not in self.ref_buses.values()]

        gens = case.in_service_generators()
        self.vc_buses = sorted({g.bus for g in gens})
        self.pq_buses = [b for b in self.ac_ids if b not in self.vc_buses]
        self.gens_at = {b: [g for g in gens if g.bus == b] for b in self.vc_buses}

        self.dc_ids = sorted(bus.id for bus in case.dc_buses)
        self.m = len(self.dc_ids)
        self.dc_index = {b: i for i, b in enumerate(self.dc_ids)}

        self.convs = [case.converter(cid) for cid in sorted((controls.converters or {}).keys())
                      if case.converter(cid).in_service]
        self.k = len(self.convs)
        missing = {c.id for c in case.in_service_converters()} - {c.id for c in self.convs}
        if missing:
            raise PowerFlowError(f"controls missing for in-service converter(s) {sorted(missing)}")
        for conv in self.convs:
            mode = controls.converters[conv.id].mode
            if mode not in PF_MODES:
                raise PowerFlowError(f"converter {conv.id}: unknown control mode {mode!r}")

        # unknown slices
        sizes = [len(self.nonref_ids), len(self.areas), len(self.pq_buses),
                 len(self.vc_buses), self.m, self.k, self.k, self.k]
        names = ["delta", "delta_f", "u_pq", "q_vc", "u_dc", "p_c", "p_dc", "i_c"]
        self.slices = {}
        start = 0
        for name, size in zip(names, sizes):
            self.slices[name] = slice(start, start + size)
            start += size
        self.n_unknowns = start

        self.G, self.B, _ = build_ybus(case)
        self.M, _ = dc_laplacian(case)

        # static bus injections: fixed sources minus demand
        self.p_static = np.zeros(self.n)
        self.q_static = np.zeros(self.n)
        for bus in case.ac_buses:
            i = self.ac_index[bus.id]
            self.p_static[i] -= bus.p_demand
            self.q_static[i] -= bus.q_demand
        for inj in case.fixed_injections:
            i = self.ac_index[inj.bus]
            self.p_static[i] += inj.p
            self.q_static[i] += inj.q
        for conv in self.convs:
            self.q_static[self.ac_index[conv.ac_bus]] -= controls.converters[conv.id].q_c_set

        # governor response per bus and per area
        self.gov_bus = np.zeros(self.n)
        self.pset_bus = np.zeros(self.n)
        for gen in gens:
            i = self.ac_index[gen.bus]
            self.gov_bus[i] += gen.governor_droop
            self.pset_bus[i] += controls.p_set.get(gen.id, 0.0)

        self._check_regulation()

    def _check_regulation(self) -> None:
        case, controls = self.case, self.controls
        if self.m:
            # every connected DC component needs a voltage-regulating converter
            parent = {b: b for b in self.dc_ids}

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for br in case.in_service_dc_branches():
                ra, rb = find(br.from_bus), find(br.to_bus)
                if ra != rb:
                    parent[ra] = rb
            regulated = set()
            for conv in self.convs:
                mode = controls.converters[conv.id].mode
                if mode in ("voltage-droop", "voltage-frequency-droop", MODE_DC_VOLTAGE):
                    regulated.add(find(conv.dc_bus))
            components = {find(b) for b in self.dc_ids}
            unregulated = components - regulated
            if unregulated:
                raise MissingVoltageRegulationError(
                    "DC grid has a connected component without any voltage-regulating "
                    "converter (designate a droop or dc-voltage converter)")
        for area in self.areas:
            total_gov = sum(g.governor_droop for g in case.in_service_generators()
                            if case.ac_bus(g.bus).area == area)
            has_freq_conv = any(
                controls.converters[c.id].mode == "voltage-frequency-droop"
                and case.ac_bus(c.ac_bus).area == area for c in self.convs)
            if total_gov <= 0.0 and not has_freq_conv:
                raise SingularFrequencyError(
                    f"area {area}: no governor response and no frequency-droop converter")

    # -- state helpers ---------------------------------------------------
    def full_state(self, x: np.ndarray):
        delta = np.zeros(self.n)
        for b, xi in zip(self.nonref_ids, x[self.slices["delta"]]):
            delta[self.ac_index[b]] = xi
        u = np.ones(self.n)
        for b in self.vc_buses:
            u[self.ac_index[b]] = self.controls.u_set.get(b, 1.0)
        for b, xi in zip(self.pq_buses, x[self.slices["u_pq"]]):
            u[self.ac_index[b]] = xi
        return delta, u

    def x0(self, warm: OperatingPoint | None) -> np.ndarray:
        x = np.zeros(self.n_unknowns)
        sl = self.slices
        if warm is not None:
            x[sl["delta"]] = [warm.delta[b] for b in self.nonref_ids]
            x[sl["delta_f"]] = [warm.delta_f.get(a, 0.0) for a in self.areas]
            x[sl["u_pq"]] = [warm.u[b] for b in self.pq_buses]
            x[sl["q_vc"]] = [sum(warm.q_g.get(g.id, 0.0) for g in self.gens_at[b])
                             for b in self.vc_buses]
            x[sl["u_dc"]] = [warm.u_dc[b] for b in self.dc_ids]
            x[sl["p_c"]] = [warm.p_c.get(c.id, 0.0) for c in self.convs]
            x[sl["p_dc"]] = [warm.p_dc.get(c.id, 0.0) for c in self.convs]
            x[sl["i_c"]] = [max(warm.i_c.get(c.id, 0.0), 1e-6) for c in self.convs]
            return x
        x[sl["u_pq"]] = 1.0
        x[sl["u_dc"]] = [self.case.dc_bus(b).u_dc_rated for b in self.dc_ids]
        p_dc0 = []
        for conv in self.convs:
            ctrl = self.controls.converters[conv.id]
            p_dc0.append(ctrl.droop.p_dc_0 if ctrl.mode != MODE_DC_VOLTAGE else 0.0)
        x[sl["p_dc"]] = p_dc0
        x[sl["p_c"]] = [p + self.case.converter(c.id).loss_a for p, c in zip(p_dc0, self.convs)]
        x[sl["i_c"]] = [smooth_apparent(p, self.controls.converters[c.id].q_c_set) / 3.0
                        for p, c in zip(x[sl["p_c"]], self.convs)]
        return x


def _ds_dv(G: np.ndarray, B: np.ndarray, u: np.ndarray, delta: np.ndarray):
    """Complex-voltage partials of the bus power injections."""
    Y = G + 1j * B
    V = u * np.exp(1j * delta)
    Ibus = Y @ V
    dV = np.diag(V)
    dI = np.diag(Ibus)
    dnorm = np.diag(V / np.abs(V))
    dS_dd = 1j * dV @ np.conj(dI - Y @ dV)
    dS_du = dnorm @ np.conj(dI) + dV @ np.conj(Y @ dnorm)
    return dS_dd, dS_du


def _pf_residual(layout: _PfLayout, x: np.ndarray, need_jac: bool):
    case, controls = layout.case, layout.controls
    sl = layout.slices
    n, m, k = layout.n, layout.m, layout.k
    delta, u = layout.full_state(x)
    dfreq = x[sl["delta_f"]]
    q_vc = x[sl["q_vc"]]
    u_dc = x[sl["u_dc"]]
    p_c = x[sl["p_c"]]
    p_dc = x[sl["p_dc"]]
    i_c = x[sl["i_c"]]

    dd = delta[:, None] - delta[None, :]
    cosd, sind = np.cos(dd), np.sin(dd)
    P = u * ((layout.G * cosd + layout.B * sind) @ u)
    Q = u * ((layout.G * sind - layout.B * cosd) @ u)

    # bus-level P/Q residuals (all buses)
    resP = layout.p_static - P
    if len(layout.areas):
        resP += layout.pset_bus - layout.gov_bus * dfreq[layout.bus_area_idx]
    resQ = layout.q_static - Q
    for b, q in zip(layout.vc_buses, q_vc):
        resQ[layout.ac_index[b]] += q
    for conv, pc in zip(layout.convs, p_c):
        resP[layout.ac_index[conv.ac_bus]] -= pc

    # DC bus residuals
    if m:
        Mu = layout.M @ u_dc
        resDC = -2.0 * u_dc * Mu
        for conv, pdc in zip(layout.convs, p_dc):
            resDC[layout.dc_index[conv.dc_bus]] += pdc
    else:
        resDC = np.zeros(0)

    # converter rows
    resCpl = np.zeros(k)
    resCur = np.zeros(k)
    resMode = np.zeros(k)
    for ci, conv in enumerate(layout.convs):
        ctrl = controls.converters[conv.id]
        c_loss = conv.loss_c_rec if p_c[ci] >= 0 else conv.loss_c_inv
        resCpl[ci] = p_c[ci] - p_dc[ci] - (conv.loss_a + conv.loss_b * i_c[ci]
                                           + c_loss * i_c[ci] ** 2)
        u_pcc = u[layout.ac_index[conv.ac_bus]]
        rho = smooth_apparent(p_c[ci], ctrl.q_c_set)
        resCur[ci] = 3.0 * u_pcc * i_c[ci] - rho
        udc_c = u_dc[layout.dc_index[conv.dc_bus]]
        area = case.ac_bus(conv.ac_bus).area
        f_pcc = 1.0 + dfreq[layout.area_index[area]]
        sp = ctrl.droop
        if ctrl.mode == "active-power":
            resMode[ci] = p_dc[ci] - sp.p_dc_0
        elif ctrl.mode == MODE_DC_VOLTAGE:
            resMode[ci] = udc_c - sp.u_dc_0
        elif ctrl.mode == "voltage-droop":
            resMode[ci] = droop_residual(sp, p_dc[ci], udc_c, f_pcc, include_frequency=False)
        else:
            resMode[ci] = droop_residual(sp, p_dc[ci], udc_c, f_pcc, include_frequency=True)

    nonref_idx = [layout.ac_index[b] for b in layout.nonref_ids]
    area_rows = np.array([resP[layout.bus_area == a].sum() for a in layout.areas])
    r = np.concatenate([resP[nonref_idx], area_rows, resQ, resDC, resCpl, resCur, resMode])

    if not need_jac:
        return r, None

    N = layout.n_unknowns
    nonref_count = len(layout.nonref_ids)
    nA = len(layout.areas)
    rows = {}
    start = 0
    for name, size in [("P", nonref_count), ("area", nA), ("Q", n), ("DC", m),
                       ("cpl", k), ("cur", k), ("mode", k)]:
        rows[name] = slice(start, start + size)
        start += size
    J = np.zeros((start, N))

    dS_dd, dS_du = _ds_dv(layout.G, layout.B, u, delta)
    dPdd, dPdu = dS_dd.real, dS_du.real
    dQdd, dQdu = dS_dd.imag, dS_du.imag

    # full-bus P-residual Jacobian, then select non-ref rows / sum per area
    JP = np.zeros((n, N))
    col_d = sl["delta"].start
    for jj, b in enumerate(layout.nonref_ids):
        JP[:, col_d + jj] = -dPdd[:, layout.ac_index[b]]
    col_u = sl["u_pq"].start
    for jj, b in enumerate(layout.pq_buses):
        JP[:, col_u + jj] = -dPdu[:, layout.ac_index[b]]
    col_f = sl["delta_f"].start
    for ai, a in enumerate(layout.areas):
        mask = layout.bus_area == a
        JP[mask, col_f + ai] = -layout.gov_bus[mask]
    col_pc = sl["p_c"].start
    for ci, conv in enumerate(layout.convs):
        JP[layout.ac_index[conv.ac_bus], col_pc + ci] -= 1.0
    J[rows["P"], :] = JP[nonref_idx, :]
    for ai, a in enumerate(layout.areas):
        J[rows["area"].start + ai, :] = JP[layout.bus_area == a, :].sum(axis=0)

    JQ = np.zeros((n, N))
    for jj, b in enumerate(layout.nonref_ids):
        JQ[:, col_d + jj] = -dQdd[:, layout.ac_index[b]]
    for jj, b in enumerate(layout.pq_buses):
        JQ[:, col_u + jj] = -dQdu[:, layout.ac_index[b]]
    col_q = sl["q_vc"].start
    for jj, b in enumerate(layout.vc_buses):
        JQ[layout.ac_index[b], col_q + jj] += 1.0
    J[rows["Q"], :] = JQ

    if m:
        col_udc = sl["u_dc"].start
        Mu = layout.M @ u_dc
        Jdc = -2.0 * (np.diag(Mu) + u_dc[:, None] * layout.M)
        J[rows["DC"], col_udc:col_udc + m] = Jdc
        col_pdc = sl["p_dc"].start
        for ci, conv in enumerate(layout.convs):
            J[rows["DC"].start + layout.dc_index[conv.dc_bus], col_pdc + ci] += 1.0

    col_pdc = sl["p_dc"].start
    col_ic = sl["i_c"].start
    col_udc = sl["u_dc"].start
    for ci, conv in enumerate(layout.convs):
        ctrl = controls.converters[conv.id]
        c_loss = conv.loss_c_rec if p_c[ci] >= 0 else conv.loss_c_inv
        rr = rows["cpl"].start + ci
        J[rr, col_pc + ci] = 1.0
        J[rr, col_pdc + ci] = -1.0
        J[rr, col_ic + ci] = -(conv.loss_b + 2.0 * c_loss * i_c[ci])

        rr = rows["cur"].start + ci
        rho = smooth_apparent(p_c[ci], ctrl.q_c_set)
        J[rr, col_ic + ci] = 3.0 * u[layout.ac_index[conv.ac_bus]]
        J[rr, col_pc + ci] = -p_c[ci] / rho
        if conv.ac_bus in layout.pq_buses:
            J[rr, col_u + layout.pq_buses.index(conv.ac_bus)] = 3.0 * i_c[ci]

        rr = rows["mode"].start + ci
        sp = ctrl.droop
        if ctrl.mode == "active-power":
            J[rr, col_pdc + ci] = 1.0
        elif ctrl.mode == MODE_DC_VOLTAGE:
            J[rr, col_udc + layout.dc_index[conv.dc_bus]] = 1.0
        else:
            J[rr, col_pdc + ci] = 1.0
            J[rr, col_udc + layout.dc_index[conv.dc_bus]] = 1.0 / sp.k_v
            if ctrl.mode == "voltage-frequency-droop":
                area = case.ac_bus(conv.ac_bus).area
                J[rr, col_f + layout.area_index[area]] = 1.0 / sp.k_f
    return r, J


def state_layout(case: NetworkCase, controls: PowerFlowControls) -> tuple[list[str], list[str]]:
    """Human-readable unknown and residual orderings, for debugging."""
    layout = _PfLayout(case, controls)
    unknowns: list[str] = []
    unknowns += [f"delta[{b}]" for b in layout.nonref_ids]
    unknowns += [f"delta_f[{a}]" for a in layout.areas]
    unknowns += [f"u[{b}]" for b in layout.pq_buses]
    unknowns += [f"q_g_total[{b}]" for b in layout.vc_buses]
    unknowns += [f"u_dc[{b}]" for b in layout.dc_ids]
    unknowns += [f"p_c[{c.id}]" for c in layout.convs]
    unknowns += [f"p_dc[{c.id}]" for c in layout.convs]
    unknowns += [f"i_c[{c.id}]" for c in layout.convs]
    residuals: list[str] = []
    residuals += [f"p_balance[{b}]" for b in layout.nonref_ids]
    residuals += [f"area_frequency_balance[{a}]" for a in layout.areas]
    residuals += [f"q_balance[{b}]" for b in layout.ac_ids]
    residuals += [f"dc_balance[{b}]" for b in layout.dc_ids]
    residuals += [f"converter_coupling[{c.id}]" for c in layout.convs]
    residuals += [f"converter_current[{c.id}]" for c in layout.convs]
    residuals += [f"converter_mode[{c.id}]" for c in layout.convs]
    return unknowns, residuals


def pf_residual_vector(case: NetworkCase, controls: PowerFlowControls,
                       point: OperatingPoint) -> np.ndarray:
    """Evaluate the full residual vector at an operating point."""
    layout = _PfLayout(case, controls)
    x = layout.x0(point)
    r, _ = _pf_residual(layout, x, need_jac=False)
    return r


def solve_power_flow(case: NetworkCase, controls: PowerFlowControls,
                     warm_start: OperatingPoint | None = None,
                     tol: float = 1e-8, max_iter: int = 50) -> OperatingPoint:
    """Newton solve of the droop-governed power flow.

    Converges to ``max |residual| <= tol`` or raises
    :class:`PowerFlowNonConvergence` carrying the iterate trace.  Damping:
    the Newton step is halved (up to 10 times) whenever the residual norm
    fails to decrease.
    """
    layout = _PfLayout(case, controls)
    x = layout.x0(warm_start)
    trace: list[dict] = []
    r, _ = _pf_residual(layout, x, need_jac=False)
    norm = float(np.max(np.abs(r))) if r.size else 0.0
    norm2 = float(np.linalg.norm(r))
    trace.append({"iteration": 0, "residual": norm, "step": 0.0})
    iteration = 0
    while norm > tol:
        if iteration >= max_iter:
            raise PowerFlowNonConvergence(
                f"no convergence after {max_iter} iterations (residual {norm:.3e})", trace)
        r, J = _pf_residual(layout, x, need_jac=True)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(f"singular Jacobian at iteration {iteration}") from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError(f"non-finite Newton step at iteration {iteration}")
        step = 1.0
        accepted = False
        for _ in range(11):
            x_new = x + step * dx
            r_new, _ = _pf_residual(layout, x_new, need_jac=False)
            norm2_new = float(np.linalg.norm(r_new))
            if norm2_new < norm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise PowerFlowNonConvergence(
                f"stalled at iteration {iteration} (residual {norm:.3e})", trace)
        x = x_new
        norm = float(np.max(np.abs(r_new)))
        norm2 = norm2_new
        iteration += 1
        trace.append({"iteration": iteration, "residual": norm, "step": step})
    return _extract_point(layout, x)


def _extract_point(layout: _PfLayout, x: np.ndarray) -> OperatingPoint:
    case, controls = layout.case, layout.controls
    sl = layout.slices
    delta, u = layout.full_state(x)
    dfreq = x[sl["delta_f"]]
    q_vc = x[sl["q_vc"]]
    u_dc = x[sl["u_dc"]]
    p_c = x[sl["p_c"]]
    p_dc = x[sl["p_dc"]]
    i_c = x[sl["i_c"]]

    point = OperatingPoint(
        u={b: float(u[layout.ac_index[b]]) for b in layout.ac_ids},
        delta={b: float(delta[layout.ac_index[b]]) for b in layout.ac_ids},
        u_dc={b: float(v) for b, v in zip(layout.dc_ids, u_dc)},
        p_g={}, q_g={}, p_c={}, q_c={}, p_dc={}, i_c={}, p_loss={},
        delta_f={a: float(f) for a, f in zip(layout.areas, dfreq)},
    )
    for gen in case.in_service_generators():
        area = case.ac_bus(gen.bus).area
        point.p_g[gen.id] = float(controls.p_set.get(gen.id, 0.0)
                                  - gen.governor_droop * dfreq[layout.area_index[area]])
    for b, q in zip(layout.vc_buses, q_vc):
        gens = layout.gens_at[b]
        for gen in gens:
            point.q_g[gen.id] = float(q / len(gens))
    for ci, conv in enumerate(layout.convs):
        ctrl = controls.converters[conv.id]
        point.p_c[conv.id] = float(p_c[ci])
        point.q_c[conv.id] = float(ctrl.q_c_set)
        point.p_dc[conv.id] = float(p_dc[ci])
        point.i_c[conv.id] = float(i_c[ci])
        point.p_loss[conv.id] = converter_loss(max(float(i_c[ci]), 0.0),
                                               loss_direction(float(p_c[ci])), conv)
    # tripped converters stay in the report with zero coupling
    for conv in case.converters:
        if conv.id not in point.p_c:
            for attr in ("p_c", "q_c", "p_dc", "i_c", "p_loss"):
                getattr(point, attr)[conv.id] = 0.0
    return point
