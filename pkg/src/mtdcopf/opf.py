"""OPF program assembly for the converter control strategies.

Three strategies are supported:

* ``active-power-control`` — converters are free dispatch variables;
  a single cost minimization decides everything.
* ``adaptive-droop`` — every converter carries a voltage-droop row; the
  droop gains are optimized to flatten the DC voltage profile.
* ``proposed-droop`` — like adaptive, plus a frequency-droop term on a
  designated converter subset.

The staged procedure: stage 1 minimizes generation cost with converters
free and emits the droop references; stage 2 minimizes the squared DC
voltage deviation over state *and* droop gains, with generator setpoints
frozen at stage 1 (governors close the frequency); stage 3 re-minimizes
cost on the disturbed network with the gains held fixed.  If stage 3
fails to converge the gains are revised geometrically toward an anchor
and stage 3 is retried.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .model import DroopSettings, NetworkCase
from .nlp import NlpOptions, NlpProblem, NlpSolution, solve_nlp, STATUS_OPTIMAL
from .steadystate import (
    INVERTER,
    RECTIFIER,
    OperatingPoint,
    PowerFlowControls,
    SMOOTH_EPS,
    build_ybus,
    controls_holding_point,
    converter_loss,
    dc_laplacian,
    loss_direction,
)
from .contingency import Scenario, apply_scenario

STRATEGY_ACTIVE = "active-power-control"
STRATEGY_ADAPTIVE = "adaptive-droop"
STRATEGY_PROPOSED = "proposed-droop"
STRATEGIES = (STRATEGY_ACTIVE, STRATEGY_ADAPTIVE, STRATEGY_PROPOSED)

STAGE1 = "stage1-cost"
STAGE2 = "stage2-droop"
STAGE3 = "stage3-redispatch"


class OpfBuildError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyKind:
    kind: str
    frequency_converters: tuple[int, ...] = ()

    @staticmethod
    def active_power() -> "StrategyKind":
        return StrategyKind(STRATEGY_ACTIVE)

    @staticmethod
    def adaptive_droop() -> "StrategyKind":
        return StrategyKind(STRATEGY_ADAPTIVE)

    @staticmethod
    def proposed_droop(frequency_converters=(1, 2)) -> "StrategyKind":
        return StrategyKind(STRATEGY_PROPOSED, tuple(sorted(frequency_converters)))

    @property
    def uses_droop(self) -> bool:
        return self.kind in (STRATEGY_ADAPTIVE, STRATEGY_PROPOSED)


@dataclass
class OpfOptions:
    tol: float = 1e-6
    feas_tol: float = 1e-9
    max_iter: int = 400
    mu_min: float = 1e-11
    trace: bool = False
    free_references: bool = False
    direction_rounds: int = 3
    fallback_retries: int = 5
    fallback_anchor: str = "midpoint"
    # stage 1 keeps this much DC-voltage margin to the case bounds, so the
    # droop references it emits are strictly interior and the later droop
    # rows have two-sided room
    stage1_udc_margin: float = 5e-3

    def nlp_options(self) -> NlpOptions:
        return NlpOptions(tol=self.tol, feas_tol=self.feas_tol, max_iter=self.max_iter,
                          mu_min=self.mu_min, trace=self.trace)


@dataclass
class StageRefs:
    """Droop references and generator setpoints emitted by stage 1."""

    p_dc_0: dict[int, float]
    u_dc_0: dict[int, float]
    p_g_set: dict[int, float]
    point: OperatingPoint

    @staticmethod
    def from_stage1(result: "StageResult") -> "StageRefs":
        point = result.operating_point
        case = result.case
        return StageRefs(
            p_dc_0={c.id: point.p_dc[c.id] for c in case.in_service_converters()},
            u_dc_0={c.id: point.u_dc[c.dc_bus] for c in case.in_service_converters()},
            p_g_set={g.id: point.p_g[g.id] for g in case.in_service_generators()},
            point=point,
        )


@dataclass
class StageResult:
    stage: str
    case: NetworkCase
    operating_point: OperatingPoint
    droop: dict[int, DroopSettings]
    objective_value: float
    solution: NlpSolution

    @property
    def ok(self) -> bool:
        return self.solution.status == STATUS_OPTIMAL

    def to_jsonable(self) -> dict:
        sol = self.solution
        return {
            "stage": self.stage,
            "objective_value": self.objective_value,
            "status": sol.status,
            "iterations": sol.iterations,
            "kkt": {"stationarity": sol.kkt.stationarity,
                    "feasibility": sol.kkt.feasibility,
                    "complementarity": sol.kkt.complementarity},
            "droop": {str(cid): {"p_dc_0": sp.p_dc_0, "u_dc_0": sp.u_dc_0,
                                 "f_ref": sp.f_ref, "k_v": sp.k_v, "k_f": sp.k_f}
                      for cid, sp in sorted(self.droop.items())},
            "operating_point": _point_jsonable(self.operating_point),
        }


def _point_jsonable(point: OperatingPoint) -> dict:
    import json
    return json.loads(point.to_json())


@dataclass
class StrategyResult:
    strategy: StrategyKind
    scenario_id: str
    stages: list[StageResult]
    retries: int = 0
    k_history: list[dict] = field(default_factory=list)
    status: str = "ok"
    failure: str = ""

    @property
    def final_stage(self) -> StageResult:
        return self.stages[-1]

    def stage(self, name: str) -> StageResult | None:
        for st in self.stages:
            if st.stage == name:
                return st
        return None

    def to_jsonable(self) -> dict:
        return {
            "strategy": self.strategy.kind,
            "frequency_converters": list(self.strategy.frequency_converters),
            "scenario": self.scenario_id,
            "status": self.status,
            "failure": self.failure,
            "retries": self.retries,
            "k_history": [{str(c): list(kk) for c, kk in h.items()} for h in self.k_history],
            "stages": [st.to_jsonable() for st in self.stages],
        }


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

class OpfProgram:
    """An assembled OPF instance: an :class:`NlpProblem` plus the index
    bookkeeping to map solution vectors back to network quantities."""

    def __init__(self, case: NetworkCase, strategy: StrategyKind, stage: str,
                 refs: StageRefs | None, droop_k: Mapping[int, tuple] | None,
                 directions: Mapping[int, str], p_g_set: Mapping[int, float] | None,
                 warm: OperatingPoint | None, free_references: bool,
                 udc_margin: float = 0.0):
        self.case = case
        self.strategy = strategy
        self.stage = stage
        self.refs = refs
        self.droop_k = dict(droop_k or {})
        self.directions = dict(directions)
        self.p_g_set = dict(p_g_set or {})
        self.free_references = free_references
        self.udc_margin = udc_margin

        self.ac_ids = sorted(b.id for b in case.ac_buses)
        self.n = len(self.ac_ids)
        self.ac_index = {b: i for i, b in enumerate(self.ac_ids)}
        self.areas = list(case.areas())
        self.area_index = {a: i for i, a in enumerate(self.areas)}
        self.dc_ids = sorted(b.id for b in case.dc_buses)
        self.m = len(self.dc_ids)
        self.dc_index = {b: i for i, b in enumerate(self.dc_ids)}
        self.gens = list(case.in_service_generators())
        self.ng = len(self.gens)
        self.convs = list(case.in_service_converters())
        self.k = len(self.convs)
        self.conv_index = {c.id: i for i, c in enumerate(self.convs)}

        self.droop_convs = list(self.convs) if (strategy.uses_droop
                                                and stage in (STAGE2, STAGE3)) else []
        self.freq_convs = [c for c in self.droop_convs
                           if strategy.kind == STRATEGY_PROPOSED
                           and c.id in strategy.frequency_converters]
        self.kv_vars = self.droop_convs if stage == STAGE2 else []
        self.kf_vars = self.freq_convs if stage == STAGE2 else []
        self.ref_vars = self.droop_convs if (stage == STAGE2 and free_references) else []

        # variable layout
        blocks = [("delta", self.n), ("u", self.n), ("u_dc", self.m),
                  ("p_g", self.ng), ("q_g", self.ng),
                  ("p_c", self.k), ("q_c", self.k), ("p_dc", self.k), ("i_c", self.k),
                  ("delta_f", len(self.areas)),
                  ("k_v", len(self.kv_vars)), ("k_f", len(self.kf_vars)),
                  ("p_ref", len(self.ref_vars)), ("u_ref", len(self.ref_vars))]
        self.slices: dict[str, slice] = {}
        start = 0
        for name, size in blocks:
            self.slices[name] = slice(start, start + size)
            start += size
        self.nvar = start

        self.G, self.B, _ = build_ybus(case)
        self.M, _ = dc_laplacian(case)
        self.pairs = [(i, j) for i in range(self.n) for j in range(self.n)
                      if i != j and (self.G[i, j] != 0.0 or self.B[i, j] != 0.0)]

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

        self.ref_bus = {}
        for bus in case.ac_buses:
            if bus.bus_kind == "slack-candidate":
                self.ref_bus[bus.area] = bus.id

        self.loss_c = np.array([
            (c.loss_c_rec if self.directions.get(c.id, RECTIFIER) == RECTIFIER
             else c.loss_c_inv) for c in self.convs])
        self.loss_a = np.array([c.loss_a for c in self.convs])
        self.loss_b = np.array([c.loss_b for c in self.convs])

        # row layout
        rows = [("p_balance", self.n), ("q_balance", self.n), ("dc_balance", self.m),
                ("coupling", self.k), ("current", self.k),
                ("ref_angle", len(self.areas))]
        if stage == STAGE2:
            rows.append(("governor", self.ng))
        else:
            rows.append(("freq_pin", len(self.areas)))
        rows.append(("droop", len(self.droop_convs)))
        self.rows: dict[str, slice] = {}
        start = 0
        for name, size in rows:
            self.rows[name] = slice(start, start + size)
            start += size
        self.neq = start

        self.row_labels: list[str] = []
        self.row_labels += [f"p_balance[{b}]" for b in self.ac_ids]
        self.row_labels += [f"q_balance[{b}]" for b in self.ac_ids]
        self.row_labels += [f"dc_balance[{b}]" for b in self.dc_ids]
        self.row_labels += [f"converter_coupling[{c.id}]" for c in self.convs]
        self.row_labels += [f"converter_current[{c.id}]" for c in self.convs]
        self.row_labels += [f"reference_angle[{a}]" for a in self.areas]
        if stage == STAGE2:
            self.row_labels += [f"governor[{g.id}]" for g in self.gens]
        else:
            self.row_labels += [f"frequency_pin[{a}]" for a in self.areas]
        self.row_labels += [f"droop[{c.id}]" for c in self.droop_convs]

        self._lower, self._upper = self._bounds()
        self._x0 = self._start_vector(warm)
        self.nlp = NlpProblem(
            n=self.nvar,
            objective=self._objective,
            gradient=self._gradient,
            x0=self._x0,
            lower=self._lower,
            upper=self._upper,
            eq_fun=self._eq_fun,
            eq_jac=self._eq_jac,
            lag_hess=self._lag_hess,
            name=f"{strategy.kind}/{stage}",
        )

    # -- bounds and start -------------------------------------------------
    def _bounds(self):
        lo = np.full(self.nvar, -np.inf)
        up = np.full(self.nvar, np.inf)
        sl = self.slices
        for b in self.case.ac_buses:
            i = self.ac_index[b.id]
            lo[sl["delta"].start + i] = b.delta_min
            up[sl["delta"].start + i] = b.delta_max
            lo[sl["u"].start + i] = b.u_min
            up[sl["u"].start + i] = b.u_max
        for b in self.case.dc_buses:
            j = self.dc_index[b.id]
            pad = min(self.udc_margin, 0.25 * (b.u_dc_max - b.u_dc_min))
            lo[sl["u_dc"].start + j] = b.u_dc_min + pad
            up[sl["u_dc"].start + j] = b.u_dc_max - pad
        for gi, g in enumerate(self.gens):
            lo[sl["p_g"].start + gi] = g.p_min
            up[sl["p_g"].start + gi] = g.p_max
            lo[sl["q_g"].start + gi] = g.q_min
            up[sl["q_g"].start + gi] = g.q_max
        for ci, c in enumerate(self.convs):
            lo[sl["p_dc"].start + ci] = c.p_dc_min
            up[sl["p_dc"].start + ci] = c.p_dc_max
            lo[sl["i_c"].start + ci] = 0.0
        for ki, c in enumerate(self.kv_vars):
            lo[sl["k_v"].start + ki] = c.setpoints.k_min
            up[sl["k_v"].start + ki] = c.setpoints.k_max
        for ki, c in enumerate(self.kf_vars):
            lo[sl["k_f"].start + ki] = c.setpoints.k_min
            up[sl["k_f"].start + ki] = c.setpoints.k_max
        for ri, c in enumerate(self.ref_vars):
            lo[sl["p_ref"].start + ri] = c.p_dc_min
            up[sl["p_ref"].start + ri] = c.p_dc_max
            bus = self.case.dc_bus(c.dc_bus)
            lo[sl["u_ref"].start + ri] = bus.u_dc_min
            up[sl["u_ref"].start + ri] = bus.u_dc_max
        return lo, up

    def _start_vector(self, warm: OperatingPoint | None) -> np.ndarray:
        sl = self.slices
        x = np.zeros(self.nvar)
        if warm is not None:
            x[sl["delta"]] = [warm.delta.get(b, 0.0) for b in self.ac_ids]
            x[sl["u"]] = [warm.u.get(b, 1.0) for b in self.ac_ids]
            x[sl["u_dc"]] = [warm.u_dc.get(b, 1.0) for b in self.dc_ids]
            x[sl["p_g"]] = [warm.p_g.get(g.id, 0.5 * (g.p_min + g.p_max)) for g in self.gens]
            x[sl["q_g"]] = [warm.q_g.get(g.id, 0.0) for g in self.gens]
            x[sl["p_c"]] = [warm.p_c.get(c.id, 0.0) for c in self.convs]
            x[sl["q_c"]] = [warm.q_c.get(c.id, 0.0) for c in self.convs]
            x[sl["p_dc"]] = [warm.p_dc.get(c.id, 0.0) for c in self.convs]
            x[sl["i_c"]] = [max(warm.i_c.get(c.id, 0.0), 1e-4) for c in self.convs]
            x[sl["delta_f"]] = [warm.delta_f.get(a, 0.0) for a in self.areas]
        else:
            x[sl["u"]] = [min(max(1.0, self.case.ac_bus(b).u_min), self.case.ac_bus(b).u_max)
                          for b in self.ac_ids]
            x[sl["u_dc"]] = [b.u_dc_rated for b in self.dc_buses_sorted()]
            x[sl["p_g"]] = [0.5 * (g.p_min + g.p_max) for g in self.gens]
            x[sl["q_g"]] = [min(max(0.0, g.q_min), g.q_max) for g in self.gens]
            x[sl["p_dc"]] = [min(max(0.0, c.p_dc_min), c.p_dc_max) for c in self.convs]
            x[sl["i_c"]] = 0.05
        x[sl["k_v"]] = [math.sqrt(c.setpoints.k_min * c.setpoints.k_max)
                        for c in self.kv_vars]
        x[sl["k_f"]] = [math.sqrt(c.setpoints.k_min * c.setpoints.k_max)
                        for c in self.kf_vars]
        if self.ref_vars:
            x[sl["p_ref"]] = [self.refs.p_dc_0[c.id] for c in self.ref_vars]
            x[sl["u_ref"]] = [self.refs.u_dc_0[c.id] for c in self.ref_vars]
        return x

    def dc_buses_sorted(self):
        return [self.case.dc_bus(b) for b in self.dc_ids]

    # -- objective ---------------------------------------------------------
    def _objective(self, x: np.ndarray) -> float:
        sl = self.slices
        if self.stage == STAGE2:
            u_dc = x[sl["u_dc"]]
            rated = np.array([b.u_dc_rated for b in self.dc_buses_sorted()])
            return float(np.sum((u_dc - rated) ** 2))
        p = x[sl["p_g"]]
        alpha = np.array([g.alpha for g in self.gens])
        beta = np.array([g.beta for g in self.gens])
        gamma = np.array([g.gamma for g in self.gens])
        return float(np.sum(alpha * p * p + beta * p + gamma))

    def _gradient(self, x: np.ndarray) -> np.ndarray:
        sl = self.slices
        grad = np.zeros(self.nvar)
        if self.stage == STAGE2:
            u_dc = x[sl["u_dc"]]
            rated = np.array([b.u_dc_rated for b in self.dc_buses_sorted()])
            grad[sl["u_dc"]] = 2.0 * (u_dc - rated)
        else:
            p = x[sl["p_g"]]
            alpha = np.array([g.alpha for g in self.gens])
            beta = np.array([g.beta for g in self.gens])
            grad[sl["p_g"]] = 2.0 * alpha * p + beta
        return grad

    # -- equality constraints ----------------------------------------------
    def _droop_terms(self, x, conv):
        """Gains and references seen by one droop row (variable or fixed)."""
        sl = self.slices
        has_freq = (self.strategy.kind == STRATEGY_PROPOSED
                    and conv.id in self.strategy.frequency_converters)
        if self.stage == STAGE2:
            kv = x[sl["k_v"].start + self.kv_vars.index(conv)]
            kf = x[sl["k_f"].start + self.kf_vars.index(conv)] if has_freq else None
        else:
            kv, kf_fixed = self.droop_k[conv.id]
            kf = kf_fixed if has_freq else None
        if self.ref_vars:
            ri = self.ref_vars.index(conv)
            p0 = x[sl["p_ref"].start + ri]
            u0 = x[sl["u_ref"].start + ri]
        else:
            p0 = self.refs.p_dc_0[conv.id]
            u0 = self.refs.u_dc_0[conv.id]
        return kv, kf, p0, u0

    def _eq_fun(self, x: np.ndarray) -> np.ndarray:
        sl = self.slices
        case = self.case
        delta = x[sl["delta"]]
        u = x[sl["u"]]
        u_dc = x[sl["u_dc"]]
        p_g = x[sl["p_g"]]
        q_g = x[sl["q_g"]]
        p_c = x[sl["p_c"]]
        q_c = x[sl["q_c"]]
        p_dc = x[sl["p_dc"]]
        i_c = x[sl["i_c"]]
        dfreq = x[sl["delta_f"]]

        dd = delta[:, None] - delta[None, :]
        cosd, sind = np.cos(dd), np.sin(dd)
        P = u * ((self.G * cosd + self.B * sind) @ u)
        Q = u * ((self.G * sind - self.B * cosd) @ u)
        resP = self.p_static - P
        resQ = self.q_static - Q
        for gi, g in enumerate(self.gens):
            resP[self.ac_index[g.bus]] += p_g[gi]
            resQ[self.ac_index[g.bus]] += q_g[gi]
        for ci, c in enumerate(self.convs):
            resP[self.ac_index[c.ac_bus]] -= p_c[ci]
            resQ[self.ac_index[c.ac_bus]] -= q_c[ci]

        if self.m:
            resDC = -2.0 * u_dc * (self.M @ u_dc)
            for ci, c in enumerate(self.convs):
                resDC[self.dc_index[c.dc_bus]] += p_dc[ci]
        else:
            resDC = np.zeros(0)

        resCpl = p_c - p_dc - (self.loss_a + self.loss_b * i_c + self.loss_c * i_c ** 2)
        u_pcc = np.array([u[self.ac_index[c.ac_bus]] for c in self.convs])
        rho = np.sqrt(p_c ** 2 + q_c ** 2 + SMOOTH_EPS)
        resCur = 3.0 * u_pcc * i_c - rho

        resRef = np.array([delta[self.ac_index[self.ref_bus[a]]] for a in self.areas])

        if self.stage == STAGE2:
            resFreq = np.array([
                p_g[gi] - self.p_g_set[g.id]
                + g.governor_droop * dfreq[self.area_index[case.ac_bus(g.bus).area]]
                for gi, g in enumerate(self.gens)])
        else:
            resFreq = dfreq.copy()

        resDroop = np.zeros(len(self.droop_convs))
        for di, conv in enumerate(self.droop_convs):
            kv, kf, p0, u0 = self._droop_terms(x, conv)
            ci = self.conv_index[conv.id]
            r = (p_dc[ci] - p0) + (u_dc[self.dc_index[conv.dc_bus]] - u0) / kv
            if kf is not None:
                area = case.ac_bus(conv.ac_bus).area
                f_pcc = 1.0 + dfreq[self.area_index[area]]
                r += (f_pcc - conv.setpoints.f_ref) / kf
            resDroop[di] = r

        return np.concatenate([resP, resQ, resDC, resCpl, resCur, resRef, resFreq, resDroop])

    def _eq_jac(self, x: np.ndarray) -> np.ndarray:
        sl = self.slices
        case = self.case
        delta = x[sl["delta"]]
        u = x[sl["u"]]
        u_dc = x[sl["u_dc"]]
        p_c = x[sl["p_c"]]
        q_c = x[sl["q_c"]]
        i_c = x[sl["i_c"]]
        dfreq = x[sl["delta_f"]]

        J = np.zeros((self.neq, self.nvar))
        rows = self.rows
        Y = self.G + 1j * self.B
        V = u * np.exp(1j * delta)
        Ibus = Y @ V
        dV = np.diag(V)
        dI = np.diag(Ibus)
        dnorm = np.diag(np.exp(1j * delta))
        dS_dd = 1j * dV @ np.conj(dI - Y @ dV)
        dS_du = dnorm @ np.conj(dI) + dV @ np.conj(Y @ dnorm)

        J[rows["p_balance"], sl["delta"]] = -dS_dd.real
        J[rows["p_balance"], sl["u"]] = -dS_du.real
        J[rows["q_balance"], sl["delta"]] = -dS_dd.imag
        J[rows["q_balance"], sl["u"]] = -dS_du.imag
        for gi, g in enumerate(self.gens):
            J[rows["p_balance"].start + self.ac_index[g.bus], sl["p_g"].start + gi] = 1.0
            J[rows["q_balance"].start + self.ac_index[g.bus], sl["q_g"].start + gi] = 1.0
        for ci, c in enumerate(self.convs):
            J[rows["p_balance"].start + self.ac_index[c.ac_bus], sl["p_c"].start + ci] = -1.0
            J[rows["q_balance"].start + self.ac_index[c.ac_bus], sl["q_c"].start + ci] = -1.0

        if self.m:
            Mu = self.M @ u_dc
            J[rows["dc_balance"], sl["u_dc"]] = -2.0 * (np.diag(Mu) + u_dc[:, None] * self.M)
            for ci, c in enumerate(self.convs):
                J[rows["dc_balance"].start + self.dc_index[c.dc_bus],
                  sl["p_dc"].start + ci] = 1.0

        rho = np.sqrt(p_c ** 2 + q_c ** 2 + SMOOTH_EPS)
        for ci, c in enumerate(self.convs):
            rr = rows["coupling"].start + ci
            J[rr, sl["p_c"].start + ci] = 1.0
            J[rr, sl["p_dc"].start + ci] = -1.0
            J[rr, sl["i_c"].start + ci] = -(self.loss_b[ci] + 2.0 * self.loss_c[ci] * i_c[ci])
            rr = rows["current"].start + ci
            J[rr, sl["u"].start + self.ac_index[c.ac_bus]] = 3.0 * i_c[ci]
            J[rr, sl["i_c"].start + ci] = 3.0 * u[self.ac_index[c.ac_bus]]
            J[rr, sl["p_c"].start + ci] = -p_c[ci] / rho[ci]
            J[rr, sl["q_c"].start + ci] = -q_c[ci] / rho[ci]

        for ai, a in enumerate(self.areas):
            J[rows["ref_angle"].start + ai,
              sl["delta"].start + self.ac_index[self.ref_bus[a]]] = 1.0

        if self.stage == STAGE2:
            for gi, g in enumerate(self.gens):
                rr = rows["governor"].start + gi
                J[rr, sl["p_g"].start + gi] = 1.0
                area = case.ac_bus(g.bus).area
                J[rr, sl["delta_f"].start + self.area_index[area]] = g.governor_droop
        else:
            for ai in range(len(self.areas)):
                J[rows["freq_pin"].start + ai, sl["delta_f"].start + ai] = 1.0

        for di, conv in enumerate(self.droop_convs):
            kv, kf, p0, u0 = self._droop_terms(x, conv)
            ci = self.conv_index[conv.id]
            rr = rows["droop"].start + di
            J[rr, sl["p_dc"].start + ci] = 1.0
            J[rr, sl["u_dc"].start + self.dc_index[conv.dc_bus]] = 1.0 / kv
            udc_c = u_dc[self.dc_index[conv.dc_bus]]
            if self.stage == STAGE2:
                J[rr, sl["k_v"].start + self.kv_vars.index(conv)] = -(udc_c - u0) / kv ** 2
            if kf is not None:
                area = case.ac_bus(conv.ac_bus).area
                f_dev = 1.0 + dfreq[self.area_index[area]] - conv.setpoints.f_ref
                J[rr, sl["delta_f"].start + self.area_index[area]] = 1.0 / kf
                if self.stage == STAGE2:
                    J[rr, sl["k_f"].start + self.kf_vars.index(conv)] = -f_dev / kf ** 2
            if self.ref_vars:
                ri = self.ref_vars.index(conv)
                J[rr, sl["p_ref"].start + ri] = -1.0
                J[rr, sl["u_ref"].start + ri] = -1.0 / kv
        return J

    def _lag_hess(self, x: np.ndarray, obj_w: float, lam: np.ndarray,
                  lam_ineq: np.ndarray) -> np.ndarray:
        sl = self.slices
        case = self.case
        delta = x[sl["delta"]]
        u = x[sl["u"]]
        u_dc = x[sl["u_dc"]]
        p_c = x[sl["p_c"]]
        q_c = x[sl["q_c"]]
        i_c = x[sl["i_c"]]
        dfreq = x[sl["delta_f"]]
        H = np.zeros((self.nvar, self.nvar))
        rows = self.rows

        # objective curvature
        if self.stage == STAGE2:
            for j in range(self.m):
                H[sl["u_dc"].start + j, sl["u_dc"].start + j] += 2.0 * obj_w
        else:
            for gi, g in enumerate(self.gens):
                H[sl["p_g"].start + gi, sl["p_g"].start + gi] += 2.0 * g.alpha * obj_w

        def add(a, b, v):
            H[a, b] += v
            if a != b:
                H[b, a] += v

        # AC balance rows: contribution -lam_i * hess(P_i) - lamq_i * hess(Q_i)
        lamP = lam[rows["p_balance"]]
        lamQ = lam[rows["q_balance"]]
        wP = -lamP
        wQ = -lamQ
        d0, u0c = sl["delta"].start, sl["u"].start
        for (i, j) in self.pairs:
            dij = delta[i] - delta[j]
            c_, s_ = math.cos(dij), math.sin(dij)
            sij = self.G[i, j] * c_ + self.B[i, j] * s_
            tij = self.G[i, j] * s_ - self.B[i, j] * c_
            uij = u[i] * u[j]
            wp, wq = wP[i], wQ[i]
            # term u_i u_j s_ij  (in P_i)
            add(d0 + i, d0 + i, -wp * uij * sij)
            add(d0 + j, d0 + j, -wp * uij * sij)
            add(d0 + i, d0 + j, wp * uij * sij)
            add(u0c + i, u0c + j, wp * sij)
            add(d0 + i, u0c + i, -wp * u[j] * tij)
            add(d0 + i, u0c + j, -wp * u[i] * tij)
            add(d0 + j, u0c + i, wp * u[j] * tij)
            add(d0 + j, u0c + j, wp * u[i] * tij)
            # term u_i u_j t_ij  (in Q_i)
            add(d0 + i, d0 + i, -wq * uij * tij)
            add(d0 + j, d0 + j, -wq * uij * tij)
            add(d0 + i, d0 + j, wq * uij * tij)
            add(u0c + i, u0c + j, wq * tij)
            add(d0 + i, u0c + i, wq * u[j] * sij)
            add(d0 + i, u0c + j, wq * u[i] * sij)
            add(d0 + j, u0c + i, -wq * u[j] * sij)
            add(d0 + j, u0c + j, -wq * u[i] * sij)
        for i in range(self.n):
            add(u0c + i, u0c + i, 2.0 * self.G[i, i] * wP[i] - 2.0 * self.B[i, i] * wQ[i])

        # DC rows: -2*lam_j * (e_j m_j^T + m_j e_j^T)
        if self.m:
            lamDC = lam[rows["dc_balance"]]
            block = -2.0 * (lamDC[:, None] * self.M)
            block = block + block.T
            H[sl["u_dc"], sl["u_dc"]] += block

        # coupling / current rows
        for ci, c in enumerate(self.convs):
            lamC = lam[rows["coupling"].start + ci]
            add(sl["i_c"].start + ci, sl["i_c"].start + ci, -2.0 * self.loss_c[ci] * lamC)
            lamI = lam[rows["current"].start + ci]
            iu = sl["u"].start + self.ac_index[c.ac_bus]
            add(iu, sl["i_c"].start + ci, 3.0 * lamI)
            rho = math.sqrt(p_c[ci] ** 2 + q_c[ci] ** 2 + SMOOTH_EPS)
            r3 = rho ** 3
            ip, iq = sl["p_c"].start + ci, sl["q_c"].start + ci
            add(ip, ip, -lamI * (q_c[ci] ** 2 + SMOOTH_EPS) / r3)
            add(iq, iq, -lamI * (p_c[ci] ** 2 + SMOOTH_EPS) / r3)
            add(ip, iq, lamI * p_c[ci] * q_c[ci] / r3)

        # droop rows (curvature only when gains are variables)
        if self.stage == STAGE2:
            for di, conv in enumerate(self.droop_convs):
                kv, kf, p0, u0 = self._droop_terms(x, conv)
                lamD = lam[rows["droop"].start + di]
                iudc = sl["u_dc"].start + self.dc_index[conv.dc_bus]
                ikv = sl["k_v"].start + self.kv_vars.index(conv)
                udc_c = u_dc[self.dc_index[conv.dc_bus]]
                add(iudc, ikv, -lamD / kv ** 2)
                add(ikv, ikv, 2.0 * lamD * (udc_c - u0) / kv ** 3)
                if self.ref_vars:
                    iuref = sl["u_ref"].start + self.ref_vars.index(conv)
                    add(iuref, ikv, lamD / kv ** 2)
                if kf is not None:
                    area = case.ac_bus(conv.ac_bus).area
                    idf = sl["delta_f"].start + self.area_index[area]
                    ikf = sl["k_f"].start + self.kf_vars.index(conv)
                    f_dev = 1.0 + dfreq[self.area_index[area]] - conv.setpoints.f_ref
                    add(idf, ikf, -lamD / kf ** 2)
                    add(ikf, ikf, 2.0 * lamD * f_dev / kf ** 3)
        return H

    # -- solution mapping ---------------------------------------------------
    def point_from_x(self, x: np.ndarray) -> OperatingPoint:
        sl = self.slices
        point = OperatingPoint(
            u={b: float(x[sl["u"].start + i]) for b, i in self.ac_index.items()},
            delta={b: float(x[sl["delta"].start + i]) for b, i in self.ac_index.items()},
            u_dc={b: float(x[sl["u_dc"].start + j]) for b, j in self.dc_index.items()},
            p_g={g.id: float(x[sl["p_g"].start + gi]) for gi, g in enumerate(self.gens)},
            q_g={g.id: float(x[sl["q_g"].start + gi]) for gi, g in enumerate(self.gens)},
            p_c={}, q_c={}, p_dc={}, i_c={}, p_loss={},
            delta_f={a: float(x[sl["delta_f"].start + ai])
                     for ai, a in enumerate(self.areas)},
        )
        for ci, c in enumerate(self.convs):
            point.p_c[c.id] = float(x[sl["p_c"].start + ci])
            point.q_c[c.id] = float(x[sl["q_c"].start + ci])
            point.p_dc[c.id] = float(x[sl["p_dc"].start + ci])
            point.i_c[c.id] = float(x[sl["i_c"].start + ci])
            direction = self.directions.get(c.id, RECTIFIER)
            point.p_loss[c.id] = converter_loss(max(point.i_c[c.id], 0.0), direction, c)
        for c in self.case.converters:
            if c.id not in point.p_c:
                for attr in ("p_c", "q_c", "p_dc", "i_c", "p_loss"):
                    getattr(point, attr)[c.id] = 0.0
        return point

    def k_from_x(self, x: np.ndarray) -> dict[int, tuple]:
        """Solved droop gains per converter id: (k_v, k_f or None)."""
        sl = self.slices
        out = {}
        for conv in self.droop_convs:
            if self.stage == STAGE2:
                kv = float(x[sl["k_v"].start + self.kv_vars.index(conv)])
                kf = (float(x[sl["k_f"].start + self.kf_vars.index(conv)])
                      if conv in self.kf_vars else None)
            else:
                kv, kf = self.droop_k[conv.id]
            out[conv.id] = (kv, kf)
        return out

    def refs_from_x(self, x: np.ndarray) -> dict[int, tuple]:
        """Droop references actually used (possibly re-optimized)."""
        sl = self.slices
        out = {}
        for conv in self.droop_convs:
            if self.ref_vars:
                ri = self.ref_vars.index(conv)
                out[conv.id] = (float(x[sl["p_ref"].start + ri]),
                                float(x[sl["u_ref"].start + ri]))
            else:
                out[conv.id] = (self.refs.p_dc_0[conv.id], self.refs.u_dc_0[conv.id])
        return out


def build_opf(case: NetworkCase, strategy: StrategyKind, stage: str,
              refs: StageRefs | None = None,
              droop_k: Mapping[int, tuple] | None = None,
              directions: Mapping[int, str] | None = None,
              p_g_set: Mapping[int, float] | None = None,
              warm: OperatingPoint | None = None,
              options: OpfOptions | None = None) -> OpfProgram:
    """Assemble one stage of the OPF as a smooth constrained program.

    Raises :class:`OpfBuildError` for undefined strategy/stage combinations
    and inconsistent inputs.
    """
    options = options or OpfOptions()
    if strategy.kind not in STRATEGIES:
        raise OpfBuildError(f"unknown strategy {strategy.kind!r}")
    if stage not in (STAGE1, STAGE2, STAGE3):
        raise OpfBuildError(f"unknown stage {stage!r}")
    if stage == STAGE2 and strategy.kind == STRATEGY_ACTIVE:
        raise OpfBuildError("stage2 is undefined under active-power-control "
                            "(there are no droop gains to optimize)")
    if strategy.kind == STRATEGY_PROPOSED:
        if not strategy.frequency_converters:
            raise OpfBuildError("proposed-droop requires a nonempty frequency subset")
        known = {c.id for c in case.converters}
        bad = set(strategy.frequency_converters) - known
        if bad:
            raise OpfBuildError(f"frequency subset references unknown converter(s) {sorted(bad)}")
    if stage in (STAGE2, STAGE3) and strategy.uses_droop and refs is None:
        raise OpfBuildError(f"{stage} requires droop references from stage 1")
    if stage == STAGE2 and p_g_set is None:
        p_g_set = dict(refs.p_g_set)
    if stage == STAGE3 and strategy.uses_droop and droop_k is None:
        raise OpfBuildError("stage3 under a droop strategy requires fixed gains from stage 2")

    if directions is None:
        directions = {}
        for c in case.in_service_converters():
            if warm is not None and abs(warm.p_c.get(c.id, 0.0)) > 1e-7:
                directions[c.id] = loss_direction(warm.p_c[c.id])
            elif refs is not None and c.id in refs.p_dc_0:
                directions[c.id] = RECTIFIER if refs.p_dc_0[c.id] >= 0 else INVERTER
            else:
                directions[c.id] = RECTIFIER
    return OpfProgram(case, strategy, stage, refs, droop_k, directions, p_g_set,
                      warm, options.free_references and stage == STAGE2,
                      udc_margin=options.stage1_udc_margin if stage == STAGE1 else 0.0)


def _solve_program(builder: Callable[[Mapping[int, str], OperatingPoint | None], OpfProgram],
                   warm: OperatingPoint | None, options: OpfOptions):
    """Solve with converter-direction fixup: if the realized power direction
    disagrees with the loss coefficients assumed at build time, rebuild with
    the realized directions and re-solve (warm-started)."""
    prog = builder(None, warm)
    directions = dict(prog.directions)
    sol = solve_nlp(prog.nlp, options.nlp_options())
    point = prog.point_from_x(sol.x)
    for _ in range(options.direction_rounds - 1):
        if sol.status != STATUS_OPTIMAL:
            break
        realized = {}
        flipped = False
        for cid, assumed in directions.items():
            if abs(point.p_c.get(cid, 0.0)) > 1e-7:
                d = loss_direction(point.p_c[cid])
            else:
                d = assumed
            realized[cid] = d
            flipped = flipped or d != assumed
        if not flipped:
            break
        directions = realized
        prog = builder(directions, point)
        sol = solve_nlp(prog.nlp, options.nlp_options())
        point = prog.point_from_x(sol.x)
    return prog, sol, point


def _droop_table(case: NetworkCase, refs: StageRefs | None,
                 k: Mapping[int, tuple] | None,
                 point: OperatingPoint) -> dict[int, DroopSettings]:
    out = {}
    for c in case.in_service_converters():
        sp = c.setpoints
        p0 = refs.p_dc_0[c.id] if refs and c.id in refs.p_dc_0 else point.p_dc[c.id]
        u0 = refs.u_dc_0[c.id] if refs and c.id in refs.u_dc_0 else point.u_dc[c.dc_bus]
        kv, kf = (k or {}).get(c.id, (sp.k_v, sp.k_f))
        out[c.id] = DroopSettings(p_dc_0=p0, u_dc_0=u0, f_ref=sp.f_ref,
                                  k_v=kv, k_f=kf, k_min=sp.k_min, k_max=sp.k_max)
    return out


def solve_stage1(case: NetworkCase, strategy: StrategyKind,
                 options: OpfOptions | None = None) -> StageResult:
    """Cost minimization with converters as free dispatch; emits the droop
    references (p_dc_0, u_dc_0) for the later stages."""
    options = options or OpfOptions()

    def builder(directions, warm):
        return build_opf(case, strategy, STAGE1, directions=directions, warm=warm,
                         options=options)

    prog, sol, point = _solve_program(builder, None, options)
    droop = _droop_table(case, None, None, point)
    return StageResult(stage=STAGE1, case=case, operating_point=point, droop=droop,
                       objective_value=sol.objective, solution=sol)


def solve_stage2(case: NetworkCase, strategy: StrategyKind, refs: StageRefs,
                 options: OpfOptions | None = None) -> StageResult:
    """DC-voltage-deviation minimization over state and droop gains.

    Generator setpoints stay at stage 1 dispatch (governors close the
    frequency); droop rows are anchored at the stage 1 references.
    """
    options = options or OpfOptions()
    if strategy.kind == STRATEGY_ACTIVE:
        raise OpfBuildError("stage2 is undefined under active-power-control")

    def builder(directions, warm):
        return build_opf(case, strategy, STAGE2, refs=refs, directions=directions,
                         warm=warm, options=options)

    prog, sol, point = _solve_program(builder, refs.point, options)
    k = prog.k_from_x(sol.x)
    used_refs = prog.refs_from_x(sol.x)
    droop = {}
    for c in case.in_service_converters():
        sp = c.setpoints
        kv, kf = k.get(c.id, (sp.k_v, sp.k_f))
        p0, u0 = used_refs.get(c.id, (refs.p_dc_0[c.id], refs.u_dc_0[c.id]))
        droop[c.id] = DroopSettings(p_dc_0=p0, u_dc_0=u0, f_ref=sp.f_ref,
                                    k_v=kv, k_f=kf, k_min=sp.k_min, k_max=sp.k_max)
    return StageResult(stage=STAGE2, case=case, operating_point=point, droop=droop,
                       objective_value=sol.objective, solution=sol)


def solve_stage3(case_post: NetworkCase, strategy: StrategyKind,
                 droop_k: Mapping[int, tuple] | None, refs: StageRefs | None,
                 warm: OperatingPoint | None = None,
                 options: OpfOptions | None = None) -> StageResult:
    """Cost re-minimization on the (possibly disturbed) network with droop
    rows active at fixed gains; under active-power-control the converters
    are re-dispatched freely."""
    options = options or OpfOptions()

    def builder(directions, warm_pt):
        return build_opf(case_post, strategy, STAGE3, refs=refs, droop_k=droop_k,
                         directions=directions, warm=warm_pt, options=options)

    prog, sol, point = _solve_program(builder, warm, options)
    droop = _droop_table(case_post, refs, droop_k, point)
    return StageResult(stage=STAGE3, case=case_post, operating_point=point, droop=droop,
                       objective_value=sol.objective, solution=sol)


def _revise_gains(k: Mapping[int, tuple], case: NetworkCase,
                  anchor: str | Mapping[int, float]) -> dict[int, tuple]:
    """Pull gains halfway (in log space) toward the anchor, clipped to the
    admissible range."""
    out = {}
    for cid, (kv, kf) in k.items():
        sp = case.converter(cid).setpoints
        if isinstance(anchor, str):
            target = math.sqrt(sp.k_min * sp.k_max)
        else:
            target = anchor.get(cid, math.sqrt(sp.k_min * sp.k_max))
        new_kv = math.exp(0.5 * (math.log(max(kv, 1e-12)) + math.log(target)))
        new_kv = min(max(new_kv, sp.k_min), sp.k_max)
        new_kf = None
        if kf is not None:
            new_kf = math.exp(0.5 * (math.log(max(kf, 1e-12)) + math.log(target)))
            new_kf = min(max(new_kf, sp.k_min), sp.k_max)
        out[cid] = (new_kv, new_kf)
    return out


def run_hierarchy(case: NetworkCase, strategy: StrategyKind, scenario: Scenario,
                  options: OpfOptions | None = None,
                  stage3_fault_hook: Callable[[int, dict], dict] | None = None
                  ) -> StrategyResult:
    """Execute the full staged procedure for one strategy and scenario.

    stage1 -> (stage2 unless active-power) -> apply scenario -> stage3.
    On stage3 non-convergence under a droop strategy, the gains are revised
    toward the anchor and stage3 is retried (at most ``fallback_retries``
    times).  ``stage3_fault_hook(attempt, gains) -> gains`` exists for
    fault-injection in tests.
    """
    options = options or OpfOptions()
    result = StrategyResult(strategy=strategy, scenario_id=scenario.id, stages=[])

    s1 = solve_stage1(case, strategy, options)
    result.stages.append(s1)
    if not s1.ok:
        result.status = "failed"
        result.failure = f"stage1 did not converge: {s1.solution.status}"
        return result
    refs = StageRefs.from_stage1(s1)

    gains: dict[int, tuple] | None = None
    warm = s1.operating_point
    if strategy.uses_droop:
        s2 = solve_stage2(case, strategy, refs, options)
        result.stages.append(s2)
        if not s2.ok:
            result.status = "failed"
            result.failure = f"stage2 did not converge: {s2.solution.status}"
            return result
        gains = {cid: (sp.k_v, sp.k_f) for cid, sp in s2.droop.items()}
        warm = s2.operating_point

    case_post = apply_scenario(case, scenario)
    live = {c.id for c in case_post.in_service_converters()}
    if gains is not None:
        gains = {cid: kk for cid, kk in gains.items() if cid in live}

    attempts = 1 + (options.fallback_retries if strategy.uses_droop else 0)
    s3 = None
    for attempt in range(attempts):
        k_try = gains
        if stage3_fault_hook is not None and gains is not None:
            k_try = stage3_fault_hook(attempt, dict(gains))
        if gains is not None:
            result.k_history.append(dict(k_try))
        s3 = solve_stage3(case_post, strategy, k_try, refs, warm=warm, options=options)
        if s3.ok or gains is None:
            break
        gains = _revise_gains(k_try, case_post, options.fallback_anchor)
        result.retries += 1
    result.stages.append(s3)
    if not s3.ok:
        result.status = "failed"
        result.failure = (f"stage3 did not converge after {result.retries} gain "
                          f"revision(s): {s3.solution.status}")
    return result


def strategy_controls(case: NetworkCase, strategy: StrategyKind,
                      stage1: StageResult, stage2: StageResult | None) -> PowerFlowControls:
    """Power-flow controls realizing a strategy's pre-disturbance operation.

    Converter modes follow the strategy; droop settings come from stage 2
    (references from stage 1); everything else is frozen at the
    pre-disturbance operating point.
    """
    pre_point = (stage2 or stage1).operating_point
    modes = {}
    droop = {}
    for c in case.in_service_converters():
        if strategy.kind == STRATEGY_ACTIVE:
            modes[c.id] = "active-power"
            droop[c.id] = DroopSettings(p_dc_0=stage1.operating_point.p_dc[c.id],
                                        u_dc_0=stage1.operating_point.u_dc[c.dc_bus],
                                        f_ref=c.setpoints.f_ref, k_v=c.setpoints.k_v,
                                        k_f=c.setpoints.k_f)
        else:
            sp = stage2.droop[c.id]
            if (strategy.kind == STRATEGY_PROPOSED
                    and c.id in strategy.frequency_converters):
                modes[c.id] = "voltage-frequency-droop"
            else:
                modes[c.id] = "voltage-droop"
                sp = replace(sp, k_f=None)
            droop[c.id] = sp
    return controls_holding_point(case, pre_point, modes=modes, droop=droop)
