"""Smooth nonlinear programming with a primal-dual interior-point solver.

Problems have the form::

    min  f(x)
    s.t. c(x)  = 0
         g(x) <= 0
         lower <= x <= upper      (entries may be +/- inf)

General inequalities are handled through slacks ``g(x) + s = 0, s > 0``;
bounds and slacks carry a logarithmic barrier with parameter ``mu``.  Each
barrier subproblem is solved by Newton steps on the perturbed KKT system
with a fraction-to-the-boundary rule, an exact-penalty line search and
inertia correction of the (dense) KKT matrix; ``mu`` is cut by a factor of
ten whenever the perturbed optimality conditions are met, so the barrier
sequence is strictly decreasing.  Identical inputs produce identical
iterate sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

STATUS_OPTIMAL = "kkt-optimal"
STATUS_MAX_ITER = "max-iterations"
STATUS_INFEASIBLE = "infeasible-detected"
STATUS_NUMERICAL = "numerical-failure"


class NlpDefinitionError(ValueError):
    """Inconsistent problem definition (callback shapes, bad bounds, ...)."""


@dataclass
class NlpProblem:
    """A twice-differentiable constrained program.

    ``lag_hess(x, obj_weight, lam_eq, lam_ineq)`` must return the Hessian of
    ``obj_weight * f + lam_eq . c + lam_ineq . g``; when omitted, a damped
    BFGS approximation is used instead.
    """

    n: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    eq_fun: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_fun: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lag_hess: Optional[Callable] = None
    name: str = ""


@dataclass
class KktResiduals:
    stationarity: float
    feasibility: float
    complementarity: float

    def within(self, tol: float) -> bool:
        return (self.stationarity <= tol and self.feasibility <= tol
                and self.complementarity <= tol)


@dataclass
class NlpSolution:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    status: str
    kkt: KktResiduals
    iterations: int
    objective: float
    mu_final: float
    message: str = ""
    trace: list = field(default_factory=list)


@dataclass
class NlpOptions:
    tol: float = 1e-6
    feas_tol: float = 1e-9
    max_iter: int = 400
    mu0: float = 1e-1
    mu_min: float = 1e-11
    tau: float = 0.995
    kappa_eps: float = 10.0
    inner_max: int = 30
    max_backtracks: int = 30
    restoration_limit: int = 10
    bound_push: float = 1e-2
    trace: bool = False


def _as_bound(vec, n: int, default: float) -> np.ndarray:
    if vec is None:
        return np.full(n, default, dtype=float)
    arr = np.asarray(vec, dtype=float).copy()
    if arr.shape != (n,):
        raise NlpDefinitionError(f"bound vector has shape {arr.shape}, expected ({n},)")
    return arr


class _Solver:
    def __init__(self, problem: NlpProblem, options: NlpOptions):
        self.p = problem
        self.o = options
        n = problem.n
        self.lower = _as_bound(problem.lower, n, -np.inf)
        self.upper = _as_bound(problem.upper, n, np.inf)
        if np.any(self.lower > self.upper):
            raise NlpDefinitionError("lower bound exceeds upper bound")
        if np.any(self.lower == self.upper):
            raise NlpDefinitionError("fixed variables (lower == upper) are not supported; "
                                     "model them as an equality constraint")
        self.has_lb = np.isfinite(self.lower)
        self.has_ub = np.isfinite(self.upper)
        x0 = np.asarray(problem.x0, dtype=float)
        if x0.shape != (n,):
            raise NlpDefinitionError(f"x0 has shape {x0.shape}, expected ({n},)")
        self.x0 = self._push_interior(x0.copy())

        self.nc = 0 if problem.eq_fun is None else np.atleast_1d(
            np.asarray(problem.eq_fun(self.x0), dtype=float)).size
        self.ni = 0 if problem.ineq_fun is None else np.atleast_1d(
            np.asarray(problem.ineq_fun(self.x0), dtype=float)).size
        self._fail_locus: str = ""
        # shape checks on every callback at the start point
        g = np.asarray(problem.gradient(self.x0), dtype=float)
        if g.shape != (n,):
            raise NlpDefinitionError(f"gradient has shape {g.shape}, expected ({n},)")
        if self.nc:
            J = np.asarray(problem.eq_jac(self.x0), dtype=float)
            if J.shape != (self.nc, n):
                raise NlpDefinitionError(
                    f"equality Jacobian has shape {J.shape}, expected ({self.nc}, {n})")
        if self.ni:
            Jg = np.asarray(problem.ineq_jac(self.x0), dtype=float)
            if Jg.shape != (self.ni, n):
                raise NlpDefinitionError(
                    f"inequality Jacobian has shape {Jg.shape}, expected ({self.ni}, {n})")
        if problem.lag_hess is not None:
            W = np.asarray(problem.lag_hess(self.x0, 1.0, np.zeros(self.nc),
                                            np.zeros(self.ni)), dtype=float)
            if W.shape != (n, n):
                raise NlpDefinitionError(f"Hessian has shape {W.shape}, expected ({n}, {n})")

    # -- helpers ---------------------------------------------------------
    def _push_interior(self, x: np.ndarray) -> np.ndarray:
        kappa = self.o.bound_push
        lo, up = self.lower, self.upper
        x = x.copy()
        fin_l, fin_u = np.isfinite(lo), np.isfinite(up)
        both = fin_l & fin_u
        pad_l = np.zeros_like(x)
        pad_u = np.zeros_like(x)
        pad_l[fin_l] = kappa * np.maximum(1.0, np.abs(lo[fin_l]))
        pad_u[fin_u] = kappa * np.maximum(1.0, np.abs(up[fin_u]))
        width = kappa * (up[both] - lo[both])
        pad_l[both] = np.minimum(pad_l[both], width)
        pad_u[both] = np.minimum(pad_u[both], width)
        x[fin_l] = np.maximum(x[fin_l], (lo + pad_l)[fin_l])
        x[fin_u] = np.minimum(x[fin_u], (up - pad_u)[fin_u])
        return x

    def _eval(self, x: np.ndarray, locus_guard: bool = True):
        p = self.p
        f = float(p.objective(x))
        grad = np.asarray(p.gradient(x), dtype=float)
        c = (np.atleast_1d(np.asarray(p.eq_fun(x), dtype=float))
             if self.nc else np.zeros(0))
        Jc = (np.asarray(p.eq_jac(x), dtype=float).reshape(self.nc, p.n)
              if self.nc else np.zeros((0, p.n)))
        g = (np.atleast_1d(np.asarray(p.ineq_fun(x), dtype=float))
             if self.ni else np.zeros(0))
        Jg = (np.asarray(p.ineq_jac(x), dtype=float).reshape(self.ni, p.n)
              if self.ni else np.zeros((0, p.n)))
        if locus_guard:
            for name, val in (("objective", f), ("objective gradient", grad),
                              ("equality constraints", c), ("equality Jacobian", Jc),
                              ("inequalities", g), ("inequality Jacobian", Jg)):
                if not np.all(np.isfinite(val)):
                    self._fail_locus = name
                    raise FloatingPointError(name)
        return f, grad, c, Jc, g, Jg

    def _hessian(self, x, lam, nu, bfgs_W):
        if self.p.lag_hess is not None:
            W = np.asarray(self.p.lag_hess(x, 1.0, lam, nu), dtype=float)
            if not np.all(np.isfinite(W)):
                self._fail_locus = "Hessian"
                raise FloatingPointError("Hessian")
            return 0.5 * (W + W.T)
        return bfgs_W

    def _barrier_value(self, f, x, s, mu):
        val = f
        if np.any(self.has_lb):
            val -= mu * np.sum(np.log(x[self.has_lb] - self.lower[self.has_lb]))
        if np.any(self.has_ub):
            val -= mu * np.sum(np.log(self.upper[self.has_ub] - x[self.has_ub]))
        if self.ni:
            val -= mu * np.sum(np.log(s))
        return val

    @staticmethod
    def _alpha_max(vec, dvec, tau):
        if vec.size == 0:
            return 1.0
        neg = dvec < 0
        if not np.any(neg):
            return 1.0
        return float(min(1.0, np.min(-tau * vec[neg] / dvec[neg])))

    def _kkt_solve(self, H, Jc, rhs_x, rhs_c, mu):
        """Inertia-corrected solve of the condensed symmetric KKT system."""
        n, nc = H.shape[0], Jc.shape[0]
        delta_w, delta_c = getattr(self, "_force_dw", 0.0), 0.0
        self._force_dw = 0.0
        last_dw = getattr(self, "_last_dw", 0.0)
        # zero-eigenvalue tolerance anchored to the unregularized matrix so
        # it stays meaningful while delta_w escalates; eigh's numerical zeros
        # land near eps*scale, well below this
        base_scale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0,
                         float(np.max(np.abs(Jc))) if Jc.size else 1.0)
        zero_tol = 1e-14 * base_scale
        rhs = np.concatenate([rhs_x, rhs_c])
        rhs_scale = 1.0 + float(np.max(np.abs(rhs))) if rhs.size else 1.0
        for attempt in range(30):
            K = np.zeros((n + nc, n + nc))
            K[:n, :n] = H + delta_w * np.eye(n)
            if nc:
                K[:n, n:] = Jc.T
                K[n:, :n] = Jc
                K[n:, n:] = -delta_c * np.eye(nc)
            evals, evecs = np.linalg.eigh(K)
            n_pos = int(np.sum(evals > zero_tol))
            n_zero = int(np.sum(np.abs(evals) <= zero_tol))
            if n_pos == n and float(np.min(np.abs(evals))) > 1e-300:
                sol = evecs @ ((evecs.T @ rhs) / evals)
                resid = K @ sol - rhs
                for _ in range(2):
                    if np.max(np.abs(resid)) <= 1e-10 * rhs_scale:
                        break
                    sol = sol - evecs @ ((evecs.T @ resid) / evals)
                    resid = K @ sol - rhs
                res = float(np.max(np.abs(resid))) if resid.size else 0.0
                # full positive inertia on the Hessian block gives a descent
                # direction; with borderline "zero" eigenvalues (huge spread)
                # still accept when the solve itself is numerically excellent
                good = res <= 1e-2 * rhs_scale if n_zero == 0 else res <= 1e-9 * rhs_scale
                if good and np.all(np.isfinite(sol)):
                    self._last_dw = delta_w
                    return sol[:n], sol[n:]
            if n_zero > 0 and nc and delta_c == 0.0:
                delta_c = 1e-8 * max(1.0, mu ** 0.25)
            if delta_w == 0.0:
                delta_w = 1e-4 if last_dw == 0.0 else max(1e-20, last_dw / 3.0)
            else:
                delta_w *= 8.0
            if delta_w > 1e40:
                break
        raise FloatingPointError("KKT matrix could not be regularized")

    # -- main loop --------------------------------------------------------
    def solve(self) -> NlpSolution:
        o, p = self.o, self.p
        n, nc, ni = p.n, self.nc, self.ni
        x = self.x0.copy()
        mu = o.mu0
        lam = np.zeros(nc)
        try:
            f, grad, c, Jc, g, Jg = self._eval(x)
        except FloatingPointError:
            return self._failure(x, mu, 0, f"non-finite value from {self._fail_locus} at x0")
        s = np.maximum(-g, 1e-2) if ni else np.zeros(0)
        nu = mu / s if ni else np.zeros(0)
        zL = np.where(self.has_lb, mu / np.maximum(x - self.lower, 1e-12), 0.0)
        zU = np.where(self.has_ub, mu / np.maximum(self.upper - x, 1e-12), 0.0)
        rho = 10.0
        bfgs_W = np.eye(n)
        grad_L_prev = None
        x_prev = None
        trace: list[dict] = []
        consecutive_fails = 0
        theta_min_seen = math.inf
        iteration = 0
        inner_count = 0
        status = STATUS_MAX_ITER
        message = ""

        while iteration < o.max_iter:
            r_d = grad.copy()
            if nc:
                r_d += Jc.T @ lam
            if ni:
                r_d += Jg.T @ nu
            r_d -= zL
            r_d += zU
            theta = 0.0
            if nc:
                theta = max(theta, float(np.max(np.abs(c))))
            if ni:
                theta = max(theta, float(np.max(np.abs(g + s))))
            theta_min_seen = min(theta_min_seen, theta)
            comp_terms = [0.0]
            comp_mu_terms = [0.0]
            if np.any(self.has_lb):
                prod = zL[self.has_lb] * (x - self.lower)[self.has_lb]
                comp_terms.append(float(np.max(np.abs(prod))))
                comp_mu_terms.append(float(np.max(np.abs(prod - mu))))
            if np.any(self.has_ub):
                prod = zU[self.has_ub] * (self.upper - x)[self.has_ub]
                comp_terms.append(float(np.max(np.abs(prod))))
                comp_mu_terms.append(float(np.max(np.abs(prod - mu))))
            if ni:
                comp_terms.append(float(np.max(np.abs(s * nu))))
                comp_mu_terms.append(float(np.max(np.abs(s * nu - mu))))
            stat = float(np.max(np.abs(r_d))) if r_d.size else 0.0
            comp = max(comp_terms)
            comp_mu = max(comp_mu_terms)
            if o.trace:
                trace.append({"iteration": iteration, "mu": mu, "stationarity": stat,
                              "feasibility": theta, "complementarity": comp,
                              "objective": f})

            if stat <= o.tol and comp <= o.tol and theta <= o.feas_tol:
                status = STATUS_OPTIMAL
                break

            # barrier update on inner convergence (strictly decreasing mu);
            # the inner cap forces progress past degenerate subproblems
            if mu > o.mu_min and (max(stat, theta, comp_mu) <= o.kappa_eps * mu
                                  or inner_count >= o.inner_max):
                mu = max(o.mu_min, mu / 10.0)
                inner_count = 0
                continue

            # Hessian of the Lagrangian (exact or BFGS)
            try:
                W = self._hessian(x, lam, nu, bfgs_W)
            except FloatingPointError:
                return self._failure(x, mu, iteration,
                                     f"non-finite value from {self._fail_locus}", trace)

            sigma_x = np.zeros(n)
            sigma_x[self.has_lb] += zL[self.has_lb] / (x - self.lower)[self.has_lb]
            sigma_x[self.has_ub] += zU[self.has_ub] / (self.upper - x)[self.has_ub]
            H = W + np.diag(sigma_x)
            rhs_x = -grad.copy()
            if nc:
                rhs_x -= Jc.T @ lam
            rhs_x[self.has_lb] += mu / (x - self.lower)[self.has_lb]
            rhs_x[self.has_ub] -= mu / (self.upper - x)[self.has_ub]
            if ni:
                sigma_s = nu / s
                H = H + Jg.T @ (sigma_s[:, None] * Jg)
                rhs_x -= Jg.T @ (mu / s + sigma_s * (g + s))
            try:
                dx, dlam = self._kkt_solve(H, Jc, rhs_x, -c, mu)
            except FloatingPointError as exc:
                return self._failure(x, mu, iteration, str(exc), trace)

            if ni:
                ds = -(g + s) - Jg @ dx
                dnu = mu / s - nu + sigma_s * (g + s) + sigma_s * (Jg @ dx)
            else:
                ds = np.zeros(0)
                dnu = np.zeros(0)
            dzL = np.zeros(n)
            dzU = np.zeros(n)
            lb, ub = self.has_lb, self.has_ub
            dzL[lb] = (mu / (x - self.lower)[lb] - zL[lb]
                       - (zL[lb] / (x - self.lower)[lb]) * dx[lb])
            dzU[ub] = (mu / (self.upper - x)[ub] - zU[ub]
                       + (zU[ub] / (self.upper - x)[ub]) * dx[ub])

            tau = o.tau
            a_pri = 1.0
            if np.any(lb):
                a_pri = min(a_pri, self._alpha_max((x - self.lower)[lb], dx[lb], tau))
            if np.any(ub):
                a_pri = min(a_pri, self._alpha_max((self.upper - x)[ub], -dx[ub], tau))
            if ni:
                a_pri = min(a_pri, self._alpha_max(s, ds, tau))
            a_dual = 1.0
            if np.any(lb):
                a_dual = min(a_dual, self._alpha_max(zL[lb], dzL[lb], tau))
            if np.any(ub):
                a_dual = min(a_dual, self._alpha_max(zU[ub], dzU[ub], tau))
            if ni:
                a_dual = min(a_dual, self._alpha_max(nu, dnu, tau))

            # exact-penalty line search on the barrier merit
            lam_trial_full = lam + dlam
            rho = max(rho, 2.0 * float(np.max(np.abs(lam_trial_full))) + 10.0 if nc else rho)
            phi0 = self._barrier_value(f, x, s, mu) + rho * theta
            dphi = float(grad @ dx)
            if np.any(lb):
                dphi -= mu * float(np.sum(dx[lb] / (x - self.lower)[lb]))
            if np.any(ub):
                dphi += mu * float(np.sum(dx[ub] / (self.upper - x)[ub]))
            if ni:
                dphi -= mu * float(np.sum(ds / s))
            dphi -= rho * theta
            alpha = a_pri
            accepted = False
            f_new = f
            for _ in range(o.max_backtracks):
                x_new = x + alpha * dx
                s_new = s + alpha * ds if ni else s
                try:
                    f_new, grad_new, c_new, Jc_new, g_new, Jg_new = self._eval(x_new)
                except FloatingPointError:
                    alpha *= 0.5
                    continue
                theta_new = 0.0
                if nc:
                    theta_new = max(theta_new, float(np.max(np.abs(c_new))))
                if ni:
                    theta_new = max(theta_new, float(np.max(np.abs(g_new + s_new))))
                phi_new = self._barrier_value(f_new, x_new, s_new, mu) + rho * theta_new
                if (phi_new <= phi0 + 1e-4 * alpha * min(dphi, 0.0)
                        or (theta > 10.0 * o.feas_tol and theta_new <= 0.99 * theta)):
                    accepted = True
                    break
                alpha *= 0.5

            if not accepted:
                consecutive_fails += 1
                if consecutive_fails >= o.restoration_limit:
                    if theta > max(100.0 * o.feas_tol, 1e-8):
                        status = STATUS_INFEASIBLE
                        message = (f"no acceptable step for {o.restoration_limit} consecutive "
                                   f"iterations with infeasibility {theta:.3e}")
                    else:
                        status = STATUS_NUMERICAL
                        message = "line search stalled near a feasible point"
                    break
                # force fresh regularization next round and retry
                self._force_dw = max(getattr(self, "_last_dw", 0.0), 1e-4) * 10.0
                iteration += 1
                inner_count += 1
                continue
            consecutive_fails = 0

            # BFGS update of the Lagrangian Hessian when no exact one is given
            if p.lag_hess is None:
                grad_L_new = grad_new.copy()
                if nc:
                    grad_L_new += Jc_new.T @ lam_trial_full
                if ni:
                    grad_L_new += Jg_new.T @ nu
                if x_prev is not None and grad_L_prev is not None:
                    step_vec = x_new - x_prev
                    y_vec = grad_L_new - grad_L_prev
                    sWs = float(step_vec @ bfgs_W @ step_vec)
                    sy = float(step_vec @ y_vec)
                    if sWs > 1e-14:
                        if sy < 0.2 * sWs:    # Powell damping
                            phi_d = 0.8 * sWs / (sWs - sy)
                            y_vec = phi_d * y_vec + (1 - phi_d) * (bfgs_W @ step_vec)
                            sy = float(step_vec @ y_vec)
                        if sy > 1e-12:
                            Ws = bfgs_W @ step_vec
                            bfgs_W = (bfgs_W - np.outer(Ws, Ws) / sWs
                                      + np.outer(y_vec, y_vec) / sy)
                grad_L_prev = grad_L_new
                x_prev = x_new.copy()

            x = x_new
            s = s_new
            lam = lam + alpha * dlam if nc else lam
            # duals move no faster than the accepted primal step so a
            # backtracked primal cannot leave the duals integrating overshoots
            a_z = min(a_dual, alpha)
            if ni:
                nu = np.maximum(nu + a_z * dnu, 1e-16)
            zL = zL + a_z * dzL
            zU = zU + a_z * dzU
            # dual safeguard keeps z consistent with the barrier
            kap = 1e10
            if np.any(lb):
                dist = (x - self.lower)[lb]
                zL[lb] = np.minimum(np.maximum(zL[lb], mu / (kap * dist)), kap * mu / dist)
            if np.any(ub):
                dist = (self.upper - x)[ub]
                zU[ub] = np.minimum(np.maximum(zU[ub], mu / (kap * dist)), kap * mu / dist)
            f, grad, c, Jc, g, Jg = f_new, grad_new, c_new, Jc_new, g_new, Jg_new
            iteration += 1
            inner_count += 1

        if status == STATUS_MAX_ITER and iteration >= o.max_iter:
            message = f"iteration cap {o.max_iter} reached"
        kkt = self._kkt_residuals(x, s, lam, nu, zL, zU)
        return NlpSolution(x=x, lam_eq=lam, lam_ineq=nu, z_lower=zL, z_upper=zU,
                           status=status, kkt=kkt, iterations=iteration,
                           objective=float(self.p.objective(x)), mu_final=mu,
                           message=message, trace=trace)

    def _kkt_residuals(self, x, s, lam, nu, zL, zU) -> KktResiduals:
        try:
            f, grad, c, Jc, g, Jg = self._eval(x, locus_guard=False)
        except Exception:
            return KktResiduals(math.inf, math.inf, math.inf)
        r_d = grad.copy()
        if self.nc:
            r_d += Jc.T @ lam
        if self.ni:
            r_d += Jg.T @ nu
        r_d -= zL
        r_d += zU
        feas = 0.0
        if self.nc:
            feas = max(feas, float(np.max(np.abs(c))))
        if self.ni:
            feas = max(feas, float(np.max(np.abs(g + s))))
        comp = 0.0
        if np.any(self.has_lb):
            comp = max(comp, float(np.max(np.abs(zL[self.has_lb]
                                                 * (x - self.lower)[self.has_lb]))))
        if np.any(self.has_ub):
            comp = max(comp, float(np.max(np.abs(zU[self.has_ub]
                                                 * (self.upper - x)[self.has_ub]))))
        if self.ni:
            comp = max(comp, float(np.max(np.abs(s * nu))))
        stat = float(np.max(np.abs(r_d))) if r_d.size else 0.0
        return KktResiduals(stat, feas, comp)

    def _failure(self, x, mu, iteration, message, trace=None) -> NlpSolution:
        nc, ni, n = self.nc, self.ni, self.p.n
        return NlpSolution(x=x, lam_eq=np.zeros(nc), lam_ineq=np.zeros(ni),
                           z_lower=np.zeros(n), z_upper=np.zeros(n),
                           status=STATUS_NUMERICAL,
                           kkt=KktResiduals(math.inf, math.inf, math.inf),
                           iterations=iteration, objective=math.nan, mu_final=mu,
                           message=message, trace=trace or [])


def solve_nlp(problem: NlpProblem, options: NlpOptions | None = None) -> NlpSolution:
    """Solve a smooth constrained program to KKT optimality.

    Returns an :class:`NlpSolution`; ``status == "kkt-optimal"`` certifies
    stationarity and complementarity within ``tol`` and equality feasibility
    within ``feas_tol``.  Non-converged runs report the best iterate with an
    honest status, never an exception.
    """
    return _Solver(problem, options or NlpOptions()).solve()


# ---------------------------------------------------------------------------
# Derivative checking
# ---------------------------------------------------------------------------

@dataclass
class DerivativeReport:
    max_rel_error: float
    worst_block: str
    worst_entry: tuple
    blocks: dict[str, float]

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error <= tol


def _rel_err(fd: float, an: float) -> float:
    return abs(fd - an) / max(1.0, abs(fd), abs(an))


def check_derivatives(problem: NlpProblem, x: np.ndarray, step: float = 1e-6) -> DerivativeReport:
    """Compare analytic gradient and constraint Jacobians to central
    finite differences at ``x``; reports the worst relative error and where
    it occurs."""
    if step <= 0:
        raise ValueError("step must be strictly positive")
    x = np.asarray(x, dtype=float)
    n = problem.n
    blocks: dict[str, float] = {}
    worst = (0.0, "", ())

    def probe(i):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        return xp, xm, h

    grad = np.asarray(problem.gradient(x), dtype=float)
    err_block = 0.0
    for i in range(n):
        xp, xm, h = probe(i)
        fd = (float(problem.objective(xp)) - float(problem.objective(xm))) / (2 * h)
        err = _rel_err(fd, grad[i])
        if err > err_block:
            err_block = err
        if err > worst[0]:
            worst = (err, "objective-gradient", (i,))
    blocks["objective-gradient"] = err_block

    for label, fun, jac in (("eq-jacobian", problem.eq_fun, problem.eq_jac),
                            ("ineq-jacobian", problem.ineq_fun, problem.ineq_jac)):
        if fun is None:
            continue
        J = np.asarray(jac(x), dtype=float)
        err_block = 0.0
        for i in range(n):
            xp, xm, h = probe(i)
            fd_col = (np.atleast_1d(np.asarray(fun(xp), dtype=float))
                      - np.atleast_1d(np.asarray(fun(xm), dtype=float))) / (2 * h)
            for r in range(fd_col.size):
                err = _rel_err(float(fd_col[r]), float(J[r, i]))
                if err > err_block:
                    err_block = err
                if err > worst[0]:
                    worst = (err, label, (r, i))
        blocks[label] = err_block

    return DerivativeReport(max_rel_error=worst[0], worst_block=worst[1],
                            worst_entry=worst[2], blocks=blocks)
