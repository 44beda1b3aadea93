"""Dense nonlinear programming: problem container, an active-set QP, and a
line-search SQP driver with KKT certification.

The receding-horizon problems built by the controller are small (one to a
few hundred variables) and dense, so the QP subproblems are solved by a
primal active-set method that treats variable bounds by fixing/freeing
coordinates instead of carrying them as general rows.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


class HessianMode(Enum):
    GAUSS_NEWTON = "gauss_newton"
    DAMPED_BFGS = "damped_bfgs"


@dataclass
class NLPProblem:
    """min f(z) s.t. c_eq(z) = 0, c_ineq(z) >= 0, lower <= z <= upper.

    `residuals`, when given, returns (r, J) with f = sum(r**2); the
    Gauss-Newton mode uses it for both gradient and Hessian model.
    """

    n_vars: int
    objective: Callable[[np.ndarray], float]
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    residuals: Optional[Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]] = None
    eq_constraints: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_constraints: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # optional PSD curvature of the inequality Lagrangian term, called with
    # (z, mu_ineq); needed when constraints curve in directions the
    # objective model cannot see (e.g. multiplier-only variables)
    ineq_curvature: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    initial_guess: Optional[np.ndarray] = None


@dataclass
class SolverOptions:
    tol_kkt: float = 1e-6
    tol_feas: float = 1e-6
    max_iter: int = 50
    merit_penalty: float = 10.0      # initial l1 penalty; adapted upward
    hessian: HessianMode = HessianMode.DAMPED_BFGS
    gn_regularization: float = 1e-8
    max_qp_iter: int = 400

    def __post_init__(self):
        if self.tol_kkt <= 0 or self.tol_feas <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Solution:
    z: np.ndarray
    objective_value: float
    status: SolveStatus
    kkt_residual: float
    constraint_violation: float
    iterations: int
    solve_time: float
    message: str = ""
    merit_history: tuple = field(default=(), repr=False)
    qp_state: Optional[tuple] = field(default=None, repr=False)  # (fixed, active) working set


@dataclass(frozen=True)
class HorizonLayout:
    """Decision-vector layout of one receding-horizon problem:
    [controls (n_steps x control_dim)] [slacks (n_cbf)] [multiplier blocks
    (n_cbf x facets, one block per obstacle)]."""

    n_steps: int
    control_dim: int
    n_cbf: int
    obstacle_facets: tuple[int, ...] = ()

    @property
    def n_controls(self) -> int:
        return self.n_steps * self.control_dim

    @property
    def n_vars(self) -> int:
        return self.n_controls + self.n_cbf + self.n_cbf * sum(self.obstacle_facets)

    def control_block(self, z: np.ndarray) -> np.ndarray:
        return z[: self.n_controls].reshape(self.n_steps, self.control_dim)

    def omega_block(self, z: np.ndarray) -> np.ndarray:
        return z[self.n_controls : self.n_controls + self.n_cbf]

    def lambda_block(self, z: np.ndarray, i: int) -> np.ndarray:
        off = self.n_controls + self.n_cbf
        for s in self.obstacle_facets[:i]:
            off += self.n_cbf * s
        s = self.obstacle_facets[i]
        return z[off : off + self.n_cbf * s].reshape(self.n_cbf, s)


def warm_start_shift(prev: Solution, layout: HorizonLayout) -> np.ndarray:
    """Shift a receding-horizon solution one step forward: every block is
    advanced by one index with the last entry duplicated."""
    if prev.z.shape != (layout.n_vars,):
        raise ValueError(
            f"layout mismatch: solution has {prev.z.shape[0]} vars, layout expects {layout.n_vars}"
        )
    z = prev.z.copy()
    u = layout.control_block(z)
    u[:-1] = u[1:]
    if layout.n_cbf:
        w = layout.omega_block(z)
        w[:-1] = w[1:]
        for i in range(len(layout.obstacle_facets)):
            lam = layout.lambda_block(z, i)
            lam[:-1] = lam[1:]
    return z


class QPError(RuntimeError):
    pass


def _solve_kkt(H, grad, Arows, free_idx):
    """Equality-constrained step on the free coordinates.

    Solves H_ff p + A_fᵀ nu = -grad_f, A_f p = 0; returns (p_full, nu).
    """
    nf = free_idx.size
    Hff = H[free_idx[:, None], free_idx[None, :]]
    if Arows is not None and Arows.shape[0]:
        Af = Arows[:, free_idx]
        m = Af.shape[0]
        K = np.zeros((nf + m, nf + m))
        K[:nf, :nf] = Hff
        K[:nf, nf:] = Af.T
        K[nf:, :nf] = Af
        rhs = np.zeros(nf + m)
        rhs[:nf] = -grad[free_idx]
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        p = np.zeros(H.shape[0])
        p[free_idx] = sol[:nf]
        return p, sol[nf:]
    try:
        pf = np.linalg.solve(Hff, -grad[free_idx])
    except np.linalg.LinAlgError:
        pf = np.linalg.lstsq(Hff, -grad[free_idx], rcond=None)[0]
    p = np.zeros(H.shape[0])
    p[free_idx] = pf
    return p, np.zeros(0)


def solve_qp(
    H: np.ndarray,
    c: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    G: Optional[np.ndarray] = None,
    hvec: Optional[np.ndarray] = None,
    E: Optional[np.ndarray] = None,
    evec: Optional[np.ndarray] = None,
    max_iter: int = 400,
    warm_fixed: Optional[np.ndarray] = None,
    warm_active: Optional[np.ndarray] = None,
    d_start: Optional[np.ndarray] = None,
):
    """min 1/2 d'Hd + c'd  s.t.  lb <= d <= ub, G d >= hvec, E d = evec.

    H must be positive definite. Returns a dict with the point, the
    multipliers (mu_ineq, mu_eq, mu_lb, mu_ub), and the iteration count.
    Raises QPError when no feasible starting point can be constructed.
    """
    n = H.shape[0]
    m = 0 if G is None else G.shape[0]
    me = 0 if E is None else E.shape[0]
    if G is None:
        G = np.zeros((0, n))
        hvec = np.zeros(0)
    if E is None:
        E = np.zeros((0, n))
        evec = np.zeros(0)

    # feasible start
    if d_start is not None:
        d = np.clip(np.asarray(d_start, float), lb, ub)
    elif me:
        d = np.linalg.lstsq(E, evec, rcond=None)[0]
        if np.any(d < lb - 1e-8) or np.any(d > ub + 1e-8):
            raise QPError("equality start violates bounds")
        d = np.clip(d, lb, ub)
    else:
        d = np.clip(np.zeros(n), lb, ub)
    if me and np.linalg.norm(E @ d - evec, ord=np.inf) > 1e-7 * (1 + np.abs(evec).max(initial=0.0)):
        raise QPError("inconsistent equality constraints")
    if m and np.any(G @ d < hvec - 1e-10):
        raise QPError("infeasible start for inequality rows")

    # working set: fixed[i] in {-1 lower, 0 free, +1 upper}; active general rows.
    # Variables sitting exactly at a bound start fixed: releases are cheap
    # (one multiplier check) while a large free block makes every KKT solve
    # needlessly big.
    at_lb = d <= lb + 1e-12
    at_ub = d >= ub - 1e-12
    if warm_fixed is not None:
        fixed = np.where((warm_fixed == -1) & at_lb, -1, np.where((warm_fixed == 1) & at_ub, 1, 0))
    else:
        fixed = np.where(at_lb & np.isfinite(lb), -1, np.where(at_ub & np.isfinite(ub), 1, 0))
    active = np.zeros(m, dtype=bool)
    if warm_active is not None and m:
        slack0 = G @ d - hvec
        active = warm_active & (np.abs(slack0) <= 1e-9)

    tiny = 1e-12
    it = 0
    while it < max_iter:
        it += 1
        free_idx = np.flatnonzero(fixed == 0)
        rows = [E] if me else []
        if active.any():
            rows.append(G[active])
        Arows = np.vstack(rows) if rows else None
        grad = H @ d + c
        p, nu = _solve_kkt(H, grad, Arows, free_idx)

        if np.abs(p).max(initial=0.0) <= 1e-11 * (1.0 + np.abs(d).max(initial=0.0)):
            # KKT solve returns grad = -A_act' nu on the free block, so the
            # constraint multipliers in the convention
            # grad = G'mu_in + E'mu_eq + mu_lb - mu_ub are mu = -nu.
            mu_act = -nu
            resid = grad.copy()
            if Arows is not None:
                resid -= Arows.T @ mu_act
            mu_eq = mu_act[:me] if me else np.zeros(0)
            nu_in = mu_act[me:] if Arows is not None else np.zeros(0)
            worst_val = -1e-9
            worst = None  # ('row', j) or ('bound', i)
            act_idx = np.flatnonzero(active)
            if nu_in.size:
                k = int(np.argmin(nu_in))
                if nu_in[k] < worst_val:
                    worst_val = nu_in[k]
                    worst = ("row", int(act_idx[k]))
            lo_fix = np.flatnonzero(fixed == -1)
            if lo_fix.size:
                i = lo_fix[np.argmin(resid[lo_fix])]
                if resid[i] < worst_val:
                    worst_val = resid[i]
                    worst = ("bound", int(i))
            hi_fix = np.flatnonzero(fixed == 1)
            if hi_fix.size:
                i = hi_fix[np.argmax(resid[hi_fix])]
                if -resid[i] < worst_val:
                    worst_val = -resid[i]
                    worst = ("bound", int(i))
            if worst is None:
                mu_in = np.zeros(m)
                if len(act_idx):
                    mu_in[act_idx] = np.maximum(nu_in, 0.0)
                mu_lb = np.where(fixed == -1, np.maximum(resid, 0.0), 0.0)
                mu_ub = np.where(fixed == 1, np.maximum(-resid, 0.0), 0.0)
                return {
                    "d": d, "mu_in": mu_in, "mu_eq": mu_eq,
                    "mu_lb": mu_lb, "mu_ub": mu_ub,
                    "iterations": it, "fixed": fixed, "active": active,
                    "converged": True,
                }
            if worst[0] == "row":
                active[worst[1]] = False
            else:
                fixed[worst[1]] = 0
            continue

        # ratio test toward bounds and inactive rows
        alpha = 1.0
        block = None
        pf = p[free_idx]
        up = pf > tiny
        if up.any():
            idx = free_idx[up]
            ratios = (ub[idx] - d[idx]) / pf[up]
            j = int(np.argmin(ratios))
            if ratios[j] < alpha - 1e-15:
                alpha, block = max(ratios[j], 0.0), ("bound", int(idx[j]), 1)
        dn = pf < -tiny
        if dn.any():
            idx = free_idx[dn]
            ratios = (lb[idx] - d[idx]) / pf[dn]
            j = int(np.argmin(ratios))
            if ratios[j] < alpha - 1e-15:
                alpha, block = max(ratios[j], 0.0), ("bound", int(idx[j]), -1)
        if m:
            inact = ~active
            gp = G[inact] @ p
            slack = G[inact] @ d - hvec[inact]
            idxs = np.where(inact)[0]
            neg = gp < -tiny
            if neg.any():
                ratios = slack[neg] / (-gp[neg])
                jloc = int(np.argmin(ratios))
                if ratios[jloc] < alpha - 1e-15:
                    alpha = max(ratios[jloc], 0.0)
                    block = ("row", idxs[np.where(neg)[0][jloc]], 0)
        d = d + alpha * p
        if block is not None:
            if block[0] == "bound":
                fixed[block[1]] = block[2]
                d[block[1]] = ub[block[1]] if block[2] == 1 else lb[block[1]]
            else:
                active[block[1]] = True

    return {
        "d": d, "mu_in": np.zeros(m), "mu_eq": np.zeros(me),
        "mu_lb": np.zeros(n), "mu_ub": np.zeros(n),
        "iterations": it, "fixed": fixed, "active": active,
        "converged": False,
    }


def _solve_qp_relaxed(H, c, lb, ub, G, hvec, E, evec, relax_penalty, max_iter,
                      warm_fixed=None, warm_active=None):
    """solve_qp, falling back to a single-variable elastic relaxation when
    the linearized inequality rows exclude the origin.

    Rows violated by no more than a hair at the origin are shifted onto it
    instead of triggering the (twice as expensive) elastic solve.
    """
    if G is not None and G.shape[0] and (E is None or not E.shape[0]):
        mask = (hvec > 0.0) & (hvec <= 1e-8)
        if mask.any() and not (hvec > 1e-8).any():
            hvec = hvec.copy()
            hvec[mask] = 0.0
    try:
        out = solve_qp(H, c, lb, ub, G, hvec, E, evec, max_iter,
                       warm_fixed=warm_fixed, warm_active=warm_active)
        out["relaxation"] = 0.0
        return out
    except QPError:
        pass
    if G is None or not G.shape[0]:
        raise QPError("infeasible QP without inequality rows")
    n = H.shape[0]
    d0 = np.clip(np.linalg.lstsq(E, evec, rcond=None)[0] if (E is not None and E.shape[0]) else np.zeros(n), lb, ub)
    v = np.maximum(hvec - G @ d0, 0.0)
    Ha = np.zeros((n + 1, n + 1))
    Ha[:n, :n] = H
    Ha[n, n] = max(1e-4, 1e-6 * np.trace(H) / max(n, 1))
    ca = np.concatenate([c, [relax_penalty * max(1.0, float(np.sum(v)))]])
    Ga = np.hstack([G, v[:, None]])
    Ea = np.hstack([E, np.zeros((E.shape[0], 1))]) if (E is not None and E.shape[0]) else None
    lba = np.concatenate([lb, [0.0]])
    uba = np.concatenate([ub, [1.0]])
    wf = np.concatenate([warm_fixed, [0]]) if warm_fixed is not None else None
    # start at (d0, xi=1), which satisfies every row by construction
    out = solve_qp(Ha, ca, lba, uba, Ga, hvec, Ea, evec if Ea is not None else None,
                   max_iter, d_start=np.concatenate([d0, [1.0]]),
                   warm_fixed=wf, warm_active=warm_active)
    d = out["d"][:n]
    out["relaxation"] = float(out["d"][n])
    out["d"] = d
    out["mu_lb"] = out["mu_lb"][:n]
    out["mu_ub"] = out["mu_ub"][:n]
    out["fixed"] = out["fixed"][:n]
    return out


def _evaluate(problem: NLPProblem, z: np.ndarray):
    if problem.residuals is not None:
        r, J = problem.residuals(z)
        f = float(r @ r)
        grad = 2.0 * (J.T @ r)
        gn = (r, J)
    else:
        f = float(problem.objective(z))
        grad = np.asarray(problem.gradient(z), dtype=float)
        gn = None
    ci = problem.ineq_constraints(z) if problem.ineq_constraints else np.zeros(0)
    Ji = problem.ineq_jacobian(z) if problem.ineq_jacobian else np.zeros((0, problem.n_vars))
    ce = problem.eq_constraints(z) if problem.eq_constraints else np.zeros(0)
    Je = problem.eq_jacobian(z) if problem.eq_jacobian else np.zeros((0, problem.n_vars))
    return f, grad, np.asarray(ci, float), np.asarray(Ji, float), np.asarray(ce, float), np.asarray(Je, float), gn


def _violation(ci, ce):
    v = 0.0
    if ci.size:
        v = max(v, float(np.maximum(-ci, 0.0).max()))
    if ce.size:
        v = max(v, float(np.abs(ce).max()))
    return v


def _l1_violation(ci, ce):
    v = 0.0
    if ci.size:
        v += float(np.maximum(-ci, 0.0).sum())
    if ce.size:
        v += float(np.abs(ce).sum())
    return v


def sqp_solve(problem: NLPProblem, opts: SolverOptions | None = None,
              warm_qp_state: Optional[tuple] = None) -> Solution:
    """Line-search SQP: active-set QP subproblems on the linearized
    constraints, l1 merit, damped-BFGS or Gauss-Newton Hessian model.

    Optimality is certified at the returned point: status OPTIMAL implies
    the KKT residual and the constraint violation are within tolerance.
    `warm_qp_state` seeds the first subproblem's working set (e.g. the
    previous receding-horizon step's final set).
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    n = problem.n_vars
    lb = np.full(n, -np.inf) if problem.lower is None else np.asarray(problem.lower, float)
    ub = np.full(n, np.inf) if problem.upper is None else np.asarray(problem.upper, float)
    z = np.zeros(n) if problem.initial_guess is None else np.asarray(problem.initial_guess, float).copy()
    z = np.clip(z, lb, ub)

    rho = opts.merit_penalty
    reg = opts.gn_regularization
    B = None
    mu_prev = None
    prev_grad = None
    prev_z = None
    merit_hist = []
    kkt = np.inf
    viol = np.inf
    f = np.inf
    status = SolveStatus.MAX_ITER
    message = ""
    warm_fixed = None
    warm_active = None
    if warm_qp_state is not None:
        wf, wa = warm_qp_state
        if wf is not None and wf.shape == (n,):
            warm_fixed = wf
            warm_active = wa
    it = 0

    while it < opts.max_iter:
        it += 1
        try:
            f, grad, ci, Ji, ce, Je, gn = _evaluate(problem, z)
        except FloatingPointError:
            return Solution(z, np.nan, SolveStatus.NUMERICAL_FAILURE, np.inf, np.inf, it,
                            time.perf_counter() - t0, "callback raised")
        if not (np.isfinite(f) and np.isfinite(grad).all() and np.isfinite(ci).all()
                and np.isfinite(ce).all() and np.isfinite(Ji).all() and np.isfinite(Je).all()):
            return Solution(z, f, SolveStatus.NUMERICAL_FAILURE, np.inf, _violation(ci, ce), it,
                            time.perf_counter() - t0, "non-finite callback value at iterate")
        viol = _violation(ci, ce)

        if opts.hessian is HessianMode.GAUSS_NEWTON and gn is not None:
            _, J = gn
            H = 2.0 * (J.T @ J)
            if problem.ineq_curvature is not None:
                mu_est = mu_prev if mu_prev is not None else np.ones(Ji.shape[0])
                H = H + problem.ineq_curvature(z, mu_est)
            H.flat[:: n + 1] += reg + 1e-10 * max(1.0, np.trace(H) / n)
        else:
            if B is None:
                B = np.eye(n) * max(1.0, np.linalg.norm(grad) / max(1.0, np.linalg.norm(z) + 1.0))
            elif prev_grad is not None:
                s = z - prev_z
                y = grad - prev_grad
                sBs = float(s @ B @ s)
                sy = float(s @ y)
                if sBs > 1e-14:
                    if sy < 0.2 * sBs:  # Powell damping
                        theta = 0.8 * sBs / (sBs - sy)
                        y = theta * y + (1.0 - theta) * (B @ s)
                        sy = float(s @ y)
                    if sy > 1e-14:
                        Bs = B @ s
                        B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
            H = B + 1e-10 * np.eye(n)
        prev_grad, prev_z = grad, z

        try:
            qp = _solve_qp_relaxed(H, grad, lb - z, ub - z, Ji, -ci, Je, -ce,
                                   relax_penalty=max(1e4, 100.0 * rho),
                                   max_iter=opts.max_qp_iter,
                                   warm_fixed=warm_fixed, warm_active=warm_active)
        except QPError as exc:
            status = SolveStatus.INFEASIBLE
            message = f"QP subproblem infeasible: {exc}"
            break
        d = qp["d"]
        warm_fixed = qp.get("fixed")
        warm_active = qp.get("active")
        mu_prev = qp["mu_in"]

        # KKT residual at the current point with the QP multipliers
        stat = grad.copy()
        if Ji.shape[0]:
            stat -= Ji.T @ qp["mu_in"]
        if Je.shape[0]:
            stat -= Je.T @ qp["mu_eq"]
        stat -= qp["mu_lb"]
        stat += qp["mu_ub"]
        comp = 0.0
        if ci.size:
            comp = float(np.abs(qp["mu_in"] * ci).max(initial=0.0))
        comp = max(comp, float(np.abs(qp["mu_lb"] * (z - np.where(np.isfinite(lb), lb, z))).max(initial=0.0)))
        comp = max(comp, float(np.abs(qp["mu_ub"] * (np.where(np.isfinite(ub), ub, z) - z)).max(initial=0.0)))
        kkt = max(float(np.abs(stat).max(initial=0.0)), comp)
        if kkt <= opts.tol_kkt and viol <= opts.tol_feas:
            status = SolveStatus.OPTIMAL
            break

        mu_all = max(
            float(np.abs(qp["mu_in"]).max(initial=0.0)),
            float(np.abs(qp["mu_eq"]).max(initial=0.0)),
        )
        rho = max(rho, 1.5 * mu_all + 1.0)
        l1 = _l1_violation(ci, ce)
        phi0 = f + rho * l1
        descent = float(grad @ d) - rho * l1
        if descent >= 0.0 and np.abs(d).max(initial=0.0) <= 1e-12:
            status = SolveStatus.INFEASIBLE if viol > opts.tol_feas else SolveStatus.MAX_ITER
            message = "no descent direction"
            break

        alpha = 1.0
        accepted = False
        for _ in range(30):
            zt = z + alpha * d
            try:
                ft = float(problem.objective(zt))
                cit = problem.ineq_constraints(zt) if problem.ineq_constraints else np.zeros(0)
                cet = problem.eq_constraints(zt) if problem.eq_constraints else np.zeros(0)
            except FloatingPointError:
                alpha *= 0.5
                continue
            if not np.isfinite(ft):
                alpha *= 0.5
                continue
            phit = ft + rho * _l1_violation(np.asarray(cit, float), np.asarray(cet, float))
            if phit <= phi0 + 1e-4 * alpha * min(descent, 0.0) + 1e-14 * abs(phi0):
                accepted = True
                break
            alpha *= 0.5
        merit_hist.append((rho, phi0))
        if not accepted:
            # two recovery attempts: stiffen the Hessian model, then make
            # the merit function weigh feasibility more heavily
            if opts.hessian is HessianMode.GAUSS_NEWTON and reg < 1e2:
                reg = max(reg * 100.0, 1e-4)
                continue
            if viol > opts.tol_feas and rho < 1e7:
                rho *= 10.0
                reg = opts.gn_regularization
                continue
            status = SolveStatus.INFEASIBLE if viol > 10.0 * opts.tol_feas else SolveStatus.MAX_ITER
            message = "line search failed"
            break
        z = z + alpha * d
        reg = max(opts.gn_regularization, reg * 0.1)

    if status not in (SolveStatus.OPTIMAL,) and message == "":
        message = "iteration limit reached"
    try:
        f_final, _, ci, _, ce, _, _ = _evaluate(problem, z)
        viol = _violation(ci, ce)
        f = f_final
    except Exception:
        pass
    return Solution(
        z=z,
        objective_value=f,
        status=status,
        kkt_residual=float(kkt),
        constraint_violation=float(viol),
        iterations=it,
        solve_time=time.perf_counter() - t0,
        message=message,
        merit_history=tuple(merit_hist),
        qp_state=(warm_fixed, warm_active),
    )
