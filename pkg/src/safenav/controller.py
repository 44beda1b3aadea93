"""Receding-horizon controllers.

`mdd_step` builds and solves the dual-barrier MPC: obstacle clearance is
enforced through the Lagrangian lower bound (A R(x) - b)' lam of the
point-to-polytope distance, which makes every avoidance constraint an
explicit smooth function of the decision variables. `baseline_dcbf_step`
is the comparison controller that keeps the squared distance to each
circular obstacle above a geometrically decaying bound.

States inside the horizon are eliminated by forward substitution of the
bicycle model (single shooting); the decision vector is
[controls, slacks, multiplier blocks] as described by HorizonLayout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .distance import distance_certificate
from .dynamics import BicycleParams, Control, State
from .geometry import Circle, Polytope
from .solver import (
    HessianMode,
    HorizonLayout,
    NLPProblem,
    Solution,
    SolveStatus,
    SolverOptions,
    sqp_solve,
    warm_start_shift,
)


class ConstraintMode(Enum):
    """Units of the decay RHS in the avoidance constraint.

    SQUARED keeps the precomputed squared distance (m^2) on the right-hand
    side, exactly as the rolled-out constraint is stated; METRIC uses its
    square root so both sides carry meters. The dual lower bound on the
    left always carries meters, so SQUARED couples the slack to the
    obstacle distance scale; both modes are safe (the left side still
    lower-bounds the true clearance).
    """

    SQUARED = "squared"
    METRIC = "metric"


def _default_solver_options() -> SolverOptions:
    # KKT certification a decade looser than the library default: control
    # only needs feasibility (kept at 1e-6) plus near-stationarity.
    return SolverOptions(hessian=HessianMode.GAUSS_NEWTON, max_iter=40,
                         tol_kkt=1e-5, max_qp_iter=250)


@dataclass(frozen=True)
class ControllerConfig:
    horizon: int = 11                 # N control steps
    cbf_horizon: int = 10             # leading steps carrying avoidance constraints
    decay: float = 0.9                # barrier lower-bound decay rate per step
    slack_weight: float = 1000.0      # penalty pulling each slack toward 1
    safe_distance: float = 10.0       # obstacles beyond this range are ignored
    state_weights: tuple = (1.0, 1.0, 0.2, 0.3)
    control_weights: tuple = (0.05, 0.1)
    smoothness_weights: tuple = (0.1, 0.1)
    constraint_mode: ConstraintMode = ConstraintMode.SQUARED
    accept_violation_factor: float = 10.0
    solver: SolverOptions = field(default_factory=_default_solver_options)

    def __post_init__(self):
        if not (0.0 <= self.decay < 1.0):
            raise ValueError("decay must lie in [0, 1)")
        if self.cbf_horizon > self.horizon:
            raise ValueError("cbf_horizon must not exceed horizon")
        if self.safe_distance <= 0:
            raise ValueError("safe_distance must be positive")
        for w in (*self.state_weights, *self.control_weights, *self.smoothness_weights):
            if w < 0:
                raise ValueError("weights must be nonnegative")


@dataclass
class ActiveObstacle:
    polytope: Polytope
    h_t: float               # squared distance at the current state, m^2
    y_star: np.ndarray       # closest obstacle point at the current state
    lam_t: np.ndarray        # dual certificate at the current state


@dataclass
class ActiveObstacleSet:
    obstacles: list[ActiveObstacle]
    contact: bool            # robot center touching/inside some obstacle

    def __len__(self):
        return len(self.obstacles)


class StepOutcome(Enum):
    OPTIMAL = "optimal"
    DEGRADED = "degraded"             # iteration-capped solution within 10x tolerance
    BRAKE = "brake"                   # solver failed; braking fallback applied
    INFEASIBLE_START = "infeasible_start"


@dataclass
class StepResult:
    u0: Control
    predicted_states: list[State]
    omegas: np.ndarray
    lambdas: list[np.ndarray]          # per obstacle: (cbf_horizon, facets)
    outcome: StepOutcome
    solver_status: SolveStatus
    solve_time: float
    min_margin: float                  # min dual lower bound over horizon/obstacles, m
    active: ActiveObstacleSet
    dcbf_residuals: np.ndarray         # decay-constraint residuals, (n_obs, cbf_horizon)
    solution: Optional[Solution] = None
    layout: Optional[HorizonLayout] = None


def fallback_brake(x_t: State, params: BicycleParams) -> Control:
    """Maximum braking that never commands reverse."""
    return Control(a=max(-params.a_max, -x_t.v / params.dt), delta=0.0)


def filter_obstacles(x_t: State, obstacles: Sequence[Polytope], d_safe: float) -> ActiveObstacleSet:
    """Keep obstacles within d_safe of the robot center, with their
    distance certificates precomputed at the current state."""
    p = np.array([x_t.x, x_t.y])
    kept = []
    contact = False
    for P in obstacles:
        cert = distance_certificate(p, P)
        if cert.g <= d_safe:
            kept.append(ActiveObstacle(polytope=P, h_t=cert.h, y_star=cert.y_star,
                                       lam_t=cert.lambda_star))
            if cert.h == 0.0:
                contact = True
    return ActiveObstacleSet(obstacles=kept, contact=contact)


def _ref_to_array(x_t: State, ref: Sequence[State]) -> np.ndarray:
    """Stack the reference and unwrap its headings so tracking residuals
    never jump across the +-pi seam within one horizon."""
    arr = np.array([[s.x, s.y, s.v, s.theta] for s in ref], dtype=float)
    th = np.unwrap(np.concatenate([[x_t.theta], arr[:, 3]]))
    arr[:, 3] = th[1:]
    return arr


class _HorizonDynamics:
    """Rollout of the bicycle model over one horizon with analytic
    sensitivities of every state w.r.t. the stacked controls."""

    def __init__(self, x0: np.ndarray, n: int, params: BicycleParams):
        self.x0 = x0
        self.n = n
        self.p = params
        self._key = None
        self._states = None
        self._sens = None

    def states(self, u: np.ndarray) -> np.ndarray:
        self._ensure(u, need_sens=False)
        return self._states

    def states_and_sens(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self._ensure(u, need_sens=True)
        return self._states, self._sens

    def _ensure(self, u: np.ndarray, need_sens: bool):
        key = u.tobytes()
        if self._key == key and (self._sens is not None or not need_sens):
            return
        n, dt, L = self.n, self.p.dt, self.p.L
        X = np.empty((n + 1, 4))
        X[0] = self.x0
        S = np.zeros((n + 1, 4, 2 * n)) if need_sens else None
        A = np.eye(4)
        for k in range(n):
            x, y, v, th = X[k]
            a, de = u[k]
            c, s = math.cos(th), math.sin(th)
            td = math.tan(de)
            X[k + 1, 0] = x + v * c * dt
            X[k + 1, 1] = y + v * s * dt
            X[k + 1, 2] = v + a * dt
            X[k + 1, 3] = th + (v * td / L) * dt
            if need_sens:
                A[0, 2] = c * dt
                A[0, 3] = -v * s * dt
                A[1, 2] = s * dt
                A[1, 3] = v * c * dt
                A[3, 2] = td * dt / L
                np.matmul(A, S[k], out=S[k + 1])
                S[k + 1, 2, 2 * k] += dt
                S[k + 1, 3, 2 * k + 1] += (v * (1.0 + td * td) / L) * dt
        self._states = X
        if need_sens:
            self._sens = S
        elif self._key != key:
            self._sens = None
        self._key = key


class _MddProblem:
    """Callbacks for one dual-barrier MPC solve."""

    def __init__(self, x_t: State, ref: np.ndarray, act: ActiveObstacleSet,
                 cfg: ControllerConfig, params: BicycleParams, prev_u: np.ndarray):
        n, ncbf = cfg.horizon, cfg.cbf_horizon
        self.cfg = cfg
        self.params = params
        self.ref = ref
        self.layout = HorizonLayout(
            n_steps=n, control_dim=2, n_cbf=ncbf,
            obstacle_facets=tuple(o.polytope.n_facets for o in act.obstacles),
        )
        self.act = act
        self.dyn = _HorizonDynamics(np.array([x_t.x, x_t.y, x_t.v, x_t.theta]), n, params)
        self.prev_u = prev_u
        self.sw = np.sqrt(np.asarray(cfg.state_weights, float))
        self.uw = np.sqrt(np.asarray(cfg.control_weights, float))
        self.dw = np.sqrt(np.asarray(cfg.smoothness_weights, float))
        self.ow = math.sqrt(cfg.slack_weight)
        self.decay_pow = cfg.decay ** np.arange(1, ncbf + 1)
        self.rhs = np.array([
            o.h_t if cfg.constraint_mode is ConstraintMode.SQUARED else math.sqrt(o.h_t)
            for o in act.obstacles
        ])
        self.n_res = 4 * n + 2 * n + 2 * n + ncbf
        self.n_g = 2 * n + 2 * ncbf * len(act.obstacles)
        self._prepare_templates()

    def _prepare_templates(self):
        n, ncbf = self.cfg.horizon, self.cfg.cbf_horizon
        lay = self.layout
        nu = lay.n_controls
        # residual jacobian: all blocks except state tracking are constant
        Jt = np.zeros((self.n_res, lay.n_vars))
        row = 4 * n
        for k in range(n):
            Jt[row + 2 * k, 2 * k] = self.uw[0]
            Jt[row + 2 * k + 1, 2 * k + 1] = self.uw[1]
        row += 2 * n
        for k in range(n):
            Jt[row + 2 * k, 2 * k] = self.dw[0]
            Jt[row + 2 * k + 1, 2 * k + 1] = self.dw[1]
            if k > 0:
                Jt[row + 2 * k, 2 * (k - 1)] = -self.dw[0]
                Jt[row + 2 * k + 1, 2 * (k - 1) + 1] = -self.dw[1]
        row += 2 * n
        for k in range(ncbf):
            Jt[row + k, nu + k] = self.ow
        self._J_template = Jt
        # constraint jacobian: velocity rows are exactly linear in the
        # accelerations (v_k = v0 + dt * sum a_j), so they are constant
        Gt = np.zeros((self.n_g, lay.n_vars))
        dt = self.params.dt
        for k in range(1, n + 1):
            Gt[k - 1, 0: 2 * k: 2] = dt
            Gt[n + k - 1, 0: 2 * k: 2] = -dt
        row = 2 * n
        off = nu + ncbf
        self._dcbf_rows = []
        self._norm_rows = []
        self._lam_cols = []
        self._omega_cols = np.arange(nu, nu + ncbf)
        for o in self.act.obstacles:
            s = o.polytope.n_facets
            self._dcbf_rows.append(np.arange(row, row + ncbf))
            self._norm_rows.append(np.arange(row + ncbf, row + 2 * ncbf))
            self._lam_cols.append(off + (np.arange(ncbf) * s)[:, None] + np.arange(s)[None, :])
            for k in range(ncbf):
                Gt[row + k, nu + k] = -self.decay_pow[k] * self.rhs[len(self._dcbf_rows) - 1]
            row += 2 * ncbf
            off += ncbf * s
        self._G_template = Gt

    # --- decision vector access -------------------------------------------------
    def _split(self, z):
        lay = self.layout
        u = lay.control_block(z)
        w = lay.omega_block(z)
        lams = [lay.lambda_block(z, i) for i in range(len(self.act.obstacles))]
        return u, w, lams

    def bounds(self):
        lay = self.layout
        lb = np.full(lay.n_vars, 0.0)
        ub = np.full(lay.n_vars, np.inf)
        p = self.params
        lb[: lay.n_controls:2] = -p.a_max
        ub[: lay.n_controls:2] = p.a_max
        lb[1: lay.n_controls:2] = -p.delta_max
        ub[1: lay.n_controls:2] = p.delta_max
        return lb, ub

    def initial_guess(self):
        lay = self.layout
        z = np.zeros(lay.n_vars)
        w = lay.omega_block(z)
        w[:] = 1.0
        for i, o in enumerate(self.act.obstacles):
            lay.lambda_block(z, i)[:] = o.lam_t
            # start each slack near the largest value the decay constraint
            # admits while the robot holds position (keeps the first QP
            # feasible without relaxation)
            if self.rhs[i] > 0.0:
                cap = 0.95 * math.sqrt(o.h_t) / (self.decay_pow * self.rhs[i])
                np.minimum(w, np.maximum(cap, 0.0), out=w)
        return z

    def ineq_curvature(self, z, mu):
        """Lagrangian curvature of the dual-norm rows, 2 mu A A'; this is
        the only constraint curvature in directions invisible to the
        Gauss-Newton objective model (the multiplier block)."""
        lay = self.layout
        ncbf = self.cfg.cbf_horizon
        H = np.zeros((lay.n_vars, lay.n_vars))
        off = lay.n_controls + ncbf
        row = 2 * self.cfg.horizon
        for i, o in enumerate(self.act.obstacles):
            A = o.polytope.A
            s = o.polytope.n_facets
            M = 2.0 * (A @ A.T)
            row += ncbf  # skip this obstacle's decay rows
            for k in range(ncbf):
                m = mu[row + k]
                if m > 0.0:
                    blk = slice(off + k * s, off + (k + 1) * s)
                    H[blk, blk] += m * M
            row += ncbf
            off += ncbf * s
        return H

    # --- callbacks ----------------------------------------------------------------
    def _residual_values(self, z):
        u, w, _ = self._split(z)
        X = self.dyn.states(u)
        r_track = (self.sw * (X[1:] - self.ref[1:])).ravel()
        r_u = (self.uw * u).ravel()
        du = u.copy()
        du[1:] -= u[:-1]
        du[0] -= self.prev_u
        r_du = (self.dw * du).ravel()
        r_w = self.ow * (w - 1.0)
        return np.concatenate([r_track, r_u, r_du, r_w])

    def objective(self, z):
        r = self._residual_values(z)
        return float(r @ r)

    def residuals(self, z):
        n = self.cfg.horizon
        nu = self.layout.n_controls
        u, _, _ = self._split(z)
        _, S = self.dyn.states_and_sens(u)
        r = self._residual_values(z)
        J = self._J_template.copy()
        J[: 4 * n, :nu] = (self.sw[None, :, None] * S[1:]).reshape(4 * n, nu)
        return r, J

    def _constraint_values(self, z):
        cfg, p = self.cfg, self.params
        ncbf = cfg.cbf_horizon
        u, w, lams = self._split(z)
        X = self.dyn.states(u)
        parts = [X[1:, 2] - p.v_min, p.v_max - X[1:, 2]]
        P = X[1: ncbf + 1, :2]
        for i, o in enumerate(self.act.obstacles):
            A, b = o.polytope.A, o.polytope.b
            slack = P @ A.T - b          # (ncbf, s)
            lhs = np.einsum("ks,ks->k", slack, lams[i])
            parts.append(lhs - w * self.decay_pow * self.rhs[i])
            t = lams[i] @ A              # (ncbf, 2)
            parts.append(1.0 - np.einsum("kc,kc->k", t, t))
        return np.concatenate(parts) if parts else np.zeros(0)

    def ineq(self, z):
        return self._constraint_values(z)

    def ineq_jac(self, z):
        ncbf = self.cfg.cbf_horizon
        u, w, lams = self._split(z)
        X, S = self.dyn.states_and_sens(u)
        G = self._G_template.copy()
        nu = self.layout.n_controls
        Ppos = X[1: ncbf + 1, :2]
        Spos = S[1: ncbf + 1, :2]        # (ncbf, 2, nu)
        for i, o in enumerate(self.act.obstacles):
            A, b = o.polytope.A, o.polytope.b
            slack = Ppos @ A.T - b       # (ncbf, s)
            W = lams[i] @ A              # (ncbf, 2)
            G[self._dcbf_rows[i][0]: self._dcbf_rows[i][0] + ncbf, :nu] = \
                np.einsum("kc,kcj->kj", W, Spos)
            G[self._dcbf_rows[i][:, None], self._lam_cols[i]] = slack
            G[self._norm_rows[i][:, None], self._lam_cols[i]] = -2.0 * (W @ A.T)
        return G

    def dcbf_rows(self, z) -> np.ndarray:
        """Decay-constraint residuals per obstacle (rows) and step (cols)."""
        g = self._constraint_values(z)
        n, ncbf = self.cfg.horizon, self.cfg.cbf_horizon
        out = np.empty((len(self.act.obstacles), ncbf))
        row = 2 * n
        for i in range(len(self.act.obstacles)):
            out[i] = g[row: row + ncbf]
            row += 2 * ncbf
        return out

    def dual_bounds(self, z) -> np.ndarray:
        """Raw dual lower bounds (A p - b)' lam per obstacle and step, m."""
        ncbf = self.cfg.cbf_horizon
        u, _, lams = self._split(z)
        X = self.dyn.states(u)
        P = X[1: ncbf + 1, :2]
        out = np.empty((len(self.act.obstacles), ncbf))
        for i, o in enumerate(self.act.obstacles):
            slack = P @ o.polytope.A.T - o.polytope.b
            out[i] = np.sum(slack * lams[i], axis=1)
        return out


def build_mdd_step(x_t: State, ref: Sequence[State], act: ActiveObstacleSet,
                   cfg: ControllerConfig, params: BicycleParams,
                   prev_control: Control | None = None) -> tuple[NLPProblem, HorizonLayout, _MddProblem]:
    """Assemble the dual-barrier MPC as a dense NLP."""
    if cfg.cbf_horizon > cfg.horizon:
        raise ValueError("cbf_horizon must not exceed horizon")
    if len(ref) != cfg.horizon + 1:
        raise ValueError(f"reference must have {cfg.horizon + 1} states, got {len(ref)}")
    prev_u = np.array([prev_control.a, prev_control.delta]) if prev_control else np.zeros(2)
    ref_arr = _ref_to_array(x_t, ref)
    mdd = _MddProblem(x_t, ref_arr, act, cfg, params, prev_u)
    lb, ub = mdd.bounds()
    problem = NLPProblem(
        n_vars=mdd.layout.n_vars,
        objective=mdd.objective,
        residuals=mdd.residuals,
        ineq_constraints=mdd.ineq,
        ineq_jacobian=mdd.ineq_jac,
        ineq_curvature=mdd.ineq_curvature,
        lower=lb,
        upper=ub,
        initial_guess=mdd.initial_guess(),
    )
    return problem, mdd.layout, mdd


def _states_from(u: np.ndarray, x_t: State, params: BicycleParams, normalize=True) -> list[State]:
    from .dynamics import bicycle_step
    out = [x_t]
    for k in range(u.shape[0]):
        out.append(bicycle_step(out[-1], Control(float(u[k, 0]), float(u[k, 1])), params))
    return out


def mdd_step(x_t: State, ref: Sequence[State], obstacles: Sequence[Polytope],
             cfg: ControllerConfig, params: BicycleParams,
             warm: StepResult | None = None,
             prev_control: Control | None = None) -> StepResult:
    """One receding-horizon step of the dual-barrier controller."""
    act = filter_obstacles(x_t, obstacles, cfg.safe_distance)
    if act.contact:
        return StepResult(
            u0=Control(-params.a_max, 0.0), predicted_states=[x_t],
            omegas=np.zeros(cfg.cbf_horizon), lambdas=[],
            outcome=StepOutcome.INFEASIBLE_START, solver_status=SolveStatus.INFEASIBLE,
            solve_time=0.0, min_margin=0.0, active=act,
            dcbf_residuals=np.zeros((len(act), cfg.cbf_horizon)),
        )
    problem, layout, mdd = build_mdd_step(x_t, ref, act, cfg, params, prev_control)
    sol = _solve_with_retry(problem, cfg, warm, layout)
    return _finish_step(sol, layout, mdd, x_t, cfg, params, act)


def _solve_with_retry(problem: NLPProblem, cfg: ControllerConfig,
                      warm: StepResult | None, layout: HorizonLayout) -> Solution:
    """Warm-started solve with a cold retry: a shifted previous solution is
    usually an excellent guess, but after the active geometry changes it
    can strand the line search, in which case the plain initial guess
    almost always recovers."""
    cold_guess = problem.initial_guess
    warm_qp = None
    if warm is not None and warm.solution is not None and warm.layout == layout:
        problem.initial_guess = warm_start_shift(warm.solution, layout)
        warm_qp = warm.solution.qp_state
    sol = sqp_solve(problem, cfg.solver, warm_qp_state=warm_qp)
    if sol.status is SolveStatus.OPTIMAL or warm_qp is None:
        return sol
    acceptable = (sol.status is SolveStatus.MAX_ITER and
                  sol.constraint_violation <= cfg.accept_violation_factor * cfg.solver.tol_feas)
    if acceptable:
        return sol
    problem.initial_guess = cold_guess
    retry = sqp_solve(problem, cfg.solver)
    if retry.status is SolveStatus.OPTIMAL:
        return retry
    return retry if retry.constraint_violation < sol.constraint_violation else sol


def _finish_step(sol: Solution, layout: HorizonLayout, mdd, x_t: State,
                 cfg: ControllerConfig, params: BicycleParams,
                 act: ActiveObstacleSet) -> StepResult:
    u = layout.control_block(sol.z)
    w = layout.omega_block(sol.z).copy()
    lams = [layout.lambda_block(sol.z, i).copy() for i in range(len(act.obstacles))]
    if sol.status is SolveStatus.OPTIMAL:
        outcome = StepOutcome.OPTIMAL
    elif (sol.status is SolveStatus.MAX_ITER
          and sol.constraint_violation <= cfg.accept_violation_factor * cfg.solver.tol_feas):
        outcome = StepOutcome.DEGRADED
    else:
        outcome = StepOutcome.BRAKE
    if outcome is StepOutcome.BRAKE:
        u0 = fallback_brake(x_t, params)
    else:
        u0 = Control(float(np.clip(u[0, 0], -params.a_max, params.a_max)),
                     float(np.clip(u[0, 1], -params.delta_max, params.delta_max)))
    bounds = mdd.dual_bounds(sol.z) if len(act.obstacles) else np.zeros((0, cfg.cbf_horizon))
    return StepResult(
        u0=u0,
        predicted_states=_states_from(u, x_t, params),
        omegas=w,
        lambdas=lams,
        outcome=outcome,
        solver_status=sol.status,
        solve_time=sol.solve_time,
        min_margin=float(bounds.min()) if bounds.size else math.inf,
        active=act,
        dcbf_residuals=mdd.dcbf_rows(sol.z) if len(act.obstacles) else np.zeros((0, cfg.cbf_horizon)),
        solution=sol,
        layout=layout,
    )


class _BaselineProblem:
    """Callbacks for the squared-distance barrier baseline (circles)."""

    def __init__(self, x_t: State, ref: np.ndarray, circles: list[Circle],
                 cfg: ControllerConfig, params: BicycleParams, prev_u: np.ndarray):
        n, ncbf = cfg.horizon, cfg.cbf_horizon
        self.cfg = cfg
        self.params = params
        self.ref = ref
        self.circles = circles
        self.layout = HorizonLayout(n_steps=n, control_dim=2, n_cbf=ncbf, obstacle_facets=())
        self.dyn = _HorizonDynamics(np.array([x_t.x, x_t.y, x_t.v, x_t.theta]), n, params)
        self.prev_u = prev_u
        self.sw = np.sqrt(np.asarray(cfg.state_weights, float))
        self.uw = np.sqrt(np.asarray(cfg.control_weights, float))
        self.dw = np.sqrt(np.asarray(cfg.smoothness_weights, float))
        self.ow = math.sqrt(cfg.slack_weight)
        self.n_res = 8 * n + ncbf
        self.n_g = 2 * n + ncbf * len(circles)

    def _split(self, z):
        return self.layout.control_block(z), self.layout.omega_block(z)

    def bounds(self):
        lay = self.layout
        lb = np.zeros(lay.n_vars)
        ub = np.full(lay.n_vars, np.inf)
        p = self.params
        lb[: lay.n_controls:2] = -p.a_max
        ub[: lay.n_controls:2] = p.a_max
        lb[1: lay.n_controls:2] = -p.delta_max
        ub[1: lay.n_controls:2] = p.delta_max
        return lb, ub

    def initial_guess(self):
        z = np.zeros(self.layout.n_vars)
        self.layout.omega_block(z)[:] = 1.0
        return z

    def _h(self, X):
        # squared clearance per circle at every horizon state
        P = X[:, :2]
        return np.stack([
            np.sum((P - np.asarray(c.center)) ** 2, axis=1) - c.radius ** 2
            for c in self.circles
        ]) if self.circles else np.zeros((0, X.shape[0]))

    def _residual_values(self, z):
        u, w = self._split(z)
        X = self.dyn.states(u)
        r_track = (self.sw * (X[1:] - self.ref[1:])).ravel()
        r_u = (self.uw * u).ravel()
        du = np.diff(np.vstack([self.prev_u[None, :], u]), axis=0)
        r_du = (self.dw * du).ravel()
        r_w = self.ow * (w - 1.0)
        return np.concatenate([r_track, r_u, r_du, r_w])

    def objective(self, z):
        r = self._residual_values(z)
        return float(r @ r)

    def residuals(self, z):
        n, ncbf = self.cfg.horizon, self.cfg.cbf_horizon
        lay = self.layout
        u, w = self._split(z)
        X, S = self.dyn.states_and_sens(u)
        r = self._residual_values(z)
        J = np.zeros((self.n_res, lay.n_vars))
        nu = lay.n_controls
        for k in range(1, n + 1):
            J[(k - 1) * 4: k * 4, :nu] = self.sw[:, None] * S[k]
        row = 4 * n
        for k in range(n):
            J[row + 2 * k, 2 * k] = self.uw[0]
            J[row + 2 * k + 1, 2 * k + 1] = self.uw[1]
        row += 2 * n
        for k in range(n):
            J[row + 2 * k, 2 * k] = self.dw[0]
            J[row + 2 * k + 1, 2 * k + 1] = self.dw[1]
            if k > 0:
                J[row + 2 * k, 2 * (k - 1)] = -self.dw[0]
                J[row + 2 * k + 1, 2 * (k - 1) + 1] = -self.dw[1]
        row += 2 * n
        for k in range(ncbf):
            J[row + k, nu + k] = self.ow
        return r, J

    def ineq(self, z):
        cfg, p = self.cfg, self.params
        n, ncbf = cfg.horizon, cfg.cbf_horizon
        u, w = self._split(z)
        X = self.dyn.states(u)
        parts = [X[1:, 2] - p.v_min, p.v_max - X[1:, 2]]
        H = self._h(X)
        for j in range(len(self.circles)):
            hj = H[j]
            parts.append(hj[1: ncbf + 1] - w * cfg.decay * hj[:ncbf])
        return np.concatenate(parts)

    def ineq_jac(self, z):
        cfg = self.cfg
        n, ncbf = cfg.horizon, cfg.cbf_horizon
        lay = self.layout
        u, w = self._split(z)
        X, S = self.dyn.states_and_sens(u)
        G = np.zeros((self.n_g, lay.n_vars))
        nu = lay.n_controls
        for k in range(1, n + 1):
            G[k - 1, :nu] = S[k, 2]
            G[n + k - 1, :nu] = -S[k, 2]
        H = self._h(X)
        row = 2 * n
        for j, c in enumerate(self.circles):
            center = np.asarray(c.center)
            for k in range(ncbf):
                r = row + k
                G[r, :nu] = 2.0 * (X[k + 1, :2] - center) @ S[k + 1, :2]
                if k > 0:
                    G[r, :nu] -= w[k] * cfg.decay * (2.0 * (X[k, :2] - center) @ S[k, :2])
                G[r, nu + k] = -cfg.decay * H[j, k]
            row += ncbf
        return G

    def margins(self, z) -> np.ndarray:
        u, _ = self._split(z)
        X = self.dyn.states(u)
        ncbf = self.cfg.cbf_horizon
        out = np.empty((len(self.circles), ncbf))
        for j, c in enumerate(self.circles):
            d = np.linalg.norm(X[1: ncbf + 1, :2] - np.asarray(c.center), axis=1)
            out[j] = d - c.radius
        return out

    def dcbf_rows(self, z) -> np.ndarray:
        g = self.ineq(z)
        n, ncbf = self.cfg.horizon, self.cfg.cbf_horizon
        out = np.empty((len(self.circles), ncbf))
        for j in range(len(self.circles)):
            out[j] = g[2 * n + j * ncbf: 2 * n + (j + 1) * ncbf]
        return out

    def dual_bounds(self, z):
        return self.margins(z)


def baseline_dcbf_step(x_t: State, ref: Sequence[State], circles: Sequence[Circle],
                       cfg: ControllerConfig, params: BicycleParams,
                       warm: StepResult | None = None,
                       prev_control: Control | None = None) -> StepResult:
    """Comparison controller: per-circle squared clearance must stay above
    a decaying fraction of its previous value along the horizon."""
    if len(ref) != cfg.horizon + 1:
        raise ValueError(f"reference must have {cfg.horizon + 1} states, got {len(ref)}")
    p = np.array([x_t.x, x_t.y])
    near = []
    contact = False
    for c in circles:
        margin = float(np.linalg.norm(p - np.asarray(c.center)) - c.radius)
        if margin <= cfg.safe_distance:
            near.append(c)
            if margin <= 0.0:
                contact = True
    act = ActiveObstacleSet(obstacles=[], contact=contact)
    if contact:
        return StepResult(
            u0=Control(-params.a_max, 0.0), predicted_states=[x_t],
            omegas=np.zeros(cfg.cbf_horizon), lambdas=[],
            outcome=StepOutcome.INFEASIBLE_START, solver_status=SolveStatus.INFEASIBLE,
            solve_time=0.0, min_margin=0.0, active=act,
            dcbf_residuals=np.zeros((len(near), cfg.cbf_horizon)),
        )
    prev_u = np.array([prev_control.a, prev_control.delta]) if prev_control else np.zeros(2)
    ref_arr = _ref_to_array(x_t, ref)
    base = _BaselineProblem(x_t, ref_arr, near, cfg, params, prev_u)
    lb, ub = base.bounds()
    problem = NLPProblem(
        n_vars=base.layout.n_vars,
        objective=base.objective,
        residuals=base.residuals,
        ineq_constraints=base.ineq,
        ineq_jacobian=base.ineq_jac,
        lower=lb,
        upper=ub,
        initial_guess=base.initial_guess(),
    )
    sol = _solve_with_retry(problem, cfg, warm, base.layout)
    res = _finish_step(sol, base.layout, base, x_t, cfg, params, act)
    return res


class MddController:
    """Stateful wrapper threading warm starts and the previously applied
    control across receding-horizon steps."""

    def __init__(self, cfg: ControllerConfig, params: BicycleParams):
        self.cfg = cfg
        self.params = params
        self.prev_result: StepResult | None = None
        self.prev_control: Control | None = None

    def step(self, x_t: State, ref: Sequence[State], obstacles: Sequence[Polytope]) -> StepResult:
        res = mdd_step(x_t, ref, obstacles, self.cfg, self.params,
                       warm=self.prev_result, prev_control=self.prev_control)
        self.prev_result = res
        self.prev_control = res.u0
        return res


class BaselineDcbfController:
    def __init__(self, cfg: ControllerConfig, params: BicycleParams):
        self.cfg = cfg
        self.params = params
        self.prev_result: StepResult | None = None
        self.prev_control: Control | None = None

    def step(self, x_t: State, ref: Sequence[State], circles: Sequence[Circle]) -> StepResult:
        res = baseline_dcbf_step(x_t, ref, circles, self.cfg, self.params,
                                 warm=self.prev_result, prev_control=self.prev_control)
        self.prev_result = res
        self.prev_control = res.u0
        return res
