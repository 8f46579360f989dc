"""Pose-graph back-end over relative poses in a reference robot's frame.

State: one 6-DoF pose per robot except the reference, which is pinned to
identity. Three factor kinds:

- mutual: measured position of robot j in observer i's frame (translation
  only; the front-end predicts no rotation)
- prior:  full pose prior per variable (the only rotation information)
- range:  pairwise distance

Cost is the information-weighted sum of squared residuals, minimized by
Levenberg-Marquardt with a multiplicative damping schedule. Updates live
on the product manifold R^3 x SO(3): t += dt, q <- q * exp(dtheta), with
quaternion renormalization after every accepted step.

``lm_solve`` is the plain numpy fast path. ``lm_solve_differentiable``
runs the identical iteration on autodiff tensors (truncated to
``unroll_depth`` accepted steps), so gradients reach factor measurements
and information diagonals — and through them the front-end network.
Factor measurement/info fields may be numpy arrays or tape tensors; the
numpy path reads raw values either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import tgeom as tg
from .geom import (
    Pose,
    identity_pose,
    quat_conj,
    quat_from_axis_angle,
    quat_log,
    quat_mul,
    quat_to_mat,
    skew,
)

COINCIDENCE_EPS = 1e-6


@dataclass(frozen=True)
class LMSettings:
    max_iters: int = 20
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.3
    tol: float = 1e-12
    unroll_depth: int = 3
    max_retries: int = 8

    def __post_init__(self):
        for name in ("max_iters", "lambda0", "lambda_up", "lambda_down", "max_retries"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.tol < 0 or self.unroll_depth < 0:
            raise ValueError("tol and unroll_depth must be >= 0")
        if self.unroll_depth > self.max_iters:
            raise ValueError("unroll_depth cannot exceed max_iters")


@dataclass(frozen=True)
class PgoConfig:
    sigma_rot_deg: float = 2.0
    sigma_range: float = 0.1
    default_prior_var: float = 4.0


@dataclass
class Factor:
    kind: str  # "mutual" | "prior" | "range"
    i: int
    j: int = -1
    measurement: object = None  # (3,) | Pose-like (q, t) tuple | scalar
    info: object = None  # (3,) diag | (6,) diag (t, r) | scalar


@dataclass
class FactorGraph:
    ref: int
    robot_ids: list[int]  # variables; never contains ref
    init: dict[int, Pose]
    factors: list[Factor] = field(default_factory=list)

    def validate(self) -> None:
        if not self.robot_ids:
            raise ValueError("graph has no variables")
        if self.ref in self.robot_ids:
            raise ValueError("reference robot cannot be a variable")
        known = set(self.robot_ids) | {self.ref}
        priors = set()
        for f in self.factors:
            if f.i not in known or (f.kind != "prior" and f.j not in known):
                raise ValueError(f"factor references unknown robot: {f}")
            info = _val(f.info)
            if not np.all(np.isfinite(info)) or np.any(np.asarray(info) <= 0):
                raise ValueError(f"factor information must be positive finite: {f.kind}")
            if f.kind == "prior":
                priors.add(f.i)
        missing = set(self.robot_ids) - priors
        if missing:
            raise ValueError(f"variables without a prior factor: {sorted(missing)}")


@dataclass
class LMResult:
    state: dict[int, Pose]  # includes the reference at identity
    cost: float
    iterations: int
    cost_trace: list[float]  # initial cost then every accepted cost
    converged: bool


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)


def _measurement_pose(m) -> tuple[np.ndarray, np.ndarray]:
    """Prior measurement as (q, t) raw arrays; accepts Pose or (q, t) pair."""
    if isinstance(m, Pose):
        return m.q, m.t
    q, t = m
    return _val(q), _val(t)


# ---------------------------------------------------------------------------
# residuals (numpy; these are the spec-level contracts and the fast path)
# ---------------------------------------------------------------------------


def residual_mutual(state: dict[int, Pose], i: int, j: int, measured_t, info):
    """e = t_meas - R_i^T (t_j - t_i), cost = e^T diag(info) e."""
    pi, pj = state[i], state[j]
    v = quat_to_mat(pi.q).T @ (pj.t - pi.t)
    e = _val(measured_t) - v
    return e, float(e @ (_val(info) * e))


def residual_prior(state: dict[int, Pose], i: int, prior, info):
    """e = [t_p - t_i ; log(R_p^T R_i)], cost = e^T diag(info) e."""
    q_p, t_p = _measurement_pose(prior)
    p = state[i]
    e_t = t_p - p.t
    e_r = quat_log(quat_mul(quat_conj(q_p), p.q))
    e = np.concatenate([e_t, e_r])
    return e, float(e @ (_val(info) * e))


def residual_range(state: dict[int, Pose], i: int, j: int, d, info):
    """e = d - ||t_i - t_j||, cost = info * e^2."""
    rho = float(np.linalg.norm(state[i].t - state[j].t))
    e = float(_val(d)) - rho
    return e, float(_val(info)) * e * e


def graph_cost(graph: FactorGraph, state: dict[int, Pose]) -> float:
    total = 0.0
    for f in graph.factors:
        if f.kind == "mutual":
            total += residual_mutual(state, f.i, f.j, f.measurement, f.info)[1]
        elif f.kind == "prior":
            total += residual_prior(state, f.i, f.measurement, f.info)[1]
        elif f.kind == "range":
            total += residual_range(state, f.i, f.j, f.measurement, f.info)[1]
        else:
            raise ValueError(f"unknown factor kind {f.kind!r}")
    return total


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def build_graph(
    ref: int,
    priors: dict[int, Pose],
    uwb: np.ndarray,
    cfg: PgoConfig,
    prior_var: dict[int, object] | None = None,
    mutual: list[tuple[int, int, object, object]] | None = None,
) -> FactorGraph:
    """Assemble the per-frame graph.

    priors: propagated pose priors of every robot except ref, in ref's frame.
    prior_var: per-robot (3,) translation variance for the prior factor
        (the front-end covariance); missing robots get the configured default.
    mutual: (observer, target, t_meas, var) per accepted front-end match.
    uwb: full symmetric range matrix (nan = absent).
    """
    robot_ids = sorted(priors.keys())
    if ref in priors:
        raise ValueError("priors must not contain the reference robot")
    if not robot_ids:
        raise ValueError("cannot build an empty graph")
    info_rot = 1.0 / np.deg2rad(cfg.sigma_rot_deg) ** 2
    info_range = 1.0 / cfg.sigma_range**2

    graph = FactorGraph(ref=ref, robot_ids=robot_ids, init=dict(priors))
    prior_var = prior_var or {}
    for rid in robot_ids:
        var_t = prior_var.get(rid)
        if var_t is None:
            var_t = np.full(3, cfg.default_prior_var)
        if isinstance(var_t, T.Tensor):
            info6 = T.concat(
                [T.div(T.constant(1.0), var_t), T.constant(np.full(3, info_rot))]
            )
        else:
            info6 = np.concatenate([1.0 / np.asarray(var_t), np.full(3, info_rot)])
        graph.factors.append(
            Factor(kind="prior", i=rid, measurement=priors[rid], info=info6)
        )

    for obs, tgt, t_meas, var in mutual or []:
        if isinstance(var, T.Tensor):
            info = T.div(T.constant(1.0), var)
        else:
            info = 1.0 / np.asarray(var, dtype=np.float64)
        graph.factors.append(
            Factor(kind="mutual", i=obs, j=tgt, measurement=t_meas, info=info)
        )

    all_ids = robot_ids + [ref]
    for a_pos, i in enumerate(all_ids):
        for j in all_ids[a_pos + 1 :]:
            d = uwb[i, j]
            if np.isfinite(d):
                graph.factors.append(
                    Factor(kind="range", i=i, j=j, measurement=float(d), info=info_range)
                )

    graph.validate()
    return graph


# ---------------------------------------------------------------------------
# Levenberg-Marquardt, numpy fast path
# ---------------------------------------------------------------------------


def _so3_jri(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3) at rotation vector phi."""
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < 1e-5:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * k + c * (k @ k)


def _linearize(graph: FactorGraph, state: dict[int, Pose]):
    idx = {rid: k for k, rid in enumerate(graph.robot_ids)}
    n_cols = 6 * len(graph.robot_ids)
    rows = []
    for f in graph.factors:
        if f.kind == "mutual":
            pi, pj = state[f.i], state[f.j]
            rt = quat_to_mat(pi.q).T
            v = rt @ (pj.t - pi.t)
            e = _val(f.measurement) - v
            jrow = np.zeros((3, n_cols))
            if f.i in idx:
                c = 6 * idx[f.i]
                jrow[:, c : c + 3] = rt
                jrow[:, c + 3 : c + 6] = -skew(v)
            if f.j in idx:
                c = 6 * idx[f.j]
                jrow[:, c : c + 3] = -rt
            rows.append((e, jrow, _val(f.info) * np.ones(3)))
        elif f.kind == "prior":
            q_p, t_p = _measurement_pose(f.measurement)
            p = state[f.i]
            e_r = quat_log(quat_mul(quat_conj(q_p), p.q))
            e = np.concatenate([t_p - p.t, e_r])
            jrow = np.zeros((6, n_cols))
            c = 6 * idx[f.i]
            jrow[:3, c : c + 3] = -np.eye(3)
            jrow[3:, c + 3 : c + 6] = _so3_jri(e_r)
            rows.append((e, jrow, _val(f.info) * np.ones(6)))
        else:  # range
            pi, pj = state[f.i], state[f.j]
            delta = pi.t - pj.t
            rho = float(np.linalg.norm(delta))
            if rho < COINCIDENCE_EPS:
                continue  # coincidence guard: skip this factor this iteration
            u = delta / rho
            e = np.array([float(_val(f.measurement)) - rho])
            jrow = np.zeros((1, n_cols))
            if f.i in idx:
                c = 6 * idx[f.i]
                jrow[0, c : c + 3] = -u
            if f.j in idx:
                c = 6 * idx[f.j]
                jrow[0, c : c + 3] = u
            rows.append((e, jrow, np.array([float(_val(f.info))])))
    r = np.concatenate([b[0] for b in rows])
    jac = np.concatenate([b[1] for b in rows], axis=0)
    w = np.concatenate([b[2] for b in rows])
    return r, jac, w


def _apply_step(state: dict[int, Pose], robot_ids, delta: np.ndarray) -> dict[int, Pose]:
    new_state = dict(state)
    for k, rid in enumerate(robot_ids):
        dt = delta[6 * k : 6 * k + 3]
        dr = delta[6 * k + 3 : 6 * k + 6]
        p = state[rid]
        new_state[rid] = Pose(q=quat_mul(p.q, quat_from_axis_angle(dr)), t=p.t + dt)
    return new_state


def _chol_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    low = np.linalg.cholesky(a)  # raises LinAlgError when not SPD
    return np.linalg.solve(low.T, np.linalg.solve(low, b))


def lm_solve(graph: FactorGraph, settings: LMSettings = LMSettings()) -> LMResult:
    graph.validate()
    state = {rid: graph.init[rid] for rid in graph.robot_ids}
    state[graph.ref] = identity_pose()

    cost = graph_cost(graph, state)
    trace = [cost]
    lam = settings.lambda0
    iterations = 0
    converged = False
    for _ in range(settings.max_iters):
        r, jac, w = _linearize(graph, state)
        a = jac.T @ (jac * w[:, None])
        g = jac.T @ (w * r)
        accepted = False
        for _ in range(settings.max_retries):
            try:
                delta = -_chol_solve(a + lam * np.eye(a.shape[0]), g)
            except np.linalg.LinAlgError:
                lam *= settings.lambda_up
                continue
            candidate = _apply_step(state, graph.robot_ids, delta)
            new_cost = graph_cost(graph, candidate)
            if new_cost <= cost:
                state = candidate
                decrease = cost - new_cost
                cost = new_cost
                trace.append(cost)
                lam *= settings.lambda_down
                accepted = True
                iterations += 1
                break
            lam *= settings.lambda_up
        if not accepted:
            break
        if decrease <= settings.tol * (1.0 + abs(trace[-2])):
            converged = True
            break
    return LMResult(
        state=state, cost=cost, iterations=max(iterations, 1), cost_trace=trace,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Levenberg-Marquardt, differentiable unrolled path
# ---------------------------------------------------------------------------


def _t(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.constant(np.asarray(x, dtype=np.float64))


def _so3_jri_t(e_r: T.Tensor) -> T.Tensor:
    theta = float(np.linalg.norm(e_r.data))
    k = tg.skew(e_r)
    if theta < 1e-5:
        # curvature term is O(theta^2); a constant coefficient is exact
        # enough here and avoids 0/0 in the closed form
        c = T.constant(1.0 / 12.0)
    else:
        th = T.norm(e_r)
        c = T.sub(
            T.div(T.constant(1.0), T.mul(th, th)),
            T.div(
                T.add(T.constant(1.0), T.cos(th)),
                T.mul(T.mul(T.constant(2.0), th), T.sin(th)),
            ),
        )
    return T.add(
        T.add(T.constant(np.eye(3)), T.mul(k, T.constant(0.5))),
        T.mul(T.matmul(k, k), c),
    )


class _TState:
    """Tensor-valued solver state: ref is a constant identity."""

    def __init__(self, graph: FactorGraph):
        self.ref = graph.ref
        self.q = {rid: T.constant(graph.init[rid].q) for rid in graph.robot_ids}
        self.t = {rid: T.constant(graph.init[rid].t) for rid in graph.robot_ids}
        self.q[graph.ref] = T.constant(np.array([1.0, 0.0, 0.0, 0.0]))
        self.t[graph.ref] = T.constant(np.zeros(3))


def _residuals_t(graph: FactorGraph, st: _TState):
    """Stacked residual vector, Jacobian and weight diag as tensors."""
    idx = {rid: k for k, rid in enumerate(graph.robot_ids)}
    n_vars = len(graph.robot_ids)
    zeros33 = T.constant(np.zeros((3, 3)))
    rt_cache = {
        rid: T.transpose(tg.quat_to_mat(st.q[rid])) for rid in graph.robot_ids
    }
    rt_cache[graph.ref] = T.constant(np.eye(3))

    res_parts, jac_parts, w_parts = [], [], []

    def var_blocks(blocks: dict[int, T.Tensor], rdim: int):
        cols = []
        zero_block = T.constant(np.zeros((rdim, 6)))
        for rid in graph.robot_ids:
            cols.append(blocks.get(idx[rid], zero_block))
        return T.concat(cols, axis=1) if n_vars > 1 else cols[0]

    for f in graph.factors:
        if f.kind == "mutual":
            rt = rt_cache[f.i]
            diff = T.sub(st.t[f.j], st.t[f.i])
            v = T.matmul(rt, diff)
            e = T.sub(_t(f.measurement), v)
            blocks: dict[int, T.Tensor] = {}
            if f.i in idx:
                blocks[idx[f.i]] = T.concat([rt, T.neg(tg.skew(v))], axis=1)
            if f.j in idx:
                blocks[idx[f.j]] = T.concat([T.neg(rt), zeros33], axis=1)
            res_parts.append(e)
            jac_parts.append(var_blocks(blocks, 3))
            w_parts.append(T.mul(_t(f.info), T.constant(np.ones(3))))
        elif f.kind == "prior":
            q_p, t_p = _measurement_pose(f.measurement)
            e_t = T.sub(T.constant(t_p), st.t[f.i])
            q_rel = tg.quat_mul(T.constant(quat_conj(q_p)), st.q[f.i])
            e_r = tg.quat_log(q_rel)
            jri = _so3_jri_t(e_r)
            top = T.concat([T.constant(-np.eye(3)), zeros33], axis=1)
            bottom = T.concat([zeros33, jri], axis=1)
            blocks = {idx[f.i]: T.concat([top, bottom], axis=0)}
            res_parts.append(T.concat([e_t, e_r]))
            jac_parts.append(var_blocks(blocks, 6))
            w_parts.append(T.mul(_t(f.info), T.constant(np.ones(6))))
        else:  # range
            delta = T.sub(st.t[f.i], st.t[f.j])
            rho = float(np.linalg.norm(delta.data))
            if rho < COINCIDENCE_EPS:
                continue
            rho_t = T.norm(delta)
            e = T.reshape(T.sub(_t(f.measurement), rho_t), (1,))
            u_row = T.reshape(T.div(delta, rho_t), (1, 3))
            zeros13 = T.constant(np.zeros((1, 3)))
            blocks = {}
            if f.i in idx:
                blocks[idx[f.i]] = T.concat([T.neg(u_row), zeros13], axis=1)
            if f.j in idx:
                blocks[idx[f.j]] = T.concat([u_row, zeros13], axis=1)
            res_parts.append(e)
            jac_parts.append(var_blocks(blocks, 1))
            w_parts.append(T.reshape(_t(f.info), (1,)))

    r = T.concat(res_parts)
    jac = T.concat(jac_parts, axis=0)
    w = T.concat(w_parts)
    return r, jac, w


def _cost_t(graph: FactorGraph, st: _TState) -> T.Tensor:
    """Weighted squared residual total (tensor); mirrors graph_cost exactly."""
    total_parts = []
    for f in graph.factors:
        if f.kind == "mutual":
            rt = T.transpose(tg.quat_to_mat(st.q[f.i]))
            v = T.matmul(rt, T.sub(st.t[f.j], st.t[f.i]))
            e = T.sub(_t(f.measurement), v)
            total_parts.append(T.sum_(T.mul(_t(f.info), T.mul(e, e))))
        elif f.kind == "prior":
            q_p, t_p = _measurement_pose(f.measurement)
            e_t = T.sub(T.constant(t_p), st.t[f.i])
            e_r = tg.quat_log(tg.quat_mul(T.constant(quat_conj(q_p)), st.q[f.i]))
            e = T.concat([e_t, e_r])
            total_parts.append(T.sum_(T.mul(_t(f.info), T.mul(e, e))))
        else:
            delta = T.sub(st.t[f.i], st.t[f.j])
            e = T.sub(_t(f.measurement), T.norm(delta))
            total_parts.append(T.mul(_t(f.info), T.mul(e, e)))
    total = total_parts[0]
    for p in total_parts[1:]:
        total = T.add(total, p)
    return total


def lm_solve_differentiable(
    graph: FactorGraph, settings: LMSettings = LMSettings()
) -> tuple[_TState, LMResult]:
    """Unrolled LM on the tape, truncated to ``unroll_depth`` accepted steps.

    Forward numerics mirror ``lm_solve`` (same damping schedule and accept
    rule); with unroll_depth == max_iters both agree to solver precision.
    Gradients flow to every tensor-valued measurement and information diag.
    """
    graph.validate()
    st = _TState(graph)
    cost_t = _cost_t(graph, st)
    cost = float(cost_t.data)
    trace = [cost]
    lam = settings.lambda0
    iterations = 0
    converged = False
    n_cols = 6 * len(graph.robot_ids)

    for _ in range(settings.max_iters):
        if iterations >= settings.unroll_depth:
            break
        r, jac, w = _residuals_t(graph, st)
        wj = T.mul(jac, T.reshape(w, (-1, 1)))
        a = T.matmul(T.transpose(jac), wj)
        g = T.matmul(T.transpose(jac), T.mul(w, r))
        accepted = False
        for _ in range(settings.max_retries):
            try:
                delta = T.solve(T.add(a, T.constant(lam * np.eye(n_cols))), T.neg(g))
            except np.linalg.LinAlgError:
                lam *= settings.lambda_up
                continue
            cand = _TState.__new__(_TState)
            cand.ref = st.ref
            cand.q = dict(st.q)
            cand.t = dict(st.t)
            for k, rid in enumerate(graph.robot_ids):
                dt = T.narrow(delta, slice(6 * k, 6 * k + 3))
                dr = T.narrow(delta, slice(6 * k + 3, 6 * k + 6))
                cand.t[rid] = T.add(st.t[rid], dt)
                cand.q[rid] = tg.vnormalize(tg.quat_mul(st.q[rid], tg.quat_exp(dr)))
            cand_cost_t = _cost_t(graph, cand)
            new_cost = float(cand_cost_t.data)
            if new_cost <= cost:
                st = cand
                decrease = cost - new_cost
                cost = new_cost
                trace.append(cost)
                lam *= settings.lambda_down
                accepted = True
                iterations += 1
                break
            lam *= settings.lambda_up
        if not accepted:
            break
        if decrease <= settings.tol * (1.0 + abs(trace[-2])):
            converged = True
            break

    result = LMResult(
        state=_tstate_to_poses(graph, st),
        cost=cost,
        iterations=max(iterations, 1),
        cost_trace=trace,
        converged=converged,
    )
    return st, result


def _tstate_to_poses(graph: FactorGraph, st: _TState) -> dict[int, Pose]:
    out = {rid: Pose(q=st.q[rid].data, t=st.t[rid].data) for rid in graph.robot_ids}
    out[graph.ref] = identity_pose()
    return out


def graph_debug_dump(graph: FactorGraph, result: LMResult) -> dict:
    """JSON-ready snapshot for regression diffing."""

    def measurement_obj(f: Factor):
        if f.kind == "prior":
            q, t = _measurement_pose(f.measurement)
            return {"q": q.tolist(), "t": t.tolist()}
        return np.asarray(_val(f.measurement)).tolist()

    return {
        "ref": graph.ref,
        "variables": {
            str(rid): {"q": p.q.tolist(), "t": p.t.tolist()}
            for rid, p in sorted(result.state.items())
        },
        "factors": [
            {
                "kind": f.kind,
                "i": f.i,
                "j": f.j,
                "measurement": measurement_obj(f),
                "info": np.asarray(_val(f.info)).tolist(),
            }
            for f in graph.factors
        ],
        "cost_trace": result.cost_trace,
        "iterations": result.iterations,
        "converged": result.converged,
    }
