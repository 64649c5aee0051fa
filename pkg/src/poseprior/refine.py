"""Likelihood-guided pose refinement.

L-BFGS (two-loop recursion, Strong-Wolfe line search with bracketing and cubic
zoom) minimizes a data cost over the tracked joints plus flow-prior terms,
either over the latent z (decoding through the flow) or over the pose vector
directly. The data cost differentiates forward kinematics w.r.t. axis-angle
joint rotations, so this module carries the autodiff twin of
:func:`poseprior.kinematics.forward_kinematics`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffmath import Array, Tape, backward, concat, grad_of
from .flow import LOG_2PI, FlowModel
from .kinematics import Skeleton, rot6d_decode


@dataclass
class LbfgsConfig:
    history_size: int = 10
    max_iterations: int = 50
    c1: float = 1e-4
    c2: float = 0.9
    initial_step: float = 1.0
    eval_checkpoints: tuple = (2, 5, 10, 25, 50)
    grad_tol: float = 1e-10
    max_bracket: int = 25
    max_zoom: int = 25
    assert_wolfe: bool = True

    def __post_init__(self):
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.history_size < 1:
            raise ValueError("history size must be >= 1")


@dataclass
class RefineObjective:
    lambda_data: float = 1.0
    lambda_prior: float = 0.01
    lambda_reg: float = 0.1
    space: str = "latent"

    def __post_init__(self):
        if min(self.lambda_data, self.lambda_prior, self.lambda_reg) < 0:
            raise ValueError("objective weights must be non-negative")
        if self.space not in ("latent", "pose"):
            raise ValueError("space must be 'latent' or 'pose'")


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    trace: list                      # objective value per iteration, f(x0) first
    iterations: int
    converged: bool
    line_search_failed: bool
    wolfe_checks: list = field(default_factory=list)  # (sufficient, curvature) per step
    evaluations: int = 0


class _LineSearchFailure(Exception):
    pass


def _cubic_step(a, fa, da, b, fb, db):
    """Minimizer of the cubic through (a, fa, da), (b, fb, db); NaN on failure."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return np.nan
    d2 = np.sign(b - a) * np.sqrt(rad)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return np.nan
    return b - (b - a) * (db + d2 - d1) / denom


def _strong_wolfe(phi, f0, d0, config: LbfgsConfig):
    """Find alpha satisfying both strong Wolfe conditions.

    ``phi(alpha) -> (f, dphi, payload)`` evaluates along the ray. Returns
    (alpha, f, dphi, payload). Raises _LineSearchFailure when bracketing or
    zooming exhausts its budget.
    """
    c1, c2 = config.c1, config.c2

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        for _ in range(config.max_zoom):
            alpha = _cubic_step(lo, f_lo, d_lo, hi, f_hi, d_hi)
            width = abs(hi - lo)
            lo_b, hi_b = min(lo, hi), max(lo, hi)
            if not np.isfinite(alpha) or alpha <= lo_b + 0.1 * width or alpha >= hi_b - 0.1 * width:
                alpha = 0.5 * (lo + hi)
            f_a, d_a, payload = phi(alpha)
            if f_a > f0 + c1 * alpha * d0 or f_a >= f_lo:
                hi, f_hi, d_hi = alpha, f_a, d_a
            else:
                if abs(d_a) <= -c2 * d0:
                    return alpha, f_a, d_a, payload
                if d_a * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = alpha, f_a, d_a
        raise _LineSearchFailure

    alpha_prev, f_prev, d_prev = 0.0, f0, d0
    alpha = config.initial_step
    for i in range(config.max_bracket):
        f_a, d_a, payload = phi(alpha)
        if f_a > f0 + c1 * alpha * d0 or (i > 0 and f_a >= f_prev):
            return zoom(alpha_prev, f_prev, d_prev, alpha, f_a, d_a)
        if abs(d_a) <= -c2 * d0:
            return alpha, f_a, d_a, payload
        if d_a >= 0:
            return zoom(alpha, f_a, d_a, alpha_prev, f_prev, d_prev)
        alpha_prev, f_prev, d_prev = alpha, f_a, d_a
        alpha *= 2.0
    raise _LineSearchFailure


def lbfgs_minimize(fg, x0, config: LbfgsConfig | None = None, callback=None) -> LbfgsResult:
    """Minimize ``fg(x) -> (f, grad)`` with L-BFGS and Strong-Wolfe steps.

    Every accepted step satisfies both Wolfe inequalities (asserted when
    ``config.assert_wolfe``); the objective trace is monotone non-increasing.
    A failed line search returns the best point so far with a flag.
    """
    config = config or LbfgsConfig()
    x = np.array(x0, dtype=np.float64)
    evals = [0]

    def eval_fg(pt):
        evals[0] += 1
        f, g = fg(pt)
        return float(f), np.asarray(g, dtype=np.float64)

    f, g = eval_fg(x)
    trace = [f]
    result = LbfgsResult(x=x, fun=f, trace=trace, iterations=0, converged=False,
                         line_search_failed=False)
    if np.linalg.norm(g) <= config.grad_tol:
        result.converged = True
        result.evaluations = evals[0]
        return result

    s_hist: list = []
    y_hist: list = []
    rho_hist: list = []

    for it in range(1, config.max_iterations + 1):
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * s.dot(q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = s_hist[-1].dot(y_hist[-1]) / y_hist[-1].dot(y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * y.dot(q)
            q += (a - b) * s
        d = -q
        d0 = d.dot(g)
        if d0 >= 0:  # numerical safeguard: fall back to steepest descent
            d = -g
            d0 = d.dot(g)

        def phi(alpha, _x=x, _d=d):
            f_a, g_a = eval_fg(_x + alpha * _d)
            return f_a, g_a.dot(_d), g_a

        try:
            alpha, f_new, dphi_new, g_new = _strong_wolfe(phi, f, d0, config)
        except _LineSearchFailure:
            result.line_search_failed = True
            break

        sufficient = f_new <= f + config.c1 * alpha * d0 + 1e-12
        curvature = abs(dphi_new) <= config.c2 * abs(d0) + 1e-12
        result.wolfe_checks.append((sufficient, curvature))
        if config.assert_wolfe and not (sufficient and curvature):
            raise AssertionError(
                f"strong Wolfe violated at iteration {it}: "
                f"sufficient={sufficient} curvature={curvature}"
            )

        x_new = x + alpha * d
        s = x_new - x
        y = g_new - g
        sy = s.dot(y)
        if sy > 1e-12:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > config.history_size:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        result.iterations = it
        if callback is not None:
            callback(it, x)
        if np.linalg.norm(g) <= config.grad_tol:
            result.converged = True
            break

    result.x = x
    result.fun = f
    result.evaluations = evals[0]
    return result


# -- differentiable forward kinematics -------------------------------------------------


def rotation_matrices(aa: Array, joints: int) -> Array:
    """Rodrigues map on a (J, 3) axis-angle Array; returns (J, 3, 3).

    The tiny bias under the square root keeps the zero-rotation gradient
    finite; (1-cos)/t^2 is computed as 0.5*sinc(t/2)^2 to dodge cancellation.
    """
    t2 = aa.square().sum(axis=1, keepdims=True) + 1e-30
    theta = t2.sqrt()
    sinc = theta.sin() / theta
    half_sinc = (theta * 0.5).sin() / (theta * 0.5)
    cosc = half_sinc.square() * 0.5
    x, y, z = aa[:, 0:1], aa[:, 1:2], aa[:, 2:3]
    zero = x * 0.0
    k = concat([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape((joints, 3, 3))
    kk = k @ k
    eye = Array(np.broadcast_to(np.eye(3), (joints, 3, 3)).copy())
    s3 = sinc.reshape((joints, 1, 1)).broadcast((joints, 3, 3))
    c3 = cosc.reshape((joints, 1, 1)).broadcast((joints, 3, 3))
    return eye + k * s3 + kk * c3


def fk_diff(pose: Array, skel: Skeleton, beta):
    """Differentiable FK: returns per-joint global rotations and positions.

    ``pose`` is an Array of shape (J, 3) on the active tape; rotations come
    back as a list of (3, 3) Arrays and positions as (3, 1) Arrays.
    """
    J = skel.joint_count
    local = rotation_matrices(pose, J)
    offsets = skel.scaled_offsets(beta)
    rots: list = [None] * J
    poss: list = [None] * J
    rots[0] = local[0]
    poss[0] = Array(np.zeros((3, 1)))
    for j in range(1, J):
        par = int(skel.parent[j])
        rots[j] = rots[par] @ local[j]
        poss[j] = poss[par] + rots[par] @ Array(offsets[j].reshape(3, 1))
    return rots, poss


def data_cost(pose: Array, observed, skel: Skeleton, beta) -> Array:
    """Squared tracked-joint residuals: positions (m^2) + rotation Frobenius^2."""
    observed = np.asarray(observed, dtype=np.float64).reshape(3, 9)
    rots, poss = fk_diff(pose, skel, beta)
    total = None
    for k, j in enumerate(skel.tracked):
        r_obs = Array(rot6d_decode(observed[k, :6]))
        p_obs = Array(observed[k, 6:].reshape(3, 1))
        term = (poss[j] - p_obs).square().sum() + (rots[j] - r_obs).square().sum()
        total = term if total is None else total + term
    return total


def data_cost_np(pose_vec: np.ndarray, observed, skel: Skeleton, beta) -> float:
    """Same cost without gradient tracking."""
    pose = Array(np.asarray(pose_vec, dtype=np.float64).reshape(skel.joint_count, 3))
    return float(data_cost(pose, observed, skel, beta).data)


# -- refinement drivers ------------------------------------------------------------------


def _checkpoint_trace(space, init_rule, config, decode, result, x0, captured):
    """Assemble the per-instance trace record from captured iterates.

    Checkpoints past the last executed iteration hold the final point, so the
    objective column stays monotone non-increasing.
    """
    iters = [0] + list(config.eval_checkpoints)
    poses = []
    objectives = []
    for it in iters:
        x = x0 if it == 0 else captured.get(it, result.x)
        poses.append(decode(x))
        objectives.append(float(result.trace[min(it, len(result.trace) - 1)]))
    return {
        "space": space,
        "init_rule": init_rule,
        "iterations": iters,
        "poses": [p.tolist() for p in poses],
        "objectives": objectives,
        "converged": bool(result.converged),
        "line_search_failed": bool(result.line_search_failed),
    }


def refine_latent(flow: FlowModel, mu: np.ndarray, observed, skel: Skeleton, beta,
                  objective: RefineObjective, config: LbfgsConfig | None = None,
                  z0: np.ndarray | None = None, init_rule: str = "mu"):
    """Optimize the latent code; the regularizer anchors to the initial guess.

    Returns (refined pose (J, 3), trace record).
    """
    config = config or LbfgsConfig()
    mu = np.asarray(mu, dtype=np.float64)
    z0 = mu.copy() if z0 is None else np.asarray(z0, dtype=np.float64)
    anchor = z0.copy()
    D = flow.dim
    cond = np.concatenate([np.asarray(observed).reshape(-1),
                           np.asarray(beta, dtype=np.float64)])[None, :]

    def decode(z):
        return flow.forward(z[None, :], cond).data[0].reshape(skel.joint_count, 3)

    def fg(z):
        with Tape() as tape:
            za = Array(z, requires_grad=True)
            pose = flow.forward(za.reshape((1, D)), cond).reshape((skel.joint_count, 3))
            cost = data_cost(pose, observed, skel, beta) * objective.lambda_data
            if objective.lambda_prior > 0:
                log_base = za.square().sum() * -0.5 - 0.5 * D * LOG_2PI
                cost = cost - log_base * objective.lambda_prior
            if objective.lambda_reg > 0:
                r = ((za - Array(anchor)).square().sum() + 1e-12).sqrt()
                cost = cost + r * objective.lambda_reg
            backward(cost, tape)
            return cost.item(), grad_of(za)

    captured = {}

    def callback(it, z):
        if it in config.eval_checkpoints:
            captured[it] = z.copy()

    result = lbfgs_minimize(fg, z0, config, callback=callback)
    trace = _checkpoint_trace("latent", init_rule, config, decode, result, z0, captured)
    return decode(result.x), trace


def refine_pose(flow: FlowModel, init_pose: np.ndarray, observed, skel: Skeleton, beta,
                objective: RefineObjective, config: LbfgsConfig | None = None,
                init_rule: str = "mu"):
    """Optimize the pose vector directly under data cost + flow NLL."""
    config = config or LbfgsConfig()
    x0 = np.asarray(init_pose, dtype=np.float64).reshape(-1)
    D = flow.dim
    cond = np.concatenate([np.asarray(observed).reshape(-1),
                           np.asarray(beta, dtype=np.float64)])[None, :]

    def fg(x):
        with Tape() as tape:
            xa = Array(x, requires_grad=True)
            pose = xa.reshape((skel.joint_count, 3))
            cost = data_cost(pose, observed, skel, beta) * objective.lambda_data
            if objective.lambda_prior > 0:
                logp = flow.log_prob(xa.reshape((1, D)), cond).sum()
                cost = cost - logp * objective.lambda_prior
            backward(cost, tape)
            return cost.item(), grad_of(xa)

    captured = {}

    def callback(it, x):
        if it in config.eval_checkpoints:
            captured[it] = x.copy()

    result = lbfgs_minimize(fg, x0, config, callback=callback)
    trace = _checkpoint_trace("pose", init_rule, config,
                              lambda x: x.reshape(skel.joint_count, 3),
                              result, x0, captured)
    return result.x.reshape(skel.joint_count, 3), trace
