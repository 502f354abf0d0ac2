"""Constrained policy optimisation for the restoration CMDP.

Every step of every episode the trust-region subproblem

    max a^T x   s.t.  B^T x + c <= 0,  x^T F x <= delta

is assembled at the current state and solved; x is the parameter update.
``a`` is a Monte Carlo average of reward gradients pushed through the
reparametrised policy, ``B`` and ``c`` come from the constraint function,
whose entries are linear or bilinear in the action so their Gaussian
expectations are available in closed form. ``F`` is the Fisher information
of the policy at the state, kept as a low-rank factor plus damping.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .cmdp import (
    ActionLayout,
    ConstraintModel,
    RestorationEnv,
    SystemState,
    constraint_model,
    reward_gradient,
    rollout_window,
    state_dim,
    state_vector,
    window_reward,
)
from .mpc import RestorationLog
from .netmodel import Scenario
from .policy import (
    FIM_DAMPING,
    GaussianOut,
    PolicyJacobians,
    PolicyParams,
    PolicySpec,
    fim_factor,
    forward,
    gaussian_kl,
    init_params,
    jacobians,
    sample,
)
from .powerflow import PowerFlowError, SensitivityError



# ---------------------------------------------------------------------------
# Fisher operator


class FisherOperator:
    """F = G^T G + damping * I applied and inverted through an eigenbasis of G G^T."""

    def __init__(self, G: np.ndarray, damping: float = FIM_DAMPING):
        self.G = np.asarray(G, dtype=float)
        self.damping = float(damping)
        w, V = np.linalg.eigh(self.G @ self.G.T)
        keep = w > max(w.max(initial=0.0), 0.0) * 1e-14
        s = np.sqrt(w[keep])
        self.W = (self.G.T @ V[:, keep]) / s  # orthonormal basis of the row space
        self.s2 = w[keep]

    @classmethod
    def dense(cls, F: np.ndarray) -> "DenseFisher":
        return DenseFisher(F)

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.G.T @ (self.G @ x) + self.damping * x

    def solve(self, x: np.ndarray) -> np.ndarray:
        proj = self.W.T @ x
        scale = 1.0 / (self.s2 + self.damping)
        inside = self.W @ (proj * (scale[:, None] if x.ndim == 2 else scale))
        return inside + (x - self.W @ proj) / self.damping

    def matrix(self) -> np.ndarray:
        return self.G.T @ self.G + self.damping * np.eye(self.dim)


class DenseFisher:
    """Explicit symmetric positive definite F, Cholesky-factored."""

    def __init__(self, F: np.ndarray):
        self.F = 0.5 * (np.asarray(F, dtype=float) + np.asarray(F, dtype=float).T)
        self._cho = cho_factor(self.F, lower=True)

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.F @ x

    def solve(self, x: np.ndarray) -> np.ndarray:
        return cho_solve(self._cho, x)

    def matrix(self) -> np.ndarray:
        return self.F


@dataclass
class QcqpData:
    a: np.ndarray  # (h,)
    B: np.ndarray  # (h, M)
    c: np.ndarray  # (M,)
    F: FisherOperator | DenseFisher
    delta: float
    labels: list[str] = field(default_factory=list)
    mean_reward: float = float("nan")
    failed_samples: int = 0

    @classmethod
    def from_dense(cls, a, B, c, F, delta) -> "QcqpData":
        a = np.asarray(a, dtype=float)
        B = np.asarray(B, dtype=float).reshape(len(a), -1)
        return cls(a, B, np.asarray(c, dtype=float).reshape(-1), DenseFisher(np.asarray(F, dtype=float)), float(delta))


@dataclass
class QcqpStep:
    step: np.ndarray
    mode: str  # "natural", "dual", "recovery", "zero"
    nu: np.ndarray
    dual_history: list[float]
    predicted_gain: float
    constraint_after: np.ndarray  # B^T x + c

    @property
    def recovery(self) -> bool:
        return self.mode == "recovery"


def _barrier(f, A, b, n_ball, delta, v0, stop=None, gap=1e-10):
    """Minimise f^T v s.t. A v < b and |v[:n_ball]|^2 < delta by a log-barrier path.

    ``v0`` must be strictly feasible. Returns the final point, the
    multipliers of the linear rows and of the ball, and one entry per
    centring step. ``stop(v)`` ends the path early.
    """
    v = np.array(v0, dtype=float)
    m = len(b) + 1
    t = 1.0
    path = []

    def slacks(v):
        return b - A @ v, delta - v[:n_ball] @ v[:n_ball]

    def merit(v, t):
        s, r = slacks(v)
        if np.any(s <= 0) or r <= 0:
            return np.inf
        return t * (f @ v) - np.sum(np.log(s)) - np.log(r)

    while True:
        for _ in range(200):
            s, r = slacks(v)
            grad = t * f + A.T @ (1.0 / s)
            grad[:n_ball] += 2 * v[:n_ball] / r
            H = (A.T * (1.0 / s**2)) @ A
            y = v[:n_ball]
            H[:n_ball, :n_ball] += 2 * np.eye(n_ball) / r + 4 * np.outer(y, y) / r**2
            try:
                step = -np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(H, grad, rcond=None)[0]
            dec = -grad @ step
            if dec / 2 <= 1e-14:
                break
            alpha, cur = 1.0, merit(v, t)
            while merit(v + alpha * step, t) > cur - 0.25 * alpha * dec:
                alpha *= 0.5
                if alpha < 1e-20:
                    break
            if alpha < 1e-20:
                break
            v = v + alpha * step
        s, r = slacks(v)
        nu, lam = 1.0 / (t * s), 1.0 / (t * r)
        path.append((v.copy(), nu, lam))
        if (stop is not None and stop(v)) or m / t < gap * max(1.0, abs(f @ v)):
            return v, nu, lam, path
        t *= 10.0


def _reduced(q: QcqpData):
    """Whitened coordinates of span(F^-1 [a, B]): x = F^-1 H Z y with |y|^2 = x^T F x."""
    H = np.column_stack([q.a, q.B])
    FiH = q.F.solve(H)
    K = H.T @ FiH
    K = 0.5 * (K + K.T)
    w, U = np.linalg.eigh(K)
    keep = w > max(w.max(initial=0.0), 0.0) * 1e-12
    root = np.sqrt(w[keep])
    R = U[:, keep] * root  # K Z = R, Z = U / root
    Z = U[:, keep] / root
    return FiH, R, Z


def solve_qcqp(q: QcqpData) -> QcqpStep:
    """Linear objective, linearised constraints and a quadratic trust region.

    Natural-gradient step when it already satisfies the linearised
    constraints. Otherwise the problem is restricted to the span of
    F^-1 [a, B], which contains the optimum, and solved there by a
    log-barrier path whose multipliers give the dual certificate. When no
    point inside the trust region strictly meets the linear rows, a pure
    constraint-reduction step along the most violated row is returned.
    """
    delta = float(q.delta)
    h = len(q.a)
    M = len(q.c)
    zero = np.zeros(h)
    if delta <= 0:
        return QcqpStep(zero, "zero", np.zeros(M), [], 0.0, q.c.copy())

    def finish(x, mode, nu, hist):
        quad = float(x @ q.F.apply(x))
        if quad > delta:
            x = x * np.sqrt(delta / quad)
        return QcqpStep(x, mode, nu, hist, float(q.a @ x), q.B.T @ x + q.c)

    Fia = q.F.solve(q.a)
    r = max(float(q.a @ Fia), 0.0)
    if r > 0:
        x_ng = np.sqrt(delta / r) * Fia
        if M == 0 or np.all(q.B.T @ x_ng + q.c <= 0):
            return finish(x_ng, "natural", np.zeros(M), [])
    elif np.all(q.c <= 0):
        return QcqpStep(zero, "zero", np.zeros(M), [], 0.0, q.c.copy())

    FiH, R, Z = _reduced(q)
    n = R.shape[1]
    g, C = R[0], R[1:]
    # phase 1: smallest common slack u with C y + c <= u inside the ball
    A1 = np.column_stack([C, -np.ones(M)])
    u0 = max(float(q.c.max()), 0.0) + 1.0
    f1 = np.zeros(n + 1)
    f1[-1] = 1.0
    v, *_ = _barrier(f1, A1, -q.c, n, delta, np.append(np.zeros(n), u0), stop=lambda v: v[-1] < -1e-9)
    if v[-1] >= -1e-9:
        j = int(np.argmax(q.c))
        b = q.B[:, j]
        Fib = q.F.solve(b)
        bb = float(b @ Fib)
        if bb <= 0 or q.c[j] <= 0:
            return QcqpStep(zero, "zero", np.zeros(M), [], 0.0, q.c.copy())
        nu = np.zeros(M)
        nu[j] = np.inf
        return finish(-np.sqrt(delta / bb) * Fib, "recovery", nu, [])
    _, _, _, path = _barrier(-g, C, -q.c, n, delta, v[:n])
    # keep the path while the dual bound improves; once rounding dominates it stops improving
    hist: list[float] = []
    best = 0
    for k, (_, nu_k, lam_k) in enumerate(path):
        val = -dual_value(q, nu_k, 2 * lam_k)  # the ball row is |y|^2 - delta, the dual uses half of it
        if hist and val < hist[-1]:
            break
        hist.append(val)
        best = k
    y, nu, _ = path[best]
    x = FiH @ (Z @ y)
    return finish(x, "dual", nu, hist)


def dual_value(q: QcqpData, nu: np.ndarray, lam: float) -> float:
    """Lagrangian dual (a - B nu)^T F^-1 (a - B nu) / (2 lam) + lam delta / 2 - c^T nu.

    ``lam`` multiplies the trust region written as (x^T F x - delta) / 2. Any
    lam > 0, nu >= 0 gives an upper bound on the optimum (weak duality).
    """
    w = q.a - q.B @ nu
    val = max(float(w @ q.F.solve(w)), 0.0)
    return float(val / (2 * lam) + lam * q.delta / 2 - q.c @ nu)


# ---------------------------------------------------------------------------
# Monte Carlo assembly


def constraint_gradients(
    model: ConstraintModel, out: GaussianOut, jac: PolicyJacobians
) -> tuple[np.ndarray, np.ndarray]:
    """Exact Gaussian expectation of C and its parameter gradient (h x M)."""
    mu, L = out.mu, out.L
    c = model.expectation(mu, out.cov)
    B = (model.A @ jac.dmu).T
    if model.bilinear:
        d = len(mu)
        dL = np.zeros((d, d, jac.dL.shape[1]))
        dL[jac.rows, jac.cols] = jac.dL
        for r, i, j in model.bilinear:
            g = mu[j] * jac.dmu[i] + mu[i] * jac.dmu[j]
            g = g + L[j] @ dL[i] + L[i] @ dL[j]  # d(L L^T)_ij
            B[:, r] = g
    return c, B


def estimate_qcqp(
    scenario: Scenario,
    layout: ActionLayout,
    spec: PolicySpec,
    params: PolicyParams,
    state: SystemState,
    n_samples: int,
    delta: float,
    rng: np.random.Generator,
    gamma: float = 0.9,
    antithetic: bool = False,
) -> QcqpData:
    """Assemble (a, B, c, F) at one state from ``n_samples`` reparametrised actions."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    s_vec = state_vector(scenario, state)
    out = forward(spec, params, s_vec)
    jac = jacobians(spec, params, s_vec)
    d = layout.dim
    g_sum = np.zeros(d)
    ge_sum = np.zeros((d, d))
    rewards = []
    failed = 0
    eps_all = rng.standard_normal((n_samples, d))
    if antithetic:
        half = (n_samples + 1) // 2
        eps_all = np.concatenate([eps_all[:half], -eps_all[:half]])[:n_samples]
    for eps in eps_all:
        a = sample(out, eps)
        try:
            outcome = rollout_window(scenario, state, layout, a)
            g = reward_gradient(scenario, layout, outcome, gamma)
        except (SensitivityError, PowerFlowError):
            failed += 1
            continue
        rewards.append(window_reward(scenario, layout, outcome, gamma))
        g_sum += g
        ge_sum += np.outer(g, eps)
    used = n_samples - failed
    if used == 0:
        raise SensitivityError("no Monte Carlo sample produced a reward gradient")
    g_bar = g_sum / used
    ge_bar = ge_sum / used
    a_vec = jac.dmu.T @ g_bar + jac.dL.T @ ge_bar[jac.rows, jac.cols]
    model = constraint_model(scenario, state, layout)
    c, B = constraint_gradients(model, out, jac)
    F = FisherOperator(fim_factor(spec, params, s_vec, jac))
    return QcqpData(a_vec, B, c, F, float(delta), list(model.labels), float(np.mean(rewards)), failed)


# ---------------------------------------------------------------------------
# training


@dataclass
class CpoConfig:
    episodes: int = 200
    n_samples: int = 40
    delta: float = 0.1
    gamma: float = 0.9
    seed: int = 0
    perturb: float = 0.05
    lookahead: int | None = None
    mean_hidden: tuple[int, ...] = (10, 10)
    factor_hidden: tuple[int, ...] = (20, 20)
    kl_limit: float = 1.5  # accepted KL, in units of delta
    max_backtracks: int = 10
    antithetic: bool = False


@dataclass
class TrainReport:
    episode_rewards: list[float] = field(default_factory=list)
    violation_norms: list[float] = field(default_factory=list)  # per update, ||max(c, 0)||
    recovery_steps: int = 0
    failed_updates: int = 0
    kl: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    modes: dict[str, int] = field(default_factory=dict)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "reward"])
        for i, r in enumerate(self.episode_rewards, start=1):
            w.writerow([i, repr(float(r))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def make_policy(
    scenario: Scenario, config: CpoConfig, rng: np.random.Generator
) -> tuple[ActionLayout, PolicySpec, PolicyParams]:
    layout = ActionLayout.for_scenario(scenario, config.lookahead)
    spec = PolicySpec(
        state_dim(scenario, layout.steps - 1), layout.dim, tuple(config.mean_hidden), tuple(config.factor_hidden)
    )
    lo, up = layout.ranges(scenario)
    params = init_params(spec, rng, action_scale=up - lo)
    return layout, spec, params


def policy_update(
    scenario: Scenario,
    layout: ActionLayout,
    spec: PolicySpec,
    params: PolicyParams,
    state: SystemState,
    config: CpoConfig,
    rng: np.random.Generator,
) -> tuple[PolicyParams, QcqpStep, float, QcqpData]:
    """One trust-region update at ``state``; the KL to the old policy is checked by backtracking."""
    q = estimate_qcqp(
        scenario, layout, spec, params, state, config.n_samples, config.delta, rng, config.gamma, config.antithetic
    )
    step = solve_qcqp(q)
    if not np.any(step.step):
        return params, step, 0.0, q
    s_vec = state_vector(scenario, state)
    old = forward(spec, params, s_vec)
    theta = params.flat
    x = step.step
    for _ in range(config.max_backtracks + 1):
        new = PolicyParams.from_flat(spec, theta + x)
        kl = gaussian_kl(forward(spec, new, s_vec), old)
        if np.isfinite(kl) and kl <= config.kl_limit * config.delta:
            return new, step, kl, q
        x = 0.5 * x
    return params, step, 0.0, q


def train(
    scenario: Scenario,
    config: CpoConfig,
    params: PolicyParams | None = None,
    progress=None,
    on_episode=None,
) -> tuple[PolicySpec, PolicyParams, TrainReport]:
    """Episodic training; theta is carried across episodes.

    ``progress(episode, reward)`` and ``on_episode(episode, spec, params)`` are
    called after every episode.
    """
    start = time.perf_counter()
    seeds = np.random.SeedSequence(config.seed)
    init_rng, *ep_seeds = [np.random.default_rng(s) for s in seeds.spawn(config.episodes + 1)]
    layout, spec, init = make_policy(scenario, config, init_rng)
    params = init if params is None else params.copy()
    env = RestorationEnv(scenario, config.gamma, layout.steps - 1)
    report = TrainReport()
    for ep, rng in enumerate(ep_seeds):
        state = env.reset(rng, config.perturb)
        total = 0.0
        while not env.done:
            s_vec = state_vector(scenario, state)
            out = forward(spec, params, s_vec)
            action = sample(out, rng.standard_normal(layout.dim))
            tr = env.step(action)
            total += tr.reward
            try:
                params, step, kl, q = policy_update(scenario, layout, spec, params, state, config, rng)
            except (SensitivityError, PowerFlowError, np.linalg.LinAlgError):
                report.failed_updates += 1
                report.kl.append(0.0)
            else:
                report.modes[step.mode] = report.modes.get(step.mode, 0) + 1
                report.recovery_steps += int(step.recovery)
                report.violation_norms.append(float(np.linalg.norm(np.maximum(q.c, 0.0))))
                report.kl.append(kl)
            state = tr.state
        report.episode_rewards.append(total)
        if progress is not None:
            progress(ep + 1, total)
        if on_episode is not None:
            on_episode(ep + 1, spec, params)
    report.wall_time = time.perf_counter() - start
    return spec, params, report


def evaluate(
    scenario: Scenario,
    spec: PolicySpec,
    params: PolicyParams,
    rng: np.random.Generator,
    gamma: float = 0.9,
    explore: bool = False,
    perturb: float = 0.0,
) -> tuple[RestorationLog, list[float], list[np.ndarray]]:
    """Run one episode; with ``explore=False`` the action is the policy mean."""
    lookahead = spec.action_dim // ActionLayout.for_scenario(scenario, 0).dim - 1
    env = RestorationEnv(scenario, gamma, lookahead)
    state = env.reset(rng, perturb)
    rewards, actions = [], []
    while not env.done:
        out = forward(spec, params, state_vector(scenario, state))
        a = sample(out, rng.standard_normal(spec.action_dim)) if explore else out.mu.copy()
        tr = env.step(a)
        rewards.append(tr.reward)
        actions.append(a)
        state = tr.state
    return env.log, rewards, actions
