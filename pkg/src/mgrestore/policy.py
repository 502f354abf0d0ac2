"""Gaussian policy with a mean network and a Cholesky-factor network.

Both networks are tanh multilayer perceptrons with a linear output layer.
The factor network has d(d+1)/2 outputs that fill the lower triangle of L
row by row; diagonal entries go through softplus plus a floor so that
Sigma = L L^T stays positive definite. Jacobians are computed by
backpropagating every output through the network at once.

Parameter layout of one network: for each layer the weight matrix
(row-major, out x in) followed by the bias. The full vector is the mean
network parameters followed by the factor network parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

DIAG_FLOOR = 1e-6
FIM_DAMPING = 1e-8
CHECKPOINT_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class FnnSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(s[i + 1] * (s[i] + 1) for i in range(len(s) - 1))

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, pos = [], 0
        s = self.sizes
        for i in range(len(s) - 1):
            n_in, n_out = s[i], s[i + 1]
            W = theta[pos : pos + n_out * n_in].reshape(n_out, n_in)
            pos += n_out * n_in
            b = theta[pos : pos + n_out]
            pos += n_out
            out.append((W, b))
        return out


def mlp_forward(spec: FnnSpec, theta: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Outputs and the layer inputs (activations) needed for backpropagation."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.input_dim,):
        raise ValueError(f"input has shape {x.shape}, expected ({spec.input_dim},)")
    acts = [x]
    layers = spec.unpack(theta)
    h = x
    for i, (W, b) in enumerate(layers):
        z = W @ h + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def mlp_jacobian(spec: FnnSpec, theta: np.ndarray, x: np.ndarray, seed: np.ndarray | None = None) -> np.ndarray:
    """d(seed @ output)/d theta; with ``seed=None`` the full (out x n_params) Jacobian."""
    _, acts = mlp_forward(spec, theta, x)
    layers = spec.unpack(theta)
    delta = np.eye(spec.output_dim) if seed is None else np.atleast_2d(seed)
    blocks = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = acts[i]
        gW = delta[:, :, None] * h_in[None, None, :]
        blocks.append(np.concatenate([gW.reshape(delta.shape[0], -1), delta], axis=1))
        if i > 0:
            delta = (delta @ W) * (1.0 - acts[i] ** 2)
    return np.concatenate(blocks[::-1], axis=1)


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class PolicySpec:
    state_dim: int
    action_dim: int
    mean_hidden: tuple[int, ...] = (10, 10)
    factor_hidden: tuple[int, ...] = (20, 20)

    @property
    def mean_net(self) -> FnnSpec:
        return FnnSpec(self.state_dim, tuple(self.mean_hidden), self.action_dim)

    @property
    def factor_net(self) -> FnnSpec:
        d = self.action_dim
        return FnnSpec(self.state_dim, tuple(self.factor_hidden), d * (d + 1) // 2)

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.factor_net.n_params

    def tril(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major lower-triangle indices matching the factor network outputs."""
        return np.tril_indices(self.action_dim)


@dataclass
class PolicyParams:
    theta_mu: np.ndarray
    theta_sigma: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta_mu, self.theta_sigma])

    @classmethod
    def from_flat(cls, spec: PolicySpec, theta: np.ndarray) -> "PolicyParams":
        n = spec.mean_net.n_params
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {theta.shape}")
        return cls(theta[:n].copy(), theta[n:].copy())

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta_mu.copy(), self.theta_sigma.copy())


@dataclass
class GaussianOut:
    mu: np.ndarray
    L: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return self.L @ self.L.T


def _init_net(spec: FnnSpec, rng: np.random.Generator, scale: float) -> np.ndarray:
    parts = []
    s = spec.sizes
    for i in range(len(s) - 1):
        bound = scale / np.sqrt(s[i])
        parts.append(rng.uniform(-bound, bound, size=s[i + 1] * s[i]))
        parts.append(np.zeros(s[i + 1]))
    return np.concatenate(parts)


def init_params(
    spec: PolicySpec,
    rng: np.random.Generator,
    action_scale: np.ndarray | None = None,
    mean_bias: np.ndarray | None = None,
    weight_scale: float = 0.1,
    sigma_fraction: float = 0.05,
) -> PolicyParams:
    """Small uniform weights scaled by fan-in.

    Factor-network diagonal biases give an initial standard deviation of
    ``sigma_fraction * action_scale`` per coordinate; off-diagonal biases are
    zero. ``mean_bias`` sets the output bias of the mean network.
    """
    d = spec.action_dim
    theta_mu = _init_net(spec.mean_net, rng, weight_scale)
    theta_sigma = _init_net(spec.factor_net, rng, weight_scale)
    scale = np.ones(d) if action_scale is None else np.asarray(action_scale, dtype=float)
    if mean_bias is not None:
        theta_mu[-d:] = mean_bias
    n_tri = d * (d + 1) // 2
    rows, cols = spec.tril()
    diag = rows == cols
    bias = np.zeros(n_tri)
    bias[diag] = softplus_inv(np.maximum(sigma_fraction * scale - DIAG_FLOOR, 1e-9))
    theta_sigma[-n_tri:] = bias
    return PolicyParams(theta_mu, theta_sigma)


def forward(spec: PolicySpec, params: PolicyParams, state: np.ndarray) -> GaussianOut:
    mu, _ = mlp_forward(spec.mean_net, params.theta_mu, state)
    raw, _ = mlp_forward(spec.factor_net, params.theta_sigma, state)
    return GaussianOut(mu, _fill_factor(spec, raw))


def _fill_factor(spec: PolicySpec, raw: np.ndarray) -> np.ndarray:
    d = spec.action_dim
    rows, cols = spec.tril()
    vals = np.where(rows == cols, softplus(raw) + DIAG_FLOOR, raw)
    L = np.zeros((d, d))
    L[rows, cols] = vals
    return L


def sample(out: GaussianOut, epsilon: np.ndarray) -> np.ndarray:
    epsilon = np.asarray(epsilon, dtype=float)
    if epsilon.shape != out.mu.shape:
        raise ValueError(f"epsilon has shape {epsilon.shape}, expected {out.mu.shape}")
    return out.L @ epsilon + out.mu


@dataclass
class PolicyJacobians:
    """Jacobians of the mean and of the lower-triangle entries of L.

    ``dL`` has one row per entry of ``spec.tril()``; both matrices span the
    full parameter vector (mean parameters first).
    """

    dmu: np.ndarray  # (d, h)
    dL: np.ndarray  # (d(d+1)/2, h)
    rows: np.ndarray
    cols: np.ndarray

    def dvecL(self) -> np.ndarray:
        """Column-major vec(L) Jacobian, (d*d, h)."""
        d = self.dmu.shape[0]
        out = np.zeros((d * d, self.dL.shape[1]))
        out[self.rows + d * self.cols] = self.dL
        return out

    def dLeps(self, eps: np.ndarray) -> np.ndarray:
        """(eps^T kron I) dvecL / d theta = d(L eps)/d theta, (d, h)."""
        d = self.dmu.shape[0]
        out = np.zeros((d, self.dL.shape[1]))
        np.add.at(out, self.rows, self.dL * eps[self.cols][:, None])
        return out


def jacobians(spec: PolicySpec, params: PolicyParams, state: np.ndarray) -> PolicyJacobians:
    d = spec.action_dim
    n_mu = spec.mean_net.n_params
    n_sig = spec.factor_net.n_params
    jm = mlp_jacobian(spec.mean_net, params.theta_mu, state)
    raw, _ = mlp_forward(spec.factor_net, params.theta_sigma, state)
    rows, cols = spec.tril()
    js = mlp_jacobian(spec.factor_net, params.theta_sigma, state)
    diag = rows == cols
    js[diag] *= sigmoid(raw[diag])[:, None]
    dmu = np.concatenate([jm, np.zeros((d, n_sig))], axis=1)
    dL = np.concatenate([np.zeros((len(rows), n_mu)), js], axis=1)
    return PolicyJacobians(dmu, dL, rows, cols)


def fim_factor(spec: PolicySpec, params: PolicyParams, state: np.ndarray, jac: PolicyJacobians | None = None) -> np.ndarray:
    """G with F = G^T G (before damping).

    Rows are L^-1 dmu (mean term) followed by the lower-triangle entries of
    X + X^T with X = L^-1 dL (covariance term); off-diagonal entries carry a
    factor 1 (two symmetric copies times 1/sqrt 2 each), diagonal entries a
    factor 1/sqrt 2.
    """
    out = forward(spec, params, state)
    jac = jacobians(spec, params, state) if jac is None else jac
    d = spec.action_dim
    L = out.L
    assert np.all(np.diag(L) >= DIAG_FLOOR), "Cholesky diagonal below floor"
    Um = solve_triangular(L, jac.dmu, lower=True)
    h = jac.dL.shape[1]
    # columns of dL per parameter: dL_full[:, :, p]; X = L^-1 dL, only factor params are nonzero
    active = np.flatnonzero(np.any(jac.dL != 0.0, axis=0))
    dfull = np.zeros((d, d, len(active)))
    dfull[jac.rows, jac.cols] = jac.dL[:, active]
    X = solve_triangular(L, dfull.reshape(d, -1), lower=True).reshape(d, d, -1)
    S = X + X.transpose(1, 0, 2)
    rows, cols = spec.tril()
    weight = np.where(rows == cols, 1.0 / np.sqrt(2.0), 1.0)
    Us = np.zeros((len(rows), h))
    Us[:, active] = S[rows, cols] * weight[:, None]
    return np.vstack([Um, Us])


def fim(spec: PolicySpec, params: PolicyParams, state: np.ndarray, damping: float = FIM_DAMPING) -> np.ndarray:
    """Dense Fisher information of the Gaussian policy at one state, damped."""
    G = fim_factor(spec, params, state)
    F = G.T @ G
    F = 0.5 * (F + F.T)
    return F + damping * np.eye(F.shape[0])


def gaussian_kl(p: GaussianOut, q: GaussianOut) -> float:
    """KL(p || q) for multivariate normals given by mean and Cholesky factor."""
    d = len(p.mu)
    A = solve_triangular(q.L, p.L, lower=True)
    diff = solve_triangular(q.L, p.mu - q.mu, lower=True)
    logdet = 2 * (np.sum(np.log(np.diag(q.L))) - np.sum(np.log(np.diag(p.L))))
    return float(0.5 * (np.sum(A * A) + diff @ diff - d + logdet))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, spec: PolicySpec, params: PolicyParams, meta: dict | None = None) -> None:
    """Text checkpoint; floats are stored as hex strings for an exact round trip."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "state_dim": spec.state_dim,
        "action_dim": spec.action_dim,
        "mean_hidden": list(spec.mean_hidden),
        "factor_hidden": list(spec.factor_hidden),
        "theta": [float(v).hex() for v in params.flat],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[PolicySpec, PolicyParams, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    spec = PolicySpec(
        int(doc["state_dim"]),
        int(doc["action_dim"]),
        tuple(doc["mean_hidden"]),
        tuple(doc["factor_hidden"]),
    )
    theta = np.array([float.fromhex(v) for v in doc["theta"]])
    return spec, PolicyParams.from_flat(spec, theta), doc.get("meta", {})
