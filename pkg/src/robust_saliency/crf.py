"""Fully connected two-label CRF refined by unrolled mean-field iterations.

The pairwise potential between pixels i and j is

    mu(l, l') * [w1 * exp(-|p_i - p_j|^2 / 2 ta^2 - |g_i - g_j|^2 / 2 tb^2)
                 + w2 * exp(-|p_i - p_j|^2 / 2 tc^2)]

with positions p, guidance colors g (0-255 scale) and a learnable 2 x 2
compatibility matrix mu. Messages are exact dense sums over all j != i;
the optional ``window`` switches to a sparse approximation that drops
pairs further apart than ``window`` pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .core import ConfigError, DataError, ImageTensor

UNARY_FLOOR = 1e-8


def potts() -> np.ndarray:
    return np.array([[0.0, 1.0], [1.0, 0.0]])


@dataclass
class CrfParams:
    omega1: float = 1.0
    omega2: float = 1.0
    theta_alpha: float = 160.0
    theta_beta: float = 3.0
    theta_gamma: float = 3.0
    mu: np.ndarray = field(default_factory=potts)
    iters: int = 5
    window: int | None = None

    def __post_init__(self) -> None:
        self.mu = np.array(self.mu, dtype=np.float64).reshape(2, 2)
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ConfigError("CRF bandwidths must be positive")
        if self.iters < 1:
            raise ConfigError("CRF iters must be >= 1")
        if self.window is not None and self.window < 1:
            raise ConfigError("CRF window must be >= 1 pixel")

    def copy(self) -> "CrfParams":
        return CrfParams(self.omega1, self.omega2, self.theta_alpha, self.theta_beta,
                         self.theta_gamma, self.mu.copy(), self.iters, self.window)

    @property
    def neutral(self) -> bool:
        return self.omega1 == 0 and self.omega2 == 0


def pairwise_kernel(i: tuple[int, int], j: tuple[int, int], guidance: ImageTensor, params: CrfParams) -> float:
    """Kernel value k(i, j) for two pixels given as (row, col)."""
    pi = np.asarray(i, dtype=np.float64)
    pj = np.asarray(j, dtype=np.float64)
    d_pos = float(((pi - pj) ** 2).sum())
    d_col = float(((guidance.data[i] - guidance.data[j]) ** 2).sum())
    appearance = np.exp(-d_pos / (2 * params.theta_alpha ** 2) - d_col / (2 * params.theta_beta ** 2))
    smoothness = np.exp(-d_pos / (2 * params.theta_gamma ** 2))
    return float(params.omega1 * appearance + params.omega2 * smoothness)


# -- kernel construction


class SeparableGaussian:
    """Dense spatial Gaussian over an H x W grid with a zero diagonal.

    exp(-(dy^2 + dx^2) / 2 t^2) factorises into row and column Gaussians, so
    the product with an (N, L) matrix costs O(N (H + W)) instead of O(N^2)
    while summing over exactly the same pairs.
    """

    def __init__(self, h: int, w: int, theta: float):
        self.h, self.w = h, w
        self.rows = _gauss_1d(h, theta)
        self.cols = _gauss_1d(w, theta)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h * self.w, self.h * self.w)

    def __matmul__(self, q: np.ndarray) -> np.ndarray:
        labels = q.shape[1]
        img = q.reshape(self.h, self.w, labels)
        out = np.einsum("ab,bwl->awl", self.rows, img)
        out = np.einsum("cw,awl->acl", self.cols, out)
        return out.reshape(-1, labels) - q

    def toarray(self) -> np.ndarray:
        mat = np.kron(self.rows, self.cols)
        np.fill_diagonal(mat, 0.0)
        return mat


def _gauss_1d(n: int, theta: float) -> np.ndarray:
    d = np.arange(n)
    return np.exp(-((d[:, None] - d[None, :]) ** 2) / (2.0 * theta ** 2))


def _dense_appearance(guidance: np.ndarray, params: CrfParams) -> np.ndarray:
    h, w, c = guidance.shape
    yy, xx = np.divmod(np.arange(h * w), w)
    feats = np.column_stack([
        guidance.reshape(h * w, c) / (np.sqrt(2.0) * params.theta_beta),
        yy / (np.sqrt(2.0) * params.theta_alpha),
        xx / (np.sqrt(2.0) * params.theta_alpha),
    ])
    expo = cdist(feats, feats, "sqeuclidean")
    np.negative(expo, out=expo)
    np.exp(expo, out=expo)
    np.fill_diagonal(expo, 0.0)
    return expo


def _windowed_kernels(guidance: np.ndarray, params: CrfParams) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    h, w, c = guidance.shape
    r = int(params.window)
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, app, smo = [], [], [], []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d_pos = dy * dy + dx * dx
            if d_pos == 0 or d_pos > r * r:
                continue
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            if y0 >= y1 or x0 >= x1:
                continue
            src = idx[y0:y1, x0:x1].ravel()
            dst = idx[y0 + dy:y1 + dy, x0 + dx:x1 + dx].ravel()
            d_col = ((guidance[y0:y1, x0:x1] - guidance[y0 + dy:y1 + dy, x0 + dx:x1 + dx]) ** 2).sum(axis=2).ravel()
            rows.append(src)
            cols.append(dst)
            app.append(np.exp(-d_pos / (2 * params.theta_alpha ** 2) - d_col / (2 * params.theta_beta ** 2)))
            smo.append(np.full(len(src), np.exp(-d_pos / (2 * params.theta_gamma ** 2))))
    n = h * w
    if not rows:
        empty = sparse.csr_matrix((n, n))
        return empty, empty
    rows_a, cols_a = np.concatenate(rows), np.concatenate(cols)
    k1 = sparse.csr_matrix((np.concatenate(app), (rows_a, cols_a)), shape=(n, n))
    k2 = sparse.csr_matrix((np.concatenate(smo), (rows_a, cols_a)), shape=(n, n))
    return k1, k2


def kernel_matrices(guidance: ImageTensor, params: CrfParams):
    """Appearance and smoothness kernels (without the omega weights), zero diagonal.

    Both support ``kernel @ q`` for q of shape (N, labels).
    """
    if params.window is not None:
        return _windowed_kernels(guidance.data, params)
    h, w, _ = guidance.shape
    return _dense_appearance(guidance.data, params), SeparableGaussian(h, w, params.theta_gamma)


# -- inference


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _as_unary(unary: np.ndarray) -> np.ndarray:
    u = np.asarray(unary, dtype=np.float64)
    if u.ndim == 2:
        u = np.stack([1.0 - u, u], axis=-1)
    if u.ndim != 3 or u.shape[2] != 2:
        raise DataError(f"unary must be H x W or H x W x 2, got {u.shape}")
    if u.min() < 0 or u.max() > 1 or np.abs(u.sum(axis=2) - 1.0).max() > 1e-9:
        raise DataError("unary probabilities must lie in [0, 1] and sum to 1 per pixel")
    return u


@dataclass
class MeanFieldState:
    """Everything the backward pass needs from one forward call."""

    shape: tuple[int, int]
    probs: np.ndarray  # (N, 2) unary probabilities
    floored: np.ndarray  # (N, 2) bool, where the log floor was active
    k_app: object
    k_smooth: object
    q: list[np.ndarray]  # Q_0 .. Q_T, each (N, 2)
    msg_app: list[np.ndarray]  # K_app @ Q_{t-1} for t = 1..T
    msg_smooth: list[np.ndarray]
    params: CrfParams


@dataclass
class CrfGradients:
    unary: np.ndarray  # (H, W, 2)
    omega1: float
    omega2: float
    mu: np.ndarray

    @property
    def saliency(self) -> np.ndarray:
        """Gradient w.r.t. the salient probability s when unary = (1 - s, s)."""
        return self.unary[..., 1] - self.unary[..., 0]


def mean_field_infer(unary: np.ndarray, guidance: ImageTensor, params: CrfParams,
                     kernels=None, return_state: bool = False):
    """Refine a two-label unary field; returns the salient marginal (H x W).

    ``unary`` holds per-pixel label probabilities, either H x W x 2 or the
    salient channel alone. Unary energies are -log(max(p, 1e-8)); Q starts
    at the normalised unary and each iteration applies
    Q_i(l) ~ exp(-u_i(l) - sum_l' mu(l, l') sum_{j != i} k(i, j) Q_j(l')).
    """
    u = _as_unary(unary)
    h, w, _ = u.shape
    if guidance.shape[:2] != (h, w):
        raise DataError("guidance image does not match unary field")
    probs = u.reshape(-1, 2)
    floored = probs < UNARY_FLOOR
    logp = np.log(np.maximum(probs, UNARY_FLOOR))
    k_app, k_smooth = kernel_matrices(guidance, params) if kernels is None else kernels
    q = _softmax(logp)
    qs, m_app, m_smooth = [q], [], []
    for _ in range(params.iters):
        a = k_app @ q
        b = k_smooth @ q
        msg = params.omega1 * a + params.omega2 * b
        q = _softmax(logp - msg @ params.mu.T)
        qs.append(q)
        m_app.append(a)
        m_smooth.append(b)
    out = q[:, 1].reshape(h, w)
    if return_state:
        return out, MeanFieldState((h, w), probs, floored, k_app, k_smooth, qs, m_app, m_smooth, params.copy())
    return out


def mean_field_backward(state: MeanFieldState, upstream: np.ndarray) -> CrfGradients:
    """Backpropagate dLoss/dOutput through the unrolled iterations."""
    params = state.params
    if len(state.q) != params.iters + 1 or len(state.msg_app) != params.iters:
        raise DataError("saved state does not match the iteration count")
    g_out = np.asarray(upstream, dtype=np.float64)
    if g_out.shape != state.shape:
        raise DataError(f"upstream gradient {g_out.shape} does not match {state.shape}")
    n = g_out.size
    g_q = np.zeros((n, 2))
    g_q[:, 1] = g_out.ravel()
    g_logp = np.zeros((n, 2))
    g_w1 = 0.0
    g_w2 = 0.0
    g_mu = np.zeros((2, 2))
    for t in range(params.iters, 0, -1):
        q = state.q[t]
        g_z = q * (g_q - (g_q * q).sum(axis=1, keepdims=True))
        g_logp += g_z
        g_e = -g_z
        msg = params.omega1 * state.msg_app[t - 1] + params.omega2 * state.msg_smooth[t - 1]
        g_mu += g_e.T @ msg
        g_m = g_e @ params.mu
        g_w1 += float((g_m * state.msg_app[t - 1]).sum())
        g_w2 += float((g_m * state.msg_smooth[t - 1]).sum())
        # kernels are symmetric
        g_q = params.omega1 * (state.k_app @ g_m) + params.omega2 * (state.k_smooth @ g_m)
    q0 = state.q[0]
    g_logp += q0 * (g_q - (g_q * q0).sum(axis=1, keepdims=True))
    g_probs = np.where(state.floored, 0.0, g_logp / np.maximum(state.probs, UNARY_FLOOR))
    h, w = state.shape
    return CrfGradients(g_probs.reshape(h, w, 2), g_w1, g_w2, g_mu)
