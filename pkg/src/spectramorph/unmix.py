"""Endmember extraction by NNDSVD-initialized nonnegative matrix factorization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# land-cover class counts of the standard benchmark scenes
KNOWN_K = {
    "pavia_center": 9,
    "pavia_university": 9,
    "botswana": 14,
    "ksc": 13,
    "dc_mall": 7,
}


SOLVERS = ("hals", "mu")


@dataclass
class NmfOptions:
    """Stopping rule and solver for :func:`nmf`.

    ``solver="hals"`` runs column-wise coordinate descent with a safeguarded
    extrapolation step; ``solver="mu"`` runs plain Lee-Seung multiplicative
    updates. Both keep the recorded residual non-increasing.
    """

    max_iters: int = 500
    rel_tol: float = 1e-5
    seed: int = 0
    eps_floor: float = 1e-12
    solver: str = "hals"
    inner_sweeps: int = 10
    check_nonneg: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown NMF solver {self.solver!r}; choose from {SOLVERS}")


@dataclass(eq=False)
class NmfResult:
    weights: np.ndarray
    dictionary: np.ndarray
    residual: float
    iterations: int
    history: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.dictionary.shape[0]


def _check_input(pixels: np.ndarray, K: int) -> np.ndarray:
    Y = np.asarray(pixels, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError(f"pixel matrix must be 2-D, got shape {Y.shape}")
    if not 1 <= K <= min(Y.shape):
        raise ValueError(f"K={K} must lie in [1, min(N, C)] = [1, {min(Y.shape)}]")
    if np.any(Y < 0) or not np.all(np.isfinite(Y)):
        raise ValueError("NMF input must be finite and nonnegative")
    return Y


def relative_residual(Y: np.ndarray, W: np.ndarray, E: np.ndarray) -> float:
    norm = np.linalg.norm(Y)
    if norm == 0:
        return 0.0
    return float(np.linalg.norm(Y - W @ E) / norm)


def nndsvd_init(pixels: np.ndarray, K: int, eps_floor: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Nonnegative double SVD starting point ``(W0, E0)`` for an ``N x C`` matrix.

    The leading singular pair is taken in absolute value. Each further pair is
    split into positive and negative parts and the part with the larger norm
    product is kept, scaled by ``sqrt(sigma_t * norm_product)``. Exact zeros are
    lifted to ``eps_floor`` so multiplicative updates can move them.
    """
    Y = _check_input(pixels, K)
    U, S, Vt = np.linalg.svd(Y, full_matrices=False)
    N, C = Y.shape
    W = np.zeros((N, K))
    E = np.zeros((K, C))
    W[:, 0] = np.sqrt(S[0]) * np.abs(U[:, 0])
    E[0, :] = np.sqrt(S[0]) * np.abs(Vt[0, :])
    for t in range(1, K):
        x, y = U[:, t], Vt[t, :]
        xp, xn = np.maximum(x, 0), np.maximum(-x, 0)
        yp, yn = np.maximum(y, 0), np.maximum(-y, 0)
        xpn, xnn = np.linalg.norm(xp), np.linalg.norm(xn)
        ypn, ynn = np.linalg.norm(yp), np.linalg.norm(yn)
        mp, mn = xpn * ypn, xnn * ynn
        if mp >= mn:
            u, v, m = (xp / xpn, yp / ypn, mp) if mp > 0 else (xp, yp, 0.0)
        else:
            u, v, m = xn / xnn, yn / ynn, mn
        scale = np.sqrt(S[t] * m)
        W[:, t] = scale * u
        E[t, :] = scale * v
    W[W <= 0] = eps_floor
    E[E <= 0] = eps_floor
    return W, E


def _hals_sweeps(Y: np.ndarray, W: np.ndarray, E: np.ndarray, sweeps: int, floor: float) -> np.ndarray:
    """Update ``W`` column by column for ``min ||Y - W E||`` with ``E`` fixed."""
    YEt = Y @ E.T
    EEt = E @ E.T
    for _ in range(sweeps):
        for k in range(W.shape[1]):
            step = (YEt[:, k] - W @ EEt[:, k]) / max(EEt[k, k], floor)
            W[:, k] = np.maximum(floor, W[:, k] + step)
    return W


def _mu_step(Y, W, E, eps):
    W = W * ((Y @ E.T) / (W @ (E @ E.T) + eps))
    E = E * ((W.T @ Y) / ((W.T @ W) @ E + eps))
    return W, E


def _hals_step(Y, W, E, sweeps, floor):
    W = _hals_sweeps(Y, W.copy(), E, sweeps, floor)
    E = _hals_sweeps(Y.T, E.T.copy(), W.T, sweeps, floor).T
    return W, E


def nmf(pixels: np.ndarray, K: int, opts: Optional[NmfOptions] = None) -> NmfResult:
    """Factor ``Y ~ W E`` with ``W, E >= 0`` under the squared Frobenius loss.

    Starts from :func:`nndsvd_init`. Stops after ``opts.max_iters`` iterations
    or once the relative residual improves by less than ``opts.rel_tol`` of its
    previous value. With the HALS solver, each iteration also tries the
    extrapolated point ``X1 + beta (X1 - X0)`` and keeps it only when it lowers
    the residual, so the accepted sequence is monotone.
    """
    opts = opts or NmfOptions()
    Y = _check_input(pixels, K)
    floor = opts.eps_floor
    W, E = nndsvd_init(Y, K, floor)
    prev = relative_residual(Y, W, E)
    history = [prev]
    beta = 0.5
    it = 0
    for it in range(1, opts.max_iters + 1):
        if opts.solver == "mu":
            W1, E1 = _mu_step(Y, W, E, floor)
            res = relative_residual(Y, W1, E1)
        else:
            W1, E1 = _hals_step(Y, W, E, opts.inner_sweeps, floor)
            res = relative_residual(Y, W1, E1)
            We = np.maximum(floor, W1 + beta * (W1 - W))
            Ee = np.maximum(floor, E1 + beta * (E1 - E))
            res_e = relative_residual(Y, We, Ee)
            if res_e < res:
                W1, E1, res = We, Ee, res_e
                beta = min(2.0, beta * 1.2)
            else:
                beta = max(0.05, beta / 2.0)
        if res > prev:
            # rounding-level uptick at a stationary point: keep the better iterate
            history.append(prev)
            break
        W, E = W1, E1
        if opts.check_nonneg and (W.min() < 0 or E.min() < 0):
            raise AssertionError(f"negative factor entry at iteration {it}")
        history.append(res)
        done = prev == 0 or (prev - res) / prev < opts.rel_tol
        prev = res
        if done:
            break
    # a row pinned at the floor would leave an all-zero endmember
    E[E.max(axis=1) <= floor] = floor
    return NmfResult(W, E, prev, it, history)


def choose_k(dataset_tag: Optional[str] = None, k: Optional[int] = None) -> int:
    """Endmember count: an explicit ``k`` wins, else the scene's class count."""
    if k is not None:
        if k < 1:
            raise ValueError(f"K must be >= 1, got {k}")
        return int(k)
    if dataset_tag is None:
        raise ValueError("need a dataset tag or an explicit K")
    tag = dataset_tag.strip().lower().replace(" ", "_").replace("-", "_")
    if tag not in KNOWN_K:
        raise ValueError(f"unknown dataset {dataset_tag!r}; pass K explicitly")
    return KNOWN_K[tag]
