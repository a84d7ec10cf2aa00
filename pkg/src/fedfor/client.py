"""Local update rules run by a selected client within one round.

Each rule is minibatch SGD on the local cross-entropy plus a method-specific
gradient term. Rules whose extra term vanishes (zero weight, missing peer
statistics, first visit) take exactly the plain SGD path, so they reproduce
FedAvg bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import ModelSpec, loss_and_grad, mean_squared_sample_grad

METHODS = ("fedavg", "fedprox", "fedcurv", "fedpd", "scaffold", "fedfor")


class EmptyClientData(ValueError):
    """Raised when a selected client holds no samples."""


@dataclass(frozen=True)
class HyperParams:
    eta: float = 0.01
    alpha: float = 5.0
    E: int = 1
    B: int = 32
    K: int = 10

    def __post_init__(self) -> None:
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        for name in ("E", "B", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class BroadcastPayload:
    method: str
    current_global: np.ndarray
    prev_global: np.ndarray | None = None
    global_grad: np.ndarray | None = None
    fedcurv_fisher_sum: np.ndarray | None = None
    fedcurv_fisher_weighted_sum: np.ndarray | None = None
    first_round: bool = False

    def components(self) -> dict[str, int]:
        """Float count of every vector carried, keyed by component name."""
        names = ("current_global", "prev_global", "global_grad",
                 "fedcurv_fisher_sum", "fedcurv_fisher_weighted_sum")
        return {n: getattr(self, n).size for n in names if getattr(self, n) is not None}


@dataclass(frozen=True)
class ClientState:
    prev_local_grad: np.ndarray | None = None
    control_variate: np.ndarray | None = None
    fisher_diag: np.ndarray | None = None
    last_local_model: np.ndarray | None = None


GradTerm = Callable[[np.ndarray], np.ndarray]


def _epoch_order(n: int, seed, epoch: int) -> np.ndarray:
    return np.random.default_rng([*np.atleast_1d(seed).tolist(), epoch]).permutation(n)


def _sgd(start: np.ndarray, data, hp: HyperParams, spec: ModelSpec, seed,
         extra: GradTerm | None = None) -> np.ndarray:
    if len(data.labels) == 0:
        raise EmptyClientData("client has no samples")
    w = np.array(start, dtype=np.float64)
    x, y = data.features, data.labels
    n = len(y)
    for epoch in range(hp.E):
        order = _epoch_order(n, seed, epoch)
        for lo in range(0, n, hp.B):
            idx = order[lo:lo + hp.B]
            _, g = loss_and_grad(w, _View(x[idx], y[idx]), spec)
            if extra is not None:
                g = g + extra(w)
            w = w - hp.eta * g
    return w


@dataclass(frozen=True)
class _View:
    features: np.ndarray
    labels: np.ndarray


def full_grad(params: np.ndarray, data, spec: ModelSpec) -> np.ndarray:
    if len(data.labels) == 0:
        raise EmptyClientData("client has no samples")
    return loss_and_grad(params, data, spec)[1]


def local_update_fedavg(payload: BroadcastPayload, data, hp: HyperParams,
                        spec: ModelSpec, seed) -> np.ndarray:
    return _sgd(payload.current_global, data, hp, spec, seed)


# -- FedFOR -----------------------------------------------------------------

def _rectified_linear(coef: np.ndarray, disp: np.ndarray, rectify: bool):
    prod = coef * disp
    if not rectify:
        return float(prod.sum()), coef.copy()
    active = prod >= 0.0  # active at zero: the first local step is already steered
    return float(prod[active].sum()), np.where(active, coef, 0.0)


def fedfor_reg_term(w: np.ndarray, w_prev: np.ndarray, w_prevprev: np.ndarray,
                    alpha: float, eta: float, rectify: bool = True):
    """Penalty (alpha/eta) * sum_i U((w2_i - w1_i)(w_i - w1_i)) and its gradient.

    ``w_prev`` is the last global model, ``w_prevprev`` the one before it.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    coef = (alpha / eta) * (w_prevprev - w_prev)
    return _rectified_linear(coef, w - w_prev, rectify)


def fedfor_reg_from_direction(w: np.ndarray, w_prev: np.ndarray, direction: np.ndarray,
                              alpha: float, rectify: bool = True):
    """Same penalty, given the server-side direction (w2 - w1) / eta."""
    return _rectified_linear(alpha * direction, w - w_prev, rectify)


def local_update_fedfor(payload: BroadcastPayload, data, hp: HyperParams,
                        spec: ModelSpec, seed, rectify: bool = True) -> np.ndarray:
    w1 = payload.current_global
    if payload.prev_global is not None:
        def term(w):
            return fedfor_reg_term(w, w1, payload.prev_global, hp.alpha, hp.eta, rectify)[1]
    elif payload.global_grad is not None:
        def term(w):
            return fedfor_reg_from_direction(w, w1, payload.global_grad, hp.alpha, rectify)[1]
    else:
        term = None
    if hp.alpha == 0 or hp.eta == 0:
        term = None  # alpha/eta is undefined at eta = 0, and the step is zero anyway
    return _sgd(w1, data, hp, spec, seed, term)


# -- FedProx / FedPD --------------------------------------------------------

def prox_penalty(w: np.ndarray, center: np.ndarray, alpha: float) -> float:
    diff = w - center
    return 0.5 * alpha * float(diff @ diff)


def prox_grad(w: np.ndarray, center: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * (w - center)


def local_update_fedprox(payload: BroadcastPayload, data, hp: HyperParams,
                         spec: ModelSpec, seed) -> np.ndarray:
    center = payload.current_global
    term = (lambda w: prox_grad(w, center, hp.alpha)) if hp.alpha != 0 else None
    return _sgd(center, data, hp, spec, seed, term)


def fedpd_penalty(w: np.ndarray, center: np.ndarray, prev_local_grad: np.ndarray,
                  alpha: float) -> float:
    return float(prev_local_grad @ w) + prox_penalty(w, center, alpha)


def local_update_fedpd(payload: BroadcastPayload, data, hp: HyperParams, spec: ModelSpec,
                       seed, state: ClientState | None = None):
    """Linear term from the client's previous local gradient plus a proximal term.

    Without a stored gradient this is exactly FedProx.
    """
    g_prev = state.prev_local_grad if state is not None else None
    if g_prev is None:
        w = local_update_fedprox(payload, data, hp, spec, seed)
    else:
        center = payload.current_global

        def term(w):
            return g_prev + prox_grad(w, center, hp.alpha)
        w = _sgd(center, data, hp, spec, seed, term)
    return w, ClientState(prev_local_grad=full_grad(w, data, spec), last_local_model=w)


# -- FedCurv ----------------------------------------------------------------

def compute_fisher_diag(params: np.ndarray, data, spec: ModelSpec) -> np.ndarray:
    if len(data.labels) == 0:
        raise ValueError("fisher information needs at least one sample")
    return mean_squared_sample_grad(params, data, spec)


def fedcurv_penalty(w: np.ndarray, fisher_sum: np.ndarray, weighted_sum: np.ndarray,
                    alpha: float) -> float:
    """alpha * sum_j (w - w_j)^T diag(I_j) (w - w_j), dropping the w-free constant."""
    return alpha * float(fisher_sum @ (w * w) - 2.0 * weighted_sum @ w)


def fedcurv_grad(w: np.ndarray, fisher_sum: np.ndarray, weighted_sum: np.ndarray,
                 alpha: float) -> np.ndarray:
    return 2.0 * alpha * (fisher_sum * w - weighted_sum)


def local_update_fedcurv(payload: BroadcastPayload, data, hp: HyperParams,
                         spec: ModelSpec, seed):
    F, G = payload.fedcurv_fisher_sum, payload.fedcurv_fisher_weighted_sum
    active = F is not None and G is not None and hp.alpha != 0 and (F.any() or G.any())
    term = (lambda w: fedcurv_grad(w, F, G, hp.alpha)) if active else None
    w = _sgd(payload.current_global, data, hp, spec, seed, term)
    return w, compute_fisher_diag(w, data, spec)


# -- SCAFFOLD ---------------------------------------------------------------

def scaffold_correction(client_variate: np.ndarray | None,
                        global_variate: np.ndarray | None) -> np.ndarray | None:
    """c - c_k, or None when both are absent."""
    if client_variate is None and global_variate is None:
        return None
    if client_variate is None:
        return np.array(global_variate, dtype=np.float64)
    if global_variate is None:
        return -client_variate
    return global_variate - client_variate


def local_update_scaffold(payload: BroadcastPayload, data, hp: HyperParams,
                          spec: ModelSpec, seed, state: ClientState | None = None):
    """SGD with the drift correction (c - c_k) added to every minibatch gradient.

    The refreshed c_k is the full local gradient at the received global model.
    """
    c_k = state.control_variate if state is not None else None
    corr = scaffold_correction(c_k, payload.global_grad)
    term = (lambda w: corr) if corr is not None and corr.any() else None
    w = _sgd(payload.current_global, data, hp, spec, seed, term)
    new_c_k = full_grad(payload.current_global, data, spec)
    return w, ClientState(control_variate=new_c_k)
