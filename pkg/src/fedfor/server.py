"""Server loop: client sampling, broadcast construction, aggregation, metering."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from . import client as co
from .client import BroadcastPayload, ClientState, EmptyClientData, HyperParams
from .nn import ModelSpec, evaluate, norm_layer_mask

log = logging.getLogger(__name__)

CROSS_DEVICE = "cross-device"
CROSS_SILO = "cross-silo"


@dataclass(frozen=True)
class ClientPool:
    mode: str = CROSS_DEVICE
    pool_size: int = 10  # roster size; ignored in cross-device mode
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in (CROSS_DEVICE, CROSS_SILO):
            raise ValueError(f"unknown pool mode {self.mode!r}")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


def sample_clients(pool: ClientPool, K: int, round_: int) -> list[int]:
    """K client ids for round ``round_`` (1-based), sorted ascending.

    Cross-device ids are fresh every round; cross-silo ids are drawn without
    replacement from the fixed roster.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if pool.mode == CROSS_DEVICE:
        return list(range((round_ - 1) * K, round_ * K))
    if K > pool.pool_size:
        raise ValueError(f"K={K} exceeds the cross-silo roster of {pool.pool_size}")
    rng = np.random.default_rng([pool.seed, 3, round_])
    return sorted(int(i) for i in rng.choice(pool.pool_size, size=K, replace=False))


class StateStore:
    """Per-client persistent state; counts every access."""

    def __init__(self) -> None:
        self._states: dict[int, ClientState] = {}
        self.accesses = 0

    def get(self, client_id: int) -> ClientState | None:
        self.accesses += 1
        return self._states.get(client_id)

    def put(self, client_id: int, state: ClientState) -> None:
        self.accesses += 1
        self._states[client_id] = state

    def __len__(self) -> int:
        return len(self._states)


class CommLedger:
    """Float counts sent each round, itemized by direction and payload component."""

    def __init__(self) -> None:
        self.rounds: dict[int, dict[str, dict[str, int]]] = {}

    def record(self, round_: int, direction: str, component: str, floats: int) -> None:
        entry = self.rounds.setdefault(round_, {"s2c": defaultdict(int), "c2s": defaultdict(int)})
        entry[direction][component] += floats

    def total(self, round_: int, direction: str) -> int:
        return sum(self.rounds.get(round_, {}).get(direction, {}).values())

    def cumulative(self, direction: str) -> int:
        return sum(self.total(r, direction) for r in self.rounds)


def ledger_report(ledger: CommLedger) -> list[dict]:
    """One row per round with S2C/C2S totals and the running cumulative totals."""
    rows = []
    cum = {"s2c": 0, "c2s": 0}
    for r in sorted(ledger.rounds):
        row = {"round": r}
        for direction in ("s2c", "c2s"):
            total = ledger.total(r, direction)
            cum[direction] += total
            row[direction] = total
            row[f"{direction}_cumulative"] = cum[direction]
            row[f"{direction}_items"] = dict(ledger.rounds[r][direction])
        rows.append(row)
    return rows


@dataclass
class ServerState:
    round: int  # completed rounds
    w_curr: np.ndarray
    w_prev: np.ndarray | None = None
    control_variate: np.ndarray | None = None
    fedcurv_sums: tuple[np.ndarray, np.ndarray] | None = None
    # last contribution (I_j, I_j * W_j) per client, kept only for cross-silo subtraction
    fedcurv_contrib: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    norm_param_mean: np.ndarray | None = None
    state_store: StateStore = field(default_factory=StateStore)
    ledger: CommLedger = field(default_factory=CommLedger)


def init_server_state(w0: np.ndarray, method: str) -> ServerState:
    if method not in co.METHODS:
        raise ValueError(f"unknown method {method!r}")
    d = len(w0)
    state = ServerState(round=0, w_curr=np.array(w0, dtype=np.float64))
    if method == "scaffold":
        state.control_variate = np.zeros(d)
    if method == "fedcurv":
        state.fedcurv_sums = (np.zeros(d), np.zeros(d))
    return state


@dataclass(frozen=True)
class ServerOptions:
    weighted_aggregation: bool = False
    fedbn: bool = False
    scaffold_zero_variates: bool = False


@dataclass(frozen=True)
class RoundRecord:
    round: int
    val_acc: float
    s2c_floats: int
    c2s_floats: int
    participants: tuple[int, ...]
    dropped: tuple[int, ...] = ()
    labelmap_version: int = 0


class DataProvider(Protocol):
    def client_data(self, client_id: int, round_: int): ...

    def validation(self, round_: int): ...


def build_broadcast(method: str, state: ServerState, client_id: int,
                    mode: str = CROSS_DEVICE, eta: float = 0.01) -> BroadcastPayload:
    """Payload for one client, carrying exactly what ``method`` needs this round."""
    first = state.w_prev is None
    w = state.w_curr
    if method in ("fedavg", "fedprox", "fedpd"):
        return BroadcastPayload(method, w, first_round=first)
    if method == "fedfor":
        if first:
            return BroadcastPayload(method, w, first_round=True)
        if mode == CROSS_DEVICE:
            return BroadcastPayload(method, w, prev_global=state.w_prev)
        return BroadcastPayload(method, w, global_grad=(state.w_prev - w) / eta)
    if method == "scaffold":
        return BroadcastPayload(method, w, global_grad=state.control_variate, first_round=first)
    if method == "fedcurv":
        if state.fedcurv_sums is None:
            return BroadcastPayload(method, w, first_round=True)
        F, G = state.fedcurv_sums
        own = state.fedcurv_contrib.get(client_id) if mode == CROSS_SILO else None
        if own is not None:
            F, G = F - own[0], G - own[1]
        return BroadcastPayload(method, w, fedcurv_fisher_sum=F,
                                fedcurv_fisher_weighted_sum=G, first_round=first)
    raise ValueError(f"unknown method {method!r}")


def aggregate(models, mask: np.ndarray | None = None, previous: np.ndarray | None = None,
              weights=None) -> np.ndarray:
    """Coordinate-wise mean of client models.

    Coordinates excluded by ``mask`` keep their value from ``previous``.
    ``weights`` switches to a weighted mean (e.g. by local data size).
    """
    models = [np.asarray(m, dtype=np.float64) for m in models]
    if not models:
        raise ValueError("nothing to aggregate")
    d = len(models[0])
    if any(m.shape != (d,) for m in models):
        raise ValueError("all models must have the same length")
    # mean of offsets from the first model keeps K identical models bit-exact
    offsets = np.stack(models) - models[0]
    if weights is None:
        out = models[0] + offsets.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        out = models[0] + (w[:, None] * offsets).sum(axis=0) / w.sum()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (d,):
            raise ValueError("mask length must match the model")
        if previous is None:
            raise ValueError("masked aggregation needs the previous global model")
        out = np.where(mask, out, previous)
    return out


STATEFUL_METHODS = ("fedpd", "scaffold", "fedcurv")


def _run_client(method, payload, data, hp, spec, seed, client_state):
    """Returns (model, new ClientState or None, fisher or None, control variate or None)."""
    if method == "fedavg":
        return co.local_update_fedavg(payload, data, hp, spec, seed), None, None, None
    if method == "fedprox":
        return co.local_update_fedprox(payload, data, hp, spec, seed), None, None, None
    if method == "fedfor":
        return co.local_update_fedfor(payload, data, hp, spec, seed), None, None, None
    if method == "fedpd":
        w, st = co.local_update_fedpd(payload, data, hp, spec, seed, client_state)
        return w, st, None, None
    if method == "scaffold":
        w, st = co.local_update_scaffold(payload, data, hp, spec, seed, client_state)
        return w, st, None, st.control_variate
    if method == "fedcurv":
        w, fisher = co.local_update_fedcurv(payload, data, hp, spec, seed)
        return w, ClientState(fisher_diag=fisher), fisher, None
    raise ValueError(f"unknown method {method!r}")


def run_round(state: ServerState, pool: ClientPool, method: str, hp: HyperParams,
              spec: ModelSpec, data_provider: DataProvider,
              options: ServerOptions = ServerOptions()) -> tuple[ServerState, RoundRecord]:
    t = state.round + 1
    silo = pool.mode == CROSS_SILO
    mask = norm_layer_mask(spec) if options.fedbn else None
    if options.scaffold_zero_variates and method == "scaffold":
        state = replace(state, control_variate=np.zeros_like(state.w_curr))

    ids = sample_clients(pool, hp.K, t)
    models, sizes, kept, dropped = [], [], [], []
    new_states: dict[int, ClientState] = {}
    fisher_out: dict[int, np.ndarray] = {}
    variates = []
    for cid in ids:
        payload = build_broadcast(method, state, cid, pool.mode, hp.eta)
        for name, floats in payload.components().items():
            state.ledger.record(t, "s2c", name, floats)
        prior = None
        if silo and (method in STATEFUL_METHODS or options.fedbn):
            prior = state.state_store.get(cid)
        if mask is not None and prior is not None and prior.last_local_model is not None:
            local_view = np.where(mask, payload.current_global, prior.last_local_model)
            payload = replace(payload, current_global=local_view)
        if options.scaffold_zero_variates:
            prior = None
        data = data_provider.client_data(cid, t)
        try:
            w, new_state, fisher, c_k = _run_client(
                method, payload, data, hp, spec, (pool.seed, cid, t), prior)
        except EmptyClientData:
            log.warning("round %d: client %d has no data, dropped", t, cid)
            dropped.append(cid)
            continue
        models.append(w)
        sizes.append(len(data.labels))
        kept.append(cid)
        state.ledger.record(t, "c2s", "local_model", w.size)
        if c_k is not None:
            state.ledger.record(t, "c2s", "control_variate", c_k.size)
            variates.append(c_k)
        if fisher is not None:
            fisher_out[cid] = fisher
        if silo:
            if options.fedbn:
                new_state = replace(new_state or ClientState(), last_local_model=w)
            if new_state is not None and (method in STATEFUL_METHODS or options.fedbn):
                new_states[cid] = new_state

    w_curr = state.w_curr
    norm_mean = state.norm_param_mean
    if models:
        w_new = aggregate(models, mask, w_curr, sizes if options.weighted_aggregation else None)
        if mask is not None:
            norm_mean = np.mean(models, axis=0)[~mask]
    else:
        w_new = w_curr.copy()

    control_variate = state.control_variate
    if method == "scaffold" and variates and not options.scaffold_zero_variates:
        control_variate = np.mean(variates, axis=0)

    fedcurv_sums, fedcurv_contrib = state.fedcurv_sums, state.fedcurv_contrib
    if method == "fedcurv" and fisher_out:
        contrib = {cid: (fisher_out[cid], fisher_out[cid] * models[kept.index(cid)])
                   for cid in kept}
        fedcurv_sums = (np.sum([c[0] for c in contrib.values()], axis=0),
                        np.sum([c[1] for c in contrib.values()], axis=0))
        fedcurv_contrib = contrib if silo else {}

    # state store is written only after the round has been reduced
    for cid in sorted(new_states):
        state.state_store.put(cid, new_states[cid])

    val = data_provider.validation(t)
    acc = evaluate(w_new, val, spec)
    record = RoundRecord(
        round=t,
        val_acc=acc,
        s2c_floats=state.ledger.total(t, "s2c"),
        c2s_floats=state.ledger.total(t, "c2s"),
        participants=tuple(kept),
        dropped=tuple(dropped),
        labelmap_version=getattr(getattr(val, "meta", None), "label_map_version", 0),
    )
    new_state = replace(state, round=t, w_curr=w_new, w_prev=w_curr,
                        control_variate=control_variate, fedcurv_sums=fedcurv_sums,
                        fedcurv_contrib=fedcurv_contrib, norm_param_mean=norm_mean)
    return new_state, record
