"""Single (method, seed) experiment runs."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .client import HyperParams
from .config import ExperimentConfig
from .data import (Dataset, LabelMap, ShiftConfig, apply_covariate_shift, concept_shift_step,
                   gen_synthetic, load_table, partition_prior_shift)
from .metrics import RunHistory
from .nn import ModelSpec, init_model
from .server import ClientPool, ServerOptions, init_server_state, run_round

log = logging.getLogger(__name__)


def shift_config(cfg: ExperimentConfig) -> ShiftConfig:
    return ShiftConfig(imbalance_ratio=cfg.imbalance_ratio, sample_fraction=cfg.sample_fraction,
                       concept_shift_prob=cfg.concept_shift_prob,
                       concept_shift_mode=cfg.concept_shift_mode,
                       covariate_bias_scale=cfg.covariate_bias_scale)


def model_spec(cfg: ExperimentConfig, dim: int, n_classes: int) -> ModelSpec:
    return ModelSpec((dim, *cfg.hidden_sizes, n_classes), has_norm_layer=cfg.norm_layer)


def split_train_val(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-class split so both halves stay class-balanced when the input is."""
    rng = np.random.default_rng([seed, 5])
    train_idx, val_idx = [], []
    for c in range(dataset.n_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        n_val = int(round(len(idx) * val_fraction))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return (dataset.subset(np.sort(np.concatenate(train_idx))),
            dataset.subset(np.sort(np.concatenate(val_idx))))


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    if cfg.data_path:
        return split_train_val(load_table(cfg.data_path), cfg.val_fraction, seed)
    train = gen_synthetic(cfg.n_classes, cfg.dim, cfg.n_per_class, seed, split=0)
    val = gen_synthetic(cfg.n_classes, cfg.dim, cfg.n_val_per_class, seed, split=1)
    return train, val


class FederatedData:
    """Client shards and the validation set under the configured shift.

    Shards are pure functions of (seed, client id); the current label map is
    applied on every access so concept shift reaches all clients at once.
    """

    def __init__(self, train: Dataset, val: Dataset, shift: str, cfg: ShiftConfig,
                 seed: int, n_domains: int = 1):
        self.train, self.val = train, val
        self.shift, self.cfg, self.seed = shift, cfg, seed
        self.n_domains = n_domains
        self.label_map = LabelMap(train.n_classes)

    def base_shard(self, client_id: int) -> Dataset:
        client_seed = [self.seed, 2, client_id]
        if self.shift == "prior":
            return partition_prior_shift(self.train, client_seed, self.cfg, client_id)
        flat = replace(self.cfg, imbalance_ratio=1.0)
        shard = partition_prior_shift(self.train, client_seed, flat, client_id)
        if self.shift == "covariate":
            shard = apply_covariate_shift(shard, client_id % self.n_domains, self.cfg)
        return shard

    def client_data(self, client_id: int, round_: int) -> Dataset:
        return self.label_map.apply(self.base_shard(client_id))

    def validation(self, round_: int) -> Dataset:
        val = self.val
        if self.shift == "covariate":
            parts = [apply_covariate_shift(val, k, self.cfg) for k in range(self.n_domains)]
            val = Dataset(np.concatenate([p.features for p in parts]),
                          np.concatenate([p.labels for p in parts]), val.n_classes)
        return self.label_map.apply(val)


def simulate(cfg: ExperimentConfig, method: str, seed: int):
    """Yield (ServerState, RoundRecord) after each of the T rounds."""
    try:
        train, val = load_data(cfg, seed)
    except (OSError, ValueError) as exc:
        raise RuntimeError(f"{method}, seed {seed}, loading data: {exc}") from exc
    scfg = shift_config(cfg)
    data = FederatedData(train, val, cfg.shift, scfg, seed, cfg.n_domains)
    spec = model_spec(cfg, train.dim, train.n_classes)
    hp = HyperParams(eta=cfg.lr, alpha=cfg.method_alpha(method), E=cfg.local_epochs,
                     B=cfg.batch_size, K=cfg.clients_per_round)
    pool = ClientPool(cfg.mode, cfg.pool_size, seed)
    options = ServerOptions(weighted_aggregation=cfg.weighted_aggregation, fedbn=cfg.fedbn,
                            scaffold_zero_variates=cfg.scaffold_zero_variates)
    state = init_server_state(init_model(spec, seed), method)
    forced = set(cfg.concept_shift_rounds)
    for t in range(1, cfg.rounds + 1):
        # an explicit schedule replaces the per-round coin flips
        if forced:
            if t in forced:
                rng = np.random.default_rng([seed, 7, t])
                data.label_map = concept_shift_step(data.label_map, t, scfg, rng, force=True)
        elif cfg.concept_shift_prob > 0:
            rng = np.random.default_rng([seed, 7, t])
            data.label_map = concept_shift_step(data.label_map, t, scfg, rng)
        try:
            state, record = run_round(state, pool, method, hp, spec, data, options)
        except Exception as exc:
            raise RuntimeError(f"{method}, seed {seed}, round {t}: {exc}") from exc
        log.debug("%s seed=%d round=%d acc=%.4f", method, seed, t, record.val_acc)
        yield state, record


def run_single(cfg: ExperimentConfig, method: str, seed: int) -> RunHistory:
    """T rounds of ``method`` with master seed ``seed``."""
    history = RunHistory(method, seed, cfg.digest)
    for _, record in simulate(cfg, method, seed):
        history.append(record)
    return history
