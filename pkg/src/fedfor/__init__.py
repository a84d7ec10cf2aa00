"""Deterministic federated-learning simulator with a first-order client regularizer."""

from .client import METHODS, BroadcastPayload, ClientState, HyperParams
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .data import Dataset, LabelMap, ShiftConfig, gen_synthetic, load_table
from .harness import run_single, simulate
from .metrics import RunHistory, acc_at_x, best_acc_until, concept_shift_score, summarize
from .nn import ModelSpec, evaluate, init_model, loss_and_grad
from .server import ClientPool, ServerOptions, aggregate, init_server_state, run_round

__all__ = [
    "METHODS", "BroadcastPayload", "ClientState", "HyperParams",
    "ConfigError", "ExperimentConfig", "parse_config", "serialize_config",
    "Dataset", "LabelMap", "ShiftConfig", "gen_synthetic", "load_table",
    "run_single", "simulate",
    "RunHistory", "acc_at_x", "best_acc_until", "concept_shift_score", "summarize",
    "ModelSpec", "evaluate", "init_model", "loss_and_grad",
    "ClientPool", "ServerOptions", "aggregate", "init_server_state", "run_round",
]
