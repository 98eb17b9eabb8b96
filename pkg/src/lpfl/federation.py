"""Simulated federated rounds: local training, FedAvg over trainable tensors, metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import wire
from .data import DatasetSplit, Example
from .model import FP, LP, MicroMLM, ModelConfig
from .prompting import PromptTask, accuracy_from_scores
from .semisup import AnnotationPolicy, AuditRecord, annotate_round, combine_patterns, gate

log = logging.getLogger(__name__)

ARMS = ("lp-fl", "fp-fl", "lp-ct", "fp-ct")


@dataclass(frozen=True)
class FLConfig:
    clients: int = 2
    rounds: int = 5
    local_epochs: int = 5
    batch_size: int = 8
    lr: float = 5e-5
    arm: str = "lp-fl"
    labeled_fraction: float = 0.01
    seed: int = 0
    optimizer: str = "adam"
    parallel_clients: int = 1

    @property
    def mode(self) -> str:
        return LP if self.arm.startswith("lp") else FP

    @property
    def centralized(self) -> bool:
        return self.arm.endswith("-ct")

    def violations(self) -> list[str]:
        out = []
        if self.arm not in ARMS:
            out.append(f"fl.arm: must be one of {', '.join(ARMS)}")
        for name in ("clients", "rounds", "batch_size", "parallel_clients"):
            if getattr(self, name) < 1:
                out.append(f"fl.{name}: must be a positive integer")
        if self.local_epochs < 0:
            out.append("fl.local_epochs: must be non-negative")
        if not self.lr > 0:
            out.append("fl.lr: must be positive")
        if not 0 < self.labeled_fraction < 1:
            out.append("fl.labeled_fraction: must lie in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            out.append("fl.optimizer: must be 'adam' or 'sgd'")
        if self.arm in ARMS and self.centralized and self.clients != 1:
            out.append(f"fl.clients: centralized arm {self.arm} requires clients=1, got {self.clients}")
        return out


@dataclass
class ClientState:
    id: int
    labeled: list[Example]
    unlabeled: list[Example]
    u_original: int
    annotated: int = 0

    @property
    def n_k(self) -> int:
        return len(self.labeled)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "u_original": self.u_original,
            "annotated": self.annotated,
            "labeled": [asdict(e) for e in self.labeled],
            "unlabeled": [asdict(e) for e in self.unlabeled],
        }

    @classmethod
    def from_json(cls, obj: dict) -> ClientState:
        def ex(d):
            soft = tuple(d["soft"]) if d["soft"] is not None else None
            return Example(d["id"], d["text"], d["label"], soft, d["origin"], d["annotated_round"])

        return cls(obj["id"], [ex(d) for d in obj["labeled"]], [ex(d) for d in obj["unlabeled"]], obj["u_original"], obj["annotated"])


@dataclass
class ClientRound:
    client: int
    train_loss: float
    bytes_up: int
    bytes_down: int
    labeled_count: int
    unlabeled_count: int
    annotated_now: int


@dataclass
class RoundMetrics:
    round: int
    clients: list[ClientRound]
    val_acc: float
    pattern_acc: list[float]
    gate_open: bool
    n_total: int

    @property
    def bytes_up(self) -> int:
        return sum(c.bytes_up for c in self.clients)

    @property
    def bytes_down(self) -> int:
        return sum(c.bytes_down for c in self.clients)

    @classmethod
    def from_json(cls, obj: dict) -> RoundMetrics:
        return cls(**{**obj, "clients": [ClientRound(**c) for c in obj["clients"]]})


@dataclass
class ServerState:
    params: dict[str, np.ndarray]
    round: int
    total_rounds: int
    pattern_weights: list[float]
    val_acc: float
    history: list[RoundMetrics] = field(default_factory=list)


# aggregation ------------------------------------------------------------------


def fedavg(updates: Sequence[tuple[dict[str, np.ndarray], int]]) -> dict[str, np.ndarray]:
    """Average each tensor over clients with weights ``n_k / sum(n_k)``."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    names = list(updates[0][0])
    for params, n_k in updates:
        if n_k <= 0:
            raise ValueError("client sample counts must be positive")
        if list(params) != names:
            raise ValueError("client updates carry different tensor sets")
        for k in names:
            if params[k].shape != updates[0][0][k].shape:
                raise nx.ShapeError(f"shape mismatch for {k} across clients")
    n = sum(n_k for _, n_k in updates)
    out = {}
    for k in names:
        # offsets from the first update keep identical inputs exact under rounding
        ref = updates[0][0][k]
        acc = np.zeros_like(ref)
        for params, n_k in updates[1:]:
            acc = acc + (n_k / n) * (params[k] - ref)
        out[k] = ref + acc
    return out


def fedavg_product(updates: Sequence[tuple[dict[str, np.ndarray], int]]) -> dict[str, np.ndarray]:
    """Diagnostic: weighted average of reconstructed ``B_k @ A_k`` per adapted matrix."""
    n = sum(n_k for _, n_k in updates)
    out: dict[str, np.ndarray] = {}
    for params, n_k in updates:
        for name in params:
            if not name.endswith(".lora_A"):
                continue
            stem = name[: -len(".lora_A")]
            delta = params[stem + ".lora_B"] @ params[name]
            out[stem] = out.get(stem, 0.0) + (n_k / n) * delta
    return out


# client side --------------------------------------------------------------------


def client_update(
    client: ClientState,
    model: MicroMLM,
    global_params: dict[str, np.ndarray],
    task: PromptTask,
    config: FLConfig,
    round_: int,
) -> tuple[dict[str, np.ndarray], float]:
    """E epochs of shuffled mini-batch training on ``T_k``; returns trainable tensors and last-epoch loss."""
    if not client.labeled:
        raise ValueError(f"client {client.id} has no labeled data")
    model.load_state(global_params)
    params = model.trainable_parameters()
    opt = nx.make_optimizer(config.optimizer, config.lr)
    rng = np.random.default_rng([config.seed, 1, client.id, round_])
    texts = [e.text for e in client.labeled]
    targets = np.stack([e.target(task.num_labels) for e in client.labeled])
    loss_value = math.nan
    for _ in range(config.local_epochs):
        order = rng.permutation(len(texts))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = task.loss(model, [texts[i] for i in idx], targets[idx])
            nx.optimizer_step(params, nx.backward(loss), opt)
            losses.append(loss.item())
        loss_value = float(np.mean(losses))
    return model.trainable_state(), loss_value


# server side --------------------------------------------------------------------


def evaluate(
    model: MicroMLM,
    task: PromptTask,
    examples: Sequence[Example],
    weights: Sequence[float] | None = None,
    combine: str = "softmax",
) -> tuple[list[float], float]:
    """Per-pattern accuracies and the ensemble accuracy on hard-labeled examples.

    The ensemble uses ``weights`` when given, else the per-pattern accuracies
    just measured (uniform if they are all zero).
    """
    texts = [e.text for e in examples]
    labels = [e.label for e in examples]
    raw = task.raw_scores(model, texts)
    per_pattern = [accuracy_from_scores(raw[i], labels) for i in range(len(task.patterns))]
    w = list(weights) if weights is not None else per_pattern
    if sum(w) <= 0:
        w = [1.0] * len(w)
    probs = np.exp(raw - raw.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    ens = combine_patterns(probs if combine == "softmax" else raw, w, combine)
    return per_pattern, accuracy_from_scores(ens, labels)


def _transmit(params: dict[str, np.ndarray], mode: str, meta: dict) -> tuple[dict[str, np.ndarray], int]:
    """Round-trip tensors through the wire format; returns what arrives and its data bytes."""
    payload = wire.pack(params, meta)
    received, _ = wire.unpack(payload)
    if mode == LP:
        for name in received:
            wire.parse_adapter_name(name)
    return received, wire.payload_nbytes(received)


def init_server(model: MicroMLM, task: PromptTask, validation: Sequence[Example], config: FLConfig, policy: AnnotationPolicy) -> ServerState:
    pattern_acc, val_acc = evaluate(model, task, validation, combine=policy.combine)
    return ServerState(model.trainable_state(), 0, config.rounds, pattern_acc, val_acc)


def run_round(
    server: ServerState,
    clients: list[ClientState],
    model: MicroMLM,
    replicas: list[MicroMLM],
    task: PromptTask,
    validation: Sequence[Example],
    config: FLConfig,
    policy: AnnotationPolicy,
    audit: Callable[[AuditRecord], None] | None = None,
) -> RoundMetrics:
    """One global round: annotate, train locally, upload, average, broadcast, re-evaluate."""
    if server.round >= server.total_rounds:
        raise RuntimeError("all rounds already completed")
    g = server.round + 1
    model.load_state(server.params)
    gate_open = gate(server.val_acc, policy)
    annotated_now = []
    for c in clients:
        rng = np.random.default_rng([config.seed, 2, c.id, g])
        records = annotate_round(c, model, task, server.pattern_weights, policy, g, server.total_rounds, rng, gate_open)
        annotated_now.append(len(records))
        if audit is not None:
            for r in records:
                audit(r)

    def train(i: int):
        try:
            return client_update(clients[i], replicas[i], server.params, task, config, g)
        except (nx.NonFiniteError, ValueError) as exc:
            raise RuntimeError(f"round {g}, client {clients[i].id}: {exc}") from exc

    if config.parallel_clients > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=config.parallel_clients) as pool:
            results = list(pool.map(train, range(len(clients))))
    else:
        results = [train(i) for i in range(len(clients))]

    updates, up_bytes = [], []
    for c, (params, _) in zip(clients, results):
        received, nbytes = _transmit(params, config.mode, {"client": c.id, "round": g})
        updates.append((received, c.n_k))
        up_bytes.append(nbytes)
    server.params = fedavg(updates)
    _, down = _transmit(server.params, config.mode, {"round": g})

    model.load_state(server.params)
    pattern_acc, val_acc = evaluate(model, task, validation, combine=policy.combine)
    server.pattern_weights, server.val_acc, server.round = pattern_acc, val_acc, g
    rows = [
        ClientRound(c.id, loss, up, down, len(c.labeled), len(c.unlabeled), a)
        for c, (_, loss), up, a in zip(clients, results, up_bytes, annotated_now)
    ]
    metrics = RoundMetrics(g, rows, val_acc, pattern_acc, gate_open, sum(c.n_k for c in clients))
    server.history.append(metrics)
    log.info("round %d: val_acc=%.4f labeled=%d gate=%s", g, val_acc, metrics.n_total, gate_open)
    return metrics


def comm_cost(config: FLConfig, model_config: ModelConfig) -> dict:
    """Exact per-round and total tensor-data bytes for a run."""
    lp = 8 * model_config.lp_parameter_count()
    fp = 8 * model_config.fp_parameter_count()
    payload = lp if config.mode == LP else fp
    up = config.clients * payload
    return {
        "payload_per_client": payload,
        "per_round_up": up,
        "per_round_down": up,
        "total": config.rounds * 2 * up,
        "lp_to_fp_ratio": lp / fp,
    }


@dataclass
class ExperimentResult:
    history: list[RoundMetrics]
    test_acc: float
    pattern_weights: list[float]
    server: ServerState
    clients: list[ClientState]
    audit: list[AuditRecord]


def make_clients(split: DatasetSplit) -> list[ClientState]:
    return [ClientState(k, list(t), list(u), len(u)) for k, (t, u) in enumerate(zip(split.labeled, split.unlabeled))]


def run_experiment(
    model: MicroMLM,
    split: DatasetSplit,
    task: PromptTask,
    config: FLConfig,
    policy: AnnotationPolicy = AnnotationPolicy(),
    on_round: Callable[[ServerState, list[ClientState]], None] | None = None,
    audit: Callable[[AuditRecord], None] | None = None,
    resume: tuple[ServerState, list[ClientState]] | None = None,
) -> ExperimentResult:
    """Run the remaining global rounds and score the final global model on the test set.

    Centralized arms are the single-client case of the same loop.
    """
    bad = config.violations() + policy.violations()
    if bad:
        raise ValueError("; ".join(bad))
    if split.num_clients != config.clients:
        raise ValueError(f"split has {split.num_clients} shards but config asks for {config.clients} clients")
    model.set_mode(config.mode)
    records: list[AuditRecord] = []

    def sink(r: AuditRecord) -> None:
        records.append(r)
        if audit is not None:
            audit(r)

    if resume is None:
        clients = make_clients(split)
        server = init_server(model, task, split.validation, config, policy)
    else:
        server, clients = resume
    replicas = [model.replica() for _ in clients]
    while server.round < server.total_rounds:
        run_round(server, clients, model, replicas, task, split.validation, config, policy, sink)
        if on_round is not None:
            on_round(server, clients)
    model.load_state(server.params)
    test = split.test or split.validation
    _, test_acc = evaluate(model, task, test, server.pattern_weights, policy.combine)
    return ExperimentResult(server.history, test_acc, server.pattern_weights, server, clients, records)


# persistence --------------------------------------------------------------------


def metrics_header(pattern_ids: Sequence[str]) -> list[str]:
    return (
        ["round", "client", "train_loss", "val_acc"]
        + [f"a_{p}" for p in pattern_ids]
        + ["bytes_up", "bytes_down", "labeled_count", "unlabeled_count"]
    )


def write_metrics_csv(path: str | Path, history: Sequence[RoundMetrics], pattern_ids: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(pattern_ids))
        for m in history:
            for c in m.clients:
                w.writerow(
                    [m.round, c.client, repr(c.train_loss), repr(m.val_acc)]
                    + [repr(a) for a in m.pattern_acc]
                    + [c.bytes_up, c.bytes_down, c.labeled_count, c.unlabeled_count]
                )


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def save_run_state(path: str | Path, model: MicroMLM, server: ServerState, clients: Sequence[ClientState]) -> None:
    """Round-boundary checkpoint: global model tensors plus server and client bookkeeping."""
    from .model import save_checkpoint

    state = {
        "round": server.round,
        "total_rounds": server.total_rounds,
        "pattern_weights": server.pattern_weights,
        "val_acc": server.val_acc,
        "history": [asdict(m) for m in server.history],
        "trainable": sorted(server.params),
        "clients": [c.to_json() for c in clients],
    }
    model.load_state(server.params)
    save_checkpoint(model, path, {"run_state": state})


def load_run_state(path: str | Path) -> tuple[MicroMLM, ServerState, list[ClientState]]:
    from .model import load_checkpoint

    model, meta = load_checkpoint(path)
    st = meta["run_state"]
    params = model.state(st["trainable"])
    server = ServerState(
        params,
        st["round"],
        st["total_rounds"],
        list(st["pattern_weights"]),
        st["val_acc"],
        [RoundMetrics.from_json(m) for m in st["history"]],
    )
    return model, server, [ClientState.from_json(c) for c in st["clients"]]


def audit_line(record: AuditRecord) -> str:
    return json.dumps(asdict(record))
