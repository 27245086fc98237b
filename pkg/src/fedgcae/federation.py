"""FedAvg round loop (cloud side) and local SGD (edge side)."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from .data import ClientDataset
from .metrics import MetricsReport, compute_metrics
from .model import Network, get_arch, init_params
from .nn import sgd_step

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 8


@dataclass
class FedConfig:
    num_clients: int = 30
    clients_per_round: int = 5
    local_epochs: int = 5
    batch_size: int = 10
    learning_rate: float = 0.01
    lam: float = 0.01
    rounds: int = 500
    seed: int = 0
    arch: str = "gcae"
    eval_every: int = 10

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError(f"need 1 <= K <= N, got K={self.clients_per_round}, N={self.num_clients}")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")
        if self.learning_rate < 0 or self.lam < 0:
            raise ValueError("learning_rate and lam must be non-negative")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        get_arch(self.arch)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundLog:
    round: int
    selected: list[int]
    client_loss: dict[int, float]
    weights: dict[int, float]
    bytes_down: int
    bytes_up: int
    cumulative_bytes: int
    train_loss: float
    local_steps: int
    test_accuracy: float | None = None
    mean_user_accuracy: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["client_loss"] = {str(k): v for k, v in self.client_loss.items()}
        d["weights"] = {str(k): v for k, v in self.weights.items()}
        return json.dumps(d, sort_keys=True)


class TransportStub:
    """Plaintext stand-in for an encrypted channel: ``deliver(x) == x``."""

    mode = "plaintext"

    def deliver(self, params: np.ndarray) -> np.ndarray:
        return params


def payload_bytes(param_count: int, clients: int) -> int:
    """Bytes moved in one direction in one round."""
    return clients * param_count * BYTES_PER_PARAM


def epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class ClientStats:
    client_id: int
    n: int
    steps: int
    final_loss: float
    epoch_losses: list[float] = field(default_factory=list)


def client_update(client: ClientDataset, global_params, cfg: FedConfig, round_idx: int = 0,
                  net: Network | None = None) -> tuple[np.ndarray, ClientStats]:
    """E epochs of minibatch SGD on the combined loss, starting from the
    broadcast parameters.  Shuffles are keyed by (seed, round, client, epoch).
    """
    if len(client) == 0:
        raise ValueError(f"client {client.client_id} has no data")
    net = net or Network(cfg.arch)
    params = np.array(global_params, dtype=np.float64)
    losses = []
    steps = 0
    for epoch in range(cfg.local_epochs):
        rng = np.random.default_rng([cfg.seed, 101, round_idx, client.client_id, epoch])
        total = 0.0
        for idx in epoch_batches(len(client), cfg.batch_size, rng):
            res = net.loss_and_grad(params, client.X[idx], client.y[idx], cfg.lam)
            params = sgd_step(params, res.grad, cfg.learning_rate)
            total += res.loss * len(idx)
            steps += 1
        losses.append(total / len(client))
    return params, ClientStats(client.client_id, len(client), steps, losses[-1], losses)


def aggregate(updates) -> np.ndarray:
    """Sample-size weighted average of ``(params, n_k)`` pairs, accumulated in
    the order given."""
    updates = list(updates)
    if not updates:
        raise ValueError("nothing to aggregate")
    size = len(updates[0][0])
    total = 0
    for p, n in updates:
        if len(p) != size:
            raise ValueError(f"parameter length mismatch: {len(p)} vs {size}")
        if n <= 0:
            raise ValueError("client sample counts must be positive")
        total += n
    if total == 0:
        raise ValueError("zero total weight")
    out = np.zeros(size)
    for p, n in updates:
        out += (n / total) * np.asarray(p, dtype=np.float64)
    return out


def aggregate_exact(updates) -> list[Fraction]:
    """Rational-arithmetic reference for :func:`aggregate` (slow)."""
    updates = list(updates)
    total = sum(int(n) for _, n in updates)
    size = len(updates[0][0])
    out = [Fraction(0)] * size
    for p, n in updates:
        w = Fraction(int(n), total)
        for i, v in enumerate(p):
            out[i] += w * Fraction(float(v))
    return out


def sample_clients(cfg: FedConfig, round_idx: int, client_ids) -> list[int]:
    ids = sorted(client_ids)
    if cfg.clients_per_round >= len(ids):
        return ids
    rng = np.random.default_rng([cfg.seed, 202, round_idx])
    pick = rng.choice(len(ids), size=cfg.clients_per_round, replace=False)
    return sorted(ids[i] for i in pick)


def predict(net: Network, params, X, batch_size: int = 500) -> np.ndarray:
    return net.predict_proba(params, X, batch_size).argmax(axis=1)


def evaluate_global(net: Network, params, test_sets: list[ClientDataset]) -> MetricsReport:
    """Top-1 accuracy over all users' test samples, plus per-user accuracy."""
    if not test_sets or sum(len(t) for t in test_sets) == 0:
        raise ValueError("empty test set")
    preds, labels, users = [], [], []
    for t in test_sets:
        preds.append(predict(net, params, t.X))
        labels.append(t.y)
        users.append(t.user_ids)
    return compute_metrics(np.concatenate(preds), np.concatenate(labels), np.concatenate(users))


def run_federated(clients: list[ClientDataset], cfg: FedConfig, *, test_sets=None,
                  eval_hook: Callable | None = None, workers: int = 1, init=None,
                  log_path=None, transport: TransportStub | None = None, start_round: int = 0,
                  progress: bool = False):
    """Run ``cfg.rounds`` FedAvg rounds.  Returns ``(params, [RoundLog])``.

    Client updates of a round may run on ``workers`` threads; results are
    merged in client-id order so the outcome does not depend on scheduling.
    """
    if len(clients) != cfg.num_clients:
        raise ValueError(f"config expects {cfg.num_clients} clients, got {len(clients)}")
    by_id = {c.client_id: c for c in clients}
    if len(by_id) != len(clients):
        raise ValueError("client ids must be unique")
    net = Network(cfg.arch)
    transport = transport or TransportStub()
    params = init_params(cfg.arch, cfg.seed) if init is None else np.array(init, dtype=np.float64)
    per_dir = payload_bytes(net.param_count, cfg.clients_per_round)
    logs = []
    sink = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        sink = open(log_path, "a" if start_round else "w")
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(start_round, cfg.rounds):
            selected = sample_clients(cfg, t, by_id)
            sent = transport.deliver(params)

            def work(cid, sent=sent, t=t):
                try:
                    return client_update(by_id[cid], sent, cfg, t, Network(cfg.arch))
                except Exception as exc:
                    raise RuntimeError(f"client {cid} failed in round {t}: {exc}") from exc

            results = list(pool.map(work, selected)) if pool else [work(c) for c in selected]
            n_total = sum(st.n for _, st in results)
            params = aggregate((transport.deliver(p), st.n) for p, st in results)
            weights = {st.client_id: st.n / n_total for _, st in results}
            entry = RoundLog(
                round=t,
                selected=selected,
                client_loss={st.client_id: st.final_loss for _, st in results},
                weights=weights,
                bytes_down=per_dir,
                bytes_up=per_dir,
                cumulative_bytes=(t + 1) * 2 * per_dir,
                train_loss=float(sum(st.final_loss * st.n for _, st in results) / n_total),
                local_steps=sum(st.steps for _, st in results),
            )
            last = t == cfg.rounds - 1
            if test_sets is not None and (last or (cfg.eval_every and (t + 1) % cfg.eval_every == 0)):
                rep = evaluate_global(net, params, test_sets)
                entry.test_accuracy = rep.accuracy
                entry.mean_user_accuracy = rep.mean_user_accuracy
            if eval_hook is not None:
                eval_hook(t, params, entry)
            logs.append(entry)
            if sink:
                sink.write(entry.to_json() + "\n")
                sink.flush()
            if progress:
                acc = "" if entry.test_accuracy is None else f" acc={entry.test_accuracy:.4f}"
                log.info("round %d/%d loss=%.4f%s", t + 1, cfg.rounds, entry.train_loss, acc)
    finally:
        if pool:
            pool.shutdown()
        if sink:
            sink.close()
    return params, logs


def local_steps_per_round(n_k: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n_k / batch_size)
