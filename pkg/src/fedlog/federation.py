"""Round orchestration for FedLog and the FedAvg / LG-FedAvg baselines.

Clients only ever hand the server a :class:`RoundMessage`; every message and
every broadcast goes through a byte-level serialization round trip so that
the reported traffic is what a wire would carry and the receiver sees values
at wire precision.

Wire format (little-endian)::

    u32 client_id | u32 count | u16 m | u16 n_class | u8 float_bits
    m * n_class IEEE-754 values (float32 or float64), class-major

"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from fedlog import expfam, nn, privacy
from fedlog.data import LabeledDataset
from fedlog.expfam import ProtocolError

log = logging.getLogger(__name__)

_HEADER = struct.Struct("<IIHHB")
HEADER_BITS = _HEADER.size * 8
_WIRE_DTYPES = {32: "<f4", 64: "<f8"}


@dataclass
class RoundMessage:
    client_id: int
    stat_sum: np.ndarray
    count: int

    def to_bytes(self, float_bits=64):
        if float_bits not in _WIRE_DTYPES:
            raise ValueError(f"float_bits must be 32 or 64, got {float_bits}")
        n_class, m = self.stat_sum.shape
        header = _HEADER.pack(self.client_id, self.count, m, n_class, float_bits)
        return header + np.asarray(self.stat_sum, dtype=_WIRE_DTYPES[float_bits]).tobytes()

    @classmethod
    def from_bytes(cls, data):
        client_id, count, m, n_class, float_bits = _HEADER.unpack_from(data, 0)
        if float_bits not in _WIRE_DTYPES:
            raise ProtocolError(f"unknown float width {float_bits}")
        expected = _HEADER.size + m * n_class * float_bits // 8
        if len(data) != expected:
            raise ProtocolError(f"message is {len(data)} bytes, header implies {expected}")
        values = np.frombuffer(data, dtype=_WIRE_DTYPES[float_bits], offset=_HEADER.size)
        return cls(client_id, values.astype(np.float64).reshape(n_class, m), count)


def transmit(message, float_bits):
    """Serialize and decode ``message``; returns ``(received, bits_on_wire)``."""
    raw = message.to_bytes(float_bits)
    return RoundMessage.from_bytes(raw), len(raw) * 8


def wire_cast(values, float_bits):
    """Values as a receiver sees them after transmission at ``float_bits``."""
    return np.asarray(values, dtype=_WIRE_DTYPES[float_bits]).astype(np.float64)


def message_size_bits(m, n_class, float_bits):
    """Payload bits of one head-sized message (header excluded)."""
    if m <= 0 or n_class <= 0 or float_bits <= 0:
        raise ValueError("arguments must be positive")
    return m * n_class * float_bits


@dataclass
class ClientState:
    id: int
    body: nn.BodyNetwork
    train: LabeledDataset
    test: LabeledDataset
    config: nn.TrainConfig
    rng: np.random.Generator
    noise_rng: np.random.Generator | None = None
    head: np.ndarray | None = None
    epoch_losses: list = field(default_factory=list)


@dataclass
class ServerState:
    head: np.ndarray
    prior: expfam.PriorParams | None = None
    round: int = 0
    map_tol: float = expfam.DEFAULT_TOL
    map_max_iters: int = expfam.DEFAULT_MAX_ITERS
    body: nn.BodyNetwork | None = None
    noise_rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.prior is not None and self.prior.chi.shape != self.head.shape:
            raise ValueError(f"prior shape {self.prior.chi.shape} != head shape {self.head.shape}")


@dataclass
class RoundReport:
    uplink_bits: dict
    downlink_bits: int
    map_iterations: int = 0
    map_converged: bool = True
    map_grad_norm: float = 0.0


def local_train(client, head, train_head=False):
    """Mini-batch training of the client's body against ``head``.

    With ``train_head`` the head is optimized jointly (baselines) and the
    trained copy is stored on ``client.head``; otherwise ``head`` is left
    untouched. Batches follow a fresh permutation from the client's
    generator every epoch; optimizer moments restart at every call.
    """
    cfg = client.config
    data = client.train
    client.epoch_losses = []
    if len(data) == 0:
        log.warning("client %d has no training data; skipping local training", client.id)
        return client
    head = np.array(head, dtype=np.float64, copy=True)
    params = client.body.parameters()
    if train_head:
        params = params + [head]
    state = nn.OptimizerState()
    n = len(data)
    for _ in range(cfg.local_epochs):
        order = client.rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads, ghead = nn.loss_and_gradients(
                client.body, data.inputs[idx], data.labels[idx], head, head_grad=train_head
            )
            if train_head:
                grads = grads + [ghead]
            nn.optimizer_step(params, grads, state, cfg)
            total += loss
        client.epoch_losses.append(total / n)
    if train_head:
        client.head = head
    return client


def summarize(client, privacy_params=None):
    """Summed sufficient statistics of the client's training features."""
    n_class = client.train.n_class
    features = nn.forward(client.body, client.train.inputs)
    stat = expfam.batch_statistic(features, client.train.labels, n_class)
    msg = RoundMessage(client.id, stat, len(client.train))
    if privacy_params is not None:
        _check_clamped(client, privacy_params)
        sigma = privacy.noise_sigma(privacy_params, client.body.feature_dim)
        rng = client.noise_rng if client.noise_rng is not None else privacy.noise_generator()
        msg = privacy.privatize(msg, sigma, rng)
    return msg


def _check_clamped(client, privacy_params):
    last = client.body.layers[-1]
    if last.activation != "clamp" or last.bound > privacy_params.clip_bound:
        raise nn.ConfigurationError(
            f"client {client.id}: private messages need a final clamp at most "
            f"{privacy_params.clip_bound}, body ends with {last.activation}({last.bound})"
        )


def _check_dims(server, clients):
    n_class, m = server.head.shape
    for client in clients:
        if client.body.feature_dim != m or client.train.n_class != n_class:
            raise ProtocolError(
                f"client {client.id} has {client.body.feature_dim} features and "
                f"{client.train.n_class} classes, server head is {n_class} x {m}"
            )


def _map(fn, items, executor):
    return list(executor.map(fn, items)) if executor is not None else [fn(c) for c in items]


def _broadcast_head(server, float_bits):
    msg = RoundMessage(0, server.head, 0)
    received, bits = transmit(msg, float_bits)
    return received.stat_sum, bits


def fedlog_round(server, clients, privacy_params=None, privacy_mode="local", float_bits=64, executor=None):
    """One global round: broadcast, local training, summaries, MAP update.

    ``privacy_mode="global"`` models a secure-aggregation deployment: clients
    send exact statistics and the server adds a single noise draw to their
    sum. No cryptography is simulated.
    """
    _check_dims(server, clients)
    head, down_bits = _broadcast_head(server, float_bits)
    local_privacy = privacy_params if privacy_mode == "local" else None

    def step(client):
        local_train(client, head)
        return transmit(summarize(client, local_privacy), float_bits)

    results = _map(step, clients, executor)
    shape = server.head.shape
    messages = []
    uplink = {}
    for client, (msg, bits) in zip(clients, results):
        if msg.stat_sum.shape != shape:
            raise ProtocolError(
                f"client {client.id} sent statistics of shape {msg.stat_sum.shape}, server expects {shape}"
            )
        messages.append(msg)
        uplink[client.id] = bits
    messages.sort(key=lambda msg: msg.client_id)
    posterior = expfam.posterior_update(server.prior, [(m.stat_sum, m.count) for m in messages])
    if privacy_params is not None and privacy_mode == "global":
        for client in clients:
            _check_clamped(client, privacy_params)
        sigma = privacy.noise_sigma(privacy_params, shape[1])
        rng = server.noise_rng if server.noise_rng is not None else privacy.noise_generator()
        posterior.chi = posterior.chi + rng.standard_normal(shape) * sigma
    # The first solve starts at the origin, later ones from the previous MAP head.
    init = server.head if server.round > 0 else None
    result = expfam.map_solve(posterior, init=init, tol=server.map_tol, max_iters=server.map_max_iters)
    if not result.converged:
        log.warning(
            "MAP stopped after %d iterations with gradient norm %.3g", result.iterations, result.grad_norm
        )
    server.head = result.eta
    server.round += 1
    return RoundReport(uplink, down_bits, result.iterations, result.converged, result.grad_norm)


def fedavg_aggregate(models, weights):
    """Entry-wise average of parameter lists, weighted by ``weights / sum``."""
    if not models:
        raise ProtocolError("nothing to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(models),) or np.any(weights < 0) or weights.sum() <= 0:
        raise ProtocolError("weights must be non-negative, one per model, with a positive sum")
    ref = models[0]
    for k, model in enumerate(models):
        if len(model) != len(ref) or any(np.shape(p) != np.shape(q) for p, q in zip(model, ref)):
            raise ProtocolError(f"model {k} does not match the shapes of model 0")
    share = weights / weights.sum()
    # Offsets from the first model keep identical inputs exactly fixed.
    out = []
    for i, base in enumerate(ref):
        base = np.asarray(base, dtype=np.float64)
        acc = np.zeros_like(base)
        for s, model in zip(share, models):
            acc += s * (np.asarray(model[i], dtype=np.float64) - base)
        out.append(base + acc)
    return out


def lgfedavg_round(server, clients, float_bits=64, executor=None):
    """LG-FedAvg with one global layer: local bodies, averaged linear head."""
    _check_dims(server, clients)
    head, down_bits = _broadcast_head(server, float_bits)

    def step(client):
        local_train(client, head, train_head=True)
        return transmit(RoundMessage(client.id, client.head, len(client.train)), float_bits)

    results = _map(step, clients, executor)
    uplink = {}
    heads, counts = [], []
    for client, (msg, bits) in sorted(zip(clients, results), key=lambda pair: pair[0].id):
        if msg.stat_sum.shape != server.head.shape:
            raise ProtocolError(f"client {client.id} sent a head of shape {msg.stat_sum.shape}")
        uplink[client.id] = bits
        heads.append([msg.stat_sum])
        counts.append(msg.count)
    if heads:
        server.head = fedavg_aggregate(heads, counts)[0]
    for client in clients:
        client.head = server.head.copy()
    server.round += 1
    return RoundReport(uplink, down_bits)


def _model_bits(n_values, float_bits):
    return HEADER_BITS + n_values * float_bits


def fedavg_round(server, clients, float_bits=64, executor=None):
    """FedAvg: every client trains the broadcast body and head; all are averaged."""
    if server.body is None:
        raise nn.ConfigurationError("FedAvg needs a global body on the server")
    global_params = [wire_cast(p, float_bits) for p in server.body.parameters()]
    head = wire_cast(server.head, float_bits)
    n_values = sum(p.size for p in global_params) + head.size
    for client in clients:
        local = client.body.parameters()
        if len(local) != len(global_params) or any(p.shape != q.shape for p, q in zip(local, global_params)):
            raise ProtocolError(f"client {client.id} body does not match the global architecture")

    def step(client):
        for p, q in zip(client.body.parameters(), global_params):
            p[...] = q
        local_train(client, head, train_head=True)
        return [wire_cast(p, float_bits) for p in client.body.parameters()] + [wire_cast(client.head, float_bits)]

    uploads = _map(step, clients, executor)
    order = sorted(range(len(clients)), key=lambda i: clients[i].id)
    if order:
        averaged = fedavg_aggregate([uploads[i] for i in order], [len(clients[i].train) for i in order])
        for p, q in zip(server.body.parameters(), averaged[:-1]):
            p[...] = q
        server.head = averaged[-1]
        for client in clients:
            for p, q in zip(client.body.parameters(), averaged[:-1]):
                p[...] = q
            client.head = server.head.copy()
    server.round += 1
    bits = _model_bits(n_values, float_bits)
    return RoundReport({c.id: bits for c in clients}, bits)


@dataclass
class Evaluation:
    per_client: dict
    mean: float | None

    def summary(self):
        vals = [v for v in self.per_client.values() if v is not None]
        if not vals:
            return None, None, None
        return float(np.mean(vals)), float(np.min(vals)), float(np.max(vals))


def evaluate(clients, head, split="test"):
    """Accuracy of each client's body under ``head``; mean weighted by sample count.

    Clients with an empty split are reported as ``None`` and left out of the mean.
    """
    per_client = {}
    correct = 0
    total = 0
    for client in clients:
        data = client.test if split == "test" else client.train
        if len(data) == 0:
            per_client[client.id] = None
            continue
        pred = expfam.predict(head, nn.forward(client.body, data.inputs))
        hits = int(np.sum(pred == data.labels))
        per_client[client.id] = hits / len(data)
        correct += hits
        total += len(data)
    return Evaluation(per_client, correct / total if total else None)
