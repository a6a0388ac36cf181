"""In-process federated averaging simulator.

Clients own disjoint shards of the training matrix.  Each round the server
samples clients, every sampled client trains a private copy of the global model
on its shard, and the server replaces the global model by the sample-weighted
mean of the returned parameters.  Only parameters, sample counts and scalar
metrics cross the client boundary; see :class:`ClientUpdate`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as M
from .errors import ConfigError, ParameterError, ProtocolError

log = logging.getLogger(__name__)


@dataclass
class ClientShard:
    client_id: int
    data: object  # FeatureMatrix; never serialized

    @property
    def n_samples(self):
        return len(self.data.y)


@dataclass
class ClientUpdate:
    """The only message a client sends to the server."""

    client_id: int
    params: dict
    n_samples: int
    metrics: dict = field(default_factory=dict)

    def to_message(self):
        return {
            "client_id": self.client_id,
            "n_samples": self.n_samples,
            "metrics": self.metrics,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }


@dataclass
class RoundRecord:
    round: int
    clients: list
    client_metrics: dict
    global_metrics: dict
    bytes_exchanged: int
    degraded: bool = False
    failed_clients: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class FedConfig:
    n_clients: int = 4
    scheme: str = "iid"
    alpha: float = 0.5
    rounds: int = 10
    clients_per_round: int | None = None
    local_epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.scheme not in ("iid", "label-skew"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "label-skew" and not self.alpha > 0:
            raise ConfigError("Dirichlet alpha must be > 0")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        cpr = self.clients_per_round
        if cpr is not None and not 1 <= cpr <= self.n_clients:
            raise ConfigError("clients_per_round must lie in [1, n_clients]")


# ---------------------------------------------------------------------------
# partitioning


def _largest_remainder(weights, total):
    exact = np.asarray(weights, dtype=np.float64) * total / np.sum(weights)
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition(data, n_clients, scheme="iid", alpha=0.5, seed=0, max_draws=100):
    """Split ``data`` into disjoint client shards covering every row.

    ``iid`` deals each class's shuffled rows round-robin; ``label-skew`` gives each
    class a Dirichlet(alpha) allocation over clients.  Rows inside a shard keep
    their original order, so a single client receives the input unchanged.
    """
    n = len(data.y)
    if n_clients < 1:
        raise ParameterError("n_clients must be >= 1")
    if n_clients > n:
        raise ParameterError(f"{n_clients} clients requested for only {n} rows")
    rng = np.random.default_rng(seed)
    classes = np.unique(data.y)
    for _ in range(max_draws):
        owner = np.empty(n, dtype=np.int64)
        if scheme == "iid":
            offset = 0
            for cls in classes:
                idx = rng.permutation(np.flatnonzero(data.y == cls))
                owner[idx] = (offset + np.arange(idx.size)) % n_clients
                offset += idx.size
        elif scheme == "label-skew":
            if not alpha > 0:
                raise ParameterError("Dirichlet alpha must be > 0")
            for cls in classes:
                idx = rng.permutation(np.flatnonzero(data.y == cls))
                counts = _largest_remainder(rng.dirichlet(np.full(n_clients, float(alpha))), idx.size)
                owner[idx] = np.repeat(np.arange(n_clients), counts)
        else:
            raise ParameterError(f"unknown partition scheme {scheme!r}")
        sizes = np.bincount(owner, minlength=n_clients)
        if sizes.min() >= 1:
            return [ClientShard(k, data.subset(np.flatnonzero(owner == k))) for k in range(n_clients)]
    raise ParameterError(f"could not give every one of {n_clients} clients a row after {max_draws} draws")


# ---------------------------------------------------------------------------
# client and server steps


def client_seed(base_seed, round_idx, client_id, n_clients):
    """Training seed for ``client_id`` in 1-based round ``round_idx``.

    Round 1 of client 0 uses ``base_seed`` itself, so a single-client federation
    shuffles and drops out exactly like centralized training with that seed.
    """
    return int(base_seed) + (round_idx - 1) * n_clients + client_id


def local_update(shard, global_model, local_epochs, train_config, seed=None):
    """Train a private copy of the global model on one shard.

    Returns ``(ClientUpdate, trained ModelParams)``; callers that speak to a
    server forward only the update.
    """
    if local_epochs == 0:
        local = global_model.copy()
        return ClientUpdate(shard.client_id, local.params, shard.n_samples, {}), local
    cfg = replace(train_config, epochs=local_epochs, seed=train_config.seed if seed is None else seed)
    trained, history = M.train(global_model, shard.data, None, cfg)
    last = history[-1] if history else {}
    metrics = {k: last.get(k) for k in ("train_loss", "train_accuracy")}
    return ClientUpdate(shard.client_id, trained.params, shard.n_samples, metrics), trained


def aggregate(updates, encode=None):
    """Sample-weighted parameter mean over ``updates``.

    Summation runs in client-id order, so the result does not depend on the order
    updates arrive in.  ``encode`` (e.g. a quantizer) is applied to each update's
    parameters before averaging.
    """
    if not updates:
        raise ProtocolError("aggregate needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    keys = list(ordered[0].params)
    for u in ordered:
        if list(u.params) != keys:
            raise ProtocolError(f"client {u.client_id} sent a different parameter set")
        for k in keys:
            if u.params[k].shape != ordered[0].params[k].shape:
                raise ProtocolError(f"client {u.client_id}: {k} has shape {u.params[k].shape}")
        if u.n_samples < 1:
            raise ProtocolError(f"client {u.client_id} reported {u.n_samples} samples")
    payloads = [encode(u.params) if encode else u.params for u in ordered]
    total = float(sum(u.n_samples for u in ordered))
    out = {}
    for k in keys:
        acc = np.zeros_like(payloads[0][k])
        lo = payloads[0][k].copy()
        hi = payloads[0][k].copy()
        for u, p in zip(ordered, payloads):
            acc += u.n_samples * p[k]
            np.minimum(lo, p[k], out=lo)
            np.maximum(hi, p[k], out=hi)
        # rounding can push the mean one ulp outside the convex hull
        out[k] = np.clip(acc / total, lo, hi)
    return out


def run_rounds(shards, init_model, fed_config, train_config, val_data=None, threshold=0.5, on_round=None):
    """Run ``fed_config.rounds`` rounds of FedAvg and return ``(global model, [RoundRecord])``."""
    n_clients = len(shards)
    cpr = fed_config.clients_per_round or n_clients
    if not 1 <= cpr <= n_clients:
        raise ConfigError("clients_per_round must lie in [1, number of shards]")
    sampler = np.random.default_rng(np.random.SeedSequence([fed_config.seed, 0x5A4D]))
    global_model = init_model.copy()
    by_id = {s.client_id: s for s in shards}
    records = []
    for r in range(1, fed_config.rounds + 1):
        if cpr == n_clients:
            chosen = sorted(by_id)
        else:
            chosen = sorted(int(c) for c in sampler.choice(sorted(by_id), size=cpr, replace=False))
        updates, failed, client_metrics = [], [], {}
        for cid in chosen:
            try:
                update, _ = local_update(by_id[cid], global_model, fed_config.local_epochs, train_config,
                                         seed=client_seed(train_config.seed, r, cid, n_clients))
            except Exception as exc:  # noqa: BLE001 - any client fault drops it from this round
                log.warning("round %d: client %d failed: %s", r, cid, exc)
                failed.append(cid)
                continue
            updates.append(update)
            client_metrics[str(cid)] = {"n_samples": update.n_samples, **update.metrics}
        if not updates:
            raise ProtocolError(f"round {r}: every sampled client failed")
        global_model.params = aggregate(updates)
        global_model.metadata["epochs"] = int(global_model.metadata.get("epochs", 0)) + fed_config.local_epochs
        global_metrics = {}
        if val_data is not None and len(val_data.y):
            terms, probs = M.evaluate_loss(global_model, val_data.X, np.asarray(val_data.y, dtype=np.float64))
            global_metrics = {"val_loss": terms.total,
                              "val_accuracy": float(np.mean((probs >= threshold) == (val_data.y == 1)))}
        per_direction = global_model.n_params * 8
        rec = RoundRecord(r, chosen, client_metrics, global_metrics, 2 * per_direction * len(chosen),
                          degraded=bool(failed), failed_clients=failed)
        records.append(rec)
        if on_round is not None:
            on_round(rec)
    return global_model, records
