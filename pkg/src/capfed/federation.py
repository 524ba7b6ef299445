"""Simulated multi-client training rounds with cluster exchange and aggregation.

Each round: every online client syncs the broadcast embedder, releases
sanitized (or noise-free) clusters of its class centers, receives everyone
else's clusters, locally optimizes the consensus loss, and the server
averages the returned embedders. Class centers never leave their client; the
server only ever holds embedder parameters and released cluster centers.

All randomness is drawn from streams keyed by (seed, purpose, round, client),
so runs replay identically whether clients execute serially or in parallel.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np

from . import clustering, dp, losses, synth
from .errors import (
    DomainError,
    EmptyShardError,
    ShapeMismatchError,
    ValidationError,
)
from .geometry import normalize_rows

MODE_PHI = "phi"  # conventional: no clusters exchanged
MODE_PHI_HAT = "phi-hat"  # sanitized clusters
MODE_PHI_P = "phi-p"  # noise-free clusters
RUN_MODES = (MODE_PHI, MODE_PHI_HAT, MODE_PHI_P)

_CLUSTER_MODE_FOR_RUN = {
    MODE_PHI_HAT: clustering.MODE_SANITIZED,
    MODE_PHI_P: clustering.MODE_NOISE_FREE,
}


def derive_rng(seed: int, *key) -> np.random.Generator:
    """Independent generator for one (purpose, round, client, ...) slot.

    Strings in the key are folded into integers so distinct purposes get
    distinct streams.
    """
    ints = [int(seed) & 0xFFFFFFFF]
    for part in key:
        if isinstance(part, str):
            ints.append(sum((i + 1) * b for i, b in enumerate(part.encode())) & 0xFFFFFFFF)
        else:
            ints.append(int(part) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(ints))


@dataclass(frozen=True)
class FederationConfig:
    """Everything one simulated training run needs besides the data and seed."""

    clients: int = 4
    rounds: int = 10
    mode: str = MODE_PHI_HAT
    clustering_params: clustering.ClusteringParams = field(
        default_factory=clustering.ClusteringParams
    )
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    batch_size: int = 64
    local_epochs: int = 1
    aggregation: str = "fedavg"  # fedavg | fedsgd
    offline_probability: float = 0.0
    shared_public_shard: bool = False
    center_init: str = "class_means"  # class_means | uniform
    init_scale: float = 1.0
    eval_positives: int = 1000
    eval_negatives: int = 1000
    far_targets: tuple[float, ...] = (1e-2,)

    def __post_init__(self) -> None:
        if self.clients < 1:
            raise ValidationError("clients must be >= 1")
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if self.mode not in RUN_MODES:
            raise ValidationError(f"mode={self.mode!r} not one of {RUN_MODES}")
        if self.aggregation not in ("fedavg", "fedsgd"):
            raise ValidationError(f"aggregation={self.aggregation!r} not fedavg or fedsgd")
        if not 0.0 <= self.offline_probability <= 1.0:
            raise ValidationError("offline_probability must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ValidationError("local_epochs must be >= 0")
        if self.center_init not in ("class_means", "uniform"):
            raise ValidationError("center_init must be class_means or uniform")


@dataclass
class ClientState:
    """One client's private world: embedder copy, class centers, and shard."""

    client_id: int
    embedder: np.ndarray  # (embed_dim, input_dim)
    centers: np.ndarray  # (n_classes, embed_dim), unit rows
    inputs: np.ndarray  # (N, input_dim)
    labels: np.ndarray  # (N,) local class indexes in [0, n_classes)
    global_ids: np.ndarray  # (n_classes,) global identity per local class


@dataclass
class ServerState:
    """What the coordinator is allowed to hold: no class centers, ever."""

    embedder: np.ndarray
    received_clusters: list[clustering.SanitizedCluster] = field(default_factory=list)
    ledger: dp.PrivacyLedger = field(default_factory=dp.PrivacyLedger)
    round_index: int = 0


def embed(embedder: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Unit-normalized linear features for a batch of raw inputs."""
    return normalize_rows(np.asarray(inputs, dtype=float) @ embedder.T)


def initialize_clients(
    fed: synth.SyntheticFederation,
    config: FederationConfig,
    seed: int,
) -> tuple[list[ClientState], np.ndarray]:
    """Build per-client states and the shared initial embedder.

    The embedder init is broadcast (identical for every client). Class
    centers start as the normalized per-class feature means under that init,
    standing in for a warm start, unless center_init is "uniform".
    """
    if config.clients != fed.params.clients:
        raise ValidationError(
            f"config.clients={config.clients} != federation clients={fed.params.clients}"
        )
    if config.shared_public_shard and fed.public_inputs is None:
        raise ValidationError("shared_public_shard requires a federation with public identities")

    d, d_in = fed.params.embed_dim, fed.params.input_dim
    init_rng = derive_rng(seed, "init")
    embedder0 = config.init_scale * init_rng.standard_normal((d, d_in)) / np.sqrt(d_in)

    states = []
    for c in range(config.clients):
        x = fed.client_inputs[c]
        y_global = fed.client_labels[c]
        if config.shared_public_shard:
            x = np.concatenate([x, fed.public_inputs], axis=0)
            y_global = np.concatenate([y_global, fed.public_labels])
        ids = np.unique(y_global)
        local_of = {int(g): i for i, g in enumerate(ids)}
        y_local = np.array([local_of[int(g)] for g in y_global])

        if config.center_init == "class_means":
            feats = embed(embedder0, x)
            centers = np.stack([feats[y_local == i].mean(axis=0) for i in range(ids.size)])
            centers = normalize_rows(centers)
        else:
            crng = derive_rng(seed, "centers", c)
            centers = normalize_rows(crng.standard_normal((ids.size, d)))
        states.append(
            ClientState(
                client_id=c,
                embedder=embedder0.copy(),
                centers=centers,
                inputs=np.asarray(x, dtype=float),
                labels=y_local,
                global_ids=ids,
            )
        )
    return states, embedder0


def client_local_round(
    state: ClientState,
    broadcast_embedder: np.ndarray,
    foreign: losses.ConsensusContext,
    config: FederationConfig,
    rng: np.random.Generator,
) -> tuple[ClientState, float | None]:
    """One client's local optimization pass for a fedavg round.

    Syncs the broadcast embedder, then runs local_epochs passes of minibatch
    SGD on the consensus loss. Class-center rows are renormalized after every
    step. Returns the updated state and the mean minibatch loss (None when no
    step ran).
    """
    n = state.inputs.shape[0]
    if n == 0:
        raise EmptyShardError(f"client {state.client_id} has no data")
    a = np.array(broadcast_embedder, dtype=float)
    w = state.centers.copy()
    rho = config.clustering_params.rho
    lr, wd = config.learning_rate, config.weight_decay
    batch = min(config.batch_size, n)
    batch_losses = []
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            x = state.inputs[rows]
            raw = x @ a.T
            bundle = losses.loss_gradients(
                raw, state.labels[rows], w, foreign, rho, config.loss
            )
            batch_losses.append(bundle.loss)
            if lr != 0.0:
                d_a = bundle.d_embeddings.T @ x
                a -= lr * (d_a + wd * a)
                w = normalize_rows(w - lr * bundle.d_centers)
    mean_loss = float(np.mean(batch_losses)) if batch_losses else None
    new_state = replace(state, embedder=a, centers=w)
    return new_state, mean_loss


def client_full_gradient(
    state: ClientState,
    frozen_embedder: np.ndarray,
    foreign: losses.ConsensusContext,
    config: FederationConfig,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Whole-shard gradients of the consensus loss at a frozen embedder.

    Used by fedsgd: the model stays fixed while gradients are computed, so
    every sample's gradient refers to the same parameters.
    """
    if state.inputs.shape[0] == 0:
        raise EmptyShardError(f"client {state.client_id} has no data")
    raw = state.inputs @ frozen_embedder.T
    bundle = losses.loss_gradients(
        raw, state.labels, state.centers, foreign, config.clustering_params.rho, config.loss
    )
    d_embedder = bundle.d_embeddings.T @ state.inputs
    return d_embedder, bundle.d_centers, bundle.loss


def _pairwise_tree_sum(items: list[np.ndarray]) -> np.ndarray:
    while len(items) > 1:
        merged = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


def exact_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Permutation-invariant coordinate-wise mean.

    Values are sorted per coordinate before a pairwise-tree summation, so the
    result is bit-identical under any reordering of the inputs, and the mean
    of 2^k identical arrays is exactly that array.
    """
    if not arrays:
        raise EmptyShardError("cannot average an empty list of models")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"mismatched shapes {sorted(shapes)}")
    stack = np.sort(np.stack([np.asarray(a, dtype=float) for a in arrays]), axis=0)
    total = _pairwise_tree_sum([stack[i] for i in range(stack.shape[0])])
    return total / len(arrays)


def aggregate_fedavg(models: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean of the received embedder parameters."""
    return exact_mean(models)


def fedsgd_round(
    clients: list[ClientState],
    server: ServerState,
    foreign_by_client: dict[int, losses.ConsensusContext],
    config: FederationConfig,
    parallel: bool = False,
) -> tuple[list[ClientState], np.ndarray, dict[int, float]]:
    """One gradient-aggregation round over the given (online) clients.

    Clients evaluate full-shard gradients at the frozen broadcast embedder;
    the server applies a single step with the mean embedder gradient. Each
    client applies one local step to its own class centers, which never
    leave it.
    """
    frozen = server.embedder

    def work(state: ClientState):
        return client_full_gradient(state, frozen, foreign_by_client[state.client_id], config)

    results = _map_in_order(work, clients, parallel)
    grads = [results[s.client_id][0] for s in clients]
    mean_grad = exact_mean(grads)
    new_embedder = frozen - config.learning_rate * (mean_grad + config.weight_decay * frozen)
    updated = []
    loss_by_client = {}
    for state in clients:
        _, d_centers, loss = results[state.client_id]
        loss_by_client[state.client_id] = loss
        if config.learning_rate != 0.0:
            centers = normalize_rows(state.centers - config.learning_rate * d_centers)
        else:
            centers = state.centers.copy()
        updated.append(replace(state, embedder=new_embedder.copy(), centers=centers))
    return updated, new_embedder, loss_by_client


def _map_in_order(fn, clients: list[ClientState], parallel: bool) -> dict[int, object]:
    """Run fn per client, optionally on threads; results keyed by client id."""
    if parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            futures = {state.client_id: pool.submit(fn, state) for state in clients}
        return {cid: fut.result() for cid, fut in futures.items()}
    return {state.client_id: fn(state) for state in clients}


@dataclass
class RoundRecord:
    round_index: int
    online_clients: list[int]
    queries_by_client: dict[int, int]
    loss_by_client: dict[int, float | None]
    tar_by_far: dict[float, float]
    cross_client_margin: float
    ledger_totals: dict[int, tuple[float, float]]
    fidelities: list[float]


@dataclass
class RunReport:
    """Per-round metrics plus the final model and accounting for one run."""

    mode: str
    seed: int
    config: dict
    rounds: list[RoundRecord]
    final_ledger_totals: dict[int, tuple[float, float]]
    fidelities: list[float]
    final_embedder: np.ndarray | None = None
    final_clients: list[ClientState] | None = None
    server: ServerState | None = None

    def to_json(self) -> str:
        """Deterministic serialization of everything except in-memory state."""
        payload = {
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "rounds": [
                {
                    "round": r.round_index,
                    "online_clients": r.online_clients,
                    "queries_by_client": {str(k): v for k, v in r.queries_by_client.items()},
                    "loss_by_client": {str(k): v for k, v in r.loss_by_client.items()},
                    "tar_by_far": {repr(k): v for k, v in r.tar_by_far.items()},
                    "cross_client_margin": r.cross_client_margin,
                    "ledger_totals": {
                        str(k): list(v) for k, v in r.ledger_totals.items()
                    },
                }
                for r in self.rounds
            ],
            "final_ledger_totals": {
                str(k): list(v) for k, v in self.final_ledger_totals.items()
            },
            "fidelities": self.fidelities,
        }
        return json.dumps(payload, sort_keys=True)


def config_as_dict(config: FederationConfig) -> dict:
    out = asdict(config)
    out["far_targets"] = list(config.far_targets)
    return out


def run_federation(
    config: FederationConfig,
    fed: synth.SyntheticFederation,
    seed: int,
    parallel: bool = False,
) -> RunReport:
    """Execute the full training scheme and return its report.

    Round structure: pick online clients, sync the broadcast embedder, run
    the cluster release on every online client (skipped in mode "phi"),
    gather and redistribute clusters, locally optimize, aggregate. The ledger
    charges each online client queries_used releases per round in sanitized
    mode. Identical (config, fed, seed) replay bit-identically, parallel or
    not.
    """
    clients, embedder0 = initialize_clients(fed, config, seed)
    server = ServerState(embedder=embedder0.copy())
    eval_rng = derive_rng(seed, "eval")
    pairs = synth.make_verification_pairs(
        fed, config.eval_positives, config.eval_negatives, eval_rng
    )
    cluster_mode = _CLUSTER_MODE_FOR_RUN.get(config.mode)
    records: list[RoundRecord] = []
    all_fidelities: list[float] = []

    for t in range(1, config.rounds + 1):
        server.round_index = t
        online = list(range(config.clients))
        if config.offline_probability > 0.0 and config.clients > 1:
            off_rng = derive_rng(seed, "offline", t)
            if off_rng.random() < config.offline_probability:
                online.remove(int(off_rng.integers(config.clients)))
        online_states = [clients[c] for c in online]

        # Sync before clustering: releases describe the current local centers.
        for state in online_states:
            state.embedder = server.embedder.copy()

        queries_by_client: dict[int, int] = {c: 0 for c in online}
        round_fidelities: list[float] = []
        released: list[clustering.SanitizedCluster] = []
        if cluster_mode is not None:
            params = replace(config.clustering_params, mode=cluster_mode)

            def cluster_work(state: ClientState, t=t, params=params):
                rng = derive_rng(seed, "cluster", t, state.client_id)
                return clustering.run_clustering(
                    state.centers, params, rng, client=state.client_id, round_index=t
                )

            reports = _map_in_order(cluster_work, online_states, parallel)
            for c in online:
                report = reports[c]
                released.extend(report.clusters)
                queries_by_client[c] = report.queries_used
                round_fidelities.extend(report.fidelities)
                if cluster_mode == clustering.MODE_SANITIZED:
                    server.ledger = server.ledger.compose(
                        c, t, config.clustering_params.budget, report.queries_used
                    )
        server.received_clusters = released

        dim = fed.params.embed_dim
        foreign_by_client = {
            c: losses.ConsensusContext.from_clusters(released, c, dim) for c in online
        }

        if config.aggregation == "fedavg":

            def local_work(state: ClientState, t=t):
                rng = derive_rng(seed, "local", t, state.client_id)
                return client_local_round(
                    state, server.embedder, foreign_by_client[state.client_id], config, rng
                )

            results = _map_in_order(local_work, online_states, parallel)
            loss_by_client = {}
            for c in online:
                new_state, loss = results[c]
                clients[c] = new_state
                loss_by_client[c] = loss
            server.embedder = aggregate_fedavg([clients[c].embedder for c in online])
        else:
            updated, new_embedder, loss_by_client = fedsgd_round(
                online_states, server, foreign_by_client, config, parallel
            )
            for state in updated:
                clients[state.client_id] = state
            server.embedder = new_embedder

        tar = synth.verification_eval(
            lambda x: embed(server.embedder, x), pairs, config.far_targets
        )
        margin = (
            synth.cross_client_margin([s.centers for s in clients])
            if config.clients > 1
            else 0.0
        )
        all_fidelities.extend(round_fidelities)
        records.append(
            RoundRecord(
                round_index=t,
                online_clients=online,
                queries_by_client=queries_by_client,
                loss_by_client=loss_by_client,
                tar_by_far=tar,
                cross_client_margin=margin,
                ledger_totals=server.ledger.totals(),
                fidelities=round_fidelities,
            )
        )

    return RunReport(
        mode=config.mode,
        seed=seed,
        config=config_as_dict(config),
        rounds=records,
        final_ledger_totals=server.ledger.totals(),
        fidelities=all_fidelities,
        final_embedder=server.embedder,
        final_clients=clients,
        server=server,
    )
