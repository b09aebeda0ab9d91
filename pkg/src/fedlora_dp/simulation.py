"""Federated round loop over synthetic regression tasks.

Each round the server samples clients, every sampled client trains a fresh
low-rank adapter against the effective base (frozen weights plus the
accumulated global delta), optionally clips and noises its factors, and the
server stacks the released pairs into a dense pseudo-gradient that one of
seven aggregation strategies applies.  Broadcast is fold-and-reset: the dense
delta is accumulated server-side and clients re-initialise fresh adapters, so
per-round shapes never grow.

All randomness flows through streams keyed by (round, client, draw kind),
which makes runs bit-reproducible regardless of client scheduling.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import (
    ClientUpdate,
    FrozenBase,
    GlobalAdapter,
    LoraAdapter,
    adapter_delta,
    aggregate_stack,
    global_delta,
    init_adapter,
)
from .linalg import RngStream, frobenius_norm
from .noise_stats import NoiseModel, exact_total_variance
from .privacy import MechanismParams, clip_frobenius, compose_budget, privatize

__all__ = [
    "STRATEGIES",
    "NumericError",
    "SyntheticTask",
    "ClientState",
    "ServerHyper",
    "ServerState",
    "TrainConfig",
    "RoundMetrics",
    "LocalTrainResult",
    "ExperimentResult",
    "generate_task",
    "dataset_loss",
    "cosine_lr",
    "local_train",
    "sample_clients",
    "run_round",
    "run_experiment",
    "observe_update_norms",
]

STRATEGIES = ("fedavg", "fedprox", "scaffold", "fedavgm", "fedadagrad", "fedyogi", "fedadam")

# Draw-kind tags for stream paths.
_KIND_SAMPLE = 0
_KIND_INIT = 1
_KIND_TRAIN = 2
_KIND_NOISE_B = 3
_KIND_NOISE_A = 4


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class SyntheticTask:
    """Linear regression task y = (W + target_delta) x + noise, split over clients."""

    base: FrozenBase
    target_delta: np.ndarray
    client_x: tuple[np.ndarray, ...]
    client_y: tuple[np.ndarray, ...]
    r_star: int
    sigma_obs: float
    heterogeneity: float

    @property
    def m(self) -> int:
        return self.base.shape[0]

    @property
    def n(self) -> int:
        return self.base.shape[1]

    @property
    def n_clients(self) -> int:
        return len(self.client_x)

    def client_sizes(self) -> list[int]:
        return [x.shape[0] for x in self.client_x]


@dataclass
class ClientState:
    """Mutable per-client state: dataset, current adapter, corrections, stream."""

    client_id: int
    x: np.ndarray
    y: np.ndarray
    adapter: LoraAdapter
    rng: RngStream
    prox_mu: float = 0.0
    control_variate: np.ndarray | None = None


@dataclass(frozen=True)
class ServerHyper:
    """Server optimiser hyperparameters shared by the momentum/adaptive strategies."""

    server_lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    momentum_beta: float = 0.9


@dataclass
class ServerState:
    """Server-side accumulators; all matrices are m x n."""

    base: FrozenBase
    strategy: str
    delta_acc: np.ndarray
    momentum: np.ndarray
    second_moment: np.ndarray
    server_c: np.ndarray
    round_index: int = 0
    hyper: ServerHyper = field(default_factory=ServerHyper)

    @classmethod
    def fresh(cls, base: FrozenBase, strategy: str, hyper: ServerHyper | None = None) -> "ServerState":
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
        shape = base.shape
        return cls(
            base=base,
            strategy=strategy,
            delta_acc=np.zeros(shape),
            momentum=np.zeros(shape),
            second_moment=np.zeros(shape),
            server_c=np.zeros(shape),
            hyper=hyper or ServerHyper(),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one federated experiment."""

    rounds: int
    clients: int
    sampled_per_round: int
    local_epochs: int
    batch_size: int
    lr_start: float
    lr_end: float
    rank: int
    lora_scale: float
    seed: int
    strategy: str = "fedavg"
    dp_enabled: bool = False
    mechanism: MechanismParams | None = None
    epsilon_b: float | None = None
    epsilon_a: float | None = None
    delta: float | None = None
    prox_mu: float = 0.0
    hyper: ServerHyper = field(default_factory=ServerHyper)
    max_workers: int = 1

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if not 1 <= self.sampled_per_round <= self.clients:
            raise ValueError(
                f"sampled_per_round must lie in [1, {self.clients}], got {self.sampled_per_round}"
            )
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError(
                f"need lr_start >= lr_end > 0, got lr_start={self.lr_start}, lr_end={self.lr_end}"
            )
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.dp_enabled and self.mechanism is None:
            raise ValueError("dp_enabled requires mechanism parameters")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {self.max_workers}")


@dataclass(frozen=True)
class RoundMetrics:
    """Per-round observables."""

    round_index: int
    mean_train_loss: float
    client_losses: tuple[tuple[int, float], ...]
    global_delta_norm: float
    expectation_diff: float
    total_variance: float
    wall_s: float


@dataclass(frozen=True)
class LocalTrainResult:
    adapter: LoraAdapter
    mean_loss: float
    steps: int


@dataclass(frozen=True)
class ExperimentResult:
    config: TrainConfig
    rounds: tuple[RoundMetrics, ...]
    initial_loss: float
    final_loss: float
    naive_epsilon: float | None
    wall_s: float


# Task-generation draw kinds.
_TASK_BASE = 0
_TASK_TARGET = 1
_TASK_CLIENT = 2


def generate_task(
    m: int,
    n: int,
    r_star: int,
    n_clients: int,
    samples_per_client: int,
    sigma_obs: float,
    heterogeneity: float,
    rng: RngStream,
) -> SyntheticTask:
    """Build a realizable low-rank regression task with optional client shift.

    Base entries are N(0, 1/n); the rank-r_star target product is rescaled to
    unit Frobenius norm.  Client k draws inputs from N(mu_k, I) where
    ||mu_k|| equals the heterogeneity parameter (zero shift when it is 0).
    """
    if m < 1 or n < 1 or n_clients < 1 or samples_per_client < 1:
        raise ValueError("task dimensions and sizes must be positive")
    if not 1 <= r_star <= min(m, n):
        raise ValueError(f"r_star must lie in [1, {min(m, n)}], got {r_star}")
    if sigma_obs < 0:
        raise ValueError(f"sigma_obs must be >= 0, got {sigma_obs}")
    if not 0 <= heterogeneity <= 1:
        raise ValueError(f"heterogeneity must lie in [0, 1], got {heterogeneity}")

    gen_base = rng.child(_TASK_BASE).generator()
    w = gen_base.standard_normal((m, n)) / math.sqrt(n)

    gen_target = rng.child(_TASK_TARGET).generator()
    b_star = gen_target.standard_normal((m, r_star)) / math.sqrt(r_star)
    a_star = gen_target.standard_normal((r_star, n)) / math.sqrt(r_star)
    product_norm = frobenius_norm(b_star @ a_star)
    scale = 1.0 / math.sqrt(product_norm)
    target = (b_star * scale) @ (a_star * scale)

    signal = w + target
    xs, ys = [], []
    for k in range(n_clients):
        gen_k = rng.child(_TASK_CLIENT, k).generator()
        if heterogeneity == 0:
            mu = np.zeros(n)
        else:
            direction = gen_k.standard_normal(n)
            mu = heterogeneity * direction / np.linalg.norm(direction)
        x = mu + gen_k.standard_normal((samples_per_client, n))
        y = x @ signal.T
        if sigma_obs > 0:
            y = y + sigma_obs * gen_k.standard_normal((samples_per_client, m))
        xs.append(x)
        ys.append(y)

    return SyntheticTask(
        base=FrozenBase(w),
        target_delta=target,
        client_x=tuple(xs),
        client_y=tuple(ys),
        r_star=r_star,
        sigma_obs=sigma_obs,
        heterogeneity=heterogeneity,
    )


def dataset_loss(model: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Half mean squared prediction error of a dense model over a dataset."""
    err = x @ model.T - y
    return float(0.5 * np.sum(err * err) / x.shape[0])


def cosine_lr(lr_start: float, lr_end: float, round_index: int, rounds: int) -> float:
    """Cosine schedule across rounds, from lr_start at round 0 to lr_end at the last."""
    if rounds <= 1:
        return lr_start
    t = round_index / (rounds - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t))


def local_train(
    client: ClientState,
    base: FrozenBase,
    delta_acc: np.ndarray,
    config: TrainConfig,
    lr: float,
    server_c: np.ndarray | None = None,
) -> LocalTrainResult:
    """Mini-batch gradient descent on the client's adapter factors.

    The loss is half the mean squared error of (W + delta_acc + scale*B@A)
    against the client's targets, plus prox_mu/2 * (||B||^2 + ||A||^2) when a
    proximal term is configured.  Factor gradients are scale*G@A.T and
    scale*B.T@G where G is the batch-mean error outer product; when a server
    correction is supplied the drift-corrected G + c - c_k is used instead.
    Neither W nor delta_acc is mutated; the trained factors come back as a
    fresh adapter.
    """
    effective = base.w + delta_acc
    b = client.adapter.b.copy()
    a = client.adapter.a.copy()
    s = client.adapter.scale
    prox_mu = client.prox_mu
    correction = None
    if server_c is not None and client.control_variate is not None:
        correction = server_c - client.control_variate

    n_samples = client.x.shape[0]
    batch_size = min(config.batch_size, n_samples)

    if config.local_epochs == 0:
        loss = dataset_loss(effective + s * (b @ a), client.x, client.y)
        if prox_mu > 0:
            loss += 0.5 * prox_mu * (np.sum(b * b) + np.sum(a * a))
        return LocalTrainResult(adapter=client.adapter, mean_loss=loss, steps=0)

    gen = client.rng.generator()
    steps = 0
    last_epoch_losses: list[float] = []
    for epoch in range(config.local_epochs):
        order = gen.permutation(n_samples)
        epoch_losses = []
        for start in range(0, n_samples, batch_size):
            idx = order[start:start + batch_size]
            xb = client.x[idx]
            yb = client.y[idx]
            bs = xb.shape[0]

            with np.errstate(over="ignore", invalid="ignore"):
                pred = xb @ (effective + s * (b @ a)).T
                err = pred - yb
                loss = 0.5 * np.sum(err * err) / bs
                if prox_mu > 0:
                    loss += 0.5 * prox_mu * (np.sum(b * b) + np.sum(a * a))
            if not np.isfinite(loss):
                raise NumericError(
                    f"client {client.client_id}: non-finite loss at epoch {epoch}"
                )
            epoch_losses.append(float(loss))

            g = err.T @ xb / bs
            if correction is not None:
                g = g + correction
            grad_b = s * (g @ a.T)
            grad_a = s * (b.T @ g)
            if prox_mu > 0:
                grad_b = grad_b + prox_mu * b
                grad_a = grad_a + prox_mu * a
            b = b - lr * grad_b
            a = a - lr * grad_a
            steps += 1
        last_epoch_losses = epoch_losses

    return LocalTrainResult(
        adapter=client.adapter.with_factors(b, a),
        mean_loss=float(np.mean(last_epoch_losses)),
        steps=steps,
    )


def sample_clients(n_clients: int, k: int, rng: RngStream) -> list[int]:
    """Uniform sample of k distinct client ids, returned in ascending order."""
    if not 1 <= k <= n_clients:
        raise ValueError(f"cannot sample {k} of {n_clients} clients")
    gen = rng.generator()
    return sorted(int(i) for i in gen.choice(n_clients, size=k, replace=False))


def _train_one(
    client: ClientState,
    base: FrozenBase,
    delta_acc: np.ndarray,
    config: TrainConfig,
    lr: float,
    round_index: int,
    root: RngStream,
    server_c: np.ndarray | None,
) -> tuple[int, LocalTrainResult]:
    client.adapter = init_adapter(
        base.shape[0],
        base.shape[1],
        client.adapter.rank,
        client.adapter.lora_scale,
        root.child(round_index, client.client_id, _KIND_INIT),
    )
    client.rng = root.child(round_index, client.client_id, _KIND_TRAIN)
    result = local_train(client, base, delta_acc, config, lr, server_c=server_c)
    return client.client_id, result


def _apply_strategy(server: ServerState, delta_t: np.ndarray) -> None:
    hyper = server.hyper
    if server.strategy in ("fedavg", "fedprox", "scaffold"):
        server.delta_acc = server.delta_acc + delta_t
    elif server.strategy == "fedavgm":
        server.momentum = hyper.momentum_beta * server.momentum + delta_t
        server.delta_acc = server.delta_acc + hyper.server_lr * server.momentum
    else:
        server.momentum = hyper.beta1 * server.momentum + (1.0 - hyper.beta1) * delta_t
        sq = delta_t * delta_t
        if server.strategy == "fedadagrad":
            server.second_moment = server.second_moment + sq
        elif server.strategy == "fedyogi":
            server.second_moment = server.second_moment - (1.0 - hyper.beta2) * sq * np.sign(
                server.second_moment - sq
            )
        elif server.strategy == "fedadam":
            server.second_moment = hyper.beta2 * server.second_moment + (1.0 - hyper.beta2) * sq
        else:
            raise ValueError(f"unknown strategy {server.strategy!r}")
        server.delta_acc = server.delta_acc + hyper.server_lr * server.momentum / (
            np.sqrt(server.second_moment) + hyper.tau
        )


def run_round(
    server: ServerState,
    clients: list[ClientState],
    config: TrainConfig,
    rng: RngStream,
) -> tuple[ServerState, RoundMetrics]:
    """One communication round: sample, train, privatize, stack, apply, fold."""
    t0 = time.perf_counter()
    round_index = server.round_index
    sampled = sample_clients(len(clients), config.sampled_per_round, rng.child(round_index, _KIND_SAMPLE))
    lr = cosine_lr(config.lr_start, config.lr_end, round_index, config.rounds)
    by_id = {c.client_id: c for c in clients}
    server_c = server.server_c if server.strategy == "scaffold" else None

    def job(cid: int) -> tuple[int, LocalTrainResult]:
        return _train_one(by_id[cid], server.base, server.delta_acc, config, lr,
                          round_index, rng, server_c)

    if config.max_workers > 1 and len(sampled) > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            results = dict(pool.map(job, sampled))
    else:
        results = dict(job(cid) for cid in sampled)

    sizes = {cid: by_id[cid].x.shape[0] for cid in sampled}
    total = sum(sizes.values())

    updates = []
    clean_updates = []
    for cid in sampled:  # ascending id order fixes stacking order
        res = results[cid]
        adapter = res.adapter
        data_weight = sizes[cid] / total
        fold = data_weight * adapter.scale
        if config.dp_enabled:
            mech = config.mechanism
            b_clean = clip_frobenius(adapter.b, mech.clip_b)
            a_clean = clip_frobenius(adapter.a, mech.clip_a)
            b_rel = privatize(adapter.b, mech.clip_b, mech.sigma_b,
                              rng.child(round_index, cid, _KIND_NOISE_B))
            a_rel = privatize(adapter.a, mech.clip_a, mech.sigma_a,
                              rng.child(round_index, cid, _KIND_NOISE_A))
        else:
            b_clean, a_clean = adapter.b, adapter.a
            b_rel, a_rel = adapter.b, adapter.a
        updates.append(ClientUpdate(cid, b_rel, a_rel, adapter.rank, weight=fold))
        clean_updates.append(ClientUpdate(cid, b_clean, a_clean, adapter.rank, weight=fold))

    delta_t = global_delta(aggregate_stack(updates))

    if config.dp_enabled:
        clean_delta = global_delta(aggregate_stack(clean_updates))
        expectation_diff = float(np.mean(delta_t - clean_delta))
        mech = config.mechanism
        total_variance = 0.0
        for u in clean_updates:
            model = NoiseModel(sigma_beta=mech.sigma_b, sigma_alpha=mech.sigma_a)
            total_variance += u.weight**2 * exact_total_variance(u.b_tilde, u.a_tilde, model)
    else:
        expectation_diff = 0.0
        total_variance = 0.0

    if server.strategy == "scaffold":
        _update_control_variates(server, by_id, results, sampled, lr, len(clients))

    _apply_strategy(server, delta_t)
    server.round_index += 1

    client_losses = tuple((cid, results[cid].mean_loss) for cid in sampled)
    metrics = RoundMetrics(
        round_index=round_index,
        mean_train_loss=float(np.mean([results[cid].mean_loss for cid in sampled])),
        client_losses=client_losses,
        global_delta_norm=frobenius_norm(delta_t),
        expectation_diff=expectation_diff,
        total_variance=total_variance,
        wall_s=time.perf_counter() - t0,
    )
    return server, metrics


def _update_control_variates(
    server: ServerState,
    by_id: dict[int, ClientState],
    results: dict[int, LocalTrainResult],
    sampled: list[int],
    lr: float,
    n_clients: int,
) -> None:
    """Drift-correction bookkeeping on dense deltas (applied before the server step)."""
    shifts = []
    for cid in sampled:
        res = results[cid]
        if res.steps == 0:
            continue
        client = by_id[cid]
        dense = adapter_delta(res.adapter)
        c_new = client.control_variate - server.server_c - dense / (res.steps * lr)
        shifts.append(c_new - client.control_variate)
        client.control_variate = c_new
    if shifts:
        server.server_c = server.server_c + sum(shifts) / n_clients


def _make_clients(task: SyntheticTask, config: TrainConfig, root: RngStream) -> list[ClientState]:
    clients = []
    for k in range(task.n_clients):
        adapter = init_adapter(task.m, task.n, config.rank, config.lora_scale,
                               root.child(0, k, _KIND_INIT))
        clients.append(
            ClientState(
                client_id=k,
                x=task.client_x[k],
                y=task.client_y[k],
                adapter=adapter,
                rng=root.child(0, k, _KIND_TRAIN),
                prox_mu=config.prox_mu if config.strategy == "fedprox" else 0.0,
                control_variate=np.zeros((task.m, task.n)),
            )
        )
    return clients


def _global_loss(task: SyntheticTask, delta_acc: np.ndarray) -> float:
    model = task.base.w + delta_acc
    x = np.vstack(task.client_x)
    y = np.vstack(task.client_y)
    return dataset_loss(model, x, y)


def run_experiment(config: TrainConfig, task: SyntheticTask, root: RngStream) -> ExperimentResult:
    """Run the full horizon and collect per-round metrics plus a final summary."""
    t0 = time.perf_counter()
    server = ServerState.fresh(task.base, config.strategy, config.hyper)
    clients = _make_clients(task, config, root)
    rounds = []
    for _ in range(config.rounds):
        server, metrics = run_round(server, clients, config, root)
        rounds.append(metrics)
    initial_loss = _global_loss(task, np.zeros((task.m, task.n)))
    final_loss = _global_loss(task, server.delta_acc)
    naive_epsilon = None
    if config.dp_enabled and config.epsilon_b and config.epsilon_a and config.rounds > 0:
        naive_epsilon = compose_budget(config.epsilon_b, config.epsilon_a, config.rounds)
    return ExperimentResult(
        config=config,
        rounds=tuple(rounds),
        initial_loss=initial_loss,
        final_loss=final_loss,
        naive_epsilon=naive_epsilon,
        wall_s=time.perf_counter() - t0,
    )


def observe_update_norms(
    task: SyntheticTask,
    config: TrainConfig,
    n_rounds: int,
    root: RngStream,
) -> tuple[list[float], list[float]]:
    """Unclipped factor norms from a short non-private dry run.

    Used to calibrate clip thresholds as a quantile of realistic update norms.
    """
    dry = replace(config, rounds=max(1, n_rounds), dp_enabled=False, mechanism=None)
    server = ServerState.fresh(task.base, dry.strategy, dry.hyper)
    clients = _make_clients(task, dry, root)
    b_norms: list[float] = []
    a_norms: list[float] = []
    for _ in range(dry.rounds):
        round_index = server.round_index
        sampled = sample_clients(len(clients), dry.sampled_per_round,
                                 root.child(round_index, _KIND_SAMPLE))
        lr = cosine_lr(dry.lr_start, dry.lr_end, round_index, dry.rounds)
        by_id = {c.client_id: c for c in clients}
        for cid in sampled:
            _, res = _train_one(by_id[cid], server.base, server.delta_acc, dry, lr,
                                round_index, root, None)
            b_norms.append(frobenius_norm(res.adapter.b))
            a_norms.append(frobenius_norm(res.adapter.a))
            weight = 1.0 / len(sampled)
            server.delta_acc = server.delta_acc + weight * adapter_delta(res.adapter)
        server.round_index += 1
    return b_norms, a_norms
