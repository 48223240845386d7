"""Federated training loop: broadcast, local optimization, statistics
exchange, and imbalance-aware aggregation.

One communication round proceeds as: the server broadcasts the global
parameters; every selected client recomputes its skew statistic, trains for
the configured local epochs with moment-reset Adam, and returns its updated
parameters plus per-class gradient-norm tallies; the server recomputes the
global class-rarity vector from the client histograms, derives aggregation
weights, averages the parameter sets in fixed client order, and evaluates
the new global model on the held-out test set.

Determinism: every random stream is derived from the master seed together
with its role and (round, client) coordinates, and aggregation consumes
client results by client index, so concurrent and serial client execution
produce identical runs bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import metrics as ME
from . import tensor as T
from .errors import ConfigError, ContractError
from .imbalance import (ClassHistogram, client_imbalance, dynamic_coefficient,
                        global_class_imbalance, head_tail_split, imbalance_score)
from .models import ModelParams, check_manifests_match
from .partition import PartitionResult, PartitionSpec, build_partition

AGGREGATION_MODES = ("inverse_imbalance", "sample_size", "uniform")

# seed-derivation roles; streams are SeedSequence([master, role, *coords])
_INIT_ROLE = 1
_SELECT_ROLE = 2
_CLIENT_ROLE = 3


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 3
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    client_fraction: float = 1.0
    aggregation: str = "inverse_imbalance"
    seed: int = 0
    concurrent: bool = False
    tail_fraction: float = 0.3

    def __post_init__(self):
        if min(self.num_clients, self.rounds, self.local_epochs, self.batch_size) < 1:
            raise ConfigError("clients, rounds, epochs, and batch size must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError(f"client_fraction must lie in (0, 1], got {self.client_fraction}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}; "
                              f"expected one of {AGGREGATION_MODES}")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if not 0.0 < self.tail_fraction < 1.0:
            raise ConfigError("tail_fraction must lie in (0, 1)")


@dataclass
class RoundRecord:
    round_index: int
    selected: list[int]
    client_coeffs: dict[int, float]
    weights: dict[int, float]
    metrics: ME.MetricReport
    per_class_grad_norms: list[float | None]
    tail_grad_norm: float | None
    head_grad_norm: float | None
    gamma: float
    train_loss: float
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.weights:
            total = sum(self.weights.values())
            if abs(total - 1.0) > 1e-12:
                raise ContractError(f"aggregation weights sum to {total!r}, not 1")


@dataclass
class FederationRun:
    records: list[RoundRecord]
    params: ModelParams
    class_coeffs: list[float]
    tail_classes: list[int]
    head_classes: list[int]


def derive_rng(master_seed: int, role: int, *coords: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, role, *coords]))


class Adam:
    """Adaptive-moment optimizer over a parameter list; moments start at
    zero on construction, so one instance per round gives the
    stateless-across-rounds behavior the protocol requires."""

    def __init__(self, params: list[T.Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data[...] = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class _LocalResult:
    client_id: int
    params: ModelParams
    client_coeff: float
    sample_count: int
    norm_sums: np.ndarray
    norm_counts: np.ndarray
    loss_sum: float
    batch_count: int


def local_train(model, global_params: ModelParams, features: np.ndarray,
                labels: np.ndarray, hist: ClassHistogram, class_coeffs: list[float],
                loss_cfg: L.LossConfig, fed_cfg: FederationConfig,
                rng: np.random.Generator, client_id: int = 0) -> _LocalResult:
    """One client's round: clone the broadcast, run E epochs of minibatch
    Adam, and tally per-class logit-gradient norms along the way."""
    params = global_params.clone()
    c_k = client_imbalance(hist, loss_cfg.epsilon)
    opt = Adam(params.tensors(), fed_cfg.learning_rate, fed_cfg.beta1,
               fed_cfg.beta2, fed_cfg.adam_eps)
    num_classes = hist.num_classes
    norm_sums = np.zeros(num_classes)
    norm_counts = np.zeros(num_classes, dtype=np.int64)
    loss_sum = 0.0
    batch_count = 0
    n = labels.size
    gamma_param = params["loss.gamma"] if (loss_cfg.gamma_trainable
                                           and "loss.gamma" in params) else None
    for _ in range(fed_cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, fed_cfg.batch_size):
            batch_idx = order[start:start + fed_cfg.batch_size]
            x = features[batch_idx]
            y = labels[batch_idx]
            coeffs = None
            if loss_cfg.kind == "adaptive_focal":
                coeffs = np.array([dynamic_coefficient(c_k, class_coeffs, int(t),
                                                       loss_cfg.blend) for t in y])
            logits = model.batch_logits(params, x)
            loss = L.batch_loss(logits, y, loss_cfg, coeffs=coeffs,
                                gamma_param=gamma_param)
            params.zero_grads()
            T.backward(loss)
            norms = ME.per_sample_logit_grad_norms(logits)
            for cls, norm in zip(y, norms):
                norm_sums[cls] += norm
                norm_counts[cls] += 1
            opt.step()
            if gamma_param is not None:
                L.clamp_gamma(params, loss_cfg)
            loss_sum += loss.item()
            batch_count += 1
    return _LocalResult(client_id, params, c_k, n, norm_sums, norm_counts,
                        loss_sum, batch_count)


def aggregation_weights(client_coeffs, eps: float) -> np.ndarray:
    """Normalized inverse of (coeff + eps): balanced clients weigh more."""
    coeffs = np.asarray(client_coeffs, dtype=np.float64)
    if np.any(coeffs < 0):
        raise ContractError("client imbalance coefficients must be >= 0")
    w = 1.0 / (coeffs + eps)
    return w / w.sum()


def sample_size_weights(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return counts / counts.sum()


def aggregate(params_list: list[ModelParams], weights) -> ModelParams:
    """Per-tensor convex combination in fixed client-index order.

    Computed anchored at the first participant, theta_0 + sum_k w_k *
    (theta_k - theta_0), which is the same convex combination but makes a
    unanimous parameter set an exact fixed point bit for bit.
    """
    if not params_list:
        raise ContractError("nothing to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != len(params_list):
        raise ContractError(f"{weights.size} weights for {len(params_list)} clients")
    check_manifests_match(params_list)
    items = []
    for name in params_list[0].names:
        anchor = params_list[0][name].data.astype(np.float64)
        acc = anchor.copy()
        for w, params in zip(weights[1:], params_list[1:]):
            acc += w * (params[name].data.astype(np.float64) - anchor)
        items.append((name, T.parameter(acc.astype(params_list[0][name].dtype))))
    return ModelParams(items)


def eval_scores(model, params: ModelParams, features: np.ndarray,
                batch_size: int = 512) -> np.ndarray:
    """Softmax class scores without gradient tracking."""
    frozen = ModelParams([(n, T.constant(t.data)) for n, t in params])
    rows = []
    for start in range(0, features.shape[0], batch_size):
        logits = model.batch_logits(frozen, features[start:start + batch_size]).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        rows.append(ex / ex.sum(axis=1, keepdims=True))
    return np.concatenate(rows)


def _select_clients(fed_cfg: FederationConfig, round_index: int,
                    eligible: list[int]) -> list[int]:
    if fed_cfg.client_fraction >= 1.0:
        return list(eligible)
    m = max(1, int(round(fed_cfg.client_fraction * len(eligible))))
    rng = derive_rng(fed_cfg.seed, _SELECT_ROLE, round_index)
    return sorted(rng.choice(eligible, size=m, replace=False).tolist())


def run_federation(bundle, partition: PartitionResult, model,
                   loss_cfg: L.LossConfig, fed_cfg: FederationConfig) -> FederationRun:
    """Full multi-round protocol; see the module docstring for the order of
    operations inside one round."""
    if len(partition.client_indices) != fed_cfg.num_clients:
        raise ConfigError(f"partition has {len(partition.client_indices)} clients, "
                          f"config says {fed_cfg.num_clients}")
    features, labels = bundle.features, bundle.labels
    num_classes = bundle.num_classes
    shards = [(features[list(idx)], labels[list(idx)])
              for idx in partition.client_indices]
    test_idx = list(partition.test_indices)
    if not test_idx:
        raise ConfigError("partition has no global test set to evaluate on")
    test_x, test_y = features[test_idx], labels[test_idx]

    init_rng = derive_rng(fed_cfg.seed, _INIT_ROLE)
    gamma_init = loss_cfg.gamma if loss_cfg.gamma_trainable else None
    global_params = model.init_params(init_rng, gamma_init=gamma_init)

    pooled = partition.histograms[0]
    for h in partition.histograms[1:]:
        pooled = pooled.merge(h)
    present = [c for c, n in enumerate(pooled.counts) if n > 0]
    scores = [imbalance_score(pooled.total, pooled.counts[c]) for c in present]
    tail_pos, head_pos = head_tail_split(scores, fed_cfg.tail_fraction)
    tail_classes = [present[i] for i in tail_pos]
    head_classes = [present[i] for i in head_pos]

    eligible = [k for k in range(fed_cfg.num_clients) if shards[k][1].size > 0]
    skipped = [k for k in range(fed_cfg.num_clients) if k not in eligible]
    if not eligible:
        raise ConfigError("every client shard is empty; nothing to train")

    records: list[RoundRecord] = []
    class_coeffs: list[float] = []
    for t in range(1, fed_cfg.rounds + 1):
        selected = _select_clients(fed_cfg, t, eligible)
        warnings = [f"client {k} skipped: empty shard" for k in skipped]

        # the class-rarity vector each client trains with this round
        class_coeffs = global_class_imbalance(
            [partition.histograms[k] for k in selected], loss_cfg.epsilon)

        def run_client(k: int) -> _LocalResult:
            rng = derive_rng(fed_cfg.seed, _CLIENT_ROLE, t, k)
            return local_train(model, global_params, shards[k][0], shards[k][1],
                               partition.histograms[k], class_coeffs,
                               loss_cfg, fed_cfg, rng, client_id=k)

        if fed_cfg.concurrent and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=len(selected)) as pool:
                results = list(pool.map(run_client, selected))
        else:
            results = [run_client(k) for k in selected]
        results.sort(key=lambda r: r.client_id)  # aggregation order is by index

        coeffs = [r.client_coeff for r in results]
        if fed_cfg.aggregation == "inverse_imbalance":
            weights = aggregation_weights(coeffs, loss_cfg.epsilon)
        elif fed_cfg.aggregation == "sample_size":
            weights = sample_size_weights([r.sample_count for r in results])
        else:
            weights = np.full(len(results), 1.0 / len(results))
        global_params = aggregate([r.params for r in results], weights)

        scores_test = eval_scores(model, global_params, test_x)
        report = ME.evaluate_scores(scores_test, test_y, num_classes)

        norm_sums = np.zeros(num_classes)
        norm_counts = np.zeros(num_classes, dtype=np.int64)
        for r in results:
            norm_sums += r.norm_sums
            norm_counts += r.norm_counts
        per_class = [float(norm_sums[c] / norm_counts[c]) if norm_counts[c] else None
                     for c in range(num_classes)]

        def group_mean(group: list[int]) -> float | None:
            total = sum(norm_counts[c] for c in group)
            if total == 0:
                return None
            return float(sum(norm_sums[c] for c in group) / total)

        total_batches = sum(r.batch_count for r in results)
        records.append(RoundRecord(
            round_index=t,
            selected=list(selected),
            client_coeffs={r.client_id: r.client_coeff for r in results},
            weights={r.client_id: float(w) for r, w in zip(results, weights)},
            metrics=report,
            per_class_grad_norms=per_class,
            tail_grad_norm=group_mean(tail_classes),
            head_grad_norm=group_mean(head_classes),
            gamma=L.gamma_value(global_params, loss_cfg),
            train_loss=float(sum(r.loss_sum for r in results) / total_batches)
            if total_batches else float("nan"),
            warnings=warnings,
        ))
    return FederationRun(records, global_params, class_coeffs,
                         tail_classes, head_classes)


def run_centralized(bundle, model, loss_cfg: L.LossConfig,
                    fed_cfg: FederationConfig,
                    val_fraction: float = 0.1) -> FederationRun:
    """Single-trainer reference: one shard holding the whole training pool,
    a stratified validation split, and one synchronization per epoch (so a
    K=1 federation with matched total epochs follows the same trajectory)."""
    spec = PartitionSpec(mode="fixed", ratios=(1.0,), num_clients=1,
                         test_fraction=val_fraction, seed=fed_cfg.seed)
    partition = build_partition(bundle.labels, spec, bundle.num_classes)
    cfg = FederationConfig(
        num_clients=1, rounds=fed_cfg.rounds, local_epochs=fed_cfg.local_epochs,
        batch_size=fed_cfg.batch_size, learning_rate=fed_cfg.learning_rate,
        beta1=fed_cfg.beta1, beta2=fed_cfg.beta2, adam_eps=fed_cfg.adam_eps,
        aggregation="uniform", seed=fed_cfg.seed, concurrent=False,
        tail_fraction=fed_cfg.tail_fraction)
    return run_federation(bundle, partition, model, loss_cfg, cfg)
