"""Federated training schemes: plain averaging (stdfed), client-level DP
with clipped noisy aggregation (dpfed), and the post-processed variant that
additionally clips the noisy average step (dpfed-post).

Every random choice is drawn from a stream keyed by (seed, purpose, round,
client), so runs are reproducible regardless of execution order and client
updates within a round can run on parallel workers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn

SCHEMES = ("centralized", "stdfed", "dpfed", "dpfed-post")

# stream purpose tags (SeedSequence entropy words)
_TAG_SELECT = 1
_TAG_CLIENT = 2
_TAG_NOISE = 3
_TAG_WARMUP = 4
_TAG_INIT = 5


def substream(*key: int) -> np.random.Generator:
    if any(int(k) < 0 for k in key):
        raise ValueError("stream key words must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def init_stream(seed: int) -> np.random.Generator:
    return substream(seed, _TAG_INIT)


def client_stream(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    return substream(seed, _TAG_CLIENT, round_idx, client_id)


@dataclass(frozen=True)
class FedConfig:
    """Protocol knobs; paper-style defaults are N=10, K=5, E=50, T_cl=50."""

    n_clients: int = 10
    clients_per_round: int = 5
    local_epochs: int = 50
    batch_size: int = 64
    rounds: int = 50
    lr: float = 1e-4
    scheme: str = "stdfed"
    seed: int = 0
    local_opt: str = "adam"
    eval_every: int = 0  # 0 = never evaluate inside the loop

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ValueError("need 1 <= K <= N")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.local_opt not in ("adam", "sgd"):
            raise ValueError("local_opt must be adam or sgd")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def sampling_prob(self) -> float:
        return self.clients_per_round / self.n_clients


@dataclass(frozen=True)
class PrivacyParams:
    """Gaussian-mechanism knobs: L2 clip S, noise multiplier, optional
    post-processing clip P (dpfed-post only), and delta."""

    sensitivity: float
    noise_multiplier: float
    delta: float = 1e-3
    post_clip: float | None = None

    def __post_init__(self):
        if self.sensitivity <= 0:
            raise ValueError("sensitivity must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be >= 0")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if self.post_clip is not None and self.post_clip <= 0:
            raise ValueError("post clip must be positive")


@dataclass(frozen=True)
class ClientUpdate:
    delta: np.ndarray
    client_id: int
    round_idx: int


@dataclass(frozen=True)
class TraceRound:
    round_idx: int
    selected: tuple[int, ...]
    update_norms: tuple[float, ...]
    clipped_norms: tuple[float, ...]
    agg_norm: float
    applied_norm: float
    noise_key: tuple[int, ...] | None
    metrics: dict | None = None

    def record(self) -> dict:
        return {
            "round": self.round_idx,
            "selected": list(self.selected),
            "update_norms": list(self.update_norms),
            "clipped_norms": list(self.clipped_norms),
            "agg_norm": self.agg_norm,
            "applied_norm": self.applied_norm,
            "noise_key": list(self.noise_key) if self.noise_key else None,
            "metrics": self.metrics,
        }


def clip_l2(v: np.ndarray, bound: float) -> np.ndarray:
    """v / max(1, ||v||/bound): norm capped at bound, direction kept."""
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    return v / max(1.0, norm / bound)


def post_process(noisy_mean: np.ndarray, post_clip: float) -> np.ndarray:
    """The one step separating dpfed-post from dpfed."""
    return clip_l2(noisy_mean, post_clip)


def aggregate(updates: Sequence[np.ndarray], sensitivity: float,
              noise_multiplier: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """(sum of clipped updates + N(0, (S*sigma)^2 I)) / K."""
    if len(updates) == 0:
        raise ValueError("cannot aggregate an empty update list")
    if len(updates) != k:
        raise ValueError(f"got {len(updates)} updates for K={k}")
    stack = np.stack(updates)
    norms = np.linalg.norm(stack, axis=1)
    assert np.all(norms <= sensitivity * (1.0 + 1e-9)), \
        f"update norm {norms.max()} exceeds sensitivity {sensitivity}"
    noise = rng.normal(0.0, sensitivity * noise_multiplier, size=stack.shape[1])
    return (stack.sum(axis=0) + noise) / k


def _average(updates: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack(updates).sum(axis=0) / len(updates)


def calibrate_sensitivity(update_norms) -> float:
    """Median of the warm-round client update norms (mean of the middle two
    for an even count)."""
    norms = np.asarray(update_norms, dtype=float).ravel()
    if norms.size == 0:
        raise ValueError("no update norms to calibrate from")
    return float(np.median(norms))


def client_update(spec: nn.MlpSpec, head, global_params: np.ndarray, dataset,
                  epochs: int, batch_size: int, lr: float,
                  rng: np.random.Generator, local_opt: str = "adam") -> np.ndarray:
    """Local training: `epochs` passes of shuffled mini-batches.

    Optimizer state starts fresh from the received global model. Batches the
    head reports untrainable (no events for the Cox family) are skipped
    without consuming an optimizer step.
    """
    if dataset.n == 0:
        raise ValueError("client dataset is empty")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    params = np.asarray(global_params, dtype=float).copy()
    state = nn.AdamState.fresh(params.size, lr)
    for _ in range(epochs):
        perm = rng.permutation(dataset.n)
        for lo in range(0, dataset.n, batch_size):
            idx = perm[lo:lo + batch_size]
            dur = dataset.durations[idx]
            ev = dataset.events[idx]
            if not head.batch_trainable(dur, ev):
                continue
            loss, grad = head.loss_and_grad(spec, params, dataset.x[idx], dur, ev, rng)
            if local_opt == "adam":
                params, state = nn.adam_step(state, params, grad)
            else:
                params = params - lr * grad
    return params


def select_clients(seed: int, round_idx: int, n_clients: int, k: int) -> np.ndarray:
    """Uniform sample of k distinct clients for this round."""
    rng = substream(seed, _TAG_SELECT, round_idx)
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def warmup_update_norms(spec, head, params, shards, config: FedConfig) -> np.ndarray:
    """One non-private round over all N clients; only the norms are kept.

    Feeds calibrate_sensitivity; excluded from privacy accounting.
    """
    norms = np.empty(len(shards))
    for cid, shard in enumerate(shards):
        rng = substream(config.seed, _TAG_WARMUP, cid)
        local = client_update(spec, head, params, shard, config.local_epochs,
                              config.batch_size, config.lr, rng, config.local_opt)
        norms[cid] = np.linalg.norm(local - params)
    return norms


def _worker_count() -> int:
    raw = os.environ.get("FEDSURV_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_federated(config: FedConfig, privacy: PrivacyParams | None, spec, head,
                  shards, init_params: np.ndarray,
                  metrics_fn: Callable[[np.ndarray], dict] | None = None):
    """Run the configured scheme; returns (final params, per-round trace).

    The centralized scheme is the 1-client reduction: a single round of
    rounds*epochs local training over the union shard.
    """
    dp = config.scheme in ("dpfed", "dpfed-post")
    if dp and privacy is None:
        raise ValueError(f"scheme {config.scheme} needs PrivacyParams")
    if config.scheme == "dpfed-post" and privacy.post_clip is None:
        raise ValueError("dpfed-post needs a post_clip bound")
    if len(shards) != config.n_clients:
        raise ValueError(f"{len(shards)} shards for N={config.n_clients} clients")

    params = np.asarray(init_params, dtype=float).copy()
    trace: list[TraceRound] = []
    workers = _worker_count()

    for r in range(1, config.rounds + 1):
        selected = select_clients(config.seed, r, config.n_clients,
                                  config.clients_per_round)

        def train_one(cid: int) -> np.ndarray:
            rng = client_stream(config.seed, r, cid)
            local = client_update(spec, head, params, shards[cid],
                                  config.local_epochs, config.batch_size,
                                  config.lr, rng, config.local_opt)
            return local - params

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                deltas = list(pool.map(train_one, selected))
        else:
            deltas = [train_one(cid) for cid in selected]

        norms = tuple(float(np.linalg.norm(d)) for d in deltas)
        noise_key = None
        if dp:
            clipped = [clip_l2(d, privacy.sensitivity) for d in deltas]
            clipped_norms = tuple(float(np.linalg.norm(c)) for c in clipped)
            assert all(cn <= privacy.sensitivity * (1.0 + 1e-9) for cn in clipped_norms)
            noise_key = (config.seed, _TAG_NOISE, r)
            step = aggregate(clipped, privacy.sensitivity, privacy.noise_multiplier,
                             config.clients_per_round, substream(*noise_key))
            agg_norm = float(np.linalg.norm(step))
            if config.scheme == "dpfed-post":
                step = post_process(step, privacy.post_clip)
                applied_norm = float(np.linalg.norm(step))
                assert applied_norm <= privacy.post_clip * (1.0 + 1e-9)
            else:
                applied_norm = agg_norm
        else:
            clipped_norms = norms
            step = _average(deltas)
            agg_norm = applied_norm = float(np.linalg.norm(step))

        params = params + step
        metrics = None
        if metrics_fn is not None and config.eval_every > 0 and r % config.eval_every == 0:
            metrics = metrics_fn(params)
        trace.append(TraceRound(r, tuple(int(c) for c in selected), norms,
                                clipped_norms, agg_norm, applied_norm,
                                noise_key, metrics))
    return params, trace


def run_centralized(config: FedConfig, spec, head, train_set,
                    init_params: np.ndarray):
    """Baseline: rounds*epochs of mini-batch training on the pooled data,
    expressed as a federation of one so the trace format matches."""
    one = FedConfig(n_clients=1, clients_per_round=1,
                    local_epochs=config.rounds * config.local_epochs,
                    batch_size=config.batch_size, rounds=1, lr=config.lr,
                    scheme="stdfed", seed=config.seed,
                    local_opt=config.local_opt)
    return run_federated(one, None, spec, head, [train_set], init_params)
