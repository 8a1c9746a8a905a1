"""Distributed execution engine.

A single manager gates the M step on a gamma-fraction of fresh worker
E-step results and keeps the latest copy of every worker's statistics for
the rest.  The deterministic scheduler serializes completion order so runs
are exactly reproducible (and single-threaded); the real scheduler uses a
thread pool and wall-clock completion order.

Log-likelihood bookkeeping: in the default mode the manager estimates the
full-data log likelihood from the cached per-subset headers, which are
anchored at each worker's last accepted parameter.  The estimate therefore
lags the current parameter by one round and is stale for non-reporting
workers; traces carry a flag saying which mode produced them.  Iteration 1
reuses the seeding-round results (everyone just reported at theta0), so
the stopping rule only starts comparing at iteration 2.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import (
    ConvergenceMonitor,
    ModelContract,
    ProtocolError,
    Trace,
    aggregate_stats,
)
from .transport import make_pool

SCHEMES = ("naive_allpairs", "synchronous", "asynchronous")
SCHEDULERS = ("real", "deterministic")
TRANSPORTS = ("in_process", "socket")
COMPLETION_POLICIES = ("restart", "finish")


@dataclass
class RunConfig:
    K: int
    gamma: float = 1.0
    tol: float = 1e-7
    max_iter: int = 1000
    seed: int = 0
    scheme: str = "asynchronous"
    scheduler: str = "deterministic"
    transport: str = "in_process"
    exact_loglik_check: bool = False
    forced_split: bool = False
    # what a worker does with an E step that missed its iteration's gate:
    # "restart" drops it and restarts at the newest broadcast, "finish"
    # delivers the stale result and counts it toward the next accept set.
    completion: str = "restart"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.completion not in COMPLETION_POLICIES:
            raise ValueError(f"unknown completion policy {self.completion!r}")
        if self.accept_threshold < 1:
            raise ValueError("ceil(gamma * K) must be >= 1")

    @property
    def accept_threshold(self) -> int:
        """Smallest N with N/K >= gamma."""
        return math.ceil(self.gamma * self.K)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "gamma": self.gamma,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "seed": self.seed,
            "scheme": self.scheme,
            "scheduler": self.scheduler,
            "transport": self.transport,
            "exact_loglik_check": self.exact_loglik_check,
            "forced_split": self.forced_split,
            "completion": self.completion,
        }


def deterministic_schedule(
    seed: int, t: int, K: int, forced_split: bool = False
) -> np.ndarray:
    """Seeded completion permutation of the workers at iteration t.

    In forced-split mode the permutation is the identity, pinning the
    accept set to the first ceil(gamma*K) workers at every iteration.
    """
    if forced_split:
        return np.arange(K)
    rng = np.random.default_rng([int(seed), int(t)])
    return rng.permutation(K)


def _full_loglik(pool, theta, K: int) -> float:
    return math.fsum(pool.loglik(k, theta) for k in range(K))


def run_dem(config: RunConfig, model: ModelContract, subsets: Sequence, theta0):
    """Asynchronous manager loop over K worker subsets.

    A synchronous seeding round fills the cache at theta0 so the very first
    M step already has one E-step result per subset; afterwards each
    iteration accepts fresh results until the gamma gate is met, reruns the
    conditional maximization on the combined cache, and broadcasts.
    """
    K = len(subsets)
    if K != config.K:
        raise ProtocolError(f"config.K={config.K} but {K} subsets supplied")
    if config.scheduler == "real":
        return _run_dem_real(config, model, subsets, theta0)

    pool = make_pool(config.transport, model, subsets)
    monitor = ConvergenceMonitor(tol=config.tol, max_iter=config.max_iter)
    N = config.accept_threshold
    trace = Trace(loglik_exact=config.exact_loglik_check, config=config.to_dict())
    try:
        t0 = time.perf_counter()
        cache = {k: pool.estep(k, theta0, anchor_tag=0) for k in range(K)}
        anchors = [0] * K
        trace.thetas.append(theta0)
        trace.anchor_tags.append(list(anchors))
        trace.staleness.append([0] * K)
        L = (
            _full_loglik(pool, theta0, K)
            if config.exact_loglik_check
            else aggregate_stats(cache, K).local_loglik_at_anchor
        )
        trace.logliks.append(L)
        monitor.update(0, L)
        trace.wall_times.append(time.perf_counter() - t0)

        theta = theta0
        in_flight: dict[int, int] = {}  # worker -> anchor tag of a pending E step
        for t in range(1, config.max_iter + 1):
            t0 = time.perf_counter()
            perm = deterministic_schedule(config.seed, t, K, config.forced_split)
            accepted = []
            if t == 1:
                # the seeding messages are iteration 1's fresh results
                accepted = list(perm[:N])
            else:
                for k in sorted(in_flight):
                    if len(accepted) >= N:
                        break
                    tag = in_flight.pop(k)
                    cache[k] = pool.estep(k, trace.thetas[tag], anchor_tag=tag)
                    anchors[k] = tag
                    accepted.append(k)
                for k in perm:
                    if k in accepted or k in in_flight:
                        continue
                    if len(accepted) < N:
                        cache[k] = pool.estep(k, theta, anchor_tag=t - 1)
                        anchors[k] = t - 1
                        accepted.append(k)
                    elif config.completion == "finish":
                        in_flight[k] = t - 1
            agg = aggregate_stats(cache, K)
            theta = model.cm_steps(agg, theta)
            L = (
                _full_loglik(pool, theta, K)
                if config.exact_loglik_check
                else agg.local_loglik_at_anchor
            )
            trace.thetas.append(theta)
            trace.logliks.append(L)
            trace.accept_sets.append(sorted(int(k) for k in accepted))
            trace.anchor_tags.append(list(anchors))
            trace.staleness.append([t - a for a in anchors])
            trace.wall_times.append(time.perf_counter() - t0)
            converged = monitor.update(t, L)
            if converged and (t >= 2 or config.exact_loglik_check):
                trace.converged = True
                break
        else:
            trace.hit_max_iter = True
        trace.final_loglik = _full_loglik(pool, theta, K)
        trace.messages_sent = pool.messages_sent
    finally:
        pool.close()
    return theta, trace


def _run_dem_real(config: RunConfig, model: ModelContract, subsets: Sequence, theta0):
    """Wall-clock ordered variant: workers run on a thread pool and the
    manager accepts the first gamma-fraction of completions."""
    from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait

    K = len(subsets)
    N = config.accept_threshold
    monitor = ConvergenceMonitor(tol=config.tol, max_iter=config.max_iter)
    trace = Trace(loglik_exact=config.exact_loglik_check, config=config.to_dict())
    messages = 0
    with ThreadPoolExecutor(max_workers=min(K, 8)) as pool:
        t0 = time.perf_counter()
        futures = {
            pool.submit(model.local_estep, theta0, subsets[k], k, 0): k
            for k in range(K)
        }
        cache = {futures[f]: f.result() for f in futures}
        messages += 2 * K
        anchors = [0] * K
        trace.thetas.append(theta0)
        trace.anchor_tags.append(list(anchors))
        trace.staleness.append([0] * K)
        L = math.fsum(cache[k].local_loglik_at_anchor for k in range(K))
        trace.logliks.append(L)
        monitor.update(0, L)
        trace.wall_times.append(time.perf_counter() - t0)

        theta = theta0
        for t in range(1, config.max_iter + 1):
            t0 = time.perf_counter()
            if t == 1:
                accepted = list(range(N))
            else:
                pending = {
                    pool.submit(model.local_estep, theta, subsets[k], k, t - 1): k
                    for k in range(K)
                }
                accepted = []
                while len(accepted) < N and pending:
                    done, _ = wait(list(pending), return_when=FIRST_COMPLETED)
                    for f in done:
                        k = pending.pop(f)
                        if len(accepted) < N:
                            cache[k] = f.result()
                            anchors[k] = t - 1
                            accepted.append(k)
                # remaining workers restart at the next broadcast
                for f in pending:
                    f.cancel()
                messages += 2 * K
            theta = model.cm_steps(aggregate_stats(cache, K), theta)
            L = math.fsum(cache[k].local_loglik_at_anchor for k in range(K))
            if config.exact_loglik_check:
                L = math.fsum(model.local_loglik(theta, s) for s in subsets)
            trace.thetas.append(theta)
            trace.logliks.append(L)
            trace.accept_sets.append(sorted(accepted))
            trace.anchor_tags.append(list(anchors))
            trace.staleness.append([t - a for a in anchors])
            trace.wall_times.append(time.perf_counter() - t0)
            converged = monitor.update(t, L)
            if converged and (t >= 2 or config.exact_loglik_check):
                trace.converged = True
                break
        else:
            trace.hit_max_iter = True
        trace.final_loglik = math.fsum(model.local_loglik(theta, s) for s in subsets)
        trace.messages_sent = messages
    return theta, trace


def run_ecme0(config: RunConfig, model: ModelContract, data: Sequence, theta0):
    """Non-distributed baseline: full E step, conditional maximizations,
    same stopping rule.  Likelihood ascent is asserted each iteration."""
    monitor = ConvergenceMonitor(tol=config.tol, max_iter=config.max_iter)
    trace = Trace(loglik_exact=True, config=config.to_dict() | {"algo": "ecme0"})
    theta = theta0
    trace.thetas.append(theta0)
    trace.anchor_tags.append([0])
    trace.staleness.append([0])
    t0 = time.perf_counter()
    stats = model.local_estep(theta0, data, subset_id=0, anchor_tag=0)
    L = stats.local_loglik_at_anchor
    trace.logliks.append(L)
    monitor.update(0, L)
    trace.wall_times.append(time.perf_counter() - t0)
    for t in range(1, config.max_iter + 1):
        t0 = time.perf_counter()
        if t > 1:
            stats = model.local_estep(theta, data, subset_id=0, anchor_tag=t - 1)
        L_new = stats.local_loglik_at_anchor
        if L_new < L - 1e-9 * max(1.0, abs(L)):
            raise AssertionError(
                f"log likelihood decreased at iteration {t}: {L} -> {L_new}"
            )
        L = L_new
        theta = model.cm_steps(stats, theta)
        trace.thetas.append(theta)
        trace.logliks.append(L)
        trace.accept_sets.append([0])
        trace.anchor_tags.append([t - 1])
        trace.staleness.append([0])
        trace.wall_times.append(time.perf_counter() - t0)
        converged = monitor.update(t, L)
        if converged and t >= 2:
            trace.converged = True
            break
    else:
        trace.hit_max_iter = True
    trace.final_loglik = model.local_loglik(theta, data)
    trace.messages_sent = 0
    return theta, trace


def run_scheme(scheme: str, config: RunConfig, model: ModelContract,
               subsets: Sequence, theta0):
    """Synchronous communication patterns, for protocol comparison.

    naive_allpairs: every process sends its E-step result to every other
    process and computes the update locally (K*(K-1) payloads per
    iteration); synchronous: manager/worker with gamma = 1 (2K payloads).
    """
    if scheme == "synchronous":
        cfg = RunConfig(**{**config.to_dict(), "gamma": 1.0, "scheme": "synchronous"})
        return run_dem(cfg, model, subsets, theta0)
    if scheme != "naive_allpairs":
        raise ValueError(f"run_scheme only handles schemes 'naive_allpairs' and "
                         f"'synchronous', got {scheme!r}")
    K = len(subsets)
    monitor = ConvergenceMonitor(tol=config.tol, max_iter=config.max_iter)
    trace = Trace(loglik_exact=False, config=config.to_dict() | {"scheme": scheme})
    theta = theta0
    cache = {k: model.local_estep(theta0, subsets[k], k, 0) for k in range(K)}
    trace.messages_sent += K * (K - 1)
    trace.thetas.append(theta0)
    trace.anchor_tags.append([0] * K)
    trace.staleness.append([0] * K)
    agg = aggregate_stats(cache, K)
    L = agg.local_loglik_at_anchor
    trace.logliks.append(L)
    monitor.update(0, L)
    trace.wall_times.append(0.0)
    for t in range(1, config.max_iter + 1):
        t0 = time.perf_counter()
        if t > 1:
            cache = {k: model.local_estep(theta, subsets[k], k, t - 1)
                     for k in range(K)}
            trace.messages_sent += K * (K - 1)
        agg = aggregate_stats(cache, K)
        # each peer aggregates the same K payloads and updates locally
        per_peer = [model.cm_steps(agg, theta) for _ in range(K)]
        for other in per_peer[1:]:
            if not (
                np.array_equal(other.beta, per_peer[0].beta)
                and np.array_equal(other.L, per_peer[0].L)
                and other.tau2 == per_peer[0].tau2
            ):
                raise ProtocolError("peers computed diverging updates")
        theta = per_peer[0]
        L = agg.local_loglik_at_anchor
        trace.thetas.append(theta)
        trace.logliks.append(L)
        trace.accept_sets.append(list(range(K)))
        trace.anchor_tags.append([t - 1] * K)
        trace.staleness.append([1] * K)
        trace.wall_times.append(time.perf_counter() - t0)
        converged = monitor.update(t, L)
        if converged and t >= 2:
            trace.converged = True
            break
    else:
        trace.hit_max_iter = True
    trace.final_loglik = math.fsum(model.local_loglik(theta, s) for s in subsets)
    return theta, trace
