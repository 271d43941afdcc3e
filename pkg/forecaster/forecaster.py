"""Remaining-time forecasting: Monte Carlo sampling of the time until a target step begins."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from config.models import ForecastConfig
from core.errors import NoPathError, UnreachableTargetError
from procedure.graph import TransitionGraph, enumerate_trajectories
from tracker.tracker import BeliefState


@dataclass(frozen=True)
class RemainingTimeDistribution:
    target: int
    t: float
    samples: np.ndarray
    bin_width: float
    expectation: float
    entropy: float
    reachable_mass: float

    def histogram(self) -> List[Tuple[float, float]]:
        """(bin start in seconds, probability) pairs over occupied bins."""
        if self.samples.size == 0:
            return []
        bins, counts = np.unique(_bin_index(self.samples, self.bin_width), return_counts=True)
        total = counts.sum()
        return [(float(b * self.bin_width), float(c / total)) for b, c in zip(bins, counts)]


@dataclass(frozen=True)
class _OriginPlan:
    cumulative: np.ndarray      # cumulative trajectory probabilities
    incidence: np.ndarray       # (n_trajectories, n_steps) 0/1 intermediate-step membership


@dataclass(frozen=True)
class _TargetPlan:
    target_index: int
    origins: Tuple[Optional[_OriginPlan], ...]   # None where the target is unreachable


def _bin_index(samples: np.ndarray, bin_width: float) -> np.ndarray:
    return np.floor(samples / bin_width + 1e-9).astype(np.int64)


def histogram_entropy(samples: np.ndarray, bin_width: float) -> float:
    """Shannon entropy in nats of the bin_width-wide histogram of samples."""
    _, counts = np.unique(_bin_index(samples, bin_width), return_counts=True)
    return float(stats.entropy(counts))


@lru_cache(maxsize=256)
def _target_plan(graph: TransitionGraph, target: int, max_paths: int) -> _TargetPlan:
    n = graph.n_steps
    origins: List[Optional[_OriginPlan]] = []
    for step_id in graph.step_ids:
        if step_id == target:
            origins.append(None)
            continue
        try:
            trajectory_set = enumerate_trajectories(graph, step_id, target, max_paths)
        except NoPathError:
            origins.append(None)
            continue
        incidence = np.zeros((len(trajectory_set.trajectories), n))
        for row, trajectory in enumerate(trajectory_set.trajectories):
            for step in trajectory.path[1:-1]:
                incidence[row, graph.index_of[step]] = 1.0
        cumulative = np.cumsum([trajectory.prob for trajectory in trajectory_set.trajectories])
        cumulative[-1] = 1.0
        origins.append(_OriginPlan(cumulative=cumulative, incidence=incidence))
    return _TargetPlan(target_index=graph.index_of[target], origins=tuple(origins))


def _draw_durations(graph: TransitionGraph, cfg: ForecastConfig, uniforms: np.ndarray) -> np.ndarray:
    """Step durations by inverse CDF; column j depends on uniforms[:, j] only."""
    durations = np.tile(np.maximum(graph.mean_durations, cfg.min_duration), (uniforms.shape[0], 1))
    if cfg.duration_model == "fixed-mean":
        return durations
    varying = np.flatnonzero(graph.std_durations > 0)
    if varying.size:
        loc = graph.mean_durations[varying]
        scale = graph.std_durations[varying]
        lower = (cfg.min_duration - loc) / scale
        durations[:, varying] = stats.truncnorm.ppf(uniforms[:, varying], lower, np.inf, loc=loc, scale=scale)
    return durations


def _remaining(plan: _TargetPlan, current: np.ndarray, trajectory_u: np.ndarray, durations: np.ndarray,
               belief: BeliefState) -> np.ndarray:
    remaining = np.full(current.size, np.nan)
    remaining[current == plan.target_index] = 0.0
    for origin_index in np.unique(current):
        origin = plan.origins[origin_index]
        if origin is None:
            continue
        rows = np.flatnonzero(current == origin_index)
        picked = np.searchsorted(origin.cumulative, trajectory_u[rows], side='right')
        picked = np.minimum(picked, len(origin.cumulative) - 1)
        residual = np.maximum(durations[rows, origin_index] - belief.elapsed_in_step[origin_index], 0.0)
        transit = np.einsum('ij,ij->i', durations[rows], origin.incidence[picked])
        remaining[rows] = residual + transit
    return remaining


def _sample_chunk(graph: TransitionGraph, plans: Sequence[_TargetPlan], belief: BeliefState, cfg: ForecastConfig,
                  size: int, key: Tuple[int, ...]) -> List[np.ndarray]:
    """Remaining times per plan for one chunk, all from the same draws; NaN marks unreachable samples."""
    rng = np.random.default_rng(list(key))
    cumulative_state = np.cumsum(belief.posterior)
    current = np.searchsorted(cumulative_state, rng.random(size) * cumulative_state[-1], side='right')
    current = np.minimum(current, graph.n_steps - 1)
    trajectory_u = rng.random(size)
    durations = _draw_durations(graph, cfg, rng.random((size, graph.n_steps)))
    return [_remaining(plan, current, trajectory_u, durations, belief) for plan in plans]


def _reachable_mass(plan: _TargetPlan, belief: BeliefState) -> float:
    reachable = np.array([
        index == plan.target_index or origin is not None
        for index, origin in enumerate(plan.origins)
    ])
    return float(np.clip(belief.posterior[reachable].sum(), 0.0, 1.0))


def sample_remaining_times(graph: TransitionGraph, belief: BeliefState, targets: Iterable[int],
                           cfg: ForecastConfig = ForecastConfig()) -> Dict[int, RemainingTimeDistribution]:
    """Monte Carlo distributions of the time until each target begins, sharing one set of draws per tick.

    A target's samples depend only on (graph, belief, target, cfg), not on which
    other targets are requested alongside it. Targets unreachable from the
    belief are left out of the result.
    """
    plans: Dict[int, Tuple[_TargetPlan, float]] = {}
    for target in targets:
        if target not in graph.index_of:
            raise UnreachableTargetError(f"unknown target step s{target}")
        plan = _target_plan(graph, target, cfg.max_paths)
        reachable_mass = _reachable_mass(plan, belief)
        if reachable_mass <= 0.0:
            logging.debug(f"s{target} is unreachable from every step with posterior mass at t={belief.t:.2f}")
            continue
        plans[target] = (plan, reachable_mass)
    if not plans:
        return {}

    ordered = sorted(plans)
    target_plans = [plans[target][0] for target in ordered]
    tick_key = int(round(belief.t * 1000))
    n_chunks = math.ceil(cfg.n_samples / cfg.chunk_size)
    sizes = [min(cfg.chunk_size, cfg.n_samples - i * cfg.chunk_size) for i in range(n_chunks)]
    keys = [(cfg.seed & 0xFFFFFFFFFFFFFFFF, tick_key, i) for i in range(n_chunks)]

    if cfg.workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            chunks = list(executor.map(
                lambda args: _sample_chunk(graph, target_plans, belief, cfg, *args), zip(sizes, keys)))
    else:
        chunks = [_sample_chunk(graph, target_plans, belief, cfg, size, key) for size, key in zip(sizes, keys)]

    distributions: Dict[int, RemainingTimeDistribution] = {}
    for position, target in enumerate(ordered):
        raw = np.concatenate([chunk[position] for chunk in chunks])
        samples = raw[~np.isnan(raw)]
        if samples.size == 0:
            # every draw landed on unreachable steps although some reachable mass exists
            logging.warning(f"No reachable samples for s{target} at t={belief.t:.2f} "
                            f"(reachable mass {plans[target][1]:.2e})")
            continue
        distributions[target] = RemainingTimeDistribution(
            target=target,
            t=belief.t,
            samples=samples,
            bin_width=cfg.bin_width,
            expectation=float(np.mean(samples)),
            entropy=histogram_entropy(samples, cfg.bin_width),
            reachable_mass=plans[target][1],
        )
    return distributions


def sample_remaining_time(graph: TransitionGraph, belief: BeliefState, target: int,
                          cfg: ForecastConfig = ForecastConfig()) -> RemainingTimeDistribution:
    """Monte Carlo distribution of the time until target begins, given the current belief."""
    dist = sample_remaining_times(graph, belief, [target], cfg).get(target)
    if dist is None:
        raise UnreachableTargetError(f"s{target} is unreachable from the belief at t={belief.t:.2f}")
    return dist


def summarize(dist: RemainingTimeDistribution) -> Tuple[float, float]:
    """(expectation in seconds, entropy in nats) of a sampled distribution."""
    if dist.reachable_mass <= 0 or dist.samples.size == 0:
        raise UnreachableTargetError(f"empty remaining-time distribution for s{dist.target}")
    return float(np.mean(dist.samples)), histogram_entropy(dist.samples, dist.bin_width)


def exact_expected_remaining_time(graph: TransitionGraph, belief: BeliefState, target: int,
                                  max_paths: int = ForecastConfig().max_paths) -> float:
    """Closed-form E[remaining] by trajectory enumeration with mean durations."""
    if target not in graph.index_of:
        raise UnreachableTargetError(f"unknown target step s{target}")
    plan = _target_plan(graph, target, max_paths)
    weighted = 0.0
    mass = 0.0
    for index, step_id in enumerate(graph.step_ids):
        p = float(belief.posterior[index])
        if p <= 0:
            continue
        if step_id == target:
            mass += p
            continue
        if plan.origins[index] is None:
            continue
        trajectory_set = enumerate_trajectories(graph, step_id, target, max_paths)
        residual = max(graph.mean_durations[index] - belief.elapsed_in_step[index], 0.0)
        expected = math.fsum(tr.prob * (residual + tr.mean_transit_time) for tr in trajectory_set.trajectories)
        weighted += p * expected
        mass += p
    if mass <= 0:
        raise UnreachableTargetError(f"s{target} is unreachable from the current belief")
    return weighted / mass


def dump_record(dist: RemainingTimeDistribution) -> Dict[str, Any]:
    """JSON-ready per-tick record for plotting remaining-time panels."""
    return {
        "t": round(dist.t, 6),
        "target": dist.target,
        "expectation": dist.expectation,
        "entropy": dist.entropy,
        "reachable_mass": dist.reachable_mass,
        "histogram": [[start, prob] for start, prob in dist.histogram()],
    }
