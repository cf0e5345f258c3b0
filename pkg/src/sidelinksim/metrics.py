"""Loss-ratio estimators, confidence bounds, and the groupcast capacity search.

Capacity for a given background load is the largest groupcast rate whose loss
ratios (both traffic classes, upper 95% confidence bound) stay within the QoS
target, maximized over the number of transmission attempts by exhaustive
search. Probes share one seed set so that configurations under comparison see
common random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from . import engine, mac
from .scenario import ScenarioConfig

Z95 = 1.959963984540054


@dataclass(frozen=True)
class PlrEstimate:
    """Point estimate with a 95% confidence interval."""

    point: float
    lo: float
    hi: float
    n_samples: int


def wilson_interval(p_hat: float, n: float) -> tuple[float, float]:
    """Wilson score interval at 95%; well behaved at small proportions."""
    if n <= 0:
        return 0.0, 1.0
    z2 = Z95 * Z95
    denom = 1.0 + z2 / n
    center = (p_hat + z2 / (2.0 * n)) / denom
    half = Z95 * math.sqrt(p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _estimate(units) -> PlrEstimate:
    """Estimate from per-source (loss sum, packet count) units.

    The point estimate weights sources equally (mean of per-source means);
    the interval uses the total packet count as the sample size.
    """
    fractions = [(num / den) for num, den in units if den > 0]
    n = sum(den for _num, den in units)
    if not fractions:
        return PlrEstimate(0.0, 0.0, 1.0, 0)
    point = sum(fractions) / len(fractions)
    lo, hi = wilson_interval(point, n)
    return PlrEstimate(point, lo, hi, n)


def broadcast_stats(outcomes, topology) -> list[tuple[float, int]]:
    """Per measurable broadcaster: (sum of per-packet lost-receiver fractions,
    packet count). Packets with no in-range receiver are excluded."""
    measurable = set(topology.measurable_broadcasters)
    acc = {ue: [0.0, 0] for ue in sorted(measurable)}
    for o in outcomes:
        if o.kind != engine.BROADCAST or o.source not in measurable:
            continue
        n_rx = len(o.receivers)
        if n_rx == 0:
            continue
        lost = int((o.delivered_attempt == 0).sum())
        entry = acc[o.source]
        entry[0] += lost / n_rx
        entry[1] += 1
    return [(s, n) for s, n in acc.values()]


def groupcast_stats(outcomes, topology) -> list[tuple[int, int]]:
    """Per platoon member: (packets missing at least one member, packet count)."""
    acc = {ue: [0, 0] for ue in topology.platoon_members}
    for o in outcomes:
        if o.kind != engine.GROUPCAST:
            continue
        entry = acc[o.source]
        entry[0] += int((o.delivered_attempt == 0).any())
        entry[1] += 1
    return [(s, n) for s, n in acc.values()]


def plr_broadcast(outcomes, topology) -> PlrEstimate:
    """Mean over measurable broadcasters of their mean lost-receiver fraction."""
    return _estimate(broadcast_stats(outcomes, topology))


def plr_groupcast(outcomes, topology) -> PlrEstimate:
    """Mean over platoon members of their fraction of incompletely delivered packets."""
    return _estimate(groupcast_stats(outcomes, topology))


# -- per-run summaries usable across processes ------------------------------

@dataclass(frozen=True)
class RunStats:
    """Reduced, picklable summary of one simulation run."""

    seed: int
    duration_s: float
    occupancy: float
    broadcast_units: tuple
    groupcast_units: tuple
    n_broadcast_packets: int
    n_groupcast_packets: int
    mean_groupcast_attempts: float


def collect_run_stats(config: ScenarioConfig) -> RunStats:
    """Run one simulation and reduce it to pooled-estimator inputs."""
    result = engine.run(config)
    n_bc = sum(1 for o in result.outcomes if o.kind == engine.BROADCAST)
    n_gc = sum(1 for o in result.outcomes if o.kind == engine.GROUPCAST)
    return RunStats(
        seed=config.seed,
        duration_s=config.sim_duration_s,
        occupancy=engine.resource_occupancy(result),
        broadcast_units=tuple(tuple(u) for u in broadcast_stats(result.outcomes,
                                                                result.topology)),
        groupcast_units=tuple(tuple(u) for u in groupcast_stats(result.outcomes,
                                                                result.topology)),
        n_broadcast_packets=n_bc,
        n_groupcast_packets=n_gc,
        mean_groupcast_attempts=result.mean_groupcast_attempts,
    )


def pooled_estimate(stats_list, which: str) -> PlrEstimate:
    units = []
    for s in stats_list:
        units.extend(getattr(s, which))
    return _estimate(units)


# -- capacity search ---------------------------------------------------------

@dataclass(frozen=True)
class ProbeSettings:
    """Sampling policy for capacity probes."""

    n_seeds: int = 2
    resolution: float = 0.1            # packets/s
    lambda_max: float = 50.0
    target_packets: int = 2000         # groupcast packets per probe
    zero_target_packets: int = 10000   # broadcast packets for the zero-load probe
    min_duration_s: float = 30.0
    max_duration_s: float = 200.0
    tx_budget: float = 400_000.0       # soft cap on transmissions per run


@dataclass(frozen=True)
class ProbeResult:
    lambda_g: float
    k_g: int
    ok: bool
    plr_b: PlrEstimate
    plr_g: PlrEstimate
    occupancy: float
    mean_groupcast_attempts: float
    duration_s: float
    n_broadcast_packets: int
    n_groupcast_packets: int


@dataclass
class CandidateResult:
    k_g: int
    capacity: float
    boundary: ProbeResult | None      # the probe at the capacity point
    probes: list = field(default_factory=list)


@dataclass
class CapacityResult:
    lambda_b: float
    psfch_enabled: bool
    capacity: float
    best_k_g: int                     # 0 when no load is feasible at all
    zero_load_probe: ProbeResult
    candidates: list = field(default_factory=list)
    seeds: tuple = ()


def _bisection(lo: float, hi: float, resolution: float):
    """Coroutine bisection for a monotone pass->fail predicate.

    Yields probe points and receives their pass/fail result; returns the
    largest passing point, within one resolution step. Probes ``hi`` first so
    a saturated range is detected in one step.
    """
    ok = yield hi
    if ok:
        return hi
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        ok = yield mid
        if ok:
            lo = mid
        else:
            hi = mid
    return lo


def bisect_threshold(predicate, lo: float, hi: float, resolution: float) -> float:
    """Serial driver for :func:`_bisection`; assumes predicate(lo) is true."""
    gen = _bisection(lo, hi, resolution)
    x = next(gen)
    try:
        while True:
            x = gen.send(bool(predicate(x)))
    except StopIteration as stop:
        return stop.value


def probe_duration_s(config: ScenarioConfig, lambda_g: float, k_g: int,
                     settings: ProbeSettings) -> float:
    """Deterministic per-probe duration: long enough to observe the packet
    target, clamped, and shortened when the transmission volume would explode."""
    n_b = config.n_ues - config.platoon_size
    if lambda_g <= 0:
        rate = max(n_b * config.lambda_b, 1e-9)
        d = settings.zero_target_packets / (rate * settings.n_seeds)
    else:
        d = settings.target_packets / (config.platoon_size * lambda_g * settings.n_seeds)
    d = min(settings.max_duration_s, max(settings.min_duration_s, d))
    tx_rate = n_b * config.lambda_b * config.k_b \
        + config.platoon_size * lambda_g * k_g
    if tx_rate > 0:
        d = min(d, max(settings.min_duration_s, settings.tx_budget / tx_rate))
    return round(d, 3)


def _serial_run_many(configs):
    return [collect_run_stats(c) for c in configs]


def capacity_search(config: ScenarioConfig, lambda_b: float, psfch_enabled: bool,
                    *, k_candidates=None, settings: ProbeSettings = ProbeSettings(),
                    run_many=None) -> CapacityResult:
    """Exhaustive search over the attempt limit with a bisection on the
    groupcast rate per candidate.

    Every probe simulates the same seed set (common random numbers), so the
    search is deterministic, convergent, and invariant to candidate order.
    Returns capacity 0 when the zero-load probe already violates the QoS
    target. ``run_many`` maps a list of configs to their RunStats and may be
    backed by a worker pool; probes of all candidates advance in lockstep so
    the pool stays busy.
    """
    if lambda_b < 0:
        raise ValueError("lambda_b must be non-negative")
    run_many = run_many or _serial_run_many
    base = config.replace(lambda_b=lambda_b, psfch_enabled=psfch_enabled)
    k_max = mac.max_attempts(base.latency_budget_ms, base.radio.slot_duration_us,
                             base.ack_delay_ms, psfch_enabled)
    if k_candidates is None:
        candidates = list(range(1, k_max + 1))
    else:
        candidates = sorted(set(int(k) for k in k_candidates))
        if not candidates or candidates[0] < 1 or candidates[-1] > k_max:
            raise ValueError(f"k_candidates must lie within [1, {k_max}]")
    seeds = [base.seed + 7919 * i for i in range(settings.n_seeds)]
    qos = base.plr_qos

    def jobs_for(lambda_g: float, k_g: int) -> list[ScenarioConfig]:
        dur = probe_duration_s(base, lambda_g, k_g, settings)
        return [base.replace(lambda_g=lambda_g, k_g=k_g,
                             sim_duration_s=dur, seed=s) for s in seeds]

    def assess(lambda_g: float, k_g: int, stats) -> ProbeResult:
        plr_b = pooled_estimate(stats, "broadcast_units")
        plr_g = pooled_estimate(stats, "groupcast_units")
        ok = plr_b.hi <= qos and (plr_g.n_samples == 0 or plr_g.hi <= qos)
        n_runs = len(stats)
        return ProbeResult(
            lambda_g=lambda_g, k_g=k_g, ok=ok, plr_b=plr_b, plr_g=plr_g,
            occupancy=sum(s.occupancy for s in stats) / n_runs,
            mean_groupcast_attempts=sum(s.mean_groupcast_attempts for s in stats) / n_runs,
            duration_s=stats[0].duration_s,
            n_broadcast_packets=sum(s.n_broadcast_packets for s in stats),
            n_groupcast_packets=sum(s.n_groupcast_packets for s in stats))

    zero_probe = assess(0.0, candidates[0], run_many(jobs_for(0.0, candidates[0])))
    if not zero_probe.ok:
        return CapacityResult(lambda_b, psfch_enabled, 0.0, 0, zero_probe,
                              [CandidateResult(k, 0.0, None) for k in candidates],
                              seeds=tuple(seeds))

    searchers = {}
    pending = []  # (k_g, lambda to probe)
    for k in candidates:
        gen = _bisection(0.0, settings.lambda_max, settings.resolution)
        searchers[k] = {"gen": gen, "result": CandidateResult(k, 0.0, None)}
        pending.append((k, next(gen)))

    while pending:
        jobs, spans = [], []
        for k, lam in pending:
            batch = jobs_for(lam, k)
            spans.append((k, lam, len(batch)))
            jobs.extend(batch)
        stats = run_many(jobs)
        pending = []
        pos = 0
        for k, lam, count in spans:
            probe = assess(lam, k, stats[pos:pos + count])
            pos += count
            state = searchers[k]
            state["result"].probes.append(probe)
            if probe.ok and (state["result"].boundary is None
                             or probe.lambda_g > state["result"].boundary.lambda_g):
                state["result"].boundary = probe
            try:
                nxt = state["gen"].send(probe.ok)
                pending.append((k, nxt))
            except StopIteration as stop:
                state["result"].capacity = stop.value

    results = [searchers[k]["result"] for k in candidates]
    for r in results:
        r.probes.sort(key=lambda p: p.lambda_g)
    # Quantize to the search resolution for the argmax; ties favour fewer attempts.
    def quantized(r):
        return round(r.capacity / settings.resolution)
    best = max(results, key=lambda r: (quantized(r), -r.k_g))
    capacity = best.capacity if quantized(best) > 0 else 0.0
    best_k = best.k_g if quantized(best) > 0 else 0
    return CapacityResult(lambda_b, psfch_enabled, capacity, best_k,
                          zero_probe, results, seeds=tuple(seeds))
