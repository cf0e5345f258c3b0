"""Slot-driven simulation core.

Advances time slot by slot, resolves concurrent transmissions into
per-receiver SINRs, runs control-then-data decoding, exchanges delayed
acknowledgments, and emits one delivery record per packet. A run is
single-threaded and bit-deterministic for a given configuration and seed.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import mac, phy
from .scenario import (ArrivalSchedule, ScenarioConfig, Topology,
                       generate_topology, generate_traffic)
from .streams import stream

log = logging.getLogger(__name__)

BROADCAST = "broadcast"
GROUPCAST = "groupcast"


@dataclass(eq=False)
class PacketOutcome:
    """Per-packet, per-intended-receiver delivery record."""

    packet_id: int
    source: int
    kind: str
    receivers: np.ndarray          # intended receiver UE indices, sorted
    delivered_attempt: np.ndarray  # 0 = lost, k > 0 = first successful attempt
    distances_m: np.ndarray


@dataclass
class SlotEvents:
    """Everything the engine handles within one slot."""

    slot: int
    transmissions: list   # (HarqProcess, attempt index)
    feedback_due: list    # (HarqProcess, rx index array, ack flag array)


@dataclass(eq=False)
class SimResult:
    config: ScenarioConfig
    topology: Topology
    outcomes: list
    tx_log: np.ndarray       # rows: slot, source, first subchannel, width
    duration_slots: int
    mean_groupcast_attempts: float


def run(config: ScenarioConfig, topology: Topology | None = None,
        schedule: ArrivalSchedule | None = None, *, trace=None) -> SimResult:
    """Simulate one scenario and return every packet's outcome.

    Topology and traffic are generated from the config seed when not given.
    ``trace`` may be a writable text file; it receives one line per
    transmission with the per-receiver decode results.
    """
    config.validate()
    if topology is None:
        topology = generate_topology(config, stream(config.seed, "topology"))
    if schedule is None:
        schedule = generate_traffic(config, topology, stream(config.seed, "traffic"))
    if len(schedule.times_s) != config.n_ues or len(topology.positions_m) != config.n_ues:
        raise ValueError("topology/schedule inconsistent with the configuration")
    return _Simulation(config, topology, schedule, trace).run()


def resource_occupancy(result: SimResult) -> float:
    """Fraction of slot x subchannel units carrying data within the configured
    duration (the drain period after it is excluded)."""
    if result.duration_slots <= 0:
        return 0.0
    rows = result.tx_log
    total = result.duration_slots * result.config.radio.n_subchannels
    if rows.size == 0:
        return 0.0
    used = int(rows[rows[:, 0] < result.duration_slots, 3].sum())
    return used / total


class _Simulation:
    def __init__(self, config, topology, schedule, trace):
        self.cfg = config
        self.topo = topology
        self.trace = trace
        radio = config.radio
        self.fmt = mac.slot_format(config.psfch_enabled)
        self.width = mac.subchannels_required(radio.packet_size_bytes, self.fmt, radio)
        self.n_sub = radio.n_subchannels
        self.n = config.n_ues
        self.model = phy.make_error_model(radio)
        self.mac_rng = stream(config.seed, "mac")
        self.phy_rng = stream(config.seed, "phy")

        pos = topology.positions_m
        dist = np.abs(pos[:, None] - pos[None, :])
        safe = np.maximum(dist, radio.ref_distance_m)
        self.rxpow_mw = phy.db_to_linear(radio.tx_power_dbm - phy.path_loss_db(safe, radio))
        np.fill_diagonal(self.rxpow_mw, 0.0)
        self.noise_data_mw = phy.db_to_linear(phy.noise_power_dbm(radio, self.width))
        self.noise_fb_mw = phy.db_to_linear(phy.noise_power_dbm(radio, 1))
        # Control and data share the grant's SINR; the control channel is only
        # more robust through its lower decode threshold. The interference-free
        # probabilities below let single-transmitter slots skip all SINR math.
        with np.errstate(divide="ignore"):
            snr_data_db = 10.0 * np.log10(self.rxpow_mw / self.noise_data_mw)
        self.p_ctrl_static = self.model.success_probability(snr_data_db, phy.PSCCH)
        self.p_data_static = self.model.success_probability(snr_data_db, phy.PSSCH)

        in_range = dist <= config.comm_range_m
        np.fill_diagonal(in_range, False)
        self.in_range = [np.flatnonzero(in_range[i]).astype(np.int32) for i in range(self.n)]
        self.platoon = frozenset(topology.platoon_members)
        self.group_dest = {m: np.array([x for x in topology.platoon_members if x != m],
                                       dtype=np.int32)
                           for m in topology.platoon_members}

        self.duration_slots = config.duration_slots
        self.budget_slots = config.budget_slots
        self.ack_slots = config.ack_slots
        self.min_gap = self.ack_slots + 1

        slot_s = config.slot_duration_s
        arr_slot, arr_ue = [], []
        for ue, times in enumerate(schedule.times_s):
            s = (times / slot_s).astype(np.int64)
            arr_slot.append(s)
            arr_ue.append(np.full(len(s), ue, dtype=np.int64))
        arr_slot = np.concatenate(arr_slot) if arr_slot else np.empty(0, np.int64)
        arr_ue = np.concatenate(arr_ue) if arr_ue else np.empty(0, np.int64)
        order = np.lexsort((arr_ue, arr_slot))
        self.arr_slot = arr_slot[order]
        self.arr_ue = arr_ue[order]

        self.sched: dict[int, list] = {}
        self.fb_due: dict[int, list] = {}
        self.event_heap: list[int] = []
        self.busy = [set() for _ in range(self.n)]
        # Announcements heard across the network: (last reserved slot,
        # who decoded the control channel, the reservation list).
        self.announcements = deque()
        self.outcomes: list[PacketOutcome] = []
        self.outcome_of: dict[int, PacketOutcome] = {}
        self.soft_sinr: dict[int, np.ndarray] = {}
        self.tx_rows: list[tuple[int, int, int, int]] = []
        self.gc_attempts = 0
        self.gc_packets = 0

    # -- packet admission ------------------------------------------------

    def _sensing_for(self, ue: int, now: int) -> mac.SensingState:
        state = mac.SensingState(horizon_slots=self.budget_slots)
        for last_slot, heard, reservations in self.announcements:
            if last_slot <= now or not heard[ue]:
                continue
            for r in reservations:
                if r.slot > now:
                    state.add(r)
        return state

    def _admit_packet(self, pid: int, src: int, gen_slot: int) -> None:
        if src in self.platoon:
            kind = GROUPCAST
            receivers = self.group_dest[src]
            feedback = self.cfg.psfch_enabled
            k = self.cfg.k_g
            self.gc_packets += 1
        else:
            kind = BROADCAST
            receivers = self.in_range[src]
            feedback = False
            k = self.cfg.k_b
        proc = mac.HarqProcess(
            packet_id=pid, source=src,
            destinations=tuple(int(x) for x in receivers) if kind == GROUPCAST else (),
            generation_slot=gen_slot, deadline_slot=gen_slot + self.budget_slots,
            max_attempts=k, width=self.width, feedback=feedback,
            min_gap_slots=self.min_gap if feedback else 1)
        outcome = PacketOutcome(
            packet_id=pid, source=src, kind=kind,
            receivers=receivers.copy(),
            delivered_attempt=np.zeros(len(receivers), dtype=np.int16),
            distances_m=np.abs(self.topo.positions_m[receivers]
                               - self.topo.positions_m[src]).astype(np.float32))
        self.outcomes.append(outcome)
        self.outcome_of[pid] = outcome

        sensing = self._sensing_for(src, gen_slot)
        picks = mac.select_resources(proc, sensing, gen_slot, self.n_sub,
                                     self.mac_rng, busy_slots=self.busy[src])
        if not picks:
            proc.state = mac.EXPIRED
            return
        proc.planned = picks
        if feedback:
            proc.acks_pending = set(proc.destinations)
        if self.cfg.harq_combining:
            self.soft_sinr[pid] = np.zeros(len(receivers))
        for i, (slot, _start) in enumerate(picks):
            self.sched.setdefault(slot, []).append((proc, i))
            self.busy[src].add(slot)
            heapq.heappush(self.event_heap, slot)

    # -- slot processing --------------------------------------------------

    def _process_transmissions(self, t: int, entries: list) -> None:
        live = [(p, i) for p, i in entries if p.state == mac.ACTIVE]
        if not live:
            return
        live.sort(key=lambda e: (e[0].source, e[0].packet_id))
        n_tx = len(live)
        sources = np.array([p.source for p, _ in live])
        starts = np.array([p.planned[i][1] for p, i in live])
        rows = self.rxpow_mw[sources]                       # n_tx x N received power

        w = self.width
        sj = starts[:, None]
        sk = starts[None, :]
        # Pairwise interference weights: fraction of k's subchannels inside j's grant.
        weights = np.maximum(w - np.abs(sj - sk), 0) / w
        np.fill_diagonal(weights, 0.0)

        if weights.any():
            interference = weights @ rows
            with np.errstate(divide="ignore"):
                sinr_data_db = 10.0 * np.log10(rows / (self.noise_data_mw + interference))
            p_ctrl = self.model.success_probability(sinr_data_db, phy.PSCCH)
            p_data = self.model.success_probability(sinr_data_db, phy.PSSCH)
        else:
            sinr_data_db = None
            p_ctrl = self.p_ctrl_static[sources]
            p_data = self.p_data_static[sources]

        ok_ctrl = self.phy_rng.random((n_tx, self.n)) < p_ctrl
        if self.cfg.half_duplex:
            ok_ctrl[:, sources] = False           # a transmitting UE hears nothing
        else:
            ok_ctrl[np.arange(n_tx), sources] = False
        data_draws = self.phy_rng.random((n_tx, self.n))

        for j, (proc, attempt_idx) in enumerate(live):
            attempt_no = attempt_idx + 1
            proc.attempts_done = attempt_no
            src = proc.source
            self.busy[src].discard(t)
            self.tx_rows.append((t, src, int(starts[j]), w))
            if proc.packet_id in self.outcome_of \
                    and self.outcome_of[proc.packet_id].kind == GROUPCAST:
                self.gc_attempts += 1

            outcome = self.outcome_of[proc.packet_id]
            rec = outcome.receivers
            ctrl_ok = ok_ctrl[j, rec]
            if self.cfg.harq_combining:
                acc = self.soft_sinr[proc.packet_id]
                if sinr_data_db is not None:
                    lin = phy.db_to_linear(sinr_data_db[j, rec])
                else:
                    lin = rows[j, rec] / self.noise_data_mw
                acc += np.where(ctrl_ok, lin, 0.0)
                p_eff = self.model.success_probability(
                    10.0 * np.log10(np.maximum(acc, 1e-300)), phy.PSSCH)
                data_ok = ctrl_ok & (data_draws[j, rec] < p_eff)
            else:
                data_ok = ctrl_ok & (data_draws[j, rec] < p_data[j, rec])
            fresh = data_ok & (outcome.delivered_attempt == 0)
            outcome.delivered_attempt[fresh] = attempt_no

            reservations = mac.announce_reservations(proc, attempt_idx)
            if reservations:
                last = max(r.slot for r in reservations)
                self.announcements.append((last, ok_ctrl[j].copy(), reservations))

            if proc.feedback:
                reporters = rec[ctrl_ok]
                acks = outcome.delivered_attempt[ctrl_ok] > 0
                if not self.cfg.psfch_ideal and reporters.size:
                    snr = 10.0 * np.log10(self.rxpow_mw[reporters, src]
                                          / self.noise_fb_mw)
                    p_fb = self.model.success_probability(snr, phy.PSCCH)
                    keep = self.phy_rng.random(reporters.size) < p_fb
                    reporters, acks = reporters[keep], acks[keep]
                fb_slot = t + self.ack_slots
                self.fb_due.setdefault(fb_slot, []).append((proc, reporters, acks))
                heapq.heappush(self.event_heap, fb_slot)
            elif attempt_no == len(proc.planned):
                proc.state = mac.COMPLETED

            if self.trace is not None:
                self._trace_tx(t, proc, attempt_no, starts[j], rec, ctrl_ok,
                               data_ok, reservations)

    def _deliver_feedback(self, t: int, entries: list) -> None:
        for proc, reporters, acks in entries:
            if proc.state != mac.ACTIVE:
                log.debug("feedback for inactive packet %d ignored", proc.packet_id)
                continue
            mac.on_feedback(proc, zip(reporters.tolist(), acks.tolist()), t)
            if proc.state == mac.CANCELLED:
                for slot, _start in proc.remaining_planned():
                    self.busy[proc.source].discard(slot)

    def _trace_tx(self, t, proc, attempt_no, start, rec, ctrl_ok, data_ok, reservations):
        rx_bits = ",".join(f"{int(r)}:{int(c)}{int(d)}"
                           for r, c, d in zip(rec, ctrl_ok, data_ok))
        resv = ";".join(f"{r.slot}+{r.start}" for r in reservations)
        self.trace.write(
            f"slot={t} src={proc.source} pkt={proc.packet_id} "
            f"attempt={attempt_no}/{len(proc.planned)} sub={int(start)}..{int(start) + proc.width - 1} "
            f"rx=[{rx_bits}] resv=[{resv}]\n")

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimResult:
        arr_slot, arr_ue = self.arr_slot, self.arr_ue
        n_arr = len(arr_slot)
        ai = 0
        heap = self.event_heap
        while True:
            t = None
            if ai < n_arr:
                t = int(arr_slot[ai])
            if heap and (t is None or heap[0] < t):
                t = heap[0]
            if t is None:
                break
            while heap and heap[0] <= t:
                heapq.heappop(heap)
            while self.announcements and self.announcements[0][0] <= t:
                self.announcements.popleft()
            while ai < n_arr and arr_slot[ai] == t:
                self._admit_packet(ai, int(arr_ue[ai]), t)
                ai += 1
            events = SlotEvents(t, self.sched.pop(t, []), self.fb_due.pop(t, []))
            if events.transmissions:
                self._process_transmissions(t, events.transmissions)
            if events.feedback_due:
                self._deliver_feedback(t, events.feedback_due)

        tx_log = (np.array(self.tx_rows, dtype=np.int64)
                  if self.tx_rows else np.empty((0, 4), dtype=np.int64))
        mean_att = self.gc_attempts / self.gc_packets if self.gc_packets else 0.0
        return SimResult(self.cfg, self.topo, self.outcomes, tx_log,
                         self.duration_slots, mean_att)
