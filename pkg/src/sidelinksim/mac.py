"""Slot formats, grant sizing, sensing-based resource selection and retransmission control.

Two retransmission disciplines coexist on the same channel: blind repetition
(a fixed number of copies, back to back if need be) and feedback-controlled
retransmission (pending copies are dropped once every destination has
acknowledged). Grants are one slot x a contiguous subchannel range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .phy import RadioParams

TOTAL_SYMBOLS = 14

ACTIVE = "active"
COMPLETED = "completed"
EXPIRED = "expired"
CANCELLED = "cancelled"


@dataclass(frozen=True)
class SlotFormat:
    """Symbol budget of one slot. Data symbols drop from 12 to 9 when the
    feedback region (its AGC, feedback symbol and guard) is configured."""

    psfch_enabled: bool
    pssch_symbols: int
    pscch_symbols: int = 2
    dmrs_symbols: int = 1
    total_symbols: int = TOTAL_SYMBOLS


def slot_format(psfch_enabled: bool, *, pscch_symbols: int = 2,
                dmrs_symbols: int = 1) -> SlotFormat:
    return SlotFormat(psfch_enabled, 9 if psfch_enabled else 12,
                      pscch_symbols, dmrs_symbols)


def grant_capacity_bits(n_subchannels: int, fmt: SlotFormat, params: RadioParams) -> float:
    """Data bits carried by a grant of the given width.

    Resource elements: width x PRBs x 12 subcarriers x data symbols, minus DMRS
    elements across the grant, minus the control-channel elements charged once
    within the first subchannel. Scaled by modulation bits and code rate.
    """
    p = params.prbs_per_subchannel
    re = (n_subchannels * p * 12 * fmt.pssch_symbols
          - fmt.dmrs_symbols * n_subchannels * p * 12
          - fmt.pscch_symbols * p * 12)
    bits, rate = params.mcs(params.mcs_pssch)
    return re * bits * rate


def subchannels_required(packet_bytes: int, fmt: SlotFormat, params: RadioParams) -> int:
    """Smallest grant width whose capacity covers the packet."""
    if packet_bytes <= 0:
        raise ValueError("packet_bytes must be strictly positive")
    need = 8 * packet_bytes
    for c in range(1, params.n_subchannels + 1):
        if grant_capacity_bits(c, fmt, params) >= need:
            return c
    raise ValueError(f"a {packet_bytes}-byte packet does not fit even in "
                     f"{params.n_subchannels} subchannels")


def max_attempts(latency_budget_ms: float, slot_us: float,
                 ack_delay_ms: float | None = None,
                 psfch_enabled: bool = False) -> int:
    """Largest number of transmission attempts that fits the latency budget.

    Blind: floor(budget / slot) - 1. With feedback the sender waits out the
    acknowledgment delay between attempts: 1 + floor((budget - slot) / (ack + slot)).
    """
    slot_ms = slot_us / 1000.0
    if latency_budget_ms < slot_ms:
        raise ValueError("latency budget below one slot")
    if not psfch_enabled:
        return int(math.floor(latency_budget_ms / slot_ms + 1e-9)) - 1
    if ack_delay_ms is None or ack_delay_ms <= 0:
        raise ValueError("feedback mode needs a positive ack delay")
    return 1 + int(math.floor((latency_budget_ms - slot_ms) / (ack_delay_ms + slot_ms) + 1e-9))


@dataclass(frozen=True)
class Reservation:
    """A future grant announced on a decoded control channel."""

    owner: int
    slot: int
    start: int
    width: int
    announced_at: int


@dataclass
class SensingState:
    """Reservations one UE has heard; only future slots within the horizon count."""

    horizon_slots: int
    reservations: list = field(default_factory=list)

    def add(self, r: Reservation) -> None:
        self.reservations.append(r)

    def visible(self, now: int) -> list[Reservation]:
        return [r for r in self.reservations
                if now < r.slot <= now + self.horizon_slots]


@dataclass
class HarqProcess:
    """Per-packet retransmission state.

    ``planned`` holds the (slot, first subchannel) grant of every attempt, all
    chosen at admission. ``destinations`` is the acknowledgment roster in
    feedback mode and empty for broadcast.
    """

    packet_id: int
    source: int
    destinations: tuple
    generation_slot: int
    deadline_slot: int
    max_attempts: int
    width: int
    feedback: bool
    min_gap_slots: int = 1
    attempts_done: int = 0
    planned: list = field(default_factory=list)
    acks_pending: set = field(default_factory=set)
    state: str = ACTIVE

    @property
    def last_tx_slot(self) -> int:
        # A transmission must complete inside the budget, so the final usable
        # slot sits one short of the deadline slot.
        return self.deadline_slot - 1

    def remaining_planned(self) -> list:
        return self.planned[self.attempts_done:]


def select_resources(harq: HarqProcess, sensing: SensingState, now: int,
                     n_subchannels: int, rng: np.random.Generator,
                     busy_slots=frozenset()) -> list[tuple[int, int]]:
    """Pick a (slot, first subchannel) grant for every remaining attempt.

    Each attempt draws uniformly from the window (now, last usable slot] among
    grants that do not intersect a visible reservation, keep the required gap
    to the other attempts, and avoid the UE's own busy slots. When nothing
    unreserved is left, the draw falls back to all gap-feasible grants and the
    collision is accepted. Returns fewer grants (possibly none) when the
    window cannot hold them.
    """
    n_attempts = harq.max_attempts - harq.attempts_done
    if harq.state != ACTIVE or n_attempts <= 0:
        raise ValueError("no attempts remaining to place")
    width = harq.width
    n_starts = n_subchannels - width + 1
    if n_starts < 1:
        raise ValueError("grant is wider than the channel")
    lo, hi = now + 1, harq.last_tx_slot
    if hi < lo:
        return []

    n_slots = hi - lo + 1
    slot_ok = np.ones(n_slots, dtype=bool)
    for s in busy_slots:
        if lo <= s <= hi:
            slot_ok[s - lo] = False

    gap = harq.min_gap_slots

    def block_around(c: int) -> None:
        a = max(lo, c - gap + 1)
        b = min(hi, c + gap - 1)
        if a <= b:
            slot_ok[a - lo:b - lo + 1] = False

    for slot, _start in harq.planned:
        block_around(slot)

    unreserved = np.ones((n_slots, n_starts), dtype=bool)
    for r in sensing.visible(now):
        if not lo <= r.slot <= hi:
            continue
        a = max(0, r.start - width + 1)
        b = min(n_starts - 1, r.start + r.width - 1)
        if a <= b:
            unreserved[r.slot - lo, a:b + 1] = False

    picks: list[tuple[int, int]] = []
    for _ in range(n_attempts):
        if not slot_ok.any():
            break
        flat = np.flatnonzero(unreserved & slot_ok[:, None])
        if flat.size == 0:
            flat = np.flatnonzero(np.repeat(slot_ok, n_starts))
        idx = int(flat[rng.integers(flat.size)])
        slot = lo + idx // n_starts
        picks.append((slot, idx % n_starts))
        block_around(slot)

    picks.sort()
    return picks


def announce_reservations(harq: HarqProcess, attempt_index: int) -> list[Reservation]:
    """Reservations carried by the control part of attempt ``attempt_index`` (0-based):
    the grants of every later attempt of the same packet."""
    here = harq.planned[attempt_index][0]
    return [Reservation(harq.source, slot, start, harq.width, here)
            for slot, start in harq.planned[attempt_index + 1:]]


def on_feedback(harq: HarqProcess, reports, at: int) -> HarqProcess:
    """Apply receiver reports delivered at slot ``at``.

    Positive reports clear their sender from the pending roster; absent
    reports count as negative. An empty roster cancels the process and frees
    its remaining grants; exhausting all placed attempts with reports still
    pending expires it.
    """
    if not harq.feedback:
        raise ValueError("feedback on a blind process")
    for ue, ack in reports:
        if ack:
            harq.acks_pending.discard(ue)
    if not harq.acks_pending:
        harq.state = CANCELLED
    elif harq.attempts_done >= len(harq.planned):
        harq.state = EXPIRED
    return harq
