"""Dynamic time warping on timestamps and CAN <- phone location transfer."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np

from .errors import ConfigError
from .ingest import CAN_COLUMNS, CanRecord, PhoneRecord

DEFAULT_BAND_S = 30.0
LOCATED_COLUMNS = CAN_COLUMNS + ("lat", "lon", "matched_phone_timestamp")

# backpointer codes
_DIAG, _UP, _LEFT = 0, 1, 2


@dataclass(frozen=True)
class AlignmentPath:
    """Monotone warping path as 0-based (index_a, index_b) pairs."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def __len__(self):
        return len(self.pairs)


def band_window(a: np.ndarray, b: np.ndarray, band_s: float | None):
    """Per-row inclusive column limits [lo, hi] for a time band of +-band_s.

    The window is widened where needed so a boundary-respecting monotone path
    always exists (rows overlap or touch, first row starts at column 0, last
    row ends at the last column).
    """
    n, m = len(a), len(b)
    if band_s is None:
        return np.zeros(n, dtype=np.int64), np.full(n, m - 1, dtype=np.int64)
    lo = np.searchsorted(b, a - band_s, side="left").astype(np.int64)
    hi = (np.searchsorted(b, a + band_s, side="right") - 1).astype(np.int64)
    lo = np.minimum(lo, m - 1)
    hi = np.maximum(hi, 0)
    lo[0] = 0
    hi[-1] = m - 1
    hi = np.maximum.accumulate(np.maximum(hi, lo))
    for i in range(1, n):
        lo[i] = min(lo[i], hi[i - 1] + 1)
    lo = np.minimum(lo, hi)
    return lo, hi


@nb.njit(cache=True)
def _dtw_banded(a, b, lo, hi):
    n = a.shape[0]
    width = 0
    for i in range(n):
        w = hi[i] - lo[i] + 1
        if w > width:
            width = w
    back = np.full((n, width), 255, dtype=np.uint8)
    prev = np.full(width, np.inf)
    cur = np.full(width, np.inf)
    for i in range(n):
        for k in range(width):
            cur[k] = np.inf
        for j in range(lo[i], hi[i] + 1):
            c = abs(a[i] - b[j])
            k = j - lo[i]
            if i == 0 and j == 0:
                cur[k] = c
                back[i, k] = 3
                continue
            best = np.inf
            code = 255
            # preference order on ties: diagonal, then advance a, then advance b
            if i > 0:
                kp = j - 1 - lo[i - 1]
                if j > 0 and 0 <= kp and j - 1 <= hi[i - 1]:
                    if prev[kp] < best:
                        best = prev[kp]
                        code = 0
                kp = j - lo[i - 1]
                if 0 <= kp and j <= hi[i - 1]:
                    if prev[kp] < best:
                        best = prev[kp]
                        code = 1
            if j > lo[i]:
                if cur[k - 1] < best:
                    best = cur[k - 1]
                    code = 2
            cur[k] = c + best
            back[i, k] = code
        for k in range(width):
            prev[k] = cur[k]
    total = prev[hi[n - 1] - lo[n - 1]]
    # trace back
    i = n - 1
    j = hi[n - 1]
    pa = np.empty(n + b.shape[0], dtype=np.int64)
    pb = np.empty(n + b.shape[0], dtype=np.int64)
    L = 0
    while True:
        pa[L] = i
        pb[L] = j
        L += 1
        code = back[i, j - lo[i]]
        if code == 3:
            break
        if code == 0:
            i -= 1
            j -= 1
        elif code == 1:
            i -= 1
        elif code == 2:
            j -= 1
        else:
            return np.inf, pa[:0], pb[:0]
    return total, pa[:L][::-1].copy(), pb[:L][::-1].copy()


def dtw_align(a: Sequence[float], b: Sequence[float], band_s: float | None = None) -> AlignmentPath:
    """Minimum-cost monotone alignment of two timestamp sequences.

    The per-pair cost is |a_i - b_j|. ``band_s`` restricts matches to pairs
    within that many seconds (widened where necessary to stay connected);
    ``None`` runs the full dynamic program.
    """
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("dtw_align needs two nonempty sequences")
    if np.any(np.diff(a) < 0) or np.any(np.diff(b) < 0):
        raise ConfigError("dtw_align needs nondecreasing timestamps")
    lo, hi = band_window(a, b, band_s)
    total, pa, pb = _dtw_banded(a, b, lo, hi)
    return AlignmentPath(tuple(zip(pa.tolist(), pb.tolist())), float(total))


@dataclass(frozen=True)
class LocatedCanRecord:
    trip_id: str
    timestamp: float
    channel: str
    value: float
    active: bool
    latitude: float
    longitude: float
    matched_phone_timestamp: float


def transfer_locations(can: Sequence[CanRecord], phone: Sequence[PhoneRecord], path: AlignmentPath) -> list[LocatedCanRecord]:
    """Give every CAN record the position of its closest-in-time warped partner.

    ``path`` must index (can, phone) in that order. When a CAN record is
    warped onto several phone records the one with the smallest |dt| wins,
    earlier phone record on ties.
    """
    best: dict[int, tuple[float, int]] = {}
    for i, j in path.pairs:
        d = abs(can[i].timestamp - phone[j].timestamp)
        cur = best.get(i)
        if cur is None or d < cur[0] or (d == cur[0] and j < cur[1]):
            best[i] = (d, j)
    out = []
    for i, r in enumerate(can):
        j = best[i][1]
        p = phone[j]
        out.append(LocatedCanRecord(r.trip_id, r.timestamp, r.channel, r.value, r.active,
                                    p.latitude, p.longitude, p.timestamp))
    return out


def align_trips(can: Sequence[CanRecord], phone: Sequence[PhoneRecord], band_s: float | None = DEFAULT_BAND_S):
    """Locate CAN records trip by trip and channel by channel.

    CAN trips without phone records are returned in ``unlocated``.
    """
    phone_by_trip = defaultdict(list)
    for p in phone:
        phone_by_trip[p.trip_id].append(p)
    can_groups = defaultdict(list)
    for r in can:
        can_groups[(r.trip_id, r.channel)].append(r)
    located, unlocated = [], []
    for (trip, _ch), recs in sorted(can_groups.items()):
        ph = phone_by_trip.get(trip)
        if not ph:
            unlocated.extend(recs)
            continue
        ph = sorted(ph, key=lambda r: r.timestamp)
        recs = sorted(recs, key=lambda r: r.timestamp)
        path = dtw_align([r.timestamp for r in recs], [p.timestamp for p in ph], band_s)
        located.extend(transfer_locations(recs, ph, path))
    return located, unlocated


def write_located(records: Sequence[LocatedCanRecord], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOCATED_COLUMNS)
        for r in records:
            w.writerow([r.trip_id, repr(r.timestamp), r.channel, repr(r.value), "true" if r.active else "false",
                        repr(r.latitude), repr(r.longitude), repr(r.matched_phone_timestamp)])


def read_located(path) -> list[LocatedCanRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOCATED_COLUMNS:
            raise ConfigError(f"{path}: expected columns {LOCATED_COLUMNS}")
        for row in reader:
            out.append(LocatedCanRecord(row["trip_id"], float(row["timestamp"]), row["channel"], float(row["value"]),
                                        row["active"] == "true", float(row["lat"]), float(row["lon"]),
                                        float(row["matched_phone_timestamp"])))
    return out
