"""Phone / CAN log parsing, trip segmentation and data-inventory statistics."""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence, Union

from .errors import ConfigError, IntegrityError, ParseError

log = logging.getLogger(__name__)

PHONE_COLUMNS = ("trip_id", "driver_id", "timestamp", "lat", "lon", "speed_mps", "heading_deg", "active")
CAN_COLUMNS = ("trip_id", "timestamp", "channel", "value", "active")

CAN_CHANNELS = (
    "speed",
    "rpm",
    "throttle",
    "throttle_relative",
    "throttle_position",
    "accel_pedal_d",
    "accel_pedal_e",
    "fuel_rate",
    "brake",
    "acceleration",
)

# normalized spelling -> canonical channel
_CHANNEL_ALIASES = {
    "vehicle_speed": "speed",
    "can_speed": "speed",
    "engine_rpm": "rpm",
    "throttle_r": "throttle_relative",
    "relative_throttle": "throttle_relative",
    "relative_throttle_position": "throttle_relative",
    "throttle_b": "throttle_position",
    "throttle_pos": "throttle_position",
    "absolute_throttle_position_b": "throttle_position",
    "acc_pedal_d": "accel_pedal_d",
    "pedal_d": "accel_pedal_d",
    "accelerator_pedal_position_d": "accel_pedal_d",
    "acc_pedal_e": "accel_pedal_e",
    "pedal_e": "accel_pedal_e",
    "accelerator_pedal_position_e": "accel_pedal_e",
    "acceleration_pedal": "accel_pedal_e",
    "fuel": "fuel_rate",
    "accel": "acceleration",
}

CHANNEL_LABELS = {
    "speed": "Speed",
    "rpm": "RPM",
    "throttle": "Throttle",
    "throttle_relative": "Throttle R",
    "throttle_position": "Throttle B",
    "accel_pedal_d": "Acc. Pedal D",
    "accel_pedal_e": "Acc. Pedal E",
    "fuel_rate": "Fuel Rate",
    "brake": "Brake",
    "acceleration": "Acceleration",
}
SOURCE_LABELS = {"can": "CAN", "phone": "Phone"}

FREQ_BIN_WIDTH = 0.25
FREQ_MAX = 10.0
DEFAULT_GAP_THRESHOLD = 5.0


@dataclass(frozen=True)
class PhoneRecord:
    trip_id: str
    driver_id: str
    timestamp: float
    latitude: float
    longitude: float
    speed: float
    heading: float
    active: bool

    source = "phone"
    channel = "speed"


@dataclass(frozen=True)
class CanRecord:
    trip_id: str
    timestamp: float
    channel: str
    value: float
    active: bool

    source = "can"


Record = Union[PhoneRecord, CanRecord]


@dataclass(frozen=True)
class Trip:
    trip_id: str
    driver_id: str | None
    active: bool
    start: float
    end: float
    sample_count: int


@dataclass(frozen=True)
class CsvFormat:
    """Delimiter and timestamp conventions of an input file.

    ``timestamp`` is one of ``"auto"``, ``"epoch"`` or ``"iso"``; with
    ``"auto"`` the first data row decides for the whole file.
    """

    delimiter: str = ","
    timestamp: str = "auto"


def normalize_channel(name: str) -> str | None:
    """Map a raw CAN channel name onto the canonical set, or None if unknown."""
    key = re.sub(r"[^a-z0-9]+", "_", name.strip().lower()).strip("_")
    if key in CAN_CHANNELS:
        return key
    return _CHANNEL_ALIASES.get(key)


def _parse_bool(text, line, field_name):
    t = text.strip().lower()
    if t in ("1", "true", "t", "yes", "y"):
        return True
    if t in ("0", "false", "f", "no", "n"):
        return False
    raise ParseError(f"not a boolean: {text!r}", line, field_name)


def _parse_float(text, line, field_name):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"not a number: {text!r}", line, field_name) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value: {text!r}", line, field_name)
    return v


def _parse_iso(text):
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def detect_timestamp_format(sample: str) -> str:
    try:
        float(sample)
        return "epoch"
    except ValueError:
        pass
    try:
        _parse_iso(sample)
        return "iso"
    except ValueError:
        raise ConfigError(f"cannot detect timestamp format from {sample!r}") from None


def _parse_timestamp(text, kind, line):
    if kind == "epoch":
        return _parse_float(text, line, "timestamp")
    try:
        return _parse_iso(text)
    except ValueError:
        raise ParseError(f"not an ISO-8601 timestamp: {text!r}", line, "timestamp") from None


def _read_rows(path, expected, fmt):
    """Yield (line_number, row-dict) for a delimited file, checking the header."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=fmt.delimiter)
        header = next(reader, None)
        if header is None:
            log.warning("%s is empty", path)
            return
        header = [h.strip() for h in header]
        unknown = [h for h in header if h not in expected]
        if unknown:
            raise ConfigError(f"{path}: unknown column(s) {unknown}")
        missing = [c for c in expected if c not in header]
        if missing:
            raise ConfigError(f"{path}: missing column(s) {missing}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            yield line, dict(zip(header, row))


def _resolve_ts_kind(fmt, first_value, path):
    kind = fmt.timestamp
    if kind == "auto":
        kind = detect_timestamp_format(first_value.strip())
        log.info("%s: timestamp format detected as %s", path, kind)
    elif kind not in ("epoch", "iso"):
        raise ConfigError(f"unknown timestamp format {kind!r}")
    return kind


def parse_phone_log(path, fmt: CsvFormat = CsvFormat()) -> list[PhoneRecord]:
    """Parse a phone GPS log. Line order is preserved."""
    records = []
    kind = None
    for line, row in _read_rows(path, PHONE_COLUMNS, fmt):
        if kind is None:
            kind = _resolve_ts_kind(fmt, row["timestamp"], path)
        lat = _parse_float(row["lat"], line, "lat")
        if not -90.0 <= lat <= 90.0:
            raise ParseError(f"latitude {lat} outside [-90, 90]", line, "lat")
        lon = _parse_float(row["lon"], line, "lon")
        if not -180.0 <= lon <= 180.0:
            raise ParseError(f"longitude {lon} outside [-180, 180]", line, "lon")
        speed = _parse_float(row["speed_mps"], line, "speed_mps")
        if speed < 0:
            raise ParseError(f"negative speed {speed}", line, "speed_mps")
        heading = _parse_float(row["heading_deg"], line, "heading_deg")
        if not 0.0 <= heading < 360.0:
            raise ParseError(f"heading {heading} outside [0, 360)", line, "heading_deg")
        records.append(
            PhoneRecord(
                trip_id=row["trip_id"].strip(),
                driver_id=row["driver_id"].strip(),
                timestamp=_parse_timestamp(row["timestamp"], kind, line),
                latitude=lat,
                longitude=lon,
                speed=speed,
                heading=heading,
                active=_parse_bool(row["active"], line, "active"),
            )
        )
    if not records:
        log.warning("%s: no phone records", path)
    return records


def parse_can_log(path, fmt: CsvFormat = CsvFormat()) -> tuple[list[CanRecord], dict[str, list[int]]]:
    """Parse a CAN log.

    Returns the records with canonical channel names and an ``unmapped``
    report: raw channel name -> line numbers of the rows that carried it.
    """
    records = []
    unmapped: dict[str, list[int]] = defaultdict(list)
    kind = None
    for line, row in _read_rows(path, CAN_COLUMNS, fmt):
        if kind is None:
            kind = _resolve_ts_kind(fmt, row["timestamp"], path)
        raw = row["channel"]
        ts = _parse_timestamp(row["timestamp"], kind, line)
        value = _parse_float(row["value"], line, "value")
        active = _parse_bool(row["active"], line, "active")
        channel = normalize_channel(raw)
        if channel is None:
            unmapped[raw.strip()].append(line)
            continue
        records.append(CanRecord(row["trip_id"].strip(), ts, channel, value, active))
    if unmapped:
        log.warning("%s: unmapped CAN channels %s", path, sorted(unmapped))
    if not records and not unmapped:
        log.warning("%s: no CAN records", path)
    return records, dict(unmapped)


def _fmt_float(x):
    return repr(float(x))


def write_phone_log(records: Iterable[PhoneRecord], path, delimiter=",") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(PHONE_COLUMNS)
        for r in records:
            w.writerow(
                [r.trip_id, r.driver_id, _fmt_float(r.timestamp), _fmt_float(r.latitude),
                 _fmt_float(r.longitude), _fmt_float(r.speed), _fmt_float(r.heading),
                 "true" if r.active else "false"]
            )


def write_can_log(records: Iterable[CanRecord], path, delimiter=",") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(CAN_COLUMNS)
        for r in records:
            w.writerow([r.trip_id, _fmt_float(r.timestamp), r.channel, _fmt_float(r.value),
                        "true" if r.active else "false"])


def build_trips(records: Iterable[Record]) -> list[Trip]:
    """One Trip per distinct trip_id, sorted by trip_id."""
    acc: dict[str, list] = {}
    for r in records:
        t = acc.get(r.trip_id)
        if t is None:
            acc[r.trip_id] = [getattr(r, "driver_id", None), r.active, r.timestamp, r.timestamp, 1]
            continue
        if t[1] != r.active:
            raise IntegrityError(f"trip {r.trip_id!r} mixes active and inactive records")
        if t[0] is None:
            t[0] = getattr(r, "driver_id", None)
        t[2] = min(t[2], r.timestamp)
        t[3] = max(t[3], r.timestamp)
        t[4] += 1
    return [Trip(tid, d, a, s, e, n) for tid, (d, a, s, e, n) in sorted(acc.items())]


def frequency_bin(dt: float) -> float:
    """Upper edge of the (k-0.25, k] Hz bin holding 1/dt; ``inf`` beyond 10 Hz."""
    if dt <= 0:
        return math.inf
    f = 1.0 / dt
    # relative slack absorbs float noise in 1/3-s style spacings
    k = max(1, math.ceil(f / FREQ_BIN_WIDTH - 1e-6))
    edge = k * FREQ_BIN_WIDTH
    return edge if edge <= FREQ_MAX else math.inf


@dataclass
class ChannelCounts:
    obs_active: int = 0
    obs_inactive: int = 0
    trips_active: int = 0
    trips_inactive: int = 0


@dataclass
class IngestReport:
    """Observation/trip counts per (source, channel) plus sampling histograms.

    Histograms are keyed by source. Frequency bins are labelled by their
    upper edge in Hz (``inf`` collects >10 Hz and repeated timestamps); gap
    bins by their lower edge in seconds.
    """

    counts: dict[tuple[str, str], ChannelCounts] = field(default_factory=dict)
    frequency_histogram: dict[str, dict[float, int]] = field(default_factory=dict)
    gap_histogram: dict[str, dict[float, int]] = field(default_factory=dict)
    gap_threshold: float = DEFAULT_GAP_THRESHOLD
    gap_bin_width: float = 1.0
    n_pairs: dict[str, int] = field(default_factory=dict)

    def rows(self):
        out = []
        for (source, channel), c in sorted(self.counts.items()):
            out.append(
                {
                    "source": source,
                    "channel": channel,
                    "label": dataset_label(source, channel),
                    "obs_active": c.obs_active,
                    "obs_inactive": c.obs_inactive,
                    "trips_active": c.trips_active,
                    "trips_inactive": c.trips_inactive,
                }
            )
        return out

    def to_dict(self):
        def hist(h):
            return {src: [[_bin_key(b), n] for b, n in sorted(bins.items())] for src, bins in sorted(h.items())}

        return {
            "channels": self.rows(),
            "frequency_histogram_hz": hist(self.frequency_histogram),
            "gap_histogram_s": hist(self.gap_histogram),
            "gap_threshold_s": self.gap_threshold,
            "gap_bin_width_s": self.gap_bin_width,
            "consecutive_pairs": dict(sorted(self.n_pairs.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        header = ["Dataset", "Obs (A)/10^3", "Obs (I)/10^3", "Trips (A)", "Trips (I)"]
        body = [
            [r["label"], thousands(r["obs_active"]), thousands(r["obs_inactive"]),
             str(r["trips_active"]), str(r["trips_inactive"])]
            for r in self.rows()
        ]
        return aligned_table(header, body)


def _bin_key(b):
    return "inf" if math.isinf(b) else b


def dataset_label(source: str, channel: str) -> str:
    return f"{SOURCE_LABELS.get(source, source)} {CHANNEL_LABELS.get(channel, channel)}"


def thousands(n: int) -> str:
    """Count in thousands, Table-1 style: 6461000 -> '6461k'."""
    if n < 1000:
        return str(n)
    return f"{(n + 500) // 1000}k"


def format_inventory_row(label, obs_a, obs_i, trips_a, trips_i) -> str:
    return f"{label}, {thousands(obs_a)}, {thousands(obs_i)}, {trips_a}, {trips_i}"


def aligned_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [len(h) for h in header]
    for r in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, r)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def inventory_report(
    records: Iterable[Record],
    trips: Sequence[Trip] | None = None,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    gap_bin_width: float = 1.0,
) -> IngestReport:
    """Table-1 style counts plus frequency and missing-data histograms.

    Consecutive pairs are formed within (source, trip, channel) after sorting
    by timestamp, so the result does not depend on record order. ``trips`` is
    accepted for symmetry with :func:`build_trips` and is only used to
    validate that every record's trip is known.
    """
    known = None if trips is None else {t.trip_id for t in trips}
    report = IngestReport(gap_threshold=gap_threshold, gap_bin_width=gap_bin_width)
    series: dict[tuple[str, str, str], list[float]] = defaultdict(list)
    trip_sets: dict[tuple[str, str], tuple[set, set]] = defaultdict(lambda: (set(), set()))

    for r in records:
        if known is not None and r.trip_id not in known:
            raise IntegrityError(f"record for unknown trip {r.trip_id!r}")
        key = (r.source, r.channel)
        c = report.counts.setdefault(key, ChannelCounts())
        if r.active:
            c.obs_active += 1
            trip_sets[key][0].add(r.trip_id)
        else:
            c.obs_inactive += 1
            trip_sets[key][1].add(r.trip_id)
        series[(r.source, r.trip_id, r.channel)].append(r.timestamp)

    for key, (act, inact) in trip_sets.items():
        report.counts[key].trips_active = len(act)
        report.counts[key].trips_inactive = len(inact)

    for (source, _trip, _ch), ts in sorted(series.items()):
        ts.sort()
        fh = report.frequency_histogram.setdefault(source, {})
        gh = report.gap_histogram.setdefault(source, {})
        report.n_pairs.setdefault(source, 0)
        for a, b in zip(ts, ts[1:]):
            dt = b - a
            fb = frequency_bin(dt)
            fh[fb] = fh.get(fb, 0) + 1
            report.n_pairs[source] += 1
            if dt > gap_threshold:
                gb = math.floor(dt / gap_bin_width) * gap_bin_width
                gh[gb] = gh.get(gb, 0) + 1
    return report
