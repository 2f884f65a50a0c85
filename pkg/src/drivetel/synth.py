"""Seeded synthetic phone / CAN / road-network datasets.

Trips are stop-and-go drive cycles on a rectangular street grid. Phase
accelerations and decelerations carry Generalized Pareto tails whose shape
differs between the active and inactive groups, so the whole analysis
pipeline has a known answer to recover.

Randomness: one ``numpy.random.SeedSequence`` per dataset; child 0 drives
the network, child ``k + 1`` drives trip ``k``. Trips can therefore be
generated in any order (or in parallel) with identical output.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ingest import CanRecord, PhoneRecord, write_can_log, write_phone_log
from .mapmatch import EARTH_RADIUS, RoadNetwork, RoadSegment, write_network

TRUTH_SCHEMA_VERSION = 1
EPOCH_START = 1473724800.0  # 2016-09-13T00:00:00Z
_SIM_HZ = 30
ACCEL_CAP = 3.9
DECEL_CAP = 5.9


def sample_gpd(n: int, sigma: float, xi: float, seed=None, uniforms=None) -> np.ndarray:
    """Inverse-transform GPD draws (location 0).

    ``uniforms`` overrides the random source, which makes the transform
    itself testable.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if uniforms is None:
        if n < 1:
            raise ConfigError("n must be >= 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        uniforms = rng.random(n)
    u = np.asarray(uniforms, dtype=float)
    if xi == 0:
        return -sigma * np.log1p(-u)
    return sigma / xi * np.expm1(-xi * np.log1p(-u))


@dataclass
class SynthConfig:
    seed: int = 2016
    n_drivers: int = 40
    n_trips: int = 1000
    trip_duration: tuple[float, float] = (600.0, 1200.0)
    phone_rate: float = 1.0
    can_rate: float = 1.0
    can_channels: tuple[str, ...] = ("speed",)
    grid_shape: tuple[int, int] = (10, 10)
    block_m: float = 250.0
    active_fraction: float = 0.5
    active_trip_fraction: float = 0.45
    origin: tuple[float, float] = (37.3382, -121.8863)
    # group effect: shift added to acceleration/deceleration magnitudes of
    # active trips, and GPD shapes of the phase magnitudes per group
    mean_shift: float = -0.02
    xi_active: float = 0.1
    xi_inactive: float = 0.2
    accel_floor: float = 0.2
    accel_sigma: float = 0.6
    decel_floor: float = 0.2
    decel_sigma: float = 0.7
    max_speed: float = 25.0
    phase_duration: tuple[float, float] = (2.0, 5.0)
    cruise_duration: tuple[float, float] = (2.0, 10.0)
    dwell_duration: tuple[float, float] = (0.0, 10.0)
    rolling_stop_prob: float = 0.3
    gps_sigma: float = 3.0
    speed_sigma: float = 0.3
    phone_gap_rate: float = 2.0  # gaps per hour
    phone_gap_mean: float = 10.0  # s, exponential excess over the gap floor
    can_gap_rate: float = 4.0
    can_gap_sigma: float = 8.0  # GPD scale of CAN gap excess (heavy tail)
    can_gap_xi: float = 0.4
    gap_floor: float = 6.0

    def __post_init__(self):
        self.trip_duration = tuple(self.trip_duration)
        self.can_channels = tuple(self.can_channels)
        self.grid_shape = tuple(self.grid_shape)
        self.origin = tuple(self.origin)
        for name in ("phase_duration", "cruise_duration", "dwell_duration"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.phone_rate <= 0 or self.can_rate <= 0:
            raise ConfigError("sampling rates must be positive")
        if not (self.xi_active < 1 and self.xi_inactive < 1):
            raise ConfigError("GPD shapes must be < 1")
        for name in ("active_fraction", "active_trip_fraction", "rolling_stop_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if min(self.grid_shape) < 2:
            raise ConfigError("grid needs at least 2x2 intersections")
        if self.n_trips < 1 or self.n_drivers < 1:
            raise ConfigError("need at least one driver and one trip")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth option(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# --- network ----------------------------------------------------------------


@dataclass
class Grid:
    network: RoadNetwork
    node_latlon: np.ndarray  # (rows, cols, 2)
    edge_segment: dict  # (node_a, node_b) -> (segment_id, forward?)
    neighbours: dict  # node -> list of nodes


def build_grid(cfg: SynthConfig, rng: np.random.Generator) -> Grid:
    rows, cols = cfg.grid_shape
    lat0, lon0 = cfg.origin
    dlat = math.degrees(cfg.block_m / EARTH_RADIUS)
    dlon = math.degrees(cfg.block_m / (EARTH_RADIUS * math.cos(math.radians(lat0))))
    ll = np.empty((rows, cols, 2))
    for i in range(rows):
        for j in range(cols):
            ll[i, j] = (lat0 + i * dlat, lon0 + j * dlon)
    edges = []
    for i in range(rows):
        for j in range(cols):
            if j + 1 < cols:
                edges.append(((i, j), (i, j + 1)))
            if i + 1 < rows:
                edges.append(((i, j), (i + 1, j)))
    active = rng.random(len(edges)) < cfg.active_fraction
    segs, edge_segment, by_node = [], {}, {}
    neighbours: dict = {}
    for k, (a, b) in enumerate(edges):
        sid = str(10000 + k)
        mid = (ll[a] + ll[b]) / 2
        segs.append(RoadSegment(sid, np.array([ll[a], mid, ll[b]]), bool(active[k])))
        edge_segment[(a, b)] = (sid, True)
        edge_segment[(b, a)] = (sid, False)
        by_node.setdefault(a, []).append(sid)
        by_node.setdefault(b, []).append(sid)
        neighbours.setdefault(a, []).append(b)
        neighbours.setdefault(b, []).append(a)
    adjacency = {}
    for (a, b) in edges:
        sid = edge_segment[(a, b)][0]
        adjacency[sid] = sorted({s for n in (a, b) for s in by_node[n]} - {sid})
    return Grid(RoadNetwork(segs, adjacency), ll, edge_segment, neighbours)


# --- drive cycle ------------------------------------------------------------


def _tail_draw(rng, floor, sigma, xi, shift, cap):
    while True:
        v = floor + shift + float(sample_gpd(1, sigma, xi, rng)[0])
        if 0 < v <= cap:
            return v


def drive_cycle(cfg: SynthConfig, rng: np.random.Generator, duration: float, active: bool):
    """Piecewise-constant acceleration profile on a _SIM_HZ grid.

    Phases cycle accelerate -> cruise -> decelerate (to a stop, or rolling)
    -> dwell. Phase durations are drawn independently of the acceleration
    magnitude, so every magnitude is observed for comparable time.
    Returns (t, speed, accel, distance) arrays.
    """
    xi = cfg.xi_active if active else cfg.xi_inactive
    shift = cfg.mean_shift if active else 0.0
    n = int(round(duration * _SIM_HZ)) + 1
    acc = np.zeros(n)
    h = 1.0 / _SIM_HZ
    k = int(rng.uniform(*cfg.dwell_duration) * _SIM_HZ)
    v = 0.0
    while k < n:
        a = _tail_draw(rng, cfg.accel_floor, cfg.accel_sigma, xi, shift, ACCEL_CAP)
        steps = int(round(min(rng.uniform(*cfg.phase_duration), (cfg.max_speed - v) / a) * _SIM_HZ))
        if steps > 0:
            acc[k:k + steps] = a
            k += steps
            v += a * steps * h
        k += int(rng.uniform(*cfg.cruise_duration) * _SIM_HZ)
        if k >= n:
            break
        d = _tail_draw(rng, cfg.decel_floor, cfg.decel_sigma, xi, shift, DECEL_CAP)
        stop = rng.random() >= cfg.rolling_stop_prob
        dur = v / d if stop else min(rng.uniform(*cfg.phase_duration), 0.7 * v / d)
        steps = max(1, int(round(dur * _SIM_HZ)))
        # exact rate so a stop lands on zero speed
        dv = v if stop else d * steps * h
        acc[k:k + steps] = -dv / (steps * h)
        k += steps
        v -= dv
        if stop:
            v = 0.0
            k += int(rng.uniform(*cfg.dwell_duration) * _SIM_HZ)
    acc = acc[:n]
    speed = np.concatenate(([0.0], np.cumsum(acc[:-1]) * h))
    speed = np.where(np.abs(speed) < 1e-9, 0.0, np.maximum(speed, 0.0))
    dist = np.concatenate(([0.0], np.cumsum((speed[:-1] + speed[1:]) * 0.5 * h)))
    t = np.arange(n) / _SIM_HZ
    return t, speed, acc, dist


def random_route(grid: Grid, rng: np.random.Generator, min_length: float):
    """Random walk over intersections without U-turns, at least min_length long."""
    rows, cols = grid.node_latlon.shape[:2]
    node = (int(rng.integers(rows)), int(rng.integers(cols)))
    nodes = [node]
    prev = None
    length = 0.0
    seg_len = {sid: grid.network.segments[sid].length for sid in grid.network.ids}
    while length < min_length:
        opts = [m for m in grid.neighbours[node] if m != prev] or grid.neighbours[node]
        nxt = opts[int(rng.integers(len(opts)))]
        length += seg_len[grid.edge_segment[(node, nxt)][0]]
        prev, node = node, nxt
        nodes.append(node)
    return nodes


def locate_on_route(grid: Grid, route, s):
    """Lat/lon, heading and segment id at along-route distances s."""
    pts = np.array([grid.node_latlon[n] for n in route])
    seg_ids = [grid.edge_segment[(a, b)][0] for a, b in zip(route, route[1:])]
    lens = np.array([grid.network.segments[sid].length for sid in seg_ids])
    cum = np.concatenate(([0.0], np.cumsum(lens)))
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_ids) - 1)
    frac = np.clip((s - cum[idx]) / lens[idx], 0.0, 1.0)
    lat = pts[idx, 0] + frac * (pts[idx + 1, 0] - pts[idx, 0])
    lon = pts[idx, 1] + frac * (pts[idx + 1, 1] - pts[idx, 1])
    dy = pts[idx + 1, 0] - pts[idx, 0]
    dx = (pts[idx + 1, 1] - pts[idx, 1]) * math.cos(math.radians(float(pts[0, 0])))
    heading = np.mod(np.degrees(np.arctan2(dx, dy)), 360.0)
    return lat, lon, heading, [seg_ids[i] for i in idx.tolist()]


def _gap_mask(times, rng, rate_per_hour, draw_duration):
    """True where a sample survives; gaps start uniformly in the trip."""
    keep = np.ones(len(times), dtype=bool)
    if len(times) < 3:
        return keep
    span = times[-1] - times[0]
    for _ in range(int(rng.poisson(rate_per_hour * span / 3600.0))):
        start = times[0] + rng.uniform(0.0, span)
        dur = draw_duration()
        keep &= ~((times > start) & (times < start + dur))
    keep[0] = keep[-1] = True
    return keep


def _offset_noise(rng, lat, sigma_m):
    n = len(lat)
    dn = rng.normal(0.0, sigma_m, n)
    de = rng.normal(0.0, sigma_m, n)
    dlat = np.degrees(dn / EARTH_RADIUS)
    dlon = np.degrees(de / (EARTH_RADIUS * np.cos(np.radians(lat))))
    return dlat, dlon


@dataclass
class SynthTrip:
    trip_id: str
    driver_id: str
    active: bool
    phone: list
    can: list
    truth: dict = field(default_factory=dict)


def generate_trip(cfg: SynthConfig, grid: Grid, k: int, seed_seq: np.random.SeedSequence) -> SynthTrip:
    rng = np.random.default_rng(seed_seq)
    trip_id = f"T{k:05d}"
    driver_id = f"D{int(rng.integers(cfg.n_drivers)):04d}"
    active = bool(rng.random() < cfg.active_trip_fraction)
    duration = float(rng.uniform(*cfg.trip_duration))
    t, speed, acc, dist = drive_cycle(cfg, rng, duration, active)
    route = random_route(grid, rng, dist[-1] + 1.0)
    start = EPOCH_START + float(rng.integers(0, 150)) * 86400.0 + float(rng.integers(6 * 3600, 21 * 3600))

    # phone: 1/phone_rate spacing on the simulation grid
    step = max(1, int(round(_SIM_HZ / cfg.phone_rate)))
    pi = np.arange(0, len(t), step)
    keep = _gap_mask(t[pi], rng, cfg.phone_gap_rate, lambda: cfg.gap_floor + rng.exponential(cfg.phone_gap_mean))
    pi = pi[keep]
    lat, lon, heading, true_seg = locate_on_route(grid, route, dist[pi])
    dlat, dlon = _offset_noise(rng, lat, cfg.gps_sigma)
    v_obs = speed[pi] + rng.normal(0.0, cfg.speed_sigma, len(pi))
    v_obs = np.where(speed[pi] == 0.0, 0.0, np.maximum(v_obs, 0.0))
    phone = [
        PhoneRecord(trip_id, driver_id, start + t[i], float(a), float(b), float(v), float(h), active)
        for i, a, b, v, h in zip(pi.tolist(), (lat + dlat).tolist(), (lon + dlon).tolist(), v_obs.tolist(),
                                 heading.tolist())
    ]

    cstep = max(1, int(round(_SIM_HZ / cfg.can_rate)))
    ci = np.arange(0, len(t), cstep)
    keep = _gap_mask(t[ci], rng, cfg.can_gap_rate,
                     lambda: cfg.gap_floor + float(sample_gpd(1, cfg.can_gap_sigma, cfg.can_gap_xi, rng)[0]))
    ci = ci[keep]
    can = []
    v_c, a_c = speed[ci], acc[ci]
    values = {}
    for ch in cfg.can_channels:
        if ch == "speed":
            values[ch] = np.where(v_c == 0.0, 0.0, np.maximum(v_c + rng.normal(0.0, 0.05, len(ci)), 0.0))
        elif ch == "rpm":
            values[ch] = 750.0 + 55.0 * v_c + 220.0 * np.maximum(a_c, 0.0) + rng.normal(0.0, 15.0, len(ci))
        elif ch == "throttle":
            values[ch] = np.clip(12.0 + 0.9 * v_c + 18.0 * np.maximum(a_c, 0.0) + rng.normal(0.0, 1.0, len(ci)),
                                 0.0, 100.0)
        else:
            raise ConfigError(f"synthetic generator has no model for CAN channel {ch!r}")
    for j, i in enumerate(ci.tolist()):
        for ch in cfg.can_channels:
            can.append(CanRecord(trip_id, start + t[i], ch, float(values[ch][j]), active))

    truth = {
        "trip_id": trip_id,
        "driver_id": driver_id,
        "active": active,
        "xi": cfg.xi_active if active else cfg.xi_inactive,
        "phone_timestamps": [start + t[i] for i in pi.tolist()],
        "true_segment": true_seg,
        "true_speed": [round(x, 6) for x in speed[pi].tolist()],
        "true_acceleration": [round(x, 6) for x in acc[pi].tolist()],
        "route_segments": sorted({grid.edge_segment[(a, b)][0] for a, b in zip(route, route[1:])}),
    }
    return SynthTrip(trip_id, driver_id, active, phone, can, truth)


@dataclass
class SynthDataset:
    config: SynthConfig
    grid: Grid
    trips: list

    @property
    def network(self):
        return self.grid.network

    @property
    def phone(self):
        return [r for t in self.trips for r in t.phone]

    @property
    def can(self):
        return [r for t in self.trips for r in t.can]


def simulate(cfg: SynthConfig) -> SynthDataset:
    """Generate the dataset in memory."""
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.n_trips + 1)
    grid = build_grid(cfg, np.random.default_rng(children[0]))
    trips = [generate_trip(cfg, grid, k, children[k + 1]) for k in range(cfg.n_trips)]
    return SynthDataset(cfg, grid, trips)


def generate_dataset(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write phone.csv, can.csv, network.geojson and truth.json into out_dir."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}") from e
    ds = simulate(cfg)
    paths = {
        "phone": out / "phone.csv",
        "can": out / "can.csv",
        "network": out / "network.geojson",
        "truth": out / "truth.json",
    }
    write_phone_log(ds.phone, paths["phone"])
    write_can_log(ds.can, paths["can"])
    write_network(ds.network, paths["network"])
    truth = {
        "schema_version": TRUTH_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "network": ds.network.summary(),
        "trips": [t.truth for t in ds.trips],
    }
    with paths["truth"].open("w") as fh:
        json.dump(truth, fh, sort_keys=True)
        fh.write("\n")
    return paths
