"""HMM map matching of GPS fixes onto a road network (Newson & Krumm style).

Emissions are Gaussian in the perpendicular distance to a candidate segment;
transitions are exponential in the mismatch between along-network route
distance and great-circle distance of consecutive fixes. Decoding is
log-domain Viterbi.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .errors import ConfigError, IntegrityError

EARTH_RADIUS = 6371000.0
SIGMA_Z = 4.07
BETA = 3.0
RADIUS = 50.0
MAX_ROUTE = 2000.0
LOG_FLOOR = -30.0

MATCH_COLUMNS = ("trip_id", "timestamp", "segment_id", "distance_m", "position_m")


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in metres on a sphere of radius 6371 km."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.subtract(lon2, lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


@dataclass
class RoadSegment:
    segment_id: str
    polyline: np.ndarray  # (k, 2) lat, lon
    active: bool = False

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=float).reshape(-1, 2)
        if len(self.polyline) < 2:
            raise IntegrityError(f"segment {self.segment_id!r} has fewer than 2 points")
        if self.length <= 0:
            raise IntegrityError(f"segment {self.segment_id!r} has zero length")

    @property
    def edge_lengths(self) -> np.ndarray:
        p = self.polyline
        return haversine(p[:-1, 0], p[:-1, 1], p[1:, 0], p[1:, 1])

    @property
    def length(self) -> float:
        return float(self.edge_lengths.sum())


class Candidate(NamedTuple):
    segment_id: str
    distance: float
    position: float


class RoadNetwork:
    """Immutable segment collection with a spatial index and a routing graph.

    The routing graph has two nodes per segment (its start and end); a
    segment joins its own nodes with weight equal to its length, and each
    adjacency links the closest pair of endpoints. Travel is undirected.
    """

    def __init__(self, segments: Iterable[RoadSegment], adjacency: dict[str, Sequence[str]] | None = None):
        self.segments: dict[str, RoadSegment] = {}
        for s in segments:
            if s.segment_id in self.segments:
                raise IntegrityError(f"duplicate segment id {s.segment_id!r}")
            self.segments[s.segment_id] = s
        adjacency = adjacency or {}
        for sid, nbrs in adjacency.items():
            for ref in [sid, *nbrs]:
                if ref not in self.segments:
                    raise IntegrityError(f"adjacency refers to unknown segment {ref!r}")
        self.adjacency = {sid: tuple(adjacency.get(sid, ())) for sid in self.segments}
        self.ids = list(self.segments)
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.active = np.array([self.segments[s].active for s in self.ids], dtype=bool)
        self.lengths = np.array([self.segments[s].length for s in self.ids])
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(self.ids))
        self._build_edges()
        self._build_graph()
        self._rows: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.segments)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def summary(self) -> dict:
        return {"segments": len(self), "active_segments": self.n_active}

    def _build_edges(self):
        lat0, lon0, lat1, lon1, seg, off, elen = [], [], [], [], [], [], []
        for i, sid in enumerate(self.ids):
            p = self.segments[sid].polyline
            el = self.segments[sid].edge_lengths
            lat0.append(p[:-1, 0]); lon0.append(p[:-1, 1])
            lat1.append(p[1:, 0]); lon1.append(p[1:, 1])
            seg.append(np.full(len(el), i))
            off.append(np.concatenate(([0.0], np.cumsum(el)[:-1])))
            elen.append(el)
        cat = np.concatenate
        self.e_lat0, self.e_lon0 = cat(lat0), cat(lon0)
        self.e_lat1, self.e_lon1 = cat(lat1), cat(lon1)
        self.e_seg, self.e_off, self.e_len = cat(seg), cat(off), cat(elen)
        self.ref_lat = float(np.mean(np.concatenate([self.e_lat0, self.e_lat1])))
        self.ref_lon = float(np.mean(np.concatenate([self.e_lon0, self.e_lon1])))
        mx, my = self._project((self.e_lat0 + self.e_lat1) / 2, (self.e_lon0 + self.e_lon1) / 2)
        self._tree = cKDTree(np.column_stack([mx, my]))
        self._reach = float(self.e_len.max() / 2) * 1.01 + 1.0

    def _project(self, lat, lon):
        k = math.radians(1.0) * EARTH_RADIUS
        return (np.asarray(lon) - self.ref_lon) * k * math.cos(math.radians(self.ref_lat)), (np.asarray(lat) - self.ref_lat) * k

    def _build_graph(self):
        n = len(self.ids)
        rows, cols, w = [], [], []

        def link(a, b, d):
            rows.extend((a, b)); cols.extend((b, a)); w.extend((d, d))

        for i in range(n):
            link(2 * i, 2 * i + 1, self.lengths[i])
        ends = {}
        for i, sid in enumerate(self.ids):
            p = self.segments[sid].polyline
            ends[i] = (p[0], p[-1])
        for sid, nbrs in self.adjacency.items():
            i = self.index[sid]
            for nb in nbrs:
                j = self.index[nb]
                if i == j:
                    continue
                best = None
                for ea, eb in itertools.product((0, 1), (0, 1)):
                    pa, pb = ends[i][ea], ends[j][eb]
                    d = float(haversine(pa[0], pa[1], pb[0], pb[1]))
                    if best is None or d < best[0]:
                        best = (d, ea, eb)
                d, ea, eb = best
                # csgraph treats explicit zeros as missing edges
                link(2 * i + ea, 2 * j + eb, max(d, 1e-9))
        self._graph = csr_matrix((w, (rows, cols)), shape=(2 * n, 2 * n))

    def node_distances(self, node: int) -> np.ndarray:
        row = self._rows.get(node)
        if row is None:
            row = dijkstra(self._graph, directed=True, indices=node, limit=MAX_ROUTE)
            self._rows[node] = row
        return row

    def candidates_many(self, lat, lon, radius=RADIUS):
        """Candidate segments for many fixes at once.

        Returns a list (one entry per fix) of (segment_index, distance,
        position) arrays, each sorted by distance with ties (to 1 µm)
        broken by segment id.
        """
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        n = len(lat)
        px, py = self._project(lat, lon)
        hits = self._tree.query_ball_point(np.column_stack([px, py]), r=radius * 1.01 + self._reach)
        counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=n)
        empty = (np.empty(0, dtype=np.int64), np.empty(0), np.empty(0))
        if counts.sum() == 0:
            return [empty] * n
        pi = np.repeat(np.arange(n), counts)
        ei = np.fromiter(itertools.chain.from_iterable(hits), dtype=np.int64, count=int(counts.sum()))

        # local equirectangular frame centred on each fix
        plat, plon = lat[pi], lon[pi]
        k = math.radians(1.0) * EARTH_RADIUS
        c = np.cos(np.radians(plat))
        ax, ay = (self.e_lon0[ei] - plon) * k * c, (self.e_lat0[ei] - plat) * k
        bx, by = (self.e_lon1[ei] - plon) * k * c, (self.e_lat1[ei] - plat) * k
        dx, dy = bx - ax, by - ay
        dd = dx * dx + dy * dy
        t = np.where(dd > 0, -(ax * dx + ay * dy) / np.where(dd > 0, dd, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        clat = self.e_lat0[ei] + t * (self.e_lat1[ei] - self.e_lat0[ei])
        clon = self.e_lon0[ei] + t * (self.e_lon1[ei] - self.e_lon0[ei])
        dist = haversine(plat, plon, clat, clon)
        seg = self.e_seg[ei]
        pos = np.minimum(self.e_off[ei] + t * self.e_len[ei], self.lengths[seg])

        keep = dist <= radius
        pi, seg, dist, pos = pi[keep], seg[keep], dist[keep], pos[keep]
        # nearest edge per (fix, segment); ties -> lowest edge offset
        o = np.lexsort((pos, dist, seg, pi))
        pi, seg, dist, pos = pi[o], seg[o], dist[o], pos[o]
        first = np.ones(len(pi), dtype=bool)
        first[1:] = (pi[1:] != pi[:-1]) | (seg[1:] != seg[:-1])
        pi, seg, dist, pos = pi[first], seg[first], dist[first], pos[first]
        o = np.lexsort((self.id_rank[seg], np.round(dist, 6), pi))
        pi, seg, dist, pos = pi[o], seg[o], dist[o], pos[o]
        bounds = np.searchsorted(pi, np.arange(n + 1))
        return [(seg[a:b], dist[a:b], pos[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def candidate_segments(point, network: RoadNetwork, radius: float = RADIUS) -> list[Candidate]:
    """Segments within ``radius`` metres of a (lat, lon) point, nearest first."""
    if radius <= 0:
        raise ConfigError("radius must be positive")
    seg, dist, pos = network.candidates_many([point[0]], [point[1]], radius)[0]
    return [Candidate(network.ids[s], float(d), float(p)) for s, d, p in zip(seg, dist, pos)]


# --- network file -----------------------------------------------------------


def load_network(path) -> RoadNetwork:
    """Read a GeoJSON FeatureCollection of LineString road segments.

    Each feature carries ``segment_id``, ``active`` and ``adjacency`` (list of
    segment ids) in its properties; coordinates are GeoJSON [lon, lat].
    """
    with Path(path).open() as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise IntegrityError(f"{path}: not a FeatureCollection")
    segments, adjacency = [], {}
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        geom = feat.get("geometry") or {}
        if geom.get("type") != "LineString":
            raise IntegrityError(f"{path}: segment {props.get('segment_id')!r} is not a LineString")
        sid = str(props["segment_id"])
        coords = np.asarray(geom.get("coordinates", []), dtype=float).reshape(-1, 2)
        segments.append(RoadSegment(sid, coords[:, ::-1], bool(props.get("active", False))))
        adjacency[sid] = [str(a) for a in props.get("adjacency", [])]
    return RoadNetwork(segments, adjacency)


def write_network(network: RoadNetwork, path) -> None:
    feats = []
    for sid in network.ids:
        s = network.segments[sid]
        feats.append(
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": s.polyline[:, ::-1].tolist()},
                "properties": {"segment_id": sid, "active": bool(s.active), "adjacency": list(network.adjacency[sid])},
            }
        )
    with Path(path).open("w") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh)
        fh.write("\n")


# --- HMM --------------------------------------------------------------------


@dataclass(frozen=True)
class MatchParams:
    sigma_z: float = SIGMA_Z
    beta: float = BETA
    radius: float = RADIUS

    def __post_init__(self):
        if min(self.sigma_z, self.beta, self.radius) <= 0:
            raise ConfigError("map-matching parameters must be positive")


def emission_log_density(distance, sigma_z=SIGMA_Z):
    d = np.asarray(distance, dtype=float)
    return -math.log(sigma_z * math.sqrt(2 * math.pi)) - 0.5 * (d / sigma_z) ** 2


def transition_log_density(route, great_circle, beta=BETA):
    """Exponential in |route - great_circle|; unreachable routes get the log floor."""
    route = np.asarray(route, dtype=float)
    with np.errstate(invalid="ignore"):
        lp = -math.log(beta) - np.abs(route - great_circle) / beta
    lp = np.where(np.isfinite(route) & (route <= MAX_ROUTE), lp, LOG_FLOOR)
    return np.maximum(lp, LOG_FLOOR)


def pair_route_distances(network: RoadNetwork, seg_a, pos_a, seg_b, pos_b) -> np.ndarray:
    """Shortest along-network distance for each (a, b) candidate pair (inf beyond the limit).

    Leaves a through either end of its segment and enters b through either
    end; on the same segment the distance is the along-segment offset.
    """
    seg_a, pos_a = np.asarray(seg_a, dtype=np.int64), np.asarray(pos_a, dtype=float)
    seg_b, pos_b = np.asarray(seg_b, dtype=np.int64), np.asarray(pos_b, dtype=float)
    la, lb = network.lengths[seg_a], network.lengths[seg_b]
    out = np.full(len(seg_a), np.inf)
    for ea, exit_ in ((0, pos_a), (1, la - pos_a)):
        src = 2 * seg_a + ea
        order = np.argsort(src, kind="stable")
        uniq, first = np.unique(src[order], return_index=True)
        bounds = np.append(first, len(order))
        for eb, entry in ((0, pos_b), (1, lb - pos_b)):
            dst = 2 * seg_b + eb
            node = np.empty(len(seg_a))
            for k, s_ in enumerate(uniq.tolist()):
                idx = order[bounds[k]:bounds[k + 1]]
                node[idx] = network.node_distances(s_)[dst[idx]]
            np.minimum(out, exit_ + node + entry, out=out)
    same = seg_a == seg_b
    out[same] = np.abs(pos_b[same] - pos_a[same])
    return out


def route_distances(network: RoadNetwork, seg_a, pos_a, seg_b, pos_b) -> np.ndarray:
    """Route distance matrix between two candidate sets."""
    seg_a, seg_b = np.asarray(seg_a), np.asarray(seg_b)
    ia, ib = np.meshgrid(np.arange(len(seg_a)), np.arange(len(seg_b)), indexing="ij")
    ia, ib = ia.ravel(), ib.ravel()
    d = pair_route_distances(network, seg_a[ia], np.asarray(pos_a, dtype=float)[ia],
                             seg_b[ib], np.asarray(pos_b, dtype=float)[ib])
    return d.reshape(len(seg_a), len(seg_b))


@dataclass
class Lattice:
    """Candidates, emission and transition log-densities for one track.

    ``transitions[t]`` is the (K_{t-1}, K_t) matrix into step t, or None when
    step t starts a new chain (first step, or the previous step had no
    candidates).
    """

    segs: list[np.ndarray]
    dists: list[np.ndarray]
    positions: list[np.ndarray]
    emissions: list[np.ndarray]
    transitions: list[np.ndarray | None] = field(default_factory=list)


def build_lattice(lat, lon, network: RoadNetwork, params: MatchParams = MatchParams()) -> Lattice:
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    cands = network.candidates_many(lat, lon, params.radius)
    n = len(cands)
    gc = haversine(lat[:-1], lon[:-1], lat[1:], lon[1:]) if n > 1 else np.empty(0)
    segs = [c[0] for c in cands]
    dists = [c[1] for c in cands]
    positions = [c[2] for c in cands]
    counts = np.array([len(sg) for sg in segs], dtype=np.int64)
    off = np.concatenate(([0], np.cumsum(counts)))
    flat_seg = np.concatenate(segs) if n else np.empty(0, dtype=np.int64)
    flat_pos = np.concatenate(positions) if n else np.empty(0)
    flat_em = emission_log_density(np.concatenate(dists) if n else np.empty(0), params.sigma_z)
    emissions = np.split(flat_em, off[1:-1])

    # every (previous candidate, current candidate) pair of the track at once
    linked = np.zeros(n, dtype=bool)
    linked[1:] = (counts[1:] > 0) & (counts[:-1] > 0)
    steps = np.flatnonzero(linked)
    transitions: list[np.ndarray | None] = [None] * n
    if len(steps):
        ka, kb = counts[steps - 1], counts[steps]
        sizes = ka * kb
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        local = np.arange(int(sizes.sum())) - np.repeat(starts, sizes)
        kb_rep = np.repeat(kb, sizes)
        i = np.repeat(off[steps - 1], sizes) + local // kb_rep
        j = np.repeat(off[steps], sizes) + local % kb_rep
        route = pair_route_distances(network, flat_seg[i], flat_pos[i], flat_seg[j], flat_pos[j])
        lp = transition_log_density(route, np.repeat(gc[steps - 1], sizes), params.beta)
        for t, a, b, k in zip(steps.tolist(), ka.tolist(), kb.tolist(), starts.tolist()):
            transitions[t] = lp[k:k + a * b].reshape(a, b)
    return Lattice(segs, dists, positions, emissions, transitions)


def viterbi(lattice: Lattice) -> tuple[list[int | None], float]:
    """Most probable candidate index per step (None where no candidates).

    Each chain (maximal run of steps with candidates) is decoded
    independently; the returned score is the sum over chains.
    """
    n = len(lattice.segs)
    path: list[int | None] = [None] * n
    total = 0.0
    t = 0
    while t < n:
        if len(lattice.segs[t]) == 0:
            t += 1
            continue
        start = t
        score = lattice.emissions[t].copy()
        back = []
        t += 1
        while t < n and lattice.transitions[t] is not None:
            cand = score[:, None] + lattice.transitions[t]
            bp = np.argmax(cand, axis=0)
            score = cand[bp, np.arange(cand.shape[1])] + lattice.emissions[t]
            back.append(bp)
            t += 1
        k = int(np.argmax(score))
        total += float(score[k])
        path[t - 1] = k
        for i in range(len(back) - 1, -1, -1):
            k = int(back[i][k])
            path[start + i] = k
    return path, total


def path_log_score(lattice: Lattice, path: Sequence[int | None]) -> float:
    """Log-density of a full candidate assignment under the lattice model."""
    s = 0.0
    for t, k in enumerate(path):
        if k is None:
            continue
        s += float(lattice.emissions[t][k])
        tr = lattice.transitions[t]
        if tr is not None:
            s += float(tr[path[t - 1], k])
    return s


@dataclass
class MatchResult:
    trip_id: str
    times: np.ndarray
    segment_ids: list[str | None]
    distance: np.ndarray
    position: np.ndarray
    log_score: float = 0.0

    def __len__(self):
        return len(self.times)

    @property
    def matched(self) -> np.ndarray:
        return np.array([s is not None for s in self.segment_ids], dtype=bool)

    def lookup(self) -> dict[float, str | None]:
        return dict(zip(self.times.tolist(), self.segment_ids))


def hmm_match(times, lat, lon, network: RoadNetwork, params: MatchParams = MatchParams(), trip_id: str = "") -> MatchResult:
    """Viterbi-optimal segment assignment for one GPS track."""
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        raise ConfigError("cannot match an empty trajectory")
    lattice = build_lattice(lat, lon, network, params)
    path, score = viterbi(lattice)
    seg_ids, dist, pos = [], np.full(len(times), np.nan), np.full(len(times), np.nan)
    for t, k in enumerate(path):
        if k is None:
            seg_ids.append(None)
            continue
        seg_ids.append(network.ids[int(lattice.segs[t][k])])
        dist[t] = lattice.dists[t][k]
        pos[t] = lattice.positions[t][k]
    return MatchResult(trip_id, times, seg_ids, dist, pos, score)


def filter_active(records, matches, network: RoadNetwork):
    """Split records by whether their matched segment is active.

    ``matches`` is one MatchResult or an iterable of them; records are
    looked up by (trip_id, timestamp). Unmatched records go to ``other``.
    """
    if isinstance(matches, MatchResult):
        matches = [matches]
    seg_of = {}
    for m in matches:
        for t, s in zip(m.times.tolist(), m.segment_ids):
            seg_of[(m.trip_id, t)] = s
    active, other = [], []
    for r in records:
        sid = seg_of.get((r.trip_id, float(r.timestamp)))
        if sid is not None and network.segments[sid].active:
            active.append(r)
        else:
            other.append(r)
    return active, other


def write_matches(matches: Iterable[MatchResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATCH_COLUMNS)
        for m in matches:
            for t, s, d, p in zip(m.times.tolist(), m.segment_ids, m.distance.tolist(), m.position.tolist()):
                if s is None:
                    w.writerow([m.trip_id, repr(t), "", "", ""])
                else:
                    w.writerow([m.trip_id, repr(t), s, repr(d), repr(p)])


def read_matches(path) -> list[MatchResult]:
    groups: dict[str, list] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MATCH_COLUMNS:
            raise ConfigError(f"{path}: expected columns {MATCH_COLUMNS}")
        for row in reader:
            g = groups.setdefault(row["trip_id"], [[], [], [], []])
            g[0].append(float(row["timestamp"]))
            g[1].append(row["segment_id"] or None)
            g[2].append(float(row["distance_m"]) if row["distance_m"] else np.nan)
            g[3].append(float(row["position_m"]) if row["position_m"] else np.nan)
    return [MatchResult(tid, np.array(t), s, np.array(d), np.array(p)) for tid, (t, s, d, p) in groups.items()]
