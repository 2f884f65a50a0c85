"""End-to-end analysis: ingest -> clean/smooth -> match -> align -> filter -> stats -> evt."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evt, stats
from .align import DEFAULT_BAND_S, align_trips
from .errors import ConfigError, DrivetelError, InsufficientDataError, StageError
from .ingest import (
    DEFAULT_GAP_THRESHOLD,
    CsvFormat,
    build_trips,
    inventory_report,
    parse_can_log,
    parse_phone_log,
)
from .mapmatch import BETA, RADIUS, SIGMA_Z, MatchParams, MatchResult, RoadNetwork, hmm_match, load_network
from .preprocess import (
    DEFAULT_MAX_GAP,
    DEFAULT_MIN_ZERO_RUN,
    SmootherConfig,
    Trajectory,
    clean_trajectory,
    derive_kinematics,
    enforce_physical_limits,
    kalman_smooth,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
FORMATS = ("json", "table", "csv")


@dataclass
class PipelineConfig:
    phone: str | None = None
    can: str | None = None
    network: str | None = None
    out: str = "report"
    formats: tuple[str, ...] = FORMATS
    seed: int | None = None
    delimiter: str = ","
    gap_threshold: float = DEFAULT_GAP_THRESHOLD
    max_gap: float = DEFAULT_MAX_GAP
    min_zero_run: float = DEFAULT_MIN_ZERO_RUN
    V: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])
    W: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 0.2]])
    mu0: list = field(default_factory=lambda: [0.0, 2.0])
    C0: list = field(default_factory=lambda: [[2000.0, 0.0], [0.0, 2000.0]])
    sigma_z: float = SIGMA_Z
    beta: float = BETA
    radius: float = RADIUS
    dtw_band_s: float | None = DEFAULT_BAND_S
    min_segment_count: int = stats.DEFAULT_MIN_SEGMENT_COUNT
    confidence: float = 0.95
    threshold_quantile: float = evt.DEFAULT_QUANTILE
    return_period_s: float = 24.0
    mean_excess_min_count: int = 30

    def __post_init__(self):
        if isinstance(self.formats, str):
            self.formats = (self.formats,)
        self.formats = tuple(self.formats)
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown report format(s) {bad}; choose from {FORMATS}")
        if not 0 < self.threshold_quantile < 1:
            raise ConfigError("threshold_quantile must be in (0, 1)")
        if self.return_period_s <= 0:
            raise ConfigError("return_period_s must be positive")
        if self.min_segment_count < 2:
            raise ConfigError("min_segment_count must be >= 2")
        if self.gap_threshold <= 0 or self.max_gap <= 0 or self.min_zero_run <= 0:
            raise ConfigError("gap and zero-run parameters must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown pipeline option(s): {sorted(unknown)}")
        return cls(**d)

    def smoother(self) -> SmootherConfig:
        return SmootherConfig(V=np.array(self.V), W=np.array(self.W), mu0=np.array(self.mu0), C0=np.array(self.C0))

    def match_params(self) -> MatchParams:
        return MatchParams(self.sigma_z, self.beta, self.radius)

    def to_dict(self):
        d = asdict(self)
        d["formats"] = list(self.formats)
        return d

    def report_parameters(self) -> dict:
        """Parameters recorded in reports; the output location is left out so
        identical inputs give identical files wherever they are written."""
        d = self.to_dict()
        del d["out"]
        return d


class _stage:
    """Context manager tagging any error with the stage name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        if ev is None or isinstance(ev, StageError):
            return False
        if isinstance(ev, (DrivetelError, OSError, ValueError, KeyError)):
            if isinstance(ev, OSError):
                ev = ConfigError(str(ev))
            raise StageError(self.name, ev) from ev
        return False


# --- stage helpers ----------------------------------------------------------


def phone_trajectories(phone):
    """Group phone records by trip into time-sorted speed trajectories."""
    by_trip = defaultdict(list)
    for r in phone:
        by_trip[r.trip_id].append(r)
    out = []
    for trip in sorted(by_trip):
        recs = sorted(by_trip[trip], key=lambda r: r.timestamp)
        out.append(Trajectory(trip, "speed", [r.timestamp for r in recs], [r.speed for r in recs], "m/s",
                              recs[0].active))
    return out


@dataclass
class SmoothResult:
    speed: list
    acceleration: list
    removals: dict
    n_pieces: int
    n_short_pieces: int
    n_input: int


def smooth_phone(phone, cfg: PipelineConfig) -> SmoothResult:
    """Clean and smooth phone speed per trip; acceleration from the smoothed state."""
    smoother = cfg.smoother()
    speeds, accels = [], []
    removed = {"speed_below": 0, "speed_above": 0, "acceleration_below": 0, "acceleration_above": 0}
    n_pieces = n_short = n_input = 0
    for traj in phone_trajectories(phone):
        n_input += len(traj)
        pieces, rep = clean_trajectory(traj, cfg.max_gap, cfg.min_zero_run)
        removed["speed_below"] += rep.n_below
        removed["speed_above"] += rep.n_above
        for piece in pieces:
            n_pieces += 1
            if len(piece) < 2:
                n_short += 1
                continue
            sp, ac = derive_kinematics(kalman_smooth(piece, smoother))
            ac, arep = enforce_physical_limits(ac)
            removed["acceleration_below"] += arep.n_below
            removed["acceleration_above"] += arep.n_above
            speeds.append(sp)
            accels.append(ac)
    return SmoothResult(speeds, accels, removed, n_pieces, n_short, n_input)


def match_phone(phone, network: RoadNetwork, cfg: PipelineConfig) -> list[MatchResult]:
    by_trip = defaultdict(list)
    for r in phone:
        by_trip[r.trip_id].append(r)
    params = cfg.match_params()
    out = []
    for trip in sorted(by_trip):
        recs = sorted(by_trip[trip], key=lambda r: r.timestamp)
        out.append(hmm_match([r.timestamp for r in recs], [r.latitude for r in recs], [r.longitude for r in recs],
                             network, params, trip_id=trip))
    return out


def segment_lookup(matches) -> dict:
    look = {}
    for m in matches:
        for t, s in zip(m.times.tolist(), m.segment_ids):
            look[(m.trip_id, t)] = s
    return look


@dataclass
class Samples:
    """Flat per-observation table used by the statistics stages."""

    trip_id: np.ndarray
    timestamp: np.ndarray
    value: np.ndarray
    active: np.ndarray
    segment_id: list

    def __len__(self):
        return len(self.value)

    def take(self, mask):
        idx = np.flatnonzero(mask)
        return Samples(self.trip_id[idx], self.timestamp[idx], self.value[idx], self.active[idx],
                       [self.segment_id[i] for i in idx.tolist()])


def acceleration_samples(accels, matches) -> Samples:
    look = segment_lookup(matches)
    trip, ts, val, act, seg = [], [], [], [], []
    for tr in accels:
        for t, v in zip(tr.times.tolist(), tr.values.tolist()):
            trip.append(tr.trip_id)
            ts.append(t)
            val.append(v)
            act.append(bool(tr.active))
            seg.append(look.get((tr.trip_id, t)))
    return Samples(np.array(trip, dtype=object), np.array(ts, dtype=float), np.array(val, dtype=float),
                   np.array(act, dtype=bool), seg)


def active_segment_mask(samples: Samples, network: RoadNetwork) -> np.ndarray:
    return np.array([s is not None and network.segments[s].active for s in samples.segment_id], dtype=bool)


def median_rate(samples: Samples) -> float:
    """Sampling rate (Hz) from the median same-trip time step."""
    order = np.lexsort((samples.timestamp, samples.trip_id.astype(str)))
    t = samples.timestamp[order]
    trip = samples.trip_id[order]
    same = trip[1:] == trip[:-1]
    dt = np.diff(t)[same]
    dt = dt[dt > 0]
    if len(dt) == 0:
        raise InsufficientDataError("cannot infer a sampling rate")
    return float(1.0 / np.median(dt))


# --- statistics sections ----------------------------------------------------


def _welch_dict(w: stats.WelchResult):
    lo, hi = w.interval
    return {
        "mean_inactive": w.mean_inactive,
        "mean_active": w.mean_active,
        "difference": w.difference,
        "t_statistic": w.t_statistic,
        "degrees_of_freedom": w.degrees_of_freedom,
        "p_value_one_sided": w.p_value_one_sided,
        "p_floored": w.p_floored,
        "direction": w.direction,
        "confidence": w.confidence,
        "ci_lower": None if np.isinf(lo) else lo,
        "ci_upper": None if np.isinf(hi) else hi,
    }


def _ks_dict(k: stats.KsResult):
    return {
        "d_plus": k.d_plus,
        "d_minus": k.d_minus,
        "statistic": k.statistic,
        "direction": k.direction,
        "p_value_one_sided": k.p_value_one_sided,
        "p_floored": k.p_floored,
        "m_inactive": k.m,
        "n_active": k.n,
    }


def comparison_section(acc: Samples, cfg: PipelineConfig) -> dict:
    """Means, Welch and KS for positive and negative acceleration."""
    pos_i, neg_i, z_i = stats.split_by_sign(acc.value[~acc.active])
    pos_a, neg_a, z_a = stats.split_by_sign(acc.value[acc.active])
    out = {"zeros_discarded": z_i + z_a}
    # (sign, welch direction, ks direction): inactive larger magnitude is the
    # alternative for both tails
    for name, gi, ga, sign_class, wdir, kdir in (
        ("positive", pos_i, pos_a, "positive-acceleration", "greater", "less"),
        ("negative", neg_i, neg_a, "negative-acceleration", "less", "greater"),
    ):
        g = stats.GroupedSamples(active=ga, inactive=gi, units="m/s^2", sign_class=sign_class)
        row = stats.group_means(g)
        w = stats.welch_one_sided(g, wdir, cfg.confidence)
        k = stats.ks_one_sided(g, kdir)
        out[name] = {
            "means": {"mean_inactive": row.mean_inactive, "mean_active": row.mean_active,
                      "n_inactive": row.n_inactive, "n_active": row.n_active,
                      "reduction_pct": row.reduction_pct},
            "welch": _welch_dict(w),
            "ks": _ks_dict(k),
        }
    return out


def can_section(located, matches, network: RoadNetwork, cfg: PipelineConfig) -> list[dict]:
    """Per-channel means with a two-sided Welch interval on active segments."""
    look = segment_lookup(matches)
    by_ch = defaultdict(lambda: ([], []))
    for r in located:
        sid = look.get((r.trip_id, r.matched_phone_timestamp))
        if sid is None or not network.segments[sid].active:
            continue
        by_ch[r.channel][1 if r.active else 0].append(r.value)
    rows = []
    for ch in sorted(by_ch):
        inact, act = by_ch[ch]
        if len(inact) < 2 or len(act) < 2:
            continue
        try:
            lo, hi = stats.welch_interval(inact, act, cfg.confidence)
        except DrivetelError:
            continue
        rows.append({"channel": ch, "mean_inactive": float(np.mean(inact)), "mean_active": float(np.mean(act)),
                     "n_inactive": len(inact), "n_active": len(act), "ci_lower": lo, "ci_upper": hi})
    return rows


def segment_section(acc: Samples, cfg: PipelineConfig) -> dict:
    pos = acc.take(acc.value > 0)
    rows, skipped = stats.per_segment_tests(pos.value, pos.segment_id, pos.active, cfg.min_segment_count)
    return {"min_count": cfg.min_segment_count, "skipped": skipped,
            "rows": [asdict(r) for r in rows]}


def _tail(values_active, values_inactive, cfg, rate, sign):
    u = evt.common_threshold(values_active, values_inactive, cfg.threshold_quantile)
    fa = evt.fit_gpd(values_active, u)
    fi = evt.fit_gpd(values_inactive, u)
    cmp = evt.tail_compare(fa, fi, cfg.return_period_s, rate, sign=sign)
    return {
        "threshold": u,
        "sign": sign,
        "fit_active": fa.to_dict(),
        "fit_inactive": fi.to_dict(),
        "return_level_active": cmp.level_active,
        "return_level_inactive": cmp.level_inactive,
        "ratio": cmp.ratio,
        "heavier": cmp.direction,
        "reduction_pct": cmp.reduction_pct,
    }


def evt_section(acc: Samples, cfg: PipelineConfig) -> tuple[dict, dict]:
    """GPD tail fits for acceleration and deceleration (on magnitudes).

    Exceedance rates are relative to all observations of a group, so return
    levels read as "exceeded once every T seconds of driving".
    """
    rate = median_rate(acc)
    a, i = acc.value[acc.active], acc.value[~acc.active]
    section = {
        "sample_rate_hz": rate,
        "return_period_s": cfg.return_period_s,
        "observations_per_period": evt.observations_per_period(cfg.return_period_s, rate),
        "threshold_quantile": cfg.threshold_quantile,
        "acceleration": _tail(a, i, cfg, rate, 1.0),
        "deceleration": _tail(-a, -i, cfg, rate, -1.0),
    }
    curves = {}
    for tail, sign in (("acceleration", 1.0), ("deceleration", -1.0)):
        for group, vals in (("active", a), ("inactive", i)):
            x = sign * vals
            x = x[x > 0]
            grid = np.quantile(x, np.linspace(0.5, 0.995, 40))
            curves[(tail, group)] = evt.mean_excess_curve(x, grid, cfg.mean_excess_min_count)
    return section, curves


# --- orchestration ----------------------------------------------------------


@dataclass
class AnalysisResult:
    report: dict
    acceleration: Samples | None = None
    mean_excess: dict = field(default_factory=dict)


def _check_path(p, what):
    if p is None:
        raise ConfigError(f"no {what} file given")
    if not Path(p).exists():
        raise ConfigError(f"{what} file {p} does not exist")
    return p


def analyze_samples(acc: Samples, network: RoadNetwork, cfg: PipelineConfig, located=None, matches=None):
    """Statistics and EVT sections on an acceleration sample table."""
    report = {}
    with _stage("filter"):
        mask = active_segment_mask(acc, network)
        on = acc.take(mask)
        report["filter"] = {
            "active_segment_samples": len(on),
            "other_samples": int((~mask).sum()),
            "active_observations": int(on.active.sum()),
            "inactive_observations": int((~on.active).sum()),
        }
    with _stage("stats"):
        report["comparison"] = comparison_section(on, cfg)
        report["segments"] = segment_section(on, cfg)
        report["can_means"] = can_section(located, matches, network, cfg) if located is not None else []
        pos = report["comparison"]["positive"]["means"]
        report["summary"] = {"mean_reduction_pct": pos["reduction_pct"]}
    with _stage("evt"):
        section, curves = evt_section(on, cfg)
        report["evt"] = section
        report["summary"]["return_level_reduction_pct"] = section["acceleration"]["reduction_pct"]
    return report, on, curves


def run_pipeline(cfg: PipelineConfig, phone=None, can=None, network=None) -> AnalysisResult:
    """Run every stage. Records / network may be passed in memory instead of paths."""
    log.info("pipeline parameters: %s", cfg.to_dict())
    report: dict = {"schema_version": REPORT_SCHEMA_VERSION, "parameters": cfg.report_parameters()}
    fmt = CsvFormat(cfg.delimiter)
    with _stage("ingest"):
        unmapped = {}
        if phone is None:
            phone = parse_phone_log(_check_path(cfg.phone, "phone"), fmt)
        if can is None:
            can = []
            if cfg.can is not None:
                can, unmapped = parse_can_log(_check_path(cfg.can, "CAN"), fmt)
        if not phone:
            raise InsufficientDataError("no phone records")
        trips = build_trips(phone) + build_trips(can)
        inv = inventory_report(list(phone) + list(can), gap_threshold=cfg.gap_threshold)
        report["inventory"] = inv.to_dict()
        report["inventory"]["unmapped_channels"] = {k: len(v) for k, v in sorted(unmapped.items())}
        report["inventory"]["trips"] = {
            "phone_active": sum(t.active for t in build_trips(phone)),
            "phone_inactive": sum(not t.active for t in build_trips(phone)),
            "total": len({t.trip_id for t in trips}),
        }
    with _stage("preprocess"):
        sm = smooth_phone(phone, cfg)
        report["preprocess"] = {
            "input_samples": sm.n_input,
            "removed": sm.removals,
            "pieces": sm.n_pieces,
            "pieces_too_short": sm.n_short_pieces,
            "smoothed_samples": int(sum(len(a) for a in sm.acceleration)),
        }
    with _stage("mapmatch"):
        if network is None:
            network = load_network(_check_path(cfg.network, "network"))
        matches = match_phone(phone, network, cfg)
        n_pts = sum(len(m) for m in matches)
        n_matched = sum(int(m.matched.sum()) for m in matches)
        report["mapmatch"] = {**network.summary(), "points": n_pts, "matched": n_matched}
    with _stage("align"):
        located, unlocated = align_trips(can, phone, cfg.dtw_band_s) if can else ([], [])
        report["align"] = {"located": len(located), "unlocated": len(unlocated)}
    acc = acceleration_samples(sm.acceleration, matches)
    rest, on, curves = analyze_samples(acc, network, cfg, located, matches)
    report.update(rest)
    return AnalysisResult(report, on, curves)
