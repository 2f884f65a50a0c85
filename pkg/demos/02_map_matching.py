"""HMM map matching of GPS fixes near an intersection.

Two roads meet at a corner and fixes drift a few metres off the centre
line. The matcher weighs distance to each candidate road against how well
the driving distance between candidates agrees with the straight-line hop.
"""
import numpy as np

from drivetel.mapmatch import RoadNetwork, RoadSegment, hmm_match

LAT0, LON0 = 37.3382, -121.8863
M_LAT = 111_195.0
M_LON = M_LAT * np.cos(np.radians(LAT0))


def at(north, east):
    return LAT0 + north / M_LAT, LON0 + east / M_LON


east_road = RoadSegment("main-st", [at(0, 0), at(0, 200)], active=True)
north_road = RoadSegment("first-ave", [at(0, 200), at(200, 200)])
net = RoadNetwork([east_road, north_road], {"main-st": ["first-ave"], "first-ave": ["main-st"]})

rng = np.random.default_rng(1)
path = [(0, e) for e in range(0, 200, 15)] + [(n, 200) for n in range(15, 200, 15)]
fixes = [at(n + rng.normal(0, 4), e + rng.normal(0, 4)) for n, e in path]
lat, lon = [f[0] for f in fixes], [f[1] for f in fixes]

m = hmm_match(np.arange(len(fixes), dtype=float), lat, lon, net, trip_id="demo")
for (n, e), seg, d in zip(path, m.segment_ids, m.distance):
    print(f"true ({n:3d} N, {e:3d} E) -> {seg:9s} {d:5.1f} m off")
print("log score", round(m.log_score, 2))
