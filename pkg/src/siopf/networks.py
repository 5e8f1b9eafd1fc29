"""Built-in test feeders.

``five_bus_feeder`` is the small feeder whose lower-voltage constraints at a
load bus and its zero-injection child become active together, so the active
constraint rows are linearly dependent.

``ieee37_like_feeder`` is a single-phase, regulator-free feeder with the
branch layout and line lengths of the IEEE 37-bus system, 25 loads and five
inverters. Impedances are synthetic per-unit values on a 2.5 MVA base.
"""

from __future__ import annotations

import numpy as np

from .feeder import Feeder

# (from, to, length in kft)
_IEEE37_BRANCHES = [
    ("0", "701", 1.85),
    ("701", "702", 0.96),
    ("702", "705", 0.40),
    ("702", "713", 0.36),
    ("702", "703", 1.32),
    ("703", "727", 0.24),
    ("703", "730", 0.60),
    ("704", "714", 0.08),
    ("704", "720", 0.80),
    ("705", "742", 0.32),
    ("705", "712", 0.24),
    ("706", "725", 0.28),
    ("707", "724", 0.76),
    ("707", "722", 0.12),
    ("708", "733", 0.32),
    ("708", "732", 0.32),
    ("709", "731", 0.60),
    ("709", "708", 0.32),
    ("710", "735", 0.20),
    ("710", "736", 1.28),
    ("711", "741", 0.40),
    ("711", "740", 0.20),
    ("713", "704", 0.52),
    ("714", "718", 0.52),
    ("720", "707", 0.92),
    ("720", "706", 0.60),
    ("727", "744", 0.28),
    ("730", "709", 0.20),
    ("733", "734", 0.56),
    ("734", "737", 0.64),
    ("734", "710", 0.52),
    ("737", "738", 0.40),
    ("738", "711", 0.40),
    ("744", "728", 0.20),
    ("744", "729", 0.28),
    ("709", "775", 0.05),
]

# nominal three-phase total per load bus, kW
_IEEE37_LOADS_KW = {
    "701": 630, "712": 85, "713": 85, "714": 38, "718": 85, "720": 85,
    "722": 161, "724": 42, "725": 42, "727": 42, "728": 126, "729": 42,
    "730": 85, "731": 85, "732": 42, "733": 85, "734": 42, "735": 85,
    "736": 42, "737": 140, "738": 126, "740": 85, "741": 42, "742": 93,
    "744": 42,
}

_IEEE37_INVERTERS = ("709", "744", "742", "713", "720")


def five_bus_feeder(
    x=(0.02, 0.03, 0.04, 0.05),
    r=(0.01, 0.015, 0.02, 0.025),
    q_rating: float = 1.0,
    voltage_band: float = 0.03,
) -> Feeder:
    """Inverters at buses 1 and 2, a load at bus 3, and bus 4 with no devices.

    Lines are 0->1, 1->2, 1->3 and 3->4. ``x[k]`` and ``r[k]`` are the
    impedances of the line feeding bus ``k + 1``.
    """
    data = {
        "name": "five-bus",
        "buses": [{"id": str(k)} for k in range(5)],
        "lines": [
            {"from": a, "to": b, "r": float(rr), "x": float(xx)}
            for (a, b), rr, xx in zip([("0", "1"), ("1", "2"), ("1", "3"), ("3", "4")], r, x)
        ],
        "inverters": [{"bus": "1", "q_rating": q_rating}, {"bus": "2", "q_rating": q_rating}],
        "loads": [{"bus": "3", "p_nom": 1.0, "pf": 0.9}],
        "v0": 1.0,
        "voltage_band": voltage_band,
    }
    return Feeder.from_dict(data)


def ieee37_like_feeder(
    r_per_kft: float = 0.010,
    x_per_kft: float = 0.016,
    base_kva: float = 2500.0,
    q_rating: float = 0.35,
    voltage_band: float = 0.03,
) -> Feeder:
    ids = ["0"] + sorted({b for _, b, _ in _IEEE37_BRANCHES})
    load_ids = sorted(_IEEE37_LOADS_KW)
    # deterministic spread of power factors in [0.85, 0.95]
    pf = 0.85 + 0.1 * ((np.arange(len(load_ids)) * 7) % 11) / 10.0
    data = {
        "name": "ieee37-like",
        "buses": [{"id": b} for b in ids],
        "lines": [
            {"from": a, "to": b, "r": r_per_kft * length, "x": x_per_kft * length}
            for a, b, length in _IEEE37_BRANCHES
        ],
        "inverters": [{"bus": b, "q_rating": q_rating} for b in _IEEE37_INVERTERS],
        "loads": [
            {"bus": b, "p_nom": _IEEE37_LOADS_KW[b] / base_kva, "pf": float(f)}
            for b, f in zip(load_ids, pf)
        ],
        "v0": 1.0,
        "voltage_band": voltage_band,
    }
    return Feeder.from_dict(data)
