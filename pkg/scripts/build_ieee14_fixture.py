"""Regenerate ``src/gbpse/data/ieee14.json`` from the standard IEEE 14-bus data.

Branch data is (from, to, r, x, total line charging b, off-nominal tap).
Tap-changing transformers are folded into their exact pi-equivalent, which
only needs per-end shunts: series y/t, from-end y(1-t)/t^2, to-end y(t-1)/t.
The bus-9 shunt capacitor has no place in the branch-only model and is dropped.
The true state is the published power-flow solution (degrees converted).
"""

import json
import math
import sys
from pathlib import Path

BRANCHES = [
    (1, 2, 0.01938, 0.05917, 0.0528, 1.0),
    (1, 5, 0.05403, 0.22304, 0.0492, 1.0),
    (2, 3, 0.04699, 0.19797, 0.0438, 1.0),
    (2, 4, 0.05811, 0.17632, 0.0340, 1.0),
    (2, 5, 0.05695, 0.17388, 0.0346, 1.0),
    (3, 4, 0.06701, 0.17103, 0.0128, 1.0),
    (4, 5, 0.01335, 0.04211, 0.0, 1.0),
    (4, 7, 0.0, 0.20912, 0.0, 0.978),
    (4, 9, 0.0, 0.55618, 0.0, 0.969),
    (5, 6, 0.0, 0.25202, 0.0, 0.932),
    (6, 11, 0.09498, 0.19890, 0.0, 1.0),
    (6, 12, 0.12291, 0.25581, 0.0, 1.0),
    (6, 13, 0.06615, 0.13027, 0.0, 1.0),
    (7, 8, 0.0, 0.17615, 0.0, 1.0),
    (7, 9, 0.0, 0.11001, 0.0, 1.0),
    (9, 10, 0.03181, 0.08450, 0.0, 1.0),
    (9, 14, 0.12711, 0.27038, 0.0, 1.0),
    (10, 11, 0.08205, 0.19207, 0.0, 1.0),
    (12, 13, 0.22092, 0.19988, 0.0, 1.0),
    (13, 14, 0.17093, 0.34802, 0.0, 1.0),
]

# (v, theta in degrees)
SOLUTION = [
    (1.060, 0.0), (1.045, -4.98), (1.010, -12.72), (1.019, -10.33),
    (1.020, -8.78), (1.070, -14.22), (1.062, -13.37), (1.090, -13.36),
    (1.056, -14.94), (1.051, -15.10), (1.057, -14.79), (1.055, -15.07),
    (1.050, -15.16), (1.036, -16.04),
]


def branch_record(f, t, r, x, bc, tap):
    y = 1.0 / complex(r, x)
    series = y / tap
    sh_from = y * (1.0 - tap) / tap**2 + 0.5j * bc
    sh_to = y * (tap - 1.0) / tap + 0.5j * bc
    return {
        "from": f, "to": t,
        "g": series.real, "b": series.imag,
        "g_sf": sh_from.real, "b_sf": sh_from.imag,
        "g_st": sh_to.real, "b_st": sh_to.imag,
    }


def main(out):
    buses = [
        {"id": i + 1, "slack": i == 0, "v_true": v, "theta_true": math.radians(a)}
        for i, (v, a) in enumerate(SOLUTION)
    ]
    doc = {
        "name": "ieee14",
        "buses": buses,
        "branches": [branch_record(*row) for row in BRANCHES],
    }
    Path(out).write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/gbpse/data/ieee14.json")
