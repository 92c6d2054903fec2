"""Shared geometry for tests."""
import numpy as np

from ibcm.splines import KnotVector, NurbsCurve


def square_curve(h, c=(0.0, 0.0), m=2):
    """Counter-clockwise square of half-width ``h`` as a quadratic B-spline, ``m`` spans per side."""
    corners = np.array([[-h, -h], [h, -h], [h, h], [-h, h], [-h, -h]]) + np.asarray(c, float)
    loc = KnotVector([0, 0, 0] + [j / m for j in range(1, m)] + [1, 1, 1], 2).greville()
    pts, kn = [], [0, 0, 0]
    for s in range(4):
        a, b = corners[s], corners[s + 1]
        pts += [a + (b - a) * t for t in loc[:-1]]
        kn += [s + j / m for j in range(1, m)] + [s + 1, s + 1]
    pts.append(corners[0])
    kn.append(4)
    return NurbsCurve(KnotVector(np.array(kn) / 4, 2), np.array(pts))
