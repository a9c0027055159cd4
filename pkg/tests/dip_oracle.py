"""LP-based oracle for the dip statistic.

Minimizes the sup-norm tube radius d over all unimodal CDF shapes threading
the ECDF constraint boxes: for every candidate mode knot (where the CDF may
jump) and every candidate mode segment, a small LP decides the minimal d.
Exact but slow; the suite runs it on small samples only.
"""

import numpy as np
from scipy.optimize import linprog


def dip_lp(x):
    x = np.sort(np.asarray(x, dtype=float))
    if len(x) <= 1 or x[0] == x[-1]:
        return 0.0
    xu, counts = np.unique(x, return_counts=True)
    n = len(x)
    cum = np.concatenate([[0], np.cumsum(counts)])
    caps = cum[:-1] / n
    floors = cum[1:] / n
    k = len(xu)
    best = np.inf

    def solve(convex_upto, concave_from, mode_jump_at, couple=None):
        nv = k + 2
        GM, D = k, k + 1
        A_ub, b_ub = [], []
        c = np.zeros(nv)
        c[D] = 1.0
        m = mode_jump_at

        def gvar(i, left_of_mode):
            if m is not None and i == m and left_of_mode:
                return GM
            return i

        for i in range(k):
            row = np.zeros(nv)
            row[i] = -1.0
            row[D] = -1.0
            A_ub.append(row)
            b_ub.append(-floors[i])
        for i in range(k):
            row = np.zeros(nv)
            row[gvar(i, True)] = 1.0
            row[D] = -1.0
            A_ub.append(row)
            b_ub.append(caps[i])
        for i in range(k - 1):
            row = np.zeros(nv)
            row[gvar(i, False)] = 1.0
            row[gvar(i + 1, True)] = -1.0
            A_ub.append(row)
            b_ub.append(0.0)
        if m is not None:
            row = np.zeros(nv)
            row[GM] = 1.0
            row[m] = -1.0
            A_ub.append(row)
            b_ub.append(0.0)
        for j in range(1, k - 1):
            dl = xu[j] - xu[j - 1]
            dr = xu[j + 1] - xu[j]
            if j + 1 <= convex_upto:
                row = np.zeros(nv)
                row[gvar(j - 1, True)] += -1.0 / dl
                row[gvar(j, True)] += 1.0 / dl + 1.0 / dr
                row[gvar(j + 1, True)] += -1.0 / dr
                A_ub.append(row)
                b_ub.append(0.0)
            if j >= concave_from:
                row = np.zeros(nv)
                row[gvar(j - 1, False)] += 1.0 / dl
                row[gvar(j, False)] += -1.0 / dl - 1.0 / dr
                row[gvar(j + 1, False)] += 1.0 / dr
                A_ub.append(row)
                b_ub.append(0.0)
        if couple is not None:
            kk, side = couple
            dl = xu[kk] - xu[kk - 1]
            row = np.zeros(nv)
            if side == "left":
                dL = xu[kk - 1] - xu[kk - 2]
                row[kk] = -1.0 / dl
                row[kk - 1] = 1.0 / dl + 1.0 / dL
                row[kk - 2] = -1.0 / dL
            else:
                dR = xu[kk + 1] - xu[kk]
                row[kk] = -1.0 / dl - 1.0 / dR
                row[kk - 1] = 1.0 / dl
                row[kk + 1] = 1.0 / dR
            A_ub.append(row)
            b_ub.append(0.0)
        bounds = [(0.0, 1.0)] * (k + 1) + [(0.0, None)]
        res = linprog(c, A_ub=np.array(A_ub), b_ub=np.array(b_ub), bounds=bounds,
                      method="highs")
        return res.fun if res.success else np.inf

    for m in range(k):
        best = min(best, solve(convex_upto=m, concave_from=m + 1, mode_jump_at=m))
    for kk in range(1, k):
        sides = []
        if kk >= 2:
            sides.append("left")
        if kk + 1 <= k - 1:
            sides.append("right")
        for side in (sides or [None]):
            best = min(best, solve(convex_upto=kk - 1, concave_from=kk + 1,
                                   mode_jump_at=None,
                                   couple=(kk, side) if side else None))
    return float(best)
