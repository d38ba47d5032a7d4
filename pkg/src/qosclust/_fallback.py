"""Pure numpy/Python versions of the compiled kernels in ``_kernels.pyx``."""
import sys

import numpy as np


def dykstra_rows(a, tol, max_sweeps):
    a = np.asarray(a, dtype=np.float64)
    n, m = a.shape
    x = a.copy()
    p = np.zeros_like(a)
    q = np.zeros_like(a)
    out = np.empty_like(a)
    sweeps = np.full(n, -1, dtype=np.int64)
    active = np.arange(n)
    for it in range(max_sweeps):
        if active.size == 0:
            break
        xa, pa, qa = x[active], p[active], q[active]
        v = xa + pa
        y = np.clip(v, 0.0, 1.0)
        pa = v - y
        v = y + qa
        shift = (v.sum(axis=1) - 1.0) / m
        xn = v - shift[:, None]
        qa = v - xn
        change = np.abs(xn - xa).max(axis=1)
        gap = np.abs(xn - y).max(axis=1)
        x[active], p[active], q[active] = xn, pa, qa
        done = (change < tol) & (gap < tol)
        sweeps[active[done]] = it + 1
        active = active[~done]
    np.clip(x, 0.0, 1.0, out=out)
    return out, sweeps


def sort_rows(a):
    a = np.asarray(a, dtype=np.float64)
    n, m = a.shape
    u = -np.sort(-a, axis=1)
    css = np.cumsum(u, axis=1)
    t = (css - 1.0) / np.arange(1, m + 1)
    rho = m - 1 - np.argmax((u - t > 0)[:, ::-1], axis=1)
    theta = t[np.arange(n), rho]
    return np.maximum(a - theta[:, None], 0.0)


def partition_search(subset_cost, n, beta):
    if n < 1 or n > 30:
        raise ValueError("n must be in [1, 30]")
    cost = np.asarray(subset_cost, dtype=np.float64)
    if cost.shape[0] != (1 << n):
        raise ValueError("subset_cost must have length 2**n")
    cost = cost.tolist()
    masks = [0] * n
    labels = [0] * n
    best = [float("inf"), [0] * n, 0]

    def dfs(i, nblocks):
        if i == n:
            total = 0.0
            for b in range(nblocks):
                total += cost[masks[b]]
            total += beta * nblocks
            best[2] += 1
            if total < best[0]:
                best[0] = total
                best[1] = labels[:]
            return
        bit = 1 << i
        for b in range(nblocks):
            masks[b] |= bit
            labels[i] = b
            dfs(i + 1, nblocks)
            masks[b] &= ~bit
        masks[nblocks] = bit
        labels[i] = nblocks
        dfs(i + 1, nblocks + 1)
        masks[nblocks] = 0

    masks[0] = 1
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, n + 100))
    try:
        dfs(1, 1)
    finally:
        sys.setrecursionlimit(limit)
    return best[0], np.array(best[1], dtype=np.int64), best[2]
