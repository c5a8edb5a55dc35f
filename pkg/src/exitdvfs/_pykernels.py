"""Pure-Python schedule kernels; the reference twin of ``_kernels.pyx``.

Both implementations accumulate in the same order, so results are
bit-identical across backends.
"""
import math


def schedule_cost(idx, lat_table, en_table, overhead):
    energy = 0.0
    latency = 0.0
    switches = 0
    prev = -1
    for i in range(len(idx)):
        p = int(idx[i])
        energy += en_table[i][p]
        latency += lat_table[i][p]
        if i > 0 and p != prev:
            switches += 1
        prev = p
    return energy, latency + switches * overhead


def batch_cost(schedules, lat_table, en_table, overhead):
    lt = [list(map(float, row)) for row in lat_table]
    et = [list(map(float, row)) for row in en_table]
    energies = []
    latencies = []
    for row in schedules:
        e, lat = schedule_cost([int(x) for x in row], lt, et, overhead)
        energies.append(e)
        latencies.append(lat)
    return energies, latencies


def brute_force(lat_table, en_table, pair_rank, overhead, budget):
    """Exhaustive argmin of energy over all schedules with latency <= budget.

    Ties go to the smaller ``sum(pair_rank)``, then to the lexicographically
    first schedule.  Returns ``(best_idx or None, energy, latency, n_feasible)``.
    """
    L = len(lat_table)
    if L == 0:
        return [], 0.0, 0.0, 1
    P = len(lat_table[0])
    lt = [list(map(float, row)) for row in lat_table]
    et = [list(map(float, row)) for row in en_table]
    rank = [int(r) for r in pair_rank]
    idx = [0] * L
    best = None
    best_e = math.inf
    best_lat = math.inf
    best_r = 0
    n_feasible = 0
    while True:
        e, lat = schedule_cost(idx, lt, et, overhead)
        if lat <= budget:
            n_feasible += 1
            r = 0
            for p in idx:
                r += rank[p]
            if e < best_e or (e == best_e and r < best_r):
                best, best_e, best_lat, best_r = list(idx), e, lat, r
        k = L - 1
        while k >= 0:
            idx[k] += 1
            if idx[k] < P:
                break
            idx[k] = 0
            k -= 1
        if k < 0:
            break
    return best, best_e, best_lat, n_feasible
