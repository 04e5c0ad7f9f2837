"""Independent brute-force references used by the unit and acceptance tests.

Everything here is written with plain loops so it shares no code path with the
vectorised implementations it checks.
"""

import itertools
import math
from fractions import Fraction

import numpy as np

# ------------------------------------------------------------------ metrics


def apcer_loop(attacks, tau):
    return sum(1 for a in attacks if a < tau) / len(attacks)


def bpcer_loop(bonafides, tau):
    return sum(1 for b in bonafides if b >= tau) / len(bonafides)


def bpcer_at_apcer_sweep(attacks, bonafides, target):
    """Try every observed score (and +inf) as the threshold; keep the feasible
    one with the lowest BPCER, ties to the larger threshold."""
    best = None
    for tau in sorted(set(attacks) | set(bonafides)) + [math.inf]:
        n_miss = sum(1 for a in attacks if a < tau)
        if Fraction(n_miss, len(attacks)) > Fraction(str(target)):
            continue
        cand = (bpcer_loop(bonafides, tau), -tau)
        if best is None or cand < best:
            best = cand
    return best[0], -best[1]


def bpcer_at_apcer_midpoints(attacks, bonafides, target):
    """Same optimum searched over midpoints between consecutive distinct scores."""
    grid = sorted(set(attacks) | set(bonafides))
    taus = [grid[0] - 1.0] + [(x + y) / 2 for x, y in zip(grid, grid[1:])] + [grid[-1] + 1.0]
    feasible = [t for t in taus if Fraction(sum(1 for a in attacks if a < t), len(attacks)) <= Fraction(str(target))]
    return min(bpcer_loop(bonafides, t) for t in feasible)


def fmr_threshold_scan(nonmated, target):
    n = len(nonmated)
    for s in sorted(nonmated):
        if Fraction(sum(1 for x in nonmated if x > s), n) <= Fraction(str(target)):
            return s
    raise AssertionError("unreachable: the maximum always qualifies")


def mmpmr_loop(rows, tau):
    return sum(1 for s1, s2 in rows if s1 > tau and s2 > tau) / len(rows)


# ------------------------------------------------------------------ pairing


def select_pairs_bruteforce(keys, pool, dist, identities, pairs_per_key):
    """Per key (ascending), enumerate every admissible accomplice subset and
    keep the one whose sorted (distance, id) list is lexicographically
    smallest. Admissible: right size, no own identity, distinct identities,
    no non-key image reused from an earlier key."""
    keys = sorted(set(keys))
    used = set()
    out = []
    for k in keys:
        cands = [c for c in pool if c != k and identities[c] != identities[k] and c not in used]
        best = None
        for combo in itertools.combinations(cands, pairs_per_key):
            if len({identities[c] for c in combo}) < len(combo):
                continue
            key = sorted((dist[k][c], c) for c in combo)
            if best is None or key < best:
                best = key
        if best is None:
            return None
        for _, c in best:
            out.append((k, c))
            if c not in keys:
                used.add(c)
    return out


# ---------------------------------------------------------------------- LBP


def lbp_code_loop(img, y, x):
    """8-neighbour LBP code with edge replication; bit set when the neighbour
    is strictly brighter. Bit order: counter-clockwise from the right-hand
    neighbour."""
    h, w = img.shape
    c = img[y, x]
    code = 0
    for bit, (dy, dx) in enumerate(LBP_ORDER):
        yy = min(max(y + dy, 0), h - 1)
        xx = min(max(x + dx, 0), w - 1)
        if img[yy, xx] > c:
            code |= 1 << bit
    return code


LBP_ORDER = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]  # (dy, dx)


def is_uniform(code, p=8):
    bits = [(code >> i) & 1 for i in range(p)]
    return sum(bits[i] != bits[(i + 1) % p] for i in range(p)) <= 2


def uniform_histogram_loop(codes, p=8):
    """59-bin histogram: uniform codes in ascending order, then one bin for the rest."""
    uniform = [c for c in range(2 ** p) if is_uniform(c, p)]
    index = {c: i for i, c in enumerate(uniform)}
    hist = np.zeros(len(uniform) + 1)
    for c in codes:
        hist[index.get(c, len(uniform))] += 1
    return hist / hist.sum()
