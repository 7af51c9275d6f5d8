"""Splitting a large muscle set into smaller joint/muscle groups.

Manual grouping starts from target joints, collects the muscles that move
them, then the joints those muscles move.  Automatic grouping builds a
muscle affinity graph (learned functional similarity blended with spatial
proximity) and partitions it by recursive spectral bisection.
"""

import itertools
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .fixtures import random_postures

log = logging.getLogger(__name__)

ARM_EPS = 1e-4
SIGMA_SPATIAL = 0.1
EIG_TIE = 1e-9
EXACT_MAX_NODES = 16  # bisections this small are solved by enumeration


@dataclass(frozen=True)
class GroupAssignment:
    groups: tuple  # of (joint ids, muscle ids)

    def muscles(self):
        return [m for _, ms in self.groups for m in ms]

    def validate(self, n_muscles=None):
        seen = self.muscles()
        if len(seen) != len(set(seen)):
            raise InvalidInputError("a muscle appears in more than one group")
        if n_muscles is not None and sorted(seen) != list(range(n_muscles)):
            raise InvalidInputError("groups do not cover every muscle")

    def to_dict(self):
        return {"groups": [{"joints": list(j), "muscles": list(m)} for j, m in self.groups]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple((tuple(g["joints"]), tuple(g["muscles"])) for g in d["groups"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def max_moment_arms(model, n_postures=20, seed=0):
    """max |G_ij| over the zero posture plus seeded random postures within limits."""
    rng = np.random.default_rng(seed)
    thetas = np.vstack([np.zeros(model.n_joints), random_postures(model, n_postures, rng, margin=0.0)])
    A = np.zeros((model.n_muscles, model.n_joints))
    for th in thetas:
        A = np.maximum(A, np.abs(model.muscle_jacobian(th)))
    return A


def manual_group(model, target_joints, eps_arm=ARM_EPS, fixpoint=False, n_postures=20, seed=0, arms=None):
    """Target joints -> muscles moving them -> every joint those muscles move.

    One expansion round by default; ``fixpoint`` repeats until nothing new
    is added.  ``arms`` may supply a precomputed max-|G| table.
    """
    targets = sorted(set(int(j) for j in target_joints))
    if not targets or min(targets) < 0 or max(targets) >= model.n_joints:
        raise InvalidInputError("target joints must exist")
    A = max_moment_arms(model, n_postures, seed) if arms is None else np.asarray(arms)
    moves = A > eps_arm
    joints = set(targets)
    while True:
        muscles = set(np.flatnonzero(moves[:, sorted(joints)].any(axis=1)).tolist())
        if not muscles:
            raise InvalidInputError(f"no muscle moves joints {targets}")
        grown = joints | set(np.flatnonzero(moves[sorted(muscles)].any(axis=0)).tolist())
        if grown == joints or not fixpoint:
            if not fixpoint:
                joints = grown
            break
        joints = grown
    return GroupAssignment(((tuple(sorted(joints)), tuple(sorted(muscles))),))


# -- affinity graphs ------------------------------------------------------------

def functional_graph(net):
    """|cosine| between muscles' first-layer input weights (their f and l rows together)."""
    W0 = net.weights[0]
    f, l = net.layout["f"], net.layout["l"]
    cols = np.hstack([W0[f], W0[l]])  # (M, 2 * hidden)
    norms = np.linalg.norm(cols, axis=1)
    M = len(cols)
    if np.all(norms == 0):
        log.warning("network has zero input weights; functional graph is empty")
        return np.zeros((M, M))
    safe = np.where(norms > 0, norms, 1.0)
    C = np.abs(cols @ cols.T) / np.outer(safe, safe)
    C[norms == 0] = 0.0
    C[:, norms == 0] = 0.0
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 0.0)
    return C


def spatial_graph(model, sigma=SIGMA_SPATIAL):
    """exp(-d/sigma) with d the closest distance between two muscles' via-points at zero posture."""
    pts = model.via_world(np.zeros(model.n_joints))
    owner = np.repeat(np.arange(model.n_muscles), [len(m.via_points) for m in model.muscles])
    D = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    M = model.n_muscles
    d = np.full((M, M), np.inf)
    for i in range(M):
        rows = D[owner == i]
        for j in range(M):
            d[i, j] = rows[:, owner == j].min()
    W = np.exp(-np.minimum(d, d.T) / sigma)
    np.fill_diagonal(W, 0.0)
    return W


def combined_graph(functional, spatial, alpha=0.5, beta=0.5):
    W = alpha * np.asarray(functional) + beta * np.asarray(spatial)
    W = 0.5 * (W + W.T)
    np.fill_diagonal(W, 0.0)
    return W


# -- partitioning -------------------------------------------------------------------

def cut_weight(W, labels):
    labels = np.asarray(labels)
    return 0.5 * float(np.sum(W[labels[:, None] != labels[None, :]]))


def fiedler_vector(W):
    """Second Laplacian eigenvector, made deterministic.

    If the second eigenvalue is repeated, the node-index vector is projected
    onto its eigenspace.  The sign is fixed so the lowest-index node with a
    nonzero entry is negative.
    """
    n = len(W)
    L = np.diag(W.sum(axis=1)) - W
    w, V = np.linalg.eigh(L)
    scale = max(1.0, abs(w[-1]))
    tied = np.flatnonzero(np.abs(w - w[1]) <= EIG_TIE * scale)
    tied = tied[tied >= 1]
    if len(tied) > 1:
        B = V[:, tied]
        idx = np.arange(n, dtype=float)
        v = B @ (B.T @ (idx - idx.mean()))
    else:
        v = V[:, 1]
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] > 0:
        v = -v
    return v


def _exact_bisect(W, nodes, n_first):
    """Minimum-cut split with exactly n_first nodes first; lexicographically first on ties."""
    n = len(nodes)
    sub = W[np.ix_(nodes, nodes)]
    combos = np.array(list(itertools.combinations(range(n), n_first)))
    X = np.zeros((len(combos), n))
    X[np.arange(len(combos))[:, None], combos] = 1.0
    cuts = np.einsum("ci,ij,cj->c", X, sub, 1.0 - X)
    best = combos[int(np.argmin(cuts))]
    first = set(best.tolist())
    return ([nodes[k] for k in range(n) if k in first], [nodes[k] for k in range(n) if k not in first])


def _bisect(W, nodes, n_first, balance_tol, exact_max_nodes):
    if len(nodes) <= exact_max_nodes:
        return _exact_bisect(W, nodes, n_first)
    sub = W[np.ix_(nodes, nodes)]
    v = fiedler_vector(sub)
    neg = [k for k in range(len(nodes)) if v[k] < 0]
    lo = n_first * (1 - balance_tol)
    hi = n_first * (1 + balance_tol)
    if neg and len(neg) < len(nodes) and lo <= len(neg) <= hi:
        first = set(neg)
    else:
        order = sorted(range(len(nodes)), key=lambda k: (v[k], k))
        first = set(order[:n_first])
    a = [nodes[k] for k in range(len(nodes)) if k in first]
    b = [nodes[k] for k in range(len(nodes)) if k not in first]
    return _refine(W, a, b)


def _refine(W, a, b):
    """Kernighan-Lin passes: tentative best swaps with locking, keep the best prefix.

    Sizes never change.  Passes repeat while the cut strictly drops.
    """
    a, b = list(a), list(b)
    while True:
        A, B = list(a), list(b)
        locked = set()
        gains, swaps = [], []
        for _ in range(min(len(A), len(B))):
            best = None
            for i, u in enumerate(A):
                if u in locked:
                    continue
                gu = W[u, B].sum() - W[u, A].sum()
                for j, v in enumerate(B):
                    if v in locked:
                        continue
                    gain = gu + W[v, A].sum() - W[v, B].sum() - 2 * W[u, v]
                    if best is None or gain > best[0] + 1e-12:
                        best = (gain, i, j)
            gain, i, j = best
            u, v = A[i], B[j]
            A[i], B[j] = v, u
            locked.update((u, v))
            gains.append(gain)
            swaps.append((u, v))
        total = np.cumsum(gains)
        n = int(np.argmax(total)) + 1 if len(total) else 0
        if n == 0 or total[n - 1] <= 1e-12:
            return sorted(a), sorted(b)
        for u, v in swaps[:n]:
            a[a.index(u)] = v
            b[b.index(v)] = u


def partition_graph(W, k, balance_tol=0.25, exact_max_nodes=EXACT_MAX_NODES):
    """Split nodes into k groups by recursive spectral bisection; returns one label per node.

    Each bisection aims for sizes proportional to the number of groups each
    side still has to produce.  The Fiedler sign split is used when its size
    is within ``balance_tol`` (relative) of that target; otherwise nodes are
    split at the target size in Fiedler order.  A swap pass then lowers the
    cut without changing sizes.  Ties go to the lower node index.

    Sub-problems with at most ``exact_max_nodes`` nodes skip the spectral
    step and take the minimum-cut split of the target size by enumeration.
    """
    W = np.asarray(W, dtype=float)
    M = len(W)
    if W.shape != (M, M) or not np.allclose(W, W.T) or np.any(W < 0) or not np.all(np.isfinite(W)):
        raise InvalidInputError("graph must be a finite, symmetric, non-negative matrix")
    if k < 2:
        raise InvalidInputError("k must be at least 2")
    if k > M:
        raise InvalidInputError("cannot make more groups than nodes")
    labels = np.zeros(M, dtype=int)
    groups = _split(W, list(range(M)), k, balance_tol, exact_max_nodes)
    for g, nodes in enumerate(groups):
        labels[nodes] = g
    return labels


def _split(W, nodes, k, balance_tol, exact_max_nodes):
    if k == 1:
        return [sorted(nodes)]
    k1 = (k + 1) // 2
    n_first = int(round(len(nodes) * k1 / k))
    n_first = min(max(n_first, k1), len(nodes) - (k - k1))
    a, b = _bisect(W, nodes, n_first, balance_tol, exact_max_nodes)
    return _split(W, a, k1, balance_tol, exact_max_nodes) + _split(W, b, k - k1, balance_tol, exact_max_nodes)


def automatic_groups(model, net, k, alpha=0.5, beta=0.5, balance_tol=0.25, eps_arm=ARM_EPS):
    """Muscle partition from the blended graph, each group paired with the joints its muscles move."""
    W = combined_graph(functional_graph(net), spatial_graph(model), alpha, beta)
    labels = partition_graph(W, k, balance_tol)
    A = max_moment_arms(model)
    groups = []
    for g in range(k):
        ms = tuple(int(i) for i in np.flatnonzero(labels == g))
        js = tuple(int(j) for j in np.flatnonzero((A[list(ms)] > eps_arm).any(axis=0)))
        groups.append((js, ms))
    out = GroupAssignment(tuple(groups))
    out.validate(model.n_muscles)
    return out
