"""Hungarian assignment of detector queries to ground-truth keypoints, plus
the four training losses (location, keypoint type, category, reprojection).

The matcher is an O(n^3) Kuhn-Munkres solver with dual potentials,
vectorized row-wise with numpy. Among equally cheap assignments it returns
the lexicographically smallest pair list; ties are detected through the
equality graph of the optimal duals, and only then does the (slower) greedy
refinement run, so the common no-tie case stays on the fast path.

Gradients never flow through the discrete match: costs are plain numpy, and
the returned indices are treated as constants by the calling training step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "MatchResult",
    "LossWeights",
    "hungarian_match",
    "match_cost_matrix",
    "loss_location",
    "loss_type",
    "loss_category",
    "loss_reprojection",
    "total_loss",
    "cross_entropy",
]


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple  # ((query_index, gt_index), ...) sorted by query index
    total_cost: float


@dataclass(frozen=True)
class LossWeights:
    location: float = 5.0
    keypoint_type: float = 1.0
    category: float = 1.0
    reprojection: float = 1.0

    def __post_init__(self):
        vals = (self.location, self.keypoint_type, self.category, self.reprojection)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


def _km_square(a):
    """Kuhn-Munkres with potentials on a square cost matrix (minimization).

    Returns (col_to_row, u, v): col_to_row[j] is the row assigned to column
    j, and (u, v) are optimal dual potentials (1-based internally, trimmed
    on return). Pure-Python inner loops: the matrices here are tiny (tens of
    rows), where interpreter arithmetic beats numpy dispatch overhead.
    """
    n = a.shape[0]
    inf = float("inf")
    # 1-based indexing; row 0 / column 0 are virtual
    cost = [[0.0] * (n + 1)] + [[0.0] + list(map(float, row)) for row in a]
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row matched to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            u_i0 = u[i0]
            row = cost[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j] - u_i0 - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_to_row = np.array(p[1:], dtype=np.intp) - 1
    return col_to_row, np.array(u[1:]), np.array(v[1:])


def _pad_square(cost):
    q, g = cost.shape
    a = np.zeros((q, q))
    a[:, :g] = cost
    return a


def _tight_adjacency(cost, u, v, tol):
    """Tight-edge adjacency of the padded problem: for each row, the real
    gt columns and the dummy columns whose reduced cost vanishes."""
    q_n, g_n = cost.shape
    real = [list(np.nonzero(np.abs(cost[r] - u[r] - v[:g_n]) <= tol)[0]) for r in range(q_n)]
    dummy = [
        list(np.nonzero(np.abs(-u[r] - v[g_n:]) <= tol)[0]) for r in range(q_n)
    ]
    return real, dummy


def _tight_complete(real_adj, dummy_adj, rows, gts, q_bound):
    """Can every row in `rows` be tight-matched to a distinct column, where
    the real gts in `gts` may only take rows with index > q_bound and dummy
    columns take any row? (The padded matching must be perfect, so leftover
    rows need tight dummy slots.)"""
    gts = set(gts)
    match_of_col = {}

    def try_row(r, seen):
        for g in real_adj[r]:
            if g in gts and r > q_bound:
                col = ("g", g)
                if col not in seen:
                    seen.add(col)
                    if col not in match_of_col or try_row(match_of_col[col], seen):
                        match_of_col[col] = r
                        return True
        for d in dummy_adj[r]:
            col = ("d", d)
            if col not in seen:
                seen.add(col)
                if col not in match_of_col or try_row(match_of_col[col], seen):
                    match_of_col[col] = r
                    return True
        return False

    for r in rows:
        if not try_row(r, set()):
            return False
    return True


def _lex_canonical_pairs(cost, pairs, u, v, tol):
    """Lexicographically smallest pair list among matchings made entirely of
    tight edges (such matchings exactly tie the optimum, dummy side
    included: an unmatched query must sit on a tight dummy slot).

    Follows the solver's own pairs for free; a vectorized existence test
    finds positions where some lex-smaller tight candidate exists, and only
    those pay a matching feasibility check.
    """
    q_n, g_n = cost.shape
    tight_real = np.abs(cost - u[:, None] - v[None, :g_n]) <= tol  # (Q, G)
    if q_n > g_n:
        tight_dummy = np.abs(-u[:, None] - v[None, g_n:]) <= tol  # (Q, Q-G)
    else:
        tight_dummy = np.zeros((q_n, 0), dtype=bool)
    real_adj = None
    dummy_adj = None
    out = []
    taken_rows = set()
    free_g = np.ones(g_n, dtype=bool)
    prev_q = -1
    on_reference = True
    for position in range(g_n):
        ref = pairs[position] if on_reference else None
        chosen = None
        if ref is not None:
            rq, rg = ref
            smaller_exists = bool(
                (tight_real[prev_q + 1 : rq] & free_g).any()
                or (tight_real[rq, :rg] & free_g[:rg]).any()
            )
            if not smaller_exists:
                out.append(ref)
                taken_rows.add(rq)
                free_g[rg] = False
                prev_q = rq
                continue
        if real_adj is None:
            real_adj = [list(np.nonzero(tight_real[r])[0]) for r in range(q_n)]
            dummy_adj = [list(np.nonzero(tight_dummy[r])[0]) for r in range(q_n)]
        for q in range(prev_q + 1, q_n):
            if q in taken_rows:
                continue
            if ref is not None and q > ref[0]:
                break
            for g in real_adj[q]:
                if not free_g[g]:
                    continue
                if ref is not None and (q, g) >= ref:
                    break
                rest_rows = [r for r in range(q_n) if r not in taken_rows and r != q]
                rest_gts = [c for c in np.nonzero(free_g)[0] if c != g]
                if _tight_complete(real_adj, dummy_adj, rest_rows, rest_gts, q):
                    chosen = (q, g)
                    break
            if chosen:
                break
        if chosen is None and ref is not None:
            chosen = ref  # the solver's pair: tight and completable by construction
        elif chosen is None:
            raise RuntimeError("hungarian tie canonicalization failed")
        if ref is not None and chosen != ref:
            on_reference = False
        out.append(chosen)
        taken_rows.add(chosen[0])
        free_g[chosen[1]] = False
        prev_q = chosen[0]
    return out


def hungarian_match(cost):
    """Globally optimal injective assignment of queries (rows) to ground
    truth keypoints (columns); requires Q >= G and finite costs. Among
    assignments whose totals tie (within `tie_tolerance`), the
    lexicographically smallest pair list is returned.

    O(n^3) Kuhn-Munkres with dual potentials does the optimization; the tie
    canonicalization walks the equality graph of the optimal duals, where
    every tied assignment lives (dummy-column slots included, since an
    unmatched query must itself sit on a tight dummy edge).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    q, g = cost.shape
    if q < g:
        raise ValueError(f"need at least as many queries as targets, got {q} < {g}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    if g == 0:
        return MatchResult(pairs=(), total_cost=0.0)
    padded = _pad_square(cost)
    col_to_row, u, v = _km_square(padded)
    pairs = sorted((int(col_to_row[j]), j) for j in range(g))
    pairs = _lex_canonical_pairs(cost, pairs, u, v, tie_tolerance(cost))
    total = float(sum(cost[r, c] for r, c in pairs))
    return MatchResult(pairs=tuple(pairs), total_cost=total)


def tie_tolerance(cost):
    """Two assignments whose exact totals differ by no more than this count
    as tied (and tie-break lexicographically)."""
    return 1e-12 * (1.0 + float(np.max(np.abs(cost))))


def match_cost_matrix(gt_points, gt_types, deltas, type_logits):
    """Per-pair matching cost L_l + L_k: mean-L1 location distance plus the
    cross entropy of the query's type prediction against the gt type.

    gt_points: (2, G); gt_types: (G,) int; deltas: (Q, 2); type_logits: (Q, K).
    """
    gt_points = np.asarray(gt_points, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    logits = np.asarray(type_logits, dtype=np.float64)
    diff = np.abs(deltas[:, None, :] - gt_points.T[None, :, :])  # (Q, G, 2)
    loc = diff.mean(axis=2)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ce = -logp[:, np.asarray(gt_types, dtype=np.intp)]  # (Q, G)
    return loc + ce


def brute_force_match(cost):
    """Exhaustive oracle: exact minimum over all injective assignments with
    the same lexicographic tie-break. Test use only (factorial blowup)."""
    import itertools

    cost = np.asarray(cost, dtype=np.float64)
    q, g = cost.shape
    tol = tie_tolerance(cost)
    best_total = None
    best_pairs = None
    for perm in itertools.permutations(range(q), g):
        total = sum(cost[perm[j], j] for j in range(g))
        pairs = sorted((perm[j], j) for j in range(g))
        if (
            best_total is None
            or total < best_total - tol
            or (abs(total - best_total) <= tol and pairs < best_pairs)
        ):
            best_total = total
            best_pairs = pairs
    return MatchResult(pairs=tuple(best_pairs), total_cost=float(best_total))


# -- losses ----------------------------------------------------------------


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_location(gt, pred):
    """Mean absolute error over all coordinates of matched keypoints (2 x G)."""
    gt, pred = _lift(gt), _lift(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"loss_location: shapes differ, {gt.shape} vs {pred.shape}")
    return ad.tmean(ad.absolute(gt - pred))


def cross_entropy(logits, onehot):
    """Mean cross entropy of softmax(logits) rows against one-hot rows."""
    logits, onehot = _lift(logits), _lift(onehot)
    if logits.shape != onehot.shape:
        raise ValueError(f"cross_entropy: shapes differ, {logits.shape} vs {onehot.shape}")
    shift = np.max(logits.data, axis=-1, keepdims=True)
    lse = ad.log(ad.tsum(ad.exp(logits - shift), axis=-1, keepdims=True)) + shift
    logp = logits - lse
    rows = logits.data.shape[0] if logits.data.ndim > 1 else 1
    return -ad.tsum(onehot * logp) / float(rows)


def loss_type(gt_onehot, logits):
    gt_onehot = np.asarray(gt_onehot.data if isinstance(gt_onehot, Tensor) else gt_onehot)
    if not np.all(np.isin(gt_onehot, (0.0, 1.0))) or not np.all(gt_onehot.sum(axis=-1) == 1.0):
        raise ValueError("loss_type: target rows must be one-hot")
    return cross_entropy(logits, gt_onehot)


def loss_category(gt_index, logits, n_categories=None):
    logits = _lift(logits)
    n = logits.data.shape[-1] if n_categories is None else n_categories
    onehot = np.zeros((1, n))
    onehot[0, int(gt_index)] = 1.0
    return cross_entropy(ad.reshape(logits, (1, n)), onehot)


def loss_reprojection(gt, reproj, zeta, visibility, delta=0.1):
    """Huber reprojection error averaged over supervised coordinates.

    Supervision weight is zeta * visibility per keypoint: only visible
    keypoints inside the sample's category block contribute.
    """
    gt, reproj = _lift(gt), _lift(reproj)
    if gt.shape != reproj.shape:
        raise ValueError(f"loss_reprojection: shapes differ, {gt.shape} vs {reproj.shape}")
    w = np.asarray(zeta, dtype=np.float64) * np.asarray(visibility, dtype=np.float64)
    supervised = 2.0 * float(w.sum())
    if supervised == 0.0:
        raise ValueError("loss_reprojection: no supervised coordinates")
    weighted = ad.huber(gt - reproj, delta) * Tensor(w[None, :])
    return ad.tsum(weighted) / supervised


def total_loss(components, weights):
    """Weighted sum of the loss components present in `components`
    (keys: location, keypoint_type, category, reprojection)."""
    acc = None
    for key in ("location", "keypoint_type", "category", "reprojection"):
        comp = components.get(key)
        if comp is None:
            continue
        term = comp * getattr(weights, key)
        acc = term if acc is None else acc + term
    if acc is None:
        raise ValueError("total_loss: no components supplied")
    return acc
