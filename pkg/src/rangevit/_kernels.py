"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a ``*_numba`` version (``@njit`` loops) and a
``*_numpy`` version (vectorized numpy). The public name is bound to one of
them at import time. Set ``RANGEVIT_DISABLE_NUMBA=1`` to force the numpy
path; it is also used automatically when numba cannot be imported.

Both paths produce identical results, including tie-breaking order, so
tests compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("RANGEVIT_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def _maybe_njit(fn):
    if HAVE_NUMBA:
        return njit(cache=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# scatter-add of rows: out[idx[i]] += vals[i], skipping negative indices
# ---------------------------------------------------------------------------


def scatter_add_rows_numpy(out: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    keep = idx >= 0
    if not keep.all():
        idx = idx[keep]
        vals = vals[keep]
    np.add.at(out, idx, vals)
    return out


@_maybe_njit
def _scatter_add_rows_loop(out, idx, vals):
    n, c = vals.shape
    for i in range(n):
        j = idx[i]
        if j < 0:
            continue
        for k in range(c):
            out[j, k] += vals[i, k]
    return out


def scatter_add_rows_numba(out: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    vals2 = np.ascontiguousarray(vals.reshape(vals.shape[0], -1))
    out2 = out.reshape(out.shape[0], -1)
    _scatter_add_rows_loop(out2, np.ascontiguousarray(idx, dtype=np.int64), vals2)
    return out


# ---------------------------------------------------------------------------
# range-image collision resolution: smallest range wins, ties -> lower index
# ---------------------------------------------------------------------------


def resolve_collisions_numpy(pix: np.ndarray, rng: np.ndarray, n_pixels: int) -> np.ndarray:
    """Return an owner array of length ``n_pixels`` (-1 where empty).

    ``pix`` holds the flat pixel id of each point (-1 for skipped points).
    """
    owner = np.full(n_pixels, -1, dtype=np.int64)
    cand = np.flatnonzero(pix >= 0)
    if cand.size == 0:
        return owner
    order = cand[np.lexsort((cand, rng[cand], pix[cand]))]
    p = pix[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = p[1:] != p[:-1]
    owner[p[first]] = order[first]
    return owner


@_maybe_njit
def resolve_collisions_numba(pix, rng, n_pixels):
    owner = np.full(n_pixels, -1, dtype=np.int64)
    for i in range(pix.shape[0]):
        p = pix[i]
        if p < 0:
            continue
        j = owner[p]
        if j < 0 or rng[i] < rng[j]:
            owner[p] = i
    return owner


# ---------------------------------------------------------------------------
# radius search on a uniform grid (cell size = radius)
# ---------------------------------------------------------------------------

_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64
)


def _build_grid(coords: np.ndarray, radius: float):
    cells = np.floor(coords / radius).astype(np.int64)
    cmin = cells.min(axis=0)
    dims = cells.max(axis=0) - cmin + 1
    rel = cells - cmin
    keys = (rel[:, 0] * dims[1] + rel[:, 1]) * dims[2] + rel[:, 2]
    order = np.argsort(keys, kind="stable")
    return order, keys[order], cmin, dims


def radius_search_numpy(coords, queries, radius, max_neighbors):
    coords = np.asarray(coords, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    q_n = queries.shape[0]
    out = np.full((q_n, max_neighbors), -1, dtype=np.int64)
    counts = np.zeros(q_n, dtype=np.int64)
    if coords.shape[0] == 0 or q_n == 0:
        return out, counts
    order, skeys, cmin, dims = _build_grid(coords, radius)
    qcell = np.floor(queries / radius).astype(np.int64) - cmin
    r2 = radius * radius

    q_ids, los, cnts = [], [], []
    for off in _OFFSETS:
        nc = qcell + off
        ok = np.all((nc >= 0) & (nc < dims), axis=1)
        key = (nc[:, 0] * dims[1] + nc[:, 1]) * dims[2] + nc[:, 2]
        lo = np.searchsorted(skeys, key, side="left")
        hi = np.searchsorted(skeys, key, side="right")
        q_ids.append(np.arange(q_n))
        los.append(lo)
        cnts.append(np.where(ok, hi - lo, 0))
    q_ids = np.concatenate(q_ids)
    los = np.concatenate(los)
    cnts = np.concatenate(cnts)
    total = int(cnts.sum())
    if total == 0:
        return out, counts
    rep_q = np.repeat(q_ids, cnts)
    base = np.repeat(los, cnts)
    within = np.arange(total) - np.repeat(np.cumsum(cnts) - cnts, cnts)
    pidx = order[base + within]

    dx = coords[pidx, 0] - queries[rep_q, 0]
    dy = coords[pidx, 1] - queries[rep_q, 1]
    dz = coords[pidx, 2] - queries[rep_q, 2]
    d2 = dx * dx + dy * dy + dz * dz
    hit = d2 <= r2
    rep_q, pidx, d2 = rep_q[hit], pidx[hit], d2[hit]

    srt = np.lexsort((pidx, d2, rep_q))
    rep_q, pidx = rep_q[srt], pidx[srt]
    grp = np.bincount(rep_q, minlength=q_n)
    starts = np.cumsum(grp) - grp
    rank = np.arange(rep_q.size) - starts[rep_q]
    keep = rank < max_neighbors
    out[rep_q[keep], rank[keep]] = pidx[keep]
    counts = np.minimum(grp, max_neighbors)
    return out, counts


@_maybe_njit
def _radius_search_loop(coords, queries, radius, max_neighbors, order, skeys, cmin, dims, offsets):
    q_n = queries.shape[0]
    out = np.full((q_n, max_neighbors), -1, dtype=np.int64)
    counts = np.zeros(q_n, dtype=np.int64)
    best_d = np.empty(max_neighbors, dtype=np.float64)
    best_i = np.empty(max_neighbors, dtype=np.int64)
    r2 = radius * radius
    for q in range(q_n):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        cx = np.int64(np.floor(qx / radius)) - cmin[0]
        cy = np.int64(np.floor(qy / radius)) - cmin[1]
        cz = np.int64(np.floor(qz / radius)) - cmin[2]
        n_best = 0
        for o in range(offsets.shape[0]):
            nx = cx + offsets[o, 0]
            ny = cy + offsets[o, 1]
            nz = cz + offsets[o, 2]
            if nx < 0 or ny < 0 or nz < 0 or nx >= dims[0] or ny >= dims[1] or nz >= dims[2]:
                continue
            key = (nx * dims[1] + ny) * dims[2] + nz
            lo = np.searchsorted(skeys, key, side="left")
            hi = np.searchsorted(skeys, key, side="right")
            for s in range(lo, hi):
                p = order[s]
                dx = coords[p, 0] - qx
                dy = coords[p, 1] - qy
                dz = coords[p, 2] - qz
                d2 = dx * dx + dy * dy + dz * dz
                if d2 > r2:
                    continue
                if n_best == max_neighbors:
                    wd = best_d[n_best - 1]
                    wi = best_i[n_best - 1]
                    if d2 > wd or (d2 == wd and p > wi):
                        continue
                    pos = n_best - 1
                else:
                    pos = n_best
                    n_best += 1
                while pos > 0 and (
                    best_d[pos - 1] > d2 or (best_d[pos - 1] == d2 and best_i[pos - 1] > p)
                ):
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = d2
                best_i[pos] = p
        counts[q] = n_best
        for k in range(n_best):
            out[q, k] = best_i[k]
    return out, counts


def radius_search_numba(coords, queries, radius, max_neighbors):
    q_n = queries.shape[0]
    if coords.shape[0] == 0 or q_n == 0:
        return (
            np.full((q_n, max_neighbors), -1, dtype=np.int64),
            np.zeros(q_n, dtype=np.int64),
        )
    order, skeys, cmin, dims = _build_grid(coords, radius)
    return _radius_search_loop(
        np.ascontiguousarray(coords, dtype=np.float64),
        np.ascontiguousarray(queries, dtype=np.float64),
        float(radius),
        int(max_neighbors),
        order.astype(np.int64),
        skeys,
        cmin,
        dims,
        _OFFSETS,
    )


# ---------------------------------------------------------------------------
# K-NN label voting over a range-image window
# ---------------------------------------------------------------------------


# Votes this close to the maximum count as tied (lowest label wins), so the
# one-ulp exp differences between numpy and libm cannot change a label.
VOTE_TIE_RTOL = 1e-9


def knn_vote_numpy(rows, cols, point_range, range_img, occupancy, pixel_labels, k, window, sigma,
                   num_labels):
    h, w = range_img.shape
    half = window // 2
    n = rows.shape[0]
    du, dv = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    du = du.ravel()
    dv = dv.ravel()
    rr = rows[:, None] + du[None, :]
    cc = cols[:, None] + dv[None, :]
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    rr_c = np.clip(rr, 0, h - 1)
    cc_c = np.clip(cc, 0, w - 1)
    occ = inside & occupancy[rr_c, cc_c]
    dist = np.abs(point_range[:, None] - range_img[rr_c, cc_c])
    dist = np.where(occ, dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    d_sel = np.take_along_axis(dist, order, axis=1)
    lab_sel = np.take_along_axis(pixel_labels[rr_c, cc_c], order, axis=1)
    valid = np.isfinite(d_sel)
    wts = np.where(valid, np.exp(-(d_sel * d_sel) / (2.0 * sigma * sigma)), 0.0)
    votes = np.zeros((n, num_labels), dtype=np.float64)
    for j in range(order.shape[1]):
        np.add.at(votes, (np.arange(n), lab_sel[:, j]), wts[:, j])
    top = votes.max(axis=1, keepdims=True)
    out = np.argmax(votes >= top * (1.0 - VOTE_TIE_RTOL), axis=1).astype(np.int64)
    empty = ~valid[:, 0] if order.shape[1] else np.ones(n, dtype=bool)
    out[empty] = pixel_labels[rows[empty], cols[empty]]
    return out


@_maybe_njit
def knn_vote_numba(rows, cols, point_range, range_img, occupancy, pixel_labels, k, window, sigma,
                   num_labels):
    h, w = range_img.shape
    half = window // 2
    n = rows.shape[0]
    out = np.empty(n, dtype=np.int64)
    cap = window * window
    cand_d = np.empty(cap, dtype=np.float64)
    cand_l = np.empty(cap, dtype=np.int64)
    votes = np.zeros(num_labels, dtype=np.float64)
    for i in range(n):
        m = 0
        for a in range(-half, half + 1):
            r = rows[i] + a
            if r < 0 or r >= h:
                continue
            for b in range(-half, half + 1):
                c = cols[i] + b
                if c < 0 or c >= w:
                    continue
                if not occupancy[r, c]:
                    continue
                d = abs(point_range[i] - range_img[r, c])
                # stable insertion keeps window scan order on ties
                pos = m
                while pos > 0 and cand_d[pos - 1] > d:
                    cand_d[pos] = cand_d[pos - 1]
                    cand_l[pos] = cand_l[pos - 1]
                    pos -= 1
                cand_d[pos] = d
                cand_l[pos] = pixel_labels[r, c]
                m += 1
        if m == 0:
            out[i] = pixel_labels[rows[i], cols[i]]
            continue
        for j in range(num_labels):
            votes[j] = 0.0
        for j in range(min(k, m)):
            dj = cand_d[j]
            votes[cand_l[j]] += np.exp(-(dj * dj) / (2.0 * sigma * sigma))
        top = votes[0]
        for j in range(1, num_labels):
            if votes[j] > top:
                top = votes[j]
        best = 0
        while votes[best] < top * (1.0 - VOTE_TIE_RTOL):
            best += 1
        out[i] = best
    return out


if USE_NUMBA:
    scatter_add_rows = scatter_add_rows_numba
    resolve_collisions = resolve_collisions_numba
    radius_search = radius_search_numba
    knn_vote = knn_vote_numba
else:
    scatter_add_rows = scatter_add_rows_numpy
    resolve_collisions = resolve_collisions_numpy
    radius_search = radius_search_numpy
    knn_vote = knn_vote_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
