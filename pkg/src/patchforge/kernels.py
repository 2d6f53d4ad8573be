"""Hot numeric kernels, each with a numba path and a pure-numpy path.

The JIT flavour is selected once at import by :mod:`patchforge.accel`.
Every kernel takes randomness (if any) as a pre-drawn uniform array, so
the two paths return identical results for identical inputs; the
``*_numba`` / ``*_numpy`` names stay importable for the parity tests and
for ``patchforge bench-kernels``.
"""

from __future__ import annotations

import math

import numpy as np

from .accel import JIT_ENABLED, njit

# node type codes
PAPER = 0
AUTHOR = 1
INSTITUTION = 2

# patch relation codes: (sampler type, what was sampled)
REL_CITED = 0  # paper -> cited paper
REL_CITING = 1  # paper -> citing paper
REL_AUTHOR_OF = 2  # paper -> one of its authors
REL_PAPER_OF = 3  # author -> paper they wrote
REL_INST_OF = 4  # author -> affiliated institution


# ---------------------------------------------------------------------------
# segment sum (scatter-add over rows)

def _segment_sum_rows_loop(data, seg, out):
    for e in range(data.shape[0]):
        s = seg[e]
        for f in range(data.shape[1]):
            out[s, f] += data[e, f]


def segment_sum_rows_numpy(data, seg, out):
    # add.at applies increments in occurrence order, matching the loop kernel
    np.add.at(out, seg, data)


segment_sum_rows_numba = njit(cache=True)(_segment_sum_rows_loop)

_segment_impl = segment_sum_rows_numba if JIT_ENABLED else segment_sum_rows_numpy


def segment_sum_rows(data: np.ndarray, seg: np.ndarray, num_segments: int) -> np.ndarray:
    """Sum rows of ``data`` into ``num_segments`` buckets given by ``seg``.

    Accumulation is in ascending input-row order, identically on both
    paths, so results are bit-reproducible.
    """
    if data.ndim != 2:
        raise ValueError(f"segment_sum expects a rank-2 array, got shape {data.shape}")
    if seg.shape[0] != data.shape[0]:
        raise ValueError(f"segment ids ({seg.shape[0]}) do not match rows ({data.shape[0]})")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValueError("segment id out of range")
    out = np.zeros((num_segments, data.shape[1]), dtype=data.dtype)
    if data.shape[0]:
        _segment_impl(data, seg, out)
    return out


# ---------------------------------------------------------------------------
# neighbor selection cores (shared by sampler and patch kernel)

def _fisher_yates_take_loop(targets, start, n, k, u, iu, out):
    """Take k of n row-local indices without replacement; consumes u[iu:iu+k]."""
    idx = np.arange(n)
    for r in range(k):
        j = r + int(u[iu] * (n - r))
        iu += 1
        tmp = idx[r]
        idx[r] = idx[j]
        idx[j] = tmp
    for r in range(k):
        out[r] = targets[start + idx[r]]
    return iu


def _with_replacement_take_loop(targets, start, n, k, u, iu, out):
    for r in range(k):
        out[r] = targets[start + int(u[iu] * n)]
        iu += 1
    return iu


fisher_yates_take_numba = njit(cache=True)(_fisher_yates_take_loop)
with_replacement_take_numba = njit(cache=True)(_with_replacement_take_loop)

fisher_yates_take = fisher_yates_take_numba if JIT_ENABLED else _fisher_yates_take_loop
with_replacement_take = with_replacement_take_numba if JIT_ENABLED else _with_replacement_take_loop


# ---------------------------------------------------------------------------
# whole-patch expansion core
#
# One source serves both paths: it is written in numba-compatible loop
# style (open-addressing table on plain int arrays instead of a dict) and
# compiled with njit when enabled. All K values arrive in one int64 array:
#   ks = [d1 cited, d1 citing, d1 authors,
#         d2 cited, d2 citing, d2 authors, d2 papers-of-author, d2 institutions]

def _patch_core_impl(center,
                     off_cited, tgt_cited,
                     off_citing, tgt_citing,
                     off_auth, tgt_auth,
                     off_papers, tgt_papers,
                     off_inst, tgt_inst,
                     ks, u,
                     node_gid, node_type, node_depth,
                     edge_src, edge_dst, edge_rel,
                     tkeys, tvals, chosen):
    mask = tkeys.shape[0] - 1
    iu = 0
    n_edges = 0

    node_gid[0] = center
    node_type[0] = PAPER
    node_depth[0] = 0
    key = center * 4 + PAPER
    slot = key & mask
    while tkeys[slot] != -1:
        slot = (slot + 1) & mask
    tkeys[slot] = key
    tvals[slot] = 0
    n_nodes = 1

    i = 0
    while i < n_nodes:
        depth = node_depth[i]
        if depth >= 2:
            i += 1
            continue
        ntype = node_type[i]
        gid = node_gid[i]
        # relation schedule for this node
        if ntype == PAPER:
            n_rel = 3
        elif ntype == AUTHOR:
            n_rel = 2
        else:
            i += 1
            continue
        for rslot in range(n_rel):
            if ntype == PAPER:
                if rslot == 0:
                    off = off_cited
                    tgt = tgt_cited
                    rel = REL_CITED
                    stype = PAPER
                    k = ks[0] if depth == 0 else ks[3]
                elif rslot == 1:
                    off = off_citing
                    tgt = tgt_citing
                    rel = REL_CITING
                    stype = PAPER
                    k = ks[1] if depth == 0 else ks[4]
                else:
                    off = off_auth
                    tgt = tgt_auth
                    rel = REL_AUTHOR_OF
                    stype = AUTHOR
                    k = ks[2] if depth == 0 else ks[5]
            else:
                if rslot == 0:
                    off = off_papers
                    tgt = tgt_papers
                    rel = REL_PAPER_OF
                    stype = PAPER
                    k = ks[6]
                else:
                    off = off_inst
                    tgt = tgt_inst
                    rel = REL_INST_OF
                    stype = INSTITUTION
                    k = ks[7]
            start = off[gid]
            n = off[gid + 1] - start
            if k <= 0 or n <= 0:
                continue
            if n <= k:
                m = n
                for r in range(m):
                    chosen[r] = tgt[start + r]
            elif n <= 5 * k:
                m = k
                iu = fisher_yates_take(tgt, start, n, k, u, iu, chosen)
            else:
                m = k
                iu = with_replacement_take(tgt, start, n, k, u, iu, chosen)
            exp_start = n_edges
            for r in range(m):
                gid2 = chosen[r]
                key = gid2 * 4 + stype
                slot = key & mask
                while True:
                    kk = tkeys[slot]
                    if kk == key or kk == -1:
                        break
                    slot = (slot + 1) & mask
                if tkeys[slot] == -1:
                    tkeys[slot] = key
                    tvals[slot] = n_nodes
                    pidx = n_nodes
                    node_gid[pidx] = gid2
                    node_type[pidx] = stype
                    node_depth[pidx] = depth + 1
                    n_nodes += 1
                    keep = True
                else:
                    pidx = tvals[slot]
                    dd = node_depth[pidx] - depth
                    # re-encounters: keep edges into the central node or
                    # between adjacent depths; drop same-depth extras
                    keep = pidx == 0 or dd == 1 or dd == -1
                if keep:
                    dup = False
                    for e in range(exp_start, n_edges):
                        if edge_src[e] == pidx:
                            dup = True
                            break
                    if not dup:
                        edge_src[n_edges] = pidx
                        edge_dst[n_edges] = i
                        edge_rel[n_edges] = rel
                        n_edges += 1
        i += 1
    return n_nodes, n_edges, iu


patch_core_numpy = _patch_core_impl
patch_core_numba = njit(cache=True)(_patch_core_impl)
patch_core = patch_core_numba if JIT_ENABLED else patch_core_numpy


# ---------------------------------------------------------------------------
# cyclic Jacobi eigensolver for symmetric matrices (PCA backbone)

def _jacobi_sweeps_loop(a, v, tol, max_sweeps):
    n = a.shape[0]
    fro2 = 0.0
    for r in range(n):
        for c in range(n):
            fro2 += a[r, c] * a[r, c]
    if fro2 == 0.0:
        return 0
    sweeps = 0
    for _ in range(max_sweeps):
        off2 = 0.0
        for r in range(n):
            for c in range(r + 1, n):
                off2 += 2.0 * a[r, c] * a[r, c]
        if off2 <= tol * tol * fro2:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                for r in range(n):
                    arp = a[r, p]
                    arq = a[r, q]
                    a[r, p] = c * arp - s * arq
                    a[r, q] = s * arp + c * arq
                for r in range(n):
                    apr = a[p, r]
                    aqr = a[q, r]
                    a[p, r] = c * apr - s * aqr
                    a[q, r] = s * apr + c * aqr
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for r in range(n):
                    vrp = v[r, p]
                    vrq = v[r, q]
                    v[r, p] = c * vrp - s * vrq
                    v[r, q] = s * vrp + c * vrq
    return sweeps


def jacobi_sweeps_numpy(a, v, tol, max_sweeps):
    n = a.shape[0]
    fro2 = float((a * a).sum())
    if fro2 == 0.0:
        return 0
    sweeps = 0
    for _ in range(max_sweeps):
        off2 = 2.0 * float((np.triu(a, 1) ** 2).sum())
        if off2 <= tol * tol * fro2:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return sweeps


jacobi_sweeps_numba = njit(cache=True)(_jacobi_sweeps_loop)

_jacobi_impl = jacobi_sweeps_numba if JIT_ENABLED else jacobi_sweeps_numpy


def sym_eigh_desc(mat: np.ndarray, tol: float = 1e-14, max_sweeps: int = 50):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Cyclic Jacobi in float64; deterministic for a given input. Intended
    for desk-scale matrices (n <= 1024).
    """
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    a = np.array(mat, dtype=np.float64, order="C", copy=True)
    v = np.eye(a.shape[0], dtype=np.float64)
    _jacobi_impl(a, v, tol, max_sweeps)
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]
