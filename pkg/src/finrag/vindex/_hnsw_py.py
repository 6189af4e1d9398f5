"""Pure-Python HNSW kernels; same signatures and semantics as ``_hnsw_ext``.

Used when the compiled extension is unavailable or ``FINRAG_PURE_PYTHON=1``.
"""

from __future__ import annotations

import heapq

import numpy as np


class _Graph:
    __slots__ = ("vecs", "links0", "cnt0", "up_off", "links_up", "cnt_up", "visited", "tag", "m0", "m")

    def __init__(self, vecs, links0, cnt0, up_off, links_up, cnt_up, visited, tag):
        self.vecs = vecs
        self.links0 = links0
        self.cnt0 = cnt0
        self.up_off = up_off
        self.links_up = links_up
        self.cnt_up = cnt_up
        self.visited = visited
        self.tag = int(tag)
        self.m0 = links0.shape[1]
        self.m = links_up.shape[1]

    def links(self, node, level):
        if level == 0:
            return self.links0[node, : self.cnt0[node]]
        row = self.up_off[node] + level - 1
        return self.links_up[row, : self.cnt_up[row]]

    def set_links(self, node, level, nbrs):
        if level == 0:
            self.links0[node, : len(nbrs)] = nbrs
            self.cnt0[node] = len(nbrs)
        else:
            row = self.up_off[node] + level - 1
            self.links_up[row, : len(nbrs)] = nbrs
            self.cnt_up[row] = len(nbrs)

    def next_tag(self):
        self.tag = (self.tag + 1) & 0xFFFFFFFF
        if self.tag == 0:
            self.visited[:] = 0
            self.tag = 1


def _dists(g: _Graph, q: np.ndarray, nodes) -> list[float]:
    return (-(g.vecs[nodes] @ q)).tolist()


def _search_layer(g: _Graph, q, entry, ef, level):
    g.next_tag()
    visited, tag = g.visited, g.tag
    cand = []
    res = []  # max-heap via (-d, -id)
    for d, e in entry:
        visited[e] = tag
        heapq.heappush(cand, (d, e))
        heapq.heappush(res, (-d, -e))
    while cand:
        d, c = cand[0]
        if d > -res[0][0] and len(res) >= ef:
            break
        heapq.heappop(cand)
        nbrs = [int(n) for n in g.links(c, level) if visited[n] != tag]
        if not nbrs:
            continue
        visited[nbrs] = tag
        for nb, dn in zip(nbrs, _dists(g, q, nbrs)):
            if len(res) < ef or dn < -res[0][0]:
                heapq.heappush(cand, (dn, nb))
                heapq.heappush(res, (-dn, -nb))
                if len(res) > ef:
                    heapq.heappop(res)
    return sorted((-d, -e) for d, e in res)


def _select(g: _Graph, cands, limit):
    out: list[int] = []
    for d, e in cands:
        if len(out) >= limit:
            break
        if out and min(_dists(g, g.vecs[e], out)) < d:
            continue
        out.append(e)
    return out


def _greedy(g: _Graph, q, ep, dep, top, bottom):
    for lc in range(top, bottom, -1):
        changed = True
        while changed:
            changed = False
            nbrs = [int(n) for n in g.links(ep, lc)]
            for nb, d in zip(nbrs, _dists(g, q, nbrs) if nbrs else []):
                if d < dep or (d == dep and nb < ep):
                    dep, ep = d, nb
                    changed = True
    return ep, dep


def _connect(g: _Graph, node, level, w):
    sel = _select(g, w, g.m)
    g.set_links(node, level, sel)
    mmax = g.m0 if level == 0 else g.m
    for e in sel:
        nbrs = [int(n) for n in g.links(e, level)]
        if len(nbrs) < mmax:
            g.set_links(e, level, nbrs + [node])
            continue
        pool = nbrs + [node]
        cands = sorted(zip(_dists(g, g.vecs[e], pool), pool))
        g.set_links(e, level, _select(g, cands, mmax))


def insert(vecs, levels, links0, cnt0, up_off, links_up, cnt_up, visited, tag,
           node, entry, max_level, ef_construction):
    g = _Graph(vecs, links0, cnt0, up_off, links_up, cnt_up, visited, tag)
    if entry < 0:
        return g.tag
    q = vecs[node]
    level = int(levels[node])
    dep = float(-(vecs[entry] @ q))
    ep, dep = _greedy(g, q, entry, dep, max_level, level)
    eps = [(dep, ep)]
    for lc in range(min(level, max_level), -1, -1):
        w = _search_layer(g, q, eps, ef_construction, lc)
        _connect(g, node, lc, w)
        eps = w
    return g.tag


def search(vecs, levels, links0, cnt0, up_off, links_up, cnt_up, visited, tag,
           query, entry, max_level, ef, k):
    g = _Graph(vecs, links0, cnt0, up_off, links_up, cnt_up, visited, tag)
    if entry < 0:
        return np.empty(0, dtype=np.int32), np.empty(0, dtype=np.float64), g.tag
    dep = float(-(vecs[entry] @ query))
    ep, dep = _greedy(g, query, entry, dep, max_level, 0)
    w = _search_layer(g, query, [(dep, ep)], max(ef, k), 0)[:k]
    ids = np.array([e for _, e in w], dtype=np.int32)
    sims = np.array([-d for d, _ in w], dtype=np.float64)
    return ids, sims, g.tag
