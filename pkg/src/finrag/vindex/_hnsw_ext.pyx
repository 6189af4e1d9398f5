# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# distutils: language = c++
"""Compiled HNSW insert/search kernels.

Graph storage is owned by the Python ``HnswIndex``; these functions only read
and mutate the arrays handed to them. Distances are negated inner products
of unit vectors, so similarity is exactly ``-distance``.
"""

from libcpp.vector cimport vector
from libcpp.pair cimport pair
from libcpp.queue cimport priority_queue
from libcpp.algorithm cimport sort as cpp_sort

import numpy as np

ctypedef pair[double, int] DI

cdef struct Graph:
    const double* vecs
    int dim
    const int* levels
    int* links0
    int* cnt0
    int m0
    const long long* up_off
    int* links_up
    int* cnt_up
    int m
    unsigned int* visited
    unsigned int tag
    Py_ssize_t n_visited


cdef inline double _dist(const Graph* g, const double* q, int node) noexcept nogil:
    cdef const double* p = g.vecs + <Py_ssize_t>node * g.dim
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef int i = 0
    cdef int n4 = g.dim - (g.dim & 3)
    # four independent accumulators so the compiler can pipeline/vectorize
    while i < n4:
        s0 += p[i] * q[i]
        s1 += p[i + 1] * q[i + 1]
        s2 += p[i + 2] * q[i + 2]
        s3 += p[i + 3] * q[i + 3]
        i += 4
    while i < g.dim:
        s0 += p[i] * q[i]
        i += 1
    return -((s0 + s1) + (s2 + s3))


cdef inline int* _links(const Graph* g, int node, int level, int** count) noexcept nogil:
    cdef long long row
    if level == 0:
        count[0] = g.cnt0 + node
        return g.links0 + <Py_ssize_t>node * g.m0
    row = g.up_off[node] + level - 1
    count[0] = g.cnt_up + row
    return g.links_up + row * g.m


cdef inline void _next_tag(Graph* g) noexcept nogil:
    cdef Py_ssize_t i
    g.tag += 1
    if g.tag == 0:
        for i in range(g.n_visited):
            g.visited[i] = 0
        g.tag = 1


cdef void _search_layer(Graph* g, const double* q, vector[DI]& entry, int ef, int level,
                        vector[DI]& out) noexcept nogil:
    # candidates: min-heap via negated keys; results: max-heap on distance
    cdef priority_queue[DI] cand
    cdef priority_queue[DI] res
    cdef DI top
    cdef int i, nb
    cdef int* cnt
    cdef int* nbrs
    cdef double d
    _next_tag(g)
    for i in range(<int>entry.size()):
        g.visited[entry[i].second] = g.tag
        cand.push(DI(-entry[i].first, -entry[i].second))
        res.push(entry[i])
    while not cand.empty():
        top = cand.top()
        if -top.first > res.top().first and <int>res.size() >= ef:
            break
        cand.pop()
        nbrs = _links(g, -top.second, level, &cnt)
        for i in range(cnt[0]):
            nb = nbrs[i]
            if g.visited[nb] == g.tag:
                continue
            g.visited[nb] = g.tag
            d = _dist(g, q, nb)
            if <int>res.size() < ef or d < res.top().first:
                cand.push(DI(-d, -nb))
                res.push(DI(d, nb))
                if <int>res.size() > ef:
                    res.pop()
    out.clear()
    while not res.empty():
        out.push_back(res.top())
        res.pop()
    cpp_sort(out.begin(), out.end())


cdef void _select(Graph* g, vector[DI]& cands, int limit, vector[int]& out) noexcept nogil:
    # diversity heuristic: keep e only if it is closer to the base than to any kept neighbor
    cdef int i, j, e
    cdef bint good
    cdef const double* ve
    out.clear()
    for i in range(<int>cands.size()):
        if <int>out.size() >= limit:
            break
        e = cands[i].second
        ve = g.vecs + <Py_ssize_t>e * g.dim
        good = True
        for j in range(<int>out.size()):
            if _dist(g, ve, out[j]) < cands[i].first:
                good = False
                break
        if good:
            out.push_back(e)


cdef int _greedy(Graph* g, const double* q, int ep, double* dep, int top, int bottom) noexcept nogil:
    cdef int lc, i, nb
    cdef bint changed
    cdef int* cnt
    cdef int* nbrs
    cdef double d
    for lc in range(top, bottom, -1):
        changed = True
        while changed:
            changed = False
            nbrs = _links(g, ep, lc, &cnt)
            for i in range(cnt[0]):
                nb = nbrs[i]
                d = _dist(g, q, nb)
                if d < dep[0] or (d == dep[0] and nb < ep):
                    dep[0] = d
                    ep = nb
                    changed = True
    return ep


cdef void _connect(Graph* g, int node, int level, vector[DI]& w, int m) noexcept nogil:
    cdef vector[int] sel
    cdef vector[int] pruned
    cdef vector[DI] cands
    cdef int i, j, e, mmax
    cdef int* cnt
    cdef int* nbrs
    cdef int* ecnt
    cdef int* enbrs
    cdef const double* ve
    _select(g, w, m, sel)
    nbrs = _links(g, node, level, &cnt)
    for i in range(<int>sel.size()):
        nbrs[i] = sel[i]
    cnt[0] = <int>sel.size()
    mmax = g.m0 if level == 0 else g.m
    for i in range(<int>sel.size()):
        e = sel[i]
        enbrs = _links(g, e, level, &ecnt)
        if ecnt[0] < mmax:
            enbrs[ecnt[0]] = node
            ecnt[0] += 1
            continue
        ve = g.vecs + <Py_ssize_t>e * g.dim
        cands.clear()
        for j in range(ecnt[0]):
            cands.push_back(DI(_dist(g, ve, enbrs[j]), enbrs[j]))
        cands.push_back(DI(_dist(g, ve, node), node))
        cpp_sort(cands.begin(), cands.end())
        _select(g, cands, mmax, pruned)
        for j in range(<int>pruned.size()):
            enbrs[j] = pruned[j]
        ecnt[0] = <int>pruned.size()


cdef Graph _graph(const double[:, ::1] vecs, const int[::1] levels, int[:, ::1] links0,
                  int[::1] cnt0, const long long[::1] up_off, int[:, ::1] links_up,
                  int[::1] cnt_up, unsigned int[::1] visited, unsigned int tag):
    cdef Graph g
    g.vecs = &vecs[0, 0]
    g.dim = <int>vecs.shape[1]
    g.levels = &levels[0]
    g.links0 = &links0[0, 0]
    g.cnt0 = &cnt0[0]
    g.m0 = <int>links0.shape[1]
    g.up_off = &up_off[0]
    g.links_up = &links_up[0, 0]
    g.cnt_up = &cnt_up[0]
    g.m = <int>links_up.shape[1]
    g.visited = &visited[0]
    g.tag = tag
    g.n_visited = visited.shape[0]
    return g


def insert(const double[:, ::1] vecs, const int[::1] levels, int[:, ::1] links0, int[::1] cnt0,
           const long long[::1] up_off, int[:, ::1] links_up, int[::1] cnt_up,
           unsigned int[::1] visited, unsigned int tag,
           int node, int entry, int max_level, int ef_construction):
    """Link ``node`` (already stored in ``vecs``/``levels``) into the graph. Returns the new visit tag."""
    cdef Graph g = _graph(vecs, levels, links0, cnt0, up_off, links_up, cnt_up, visited, tag)
    cdef const double* q = g.vecs + <Py_ssize_t>node * g.dim
    cdef int level = levels[node]
    cdef int lc, ep
    cdef double dep
    cdef vector[DI] eps
    cdef vector[DI] w
    if entry < 0:
        return g.tag
    with nogil:
        dep = _dist(&g, q, entry)
        ep = _greedy(&g, q, entry, &dep, max_level, level)
        eps.push_back(DI(dep, ep))
        for lc in range(level if level < max_level else max_level, -1, -1):
            _search_layer(&g, q, eps, ef_construction, lc, w)
            _connect(&g, node, lc, w, g.m)
            eps = w
    return g.tag


def search(const double[:, ::1] vecs, const int[::1] levels, int[:, ::1] links0, int[::1] cnt0,
           const long long[::1] up_off, int[:, ::1] links_up, int[::1] cnt_up,
           unsigned int[::1] visited, unsigned int tag,
           const double[::1] query, int entry, int max_level, int ef, int k):
    """Approximate k nearest nodes. Returns ``(node_ids, similarities, tag)``, best first."""
    cdef Graph g = _graph(vecs, levels, links0, cnt0, up_off, links_up, cnt_up, visited, tag)
    cdef const double* q = &query[0]
    cdef double dep
    cdef int ep, i, n
    cdef vector[DI] eps
    cdef vector[DI] w
    cdef int[::1] ids_v
    cdef double[::1] sims_v
    if entry < 0:
        return np.empty(0, dtype=np.int32), np.empty(0, dtype=np.float64), g.tag
    with nogil:
        dep = _dist(&g, q, entry)
        ep = _greedy(&g, q, entry, &dep, max_level, 0)
        eps.push_back(DI(dep, ep))
        _search_layer(&g, q, eps, ef if ef > k else k, 0, w)
    n = k if k < <int>w.size() else <int>w.size()
    ids = np.empty(n, dtype=np.int32)
    sims = np.empty(n, dtype=np.float64)
    ids_v = ids
    sims_v = sims
    for i in range(n):
        ids_v[i] = w[i].second
        sims_v[i] = -w[i].first
    return ids, sims, g.tag
