"""Independent reference computations used by the test-suite.

Everything here is deliberately naive (explicit loops, general-purpose
solvers) and shares no code with the package paths it checks.
"""

import math

import numpy as np


def feature_affinity_loop(f):
    n = len(f)
    w = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            w[u, v] = max(sum(a * b for a, b in zip(f[u], f[v])), 0.0)
    return w


def knn_kernel_loop(desc, k):
    """Brute-force KNN (self excluded, ties to lower index) + kernel + max-symmetrise."""
    n = len(desc)
    w = np.zeros((n, n))
    for v in range(n):
        d2 = []
        for u in range(n):
            if u == v:
                continue
            d2.append((sum((a - b) ** 2 for a, b in zip(desc[v], desc[u])), u))
        d2.sort()
        for dist2, u in d2[:k]:
            w[v, u] = min(1.0, max(0.0, 1.0 - math.sqrt(dist2)))
    return np.maximum(w, w.T)


def dense_laplacian(w, kind):
    deg = w.sum(axis=1)
    lap = np.diag(deg) - w
    if kind == "symmetric":
        s = np.array([1 / math.sqrt(d) if d > 0 else 0.0 for d in deg])
        lap = np.diag(s) @ lap @ np.diag(s)
    return lap


def full_spectrum(w, kind, cluster_tol=1e-6):
    """Eigenvalues from the general (non-symmetric) LAPACK driver; each
    eigenspace as the numerical null space of ``L - lambda I`` from an SVD.

    The non-symmetric driver can return parallel vectors for a repeated
    eigenvalue, so its vectors are not used.
    """
    lap = dense_laplacian(w, kind)
    vals = np.sort(np.linalg.eigvals(lap).real, kind="stable")
    out = np.empty((len(vals), len(vals)))
    i = 0
    while i < len(vals):
        j = i + 1
        while j < len(vals) and vals[j] - vals[j - 1] < cluster_tol:
            j += 1
        lam = vals[i:j].mean()
        _, _, vt = np.linalg.svd(lap - lam * np.eye(len(vals)))
        out[:, i:j] = vt[len(vals) - (j - i):].T
        i = j
    return vals, out


def component_count(w, tol=0.0):
    n = len(w)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u in range(n):
        for v in range(u + 1, n):
            if w[u, v] > tol:
                ru, rv = find(u), find(v)
                if ru != rv:
                    parent[ru] = rv
    return len({find(a) for a in range(n)})


def cosine_distance(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return 1.0 - dot / (na * nb)


def tv_loop(img):
    """Squared anisotropic TV of a (C, H, W) array: per channel, mean of
    squared vertical diffs plus mean of squared horizontal diffs, then the
    mean over channels."""
    C, H, W = img.shape
    total = 0.0
    for c in range(C):
        vert = [(img[c, i + 1, j] - img[c, i, j]) ** 2 for i in range(H - 1) for j in range(W)]
        horiz = [(img[c, i, j + 1] - img[c, i, j]) ** 2 for i in range(H) for j in range(W - 1)]
        total += (sum(vert) / len(vert) if vert else 0.0) + (sum(horiz) / len(horiz) if horiz else 0.0)
    return total / C


def top_k_mean(scores, k):
    """Selection sort on (-nima, image_id), then fsum means."""
    pool = list(scores)
    chosen = []
    for _ in range(k):
        best = pool[0]
        for s in pool[1:]:
            if (-s.nima, s.image_id) < (-best.nima, best.image_id):
                best = s
        chosen.append(best)
        pool.remove(best)
    return (math.fsum(s.dists for s in chosen) / k,
            math.fsum(s.nima for s in chosen) / k,
            [s.image_id for s in chosen])
