"""Independent brute-force oracles used to verify the fast implementations.

Each oracle recomputes a quantity by enumeration, Monte-Carlo sampling,
finite differences or derivative-free search, sharing as little code as
possible with the implementation it checks. The test suite and the CLI
``oracle`` subcommand both run these.
"""

import itertools

import numpy as np


def mc_box_iou(b1, b2, n_samples=1_000_000, seed=12345):
    """Monte-Carlo IoU estimate: uniform samples over the union's AABB."""
    lo1, hi1 = b1.aabb()
    lo2, hi2 = b2.aabb()
    lo = np.minimum(lo1, lo2)
    hi = np.maximum(hi1, hi2)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    pts = rng.uniform(lo, hi, size=(n_samples, 3))
    in1 = b1.contains(pts)
    in2 = b2.contains(pts)
    either = np.count_nonzero(in1 | in2)
    if either == 0:
        return 0.0
    return float(np.count_nonzero(in1 & in2) / either)


def brute_force_one_to_one(candidates, scores):
    """Exhaustive maximiser of the summed score over one-to-one candidate subsets.

    candidates carry .frame_index and .map_object_index; two candidates
    conflict when they share either. Returns (best subset as a sorted tuple of
    candidate indices, best total, second-best total over distinct subsets).
    """
    n = len(candidates)
    if n > 20:
        raise ValueError("brute force limited to 20 candidates")
    best = ()
    best_total = 0.0
    second_total = -np.inf
    for mask in range(1, 1 << n):
        idx = [i for i in range(n) if mask >> i & 1]
        frames = [candidates[i].frame_index for i in idx]
        maps = [candidates[i].map_object_index for i in idx]
        if len(set(frames)) != len(frames) or len(set(maps)) != len(maps):
            continue
        total = float(sum(scores[i] for i in idx))
        if total > best_total:
            second_total = best_total
            best_total = total
            best = tuple(idx)
        elif total > second_total:
            second_total = total
    return best, best_total, second_total


def _rotvec_to_matrix(w):
    # local Rodrigues, independent of geometry.exp_so3
    theta = float(np.sqrt(w[0] ** 2 + w[1] ** 2 + w[2] ** 2))
    if theta < 1e-14:
        return np.eye(3)
    a = np.asarray(w, dtype=np.float64) / theta
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]], dtype=np.float64)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def weighted_ao_cost(xi, base_rotation, base_translation, frame_pts, map_pts, weights):
    """Mahalanobis-weighted alignment cost at the left-perturbed pose exp(xi) * base."""
    dr = _rotvec_to_matrix(xi[:3])
    r = dr @ base_rotation
    t = dr @ base_translation + xi[3:]
    resid = map_pts - (frame_pts @ r.T + t)
    return float(np.einsum("ni,nij,nj->", resid, weights, resid))


def coordinate_descent_ao(frame_pts, map_pts, weights, init_rotation, init_translation,
                          tol=1e-7, max_sweeps=600, span=0.5):
    """Derivative-free minimiser of the weighted alignment cost.

    Cyclic coordinate descent over the 6 perturbation parameters with golden
    section line search, re-anchoring the base pose after every move. Only
    cost evaluations are used; no gradients shared with the solver under test.
    Convergence is linear with rate set by the conditioning, hence the large
    sweep budget.
    """
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    r = np.array(init_rotation, dtype=np.float64)
    t = np.array(init_translation, dtype=np.float64)

    def line_search(k):
        def f(s):
            xi = np.zeros(6)
            xi[k] = s
            return weighted_ao_cost(xi, r, t, frame_pts, map_pts, weights)

        a, b = -span, span
        c = b - golden * (b - a)
        d = a + golden * (b - a)
        fc, fd = f(c), f(d)
        while b - a > 1e-10:
            if fc < fd:
                b, d, fd = d, c, fc
                c = b - golden * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + golden * (b - a)
                fd = f(d)
        s = 0.5 * (a + b)
        return s if f(s) < f(0.0) else 0.0

    for _ in range(max_sweeps):
        moved = 0.0
        for k in range(6):
            s = line_search(k)
            if s != 0.0:
                xi = np.zeros(6)
                xi[k] = s
                dr = _rotvec_to_matrix(xi[:3])
                r = dr @ r
                t = dr @ t + xi[3:]
                moved = max(moved, abs(s))
        if moved < tol:
            break
    return r, t


def numerical_gradient(cost_fn, dim=6, h=1e-6):
    """Central finite-difference gradient of cost_fn over a perturbation chart."""
    g = np.zeros(dim)
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        g[k] = (cost_fn(e) - cost_fn(-e)) / (2.0 * h)
    return g


def ray_box_intersection(origin, direction, center, rotation, extents):
    """Scalar ray vs oriented box, written independently of the renderer.

    Returns the entry distance along the (unit) direction or None. Intervals
    are intersected axis by axis in the box frame.
    """
    o = rotation.T @ (np.asarray(origin, dtype=np.float64) - center)
    d = rotation.T @ np.asarray(direction, dtype=np.float64)
    lo, hi = -np.inf, np.inf
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if abs(o[a]) > extents[a]:
                return None
            continue
        ta = (-extents[a] - o[a]) / d[a]
        tb = (extents[a] - o[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        lo = max(lo, ta)
        hi = min(hi, tb)
        if lo > hi:
            return None
    if hi <= 1e-9:
        return None
    return lo if lo > 1e-9 else hi


def exhaustive_ransac_triples(frame_pts, map_pts, fit_fn, inlier_threshold):
    """Enumerate all 3-subsets, fit with fit_fn, return the best inlier set.

    Ranking matches the RANSAC contract: most inliers first, ties broken by
    lower summed residual over the inliers.
    """
    n = len(frame_pts)
    best = None
    for triple in itertools.combinations(range(n), 3):
        try:
            rot, tr = fit_fn(frame_pts[list(triple)], map_pts[list(triple)])
        except Exception:
            continue
        resid = np.linalg.norm(map_pts - (frame_pts @ rot.T + tr), axis=1)
        inliers = np.flatnonzero(resid < inlier_threshold)
        score = (len(inliers), -float(resid[inliers].sum()))
        if best is None or score > best[0]:
            best = (score, tuple(inliers))
    if best is None:
        return ()
    return best[1]
