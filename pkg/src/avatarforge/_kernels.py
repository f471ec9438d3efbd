"""Numba kernels for the geometry hot loops (BVH queries, raster fill).

Everything here is deterministic: fixed traversal order, strict-improvement
updates, z-ties broken by lower face index.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _closest_point_triangle(a, b, c, p, out):
    """Ericson's closest-point-on-triangle. Writes into out, returns dist^2."""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        out[0], out[1], out[2] = a[0], a[1], a[2]
    else:
        bpx, bpy, bpz = p[0] - b[0], p[1] - b[1], p[2] - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            out[0], out[1], out[2] = b[0], b[1], b[2]
        else:
            vc = d1 * d4 - d3 * d2
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                denom = d1 - d3
                v = 0.0 if denom == 0.0 else d1 / denom
                out[0] = a[0] + v * abx
                out[1] = a[1] + v * aby
                out[2] = a[2] + v * abz
            else:
                cpx, cpy, cpz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
                d5 = abx * cpx + aby * cpy + abz * cpz
                d6 = acx * cpx + acy * cpy + acz * cpz
                if d6 >= 0.0 and d5 <= d6:
                    out[0], out[1], out[2] = c[0], c[1], c[2]
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                        denom = d2 - d6
                        w = 0.0 if denom == 0.0 else d2 / denom
                        out[0] = a[0] + w * acx
                        out[1] = a[1] + w * acy
                        out[2] = a[2] + w * acz
                    else:
                        va = d3 * d6 - d5 * d4
                        e1 = d4 - d3
                        e2 = d5 - d6
                        if va <= 0.0 and e1 >= 0.0 and e2 >= 0.0:
                            denom = e1 + e2
                            w = 0.0 if denom == 0.0 else e1 / denom
                            out[0] = b[0] + w * (c[0] - b[0])
                            out[1] = b[1] + w * (c[1] - b[1])
                            out[2] = b[2] + w * (c[2] - b[2])
                        else:
                            denom = va + vb + vc
                            if denom == 0.0:
                                out[0], out[1], out[2] = a[0], a[1], a[2]
                            else:
                                v = vb / denom
                                w = vc / denom
                                out[0] = a[0] + abx * v + acx * w
                                out[1] = a[1] + aby * v + acy * w
                                out[2] = a[2] + abz * v + acz * w
    dx, dy, dz = p[0] - out[0], p[1] - out[1], p[2] - out[2]
    return dx * dx + dy * dy + dz * dz


@njit(cache=True, inline="always")
def _box_dist2(bmin, bmax, p):
    d2 = 0.0
    for k in range(3):
        v = p[k]
        if v < bmin[k]:
            d = bmin[k] - v
            d2 += d * d
        elif v > bmax[k]:
            d = v - bmax[k]
            d2 += d * d
    return d2


@njit(cache=True)
def bvh_closest_points(points, bmin, bmax, left, right, start, count,
                       order, va, vb, vc):
    """Exact closest point on a triangle set for each query point.

    Returns (dist2, face_index, closest_point) arrays. Node arrays follow the
    layout produced by mesh.TriangleBVH; `order` maps leaf slots to face ids.
    """
    n = points.shape[0]
    out_d2 = np.empty(n, np.float64)
    out_face = np.empty(n, np.int64)
    out_pt = np.empty((n, 3), np.float64)
    stack = np.empty(128, np.int64)
    tmp = np.empty(3, np.float64)
    for q in range(n):
        p = points[q]
        best = 1e300
        best_face = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(bmin[node], bmax[node], p) >= best:
                continue
            if left[node] < 0:
                s = start[node]
                for i in range(s, s + count[node]):
                    f = order[i]
                    d2 = _closest_point_triangle(va[f], vb[f], vc[f], p, tmp)
                    if d2 < best or (d2 == best and f < best_face):
                        best = d2
                        best_face = f
                        out_pt[q, 0] = tmp[0]
                        out_pt[q, 1] = tmp[1]
                        out_pt[q, 2] = tmp[2]
            else:
                l, r = left[node], right[node]
                dl = _box_dist2(bmin[l], bmax[l], p)
                dr = _box_dist2(bmin[r], bmax[r], p)
                if dl <= dr:
                    if dr < best:
                        stack[top] = r
                        top += 1
                    if dl < best:
                        stack[top] = l
                        top += 1
                else:
                    if dl < best:
                        stack[top] = l
                        top += 1
                    if dr < best:
                        stack[top] = r
                        top += 1
        out_d2[q] = best
        out_face[q] = best_face
    return out_d2, out_face, out_pt


@njit(cache=True)
def raster_fill(v2d, depth, faces, img_h, img_w):
    """Z-buffered coverage rasterization at pixel centers.

    v2d: (V,2) continuous pixel coordinates (x right, y down), depth: (V,)
    camera depths. Returns (face_id image, barycentric image). Background
    face_id = -1. Z-ties break toward the lower face index.
    """
    fid = np.full((img_h, img_w), -1, np.int64)
    zbuf = np.full((img_h, img_w), 1e300, np.float64)
    bary = np.zeros((img_h, img_w, 3), np.float64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = v2d[i0, 0], v2d[i0, 1]
        x1, y1 = v2d[i1, 0], v2d[i1, 1]
        x2, y2 = v2d[i2, 0], v2d[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = min(x0, min(x1, x2))
        xmax = max(x0, max(x1, x2))
        ymin = min(y0, min(y1, y2))
        ymax = max(y0, max(y1, y2))
        ix0 = max(0, int(np.ceil(xmin - 0.5)))
        ix1 = min(img_w - 1, int(np.floor(xmax - 0.5)) + 1)
        iy0 = max(0, int(np.ceil(ymin - 0.5)))
        iy1 = min(img_h - 1, int(np.floor(ymax - 0.5)) + 1)
        inv = 1.0 / area
        z0, z1, z2 = depth[i0], depth[i1], depth[i2]
        for py in range(iy0, iy1 + 1):
            qy = py + 0.5
            for px in range(ix0, ix1 + 1):
                qx = px + 0.5
                w1 = ((qx - x0) * (y2 - y0) - (x2 - x0) * (qy - y0)) * inv
                if w1 < 0.0 or w1 > 1.0:
                    continue
                w2 = ((x1 - x0) * (qy - y0) - (qx - x0) * (y1 - y0)) * inv
                if w2 < 0.0:
                    continue
                w0 = 1.0 - w1 - w2
                if w0 < 0.0:
                    continue
                z = w0 * z0 + w1 * z1 + w2 * z2
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    fid[py, px] = f
                    bary[py, px, 0] = w0
                    bary[py, px, 1] = w1
                    bary[py, px, 2] = w2
    return fid, bary


@njit(cache=True)
def ray_crossings(origin, direction, va, vb, vc, tmin, tmax):
    """Count ray/triangle-set crossings with t in (tmin, tmax). Moller-Trumbore."""
    eps = 1e-12
    hits = 0
    for f in range(va.shape[0]):
        e1x, e1y, e1z = vb[f, 0] - va[f, 0], vb[f, 1] - va[f, 1], vb[f, 2] - va[f, 2]
        e2x, e2y, e2z = vc[f, 0] - va[f, 0], vc[f, 1] - va[f, 1], vc[f, 2] - va[f, 2]
        px = direction[1] * e2z - direction[2] * e2y
        py = direction[2] * e2x - direction[0] * e2z
        pz = direction[0] * e2y - direction[1] * e2x
        det = e1x * px + e1y * py + e1z * pz
        if -eps < det < eps:
            continue
        inv = 1.0 / det
        tx, ty, tz = origin[0] - va[f, 0], origin[1] - va[f, 1], origin[2] - va[f, 2]
        u = (tx * px + ty * py + tz * pz) * inv
        if u < 0.0 or u > 1.0:
            continue
        qx = ty * e1z - tz * e1y
        qy = tz * e1x - tx * e1z
        qz = tx * e1y - ty * e1x
        v = (direction[0] * qx + direction[1] * qy + direction[2] * qz) * inv
        if v < 0.0 or u + v > 1.0:
            continue
        t = (e2x * qx + e2y * qy + e2z * qz) * inv
        if tmin < t < tmax:
            hits += 1
    return hits
