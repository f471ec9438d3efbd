"""Shared fixtures-by-hand for the test suite: tiny canonical shapes."""

import numpy as np

from avatarforge.mesh import Mesh


def tetra_mesh():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    f = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
    return Mesh(v, f)


def sphere_mesh(radius=0.5, n_lat=24, n_lon=48, center=(0.0, 0.0, 0.0)):
    """UV sphere with outward-wound faces."""
    center = np.asarray(center, float)
    us = np.linspace(0, np.pi, n_lat)
    vs = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    verts = [[0, 0, radius], [0, 0, -radius]]
    idx = {}
    for i, u in enumerate(us[1:-1]):
        for j, v in enumerate(vs):
            idx[(i, j)] = len(verts)
            verts.append([radius * np.sin(u) * np.cos(v),
                          radius * np.sin(u) * np.sin(v),
                          radius * np.cos(u)])
    faces = []
    rings = n_lat - 2
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append([0, idx[(0, j)], idx[(0, jn)]])
        faces.append([1, idx[(rings - 1, jn)], idx[(rings - 1, j)]])
    for i in range(rings - 1):
        for j in range(n_lon):
            jn = (j + 1) % n_lon
            a, b = idx[(i, j)], idx[(i, jn)]
            c, d = idx[(i + 1, j)], idx[(i + 1, jn)]
            faces.append([a, c, b])
            faces.append([b, c, d])
    return Mesh(np.asarray(verts) + center, faces)


def quad_mesh(size=1.0, z=0.0, center=(0.0, 0.0), flip=False):
    """Two-triangle square in a z-plane, normal +z unless flipped."""
    cx, cy = center
    h = size / 2.0
    v = np.array([[cx - h, cy - h, z], [cx + h, cy - h, z],
                  [cx + h, cy + h, z], [cx - h, cy + h, z]])
    f = [[0, 1, 2], [0, 2, 3]] if not flip else [[0, 2, 1], [0, 3, 2]]
    return Mesh(v, f)


def grid_quad_mesh(n=8, size=1.0, z=0.0):
    """n x n vertex grid in a z-plane (many coplanar faces, +z normals)."""
    xs = np.linspace(-size / 2, size / 2, n)
    vv, ff = [], []
    for y in xs:
        for x in xs:
            vv.append([x, y, z])
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            ff.append([a, a + 1, a + n + 1])
            ff.append([a, a + n + 1, a + n])
    return Mesh(np.asarray(vv), ff)


def two_joint_skeleton(offset=(0.0, 1.0, 0.0)):
    from avatarforge.rig import Skeleton
    return Skeleton(parent=[-1, 0],
                    local_bind_rot=np.tile(np.eye(3), (2, 1, 1)),
                    local_bind_trans=[[0.0, 0.0, 0.0], list(offset)])


def random_simplex_rows(rng, n, k):
    w = rng.random((n, k)) + 1e-3
    return w / w.sum(axis=1, keepdims=True)
