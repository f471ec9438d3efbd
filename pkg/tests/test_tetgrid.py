import numpy as np
import pytest

from avatarforge.mesh import boundary_edge_count, ray_crossing_count
from avatarforge.tetgrid import (
    MTOutput, ShellConfig, TetGrid, TetGridError, build_shell_grid,
    init_sdf_from_template, marching_tetrahedra, mt_jacobian,
    mt_vertex_gradients, sdf_laplacian_energy,
)
from helpers import quad_mesh, sphere_mesh


def sphere_grid(res=16, radius=0.5, shell=0.2):
    template = sphere_mesh(radius=radius)
    grid = build_shell_grid(template, ShellConfig(shell_distance=shell, resolution=res))
    sdf = np.linalg.norm(grid.verts, axis=1) - radius  # analytic sphere SDF
    return grid.with_fields(sdf=sdf), template


def test_shell_grid_keeps_cells_near_surface():
    grid, template = sphere_grid(res=16)
    # every kept tet's cell came from a center within shell_distance; recheck
    # using the tet centroids (within cell diagonal of their cell center).
    centroids = grid.verts[grid.tets].mean(axis=1)
    d = np.abs(np.linalg.norm(centroids, axis=1) - 0.5)
    assert d.max() <= 0.2 + grid.cell_size * np.sqrt(3.0)
    # positively oriented tets
    p = grid.verts[grid.tets]
    vol = np.linalg.det(np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1))
    assert vol.min() > 0


def test_shell_covering_box_gives_full_lattice():
    template = sphere_mesh(radius=0.3, n_lat=8, n_lon=10)
    grid = build_shell_grid(template, ShellConfig(shell_distance=10.0, resolution=6))
    lo, hi = template.bounds()
    pad = np.linalg.norm(hi - lo)
    extent = (hi + pad) - (lo - pad)
    cell = extent.max() / 6
    ncell = np.maximum(np.ceil(extent / cell - 1e-9).astype(int), 1)
    assert grid.num_tets == 6 * int(np.prod(ncell))


def test_shell_grid_tiny_resolution_not_silent():
    template = sphere_mesh(radius=0.01, n_lat=6, n_lon=8)
    grid = build_shell_grid(template, ShellConfig(shell_distance=0.02, resolution=1))
    assert grid.num_tets >= 6
    with pytest.raises(TetGridError):
        ShellConfig(shell_distance=0.0, resolution=4)


def test_init_sdf_sphere_close_to_analytic():
    grid, template = sphere_grid(res=16)
    init = init_sdf_from_template(grid, template)
    assert not init.open_template_fallback
    analytic = np.linalg.norm(grid.verts, axis=1) - 0.5
    # mesh is a chord approximation of the sphere; error bounded by sagitta
    sagitta = 0.5 * (1 - np.cos(np.pi / 24)) + 0.5 * (2 * np.pi / 48) ** 2 / 8
    assert np.abs(init.sdf - analytic).max() <= 4 * sagitta
    # signs: all outside-shell vertices positive, deep inside negative
    r = np.linalg.norm(grid.verts, axis=1)
    assert np.all(init.sdf[r > 0.52] > 0)
    assert np.all(init.sdf[r < 0.48] < 0)


def test_init_sdf_open_template_fallback_flag():
    grid, _ = sphere_grid(res=8)
    init = init_sdf_from_template(grid, quad_mesh(size=2.0))
    assert init.open_template_fallback
    assert np.all(np.isfinite(init.sdf))


def test_init_sdf_point_like_template_all_positive():
    tiny = sphere_mesh(radius=0.005, n_lat=6, n_lon=8)
    big = sphere_mesh(radius=0.5)
    grid = build_shell_grid(big, ShellConfig(shell_distance=0.1, resolution=12))
    init = init_sdf_from_template(grid, tiny)
    assert np.all(init.sdf > 0)


def test_marching_all_positive_is_empty():
    grid, _ = sphere_grid(res=8)
    out = marching_tetrahedra(grid.with_fields(sdf=np.ones(grid.num_verts)))
    assert out.mesh.num_faces == 0


def test_marching_single_tet_midpoints():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tets = np.array([[0, 1, 2, 3]])
    grid = TetGrid(verts, tets, np.array([-1.0, 1.0, 1.0, 1.0]), np.zeros((4, 3)), 1.0)
    out = marching_tetrahedra(grid)
    assert out.mesh.num_faces == 1
    assert np.allclose(out.t, 0.5)
    expect = {(0.5, 0, 0), (0, 0.5, 0), (0, 0, 0.5)}
    got = {tuple(np.round(v, 9)) for v in out.mesh.vertices}
    assert got == expect
    # normal points toward positive sdf (away from corner 0)
    n = out.mesh.face_normals()[0]
    assert np.dot(n, [1, 1, 1]) > 0


def test_marching_sphere_radius_bounds_and_watertight():
    grid, _ = sphere_grid(res=32)
    out = marching_tetrahedra(grid)
    r = np.linalg.norm(out.mesh.vertices, axis=1)
    diag = grid.cell_size * np.sqrt(3.0)
    assert r.min() >= 0.5 - diag
    assert r.max() <= 0.5 + diag
    assert boundary_edge_count(out.mesh) == 0
    assert np.all(out.t > 0) and np.all(out.t < 1)
    # outward orientation
    n = out.mesh.face_normals()
    c = out.mesh.vertices[out.mesh.faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, c) > 0)


def test_marching_resolution_halves_radial_error():
    errs = {}
    for res in (16, 32):
        grid, _ = sphere_grid(res=res)
        out = marching_tetrahedra(grid)
        r = np.linalg.norm(out.mesh.vertices, axis=1)
        errs[res] = np.abs(r - 0.5).max()
    assert errs[32] <= errs[16] / 2


def test_marching_surface_separates_signs():
    grid, _ = sphere_grid(res=12)
    out = marching_tetrahedra(grid)
    rng = np.random.default_rng(4)
    neg = np.nonzero(grid.sdf < -0.05)[0]
    pos = np.nonzero(grid.sdf > 0.05)[0]
    for _ in range(20):
        # jitter off the lattice so the segment cannot graze shared edges
        a = grid.verts[rng.choice(neg)] + 1e-4 * grid.cell_size * rng.standard_normal(3)
        b = grid.verts[rng.choice(pos)] + 1e-4 * grid.cell_size * rng.standard_normal(3)
        d = b - a
        L = np.linalg.norm(d)
        crossings = ray_crossing_count(out.mesh, a, d / L, 0.0, L)
        assert crossings % 2 == 1


def test_zero_sdf_nudge_recorded():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    grid = TetGrid(verts, [[0, 1, 2, 3]], np.array([0.0, 1.0, 1.0, -1.0]), np.zeros((4, 3)), 1.0)
    out = marching_tetrahedra(grid)
    assert out.nudged_zeros == 1
    assert np.all(out.t > 0) and np.all(out.t < 1)


def test_displacement_clamped_to_half_cell():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    grid = TetGrid(verts, [[0, 1, 2, 3]], np.zeros(4), np.full((4, 3), 10.0), 1.0)
    assert np.abs(grid.disp).max() <= 0.5


def test_mt_jacobian_hand_values_and_fd():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tets = np.array([[0, 1, 2, 3]])
    sdf0 = np.array([-1.0, 1.0, 1.0, 1.0])
    grid = TetGrid(verts, tets, sdf0, np.zeros((4, 3)), 1.0)
    out = marching_tetrahedra(grid)
    jac = mt_jacobian(grid, out, 0)
    # t = s_a/(s_a - s_b): dt/ds_a = -s_b/(s_a-s_b)^2 = -1/4 (FD-verified below)
    assert abs(jac["dt_ds_a"] - (-0.25)) < 1e-12
    assert abs(jac["dt_ds_b"] - (-0.25)) < 1e-12
    assert np.allclose(jac["d_disp_a"], (1 - jac["t"]) * np.eye(3))
    eps = 1e-5
    a = int(out.edge_a[0])
    for sign in (+1, -1):
        s2 = sdf0.copy()
        s2[a] += sign * eps
        o2 = marching_tetrahedra(grid.with_fields(sdf=s2))
        if sign > 0:
            tp = o2.t[0]
        else:
            tm = o2.t[0]
    fd = (tp - tm) / (2 * eps)
    assert abs(fd - jac["dt_ds_a"]) <= 1e-4 * max(1.0, abs(fd))


def test_mt_jacobian_fd_sweep_random_edges():
    grid, _ = sphere_grid(res=10)
    rng = np.random.default_rng(0)
    grid = grid.with_fields(disp=0.2 * grid.cell_size * rng.standard_normal(grid.disp.shape))
    out = marching_tetrahedra(grid)
    eps = 1e-5
    idx = rng.choice(out.t.shape[0], size=100, replace=False)
    worst = 0.0
    for vi in idx:
        vi = int(vi)
        jac = mt_jacobian(grid, out, vi)
        a, b = jac["edge"]
        for which, gi in (("d_s_a", a), ("d_s_b", b)):
            s_p, s_m = grid.sdf.copy(), grid.sdf.copy()
            s_p[gi] += eps
            s_m[gi] -= eps
            vp = marching_tetrahedra(grid.with_fields(sdf=s_p)).mesh.vertices[vi]
            vm = marching_tetrahedra(grid.with_fields(sdf=s_m)).mesh.vertices[vi]
            fd = (vp - vm) / (2 * eps)
            scale = max(1.0, np.abs(fd).max())
            worst = max(worst, np.abs(fd - jac[which]).max() / scale)
    assert worst <= 1e-4


def test_mt_vertex_gradients_match_jacobian():
    grid, _ = sphere_grid(res=8)
    out = marching_tetrahedra(grid)
    up = np.zeros_like(out.mesh.vertices)
    up[0] = (1.0, -2.0, 0.5)
    gs, gd = mt_vertex_gradients(grid, out, up)
    jac = mt_jacobian(grid, out, 0)
    a, b = jac["edge"]
    assert np.isclose(gs[a], up[0] @ jac["d_s_a"])
    assert np.isclose(gs[b], up[0] @ jac["d_s_b"])
    assert np.allclose(gd[a], (1 - jac["t"]) * up[0])
    with pytest.raises(TetGridError):
        mt_jacobian(grid, out, out.t.shape[0] + 5)


def test_sdf_laplacian_energy_gradient():
    grid, _ = sphere_grid(res=6)
    rng = np.random.default_rng(2)
    s = rng.standard_normal(grid.num_verts)
    e0, g = sdf_laplacian_energy(grid, s)
    assert e0 > 0
    eps = 1e-6
    for i in rng.choice(grid.num_verts, size=10, replace=False):
        sp, sm = s.copy(), s.copy()
        sp[i] += eps
        sm[i] -= eps
        fd = (sdf_laplacian_energy(grid, sp)[0] - sdf_laplacian_energy(grid, sm)[0]) / (2 * eps)
        assert abs(fd - g[i]) <= 1e-6 * max(1.0, abs(fd))
    smooth, _ = sdf_laplacian_energy(grid, np.full(grid.num_verts, 3.0))
    assert smooth <= 1e-20


def test_tetgrid_container_round_trip(tmp_path):
    from avatarforge.container import load_tensors, save_tensors
    grid, _ = sphere_grid(res=6)
    save_tensors(tmp_path / "g.frtn", grid.to_tensors())
    back, _ = load_tensors(tmp_path / "g.frtn")
    g2 = TetGrid.from_tensors(back)
    assert np.array_equal(g2.verts, grid.verts)
    assert np.array_equal(g2.tets, grid.tets)
    assert g2.cell_size == grid.cell_size
