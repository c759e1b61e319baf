import numpy as np
import pytest

from oracles import (euler_characteristic, exhaustive_wasserstein2_sq,
                     naive_cubical_persistence, union_find_components)
from toposurv.topology import (CubicalFiltration, DiagramPoint, NonSquareDim,
                               PersistenceDiagram, TopoWeights, betti_numbers,
                               compute_persistence, latent_grid,
                               latent_grid_backward, latent_grid_diagram,
                               matched_persistence_mse, topo_loss, wasserstein2)


def points_of(grid, mode="sublevel"):
    d = compute_persistence(CubicalFiltration(np.asarray(grid, float), mode))
    return sorted((p.dim, p.birth, p.death) for p in d.points)


def sphere_mask(extents, center, r_lo, r_hi):
    grids = np.ogrid[tuple(slice(0, e) for e in extents)]
    rho = np.sqrt(sum((g - c) ** 2.0 for g, c in zip(grids, center)))
    return (rho >= r_lo) & (rho <= r_hi)


def random_diagram(rng, max_points=4, dim=0):
    pts = []
    for _ in range(rng.integers(0, max_points + 1)):
        b = float(rng.random())
        pts.append(DiagramPoint(b, b + float(rng.random()) + 1e-3, dim, 0, 0))
    return PersistenceDiagram(pts)


class TestComputePersistence:
    def test_all_zeros_single_component(self):
        assert points_of(np.zeros((4, 4, 4))) == [(0, 0.0, np.inf)]

    def test_hollow_shell_indicator(self):
        shell = sphere_mask((16, 16, 16), (8, 8, 8), 3.0, 5.5)
        indicator = np.where(shell, 0.0, 1.0)
        born_at_zero = [p for p in points_of(indicator) if p[1] == 0.0]
        assert born_at_zero == [(0, 0.0, np.inf), (2, 0.0, 1.0)]

    def test_solid_torus_has_one_h1_class(self):
        zz, yy, xx = np.mgrid[0:16, 0:16, 0:16]
        ring = np.sqrt((np.sqrt((yy - 8.0) ** 2 + (xx - 8.0) ** 2) - 4.5) ** 2
                       + (zz - 8.0) ** 2)
        assert betti_numbers(ring <= 2.2) == (1, 1, 0)

    @pytest.mark.parametrize("trial", range(10))
    def test_matches_naive_reduction_on_random_8cubed(self, trial):
        rng = np.random.default_rng(100 + trial)
        if trial % 2:
            grid = rng.integers(0, 5, size=(8, 8, 8)).astype(float)  # many ties
        else:
            grid = rng.random((8, 8, 8))
        assert points_of(grid) == naive_cubical_persistence(grid)

    def test_matches_naive_on_random_2d(self):
        rng = np.random.default_rng(200)
        for _ in range(5):
            grid = rng.random((6, 6))
            assert points_of(grid) == naive_cubical_persistence(grid)

    def test_superlevel_runs_as_negated_sublevel(self):
        grid = np.random.default_rng(201).random((5, 5))
        assert points_of(grid, "superlevel") == points_of(-grid)

    def test_death_at_least_birth_and_births_on_grid(self):
        rng = np.random.default_rng(202)
        grid = rng.random((6, 6, 6))
        values = set(grid.ravel().tolist())
        d = compute_persistence(CubicalFiltration(grid))
        for p in d.points:
            assert p.death > p.birth  # zero-persistence points discarded
            assert p.birth in values

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            compute_persistence(CubicalFiltration(np.array([[0.0, np.nan]])))


class TestBettiOracles:
    @pytest.mark.parametrize("trial", range(15))
    def test_random_binary_grids(self, trial):
        rng = np.random.default_rng(300 + trial)
        mask = rng.random((6, 6, 6)) < rng.uniform(0.3, 0.7)
        b0, b1, b2 = betti_numbers(mask)
        if mask.any():
            assert b0 == union_find_components(mask)
        assert b0 - b1 + b2 == euler_characteristic(mask)

    def test_solid_ball(self):
        assert betti_numbers(sphere_mask((16,) * 3, (8,) * 3, 0.0, 5.5)) == (1, 0, 0)

    def test_hollow_shell(self):
        assert betti_numbers(sphere_mask((16,) * 3, (8,) * 3, 3.0, 5.5)) == (1, 0, 1)

    def test_empty_and_full(self):
        assert betti_numbers(np.zeros((4, 4, 4), bool)) == (0, 0, 0)
        assert betti_numbers(np.ones((4, 4, 4), bool)) == (1, 0, 0)


class TestWasserstein2:
    def test_identical_diagrams(self):
        rng = np.random.default_rng(400)
        d = random_diagram(rng, 4)
        assert wasserstein2(d, d, 0) == 0.0

    def test_single_point_vs_empty(self):
        a = PersistenceDiagram([DiagramPoint(0.0, 1.0, 0, 0, 0)])
        assert wasserstein2(a, PersistenceDiagram(), 0) == pytest.approx(
            np.sqrt(0.5), abs=1e-9)

    def test_two_analytic_points(self):
        a = PersistenceDiagram([DiagramPoint(0.0, 2.0, 0, 0, 0)])
        b = PersistenceDiagram([DiagramPoint(0.0, 1.0, 0, 0, 0)])
        assert wasserstein2(a, b, 0) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("trial", range(25))
    def test_matches_exhaustive_enumeration(self, trial):
        rng = np.random.default_rng(500 + trial)
        a, b = random_diagram(rng, 4), random_diagram(rng, 4)
        expected = exhaustive_wasserstein2_sq(
            [(p.birth, p.death) for p in a.points],
            [(p.birth, p.death) for p in b.points])
        assert wasserstein2(a, b, 0) ** 2 == pytest.approx(expected, abs=1e-12)

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(600)
        for _ in range(30):
            a, b, c = (random_diagram(rng, 5) for _ in range(3))
            dab, dba = wasserstein2(a, b, 0), wasserstein2(b, a, 0)
            assert dab == pytest.approx(dba, abs=1e-12)
            assert dab <= wasserstein2(a, c, 0) + wasserstein2(c, b, 0) + 1e-9

    def test_essential_points_excluded(self):
        a = PersistenceDiagram([DiagramPoint(0.0, np.inf, 0, 0, None)])
        assert wasserstein2(a, PersistenceDiagram(), 0) == 0.0


class TestMatchedPersistenceMse:
    def test_identical(self):
        d = PersistenceDiagram([DiagramPoint(0.1, 0.9, 0, 0, 0)])
        assert matched_persistence_mse(d, d, 0) == 0.0

    def test_single_forced_match(self):
        a = PersistenceDiagram([DiagramPoint(0.0, 2.0, 0, 0, 0)])
        b = PersistenceDiagram([DiagramPoint(0.0, 1.0, 0, 0, 0)])
        assert matched_persistence_mse(a, b, 0) == pytest.approx(1.0)

    def test_unmatched_pays_persistence_squared(self):
        a = PersistenceDiagram([DiagramPoint(0.0, 2.0, 0, 0, 0),
                                DiagramPoint(0.0, 1.0, 0, 0, 0)])
        b = PersistenceDiagram([DiagramPoint(0.0, 2.0, 0, 0, 0)])
        assert matched_persistence_mse(a, b, 0) == pytest.approx(1.0)


class TestTopoLoss:
    def test_weighted_sum_of_dim_distances(self):
        # one latent point per dim, empty targets: dist_q = pers^2 / 2
        pts = [DiagramPoint(0.0, np.sqrt(2 * d), q, 0, 1)
               for q, d in zip((0, 1, 2), (0.1, 0.2, 0.3))]
        latent = PersistenceDiagram(pts)
        value, _ = topo_loss(PersistenceDiagram(), latent,
                             TopoWeights((1.0, 1.0, 1.0)), (2, 2))
        assert value == pytest.approx(0.6)

    def test_equal_grids_zero_loss_zero_grad(self):
        grid = np.random.default_rng(700).random((5, 5))
        d = compute_persistence(CubicalFiltration(grid))
        value, grad = topo_loss(d, d, TopoWeights(), grid.shape)
        assert value == 0.0
        assert np.abs(grad).max() == 0.0

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(701)
        target = compute_persistence(CubicalFiltration(rng.random((6, 6))))
        weights = TopoWeights((1.0, 1.0, 0.0))
        grid = rng.random((6, 6))

        def value_of(g):
            d = compute_persistence(CubicalFiltration(g))
            return topo_loss(target, d, weights, g.shape)[0]

        latent = compute_persistence(CubicalFiltration(grid))
        _, grad = topo_loss(target, latent, weights, grid.shape)
        h = 1e-5
        for i in range(grid.size):
            gp, gm = grid.copy().ravel(), grid.copy().ravel()
            gp[i] += h
            gm[i] -= h
            fd = (value_of(gp.reshape(6, 6)) - value_of(gm.reshape(6, 6))) / (2 * h)
            assert abs(fd - grad.ravel()[i]) <= 1e-3 * max(abs(fd), abs(grad.ravel()[i]), 1.0)

    def test_matched_mse_distance_option(self):
        rng = np.random.default_rng(702)
        target = compute_persistence(CubicalFiltration(rng.random((5, 5))))
        latent = compute_persistence(CubicalFiltration(rng.random((5, 5))))
        value, _ = topo_loss(target, latent, TopoWeights((1.0, 1.0, 0.0)),
                             (5, 5), distance="matched_mse")
        direct = sum(matched_persistence_mse(latent, target, q) for q in (0, 1))
        assert value == pytest.approx(direct)


class TestLatentGrid:
    def test_256_gives_16_by_16(self):
        assert latent_grid(np.random.default_rng(1).random(256)).shape == (16, 16)

    def test_constant_z_single_component(self):
        d = latent_grid_diagram(np.full(64, 0.3))
        assert [(p.dim, p.birth, p.death) for p in d.points] == [(0, 0.0, np.inf)]
        assert d.in_dim(1) == []

    def test_perfect_square_rule(self):
        assert latent_grid(np.zeros(100)).shape == (10, 10)
        with pytest.raises(NonSquareDim):
            latent_grid(np.zeros(200))

    def test_normalization_to_unit_range(self):
        g = latent_grid(np.array([2.0, 4.0, 6.0, 8.0]))
        assert g.min() == 0.0 and g.max() == 1.0

    def test_backward_through_normalization(self):
        rng = np.random.default_rng(800)
        z = rng.random(16)
        target = compute_persistence(CubicalFiltration(rng.random((4, 4))))
        weights = TopoWeights((1.0, 1.0, 0.0))

        def value_of(zv):
            return topo_loss(target, latent_grid_diagram(zv), weights, (4, 4))[0]

        _, grid_grad = topo_loss(target, latent_grid_diagram(z), weights, (4, 4))
        dz = latent_grid_backward(z, grid_grad)
        h = 1e-6
        for i in range(z.size):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd = (value_of(zp) - value_of(zm)) / (2 * h)
            assert abs(fd - dz[i]) <= 1e-3 * max(abs(fd), abs(dz[i]), 1.0)

    def test_constant_z_zero_gradient(self):
        dz = latent_grid_backward(np.full(16, 0.5), np.ones((4, 4)))
        assert np.abs(dz).max() == 0.0
