import math

import numpy as np
import pytest

from core.config import Config
from core.errors import AlignmentError, DomainError, PathSizeError
from schemes.paths import (
    BracketModulus,
    Lattice,
    WalkParams,
    bracket,
    brownian_on_grid,
    build_walk,
    clock_An,
    discretize,
    dyadic_subdivision,
    enumerate_increments,
    modulus_violations,
    simulate_batch,
    simulate_fine_path,
    uniform_grid,
    walk_batch,
)


@pytest.mark.PathsPackage
class TestWalks:

    @pytest.mark.smoke
    def test_single_step_walk(self):
        """P_01_01: n=1 walk starts at 0 and moves by exactly one."""
        walk = build_walk(WalkParams(n=1, horizon_T=2, seed=7))
        assert walk.values[0] == 0.0
        assert abs(walk.values[1]) == 1.0
        assert walk.values.size == 3

    def test_forced_increments(self):
        """P_01_02: a constant-up stub gives values 0, .5, 1, 1.5, ..."""
        walk = build_walk(WalkParams(n=4, horizon_T=1), increments=[1, 1, 1, 1])
        assert walk.values.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
        assert walk.times.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_steps_are_exact(self, lab_seed):
        """P_01_03: every scaled step is exactly 1/sqrt(n)."""
        walk = build_walk(WalkParams(n=16, horizon_T=3, seed=lab_seed))
        steps = np.abs(np.diff(walk.values))
        assert np.max(np.abs(steps - 0.25)) <= np.finfo(float).eps * 16
        assert set(np.unique(walk.increments).tolist()) <= {-1, 1}

    def test_path_keyed_by_seed_and_index(self, lab_seed):
        """P_01_04: path i is the same whatever batch it is drawn in."""
        params = WalkParams(n=8, horizon_T=2, seed=lab_seed)
        batch = walk_batch(params, 6)
        assert np.array_equal(batch[4], build_walk(params, index=4).increments)
        assert np.array_equal(walk_batch(params, 2, start=4), batch[4:6])
        assert np.array_equal(build_walk(params, 3).values, build_walk(params, 3).values)

    def test_invalid_params(self, monkeypatch):
        """P_01_05: bad scale and step-count overflow are rejected."""
        with pytest.raises(DomainError):
            WalkParams(n=0, horizon_T=1)
        with pytest.raises(DomainError):
            WalkParams(n=1, horizon_T=1, seed=-1)
        monkeypatch.setattr(Config, "MAX_STEPS", 10)
        with pytest.raises(PathSizeError):
            WalkParams(n=4, horizon_T=3)

    @pytest.mark.slow
    def test_moments_of_unit_time_value(self):
        """P_01_06: over 10^5 seeds, W^n_1 has mean ~0 and variance ~1 for n=16."""
        values = walk_batch(WalkParams(n=16, horizon_T=1, seed=2024), 100_000).sum(axis=1) / 4.0
        assert abs(values.mean()) < 4 / math.sqrt(values.size)
        assert abs(values.var() - 1.0) < 0.05

    def test_enumeration_order(self):
        """P_01_07: rows read their index bits MSB first with 0 meaning up."""
        inc = enumerate_increments(3)
        assert inc.shape == (8, 3)
        assert inc[0].tolist() == [1, 1, 1]
        assert inc[1].tolist() == [1, 1, -1]
        assert inc[4].tolist() == [-1, 1, 1]


@pytest.mark.PathsPackage
class TestLattice:

    def test_reachable_nodes(self):
        """P_02_01: |j| <= k with matching parity, k+1 nodes per step."""
        lattice = Lattice(n=4, depth=6)
        for k in range(7):
            nodes = lattice.nodes_at(k)
            assert nodes.size == lattice.node_count(k) == k + 1
            assert all(lattice.contains(k, int(j)) for j in nodes)
        assert not lattice.contains(3, 2)
        assert not lattice.contains(2, 4)
        assert lattice.position(2) == 1.0

    def test_walks_stay_on_lattice(self, lab_seed):
        """P_02_02: partial sums of any walk are reachable nodes."""
        lattice = Lattice(n=4, depth=12)
        walk = build_walk(WalkParams(n=4, horizon_T=3, seed=lab_seed))
        assert all(lattice.contains(k, int(j)) for k, j in enumerate(walk.partial_sums))


@pytest.mark.PathsPackage
class TestClock:

    def test_examples(self):
        """P_03_01: A^n at zero and at a non-grid time."""
        assert clock_An(0, 5) == 0.0
        assert clock_An(0.7, 4) == 0.5

    def test_grid_points_are_fixed(self):
        """P_03_02: A^n(k/n) = k/n exactly on a full grid sweep."""
        for n in (1, 2, 7, 64):
            t = np.arange(1001) / n
            assert np.array_equal(clock_An(t, n), t)

    def test_clock_brackets_time(self, lab_seed):
        """P_03_03: A^n(t) <= t < A^n(t) + 1/n and A^n is nondecreasing."""
        rng = np.random.default_rng(lab_seed)
        t = np.sort(rng.uniform(0, 10, size=5000))
        for n in (3, 16):
            a = clock_An(t, n)
            assert np.all(a <= t) and np.all(t < a + 1.0 / n)
            assert np.all(np.diff(a) >= 0)

    def test_negative_time(self):
        """P_03_04: negative time is a domain error."""
        with pytest.raises(DomainError):
            clock_An(-0.1, 4)


@pytest.mark.PathsPackage
class TestFinePaths:

    def test_grid_and_start(self, lab_seed):
        """P_04_01: fine paths start at 0 on the uniform grid."""
        path = simulate_fine_path(0.125, 2.0, lab_seed)
        assert path.values[0] == 0.0
        assert path.grid.size == 17
        with pytest.raises(DomainError):
            uniform_grid(0.3, 1.0)

    def test_batch_rows_match_single_paths(self, lab_seed):
        """P_04_02: batch row i equals path i drawn alone."""
        batch = simulate_batch(0.25, 1.0, 5, lab_seed)
        assert np.array_equal(batch.values[3], brownian_on_grid(batch.grid, lab_seed, 3).values)
        assert np.array_equal(batch.path(2).values, batch.values[2])

    def test_increment_variance(self):
        """P_04_03: W_1 variance close to 1 and disjoint increments uncorrelated."""
        batch = simulate_batch(1 / 16, 1.0, 4000, 99)
        w1 = batch.values[:, -1]
        assert abs(w1.var() - 1.0) < 0.1
        first, second = batch.values[:, 8], batch.values[:, 16] - batch.values[:, 8]
        assert abs(np.corrcoef(first, second)[0, 1]) < 0.08


@pytest.mark.PathsPackage
class TestDiscretize:

    def test_self_discretization(self, lab_seed):
        """P_05_01: discretizing on the fine grid is the identity."""
        path = simulate_fine_path(0.25, 2.0, lab_seed)
        assert np.array_equal(discretize(path, path.grid).values, path.values)

    def test_single_point(self, lab_seed):
        """P_05_02: subdivision {0} gives the constant 0 path."""
        path = simulate_fine_path(0.25, 2.0, lab_seed)
        assert np.all(discretize(path, [0.0]).values == 0.0)

    def test_piecewise_constant(self, lab_seed):
        """P_05_03: the value at t is the path value at the last subdivision point <= t."""
        path = simulate_fine_path(1 / 8, 1.0, lab_seed)
        out = discretize(path, [0.0, 0.25, 0.75])
        assert np.all(out.values[2:6] == path.values[2])
        assert np.all(out.values[6:] == path.values[6])

    def test_alignment_error(self, lab_seed):
        """P_05_04: a subdivision point off the fine grid is rejected."""
        path = simulate_fine_path(0.25, 1.0, lab_seed)
        with pytest.raises(AlignmentError):
            discretize(path, [0.0, 0.3])

    def test_refinement_reaches_fine_path(self, lab_seed):
        """P_05_05: the coarse dyadic level is further from the fine path than the full level."""
        path = simulate_fine_path(2.0**-8, 1.0, lab_seed)
        gaps = [np.max(np.abs(discretize(path, dyadic_subdivision(level, 1.0)).values - path.values))
                for level in (1, 8)]
        assert gaps[1] == 0.0 < gaps[0]


@pytest.mark.PathsPackage
class TestBracket:

    def test_examples(self):
        """P_06_01: walk clock and discretized-BM subdivision point."""
        assert bracket(4, 0.7) == 0.5
        assert bracket(np.array([0.0, 0.3, 1.0]), 0.9) == 0.3
        assert bracket(WalkParams(n=4, horizon_T=1), 0.7) == 0.5

    def test_discretized_path_bracket(self, lab_seed):
        """P_06_02: a discretized path uses its subdivision, an undiscretized one returns t."""
        path = simulate_fine_path(0.25, 1.0, lab_seed)
        assert bracket(path, 0.6) == 0.6
        assert bracket(discretize(path, [0.0, 0.5]), 0.6) == 0.5

    def test_modulus_bound(self, lab_seed):
        """P_06_03: bracket(t) - bracket(s) <= (t - s) + 1/n on 10^4 random pairs."""
        rng = np.random.default_rng(lab_seed)
        for n in (1, 5, 32):
            s, t = np.sort(rng.uniform(0, 4, size=(2, 10_000)), axis=0)
            modulus = BracketModulus.identity([1.0 / n])
            assert modulus_violations(n, s, t, modulus, level=0) == 0

    def test_modulus_validation(self):
        """P_06_04: rho(0) must vanish and a_n must not increase."""
        with pytest.raises(DomainError):
            BracketModulus(rho=lambda d: d + 1.0, a_n=(0.1,))
        with pytest.raises(DomainError):
            BracketModulus.identity([0.1, 0.2])
        with pytest.raises(DomainError):
            bracket(4, -1.0)
