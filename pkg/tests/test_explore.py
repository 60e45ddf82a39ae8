"""Occupancy map, goal sampling, fast marching, and downsampling tests."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from splatr.core import PointCloud
from splatr.explore import (
    FREE,
    OBSTACLE,
    UNKNOWN,
    AgentTrace,
    MapEvidence,
    OccupancyMap,
    TraceStep,
    fmm_distance,
    path_length,
    plan_path,
    reachable_unknown,
    sample_goal,
    update_map,
    voxel_downsample,
)

from oracles import dijkstra_grid, voxel_census
from scenes import make_indoor_grid, make_test_view


def grid_from_rows(rows: list[str]) -> np.ndarray:
    """'.' unknown, 'f' free, '#' obstacle."""
    lut = {".": UNKNOWN, "f": FREE, "#": OBSTACLE}
    return np.array([[lut[ch] for ch in row] for row in rows], dtype=np.int8)


# ── occupancy map ──────────────────────────────────────────────────────


class TestOccupancyMap:
    def test_blank_is_all_unknown(self):
        occ = OccupancyMap.blank(4, 7, resolution=0.1)
        assert occ.shape == (4, 7)
        assert (occ.grid == UNKNOWN).all()

    def test_world_cell_roundtrip(self):
        # res 0.5, origin (1, 2): x = 1.25 lands in col 0, y = 2.75 in row 1
        occ = OccupancyMap.blank(4, 4, resolution=0.5, origin=(1.0, 2.0))
        assert occ.world_to_cell((1.25, 2.75)) == (1, 0)
        assert_allclose(occ.cell_to_world((1, 0)), [1.25, 2.75])

    def test_cell_center_of_origin_cell(self):
        occ = OccupancyMap.blank(3, 3, resolution=0.2, origin=(-1.0, 0.5))
        assert_allclose(occ.cell_to_world((0, 0)), [-0.9, 0.6])

    def test_validation(self):
        with pytest.raises(ValueError):
            OccupancyMap.blank(3, 3, resolution=0.0)
        with pytest.raises(ValueError):
            OccupancyMap(np.full((3, 3), 7, dtype=np.int8))
        with pytest.raises(ValueError):
            OccupancyMap(np.zeros(5, dtype=np.int8))
        with pytest.raises(ValueError):
            OccupancyMap(np.zeros((3, 3), dtype=np.int8), origin=(1.0, 2.0, 3.0))

    def test_copy_is_independent(self):
        occ = OccupancyMap.blank(3, 3)
        dup = occ.copy()
        dup.grid[0, 0] = OBSTACLE
        assert occ.grid[0, 0] == UNKNOWN


# ── update_map ─────────────────────────────────────────────────────────


class TestUpdateMap:
    def test_no_evidence_is_identity(self):
        occ = OccupancyMap.blank(5, 5)
        occ.grid[2, 2] = FREE
        before = occ.grid.copy()
        out = update_map(occ, (2, 2), MapEvidence())
        assert (out.grid == before).all()
        assert (occ.grid == before).all()  # input untouched

    def test_bump_marks_obstacle(self):
        occ = OccupancyMap.blank(5, 5)
        out = update_map(occ, (2, 2), MapEvidence(blocked=(1, 2)))
        assert out.grid[1, 2] == OBSTACLE

    def test_traversed_marks_free_and_rest_unchanged(self):
        occ = OccupancyMap.blank(5, 5)
        occ.grid[0, 0] = OBSTACLE
        out = update_map(occ, (2, 2), MapEvidence(traversed=((2, 2), (2, 3))))
        assert out.grid[2, 2] == FREE and out.grid[2, 3] == FREE
        changed = np.zeros((5, 5), dtype=bool)
        changed[2, 2] = changed[2, 3] = True
        assert (out.grid[~changed] == occ.grid[~changed]).all()

    def test_agent_cell_never_obstacle(self):
        occ = OccupancyMap.blank(5, 5)
        with pytest.raises(ValueError):
            update_map(occ, (2, 2), MapEvidence(blocked=(2, 2)))

    def test_out_of_bounds_evidence_rejected(self):
        occ = OccupancyMap.blank(3, 3)
        with pytest.raises(ValueError):
            update_map(occ, (1, 1), MapEvidence(traversed=((3, 0),)))
        with pytest.raises(ValueError):
            update_map(occ, (1, 1), MapEvidence(blocked=(0, -1)))

    def test_closed_room_walk_recovers_walkable_set(self):
        # 10x10 room: walls on the border ring, interior fully walkable.
        # Walking every interior cell and bumping each wall from inside
        # must recover exactly the interior as free space
        occ = OccupancyMap.blank(10, 10)
        interior = np.zeros((10, 10), dtype=bool)
        interior[1:9, 1:9] = True
        for r in range(1, 9):
            for c in range(1, 9):
                occ = update_map(occ, (r, c), MapEvidence(traversed=((r, c),)))
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    rr, cc = r + dr, c + dc
                    if not interior[rr, cc] and 0 <= rr < 10 and 0 <= cc < 10:
                        occ = update_map(occ, (r, c), MapEvidence(blocked=(rr, cc)))
        assert ((occ.grid == FREE) == interior).all()
        # the four corners are never faced, so they stay unknown
        assert (occ.grid == UNKNOWN).sum() == 4
        assert (occ.grid == OBSTACLE).sum() == 32


# ── sample_goal ────────────────────────────────────────────────────────


class TestSampleGoal:
    def test_fully_known_map_is_exhausted(self):
        occ = OccupancyMap(grid_from_rows(["fff", "f#f", "fff"]))
        assert sample_goal(occ, np.random.default_rng(0)) is None

    def test_single_candidate_is_returned(self):
        occ = OccupancyMap(grid_from_rows(["ff.", "fff", "fff"]))
        assert sample_goal(occ, np.random.default_rng(0)) == (0, 2)

    def test_sealed_unknown_is_not_reachable(self):
        occ = OccupancyMap(grid_from_rows(["ff#..", "ff#..", "ff#.."]))
        assert sample_goal(occ, np.random.default_rng(0)) is None

    def test_no_free_space_is_exhausted(self):
        occ = OccupancyMap.blank(3, 3)
        assert sample_goal(occ, np.random.default_rng(0)) is None

    def test_deep_unknown_is_reachable_through_unknown(self):
        occ = OccupancyMap(grid_from_rows(["f...."]))
        seen = {sample_goal(occ, np.random.default_rng(s)) for s in range(200)}
        assert seen == {(0, 1), (0, 2), (0, 3), (0, 4)}

    def test_sampling_is_uniform(self):
        # 20 candidates: free top row, unknown 4x5 block below
        occ = OccupancyMap(grid_from_rows(["fffff"] + ["....."] * 4))
        assert reachable_unknown(occ).sum() == 20
        rng = np.random.default_rng(123)
        counts: dict = {}
        for _ in range(10_000):
            goal = sample_goal(occ, rng)
            counts[goal] = counts.get(goal, 0) + 1
        assert len(counts) == 20
        _, p = stats.chisquare(list(counts.values()))
        assert p > 0.01


# ── fmm_distance ───────────────────────────────────────────────────────


class TestFMMDistance:
    def test_source_distance_is_zero(self):
        occ = OccupancyMap.blank(20, 20, resolution=0.1)
        T = fmm_distance(occ, (5, 5))
        assert T[5, 5] == 0.0

    def test_empty_grid_matches_euclidean(self):
        # 3-4-5 triangle: cell (30, 40) sits 50 cells from the corner
        occ = OccupancyMap.blank(200, 200, resolution=0.05)
        T = fmm_distance(occ, (0, 0))
        assert T[30, 40] == pytest.approx(50 * 0.05, rel=0.02)

    def test_obstacles_stay_infinite(self):
        occ = OccupancyMap(grid_from_rows(["fff", "f#f", "fff"]), resolution=0.1)
        T = fmm_distance(occ, (0, 0))
        assert np.isinf(T[1, 1])
        assert np.isfinite(T[2, 2])

    def test_source_on_obstacle_rejected(self):
        occ = OccupancyMap(grid_from_rows(["fff", "f#f", "fff"]))
        with pytest.raises(ValueError):
            fmm_distance(occ, (1, 1))
        with pytest.raises(ValueError):
            fmm_distance(occ, (9, 9))

    def test_source_next_to_obstacle_still_works(self):
        occ = OccupancyMap(grid_from_rows(["f#f", "fff", "fff"]))
        T = fmm_distance(occ, (0, 0))
        assert T[0, 0] == 0.0
        assert np.isfinite(T[0, 2])

    def test_wall_with_gap_matches_dijkstra(self):
        # wall on col 40 with a 5-cell gap; both route legs run near 45
        # degrees, where the 8-connected oracle has no metrication bias
        H, W, res = 60, 90, 0.1
        occ = OccupancyMap.blank(H, W, resolution=res)
        occ.grid[:48, 40] = OBSTACLE
        occ.grid[53:, 40] = OBSTACLE
        T = fmm_distance(occ, (10, 0))
        ref = dijkstra_grid(occ.grid != OBSTACLE, (10, 0)) * res
        behind = np.zeros((H, W), dtype=bool)
        behind[:, 42:] = True
        finite = behind & np.isfinite(T)
        assert finite.any()
        rel = np.abs(T[finite] - ref[finite]) / ref[finite]
        assert rel.max() < 0.05

    def test_triangle_consistency(self):
        checked = 0
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            grid = make_indoor_grid(rng, shape=(30, 40), n_rects=5)
            free = np.argwhere(grid == FREE)
            source = tuple(free[rng.integers(len(free))])
            occ = OccupancyMap(grid, resolution=0.1)
            T = fmm_distance(occ, source)
            finite = np.argwhere(np.isfinite(T))
            for _ in range(10):
                a = tuple(finite[rng.integers(len(finite))])
                b = tuple(finite[rng.integers(len(finite))])
                geo = dijkstra_grid(grid != OBSTACLE, a)[b] * occ.resolution
                if np.isfinite(geo) and geo > 0:
                    assert abs(T[a] - T[b]) <= geo * 1.05 + 1e-9
                    checked += 1
        assert checked >= 30


# ── plan_path ──────────────────────────────────────────────────────────


class TestPlanPath:
    def test_start_equals_goal(self):
        occ = OccupancyMap.blank(5, 5)
        occ.grid[2, 2] = FREE
        assert plan_path(occ, (2, 2), (2, 2)) == [(2, 2)]

    def test_straight_corridor(self):
        occ = OccupancyMap(grid_from_rows(["ffffffffff"]), resolution=0.1)
        path = plan_path(occ, (0, 0), (0, 9))
        assert path == [(0, c) for c in range(10)]
        assert path_length(path, 0.1) == pytest.approx(0.9)

    def test_path_avoids_obstacles_and_descends(self):
        occ = OccupancyMap(
            grid_from_rows(
                [
                    "fffff",
                    "ff#ff",
                    "f###f",
                    "fffff",
                ]
            ),
            resolution=0.1,
        )
        path = plan_path(occ, (3, 2), (0, 2))
        T = fmm_distance(occ, (0, 2))
        for cell in path:
            assert occ.grid[cell] != OBSTACLE
        vals = [T[cell] for cell in path]
        assert all(v1 < v0 for v0, v1 in zip(vals[:-1], vals[1:]))
        assert path[0] == (3, 2) and path[-1] == (0, 2)

    def test_no_corner_cutting(self):
        occ = OccupancyMap(
            grid_from_rows(
                [
                    "ffff",
                    "ff#f",
                    "f#ff",
                    "ffff",
                ]
            )
        )
        path = plan_path(occ, (3, 3), (0, 0))
        for (r0, c0), (r1, c1) in zip(path[:-1], path[1:]):
            if r0 != r1 and c0 != c1:
                assert (
                    occ.grid[r1, c0] != OBSTACLE or occ.grid[r0, c1] != OBSTACLE
                )

    def test_unreachable_goal_rejected(self):
        occ = OccupancyMap(grid_from_rows(["ff#ff", "ff#ff", "ff#ff"]))
        with pytest.raises(ValueError):
            plan_path(occ, (0, 0), (0, 4))

    def test_start_on_obstacle_rejected(self):
        occ = OccupancyMap(grid_from_rows(["#ff"]))
        with pytest.raises(ValueError):
            plan_path(occ, (0, 0), (0, 2))

    def test_random_maps_near_optimal(self):
        # path cost within 5% of the exhaustive shortest path, and never
        # below it: both run on the same 8-connected no-corner-cut graph
        res = 0.1
        cases = 0
        seed = 0
        while cases < 50:
            seed += 1
            rng = np.random.default_rng(seed)
            grid = make_indoor_grid(rng, shape=(24, 32), n_rects=5)
            free = np.argwhere(grid == FREE)
            start = tuple(free[rng.integers(len(free))])
            goal = tuple(free[rng.integers(len(free))])
            ref = dijkstra_grid(grid != OBSTACLE, goal)
            if not np.isfinite(ref[start]) or start == goal:
                continue
            occ = OccupancyMap(grid, resolution=res)
            cost = path_length(plan_path(occ, start, goal), res)
            best = ref[start] * res
            assert cost >= best - 1e-9
            assert cost <= best * 1.05 + 1e-9
            cases += 1


# ── voxel_downsample ───────────────────────────────────────────────────


class TestVoxelDownsample:
    def test_single_voxel_centroid(self):
        pc = PointCloud(
            points=np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, 0.1, 0.2]]),
            colors=np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]),
        )
        out = voxel_downsample(pc, 1.0)
        assert len(out) == 1
        assert_allclose(out.points[0], [0.2, 0.4 / 3, 0.5 / 3])
        assert_allclose(out.colors[0], [1 / 3, 1 / 3, 1 / 3])

    def test_separated_points_are_identity(self):
        pts = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [2.5, 0.5, 0.5]])
        cols = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]])
        out = voxel_downsample(PointCloud(points=pts, colors=cols), 1.0)
        order = np.argsort(out.points[:, 0])
        assert_allclose(out.points[order], pts)
        assert_allclose(out.colors[order], cols)

    def test_negative_coordinates_split_voxels(self):
        pts = np.array([[-0.01, 0.5, 0.5], [0.01, 0.5, 0.5]])
        out = voxel_downsample(PointCloud(points=pts, colors=np.full((2, 3), 0.5)), 1.0)
        assert len(out) == 2

    def test_random_cloud_matches_census(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-2, 2, size=(500, 3))
        cols = rng.uniform(0, 1, size=(500, 3))
        voxel = 0.37
        out = voxel_downsample(PointCloud(points=pts, colors=cols), voxel)
        census = voxel_census(pts, voxel, colors=cols)
        assert len(out) == len(census)
        for i in range(len(out)):
            key = tuple(np.floor(out.points[i] / voxel).astype(int))
            count, psum, csum = census[key]
            assert_allclose(out.points[i], psum / count, atol=1e-12)
            assert_allclose(out.colors[i], csum / count, atol=1e-12)

    def test_bad_inputs(self):
        pc = PointCloud(points=np.zeros((1, 3)), colors=np.zeros((1, 3)))
        with pytest.raises(ValueError):
            voxel_downsample(pc, 0.0)
        assert len(voxel_downsample(PointCloud.empty(), 0.5)) == 0


# ── agent trace ────────────────────────────────────────────────────────


class TestAgentTrace:
    def _step(self, i, with_image=True):
        view = make_test_view(width=4, height=3)
        img = np.zeros((3, 4, 3)) if with_image else None
        return TraceStep(
            index=i, view=view, position=np.zeros(3), yaw=0.0, image=img, depth=None
        )

    def test_append_monotone(self):
        trace = AgentTrace()
        trace.append(self._step(0))
        trace.append(self._step(3))
        assert len(trace) == 2

    def test_non_monotone_rejected(self):
        trace = AgentTrace()
        trace.append(self._step(2))
        with pytest.raises(ValueError):
            trace.append(self._step(2))
        with pytest.raises(ValueError):
            trace.append(self._step(1))

    def test_frames_skip_imageless_steps(self):
        trace = AgentTrace()
        trace.append(self._step(0))
        trace.append(self._step(1, with_image=False))
        trace.append(self._step(2))
        assert len(trace.frames()) == 2


# ── exploration loop ───────────────────────────────────────────────────


class TestExplorationLoop:
    def test_exploration_terminates_and_covers_room(self):
        # 12x12 room, border walls, an internal wall with a doorway; the
        # sample/plan/walk/bump loop must discover every walkable cell
        # and then report exhaustion
        walkable = np.zeros((12, 12), dtype=bool)
        walkable[1:11, 1:11] = True
        walkable[1:8, 5] = False  # internal wall, doorway at rows 8..10
        rng = np.random.default_rng(42)
        occ = OccupancyMap.blank(12, 12, resolution=0.1)
        cur = (1, 1)
        occ = update_map(occ, cur, MapEvidence(traversed=(cur,)))
        goals = 0
        while goals < 400:
            goal = sample_goal(occ, rng)
            if goal is None:
                break
            goals += 1
            try:
                path = plan_path(occ, cur, goal)
            except ValueError:
                continue  # goal got sealed off since sampling
            for step in path[1:]:
                if walkable[step]:
                    cur = step
                    occ = update_map(occ, cur, MapEvidence(traversed=(cur,)))
                else:
                    occ = update_map(occ, cur, MapEvidence(blocked=step))
                    break
        assert goals < 400, "exploration did not terminate"
        assert ((occ.grid == FREE) == walkable).all()
        assert (occ.grid[~walkable] != FREE).all()
