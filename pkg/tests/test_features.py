"""Patch feature comparison, region grouping, and concept filter tests."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from splatr.features import (
    ChangeRegion,
    ConceptTable,
    DetectConfig,
    FileEmbeddingBackend,
    PatchFeatureGrid,
    PatchStatsBackend,
    changed_patches,
    color_histogram_embedding,
    concept_filter,
    detect,
    group_regions,
    pad_to_multiple,
    rasterize_patch_mask,
    similarity_grid,
)
from splatr.io import read_patch_embeddings, write_patch_embeddings

from oracles import flood_fill_regions


def unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ── feature grid type ──────────────────────────────────────────────────


class TestPatchFeatureGrid:
    def test_shape_accessors(self):
        g = PatchFeatureGrid(np.zeros((3, 5, 7)) + 1.0)
        assert (g.rows, g.cols, g.dim) == (3, 5, 7)

    def test_validation(self):
        with pytest.raises(ValueError):
            PatchFeatureGrid(np.zeros((3, 5)))
        with pytest.raises(ValueError):
            PatchFeatureGrid(np.zeros((0, 5, 7)))
        bad = np.ones((2, 2, 3))
        bad[1, 1, 0] = np.nan
        with pytest.raises(ValueError):
            PatchFeatureGrid(bad)


# ── similarity grid ────────────────────────────────────────────────────


class TestSimilarityGrid:
    def test_identical_grids_are_all_ones(self):
        rng = np.random.default_rng(0)
        g = PatchFeatureGrid(rng.normal(size=(4, 6, 8)))
        assert_allclose(similarity_grid(g, g), 1.0, atol=1e-12)

    def test_orthogonal_cell_is_zero(self):
        a = np.zeros((1, 2, 3))
        b = np.zeros((1, 2, 3))
        a[0, 0] = [1, 0, 0]
        b[0, 0] = [0, 1, 0]
        a[0, 1] = b[0, 1] = [0, 0, 2]
        S = similarity_grid(PatchFeatureGrid(a), PatchFeatureGrid(b))
        assert_allclose(S, [[0.0, 1.0]], atol=1e-12)

    def test_zero_vector_convention(self):
        a = np.zeros((1, 1, 4))
        b = np.ones((1, 1, 4))
        S = similarity_grid(PatchFeatureGrid(a), PatchFeatureGrid(b))
        assert S[0, 0] == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            similarity_grid(
                PatchFeatureGrid(np.ones((2, 2, 3))), PatchFeatureGrid(np.ones((2, 3, 3)))
            )
        with pytest.raises(ValueError):
            similarity_grid(
                PatchFeatureGrid(np.ones((2, 2, 3))), PatchFeatureGrid(np.ones((2, 2, 4)))
            )

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 7, 16))
        b = rng.normal(size=(5, 7, 16))
        S = similarity_grid(PatchFeatureGrid(a), PatchFeatureGrid(b))
        for i in range(5):
            for j in range(7):
                ref = float(
                    a[i, j] @ b[i, j] / (np.linalg.norm(a[i, j]) * np.linalg.norm(b[i, j]))
                )
                assert S[i, j] == pytest.approx(ref, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = PatchFeatureGrid(rng.normal(size=(3, 4, 5)))
        b = PatchFeatureGrid(rng.normal(size=(3, 4, 5)))
        assert_allclose(similarity_grid(a, b), similarity_grid(b, a), atol=1e-15)

    def test_range(self):
        rng = np.random.default_rng(5)
        a = PatchFeatureGrid(rng.normal(size=(6, 6, 3)) * 100)
        b = PatchFeatureGrid(rng.normal(size=(6, 6, 3)) * 100)
        S = similarity_grid(a, b)
        assert (S >= -1.0).all() and (S <= 1.0).all()


# ── changed patches ────────────────────────────────────────────────────


class TestChangedPatches:
    def test_all_similar_nothing_changes(self):
        assert not changed_patches(np.ones((3, 3)), 0.9).any()

    def test_single_low_cell(self):
        S = np.ones((3, 3))
        S[1, 2] = 0.2
        mask = changed_patches(S, 0.6)
        assert mask[1, 2] and mask.sum() == 1

    def test_threshold_sweep_is_monotone(self):
        rng = np.random.default_rng(6)
        S = rng.uniform(-1, 1, size=(8, 8))
        low = changed_patches(S, 0.2)
        high = changed_patches(S, 0.8)
        assert (low <= high).all()

    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            changed_patches(np.ones((2, 2)), 1.0)
        with pytest.raises(ValueError):
            changed_patches(np.ones((2, 2)), -1.0)


# ── region grouping ────────────────────────────────────────────────────


class TestGroupRegions:
    def test_block_is_one_region(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0:2, 0:2] = True
        regions = group_regions(mask, min_patches=2)
        assert len(regions) == 1
        assert regions[0].patch_count == 4
        assert regions[0].bbox == (0, 0, 2, 2)

    def test_diagonal_cells_are_connected(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 0] = mask[1, 1] = True
        regions = group_regions(mask, min_patches=2)
        assert len(regions) == 1
        assert regions[0].patch_count == 2

    def test_small_components_dropped(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[0, 0] = True  # singleton
        mask[3:5, 3:5] = True
        regions = group_regions(mask, min_patches=2)
        assert len(regions) == 1
        assert regions[0].bbox == (3, 3, 5, 5)

    def test_ordering_by_top_left(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[4:6, 0:2] = True
        mask[0:2, 4:6] = True
        regions = group_regions(mask, min_patches=2)
        assert [r.bbox for r in regions] == [(0, 4, 2, 6), (4, 0, 6, 2)]

    def test_pixel_bbox_scaling_and_clipping(self):
        mask = np.zeros((3, 4), dtype=bool)
        mask[1, 2:4] = True
        regions = group_regions(mask, min_patches=2, patch_size=8, image_size=(20, 30))
        assert regions[0].bbox == (8, 16, 16, 30)

    def test_matches_flood_fill_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            mask = rng.random((10, 14)) < 0.35
            regions = group_regions(mask, min_patches=1)
            got = {frozenset(map(tuple, np.argwhere(r.patch_mask))) for r in regions}
            want = {frozenset(comp) for comp in flood_fill_regions(mask)}
            assert got == want

    def test_region_validation(self):
        with pytest.raises(ValueError):
            ChangeRegion(np.zeros((2, 2), dtype=bool), (0, 0, 1, 1))
        split = np.zeros((3, 3), dtype=bool)
        split[0, 0] = True
        split[0, 2] = True
        with pytest.raises(ValueError):
            ChangeRegion(split, (0, 0, 1, 3))
        ok = np.ones((1, 1), dtype=bool)
        with pytest.raises(ValueError):
            ChangeRegion(ok, (0, 0, 1, 1), source="rendered")
        with pytest.raises(ValueError):
            ChangeRegion(ok, (0, 0, 0, 1))


# ── concept table and filter ───────────────────────────────────────────


class TestConceptFilter:
    def _table(self):
        rng = np.random.default_rng(9)
        emb = unit_rows(rng, 5, 8)
        labels = ["mug", "book", "lamp", "mug wall", "mug mirror"]
        return ConceptTable(labels=labels, embeddings=emb)

    def test_table_validation(self):
        with pytest.raises(ValueError):
            ConceptTable(labels=["a"], embeddings=np.full((1, 4), 2.0))
        with pytest.raises(ValueError):
            ConceptTable(labels=["a", "b"], embeddings=np.eye(3))

    def test_exact_object_match_is_kept(self):
        table = self._table()
        assert concept_filter(table.embeddings[1], table, ["mug", "book", "lamp"])

    def test_exact_conditioned_match_is_rejected(self):
        table = self._table()
        assert not concept_filter(table.embeddings[3], table, ["mug", "book", "lamp"])

    def test_tie_breaks_toward_keep(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0]])
        table = ConceptTable(labels=["mug", "mug wall"], embeddings=emb)
        assert concept_filter(np.array([1.0, 0.0]), table, ["mug"])

    def test_empty_table_rejected(self):
        table = ConceptTable(labels=[], embeddings=np.zeros((0, 4)))
        with pytest.raises(ValueError):
            concept_filter(np.ones(4), table, [])

    def test_matches_argmax_oracle(self):
        rng = np.random.default_rng(10)
        emb = unit_rows(rng, 10, 12)
        labels = [f"obj{i}" for i in range(7)] + ["obj0 wall", "obj1 wall", "obj2 mirror"]
        table = ConceptTable(labels=labels, embeddings=emb)
        vocab = [f"obj{i}" for i in range(7)]
        for _ in range(100):
            g = rng.normal(size=12)
            sims = [
                g @ e / (np.linalg.norm(g) * np.linalg.norm(e)) for e in table.embeddings
            ]
            want = labels[int(np.argmax(sims))] in vocab
            assert concept_filter(g, table, vocab) == want


# ── color histogram embedding ──────────────────────────────────────────


class TestColorHistogramEmbedding:
    def test_solid_color_is_one_hot(self):
        crop = np.full((6, 6, 3), [1.0, 0.0, 0.0])
        e = color_histogram_embedding(crop)
        # red saturates to bin (3,0,0) -> (3*4+0)*4+0 = 48
        assert e[48] == pytest.approx(1.0)
        assert np.linalg.norm(e) == pytest.approx(1.0)

    def test_two_tone_crop(self):
        crop = np.zeros((2, 2, 3))
        crop[:, 0] = [1.0, 0.0, 0.0]
        crop[:, 1] = [0.0, 0.0, 1.0]  # bin (0,0,3) = 3
        e = color_histogram_embedding(crop)
        assert e[48] == pytest.approx(1 / np.sqrt(2))
        assert e[3] == pytest.approx(1 / np.sqrt(2))

    def test_empty_crop_rejected(self):
        with pytest.raises(ValueError):
            color_histogram_embedding(np.zeros((0, 0, 3)))


# ── synthetic backend ──────────────────────────────────────────────────


class TestPatchStatsBackend:
    def test_grid_shape(self):
        backend = PatchStatsBackend(patch_size=8)
        img = np.zeros((24, 32, 3))
        g = backend.extract(img)
        assert (g.rows, g.cols, g.dim) == (3, 4, 11)

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        img = rng.random((16, 16, 3))
        backend = PatchStatsBackend(patch_size=8)
        assert (backend.extract(img).data == backend.extract(img).data).all()

    def test_flat_patch_descriptor_by_hand(self):
        backend = PatchStatsBackend(patch_size=8, bias=0.25)
        red = np.full((8, 8, 3), [1.0, 0.0, 0.0])
        v = backend.extract(red).data[0, 0]
        assert_allclose(v, [0.5, -0.5, -0.5, 0, 0, 0, 0, 0, 0, 0, 0.25], atol=1e-12)

    def test_flat_color_pair_similarity_by_hand(self):
        # red vs mid-gray: only the bias terms overlap, so the cosine is
        # 0.0625 / (sqrt(0.8125) * 0.25)
        backend = PatchStatsBackend(patch_size=8, bias=0.25)
        red = np.full((8, 8, 3), [1.0, 0.0, 0.0])
        gray = np.full((8, 8, 3), 0.5)
        S = similarity_grid(backend.extract(red), backend.extract(gray))
        assert S[0, 0] == pytest.approx(0.0625 / (np.sqrt(0.8125) * 0.25), abs=1e-9)

    def test_non_multiple_dims_rejected(self):
        backend = PatchStatsBackend(patch_size=8)
        with pytest.raises(ValueError):
            backend.extract(np.zeros((10, 16, 3)))

    def test_descriptors_never_zero(self):
        backend = PatchStatsBackend(patch_size=8)
        g = backend.extract(np.zeros((16, 16, 3)))
        assert (np.linalg.norm(g.data, axis=2) > 0).all()


class TestPadToMultiple:
    def test_already_aligned_is_identity(self):
        img = np.ones((16, 24, 3))
        assert pad_to_multiple(img, 8) is img

    def test_replicates_edges(self):
        img = np.arange(6.0).reshape(2, 3)[..., None] * np.ones(3)
        out = pad_to_multiple(img, 4)
        assert out.shape == (4, 4, 3)
        assert_allclose(out[3, 0], img[1, 0])  # bottom rows copy the last row
        assert_allclose(out[0, 3], img[0, 2])  # right cols copy the last col


class TestRasterizePatchMask:
    def test_expands_each_patch_to_a_block(self):
        mask = np.array([[True, False], [False, True]])
        out = rasterize_patch_mask(mask, 2, (4, 4))
        expected = np.array(
            [
                [1, 1, 0, 0],
                [1, 1, 0, 0],
                [0, 0, 1, 1],
                [0, 0, 1, 1],
            ],
            dtype=bool,
        )
        assert np.array_equal(out, expected)

    def test_clips_padded_overhang(self):
        out = rasterize_patch_mask(np.ones((1, 1), dtype=bool), 8, (5, 7))
        assert out.shape == (5, 7) and out.all()

    def test_undersized_grid_rejected(self):
        with pytest.raises(ValueError, match="cover"):
            rasterize_patch_mask(np.ones((1, 1), dtype=bool), 4, (5, 4))

    def test_grid_must_be_2d(self):
        with pytest.raises(ValueError, match="2D"):
            rasterize_patch_mask(np.ones((2, 2, 2), dtype=bool), 4, (8, 8))


# ── file-loader backend ────────────────────────────────────────────────


class TestFileEmbeddingBackend:
    def test_round_trip_and_extract(self, tmp_path):
        rng = np.random.default_rng(13)
        data = rng.normal(size=(3, 4, 6)).astype(np.float32)
        write_patch_embeddings(tmp_path / "000.emb", data)
        back = read_patch_embeddings(tmp_path / "000.emb")
        assert (back == data).all()
        backend = FileEmbeddingBackend(tmp_path, patch_size=8, dim=6)
        g = backend.extract(np.zeros((24, 32, 3)), key="000")
        assert_allclose(g.data, data, atol=1e-7)

    def test_write_read_write_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(14)
        data = rng.normal(size=(2, 2, 3))
        write_patch_embeddings(tmp_path / "a.emb", data)
        first = (tmp_path / "a.emb").read_bytes()
        write_patch_embeddings(tmp_path / "b.emb", read_patch_embeddings(tmp_path / "a.emb"))
        assert (tmp_path / "b.emb").read_bytes() == first

    def test_strict_parsing(self, tmp_path):
        data = np.ones((2, 3, 4), dtype=np.float32)
        path = tmp_path / "x.emb"
        write_patch_embeddings(path, data)
        raw = path.read_bytes()

        (tmp_path / "magic.emb").write_bytes(b"BADMAGIC" + raw[8:])
        with pytest.raises(ValueError, match="magic"):
            read_patch_embeddings(tmp_path / "magic.emb")

        (tmp_path / "short.emb").write_bytes(raw[:-4])
        with pytest.raises(ValueError, match="expected"):
            read_patch_embeddings(tmp_path / "short.emb")

        (tmp_path / "long.emb").write_bytes(raw + b"\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="expected"):
            read_patch_embeddings(tmp_path / "long.emb")

        bad_version = raw[:8] + (99).to_bytes(4, "little") + raw[12:]
        (tmp_path / "ver.emb").write_bytes(bad_version)
        with pytest.raises(ValueError, match="version"):
            read_patch_embeddings(tmp_path / "ver.emb")

        (tmp_path / "stub.emb").write_bytes(raw[:10])
        with pytest.raises(ValueError, match="truncated"):
            read_patch_embeddings(tmp_path / "stub.emb")

    def test_mismatched_grid_rejected(self, tmp_path):
        write_patch_embeddings(tmp_path / "k.emb", np.ones((2, 2, 6), dtype=np.float32))
        backend = FileEmbeddingBackend(tmp_path, patch_size=8, dim=6)
        with pytest.raises(ValueError, match="does not match"):
            backend.extract(np.zeros((24, 32, 3)), key="k")
        with pytest.raises(ValueError):
            backend.extract(np.zeros((16, 16, 3)))  # no key


# ── end-to-end detection ───────────────────────────────────────────────


def _scene_images():
    """64x64 gray world; a 16px red box moves from col 8 to col 40 and a
    checkerboard artifact sits on the goal image at rows 40..56."""
    ic = np.full((64, 64, 3), 0.5)
    ig = np.full((64, 64, 3), 0.5)
    ic[8:24, 40:56] = [1.0, 0.0, 0.0]  # current: box at its shuffled spot
    ig[8:24, 8:24] = [1.0, 0.0, 0.0]  # goal: box at its goal spot
    checker = np.indices((16, 16)).sum(axis=0) % 2
    ig[40:56, 8:24] = np.where(checker[..., None] == 0, 0.3, 0.7)
    return ic, ig


class TestDetect:
    def test_identical_images_no_regions(self):
        rng = np.random.default_rng(15)
        img = rng.random((32, 32, 3))
        cur, goal = detect(img, img.copy(), PatchStatsBackend(patch_size=8))
        assert cur == [] and goal == []

    def test_moved_box_and_artifact_regions(self):
        ic, ig = _scene_images()
        cur, goal = detect(ic, ig, PatchStatsBackend(patch_size=8))
        assert len(cur) == 3 and len(goal) == 3
        assert [r.bbox for r in cur] == [(8, 8, 24, 24), (8, 40, 24, 56), (40, 8, 56, 24)]
        assert all(r.source == "current" for r in cur)
        assert all(r.source == "goal" for r in goal)
        assert [r.bbox for r in goal] == [r.bbox for r in cur]

    def test_swap_gives_same_masks(self):
        ic, ig = _scene_images()
        cur_ab, _ = detect(ic, ig, PatchStatsBackend(patch_size=8))
        cur_ba, _ = detect(ig, ic, PatchStatsBackend(patch_size=8))
        assert len(cur_ab) == len(cur_ba)
        for ra, rb in zip(cur_ab, cur_ba):
            assert (ra.patch_mask == rb.patch_mask).all()

    def test_concept_filter_prunes_artifacts_and_empty_sides(self):
        ic, ig = _scene_images()
        red = color_histogram_embedding(np.full((4, 4, 3), [1.0, 0.0, 0.0]))
        wall = color_histogram_embedding(np.full((4, 4, 3), 0.5))
        table = ConceptTable(labels=["box", "box wall"], embeddings=np.stack([red, wall]))
        cur, goal = detect(
            ic, ig, PatchStatsBackend(patch_size=8), table=table, object_vocab=["box"]
        )
        # current side keeps only the box where it stands now; goal side
        # keeps only where it should go; the artifact dies on both sides
        assert [r.bbox for r in cur] == [(8, 40, 24, 56)]
        assert [r.bbox for r in goal] == [(8, 8, 24, 24)]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            detect(
                np.zeros((16, 16, 3)), np.zeros((16, 24, 3)), PatchStatsBackend(patch_size=8)
            )

    def test_padding_path_works(self):
        # 30x29 image: padded to 32x32 internally, bboxes stay clipped
        ic = np.full((30, 29, 3), 0.5)
        ig = ic.copy()
        ig[20:30, 20:29] = [0.1, 0.9, 0.1]
        cur, _ = detect(ic, ig, PatchStatsBackend(patch_size=8))
        assert len(cur) == 1
        t, l, b, r = cur[0].bbox
        assert b <= 30 and r <= 29

    def test_detect_config_validation(self):
        with pytest.raises(ValueError):
            DetectConfig(tau_patch=1.5)
        with pytest.raises(ValueError):
            DetectConfig(min_patches=0)
