#!/usr/bin/env python3
import os
import sys
import shutil
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

# Add the parent directory to the path so we can import from src
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.confmap_codec import encode_confmap
from src.errors import ConfigError, DataError, ShapeError
from src.geometry import OlsParams, PolarGrid, ols
from src.postproc import (PostprocPolicy, Track, apply_constraints, border_entry, build_tracks, continuity,
                          ensemble_confmaps, lnms, merge_windows, no_collision, postprocess, read_detections_csv,
                          sort_detections, write_detections_csv)
from src.radar_data import ConfMap, Detection, ObjectAnnotation, SceneLabel

GRID = PolarGrid(grid_size=32)
OLS = OlsParams((0.1, 0.1, 0.1))
POLICY = PostprocPolicy(peak_threshold=0.3, border_margin=4)


def det(frame, class_id, range_idx, azimuth_idx, confidence=0.9):
    return Detection(frame, class_id, range_idx, azimuth_idx, confidence)


def empty_frames(n):
    return [[] for _ in range(n)]


# detections packed into a few cells so that classes collide often
crowded_detections = st.builds(Detection, st.just(0), st.integers(0, 2), st.integers(14, 17), st.integers(9, 12),
                               st.floats(min_value=0.01, max_value=1.0))

# far-apart object positions; each slot holds one class, present on some frames
SLOTS = [(8, 8), (8, 24), (24, 8), (24, 24), (16, 16)]
SLOT_FRAMES = 16
slot_tracks = st.tuples(st.integers(0, 2), st.lists(st.booleans(), min_size=SLOT_FRAMES, max_size=SLOT_FRAMES))


class TestPolicy(unittest.TestCase):

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            PostprocPolicy(peak_threshold=0.0)
        with self.assertRaises(ConfigError):
            PostprocPolicy(max_gap=3)
        with self.assertRaises(ConfigError):
            PostprocPolicy(border_margin=-1)
        with self.assertRaises(ConfigError):
            PostprocPolicy(existence_factor=0)

    def test_existence_floor(self):
        self.assertEqual(POLICY.existence_floor, 12)
        self.assertIs(PostprocPolicy(scene='static').scene, SceneLabel.STATIC)


class TestLnms(unittest.TestCase):

    def test_strict_peaks_above_threshold(self):
        frame = np.zeros((3, 32, 32))
        frame[0, 10, 16] = 0.9
        frame[1, 20, 5] = 0.25
        frame[2, 5, 25] = 0.6
        dets = lnms(frame, POLICY, GRID, OLS, frame_index=4)
        self.assertEqual([(d.class_id, d.range_idx, d.azimuth_idx) for d in dets], [(0, 16, 10), (2, 25, 5)])
        self.assertTrue(all(d.frame_index == 4 for d in dets))
        self.assertEqual([d.confidence for d in dets], [0.9, 0.6])

    def test_plateaus_are_not_peaks(self):
        frame = np.zeros((1, 32, 32))
        frame[0, 10, 16:18] = 0.8
        self.assertEqual(lnms(frame, POLICY, GRID, OLS), [])

    def test_nearby_weaker_peak_is_suppressed(self):
        frame = np.zeros((1, 32, 32))
        frame[0, 10, 16] = 0.9
        frame[0, 10, 18] = 0.8
        dets = lnms(frame, POLICY, GRID, OLS)
        self.assertEqual([(d.range_idx, d.confidence) for d in dets], [(16, 0.9)])

    def test_distant_peaks_both_survive(self):
        frame = np.zeros((1, 32, 32))
        frame[0, 10, 16] = 0.9
        frame[0, 10, 26] = 0.8
        self.assertEqual(len(lnms(frame, POLICY, GRID, OLS)), 2)

    def test_needs_a_single_frame(self):
        with self.assertRaises(ShapeError):
            lnms(np.zeros((1, 2, 32, 32)), POLICY, GRID, OLS)


class TestNoCollision(unittest.TestCase):

    def test_less_confident_class_is_dropped(self):
        frames = [[det(0, 1, 16, 10, 0.5), det(0, 0, 16, 10, 0.9), det(0, 2, 26, 20, 0.4)]]
        kept = no_collision(frames, POLICY, GRID, OLS)[0]
        self.assertEqual([(d.class_id, d.confidence) for d in kept], [(0, 0.9), (2, 0.4)])

    def test_same_class_is_left_alone(self):
        frames = [[det(0, 0, 16, 10, 0.5), det(0, 0, 16, 11, 0.9)]]
        self.assertEqual(len(no_collision(frames, POLICY, GRID, OLS)[0]), 2)

    def test_three_way_collision_keeps_the_most_confident(self):
        frames = [[det(0, 2, 16, 10, 0.7), det(0, 0, 16, 10, 0.9), det(0, 1, 16, 10, 0.8)]]
        kept = no_collision(frames, POLICY, GRID, OLS)[0]
        self.assertEqual([(d.class_id, d.confidence) for d in kept], [(0, 0.9)])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(crowded_detections, max_size=12))
    def test_kept_detections_never_collide(self, dets):
        kept = no_collision([dets], POLICY, GRID, OLS)[0]
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id != b.class_id:
                    self.assertLessEqual(ols(a, b, GRID, OLS), POLICY.collision_ols_threshold)
        if dets:
            self.assertIn(min(dets, key=Detection.sort_key), kept)
        # every dropped detection lost to a kept, at least as confident, other-class one
        for d in dets:
            if d in kept:
                continue
            self.assertTrue(any(k.class_id != d.class_id and k.confidence >= d.confidence
                                and ols(k, d, GRID, OLS) > POLICY.collision_ols_threshold for k in kept))


class TestTracks(unittest.TestCase):

    def test_association_by_class(self):
        frames = [[det(0, 0, 16, 10), det(0, 1, 16, 20)], [det(1, 0, 16, 10)], [det(2, 1, 16, 20)]]
        tracks = build_tracks(frames, POLICY, GRID, OLS)
        self.assertEqual(sorted(len(t) for t in tracks), [2, 2])
        self.assertEqual({t.class_id for t in tracks}, {0, 1})

    def test_long_gap_starts_a_new_track(self):
        frames = [[det(0, 0, 16, 10)]] + empty_frames(3) + [[det(4, 0, 16, 10)]]
        self.assertEqual(len(build_tracks(frames, POLICY, GRID, OLS)), 2)

    def test_gap_is_interpolated(self):
        frames = [[det(0, 0, 16, 10, 0.8)], [], [det(2, 0, 17, 10, 0.6)]]
        tracks = continuity(build_tracks(frames, POLICY, GRID, OLS), POLICY, GRID, OLS)
        self.assertEqual(len(tracks), 1)
        fill = tracks[0].points[1]
        self.assertEqual((fill.frame_index, fill.class_id, fill.range_idx, fill.azimuth_idx), (1, 0, 17, 10))
        self.assertAlmostEqual(fill.confidence, 0.7)

    def test_interloper_is_relabelled(self):
        frames = [[det(0, 0, 16, 10, 0.9)], [det(1, 1, 16, 10, 0.4)], [det(2, 0, 16, 10, 0.9)]]
        tracks = continuity(build_tracks(frames, POLICY, GRID, OLS), POLICY, GRID, OLS)
        self.assertEqual(len(tracks), 1)
        middle = tracks[0].points[1]
        self.assertEqual((middle.class_id, middle.confidence), (0, 0.4))

    def test_target_moving_one_cell_per_frame_is_one_track(self):
        frames = [[det(f, 0, 16 + f, 10)] for f in range(5)]
        tracks = build_tracks(frames, POLICY, GRID, OLS)
        self.assertEqual(len(tracks), 1)
        self.assertEqual([p.range_idx for p in tracks[0].points], [16, 17, 18, 19, 20])

    def test_gap_longer_than_max_gap_is_not_filled(self):
        track = Track(0, 0, [det(0, 0, 16, 10), det(4, 0, 16, 10)])
        filled = continuity([track], POLICY, GRID, OLS)
        self.assertEqual([p.frame_index for p in filled[0].points], [0, 4])
        frames = [[det(0, 0, 16, 10)]] + empty_frames(3) + [[det(4, 0, 16, 10)]]
        out = apply_constraints(frames, SceneLabel.STATIC, POLICY, GRID, OLS)
        self.assertEqual([len(f) for f in out], [1, 0, 0, 0, 1])

    def test_border_entry(self):
        def track(tid, first, length, r=16, a=16):
            return Track(tid, 0, [det(first + k, 0, r, a) for k in range(length)])

        tracks = [track(0, 10, 2), track(1, 2, 2), track(2, 10, 2, r=2), track(3, 10, 12), track(4, 10, 2, a=5)]
        kept = border_entry(tracks, POLICY, 32)
        self.assertEqual([t.track_id for t in kept], [1, 2, 3])

    def test_border_entry_margins_are_inclusive(self):
        def track(tid, first, r=16, a=16):
            return Track(tid, 0, [det(first + k, 0, r, a) for k in range(2)])

        tracks = [track(0, 4), track(1, 5), track(2, 10, a=4), track(3, 10, r=27), track(4, 10, r=26)]
        kept = border_entry(tracks, POLICY, 32)
        self.assertEqual([t.track_id for t in kept], [0, 2, 3])


class TestConstraintChains(unittest.TestCase):

    def frames(self):
        frames = empty_frames(14)
        for f in range(14):
            frames[f].append(det(f, 0, 16, 10))
        frames[10].append(det(10, 1, 16, 25))
        frames[11].append(det(11, 1, 16, 25))
        return frames

    def test_static_drops_late_short_tracks(self):
        out = apply_constraints(self.frames(), SceneLabel.STATIC, POLICY, GRID, OLS)
        self.assertEqual(sum(len(f) for f in out), 14)
        self.assertTrue(all(d.class_id == 0 for f in out for d in f))

    def test_dynamic_only_resolves_collisions(self):
        out = apply_constraints(self.frames(), 'dynamic', POLICY, GRID, OLS)
        self.assertEqual(sum(len(f) for f in out), 16)

    def test_needs_a_scene(self):
        with self.assertRaises(DataError):
            apply_constraints(self.frames(), None, POLICY, GRID, OLS)

    def test_empty_input_gives_empty_output(self):
        cmap = ConfMap(np.zeros((3, 6, 32, 32), dtype=np.float32))
        for scene in SceneLabel:
            self.assertEqual(postprocess(cmap, scene, POLICY, GRID, OLS), [])
            self.assertEqual(apply_constraints([], scene, POLICY, GRID, OLS), [])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(slot_tracks, min_size=len(SLOTS), max_size=len(SLOTS)), st.sampled_from(list(SceneLabel)))
    def test_postprocess_is_idempotent(self, slots, scene):
        anns = [ObjectAnnotation(t, class_id, r, a)
                for (r, a), (class_id, present) in zip(SLOTS, slots) for t in range(SLOT_FRAMES) if present[t]]
        cmap = encode_confmap(anns, SLOT_FRAMES, 32, (1.0, 1.5, 2.0))
        once = sort_detections(postprocess(cmap, scene, POLICY, GRID, OLS))
        frames = empty_frames(SLOT_FRAMES)
        for d in once:
            frames[d.frame_index].append(d)
        twice = sort_detections([d for dets in apply_constraints(frames, scene, POLICY, GRID, OLS) for d in dets])
        self.assertEqual(twice, once)

    def test_postprocess_decodes_encoded_objects(self):
        anns = [ObjectAnnotation(t, 0, 16, 10) for t in range(6)]
        cmap = encode_confmap(anns, 6, 32, (1.0, 1.5, 2.0))
        dets = postprocess(cmap, SceneLabel.STATIC, POLICY, GRID, OLS)
        self.assertEqual([(d.frame_index, d.range_idx, d.azimuth_idx) for d in dets],
                         [(t, 16, 10) for t in range(6)])


class TestConfMapMerging(unittest.TestCase):

    def test_merge_windows_averages_overlaps(self):
        a = ConfMap(np.full((1, 4, 2, 2), 0.2, dtype=np.float32))
        b = ConfMap(np.full((1, 4, 2, 2), 0.6, dtype=np.float32))
        merged = merge_windows([(0, a), (2, b)], 6).data[0, :, 0, 0]
        np.testing.assert_allclose(merged, [0.2, 0.2, 0.4, 0.4, 0.6, 0.6], rtol=1e-6)

    def test_merge_windows_errors(self):
        a = ConfMap(np.zeros((1, 4, 2, 2), dtype=np.float32))
        with self.assertRaises(DataError):
            merge_windows([(0, a)], 6)
        with self.assertRaises(DataError):
            merge_windows([(3, a)], 6)
        with self.assertRaises(DataError):
            merge_windows([], 4)
        with self.assertRaises(ShapeError):
            merge_windows([(0, a), (0, ConfMap(np.zeros((2, 4, 2, 2))))], 4)

    def test_ensemble_matches_a_scalar_loop(self):
        rng = np.random.default_rng(5)
        maps = [ConfMap(rng.uniform(size=(2, 3, 4, 4)).astype(np.float32)) for _ in range(3)]
        merged = ensemble_confmaps(maps).data
        for idx in np.ndindex(merged.shape):
            expected = sum(float(m.data[idx]) for m in maps) / 3.0
            self.assertAlmostEqual(float(merged[idx]), expected, delta=1e-7)

    def test_overlapping_windows_match_brute_force(self):
        rng = np.random.default_rng(6)
        window, stride, num_frames = 4, 3, 10
        starts = [0, 3, 6]
        windows = [(s, ConfMap(rng.uniform(size=(1, window, 2, 2)).astype(np.float32))) for s in starts]
        merged = merge_windows(windows, num_frames).data
        for t in range(num_frames):
            covering = [cmap.data[:, t - s] for s, cmap in windows if s <= t < s + window]
            np.testing.assert_allclose(merged[:, t], np.mean(covering, axis=0), rtol=1e-6)

    def test_ensemble_is_the_mean(self):
        maps = [ConfMap(np.full((1, 1, 2, 2), v, dtype=np.float32)) for v in (0.2, 0.4, 0.9)]
        np.testing.assert_allclose(ensemble_confmaps(maps).data, 0.5, rtol=1e-6)
        with self.assertRaises(ShapeError):
            ensemble_confmaps([maps[0], ConfMap(np.zeros((1, 2, 2, 2)))])
        with self.assertRaises(DataError):
            ensemble_confmaps([])


class TestDetectionCsv(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_written_sorted_and_read_back(self):
        dets = [det(1, 0, 3, 4, 0.5), det(0, 2, 5, 6, 0.25), det(1, 1, 7, 8, 0.75)]
        path = write_detections_csv(os.path.join(self.tmp, 'd.csv'), dets)
        with open(path) as f:
            self.assertEqual(f.readline().strip(), 'frame,class,range,azimuth,confidence')
        loaded = read_detections_csv(path, grid_size=32, num_classes=3)
        self.assertEqual(loaded, [dets[1], dets[2], dets[0]])

    def test_bad_files(self):
        path = os.path.join(self.tmp, 'bad.csv')
        with open(path, 'w') as f:
            f.write('frame,cls,range,azimuth,confidence\n')
        with self.assertRaises(DataError):
            read_detections_csv(path)
        with open(path, 'w') as f:
            f.write('frame,class,range,azimuth,confidence\n0,0,40,1,0.5\n')
        with self.assertRaises(DataError):
            read_detections_csv(path, grid_size=32)
        with open(path, 'w') as f:
            f.write('frame,class,range,azimuth,confidence\n0,zero,4,1,0.5\n')
        with self.assertRaises(DataError):
            read_detections_csv(path)


if __name__ == '__main__':
    unittest.main()
