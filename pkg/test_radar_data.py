#!/usr/bin/env python3
import os
import sys
import shutil
import tempfile
import unittest

import numpy as np

# Add the parent directory to the path so we can import from src
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.errors import DataError, ShapeError
from src.radar_data import (ObjectAnnotation, Detection, ConfMap, RadarSequence, RadarSnippet, SceneLabel,
                            annotations_in_window, group_by_frame, load_dataset, read_sequence, read_tensor,
                            slice_snippets, snippet_starts, split_sequences, tensor_from_bytes, tensor_to_bytes,
                            write_sequence, write_tensor)


def make_sequence(num_frames=6, grid=8, scene=SceneLabel.STATIC, seq_id='seq', seed=0):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(num_frames, 2, grid, grid)).astype(np.float32)
    return RadarSequence.from_array(data, scene, seq_id)


class TestSceneLabel(unittest.TestCase):

    def test_parse_known_and_unknown(self):
        self.assertIs(SceneLabel.parse('static'), SceneLabel.STATIC)
        self.assertIs(SceneLabel.parse(' Dynamic '), SceneLabel.DYNAMIC)
        self.assertIsNone(SceneLabel.parse('unknown'))
        self.assertIsNone(SceneLabel.parse('auto'))
        self.assertIsNone(SceneLabel.parse(None))

    def test_parse_rejects_garbage(self):
        with self.assertRaises(DataError):
            SceneLabel.parse('parked')


class TestDomainTypes(unittest.TestCase):

    def test_sequence_rejects_non_square_frames(self):
        with self.assertRaises(ShapeError):
            RadarSequence.from_array(np.zeros((2, 2, 4, 5), dtype=np.float32), None, 'bad')

    def test_frames_are_read_only(self):
        seq = make_sequence()
        with self.assertRaises(ValueError):
            seq.frames[0].data[0, 0, 0] = 1.0

    def test_snippet_layout(self):
        seq = make_sequence(num_frames=6)
        np.testing.assert_array_equal(seq.to_array()[:, 3], seq.frames[3].data)

    def test_non_finite_frame_rejected(self):
        data = np.zeros((1, 2, 4, 4), dtype=np.float32)
        data[0, 0, 1, 1] = np.nan
        with self.assertRaises(DataError):
            RadarSequence.from_array(data, None, 'nan')

    def test_annotation_validation(self):
        ObjectAnnotation(0, 2, 7, 7).validate(grid_size=8, num_classes=3, num_frames=1)
        with self.assertRaises(DataError):
            ObjectAnnotation(0, 3, 1, 1).validate(8, 3)
        with self.assertRaises(DataError):
            ObjectAnnotation(0, 0, 8, 1).validate(8, 3)
        with self.assertRaises(DataError):
            ObjectAnnotation(4, 0, 1, 1).validate(8, 3, num_frames=4)

    def test_detection_confidence_range(self):
        with self.assertRaises(DataError):
            Detection(0, 0, 1, 1, 1.5)

    def test_detection_sort_key(self):
        dets = [Detection(0, 1, 2, 2, 0.5), Detection(0, 0, 3, 3, 0.9), Detection(0, 0, 1, 1, 0.5)]
        ordered = sorted(dets, key=Detection.sort_key)
        self.assertEqual([d.confidence for d in ordered], [0.9, 0.5, 0.5])
        self.assertEqual(ordered[1].class_id, 0)

    def test_confmap_bounds(self):
        with self.assertRaises(DataError):
            ConfMap(np.full((1, 1, 2, 2), 1.5, dtype=np.float32))
        with self.assertRaises(ShapeError):
            ConfMap(np.zeros((1, 2, 2), dtype=np.float32))
        self.assertEqual(ConfMap(np.zeros((3, 4, 2, 2))).window, 4)


class TestTensorCodec(unittest.TestCase):

    def test_layout_is_little_endian_float32(self):
        payload = tensor_to_bytes(np.arange(6, dtype=np.float64).reshape(2, 3))
        self.assertEqual(payload[:4], b'RDT1')
        self.assertEqual(len(payload), 8 + 2 * 4 + 6 * 4)
        arr, end = tensor_from_bytes(payload)
        self.assertEqual(end, len(payload))
        self.assertEqual(arr.dtype, np.float32)
        np.testing.assert_array_equal(arr, np.arange(6).reshape(2, 3))

    def test_bad_magic(self):
        payload = bytearray(tensor_to_bytes(np.zeros(3)))
        payload[0:4] = b'XXXX'
        with self.assertRaises(DataError):
            tensor_from_bytes(bytes(payload))

    def test_truncated_payload(self):
        payload = tensor_to_bytes(np.zeros((4, 4)))
        for cut in (3, 10, len(payload) - 1):
            with self.assertRaises(DataError):
                tensor_from_bytes(payload[:cut])


class TestSequenceFiles(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_write_read_sequence(self):
        seq = make_sequence(scene=SceneLabel.DYNAMIC, seq_id='dyn_1')
        annotations = [ObjectAnnotation(0, 1, 3, 4), ObjectAnnotation(5, 2, 7, 0)]
        path = write_sequence(seq, os.path.join(self.tmp, 'dyn_1'), annotations)
        loaded, loaded_ann = read_sequence(path)
        self.assertIs(loaded.scene, SceneLabel.DYNAMIC)
        self.assertEqual(loaded.sequence_id, 'dyn_1')
        np.testing.assert_array_equal(loaded.to_array(), seq.to_array())
        self.assertEqual(loaded_ann, annotations)

    def test_unlabelled_sequence_has_no_annotations(self):
        seq = make_sequence(scene=None, seq_id='plain')
        loaded, annotations = read_sequence(write_sequence(seq, os.path.join(self.tmp, 'plain')))
        self.assertIsNone(loaded.scene)
        self.assertIsNone(annotations)

    def test_out_of_grid_annotation_rejected_on_write(self):
        seq = make_sequence(grid=8)
        with self.assertRaises(DataError):
            write_sequence(seq, os.path.join(self.tmp, 's'), [ObjectAnnotation(0, 0, 9, 0)])

    def test_trailing_bytes_rejected(self):
        path = write_tensor(os.path.join(self.tmp, 'x.rdt'), np.zeros(2))
        with open(path, 'ab') as f:
            f.write(b'\x00')
        with self.assertRaises(DataError):
            read_tensor(path)

    def test_load_dataset_natural_order(self):
        for name in ('seq_10', 'seq_2', 'seq_1'):
            write_sequence(make_sequence(seq_id=name), os.path.join(self.tmp, name))
        os.makedirs(os.path.join(self.tmp, 'not_a_sequence'))
        ids = [seq.sequence_id for seq, _ in load_dataset(self.tmp)]
        self.assertEqual(ids, ['seq_1', 'seq_2', 'seq_10'])

    def test_missing_root(self):
        with self.assertRaises(DataError):
            load_dataset(os.path.join(self.tmp, 'nowhere'))


class TestWindows(unittest.TestCase):

    def test_snippet_starts_cover_the_tail(self):
        self.assertEqual(snippet_starts(10, 4, 4), [0, 4, 6])
        self.assertEqual(snippet_starts(8, 4, 2), [0, 2, 4])
        self.assertEqual(snippet_starts(4, 4, 1), [0])

    def test_window_longer_than_sequence(self):
        with self.assertRaises(DataError):
            snippet_starts(3, 4, 1)

    def test_slice_snippets(self):
        seq = make_sequence(num_frames=10)
        snippets = slice_snippets(seq, 4, 4)
        self.assertEqual([s.start_frame for s in snippets], [0, 4, 6])
        for snip in snippets:
            self.assertIsInstance(snip, RadarSnippet)
            self.assertEqual(snip.data.shape, (2, 4, 8, 8))
            np.testing.assert_array_equal(snip.data[:, 0], seq.frames[snip.start_frame].data)

    def test_annotations_in_window_reindexes(self):
        anns = [ObjectAnnotation(t, 0, t, t) for t in range(6)]
        window = annotations_in_window(anns, 2, 3)
        self.assertEqual([a.frame_index for a in window], [0, 1, 2])
        self.assertEqual([a.range_idx for a in window], [2, 3, 4])

    def test_group_by_frame(self):
        frames = group_by_frame([ObjectAnnotation(2, 0, 1, 1), ObjectAnnotation(0, 0, 1, 1)], 3)
        self.assertEqual([len(f) for f in frames], [1, 0, 1])
        with self.assertRaises(DataError):
            group_by_frame([ObjectAnnotation(3, 0, 1, 1)], 3)


class TestSplit(unittest.TestCase):

    def test_stratified_and_deterministic(self):
        scenes = {f"s{i}": SceneLabel.STATIC for i in range(6)}
        scenes.update({f"d{i}": SceneLabel.DYNAMIC for i in range(3)})
        train, val = split_sequences(scenes, 0.25, seed=3)
        self.assertEqual(split_sequences(scenes, 0.25, seed=3), (train, val))
        self.assertEqual(sorted(train + val), sorted(scenes))
        self.assertFalse(set(train) & set(val))
        for scene in SceneLabel:
            self.assertTrue(any(scenes[i] is scene for i in train))
            self.assertTrue(any(scenes[i] is scene for i in val))

    def test_single_sequence_scene_stays_in_train(self):
        train, val = split_sequences({'a': SceneLabel.STATIC, 'b': SceneLabel.DYNAMIC}, 0.5, seed=0)
        self.assertEqual(train, ['a', 'b'])
        self.assertEqual(val, [])


if __name__ == '__main__':
    unittest.main()
