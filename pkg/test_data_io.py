#!/usr/bin/env python3
"""
Test sequence, label-map, flow and checkpoint files and the overlay renderer
"""
import os
import tempfile

import numpy as np

from data import PALETTE
from data_io import (
    load_checkpoint, load_label_maps, load_sequence, make_sequence, palette_color, read_flow, read_image,
    render_overlay, save_checkpoint, save_label_maps, save_sequence, tubes_from_label_maps, write_flow,
    write_image,
)
from errors import ContractViolation, LoadError
from linker import MaskTube
from synthetic_data import render_synthetic, spec_from_preset
from tensor_core import ParamStore


def _write_sequence(directory, frames, masks=None):
    os.makedirs(os.path.join(directory, 'frames'), exist_ok=True)
    for index, rgb in enumerate(frames, start=1):
        write_image(os.path.join(directory, 'frames', f'{index:05d}.ppm'), rgb)
    if masks is not None:
        os.makedirs(os.path.join(directory, 'masks'), exist_ok=True)
        for index, labels in enumerate(masks, start=1):
            write_image(os.path.join(directory, 'masks', f'{index:05d}.pgm'), labels)


def _rgb(height, width, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(height, width, 3)).astype(np.uint8)


def _expect_load_error(directory, needle):
    try:
        load_sequence(directory)
        assert False, f"{directory} must not load"
    except LoadError as e:
        assert needle in str(e), str(e)


def test_sequence_round_trip_is_bit_exact():
    seq = render_synthetic(spec_from_preset('two_objects', seed=3))
    with tempfile.TemporaryDirectory() as tmp:
        target = os.path.join(tmp, seq.name)
        save_sequence(seq, target)
        loaded = load_sequence(target)
    assert loaded.name == seq.name
    assert loaded.num_frames == seq.num_frames
    assert all(np.array_equal(a, b) for a, b in zip(loaded.frames, seq.frames))
    assert all(np.array_equal(a, b) for a, b in zip(loaded.masks, seq.masks))
    assert sorted(loaded.flows) == sorted(seq.flows)
    assert all(np.array_equal(loaded.flows[k], seq.flows[k]) for k in seq.flows)
    assert loaded.identities() == [1, 2]


def test_padding_to_multiples_of_eight():
    with tempfile.TemporaryDirectory() as tmp:
        labels = np.zeros((60, 60), dtype=np.uint8)
        labels[10:20, 10:20] = 1
        _write_sequence(tmp, [_rgb(60, 60, s) for s in range(2)], [labels, labels])
        seq = load_sequence(tmp)
    assert (seq.height, seq.width) == (64, 64)
    assert seq.original_size == (60, 60)
    assert not seq.masks[0][60:].any() and not seq.frames[0][:, :, 60:].any()
    assert make_sequence('tiny', [np.zeros((3, 10, 12))]).frames[0].shape == (3, 16, 16)


def test_load_errors_are_descriptive():
    with tempfile.TemporaryDirectory() as tmp:
        _expect_load_error(os.path.join(tmp, 'nowhere'), 'Missing frames directory')

        gap = os.path.join(tmp, 'gap')
        labels = np.zeros((16, 16), dtype=np.uint8)
        labels[0:4, 0:4] = 1
        labels[8:12, 8:12] = 3
        _write_sequence(gap, [_rgb(16, 16)] * 2, [labels, labels])
        _expect_load_error(gap, 'missing [2]')

        sizes = os.path.join(tmp, 'sizes')
        _write_sequence(sizes, [_rgb(16, 16), _rgb(24, 16)])
        _expect_load_error(sizes, 'Frame 2')

        numbering = os.path.join(tmp, 'numbering')
        _write_sequence(numbering, [_rgb(16, 16)] * 3)
        os.remove(os.path.join(numbering, 'frames', '00002.ppm'))
        _expect_load_error(numbering, 'missing [2]')


def test_flow_files():
    vectors = np.random.default_rng(0).normal(size=(2, 8, 16)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, '00001_fw.dyfl')
        write_flow(path, vectors)
        assert np.array_equal(read_flow(path), vectors)
        with open(path, 'r+b') as f:
            f.write(b'NOPE')
        try:
            read_flow(path)
            assert False, "bad magic must fail"
        except LoadError:
            pass


def test_checkpoint_round_trip_and_validation():
    store = ParamStore()
    rng = np.random.default_rng(0)
    store.add_conv('feat.block0', 4, 3, 3, rng)
    store.add('reid.embed.fc.w', rng.normal(size=(4, 8)))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'model.dyck')
        save_checkpoint(store, path)
        with open(path, 'rb') as f:
            assert f.read(4) == b'DYCK'
        loaded = load_checkpoint(path, expected=store)
        assert loaded.keys() == store.keys()
        assert all(np.array_equal(loaded[k].data, store[k].data) for k in store.keys())

        other = ParamStore()
        other.add_conv('feat.block0', 8, 3, 3, rng)
        other.add('reid.embed.fc.w', np.zeros((8, 8)))
        try:
            load_checkpoint(path, expected=other)
            assert False, "shape mismatch must fail"
        except LoadError as e:
            assert 'feat.block0.b' in str(e)

        with open(path, 'ab') as f:
            f.write(b'\x00')
        try:
            load_checkpoint(path)
            assert False, "trailing bytes must fail"
        except LoadError:
            pass
        try:
            load_checkpoint(os.path.join(tmp, 'missing.dyck'))
            assert False, "missing checkpoint must fail"
        except LoadError:
            pass


def test_label_maps_round_trip_and_tubes():
    maps = {i: np.zeros((16, 16), dtype=np.uint8) for i in (1, 2)}
    maps[1][2:6, 2:6] = 1
    maps[2][2:6, 2:6] = 2
    maps[2][8:10, 8:10] = 1
    with tempfile.TemporaryDirectory() as tmp:
        save_label_maps(maps, tmp, (12, 14))
        loaded = load_label_maps(tmp)
    assert sorted(loaded) == [1, 2]
    assert loaded[1].shape == (12, 14)
    assert np.array_equal(loaded[2], maps[2][:12, :14])
    tubes = tubes_from_label_maps(loaded)
    assert [t.identity for t in tubes] == [1, 2]
    assert tubes[0].frames == [1, 2] and tubes[1].frames == [2]


def test_overlay_rendering():
    with tempfile.TemporaryDirectory() as tmp:
        frames = [_rgb(20, 20, s) for s in range(2)]
        _write_sequence(os.path.join(tmp, 'seq'), frames)
        seq = load_sequence(os.path.join(tmp, 'seq'))
        plain = os.path.join(tmp, 'plain')
        render_overlay(seq, [], plain)
        for index, rgb in enumerate(frames, start=1):
            out = read_image(os.path.join(plain, f'{index:05d}.ppm'), 'RGB')
            assert out.shape == (20, 20, 3)
            assert np.array_equal(out, rgb)

        mask = np.zeros((20, 20), dtype=bool)
        mask[4:8, 4:8] = True
        tinted = os.path.join(tmp, 'tinted')
        render_overlay(seq, [MaskTube(identity=1, masks={2: mask}, scores={2: 1.0})], tinted)
        out = read_image(os.path.join(tinted, '00002.ppm'), 'RGB')
        expected = np.rint(0.5 * frames[1][5, 5].astype(np.float64) + 0.5 * np.array(PALETTE[0]))
        assert np.array_equal(out[5, 5], expected.astype(np.uint8))
        assert np.array_equal(out[0, 0], frames[1][0, 0])

        try:
            render_overlay(seq, [MaskTube(identity=1, masks={5: mask}, scores={5: 1.0})], tinted)
            assert False, "frames outside the sequence must be rejected"
        except ContractViolation:
            pass


def test_palette_is_fixed():
    assert palette_color(1) == (230, 25, 75)
    assert palette_color(11) == palette_color(1)


def run_all():
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    for name, fn in tests:
        fn()
        print(f"✅ {name}")
    print(f"\n✅ {len(tests)} data I/O tests passed!")


if __name__ == "__main__":
    run_all()
