"""
Test suite for seqcore.py
"""
import json
import struct

import numpy as np
import pytest
from PIL import Image

from app.errors import ConfigError, FormatError
from app.seqcore import (
    BBox,
    InspectionSequence,
    RoiLabels,
    decode_pgm,
    encode_pgm,
    extract_roi_stats,
    labels_from_dict,
    normalize_to_uint8,
    read_image,
    read_labels,
    read_sequence,
    standardize,
    write_image,
    write_labels,
    write_pgm,
    write_sequence,
)


def _labels():
    return RoiLabels(BBox(10, 10, 15, 15), BBox(0, 0, 6, 6))


def test_sequence_round_trip_is_bit_exact(tmp_path, random_sequence):
    """Writing then reading a sequence preserves every sample bit"""
    path = tmp_path / 'a.airt'
    write_sequence(random_sequence, path)
    back = read_sequence(path)
    assert back.frames.tobytes() == random_sequence.frames.tobytes()
    assert back.frame_rate_hz == random_sequence.frame_rate_hz
    assert back.meta['source'] == 'a.airt'


def test_smallest_sequence_file_size(tmp_path):
    """A 2x1x1 sequence is a 24-byte header plus two float32 samples"""
    seq = InspectionSequence(np.array([[[1.0]], [[2.0]]], dtype=np.float32), frame_rate_hz=5.0)
    path = tmp_path / 'min.airt'
    write_sequence(seq, path)
    assert path.stat().st_size == 32
    assert read_sequence(path).frames.ravel().tolist() == [1.0, 2.0]


def test_bad_magic_reports_offset_zero(tmp_path, random_sequence):
    """Corrupt magic bytes fail at byte offset 0"""
    path = tmp_path / 'bad.airt'
    write_sequence(random_sequence, path)
    data = bytearray(path.read_bytes())
    data[0:4] = b'XXXX'
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError) as exc:
        read_sequence(path)
    assert exc.value.offset == 0
    assert exc.value.exit_code == 2


def test_truncated_and_trailing_payload(tmp_path, random_sequence):
    """Missing or extra payload bytes are format errors"""
    path = tmp_path / 'cut.airt'
    write_sequence(random_sequence, path)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(FormatError, match='truncated'):
        read_sequence(path)
    path.write_bytes(data + b'\0')
    with pytest.raises(FormatError, match='trailing'):
        read_sequence(path)


def test_non_finite_sample_offset(tmp_path):
    """A NaN sample is reported at its own byte offset"""
    header = struct.pack('<4sHHIIIf', b'AIRT', 1, 0, 2, 1, 2, 10.0)
    samples = np.array([0.0, 1.0, np.nan, 2.0], dtype='<f4')
    path = tmp_path / 'nan.airt'
    path.write_bytes(header + samples.tobytes())
    with pytest.raises(FormatError) as exc:
        read_sequence(path)
    assert exc.value.offset == 24 + 4 * 2


def test_header_field_offsets(tmp_path):
    """Header validation errors point at the offending field"""
    path = tmp_path / 'h.airt'
    cases = [
        (struct.pack('<4sHHIIIf', b'AIRT', 9, 0, 2, 1, 1, 10.0), 4),
        (struct.pack('<4sHHIIIf', b'AIRT', 1, 0, 1, 1, 1, 10.0), 8),
        (struct.pack('<4sHHIIIf', b'AIRT', 1, 0, 2, 0, 1, 10.0), 12),
        (struct.pack('<4sHHIIIf', b'AIRT', 1, 0, 2, 1, 0, 10.0), 16),
        (struct.pack('<4sHHIIIf', b'AIRT', 1, 0, 2, 1, 1, 0.0), 20),
    ]
    for header, offset in cases:
        path.write_bytes(header + b'\0' * 8)
        with pytest.raises(FormatError) as exc:
            read_sequence(path)
        assert exc.value.offset == offset


def test_sequence_invariants():
    """Fewer than two frames or non-finite samples are rejected"""
    with pytest.raises(ValueError):
        InspectionSequence(np.zeros((1, 2, 2)), frame_rate_hz=10.0)
    frames = np.zeros((3, 2, 2))
    frames[1, 0, 0] = np.inf
    with pytest.raises(ValueError):
        InspectionSequence(frames, frame_rate_hz=10.0)


def test_standardize_removes_pixel_means(random_sequence):
    """Standardized signals have zero temporal mean and restore the frames"""
    std = standardize(random_sequence)
    assert std.signals.shape == (30, 12)
    np.testing.assert_allclose(std.signals.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(std.restore(), random_sequence.frames, atol=1e-6)


def test_standardize_raster_order():
    """Pixel n of the standardized matrix is (y, x) with n = y * n_x + x"""
    frames = np.zeros((2, 2, 3), dtype=np.float32)
    frames[1, 1, 2] = 4.0
    std = standardize(InspectionSequence(frames, frame_rate_hz=1.0))
    assert std.signals[1 * 3 + 2].tolist() == [-2.0, 2.0]


def test_standardize_is_idempotent(random_sequence):
    """Standardizing already centred frames changes nothing"""
    first = standardize(random_sequence)
    again = standardize(InspectionSequence(first.signals.T.reshape(12, 6, 5), frame_rate_hz=10.0))
    np.testing.assert_allclose(again.signals, first.signals, atol=1e-6)
    np.testing.assert_allclose(again.pixel_means, 0.0, atol=1e-6)


def test_standardize_constant_sequence():
    """A constant 7.0 sequence maps to zeros with mean 7.0 and restores exactly"""
    std = standardize(InspectionSequence(np.full((4, 3, 2), 7.0), frame_rate_hz=5.0))
    assert np.all(std.signals == 0.0)
    assert np.all(std.pixel_means == 7.0)
    assert np.all(std.restore() == 7.0)


def test_bbox_geometry():
    """Width, height, area and centre of a half-open box"""
    box = BBox(2, 4, 12, 8)
    assert (box.width, box.height, box.area) == (10, 4, 40)
    assert box.center == (7.0, 6.0)
    with pytest.raises(ValueError):
        BBox(3, 0, 1, 1)


def test_pixel_slices_use_pixel_centres():
    """Fractional boxes include exactly the pixels whose centres they contain"""
    rows, cols = BBox(0.4, 0.0, 2.6, 1.0).pixel_slices((4, 4))
    assert (cols.start, cols.stop) == (0, 3)
    assert (rows.start, rows.stop) == (0, 1)
    assert BBox(0.6, 0.6, 1.4, 1.4).pixel_slices((4, 4)) is None


def test_clamp_to_image():
    """Clamping keeps a box inside the image"""
    box = BBox(-3, 2, 40, 50).clamp(20, 30)
    assert box.to_list() == [0.0, 2.0, 30.0, 20.0]


def test_roi_stats_population_std():
    """ROI statistics use the population standard deviation"""
    img = np.zeros((4, 4))
    img[0, 0:2] = [1.0, 3.0]
    mean, std, n = extract_roi_stats(img, BBox(0, 0, 2, 1))
    assert (mean, std, n) == (2.0, 1.0, 2)
    with pytest.raises(ValueError):
        extract_roi_stats(img, BBox(10, 10, 12, 12))


def test_labels_round_trip(tmp_path):
    """Labels written to JSON read back equal"""
    path = tmp_path / 'x.labels.json'
    write_labels(_labels(), path)
    assert read_labels(path) == _labels()
    assert list(json.loads(path.read_text())) == ['defect_box', 'sound_box', 'source']


def test_labels_invariants():
    """Overlapping regions and small sound regions are rejected"""
    with pytest.raises(ValueError, match='overlap'):
        RoiLabels(BBox(0, 0, 10, 10), BBox(5, 5, 15, 15))
    with pytest.raises(ValueError, match='< 25'):
        RoiLabels(BBox(10, 10, 15, 15), BBox(0, 0, 4, 4))


def test_labels_schema_errors_carry_pointer():
    """Schema problems in labels name the JSON pointer"""
    with pytest.raises(ConfigError) as exc:
        labels_from_dict({'defect_box': [0, 0, 1, 'a'], 'sound_box': [0, 0, 5, 5]})
    assert exc.value.pointer == '/defect_box/3'
    with pytest.raises(ConfigError) as exc:
        labels_from_dict({'defect_box': [0, 0, 1, 1]})
    assert exc.value.pointer == '/sound_box'
    with pytest.raises(ConfigError) as exc:
        labels_from_dict({'defect_box': [0, 0, 1, 1], 'sound_box': [2, 2, 8, 8], 'extra': 1})
    assert exc.value.pointer == '/extra'


def test_image_sidecar_round_trip(tmp_path):
    """The .aimg sidecar keeps full float32 precision"""
    img = np.random.default_rng(1).normal(size=(7, 9)).astype(np.float32)
    path = tmp_path / 'i.aimg'
    write_image(img, path)
    assert read_image(path).tobytes() == img.tobytes()
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_image(path)


def test_pgm_min_max_normalization():
    """PGM export maps min to 0, max to 255 and constant images to 128"""
    img = np.array([[-1.0, 0.0], [1.0, 3.0]])
    pixels = normalize_to_uint8(img)
    assert pixels.min() == 0 and pixels.max() == 255
    assert np.all(normalize_to_uint8(np.full((3, 3), 7.0)) == 128)
    decoded = decode_pgm(encode_pgm(img))
    assert decoded.tolist() == pixels.tolist()


def test_pgm_header_comments_and_errors():
    """Comments in the PGM header are skipped, other formats rejected"""
    data = b'P5\n# made by hand\n2 1\n255\n' + bytes([5, 6])
    assert decode_pgm(data).tolist() == [[5, 6]]
    with pytest.raises(FormatError):
        decode_pgm(b'P2\n2 1\n255\n5 6')
    with pytest.raises(FormatError):
        decode_pgm(b'P5\n2 2\n255\n' + bytes([1]))


def test_pgm_file_is_binary_graymap(tmp_path):
    """write_pgm produces a P5 file that Pillow reads back as 8-bit grayscale"""
    img = np.arange(12, dtype=np.float64).reshape(3, 4)
    path = tmp_path / 'img.pgm'
    write_pgm(img, path)
    assert path.read_bytes().startswith(b'P5')
    with Image.open(path) as im:
        assert im.mode == 'L' and im.size == (4, 3)
        assert np.array(im).tolist() == normalize_to_uint8(img).tolist()
    assert decode_pgm(path.read_bytes()).tolist() == normalize_to_uint8(img).tolist()


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
