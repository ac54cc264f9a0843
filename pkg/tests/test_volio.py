import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_exam
from voxelseg.volio import (DimensionMismatchError, ExamBundle, InvalidBundleError, MissingFileError,
                            NonFiniteError, NonMonotoneTimeError, SegmentationMask, Volume, crop, embed,
                            read_exam, read_mask, read_volume, write_exam, write_mask, write_volume)


def test_exam_round_trip_bit_exact(tmp_path, rng):
    exam = make_exam(rng)
    write_exam(exam, tmp_path / "e")
    back = read_exam(tmp_path / "e")
    assert back == exam
    assert len(back.t1c_series) == 3
    for name, v in exam.volumes().items():
        assert back.volumes()[name].data.tobytes() == v.data.tobytes()


def test_absent_t2_round_trips(tmp_path, rng):
    exam = make_exam(rng, t2=False)
    write_exam(exam, tmp_path / "e")
    meta = json.loads((tmp_path / "e" / "meta.json").read_text())
    assert meta["volumes"]["t2"] is None
    assert read_exam(tmp_path / "e").t2 is None


def test_meta_keys(tmp_path, rng):
    write_exam(make_exam(rng), tmp_path / "e")
    meta = json.loads((tmp_path / "e" / "meta.json").read_text())
    for k in ("dims", "spacing_mm", "volumes", "times_min", "scanner_id", "laterality", "exam_id"):
        assert k in meta


def test_raw_layout_little_endian_slice_major(tmp_path):
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    exam = ExamBundle(Volume(data), [(Volume(data), 1.0)])
    write_exam(exam, tmp_path / "e")
    raw = np.frombuffer((tmp_path / "e" / "t1.f32").read_bytes(), dtype="<f4")
    assert raw.tolist() == list(range(24))


def test_dimension_mismatch_error(tmp_path):
    exam = ExamBundle(Volume(np.ones((10, 20, 20))), [(Volume(np.ones((10, 20, 20))), 1.0)])
    write_exam(exam, tmp_path / "e")
    (tmp_path / "e" / "t1.f32").write_bytes(np.ones(4001, "<f4").tobytes())
    with pytest.raises(DimensionMismatchError) as exc:
        read_exam(tmp_path / "e")
    assert exc.value.code == "dimension_mismatch"


def test_non_monotone_times_rejected(tmp_path, rng):
    v = Volume(np.ones((2, 2, 2)))
    with pytest.raises(NonMonotoneTimeError):
        ExamBundle(v, [(v, 1.0), (v, 1.0)])
    write_exam(make_exam(rng, times=(1.0, 2.0)), tmp_path / "e")
    meta = json.loads((tmp_path / "e" / "meta.json").read_text())
    meta["times_min"] = [1.0, 1.0]
    (tmp_path / "e" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(NonMonotoneTimeError) as exc:
        read_exam(tmp_path / "e")
    assert exc.value.code == "non_monotone_time"


def test_missing_file_error(tmp_path, rng):
    with pytest.raises(MissingFileError):
        read_exam(tmp_path / "nothing")
    write_exam(make_exam(rng), tmp_path / "e")
    (tmp_path / "e" / "t1c_1.f32").unlink()
    with pytest.raises(MissingFileError) as exc:
        read_exam(tmp_path / "e")
    assert exc.value.code == "missing_file"


def test_error_codes_distinct():
    codes = {c.code for c in (MissingFileError, DimensionMismatchError, NonMonotoneTimeError, NonFiniteError)}
    assert len(codes) == 4


def test_nan_refused_on_write(tmp_path, rng):
    exam = make_exam(rng)
    exam.t1.data[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        write_exam(exam, tmp_path / "e")


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_loaders_reject_non_finite(tmp_path, rng, bad):
    write_exam(make_exam(rng), tmp_path / "e")
    raw = np.frombuffer((tmp_path / "e" / "t2.f32").read_bytes(), "<f4").copy()
    raw[5] = bad
    (tmp_path / "e" / "t2.f32").write_bytes(raw.tobytes())
    with pytest.raises(NonFiniteError):
        read_exam(tmp_path / "e")
    v = Volume(np.ones((2, 2, 2)))
    write_volume(v, tmp_path / "v")
    raw = np.full(8, bad, "<f4")
    (tmp_path / "v.f32").write_bytes(raw.tobytes())
    with pytest.raises(NonFiniteError):
        read_volume(tmp_path / "v")


def test_volume_invariants():
    with pytest.raises(InvalidBundleError):
        Volume(np.ones((2, 2)))
    with pytest.raises(InvalidBundleError):
        Volume(np.ones((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(NonFiniteError):
        Volume(np.full((2, 2, 2), np.nan))


def test_mask_invariants_and_round_trip(tmp_path):
    data = np.zeros((3, 4, 4), np.uint8)
    data[1, 1:3, 1:3] = 1
    m = SegmentationMask(data, 1, "radiologist:R2")
    assert m.rater_id == "R2"
    write_mask(m, tmp_path / "m")
    assert read_mask(tmp_path / "m") == m
    with pytest.raises(InvalidBundleError):
        SegmentationMask(data * 2)
    off = data.copy()
    off[0, 0, 0] = 1
    with pytest.raises(InvalidBundleError):
        SegmentationMask(off, 1)


def test_crop_full_extent_and_first_voxel(rng):
    v = Volume(rng.random((3, 4, 5)))
    assert crop(v, (0, 0, 0), v.dims) == v
    assert crop(v, (0, 0, 0), (1, 1, 1)).data[0, 0, 0] == v.data[0, 0, 0]
    with pytest.raises(IndexError):
        crop(v, (2, 0, 0), (2, 1, 1))


def test_crop_then_embed_restores_region(rng):
    v = Volume(rng.random((5, 6, 7)))
    patch = crop(v, (1, 2, 3), (2, 3, 4))
    blank = Volume(np.zeros(v.dims))
    out = embed(blank, patch, (1, 2, 3))
    assert np.array_equal(out.data[1:3, 2:5, 3:7], v.data[1:3, 2:5, 3:7])
    assert out.data.sum() == pytest.approx(v.data[1:3, 2:5, 3:7].sum(), rel=1e-6)


@given(st.data())
def test_crop_composition(data):
    dims = data.draw(st.tuples(*[st.integers(2, 8)] * 3))
    a = tuple(data.draw(st.integers(0, d - 1)) for d in dims)
    s = tuple(data.draw(st.integers(1, d - o)) for d, o in zip(dims, a))
    b = tuple(data.draw(st.integers(0, q - 1)) for q in s)
    t = tuple(data.draw(st.integers(1, q - o)) for q, o in zip(s, b))
    v = Volume(np.arange(np.prod(dims), dtype=np.float32).reshape(dims))
    assert crop(crop(v, a, s), b, t) == crop(v, tuple(x + y for x, y in zip(a, b)), t)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.booleans())
def test_round_trip_property(seed, n_posts, with_t2):
    import tempfile

    rng = np.random.default_rng(seed)
    exam = make_exam(rng, dims=(2, 3, 4), times=tuple(1.0 + 1.5 * i for i in range(n_posts)), t2=with_t2)
    with tempfile.TemporaryDirectory() as d:
        write_exam(exam, d)
        assert read_exam(d) == exam
