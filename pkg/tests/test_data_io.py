import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import golden_png16
from vimdisp import data_io
from vimdisp.data_io import ManifestEntry, gen_synthetic, half_regions
from vimdisp.errors import FormatError, ValidationError
from vimdisp.metrics import DisparityMap


# --- synthetic pairs ---------------------------------------------------------


def test_constant_shift_pair():
    s = gen_synthetic(64, 32, [(8, None)], seed=3)
    assert s.left.shape == s.right.shape == (32, 64, 3)
    assert (s.gt.values == 8).all()
    # the first 8 columns have no match inside the right frame
    assert not s.gt.valid[:, :8].any()
    assert s.gt.valid[:, 8:].all()
    # integer shift: left(x) == right(x - 8) exactly
    np.testing.assert_array_equal(s.left[:, 8:], s.right[:, :-8])


def test_zero_shift_pair_is_identical():
    s = gen_synthetic(40, 16, [(0, None)], seed=1)
    np.testing.assert_array_equal(s.left, s.right)
    assert s.gt.valid.all()


def test_two_plane_occlusion_band():
    lh, rh = half_regions(64, 16)
    s = gen_synthetic(64, 16, [(4, lh), (12, rh)], seed=0)
    assert (s.gt.values[:, :32] == 4).all() and (s.gt.values[:, 32:] == 12).all()
    # the near plane (12) covers right columns 20..51; far left-half pixels 24..31 would land there
    assert not s.gt.valid[:, 24:32].any()
    assert s.gt.valid[:, 4:24].all()
    assert s.gt.valid[:, 32:].all()
    band = (~s.gt.valid[0, 4:]).sum()
    assert band == 12 - 4


@settings(max_examples=20, deadline=None)
@given(d=st.integers(0, 20), seed=st.integers(0, 1000))
def test_valid_pixels_match_photometrically(d, seed):
    s = gen_synthetic(48, 8, [(d, None)], seed=seed)
    ys, xs = np.nonzero(s.gt.valid)
    np.testing.assert_array_equal(s.left[ys, xs], s.right[ys, xs - d])


def test_generator_determinism_and_errors():
    a = gen_synthetic(32, 8, [(3, None)], seed=7)
    b = gen_synthetic(32, 8, [(3, None)], seed=7)
    np.testing.assert_array_equal(a.left, b.left)
    with pytest.raises(ValidationError):
        gen_synthetic(32, 8, [(-1, None)])
    with pytest.raises(ValidationError):
        gen_synthetic(32, 8, [(32, None)])
    lh, _ = half_regions(32, 8)
    with pytest.raises(ValidationError):
        gen_synthetic(32, 8, [(3, lh)])


def test_desk_suite_layout():
    suite = data_io.desk_suite()
    assert len(suite) == 8
    assert all(s.left.shape == (64, 128, 3) for s in suite)
    assert [float(np.unique(s.gt.values)[0]) for s in suite[:4]] == [4, 8, 16, 12]


# --- KITTI 16-bit PNG --------------------------------------------------------


def test_kitti_golden_read(tmp_path):
    path = tmp_path / "golden.png"
    path.write_bytes(golden_png16([[256, 0, 512], [65535, 1, 384]]))
    d = data_io.load_kitti_disparity(path)
    np.testing.assert_array_equal(d.values, [[1.0, 0.0, 2.0], [65535 / 256, 1 / 256, 1.5]])
    np.testing.assert_array_equal(d.valid, [[True, False, True], [True, True, True]])


def test_kitti_write_then_read_matches_golden_pixels(tmp_path):
    stored = [[256, 0, 512], [65535, 1, 384]]
    golden = tmp_path / "golden.png"
    golden.write_bytes(golden_png16(stored))
    dmap = data_io.load_kitti_disparity(golden)
    ours = tmp_path / "ours.png"
    data_io.write_kitti_disparity(ours, dmap)
    again = data_io.load_kitti_disparity(ours)
    np.testing.assert_array_equal(again.values, dmap.values)
    np.testing.assert_array_equal(again.valid, dmap.valid)
    assert data_io._png_header(ours)[2:] == (16, 0)


def test_kitti_valid_zero_disparity_stays_valid(tmp_path):
    path = tmp_path / "z.png"
    data_io.write_kitti_disparity(path, DisparityMap(np.zeros((2, 2)), np.array([[True, False], [True, True]])))
    back = data_io.load_kitti_disparity(path)
    np.testing.assert_array_equal(back.valid, [[True, False], [True, True]])


def test_kitti_rejects_other_pngs(tmp_path):
    path = tmp_path / "rgb.png"
    data_io.save_image(path, np.zeros((4, 4, 3)))
    with pytest.raises(FormatError):
        data_io.load_kitti_disparity(path)
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png at all, not a png at all")
    with pytest.raises(FormatError):
        data_io.load_kitti_disparity(bad)


# --- PFM ---------------------------------------------------------------------


GOLDEN_PF_1x1 = b"Pf\n1 1\n-1\n" + struct.pack("<f", 2.5)
# 2x2 colour, big-endian; rows stored bottom-up
GOLDEN_PF_RGB = b"PF\n2 2\n1.0\n" + struct.pack(">12f", *range(12))


def test_pfm_golden_grey(tmp_path):
    path = tmp_path / "a.pfm"
    path.write_bytes(GOLDEN_PF_1x1)
    arr = data_io.load_pfm(path)
    assert arr.shape == (1, 1) and arr.dtype == np.float32 and arr[0, 0] == 2.5
    out = tmp_path / "b.pfm"
    data_io.write_pfm(out, arr)
    assert out.read_bytes() == GOLDEN_PF_1x1


def test_pfm_golden_colour_big_endian_bottom_up(tmp_path):
    path = tmp_path / "c.pfm"
    path.write_bytes(GOLDEN_PF_RGB)
    arr = data_io.load_pfm(path)
    assert arr.shape == (2, 2, 3)
    # the first stored row is the bottom image row
    np.testing.assert_array_equal(arr[1].ravel(), np.arange(6))
    np.testing.assert_array_equal(arr[0].ravel(), np.arange(6, 12))
    out = tmp_path / "d.pfm"
    data_io.write_pfm(out, arr, little_endian=False)
    assert out.read_bytes() == b"PF\n2 2\n1\n" + struct.pack(">12f", *range(12))


def test_pfm_scale_magnitude_applies(tmp_path):
    path = tmp_path / "s.pfm"
    path.write_bytes(b"Pf\n2 1\n-0.5\n" + struct.pack("<2f", 4.0, 8.0))
    np.testing.assert_array_equal(data_io.load_pfm(path), [[2.0, 4.0]])


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), rgb=st.booleans(), little=st.booleans(), seed=st.integers(0, 99))
def test_pfm_round_trip_bit_exact(tmp_path_factory, h, w, rgb, little, seed):
    shape = (h, w, 3) if rgb else (h, w)
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    data_io.write_pfm(path, arr, little_endian=little)
    back = data_io.load_pfm(path)
    assert back.tobytes() == arr.tobytes()


@pytest.mark.parametrize(
    "payload, offset",
    [
        (b"P5\n1 1\n-1\n" + b"\x00" * 4, 0),
        (b"Pf\nx 1\n-1\n" + b"\x00" * 4, 3),
        (b"Pf\n1 1\nzz\n" + b"\x00" * 4, 7),
        (b"Pf\n2 2\n-1\n" + b"\x00" * 4, 14),
    ],
)
def test_pfm_errors_report_offsets(tmp_path, payload, offset):
    path = tmp_path / "bad.pfm"
    path.write_bytes(payload)
    with pytest.raises(FormatError, match=f"byte offset {offset}"):
        data_io.load_pfm(path)


def test_load_disparity_dispatch(tmp_path):
    with pytest.raises(FormatError):
        data_io.load_disparity(tmp_path / "x.tiff")


# --- manifests ---------------------------------------------------------------


def _make_dataset(root, n=5, corrupt=None):
    entries = []
    for i in range(n):
        s = gen_synthetic(16, 8, [(2, None)], seed=i)
        left, right, gt = root / f"l{i}.png", root / f"r{i}.png", root / f"g{i}.pfm"
        data_io.save_image(left, s.left)
        data_io.save_image(right, s.right)
        data_io.write_pfm(gt, np.where(s.gt.valid, s.gt.values, np.inf))
        entries.append(ManifestEntry(left.name, right.name, gt.name))
    if corrupt is not None:
        (root / f"l{corrupt}.png").write_bytes(b"garbage")
    data_io.write_manifest(root / "set.txt", entries)
    return data_io.read_manifest(root / "set.txt")


def test_manifest_batches(tmp_path):
    m = _make_dataset(tmp_path)
    assert m.name == "set" and len(m.entries) == 5
    batches = list(data_io.iterate(m, batch=2))
    assert [len(b) for b in batches] == [2, 2, 1]
    first = batches[0][0]
    assert first.gt is not None and not first.gt.valid[:, :2].any()


def test_manifest_seeded_order(tmp_path):
    m = _make_dataset(tmp_path)
    ids = lambda seed: [s.meta["id"] for b in data_io.iterate(m, batch=1, seed=seed) for s in b]
    assert ids(3) == ids(3)
    assert sorted(ids(3)) == [f"l{i}" for i in range(5)]
    assert ids(None) == [f"l{i}" for i in range(5)]


def test_manifest_lenient_and_strict(tmp_path):
    m = _make_dataset(tmp_path, corrupt=2)
    stream = data_io.iterate(m, batch=2)
    samples = [s for b in stream for s in b]
    assert len(samples) == 4
    assert [e[0] for e in stream.errors] == ["l2"]
    with pytest.raises(FormatError):
        list(data_io.iterate(m, batch=2, strict=True))


def test_manifest_missing_gt_and_bad_lines(tmp_path):
    (tmp_path / "m.txt").write_text("# comment\n\na.png\tb.png\t-\n")
    m = data_io.read_manifest(tmp_path / "m.txt")
    assert m.entries[0].gt is None
    (tmp_path / "bad.txt").write_text("a.png b.png\n")
    with pytest.raises(FormatError):
        data_io.read_manifest(tmp_path / "bad.txt")
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(ValidationError):
        data_io.read_manifest(tmp_path / "empty.txt")
