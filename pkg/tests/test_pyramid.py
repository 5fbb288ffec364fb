import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpcodec.errors import FpfBadMagic, FpfTruncated, GeometryError
from fpcodec.pyramid import (
    FeaturePyramid,
    layer_dims,
    pack_and_quantize_10bit,
    pad_pyramid,
    read_fpf,
    subsample_p6,
    synth_pyramid,
    unpack_dequantize,
    write_fpf,
)


class TestLayerDims:
    def test_stride_table_512(self):
        assert layer_dims(512, 512, 2) == (128, 128)
        assert layer_dims(512, 512, 3) == (64, 64)
        assert layer_dims(512, 512, 4) == (32, 32)
        assert layer_dims(512, 512, 5) == (16, 16)

    def test_p6_from_subsampling(self):
        assert layer_dims(512, 512, 6) == (8, 8)

    def test_ceil_arithmetic(self):
        # width 500 / 8 -> 63, height 300 / 8 -> 38
        assert layer_dims(500, 300, 3) == (38, 63)

    def test_level_out_of_range(self):
        with pytest.raises(GeometryError):
            layer_dims(512, 512, 1)
        with pytest.raises(GeometryError):
            layer_dims(512, 512, 7)

    def test_small_image_rejected(self):
        with pytest.raises(GeometryError):
            layer_dims(32, 512, 2)

    @given(
        w=st.integers(64, 2048),
        h=st.integers(64, 2048),
        lv=st.integers(2, 5),
    )
    def test_halving_chain(self, w, h, lv):
        h_i, w_i = layer_dims(w, h, lv)
        if lv < 5:
            assert layer_dims(w, h, lv + 1) == (-(-h_i // 2), -(-w_i // 2))


class TestPadding:
    def test_already_aligned(self):
        pyr = synth_pyramid(0, (512, 512), channels=2)
        padded = pad_pyramid(pyr)
        for lv in (2, 3, 4, 5):
            assert padded.dims(lv) == pyr.dims(lv)

    def test_pads_to_16(self):
        pyr = synth_pyramid(0, (252, 150), channels=2)
        assert pyr.dims(2) == (38, 63)
        padded = pad_pyramid(pyr)
        assert padded.dims(2) == (48, 64)
        assert padded.dims(3) == (24, 32)
        assert padded.dims(4) == (12, 16)
        assert padded.dims(5) == (6, 8)
        assert padded.original_dims[2] == (38, 63)

    def test_replicate_edges(self):
        pyr = synth_pyramid(0, (252, 150), channels=2)
        padded = pad_pyramid(pyr)
        p2, p2_pad = pyr.layers[2], padded.layers[2]
        assert np.array_equal(p2_pad[:, : p2.shape[1], : p2.shape[2]], p2)
        assert np.array_equal(p2_pad[:, -1, 0], p2[:, -1, 0])

    @given(w=st.integers(64, 700), h=st.integers(64, 700))
    @settings(max_examples=30, deadline=None)
    def test_halving_invariant_after_padding(self, w, h):
        pyr = synth_pyramid(1, (w, h), channels=1)
        padded = pad_pyramid(pyr)
        for lv in (2, 3, 4):
            h_i, w_i = padded.dims(lv)
            assert padded.dims(lv + 1) == ((h_i + 1) // 2, (w_i + 1) // 2)


class TestSubsampleP6:
    def test_dims(self):
        p5 = np.random.default_rng(0).normal(size=(3, 16, 16)).astype(np.float32)
        assert subsample_p6(p5).shape == (3, 8, 8)

    def test_constant_preserved(self):
        p5 = np.full((2, 10, 12), 3.5, dtype=np.float32)
        assert np.all(subsample_p6(p5) == 3.5)

    def test_picks_top_left(self):
        p5 = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        assert subsample_p6(p5).tolist() == [[[1.0]]]

    def test_odd_dims(self):
        p5 = np.zeros((1, 7, 9), dtype=np.float32)
        assert subsample_p6(p5).shape == (1, 4, 5)


class TestFpfIO:
    def test_round_trip(self, tmp_path, small_pyramid):
        path = tmp_path / "p.fpf"
        write_fpf(small_pyramid, path)
        back = read_fpf(path)
        assert back.channels == small_pyramid.channels
        assert back.image_width == small_pyramid.image_width
        for lv in (2, 3, 4, 5):
            assert np.array_equal(back.layers[lv], small_pyramid.layers[lv])

    def test_bad_magic(self, tmp_path, small_pyramid):
        path = tmp_path / "p.fpf"
        write_fpf(small_pyramid, path)
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(FpfBadMagic):
            read_fpf(path)

    def test_truncated(self, tmp_path, small_pyramid):
        path = tmp_path / "p.fpf"
        write_fpf(small_pyramid, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 5])
        with pytest.raises(FpfTruncated):
            read_fpf(path)

    def test_single_layer_byte_layout(self, tmp_path):
        # declared layout: 16-byte file header + 9-byte layer header
        # + channels*h*w*4 payload
        pyr = FeaturePyramid(
            layers={5: np.zeros((1, 2, 2), dtype=np.float32)},
            channels=1,
            image_width=64,
            image_height=64,
        )
        path = tmp_path / "one.fpf"
        write_fpf(pyr, path)
        assert path.stat().st_size == 16 + 9 + 16

    @given(seed=st.integers(0, 50), w=st.integers(64, 200), h=st.integers(64, 200))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_property(self, tmp_path_factory, seed, w, h):
        pyr = synth_pyramid(seed, (w, h), channels=2)
        path = tmp_path_factory.mktemp("fpf") / "r.fpf"
        write_fpf(pyr, path)
        back = read_fpf(path)
        for lv in (2, 3, 4, 5):
            assert np.array_equal(back.layers[lv], pyr.layers[lv])


class TestSynthPyramid:
    def test_deterministic(self):
        a = synth_pyramid(3, (128, 128), channels=2)
        b = synth_pyramid(3, (128, 128), channels=2)
        for lv in (2, 3, 4, 5):
            assert np.array_equal(a.layers[lv], b.layers[lv])

    def test_geometry_64(self):
        pyr = synth_pyramid(0, (64, 64), channels=2)
        assert pyr.dims(2) == (16, 16)
        assert pyr.dims(3) == (8, 8)
        assert pyr.dims(4) == (4, 4)
        assert pyr.dims(5) == (2, 2)

    def test_cross_layer_redundancy(self):
        pyr = synth_pyramid(11, (256, 256), channels=4)
        deci = pyr.layers[2][:, ::2, ::2]
        for ch in range(4):
            corr = np.corrcoef(deci[ch].ravel(), pyr.layers[3][ch].ravel())[0, 1]
            assert corr > 0.5


class TestPackQuantize:
    def test_midpoint_value(self):
        # x=0 in [-1, 1]: (0+1)/2*1023 = 511.5 rounds half-up to 512
        plane = np.array([[[-1.0, 0.0], [1.0, 0.5]]], dtype=np.float32)
        pyr = FeaturePyramid(
            layers={lv: plane for lv in (2, 3, 4, 5)},
            channels=1,
            image_width=64,
            image_height=64,
        )
        frame = pack_and_quantize_10bit(pyr)
        tile = frame.grid[:2, :2]
        assert tile[0, 0] == 0  # vmin
        assert tile[0, 1] == 512  # midpoint, round-half-up
        assert tile[1, 0] == 1023  # vmax

    def test_round_trip_error_bound(self):
        pyr = synth_pyramid(5, (128, 128), channels=8)
        frame = pack_and_quantize_10bit(pyr)
        back = unpack_dequantize(frame)
        bound = (frame.vmax - frame.vmin) / 2046 + 1e-6
        for lv in (2, 3, 4, 5):
            assert np.max(np.abs(back.layers[lv] - pyr.layers[lv])) <= bound

    def test_constant_input(self):
        plane = np.full((2, 4, 4), 2.0, dtype=np.float32)
        pyr = FeaturePyramid(
            layers={lv: plane.copy() for lv in (2, 3, 4, 5)},
            channels=2,
            image_width=64,
            image_height=64,
        )
        frame = pack_and_quantize_10bit(pyr)
        assert frame.constant_input
        assert np.all(frame.grid == 0)
        back = unpack_dequantize(frame)
        assert np.all(back.layers[2] == 2.0)

    def test_value_range(self, small_pyramid):
        frame = pack_and_quantize_10bit(small_pyramid)
        assert frame.grid.min() >= 0
        assert frame.grid.max() <= 1023
