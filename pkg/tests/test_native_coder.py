"""Cross-checks of the native range coder against the pure-Python
reference coder. The whole module is skipped with an explicit status
when the library has not been built (``cargo build --release`` in
``rangecoder/``)."""

import numpy as np
import pytest
import torch

from fpcodec.coder import NativeBackend, PythonBackend, _native_lib_path, native_available
from fpcodec.entropy import CdfTable, quantize_pmf
from fpcodec.errors import CoderError
from fpcodec.pyramid import synth_pyramid
from fpcodec import refcoder

pytestmark = pytest.mark.skipif(
    not native_available(), reason="coder not built"
)


@pytest.fixture(scope="module")
def native():
    return NativeBackend(_native_lib_path())


def _random_tables(rng, n_tables):
    tables = []
    for _ in range(n_tables):
        n = int(rng.integers(2, 64))
        pmf = rng.dirichlet(np.ones(n) * 0.5)
        offset = int(rng.integers(-50, 50))
        tables.append(CdfTable(offset=offset, cdf=quantize_pmf(pmf).astype(np.uint32)))
    return tables


class TestOracleEquality:
    def test_500_streams_byte_identical(self, native):
        rng = np.random.default_rng(0)
        python = PythonBackend()
        for _ in range(500):
            tables = _random_tables(rng, int(rng.integers(1, 5)))
            count = int(rng.integers(0, 257))
            indexes = rng.integers(0, len(tables), size=count)
            symbols = [
                int(tables[i].offset + rng.integers(0, tables[i].num_symbols))
                for i in indexes
            ]
            expected = python.encode(symbols, indexes, tables)
            got = native.encode(symbols, indexes, tables)
            assert got == expected
            back = native.decode(got, indexes, count, tables)
            assert list(back) == symbols

    def test_stream_decoder_matches_reference(self, native):
        rng = np.random.default_rng(1)
        tables = _random_tables(rng, 3)
        count = 200
        indexes = rng.integers(0, 3, size=count)
        symbols = [
            int(tables[i].offset + rng.integers(0, tables[i].num_symbols))
            for i in indexes
        ]
        data = native.encode(symbols, indexes, tables)
        ref = refcoder.StreamDecoder(data, tables)
        dec = native.stream_decoder(data, tables)
        for i in indexes:
            assert dec.next_symbol(int(i)) == ref.next_symbol(int(i))
        dec.close()


class TestRateBound:
    def test_length_within_5pct_plus_64_bytes(self, native):
        rng = np.random.default_rng(2)
        tables = _random_tables(rng, 1)
        t = tables[0]
        count = 20000
        ks = rng.integers(0, t.num_symbols, size=count)
        symbols = (ks + t.offset).astype(int).tolist()
        indexes = np.zeros(count, dtype=np.uint32)
        pmf = np.diff(t.cdf.astype(np.float64)) / float(t.cdf[-1])
        ideal_bits = float(-np.log2(pmf[ks]).sum())
        data = native.encode(symbols, indexes, tables)
        assert len(data) <= ideal_bits / 8 * 1.05 + 64


class TestErrors:
    def test_out_of_support_symbol(self, native):
        rng = np.random.default_rng(3)
        tables = _random_tables(rng, 1)
        bad = tables[0].offset + tables[0].num_symbols
        with pytest.raises(CoderError):
            native.encode([bad], [0], tables)

    def test_truncated_payload(self, native):
        rng = np.random.default_rng(4)
        tables = _random_tables(rng, 1)
        t = tables[0]
        count = 5000
        symbols = (rng.integers(0, t.num_symbols, size=count) + t.offset).astype(int).tolist()
        indexes = np.zeros(count, dtype=np.uint32)
        data = native.encode(symbols, indexes, tables)
        cut = data[: len(data) // 2]
        try:
            back = native.decode(cut, indexes, count, tables)
        except CoderError:
            return
        assert list(back) != symbols

    def test_invalid_tables_rejected(self, native):
        bad = [CdfTable(offset=0, cdf=np.array([0, 100, 100, 65536], dtype=np.uint32))]
        with pytest.raises(CoderError):
            native.encode([0], [0], bad)


class TestCodecIntegration:
    @pytest.mark.parametrize("cm", [True, False])
    def test_full_round_trip(self, cm, native, tiny_codec, tiny_codec_nocm, tiny_tables, tiny_tables_nocm):
        codec = tiny_codec if cm else tiny_codec_nocm
        tables = tiny_tables if cm else tiny_tables_nocm
        pyr = synth_pyramid(11, (192, 128), channels=4)
        data, _ = codec.compress(pyr, tables, native)
        recon, dec_info = codec.decompress(data, tables, native)
        free = codec.inference_round(pyr, tables)
        assert torch.equal(free["y_hat"], dec_info["y_hat"])
        for lv in (2, 3, 4, 5):
            assert np.array_equal(recon.layers[lv], free["recon"].layers[lv])

    def test_payloads_match_reference_backend(self, native, tiny_codec, tiny_tables):
        pyr = synth_pyramid(12, (128, 96), channels=4)
        data_native, _ = tiny_codec.compress(pyr, tiny_tables, native)
        data_python, _ = tiny_codec.compress(pyr, tiny_tables, PythonBackend())
        assert data_native == data_python
