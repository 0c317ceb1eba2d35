import json
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from faqsim import io as fio
from faqsim.errors import FormatError
from faqsim.faultmodel import generate_fault_map
from faqsim.lut import build_lut
from faqsim.mapper import DataflowConfig, build_error_mask
from faqsim.model import QuantizedLayer, QuantizedModel, models_equal
from faqsim.numfmt import QuantSpec, ScaleFactor


def _random_model(rng, bitwidth=8):
    spec = QuantSpec(bitwidth=bitwidth)
    k = int(rng.integers(1, 5))
    layers = [
        QuantizedLayer(
            kind="conv2d",
            codes=rng.integers(spec.min_code, spec.max_code + 1,
                               size=(k, 2, 3, 3)).astype(np.int16),
            scale=ScaleFactor(float(rng.uniform(0.001, 1.0)), "conv.w"),
            bias=rng.normal(size=k),
            activation="relu", padding=1,
        ),
        QuantizedLayer(kind="maxpool2x2"),
        QuantizedLayer(kind="flatten"),
        QuantizedLayer(
            kind="fc",
            codes=rng.integers(spec.min_code, spec.max_code + 1,
                               size=(3, k * 16)).astype(np.int16),
            scale=ScaleFactor(float(rng.uniform(0.001, 1.0)), "fc.w"),
            bias=None,
        ),
    ]
    return QuantizedModel(layers=tuple(layers), spec=spec)


class TestFaultMapRoundTrip:
    def test_roundtrip(self, tmp_path):
        fmap = generate_fault_map(256, 256, 8, 0.07, seed=123)
        path = tmp_path / "m.fqfm"
        fio.save_fault_map(path, fmap)
        assert fio.fault_maps_equal(fio.load_fault_map(path), fmap)

    @given(
        rows=st.integers(1, 40), cols=st.integers(1, 40),
        bitwidth=st.integers(2, 12),
        rate=st.floats(0.0, 1.0), seed=st.integers(0, 2**64 - 1),
    )
    @settings(max_examples=60, deadline=None,
              suppress_health_check=[HealthCheck.function_scoped_fixture])
    def test_roundtrip_random(self, tmp_path, rows, cols, bitwidth, rate, seed):
        fmap = generate_fault_map(rows, cols, bitwidth, rate, seed)
        path = tmp_path / "m.fqfm"
        fio.save_fault_map(path, fmap)
        assert fio.fault_maps_equal(fio.load_fault_map(path), fmap)

    def test_truncated_rejected(self, tmp_path):
        fmap = generate_fault_map(32, 32, 8, 0.1, seed=1)
        path = tmp_path / "m.fqfm"
        fio.save_fault_map(path, fmap)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(FormatError):
            fio.load_fault_map(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.fqfm"
        fmap = generate_fault_map(8, 8, 8, 0.0, seed=1)
        fio.save_fault_map(path, fmap)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            fio.load_fault_map(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "m.fqfm"
        fio.save_fault_map(path, generate_fault_map(8, 8, 8, 0.0, seed=1))
        data = bytearray(path.read_bytes())
        data[4:6] = struct.pack("<H", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            fio.load_fault_map(path)

    def test_overlapping_planes_rejected(self, tmp_path):
        # craft a file whose sa0 and sa1 planes share a set bit
        path = tmp_path / "m.fqfm"
        header = struct.pack("<4sHHII", b"FQFM", 1, 8, 1, 1)
        payload = struct.pack("<dQ", 0.5, 0) + b"\x01" + b"\x01"
        path.write_bytes(header + payload)
        with pytest.raises(FormatError):
            fio.load_fault_map(path)


class TestLutRoundTrip:
    def test_roundtrip_b8_size(self, tmp_path, lut8):
        path = tmp_path / "t.fqlt"
        fio.save_lut(path, lut8)
        # header (8) + dims (8) + 3^8 * 2^8 * 2 bytes
        assert path.stat().st_size == 16 + 3_359_232
        loaded = fio.load_lut(path)
        assert loaded.bitwidth == 8
        assert np.array_equal(loaded.entries, lut8.entries)

    @pytest.mark.parametrize("bitwidth", [2, 3, 4, 5])
    def test_roundtrip_small(self, tmp_path, bitwidth):
        lut = build_lut(QuantSpec(bitwidth=bitwidth))
        path = tmp_path / "t.fqlt"
        fio.save_lut(path, lut)
        assert np.array_equal(fio.load_lut(path).entries, lut.entries)

    def test_identity_row_validated(self, tmp_path, lut4):
        path = tmp_path / "t.fqlt"
        fio.save_lut(path, lut4)
        data = bytearray(path.read_bytes())
        data[16:18] = struct.pack("<h", 3)  # corrupt entry (0, 0)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            fio.load_lut(path)

    def test_truncated_rejected(self, tmp_path, lut4):
        path = tmp_path / "t.fqlt"
        fio.save_lut(path, lut4)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            fio.load_lut(path)


class TestModelRoundTrip:
    def test_roundtrip_fixture(self, tmp_path, cnn_bundle):
        _, _, model = cnn_bundle
        path = tmp_path / "m.fqmd"
        fio.save_model(path, model)
        assert models_equal(fio.load_model(path), model)

    @given(seed=st.integers(0, 2**32 - 1), bitwidth=st.sampled_from([4, 8, 12]))
    @settings(max_examples=40, deadline=None,
              suppress_health_check=[HealthCheck.function_scoped_fixture])
    def test_roundtrip_random(self, tmp_path, seed, bitwidth):
        model = _random_model(np.random.default_rng(seed), bitwidth)
        path = tmp_path / "m.fqmd"
        fio.save_model(path, model)
        assert models_equal(fio.load_model(path), model)

    def test_activation_scales_roundtrip(self, tmp_path):
        model = _random_model(np.random.default_rng(0)).with_activation_scales(
            {"input": ScaleFactor(0.125, "input"), "layer0": ScaleFactor(0.5, "layer0")}
        )
        path = tmp_path / "m.fqmd"
        fio.save_model(path, model)
        assert models_equal(fio.load_model(path), model)

    def test_missing_blob_rejected(self, tmp_path):
        model = _random_model(np.random.default_rng(1))
        path = tmp_path / "m.fqmd"
        fio.save_model(path, model)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(FormatError):
            fio.load_model(path)

    def test_nan_scale_rejected_on_save(self, tmp_path):
        layer = QuantizedLayer(kind="fc", codes=np.zeros((2, 2), np.int16),
                               scale=ScaleFactor(1.0, "w"))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        object.__setattr__(layer.scale, "scale", float("nan"))
        with pytest.raises(FormatError):
            fio.save_model(tmp_path / "m.fqmd", model)

    def test_nan_scale_rejected_on_load(self, tmp_path):
        model = _random_model(np.random.default_rng(2))
        path = tmp_path / "m.fqmd"
        fio.save_model(path, model)
        data = bytearray(path.read_bytes())
        manifest_len = struct.unpack("<I", data[8:12])[0]
        manifest = json.loads(bytes(data[16 : 16 + manifest_len]))
        for entry in manifest["layers"]:
            if "scale" in entry:
                entry["scale"] = float("nan")
        new_manifest = json.dumps(manifest, sort_keys=True).encode()
        data[8:12] = struct.pack("<I", len(new_manifest))
        data[16 : 16 + manifest_len] = new_manifest
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            fio.load_model(path)


class TestErrorMaskRoundTrip:
    def test_roundtrip(self, tmp_path):
        model = _random_model(np.random.default_rng(3))
        fmap = generate_fault_map(256, 256, 8, 0.05, seed=6)
        mask = build_error_mask(model, fmap, DataflowConfig(pfll=True))
        path = tmp_path / "m.fqem"
        fio.save_error_mask(path, mask)
        assert fio.error_masks_equal(fio.load_error_mask(path), mask)

    def test_out_of_range_index_rejected(self, tmp_path):
        model = _random_model(np.random.default_rng(4))
        fmap = generate_fault_map(256, 256, 8, 0.0, seed=0)
        mask = build_error_mask(model, fmap, DataflowConfig())
        path = tmp_path / "m.fqem"
        fio.save_error_mask(path, mask)
        data = bytearray(path.read_bytes())
        # first layer data starts after header(8)+dims(16)+rate/seed(16)+flag/rank(8)+shape(16)
        offset = 8 + 16 + 16 + 8 + 16
        data[offset : offset + 4] = struct.pack("<I", 3**8)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            fio.load_error_mask(path)


class TestDatasets:
    def test_synthetic_deterministic(self):
        a = fio.synthesize_gaussian_clusters(seed=5, classes=4, samples_per_class=10)
        b = fio.synthesize_gaussian_clusters(seed=5, classes=4, samples_per_class=10)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_synthetic_spec_file(self, tmp_path):
        spec = {"seed": 3, "classes": 4, "samples_per_class": 8, "shape": [1, 4, 4]}
        path = tmp_path / "d.json"
        path.write_text(json.dumps(spec))
        data = fio.load_dataset(path, "synthetic-spec")
        assert data.images.shape == (32, 1, 4, 4)
        again = fio.load_dataset(path, "synthetic-spec")
        assert np.array_equal(data.images, again.images)

    def test_synthetic_spec_unknown_key(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({"seed": 1, "classs": 4}))
        with pytest.raises(FormatError):
            fio.load_dataset(path, "synthetic-spec")

    def test_csv_with_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,f1,label\n0.5,1.0,0\n0.1,-1.0,1\n0.7,0.3,0\n")
        data = fio.load_dataset(path, "csv")
        assert len(data) == 3
        assert data.images.shape == (3, 2)
        assert data.labels.tolist() == [0, 1, 0]

    def test_csv_headerless_first_column_label(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1,0.5,0.25\n0,0.1,0.9\n")
        data = fio.load_dataset(path, "csv")
        assert data.labels.tolist() == [1, 0]

    def test_csv_malformed_reports_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("label,f0\n0,0.5\n1,oops\n")
        with pytest.raises(FormatError, match="line 3"):
            fio.load_dataset(path, "csv")

    def test_idx_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        images = rng.integers(0, 256, size=(6, 4, 4), dtype=np.uint8)
        labels = rng.integers(0, 3, size=6, dtype=np.uint8)
        img_path = tmp_path / "t10k-images-idx3-ubyte"
        lbl_path = tmp_path / "t10k-labels-idx1-ubyte"
        img_path.write_bytes(
            struct.pack(">BBBBIII", 0, 0, 0x08, 3, 6, 4, 4) + images.tobytes())
        lbl_path.write_bytes(struct.pack(">BBBBI", 0, 0, 0x08, 1, 6) + labels.tobytes())
        data = fio.load_dataset(img_path, "idx")
        assert data.images.shape == (6, 1, 4, 4)
        assert data.images.max() <= 1.0
        assert np.array_equal(data.labels, labels)

    def test_idx_bad_magic(self, tmp_path):
        path = tmp_path / "bad-images-idx3-ubyte"
        path.write_bytes(b"\x12\x34\x56\x78" + b"\x00" * 16)
        with pytest.raises(FormatError):
            fio.load_dataset(path, "idx")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            fio.load_dataset(tmp_path / "x", "parquet")

    def test_split(self):
        data = fio.synthesize_gaussian_clusters(seed=1, classes=2, samples_per_class=10)
        a, b = data.split_at(15)
        assert len(a) == 15 and len(b) == 5
