"""Checkpoint round-trips and corruption detection."""

from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from adaptids.checkpoint import file_digest, load_checkpoint, save_checkpoint
from adaptids.errors import DataError
from adaptids.heads import (KIND_DOCPP, KIND_OPENMAX, OpenMaxConfig,
                            OpenSetModel, WeibullTailModel)
from adaptids.model import Architecture, init_params

ARCH = Architecture(input_dim=400, conv_width=20, conv_channels=4,
                    conv_stride=20, fc1_units=12, n_classes=3)


def _model(head_kind=KIND_DOCPP, with_extras=False):
    params = init_params(ARCH, seed=7)
    weibull = None
    centroids = None
    cfg = None
    if with_extras:
        cfg = OpenMaxConfig(tail_size=5, alpha=2, distance="eucos",
                            threshold=0.4)
        weibull = {c: WeibullTailModel(mav=np.arange(3, dtype=np.float32),
                                       shape=1.5, scale=0.3, shift=0.1,
                                       tail_size=5)
                   for c in ("a", "b", "c")}
        centroids = {c: np.full(3, i, dtype=np.float32)
                     for i, c in enumerate(("a", "b", "c"))}
    return OpenSetModel(arch=ARCH, params=params,
                        class_list=["a", "b", "c"], head_kind=head_kind,
                        threshold=0.6, openmax_cfg=cfg, weibull=weibull,
                        centroids=centroids, generation=4)


class TestRoundTrip:
    def test_params_bit_exact(self, tmp_path):
        model = _model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        for a, b in zip(model.params.arrays(), back.params.arrays()):
            np.testing.assert_array_equal(a, b)
            assert b.dtype == np.float32
        assert back.class_list == model.class_list
        assert back.head_kind == model.head_kind
        assert back.threshold == model.threshold
        assert back.generation == 4
        assert back.arch == model.arch
        assert back.params.rng_seed == 7

    def test_extras_survive(self, tmp_path):
        model = _model(KIND_OPENMAX, with_extras=True)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.openmax_cfg == model.openmax_cfg
        assert sorted(back.weibull) == ["a", "b", "c"]
        w = back.weibull["b"]
        assert (w.shape, w.scale, w.shift) == (1.5, 0.3, 0.1)
        np.testing.assert_array_equal(back.centroids["c"],
                                      model.centroids["c"])

    def test_digest_matches_file(self, tmp_path):
        path = tmp_path / "m.ckpt"
        digest = save_checkpoint(_model(), path)
        assert digest == file_digest(path)
        assert len(digest) == 64

    def test_save_is_deterministic(self, tmp_path):
        d1 = save_checkpoint(_model(), tmp_path / "a.ckpt")
        d2 = save_checkpoint(_model(), tmp_path / "b.ckpt")
        assert d1 == d2

    def test_loaded_model_predicts(self, tmp_path):
        model = _model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        x = np.random.default_rng(0).random((4, ARCH.input_dim),
                                            dtype=np.float32)
        for va, vb in zip(model.predict(x), back.predict(x)):
            assert va.decision == vb.decision

    def test_no_tmp_left_behind(self, tmp_path):
        save_checkpoint(_model(), tmp_path / "m.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def _split(path):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + hlen])
    return raw, hlen, header


def _rebuild(path, header, blob):
    hb = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(struct.pack("<I", len(hb)) + hb + blob)


class TestCorruption:
    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_truncated_to_two_bytes(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(DataError) as err:
            load_checkpoint(path)
        assert "truncated" in str(err.value)

    def test_header_length_past_eof(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(struct.pack("<I", 10_000) + b"{}")
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / "m.ckpt"
        body = b"this is not json"
        path.write_bytes(struct.pack("<I", len(body)) + body)
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_flipped_blob_byte_detected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(_model(), path)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError) as err:
            load_checkpoint(path)
        assert "checksum" in str(err.value)

    def test_wrong_format_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(_model(), path)
        raw, hlen, header = _split(path)
        header["format_version"] = 99
        _rebuild(path, header, raw[4 + hlen:])
        with pytest.raises(DataError) as err:
            load_checkpoint(path)
        assert "version" in str(err.value)

    def test_unexpected_array_layout(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(_model(), path)
        raw, hlen, header = _split(path)
        header["arrays"][0]["name"] = "conv_kernel"
        _rebuild(path, header, raw[4 + hlen:])
        with pytest.raises(DataError) as err:
            load_checkpoint(path)
        assert "layout" in str(err.value)

    def test_array_bounds_checked(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(_model(), path)
        raw, hlen, header = _split(path)
        header["arrays"][-1]["offset"] += 8
        _rebuild(path, header, raw[4 + hlen:])
        with pytest.raises(DataError) as err:
            load_checkpoint(path)
        assert "out of bounds" in str(err.value)
