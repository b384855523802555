import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ddnet.io import (
    CheckpointError,
    FormatError,
    TruncatedError,
    decode_tensor,
    encode_tensor,
    load_checkpoint,
    load_dataset,
    parse_value,
    format_value,
    read_checkpoint,
    read_clip_dir,
    read_pgm,
    read_tensor,
    save_checkpoint,
    write_image_set,
    write_manifest,
    write_pgm,
    write_tensor,
)
from ddnet.networks import ModelConfig, init_params
from ddnet.training import AdamState, adam_step

CFG = ModelConfig(channels=(4, 8), stages=1)


class TestTensorFile:
    def test_layout(self):
        buf = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert buf[:4] == b"DDN1" and buf[4] == 0 and buf[5] == 2
        assert struct.unpack_from("<2I", buf, 6) == (2, 3)
        assert len(buf) == 6 + 8 + 24
        assert struct.unpack_from("<f", buf, 14 + 4)[0] == 1.0

    def test_round_trip_f32(self, rng, tmp_path):
        x = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        write_tensor(tmp_path / "x.ddn", x)
        y = read_tensor(tmp_path / "x.ddn")
        assert y.dtype == np.float32 and y.tobytes() == x.tobytes()

    @given(arrays(np.float64, array_shapes(min_dims=0, max_dims=5, max_side=4),
                  elements=st.floats(allow_nan=False, width=64)))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_f64(self, x):
        y = decode_tensor(encode_tensor(x))
        assert y.shape == x.shape and y.tobytes() == x.tobytes()

    def test_truncated_payload(self):
        buf = encode_tensor(np.zeros((2, 2), np.float64))
        with pytest.raises(TruncatedError, match="expected 32 bytes, got 31"):
            decode_tensor(buf[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            decode_tensor(encode_tensor(np.zeros(2, np.float32)) + b"\0")

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            decode_tensor(b"DDN2" + encode_tensor(np.zeros(1, np.float32))[4:])

    def test_rank_limit(self):
        buf = b"DDN1" + bytes([0, 6]) + struct.pack("<6I", *[1] * 6) + b"\0" * 4
        with pytest.raises(FormatError, match="rank"):
            decode_tensor(buf)

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            encode_tensor(np.zeros(3, np.int32))


class TestPgm:
    def test_half_quantization(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.full((4, 4), 0.5), maxval=255)
        raw = (tmp_path / "a.pgm").read_bytes()[-16:]
        assert set(raw) <= {127, 128}

    def test_round_trip_16bit(self, rng, tmp_path):
        img = rng.uniform(size=(6, 9))
        write_pgm(tmp_path / "b.pgm", img)
        assert np.abs(read_pgm(tmp_path / "b.pgm") - img).max() <= 1 / 131070

    def test_round_trip_8bit(self, rng, tmp_path):
        img = rng.uniform(size=(3, 5))
        write_pgm(tmp_path / "c.pgm", img, maxval=255)
        assert np.abs(read_pgm(tmp_path / "c.pgm") - img).max() <= 1 / 510

    def test_foreign_file_with_comments(self, tmp_path):
        data = b"P5\n# written by hand\n3 # width\n2\n# depth follows\n255\n" + bytes([0, 51, 102, 153, 204, 255])
        (tmp_path / "f.pgm").write_bytes(data)
        img = read_pgm(tmp_path / "f.pgm")
        np.testing.assert_allclose(img, [[0, 0.2, 0.4], [0.6, 0.8, 1.0]])

    def test_big_endian_16bit(self, tmp_path):
        (tmp_path / "g.pgm").write_bytes(b"P5 2 1 1000\n" + struct.pack(">2H", 250, 1000))
        np.testing.assert_allclose(read_pgm(tmp_path / "g.pgm"), [[0.25, 1.0]])

    @pytest.mark.parametrize("data", [b"P2\n2 2\n255\n\0\0\0\0", b"P5\n2 x\n255\n\0\0\0\0", b"P5\n2 2\n255",
                                      b"P5\n2 2\n0\n\0\0\0\0", b"P5\n2 2\n255\n\0\0"])
    def test_malformed(self, tmp_path, data):
        (tmp_path / "m.pgm").write_bytes(data)
        with pytest.raises(FormatError):
            read_pgm(tmp_path / "m.pgm")


class TestConfigText:
    @pytest.mark.parametrize("value", [True, False, 3, 0.125, (1, 3), "inception"])
    def test_round_trip(self, value):
        assert parse_value(format_value(value), value) == value

    def test_bad_bool(self):
        with pytest.raises(ValueError):
            parse_value("maybe", True)


def trained_state():
    params = init_params(CFG, 1)
    grads = {k: np.ones_like(t.data) for k, t in params.items()}
    return adam_step(params, grads, AdamState(), 1e-3)


class TestCheckpoint:
    def test_bitwise_round_trip(self, tmp_path):
        params, adam = trained_state()
        save_checkpoint(tmp_path / "a.ckpt", params, CFG, adam, best_params=params, meta={"next_epoch": 3})
        ck = load_checkpoint(tmp_path / "a.ckpt", CFG, "sd2net")
        assert ck.config == CFG and ck.meta["next_epoch"] == "3" and ck.adam.step == 1
        assert all(ck.params[k].data.tobytes() == params[k].data.tobytes() for k in params)
        assert all(ck.adam.m[k].tobytes() == adam.m[k].tobytes() for k in adam.m)

    def test_save_load_save_identical(self, tmp_path):
        params, adam = trained_state()
        save_checkpoint(tmp_path / "a.ckpt", params, CFG, adam)
        ck = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", ck.params, ck.config, ck.adam)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_altered_channels(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", init_params(CFG), CFG)
        with pytest.raises(CheckpointError, match=r"sd2net\.u0\.enc1\.conv\.w: stored dims \(8, 4, 3, 3\)") as err:
            load_checkpoint(tmp_path / "a.ckpt", ModelConfig(channels=(4, 16), stages=1))
        assert "sd2net.u0.enc1.conv.w" in err.value.mismatched

    def test_missing_leaf(self, tmp_path):
        params = init_params(CFG)
        del params["sd2net.u0.up0.b"]
        save_checkpoint(tmp_path / "a.ckpt", params, CFG)
        with pytest.raises(CheckpointError, match="sd2net.u0.up0.b") as err:
            load_checkpoint(tmp_path / "a.ckpt")
        assert err.value.missing == ["sd2net.u0.up0.b"]

    def test_unknown_leaf(self, tmp_path):
        params = init_params(CFG)
        params["sd2net.extra.w"] = params["sd2net.stem.w"]
        save_checkpoint(tmp_path / "a.ckpt", params, CFG)
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(tmp_path / "a.ckpt")
        assert err.value.unknown == ["sd2net.extra.w"]

    def test_config_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", init_params(CFG), CFG)
        with pytest.raises(CheckpointError, match="dilations"):
            load_checkpoint(tmp_path / "a.ckpt", ModelConfig(channels=(4, 8), stages=1, dilations=(1, 2)))

    def test_wrong_kind(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", init_params(CFG), CFG)
        with pytest.raises(CheckpointError, match="std2net"):
            load_checkpoint(tmp_path / "a.ckpt", kind="std2net")

    def test_garbage_and_truncation(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "x.ckpt")
        save_checkpoint(tmp_path / "a.ckpt", init_params(CFG), CFG)
        (tmp_path / "t.ckpt").write_bytes((tmp_path / "a.ckpt").read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="past end"):
            read_checkpoint(tmp_path / "t.ckpt")

    def test_std2net_kind(self, tmp_path):
        cfg = ModelConfig(channels=(4, 8), stages=1, temporal_window=3)
        save_checkpoint(tmp_path / "s.ckpt", init_params(cfg, 0, "std2net"), cfg)
        assert load_checkpoint(tmp_path / "s.ckpt", cfg, "std2net").kind == "std2net"


class TestDatasetDir:
    def test_single_round_trip(self, rng, tmp_path):
        imgs = rng.uniform(size=(3, 1, 8, 8))
        masks = (rng.uniform(size=(3, 1, 8, 8)) > 0.8).astype(float)
        write_image_set(tmp_path, imgs, masks)
        write_manifest(tmp_path / "manifest.txt", {"kind": "single", "count": 3, "train": (0, 2), "test": (1,)})
        ds = load_dataset(tmp_path)
        assert ds.train == [0, 2] and ds.test == [1]
        assert np.abs(ds.inputs - imgs).max() <= 1 / 131070 and np.array_equal(ds.masks, masks)

    def test_overlapping_split(self, rng, tmp_path):
        write_image_set(tmp_path, np.zeros((2, 1, 8, 8)), np.zeros((2, 1, 8, 8)))
        write_manifest(tmp_path / "manifest.txt", {"kind": "single", "count": 2, "train": (0, 1), "test": (1,)})
        with pytest.raises(FormatError, match="overlap"):
            load_dataset(tmp_path)

    def test_not_a_dataset(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_clip_dir(self, rng, tmp_path):
        frames = rng.uniform(size=(4, 1, 8, 8))
        write_image_set(tmp_path, frames, np.zeros_like(frames))
        assert np.abs(read_clip_dir(tmp_path) - frames).max() <= 1 / 131070
        assert read_clip_dir(tmp_path / "frames").shape == (4, 1, 8, 8)
