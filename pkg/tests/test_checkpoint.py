import struct
import warnings
import zlib

import numpy as np
import pytest

from nestdrop.checkpoint import (
    MAGIC,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
    trees_equal,
)
from nestdrop.data import Dataset
from nestdrop.errors import CorruptCheckpointError
from nestdrop.network import NetworkSpec
from nestdrop.solver import SolverConfig, state_from_checkpoint, train_loop

from conftest import synthetic_pixels, toy_spec_dict


def toy():
    x, y = synthetic_pixels(100, seed=4)
    ds = Dataset((x / 255.0).astype(np.float32)[:, None], y.astype(np.int64), num_classes=3)
    spec = NetworkSpec.from_dict(toy_spec_dict()).with_nested_dropout("conv1", rho=0.3)
    return spec, ds


def run(max_iters, state=None):
    spec, ds = toy()
    cfg = SolverConfig(base_lr=0.05, weight_decay=5e-4, batch_size=16, max_iters=max_iters,
                       sweep_interval=6, rng_seed=21)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return train_loop(spec, ds, cfg, state=state)


@pytest.fixture(scope="module")
def ckpt():
    return run(14)[2][-1]


def test_save_load_save_is_byte_identical(ckpt, tmp_path):
    save_checkpoint(ckpt, tmp_path / "a.ndck")
    back = load_checkpoint(tmp_path / "a.ndck")
    save_checkpoint(back, tmp_path / "b.ndck")
    assert (tmp_path / "a.ndck").read_bytes() == (tmp_path / "b.ndck").read_bytes()
    assert trees_equal(back.params, ckpt.params) and trees_equal(back.velocity, ckpt.velocity)
    assert back.rng_states == ckpt.rng_states and back.label == "final" and back.iteration == 14


def test_layout_header(ckpt):
    raw = to_bytes(ckpt)
    assert raw[:8] == MAGIC
    assert struct.unpack("<I", raw[8:12]) == (1,)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_empty_file(tmp_path):
    (tmp_path / "e.ndck").write_bytes(b"")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "e.ndck")


def test_missing_file(tmp_path):
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "nope.ndck")


def test_truncated(ckpt):
    raw = to_bytes(ckpt)
    for cut in (10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CorruptCheckpointError):
            from_bytes(raw[:cut])


def test_bit_flip(ckpt):
    raw = bytearray(to_bytes(ckpt))
    raw[len(raw) // 2] ^= 0x10
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        from_bytes(bytes(raw))


def reseal(body):
    return body + struct.pack("<I", zlib.crc32(body))


def test_version_mismatch(ckpt):
    body = bytearray(to_bytes(ckpt)[:-4])
    body[8:12] = struct.pack("<I", 2)
    with pytest.raises(CorruptCheckpointError, match="version"):
        from_bytes(reseal(bytes(body)))


def test_field_count_mismatch(ckpt):
    import json

    raw = to_bytes(ckpt)
    (mlen,) = struct.unpack("<I", raw[12:16])
    manifest = json.loads(raw[16 : 16 + mlen])
    manifest["extra"] = 1
    m = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = raw[:12] + struct.pack("<I", len(m)) + m + raw[16 + mlen : -4]
    with pytest.raises(CorruptCheckpointError, match="fields"):
        from_bytes(reseal(body))


def test_atomic_write_leaves_no_temp_files(ckpt, tmp_path):
    save_checkpoint(ckpt, tmp_path / "x.ndck")
    save_checkpoint(ckpt, tmp_path / "x.ndck")
    assert [p.name for p in tmp_path.iterdir()] == ["x.ndck"]


def test_resume_equals_straight_run(tmp_path):
    straight, rows_s, cks_s = run(24)
    _, _, cks_half = run(12)
    half = cks_half[-1]
    assert half.label == "final" and half.iteration == 12
    save_checkpoint(half, tmp_path / "half.ndck")
    resumed, rows_r, cks_r = run(24, state=state_from_checkpoint(load_checkpoint(tmp_path / "half.ndck")))
    assert rows_r == rows_s[12:]
    assert trees_equal(resumed.params, straight.params)
    assert trees_equal(resumed.velocity, straight.velocity)
    assert to_bytes(cks_r[-1]) == to_bytes(cks_s[-1])
