import struct

import numpy as np
import pytest

from cebench.autodiff import Tensor
from cebench.errors import ContractError
from cebench.modelio import (
    MAGIC,
    VERSION,
    arch_hash,
    load_checkpoint,
    params_hash,
    save_checkpoint,
)
from cebench.rng import STREAMS, stream


def sample_params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "w": Tensor(rng.normal(0, 1, (3, 4)).astype(np.float32)),
        "b": Tensor(rng.normal(0, 1, (4,)).astype(np.float32)),
        "scalarish": Tensor(rng.normal(0, 1, (1,)).astype(np.float32)),
    }


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arch = {"kind": "k", "width": 3}
        params = sample_params()
        meta = {"seed": 7, "note": "x"}
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, arch, params, meta)
        ah, m2, p2 = load_checkpoint(p)
        assert ah == arch_hash(arch)
        assert m2 == meta
        assert set(p2) == set(params)
        for k in params:
            np.testing.assert_array_equal(p2[k].data, params[k].data)
            assert p2[k].data.dtype == np.float32

    def test_byte_identical_across_saves(self, tmp_path):
        arch = {"kind": "k"}
        a, b = tmp_path / "a", tmp_path / "b"
        save_checkpoint(a, arch, sample_params(1), {"s": 1})
        save_checkpoint(b, arch, sample_params(1), {"s": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_header_layout(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, {"kind": "k"}, sample_params(), {})
        raw = p.read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack_from("<I", raw, 4)[0] == VERSION
        assert raw[8:40] == arch_hash({"kind": "k"})

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "m.ckpt"
        p.write_bytes(b"XXXX" + b"\0" * 64)
        with pytest.raises(ContractError):
            load_checkpoint(p)

    def test_bad_version_rejected(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, {"kind": "k"}, sample_params(), {})
        raw = bytearray(p.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(ContractError):
            load_checkpoint(p)

    def test_params_hash_sensitivity(self):
        arch = {"kind": "k"}
        a = sample_params(0)
        b = sample_params(0)
        assert params_hash(arch, a) == params_hash(arch, b)
        b["w"].data[0, 0] += 1e-3
        assert params_hash(arch, a) != params_hash(arch, b)
        assert params_hash({"kind": "other"}, a) != params_hash(arch, a)


class TestStreams:
    def test_reproducible_and_distinct(self):
        a = stream(42, "train").normal(size=8)
        b = stream(42, "train").normal(size=8)
        c = stream(42, "sample").normal(size=8)
        d = stream(43, "train").normal(size=8)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_counters_give_fresh_streams(self):
        a = stream(42, "ti", 0).normal(size=8)
        b = stream(42, "ti", 1).normal(size=8)
        c = stream(42, "ti", 0, 1).normal(size=8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(b, c)

    def test_known_stream_names(self):
        for name in ("train", "ti", "sample", "perturb", "irece", "data", "classifier", "erase"):
            assert name in STREAMS
