import struct

import numpy as np
import pytest

from anystep import checkpoint as ck
from anystep.network import Backbone, NetworkConfig, init_params, layout
from anystep.transport import TransportSpec


def _make(net_cfg=None, spec=None):
    net_cfg = net_cfg or NetworkConfig(width=8, depth=1, embed_dim=4)
    rng = np.random.default_rng(0)
    size = layout(net_cfg).size
    arrays = {name: (init_params(net_cfg) + rng.standard_normal(size)).astype(net_cfg.dtype)
              for name in ck.ARRAY_SECTIONS}
    return ck.Checkpoint(spec=spec or TransportSpec("trigflow"), net_cfg=net_cfg, train_cfg={"lr": 1e-3},
                         rng_state=np.random.default_rng(5).bit_generator.state, step=17,
                         data_stats={"shift": [0.1, 0.2], "scale": [1.0, 2.0]}, run_config="[run]\n", **arrays)


@pytest.mark.parametrize("net_cfg", [
    NetworkConfig(width=8, depth=1, embed_dim=4),
    NetworkConfig(width=8, depth=1, embed_dim=4, dtype="float64", n_classes=3),
    NetworkConfig(Backbone.ATTENTION, dim=4, width=8, depth=1, embed_dim=4, n_heads=2, n_tokens=2),
])
def test_round_trip_bitwise(tmp_path, net_cfg):
    a = _make(net_cfg)
    path = tmp_path / "a.tim"
    ck.save(path, a)
    b = ck.load(path)
    for name in ck.ARRAY_SECTIONS:
        got, want = getattr(b, name), getattr(a, name)
        assert got.dtype == want.dtype
        assert got.tobytes() == want.tobytes()
    assert b.spec == a.spec and b.net_cfg == a.net_cfg and b.step == 17
    assert b.rng_state == a.rng_state and b.data_stats == a.data_stats and b.run_config == a.run_config
    # resaving the loaded checkpoint reproduces the file byte for byte
    ck.save(tmp_path / "b.tim", b)
    assert (tmp_path / "b.tim").read_bytes() == path.read_bytes()


def test_restored_rng_continues_stream(tmp_path):
    rng = np.random.default_rng(3)
    rng.standard_normal(10)
    a = _make()
    a.rng_state = rng.bit_generator.state
    ck.save(tmp_path / "a.tim", a)
    other = np.random.default_rng()
    other.bit_generator.state = ck.load(tmp_path / "a.tim").rng_state
    np.testing.assert_array_equal(other.standard_normal(5), rng.standard_normal(5))


def test_bad_magic(tmp_path):
    path = tmp_path / "x.tim"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.load(path)


def test_bad_version(tmp_path):
    path = tmp_path / "a.tim"
    ck.save(path, _make())
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", ck.FORMAT_VERSION + 1)
    path.write_bytes(bytes(blob))
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.load(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "a.tim"
    ck.save(path, _make())
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ck.CheckpointError):
        ck.load(path)


def test_wrong_array_size_refused(tmp_path):
    a = _make()
    a.ema = a.ema[:-1]
    with pytest.raises(ck.CheckpointError):
        ck.save(tmp_path / "a.tim", a)
    assert not (tmp_path / "a.tim").exists()


def test_payload_is_little_endian_network_dtype(tmp_path):
    a = _make()
    path = tmp_path / "a.tim"
    ck.save(path, a)
    blob = path.read_bytes()
    assert blob[:4] == ck.MAGIC
    (head_len,) = struct.unpack_from("<Q", blob, 8)
    pos = 16 + head_len
    (n,) = struct.unpack_from("<Q", blob, pos)
    assert n == a.params.size * 4
    np.testing.assert_array_equal(np.frombuffer(blob[pos + 8:pos + 8 + n], dtype="<f4"), a.params)
