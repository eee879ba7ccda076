import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roomcross import datastore, nn
from roomcross.data import Dataset, Episode
from roomcross.datastore import (HEADER, BadMagic, DatastoreError, DuplicateEpisode, SizeMismatch, SpecMismatch,
                                 TruncatedPayload, VersionMismatch)
from roomcross.nn import NetworkSpec
from roomcross.world import make_room_one, room_one_catalog, room_two_catalog


def _episode(frames=5, seed=0, kind="depth", w=32, h=24, camera="center", provenance="expert-initial", eid=0):
    rng = np.random.default_rng(seed)
    f32 = lambda *s: rng.normal(size=s).astype(np.float32)
    depth = rng.uniform(0, 40, size=(frames, h, w)).astype(np.float32) if kind in ("depth", "both") else None
    rgb = rng.integers(0, 256, size=(frames, h, w, 3), dtype=np.uint8) if kind in ("rgb", "both") else None
    return Episode(3, f32(frames, 4), f32(frames, 6), f32(frames, 6), depth, rgb, camera, provenance, eid)


def _same(a: Episode, b: Episode):
    for name in ("poses", "expert", "applied", "depth", "rgb"):
        x, y = getattr(a, name), getattr(b, name)
        assert (x is None) == (y is None)
        if x is not None:
            assert x.dtype == y.dtype and x.tobytes() == y.tobytes()
    assert (a.room_id, a.camera, a.provenance, a.episode_id) == (b.room_id, b.camera, b.provenance, b.episode_id)


@given(st.integers(1, 12), st.sampled_from(["depth", "rgb", "both"]), st.sampled_from(["center", "left", "right"]),
       st.sampled_from(["expert-initial", "recovery", "dagger-1", "dagger-3"]), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_episode_round_trip_is_bitwise(frames, kind, camera, provenance, seed):
    ep = _episode(frames, seed, kind, 6, 4, camera, provenance, eid=seed % 1000)
    raw = datastore.episode_bytes(ep)
    _same(datastore.episode_from_bytes(raw), ep)
    assert datastore.episode_bytes(datastore.episode_from_bytes(raw)) == raw


def test_depth_episode_file_size():
    assert datastore.episode_file_size(800, 32, 24) == HEADER.size + 800 * (16 + 24 + 24 + 3072)
    assert len(datastore.episode_bytes(_episode(800))) == HEADER.size + 800 * 3136


def test_truncated_file_rejected(tmp_path):
    raw = datastore.episode_bytes(_episode(10))
    with pytest.raises(TruncatedPayload):
        datastore.episode_from_bytes(raw[:-1])
    with pytest.raises(TruncatedPayload):
        datastore.episode_from_bytes(raw[:10])
    with pytest.raises(SizeMismatch):
        datastore.episode_from_bytes(raw + b"\0")


def test_bad_magic_and_version_rejected():
    raw = bytearray(datastore.episode_bytes(_episode(2)))
    with pytest.raises(BadMagic):
        datastore.episode_from_bytes(b"XXXX" + bytes(raw[4:]))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatch):
        datastore.episode_from_bytes(bytes(raw))
    assert issubclass(VersionMismatch, DatastoreError)


@pytest.mark.parametrize("variant", nn.VARIANTS)
def test_checkpoint_round_trip(variant, tmp_path):
    shape = (1, 24, 32) if variant.startswith("CNN") else (768,)
    spec = NetworkSpec(variant, shape)
    params = nn.init_params(spec, 1, np.float32)
    path = tmp_path / "m.rckp"
    datastore.write_checkpoint(path, spec, params, "lr\t0.0001\n")
    back_spec, back, text = datastore.read_checkpoint(path)
    assert back_spec == spec and text == "lr\t0.0001\n"
    assert set(back) == set(nn.param_shapes(spec))
    assert all(back[k].tobytes() == params[k].tobytes() for k in params)
    assert datastore.checkpoint_bytes(back_spec, back, text) == path.read_bytes()


def test_checkpoint_faults():
    spec = NetworkSpec("LSTM", (768,))
    raw = datastore.checkpoint_bytes(spec, nn.init_params(spec, 0, np.float32))
    with pytest.raises(BadMagic):
        datastore.checkpoint_from_bytes(b"RCEP" + raw[4:])
    with pytest.raises(VersionMismatch):
        datastore.checkpoint_from_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(TruncatedPayload):
        datastore.checkpoint_from_bytes(raw[:-3])
    with pytest.raises(SizeMismatch):
        datastore.checkpoint_from_bytes(raw + b"\0\0")


def test_finetune_spec_mismatch_names_both(tmp_path):
    spec = NetworkSpec("LSTM", (768,))
    path = tmp_path / "m.rckp"
    datastore.write_checkpoint(path, spec, nn.init_params(spec, 0, np.float32))
    assert set(datastore.load_for_finetune(path, spec)) == set(nn.param_shapes(spec))
    with pytest.raises(SpecMismatch) as info:
        datastore.load_for_finetune(path, NetworkSpec("LSTM", (768,), (50, 50)))
    assert "hidden=100x100" in str(info.value) and "hidden=50x50" in str(info.value)


def test_room_catalog_round_trip(tmp_path):
    pairs = room_two_catalog()
    files = datastore.write_catalog(tmp_path, pairs)
    assert len(files) == 15
    assert datastore.read_catalog(tmp_path) == pairs
    room = make_room_one(4)
    datastore.write_room(tmp_path / "r.txt", room)
    assert datastore.read_room(tmp_path / "r.txt") == room


def test_aggregate_five_plus_two(tmp_path):
    datastore.write_dataset(tmp_path, Dataset([_episode(3, i, w=6, h=4, eid=i) for i in range(5)]))
    entries = datastore.aggregate(tmp_path, [_episode(2, 9, w=6, h=4, eid=5), _episode(4, 8, w=6, h=4, eid=6)],
                                  provenance="dagger-1")
    assert len(entries) == len(datastore.read_manifest(tmp_path)) == 7
    assert [e.provenance for e in entries[-2:]] == ["dagger-1", "dagger-1"]
    ds = datastore.read_dataset(tmp_path)
    assert len(ds) == 7 and ds.total_frames == 5 * 3 + 2 + 4
    with pytest.raises(DuplicateEpisode):
        datastore.aggregate(tmp_path, [_episode(1, 0, w=6, h=4, eid=3)])


def test_manifest_survives_crash_mid_write(tmp_path, monkeypatch):
    datastore.write_dataset(tmp_path, Dataset([_episode(2, i, w=6, h=4, eid=i) for i in range(3)]))
    before = (tmp_path / datastore.MANIFEST).read_bytes()

    def boom(*args):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        datastore.aggregate(tmp_path, [_episode(2, 7, w=6, h=4, eid=3)])
    assert (tmp_path / datastore.MANIFEST).read_bytes() == before
    assert not [p for p in os.listdir(tmp_path) if p.startswith(".manifest")]


def test_manifest_disagreement_detected(tmp_path):
    datastore.write_dataset(tmp_path, Dataset([_episode(2, 0, w=6, h=4)]))
    m = tmp_path / datastore.MANIFEST
    m.write_text(m.read_text().replace("\t2\n", "\t3\n"))
    with pytest.raises(SizeMismatch):
        datastore.read_dataset(tmp_path)


def test_mixed_resolution_rejected():
    ep = _episode(2, kind="depth", w=6, h=4)
    ep.rgb = np.zeros((2, 8, 8, 3), np.uint8)
    with pytest.raises(ValueError):
        datastore.episode_bytes(ep)
