import json
import struct

import numpy as np
import pytest

from conftest import random_batch
from mlora.checkpoint import (
    checkpoint_bytes,
    decode,
    encode,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from mlora.errors import FormatError
from mlora.model import FeatureSchema, attach_adaptors, build_model
from mlora.numerics import Rng

SCHEMA = FeatureSchema((("u", 7), ("i", 5)), (("p", 3),), 3)


def _model(kind="mlp", adapt=True):
    m = build_model(SCHEMA, [6, 4], 3, kind, 2, Rng(0))
    if adapt:
        attach_adaptors(m, [0, 2], rng=Rng(1))
        m.layers[0].adaptors[2].B[...] = 0.25
    return m


def test_encode_decode_hand_case():
    buf = encode({"a": np.array([1.0, 2.0]), "m": np.zeros((2, 3))})
    assert buf[:4] == b"MLRA" and struct.unpack("<II", buf[4:12]) == (1, 2)
    out = decode(buf)
    assert out["a"].tolist() == [1.0, 2.0] and out["m"].shape == (2, 3)


@pytest.mark.parametrize("kind", ["mlp", "wdl", "deepfm"])
@pytest.mark.parametrize("adapt", [False, True])
def test_round_trip_is_byte_identical(tmp_path, kind, adapt):
    m = _model(kind, adapt)
    phase = "finetuned" if adapt else "pretrained"
    save_checkpoint(m, phase, tmp_path / "a.ckpt", {"train.seed": 3})
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(loaded, phase, tmp_path / "b.ckpt", {"train.seed": 3})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    idx, t = random_batch(SCHEMA, 50, 0)
    assert loaded.predict_proba(idx, t).tobytes() == m.predict_proba(idx, t).tobytes()
    assert loaded.domains == m.domains
    assert [p.frozen for p in loaded.backbone_parts()] == [p.frozen for p in m.backbone_parts()]


def test_metadata_and_config_echo(tmp_path):
    save_checkpoint(_model(), "finetuned", tmp_path / "c.ckpt", {"train.learning_rate": 0.01})
    ck = read_checkpoint(tmp_path / "c.ckpt")
    assert ck.phase == "finetuned" and ck.config == {"train.learning_rate": 0.01}
    assert ck.meta["domains"] == [0, 2]


def test_bad_phase_tag_rejected():
    with pytest.raises(ValueError):
        checkpoint_bytes(_model(), "halfway")


def _write(tmp_path, data):
    p = tmp_path / "x.ckpt"
    p.write_bytes(data)
    return p


def test_bad_magic_version_checksum(tmp_path):
    good = checkpoint_bytes(_model(), "finetuned")
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(_write(tmp_path, b"XXXX" + good[4:]))
    bumped = good[:4] + struct.pack("<I", 9) + good[8:]
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(_write(tmp_path, bumped))
    flipped = bytearray(good)
    flipped[100] ^= 0xFF
    with pytest.raises(FormatError, match="checksum") as exc:
        read_checkpoint(_write(tmp_path, bytes(flipped)))
    assert exc.value.offset == len(good) - 8
    with pytest.raises(FormatError):
        read_checkpoint(_write(tmp_path, b""))


def test_every_truncation_is_a_format_error(tmp_path):
    good = checkpoint_bytes(_model(adapt=False), "pretrained")
    for cut in range(0, len(good), max(1, len(good) // 300)):
        with pytest.raises(FormatError):
            read_checkpoint(_write(tmp_path, good[:cut]))


def _resum(body):
    return body + struct.pack("<Q", int(np.frombuffer(body, dtype=np.uint8).sum(dtype=np.uint64)))


def test_structural_corruption_with_valid_checksum(tmp_path):
    m = _model()
    good = checkpoint_bytes(m, "finetuned")
    body = bytearray(good[:-8])
    # tensor count too large
    bad = bytearray(body)
    bad[8:12] = struct.pack("<I", 999)
    with pytest.raises(FormatError):
        read_checkpoint(_write(tmp_path, _resum(bytes(bad))))
    # trailing bytes
    with pytest.raises(FormatError, match="trailing"):
        read_checkpoint(_write(tmp_path, _resum(bytes(body) + b"\0" * 8)))
    # metadata that is not JSON
    meta = b'{"phase": "finetuned"'
    tensors = {"__meta__": np.frombuffer(meta, dtype=np.uint8).astype(float)}
    with pytest.raises(FormatError, match="JSON"):
        read_checkpoint(_write(tmp_path, encode(tensors)))
    # missing adaptor tensor
    ck = read_checkpoint(_write(tmp_path, good))
    t = dict(ck.tensors)
    del t["deep.1.lora.2.A"]
    with pytest.raises(FormatError):
        read_checkpoint(_write(tmp_path, encode(t))).model()
    # wrong shape
    t = dict(ck.tensors)
    t["deep.0.W"] = np.zeros((2, 2))
    with pytest.raises(FormatError, match="shape"):
        read_checkpoint(_write(tmp_path, encode(t))).model()
    # unparseable structure
    t = dict(ck.tensors)
    meta = json.loads(t["__meta__"].astype(np.uint8).tobytes())
    meta["backbone"] = "nope"
    t["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8).astype(float)
    with pytest.raises(FormatError):
        read_checkpoint(_write(tmp_path, encode(t))).model()


def test_random_mutations_never_crash(tmp_path):
    good = checkpoint_bytes(_model(), "finetuned")
    rng = np.random.default_rng(0)
    for _ in range(300):
        buf = bytearray(good)
        kind = rng.integers(3)
        if kind == 0:
            for pos in rng.integers(0, len(buf), 3):
                buf[pos] = int(rng.integers(256))
        elif kind == 1:
            # swapping two header bytes keeps the byte-sum checksum valid
            i, j = rng.integers(0, 200, 2)
            buf[i], buf[j] = buf[j], buf[i]
        else:
            buf = buf[: rng.integers(len(buf))] + bytes(rng.integers(0, 256, 5, dtype=np.uint8))
        try:
            read_checkpoint(_write(tmp_path, bytes(buf))).model()
        except FormatError:
            pass
