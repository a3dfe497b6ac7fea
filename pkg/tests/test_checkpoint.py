import numpy as np
import pytest

from surt import checkpoint as C


def sample():
    rng = np.random.default_rng(0)
    return C.Checkpoint(
        params={"enc.W": rng.standard_normal((3, 4)), "b": rng.standard_normal(4), "s": np.array(2.5)},
        optimizer={"m.enc.W": rng.standard_normal((3, 4))},
        counters={"update": 7, "best_val": float("inf")},
        config_text="unmix = mask\n",
    )


def test_round_trip_is_bitwise(tmp_path):
    ck = sample()
    C.save(tmp_path / "a.ckpt", ck)
    back = C.load(tmp_path / "a.ckpt")
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()
        assert back.params[k].shape == np.shape(v)
    assert back.counters == {"update": 7.0, "best_val": float("inf")}
    assert back.config_text == ck.config_text
    C.save(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_header_corruption_gives_clean_error():
    raw = bytearray(C.to_bytes(sample()))
    for pos in range(12):
        bad = bytearray(raw)
        bad[pos] ^= 0xFF
        with pytest.raises(C.CheckpointError):
            C.from_bytes(bytes(bad))


@pytest.mark.parametrize("cut", [0, 5, 20, 60, -1])
def test_truncation_gives_clean_error(cut):
    raw = C.to_bytes(sample())
    with pytest.raises(C.CheckpointError):
        C.from_bytes(raw[:cut])


def test_random_byte_flips_never_crash():
    raw = C.to_bytes(sample())
    rng = np.random.default_rng(1)
    for _ in range(300):
        bad = bytearray(raw)
        bad[int(rng.integers(len(raw)))] = int(rng.integers(256))
        try:
            C.from_bytes(bytes(bad))
        except C.CheckpointError:
            pass


def test_trailing_bytes_rejected():
    with pytest.raises(C.CheckpointError):
        C.from_bytes(C.to_bytes(sample()) + b"\0")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    C.save(tmp_path / "x.ckpt", sample())
    C.save(tmp_path / "x.ckpt", sample())
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]


def test_missing_file(tmp_path):
    with pytest.raises((C.CheckpointError, FileNotFoundError)):
        C.load(tmp_path / "nope.ckpt")
