import numpy as np
import pytest

from panosplat.memory import NULL_METER, MemoryMeter, NullMeter, nbytes_of


def test_nbytes_of_nested():
    a = np.zeros(10)
    b = np.zeros((2, 3), dtype=np.float32)
    assert nbytes_of(a) == 80
    assert nbytes_of(a, None, [b, {"x": a}]) == 80 + 24 + 80
    assert nbytes_of() == 0


def test_hold_release_peak():
    m = MemoryMeter()
    m.hold("a", np.zeros(100))
    m.hold("b", np.zeros(50))
    assert m.current == 1200 and m.peak == 1200
    m.release("a")
    assert m.current == 400 and m.peak == 1200
    m.hold("c", np.zeros(10))
    assert m.peak == 1200
    assert sorted(m.live_keys) == ["b", "c"]


def test_duplicate_key_rejected():
    m = MemoryMeter()
    m.hold("a", np.zeros(4))
    with pytest.raises(KeyError):
        m.hold("a", np.zeros(4))


def test_discard_update_prefix_scoped():
    m = MemoryMeter()
    m.discard("missing")
    m.update("g", np.zeros(2))
    m.update("g", np.zeros(8))
    assert m.current == 64 and m.peak == 64
    m.hold("t/1", np.zeros(1))
    m.hold("t/2", np.zeros(1))
    m.release_prefix("t/")
    assert m.live_keys == ["g"]
    with m.scoped("s", np.zeros(100)):
        assert m.is_live("s")
    assert not m.is_live("s") and m.peak == 864
    m.reset_peak()
    assert m.peak == m.current == 64


def test_null_meter_records_nothing():
    assert isinstance(NULL_METER, NullMeter)
    NULL_METER.hold("a", np.zeros(100))
    NULL_METER.hold("a", np.zeros(100))
    NULL_METER.release("never")
    assert NULL_METER.peak == 0 and not NULL_METER.is_live("a")
