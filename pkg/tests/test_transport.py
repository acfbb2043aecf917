import pytest
from hypothesis import given, settings, strategies as st

from secureftl.transport import (
    COST_FAMILIES,
    DIR_SOURCE_TO_TARGET,
    DIR_TARGET_TO_SOURCE,
    ChannelClosed,
    FamilySection,
    Frame,
    FramingError,
    HEADER,
    MsgType,
    Transcript,
    decode_frame,
    encode_frame,
    loopback_pair,
    measure_cost,
    pack_families,
    tcp_pair,
    unpack_families,
)


@settings(max_examples=50)
@given(st.sampled_from(list(MsgType)), st.integers(min_value=0, max_value=2 ** 32 - 1),
       st.binary(max_size=200))
def test_frame_roundtrip(msg_type, iteration, payload):
    frame = Frame(msg_type, iteration, payload)
    assert decode_frame(encode_frame(frame)) == frame


def test_frame_rejects_unknown_type():
    with pytest.raises(FramingError):
        Frame(99, 0)


def test_frame_rejects_bad_iteration():
    with pytest.raises(FramingError):
        Frame(MsgType.STOP, -1)
    with pytest.raises(FramingError):
        Frame(MsgType.STOP, 1 << 32)


def test_decode_rejects_garbage():
    with pytest.raises(FramingError):
        decode_frame(b"xx")
    with pytest.raises(FramingError):
        decode_frame(b"NOPE" + bytes(HEADER.size - 4))
    good = encode_frame(Frame(MsgType.STOP, 0, b"abc"))
    with pytest.raises(FramingError):
        decode_frame(good + b"extra")


def test_loopback_delivery_and_transcript():
    source, target, transcript = loopback_pair()
    source.send(Frame(MsgType.COMPONENTS_A, 1, b"hello"))
    target.send(Frame(MsgType.COMPONENTS_B, 1, b"back"))
    assert target.recv(timeout=1).payload == b"hello"
    assert source.recv(timeout=1).payload == b"back"
    assert transcript.payload_bytes(DIR_SOURCE_TO_TARGET) == 5
    assert transcript.payload_bytes(DIR_TARGET_TO_SOURCE) == 4
    assert transcript.frame_bytes(DIR_SOURCE_TO_TARGET) == HEADER.size + 5


def test_loopback_preserves_order():
    source, target, _ = loopback_pair()
    for k in range(5):
        source.send(Frame(MsgType.COMPONENTS_A, k, bytes([k])))
    got = [target.recv(timeout=1).iteration for _ in range(5)]
    assert got == [0, 1, 2, 3, 4]


def test_loopback_close_signals_peer():
    source, target, _ = loopback_pair()
    source.close()
    with pytest.raises(ChannelClosed):
        target.recv(timeout=1)
    with pytest.raises(ChannelClosed):
        source.send(Frame(MsgType.STOP, 0))


def test_loopback_recv_timeout():
    source, _, _ = loopback_pair()
    with pytest.raises(TimeoutError):
        source.recv(timeout=0.05)


def test_transcript_filters_and_summary():
    transcript = Transcript()
    transcript.record(DIR_SOURCE_TO_TARGET, Frame(MsgType.COMPONENTS_A, 0, b"aa"))
    transcript.record(DIR_SOURCE_TO_TARGET, Frame(MsgType.COMPONENTS_A, 1, b"bb"))
    transcript.record(DIR_TARGET_TO_SOURCE, Frame(MsgType.STOP, 1, b""))
    assert len(transcript.frames(DIR_SOURCE_TO_TARGET)) == 2
    assert len(transcript.frames(msg_type=MsgType.STOP)) == 1
    rows = transcript.summary_rows()
    assert (DIR_SOURCE_TO_TARGET, "COMPONENTS_A", 2, 4) in rows
    assert (DIR_TARGET_TO_SOURCE, "STOP", 1, 0) in rows


def test_tcp_pair_roundtrip():
    source, target, transcript = tcp_pair()
    try:
        payload = bytes(range(256)) * 64
        source.send(Frame(MsgType.COMPONENTS_A, 3, payload))
        frame = target.recv(timeout=10)
        assert frame.msg_type == MsgType.COMPONENTS_A
        assert frame.iteration == 3
        assert frame.payload == payload
        target.send(Frame(MsgType.STOP, 3))
        assert source.recv(timeout=10).msg_type == MsgType.STOP
    finally:
        source.close()
        target.close()
    assert transcript.payload_bytes(DIR_SOURCE_TO_TARGET) == len(payload)


def test_tcp_close_signals_peer():
    source, target, _ = tcp_pair()
    source.close()
    with pytest.raises(ChannelClosed):
        target.recv(timeout=10)
    target.close()


@settings(max_examples=25)
@given(st.lists(st.tuples(st.integers(0, 255), st.integers(0, 1000),
                          st.integers(0, 1000), st.binary(max_size=64)),
                min_size=1, max_size=5))
def test_families_roundtrip(raw):
    sections = [FamilySection(fid, n, c, data) for fid, n, c, data in raw]
    assert unpack_families(pack_families(sections)) == sections


def test_unpack_families_rejects_malformed():
    with pytest.raises(FramingError):
        unpack_families(b"")
    with pytest.raises(FramingError):
        unpack_families(b"\x01\x01")
    good = pack_families([FamilySection(1, 1, 1, b"xy")])
    with pytest.raises(FramingError):
        unpack_families(good + b"!")


def test_measure_cost_counts_only_cost_families():
    transcript = Transcript()
    payload = pack_families([
        FamilySection(1, 2, 3, b"q" * 10),
        FamilySection(2, 2, 1, b"l" * 4),
        FamilySection(3, 1, 1, b"align"),
    ])
    transcript.record(DIR_TARGET_TO_SOURCE, Frame(MsgType.COMPONENTS_B, 0, payload))
    transcript.record(DIR_TARGET_TO_SOURCE, Frame(MsgType.STOP, 0, b"ignored"))
    assert COST_FAMILIES == (1, 2)
    assert measure_cost(transcript, DIR_TARGET_TO_SOURCE) == 14
    assert measure_cost(transcript, DIR_SOURCE_TO_TARGET) == 0
