import json
import struct

import pytest
from hypothesis import given, strategies as st

from sigmabridge import snap


class TestGoldenFrames:
    def test_read_request_encoding(self):
        frame = snap.encode_frame(snap.make_read(1, 0, 2255))
        body = b'{"op":"read","rid":1,"ns":0,"id":2255}'
        assert len(body) == 38
        assert frame == struct.pack(">I", 38) + body

    def test_empty_object(self):
        assert snap.encode_frame({}) == b"\x00\x00\x00\x02{}"

    def test_builder_key_order(self):
        assert list(snap.make_hello(1, "u", "p")) == ["op", "rid", "user", "pass"]
        assert list(snap.make_read(2, 1, "x")) == ["op", "rid", "ns", "id"]
        assert list(snap.make_attrs(3, 1, "x")) == ["op", "rid", "ns", "id"]
        assert list(snap.make_browse(4, 1, "x")) == ["op", "rid", "ns", "id"]
        assert list(snap.make_subscribe(5, 100)) == ["op", "rid", "interval_ms"]


class TestDecoding:
    def test_incomplete_prefix(self):
        assert snap.try_decode(b"\x00\x00") == (None, 0)

    def test_incomplete_body(self):
        frame = snap.encode_frame({"a": 1})
        assert snap.try_decode(frame[:-1]) == (None, 0)

    def test_complete_frame_with_trailing_bytes(self):
        frame = snap.encode_frame({"a": 1})
        obj, consumed = snap.try_decode(frame + b"xxx")
        assert obj == {"a": 1}
        assert consumed == len(frame)

    def test_oversize_declaration_is_a_violation(self):
        with pytest.raises(snap.SnapProtocolViolation):
            snap.try_decode(struct.pack(">I", snap.MAX_FRAME + 1) + b"x")

    def test_oversize_body_refused_on_encode(self):
        with pytest.raises(snap.SnapEncodeError):
            snap.encode_frame({"blob": "x" * snap.MAX_FRAME})

    def test_bad_utf8_is_malformed(self):
        with pytest.raises(snap.SnapMalformed):
            snap.try_decode(struct.pack(">I", 2) + b"\xff\xfe")

    def test_bad_json_is_malformed(self):
        with pytest.raises(snap.SnapMalformed):
            snap.try_decode(struct.pack(">I", 3) + b"{,}")

    def test_non_object_body_is_malformed(self):
        payload = json.dumps([1, 2]).encode()
        with pytest.raises(snap.SnapMalformed):
            snap.try_decode(struct.pack(">I", len(payload)) + payload)


class TestStreaming:
    def test_two_frames_one_feed(self):
        decoder = snap.FrameDecoder()
        data = snap.encode_frame({"a": 1}) + snap.encode_frame({"b": 2})
        assert decoder.feed(data) == [{"a": 1}, {"b": 2}]

    def test_byte_at_a_time(self):
        decoder = snap.FrameDecoder()
        data = snap.encode_frame(snap.make_read(9, 2, 1001))
        out = []
        for i in range(len(data)):
            out.extend(decoder.feed(data[i:i + 1]))
        assert out == [{"op": "read", "rid": 9, "ns": 2, "id": 1001}]

    @given(st.lists(st.dictionaries(st.text(max_size=8),
                                    st.one_of(st.integers(), st.text(max_size=8),
                                              st.booleans(), st.none()),
                                    max_size=4),
                    min_size=1, max_size=6),
           st.randoms())
    def test_arbitrary_split_points(self, messages, rng):
        stream = b"".join(snap.encode_frame(m) for m in messages)
        decoder = snap.FrameDecoder()
        out = []
        i = 0
        while i < len(stream):
            j = min(len(stream), i + rng.randint(1, 7))
            out.extend(decoder.feed(stream[i:j]))
            i = j
        assert out == messages


class TestRoundTrip:
    @given(st.dictionaries(st.text(max_size=16),
                           st.one_of(st.integers(min_value=-(2**63), max_value=2**63),
                                     st.floats(allow_nan=False, allow_infinity=False),
                                     st.text(max_size=32), st.booleans(), st.none()),
                           max_size=8))
    def test_encode_decode_identity(self, body):
        obj, consumed = snap.try_decode(snap.encode_frame(body))
        assert obj == body
        assert consumed == len(snap.encode_frame(body))

    def test_unicode_payload(self):
        body = {"displayName": "Kühler Σ", "value": "温度"}
        obj, _ = snap.try_decode(snap.encode_frame(body))
        assert obj == body


class TestResponses:
    def test_ok_response_shape(self):
        resp = snap.ok_response(4, {"value": 1})
        assert resp == {"rid": 4, "ok": True, "value": 1}
        assert list(resp) == ["rid", "ok", "value"]

    def test_err_response_shape(self):
        assert snap.err_response(4, snap.BAD_AUTH) == {"rid": 4, "ok": False,
                                                       "err": "BAD_AUTH"}
