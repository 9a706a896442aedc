import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from onionkey import wire
from onionkey.actors import ProxyConfig, proxy_handle_client_request
from onionkey.errors import ProtocolError, SchemaError

# reference request bodies, verbatim
CLIENT_BODY = """{
  "tagname":       "session-2026-05-12-001",
  "key_type":      768,
  "num_of_splits": 10,
  "shuffle":       true,
  "public_key":    "<client RSA public key>"
}"""

PROXY_BODY = """{
  "tagname":       "session-2026-05-12-001",
  "key_type":      768,
  "num_of_splits": 10,
  "shuffle":       true,
  "public_key":    "<client RSA public key>",
  "channels": [
    "http://10.0.0.5:4000/",
    "http://10.0.0.5:4001/"
  ]
}"""

CHANNELS = ("http://10.0.0.5:4000/", "http://10.0.0.5:4001/")


def test_client_payload_round_trip():
    msg = wire.decode(CLIENT_BODY.encode())
    assert msg == wire.KeyRequest("session-2026-05-12-001", 768, 10, True, "<client RSA public key>")
    assert json.loads(wire.encode(msg)) == json.loads(CLIENT_BODY)
    assert list(json.loads(wire.encode(msg))) == ["tagname", "key_type", "num_of_splits", "shuffle", "public_key"]


def test_proxy_payload_from_client_payload():
    req = wire.decode(CLIENT_BODY.encode(), wire.KeyRequest)
    fwd = proxy_handle_client_request(req, ProxyConfig("proxy-A", CHANNELS))
    assert json.loads(wire.encode(fwd)) == json.loads(PROXY_BODY)
    assert wire.decode(PROXY_BODY.encode()) == fwd
    assert wire.encode(fwd) == wire.encode(proxy_handle_client_request(req, ProxyConfig("proxy-A", CHANNELS)))


def test_encoding_is_canonical():
    msg = wire.decode(PROXY_BODY.encode())
    assert wire.encode(msg) == wire.encode(wire.decode(wire.encode(msg)))
    assert wire.encode(msg).startswith(b'{"tagname":"session-2026-05-12-001","key_type":768,')


def test_missing_shuffle_names_field():
    obj = json.loads(CLIENT_BODY)
    del obj["shuffle"]
    with pytest.raises(SchemaError) as err:
        wire.from_dict(obj, wire.KeyRequest)
    assert err.value.field == "shuffle"


def test_unknown_field_rejected():
    obj = json.loads(CLIENT_BODY)
    obj["priority"] = 1
    with pytest.raises(SchemaError) as err:
        wire.from_dict(obj)
    assert err.value.field == "priority"


@pytest.mark.parametrize("field, value", [("key_type", True), ("key_type", "768"), ("shuffle", 1),
                                          ("num_of_splits", 10.0), ("public_key", None)])
def test_wrong_types(field, value):
    obj = json.loads(CLIENT_BODY)
    obj[field] = value
    with pytest.raises(SchemaError) as err:
        wire.from_dict(obj, wire.KeyRequest)
    assert err.value.field == field


def test_empty_tagname_schema_ok_but_proxy_rejects():
    obj = json.loads(CLIENT_BODY)
    obj["tagname"] = ""
    req = wire.from_dict(obj)
    with pytest.raises(ProtocolError):
        proxy_handle_client_request(req, ProxyConfig("proxy-A", CHANNELS))


@pytest.mark.parametrize("channel", ["10.0.0.5:4000", "ftp://10.0.0.5:21/", "http://10.0.0.5/", "http://:80/"])
def test_bad_channels(channel):
    with pytest.raises(SchemaError) as err:
        wire.validate(wire.ProxyKeyRequest("t", 8, 1, False, "k", (channel,)))
    assert err.value.field == "channels"


def test_not_json():
    with pytest.raises(SchemaError):
        wire.decode(b"\xff\xfe")
    with pytest.raises(SchemaError):
        wire.decode(b"[1, 2]")


def test_delivery_and_ack():
    d = wire.FragmentDelivery("t", ("QUJD", "REVG"), 2)
    assert wire.decode(wire.encode(d)) == d
    ack = wire.KeyAck("t", "issued")
    assert wire.decode(wire.encode(ack)) == ack
    with pytest.raises(SchemaError):
        wire.encode(wire.FragmentDelivery("t", (), 1))


def test_client_part_inverse():
    fwd = wire.decode(PROXY_BODY.encode())
    assert wire.ProxyKeyRequest.from_client(fwd.client_part(), fwd.channels) == fwd


_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=40)
_pos = st.integers(1, 2**31)
_channel = st.builds(lambda a, p: f"http://10.0.{a}.5:{p}/", st.integers(0, 255), st.integers(1, 65535))

_messages = st.one_of(
    st.builds(wire.KeyRequest, _text, _pos, _pos, st.booleans(), _text),
    st.builds(wire.ProxyKeyRequest, _text, _pos, _pos, st.booleans(), _text,
              st.lists(_channel, min_size=1, max_size=5).map(tuple)),
    st.builds(wire.FragmentDelivery, _text, st.lists(_text, min_size=1, max_size=5).map(tuple),
              st.integers(0, 1000)),
    st.builds(wire.KeyAck, _text, _text),
)


@given(_messages)
def test_round_trip_property(msg):
    data = wire.encode(msg)
    assert wire.decode(data, type(msg)) == msg
    assert wire.encode(wire.decode(data, type(msg))) == data
