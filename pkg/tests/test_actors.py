import hashlib
import hmac
import math
import re

import numpy as np
import pytest

from onionkey import keycore, wire
from onionkey.actors import (
    COMPLETED,
    FAILED,
    ISSUED,
    QKMS,
    WAITING,
    Client,
    Proxy,
    ProxyConfig,
    SESSION_KDF_INFO,
    StubCryptoTimer,
    derive_session_cipher,
    group_bundles,
    proxy_handle_client_request,
    qkms_assign_channels,
)
from onionkey.cryptoenvelope import RecipientKeyPair, encrypt_fragment
from onionkey.errors import (
    ConfigurationError,
    DecryptionError,
    ParameterError,
    ParameterMismatchError,
    ProtocolError,
    SchemaError,
    TagnameReuseError,
)
from onionkey.keycore import Fragment, SessionKey
from onionkey.oniontransport import RelayNetwork, SimClock, SimulatedOnionNetwork
from onionkey.session import SessionConfig, run_session

CH = ("http://10.0.0.5:4000/", "http://10.0.0.5:4001/")


@pytest.fixture(scope="module")
def keys():
    return {"A": RecipientKeyPair.generate(), "B": RecipientKeyPair.generate()}


def _qkms(seed=0, **kw):
    clock = SimClock()
    return QKMS(np.random.default_rng(seed), crypto=StubCryptoTimer(0.0, clock), clock=clock, **kw)


def _req(keypair, tag="T", key_type=768, n=10, shuffle=True, channels=CH):
    return wire.ProxyKeyRequest(tag, key_type, n, shuffle, keypair.public_key, channels)


# -- QKMS pairing ----------------------------------------------------------------------

def test_single_request_waits(keys):
    q = _qkms()
    assert q.handle_request(_req(keys["A"]), "proxy-A") == []
    assert q.sessions["T"].state == WAITING
    assert q.issued_keys == {}


def test_matching_pair_issues_one_key(keys):
    q = _qkms()
    q.handle_request(_req(keys["A"]), "proxy-A")
    actions = q.handle_request(_req(keys["B"]), "proxy-B")
    assert list(q.issued_keys) == ["T"]
    assert q.sessions["T"].state == ISSUED
    for proxy in ("proxy-A", "proxy-B"):
        mine = [a for a in actions if a.proxy_id == proxy]
        assert 1 <= len(mine) <= 2
        assert sum(len(a.bundle.encrypted_fragments) for a in mine) == 10
        assert all(a.bundle.channel in CH for a in mine)


def test_different_tags_wait_independently(keys):
    q = _qkms()
    q.handle_request(_req(keys["A"], tag="A"), "proxy-A")
    q.handle_request(_req(keys["B"], tag="B"), "proxy-B")
    assert {t: r.state for t, r in q.sessions.items()} == {"A": WAITING, "B": WAITING}


def test_mismatch_rejects_second_and_keeps_waiting(keys):
    q = _qkms()
    q.handle_request(_req(keys["A"], n=10), "proxy-A")
    with pytest.raises(ParameterMismatchError):
        q.handle_request(_req(keys["B"], n=5), "proxy-B")
    assert q.sessions["T"].state == WAITING
    assert q.issued_keys == {}
    q.handle_request(_req(keys["B"], n=10), "proxy-B")
    assert "T" in q.issued_keys


def test_tagname_single_use(keys):
    q = _qkms()
    q.handle_request(_req(keys["A"]), "proxy-A")
    q.handle_request(_req(keys["B"]), "proxy-B")
    with pytest.raises(TagnameReuseError):
        q.handle_request(_req(keys["A"]), "proxy-C")


def test_same_proxy_twice_rejected(keys):
    q = _qkms()
    q.handle_request(_req(keys["A"]), "proxy-A")
    with pytest.raises(ProtocolError):
        q.handle_request(_req(keys["A"]), "proxy-A")


def test_timeout_expires_and_blocks_reuse(keys):
    q = _qkms(session_timeout_ms=1000)
    q.handle_request(_req(keys["A"]), "proxy-A", now=0)
    with pytest.raises(TagnameReuseError):
        q.handle_request(_req(keys["B"]), "proxy-B", now=5000)
    assert q.sessions["T"].state == FAILED and q.sessions["T"].reason == "expired"


@pytest.mark.parametrize("tag, key_type, n", [("", 768, 10), ("T", 12, 2), ("T", 16, 17), ("T", 16, 0)])
def test_bad_parameters(keys, tag, key_type, n):
    q = _qkms()
    with pytest.raises((ProtocolError, SchemaError)):
        q.handle_request(_req(keys["A"], tag=tag, key_type=key_type, n=n), "proxy-A")


def test_qkms_trace_lines(keys):
    q = _qkms(3)
    q.handle_request(_req(keys["A"]), "proxy-A")
    q.handle_request(_req(keys["B"]), "proxy-B")
    parts = [line for line in q.trace if line.startswith("Part ")]
    assert len(parts) == 20
    assert all(re.fullmatch(r"Part (\d+) of 10: [01]{76,77}", line) for line in parts)
    key = q.issued_keys["T"].bits
    first_block = sorted(parts[:10], key=lambda s: int(s.split()[1]))
    assert "".join(s.split(": ")[1] for s in first_block) == key


# -- channel assignment -----------------------------------------------------------------

def test_single_channel_gets_everything():
    assert qkms_assign_channels(7, ["only"], np.random.default_rng(0)) == ["only"] * 7
    with pytest.raises(ParameterError):
        qkms_assign_channels(3, [], np.random.default_rng(0))


def test_channel_frequencies():
    runs = 10_000
    rng = np.random.default_rng(99)
    first = np.zeros(10)
    one_sided = 0
    for _ in range(runs):
        picks = qkms_assign_channels(10, CH, rng)
        hits = np.array([p == CH[0] for p in picks])
        first += hits
        one_sided += hits.all() or not hits.any()
    se = math.sqrt(0.25 / runs)
    # ten bands at 3 SE: two or more exceedances has probability ~3e-4 when unbiased
    assert np.sum(np.abs(first / runs - 0.5) > 3 * se) <= 1
    pooled_se = math.sqrt(0.25 / (10 * runs))
    assert abs(first.sum() / (10 * runs) - 0.5) <= 3 * pooled_se
    p_all = 2 * 0.5 ** 10
    assert abs(p_all - 0.001953125) < 1e-12
    assert abs(one_sided / runs - p_all) <= 3 * math.sqrt(p_all * (1 - p_all) / runs)


def test_group_bundles_skips_empty_channels(keys):
    ef = [encrypt_fragment(Fragment(i, 3, "1"), keys["A"].public_key) for i in (1, 2, 3)]
    bundles = group_bundles(ef, [CH[1]] * 3, CH, first_id=5)
    assert len(bundles) == 1 and bundles[0].channel == CH[1] and bundles[0].bundle_id == 5


# -- proxy --------------------------------------------------------------------------

def test_proxy_rejects_empty_tag_and_no_channels(keys):
    req = wire.KeyRequest("", 768, 10, True, keys["A"].public_key)
    with pytest.raises(ProtocolError):
        proxy_handle_client_request(req, ProxyConfig("p", CH))
    with pytest.raises(ConfigurationError):
        proxy_handle_client_request(wire.KeyRequest("T", 768, 10, True, "k"), ProxyConfig("p", ()))


def _proxy_net(fault=None):
    net = SimulatedOnionNetwork(RelayNetwork.build(20), None, np.random.default_rng(1))
    got = []
    net.register("client.onion", lambda s, p, b: got.append(wire.decode(b)))
    proxy = Proxy(ProxyConfig("proxy-A", CH, client_address="client.onion"))
    proxy.attach(net, "proxy.onion")
    if fault:
        net.inject_fault(fault)
    return net, proxy, got


def _deliveries(k):
    return [wire.FragmentDelivery("T", (f"frag{i}",), i) for i in range(1, k + 1)]


def test_three_bundles_three_circuits():
    net, proxy, got = _proxy_net()
    receipts = proxy.forward_bundles(_deliveries(3), "client.onion")
    net.run()
    assert proxy.transport.epoch == 3
    assert len({r.circuit_id for r in receipts}) == 3
    assert len({o.circuit_id for o in net.observations}) == 3
    assert [d.bundle_id for d in got] == [1, 2, 3]


def test_one_bundle_one_circuit():
    net, proxy, _ = _proxy_net()
    receipts = proxy.forward_bundles(_deliveries(1), "client.onion")
    assert len(receipts) == 1 and proxy.transport.epoch == 1


def test_failure_on_second_bundle_stops_session():
    net, proxy, got = _proxy_net(fault=lambda s, d, p, b: b'"bundle_id":2' in b)
    receipts = proxy.forward_bundles(_deliveries(3), "client.onion")
    net.run()
    assert len(receipts) == 1
    assert "T" in proxy.failed
    assert [d.bundle_id for d in got] == [1]
    assert any(line.startswith("fail tag=T id=2") for line in proxy.log)
    proxy.forward_bundles(_deliveries(3)[2:], "client.onion")
    assert any(line.startswith("drop tag=T id=3") for line in proxy.log)


# -- client ---------------------------------------------------------------------------

def _client_with_session(keypair, n=10, key_type=80):
    c = Client("client-A", keypair, crypto=StubCryptoTimer(10.0))
    c.make_request("T", key_type, n, True)
    key = keycore.generate_key(key_type, np.random.default_rng(4))
    fs = keycore.shuffle_fragments(keycore.split_key(key, n), np.random.default_rng(5))
    enc = [encrypt_fragment(f, keypair.public_key, "T").b64() for f in fs]
    return c, key, fs, enc


def test_client_reassembles_shuffled_arrivals(keys):
    c, key, fs, enc = _client_with_session(keys["A"])
    c.receive(wire.FragmentDelivery("T", tuple(enc[:4]), 1))
    state = c.receive(wire.FragmentDelivery("T", tuple(enc[4:]), 2))
    assert state.complete and c.session_key("T") == key
    assert c.trace[-1] == "[CLIENT] All 10 fragments received; reassembling."
    assert re.fullmatch(r"\[CLIENT\] Received share \(idx=1\): [A-Za-z0-9+/=]{23}\.\.\.", c.trace[0])
    assert re.fullmatch(r"Decrypted: part \d+ of 10, [01]{8}\.\.\.", c.trace[1])
    assert c.trace[2] == "Decryption time: 0.010 s"


def test_identical_duplicate_ignored(keys):
    c, key, fs, enc = _client_with_session(keys["A"])
    c.receive(wire.FragmentDelivery("T", tuple(enc[:3]), 1))
    state = c.receive(wire.FragmentDelivery("T", (enc[2],), 2))
    assert len(state.received) == 3 and not state.complete and not state.failed


def test_conflicting_duplicate_fails(keys):
    c, key, fs, enc = _client_with_session(keys["A"])
    c.receive(wire.FragmentDelivery("T", (enc[0],), 1))
    frag = fs.fragments[0]
    flipped = "".join("1" if b == "0" else "0" for b in frag.bits)
    evil = encrypt_fragment(Fragment(frag.index, frag.total, flipped), keys["A"].public_key).b64()
    with pytest.raises(ProtocolError):
        c.receive(wire.FragmentDelivery("T", (evil,), 2))
    assert c.sessions["T"].failed


def test_wrong_recipient_and_wrong_total_fail(keys):
    c, key, fs, enc = _client_with_session(keys["A"])
    foreign = encrypt_fragment(fs.fragments[0], keys["B"].public_key).b64()
    with pytest.raises(ProtocolError):
        c.receive(wire.FragmentDelivery("T", (foreign,), 1))
    c2, *_ = _client_with_session(keys["A"])
    odd = encrypt_fragment(Fragment(1, 9, "1"), keys["A"].public_key).b64()
    with pytest.raises(ProtocolError):
        c2.receive(wire.FragmentDelivery("T", (odd,), 1))


def test_client_refuses_unknown_tag_and_reuse(keys):
    c, *_ = _client_with_session(keys["A"])
    with pytest.raises(ProtocolError):
        c.receive(wire.FragmentDelivery("other", ("AAAA",), 1))
    with pytest.raises(TagnameReuseError):
        c.make_request("T", 80, 10, True)


# -- session cipher -------------------------------------------------------------------

def _hkdf_reference(ikm: bytes, info: bytes, length: int = 32) -> bytes:
    """RFC 5869 written out with hmac, salt absent (HashLen zero bytes)."""
    prk = hmac.new(b"\x00" * 32, ikm, hashlib.sha256).digest()
    out, block, counter = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:length]


def test_session_cipher_kdf_matches_reference():
    key = keycore.generate_key(768, np.random.default_rng(12))
    cipher = derive_session_cipher(key)
    assert len(cipher.key) == 32
    assert cipher.key == _hkdf_reference(key.to_bytes(), SESSION_KDF_INFO)


def test_session_cipher_probe():
    key = keycore.generate_key(256, np.random.default_rng(1))
    a, b = derive_session_cipher(key), derive_session_cipher(SessionKey(key.bits))
    assert b.decrypt(a.encrypt(b"probe", b"ad"), b"ad") == b"probe"
    flipped = SessionKey(("1" if key.bits[0] == "0" else "0") + key.bits[1:])
    with pytest.raises(DecryptionError):
        derive_session_cipher(flipped).decrypt(a.encrypt(b"probe"))
    with pytest.raises(ParameterError):
        derive_session_cipher(SessionKey("1" * 64))


# -- end to end -----------------------------------------------------------------------

def test_default_session(keys):
    out = run_session(SessionConfig(), keys)
    rep = out.report
    assert rep.keys_agree and rep.key_reconstructed and not rep.failure
    assert out.qkms.sessions[SessionConfig().tagname].state == COMPLETED
    for name in ("A", "B"):
        assert len(set(rep.circuit_ids[name])) == rep.bundles_per_client[name]


def test_single_fragment_session(keys):
    out = run_session(SessionConfig(num_of_splits=1, seed=3), keys)
    assert out.report.keys_agree
    assert out.report.bundles_per_client == {"A": 1, "B": 1}
    assert all(len(ids) == 1 for ids in out.report.circuit_ids.values())


def test_session_failure_is_reported(keys):
    net = SimulatedOnionNetwork(RelayNetwork.build(100), None, np.random.default_rng(0))
    net.inject_fault(lambda s, d, p, b: d == "clientB.onion")
    out = run_session(SessionConfig(seed=1), keys, net=net)
    assert not out.report.keys_agree
    assert out.report.failure
