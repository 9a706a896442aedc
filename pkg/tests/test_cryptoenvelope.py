import base64

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from onionkey import keycore
from onionkey.cryptoenvelope import (
    HEADER,
    EncryptedFragment,
    RecipientKeyPair,
    RsaOaepScheme,
    X25519SealedScheme,
    decode_fragment,
    decrypt_fragment,
    encode_fragment,
    encrypt_fragment,
    load_public_key,
)
from onionkey.errors import DecryptionError, KeyFormatError
from onionkey.keycore import Fragment


@pytest.fixture(scope="module")
def alice():
    return RecipientKeyPair.generate()


@pytest.fixture(scope="module")
def bob():
    return RecipientKeyPair.generate()


@pytest.fixture(scope="module")
def small_keys():
    scheme = RsaOaepScheme(1024)
    return [RecipientKeyPair.generate(scheme) for _ in range(101)]


def test_header_layout():
    frag = Fragment(2, 10, "1011")
    raw = encode_fragment(frag)
    assert raw[:6] == b"\x00\x02\x00\x0a\x00\x04"
    assert raw[6:] == b"\xb0"
    assert decode_fragment(raw) == frag


def test_round_trip_listing_style(alice):
    frag = Fragment(2, 10, "1010100001101010000000011")
    ef = encrypt_fragment(frag, alice.public_key, "tag")
    out = decrypt_fragment(ef, alice)
    assert (out.index, out.total, out.bits) == (2, 10, frag.bits)
    assert f"part {out.index} of {out.total}" == "part 2 of 10"


def test_encryption_is_randomized(alice):
    frag = Fragment(1, 1, "1" * 77)
    a = encrypt_fragment(frag, alice.public_key)
    b = encrypt_fragment(frag, alice.public_key)
    assert a.ciphertext != b.ciphertext


def test_wrong_recipient_fails(alice, bob):
    ef = encrypt_fragment(Fragment(3, 10, "0110"), alice.public_key)
    with pytest.raises(DecryptionError):
        decrypt_fragment(ef, bob)


def test_hundred_wrong_keys_all_fail_cleanly(small_keys):
    owner, others = small_keys[0], small_keys[1:]
    ef = encrypt_fragment(Fragment(1, 3, "110" * 20), owner.public_key)
    failures = 0
    for kp in others:
        with pytest.raises(DecryptionError):
            decrypt_fragment(ef, kp)
        failures += 1
    assert failures == 100
    assert decrypt_fragment(ef, owner).bits == "110" * 20


@pytest.mark.parametrize("cut", [0, 1, 10, 200, -1])
def test_truncated_ciphertext(alice, cut):
    ef = encrypt_fragment(Fragment(1, 2, "1" * 40), alice.public_key)
    bad = EncryptedFragment(ef.ciphertext[:cut], "")
    with pytest.raises(DecryptionError):
        decrypt_fragment(bad, alice)


def test_flipped_byte_fails(alice):
    ef = encrypt_fragment(Fragment(1, 2, "1" * 40), alice.public_key)
    body = bytearray(ef.ciphertext)
    body[100] ^= 0x01
    with pytest.raises(DecryptionError):
        decrypt_fragment(EncryptedFragment(bytes(body), ""), alice)


def test_envelope_used_for_large_fragments(alice):
    # 768 bits in one fragment fits directly; 4096 does not
    scheme = RsaOaepScheme()
    limit = scheme.max_direct(alice.private_key.public_key())
    assert limit == 190
    big = keycore.split_key(keycore.generate_key(4096, np.random.default_rng(1)), 1).fragments[0]
    assert len(encode_fragment(big)) > limit
    ef = encrypt_fragment(big, alice.public_key)
    assert ef.ciphertext[0] == 0x02
    assert decrypt_fragment(ef, alice) == big
    small = Fragment(1, 1, "1" * 768)
    assert encrypt_fragment(small, alice.public_key).ciphertext[0] == 0x01


def test_envelope_tamper_detected(alice):
    big = Fragment(1, 1, "10" * 1024)
    ef = encrypt_fragment(big, alice.public_key)
    body = bytearray(ef.ciphertext)
    body[-1] ^= 0x80
    with pytest.raises(DecryptionError):
        decrypt_fragment(EncryptedFragment(bytes(body), ""), alice)


def test_x25519_scheme_round_trip_and_detection():
    kp = RecipientKeyPair.generate(X25519SealedScheme())
    key, scheme = load_public_key(kp.public_key)
    assert isinstance(scheme, X25519SealedScheme)
    frag = Fragment(4, 9, "0" * 300)
    ef = encrypt_fragment(frag, kp.public_key)
    assert ef.ciphertext[0] == 0x03
    assert decrypt_fragment(ef, kp) == frag
    other = RecipientKeyPair.generate(X25519SealedScheme())
    with pytest.raises(DecryptionError):
        decrypt_fragment(ef, other)


@pytest.mark.parametrize("text", ["", "not base64!", base64.b64encode(b"junk").decode()])
def test_bad_public_key_text(text):
    with pytest.raises(KeyFormatError):
        load_public_key(text)


def test_public_key_round_trip(alice):
    key, scheme = load_public_key(alice.public_key)
    assert isinstance(scheme, RsaOaepScheme) and scheme.key_size == 2048
    assert key.public_numbers() == alice.private_key.public_key().public_numbers()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2000), st.data())
def test_round_trip_property(alice, bit_length, data):
    bits = data.draw(st.text("01", min_size=bit_length, max_size=bit_length))
    total = data.draw(st.integers(1, 50))
    index = data.draw(st.integers(1, total))
    frag = Fragment(index, total, bits)
    assert decrypt_fragment(encrypt_fragment(frag, alice.public_key), alice) == frag


def test_ciphertext_hides_position(alice):
    """Byte histograms of first vs last fragment ciphertexts look alike."""
    key = keycore.generate_key(768, np.random.default_rng(3))
    frags = keycore.split_key(key, 10).fragments
    first, last = frags[0], frags[-1]
    rows = []
    for frag in (first, last):
        hist = np.zeros(256, dtype=np.int64)
        for _ in range(1000):
            ct = encrypt_fragment(frag, alice.public_key).ciphertext[1:]  # skip the constant mode byte
            hist += np.bincount(np.frombuffer(ct, dtype=np.uint8), minlength=256)
        rows.append(hist)
    _, p_value, _, _ = chi2_contingency(np.array(rows))
    assert p_value > 0.01
    assert len(encrypt_fragment(first, alice.public_key).ciphertext) == \
        len(encrypt_fragment(last, alice.public_key).ciphertext)


def test_decode_rejects_short_and_inconsistent():
    with pytest.raises(DecryptionError):
        decode_fragment(b"\x00\x01")
    with pytest.raises(DecryptionError):
        decode_fragment(HEADER.pack(1, 1, 16) + b"\x00")
    with pytest.raises(DecryptionError):
        decode_fragment(HEADER.pack(3, 2, 8) + b"\x00")
