"""Patchable word-level stream encryption.

Every backend is a keystream generator driven through three pure functions:
``init(key, iv)`` builds a fresh state, ``encrypt_word(state, m)`` returns the
successor state together with ``m ^ w`` for the next keystream word ``w`` and
``decrypt_word`` is the same map.  Because the transform is a plain XOR,
ciphertexts can be patched after emission::

    encrypt_word(s, m ^ d)[1] == patch_ciphertext(encrypt_word(s, m)[1], d)

Backends
--------
``trivium``
    eSTREAM Trivium, 80-bit key and IV, 1152 warm-up steps.  Keystream words
    are four consecutive output bytes read little-endian.
``aes-ctr``
    AES-128 in counter mode.  One AES block yields four little-endian words.
``null``
    Identity keystream.  Used to run prepared-but-unencrypted images through
    the same fetch path as encrypted ones.
"""

from __future__ import annotations

import functools
import os
import re
from dataclasses import dataclass
from typing import NamedTuple

MASK32 = 0xFFFFFFFF
IV_MAGIC = 0xFFFFFFFF
IV_BITS = 80
IV_MASK = (1 << IV_BITS) - 1


class ConfigError(ValueError):
    """Raised on key/IV width mismatches or unknown backends."""


# --------------------------------------------------------------------------
# Trivium
# --------------------------------------------------------------------------
#
# The 288-bit state is kept as three Python ints A (s1..s93), B (s94..s177)
# and C (s178..s288).  Bit k of the register is stored at position
# (last - k), so shifting right by 32 advances the register by 32 steps and
# a 32-bit window starting at a tap position yields that tap for 32
# consecutive steps at once.

_REV8 = bytes(int(f"{i:08b}"[::-1], 2) for i in range(256))
_A_MASK = (1 << 93) - 1
_B_MASK = (1 << 84) - 1
_C_MASK = (1 << 111) - 1


class TriviumState(NamedTuple):
    a: int
    b: int
    c: int


def _bits80(data: bytes) -> int:
    """Map 10 eSTREAM key/IV bytes to an int whose bit i is bit i+1 of the vector."""
    return int.from_bytes(bytes(_REV8[x] for x in data[::-1]), "little")


def _spread(value: int, top: int) -> int:
    # bit i of `value` -> bit (top - i)
    out = 0
    for i in range(IV_BITS):
        if (value >> i) & 1:
            out |= 1 << (top - i)
    return out


def _chunk(a: int, b: int, c: int) -> tuple[int, int, int, int]:
    """Advance 32 steps; returns the new registers and the 32 output bits (LSB first)."""
    t1 = (a >> 27) ^ a
    t2 = (b >> 15) ^ b
    t3 = (c >> 45) ^ c
    z = (t1 ^ t2 ^ t3) & MASK32
    t1 = (t1 ^ ((a >> 2) & (a >> 1)) ^ (b >> 6)) & MASK32
    t2 = (t2 ^ ((b >> 2) & (b >> 1)) ^ (c >> 24)) & MASK32
    t3 = (t3 ^ ((c >> 2) & (c >> 1)) ^ (a >> 24)) & MASK32
    return (a >> 32) | (t3 << 61), (b >> 32) | (t1 << 52), (c >> 32) | (t2 << 79), z


@functools.cache
def _compiled():
    """The compiled keystream kernel, or None for the pure-Python path."""
    if os.environ.get("POLEN_PURE"):
        return None
    try:
        from . import _core
    except ImportError:  # pragma: no cover - extension not built
        return None
    return _core


class Trivium:
    name = "trivium"
    key_bytes = 10
    iv_bits = IV_BITS

    def load_key(self, key: bytes) -> int:
        """Register A as it stands right after key loading."""
        _check_key(self, key)
        return _spread(_bits80(key), 92)

    def init(self, key: bytes, iv: int) -> TriviumState:
        _check_iv(self, iv)
        return self.init_loaded(self.load_key(key), iv)

    @staticmethod
    def init_loaded(key_a: int, iv: int) -> TriviumState:
        core = _compiled()
        if core is not None:
            return core.trivium_init(key_a, iv)
        iv_bytes = iv.to_bytes(10, "little")
        a, b, c = key_a, _spread(_bits80(iv_bytes), 83), 0b111
        for _ in range(36):
            a, b, c, _z = _chunk(a, b, c)
        return TriviumState(a, b, c)

    def encrypt_word(self, state: TriviumState, m: int) -> tuple[TriviumState, int]:
        a, b, c, z = _chunk(*state)
        return TriviumState(a, b, c), (m ^ z) & MASK32

    def slot_iv(self, words) -> int:
        return iv_from_slot(words)[0]

    def keystream(self, key: bytes, iv: int, nbytes: int) -> bytes:
        state = self.init(key, iv)
        core = _compiled()
        if core is not None:
            _, words = core.trivium_words(state, (nbytes + 3) // 4)
            return b"".join(w.to_bytes(4, "little") for w in words)[:nbytes]
        out = bytearray()
        while len(out) < nbytes:
            state, w = self.encrypt_word(state, 0)
            out += w.to_bytes(4, "little")
        return bytes(out[:nbytes])


# --------------------------------------------------------------------------
# AES-CTR
# --------------------------------------------------------------------------


class CtrState(NamedTuple):
    key: bytes
    counter: int
    index: int  # words of the current block already consumed


@functools.lru_cache(maxsize=16)
def _aes_encryptor(key: bytes):
    from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

    return Cipher(algorithms.AES(key), modes.ECB())


@functools.lru_cache(maxsize=4096)
def _aes_block(key: bytes, counter: int) -> bytes:
    enc = _aes_encryptor(key).encryptor()
    return enc.update(counter.to_bytes(16, "big")) + enc.finalize()


class AesCtr:
    name = "aes-ctr"
    key_bytes = 16
    iv_bits = 128

    def init(self, key: bytes, iv: int) -> CtrState:
        _check_key(self, key)
        _check_iv(self, iv)
        return CtrState(bytes(key), iv, 0)

    def encrypt_word(self, state: CtrState, m: int) -> tuple[CtrState, int]:
        key, counter, index = state
        block = _aes_block(key, counter)
        w = int.from_bytes(block[4 * index : 4 * index + 4], "little")
        if index == 3:
            nxt = CtrState(key, (counter + 1) & ((1 << 128) - 1), 0)
        else:
            nxt = CtrState(key, counter, index + 1)
        return nxt, (m ^ w) & MASK32

    def slot_iv(self, words) -> int:
        # the 80-bit slot IV occupies the high counter bits; blocks count below
        return iv_from_slot(words)[0] << 48


# --------------------------------------------------------------------------
# identity
# --------------------------------------------------------------------------


class NullCipher:
    name = "null"
    key_bytes = None
    iv_bits = 128

    def init(self, key: bytes, iv: int) -> int:
        return 0

    def encrypt_word(self, state: int, m: int) -> tuple[int, int]:
        return state, m & MASK32

    def slot_iv(self, words) -> int:
        return iv_from_slot(words)[0]


BACKENDS = {b.name: b for b in (Trivium(), AesCtr(), NullCipher())}


def backend(name: str):
    try:
        return BACKENDS[name]
    except KeyError:
        raise ConfigError(f"unknown cipher backend {name!r}") from None


def _check_key(b, key) -> None:
    if b.key_bytes is not None and len(key) != b.key_bytes:
        raise ConfigError(f"{b.name} expects a {8 * b.key_bytes}-bit key, got {8 * len(key)} bits")


def _check_iv(b, iv: int) -> None:
    if not 0 <= iv < (1 << b.iv_bits):
        raise ConfigError(f"{b.name} IV must fit in {b.iv_bits} bits")


def _backend_of(state):
    if isinstance(state, TriviumState):
        return BACKENDS["trivium"]
    if isinstance(state, CtrState):
        return BACKENDS["aes-ctr"]
    return BACKENDS["null"]


def init(key: bytes, iv: int, backend_name: str = "trivium"):
    return backend(backend_name).init(key, iv)


def encrypt_word(state, m: int):
    """Return ``(next_state, m ^ keystream_word)``."""
    return _backend_of(state).encrypt_word(state, m)


def decrypt_word(state, c: int):
    """Inverse of :func:`encrypt_word`; the XOR keystream makes it the same map."""
    return _backend_of(state).encrypt_word(state, c)


def patch_ciphertext(c: int, delta: int) -> int:
    return (c ^ delta) & MASK32


def encrypt_words(state, words):
    """Chain-encrypt a sequence; returns ``(final_state, ciphertext_list)``."""
    out = []
    for m in words:
        state, c = encrypt_word(state, m)
        out.append(c)
    return state, out


# --------------------------------------------------------------------------
# IV slots and configuration
# --------------------------------------------------------------------------


def iv_to_slot(iv: int, pad: int = 0) -> tuple[int, int, int]:
    """Encode an 80-bit IV and 16 padding bits as three little-endian words."""
    if not 0 <= iv <= IV_MASK:
        raise ConfigError("IV must fit in 80 bits")
    return iv & MASK32, (iv >> 32) & MASK32, ((iv >> 64) & 0xFFFF) | ((pad & 0xFFFF) << 16)


def iv_from_slot(words) -> tuple[int, int]:
    w0, w1, w2 = words
    return w0 | (w1 << 32) | ((w2 & 0xFFFF) << 64), w2 >> 16


def parse_hex_key(text: str, backend_name: str = "trivium") -> bytes:
    digits = re.sub(r"[\s_:]", "", text)
    if digits[:2].lower() == "0x":
        digits = digits[2:]
    try:
        key = bytes.fromhex(digits)
    except ValueError:
        raise ConfigError(f"key is not valid hex: {text!r}") from None
    _check_key(backend(backend_name), key)
    return key


# init cost per keystream width for Trivium
TRIVIUM_INIT_COST = {32: 35, 128: 9}


@dataclass(frozen=True)
class CipherConfig:
    """Backend choice plus the modelled re-initialisation cost ``k_T``."""

    backend: str = "trivium"
    width_bits: int = 32
    k_T: int | None = None

    def __post_init__(self):
        backend(self.backend)
        if self.k_T is None:
            default = TRIVIUM_INIT_COST.get(self.width_bits, 1) if self.backend == "trivium" else 1
            object.__setattr__(self, "k_T", default)
        if self.k_T < 1:
            raise ConfigError("k_T must be at least 1")

    @classmethod
    def for_cost(cls, k_T: int, backend_name: str = "trivium") -> "CipherConfig":
        width = {v: k for k, v in TRIVIUM_INIT_COST.items()}.get(k_T, 32)
        return cls(backend_name, width, k_T)

    @property
    def impl(self):
        return backend(self.backend)
