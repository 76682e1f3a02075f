"""Offline block encryptor for PVO1 images."""

from __future__ import annotations

import random
from dataclasses import dataclass

from . import cipher
from .asm import IV_MAGIC, Image


class EncryptError(Exception):
    pass


@dataclass(frozen=True)
class Slot:
    addr: int   # byte address of the IV slot
    count: int  # nb_I


@dataclass(frozen=True)
class BlockCheck:
    addr: int
    count: int
    ok: bool


@dataclass
class VerifyReport:
    blocks: list[BlockCheck]

    @property
    def ok(self) -> bool:
        return all(b.ok for b in self.blocks)

    @property
    def failing(self) -> list[BlockCheck]:
        return [b for b in self.blocks if not b.ok]


def scan_slots(image: Image) -> list[Slot]:
    """Locate every ``[magic, magic, nb_I]`` slot inside the encrypted regions."""
    slots: list[Slot] = []
    words = image.words
    for region in image.encrypted_regions():
        p = (region.start - image.base) >> 2
        end = (region.end - image.base) >> 2
        while p < end:
            if words[p] != IV_MAGIC:
                raise EncryptError(f"stray word {words[p]:#010x} at {image.base + 4 * p:#x}: expected an IV slot")
            if p + 2 >= end or words[p + 1] != IV_MAGIC:
                raise EncryptError(f"malformed IV slot at {image.base + 4 * p:#x}")
            n = words[p + 2]
            if n == 0 or n == IV_MAGIC:
                raise EncryptError(f"malformed IV slot count at {image.base + 4 * p:#x}")
            if p + 3 + n > end:
                raise EncryptError(f"block at {image.base + 4 * p:#x} overruns its region")
            body = words[p + 3 : p + 3 + n]
            if IV_MAGIC in body:
                raise EncryptError(f"magic word inside the block at {image.base + 4 * p:#x}")
            slots.append(Slot(image.base + 4 * p, n))
            p += 3 + n
    return slots


def _draw_slot(rng: random.Random, used: set[int]) -> tuple[int, int, int]:
    while True:
        iv = rng.getrandbits(80)
        if iv not in used:
            used.add(iv)
            return cipher.iv_to_slot(iv, rng.getrandbits(16))


def encrypt_image(image: Image, key: bytes, rng_seed: int | None = 0, *,
                  backend: str = "trivium", secure_random: bool = False) -> Image:
    """Encrypt every block of every encrypted region under a fresh IV.

    For each slot: read nb_I, draw an IV, overwrite the slot, initialise the
    cipher and encrypt the next nb_I words in place.  ``rng_seed`` makes the
    IV draws reproducible; ``secure_random`` uses OS entropy instead.
    """
    impl = cipher.backend(backend)
    has_region = bool(image.encrypted_regions())
    try:
        slots = scan_slots(image)
    except EncryptError as e:
        if has_region and all(w != IV_MAGIC for w in image.words):
            raise EncryptError("no IV slots left: image already encrypted") from e
        raise
    if has_region and not slots:
        raise EncryptError("no IV slots found in the encrypted regions")
    rng = random.SystemRandom() if secure_random else random.Random(rng_seed)
    out = image.copy()
    used: set[int] = set()
    for slot in slots:
        p = (slot.addr - image.base) >> 2
        words = _draw_slot(rng, used)
        out.words[p : p + 3] = words
        state = impl.init(key, impl.slot_iv(words))
        for k in range(p + 3, p + 3 + slot.count):
            state, out.words[k] = impl.encrypt_word(state, out.words[k])
    return out


def decrypt_block(words, key: bytes, backend: str = "trivium") -> list[int]:
    """Decrypt ``[iv0, iv1, iv2, c0, c1, ...]`` with a fresh software cipher."""
    impl = cipher.backend(backend)
    state = impl.init(key, impl.slot_iv(words[:3]))
    out = []
    for c in words[3:]:
        state, m = impl.encrypt_word(state, c)
        out.append(m)
    return out


def verify_image(plain: Image, enc: Image, key: bytes, backend: str = "trivium") -> VerifyReport:
    """Decrypt every block of `enc` and compare it with the same block of `plain`."""
    if (plain.base, len(plain.words), plain.entry) != (enc.base, len(enc.words), enc.entry) or plain.regions != enc.regions:
        raise EncryptError("images do not share a layout")
    checks = []
    for slot in scan_slots(plain):
        p = (slot.addr - plain.base) >> 2
        got = decrypt_block(enc.words[p : p + 3 + slot.count], key, backend)
        ok = got == plain.words[p + 3 : p + 3 + slot.count]
        checks.append(BlockCheck(slot.addr, slot.count, ok))
    outside_ok = all(
        plain.words[k] == enc.words[k]
        for r in plain.regions if r.kind == "plain"
        for k in range((r.start - plain.base) >> 2, (r.end - plain.base) >> 2)
    )
    if not outside_ok:
        checks.append(BlockCheck(-1, 0, False))
    return VerifyReport(checks)


def residual_magic(image: Image) -> list[int]:
    """Addresses of magic words left inside encrypted regions."""
    out = []
    for r in image.encrypted_regions():
        for k in range((r.start - image.base) >> 2, (r.end - image.base) >> 2):
            if image.words[k] == IV_MAGIC:
                out.append(image.base + 4 * k)
    return out
