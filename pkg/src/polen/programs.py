"""Guest program corpus, reference oracles and generator test fixtures."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from typing import Callable

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

MASK32 = 0xFFFFFFFF
MASK16 = 0xFFFF


@dataclass(frozen=True)
class GuestProgram:
    """A corpus program: source, the function to protect and an output oracle.

    ``inputs`` names the data objects holding the kernel's inputs with their
    default contents; ``oracle`` maps such a dict to the expected console
    output.
    """

    name: str
    source: str
    secured: str
    inputs: dict[str, bytes]
    oracle: Callable[[dict[str, bytes]], bytes]

    def expected_output(self, inputs: dict[str, bytes] | None = None) -> bytes:
        return self.oracle({**self.inputs, **(inputs or {})})


def corpus_source(name: str) -> str:
    return resources.files("polen.corpus").joinpath(f"{name}.s").read_text()


def _hexline(data: bytes) -> bytes:
    return data.hex().encode() + b"\n"


def aes128_encrypt(key: bytes, block: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def xorblock_reference(src: bytes, key: bytes) -> bytes:
    s = struct.unpack("<8I", src)
    k = struct.unpack("<4I", key)
    out = []
    for i, w in enumerate(s):
        kw = k[i % 4]
        t5 = ((w + kw) & MASK32) ^ w
        t6 = ((t5 | kw) - i) & MASK32
        out.append((t5 & t6) ^ kw)
    return struct.pack("<8I", *out)


_SIMON_Z0 = "11111010001001010110000111001101111101000100101011000011100110"


def _ror16(x: int, r: int) -> int:
    return ((x >> r) | (x << (16 - r))) & MASK16


def _rol16(x: int, r: int) -> int:
    return ((x << r) | (x >> (16 - r))) & MASK16


def simon32_encrypt(pt: bytes, key: bytes) -> bytes:
    """Simon32/64; words are little-endian halves, pt = (x, y), key = (k0..k3)."""
    x, y = struct.unpack("<2H", pt)
    k = list(struct.unpack("<4H", key))
    for i in range(4, 32):
        t = _ror16(k[i - 1], 3) ^ k[i - 3]
        t ^= _ror16(t, 1)
        k.append((~k[i - 4] & MASK16) ^ t ^ int(_SIMON_Z0[(i - 4) % 62]) ^ 3)
    for i in range(32):
        x, y = y ^ (_rol16(x, 1) & _rol16(x, 8)) ^ _rol16(x, 2) ^ k[i], x
    return struct.pack("<2H", x, y)


AES_PT = bytes.fromhex("00112233445566778899aabbccddeeff")
AES_KEY = bytes(range(16))


def _corpus() -> dict[str, GuestProgram]:
    return {
        "aes8": GuestProgram(
            "aes8", corpus_source("aes8"), "aes_encrypt", {"pt": AES_PT, "key": AES_KEY},
            lambda d: _hexline(aes128_encrypt(d["key"], d["pt"]))),
        "xorblock": GuestProgram(
            "xorblock", corpus_source("xorblock"), "xor_block",
            {"src": bytes(range(32)), "key": struct.pack("<4I", 0xDEADBEEF, 0x01234567, 0x89ABCDEF, 0x0BADF00D)},
            lambda d: _hexline(xorblock_reference(d["src"], d["key"]))),
        "simonish": GuestProgram(
            "simonish", corpus_source("simonish"), "simon_encrypt",
            {"pt": struct.pack("<2H", 0x6565, 0x6877), "key": struct.pack("<4H", 0x0100, 0x0908, 0x1110, 0x1918)},
            lambda d: _hexline(simon32_encrypt(d["pt"], d["key"]))),
    }


CORPUS_NAMES = ("aes8", "xorblock", "simonish")


def corpus() -> dict[str, GuestProgram]:
    return _corpus()


def program(name: str) -> GuestProgram:
    try:
        return _corpus()[name]
    except KeyError:
        raise KeyError(f"unknown corpus program {name!r}; choose from {', '.join(CORPUS_NAMES)}") from None


# --------------------------------------------------------------------------
# fixtures for the code generator
# --------------------------------------------------------------------------

# f(a0, a1 = pointer to a word, a2, a3) -> (a0, a1); may update *a1
FIXTURE_BODIES = {
    # straight-line kernel of the motivating example
    "kernel": """\
    lw a1, 0(a1)
    add a0, a1, a0
    xor a2, a1, a0
    mv a0, a2
    ret
""",
    # data-dependent loop with forward and backward branches and a jump
    "branchy": """\
    lw t0, 0(a1)
    andi a2, a2, 15
    li t1, 0
br_loop:
    beqz a2, br_done
    andi t2, t0, 1
    bnez t2, br_odd
    srli t0, t0, 1
    add t1, t1, a3
    j br_next
br_odd:
    xor t0, t0, a0
    slli t3, t0, 3
    sub t1, t1, t3
    or t1, t1, a2
br_next:
    addi a2, a2, -1
    j br_loop
br_done:
    sw t0, 0(a1)
    mv a0, t1
    mv a1, t0
    ret
""",
    # long independent ALU runs for the instruction shuffle
    "mixer": """\
    lw t6, 0(a1)
    lui t0, 0x12345
    xor t1, a0, a2
    add t2, a3, t0
    sub t3, a2, a0
    or t4, a0, a3
    and t5, a2, a3
    slli a4, a0, 5
    srai a5, a2, 3
    mul t0, t1, t2
    sltu a6, t3, t4
    xor t1, t5, a4
    add t2, a5, t6
    sub t3, t0, a6
    srl t4, t3, a3
    and t5, t1, t2
    or a4, t4, t5
    add a0, a4, t3
    sw a0, 0(a1)
    xor a1, t1, t2
    ret
""",
}

FIXTURE_NAMES = tuple(FIXTURE_BODIES)


def fixture_source(name: str, n_vectors: int, *, attrs: str = "poly") -> str:
    """Harness calling ``f`` once per input vector.

    ``vecs`` holds ``n_vectors`` records of four words (a0, unused, a2, a3);
    ``cells`` holds the word each call gets a pointer to.  Each call's
    (a0, a1) results overwrite the first two words of its record.
    """
    body = FIXTURE_BODIES[name]
    return f""".entry main
.func main
    addi sp, sp, -16
    sw ra, 12(sp)
    sw s0, 8(sp)
    sw s1, 4(sp)
    la s0, vecs
    li s1, 0
h_loop:
    lw a0, 0(s0)
    la a1, cells
    slli t0, s1, 2
    add a1, a1, t0
    lw a2, 8(s0)
    lw a3, 12(s0)
    call f
    sw a0, 0(s0)
    sw a1, 4(s0)
    addi s0, s0, 16
    addi s1, s1, 1
    li t0, {n_vectors}
    blt s1, t0, h_loop
    lw s1, 4(sp)
    lw s0, 8(sp)
    lw ra, 12(sp)
    addi sp, sp, 16
    li a0, 0
    sw a0, EXIT(zero)
.endfunc

.func f {attrs}
{body}.endfunc

.align 2
vecs: .space {16 * n_vectors}
cells: .space {4 * n_vectors}
"""


def fixture_reference(name: str, vecs: list[tuple[int, int, int]], cells: list[int]) -> tuple[list[tuple[int, int]], list[int]]:
    """Python model of the fixtures: per call (a0, a1) results and final cells."""
    cells = list(cells)
    out = []
    for k, (a0, a2, a3) in enumerate(vecs):
        if name == "kernel":
            a1 = cells[k]
            a0 = (a1 + a0) & MASK32
            r = (a1 ^ a0, a1)
        elif name == "branchy":
            t0, n, t1 = cells[k], a2 & 15, 0
            while n:
                if t0 & 1:
                    t0 ^= a0
                    t1 = ((t1 - ((t0 << 3) & MASK32)) & MASK32) | n
                else:
                    t0 >>= 1
                    t1 = (t1 + a3) & MASK32
                n -= 1
            cells[k] = t0
            r = (t1, t0)
        else:
            s = lambda v: v - (1 << 32) if v & 0x80000000 else v
            t6 = cells[k]
            t0 = 0x12345000
            t1 = a0 ^ a2
            t2 = (a3 + t0) & MASK32
            t3 = (a2 - a0) & MASK32
            t4 = a0 | a3
            t5 = a2 & a3
            a4 = (a0 << 5) & MASK32
            a5 = (s(a2) >> 3) & MASK32
            t0 = (t1 * t2) & MASK32
            a6 = int(t3 < t4)
            t1 = t5 ^ a4
            t2 = (a5 + t6) & MASK32
            t3 = (t0 - a6) & MASK32
            t4 = t3 >> (a3 & 31)
            t5 = t1 & t2
            a4 = t4 | t5
            a0 = (a4 + t3) & MASK32
            cells[k] = a0
            r = (a0, t1 ^ t2)
        out.append(r)
    return out, cells


# encrypted ``outer`` calls plain ``helper``; exits with (5 + 1) * 2 + 2 = 14
BRACKET_SOURCE = """\
.entry main
.func main
    addi sp, sp, -16
    sw ra, 12(sp)
    li a0, 5
    call outer
    lw ra, 12(sp)
    addi sp, sp, 16
    sw a0, EXIT(zero)
.endfunc

.func outer encrypt
    addi sp, sp, -16
    sw ra, 12(sp)
    addi a0, a0, 1
    call helper
    addi a0, a0, 2
    lw ra, 12(sp)
    addi sp, sp, 16
    ret
.endfunc

.func helper
    slli a0, a0, 1
    ret
.endfunc
"""
