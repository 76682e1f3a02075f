"""Functional RV32IM simulator with in-fetch decryption.

Cycle rule: every retired instruction costs one cycle, except a taken control
transfer while decryption is on and ``initbb``, which cost ``k_T`` each.  The
fetch channel is re-initialised from the IV slot at the target of every taken
transfer made with decryption on; ``enable_dec``/``disable_dec`` only arm a
pending toggle that the next taken transfer applies before that check.

Memory-mapped devices (word access only)::

    RNG_WORD  0xFFFFFF00  read: next xorshift32 word
    TRACE_CTL 0xFFFFFF04  write 1/0: trace capture on/off; read: current state
    EXIT      0xFFFFFF08  write: halt with that exit code
    PUTCHAR   0xFFFFFF0C  write: append the low byte to the output

``ecall`` offers the same services: ``a7 = 0`` exits with ``a0``, ``a7 = 1``
prints the low byte of ``a0``.

A compiled core (``polen._core``) runs the same loop for the Trivium and null
backends; it is picked at import unless ``POLEN_PURE=1`` is set.
"""

from __future__ import annotations

import hashlib
import os
from array import array
from dataclasses import dataclass, field

from . import cipher
from .asm import MMIO, Image, decode
from .cipher import CipherConfig

MASK32 = 0xFFFFFFFF
RNG_WORD, TRACE_CTL, EXIT_ADDR, PUTCHAR = (MMIO[k] for k in ("RNG_WORD", "TRACE_CTL", "EXIT", "PUTCHAR"))
DEFAULT_MEM = 0x40000
XORSHIFT_ZERO_SEED = 0x9E3779B9

PENDING_NONE, PENDING_ENABLE, PENDING_DISABLE = 0, 1, 2

try:
    if os.environ.get("POLEN_PURE"):
        raise ImportError
    from . import _core
except ImportError:  # pragma: no cover - exercised when the extension is absent
    _core = None


def core_available() -> bool:
    return _core is not None


def seed32(seed: int) -> int:
    """Fold a 64-bit seed into a non-zero xorshift32 state."""
    s = (seed ^ (seed >> 32)) & MASK32
    return s or XORSHIFT_ZERO_SEED


def xorshift32(x: int) -> int:
    x ^= (x << 13) & MASK32
    x ^= x >> 17
    x ^= (x << 5) & MASK32
    return x


@dataclass
class PerfCounters:
    n: int = 0            # instructions retired
    b: int = 0            # taken control transfers
    fetch_inits: int = 0  # fetch-channel re-initialisations
    exec_inits: int = 0   # initbb executions
    cycles: int = 0

    @property
    def i(self) -> int:
        return self.n - self.b

    @property
    def inits(self) -> int:
        return self.fetch_inits + self.exec_inits

    @property
    def rb(self) -> float:
        return self.b / self.n if self.n else 0.0

    @property
    def r_init(self) -> float:
        """Cipher initialisations per retired instruction."""
        return self.inits / self.n if self.n else 0.0

    def model_overhead(self, k_T: int) -> float:
        return 1.0 + (k_T - 1) * self.r_init

    def __add__(self, other: "PerfCounters") -> "PerfCounters":
        return PerfCounters(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.n, self.b, self.fetch_inits, self.exec_inits, self.cycles)


@dataclass
class RunResult:
    status: str  # halted | fault | timeout
    exit_code: int | None = None
    reason: str = ""
    output: bytes = b""
    steps: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "halted" and self.exit_code == 0


class SimFault(Exception):
    pass


class _Halt(Exception):
    pass


@dataclass
class Machine:
    """Simulator state.

    ``bank_ranges`` is a list of ``(start, end)`` address ranges; instructions
    whose pc falls in range ``k`` are counted in ``banks[k + 1]`` and all
    others in ``banks[0]``.
    """

    image: Image
    key: bytes = b"\0" * 10
    config: CipherConfig = field(default_factory=CipherConfig)
    rng_seed: int = 1
    mem_size: int = DEFAULT_MEM
    bank_ranges: list[tuple[int, int]] = field(default_factory=list)
    trace_limit: int | None = None

    def __post_init__(self):
        img = self.image
        if img.end > self.mem_size or img.base < 0:
            raise SimFault(f"image [{img.base:#x}, {img.end:#x}) does not fit in {self.mem_size:#x} bytes of RAM")
        self.mem = bytearray(self.mem_size)
        self.mem[img.base : img.end] = img.to_bytes()
        self.regs = [0] * 32
        self.regs[2] = self.mem_size & ~15
        self.pc = img.entry
        self.decrypt_on = False
        self.pending = PENDING_NONE
        self.impl = self.config.impl
        self.k_T = self.config.k_T
        if self.impl.key_bytes is not None and len(self.key) != self.impl.key_bytes:
            raise cipher.ConfigError(f"{self.impl.name} needs a {8 * self.impl.key_bytes}-bit key")
        self.key_a = self.impl.load_key(self.key) if self.config.backend == "trivium" else 0
        self.fetch_state = None
        self.exec_state = None
        self.rng_state = seed32(self.rng_seed)
        self.capture = False
        self.trace = array("I")
        self.output = bytearray()
        self.toggles: list[tuple[int, bool]] = []
        self.banks = [[0, 0, 0, 0, 0] for _ in range(len(self.bank_ranges) + 1)]
        self.halted = False
        self.exit_code: int | None = None
        self.fault: str | None = None
        self.steps = 0

    # ---- observation

    @property
    def counters(self) -> PerfCounters:
        total = PerfCounters()
        for b in self.banks:
            total = total + PerfCounters(*b)
        return total

    def bank(self, k: int) -> PerfCounters:
        return PerfCounters(*self.banks[k])

    @property
    def n_samples(self) -> int:
        return len(self.trace) // 5

    def samples(self) -> list[tuple[int, int, int, int, int]]:
        t = self.trace
        return [tuple(t[k : k + 5]) for k in range(0, len(t), 5)]

    def read_word(self, addr: int) -> int:
        return int.from_bytes(self.mem[addr : addr + 4], "little")

    def write_bytes(self, addr: int, data: bytes) -> None:
        self.mem[addr : addr + len(data)] = data

    def read_bytes(self, addr: int, n: int) -> bytes:
        return bytes(self.mem[addr : addr + n])

    def digest(self, objects: dict[str, tuple[int, int]]) -> str:
        """SHA-256 over the named memory objects, in name order."""
        h = hashlib.sha256()
        for name in sorted(objects):
            s, e = objects[name]
            h.update(name.encode() + b"\0" + self.mem[s:e])
        return h.hexdigest()

    def rng_next(self) -> int:
        self.rng_state = xorshift32(self.rng_state)
        return self.rng_state

    # ---- execution

    def run(self, max_steps: int = 50_000_000, *, pure: bool = False) -> RunResult:
        if self.halted or self.fault:
            return self._result()
        if not pure and _core is not None and self.config.backend in ("trivium", "null"):
            _core.run(self, max_steps)
        else:
            _run_py(self, max_steps)
        return self._result()

    def step(self) -> RunResult | None:
        """Execute one instruction; returns a result once the machine stops."""
        _run_py(self, 1)
        if self.halted or self.fault:
            return self._result()
        return None

    def _result(self) -> RunResult:
        if self.halted:
            return RunResult("halted", self.exit_code, "", bytes(self.output), self.steps)
        if self.fault:
            return RunResult("fault", None, self.fault, bytes(self.output), self.steps)
        return RunResult("timeout", None, "step budget exhausted", bytes(self.output), self.steps)


# --------------------------------------------------------------------------
# pure-Python interpreter
# --------------------------------------------------------------------------

_DECODED: dict[int, tuple] = {}


def _decoded(word: int):
    d = _DECODED.get(word)
    if d is None:
        i = decode(word)
        d = (i.op, i.rd, i.rs1, i.rs2, i.imm if isinstance(i.imm, int) else 0, i.fmt)
        if len(_DECODED) < 1 << 16:
            _DECODED[word] = d
    return d


def _s32(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


def _div(op: str, a: int, b: int) -> int:
    sa, sb = _s32(a), _s32(b)
    if op == "div":
        if b == 0:
            return MASK32
        if sa == -(1 << 31) and sb == -1:
            return a
        q = abs(sa) // abs(sb)
        return (-q if (sa < 0) != (sb < 0) else q) & MASK32
    if op == "divu":
        return MASK32 if b == 0 else a // b
    if op == "rem":
        if b == 0:
            return a
        if sa == -(1 << 31) and sb == -1:
            return 0
        r = abs(sa) % abs(sb)
        return (-r if sa < 0 else r) & MASK32
    return a if b == 0 else a % b  # remu


def _alu(op: str, a: int, b: int) -> int:
    if op in ("add", "addi"):
        return (a + b) & MASK32
    if op == "sub":
        return (a - b) & MASK32
    if op in ("xor", "xori"):
        return (a ^ b) & MASK32
    if op in ("or", "ori"):
        return (a | b) & MASK32
    if op in ("and", "andi"):
        return a & b & MASK32
    if op in ("sll", "slli"):
        return (a << (b & 31)) & MASK32
    if op in ("srl", "srli"):
        return a >> (b & 31)
    if op in ("sra", "srai"):
        return (_s32(a) >> (b & 31)) & MASK32
    if op in ("slt", "slti"):
        return int(_s32(a) < _s32(b & MASK32))
    if op in ("sltu", "sltiu"):
        return int(a < (b & MASK32))
    if op == "mul":
        return (a * b) & MASK32
    if op == "mulh":
        return ((_s32(a) * _s32(b)) >> 32) & MASK32
    if op == "mulhsu":
        return ((_s32(a) * b) >> 32) & MASK32
    if op == "mulhu":
        return (a * b) >> 32
    return _div(op, a, b)


_BRANCH = {
    "beq": lambda a, b: a == b,
    "bne": lambda a, b: a != b,
    "blt": lambda a, b: _s32(a) < _s32(b),
    "bge": lambda a, b: _s32(a) >= _s32(b),
    "bltu": lambda a, b: a < b,
    "bgeu": lambda a, b: a >= b,
}
_LOAD_SIZE = {"lb": 1, "lbu": 1, "lh": 2, "lhu": 2, "lw": 4}
_STORE_SIZE = {"sb": 1, "sh": 2, "sw": 4}


def _mem_check(m: Machine, addr: int, size: int) -> None:
    if addr % size:
        raise SimFault(f"misaligned {size}-byte access at {addr:#010x}")
    if addr + size > m.mem_size:
        raise SimFault(f"out-of-range access at {addr:#010x}")


def _load(m: Machine, op: str, addr: int) -> int:
    size = _LOAD_SIZE[op]
    if addr >= RNG_WORD:
        if op != "lw" or addr % 4:
            raise SimFault(f"non-word MMIO read at {addr:#010x}")
        if addr == RNG_WORD:
            return m.rng_next()
        if addr == TRACE_CTL:
            return int(m.capture)
        raise SimFault(f"read from write-only MMIO register {addr:#010x}")
    _mem_check(m, addr, size)
    v = int.from_bytes(m.mem[addr : addr + size], "little")
    if op == "lb" and v & 0x80:
        v |= 0xFFFFFF00
    elif op == "lh" and v & 0x8000:
        v |= 0xFFFF0000
    return v


def _store(m: Machine, op: str, addr: int, value: int) -> None:
    size = _STORE_SIZE[op]
    if addr >= RNG_WORD:
        if op != "sw" or addr % 4:
            raise SimFault(f"non-word MMIO write at {addr:#010x}")
        if addr == TRACE_CTL:
            m.capture = bool(value)
        elif addr == EXIT_ADDR:
            m.exit_code = value
            m.halted = True
        elif addr == PUTCHAR:
            m.output.append(value & 0xFF)
        else:
            raise SimFault(f"write to read-only MMIO register {addr:#010x}")
        return
    _mem_check(m, addr, size)
    m.mem[addr : addr + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")


def _bank_of(m: Machine, pc: int) -> list[int]:
    for k, (lo, hi) in enumerate(m.bank_ranges):
        if lo <= pc < hi:
            return m.banks[k + 1]
    return m.banks[0]


def _sample(m: Machine, *fields: int) -> None:
    if m.trace_limit is None or len(m.trace) < 5 * m.trace_limit:
        m.trace.extend(fields)


def _run_py(m: Machine, max_steps: int) -> None:
    regs, impl, k_T = m.regs, m.impl, m.k_T
    budget = max_steps
    while budget > 0:
        budget -= 1
        pc = m.pc
        try:
            if pc % 4 or pc + 4 > m.mem_size:
                raise SimFault(f"bad pc {pc:#010x}")
            word = int.from_bytes(m.mem[pc : pc + 4], "little")
            if m.decrypt_on:
                m.fetch_state, insn = impl.encrypt_word(m.fetch_state, word)
            else:
                insn = word
            op, rd, rs1, rs2, imm, fmt = _decoded(insn)
            if op == "illegal":
                if not m.decrypt_on and word == 0xFFFFFFFF:
                    raise SimFault(f"fetched an IV-slot word as an instruction at {pc:#010x}")
                raise SimFault(f"illegal instruction {insn:#010x} at {pc:#010x}")
            capture = m.capture
            a, b = regs[rs1], regs[rs2]
            target = None
            out = None
            iv_words = None
            if fmt == "R":
                out = _alu(op, a, b)
            elif op in ("addi", "xori", "ori", "andi", "slti", "sltiu", "slli", "srli", "srai"):
                out = _alu(op, a, imm & MASK32 if op not in ("slli", "srli", "srai") else imm)
            elif fmt == "I" and op in _LOAD_SIZE:
                out = _load(m, op, (a + imm) & MASK32)
            elif fmt == "S":
                _store(m, op, (a + imm) & MASK32, b)
            elif fmt == "B":
                if _BRANCH[op](a, b):
                    target = (pc + imm) & MASK32
            elif op == "jal":
                out = (pc + 4) & MASK32
                target = (pc + imm) & MASK32
            elif op == "jalr":
                out = (pc + 4) & MASK32
                target = (a + imm) & MASK32 & ~1
            elif op == "lui":
                out = (imm << 12) & MASK32
            elif op == "auipc":
                out = (pc + (imm << 12)) & MASK32
            elif op == "ecall":
                if regs[17] == 0:
                    m.exit_code = regs[10]
                    m.halted = True
                elif regs[17] == 1:
                    m.output.append(regs[10] & 0xFF)
                else:
                    raise SimFault(f"unknown ecall service {regs[17]}")
            elif op == "initbb":
                _mem_check(m, a, 4)
                if a + 12 > m.mem_size:
                    raise SimFault(f"initbb slot out of range at {a:#010x}")
                iv_words = (m.rng_next(), m.rng_next(), m.rng_next())
                m.mem[a : a + 12] = b"".join(w.to_bytes(4, "little") for w in iv_words)
                m.exec_state = impl.init(m.key, impl.slot_iv(iv_words)) if impl.name != "trivium" else \
                    impl.init_loaded(m.key_a, impl.slot_iv(iv_words))
                out = (a + 12) & MASK32
            elif op == "enc_word":
                if m.exec_state is None:
                    raise SimFault(f"enc_word before any initbb at {pc:#010x}")
                m.exec_state, out = impl.encrypt_word(m.exec_state, a)
            elif op == "enable_dec":
                m.pending = PENDING_ENABLE
            elif op == "disable_dec":
                m.pending = PENDING_DISABLE
            if out is not None and rd:
                regs[rd] = out
        except SimFault as e:
            m.fault = str(e)
            return
        bank = _bank_of(m, pc)
        bank[0] += 1
        m.steps += 1
        if target is not None:
            bank[1] += 1
            if m.pending:
                now = m.pending == PENDING_ENABLE
                if now != m.decrypt_on:
                    m.toggles.append((pc, now))
                m.decrypt_on = now
                m.pending = PENDING_NONE
            if m.decrypt_on:
                if target % 4 or target + 12 > m.mem_size:
                    m.fault = f"IV read out of range at {target:#010x}"
                    return
                ivw = [int.from_bytes(m.mem[target + 4 * k : target + 4 * k + 4], "little") for k in range(3)]
                if impl.name == "trivium":
                    m.fetch_state = impl.init_loaded(m.key_a, impl.slot_iv(ivw))
                else:
                    m.fetch_state = impl.init(m.key, impl.slot_iv(ivw))
                bank[2] += 1
                bank[4] += k_T
                m.pc = (target + 12) & MASK32
            else:
                bank[4] += 1
                m.pc = target
        else:
            if iv_words is not None:
                bank[3] += 1
                bank[4] += k_T
            else:
                bank[4] += 1
            m.pc = (pc + 4) & MASK32
        if capture:
            if iv_words is not None:
                for w in iv_words:
                    _sample(m, pc, insn, w, 0, 0)
            else:
                _sample(m, pc, insn, *_fields(fmt, op, rd, rs1, rs2, regs))
        if m.halted:
            return


def _fields(fmt: str, op: str, rd: int, rs1: int, rs2: int, regs) -> tuple[int, int, int]:
    if fmt == "R":
        return regs[rs1], regs[rs2], regs[rd]
    if fmt == "I":
        return regs[rs1], 0, regs[rd]
    if fmt in ("S", "B"):
        return regs[rs1], regs[rs2], 0
    if fmt in ("U", "J"):
        return 0, 0, regs[rd]
    if op == "enc_word":
        return regs[rs1], 0, regs[rd]
    return 0, 0, 0
