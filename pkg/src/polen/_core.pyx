# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled simulator loop and Trivium keystream.

``run`` executes a :class:`polen.sim.Machine` in place with the same
semantics as ``polen.sim._run_py``; only the Trivium and null backends are
handled here.  Instruction words are decoded by the Python decoder on first
sight and cached in a C table, so both paths share one decoder.
"""

from libc.stdint cimport uint8_t, int32_t, uint32_t, int64_t, uint64_t
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memset

from .asm import decode
from .cipher import TriviumState

cdef extern from "_trivium.h":
    ctypedef struct triv_t:
        pass
    uint32_t triv_chunk(triv_t *s) nogil
    void triv_init(triv_t *s, uint64_t ka_lo, uint64_t ka_hi, uint64_t iv_lo, uint64_t iv_hi) nogil
    void triv_get(const triv_t *s, uint64_t *out) nogil
    void triv_set(triv_t *s, const uint64_t *inp) nogil

MASK64 = (1 << 64) - 1

cdef enum Op:
    OP_ILLEGAL, OP_ADD, OP_SUB, OP_SLL, OP_SLT, OP_SLTU, OP_XOR, OP_SRL, OP_SRA, OP_OR, OP_AND,
    OP_MUL, OP_MULH, OP_MULHSU, OP_MULHU, OP_DIV, OP_DIVU, OP_REM, OP_REMU,
    OP_ADDI, OP_SLTI, OP_SLTIU, OP_XORI, OP_ORI, OP_ANDI, OP_SLLI, OP_SRLI, OP_SRAI,
    OP_LB, OP_LH, OP_LW, OP_LBU, OP_LHU, OP_SB, OP_SH, OP_SW,
    OP_BEQ, OP_BNE, OP_BLT, OP_BGE, OP_BLTU, OP_BGEU,
    OP_LUI, OP_AUIPC, OP_JAL, OP_JALR, OP_ECALL,
    OP_INITBB, OP_ENC_WORD, OP_ENABLE_DEC, OP_DISABLE_DEC

_OP_NAMES = [
    "illegal", "add", "sub", "sll", "slt", "sltu", "xor", "srl", "sra", "or", "and",
    "mul", "mulh", "mulhsu", "mulhu", "div", "divu", "rem", "remu",
    "addi", "slti", "sltiu", "xori", "ori", "andi", "slli", "srli", "srai",
    "lb", "lh", "lw", "lbu", "lhu", "sb", "sh", "sw",
    "beq", "bne", "blt", "bge", "bltu", "bgeu",
    "lui", "auipc", "jal", "jalr", "ecall",
    "initbb", "enc_word", "enable_dec", "disable_dec",
]
_OP_ID = {name: k for k, name in enumerate(_OP_NAMES)}
_FMT_ID = {"R": 0, "I": 1, "S": 2, "B": 3, "U": 4, "J": 5, "EXT": 6, "ILLEGAL": 7}

cdef enum Fmt:
    F_R, F_I, F_S, F_B, F_U, F_J, F_EXT, F_ILLEGAL

cdef struct Dec:
    uint8_t op, fmt, rd, rs1, rs2
    int32_t imm

cdef enum:
    TABLE_BITS = 16
    TABLE_SIZE = 65536
    TABLE_FILL = 32768

cdef uint32_t _keys[TABLE_SIZE]
cdef uint8_t _used[TABLE_SIZE]
cdef Dec _vals[TABLE_SIZE]
cdef int _fill = 0

cdef uint32_t RNG_WORD = 0xFFFFFF00
cdef uint32_t TRACE_CTL = 0xFFFFFF04
cdef uint32_t EXIT_ADDR = 0xFFFFFF08
cdef uint32_t PUTCHAR = 0xFFFFFF0C


cdef Dec _decode_py(uint32_t word):
    cdef Dec d
    i = decode(word)
    d.op = _OP_ID[i.op]
    d.fmt = _FMT_ID[i.fmt]
    d.rd = i.rd
    d.rs1 = i.rs1
    d.rs2 = i.rs2
    imm = i.imm if i.op != "illegal" else 0
    if i.op in ("lui", "auipc"):
        d.imm = <int32_t>(<uint32_t>imm << 12)  # keep the shifted value
    else:
        d.imm = <int32_t>imm
    return d


cdef inline Dec _lookup(uint32_t word):
    global _fill
    cdef uint32_t h = (word * 2654435761u) >> (32 - TABLE_BITS)
    while _used[h]:
        if _keys[h] == word:
            return _vals[h]
        h = (h + 1) & (TABLE_SIZE - 1)
    cdef Dec d = _decode_py(word)
    if _fill >= TABLE_FILL:
        memset(_used, 0, sizeof(_used))
        _fill = 0
        h = (word * 2654435761u) >> (32 - TABLE_BITS)
    _used[h] = 1
    _keys[h] = word
    _vals[h] = d
    _fill += 1
    return d


cdef inline uint32_t _xorshift(uint32_t x) noexcept nogil:
    x ^= x << 13
    x ^= x >> 17
    x ^= x << 5
    return x


cdef inline uint32_t _rd32(const uint8_t *p) noexcept nogil:
    return p[0] | (<uint32_t>p[1] << 8) | (<uint32_t>p[2] << 16) | (<uint32_t>p[3] << 24)


cdef inline void _wr32(uint8_t *p, uint32_t v) noexcept nogil:
    p[0] = v & 0xFF
    p[1] = (v >> 8) & 0xFF
    p[2] = (v >> 16) & 0xFF
    p[3] = v >> 24


cdef object _state_out(triv_t *s):
    cdef uint64_t w[6]
    triv_get(s, w)
    return TriviumState(int(w[0]) | (int(w[1]) << 64), int(w[2]) | (int(w[3]) << 64), int(w[4]) | (int(w[5]) << 64))


cdef int _state_in(triv_t *s, object st) except -1:
    cdef uint64_t w[6]
    a, b, c = st
    w[0] = a & MASK64
    w[1] = a >> 64
    w[2] = b & MASK64
    w[3] = b >> 64
    w[4] = c & MASK64
    w[5] = c >> 64
    triv_set(s, w)
    return 0


cdef inline uint32_t _div(int op, uint32_t a, uint32_t b) noexcept nogil:
    cdef int32_t sa = <int32_t>a, sb = <int32_t>b
    if op == OP_DIV:
        if b == 0:
            return 0xFFFFFFFF
        if sa == <int32_t>0x80000000 and sb == -1:
            return a
        return <uint32_t>(sa / sb)
    if op == OP_DIVU:
        return 0xFFFFFFFF if b == 0 else a / b
    if op == OP_REM:
        if b == 0:
            return a
        if sa == <int32_t>0x80000000 and sb == -1:
            return 0
        return <uint32_t>(sa % sb)
    return a if b == 0 else a % b


cdef class _Trace:
    cdef uint32_t *buf
    cdef Py_ssize_t n, cap

    def __cinit__(self):
        self.cap = 1 << 14
        self.n = 0
        self.buf = <uint32_t *>malloc(self.cap * sizeof(uint32_t))
        if self.buf == NULL:
            raise MemoryError

    def __dealloc__(self):
        free(self.buf)

    cdef int push(self, uint32_t a, uint32_t b, uint32_t c, uint32_t d, uint32_t e) except -1:
        cdef uint32_t *nb
        if self.n + 5 > self.cap:
            self.cap *= 2
            nb = <uint32_t *>realloc(self.buf, self.cap * sizeof(uint32_t))
            if nb == NULL:
                raise MemoryError
            self.buf = nb
        self.buf[self.n] = a
        self.buf[self.n + 1] = b
        self.buf[self.n + 2] = c
        self.buf[self.n + 3] = d
        self.buf[self.n + 4] = e
        self.n += 5
        return 0

    cdef bytes data(self):
        return (<char *>self.buf)[: self.n * sizeof(uint32_t)]


cdef inline int _sample(_Trace tr, uint32_t pc, uint32_t insn, Dec d, uint32_t *regs) except -1:
    if d.fmt == F_R:
        return tr.push(pc, insn, regs[d.rs1], regs[d.rs2], regs[d.rd])
    if d.fmt == F_I:
        return tr.push(pc, insn, regs[d.rs1], 0, regs[d.rd])
    if d.fmt == F_S or d.fmt == F_B:
        return tr.push(pc, insn, regs[d.rs1], regs[d.rs2], 0)
    if d.fmt == F_U or d.fmt == F_J:
        return tr.push(pc, insn, 0, 0, regs[d.rd])
    if d.op == OP_ENC_WORD:
        return tr.push(pc, insn, regs[d.rs1], 0, regs[d.rd])
    return tr.push(pc, insn, 0, 0, 0)


def trivium_init(key_a, iv):
    """Fresh Trivium state for a loaded key register and an 80-bit IV."""
    cdef triv_t s
    triv_init(&s, key_a & MASK64, key_a >> 64, iv & MASK64, iv >> 64)
    return _state_out(&s)


def trivium_words(state, Py_ssize_t n):
    """``n`` keystream words from `state`; returns ``(next_state, words)``."""
    cdef triv_t s
    _state_in(&s, state)
    out = [triv_chunk(&s) for _ in range(n)]
    return _state_out(&s), out


def run(m, long long max_steps):
    """Run `m` for at most `max_steps` instructions, updating it in place."""
    cdef uint8_t[::1] memv = m.mem
    cdef uint8_t *mem = &memv[0]
    cdef uint64_t mem_size = m.mem_size
    cdef uint32_t regs[32]
    cdef int k
    for k in range(32):
        regs[k] = m.regs[k]
    regs[0] = 0

    cdef bint triv = m.config.backend == "trivium"
    cdef uint64_t ka_lo = 0, ka_hi = 0
    if triv:
        ka_lo = m.key_a & MASK64
        ka_hi = m.key_a >> 64
    cdef triv_t fs, es
    cdef bint fetch_valid = m.fetch_state is not None
    cdef bint exec_valid = m.exec_state is not None
    if triv and fetch_valid:
        _state_in(&fs, m.fetch_state)
    if triv and exec_valid:
        _state_in(&es, m.exec_state)

    cdef uint32_t pc = m.pc
    cdef bint decrypt_on = m.decrypt_on
    cdef int pending = m.pending
    cdef bint capture = m.capture
    cdef uint32_t rng = m.rng_state
    cdef long long k_T = m.k_T
    cdef long long steps = m.steps

    cdef int nbanks = len(m.banks)
    cdef int nranges = nbanks - 1
    cdef long long *banks = <long long *>malloc(nbanks * 5 * sizeof(long long))
    cdef uint32_t *rlo = <uint32_t *>malloc((nranges + 1) * sizeof(uint32_t))
    cdef uint32_t *rhi = <uint32_t *>malloc((nranges + 1) * sizeof(uint32_t))
    if banks == NULL or rlo == NULL or rhi == NULL:
        free(banks); free(rlo); free(rhi)
        raise MemoryError
    for k in range(nbanks):
        for j in range(5):
            banks[5 * k + j] = m.banks[k][j]
    for k in range(nranges):
        rlo[k], rhi[k] = m.bank_ranges[k]

    cdef Py_ssize_t limit = -1 if m.trace_limit is None else 5 * m.trace_limit
    cdef Py_ssize_t have = len(m.trace)
    cdef _Trace tr = _Trace()
    output = m.output
    toggles = m.toggles

    cdef bint halted = False
    cdef object exit_code = None
    cdef object fault = None
    cdef long long budget = max_steps
    cdef uint32_t cur, word, insn, a, b, out, target, addr, v
    cdef uint32_t ivw0 = 0, ivw1 = 0, ivw2 = 0
    cdef bint has_out, has_target, is_init, now
    cdef Dec d
    cdef long long *bank
    cdef int size, r
    cdef uint64_t iv_lo, iv_hi
    cdef int64_t prod

    try:
        while budget > 0:
            budget -= 1
            cur = pc
            if pc & 3 or <uint64_t>pc + 4 > mem_size:
                fault = f"bad pc {pc:#010x}"
                break
            word = _rd32(mem + pc)
            if decrypt_on:
                insn = word ^ triv_chunk(&fs) if triv else word
            else:
                insn = word
            d = _lookup(insn)
            if d.op == OP_ILLEGAL:
                if not decrypt_on and word == 0xFFFFFFFF:
                    fault = f"fetched an IV-slot word as an instruction at {pc:#010x}"
                else:
                    fault = f"illegal instruction {insn:#010x} at {pc:#010x}"
                break
            cap = capture
            a = regs[d.rs1]
            b = regs[d.rs2]
            has_out = False
            has_target = False
            is_init = False
            out = 0
            target = 0
            op = d.op
            if d.fmt == F_R:
                has_out = True
                if op == OP_ADD: out = a + b
                elif op == OP_SUB: out = a - b
                elif op == OP_SLL: out = a << (b & 31)
                elif op == OP_SLT: out = (<int32_t>a) < (<int32_t>b)
                elif op == OP_SLTU: out = a < b
                elif op == OP_XOR: out = a ^ b
                elif op == OP_SRL: out = a >> (b & 31)
                elif op == OP_SRA: out = <uint32_t>((<int32_t>a) >> (b & 31))
                elif op == OP_OR: out = a | b
                elif op == OP_AND: out = a & b
                elif op == OP_MUL: out = a * b
                elif op == OP_MULH:
                    prod = <int64_t>(<int32_t>a) * <int64_t>(<int32_t>b)
                    out = <uint32_t>(<uint64_t>prod >> 32)
                elif op == OP_MULHSU:
                    prod = <int64_t>(<int32_t>a) * <int64_t>b
                    out = <uint32_t>(<uint64_t>prod >> 32)
                elif op == OP_MULHU:
                    out = <uint32_t>((<uint64_t>a * <uint64_t>b) >> 32)
                else:
                    out = _div(op, a, b)
            elif op >= OP_ADDI and op <= OP_SRAI:
                has_out = True
                v = <uint32_t>d.imm
                if op == OP_ADDI: out = a + v
                elif op == OP_SLTI: out = (<int32_t>a) < d.imm
                elif op == OP_SLTIU: out = a < v
                elif op == OP_XORI: out = a ^ v
                elif op == OP_ORI: out = a | v
                elif op == OP_ANDI: out = a & v
                elif op == OP_SLLI: out = a << (v & 31)
                elif op == OP_SRLI: out = a >> (v & 31)
                else: out = <uint32_t>((<int32_t>a) >> (v & 31))
            elif op >= OP_LB and op <= OP_LHU:
                has_out = True
                addr = a + <uint32_t>d.imm
                if addr >= RNG_WORD:
                    if op != OP_LW or addr & 3:
                        fault = f"non-word MMIO read at {addr:#010x}"
                        break
                    if addr == RNG_WORD:
                        rng = _xorshift(rng)
                        out = rng
                    elif addr == TRACE_CTL:
                        out = capture
                    else:
                        fault = f"read from write-only MMIO register {addr:#010x}"
                        break
                else:
                    size = 1 if (op == OP_LB or op == OP_LBU) else 2 if (op == OP_LH or op == OP_LHU) else 4
                    if addr % size:
                        fault = f"misaligned {size}-byte access at {addr:#010x}"
                        break
                    if <uint64_t>addr + size > mem_size:
                        fault = f"out-of-range access at {addr:#010x}"
                        break
                    if size == 1:
                        out = mem[addr]
                        if op == OP_LB and out & 0x80:
                            out |= 0xFFFFFF00
                    elif size == 2:
                        out = mem[addr] | (<uint32_t>mem[addr + 1] << 8)
                        if op == OP_LH and out & 0x8000:
                            out |= 0xFFFF0000
                    else:
                        out = _rd32(mem + addr)
            elif d.fmt == F_S:
                addr = a + <uint32_t>d.imm
                if addr >= RNG_WORD:
                    if op != OP_SW or addr & 3:
                        fault = f"non-word MMIO write at {addr:#010x}"
                        break
                    if addr == TRACE_CTL:
                        capture = b != 0
                    elif addr == EXIT_ADDR:
                        exit_code = b
                        halted = True
                    elif addr == PUTCHAR:
                        output.append(b & 0xFF)
                    else:
                        fault = f"write to read-only MMIO register {addr:#010x}"
                        break
                else:
                    size = 1 if op == OP_SB else 2 if op == OP_SH else 4
                    if addr % size:
                        fault = f"misaligned {size}-byte access at {addr:#010x}"
                        break
                    if <uint64_t>addr + size > mem_size:
                        fault = f"out-of-range access at {addr:#010x}"
                        break
                    if size == 1:
                        mem[addr] = b & 0xFF
                    elif size == 2:
                        mem[addr] = b & 0xFF
                        mem[addr + 1] = (b >> 8) & 0xFF
                    else:
                        _wr32(mem + addr, b)
            elif d.fmt == F_B:
                if op == OP_BEQ: has_target = a == b
                elif op == OP_BNE: has_target = a != b
                elif op == OP_BLT: has_target = (<int32_t>a) < (<int32_t>b)
                elif op == OP_BGE: has_target = (<int32_t>a) >= (<int32_t>b)
                elif op == OP_BLTU: has_target = a < b
                else: has_target = a >= b
                target = pc + <uint32_t>d.imm
            elif op == OP_JAL:
                has_out = True
                out = pc + 4
                has_target = True
                target = pc + <uint32_t>d.imm
            elif op == OP_JALR:
                has_out = True
                out = pc + 4
                has_target = True
                target = (a + <uint32_t>d.imm) & ~(<uint32_t>1)
            elif op == OP_LUI:
                has_out = True
                out = <uint32_t>d.imm
            elif op == OP_AUIPC:
                has_out = True
                out = pc + <uint32_t>d.imm
            elif op == OP_ECALL:
                if regs[17] == 0:
                    exit_code = regs[10]
                    halted = True
                elif regs[17] == 1:
                    output.append(regs[10] & 0xFF)
                else:
                    fault = f"unknown ecall service {regs[17]}"
                    break
            elif op == OP_INITBB:
                if a & 3:
                    fault = f"misaligned 4-byte access at {a:#010x}"
                    break
                if <uint64_t>a + 4 > mem_size:
                    fault = f"out-of-range access at {a:#010x}"
                    break
                if <uint64_t>a + 12 > mem_size:
                    fault = f"initbb slot out of range at {a:#010x}"
                    break
                rng = _xorshift(rng); ivw0 = rng
                rng = _xorshift(rng); ivw1 = rng
                rng = _xorshift(rng); ivw2 = rng
                _wr32(mem + a, ivw0)
                _wr32(mem + a + 4, ivw1)
                _wr32(mem + a + 8, ivw2)
                if triv:
                    iv_lo = <uint64_t>ivw0 | (<uint64_t>ivw1 << 32)
                    iv_hi = ivw2 & 0xFFFF
                    triv_init(&es, ka_lo, ka_hi, iv_lo, iv_hi)
                exec_valid = True
                is_init = True
                has_out = True
                out = a + 12
            elif op == OP_ENC_WORD:
                if not exec_valid:
                    fault = f"enc_word before any initbb at {pc:#010x}"
                    break
                has_out = True
                out = a ^ triv_chunk(&es) if triv else a
            elif op == OP_ENABLE_DEC:
                pending = 1
            elif op == OP_DISABLE_DEC:
                pending = 2
            if has_out and d.rd:
                regs[d.rd] = out

            bank = banks
            for r in range(nranges):
                if rlo[r] <= cur < rhi[r]:
                    bank = banks + 5 * (r + 1)
                    break
            bank[0] += 1
            steps += 1
            if has_target:
                bank[1] += 1
                if pending:
                    now = pending == 1
                    if now != decrypt_on:
                        toggles.append((pc, now))
                    decrypt_on = now
                    pending = 0
                if decrypt_on:
                    if target & 3 or <uint64_t>target + 12 > mem_size:
                        fault = f"IV read out of range at {target:#010x}"
                        break
                    if triv:
                        iv_lo = <uint64_t>_rd32(mem + target) | (<uint64_t>_rd32(mem + target + 4) << 32)
                        iv_hi = _rd32(mem + target + 8) & 0xFFFF
                        triv_init(&fs, ka_lo, ka_hi, iv_lo, iv_hi)
                    fetch_valid = True
                    bank[2] += 1
                    bank[4] += k_T
                    pc = target + 12
                else:
                    bank[4] += 1
                    pc = target
            else:
                if is_init:
                    bank[3] += 1
                    bank[4] += k_T
                else:
                    bank[4] += 1
                pc = pc + 4
            if cap:
                if is_init:
                    for k in range(3):
                        if limit < 0 or have + tr.n < limit:
                            tr.push(cur, insn, ivw0 if k == 0 else ivw1 if k == 1 else ivw2, 0, 0)
                elif limit < 0 or have + tr.n < limit:
                    _sample(tr, cur, insn, d, regs)
            if halted:
                break
    finally:
        m.regs[:] = [regs[k] for k in range(32)]
        m.pc = pc
        m.decrypt_on = decrypt_on
        m.pending = pending
        m.capture = capture
        m.rng_state = rng
        m.steps = steps
        if triv:
            if fetch_valid:
                m.fetch_state = _state_out(&fs)
            if exec_valid:
                m.exec_state = _state_out(&es)
        else:
            if fetch_valid:
                m.fetch_state = 0
            if exec_valid:
                m.exec_state = 0
        for k in range(nbanks):
            m.banks[k][:] = [banks[5 * k + j] for j in range(5)]
        free(banks)
        free(rlo)
        free(rhi)
        if tr.n:
            m.trace.frombytes(tr.data())
        if halted:
            m.halted = True
            m.exit_code = exit_code
        if fault is not None:
            m.fault = fault
