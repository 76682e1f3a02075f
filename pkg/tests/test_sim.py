import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polen import asm, cipher, sim
from polen.asm import IV_MAGIC, Image, Region, assemble, parse
from polen.binenc import verify_image
from polen.cipher import CipherConfig
from polen.pipeline import CONFIG_NAMES, DEFAULT_KEY, build_program, make_machine, preset
from polen.programs import corpus
from polen.sim import Machine

KEY = DEFAULT_KEY
NULL = CipherConfig("null")


def image(body: str, data: str = "") -> Image:
    return assemble(parse(f".entry main\n.func main\n{body}.endfunc\n{data}"), 0x1000)


def machine(body: str, data: str = "", **kw) -> Machine:
    kw.setdefault("key", KEY)
    return Machine(image(body, data), **kw)


def reg(name: str) -> int:
    return asm.REGS[name]


def test_small_kernel_hand_execution():
    m = machine("""\
    li a0, 2
    li a1, 3
    add a0, a1, a0
    xor a2, a1, a0
    mv a0, a2
    sw a0, EXIT(zero)
""")
    r = m.run()
    assert (r.status, r.exit_code) == ("halted", 6)
    assert m.regs[reg("a1")] == 3 and m.regs[reg("a2")] == 6


def test_exit_right_away_retires_one_instruction():
    r = machine("    sw zero, EXIT(zero)\n").run()
    assert (r.status, r.exit_code, r.steps) == ("halted", 0, 1)


def capture(body: str) -> str:
    return f"    li t6, 1\n    sw t6, TRACE_CTL(zero)\n{body}    sw zero, TRACE_CTL(zero)\n    sw zero, EXIT(zero)\n"


def samples(body: str, **kw):
    m = machine(capture(body), **kw)
    assert m.run().ok
    # drop the store that turns capture off
    return m.samples()[:-1], m


def test_sample_rules_per_format():
    got, m = samples("""\
    li a0, 2
    li a1, 3
    add a0, a1, a0
    lui a0, 0x12345
    sw a1, -8(sp)
    beq a1, a1, s_next
s_next:
    jal t0, s_after
s_after:
""")
    fields = [s[2:] for s in got]
    base = m.image.entry
    # capture starts right after the enabling store
    assert fields[0] == (0, 0, 2)            # addi a0, zero, 2 (I: rs1, 0, rd)
    assert fields[2] == (3, 5, 5)            # add: rs2 and rd are both a0, read after the write
    assert fields[3] == (0, 0, 0x12345000)   # U
    assert fields[4] == (m.regs[reg("sp")], 3, 0)  # S
    assert fields[5] == (3, 3, 0)            # B as S
    assert fields[6][:2] == (0, 0) and fields[6][2] == got[6][0] + 4  # J as U
    assert all(s[1] == m.image.word_at(s[0]) for s in got)
    assert got[0][0] == base + 8


def test_capture_off_records_nothing():
    m = machine("    li a0, 1\n    sw zero, EXIT(zero)\n")
    m.run()
    assert m.n_samples == 0


def test_trace_limit_caps_samples():
    m = machine(capture("    nop\n" * 50), trace_limit=10)
    m.run()
    assert m.n_samples == 10


INITBB = """\
    la a0, slot
    initbb a1, a0
    initbb a2, a0
"""
SLOT = ".align 2\nslot: .space 24\n"


def test_initbb_writes_an_iv_and_emits_three_samples():
    got, m = samples(INITBB, data=SLOT, config=CipherConfig.for_cost(9))
    initbb = [s for s in got if asm.decode(s[1]).op == "initbb"]
    assert len(initbb) == 6
    slot = m.image.symbols["slot"]
    assert m.regs[reg("a1")] == m.regs[reg("a2")] == slot + 12
    # the second initbb overwrote the first; its three samples carry the words now in memory
    words = [m.read_word(slot + 4 * k) for k in range(3)]
    assert [s[2] for s in initbb[3:]] == words
    assert all(s[3:] == (0, 0) for s in initbb)
    assert [s[2] for s in initbb[:3]] != words
    c = m.counters
    assert c.exec_inits == 2
    assert c.cycles == c.n + 2 * (9 - 1)


def test_initbb_is_reproducible_per_seed():
    def ivs(seed):
        m = machine(INITBB + "    sw zero, EXIT(zero)\n", SLOT, rng_seed=seed)
        m.run()
        return m.read_bytes(m.image.symbols["slot"], 12)

    assert ivs(5) == ivs(5)
    assert ivs(5) != ivs(6)


def test_enc_word_block_passes_the_encryptor_check():
    words = [0x00150513, 0x00A58533, 0x00008067]
    lines = ["    la a0, blk", "    initbb a1, a0"]
    for k, w in enumerate(words):
        lines += [f"    li t0, {w:#x}", "    enc_word t1, t0", f"    sw t1, {4 * k}(a1)"]
    lines += ["    li t0, 0", "    enc_word t2, t0", "    enc_word t3, t0", "    sw zero, EXIT(zero)"]
    m = machine("\n".join(lines) + "\n", ".align 2\nblk: .space 24\n")
    assert m.run().ok
    blk = m.image.symbols["blk"]
    got = [m.read_word(blk + 4 * k) for k in range(6)]
    plain = Image(blk, [IV_MAGIC, IV_MAGIC, 3, *words], {}, [Region(blk, blk + 24, "encrypted")], blk)
    enc = Image(blk, got, {}, plain.regions, blk)
    assert verify_image(plain, enc, KEY).ok
    # enc_word of zero exposes the next two keystream words
    iv = cipher.iv_from_slot(got[:3])[0]
    ks = cipher.backend("trivium").keystream(KEY, iv, 20)
    assert m.regs[reg("t2")] == int.from_bytes(ks[12:16], "little")
    assert m.regs[reg("t3")] == int.from_bytes(ks[16:20], "little")


def test_enc_word_before_initbb_faults():
    r = machine("    enc_word a0, a1\n").run()
    assert r.status == "fault" and "before any initbb" in r.reason


TOGGLE = """\
    enable_dec
    addi t0, t0, 1
    addi t0, t0, 1
    addi t0, t0, 1
    jal zero, t_in
t_in:
    .ivslot 2
    disable_dec
    jal zero, t_out
t_out:
    sw t0, EXIT(zero)
"""


def test_enable_waits_for_a_taken_transfer():
    m = machine(TOGGLE, config=NULL)
    for _ in range(4):
        m.step()
        assert not m.decrypt_on and m.pending == sim.PENDING_ENABLE
    m.step()  # jal into the slot
    assert m.decrypt_on and m.pending == sim.PENDING_NONE
    assert m.pc == m.image.symbols["t_in"] + 12
    assert m.counters.fetch_inits == 1
    r = m.run()
    assert (r.status, r.exit_code) == ("halted", 3)
    assert not m.decrypt_on
    assert [on for _, on in m.toggles] == [True, False]
    # (a) no IV is read at the plain target
    assert m.counters.fetch_inits == 1


def test_disable_survives_a_not_taken_branch():
    m = machine("    disable_dec\n    li t0, 1\n    beqz t0, n_end\nn_end:\n    sw zero, EXIT(zero)\n")
    for _ in range(3):
        m.step()
    assert m.pending == sim.PENDING_DISABLE


def test_fetching_a_slot_word_in_plain_mode_faults():
    r = machine("    j f_in\nf_in:\n    .ivslot 1\n    sw zero, EXIT(zero)\n").run()
    assert r.status == "fault" and "IV-slot word" in r.reason


@pytest.mark.parametrize("body,reason", [
    ("    li a0, 2\n    lw a1, 0(a0)\n", "misaligned"),
    ("    li a0, 0x80000\n    lw a1, 0(a0)\n", "out-of-range"),
    ("    .word 0xFFFFFFF0\n", "illegal"),
    ("    lw a0, EXIT(zero)\n", "write-only"),
    ("    li a7, 9\n    ecall\n", "ecall"),
    ("    sb a0, TRACE_CTL(zero)\n", "non-word"),
    ("    li a0, 0x3\n    jr a0\n", "bad pc"),
])
def test_faults(body, reason):
    r = machine(body).run()
    assert r.status == "fault" and reason in r.reason


def test_step_budget_times_out():
    r = machine("l_spin:\n    j l_spin\n").run(100)
    assert (r.status, r.steps) == ("timeout", 100)


def test_putchar_and_ecall_services():
    r = machine("""\
    li a0, 72
    sw a0, PUTCHAR(zero)
    li a0, 105
    li a7, 1
    ecall
    li a0, 7
    li a7, 0
    ecall
""").run()
    assert (r.output, r.exit_code) == (b"Hi", 7)


def test_rng_device_is_xorshift32():
    m = machine("    lw a0, RNG_WORD(zero)\n    lw a1, RNG_WORD(zero)\n    sw zero, EXIT(zero)\n", rng_seed=42)
    m.run()
    x1 = sim.xorshift32(sim.seed32(42))
    assert m.regs[reg("a0")] == x1 and m.regs[reg("a1")] == sim.xorshift32(x1)
    assert sim.seed32(0) == sim.XORSHIFT_ZERO_SEED


@pytest.mark.parametrize("op,a,b,want", [
    ("div", 7, 0, 0xFFFFFFFF), ("divu", 7, 0, 0xFFFFFFFF), ("rem", 7, 0, 7), ("remu", 7, 0, 7),
    ("div", 0x80000000, 0xFFFFFFFF, 0x80000000), ("rem", 0x80000000, 0xFFFFFFFF, 0),
    ("div", (-7) & 0xFFFFFFFF, 2, (-3) & 0xFFFFFFFF), ("rem", (-7) & 0xFFFFFFFF, 2, (-1) & 0xFFFFFFFF),
    ("mulh", 0xFFFFFFFF, 0xFFFFFFFF, 0), ("mulhu", 0xFFFFFFFF, 0xFFFFFFFF, 0xFFFFFFFE),
    ("mulhsu", 0xFFFFFFFF, 2, 0xFFFFFFFF), ("sra", 0x80000000, 4, 0xF8000000), ("slt", 0xFFFFFFFF, 0, 1),
    ("sltu", 0xFFFFFFFF, 0, 0),
])
@pytest.mark.parametrize("pure", [True, False])
def test_alu_edge_cases(op, a, b, want, pure):
    m = machine(f"    li a1, {a}\n    li a2, {b}\n    {op} a0, a1, a2\n    sw zero, EXIT(zero)\n")
    m.run(pure=pure)
    assert m.regs[reg("a0")] == want


def test_x0_stays_zero():
    m = machine("    li zero, 5\n    add zero, sp, sp\n    lw zero, RNG_WORD(zero)\n    sw zero, EXIT(zero)\n")
    assert m.run().ok and m.regs[0] == 0


ALU_OPS = sorted(asm.R_OPS)
IMM_OPS = sorted(asm.I_ALU)


@st.composite
def alu_program(draw):
    lines = [f"    li x{r}, {draw(st.integers(0, 2**32 - 1))}" for r in range(5, 16)]
    for _ in range(draw(st.integers(1, 40))):
        rd, rs1, rs2 = draw(st.integers(0, 15)), draw(st.integers(5, 15)), draw(st.integers(5, 15))
        kind = draw(st.sampled_from(["R", "I", "SH"]))
        if kind == "R":
            lines.append(f"    {draw(st.sampled_from(ALU_OPS))} x{rd}, x{rs1}, x{rs2}")
        elif kind == "I":
            lines.append(f"    {draw(st.sampled_from(IMM_OPS))} x{rd}, x{rs1}, {draw(st.integers(-2048, 2047))}")
        else:
            lines.append(f"    {draw(st.sampled_from(sorted(asm.SHIFTS)))} x{rd}, x{rs1}, {draw(st.integers(0, 31))}")
    return "\n".join(lines) + "\n    sw zero, EXIT(zero)\n"


@pytest.mark.skipif(not sim.core_available(), reason="compiled core not built")
@settings(max_examples=300, deadline=None)
@given(alu_program())
def test_core_matches_pure_interpreter_on_alu_programs(src):
    a, b = machine(src), machine(src)
    a.run(pure=True)
    b.run()
    assert a.regs == b.regs and a.banks == b.banks


def state(m: Machine):
    return (m.regs, m.pc, bytes(m.mem), m.trace.tobytes(), m.banks, m.toggles, m.steps, m.decrypt_on,
            m.output, m.fault, m.exit_code)


@pytest.mark.skipif(not sim.core_available(), reason="compiled core not built")
@pytest.mark.parametrize("config", CONFIG_NAMES)
@pytest.mark.parametrize("name", sorted(corpus()))
def test_core_matches_pure_interpreter_on_the_corpus(name, config):
    b = build_program(preset(config), corpus()[name])
    steps = 40_000
    pure, core = make_machine(b, rng_seed=9), make_machine(b, rng_seed=9)
    pure.run(steps, pure=True)
    core.run(steps)
    assert state(pure) == state(core)


@pytest.mark.parametrize("config", CONFIG_NAMES)
def test_counter_identities(config):
    b = build_program(preset(config), corpus()["xorblock"])
    m = make_machine(b)
    assert m.run().ok
    c = m.counters
    assert c.n == c.i + c.b
    assert c.cycles == c.n + (b.config.cipher.k_T - 1) * c.inits
    if not b.config.encrypted:
        assert c.fetch_inits == 0
