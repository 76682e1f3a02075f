import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polen import asm
from polen.asm import AsmError, Instr, assemble, decode, encode, parse

regs = st.integers(0, 31)
imm12 = st.integers(-2048, 2047)


@st.composite
def instrs(draw):
    kind = draw(st.sampled_from(["R", "I", "SH", "L", "S", "B", "U", "J", "JR", "EXT", "EXT0", "ECALL"]))
    rd, rs1, rs2 = draw(regs), draw(regs), draw(regs)
    if kind == "R":
        return Instr(draw(st.sampled_from(sorted(asm.R_OPS))), rd, rs1, rs2)
    if kind == "I":
        return Instr(draw(st.sampled_from(sorted(asm.I_ALU))), rd, rs1, 0, draw(imm12))
    if kind == "SH":
        return Instr(draw(st.sampled_from(sorted(asm.SHIFTS))), rd, rs1, 0, draw(st.integers(0, 31)))
    if kind == "L":
        return Instr(draw(st.sampled_from(sorted(asm.LOADS))), rd, rs1, 0, draw(imm12))
    if kind == "S":
        return Instr(draw(st.sampled_from(sorted(asm.STORES))), 0, rs1, rs2, draw(imm12))
    if kind == "B":
        return Instr(draw(st.sampled_from(sorted(asm.BRANCHES))), 0, rs1, rs2, 2 * draw(st.integers(-2048, 2047)))
    if kind == "U":
        return Instr(draw(st.sampled_from(["lui", "auipc"])), rd, 0, 0, draw(st.integers(0, 0xFFFFF)))
    if kind == "J":
        return Instr("jal", rd, 0, 0, 2 * draw(st.integers(-(1 << 19), (1 << 19) - 1)))
    if kind == "JR":
        return Instr("jalr", rd, rs1, 0, draw(imm12))
    if kind == "EXT":
        return Instr(draw(st.sampled_from(["initbb", "enc_word"])), rd, rs1)
    if kind == "EXT0":
        return Instr(draw(st.sampled_from(["enable_dec", "disable_dec"])))
    return Instr("ecall")


@given(instrs())
@settings(max_examples=2000)
def test_encode_decode_round_trip(i):
    w = encode(i)
    assert 0 <= w <= 0xFFFFFFFF
    assert decode(w) == i
    assert encode(decode(w)) == w


@given(st.integers(0, 0xFFFFFFFF))
@settings(max_examples=2000)
def test_decode_is_total_and_reencodes(w):
    i = decode(w)
    if i.op != "illegal":
        assert decode(encode(i)) == i


@pytest.mark.parametrize("text,word", [
    ("nop", 0x00000013),
    ("ret", 0x00008067),
    ("add a0, a1, a0", 0x00A58533),
    ("lw a1, 0(a1)", 0x0005A583),
    ("xor a2, a1, a0", 0x00A5C633),
    ("lui a0, 0x12345", 0x12345537),
    ("ecall", 0x00000073),
])
def test_known_encodings(text, word):
    prog = parse(f".func main\n{text}\n.endfunc\n")
    img = assemble(prog, 0)
    assert img.words[0] == word


def test_branch_offsets_resolve_relative_to_pc():
    src = """.func main
top:
    addi t0, t0, 1
    bne t0, t1, top
    j end
    nop
end:
    ecall
.endfunc
"""
    img = assemble(parse(src), 0x100)
    assert decode(img.words[1]) == Instr("bne", 0, 5, 6, -4)
    assert decode(img.words[2]) == Instr("jal", 0, 0, 0, 8)


def test_la_and_data_objects():
    src = """.func main
    la a0, buf
    lw a1, 0(a0)
    ecall
.endfunc
.align 2
buf: .word 0xdeadbeef, 7
tail: .byte 1, 2, 3
"""
    img = assemble(parse(src), 0x1000)
    assert img.objects["buf"] == (img.symbols["buf"], img.symbols["buf"] + 8)
    # the last object runs to the word-aligned end of the image
    assert img.objects["tail"][1] - img.objects["tail"][0] == 4
    lui, addi = decode(img.words[0]), decode(img.words[1])
    assert ((lui.imm << 12) + addi.imm) & 0xFFFFFFFF == img.symbols["buf"]


def test_li_expands_large_constants():
    img = assemble(parse(".func main\nli a0, 0x12345fff\nli a1, -5\n.endfunc\n"), 0)
    from polen.sim import Machine

    m = Machine(img)
    m.run(len(img.words))
    assert m.regs[10] == 0x12345FFF
    assert m.regs[11] == (-5) & 0xFFFFFFFF


def test_ivslot_directive_layout():
    img = assemble(parse(".func main encrypt\n.ivslot 2\nnop\nret\n.endfunc\n.func other\necall\n.endfunc\n.entry other\n"), 0)
    assert img.words[:3] == [0xFFFFFFFF, 0xFFFFFFFF, 2]
    assert img.encrypted_regions()[0].start == 0
    assert img.encrypted_regions()[0].end == 20


@pytest.mark.parametrize("src,fragment", [
    (".func main\nfoo a0\n.endfunc\n", "unknown mnemonic"),
    (".func main\nx:\nx:\nnop\n.endfunc\n", "duplicate symbol"),
    (".func main\nj nowhere\n.endfunc\n", "nowhere"),
    (".func main\naddi a0, a0, 5000\n.endfunc\n", None),
    (".func main\nadd a0, a1\n.endfunc\n", None),
])
def test_assembler_errors(src, fragment):
    with pytest.raises(AsmError, match=fragment):
        assemble(parse(src))


def test_error_carries_line_number():
    with pytest.raises(AsmError) as e:
        parse(".func main\nnop\nbogus x\n.endfunc\n")
    assert e.value.line == 3


def test_pvo_round_trip(tmp_path):
    src = ".func main encrypt\n.ivslot 1\nret\n.endfunc\n.func start\nli a0, 3\necall\n.endfunc\n.entry start\nd: .word 1\n"
    img = assemble(parse(src), 0x2000)
    p = tmp_path / "x.pvo"
    asm.write_image(p, img)
    back = asm.read_image(p)
    assert back == img
    assert asm.image_to_bytes(back) == p.read_bytes()


def test_pvo_rejects_garbage():
    with pytest.raises(AsmError):
        asm.image_from_bytes(b"XXXX" + bytes(24))
    img = assemble(parse(".func main\necall\n.endfunc\n"))
    with pytest.raises(AsmError):
        asm.image_from_bytes(asm.image_to_bytes(img) + b"\0")


def test_format_program_reparses_to_same_image():
    from polen.programs import corpus_source

    prog = parse(corpus_source("aes8"))
    again = parse(asm.format_program(prog))
    assert assemble(again).words == assemble(prog).words
