import pytest

from polen import asm, binenc
from polen.asm import AsmProgram, Directive, IV_MAGIC, assemble, decode, parse
from polen.cfgprep import (PrepError, bracket_calls, build_cfg, cfg_to_function, count_slots, materialize_fallthroughs,
                           merge_blocks, prepare_cfg, prepare_program)
from polen.cipher import CipherConfig
from polen.pipeline import build, make_machine, preset
from polen.programs import BRACKET_SOURCE


def func(body: str, attrs: str = "encrypt", name: str = "g"):
    return parse(f".func {name} {attrs}\n{body}.endfunc\n").function(name)


def harness(body: str, arg: int) -> str:
    return f""".entry main
.func main
    addi sp, sp, -16
    sw ra, 12(sp)
    li a0, {arg}
    call g
    lw ra, 12(sp)
    addi sp, sp, 16
    sw a0, EXIT(zero)
.endfunc
.func g
{body}.endfunc
"""


STRAIGHT = """\
    addi a0, a0, 1
    xor a0, a0, a1
    ret
"""

DIAMOND = """\
    beqz a0, d_else
    addi a1, a0, 1
    j d_join
d_else:
    addi a1, a0, -1
d_join:
    mv a0, a1
    ret
"""

# B1 falls into B2, which the branch also targets
FALLTHROUGH = """\
    beqz a0, f_b2
    addi a0, a0, 1
f_b2:
    addi a0, a0, 3
    ret
"""

CHAIN2 = """\
    addi a0, a0, 1
    j c_next
c_next:
    addi a0, a0, 2
    ret
"""

# blocks laid out out of order, each jumping to the next in the chain
CHAIN5 = """\
    addi a0, a0, 1
    j c1
c3:
    addi a0, a0, 4
    j c4
c1:
    addi a0, a0, 2
    j c2
c4:
    addi a0, a0, 5
    ret
c2:
    addi a0, a0, 3
    j c3
"""

LOOP = """\
    li a1, 0
l_top:
    beqz a0, l_out
    add a1, a1, a0
    addi a0, a0, -1
    j l_top
l_out:
    mv a0, a1
    ret
"""


def ops(block):
    return [i.op for i in block.instrs]


def test_straight_line_is_one_block():
    cfg = build_cfg(func(STRAIGHT))
    assert len(cfg.blocks) == 1
    assert ops(cfg.blocks[0]) == ["addi", "xor", "jalr"]


def test_diamond_has_four_blocks_and_edges():
    cfg = build_cfg(func(DIAMOND))
    assert len(cfg.blocks) == 4
    edges = [e for e in cfg.edges() if e.dst is not None]
    assert len(edges) == 4
    assert sorted((e.src, e.dst) for e in edges) == [(0, 1), (0, 2), (1, 3), (2, 3)]
    assert cfg.preds() == [0, 1, 1, 2]


def test_fallthrough_shape():
    cfg = build_cfg(func(FALLTHROUGH))
    assert [b.label for b in cfg.blocks] == ["g", "g__bb1", "f_b2"]
    kinds = {(e.src, e.dst): e.kind for e in cfg.edges() if e.dst is not None}
    assert kinds == {(0, 2): "branch-taken", (0, 1): "fallthrough", (1, 2): "fallthrough"}


def test_merge_two_block_chain():
    cfg = merge_blocks(build_cfg(func(CHAIN2)))
    assert len(cfg.blocks) == 1
    assert ops(cfg.blocks[0]) == ["addi", "addi", "jalr"]
    assert cfg.blocks[0].inner == [(1, "c_next")]


def test_merge_chain_of_five_reaches_fixpoint():
    cfg = merge_blocks(build_cfg(func(CHAIN5)))
    assert len(cfg.blocks) == 1
    assert [i.imm for i in cfg.blocks[0].instrs[:5]] == [1, 2, 3, 4, 5]


def test_merge_keeps_block_with_two_predecessors():
    before = build_cfg(func(DIAMOND))
    after = merge_blocks(before)
    assert [b.label for b in after.blocks] == [b.label for b in before.blocks]
    assert [ops(b) for b in after.blocks] == [ops(b) for b in before.blocks]


def test_materialize_fixes_fallthrough_into_shared_block():
    cfg = materialize_fallthroughs(merge_blocks(build_cfg(func(FALLTHROUGH))))
    b0, b1, b2 = cfg.blocks
    # the not-taken path also gets a taken jump
    assert ops(b0) == ["beq", "jal"] and b0.instrs[-1].rd == 0
    assert ops(b1) == ["addi", "jal"]
    assert asm.format_instr(b1.instrs[-1]).endswith("f_b2")
    assert ops(b2) == ["addi", "jalr"]


def test_materialize_leaves_merged_function_alone():
    cfg = merge_blocks(build_cfg(func(CHAIN5)))
    assert [ops(b) for b in materialize_fallthroughs(cfg).blocks] == [ops(b) for b in cfg.blocks]


@pytest.mark.parametrize("body", [STRAIGHT, DIAMOND, FALLTHROUGH, CHAIN2, CHAIN5, LOOP])
def test_passes_only_remove_or_add_direct_jumps(body):
    f = func(body)
    cfg = build_cfg(f)
    merged = merge_blocks(cfg)
    fixed = materialize_fallthroughs(merged)

    def non_jumps(c):
        return sorted(asm.format_instr(i) for b in c.blocks for i in b.instrs if not (i.op == "jal" and i.rd == 0))

    assert non_jumps(cfg) == non_jumps(merged) == non_jumps(fixed)
    added = sum(len(b.instrs) for b in fixed.blocks) - sum(len(b.instrs) for b in merged.blocks)
    assert added >= 0
    assert all(i.op == "jal" and i.rd == 0 for i in
               [i for b in fixed.blocks for i in b.instrs[len(next(m for m in merged.blocks if m.label == b.label).instrs):]])


def test_diamond_slot_counts():
    f = func(DIAMOND)
    cfg = prepare_cfg(f, {"g": True})
    assert len(cfg.blocks) == 4
    assert all(b.needs_iv for b in cfg.blocks)
    assert sum(b.nb_I for b in cfg.blocks) == len(f.instrs) + 2


def test_slot_words_hold_magic_and_count():
    prog = AsmProgram([cfg_to_function(prepare_cfg(func("""\
    addi a0, a0, 1
    addi a0, a0, 2
    addi a0, a0, 3
    ret
"""), {"g": True}))])
    img = assemble(prog, 0x1000)
    assert img.words[:3] == [IV_MAGIC, IV_MAGIC, 4]
    assert img.symbols["g"] == 0x1000


def test_three_blocks_grow_the_image_by_36_bytes():
    body = """\
    j t_l2
t_l1:
    addi a0, a0, 1
    ret
t_l2:
    addi a0, a0, 2
    j t_l1
"""
    f = func(body)
    prepared = cfg_to_function(prepare_cfg(f, {"g": True}, merge=False))
    assert count_slots(AsmProgram([prepared])) == 3
    grown = assemble(AsmProgram([prepared]), 0x1000)
    plain = assemble(AsmProgram([func(body)]), 0x1000)
    assert 4 * (len(grown.words) - len(plain.words)) == 36


def test_encrypted_to_encrypted_call_adds_one_slot_and_no_island():
    with_call = func("""\
    addi a0, a0, 1
    call h
    addi a0, a0, 2
    ret
""")
    without = func("""\
    addi a0, a0, 1
    addi a0, a0, 2
    ret
""")
    attrs = {"g": True, "h": True}
    a, b = prepare_cfg(with_call, attrs), prepare_cfg(without, attrs)
    assert sum(x.needs_iv for x in a.blocks) == sum(x.needs_iv for x in b.blocks) + 1
    assert not any(x.island for x in a.blocks)
    assert not any(i.op in ("enable_dec", "disable_dec") for x in a.blocks for i in x.instrs)


def test_plain_to_plain_call_is_untouched():
    prog = parse(".entry main\n.func main\n    call h\n    sw a0, EXIT(zero)\n.endfunc\n"
                 ".func h\n    ret\n.endfunc\n")
    out = prepare_program(prog)
    assert [f.body for f in out.functions] == [f.body for f in prog.functions]


def test_encrypted_to_plain_call_gets_a_two_instruction_island():
    prog = parse(BRACKET_SOURCE)
    cfg = prepare_cfg(prog.function("outer"), prog.code_attrs())
    islands = [b for b in cfg.blocks if b.island]
    assert len(islands) == 1
    isl = islands[0]
    assert isl.label == "outer__isl0" and isl.island == "plain" and not isl.needs_iv
    assert ops(isl) == ["enable_dec", "jal"] and isl.instrs[1].rd == 0
    call_block = cfg.blocks[cfg.blocks.index(isl) - 1]
    assert ops(call_block)[-2:] == ["disable_dec", "jal"]
    cont = cfg.blocks[cfg.blocks.index(isl) + 1]
    assert asm.format_instr(isl.instrs[1]).endswith(cont.label)
    assert cont.needs_iv


def _bracket_build():
    return build(preset("encrypted_9"), BRACKET_SOURCE, "outer")


def _island_addr(b):
    return b.plain.symbols["outer__isl0"]


def test_bracket_fixture_island_stays_plain_in_the_image():
    b = _bracket_build()
    isl = _island_addr(b)
    assert not any(r.start <= isl < r.end for r in b.image.encrypted_regions())
    words = [b.image.word_at(isl), b.image.word_at(isl + 4)]
    assert words == [b.plain.word_at(isl), b.plain.word_at(isl + 4)]
    assert decode(words[0]).op == "enable_dec"
    assert decode(words[1]).op == "jal" and decode(words[1]).rd == 0
    assert binenc.verify_image(b.plain, b.image, b.config.key).ok


def test_bracket_fixture_toggles_at_call_and_island_jump():
    b = _bracket_build()
    m = make_machine(b)
    r = m.run()
    assert (r.status, r.exit_code) == ("halted", 14)
    sym = b.plain.symbols
    isl = _island_addr(b)
    start, end = sym["outer"], sym["helper"]
    # (a): the jal into helper inside outer
    calls = [a for a in range(start, end, 4)
             if decode(b.plain.word_at(a)).op == "jal" and decode(b.plain.word_at(a)).rd == 1
             and a + decode(b.plain.word_at(a)).imm == sym["helper"]]
    assert len(calls) == 1
    (a,) = calls
    # (c): the jump at the end of the island
    c = isl + 4
    local = [t for t in m.toggles if start <= t[0] < sym["helper"] + 8 or t[0] in (isl, c)]
    assert local == [(a, False), (c, True)]
    # main enters and leaves the encrypted function through its own toggles
    assert len(m.toggles) == 4
    assert m.toggles[0][1] is True and m.toggles[-1][1] is False
    assert all(not (start <= pc < end) for pc, _ in (m.toggles[0], m.toggles[-1]))


def test_bracket_fixture_fails_without_the_island():
    b = _bracket_build()
    img = b.image.copy()
    img.words[(_island_addr(b) - img.base) >> 2] = 0x00000013  # enable_dec -> nop
    m = make_machine(b, image=img)
    assert m.run().status == "fault"


@pytest.mark.parametrize("body,arg", [(DIAMOND, 0), (DIAMOND, 7), (FALLTHROUGH, 0), (FALLTHROUGH, 9),
                                      (CHAIN5, 3), (LOOP, 10), (STRAIGHT, 4)])
def test_preparation_preserves_semantics(body, arg):
    src = harness(body, arg)
    plain = build(preset("unprotected"), src, "g")
    enc = build(preset("encrypted_9"), src, "g")
    r0 = make_machine(plain).run()
    r1 = make_machine(enc).run()
    # the prepared but unencrypted image under the null cipher
    r2 = make_machine(enc, image=enc.plain, cipher_config=CipherConfig("null")).run()
    assert r0.status == "halted"
    assert r0.exit_code == r1.exit_code == r2.exit_code


def test_errors():
    with pytest.raises(PrepError, match="undefined label"):
        build_cfg(func("    j nowhere\n"))
    with pytest.raises(PrepError, match="empty"):
        build_cfg(func(""))
    with pytest.raises(PrepError, match="literal data"):
        build_cfg(func("    .word 5\n    ret\n"))
    with pytest.raises(PrepError, match="already prepared"):
        build_cfg(func("    .ivslot 1\n    ret\n"))
    with pytest.raises(PrepError, match="end of function"):
        build_cfg(func("    ret\ng_end:\n"))
    with pytest.raises(PrepError, match="indirect jump"):
        prepare_cfg(func("    jr a0\n"), {"g": True})
    with pytest.raises(PrepError, match="indirect call"):
        prepare_cfg(func("    jalr a0\n    ret\n"), {"g": True})
    with pytest.raises(PrepError, match="unknown symbol"):
        bracket_calls(build_cfg(func("    call missing\n    ret\n")), {"g": True})
    with pytest.raises(PrepError, match="falls off"):
        prepare_cfg(func("    addi a0, a0, 1\n"), {"g": True})
    with pytest.raises(PrepError, match="must not be encrypted"):
        prepare_program(parse(".entry main\n.func main encrypt\n    ret\n.endfunc\n"))


def test_prepared_text_reassembles():
    out = prepare_program(parse(BRACKET_SOURCE))
    again = parse(asm.format_program(out))
    assert count_slots(again) == count_slots(out) > 0
    assert any(isinstance(x, Directive) and x.name == ".plaintext" for x in again.function("outer").body)
