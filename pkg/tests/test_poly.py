import random
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polen import asm, cipher
from polen.asm import Instr, assemble, decode, encode, parse
from polen.cfgprep import build_cfg
from polen.pipeline import build, make_machine, preset
from polen.poly import (EXIT_OVERFLOW, NOP, TRANSFORMS, GenStats, PolyConfig, PolyError, analyze_liveness, build_plan,
                        cdgend, find_shuffle_windows, gennoise, parse_config, pick_variant,
                        static_instance_words)
from polen.programs import FIXTURE_BODIES, FIXTURE_NAMES, fixture_reference, fixture_source
from polen.sim import Machine

R = asm.REGS
MASK = 0xFFFFFFFF


def fn(body: str, name: str = "f"):
    return parse(f".func {name} poly\n{body}.endfunc\n").function(name)


def run_regs(lines: list[str], init: dict[int, int]) -> list[int]:
    src = "\n".join([f"    li x{r}, {v}" for r, v in init.items()] + lines + ["    sw zero, EXIT(zero)"])
    m = Machine(assemble(parse(f".entry main\n.func main\n{src}\n.endfunc\n"), 0x1000))
    assert m.run().ok
    return m.regs


# ---------------------------------------------------------------- config


def test_parse_config_keys():
    cfg = parse_config("""\
# generator settings
p = 2
nmax = 4          # bursts of 2..16
regen_period = 0x10
transforms = variants, noise
encrypt_instance = yes
buffer_words = auto
noise_mode = dead
registers = t0, t1, a5
""")
    assert (cfg.p, cfg.nmax, cfg.regen_period) == (2, 4, 16)
    assert cfg.transforms == {"variants", "noise"}
    assert cfg.encrypt_instance and cfg.buffer_words is None and cfg.noise_mode == "dead"
    assert cfg.registers == (R["t0"], R["t1"], R["a5"])
    assert parse_config("transforms = all").transforms == set(TRANSFORMS)
    assert parse_config("transforms = none").transforms == set()
    assert parse_config("") == PolyConfig()


@pytest.mark.parametrize("text,msg", [
    ("p", "key = value"), ("colour = red", "unknown key"), ("encrypt_instance = maybe", "boolean"),
    ("p = 40", "p must"), ("nmax = 0", "nmax"), ("regen_period = 0", "regen_period"),
    ("transforms = fold", "unknown transform"), ("noise_mode = loud", "noise_mode"),
])
def test_parse_config_errors(text, msg):
    with pytest.raises(PolyError, match=msg):
        parse_config(text)


# ---------------------------------------------------------------- liveness


def test_kernel_liveness():
    cfg = build_cfg(fn(FIXTURE_BODIES["kernel"]))
    live = analyze_liveness(cfg)
    a2 = R["a2"]
    # xor a2 is at index 2, its last use is the mv at index 3
    assert a2 in live.before[0][3] and a2 not in live.after[0][3]
    assert {R["a0"], R["a1"]} <= live.live_in[0]


DIAMOND = """\
    beqz a0, d_else
    add a2, a1, a3
    j d_join
d_else:
    xor a2, a4, a5
    mv a3, a6
d_join:
    add a0, a2, a3
    ret
"""


def brute_live(cfg, k, p, exit_live):
    """Registers read before being written on some path from (k, p) to the exit."""
    idx = cfg.index()
    out = set()

    def walk(k, p, written):
        b = cfg.blocks[k]
        for q in range(p, len(b.instrs)):
            i = b.instrs[q]
            out.update(r for r in i.reads() if r and r not in written)
            written = written | {r for r in i.writes() if r}
            if i.is_ret:
                out.update(r for r in exit_live if r not in written)
                return
            if i.is_branch:
                walk(idx[i.imm.text], 0, written)
            elif i.op == "jal" and i.rd == 0:
                walk(idx[i.imm.text], 0, written)
                return
        walk(k + 1, 0, written)

    walk(k, p, frozenset())
    return out


def test_liveness_matches_path_enumeration():
    cfg = build_cfg(fn(DIAMOND))
    exit_live = {R["a0"], R["sp"]}
    live = analyze_liveness(cfg, exit_live)
    for k, b in enumerate(cfg.blocks):
        for p in range(len(b.instrs)):
            assert live.before[k][p] == brute_live(cfg, k, p, exit_live), (k, p)


# ---------------------------------------------------------------- windows


def ins(text: str) -> Instr:
    return parse(f".func f\n    {text}\n.endfunc\n").function("f").instrs[0]


def test_window_examples():
    assert find_shuffle_windows([ins("add a2, a0, a1"), ins("add a3, a0, a1")]) == [[0, 1]]
    assert find_shuffle_windows([ins("add a2, a0, a1"), ins("xor a3, a2, a0")]) == [[0], [1]]
    # memory and control never join a window
    w = find_shuffle_windows([ins("add a2, a0, a1"), ins("lw a3, 0(a0)"), ins("add a4, a0, a1"), ins("ret")])
    assert w == [[0], [1], [2], [3]]


@st.composite
def alu_block(draw):
    out = []
    for _ in range(6):
        op = draw(st.sampled_from(["add", "sub", "xor", "or", "and", "sll", "mul", "addi", "slli", "lui"]))
        rd, a, b = (draw(st.integers(5, 10)) for _ in range(3))
        if op in ("addi",):
            out.append(f"{op} x{rd}, x{a}, {draw(st.integers(-2048, 2047))}")
        elif op == "slli":
            out.append(f"{op} x{rd}, x{a}, {draw(st.integers(0, 31))}")
        elif op == "lui":
            out.append(f"lui x{rd}, {draw(st.integers(0, 0xFFFFF))}")
        else:
            out.append(f"{op} x{rd}, x{a}, x{b}")
    return out


@settings(max_examples=150, deadline=None)
@given(alu_block(), st.randoms(use_true_random=False), st.lists(st.integers(0, MASK), min_size=6, max_size=6))
def test_window_permutations_preserve_results(block, rnd, values):
    instrs = [ins(t) for t in block]
    windows = find_shuffle_windows(instrs)
    assert sorted(p for w in windows for p in w) == list(range(6))
    order = []
    for w in windows:
        w = list(w)
        rnd.shuffle(w)
        order += w
    init = dict(zip(range(5, 11), values))
    assert run_regs(["    " + block[p] for p in order], init) == run_regs(["    " + t for t in block], init)


# ---------------------------------------------------------------- variants


def eval_seq(seq, regs, mask):
    regs = dict(regs)
    for i in seq:
        a, b = regs.get(i.rs1, 0), regs.get(i.rs2, 0)
        v = {"add": a + b, "sub": a - b, "xor": a ^ b, "or": a | b, "and": a & b}[i.op]
        if i.rd:
            regs[i.rd] = v & mask
    return regs


def test_xor_variant_shape():
    t, d, a, b = R["t3"], R["a0"], R["a1"], R["a2"]
    got = pick_variant(Instr("xor", d, a, b), [t])
    assert [(i.op, i.rd, i.rs1, i.rs2) for i in got] == [("or", t, a, b), ("and", d, a, b), ("sub", d, t, d)]


@pytest.mark.parametrize("op", ["xor", "add", "sub", "or", "and"])
def test_variants_exhaustive_8bit(op):
    x, y = (v.ravel() for v in np.meshgrid(np.arange(256), np.arange(256)))
    for d, a, b in [(10, 11, 12), (10, 10, 12), (10, 11, 10), (10, 10, 10)]:
        seq = pick_variant(Instr(op, d, a, b), [R["t3"]])
        assert len(seq) in (2, 3)
        regs = {a: x, b: y} if a != b else {a: x}
        want = eval_seq([Instr(op, d, a, b)], regs, 0xFF)[d]
        assert np.array_equal(eval_seq(seq, regs, 0xFF)[d], want)


@settings(max_examples=300)
@given(st.sampled_from(["xor", "add", "sub", "or", "and"]), st.integers(0, MASK), st.integers(0, MASK))
def test_variants_random_32bit(op, x, y):
    seq = pick_variant(Instr(op, 10, 11, 12), [R["t3"]])
    assert eval_seq(seq, {11: x, 12: y}, MASK)[10] == eval_seq([Instr(op, 10, 11, 12)], {11: x, 12: y}, MASK)[10]


def test_variant_fallbacks():
    add = Instr("add", 10, 11, 12)
    assert pick_variant(add, []) == [add]
    assert pick_variant(add, [10, 11, 12]) == [add]
    mul = Instr("mul", 10, 11, 12)
    assert pick_variant(mul, [R["t3"]]) == [mul]


def test_variants_are_not_nested():
    f = fn(FIXTURE_BODIES["mixer"])
    plan = build_plan(f, PolyConfig(transforms=frozenset({"variants"})))
    # depth one: at most three words per source instruction
    assert len(f.instrs) < plan.n_functional <= 3 * len(f.instrs)


# ---------------------------------------------------------------- noise


def test_noise_every_site_at_p0():
    rng = random.Random(1)
    draws = [gennoise(lambda: rng.getrandbits(32), 0, 5) for _ in range(200)]
    assert all(draws)
    assert {len(d) for d in draws} == {2, 4, 8, 16, 32}
    assert all(set(d) == {NOP} for d in draws)


def test_noise_rate_and_sizes():
    rng = random.Random(2)
    n, hits = 20_000, 0
    sizes = set()
    for _ in range(n):
        out = gennoise(lambda: rng.getrandbits(32), 3, 5)
        hits += bool(out)
        sizes.add(len(out))
    sd = (n * 1 / 8 * 7 / 8) ** 0.5
    assert abs(hits - n / 8) < 4 * sd
    assert sizes - {0} == {2, 4, 8, 16, 32}


# ---------------------------------------------------------------- cdgend


def test_cdgend_without_fixups_is_a_no_op():
    buf = [1, 2, 3]
    cdgend([], buf, 0x2000)
    assert buf == [1, 2, 3]


def test_cdgend_patches_an_encrypted_forward_jump():
    key, iv = bytes(range(10)), 77
    impl = cipher.backend("trivium")
    words = [0x00000013, 0, 0x00000013, 0x00000013, 0x00000013]  # placeholder at index 1
    state = impl.init(key, iv)
    enc = []
    for w in words:
        state, c = impl.encrypt_word(state, w)
        enc.append(c)
    base = 0x4000
    template = encode(Instr("jal", 0, 0, 0, 0))
    cdgend([(base + 4, base + 16, template, "jal")], enc, base)
    state = impl.init(key, iv)
    plain = []
    for c in enc:
        state, m = impl.encrypt_word(state, c)
        plain.append(m)
    assert decode(plain[1]) == Instr("jal", 0, 0, 0, 12)
    assert plain[0] == plain[2] == NOP


def test_backward_jump_needs_no_fixup():
    plan = build_plan(fn("""\
    li a0, 3
l_top:
    addi a0, a0, -1
    bnez a0, l_top
    ret
"""), PolyConfig(transforms=frozenset()))
    back = [(k, s) for k, b in enumerate(plan.blocks) for s in b.sites if s.kind == "branch"]
    assert len(back) == 1 and back[0][1].target <= back[0][0]
    # only the two materialized fall-through jumps point forward
    assert plan.n_forward == 2


# ---------------------------------------------------------------- generation


def fixture_build(name, config="polen_9", **poly):
    poly.setdefault("regen_period", 1000)
    return build(preset(config, poly=PolyConfig(**poly)), fixture_source(name, 16), "f")


def random_inputs(seed, n=16):
    rnd = random.Random(seed)
    vecs = [(rnd.getrandbits(32), rnd.getrandbits(32), rnd.getrandbits(32)) for _ in range(n)]
    cells = [rnd.getrandbits(32) for _ in range(n)]
    data = {"vecs": b"".join(struct.pack("<4I", a, 0, c, d) for a, c, d in vecs), "cells": struct.pack(f"<{n}I", *cells)}
    return vecs, cells, data


def run_fixture(b, name, seed, n=16):
    vecs, cells, data = random_inputs(seed, n)
    m = make_machine(b, inputs=data, rng_seed=seed)
    r = m.run()
    assert r.ok, r
    got = struct.unpack(f"<{4 * n}I", m.read_bytes(b.image.symbols["vecs"], 16 * n))
    results = [(got[4 * k], got[4 * k + 1]) for k in range(n)]
    final_cells = list(struct.unpack(f"<{n}I", m.read_bytes(b.image.symbols["cells"], 4 * n)))
    assert (results, final_cells) == fixture_reference(name, vecs, cells)
    return m


def test_same_seed_same_instance():
    b = fixture_build("branchy")
    assert b.reference_instance("f", 5) == b.reference_instance("f", 5)
    assert b.reference_instance("f", 5) != b.reference_instance("f", 6)


def test_guest_matches_host_on_kernel_with_seed_deadbeef():
    b = fixture_build("kernel")
    m = run_fixture(b, "kernel", 0xDEADBEEF)
    assert b.instance_bytes(m, "f") == b.reference_instance("f", 0xDEADBEEF)


@pytest.mark.parametrize("config", ["polymorphic", "polen_9"])
@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_guest_matches_host_and_reference(name, config):
    b = fixture_build(name, config)
    for seed in range(4):
        m = run_fixture(b, name, seed)
        assert b.instance_bytes(m, "f") == b.reference_instance("f", seed)


def words_of(data: bytes) -> list[int]:
    return list(struct.unpack(f"<{len(data) // 4}I", data))


def decrypt_instance(b, data, name="f"):
    """Split an encrypted instance into (iv words, plaintext words) per block."""
    plan = b.plans[name]
    words = words_of(data)
    impl = b.config.cipher.impl
    out, p = [], 0
    # noise words are nops, so a block ends once all its functional words are seen
    for block in plan.blocks:
        iv = words[p : p + 3]
        state = impl.init(b.config.key, impl.slot_iv(iv))
        p += 3
        body = []
        functional = len(block.sites)
        while functional:
            state, w = impl.encrypt_word(state, words[p])
            p += 1
            body.append((words[p - 1], w))
            if w != NOP:
                functional -= 1
        out.append((iv, body))
    return out


def test_identity_instance_equals_the_prepared_function():
    b = fixture_build("branchy", transforms=frozenset())
    plan = b.plans["f"]
    buf = b.image.symbols["f__buf"]
    blocks = decrypt_instance(b, b.reference_instance("f", 3))
    static = static_instance_words(plan, b.image.symbols, buf)
    assert [[w for _, w in body] for _, body in blocks] == static
    # each block is three IV words and nb_I encrypted words
    st_ = GenStats()
    b.reference_instance("f", 3, stats=st_)
    assert st_.words == sum(3 + len(s) for s in static)


def test_encrypted_instance_hides_every_instruction():
    b = fixture_build("mixer")
    for _, body in decrypt_instance(b, b.reference_instance("f", 8)):
        assert all(c != w for c, w in body)


def test_register_shuffle_is_a_bijection_on_the_pool():
    b = fixture_build("mixer", config="polymorphic", transforms=frozenset({"shuffle_regs"}))
    plan = b.plans["f"]
    static = [w for blk in static_instance_words(plan, b.image.symbols, b.image.symbols["f__buf"]) for w in blk]
    seen_non_identity = False
    for seed in range(10):
        got = words_of(b.reference_instance("f", seed))[: len(static)]
        mapping = {}
        for s, g in zip(static, got):
            si, gi = decode(s), decode(g)
            assert si.op == gi.op and si.imm == gi.imm
            for field in ("rd", "rs1", "rs2"):
                r0, r1 = getattr(si, field), getattr(gi, field)
                assert mapping.setdefault(r0, r1) == r1
        assert len(set(mapping.values())) == len(mapping)
        for r, r1 in mapping.items():
            if r in plan.allocatable:
                assert r1 in plan.allocatable
            else:
                assert r1 == r
        seen_non_identity |= any(r != r1 for r, r1 in mapping.items())
    assert seen_non_identity


def test_shuffled_windows_show_several_orders():
    b = fixture_build("mixer", config="polymorphic", transforms=frozenset({"shuffle_instr"}))
    orders = {tuple(words_of(b.reference_instance("f", seed))[:12]) for seed in range(8)}
    assert len(orders) >= 2


def test_instance_is_at_least_the_prepared_size():
    for name in FIXTURE_NAMES:
        b = fixture_build(name)
        plan = b.plans["f"]
        for seed in range(5):
            st_ = GenStats()
            b.reference_instance("f", seed, stats=st_)
            assert st_.words >= sum(len(bl.instrs) for bl in plan.cfg.blocks) + 3 * len(plan.blocks)


def test_undersized_buffer_is_rejected_at_build_time():
    with pytest.raises(PolyError, match="cannot hold"):
        fixture_build("mixer", buffer_words=10)


def test_noise_overflow_is_caught_on_both_sides():
    plan_words = build_plan(fn(FIXTURE_BODIES["mixer"]), PolyConfig(encrypt_instance=True)).min_words
    b = fixture_build("mixer", p=0, buffer_words=plan_words + 8)
    with pytest.raises(PolyError, match="overflow"):
        b.reference_instance("f", 1)
    _, _, data = random_inputs(1)
    r = make_machine(b, inputs=data, rng_seed=1).run()
    assert (r.status, r.exit_code) == ("halted", EXIT_OVERFLOW)


@pytest.mark.parametrize("body,msg", [
    ("    call g\n    ret\n", "calls"),
    ("    jr a0\n", "indirect"),
    ("    auipc a0, 0\n    ret\n", "auipc"),
    ("    enable_dec\n    ret\n", "extension"),
])
def test_unsupported_functions(body, msg):
    with pytest.raises(PolyError, match=msg):
        build_plan(fn(body), PolyConfig())


def test_fixed_registers_cannot_be_permuted():
    with pytest.raises(PolyError, match="permutation domain"):
        build_plan(fn(FIXTURE_BODIES["kernel"]), PolyConfig(registers=(R["sp"], R["t0"])))


def test_dead_register_noise_keeps_semantics():
    b = fixture_build("branchy", noise_mode="dead", p=1)
    for seed in range(3):
        run_fixture(b, "branchy", seed)
