"""Run-time code polymorphism.

``polygen`` turns a ``poly`` function ``F`` into

* ``F``         a wrapper that regenerates the instance every ``regen_period``
                calls and then calls it,
* ``F__sgpc``   a specialised generator written in guest assembly that emits a
                fresh, optionally encrypted instance of ``F`` into ``F__buf``,
* ``F__noise``  its noise routine, plus the shared ``polen_*`` helpers.

The generator consumes the guest RNG device in a fixed order, which
:func:`host_reference_generate` replays on the host:

1. register permutation: Fisher-Yates over the allocatable registers,
   ``i`` from ``m - 1`` down to 1, ``j = rng % (i + 1)``;
2. per block, when the instance is encrypted: the three IV words (``initbb``);
3. per window of two or more instructions with instruction shuffling on:
   Fisher-Yates over the window positions, drawn when the window starts;
4. per emission site (before every functional instruction): one noise coin,
   inserting iff ``coin >> (32 - p) == 0``;
5. if inserting: one burst draw, ``N = 1 + rng % Nmax``, emitting ``2**N``
   noise words.

Changing this order changes every generated instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from . import cipher
from .asm import (
    ABI_NAMES, LOADS, REGS, SHIFTS, I_ALU, R_OPS, AsmProgram, CodeBuf, DataBlock, Directive, Expr,
    Function, Instr, Label, b_imm_bits, encode, j_imm_bits, parse,
)
from .cfgprep import Cfg, _target, build_cfg, materialize_fallthroughs, merge_blocks
from .sim import seed32, xorshift32

MASK32 = 0xFFFFFFFF
NOP = 0x00000013
TRANSFORMS = ("variants", "shuffle_instr", "shuffle_regs", "noise")
EXIT_OFFSET_RANGE = 0xB0E
EXIT_OVERFLOW = 0xB0F

FIXED = {REGS[n] for n in ("zero", "sp", "ra", "gp", "tp")}
CALLEE_SAVED = {REGS[f"s{k}"] for k in range(12)}
DEFAULT_POOL = [REGS[f"t{k}"] for k in range(7)] + [REGS[f"a{k}"] for k in range(8)]
RETURN_REGS = {REGS["a0"], REGS["a1"]}
EXIT_LIVE = RETURN_REGS | FIXED - {0} | CALLEE_SAVED


class PolyError(Exception):
    pass


@dataclass(frozen=True)
class PolyConfig:
    p: int = 3
    nmax: int = 5
    regen_period: int = 1
    transforms: frozenset = frozenset(TRANSFORMS)
    encrypt_instance: bool = False
    buffer_words: int | None = None
    noise_mode: str = "nop"               # nop | dead
    registers: tuple[int, ...] | None = None
    encrypt_wrapper: bool | None = None   # None: follow the function's attribute
    encrypt_sgpc: bool | None = None
    trace_generation: bool = False        # False: the wrapper pauses trace capture around the generator

    def __post_init__(self):
        if not 0 <= self.p <= 32:
            raise PolyError("p must lie in [0, 32]")
        if not 1 <= self.nmax <= 16:
            raise PolyError("nmax must lie in [1, 16]")
        if self.regen_period < 1:
            raise PolyError("regen_period must be at least 1")
        bad = set(self.transforms) - set(TRANSFORMS)
        if bad:
            raise PolyError(f"unknown transform {sorted(bad)[0]!r}")
        if self.noise_mode not in ("nop", "dead"):
            raise PolyError("noise_mode must be nop or dead")

    def has(self, t: str) -> bool:
        return t in self.transforms


def parse_config(text: str, base: PolyConfig | None = None) -> PolyConfig:
    """Read a flat ``key = value`` configuration (``#`` starts a comment)."""
    cfg = base or PolyConfig()
    kw: dict = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PolyError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        if key in ("p", "nmax", "regen_period"):
            kw[key] = int(value, 0)
        elif key == "buffer_words":
            kw[key] = None if value.lower() in ("", "auto") else int(value, 0)
        elif key == "transforms":
            v = value.lower()
            names = TRANSFORMS if v == "all" else () if v in ("none", "") else tuple(
                s.strip() for s in v.split(",") if s.strip())
            kw[key] = frozenset(names)
        elif key in ("encrypt_instance", "encrypt_wrapper", "encrypt_sgpc", "trace_generation"):
            kw[key] = _bool(value, n)
        elif key == "noise_mode":
            kw[key] = value.lower()
        elif key == "registers":
            kw[key] = tuple(REGS[r.strip().lower()] for r in value.split(",") if r.strip())
        else:
            raise PolyError(f"config line {n}: unknown key {key!r}")
    return replace(cfg, **kw)


def _bool(v: str, n: int) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise PolyError(f"config line {n}: expected a boolean, got {v!r}")


# --------------------------------------------------------------------------
# liveness
# --------------------------------------------------------------------------


def _uses(i: Instr) -> set[int]:
    return {r for r in i.reads() if r}


def _defs(i: Instr) -> set[int]:
    return {r for r in i.writes() if r}


@dataclass
class Liveness:
    live_in: list[set[int]]
    live_out: list[set[int]]
    before: list[list[set[int]]]  # per block, per instruction
    after: list[list[set[int]]]


def analyze_liveness(cfg: Cfg, exit_live: Iterable[int] = EXIT_LIVE) -> Liveness:
    """Backward may-liveness over the CFG; returns sets per block and per point."""
    exit_live = set(exit_live)
    n = len(cfg.blocks)
    succ: list[list[int]] = [[] for _ in range(n)]
    exits = [False] * n
    for e in cfg.edges():
        if e.kind == "return":
            exits[e.src] = True
        elif e.dst is not None:
            succ[e.src].append(e.dst)
        elif e.kind in ("fallthrough", "call"):
            exits[e.src] = True
    use, defs = [], []
    for b in cfg.blocks:
        u, d = set(), set()
        for i in b.instrs:
            u |= _uses(i) - d
            d |= _defs(i)
        use.append(u)
        defs.append(d)
    live_in = [set() for _ in range(n)]
    live_out = [set() for _ in range(n)]
    changed = True
    while changed:
        changed = False
        for k in reversed(range(n)):
            out = set(exit_live) if exits[k] else set()
            for s in succ[k]:
                out |= live_in[s]
            new_in = use[k] | (out - defs[k])
            if out != live_out[k] or new_in != live_in[k]:
                live_out[k], live_in[k] = out, new_in
                changed = True
    before, after = [], []
    for k, b in enumerate(cfg.blocks):
        live = set(live_out[k])
        bb, aa = [], []
        for i in reversed(b.instrs):
            aa.append(set(live))
            live = (live - _defs(i)) | _uses(i)
            bb.append(set(live))
        before.append(bb[::-1])
        after.append(aa[::-1])
    return Liveness(live_in, live_out, before, after)


# --------------------------------------------------------------------------
# variants and windows
# --------------------------------------------------------------------------

VARIANT_FAMILIES = ("xor", "add", "sub", "or", "and")


def pick_variant(instr: Instr, dead: Iterable[int]) -> list[Instr]:
    """Equivalent replacement for xor/add/sub/or/and using one dead scratch register."""
    if instr.op not in VARIANT_FAMILIES or instr.rd == 0:
        return [instr]
    d, a, b = instr.rd, instr.rs1, instr.rs2
    scratch = sorted(r for r in dead if r not in (0, d, a, b))
    if not scratch:
        return [instr]
    t = scratch[0]
    loc = instr.loc
    I = lambda op, rd, rs1, rs2: Instr(op, rd, rs1, rs2, 0, loc)  # noqa: E731
    if instr.op == "xor":    # (a | b) - (a & b)
        return [I("or", t, a, b), I("and", d, a, b), I("sub", d, t, d)]
    if instr.op == "or":     # (a ^ b) + (a & b)
        return [I("xor", t, a, b), I("and", d, a, b), I("add", d, d, t)]
    if instr.op == "and":    # (a | b) - (a ^ b)
        return [I("or", t, a, b), I("xor", d, a, b), I("sub", d, t, d)]
    if instr.op == "add":    # a - (0 - b)
        return [I("sub", t, 0, b), I("sub", d, a, t)]
    return [I("sub", t, 0, b), I("add", d, a, t)]  # sub: a + (0 - b)


def _shufflable(i: Instr) -> bool:
    return i.op in R_OPS or i.op in I_ALU or i.op in SHIFTS or i.op == "lui"


def find_shuffle_windows(instrs: list[Instr]) -> list[list[int]]:
    """Greedy maximal runs of mutually independent ALU instructions (indices)."""
    windows: list[list[int]] = []
    cur: list[int] = []
    reads: set[int] = set()
    writes: set[int] = set()
    for k, i in enumerate(instrs):
        if not _shufflable(i):
            if cur:
                windows.append(cur)
            windows.append([k])
            cur, reads, writes = [], set(), set()
            continue
        r, w = _uses(i), _defs(i)
        if cur and not (r & writes or w & reads or w & writes):
            cur.append(k)
            reads |= r
            writes |= w
            continue
        if cur:
            windows.append(cur)
        cur, reads, writes = [k], set(r), set(w)
    if cur:
        windows.append(cur)
    return windows


# --------------------------------------------------------------------------
# plan
# --------------------------------------------------------------------------


@dataclass
class Site:
    instr: Instr
    kind: str = "plain"          # plain | branch | jal
    target: int | None = None    # block index for branch/jal
    dead: int | None = None      # scratch register for dead-register noise


@dataclass
class PlanBlock:
    label: str
    windows: list[list[Site]]

    @property
    def sites(self) -> list[Site]:
        return [s for w in self.windows for s in w]


@dataclass
class GenPlan:
    name: str
    blocks: list[PlanBlock]
    allocatable: list[int]
    cfg: Cfg
    config: PolyConfig

    @property
    def n_functional(self) -> int:
        return sum(len(b.sites) for b in self.blocks)

    @property
    def n_forward(self) -> int:
        return sum(1 for k, b in enumerate(self.blocks) for s in b.sites if s.target is not None and s.target > k)

    @property
    def max_window(self) -> int:
        return max((len(w) for b in self.blocks for w in b.windows), default=1)

    @property
    def min_words(self) -> int:
        return self.n_functional + (3 * len(self.blocks) if self.config.encrypt_instance else 0)

    @property
    def bound_words(self) -> int:
        c = self.config
        burst = (1 << c.nmax) if c.has("noise") else 0
        return self.n_functional * (1 + burst) + (3 * len(self.blocks) if c.encrypt_instance else 0)

    @property
    def buffer_words(self) -> int:
        return self.config.buffer_words or self.bound_words

    def permuted(self, r: int) -> bool:
        return self.config.has("shuffle_regs") and r in self.allocatable


def _validate_poly(f: Function) -> None:
    for i in f.instrs:
        if i.is_call:
            raise PolyError(f"{f.name}: calls are not supported inside a polymorphic function")
        if i.op == "jalr" and not i.is_ret:
            raise PolyError(f"{f.name}: indirect jumps are not supported inside a polymorphic function")
        if i.op == "auipc":
            raise PolyError(f"{f.name}: auipc is position dependent")
        if i.fmt == "EXT":
            raise PolyError(f"{f.name}: extension instructions cannot appear in a polymorphic function")


def prepared_cfg(f: Function) -> Cfg:
    _validate_poly(f)
    return materialize_fallthroughs(merge_blocks(build_cfg(f)))


def allocatable_set(cfg: Cfg, live: Liveness, config: PolyConfig) -> list[int]:
    live_in = live.live_in[0]
    if config.registers is not None:
        regs = sorted(set(config.registers))
        bad = [r for r in regs if r in FIXED or r in CALLEE_SAVED or r in live_in or r in RETURN_REGS]
        if bad:
            raise PolyError(f"register {ABI_NAMES[bad[0]]} cannot join the permutation domain")
        return regs
    return sorted(r for r in DEFAULT_POOL if r not in live_in and r not in RETURN_REGS)


def build_plan(f: Function, config: PolyConfig) -> GenPlan:
    cfg = prepared_cfg(f)
    live = analyze_liveness(cfg)
    alloc = allocatable_set(cfg, live, config)
    if config.has("variants"):
        for k, b in enumerate(cfg.blocks):
            out: list[Instr] = []
            for p, i in enumerate(b.instrs):
                dead = set(alloc) - live.after[k][p]
                out.extend(pick_variant(i, dead))
            b.instrs = out
        live = analyze_liveness(cfg)
    index = cfg.index()
    blocks = []
    for k, b in enumerate(cfg.blocks):
        windows = find_shuffle_windows(b.instrs) if config.has("shuffle_instr") else [[p] for p in range(len(b.instrs))]
        plan_windows = []
        for w in windows:
            busy = set()
            for p in w:
                busy |= live.before[k][p] | _defs(b.instrs[p])
            if len(w) == 1:
                busy = set(live.before[k][w[0]])
            free = [r for r in alloc if r not in busy]
            dead = free[0] if free and config.noise_mode == "dead" else None
            sites = []
            for p in w:
                i = b.instrs[p]
                if i.is_branch or (i.op == "jal" and i.rd == 0):
                    t = index[_target(i)]
                    sites.append(Site(i, "branch" if i.is_branch else "jal", t, dead))
                else:
                    sites.append(Site(i, "plain", None, dead))
            plan_windows.append(sites)
        blocks.append(PlanBlock(b.label, plan_windows))
    if len(blocks) > 500:
        raise PolyError(f"{f.name}: too many blocks for the generator's label table")
    plan = GenPlan(f.name, blocks, alloc, cfg, config)
    if config.buffer_words is not None and config.buffer_words < plan.min_words:
        raise PolyError(f"{f.name}: buffer of {config.buffer_words} words cannot hold the {plan.min_words}-word instance")
    return plan


# --------------------------------------------------------------------------
# templates
# --------------------------------------------------------------------------


def _role_fields(i: Instr) -> list[tuple[str, int, int]]:
    """(field, register, shift) for the register fields present in the encoding."""
    f = i.fmt
    out = []
    if f in ("R", "I", "U", "J") and i.op != "ecall":
        out.append(("rd", i.rd, 7))
    if f in ("R", "I", "S", "B") and i.op != "ecall":
        out.append(("rs1", i.rs1, 15))
    if f in ("R", "S", "B"):
        out.append(("rs2", i.rs2, 20))
    return out


def _imm_bits_expr(i: Instr, e: str) -> str:
    f = i.fmt
    if f == "I":
        return f"((({e}) & 0xfff) << 20)"
    if f == "S":
        return f"((((({e}) >> 5) & 0x7f) << 25) | ((({e}) & 0x1f) << 7))"
    if f == "U":
        return f"((({e}) & 0xfffff) << 12)"
    raise PolyError(f"symbolic immediate not supported for {i.op}")


def _imm_bits(i: Instr, v: int) -> int:
    if i.fmt == "U":
        v &= 0xFFFFF
    return encode(Instr(i.op, 0, 0, 0, v)) ^ encode(Instr(i.op, 0, 0, 0, 0))


def template(plan: GenPlan, site: Site, symbols: Mapping[str, int] | None = None):
    """Encoding with permuted register fields and any jump offset left as zero.

    Returns an int, or the text of an assembler expression when the immediate
    is symbolic and no symbol table is given.
    """
    i = site.instr
    regs = {name: (0 if plan.permuted(r) else r) for name, r, _ in _role_fields(i)}
    base = Instr(i.op, regs.get("rd", i.rd if i.fmt == "EXT" else 0), regs.get("rs1", 0), regs.get("rs2", 0), 0)
    if site.kind != "plain" or isinstance(i.imm, int):
        imm = 0 if site.kind != "plain" else i.imm
        if i.fmt == "U":
            imm &= 0xFFFFF
        return encode(replace(base, imm=imm))
    word = encode(base)
    if symbols is not None:
        v = i.imm.evaluate(symbols)
        return word | _imm_bits(i, v)
    return f"{word:#010x} | {_imm_bits_expr(i, i.imm.text)}"


# --------------------------------------------------------------------------
# host reference generator
# --------------------------------------------------------------------------


class _Rng:
    def __init__(self, seed: int):
        self.state = seed32(seed)
        self.count = 0

    def __call__(self) -> int:
        self.state = xorshift32(self.state)
        self.count += 1
        return self.state


@dataclass
class GenStats:
    sites: int = 0
    inserted: int = 0
    bursts: list[int] = field(default_factory=list)
    draws: int = 0
    words: int = 0  # instance length, IV slots included


def host_reference_generate(plan: GenPlan, seed: int, key: bytes, *, buffer_addr: int,
                            symbols: Mapping[str, int], cipher_config: cipher.CipherConfig | None = None,
                            stats: GenStats | None = None, rng: _Rng | None = None) -> bytes:
    """Replay the generator on the host and return the instance buffer contents."""
    cfg = plan.config
    impl = (cipher_config or cipher.CipherConfig()).impl
    rng = rng or _Rng(seed)
    nwords = plan.buffer_words
    buf = [0] * nwords
    end = buffer_addr + 4 * nwords
    perm = {r: r for r in range(32)}
    if cfg.has("shuffle_regs"):
        arr = list(plan.allocatable)
        for i in range(len(arr) - 1, 0, -1):
            j = rng() % (i + 1)
            arr[i], arr[j] = arr[j], arr[i]
        perm.update(dict(zip(plan.allocatable, arr)))
    enc = cfg.encrypt_instance
    state = None
    cursor = buffer_addr
    labels: list[int] = [0] * len(plan.blocks)
    fixups: list[tuple[int, int, int, str]] = []
    remaining = plan.min_words * 4

    def put(word: int) -> None:
        nonlocal cursor, state
        if enc:
            state, word = impl.encrypt_word(state, word)
        buf[(cursor - buffer_addr) >> 2] = word & MASK32
        cursor += 4

    def permute(site: Site, word: int) -> int:
        for _name, r, shift in _role_fields(site.instr):
            if plan.permuted(r):
                word |= perm[r] << shift
        return word

    def noise(dead: int | None, rem: int) -> None:
        if not cfg.has("noise"):
            return
        coin = rng()
        if stats:
            stats.sites += 1
        if cfg.p and coin >> (32 - cfg.p):
            return
        n = 1 + rng() % cfg.nmax
        count = 1 << n
        if stats:
            stats.inserted += 1
            stats.bursts.append(count)
        if cursor + 4 * count + rem > end:
            raise PolyError(f"{plan.name}: instance buffer overflow")
        word = NOP
        if dead is not None:
            word = encode(Instr("xor", perm[dead], perm[dead], perm[dead]))
        for _ in range(count):
            put(word)

    for k, block in enumerate(plan.blocks):
        labels[k] = cursor
        if enc:
            words = (rng(), rng(), rng())
            for w in words:
                buf[(cursor - buffer_addr) >> 2] = w
                cursor += 4
            state = impl.init(key, impl.slot_iv(words))
            remaining -= 12
        for window in block.windows:
            order = list(range(len(window)))
            if cfg.has("shuffle_instr") and len(window) >= 2:
                for i in range(len(order) - 1, 0, -1):
                    j = rng() % (i + 1)
                    order[i], order[j] = order[j], order[i]
            for pos in order:
                site = window[pos]
                noise(site.dead, remaining)
                remaining -= 4
                word = permute(site, template(plan, site, symbols))
                if site.kind == "plain":
                    put(word)
                elif site.target <= k:
                    put(word | _offset_bits(site.kind, labels[site.target] - cursor, plan.name))
                else:
                    fixups.append((cursor, site.target, word, site.kind))
                    put(0)
    for at, t, word, kind in fixups:
        idx = (at - buffer_addr) >> 2
        buf[idx] = cipher.patch_ciphertext(buf[idx], word | _offset_bits(kind, labels[t] - at, plan.name))
    if stats:
        stats.draws = rng.count
        stats.words = (cursor - buffer_addr) >> 2
    return b"".join(w.to_bytes(4, "little") for w in buf)


def _offset_bits(kind: str, off: int, name: str) -> int:
    if kind == "branch":
        if not -4096 <= off <= 4095:
            raise PolyError(f"{name}: branch offset {off} out of range")
        return b_imm_bits(off)
    if not -(1 << 20) <= off < (1 << 20):
        raise PolyError(f"{name}: jump offset {off} out of range")
    return j_imm_bits(off)


def cdgend(fixups: Iterable[tuple[int, int, int, str]], buffer: list[int], base: int) -> None:
    """Patch placeholders in place: ``buffer[@j] ^= template | offset(@t - @j)``.

    `fixups` holds ``(at, target_address, template, kind)`` tuples.
    """
    for at, target, word, kind in fixups:
        idx = (at - base) >> 2
        buffer[idx] = cipher.patch_ciphertext(buffer[idx], word | _offset_bits(kind, target - at, "cdgend"))


def gennoise(rng, p: int, nmax: int, word: int = NOP) -> list[int]:
    """One noise site: draw the coin and, when it fires, a burst of ``2**N`` words."""
    coin = rng()
    if p and coin >> (32 - p):
        return []
    return [word] * (1 << (1 + rng() % nmax))


# --------------------------------------------------------------------------
# guest code emission
# --------------------------------------------------------------------------


class _Out:
    def __init__(self, prefix: str):
        self.lines: list[str] = []
        self.prefix = prefix
        self.n = 0

    def __call__(self, line: str) -> None:
        self.lines.append("    " + line)

    def label(self, name: str) -> None:
        self.lines.append(f"{name}:")

    def fresh(self, tag: str) -> str:
        self.n += 1
        return f"{self.prefix}__{tag}{self.n}"


def _rname(r: int) -> str:
    return ABI_NAMES[r]


def _emit_word(o: _Out, plan: GenPlan, site: Site, extra: str | None = None) -> None:
    """Leave the permuted template (plus `extra` bits) in t0."""
    tpl = template(plan, site)
    o(f"li t0, {tpl}")
    for _name, r, shift in _role_fields(site.instr):
        if plan.permuted(r):
            o(f"lbu t1, {r}(s1)")
            o(f"slli t1, t1, {shift}")
            o("or t0, t0, t1")
    if extra:
        o(f"or t0, t0, {extra}")


def _store_word(o: _Out, enc: bool, reg: str = "t0") -> None:
    if enc:
        o(f"enc_word {reg}, {reg}")
    o(f"sw {reg}, 0(s0)")
    o("addi s0, s0, 4")


def _noise_call(o: _Out, plan: GenPlan, site: Site, rem: int, pos_reg: str | None = None) -> None:
    if not plan.config.has("noise"):
        return
    o("mv a0, s0")
    if site.dead is None:
        o(f"li a1, {NOP}")
    else:
        d = site.dead
        base = encode(Instr("xor", *(0 if plan.permuted(d) else d,) * 3))
        o(f"li a1, {base}")
        if plan.permuted(d):
            o(f"lbu t1, {d}(s1)")
            for sh in (7, 15, 20):
                o(f"slli t2, t1, {sh}")
                o("or a1, a1, t2")
    o(f"li a2, {rem}")
    if pos_reg:
        o(f"slli t0, {pos_reg}, 2")
        o("sub a2, a2, t0")
    o(f"call {plan.name}__noise")
    o("mv s0, a0")


def _emit_site(o: _Out, plan: GenPlan, site: Site, k: int) -> None:
    enc = plan.config.encrypt_instance
    name = plan.name
    if site.kind == "plain":
        _emit_word(o, plan, site)
        _store_word(o, enc)
        return
    helper = "polen_bimm" if site.kind == "branch" else "polen_jimm"
    if site.target <= k:
        o(f"lw a0, {4 * site.target}(s2)")
        o("sub a0, a0, s0")
        o(f"call {helper}")
        _emit_word(o, plan, site, "a0")
        _store_word(o, enc)
        return
    if enc:
        o("enc_word t0, zero")
        o("sw t0, 0(s0)")
    else:
        o("sw zero, 0(s0)")
    o("sw s0, 0(s3)")
    o(f"li t0, {site.target}")
    o("sw t0, 4(s3)")
    _emit_word(o, plan, site)
    o("sw t0, 8(s3)")
    o(f"li t0, {0 if site.kind == 'branch' else 1}")
    o("sw t0, 12(s3)")
    o("addi s3, s3, 16")
    o("addi s0, s0, 4")
    del name


def emit_sgpc(plan: GenPlan, *, encrypt_wrapper: bool, encrypt_sgpc: bool) -> str:
    """Guest assembly for the wrapper, generator, noise routine and their data."""
    cfg = plan.config
    F = plan.name
    enc_attr = lambda on: " encrypt" if on else ""  # noqa: E731
    o = _Out(F)
    nblocks = len(plan.blocks)
    nfix = max(1, plan.n_forward)
    m = len(plan.allocatable)

    # ---- data
    o.lines += [
        f"{F}__state: .word 0",
        f"{F}__perm: .space 32",
        f"{F}__pa: .space 32",
        f"{F}__idx: .space {-(-max(4, plan.max_window) // 4) * 4}",  # byte table, padded to keep the word tables aligned
        f"{F}__lbl: .space {4 * nblocks}",
        f"{F}__fix: .space {16 * nfix}",
        f".codebuf {F}__buf, {plan.buffer_words}{enc_attr(cfg.encrypt_instance)}",
    ]

    # ---- wrapper
    o.lines.append(f".func {F}{enc_attr(encrypt_wrapper)}")
    o("addi sp, sp, -48")
    o("sw ra, 44(sp)")
    for r in range(8):
        o(f"sw a{r}, {4 * r}(sp)")
    o(f"la t0, {F}__state")
    o("lw t1, 0(t0)")
    o("addi t1, t1, -1")
    o("sw t1, 0(t0)")
    o(f"bgtz t1, {F}__run")
    if not cfg.trace_generation:
        o("lw t2, TRACE_CTL(zero)")
        o("sw t2, 32(sp)")
        o("sw zero, TRACE_CTL(zero)")
    o(f"call {F}__sgpc")
    if not cfg.trace_generation:
        o("lw t2, 32(sp)")
        o("sw t2, TRACE_CTL(zero)")
    o(f"la t0, {F}__state")
    o(f"li t1, {cfg.regen_period}")
    o("sw t1, 0(t0)")
    o.label(f"{F}__run")
    for r in range(8):
        o(f"lw a{r}, {4 * r}(sp)")
    o(f"call {F}__buf")
    o("lw ra, 44(sp)")
    o("addi sp, sp, 48")
    o("ret")
    o.lines.append(".endfunc")

    # ---- generator
    o.lines.append(f".func {F}__sgpc{enc_attr(encrypt_sgpc)}")
    o("addi sp, sp, -32")
    for k, r in enumerate(("ra", "s0", "s1", "s2", "s3", "s5", "s6")):
        o(f"sw {r}, {28 - 4 * k}(sp)")
    o(f"la s0, {F}__buf")
    o(f"la s1, {F}__perm")
    o(f"la s2, {F}__lbl")
    o(f"la s3, {F}__fix")
    o(f"la s6, {F}__idx")
    if cfg.has("shuffle_regs") and m:
        o(f"la t3, {F}__pa")
        for k, r in enumerate(plan.allocatable):
            o(f"li t0, {r}")
            o(f"sb t0, {k}(t3)")
        if m >= 2:
            loop = o.fresh("perm")
            o(f"li t1, {m - 1}")
            o.label(loop)
            o("lw t2, RNG_WORD(zero)")
            o("addi t4, t1, 1")
            o("remu t2, t2, t4")
            o("add t5, t3, t1")
            o("add t6, t3, t2")
            o("lbu a0, 0(t5)")
            o("lbu a1, 0(t6)")
            o("sb a1, 0(t5)")
            o("sb a0, 0(t6)")
            o("addi t1, t1, -1")
            o(f"bnez t1, {loop}")
        for k, r in enumerate(plan.allocatable):
            o(f"lbu t0, {k}(t3)")
            o(f"sb t0, {r}(s1)")
    remaining = plan.min_words * 4
    for k, block in enumerate(plan.blocks):
        o(f"sw s0, {4 * k}(s2)")
        if cfg.encrypt_instance:
            o("initbb s0, s0")
            remaining -= 12
        for window in block.windows:
            if cfg.has("shuffle_instr") and len(window) >= 2:
                _emit_window(o, plan, window, k, remaining)
                remaining -= 4 * len(window)
                continue
            for site in window:
                _noise_call(o, plan, site, remaining)
                remaining -= 4
                _emit_site(o, plan, site, k)
    o(f"la a0, {F}__fix")
    o("mv a1, s3")
    o("mv a2, s2")
    o("call polen_cdgend")
    for k, r in enumerate(("ra", "s0", "s1", "s2", "s3", "s5", "s6")):
        o(f"lw {r}, {28 - 4 * k}(sp)")
    o("addi sp, sp, 32")
    o("ret")
    o.lines.append(".endfunc")

    # ---- noise routine: a0 = cursor, a1 = noise word, a2 = bytes still needed after the burst
    o.lines.append(f".func {F}__noise{enc_attr(encrypt_sgpc)}")
    o("lw t0, RNG_WORD(zero)")
    if cfg.p:
        if cfg.p < 32:
            o(f"srli t0, t0, {32 - cfg.p}")
        o(f"bnez t0, {F}__noise_ret")
    o("lw t1, RNG_WORD(zero)")
    o(f"li t2, {cfg.nmax}")
    o("remu t1, t1, t2")
    o("addi t1, t1, 1")
    o("li t2, 1")
    o("sll t1, t2, t1")
    o("slli t2, t1, 2")
    o("add t2, t2, a0")
    o("add t2, t2, a2")
    o(f"la t3, {F}__buf + {4 * plan.buffer_words}")
    o(f"bltu t3, t2, {F}__noise_full")
    o.label(f"{F}__noise_loop")
    if cfg.encrypt_instance:
        o("enc_word t2, a1")
        o("sw t2, 0(a0)")
    else:
        o("sw a1, 0(a0)")
    o("addi a0, a0, 4")
    o("addi t1, t1, -1")
    o(f"bnez t1, {F}__noise_loop")
    o.label(f"{F}__noise_ret")
    o("ret")
    o.label(f"{F}__noise_full")
    o(f"li t0, {EXIT_OVERFLOW}")
    o("sw t0, EXIT(zero)")
    o(f"j {F}__noise_full")
    o.lines.append(".endfunc")
    return "\n".join(o.lines) + "\n"


def _emit_window(o: _Out, plan: GenPlan, window: list[Site], k: int, rem: int) -> None:
    w = len(window)
    for e in range(w):
        o(f"li t0, {e}")
        o(f"sb t0, {e}(s6)")
    fy = o.fresh("fy")
    o(f"li t1, {w - 1}")
    o.label(fy)
    o("lw t2, RNG_WORD(zero)")
    o("addi t3, t1, 1")
    o("remu t2, t2, t3")
    o("add t4, s6, t1")
    o("add t5, s6, t2")
    o("lbu t6, 0(t4)")
    o("lbu a0, 0(t5)")
    o("sb a0, 0(t4)")
    o("sb t6, 0(t5)")
    o("addi t1, t1, -1")
    o(f"bnez t1, {fy}")
    pos, nxt = o.fresh("pos"), o.fresh("next")
    entries = [o.fresh("e") for _ in range(w)]
    o("li s5, 0")
    o.label(pos)
    _noise_call(o, plan, window[0], rem, "s5")
    o("add t0, s6, s5")
    o("lbu t0, 0(t0)")
    for e in range(w - 1):
        o(f"li t1, {e}")
        o(f"beq t0, t1, {entries[e]}")
    o(f"j {entries[-1]}")
    for e, site in enumerate(window):
        o.label(entries[e])
        _emit_site(o, plan, site, k)
        o(f"j {nxt}")
    o.label(nxt)
    o("addi s5, s5, 1")
    o(f"li t0, {w}")
    o(f"blt s5, t0, {pos}")


RUNTIME_FUNCS = ("polen_bimm", "polen_jimm", "polen_cdgend")


def runtime_source(encrypt: bool) -> str:
    attr = " encrypt" if encrypt else ""
    return f"""
.func polen_bimm{attr}
    li t0, 4096
    add t1, a0, t0
    li t0, 8191
    bltu t0, t1, polen_bimm_trap
    srli t0, a0, 12
    andi t0, t0, 1
    slli t0, t0, 31
    srli t1, a0, 5
    andi t1, t1, 63
    slli t1, t1, 25
    or t0, t0, t1
    srli t1, a0, 1
    andi t1, t1, 15
    slli t1, t1, 8
    or t0, t0, t1
    srli t1, a0, 11
    andi t1, t1, 1
    slli t1, t1, 7
    or a0, t0, t1
    ret
polen_bimm_trap:
    li t0, {EXIT_OFFSET_RANGE}
    sw t0, EXIT(zero)
    j polen_bimm_trap
.endfunc
.func polen_jimm{attr}
    li t0, 0x100000
    add t1, a0, t0
    li t0, 0x1fffff
    bltu t0, t1, polen_jimm_trap
    srli t0, a0, 20
    andi t0, t0, 1
    slli t0, t0, 31
    srli t1, a0, 1
    andi t1, t1, 1023
    slli t1, t1, 21
    or t0, t0, t1
    srli t1, a0, 11
    andi t1, t1, 1
    slli t1, t1, 20
    or t0, t0, t1
    srli t1, a0, 12
    andi t1, t1, 255
    slli t1, t1, 12
    or a0, t0, t1
    ret
polen_jimm_trap:
    li t0, {EXIT_OFFSET_RANGE}
    sw t0, EXIT(zero)
    j polen_jimm_trap
.endfunc
# a0 = first fixup, a1 = end of fixups, a2 = label table
# fixup record: @j, target block, template, kind (0 branch, 1 jal)
.func polen_cdgend{attr}
    addi sp, sp, -16
    sw ra, 12(sp)
    sw s0, 8(sp)
    sw s1, 4(sp)
    sw s2, 0(sp)
    mv s0, a0
    mv s1, a1
    mv s2, a2
polen_cdgend_loop:
    bgeu s0, s1, polen_cdgend_done
    lw t0, 4(s0)
    slli t0, t0, 2
    add t0, t0, s2
    lw t0, 0(t0)
    lw t1, 0(s0)
    sub a0, t0, t1
    lw t2, 12(s0)
    bnez t2, polen_cdgend_j
    call polen_bimm
    j polen_cdgend_patch
polen_cdgend_j:
    call polen_jimm
polen_cdgend_patch:
    lw t0, 8(s0)
    or a0, a0, t0
    lw t1, 0(s0)
    lw t2, 0(t1)
    xor t2, t2, a0
    sw t2, 0(t1)
    addi s0, s0, 16
    j polen_cdgend_loop
polen_cdgend_done:
    lw ra, 12(sp)
    lw s0, 8(sp)
    lw s1, 4(sp)
    lw s2, 0(sp)
    addi sp, sp, 16
    ret
.endfunc
"""


@dataclass
class PolyResult:
    program: AsmProgram
    plans: dict[str, GenPlan]


def polygen(program: AsmProgram, config: PolyConfig, *, functions: Iterable[str] | None = None) -> PolyResult:
    """Replace every ``poly`` function by wrapper + generator + runtime support."""
    targets = set(functions) if functions is not None else {f.name for f in program.functions if f.poly}
    plans: dict[str, GenPlan] = {}
    items = []
    any_enc_sgpc = False
    for top in program.items:
        if not (isinstance(top, Function) and top.name in targets):
            items.append(top)
            continue
        plan = build_plan(top, config)
        plans[top.name] = plan
        enc_w = top.encrypted if config.encrypt_wrapper is None else config.encrypt_wrapper
        enc_s = top.encrypted if config.encrypt_sgpc is None else config.encrypt_sgpc
        any_enc_sgpc |= enc_s
        generated = parse(emit_sgpc(plan, encrypt_wrapper=enc_w, encrypt_sgpc=enc_s))
        items.extend(generated.items)
    if plans:
        existing = {f.name for f in program.functions}
        if not existing & set(RUNTIME_FUNCS):
            items.extend(parse(runtime_source(any_enc_sgpc)).items)
    return PolyResult(AsmProgram(items, dict(program.equs), program.entry), plans)


def static_instance_words(plan: GenPlan, symbols: Mapping[str, int], base: int) -> list[list[int]]:
    """Per block, the plaintext words of the untransformed prepared function placed at `base`."""
    out = []
    addr = base
    starts = []
    for b in plan.cfg.blocks:
        starts.append(addr)
        addr += 4 * (len(b.instrs) + (3 if plan.config.encrypt_instance else 0))
    idx = plan.cfg.index()
    for k, b in enumerate(plan.cfg.blocks):
        pc = starts[k] + (12 if plan.config.encrypt_instance else 0)
        words = []
        for i in b.instrs:
            if i.is_branch or (i.op == "jal" and i.rd == 0):
                words.append(encode(i.with_imm(starts[idx[_target(i)]] - pc)))
            elif isinstance(i.imm, Expr):
                v = i.imm.evaluate(symbols)
                words.append(encode(i.with_imm(v & 0xFFFFF if i.fmt == "U" else v)))
            else:
                words.append(encode(i))
            pc += 4
        out.append(words)
    return out


__all__ = [
    "PolyConfig", "PolyError", "GenPlan", "Site", "Liveness", "analyze_liveness", "find_shuffle_windows",
    "pick_variant", "build_plan", "emit_sgpc", "host_reference_generate", "gennoise", "cdgend", "polygen",
    "parse_config", "runtime_source", "template", "static_instance_words", "GenStats", "LOADS", "CodeBuf",
    "DataBlock", "Directive", "Label",
]
