"""CFG preparation for block-wise code encryption.

After preparation every block of an encrypted function is entered only by a
taken control transfer and starts with an IV slot.  The passes run in a fixed
order: build, merge, materialize fallthroughs, bracket calls, insert slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .asm import (
    AsmProgram, CodeBuf, Directive, Expr, Function, Instr, Label, SourceLoc, format_program,
)

IV_SLOT_WORDS = 3
MAX_BLOCK_WORDS = 0xFFFFFFFE


class PrepError(Exception):
    pass


def _target(i: Instr) -> str | None:
    if isinstance(i.imm, Expr) and _is_label_ref(i.imm):
        return i.imm.text.strip()
    return None


def _is_label_ref(e: Expr) -> bool:
    names = e.names
    return len(names) == 1 and e.text.strip() in names


def jump(label: str, loc: SourceLoc | None = None) -> Instr:
    return Instr("jal", 0, 0, 0, Expr(label), loc)


@dataclass
class BasicBlock:
    label: str
    instrs: list[Instr]
    aliases: list[str] = field(default_factory=list)
    # labels of merged-in blocks, keyed by instruction index
    inner: list[tuple[int, str]] = field(default_factory=list)
    # None, "plain" (island in an encrypted function) or "encrypted" (island in a plain one)
    island: str | None = None
    needs_iv: bool = False

    @property
    def nb_I(self) -> int:
        return len(self.instrs)

    @property
    def labels(self) -> list[str]:
        return [self.label, *self.aliases]

    @property
    def terminator(self) -> Instr | None:
        return self.instrs[-1] if self.instrs and self.instrs[-1].is_control else None

    def ends_unconditionally(self) -> bool:
        last = self.instrs[-1] if self.instrs else None
        return last is not None and ((last.op == "jal" and last.rd == 0) or (last.op == "jalr" and last.rd == 0))

    def ends_with_call(self) -> bool:
        last = self.instrs[-1] if self.instrs else None
        return last is not None and last.is_call


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int | None
    kind: str  # fallthrough | branch-taken | jump | call | return


@dataclass
class Cfg:
    function: Function
    blocks: list[BasicBlock]

    @property
    def name(self) -> str:
        return self.function.name

    def index(self) -> dict[str, int]:
        out = {}
        for k, b in enumerate(self.blocks):
            for name in b.labels:
                out[name] = k
        out.setdefault(self.function.name, 0)
        return out

    def edges(self) -> list[Edge]:
        idx = self.index()
        out: list[Edge] = []
        n = len(self.blocks)
        for k, b in enumerate(self.blocks):
            nxt = k + 1 if k + 1 < n else None
            ins = b.instrs
            if not ins:
                out.append(Edge(k, nxt, "fallthrough"))
                continue
            last = ins[-1]
            if len(ins) >= 2 and ins[-2].is_branch:
                out.append(Edge(k, idx.get(_target(ins[-2])), "branch-taken"))
            if last.is_branch:
                out.append(Edge(k, idx.get(_target(last)), "branch-taken"))
                out.append(Edge(k, nxt, "fallthrough"))
            elif last.op == "jal" and last.rd == 0:
                out.append(Edge(k, idx.get(_target(last)), "jump"))
            elif last.op == "jalr" and last.rd == 0:
                out.append(Edge(k, None, "return"))
            elif last.is_call:
                out.append(Edge(k, nxt, "call"))
            else:
                out.append(Edge(k, nxt, "fallthrough"))
        return out

    def preds(self) -> list[int]:
        counts = [0] * len(self.blocks)
        for e in self.edges():
            if e.dst is not None:
                counts[e.dst] += 1
        return counts

    def successors(self, k: int) -> list[int]:
        return [e.dst for e in self.edges() if e.src == k and e.dst is not None]


# --------------------------------------------------------------------------
# passes
# --------------------------------------------------------------------------


def build_cfg(function: Function) -> Cfg:
    """Split a function body into basic blocks.

    Leaders are the entry, every label that a branch or jump of this function
    targets, and every instruction following a control transfer.
    """
    instrs: list[Instr] = []
    labels_at: dict[int, list[str]] = {}
    for x in function.body:
        if isinstance(x, Label):
            labels_at.setdefault(len(instrs), []).append(x.name)
        elif isinstance(x, Instr):
            instrs.append(x)
        elif x.name == ".word":
            raise PrepError(f"{function.name}: literal data cannot be prepared")
        elif x.name in (".ivslot", ".plaintext", ".ciphertext", ".endplaintext", ".endciphertext"):
            raise PrepError(f"{function.name}: function is already prepared")
    if not instrs:
        raise PrepError(f"{function.name}: empty function")
    local = {name: pos for pos, names in labels_at.items() for name in names}
    local.setdefault(function.name, 0)
    leaders = {0}
    for pos, i in enumerate(instrs):
        if i.is_branch or (i.op == "jal" and i.rd == 0):
            t = _target(i)
            if t is None or t not in local:
                raise PrepError(f"{function.name}: jump to undefined label {i.imm}")
            leaders.add(local[t])
        if i.is_control:
            leaders.add(pos + 1)
    leaders.discard(len(instrs))
    starts = sorted(leaders)
    blocks: list[BasicBlock] = []
    for k, s in enumerate(starts):
        e = starts[k + 1] if k + 1 < len(starts) else len(instrs)
        names = list(labels_at.get(s, []))
        if s == 0:
            names = [n for n in names if n != function.name]
        label = names[0] if names else (function.name if s == 0 else f"{function.name}__bb{k}")
        aliases = names[1:] if names and names[0] == label else names
        if s == 0 and label != function.name:
            aliases = [n for n in names if n != label]
        inner = [(p - s, n) for p in range(s + 1, e) for n in labels_at.get(p, [])]
        blocks.append(BasicBlock(label, instrs[s:e], aliases, inner))
    # labels placed after the last instruction
    if len(instrs) in labels_at:
        raise PrepError(f"{function.name}: label at end of function has no instruction")
    return Cfg(function, blocks)


def merge_blocks(cfg: Cfg) -> Cfg:
    """Fuse B1 -> B2 chains joined by a direct jump where B2 has no other predecessor."""
    blocks = [BasicBlock(b.label, list(b.instrs), list(b.aliases), list(b.inner), b.island, b.needs_iv) for b in cfg.blocks]
    cur = Cfg(cfg.function, blocks)
    changed = True
    while changed:
        changed = False
        idx = cur.index()
        preds = cur.preds()
        for k, b in enumerate(cur.blocks):
            if b.island or not b.instrs:
                continue
            last = b.instrs[-1]
            if not (last.op == "jal" and last.rd == 0) or (len(b.instrs) >= 2 and b.instrs[-2].is_branch):
                continue
            t = idx.get(_target(last))
            if t is None or t == k or t == 0 or preds[t] != 1 or cur.blocks[t].island:
                continue
            b2 = cur.blocks[t]
            # B2's own fallthrough must still reach its layout successor
            if t != k + 1 and not b2.ends_unconditionally():
                continue
            base = len(b.instrs) - 1
            b.inner += [(base, n) for n in b2.labels] + [(base + p, n) for p, n in b2.inner]
            b.instrs = b.instrs[:-1] + b2.instrs
            del cur.blocks[t]
            changed = True
            break
    return cur


def materialize_fallthroughs(cfg: Cfg) -> Cfg:
    """Append an explicit ``jal x0`` wherever control would fall into the next block."""
    blocks = [BasicBlock(b.label, list(b.instrs), list(b.aliases), list(b.inner), b.island, b.needs_iv) for b in cfg.blocks]
    for k, b in enumerate(blocks):
        if b.ends_with_call() and k + 1 >= len(blocks):
            raise PrepError(f"{cfg.name}: call at the end of the function has no continuation")
        if b.island or b.ends_unconditionally() or b.ends_with_call():
            continue
        if k + 1 >= len(blocks):
            raise PrepError(f"{cfg.name}: control falls off the end of the function")
        loc = b.instrs[-1].loc if b.instrs else None
        b.instrs.append(jump(blocks[k + 1].label, loc))
    return Cfg(cfg.function, blocks)


def bracket_calls(cfg: Cfg, callee_attrs: Mapping[str, bool]) -> Cfg:
    """Insert decryption toggles around calls that cross the plain/encrypted boundary.

    Encrypted caller, plain callee: ``disable_dec`` before the call and a
    plain island ``[enable_dec; jal x0, cont]`` after it.  Plain caller,
    encrypted callee: ``enable_dec`` before the call and an encrypted island
    ``[slot; disable_dec; jal x0, cont]`` on the return path.
    """
    enc = cfg.function.encrypted
    out: list[BasicBlock] = []
    n_island = 0
    for k, b in enumerate(cfg.blocks):
        b = BasicBlock(b.label, list(b.instrs), list(b.aliases), list(b.inner), b.island, b.needs_iv)
        out.append(b)
        if b.island or not b.ends_with_call():
            continue
        call = b.instrs[-1]
        if call.op == "jalr":
            if enc:
                raise PrepError(f"{cfg.name}: indirect call inside an encrypted function")
            continue
        callee = _target(call)
        if callee is None or callee not in callee_attrs:
            raise PrepError(f"{cfg.name}: call to unknown symbol {call.imm}")
        if callee_attrs[callee] == enc:
            continue
        if k + 1 >= len(cfg.blocks):
            raise PrepError(f"{cfg.name}: call at the end of the function has no continuation")
        cont = cfg.blocks[k + 1].label
        toggle, back = ("disable_dec", "enable_dec") if enc else ("enable_dec", "disable_dec")
        b.instrs.insert(len(b.instrs) - 1, Instr(toggle, loc=call.loc))
        island = BasicBlock(
            f"{cfg.name}__isl{n_island}",
            [Instr(back, loc=call.loc), jump(cont, call.loc)],
            island="plain" if enc else "encrypted",
            needs_iv=not enc,
        )
        n_island += 1
        out.append(island)
    return Cfg(cfg.function, out)


def insert_iv_slots(cfg: Cfg) -> Cfg:
    blocks = []
    for b in cfg.blocks:
        nb = BasicBlock(b.label, list(b.instrs), list(b.aliases), list(b.inner), b.island, b.needs_iv)
        if cfg.function.encrypted and nb.island is None:
            nb.needs_iv = True
        if nb.needs_iv and not 0 < nb.nb_I <= MAX_BLOCK_WORDS:
            raise PrepError(f"{cfg.name}: block {nb.label} has {nb.nb_I} instructions; the slot cannot hold that")
        blocks.append(nb)
    return Cfg(cfg.function, blocks)


def _validate_encrypted(function: Function) -> None:
    for i in function.instrs:
        if i.op == "jalr" and not i.is_ret and not i.is_call:
            raise PrepError(f"{function.name}: indirect jump inside an encrypted function (only ret is allowed)")
        if i.op == "jalr" and i.is_call:
            raise PrepError(f"{function.name}: indirect call inside an encrypted function")


def prepare_cfg(function: Function, callee_attrs: Mapping[str, bool], merge: bool = True) -> Cfg:
    if function.encrypted:
        _validate_encrypted(function)
    cfg = build_cfg(function)
    if function.encrypted:
        if merge:
            cfg = merge_blocks(cfg)
        cfg = materialize_fallthroughs(cfg)
    cfg = bracket_calls(cfg, callee_attrs)
    return insert_iv_slots(cfg)


def cfg_to_function(cfg: Cfg) -> Function:
    """Render a prepared CFG back into a function body with slots and island markers."""
    f = cfg.function
    body: list = []
    for b in cfg.blocks:
        if b.island == "plain":
            body.append(Directive(".plaintext"))
        elif b.island == "encrypted":
            body.append(Directive(".ciphertext"))
        if b.label != f.name:
            body.append(Label(b.label))
        body.extend(Label(a) for a in b.aliases if a != f.name)
        if b.needs_iv:
            body.append(Directive(".ivslot", [b.nb_I]))
        inner: dict[int, list[str]] = {}
        for p, n in b.inner:
            inner.setdefault(p, []).append(n)
        for p, i in enumerate(b.instrs):
            body.extend(Label(n) for n in inner.get(p, []) if n != f.name)
            body.append(i)
        if b.island == "plain":
            body.append(Directive(".endplaintext"))
        elif b.island == "encrypted":
            body.append(Directive(".endciphertext"))
    return Function(f.name, f.encrypted, f.poly, body, f.loc)


def _calls_encrypted(function: Function, attrs: Mapping[str, bool]) -> bool:
    return any(i.op == "jal" and i.rd != 0 and attrs.get(_target(i) or "", False) for i in function.instrs)


def prepare_program(program: AsmProgram, merge: bool = True) -> AsmProgram:
    """Prepare every encrypted function and every plain caller of one."""
    attrs = program.code_attrs()
    entry = program.entry or ("main" if "main" in attrs else None)
    if entry in attrs and attrs[entry]:
        raise PrepError(f"entry function {entry!r} must not be encrypted")
    items = []
    for top in program.items:
        if isinstance(top, Function) and (top.encrypted or _calls_encrypted(top, attrs)):
            items.append(cfg_to_function(prepare_cfg(top, attrs, merge)))
        else:
            items.append(top)
    return AsmProgram(items, dict(program.equs), program.entry)


def prepare_text(text: str, merge: bool = True) -> str:
    from .asm import parse

    return format_program(prepare_program(parse(text), merge))


def count_slots(program: AsmProgram) -> int:
    return sum(1 for f in program.functions for x in f.body if isinstance(x, Directive) and x.name == ".ivslot")


__all__ = [
    "BasicBlock", "Cfg", "Edge", "PrepError", "build_cfg", "merge_blocks", "materialize_fallthroughs",
    "bracket_calls", "insert_iv_slots", "prepare_cfg", "prepare_program", "cfg_to_function", "count_slots",
    "CodeBuf",
]
