"""Assembly dialect, RV32IM + extension encoder/decoder and the PVO1 image format.

Dialect
-------
One statement per line; ``#`` or ``//`` start a comment.  ``name:`` defines a
label and may prefix a statement.  Outside functions, labels and data
directives describe data objects.  Directives:

``.func NAME [encrypt] [poly]`` / ``.endfunc``
    Function body with its protection attributes.
``.entry NAME``
    Program entry point (default ``main``, else the first function).
``.equ NAME, EXPR``
    Assemble-time constant.
``.word``, ``.half``, ``.byte`` ``EXPR, ...``; ``.space N``; ``.align N``; ``.ascii "s"``
    Data (``.word`` is also accepted inside plain functions as a literal).
``.codebuf NAME, WORDS [encrypt]``
    Zeroed buffer that holds run-time generated code.
``.ivslot N``
    Three-word IV slot ``[0xFFFFFFFF, 0xFFFFFFFF, N]``.
``.plaintext`` / ``.endplaintext``, ``.ciphertext`` / ``.endciphertext``
    Mark a stretch of a function as plain (resp. encrypted) in the region table.

Immediates are Python-style integer expressions over symbols with ``%hi()``
and ``%lo()``.  MMIO addresses ``RNG_WORD``, ``TRACE_CTL``, ``EXIT`` and
``PUTCHAR`` are predefined and reachable as ``sw t0, EXIT(zero)``.
"""

from __future__ import annotations

import ast
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

MASK32 = 0xFFFFFFFF
IV_MAGIC = 0xFFFFFFFF

MMIO = {
    "RNG_WORD": 0xFFFFFF00,
    "TRACE_CTL": 0xFFFFFF04,
    "EXIT": 0xFFFFFF08,
    "PUTCHAR": 0xFFFFFF0C,
}


class AsmError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message, self.line, self.col = message, line, col
        where = f"line {line}, col {col}: " if line else ""
        super().__init__(where + message)


# --------------------------------------------------------------------------
# registers and instruction tables
# --------------------------------------------------------------------------

ABI_NAMES = (
    "zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 a6 a7 "
    "s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6"
).split()
REGS = {name: i for i, name in enumerate(ABI_NAMES)}
REGS.update({f"x{i}": i for i in range(32)})
REGS["fp"] = 8


def reg_name(r: int) -> str:
    return ABI_NAMES[r]


OP_R, OP_IMM, OP_LOAD, OP_STORE, OP_BRANCH = 0x33, 0x13, 0x03, 0x23, 0x63
OP_LUI, OP_AUIPC, OP_JAL, OP_JALR, OP_SYSTEM, OP_CUSTOM0 = 0x37, 0x17, 0x6F, 0x67, 0x73, 0x0B

R_OPS = {
    "add": (0x00, 0), "sub": (0x20, 0), "sll": (0x00, 1), "slt": (0x00, 2),
    "sltu": (0x00, 3), "xor": (0x00, 4), "srl": (0x00, 5), "sra": (0x20, 5),
    "or": (0x00, 6), "and": (0x00, 7),
    "mul": (0x01, 0), "mulh": (0x01, 1), "mulhsu": (0x01, 2), "mulhu": (0x01, 3),
    "div": (0x01, 4), "divu": (0x01, 5), "rem": (0x01, 6), "remu": (0x01, 7),
}
I_ALU = {"addi": 0, "slti": 2, "sltiu": 3, "xori": 4, "ori": 6, "andi": 7}
SHIFTS = {"slli": (0x00, 1), "srli": (0x00, 5), "srai": (0x20, 5)}
LOADS = {"lb": 0, "lh": 1, "lw": 2, "lbu": 4, "lhu": 5}
STORES = {"sb": 0, "sh": 1, "sw": 2}
BRANCHES = {"beq": 0, "bne": 1, "blt": 4, "bge": 5, "bltu": 6, "bgeu": 7}
EXT_OPS = {"initbb": 0, "enc_word": 1, "enable_dec": 2, "disable_dec": 3}

FORMATS: dict[str, str] = {}
FORMATS.update({op: "R" for op in R_OPS})
FORMATS.update({op: "I" for op in (*I_ALU, *SHIFTS, *LOADS, "jalr", "ecall")})
FORMATS.update({op: "S" for op in STORES})
FORMATS.update({op: "B" for op in BRANCHES})
FORMATS.update({"lui": "U", "auipc": "U", "jal": "J"})
FORMATS.update({op: "EXT" for op in EXT_OPS})

_R_DECODE = {v: k for k, v in R_OPS.items()}
_I_DECODE = {v: k for k, v in I_ALU.items()}
_SHIFT_DECODE = {v: k for k, v in SHIFTS.items()}
_LOAD_DECODE = {v: k for k, v in LOADS.items()}
_STORE_DECODE = {v: k for k, v in STORES.items()}
_BRANCH_DECODE = {v: k for k, v in BRANCHES.items()}
_EXT_DECODE = {v: k for k, v in EXT_OPS.items()}


# --------------------------------------------------------------------------
# expressions
# --------------------------------------------------------------------------

_TOKEN = re.compile(r"(0[xX][0-9a-fA-F_]+|0[bB][01_]+|\d[\d_]*)|(%hi|%lo)\b|([A-Za-z_.$][\w.$]*)")
_BINOPS = {
    ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b, ast.BitOr: lambda a, b: a | b,
    ast.BitAnd: lambda a, b: a & b, ast.BitXor: lambda a, b: a ^ b,
    ast.LShift: lambda a, b: a << b, ast.RShift: lambda a, b: a >> b,
}


def hi20(v: int) -> int:
    return ((v + 0x800) >> 12) & 0xFFFFF


def lo12(v: int) -> int:
    lo = v & 0xFFF
    return lo - 0x1000 if lo & 0x800 else lo


@dataclass(frozen=True)
class Expr:
    """Symbolic immediate, evaluated once every symbol is placed."""

    text: str

    def _compile(self):
        names: list[str] = []

        def sub(m):
            if m.group(1):
                return m.group(1)
            if m.group(2):
                return "_hi_" if m.group(2) == "%hi" else "_lo_"
            names.append(m.group(3))
            return f"_n{len(names) - 1}"

        try:
            tree = ast.parse(_TOKEN.sub(sub, self.text).strip(), mode="eval")
        except SyntaxError:
            raise AsmError(f"bad expression {self.text!r}") from None
        return tree.body, names

    @property
    def names(self) -> set[str]:
        return set(self._compile()[1])

    def evaluate(self, symbols: Mapping[str, int]) -> int:
        node, names = self._compile()

        def ev(n):
            if isinstance(n, ast.Constant) and isinstance(n.value, int):
                return n.value
            if isinstance(n, ast.Name):
                name = names[int(n.id[2:])]
                if name not in symbols:
                    raise AsmError(f"undefined symbol {name!r}")
                return symbols[name]
            if isinstance(n, ast.BinOp) and type(n.op) in _BINOPS:
                return _BINOPS[type(n.op)](ev(n.left), ev(n.right))
            if isinstance(n, ast.UnaryOp) and isinstance(n.op, (ast.USub, ast.UAdd, ast.Invert)):
                v = ev(n.operand)
                return -v if isinstance(n.op, ast.USub) else (~v if isinstance(n.op, ast.Invert) else v)
            if (isinstance(n, ast.Call) and isinstance(n.func, ast.Name)
                    and n.func.id in ("_hi_", "_lo_") and len(n.args) == 1):
                v = ev(n.args[0])
                return hi20(v) if n.func.id == "_hi_" else lo12(v)
            raise AsmError(f"unsupported expression {self.text!r}")

        return ev(node)

    def __str__(self):
        return self.text


Imm = Union[int, Expr]


def _literal(text: str) -> int | None:
    t = text.strip().replace("_", "")
    try:
        return int(t, 0)
    except ValueError:
        pass
    m = re.fullmatch(r"-?'(\\?.)'", text.strip())
    if m:
        ch = m.group(1)
        v = {"\\n": 10, "\\t": 9, "\\0": 0, "\\\\": 92, "\\'": 39}.get(ch, ord(ch[-1]))
        return -v if text.strip().startswith("-") else v
    return None


def make_imm(text: str) -> Imm:
    v = _literal(text)
    if v is not None:
        return v
    return Expr(text.strip())


# --------------------------------------------------------------------------
# instructions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceLoc:
    line: int
    col: int = 1


@dataclass(frozen=True)
class Instr:
    """One machine instruction.

    Branch and ``jal`` immediates are byte offsets once assembled; before
    assembly they hold an :class:`Expr` naming the target.  ``lui``/``auipc``
    keep the raw 20-bit field.  An undecodable word decodes to
    ``Instr("illegal", imm=word)``.
    """

    op: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: Imm = 0
    loc: SourceLoc | None = field(default=None, compare=False, repr=False)

    @property
    def fmt(self) -> str:
        return FORMATS.get(self.op, "ILLEGAL")

    @property
    def illegal(self) -> bool:
        return self.op == "illegal"

    def reads(self) -> tuple[int, ...]:
        f = self.fmt
        if f in ("R", "S", "B"):
            return (self.rs1, self.rs2)
        if f == "I" and self.op != "ecall":
            return (self.rs1,)
        if self.op == "ecall":
            return (10, 17)
        if self.op in ("initbb", "enc_word"):
            return (self.rs1,)
        return ()

    def writes(self) -> tuple[int, ...]:
        if self.fmt in ("R", "I", "U", "J") and self.op != "ecall":
            return (self.rd,)
        if self.op in ("initbb", "enc_word"):
            return (self.rd,)
        return ()

    @property
    def is_branch(self) -> bool:
        return self.op in BRANCHES

    @property
    def is_jump(self) -> bool:
        return self.op in ("jal", "jalr")

    @property
    def is_control(self) -> bool:
        return self.op in BRANCHES or self.op in ("jal", "jalr")

    @property
    def is_call(self) -> bool:
        return self.op in ("jal", "jalr") and self.rd != 0

    @property
    def is_ret(self) -> bool:
        return self.op == "jalr" and self.rd == 0 and self.rs1 == 1 and self.imm == 0

    @property
    def is_memory(self) -> bool:
        return self.op in LOADS or self.op in STORES

    def with_imm(self, imm: Imm) -> "Instr":
        return Instr(self.op, self.rd, self.rs1, self.rs2, imm, self.loc)


ILLEGAL = "illegal"


def _sext(v: int, bits: int) -> int:
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >> (bits - 1) else v


def _signed32(v: int) -> int:
    v &= MASK32
    return v - (1 << 32) if v & 0x80000000 else v


def _need_int(i: Instr) -> int:
    if not isinstance(i.imm, int):
        raise AsmError(f"{i.op}: unresolved immediate {i.imm}")
    return i.imm


def _check_range(i: Instr, v: int, lo: int, hi: int, what: str) -> None:
    if not lo <= v <= hi:
        line, col = (i.loc.line, i.loc.col) if i.loc else (0, 0)
        raise AsmError(f"{i.op}: {what} {v} out of range [{lo}, {hi}]", line, col)


def b_imm_bits(off: int) -> int:
    """Scatter a branch offset into the B-format immediate bits."""
    return (((off >> 12) & 1) << 31) | (((off >> 5) & 0x3F) << 25) | (((off >> 1) & 0xF) << 8) | (((off >> 11) & 1) << 7)


def j_imm_bits(off: int) -> int:
    return (((off >> 20) & 1) << 31) | (((off >> 1) & 0x3FF) << 21) | (((off >> 11) & 1) << 20) | (((off >> 12) & 0xFF) << 12)


def encode(i: Instr) -> int:
    op, rd, rs1, rs2 = i.op, i.rd, i.rs1, i.rs2
    for r in (rd, rs1, rs2):
        if not 0 <= r < 32:
            raise AsmError(f"{op}: bad register number {r}")
    if op in R_OPS:
        f7, f3 = R_OPS[op]
        return (f7 << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | OP_R
    if op in EXT_OPS:
        return (rs1 << 15) | (EXT_OPS[op] << 12) | (rd << 7) | OP_CUSTOM0
    if op == "ecall":
        return OP_SYSTEM
    imm = _need_int(i)
    if op in SHIFTS:
        f7, f3 = SHIFTS[op]
        _check_range(i, imm, 0, 31, "shift amount")
        return (f7 << 25) | (imm << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | OP_IMM
    if op in I_ALU or op in LOADS or op == "jalr":
        if imm >= 0x80000000:
            imm = _signed32(imm)
        _check_range(i, imm, -2048, 2047, "immediate")
        opcode, f3 = (OP_IMM, I_ALU[op]) if op in I_ALU else (OP_LOAD, LOADS[op]) if op in LOADS else (OP_JALR, 0)
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opcode
    if op in STORES:
        if imm >= 0x80000000:
            imm = _signed32(imm)
        _check_range(i, imm, -2048, 2047, "immediate")
        return (((imm >> 5) & 0x7F) << 25) | (rs2 << 20) | (rs1 << 15) | (STORES[op] << 12) | ((imm & 0x1F) << 7) | OP_STORE
    if op in BRANCHES:
        _check_range(i, imm, -4096, 4094, "branch offset")
        if imm & 1:
            raise AsmError(f"{op}: odd branch offset {imm}")
        return b_imm_bits(imm) | (rs2 << 20) | (rs1 << 15) | (BRANCHES[op] << 12) | OP_BRANCH
    if op in ("lui", "auipc"):
        _check_range(i, imm, 0, 0xFFFFF, "upper immediate")
        return (imm << 12) | (rd << 7) | (OP_LUI if op == "lui" else OP_AUIPC)
    if op == "jal":
        _check_range(i, imm, -(1 << 20), (1 << 20) - 2, "jump offset")
        if imm & 1:
            raise AsmError(f"jal: odd jump offset {imm}")
        return j_imm_bits(imm) | (rd << 7) | OP_JAL
    raise AsmError(f"cannot encode {op!r}")


def decode(word: int) -> Instr:
    w = word & MASK32
    opcode, rd, f3 = w & 0x7F, (w >> 7) & 0x1F, (w >> 12) & 7
    rs1, rs2, f7 = (w >> 15) & 0x1F, (w >> 20) & 0x1F, w >> 25
    bad = Instr(ILLEGAL, imm=w)
    if opcode == OP_R:
        op = _R_DECODE.get((f7, f3))
        return Instr(op, rd, rs1, rs2) if op else bad
    if opcode == OP_IMM:
        if f3 in (1, 5):
            op = _SHIFT_DECODE.get((f7, f3))
            return Instr(op, rd, rs1, 0, rs2) if op else bad
        return Instr(_I_DECODE[f3], rd, rs1, 0, _sext(w >> 20, 12))
    if opcode == OP_LOAD:
        op = _LOAD_DECODE.get(f3)
        return Instr(op, rd, rs1, 0, _sext(w >> 20, 12)) if op else bad
    if opcode == OP_JALR:
        return Instr("jalr", rd, rs1, 0, _sext(w >> 20, 12)) if f3 == 0 else bad
    if opcode == OP_STORE:
        op = _STORE_DECODE.get(f3)
        return Instr(op, 0, rs1, rs2, _sext((f7 << 5) | rd, 12)) if op else bad
    if opcode == OP_BRANCH:
        op = _BRANCH_DECODE.get(f3)
        if not op:
            return bad
        imm = ((w >> 31) << 12) | (((w >> 7) & 1) << 11) | (((w >> 25) & 0x3F) << 5) | (((w >> 8) & 0xF) << 1)
        return Instr(op, 0, rs1, rs2, _sext(imm, 13))
    if opcode in (OP_LUI, OP_AUIPC):
        return Instr("lui" if opcode == OP_LUI else "auipc", rd, 0, 0, w >> 12)
    if opcode == OP_JAL:
        imm = ((w >> 31) << 20) | (((w >> 12) & 0xFF) << 12) | (((w >> 20) & 1) << 11) | (((w >> 21) & 0x3FF) << 1)
        return Instr("jal", rd, 0, 0, _sext(imm, 21))
    if opcode == OP_SYSTEM:
        return Instr("ecall") if w == OP_SYSTEM else bad
    if opcode == OP_CUSTOM0:
        if w >> 20 or f3 > 3:
            return bad
        op = _EXT_DECODE[f3]
        if f3 >= 2 and (rd or rs1):
            return bad
        return Instr(op, rd, rs1)
    return bad


def format_instr(i: Instr) -> str:
    """Render an instruction in the dialect (immediates as numbers or expressions)."""
    op, f = i.op, i.fmt
    r = reg_name
    if op == "ecall" or op in ("enable_dec", "disable_dec"):
        return op
    if op in ("initbb", "enc_word"):
        return f"{op} {r(i.rd)}, {r(i.rs1)}"
    if f == "R":
        return f"{op} {r(i.rd)}, {r(i.rs1)}, {r(i.rs2)}"
    if op in LOADS or op == "jalr":
        return f"{op} {r(i.rd)}, {i.imm}({r(i.rs1)})"
    if f == "I":
        return f"{op} {r(i.rd)}, {r(i.rs1)}, {i.imm}"
    if f == "S":
        return f"{op} {r(i.rs2)}, {i.imm}({r(i.rs1)})"
    if f == "B":
        return f"{op} {r(i.rs1)}, {r(i.rs2)}, {i.imm}"
    if f == "U":
        return f"{op} {r(i.rd)}, {i.imm}"
    if f == "J":
        return f"{op} {r(i.rd)}, {i.imm}"
    return f".word {i.imm:#010x}"


# --------------------------------------------------------------------------
# program model
# --------------------------------------------------------------------------


@dataclass
class Label:
    name: str
    loc: SourceLoc | None = None


@dataclass
class Directive:
    name: str
    args: list = field(default_factory=list)
    loc: SourceLoc | None = None


Item = Union[Label, Instr, Directive]


@dataclass
class Function:
    name: str
    encrypted: bool = False
    poly: bool = False
    body: list[Item] = field(default_factory=list)
    loc: SourceLoc | None = None

    @property
    def instrs(self) -> list[Instr]:
        return [x for x in self.body if isinstance(x, Instr)]


@dataclass
class DataBlock:
    items: list[Union[Label, Directive]] = field(default_factory=list)


@dataclass
class CodeBuf:
    name: str
    words: int
    encrypted: bool = False
    loc: SourceLoc | None = None


TopItem = Union[Function, DataBlock, CodeBuf]


@dataclass
class AsmProgram:
    items: list[TopItem] = field(default_factory=list)
    equs: dict[str, Imm] = field(default_factory=dict)
    entry: str | None = None

    @property
    def functions(self) -> list[Function]:
        return [x for x in self.items if isinstance(x, Function)]

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def code_attrs(self) -> dict[str, bool]:
        """Encryption attribute of every symbol that may be called."""
        out = {f.name: f.encrypted for f in self.functions}
        out.update({b.name: b.encrypted for b in self.items if isinstance(b, CodeBuf)})
        return out

    def data_objects(self) -> list[str]:
        return [x.name for blk in self.items if isinstance(blk, DataBlock) for x in blk.items if isinstance(x, Label)]


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

_LABEL = re.compile(r"\s*([A-Za-z_.$][\w.$]*)\s*:(?!:)")
_MEM = re.compile(r"^(.*)\(\s*([\w$]+)\s*\)\s*$")
_NAME = re.compile(r"^[A-Za-z_.$][\w.$]*$")


def _strip_comment(line: str) -> str:
    out, quote = [], None
    i = 0
    while i < len(line):
        ch = line[i]
        if quote:
            if ch == "\\" and i + 1 < len(line):
                out.append(line[i : i + 2])
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#" or line.startswith("//", i):
            break
        out.append(ch)
        i += 1
    return "".join(out)


def _split_operands(text: str) -> list[str]:
    parts, depth, cur, quote = [], 0, [], None
    for ch in text:
        if quote:
            cur.append(ch)
            if ch == quote:
                quote = None
            continue
        if ch in "\"'":
            quote = ch
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
            continue
        cur.append(ch)
    tail = "".join(cur).strip()
    if tail or parts:
        parts.append(tail)
    return parts


class _Parser:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.prog = AsmProgram()
        self.func: Function | None = None
        self.data: DataBlock | None = None
        self.line = 0
        self.col = 1

    def err(self, msg: str, col: int | None = None) -> AsmError:
        return AsmError(msg, self.line, col or self.col)

    @property
    def loc(self) -> SourceLoc:
        return SourceLoc(self.line, self.col)

    def run(self) -> AsmProgram:
        for self.line, raw in enumerate(self.lines, 1):
            text = _strip_comment(raw)
            pos = 0
            while True:
                m = _LABEL.match(text, pos)
                if not m:
                    break
                self.col = m.start(1) + 1
                self.label(m.group(1))
                pos = m.end()
            rest = text[pos:]
            if rest.strip():
                self.col = pos + len(rest) - len(rest.lstrip()) + 1
                self.statement(rest.strip())
        if self.func is not None:
            raise AsmError(f"missing .endfunc for {self.func.name}", self.line)
        return self.prog

    # ---- statements

    def label(self, name: str) -> None:
        if self.func is not None:
            self.func.body.append(Label(name, self.loc))
        else:
            self._data_block().items.append(Label(name, self.loc))

    def _data_block(self) -> DataBlock:
        if self.data is None:
            self.data = DataBlock()
            self.prog.items.append(self.data)
        return self.data

    def statement(self, text: str) -> None:
        head, *rest = re.split(r"\s+", text, maxsplit=1)
        tail = rest[0].strip() if rest else ""
        if head.startswith("."):
            self.directive(head.lower(), tail)
        else:
            if self.func is None:
                raise self.err("instruction outside .func")
            self.instruction(head.lower(), _split_operands(tail))

    def directive(self, name: str, tail: str) -> None:
        args = _split_operands(tail)
        if name == ".func":
            if self.func is not None:
                raise self.err("nested .func")
            words = tail.replace(",", " ").split()
            if not words or not _NAME.match(words[0]):
                raise self.err(".func needs a name")
            flags = {w.lower() for w in words[1:]}
            unknown = flags - {"encrypt", "poly"}
            if unknown:
                raise self.err(f"unknown function attribute {sorted(unknown)[0]!r}")
            self.func = Function(words[0], "encrypt" in flags, "poly" in flags, [], self.loc)
            self.prog.items.append(self.func)
            self.data = None
        elif name == ".endfunc":
            if self.func is None:
                raise self.err(".endfunc without .func")
            self.func = None
        elif name == ".entry":
            self.prog.entry = tail.strip()
        elif name in (".equ", ".set"):
            if len(args) != 2 or not _NAME.match(args[0]):
                raise self.err(f"{name} NAME, VALUE expected")
            self.prog.equs[args[0]] = make_imm(args[1])
        elif name == ".codebuf":
            words = tail.replace(",", " ").split()
            if len(words) < 2:
                raise self.err(".codebuf NAME, WORDS [encrypt] expected")
            n = _literal(words[1])
            if n is None or n <= 0:
                raise self.err(".codebuf size must be a positive integer")
            flags = {w.lower() for w in words[2:]}
            if flags - {"encrypt"}:
                raise self.err(f"unknown .codebuf attribute {sorted(flags)[0]!r}")
            self.prog.items.append(CodeBuf(words[0], n, "encrypt" in flags, self.loc))
            self.data = None
        elif name in (".ivslot", ".plaintext", ".endplaintext", ".ciphertext", ".endciphertext"):
            if self.func is None:
                raise self.err(f"{name} outside .func")
            vals = [make_imm(a) for a in args]
            if name == ".ivslot" and len(vals) != 1:
                raise self.err(".ivslot N expected")
            self.func.body.append(Directive(name, vals, self.loc))
        elif name in (".word", ".half", ".byte", ".space", ".zero", ".align", ".ascii", ".asciz"):
            if name in (".ascii", ".asciz"):
                m = re.fullmatch(r'"((?:[^"\\]|\\.)*)"', tail)
                if not m:
                    raise self.err(f"{name} expects a quoted string")
                data = m.group(1).encode().decode("unicode_escape").encode("latin-1")
                vals = [data + (b"\0" if name == ".asciz" else b"")]
                name = ".ascii"
            else:
                if not args:
                    raise self.err(f"{name} needs an argument")
                vals = [make_imm(a) for a in args]
            d = Directive(".space" if name == ".zero" else name, vals, self.loc)
            if self.func is not None:
                if name != ".word":
                    raise self.err(f"{name} not allowed inside a function")
                self.func.body.append(d)
            else:
                self._data_block().items.append(d)
        elif name in (".text", ".data", ".globl", ".global", ".section", ".type", ".size"):
            pass
        else:
            raise self.err(f"unknown directive {name!r}")

    # ---- instructions

    def reg(self, text: str) -> int:
        t = text.strip().lower()
        if t not in REGS:
            raise self.err(f"bad register name {text.strip()!r}")
        return REGS[t]

    def imm(self, text: str) -> Imm:
        if not text.strip():
            raise self.err("missing immediate")
        v = make_imm(text)
        if isinstance(v, Expr):
            v._compile()
        return v

    def mem(self, text: str) -> tuple[Imm, int]:
        m = _MEM.match(text.strip())
        if not m:
            raise self.err(f"expected offset(register), got {text!r}")
        off = m.group(1).strip()
        return (self.imm(off) if off else 0), self.reg(m.group(2))

    def emit(self, op: str, rd=0, rs1=0, rs2=0, imm: Imm = 0) -> None:
        self.func.body.append(Instr(op, rd, rs1, rs2, imm, self.loc))

    def arity(self, op: str, ops: list[str], *counts: int) -> None:
        if len(ops) not in counts:
            raise self.err(f"{op}: expected {' or '.join(map(str, counts))} operands, got {len(ops)}")

    def load_const(self, rd: int, value: Imm) -> None:
        if isinstance(value, int):
            v = value & MASK32
            sv = _signed32(v)
            if -2048 <= sv <= 2047:
                self.emit("addi", rd, 0, 0, sv)
                return
            hi, lo = hi20(v), lo12(v)
            self.emit("lui", rd, 0, 0, hi)
            if lo:
                self.emit("addi", rd, rd, 0, lo)
            return
        self.emit("lui", rd, 0, 0, Expr(f"%hi({value.text})"))
        self.emit("addi", rd, rd, 0, Expr(f"%lo({value.text})"))

    def instruction(self, op: str, ops: list[str]) -> None:
        R, I = self.reg, self.imm
        if op in R_OPS:
            self.arity(op, ops, 3)
            self.emit(op, R(ops[0]), R(ops[1]), R(ops[2]))
        elif op in I_ALU or op in SHIFTS:
            self.arity(op, ops, 3)
            self.emit(op, R(ops[0]), R(ops[1]), 0, I(ops[2]))
        elif op in LOADS:
            self.arity(op, ops, 2)
            off, base = self.mem(ops[1])
            self.emit(op, R(ops[0]), base, 0, off)
        elif op in STORES:
            self.arity(op, ops, 2)
            off, base = self.mem(ops[1])
            self.emit(op, 0, base, R(ops[0]), off)
        elif op in BRANCHES:
            self.arity(op, ops, 3)
            self.emit(op, 0, R(ops[0]), R(ops[1]), I(ops[2]))
        elif op in ("lui", "auipc"):
            self.arity(op, ops, 2)
            self.emit(op, R(ops[0]), 0, 0, I(ops[1]))
        elif op == "jal":
            self.arity(op, ops, 1, 2)
            rd, target = (1, ops[0]) if len(ops) == 1 else (R(ops[0]), ops[1])
            self.emit("jal", rd, 0, 0, I(target))
        elif op == "jalr":
            self.arity(op, ops, 1, 2, 3)
            if len(ops) == 1:
                self.emit("jalr", 1, R(ops[0]), 0, 0)
            elif len(ops) == 2:
                off, base = self.mem(ops[1]) if "(" in ops[1] else (0, R(ops[1]))
                self.emit("jalr", R(ops[0]), base, 0, off)
            else:
                self.emit("jalr", R(ops[0]), R(ops[1]), 0, I(ops[2]))
        elif op == "ecall":
            self.arity(op, ops, 0)
            self.emit("ecall")
        elif op in ("initbb", "enc_word"):
            self.arity(op, ops, 2)
            self.emit(op, R(ops[0]), R(ops[1]))
        elif op in ("enable_dec", "disable_dec"):
            self.arity(op, ops, 0)
            self.emit(op)
        else:
            self.pseudo(op, ops)

    def pseudo(self, op: str, ops: list[str]) -> None:
        R, I = self.reg, self.imm
        if op == "nop":
            self.arity(op, ops, 0)
            self.emit("addi")
        elif op == "li":
            self.arity(op, ops, 2)
            v = I(ops[1])
            if isinstance(v, Expr) and v.names <= set(self.prog.equs) and all(
                isinstance(self.prog.equs[n], int) for n in v.names
            ):
                v = v.evaluate(self.prog.equs)
            self.load_const(R(ops[0]), v)
        elif op == "la":
            self.arity(op, ops, 2)
            rd, sym = R(ops[0]), ops[1].strip()
            self.emit("lui", rd, 0, 0, Expr(f"%hi({sym})"))
            self.emit("addi", rd, rd, 0, Expr(f"%lo({sym})"))
        elif op == "mv":
            self.arity(op, ops, 2)
            self.emit("addi", R(ops[0]), R(ops[1]), 0, 0)
        elif op == "not":
            self.arity(op, ops, 2)
            self.emit("xori", R(ops[0]), R(ops[1]), 0, -1)
        elif op == "neg":
            self.arity(op, ops, 2)
            self.emit("sub", R(ops[0]), 0, R(ops[1]))
        elif op == "seqz":
            self.arity(op, ops, 2)
            self.emit("sltiu", R(ops[0]), R(ops[1]), 0, 1)
        elif op == "snez":
            self.arity(op, ops, 2)
            self.emit("sltu", R(ops[0]), 0, R(ops[1]))
        elif op == "j":
            self.arity(op, ops, 1)
            self.emit("jal", 0, 0, 0, I(ops[0]))
        elif op == "jr":
            self.arity(op, ops, 1)
            self.emit("jalr", 0, R(ops[0]), 0, 0)
        elif op == "ret":
            self.arity(op, ops, 0)
            self.emit("jalr", 0, 1, 0, 0)
        elif op == "call":
            self.arity(op, ops, 1)
            self.emit("jal", 1, 0, 0, I(ops[0]))
        elif op in ("beqz", "bnez", "bltz", "bgez"):
            self.arity(op, ops, 2)
            self.emit(op[:3], 0, R(ops[0]), 0, I(ops[1]))
        elif op in ("blez", "bgtz"):
            self.arity(op, ops, 2)
            self.emit("bge" if op == "blez" else "blt", 0, 0, R(ops[0]), I(ops[1]))
        elif op in ("bgt", "ble", "bgtu", "bleu"):
            self.arity(op, ops, 3)
            real = {"bgt": "blt", "ble": "bge", "bgtu": "bltu", "bleu": "bgeu"}[op]
            self.emit(real, 0, R(ops[1]), R(ops[0]), I(ops[2]))
        else:
            raise self.err(f"unknown mnemonic {op!r}")


def parse(text: str) -> AsmProgram:
    """Parse dialect source; pseudo-instructions are expanded on the way in."""
    return _Parser(text).run()


# --------------------------------------------------------------------------
# printer
# --------------------------------------------------------------------------


def format_program(prog: AsmProgram) -> str:
    out: list[str] = []
    if prog.entry:
        out.append(f".entry {prog.entry}")
    for name, v in prog.equs.items():
        out.append(f".equ {name}, {v}")
    for item in prog.items:
        if isinstance(item, Function):
            attrs = (" encrypt" if item.encrypted else "") + (" poly" if item.poly else "")
            out.append(f".func {item.name}{attrs}")
            for x in item.body:
                if isinstance(x, Label):
                    out.append(f"{x.name}:")
                elif isinstance(x, Directive):
                    out.append(f"    {x.name} {', '.join(map(str, x.args))}".rstrip())
                else:
                    out.append(f"    {format_instr(x)}")
            out.append(".endfunc")
        elif isinstance(item, CodeBuf):
            out.append(f".codebuf {item.name}, {item.words}{' encrypt' if item.encrypted else ''}")
        else:
            for x in item.items:
                if isinstance(x, Label):
                    out.append(f"{x.name}:")
                elif x.name == ".ascii":
                    out.append("    .ascii \"" + "".join(f"\\x{b:02x}" for b in x.args[0]) + "\"")
                else:
                    out.append(f"    {x.name} {', '.join(map(str, x.args))}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# assembler
# --------------------------------------------------------------------------


@dataclass
class Region:
    start: int
    end: int
    kind: str  # "plain" | "encrypted"


@dataclass
class Image:
    base: int
    words: list[int]
    symbols: dict[str, int]
    regions: list[Region]
    entry: int
    # data object name -> (start, end); kept in memory only
    objects: dict[str, tuple[int, int]] = field(default_factory=dict, compare=False)

    @property
    def end(self) -> int:
        return self.base + 4 * len(self.words)

    def word_at(self, addr: int) -> int:
        return self.words[(addr - self.base) >> 2]

    def to_bytes(self) -> bytes:
        return struct.pack(f"<{len(self.words)}I", *self.words)

    def copy(self) -> "Image":
        return Image(self.base, list(self.words), dict(self.symbols),
                     [Region(r.start, r.end, r.kind) for r in self.regions], self.entry, dict(self.objects))

    def encrypted_regions(self) -> list[Region]:
        return [r for r in self.regions if r.kind == "encrypted"]


def _size(item, pc: int) -> int:
    if isinstance(item, Instr):
        return 4
    if isinstance(item, Label):
        return 0
    name = item.name
    if name == ".ivslot":
        return 12
    if name == ".word":
        return 4 * len(item.args)
    if name == ".half":
        return 2 * len(item.args)
    if name == ".byte":
        return len(item.args)
    if name == ".ascii":
        return len(item.args[0])
    return 0  # region markers; .space/.align handled by caller


def _const(v: Imm, symbols: Mapping[str, int], item) -> int:
    if isinstance(v, int):
        return v
    try:
        return v.evaluate(symbols)
    except AsmError as e:
        loc = getattr(item, "loc", None)
        raise AsmError(e.message, loc.line if loc else 0, loc.col if loc else 0) from None


def assemble(program: AsmProgram, base: int = 0x1000) -> Image:
    """Two-pass layout and encoding.

    Labels placed before an ``.ivslot`` resolve to the slot, so branches to a
    prepared block enter through its IV.
    """
    if base % 4:
        raise AsmError("base address must be word aligned")
    symbols: dict[str, int] = dict(MMIO)
    defined: set[str] = set()

    def define(name: str, value: int, loc) -> None:
        if name in defined:
            raise AsmError(f"duplicate symbol {name!r}", loc.line if loc else 0, loc.col if loc else 0)
        defined.add(name)
        symbols[name] = value

    for name, v in program.equs.items():
        if isinstance(v, int):
            define(name, v, None)
    # pass 1: addresses
    pc = base
    layout: list[tuple[int, object]] = []
    for top in program.items:
        if isinstance(top, Function):
            pc = (pc + 3) & ~3
            define(top.name, pc, top.loc)
            for x in top.body:
                if isinstance(x, Label):
                    define(x.name, pc, x.loc)
                layout.append((pc, x))
                pc += _size(x, pc)
        elif isinstance(top, CodeBuf):
            pc = (pc + 3) & ~3
            define(top.name, pc, top.loc)
            pc += 4 * top.words
        else:
            for x in top.items:
                if isinstance(x, Label):
                    define(x.name, pc, x.loc)
                elif x.name in (".space", ".align"):
                    n = _const(x.args[0], symbols, x)
                    if x.name == ".space":
                        pc += n
                    else:
                        pc = (pc + (1 << n) - 1) & ~((1 << n) - 1)
                    continue
                elif x.name in (".word", ".half"):
                    align = 4 if x.name == ".word" else 2
                    pc = (pc + align - 1) & ~(align - 1)
                layout.append((pc, x))
                pc += _size(x, pc)
    for name, v in program.equs.items():
        if not isinstance(v, int):
            define(name, _const(v, symbols, None), None)
    end = (pc + 3) & ~3
    buf = bytearray(end - base)

    # pass 2: encode
    for addr, x in layout:
        off = addr - base
        if isinstance(x, Instr):
            imm = x.imm
            if not isinstance(imm, int):
                imm = _const(imm, symbols, x)
                if x.is_branch or x.op == "jal":
                    imm -= addr
            elif x.is_branch or x.op == "jal":
                pass  # numeric branch immediates are already offsets
            if x.op in ("lui", "auipc"):
                imm &= 0xFFFFF
            struct.pack_into("<I", buf, off, encode(x.with_imm(imm)))
        elif isinstance(x, Directive):
            if x.name == ".ivslot":
                n = _const(x.args[0], symbols, x)
                if not 0 < n < IV_MAGIC:
                    raise AsmError(f".ivslot count {n} does not fit the slot", *(x.loc.line, x.loc.col) if x.loc else ())
                struct.pack_into("<III", buf, off, IV_MAGIC, IV_MAGIC, n)
            elif x.name in (".word", ".half", ".byte"):
                size = {".word": 4, ".half": 2, ".byte": 1}[x.name]
                for k, a in enumerate(x.args):
                    v = _const(a, symbols, x) & ((1 << (8 * size)) - 1)
                    buf[off + k * size : off + (k + 1) * size] = v.to_bytes(size, "little")
            elif x.name == ".ascii":
                buf[off : off + len(x.args[0])] = x.args[0]
    words = list(struct.unpack(f"<{len(buf) // 4}I", bytes(buf)))

    regions = _regions(program, symbols, base, end)
    entry_name = program.entry or ("main" if "main" in symbols else (program.functions[0].name if program.functions else None))
    if entry_name is None or entry_name not in symbols:
        raise AsmError(f"entry symbol {entry_name!r} is not defined")
    entry = symbols[entry_name]
    if not base <= entry < end:
        raise AsmError("entry lies outside the image")
    objects = _objects(program, symbols, end)
    syms = {k: v & MASK32 for k, v in symbols.items() if k in defined}
    return Image(base, words, syms, regions, entry, objects)


def _regions(program: AsmProgram, symbols, base: int, end: int) -> list[Region]:
    spans: list[tuple[int, int, str]] = []
    pc = base
    for top in program.items:
        if isinstance(top, Function):
            start = symbols[top.name]
            kind = "encrypted" if top.encrypted else "plain"
            cur = start
            p = start
            for x in top.body:
                if isinstance(x, Directive) and x.name in (".plaintext", ".ciphertext", ".endplaintext", ".endciphertext"):
                    spans.append((cur, p, kind))
                    cur = p
                    if x.name == ".plaintext":
                        kind = "plain"
                    elif x.name == ".ciphertext":
                        kind = "encrypted"
                    else:
                        kind = "encrypted" if top.encrypted else "plain"
                p += _size(x, p)
            spans.append((cur, p, kind))
    # code buffers hold no static code, so they stay plain; everything not covered is plain
    enc = sorted((s, e) for s, e, k in spans if k == "encrypted" and e > s)
    regions: list[Region] = []
    pc = base
    for s, e in enc:
        if regions and regions[-1].kind == "encrypted" and regions[-1].end == s:
            regions[-1].end = e
            pc = e
            continue
        if s > pc:
            regions.append(Region(pc, s, "plain"))
        regions.append(Region(s, e, "encrypted"))
        pc = e
    if end > pc:
        regions.append(Region(pc, end, "plain"))
    return regions


def _objects(program: AsmProgram, symbols, end: int) -> dict[str, tuple[int, int]]:
    """Byte range of each top-level data label (up to the next label or block end)."""
    out: dict[str, tuple[int, int]] = {}
    tops = program.items
    for idx, top in enumerate(tops):
        if not isinstance(top, DataBlock):
            continue
        labels = [x.name for x in top.items if isinstance(x, Label)]
        if not labels:
            continue
        nxt = end
        for later in tops[idx + 1 :]:
            if isinstance(later, (Function, CodeBuf)):
                nxt = symbols[later.name]
                break
            later_labels = [x.name for x in later.items if isinstance(x, Label)]
            if later_labels:
                nxt = symbols[later_labels[0]]
                break
        addrs = [symbols[n] for n in labels] + [nxt]
        for k, n in enumerate(labels):
            out[n] = (addrs[k], max(addrs[k], addrs[k + 1]))
    return out


# --------------------------------------------------------------------------
# PVO1 file format
# --------------------------------------------------------------------------
#
#   char[4] "PVO1" | u32 version | u32 base | u32 entry
#   u32 n_words | u32 n_symbols | u32 n_regions
#   u32 words[n_words]
#   n_symbols x (u16 name_len | name utf-8 | u32 address)      (sorted by name)
#   n_regions x (u32 start | u32 end | u32 kind)               (0 plain, 1 encrypted)
#
# All integers little-endian.

PVO_MAGIC = b"PVO1"
PVO_VERSION = 1


def image_to_bytes(img: Image) -> bytes:
    out = bytearray(PVO_MAGIC)
    out += struct.pack("<6I", PVO_VERSION, img.base, img.entry, len(img.words), len(img.symbols), len(img.regions))
    out += img.to_bytes()
    for name in sorted(img.symbols):
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", img.symbols[name] & MASK32)
    for r in img.regions:
        out += struct.pack("<3I", r.start, r.end, 1 if r.kind == "encrypted" else 0)
    return bytes(out)


def image_from_bytes(data: bytes) -> Image:
    if data[:4] != PVO_MAGIC:
        raise AsmError("not a PVO1 image")
    version, base, entry, nw, ns, nr = struct.unpack_from("<6I", data, 4)
    if version != PVO_VERSION:
        raise AsmError(f"unsupported PVO1 version {version}")
    pos = 28
    words = list(struct.unpack_from(f"<{nw}I", data, pos))
    pos += 4 * nw
    symbols = {}
    for _ in range(ns):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + n].decode()
        (addr,) = struct.unpack_from("<I", data, pos + 2 + n)
        symbols[name] = addr
        pos += 6 + n
    regions = []
    for _ in range(nr):
        s, e, k = struct.unpack_from("<3I", data, pos)
        regions.append(Region(s, e, "encrypted" if k else "plain"))
        pos += 12
    if pos != len(data):
        raise AsmError("trailing bytes after PVO1 tables")
    return Image(base, words, symbols, regions, entry)


def write_image(path, img: Image) -> None:
    with open(path, "wb") as fh:
        fh.write(image_to_bytes(img))


def read_image(path) -> Image:
    with open(path, "rb") as fh:
        return image_from_bytes(fh.read())


def strip_attributes(program: AsmProgram, encrypt: bool = True, poly: bool = True) -> AsmProgram:
    """Copy of `program` with the chosen function attributes cleared."""
    items: list[TopItem] = []
    for top in program.items:
        if isinstance(top, Function):
            items.append(Function(top.name, top.encrypted and not encrypt, top.poly and not poly, list(top.body), top.loc))
        elif isinstance(top, CodeBuf):
            items.append(CodeBuf(top.name, top.words, top.encrypted and not encrypt, top.loc))
        else:
            items.append(top)
    return AsmProgram(items, dict(program.equs), program.entry)


def iter_instrs(items: Iterable[Item]):
    return (x for x in items if isinstance(x, Instr))
