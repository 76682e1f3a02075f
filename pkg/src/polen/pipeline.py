"""Build configurations and the asm -> prep -> polygen -> encrypt -> run flow.

The six named configurations:

==============  ==========================================  ====
name            protection                                   k_T
==============  ==========================================  ====
unprotected     none                                         -
encrypted_9     secured function encrypted                   9
encrypted_35    secured function encrypted                   35
polymorphic     secured function regenerated, no encryption  -
polen_9         wrapper, generator and instance encrypted    9
polen_35        wrapper, generator and instance encrypted    35
==============  ==========================================  ====
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

import numpy as np

from . import sca
from .asm import AsmProgram, CodeBuf, DataBlock, Function, Image, Label, assemble, parse
from .binenc import encrypt_image, scan_slots
from .cfgprep import prepare_program
from .cipher import CipherConfig
from .poly import RUNTIME_FUNCS, GenPlan, GenStats, PolyConfig, host_reference_generate, polygen
from .programs import AES_KEY, GuestProgram
from .sim import Machine, PerfCounters, RunResult

CONFIG_NAMES = ("unprotected", "encrypted_9", "encrypted_35", "polymorphic", "polen_9", "polen_35")
TARGETS = ("function", "wrapper", "sgpc", "instance")
DEFAULT_KEY = bytes.fromhex("0123456789abcdef0123")
DEFAULT_BASE = 0x1000
DEFAULT_MAX_STEPS = 20_000_000
# registers whose final value the calling convention pins down
ABI_REGS = (1, 2, 3, 4, 8, 9, 10, *range(18, 28))


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class BuildConfig:
    name: str
    targets: frozenset = frozenset()
    k_T: int = 1
    poly: PolyConfig | None = None
    key: bytes = DEFAULT_KEY
    encrypt_seed: int = 0
    rng_seed: int = 1
    backend: str = "trivium"
    base: int = DEFAULT_BASE

    def __post_init__(self):
        bad = set(self.targets) - set(TARGETS)
        if bad:
            raise PipelineError(f"unknown encryption target {sorted(bad)[0]!r}")
        if self.poly is None and self.targets - {"function"}:
            raise PipelineError("wrapper/sgpc/instance targets need a polymorphic build")
        if self.poly is not None and "function" in self.targets:
            raise PipelineError("a polymorphic build encrypts wrapper, sgpc and instance, not the function")

    @property
    def cipher(self) -> CipherConfig:
        return CipherConfig.for_cost(self.k_T, self.backend)

    @property
    def encrypted(self) -> bool:
        return bool(self.targets)

    def seeds(self) -> dict[str, int]:
        return {"encrypt_seed": self.encrypt_seed, "rng_seed": self.rng_seed}


def preset(name: str, **overrides) -> BuildConfig:
    if name not in CONFIG_NAMES:
        raise PipelineError(f"unknown configuration {name!r}; choose from {', '.join(CONFIG_NAMES)}")
    poly_cfg = overrides.pop("poly", None)
    if name == "unprotected":
        cfg = BuildConfig(name)
    elif name.startswith("encrypted_"):
        cfg = BuildConfig(name, frozenset({"function"}), int(name.split("_")[1]))
    elif name == "polymorphic":
        cfg = BuildConfig(name, poly=poly_cfg or PolyConfig())
    else:
        base = poly_cfg or PolyConfig()
        cfg = BuildConfig(name, frozenset({"wrapper", "sgpc", "instance"}), int(name.split("_")[1]),
                          poly=replace(base, encrypt_instance=True, encrypt_wrapper=True, encrypt_sgpc=True))
    return replace(cfg, **overrides)


@dataclass
class Build:
    config: BuildConfig
    source: AsmProgram      # parsed input with the protection attributes applied
    program: AsmProgram     # after polygen and block preparation
    plain: Image            # prepared image, IV slots still holding magic words
    image: Image            # what gets loaded: encrypted when any target is set
    plans: dict[str, GenPlan] = field(default_factory=dict)
    data_objects: tuple[str, ...] = ()

    @property
    def slots(self) -> int:
        return len(scan_slots(self.plain))

    def spans(self) -> dict[str, tuple[int, int]]:
        """Address range of every function and code buffer in the image."""
        starts: list[tuple[int, str]] = []
        sym = self.image.symbols
        for top in self.program.items:
            if isinstance(top, (Function, CodeBuf)):
                starts.append((sym[top.name], top.name))
            elif isinstance(top, DataBlock):
                labels = [x.name for x in top.items if isinstance(x, Label)]
                if labels:
                    starts.append((sym[labels[0]], ""))
        starts.sort()
        out = {}
        for k, (addr, name) in enumerate(starts):
            if not name:
                continue
            end = starts[k + 1][0] if k + 1 < len(starts) else self.image.end
            out[name] = (addr, end)
        for top in self.program.items:
            if isinstance(top, CodeBuf):
                s = sym[top.name]
                out[top.name] = (s, s + 4 * top.words)
        return out

    def reference_instance(self, name: str, seed: int | None = None, *, stats: GenStats | None = None) -> bytes:
        """What the guest generator writes into ``name``'s buffer on its first run under `seed`."""
        return host_reference_generate(
            self.plans[name], self.config.rng_seed if seed is None else seed, self.config.key,
            buffer_addr=self.image.symbols[f"{name}__buf"], symbols=self.image.symbols,
            cipher_config=self.config.cipher, stats=stats)

    def instance_bytes(self, m: Machine, name: str) -> bytes:
        return m.read_bytes(self.image.symbols[f"{name}__buf"], 4 * self.plans[name].buffer_words)

    def bank_layout(self) -> tuple[list[tuple[int, int]], list[int], list[int]]:
        """Ranges for the counters plus which banks hold instance and generator code."""
        spans = self.spans()
        ranges, inst, gen = [], [], []
        for name in self.plans:
            ranges.append(spans[f"{name}__buf"])
            inst.append(len(ranges))
            for part in (f"{name}__sgpc", f"{name}__noise"):
                ranges.append(spans[part])
                gen.append(len(ranges))
        for name in RUNTIME_FUNCS:
            if name in spans and self.plans:
                ranges.append(spans[name])
                gen.append(len(ranges))
        return ranges, inst, gen


def build(config: BuildConfig, source: str, secured: str) -> Build:
    prog = parse(source)
    data_objects = tuple(prog.data_objects())
    try:
        f = prog.function(secured)
    except KeyError:
        raise PipelineError(f"secured function {secured!r} not found") from None
    f.encrypted = config.encrypted
    f.poly = config.poly is not None
    plans: dict[str, GenPlan] = {}
    staged = prog
    if config.poly is not None:
        res = polygen(prog, config.poly)
        staged, plans = res.program, res.plans
    prepared = prepare_program(staged)
    plain = assemble(prepared, config.base)
    image = encrypt_image(plain, config.key, config.encrypt_seed, backend=config.backend) if plain.encrypted_regions() else plain
    return Build(config, prog, prepared, plain, image, plans, data_objects)


def build_program(config: BuildConfig, program: GuestProgram) -> Build:
    return build(config, program.source, program.secured)


def make_machine(b: Build, *, inputs: dict[str, bytes] | None = None, rng_seed: int | None = None,
                 trace_limit: int | None = None, bank_ranges=None, cipher_config: CipherConfig | None = None,
                 image: Image | None = None) -> Machine:
    m = Machine(image or b.image, key=b.config.key, config=cipher_config or b.config.cipher,
                rng_seed=b.config.rng_seed if rng_seed is None else rng_seed,
                bank_ranges=list(bank_ranges or []), trace_limit=trace_limit)
    for name, data in (inputs or {}).items():
        s, e = b.image.objects[name]
        if len(data) > e - s:
            raise PipelineError(f"input for {name!r} is larger than the object ({len(data)} > {e - s})")
        m.write_bytes(s, data)
    return m


@dataclass(frozen=True)
class Observation:
    """What a run leaves behind that protection must not change."""

    status: str
    exit_code: int | None
    output: bytes
    digest: str
    registers: tuple[int, ...]


def observe(b: Build, m: Machine, r: RunResult) -> Observation:
    objects = {k: b.image.objects[k] for k in b.data_objects}
    return Observation(r.status, r.exit_code, r.output, m.digest(objects), tuple(m.regs[k] for k in ABI_REGS))


def run(b: Build, *, inputs=None, rng_seed=None, max_steps: int = DEFAULT_MAX_STEPS, trace_limit=None,
        pure: bool = False) -> tuple[Machine, RunResult]:
    m = make_machine(b, inputs=inputs, rng_seed=rng_seed, trace_limit=trace_limit)
    return m, m.run(max_steps, pure=pure)


def check_transparency(program: GuestProgram, configs=CONFIG_NAMES, **overrides) -> dict[str, Observation]:
    """Observation per configuration; raises if any differs from the unprotected run."""
    obs: dict[str, Observation] = {}
    for name in ("unprotected", *[c for c in configs if c != "unprotected"]):
        b = build_program(preset(name, **overrides), program)
        m, r = run(b)
        obs[name] = observe(b, m, r)
        if obs[name] != obs["unprotected"]:
            raise PipelineError(f"{program.name}: {name} differs from the unprotected run "
                                f"({obs[name].status}, {obs[name].output!r})")
    return obs


# --------------------------------------------------------------------------
# overhead accounting
# --------------------------------------------------------------------------

OVERHEAD_HEADER = ("program", "config", "k_T", "cycles", "n", "b", "inits", "rb", "measured_O", "model_O",
                   "static_words", "iv_slots", "instance_words", "gen_cycles", "instance_cycles")


@dataclass
class OverheadRow:
    program: str
    config: str
    k_T: int
    counters: PerfCounters
    baseline_cycles: int
    static_words: int
    iv_slots: int
    instance_words: int
    gen_cycles: int
    instance_cycles: int

    @property
    def measured(self) -> float:
        return self.counters.cycles / self.baseline_cycles

    @property
    def model(self) -> float:
        return self.counters.model_overhead(self.k_T)

    def as_row(self) -> tuple:
        c = self.counters
        return (self.program, self.config, self.k_T, c.cycles, c.n, c.b, c.inits, f"{c.r_init:.6f}",
                f"{self.measured:.6f}", f"{self.model:.6f}", self.static_words, self.iv_slots,
                self.instance_words, self.gen_cycles, self.instance_cycles)


def overhead(config: BuildConfig, program: GuestProgram, max_steps: int = DEFAULT_MAX_STEPS) -> OverheadRow:
    """Run a build and its cost-free twin (same image, null cipher, k_T = 1).

    Decryption never changes which instructions retire, so the twin's cycle
    count equals its instruction count and is the baseline for measured O.
    """
    b = build_program(config, program)
    ranges, inst_banks, gen_banks = b.bank_layout()
    m = make_machine(b, bank_ranges=ranges)
    r = m.run(max_steps)
    twin = make_machine(b, bank_ranges=ranges, cipher_config=CipherConfig("null"), image=b.plain)
    rt = twin.run(max_steps)
    if not (r.ok and rt.ok):
        raise PipelineError(f"{program.name}/{config.name}: run failed ({r.status} {r.reason}; {rt.status} {rt.reason})")
    if m.counters.n != twin.counters.n:
        raise PipelineError(f"{program.name}/{config.name}: null-cipher twin retired a different instruction count")
    words = 0
    for name in b.plans:
        st = GenStats()
        b.reference_instance(name, stats=st)
        words += st.words
    gen = sum(m.bank(k).cycles for k in gen_banks)
    inst = sum(m.bank(k).cycles for k in inst_banks)
    return OverheadRow(program.name, config.name, config.k_T, m.counters, twin.counters.cycles,
                       len(b.image.words), b.slots, words, gen, inst)


# --------------------------------------------------------------------------
# trace campaigns
# --------------------------------------------------------------------------


@dataclass
class Campaign:
    config: BuildConfig
    program: str
    seed: int
    leakage: np.ndarray       # (n_traces, points) uint8, common prefix
    lengths: np.ndarray       # samples per trace before truncation
    plaintexts: np.ndarray    # (n_traces, 16) uint8
    aes_key: bytes
    rng_seeds: list[int]

    def meta(self) -> sca.TraceMeta:
        return sca.TraceMeta(
            "aes128", self.aes_key, [bytes(p) for p in self.plaintexts],
            {"config": self.config.name, "program": self.program, "seed": self.seed,
             "cipher_key": self.config.key.hex(), "encrypt_seed": self.config.encrypt_seed,
             "k_T": self.config.k_T, "rng_seeds": self.rng_seeds, "lengths": [int(x) for x in self.lengths]})


def campaign(config: BuildConfig, program: GuestProgram, n_traces: int, *, aes_key: bytes = AES_KEY,
             seed: int = 0, max_samples: int | None = None, writer: sca.TraceWriter | None = None,
             max_steps: int = DEFAULT_MAX_STEPS, check_output: bool = True) -> Campaign:
    """Random plaintexts under a fixed key; capture is bracketed by the guest.

    Trace ``i`` uses the ``i``-th plaintext and guest RNG seed drawn from
    ``random.Random(seed)``, so a campaign is reproducible from ``seed``.
    """
    if "pt" not in program.inputs or "key" not in program.inputs:
        raise PipelineError(f"{program.name} has no pt/key inputs to drive a campaign")
    if n_traces < 1:
        raise PipelineError("a campaign needs at least one trace")
    b = build_program(config, program)
    draw = random.Random(seed)
    width = None if max_samples is None else sca.FIELDS * max_samples
    rows: list[np.ndarray] = []
    lengths = np.zeros(n_traces, dtype=np.int64)
    pts = np.zeros((n_traces, 16), dtype=np.uint8)
    seeds = []
    for i in range(n_traces):
        pt = draw.randbytes(16)
        rs = draw.getrandbits(64)
        m = make_machine(b, inputs={"pt": pt, "key": aes_key}, rng_seed=rs, trace_limit=max_samples)
        r = m.run(max_steps)
        if not r.ok:
            raise PipelineError(f"trace {i}: {r.status} {r.reason}")
        if check_output and r.output != program.expected_output({"pt": pt, "key": aes_key}):
            raise PipelineError(f"trace {i}: wrong ciphertext")
        t = np.frombuffer(m.trace, dtype=np.uint32).reshape(-1, sca.FIELDS)
        if writer is not None:
            writer.write(t)
        row = sca.hamming_weight(t).reshape(-1)
        rows.append(row if width is None else row[:width])
        lengths[i] = t.shape[0]
        pts[i] = np.frombuffer(pt, dtype=np.uint8)
        seeds.append(rs)
    n = min(r.size for r in rows)
    leak = np.empty((n_traces, n), dtype=np.uint8)
    for i, row in enumerate(rows):
        leak[i] = row[:n]
    return Campaign(config, program.name, seed, leak, lengths, pts, aes_key, seeds)
