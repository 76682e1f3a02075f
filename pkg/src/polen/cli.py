"""Command-line driver: ``polen <subcommand> ...``.

Every subcommand that draws randomness prints the seeds it used, and running
it again with those seeds reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import asm, binenc, cfgprep, cipher, poly, sca
from .pipeline import (CONFIG_NAMES, DEFAULT_KEY, OVERHEAD_HEADER, PipelineError, campaign, check_transparency,
                       overhead, preset)
from .programs import CORPUS_NAMES, program
from .sim import Machine


def _int(text: str) -> int:
    return int(text, 0)


def _seeds(**seeds) -> None:
    print("seeds: " + " ".join(f"{k}={v}" for k, v in seeds.items()))


def _read_text(path: str) -> str:
    return sys.stdin.read() if path == "-" else Path(path).read_text()


def _poly_config(path: str | None) -> poly.PolyConfig:
    return poly.parse_config(Path(path).read_text()) if path else poly.PolyConfig()


def cmd_asm(a) -> None:
    img = asm.assemble(asm.parse(_read_text(a.input)), a.base)
    asm.write_image(a.output, img)
    print(f"{a.output}: {len(img.words)} words at {img.base:#x}, entry {img.entry:#x}")


def cmd_prep(a) -> None:
    Path(a.output).write_text(cfgprep.prepare_text(_read_text(a.input), merge=not a.no_merge))


def cmd_polygen(a) -> None:
    res = poly.polygen(asm.parse(_read_text(a.input)), _poly_config(a.config))
    Path(a.output).write_text(asm.format_program(res.program))
    for name, plan in res.plans.items():
        print(f"{name}: {len(plan.blocks)} blocks, {plan.n_functional} instructions, buffer {plan.buffer_words} words")


def cmd_encrypt(a) -> None:
    key = cipher.parse_hex_key(a.key, a.backend)
    img = asm.read_image(a.input)
    seed = None if a.random else a.seed
    out = binenc.encrypt_image(img, key, seed, backend=a.backend, secure_random=a.random)
    asm.write_image(a.output, out)
    _seeds(encrypt_seed="os-entropy" if a.random else seed)
    print(f"{a.output}: {len(binenc.scan_slots(img))} blocks encrypted")


def cmd_run(a) -> int:
    img = asm.read_image(a.input)
    if a.decrypt:
        cfg = cipher.CipherConfig.for_cost(a.k_t, a.backend)
        key = cipher.parse_hex_key(a.key, a.backend)
    else:
        cfg, key = cipher.CipherConfig("null"), b""
    m = Machine(img, key=key, config=cfg, rng_seed=a.rng_seed)
    r = m.run(a.max_steps)
    sys.stdout.write(r.output.decode("latin-1"))
    _seeds(rng_seed=a.rng_seed)
    c = m.counters
    print(f"status={r.status} exit={r.exit_code} steps={r.steps} cycles={c.cycles} n={c.n} b={c.b} inits={c.inits}"
          + (f" reason={r.reason}" if r.reason else ""))
    if a.trace:
        with sca.TraceWriter(a.trace) as w:
            w.write(m.trace)
        meta = sca.TraceMeta("none", b"", [b""], {"rng_seed": a.rng_seed, "image": str(a.input)})
        sca.write_meta(a.meta or f"{a.trace}.json", meta)
    if a.counters:
        with open(a.counters, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("n", "b", "fetch_inits", "exec_inits", "cycles"))
            w.writerow(c.as_tuple())
    return 0 if r.ok else 1


def cmd_campaign(a) -> None:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = {"key": cipher.parse_hex_key(a.key), "encrypt_seed": a.encrypt_seed}
    if a.config:
        overrides["poly"] = _poly_config(a.config)
    cfg = preset(a.config_name, **overrides)
    aes_key = bytes.fromhex(a.aes_key)
    with sca.TraceWriter(out / "traces.trc") as w:
        cp = campaign(cfg, program(a.program), a.n, aes_key=aes_key, seed=a.seed, max_samples=a.max_samples, writer=w)
    sca.write_meta(out / "meta.json", cp.meta())
    _seeds(seed=a.seed, encrypt_seed=a.encrypt_seed)
    print(f"{out}: {a.n} traces, lengths {int(cp.lengths.min())}..{int(cp.lengths.max())} samples")


def _load_leakage(a):
    meta = sca.read_meta(a.meta)
    traces = sca.read_traces(a.traces)
    if len(traces) != len(meta.plaintexts):
        raise sca.TraceFormatError("trace count does not match the metadata")
    n = a.max_traces or len(traces)
    X = sca.leakage_matrix(traces[:n], a.max_samples)
    return X, meta.plaintext_array()[:n], meta


def cmd_nicv(a) -> None:
    X, pts, _ = _load_leakage(a)
    values = sca.nicv_bytes(X, pts)
    sca.write_nicv_csv(a.output, values)
    print(" ".join(f"{v:.4f}" for v in values.max(axis=1)))


def cmd_cpa(a) -> None:
    X, pts, meta = _load_leakage(a)
    res = sca.cpa(X, pts, meta.key)
    sca.write_cpa_csv(a.output, res)
    if a.convergence:
        steps = [k for k in (50, 100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000) if k < X.shape[0]] + [X.shape[0]]
        sca.write_convergence_csv(a.convergence, sca.convergence(X, pts, meta.key, steps))
    print("ranks: " + " ".join(str(r.rank()) for r in res))


def cmd_report(a) -> None:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "overhead.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OVERHEAD_HEADER)
        for name in a.programs:
            for cfg in a.configs:
                w.writerow(overhead(preset(cfg), program(name)).as_row())
    with open(out / "transparency.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("program", "config", "status", "exit", "output", "digest"))
        for name in a.programs:
            for cfg, o in check_transparency(program(name), a.configs).items():
                w.writerow((name, cfg, o.status, o.exit_code, o.output.decode("latin-1").strip(), o.digest))
    _seeds(encrypt_seed=preset("unprotected").encrypt_seed, rng_seed=preset("unprotected").rng_seed)
    print(f"{out}/overhead.csv, {out}/transparency.csv")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polen",
                                description="Encrypted and polymorphic code toolchain for a small RV32IM machine.")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("asm", help="assemble to a PVO1 image")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--base", type=_int, default=0x1000)
    s.set_defaults(func=cmd_asm)

    s = sub.add_parser("prep", help="split encrypted functions into blocks with IV slots")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--no-merge", action="store_true")
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("polygen", help="replace poly functions by wrapper + generator")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_polygen)

    s = sub.add_parser("encrypt", help="encrypt the blocks of a PVO1 image")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--seed", type=_int, default=0)
    s.add_argument("--random", action="store_true", help="draw IVs from OS entropy")
    s.add_argument("--backend", default="trivium", choices=sorted(cipher.BACKENDS))
    s.set_defaults(func=cmd_encrypt)

    s = sub.add_parser("run", help="simulate a PVO1 image")
    s.add_argument("input")
    s.add_argument("--key", default=DEFAULT_KEY.hex())
    s.add_argument("--decrypt", action="store_true", help="decrypt fetched code (otherwise the null cipher)")
    s.add_argument("--backend", default="trivium", choices=sorted(cipher.BACKENDS))
    s.add_argument("--k-t", type=int, default=9)
    s.add_argument("--rng-seed", type=_int, default=1)
    s.add_argument("--max-steps", type=int, default=50_000_000)
    s.add_argument("--trace")
    s.add_argument("--meta")
    s.add_argument("--counters")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("campaign", help="collect AES traces with random plaintexts")
    s.add_argument("program", choices=CORPUS_NAMES)
    s.add_argument("--config-name", default="unprotected", choices=CONFIG_NAMES)
    s.add_argument("--config", help="flat key = value generator settings")
    s.add_argument("-n", type=int, default=1000)
    s.add_argument("--seed", type=_int, default=0)
    s.add_argument("--encrypt-seed", type=_int, default=0)
    s.add_argument("--key", default=DEFAULT_KEY.hex())
    s.add_argument("--aes-key", default=bytes(range(16)).hex())
    s.add_argument("--max-samples", type=int, default=4000)
    s.add_argument("--out", required=True, help="artifact directory")
    s.set_defaults(func=cmd_campaign)

    for name, fn, help_ in (("nicv", cmd_nicv, "NICV per key byte"), ("cpa", cmd_cpa, "first-order CPA")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("traces")
        s.add_argument("meta")
        s.add_argument("-o", "--output", required=True)
        s.add_argument("--max-traces", type=int)
        s.add_argument("--max-samples", type=int)
        if name == "cpa":
            s.add_argument("--convergence")
        s.set_defaults(func=fn)

    s = sub.add_parser("report", help="overhead and transparency tables")
    s.add_argument("--out", required=True, help="artifact directory")
    s.add_argument("--programs", nargs="+", default=list(CORPUS_NAMES), choices=CORPUS_NAMES)
    s.add_argument("--configs", nargs="+", default=list(CONFIG_NAMES[1:]), choices=CONFIG_NAMES)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (asm.AsmError, cfgprep.PrepError, poly.PolyError, binenc.EncryptError, cipher.ConfigError,
            sca.TraceFormatError, PipelineError, OSError, KeyError) as e:
        print(f"polen {args.cmd}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
