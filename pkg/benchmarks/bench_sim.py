"""Compiled core vs pure-Python path: simulator throughput and Trivium keystream.

    python3 benchmarks/bench_sim.py [--repeat N]
"""

import argparse
import os
import time

from polen import cipher, sim
from polen.pipeline import build_program, make_machine, preset
from polen.programs import program


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_sim(config, repeat):
    b = build_program(preset(config), program("aes8"))
    steps = make_machine(b).run().steps
    rows = []
    for label, pure in (("pure", True), ("core", False)):
        if not pure and not sim.core_available():
            continue
        t = best_of(lambda: make_machine(b).run(pure=pure), repeat)
        rows.append((f"sim {config}", label, steps, t, steps / t))
    return rows


def bench_trivium(nwords, repeat):
    key, iv = bytes(range(10)), 0x1234567890ABCDEF1234
    rows = []
    for label, pure in (("pure", True), ("core", False)):
        if pure:
            os.environ["POLEN_PURE"] = "1"
        cipher._compiled.cache_clear()
        if not pure and cipher._compiled() is None:
            continue
        t = best_of(lambda: cipher.backend("trivium").keystream(key, iv, 4 * nwords), repeat)
        rows.append(("trivium keystream", label, nwords, t, nwords / t))
        os.environ.pop("POLEN_PURE", None)
    cipher._compiled.cache_clear()
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    rows = bench_sim("unprotected", a.repeat) + bench_sim("polen_9", a.repeat) + bench_trivium(100_000, a.repeat)
    print(f"{'kernel':<20} {'path':<5} {'units':>8} {'seconds':>9} {'units/s':>12}")
    for name, label, units, t, rate in rows:
        print(f"{name:<20} {label:<5} {units:>8} {t:>9.4f} {rate:>12.0f}")
    by = {(r[0], r[1]): r[3] for r in rows}
    for name in dict.fromkeys(r[0] for r in rows):
        if (name, "core") in by:
            print(f"{name}: core is {by[(name, 'pure')] / by[(name, 'core')]:.1f}x faster")


if __name__ == "__main__":
    main()
