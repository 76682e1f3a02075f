import csv

import pytest

from polen import asm, binenc, sca
from polen.cli import main
from polen.programs import BRACKET_SOURCE, corpus_source

KEY = "0123456789abcdef0123"


def polen(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_asm_prep_encrypt_run(tmp_path, capsys):
    src = tmp_path / "b.s"
    src.write_text(BRACKET_SOURCE)
    prepped = tmp_path / "b.prep.s"
    assert polen(capsys, "prep", src, "-o", prepped)[0] == 0
    assert polen(capsys, "asm", prepped, "-o", tmp_path / "b.pvo")[0] == 0
    code, out, _ = polen(capsys, "encrypt", tmp_path / "b.pvo", "-o", tmp_path / "b.enc", "--key", KEY, "--seed", 5)
    assert code == 0 and "seeds: encrypt_seed=5" in out
    img = asm.read_image(tmp_path / "b.enc")
    assert binenc.verify_image(asm.read_image(tmp_path / "b.pvo"), img, bytes.fromhex(KEY)).ok

    code, out, _ = polen(capsys, "run", tmp_path / "b.enc", "--decrypt", "--key", KEY,
                         "--counters", tmp_path / "c.csv", "--trace", tmp_path / "t.trc")
    # the guest exits with 14, which the driver reports as a failed run
    assert code == 1 and "status=halted exit=14" in out and "seeds: rng_seed=1" in out
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["n", "b", "fetch_inits", "exec_inits", "cycles"]
    n, _, fetch, execs, cycles = map(int, rows[1])
    assert (fetch, execs) == (3, 0) and cycles == n + 8 * (fetch + execs)
    assert len(sca.read_traces(tmp_path / "t.trc")) == 1
    assert sca.read_meta(tmp_path / "t.trc.json").extra["rng_seed"] == 1


def test_encrypt_is_reproducible_from_the_printed_seed(tmp_path, capsys):
    (tmp_path / "x.s").write_text(corpus_source("xorblock"))
    polen(capsys, "prep", tmp_path / "x.s", "-o", tmp_path / "x.prep.s")
    polen(capsys, "asm", tmp_path / "x.prep.s", "-o", tmp_path / "x.pvo")
    for out in ("a", "b"):
        polen(capsys, "encrypt", tmp_path / "x.pvo", "-o", tmp_path / out, "--key", KEY, "--seed", 9)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_run_without_decrypt_faults_on_an_encrypted_image(tmp_path, capsys):
    (tmp_path / "b.s").write_text(BRACKET_SOURCE)
    polen(capsys, "prep", tmp_path / "b.s", "-o", tmp_path / "b.prep.s")
    polen(capsys, "asm", tmp_path / "b.prep.s", "-o", tmp_path / "b.pvo")
    polen(capsys, "encrypt", tmp_path / "b.pvo", "-o", tmp_path / "b.enc", "--key", KEY)
    code, out, _ = polen(capsys, "run", tmp_path / "b.enc")
    assert code == 1 and "status=fault" in out


def test_polygen(tmp_path, capsys):
    (tmp_path / "cfg").write_text("p = 2\nnmax = 3\ntransforms = variants, noise\n")
    (tmp_path / "a.s").write_text(corpus_source("aes8").replace(".func aes_encrypt", ".func aes_encrypt poly"))
    code, out, _ = polen(capsys, "polygen", tmp_path / "a.s", "-o", tmp_path / "a.poly.s", "--config", tmp_path / "cfg")
    assert code == 0
    text = (tmp_path / "a.poly.s").read_text()
    names = [f.name for f in asm.parse(text).functions]
    assert "aes_encrypt" in names and len(names) > 3
    assert out.startswith("aes_encrypt: ") and "buffer" in out


def test_campaign_nicv_cpa(tmp_path, capsys):
    out = tmp_path / "art"
    code, text, _ = polen(capsys, "campaign", "aes8", "-n", 40, "--seed", 2, "--out", out, "--max-samples", 1500)
    assert code == 0 and "seeds: seed=2 encrypt_seed=0" in text
    assert len(sca.read_traces(out / "traces.trc")) == 40
    code, text, _ = polen(capsys, "nicv", out / "traces.trc", out / "meta.json", "-o", tmp_path / "n.csv")
    assert code == 0 and len(text.split()) == 16
    header, rows = sca.read_csv(tmp_path / "n.csv")
    assert header == sca.NICV_HEADER and rows
    code, text, _ = polen(capsys, "cpa", out / "traces.trc", out / "meta.json", "-o", tmp_path / "c.csv",
                          "--convergence", tmp_path / "v.csv")
    assert code == 0 and text.startswith("ranks: ") and len(text.split()) == 17
    assert sca.read_csv(tmp_path / "v.csv")[0] == sca.CONVERGENCE_HEADER


def test_campaign_is_reproducible(tmp_path, capsys):
    for d in ("a", "b"):
        polen(capsys, "campaign", "aes8", "--config-name", "polen_9", "-n", 3, "--seed", 7, "--out", tmp_path / d,
              "--max-samples", 300)
    for f in ("traces.trc", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_report(tmp_path, capsys):
    code, text, _ = polen(capsys, "report", "--out", tmp_path, "--programs", "xorblock",
                          "--configs", "encrypted_9", "polen_9")
    assert code == 0 and "seeds:" in text
    rows = list(csv.DictReader(open(tmp_path / "overhead.csv")))
    assert [r["config"] for r in rows] == ["encrypted_9", "polen_9"]
    for r in rows:
        assert r["measured_O"] == r["model_O"]
    rows = list(csv.DictReader(open(tmp_path / "transparency.csv")))
    assert len({(r["status"], r["output"], r["digest"]) for r in rows}) == 1


@pytest.mark.parametrize("argv", [
    ["asm", "/nonexistent.s", "-o", "/tmp/x.pvo"],
    ["campaign", "xorblock", "-n", "2", "--out", "{tmp}"],
    ["encrypt", "{tmp}/missing.pvo", "-o", "{tmp}/o", "--key", "00"],
])
def test_errors_exit_with_status_two(tmp_path, capsys, argv):
    code, _, err = polen(capsys, *[a.replace("{tmp}", str(tmp_path)) for a in argv])
    assert code == 2 and "error:" in err


def test_assembler_errors_are_reported(tmp_path, capsys):
    (tmp_path / "bad.s").write_text(".text\nmain:\n    frob a0, a1\n")
    code, _, err = polen(capsys, "asm", tmp_path / "bad.s", "-o", tmp_path / "bad.pvo")
    assert code == 2 and "polen asm: error:" in err
