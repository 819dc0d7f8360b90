"""End-to-end command-line behavior: artifacts, exit codes, help text."""

import json

import numpy as np
import pytest

from slidessl.cli import _default_threads, _parse_budget, main
from slidessl.errors import ValidationError


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    banks = root / "banks"
    rc = main(["gen", "--out", str(banks), "--slides", "8", "--classes", "2",
               "--tiles", "24", "--augs", "3", "--dim", "6",
               "--extent", "2048", "--seed", "7"])
    assert rc == 0
    return root, banks


@pytest.fixture(scope="module")
def trained(corpus):
    root, banks = corpus
    ckpt = root / "model.ckpt"
    report = root / "train.json"
    rc = main(["pretrain", "--banks", str(banks), "--checkpoint", str(ckpt),
               "--epochs", "2", "--tiles", "4", "--batch", "4", "--seed", "1",
               "--report", str(report)])
    assert rc == 0
    return root, banks, ckpt


def test_gen_writes_corpus(corpus):
    _, banks = corpus
    assert len(list(banks.glob("*.gsb"))) == 8
    assert (banks / "labels.csv").exists()
    assert (banks / "corpus.json").exists()


def test_gen_verify_flag(tmp_path, capsys):
    rc = main(["gen", "--out", str(tmp_path / "c"), "--slides", "6",
               "--tiles", "16", "--augs", "2", "--dim", "4",
               "--extent", "2048", "--seed", "0", "--verify"])
    assert rc == 0
    assert "marginal-equality statistic" in capsys.readouterr().out


def test_gen_rejects_bad_config(tmp_path):
    rc = main(["gen", "--out", str(tmp_path / "c"), "--slides", "1"])
    assert rc == 1


def test_pretrain_writes_artifacts(trained):
    root, _, ckpt = trained
    assert ckpt.exists()
    assert ckpt.with_suffix(".log.csv").exists()
    doc = json.loads((root / "train.json").read_text())
    assert doc["epochs"] == 2
    assert doc["tiles"] == 4


def test_pretrain_flag_overrides_config(corpus, tmp_path, capsys):
    _, banks = corpus
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 5\ntiles = 4\nbatch_size = 4\n")
    rc = main(["pretrain", "--banks", str(banks),
               "--checkpoint", str(tmp_path / "m.ckpt"),
               "--config", str(cfg), "--epochs", "1",
               "--report", str(tmp_path / "r.json")])
    assert rc == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["epochs"] == 1          # flag wins
    assert doc["tiles"] == 4           # config survives


def test_pretrain_single_bank_exits_1(tmp_path, corpus):
    _, banks = corpus
    lone = tmp_path / "lone"
    lone.mkdir()
    (lone / "only.gsb").write_bytes(next(banks.glob("*.gsb")).read_bytes())
    rc = main(["pretrain", "--banks", str(lone),
               "--checkpoint", str(tmp_path / "m.ckpt"), "--epochs", "1",
               "--tiles", "4"])
    assert rc == 1


def test_embed_writes_gse_and_csv(trained, tmp_path):
    _, banks, ckpt = trained
    out = tmp_path / "e.gse"
    csv = tmp_path / "e.csv"
    rc = main(["embed", "--banks", str(banks), "--checkpoint", str(ckpt),
               "--out", str(out), "--csv", str(csv), "--views", "3",
               "--seed", "0", "--threads", "2"])
    assert rc == 0
    from slidessl.inference import load_embeddings
    ids, matrix = load_embeddings(out)
    assert len(ids) == 8 and matrix.shape[0] == 8
    assert ids == sorted(ids)
    assert csv.read_text().splitlines()[0].startswith("id,v0")


def test_embed_reproducible(trained, tmp_path):
    _, banks, ckpt = trained
    a, b = tmp_path / "a.gse", tmp_path / "b.gse"
    for out in (a, b):
        rc = main(["embed", "--banks", str(banks), "--checkpoint", str(ckpt),
                   "--out", str(out), "--views", "2", "--seed", "3"])
        assert rc == 0
    assert a.read_bytes() == b.read_bytes()


def test_embed_avgmil_needs_no_checkpoint(corpus, tmp_path):
    _, banks = corpus
    out = tmp_path / "mil.gse"
    rc = main(["embed", "--banks", str(banks), "--out", str(out), "--avgmil"])
    assert rc == 0
    from slidessl.inference import load_embeddings
    ids, matrix = load_embeddings(out)
    assert matrix.shape == (8, 6)


def test_embed_without_checkpoint_exits_1(corpus, tmp_path):
    _, banks = corpus
    rc = main(["embed", "--banks", str(banks), "--out", str(tmp_path / "x.gse")])
    assert rc == 1


def test_embed_corrupt_bank_exits_2(trained, tmp_path, capsys):
    _, banks, ckpt = trained
    broken = tmp_path / "broken"
    broken.mkdir()
    for p in banks.glob("*.gsb"):
        (broken / p.name).write_bytes(p.read_bytes())
    victim = sorted(broken.glob("*.gsb"))[0]
    victim.write_bytes(b"garbage")
    out = tmp_path / "e.gse"
    rc = main(["embed", "--banks", str(broken), "--checkpoint", str(ckpt),
               "--out", str(out), "--views", "2"])
    assert rc == 2
    assert victim.stem in capsys.readouterr().err
    from slidessl.inference import load_embeddings
    ids, _ = load_embeddings(out)
    assert len(ids) == 7  # survivors still written


def test_probe_reports(trained, tmp_path, capsys):
    root, banks, ckpt = trained
    gse = tmp_path / "e.gse"
    main(["embed", "--banks", str(banks), "--checkpoint", str(ckpt),
          "--out", str(gse), "--views", "2"])
    report = tmp_path / "report.csv"
    rc = main(["probe", "--embeddings", str(gse),
               "--labels", str(banks / "labels.csv"),
               "--out", str(report), "--budget", "all", "--splits", "3",
               "--task", "toy"])
    assert rc == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "task,budget,split,auc"
    assert sum(1 for l in lines if l.startswith("toy,all,")) == 5  # 3 + mean + std
    table = capsys.readouterr().out
    assert "task" in table and "toy" in table


def test_probe_budget_too_small_exits_1(trained, tmp_path):
    _, banks, ckpt = trained
    gse = tmp_path / "e.gse"
    main(["embed", "--banks", str(banks), "--checkpoint", str(ckpt),
          "--out", str(gse), "--views", "2"])
    rc = main(["probe", "--embeddings", str(gse),
               "--labels", str(banks / "labels.csv"), "--budget", "50"])
    assert rc == 1


def test_probe_bad_budget_exits_1(trained, tmp_path):
    _, banks, ckpt = trained
    gse = tmp_path / "e.gse"
    main(["embed", "--banks", str(banks), "--checkpoint", str(ckpt),
          "--out", str(gse), "--views", "2"])
    rc = main(["probe", "--embeddings", str(gse),
               "--labels", str(banks / "labels.csv"), "--budget", "half"])
    assert rc == 1


def test_gradcheck_passes(capsys):
    rc = main(["gradcheck", "--instances", "2", "--seed", "0"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "submconv" in out and "nt_xent" in out and "PASS" in out


def test_selftest_passes(capsys):
    rc = main(["selftest"])
    out = capsys.readouterr().out
    assert rc == 0
    assert out.count("PASS") >= 10 and "FAIL" not in out


def test_unknown_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--out", "x", "--slides", "4", "--bogus"])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_exits_1():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_missing_required_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--slides", "4"])
    assert exc.value.code == 1


@pytest.mark.parametrize("argv,needles", [
    (["pretrain", "--help"], ("default 5", "default 0.5", "default 1000")),
    (["embed", "--help"], ("default 50",)),
    (["gen", "--help"], ("default 256", "default 50")),
    (["--help"], ("224",)),
])
def test_help_documents_defaults(argv, needles, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for needle in needles:
        assert needle in text, f"help missing '{needle}'"


def test_parse_budget_forms():
    assert _parse_budget("all") == "all"
    assert _parse_budget("0.25") == 0.25
    assert _parse_budget("50") == 50
    with pytest.raises(ValidationError):
        _parse_budget("half")


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("GIGASSL_THREADS", "3")
    assert _default_threads() == 3
    monkeypatch.setenv("GIGASSL_THREADS", "junk")
    assert _default_threads() >= 1
    monkeypatch.delenv("GIGASSL_THREADS")
    assert _default_threads() >= 1
