import json

import pytest

from quantlaw import cli
from quantlaw.laws import CLM_STRONG, FitResult, LawParams
from quantlaw.store import read_runs, write_fit

SUBCOMMANDS = ["search", "fit", "predict", "plan", "synth", "export-contour", "init-model", "make-tokens"]
TINY = {"vocab_size": 32, "model_dim": 16, "ffn_dim": 32, "n_layers": 2, "n_heads": 4,
        "n_kv_heads": 2, "max_seq_len": 16}


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    assert cli.main(["make-tokens", "--n", "256", "--vocab", "32", "--seed", "2", "--out", "tok.txt"]) == 0
    return tmp_path


@pytest.fixture
def strong_fit(tmp_path):
    path = tmp_path / "fit.json"
    write_fit(FitResult(CLM_STRONG, 1.0, 1.0, 100, 0), path)
    return path


def search_args(out, *extra):
    return ["search", "--model", "tiny.json", "--init-seed", "1", "--tokens", "tok.txt",
            "--method", "mxint4:16", "--qb", "16", "--qr", "0.5,0.9", "--trials", "6", "--seed", "3",
            "--out", out, *extra]


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([cmd, "--help"])
    assert info.value.code == 0
    assert "--log-level" in capsys.readouterr().out


def test_usage_errors_exit_2(capsys):
    for argv in (["search", "--bogus"], [], ["predict", "--fit", "x"], ["nonsense"],
                 ["search", "--init-seed", "1", "--tokens", "t", "--qr", "0.5", "--qb", "32",
                  "--out", "o", "--method", "fp8:32"]):
        with pytest.raises(SystemExit) as info:
            cli.main(argv)
        assert info.value.code == 2


def test_deterministic_search_is_byte_identical(work, capsys):
    assert cli.main(search_args("a.jsonl", "--deterministic")) == 0
    out = capsys.readouterr().out
    assert out.startswith("baseline loss: ") and "qr=0.5:" in out and "qr=0.9:" in out
    assert cli.main(search_args("b.jsonl", "--deterministic", "--jobs", "4")) == 0
    assert (work / "a.jsonl").read_bytes() == (work / "b.jsonl").read_bytes()
    runs = read_runs(work / "a.jsonl")
    assert [r.spec.qr_target for r in runs] == [0.5, 0.9]
    assert all(abs(t.qr_achieved - r.spec.qr_target) <= 0.02 for r in runs for t in r.records)
    assert runs[0].extra == {"init_seed": 1}


def test_nondeterministic_run_ids_differ(work):
    cli.main(search_args("a.jsonl"))
    cli.main(search_args("a.jsonl"))
    ids = [r.run_id for r in read_runs(work / "a.jsonl")]
    assert len(set(ids)) == 4


def test_search_from_checkpoint(work):
    assert cli.main(["init-model", "--model", "tiny.json", "--seed", "1", "--out", "m.clmq"]) == 0
    argv = search_args("c.jsonl", "--deterministic")
    i = argv.index("--init-seed")
    argv[i:i + 2] = ["--ckpt", "m.clmq"]
    assert cli.main(argv) == 0
    assert cli.main(search_args("d.jsonl", "--deterministic")) == 0
    a, b = read_runs(work / "c.jsonl"), read_runs(work / "d.jsonl")
    assert [t.loss for t in a[0].records] == [t.loss for t in b[0].records]
    assert "ckpt_digest" in a[0].extra


def test_export_contour_csv(work):
    cli.main(search_args("a.jsonl", "--deterministic"))
    assert cli.main(["export-contour", "--in", "a.jsonl", "--out", "c.csv"]) == 0
    lines = (work / "c.csv").read_bytes().split(b"\n")
    assert lines[0] == b"n_params,q_r,q_b,delta_opt,delta_mu,n_trials"
    assert len(lines) == 4 and lines[-1] == b""


def test_predict_golden(strong_fit, capsys):
    assert cli.main(["predict", "--fit", str(strong_fit), "--n", "50", "--qr", "1", "--qb", "128"]) == 0
    assert cli.main(["predict", "--fit", str(strong_fit), "--n", "50", "--qr", "1", "--qb", "32", "--json"]) == 0
    text, js = capsys.readouterr().out.splitlines()
    assert text == "0.26783148"
    doc = json.loads(js)
    assert doc["q_b"] == 32 and float(text) - doc["delta"] == pytest.approx(0.111280540, abs=1e-9)


def test_plan_clamps_and_inverts(strong_fit, capsys):
    assert cli.main(["plan", "--fit", str(strong_fit), "--budget", "1", "--n", "50", "--qb", "32"]) == 0
    assert capsys.readouterr().out.strip() == "1"
    assert cli.main(["plan", "--fit", str(strong_fit), "--budget", "0.1", "--qr", "0.9", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert cli.main(["predict", "--fit", str(strong_fit), "--n", repr(doc["min_n_params"]), "--qr", "0.9"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.1, rel=1e-8)


def test_synth_fit_roundtrip(work, capsys):
    (work / "p.json").write_text(json.dumps(CLM_STRONG.to_dict()))
    (work / "g.json").write_text(json.dumps({"n_params": [0.06, 0.2, 0.6, 1.1],
                                             "q_r": [0.5, 0.7, 0.8, 0.9, 0.975],
                                             "q_b": [16, 32, 64, 128, 256]}))
    assert cli.main(["synth", "--params", "p.json", "--grid", "g.json", "--sigma", "0", "--out", "s.jsonl"]) == 0
    assert cli.main(["fit", "--in", "s.jsonl", "--law", "strong", "--out", "f.json"]) == 0
    got = LawParams.from_dict(json.loads((work / "f.json").read_text())["params"])
    for attr in ("c", "a_ratio", "gamma_n", "d_shift", "gamma_c"):
        assert getattr(got, attr) == pytest.approx(getattr(CLM_STRONG, attr), rel=1e-6)


def test_synth_points_grid(work):
    (work / "p.json").write_text(json.dumps(CLM_STRONG.to_dict()))
    (work / "g.json").write_text(json.dumps({"points": [{"n_params": 1.0, "q_r": 0.5}]}))
    assert cli.main(["synth", "--params", "p.json", "--grid", "g.json", "--out", "s.jsonl"]) == 0
    (run,) = read_runs(work / "s.jsonl")
    assert run.spec.qb == 32 and run.source == "synthetic"


@pytest.mark.parametrize("case,code", [
    ("missing_tokens", 3), ("bad_tokens", 3), ("corrupt_ckpt", 3), ("qb_mismatch", 3),
    ("infeasible", 4), ("bad_log", 3), ("underdetermined", 5), ("bad_budget", 5), ("bad_config", 3),
])
def test_exit_codes(work, strong_fit, case, code, capsys):
    if case == "missing_tokens":
        argv = search_args("a.jsonl")
        argv[argv.index("tok.txt")] = "missing.txt"
    elif case == "bad_tokens":
        (work / "bad.txt").write_text("1 2 x")
        argv = search_args("a.jsonl")
        argv[argv.index("tok.txt")] = "bad.txt"
    elif case == "corrupt_ckpt":
        (work / "m.clmq").write_bytes(b"CLMQ" + b"\0" * 10)
        argv = search_args("a.jsonl")
        i = argv.index("--init-seed")
        argv[i:i + 2] = ["--ckpt", "m.clmq"]
    elif case == "qb_mismatch":
        argv = search_args("a.jsonl")
        argv[argv.index("--qb") + 1] = "32"
    elif case == "infeasible":
        argv = search_args("a.jsonl", "--granularity", "layer")
        argv[argv.index("--qr") + 1] = "0.25"
    elif case == "bad_log":
        (work / "x.jsonl").write_text('{"kind": "trial"}\n')
        argv = ["fit", "--in", "x.jsonl", "--out", "f.json"]
    elif case == "underdetermined":
        cli.main(search_args("a.jsonl"))
        argv = ["fit", "--in", "a.jsonl", "--out", "f.json"]
    elif case == "bad_budget":
        argv = ["plan", "--fit", str(strong_fit), "--budget", "-1", "--n", "1"]
    else:
        (work / "cfg.json").write_text(json.dumps({**TINY, "model_dim": 15}))
        argv = search_args("a.jsonl")
        argv[argv.index("tiny.json")] = "cfg.json"
    assert cli.main(argv) == code
    assert capsys.readouterr().err.startswith("error: ")


def test_log_level_env(work, monkeypatch):
    import logging
    monkeypatch.setenv("QUANTLAW_LOG", "debug")
    root = logging.getLogger()
    old = root.handlers[:]
    root.handlers.clear()
    try:
        cli.main(["make-tokens", "--n", "4", "--out", "t2.txt"])
        assert root.level == logging.DEBUG
    finally:
        root.handlers[:] = old
