import json

import pytest
from hypothesis import given, settings, strategies as st

from quantlaw.errors import ConflictError, ParseError, SchemaError
from quantlaw.formats import BlockFormat
from quantlaw.search import SearchSpec, TrialRecord, TrialSet
from quantlaw.store import (CSV_HEADER, append_run, build_contour, contour_points, export_csv,
                            read_runs, run_lines)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def make_run(run_id="r1", qr=0.5, qb=32, deltas=(0.1, 0.2, 0.3), model="m", n=2e8, method=None,
             failed=()):
    spec = SearchSpec(qr_target=qr, qb=qb, method=method or BlockFormat("mxint", 4, qb), trials=len(deltas))
    recs = []
    for i, d in enumerate(deltas):
        ok = i not in failed
        recs.append(TrialRecord(i, 1000 + i, qr, f"p{i}", 2.0 + d if ok else None, d if ok else None,
                                ok=ok, error=None if ok else "boom"))
    return TrialSet(model, n, spec, 2.0, recs, run_id=run_id, tokens_digest="t")


@st.composite
def trial_sets(draw):
    deltas = draw(st.lists(finite, min_size=1, max_size=6))
    ts = make_run(run_id=draw(st.text("abc123", min_size=1, max_size=8)),
                  qr=draw(st.floats(0, 1)), qb=draw(st.sampled_from([16, 32, 256])), deltas=deltas,
                  n=draw(st.integers(1, 10**12)))
    ts.extra["note"] = draw(st.text(max_size=5))
    for r in ts.records:
        r.qr_achieved = draw(st.floats(0, 1))
        r.extra["tag"] = draw(st.integers())
    return ts


@settings(max_examples=40)
@given(st.lists(trial_sets(), min_size=1, max_size=3))
def test_jsonl_roundtrip_lossless(tmp_path_factory, runs):
    path = tmp_path_factory.mktemp("log") / "log.jsonl"
    for ts in runs:
        append_run(path, ts)
    back = read_runs(path)
    assert back == runs
    assert "".join(l + "\n" for ts in back for l in run_lines(ts)) == path.read_text()


def test_append_only_prefix(tmp_path):
    path = tmp_path / "log.jsonl"
    append_run(path, make_run("a"))
    before = path.read_bytes()
    append_run(path, make_run("b", qr=0.9))
    assert path.read_bytes().startswith(before)


def test_failed_trials_roundtrip(tmp_path):
    path = tmp_path / "log.jsonl"
    ts = make_run(failed=(1,))
    append_run(path, ts)
    (back,) = read_runs(path)
    assert back.records[1].ok is False and back.records[1].error == "boom"
    assert back == ts


def _write(tmp_path, lines, terminate=True):
    path = tmp_path / "log.jsonl"
    path.write_text("\n".join(lines) + ("\n" if terminate else ""))
    return path


def test_truncated_final_line(tmp_path):
    lines = run_lines(make_run())
    path = _write(tmp_path, lines[:-1] + [lines[-1][:15]], terminate=False)
    with pytest.raises(ParseError, match=f"line {len(lines)}"):
        read_runs(path)


def test_malformed_json(tmp_path):
    lines = run_lines(make_run())
    lines[2] = "{not json"
    with pytest.raises(ParseError, match="line 3"):
        read_runs(_write(tmp_path, lines))


def test_schema_version(tmp_path):
    lines = run_lines(make_run())
    head = json.loads(lines[0])
    head["schema_version"] = 99
    lines[0] = json.dumps(head)
    with pytest.raises(SchemaError):
        read_runs(_write(tmp_path, lines))


@pytest.mark.parametrize("case", ["orphan", "wrong_run", "order"])
def test_structural_errors(tmp_path, case):
    lines = run_lines(make_run())
    if case == "orphan":
        lines = lines[1:]
    elif case == "wrong_run":
        obj = json.loads(lines[2])
        obj["run_id"] = "other"
        lines[2] = json.dumps(obj)
    else:
        lines[1], lines[2] = lines[2], lines[1]
    with pytest.raises(ParseError):
        read_runs(_write(tmp_path, lines))


def test_contour_merges_and_sorts():
    runs = [make_run("b", qr=0.9, deltas=(0.5, 0.4)), make_run("a", qr=0.5),
            make_run("c", qr=0.5, deltas=(0.05,), failed=())]
    table = build_contour(runs)
    assert [r.q_r for r in table] == [0.5, 0.9]
    assert table[0].delta_opt == 0.05 and table[0].n_trials == 4
    assert table[0].delta_mu == pytest.approx((0.1 + 0.2 + 0.3 + 0.05) / 4)
    pts = contour_points(table, "mean")
    assert pts[1][0].n_params == pytest.approx(0.2) and pts[1][1] == pytest.approx(0.45)


@given(st.permutations(range(4)))
def test_contour_permutation_invariant(perm):
    runs = [make_run(str(i), qr=q, deltas=(0.1 * (i + 1), 0.05)) for i, q in enumerate([0.5, 0.5, 0.7, 0.9])]
    assert build_contour([runs[i] for i in perm]) == build_contour(runs)


def test_contour_conflicts():
    with pytest.raises(ConflictError):
        build_contour([make_run("a"), make_run("b", model="other")])
    with pytest.raises(ConflictError):
        build_contour([make_run("a"), make_run("b", method=BlockFormat("affine_int", 4, 32))])


def test_csv_bytes(tmp_path):
    path = tmp_path / "c.csv"
    export_csv(build_contour([make_run("a", qr=0.9), make_run("b", qr=0.5)]), path)
    data = path.read_bytes()
    assert data.startswith(b"n_params,q_r,q_b,delta_opt,delta_mu,n_trials\n")
    assert b"\r" not in data
    assert data.splitlines()[1] == b"0.2,0.5,32,0.1,0.2,3"
    assert ",".join(CSV_HEADER) == "n_params,q_r,q_b,delta_opt,delta_mu,n_trials"
