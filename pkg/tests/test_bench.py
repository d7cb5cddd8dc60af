import csv
import io
import statistics

import pytest

from aaas import bench
from aaas.client import PhaseTimes
from aaas.corpus import write_ylt
from aaas.datagen import GenSpec, gen_portfolio
from cases import endpoint_of

SMALL = ["--trials", "300", "--events", "20", "--elts", "3", "--catalog", "200"]


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def corpus_dir(tmp_path):
    out = tmp_path / "corpus"
    assert bench.main(["generate", "--out", str(out), *SMALL]) == 0
    return out


def test_generate_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert bench.main(["generate", "--out", str(tmp_path / name), *SMALL, "--seed", "9"]) == 0
    a, b = (sorted(p.name for p in (tmp_path / n).iterdir()) for n in "ab")
    assert a == b == ["elt-00.bin", "elt-01.bin", "elt-02.bin", "portfolio.json", "yet.bin"]
    for name in a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_rejects_zero_trials(tmp_path, capsys):
    assert bench.main(["generate", "--out", str(tmp_path / "x"), "--trials", "0"]) == 2
    assert "n_trials" in capsys.readouterr().err


def test_generate_defaults_are_one_layer_of_sixteen_elts():
    args = bench.build_parser().parse_args(["generate", "--out", "x"])
    assert args.elts == 16
    portfolio = gen_portfolio(GenSpec(n_elts=args.elts))
    layers = list(portfolio.layers())
    assert len(layers) == 1 and len(layers[0][1].elt_ids) == 16


def test_run_local_repeats(corpus_dir, tmp_path, capsys):
    report = tmp_path / "r.csv"
    assert bench.main(["run-local", str(corpus_dir), "--repeats", "5", "--report", str(report)]) == 0
    rows = rows_of(report.read_text())
    assert len(rows) == 5 and list(rows[0]) == bench.RAW_COLUMNS
    assert len({r["digest"] for r in rows}) == 1
    assert (corpus_dir / "ylt.csv").exists()
    assert "kernel=" in capsys.readouterr().err


def test_run_local_lanes_do_not_change_digest(corpus_dir, tmp_path):
    digests = []
    for lanes in ("1", "8"):
        report = tmp_path / f"r{lanes}.csv"
        assert bench.main(["run-local", str(corpus_dir), "--lanes", lanes, "--repeats", "1",
                           "--report", str(report)]) == 0
        digests.append(rows_of(report.read_text())[0]["digest"])
    assert digests[0] == digests[1]


def test_run_local_missing_elt(corpus_dir, capsys):
    (corpus_dir / "elt-01.bin").unlink()
    assert bench.main(["run-local", str(corpus_dir), "--repeats", "1"]) == 1
    assert "missing ELT file" in capsys.readouterr().err


def test_run_remote_matches_local(corpus_dir, tmp_path, start_daemon):
    ep = endpoint_of(start_daemon())
    local, remote = tmp_path / "l.csv", tmp_path / "r.csv"
    assert bench.main(["run-local", str(corpus_dir), "--repeats", "1", "--report", str(local)]) == 0
    assert bench.main(["run-remote", str(corpus_dir), "--servers", f"{ep.host}:{ep.port}", "--repeats", "2",
                       "--report", str(remote), "--out", str(tmp_path / "ylt")]) == 0
    rows = rows_of(remote.read_text())
    assert {r["digest"] for r in rows} == {rows_of(local.read_text())[0]["digest"]}
    assert all(float(r["transfer_in_s"]) > 0 and float(r["kernel_s"]) > 0 for r in rows)
    assert (tmp_path / "ylt" / "ylt.csv").read_text() == (corpus_dir / "ylt.csv").read_text()


def test_run_remote_unreachable(corpus_dir, capsys):
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    assert bench.main(["run-remote", str(corpus_dir), "--servers", f"127.0.0.1:{port}", "--repeats", "1"]) == 1
    assert f"127.0.0.1:{port}" in capsys.readouterr().err


def test_sweep_grid(corpus_dir, tmp_path, start_daemon):
    ep = endpoint_of(start_daemon())
    out, summary = tmp_path / "s.csv", tmp_path / "sum.csv"
    code = bench.main(["sweep", str(corpus_dir), "--lanes-list", "16,32,64,128", "--devices-list", "1",
                       "--servers", f"{ep.host}:{ep.port}", "--repeats", "1", "--out", str(out),
                       "--summary", str(summary)])
    assert code == 0
    rows = rows_of(out.read_text())
    assert [int(r["lanes"]) for r in rows] == [16, 32, 64, 128]
    assert len({r["digest"] for r in rows}) == 1
    assert len(rows_of(summary.read_text())) == 4


def test_sweep_marks_failed_cells(corpus_dir, tmp_path, start_daemon):
    ep = endpoint_of(start_daemon())
    out = tmp_path / "s.csv"
    code = bench.main(["sweep", str(corpus_dir), "--lanes-list", "2", "--devices-list", "0,1,2",
                       "--servers", f"{ep.host}:{ep.port}", "--repeats", "1", "--out", str(out)])
    assert code == 1
    rows = rows_of(out.read_text())
    assert [r["digest"] == bench.FAILED for r in rows] == [False, False, True]


def test_sweep_empty_lanes_is_usage_error(corpus_dir):
    with pytest.raises(SystemExit) as err:
        bench.main(["sweep", str(corpus_dir), "--lanes-list", ""])
    assert err.value.code == 2


def test_metrics_fixture(tmp_path, capsys):
    ylt = tmp_path / "ylt.csv"
    write_ylt(ylt, [float(x) for x in range(0, 100, 10)])
    assert bench.main(["metrics", str(ylt), "--return-periods", "5", "--tvar-alphas", "0.8"]) == 0
    rows = rows_of(capsys.readouterr().out)
    assert rows == [{"metric": "pml", "parameter": "5", "value": "80.0"},
                    {"metric": "tvar", "parameter": "0.8", "value": "85.0"}]


def test_metrics_empty_ylt(tmp_path, capsys):
    ylt = tmp_path / "ylt.csv"
    write_ylt(ylt, [])
    assert bench.main(["metrics", str(ylt)]) == 1
    assert "empty" in capsys.readouterr().err


def test_report_statistics():
    r = bench.RunReport("local", 0, 1, 1, [PhaseTimes(kernel=k) for k in (1.0, 2.0, 4.0)], ["d"] * 3)
    assert r.mean("kernel") == pytest.approx(7 / 3)
    assert r.stddev("kernel") == pytest.approx(statistics.stdev([1.0, 2.0, 4.0]))
    assert r.digest == "d"
    r.digests[1] = "e"
    assert r.digest is None
    assert bench.RunReport("local", 0, 1, 1, [PhaseTimes()], ["d"]).summary_row()["total_stddev_s"] == ""
