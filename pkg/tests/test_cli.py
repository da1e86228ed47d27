"""CLI surface tests; heavy lifting is covered by the harness tests."""

import subprocess
import sys

import pytest

from certinfer.cli import main
from certinfer.model import F32Tensor, Graph, Node, save_dataset, save_model


@pytest.fixture
def assets(tmp_path):
    eye = [1.0 if r == c else 0.0 for r in range(3) for c in range(3)]
    graph = Graph(
        name="tiny",
        nodes=[Node("fc", "Gemm", ("x", "w"), ("y",), {})],
        initializers={"w": F32Tensor((3, 3), eye)},
        inputs=[("x", (1, 3))],
        outputs=[("y", (1, 3))],
    )
    mdir = tmp_path / "model"
    save_model(graph, mdir)
    ddir = tmp_path / "data"
    save_dataset(
        ddir,
        (1, 3),
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [0, 1, 2],
        labels_source="construction",
    )
    return tmp_path, str(mdir), str(ddir)


def test_run_writes_csv_and_png(assets, capsys):
    tmp, model, data = assets
    out = tmp / "report.csv"
    rc = main(
        [
            "run", "--model", model, "--dataset", data,
            "--arith", "fixed", "--pbits", "2..4",
            "--round", "rne", "--dot", "accurate",
            "--out", str(out),
        ]
    )
    assert rc == 0
    assert out.exists()
    png = tmp / "report.png"
    assert png.exists()
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    text = out.read_text()
    assert text.splitlines()[1] == "arith,dot,sum,round,pbits,samples,failures,agreement_pct,macs,est_inf_per_s"
    assert "fixed,accurate,naive,rne,2,3," in text


def test_run_comma_separated_lists(assets):
    tmp, model, data = assets
    out = tmp / "multi.csv"
    rc = main(
        [
            "run", "--model", model, "--dataset", data,
            "--arith", "fixed", "--pbits", "3..3",
            "--round", "rne,rtz", "--dot", "accurate,naive",
            "--no-plot", "--out", str(out),
        ]
    )
    assert rc == 0
    body = [l for l in out.read_text().splitlines() if not l.startswith("#")]
    assert len(body) == 1 + 4  # header + 2 rounds x 2 dots


def test_run_single_pbits_value(assets):
    tmp, model, data = assets
    rc = main(
        [
            "run", "--model", model, "--dataset", data,
            "--arith", "fixed", "--pbits", "5",
            "--no-plot", "--out", str(tmp / "single.csv"),
        ]
    )
    assert rc == 0


def test_run_missing_model_exits_nonzero(assets, capsys):
    tmp, _, data = assets
    rc = main(
        [
            "run", "--model", str(tmp / "nope"), "--dataset", data,
            "--arith", "fixed", "--pbits", "3..3",
            "--no-plot", "--out", str(tmp / "x.csv"),
        ]
    )
    assert rc != 0
    assert "error:" in capsys.readouterr().err


def test_bounds_writes_csv_and_png(assets):
    tmp, model, _ = assets
    out = tmp / "bounds.csv"
    rc = main(["bounds", "--model", model, "--fbits", "8", "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "layer_index,op_kind,bound,empirical_error"
    assert len(lines) == 2
    assert (tmp / "bounds.png").exists()


def test_macs_prints_count(assets, capsys):
    _, model, _ = assets
    rc = main(["macs", "--model", model])
    assert rc == 0
    assert capsys.readouterr().out.strip() == "9"


def test_estimate_appends_rate_column(assets, capsys, tmp_path):
    _, model, _ = assets
    table = tmp_path / "budget.csv"
    table.write_text("arith,pbits,ops_budget\nfixed,8,1.8e1\n")
    rc = main(["estimate", "--budget-table", str(table), "--model", model])
    assert rc == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "arith,pbits,ops_budget,macs,est_inf_per_s"
    # 18 ops/s over 2*9 ops per inference -> exactly 1/s
    assert out[1] == "fixed,8,1.8e1,9,1"


def test_invalid_pbits_range_message(assets, capsys):
    tmp, model, data = assets
    with pytest.raises(SystemExit):
        main(
            [
                "run", "--model", model, "--dataset", data,
                "--arith", "fixed", "--pbits", "abc",
                "--out", str(tmp / "x.csv"),
            ]
        )


def test_module_entry_point(assets):
    _, model, _ = assets
    proc = subprocess.run(
        [sys.executable, "-m", "certinfer.cli", "macs", "--model", model],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert proc.stdout.strip() == "9"
