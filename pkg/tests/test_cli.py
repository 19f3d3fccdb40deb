"""Command-line surface: outputs, files, exit codes, orchestration."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from xconv2pc.cli import bench_graph, main
from xconv2pc.costs import count_mults
from xconv2pc.errors import (
    EXIT_HANDSHAKE,
    EXIT_MATERIAL,
    EXIT_PARSE,
    HandshakeError,
    MaterialError,
    ParseError,
    ShapeError,
    TransportError,
    VerificationError,
)
from xconv2pc.graph import CellVariant
from xconv2pc.graphio import load_graph, save_graph
from xconv2pc.ring import deserialize_tensor
from xconv2pc.zoo import model_zoo


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def toynet_file(tmp_path):
    g = model_zoo("toynet", CellVariant.DENSE, 16, seed=3)
    p = tmp_path / "toynet.json"
    save_graph(g, str(p))
    return str(p)


def test_exit_codes_are_distinct():
    codes = {ParseError.exit_code, ShapeError.exit_code, HandshakeError.exit_code,
             TransportError.exit_code, MaterialError.exit_code,
             VerificationError.exit_code}
    assert len(codes) == 6
    assert 0 not in codes


def test_describe_graph_file(runner, toynet_file):
    result = runner.invoke(main, ["describe", "--graph", toynet_file])
    assert result.exit_code == 0, result.output
    assert "conv1" in result.output
    assert "90,112" in result.output  # toynet total multiplications


def test_describe_zoo_spec(runner):
    result = runner.invoke(main, ["describe", "--zoo", "shufflenetv2:xop:64"])
    assert result.exit_code == 0, result.output
    g = model_zoo("shufflenetv2", CellVariant.XOP, 64, seed=0)
    total = sum(count_mults(g).values())
    assert f"{total:,}" in result.output


def test_describe_malformed_json_exit_parse(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{broken")
    result = runner.invoke(main, ["describe", "--graph", str(bad)])
    assert result.exit_code == EXIT_PARSE
    assert "byte offset" in result.output


def test_winograd_command_writes_graph_and_report(runner, toynet_file, tmp_path):
    out = tmp_path / "rw.json"
    rep = tmp_path / "tiles.json"
    result = runner.invoke(main, ["winograd", "--graph", toynet_file,
                                  "--out", str(out), "--report", str(rep)])
    assert result.exit_code == 0, result.output
    assert "skipped (stride)" in result.output
    rewritten = load_graph(str(out))
    assert rewritten.layer("conv2").attrs["winograd"] is True
    rows = json.loads(rep.read_text())
    by = {r["layer"]: r for r in rows}
    assert by["conv1"]["reason"] == "stride"
    assert by["conv2"]["n"] in (4, 6)
    assert {"eligible", "reason", "n", "T", "beta1", "beta2", "dense",
            "gamma"} <= set(by["conv2"])


def test_winograd_forced_tiles(runner, toynet_file, tmp_path):
    out = tmp_path / "rw4.json"
    result = runner.invoke(main, ["winograd", "--graph", toynet_file,
                                  "--tiles", "4", "--out", str(out)])
    assert result.exit_code == 0
    assert load_graph(str(out)).layer("conv2").attrs["tile"] == 4


def test_infer_and_verify_roundtrip(runner, toynet_file, tmp_path):
    out = tmp_path / "y.rtv"
    result = runner.invoke(main, ["infer", "--graph", toynet_file, "--seed", "9",
                                  "--fixed", "--out", str(out)])
    assert result.exit_code == 0, result.output
    t, cfg = deserialize_tensor(out.read_bytes())
    assert t.shape == (1, 10)
    result = runner.invoke(main, ["verify", "--graph", toynet_file,
                                  "--trials", "3", "--seed", "9"])
    assert result.exit_code == 0, result.output
    assert "all 3 trials bitwise-equal" in result.output


def test_dealer_and_verify_material(runner, toynet_file, tmp_path):
    mat = tmp_path / "mat"
    result = runner.invoke(main, ["dealer", "--graph", toynet_file,
                                  "--seed", "4", "--material", str(mat)])
    assert result.exit_code == 0, result.output
    assert (mat / "party0.dlr").exists() and (mat / "party1.dlr").exists()
    result = runner.invoke(main, ["verify", "--graph", toynet_file,
                                  "--trials", "1", "--seed", "4",
                                  "--material", str(mat)])
    assert result.exit_code == 0, result.output
    # Corrupt one file: the integrity check must fail with the material code.
    blob = bytearray((mat / "party0.dlr").read_bytes())
    blob[500] ^= 0xFF
    (mat / "party0.dlr").write_bytes(bytes(blob))
    result = runner.invoke(main, ["verify", "--graph", toynet_file,
                                  "--trials", "1", "--seed", "4",
                                  "--material", str(mat)])
    assert result.exit_code == EXIT_MATERIAL


def test_report_formats(runner, toynet_file, tmp_path):
    result = runner.invoke(main, ["report", "--graph", toynet_file])
    assert result.exit_code == 0
    assert "layer,kind,mults,est_bytes,meas_bytes,category" in result.output
    out = tmp_path / "r.json"
    result = runner.invoke(main, ["report", "--graph", toynet_file,
                                  "--format", "json", "--out", str(out)])
    assert result.exit_code == 0
    rows = json.loads(out.read_text())
    assert any(r["layer"] == "conv2" for r in rows)


def test_bench_graph_shapes_and_counts():
    from xconv2pc.graph import infer_shapes

    for op in ("dense", "factorized", "shuffle"):
        g = bench_graph(op, 16)
        out_shape = infer_shapes(g)[g.output_name]
        assert out_shape == (1, 64, 16, 16)
    dense = sum(count_mults(bench_graph("dense", 16)).values())
    fact = sum(count_mults(bench_graph("factorized", 16)).values())
    shuf = sum(count_mults(bench_graph("shuffle", 16)).values())
    assert dense / fact == pytest.approx(64 * 9 / (9 + 64))
    assert shuf < fact < dense


def test_bench_byte_ratio_equals_mult_ratio_exactly(tmp_path):
    # Multiplication-opening bytes are 16 x #MULT, so their two-operator
    # ratio equals the count ratio exactly; totals favor the permuted-copy
    # operator at every size.
    from fractions import Fraction

    from xconv2pc.runtime.session import secure_infer_local

    per_op = {}
    for op in ("dense", "factorized", "shuffle"):
        g = bench_graph(op, 16, seed=1)
        x = np.random.default_rng(42).uniform(-1, 1, g.input_shape)
        run = secure_infer_local(g, x, seed=43)
        mul_bytes = sum(e.bytes_sent for (l, o), e in
                        run.client.ledger.entries.items() if o == "mul-open")
        per_op[op] = (sum(count_mults(g).values()), mul_bytes,
                      run.client.ledger.total_sent)
    for a, b in (("dense", "factorized"), ("factorized", "shuffle")):
        assert Fraction(per_op[a][1], per_op[b][1]) == \
            Fraction(per_op[a][0], per_op[b][0])
    assert per_op["shuffle"][2] < per_op["factorized"][2] < per_op["dense"][2]


def test_winograd_report_csv(runner, toynet_file, tmp_path):
    rep = tmp_path / "tiles.csv"
    result = runner.invoke(main, ["winograd", "--graph", toynet_file,
                                  "--report", str(rep)])
    assert result.exit_code == 0
    header = rep.read_text().splitlines()[0]
    assert header == "layer,eligible,reason,n,T,beta1,beta2,dense,gamma"


def test_bench_op_command(runner, tmp_path):
    out = tmp_path / "bench.csv"
    result = runner.invoke(main, ["bench-op", "--op", "factorized",
                                  "--sizes", "8,16", "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "op,size,mults,payload_bytes"
    assert len(lines) == 3


def test_compare_command(runner):
    result = runner.invoke(main, ["compare", "--backbones", "toynet",
                                  "--variants", "dense", "--size", "16",
                                  "--baseline", "TD"])
    assert result.exit_code == 0, result.output
    assert "TD" in result.output
    assert "1.00x" in result.output


@pytest.mark.slow
def test_local_three_process_run_matches_infer(tmp_path, toynet_file):
    env = dict(os.environ, PYTHONPATH="src")
    out = tmp_path / "secure.rtv"
    led = tmp_path / "led"
    rc = subprocess.run(
        [sys.executable, "-m", "xconv2pc", "run", "--local",
         "--graph", toynet_file, "--seed", "6",
         "--material", str(tmp_path / "mat"),
         "--out", str(out), "--ledger", str(led)],
        cwd="/root/pkg", env=env, capture_output=True, text=True)
    assert rc.returncode == 0, rc.stderr
    clear = tmp_path / "clear.rtv"
    rc2 = subprocess.run(
        [sys.executable, "-m", "xconv2pc", "infer", "--graph", toynet_file,
         "--seed", "6", "--fixed", "--out", str(clear)],
        cwd="/root/pkg", env=env, capture_output=True, text=True)
    assert rc2.returncode == 0, rc2.stderr
    assert out.read_bytes() == clear.read_bytes()
    # Both parties' ledgers mirror each other per (layer, op) tag.
    import csv

    def load_ledger(path):
        with open(path) as f:
            return {(r["layer"], r["op"]): (int(r["bytes_sent"]), int(r["bytes_recv"]))
                    for r in csv.DictReader(f)}

    l0 = load_ledger(str(led) + ".party0.csv")
    l1 = load_ledger(str(led) + ".party1.csv")
    # Mirror symmetry: whatever one side sent under a tag, the other
    # received (zero-byte local notes may exist on a single side only).
    for key in set(l0) | set(l1):
        sent0, recv0 = l0.get(key, (0, 0))
        sent1, recv1 = l1.get(key, (0, 0))
        assert sent0 == recv1 and sent1 == recv0, key


@pytest.mark.slow
def test_handshake_mismatch_exit_code(tmp_path):
    env = dict(os.environ, PYTHONPATH="src")
    g1 = model_zoo("toynet", CellVariant.DENSE, 16, seed=3)
    g2 = model_zoo("toynet", CellVariant.DENSE, 16, seed=3)
    g2.layer("fc").attrs["bias"] = False
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_graph(g1, str(p1))
    save_graph(g2, str(p2))
    mat = tmp_path / "mat"
    subprocess.run([sys.executable, "-m", "xconv2pc", "dealer", "--graph",
                    str(p1), "--seed", "2", "--material", str(mat)],
                   cwd="/root/pkg", env=env, check=True, capture_output=True)
    import socket

    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    srv = subprocess.Popen(
        [sys.executable, "-m", "xconv2pc", "run", "--role", "party0",
         "--graph", str(p1), "--listen", f"127.0.0.1:{port}",
         "--material", str(mat / "party0.dlr"), "--seed", "2"],
        cwd="/root/pkg", env=env, stdout=subprocess.PIPE,
        stderr=subprocess.PIPE, text=True)
    cli = subprocess.run(
        [sys.executable, "-m", "xconv2pc", "run", "--role", "party1",
         "--graph", str(p2), "--connect", f"127.0.0.1:{port}",
         "--material", str(mat / "party1.dlr"), "--seed", "2"],
        cwd="/root/pkg", env=env, capture_output=True, text=True)
    srv.wait(timeout=60)
    assert cli.returncode == EXIT_HANDSHAKE, cli.stderr
    assert srv.returncode == EXIT_HANDSHAKE, srv.stderr
