import json
import socket
import subprocess
import sys
import threading
import time

import pytest

from blockaudit.cli import EXIT_OK, EXIT_PROTOCOL, EXIT_VALIDATION, main

PLAN = """\
id = {id}
block_count = {k}
block_size = {m}
seed = 3
reloads = 5
experimental.name = rehab
experimental.actions = visit_url_list:rehab.txt
sim = {sim}
"""


@pytest.fixture
def plan_dir(tmp_path):
    (tmp_path / "rehab.txt").write_text("www.thewatershed.com\n")

    def write(name="p.cfg", k=5, m=10, sim="planted", id="rehab"):
        path = tmp_path / name
        path.write_text(PLAN.format(k=k, m=m, sim=sim, id=id))
        return path

    return write


def test_validate(plan_dir, capsys):
    assert main(["validate", "--plan", str(plan_dir())]) == EXIT_OK
    bad = plan_dir("bad.cfg", m=3)
    assert main(["validate", "--plan", str(bad)]) == EXIT_VALIDATION
    assert "block_size must be even" in capsys.readouterr().out


def test_unparsable_and_missing_plan(tmp_path, capsys):
    path = tmp_path / "x.cfg"
    path.write_text("id = x\nblock_count = 2\nwat = 1\n")
    assert main(["validate", "--plan", str(path)]) == EXIT_VALIDATION
    assert main(["run", "--plan", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_run_analyze_report_family(plan_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--plan", str(plan_dir()), "--out", str(out)]) == EXIT_OK
    capsys.readouterr()
    manifest = tmp_path / "m.json"
    assert main(["analyze", "--logs", str(out), "--preset", "transparency", "--samples", "5000",
                 "--out", str(manifest)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "reported p =" in printed
    assert main(["report", "--manifest", str(manifest)]) == EXIT_OK
    assert capsys.readouterr().out == printed
    twin = tmp_path / "family.json"
    assert main(["family", "--manifests", str(manifest), "--out", str(twin)]) == EXIT_OK
    assert "Adj. p-value" in capsys.readouterr().out
    assert json.loads(twin.read_text())["rows"][0]["experiment"] == "rehab"
    assert main(["settings-diff", "--logs", str(out)]) == EXIT_OK
    assert "Substance Abuse" in capsys.readouterr().out


def test_analyze_without_out_prints_json(plan_dir, tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", "--plan", str(plan_dir(k=3, sim="dating")), "--out", str(out)])
    capsys.readouterr()
    assert main(["analyze", "--logs", str(out), "--preset", "ad-choice", "--keywords", "Dating",
                 "--samples", "2000"]) == EXIT_OK
    d = json.loads(capsys.readouterr().out)
    assert d["keywords"] == ["dating"] and len(d["results"]) == 2


def test_protocol_error_exit_code(plan_dir, tmp_path, capsys):
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen()
    port = srv.getsockname()[1]

    def garbage():
        conn, _ = srv.accept()
        with conn:
            conn.recv(4096)
            conn.sendall(b"not json at all\n")
            time.sleep(0.2)

    threading.Thread(target=garbage, daemon=True).start()
    code = main(["run", "--plan", str(plan_dir()), "--sut", f"tcp:127.0.0.1:{port}", "--out", str(tmp_path / "o")])
    srv.close()
    assert code == EXIT_PROTOCOL
    assert "not json at all" in capsys.readouterr().err


def test_sim_server_end_to_end(plan_dir, tmp_path):
    proc = subprocess.Popen([sys.executable, "-m", "blockaudit", "sim-server", "--scenario", "planted",
                             "--seed", "3"], stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        port = int(line.rsplit(":", 1)[1])
        remote, local = tmp_path / "remote", tmp_path / "local"
        plan = plan_dir(k=2)
        assert main(["run", "--plan", str(plan), "--sut", f"tcp:127.0.0.1:{port}", "--out", str(remote)]) == 0
        assert main(["run", "--plan", str(plan), "--out", str(local)]) == 0
        assert (remote / "logs.jsonl").read_bytes() == (local / "logs.jsonl").read_bytes()
    finally:
        proc.terminate()
        proc.wait(timeout=10)
