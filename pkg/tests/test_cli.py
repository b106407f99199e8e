import socket
import threading

import numpy as np
import pytest

from qkdlink import cli, config, net
from qkdlink.config import ConfigError, build_config, parse_config_text
from qkdlink.core import unpack_bits
from qkdlink.optics import PRESETS, expected_qber
from qkdlink.postproc import ldpc


def free_port():
    # the quantum link uses port + 1, so find a pair
    while True:
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        try:
            with socket.socket() as s:
                s.bind(("127.0.0.1", port + 1))
            return port
        except OSError:
            continue


def read_manifest(path):
    out = {}
    for line in path.read_text().splitlines():
        if " = " in line and not line.startswith("#"):
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def test_loopback_identical_keys(tmp_path, capsys):
    rc = cli.main(["run", "--role", "loopback", "--preset", "lab", "--sessions", "3", "--trains", "100", "--seed", "7", "--out", str(tmp_path)])
    assert rc == 0
    a = (tmp_path / "alice_key.bin").read_bytes()
    assert a and a == (tmp_path / "bob_key.bin").read_bytes()
    man = read_manifest(tmp_path / "alice_key.manifest")
    assert man["alarm"] == "0" and man["sessions"] == "1 2 3"
    assert int(man["key_bits"]) > 0
    assert (tmp_path / "qber.csv").read_text().startswith("cumulative_bytes,window_qber\n")
    header, line = (tmp_path / "bob_report.csv").read_text().splitlines()
    assert header.startswith("sifted_bits,")
    assert "alice:" in capsys.readouterr().out


def test_run_is_deterministic(tmp_path):
    args = ["run", "--role", "loopback", "--sessions", "2", "--trains", "100", "--seed", "99"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("alice_key.bin", "bob_key.bin", "bob_report.csv", "qber.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_injected_qber_raises_alarm(tmp_path):
    rc = cli.main(["run", "--role", "loopback", "--sessions", "4", "--trains", "100", "--seed", "3", "--inject-qber", "0.12", "--out", str(tmp_path)])
    assert rc == cli.EXIT_ALARM
    assert (tmp_path / "alice_key.bin").read_bytes() == b""
    assert (tmp_path / "bob_key.bin").read_bytes() == b""
    assert read_manifest(tmp_path / "bob_key.manifest")["alarm"] == "1"
    assert (tmp_path / "bob_report.csv").read_text().splitlines()[1].split(",")[5] == "1"


def test_capture_file(tmp_path):
    cap = tmp_path / "cap.bin"
    assert cli.main(["run", "--sessions", "1", "--trains", "400", "--seed", "1", "--out", str(tmp_path), "--capture", str(cap)]) == 0
    frames = net.read_capture(cap)
    types = [f.msg_type for f in frames]
    assert types[:2] == [net.MsgType.HELLO, net.MsgType.HELLO]
    assert net.MsgType.SIFT_MASK in types and net.MsgType.PA_SEED in types


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("preset = bank18\nsessions = 5  # five\nmu = 0.2\n\n# comment only\nseed = 4\n")
    cfg = build_config(None, config.load_config(conf), {"sessions": 2, "seed": None})
    assert cfg.preset == "bank18"
    assert cfg.sessions == 2  # flag beats file
    assert cfg.seed == 4  # unset flag leaves the file value
    assert cfg.link.mu == 0.2  # file beats preset
    assert cfg.link.channel_loss_db == PRESETS["bank18"].channel_loss_db


def test_malformed_line_is_named(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("sessions = 2\nthis line is wrong\n")
    rc = cli.main(["run", "--config", str(conf), "--out", str(tmp_path)])
    assert rc == cli.EXIT_CONFIG
    assert "bad.conf:2:" in capsys.readouterr().err


@pytest.mark.parametrize(
    "text,line",
    [("sessions = x\n", 1), ("a = 1\n", 1), ("seed = 1\nseed = 2\n", 2), ("\n\n= 3\n", 3), ("verbose = maybe\n", 1)],
)
def test_parse_errors(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.line == line


def test_custom_preset_needs_physics():
    with pytest.raises(ConfigError, match="visibility"):
        build_config("custom", {"mu": 0.1, "channel_loss_db": 3, "detector_efficiency": 0.1, "dark_count_prob": 1e-5})
    cfg = build_config("custom", {"mu": 0.1, "channel_loss_db": 3, "detector_efficiency": 0.1, "dark_count_prob": 1e-5, "visibility": 0.9})
    assert cfg.link.mu == 0.1 and cfg.link.visibility == 0.9


@pytest.mark.parametrize(
    "values",
    [
        {"preset": "moon"},
        {"role": "eve"},
        {"sessions": 0},
        {"duty_cycle": 0},
        {"seed": -1},
        {"mu": -0.1},
        {"eps_pa": 2.0},
        {"inject_qber": 0.7},
        {"role": "alice", "address": "nowhere"},
    ],
)
def test_invalid_values(values):
    with pytest.raises(ConfigError):
        build_config(None, values)


def test_inject_qber_sets_expected_qber():
    cfg = build_config("lab", {"inject_qber": 0.08})
    assert expected_qber(cfg.effective_link()) == pytest.approx(0.08)
    assert cfg.quantum_addr == "127.0.0.1:7742"


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--sessions", "many"])
    assert exc.value.code == cli.EXIT_CONFIG


def test_gen_code(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert cli.main(["gen-code", "--n", "1024", "--rate", "0.75", "--seed", "5", "--out", str(a)]) == 0
    assert cli.main(["gen-code", "--n", "1024", "--rate", "0.75", "--seed", "5", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    code = ldpc.load_code(a)
    assert code.n == 1024 and set(np.unique(code.column_degrees())) <= {3, 4}
    assert cli.main(["gen-code", "--n", "1000", "--rate", "0.75", "--seed", "5", "--out", str(a)]) == cli.EXIT_CONFIG
    assert cli.main(["gen-code", "--rate", "0.8", "--seed", "5", "--profile", "optimized", "--out", str(a)]) == cli.EXIT_CONFIG


def test_networked_alice_and_bob(tmp_path):
    port = free_port()
    common = ["run", "--address", f"127.0.0.1:{port}", "--sessions", "2", "--trains", "400", "--seed", "11"]
    rcs = {}

    def bob():
        rcs["bob"] = cli.main(common + ["--role", "bob", "--out", str(tmp_path / "b")])

    t = threading.Thread(target=bob)
    t.start()
    rcs["alice"] = cli.main(common + ["--role", "alice", "--out", str(tmp_path / "a")])
    t.join(60)
    assert rcs == {"alice": 0, "bob": 0}
    ka = (tmp_path / "a" / "alice_key.bin").read_bytes()
    assert ka and ka == (tmp_path / "b" / "bob_key.bin").read_bytes()
    # the networked run matches the loopback run with the same seed
    assert cli.main(["run", "--role", "loopback", "--sessions", "2", "--trains", "400", "--seed", "11", "--out", str(tmp_path / "l")]) == 0
    assert (tmp_path / "l" / "alice_key.bin").read_bytes() == ka


def test_transport_failure_exit_code(tmp_path, capsys):
    conf = tmp_path / "alice.conf"
    conf.write_text(f"role = alice\naddress = 127.0.0.1:{free_port()}\ntimeout = 0.3\n")
    assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path)]) == cli.EXIT_TRANSPORT
    assert "transport failure" in capsys.readouterr().err


def test_key_file_packing(tmp_path):
    assert cli.main(["run", "--sessions", "2", "--trains", "100", "--seed", "5", "--out", str(tmp_path)]) == 0
    n = int(read_manifest(tmp_path / "alice_key.manifest")["key_bits"])
    raw = (tmp_path / "alice_key.bin").read_bytes()
    assert len(raw) == (n + 7) // 8
    bits = unpack_bits(raw, n)
    assert bits.size == n
