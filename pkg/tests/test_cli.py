import csv
import json

import numpy as np
import pytest

from sdpcert import bounds
from sdpcert.attacks import read_attack_csv
from sdpcert.cli import build_report, main, parse_config
from sdpcert.data import synth_blobs
from sdpcert.errors import ConfigError
from sdpcert.model import Network

DATA = ["--synth-k", "3", "--synth-d", "10", "--synth-n", "300", "--synth-seed", "2"]
TRAIN_DATA = DATA + ["--limit", "200"]
TEST_DATA = DATA + ["--start", "200"]
FAST = ["--hidden", "12", "--epochs", "4", "--lr", "0.01", "--batch-size", "32"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["train", *TRAIN_DATA, *FAST, "--objective", "sdp_dual", "--lam", "0.005",
                 "--out", str(root / "train")]) == 0
    weights = str(root / "train" / "network.certnet")
    assert main(["certify", *TEST_DATA, "--weights", weights, "--epsilons", "0,0.05,0.1",
                 "--dual-steps", "100", "--out", str(root / "cert")]) == 0
    assert main(["attack", *TEST_DATA, "--weights", weights, "--epsilons", "0,0.05,0.1",
                 "--iterations", "10", "--restarts", "2", "--out", str(root / "att")]) == 0
    return root


def report_args(run, cert=None):
    return ["report", *TEST_DATA, "--weights", str(run / "train" / "network.certnet"),
            "--certificate", str(cert or run / "cert" / "certificate.json"),
            "--attack-csv", str(run / "att" / "attack.csv")]


# ---------------------------------------------------------------- config


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nhidden = 32  # trailing\n\nobjective=normal\n")
    assert parse_config(p) == {"hidden": ("32", 2), "objective": ("normal", 4)}


@pytest.mark.parametrize("text, line", [
    ("hidden = 3\nno equals sign\n", 2),
    ("hidden = 3\nhidden = 4\n", 2),
    ("= 3\n", 1),
])
def test_config_syntax_errors_name_the_line(tmp_path, text, line):
    p = tmp_path / "c.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError) as info:
        parse_config(p)
    assert info.value.line == line
    assert f":{line}:" in str(info.value)


@pytest.mark.parametrize("text", ["synth_k = 3\nwarp = 9\n", "synth_k = 3\nhidden = many\n"])
def test_bad_keys_and_values_exit_1(tmp_path, capsys, text):
    p = tmp_path / "c.cfg"
    p.write_text(text)
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert ":2:" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_flags_override_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("synth_k = 2\nsynth_d = 3\nsynth_n = 20\nobjective = normal\nhidden = 4\n"
                 "epochs = 50\n")
    assert main(["train", "--config", str(p), "--epochs", "2", "--out", str(tmp_path / "o")]) == 0
    assert len(read_csv(tmp_path / "o" / "train_log.csv")) == 2


def test_missing_required_and_bad_grid(tmp_path):
    assert main(["certify", *DATA, "--out", str(tmp_path / "o")]) == 1
    assert main(["attack", *DATA, "--weights", "w", "--epsilons", "0.1,0.0",
                 "--out", str(tmp_path / "o")]) == 1


def test_usage_error_from_argparse():
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code != 0


# ---------------------------------------------------------------- train


def test_missing_dataset_leaves_no_outputs(tmp_path):
    out = tmp_path / "o"
    code = main(["train", "--images", str(tmp_path / "nope"), "--labels", str(tmp_path / "nope2"),
                 "--out", str(out)])
    assert code == 1
    assert not out.exists()


def test_corrupt_dataset_exits_1(tmp_path):
    (tmp_path / "img").write_bytes(b"\x00\x00\x08\x03")
    (tmp_path / "lab").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x00")
    assert main(["train", "--images", str(tmp_path / "img"), "--labels", str(tmp_path / "lab"),
                 "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_train_outputs(run):
    files = sorted(p.name for p in (run / "train").iterdir())
    assert files == ["certificate.json", "checkpoint.npz", "network.certnet", "train_log.csv"]
    cert = bounds.DualCertificate.load(run / "train" / "certificate.json")
    cert.check(Network.load(run / "train" / "network.certnet"))


def test_normal_training_fits_blobs(tmp_path):
    assert main(["train", *TRAIN_DATA, *FAST, "--objective", "normal", "--epochs", "10",
                 "--out", str(tmp_path / "n")]) == 0
    assert float(read_csv(tmp_path / "n" / "train_log.csv")[-1]["clean_error"]) == 0.0
    assert not (tmp_path / "n" / "certificate.json").exists()


def test_lambda_zero_log_matches_normal(tmp_path):
    main(["train", *TRAIN_DATA, *FAST, "--objective", "normal", "--out", str(tmp_path / "a")])
    main(["train", *TRAIN_DATA, *FAST, "--objective", "sdp_dual", "--lam", "0",
          "--out", str(tmp_path / "b")])
    assert ((tmp_path / "a" / "train_log.csv").read_bytes()
            == (tmp_path / "b" / "train_log.csv").read_bytes())


def test_divergence_exits_2(tmp_path):
    with np.errstate(all="ignore"):
        code = main(["train", *TRAIN_DATA, "--objective", "normal", "--hidden", "4",
                     "--epochs", "2", "--lr", "1e200", "--loss", "cross_entropy",
                     "--out", str(tmp_path / "o")])
    assert code == 2
    assert not (tmp_path / "o").exists()


# ---------------------------------------------------------------- certify


def test_bounds_csv(run):
    rows = read_csv(run / "cert" / "bounds.csv")
    assert [float(r["epsilon"]) for r in rows] == [0.0, 0.05, 0.1]
    zero = rows[0]
    assert zero["sdp_error"] == zero["spectral_error"] == zero["frobenius_error"] \
        == zero["clean_error"]
    for r in rows:
        assert float(r["spectral_error"]) <= float(r["frobenius_error"])


def test_certify_from_existing_certificate(run, tmp_path):
    weights = str(run / "train" / "network.certnet")
    assert main(["certify", *TEST_DATA, "--weights", weights, "--dual-steps", "0",
                 "--certificate", str(run / "train" / "certificate.json"),
                 "--out", str(tmp_path / "c")]) == 0
    trained = json.loads((run / "train" / "certificate.json").read_text())
    rescored = json.loads((tmp_path / "c" / "certificate.json").read_text())
    assert [p["c"] for p in trained["pairs"]] == [p["c"] for p in rescored["pairs"]]


def test_stale_certificate_exits_2(run, tmp_path):
    other = tmp_path / "other.certnet"
    net = Network.load(run / "train" / "network.certnet")
    net.replace(W=net.W * 1.01).save(other)
    assert main(["certify", *TEST_DATA, "--weights", str(other),
                 "--certificate", str(run / "train" / "certificate.json"),
                 "--out", str(tmp_path / "c")]) == 2


# ---------------------------------------------------------------- attack


def test_attack_outputs(run):
    rows = read_csv(run / "att" / "attack.csv")
    summary = json.loads((run / "att" / "attack_summary.json").read_text())
    by = {(r["attack"], r["epsilon"]): r["attack_error"]
          for r in [{**x, "epsilon": str(x["epsilon"])} for x in summary["results"]]}
    assert by[("fgsm", "0.0")] == by[("pgd", "0.0")] == summary["results"][0]["clean_error"]
    for eps in ("0.0", "0.05", "0.1"):
        assert by[("fgsm", eps)] <= by[("pgd", eps)]
    assert len(rows) == 2 * 3 * 100
    assert summary["weight_hash"] == json.loads(
        (run / "train" / "certificate.json").read_text())["weight_hash"]


def test_unknown_attack_exits_1(run, tmp_path):
    assert main(["attack", *TEST_DATA, "--weights", str(run / "train" / "network.certnet"),
                 "--attacks", "cw", "--out", str(tmp_path / "a")]) == 1


# ---------------------------------------------------------------- report


def test_consistent_report(run, tmp_path, capsys):
    assert main([*report_args(run), "--out", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "certified" in out and "0.100" in out
    rows = read_csv(tmp_path / "r" / "report.csv")
    assert len(rows) == 3
    for r in rows:
        assert float(r["attack_error"]) <= float(r["certified_error"])
        assert r["violations"] == "0"


def test_tampered_certificate_is_an_integrity_failure(run, tmp_path, capsys):
    doc = json.loads((run / "cert" / "certificate.json").read_text())
    for p in doc["pairs"]:
        p["dual_value"] = 0.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(report_args(run, bad)) == 2
    assert "INTEGRITY FAILURE" in capsys.readouterr().err


def test_sandwich_catches_undercut_values(run):
    # independent of the recomputation check: margins below the attack are flagged
    net = Network.load(run / "train" / "network.certnet")
    cert = bounds.DualCertificate.load(run / "cert" / "certificate.json")
    for p in cert.pairs.values():
        p.value = 0.0
    ds = synth_blobs(3, 10, 300, seed=2).subset(slice(200, None))
    _, problems = build_report(net, ds, cert, read_attack_csv(run / "att" / "attack.csv"), "pgd")
    assert problems


def test_hash_mismatch_refused(run, tmp_path):
    doc = json.loads((run / "cert" / "certificate.json").read_text())
    doc["weight_hash"] = "0" * 64
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(report_args(run, bad)) == 2


def test_report_on_different_data_refused(run):
    args = report_args(run)
    args[args.index("--start") + 1] = "150"
    assert main(args) == 2
