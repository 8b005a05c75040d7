import hashlib
import json

import numpy as np
import pytest

from pssp import cli
from pssp.data import write_npy

ARCH = {"multiscale_banks": [[3, 4], [5, 4]], "single_conv": [3, 4], "num_blocks": 2, "fc_window": 5,
        "fc_layers": 1, "fc_width": 16, "residual_connections": True, "residual_projection_depth": 4,
        "dropout_rate": 0.2, "maxnorm_cap": 0.5}


def write_config(path, conditioned=False, iterations=20, rule="copy-prone", **data):
    cfg = {
        "architecture": dict(ARCH, conditioned=conditioned),
        "train": {"base_lr": 0.005, "batch_size": 8, "max_iterations": iterations, "eval_every": 10,
                  "patience": 0},
        "data": {"toy": dict({"seed": 0, "n_proteins": 16, "length": 30, "rule": rule,
                              "val_proteins": 4, "test_proteins": 4}, **data)},
        "decode": {"beam": 3, "blend": 0.45},
        "seed": 0,
    }
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Train an unconditioned and a conditioned toy model once for the module."""
    d = tmp_path_factory.mktemp("cli")
    unc_cfg = write_config(d / "unc.json")
    cond_cfg = write_config(d / "cond.json", conditioned=True)
    assert cli.main(["train", "--config", unc_cfg, "--out", str(d / "unc")]) == 0
    assert cli.main(["train", "--config", cond_cfg, "--out", str(d / "cond")]) == 0
    return d, unc_cfg, cond_cfg


def test_train_outputs(run):
    d, _, _ = run
    for sub in ("unc", "cond"):
        assert (d / sub / "best.ocf").exists() and (d / sub / "learning_curve.png").exists()
        assert (d / sub / "log.csv").read_text().splitlines()[0] == "iter,lr,train_loss,val_q8"


def test_train_is_deterministic(run, tmp_path):
    d, unc_cfg, _ = run
    assert cli.main(["train", "--config", unc_cfg, "--out", str(tmp_path / "again"), "--deterministic"]) == 0
    assert (tmp_path / "again" / "log.csv").read_bytes() == (d / "unc" / "log.csv").read_bytes()
    assert (tmp_path / "again" / "best.ocf").read_bytes() == (d / "unc" / "best.ocf").read_bytes()


def test_seed_flag_changes_run(run, tmp_path):
    _, unc_cfg, _ = run
    cli.main(["train", "--config", unc_cfg, "--out", str(tmp_path / "s1"), "--seed", "1"])
    cli.main(["train", "--config", unc_cfg, "--out", str(tmp_path / "s2"), "--seed", "2"])
    assert (tmp_path / "s1" / "best.ocf").read_bytes() != (tmp_path / "s2" / "best.ocf").read_bytes()


def test_eval_untrained_is_chance(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", rule="local-window", length=100, test_proteins=16)
    out = tmp_path / "rep" / "report.json"
    assert cli.main(["eval", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert abs(report["q8"] - 1 / 8) <= 0.05
    assert sum(map(sum, report["confusion"])) == report["residues"] == 1600
    assert out.with_suffix(".png").exists()


def test_eval_checkpoint_and_round_trip(run, capsys):
    d, unc_cfg, _ = run
    assert cli.main(["eval", "--checkpoint", str(d / "unc" / "best.ocf"), "--config", unc_cfg]) == 0
    first = capsys.readouterr().out
    assert cli.main(["eval", "--checkpoint", str(d / "unc" / "best.ocf"), "--config", unc_cfg]) == 0
    assert capsys.readouterr().out == first


def test_decode_blend_zero_matches_unconditional(run, tmp_path):
    d, unc_cfg, _ = run
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    ck = str(d / "unc" / "best.ocf")
    assert cli.main(["decode", "--checkpoint", ck, "--config", unc_cfg, "--out", str(a)]) == 0
    assert cli.main(["decode", "--checkpoint", ck, "--cond-checkpoint", str(d / "cond" / "best.ocf"),
                     "--blend", "0", "--config", unc_cfg, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert len(lines) == 4 and all(len(line.split("\t")[1]) == 30 for line in lines)


def test_decode_conditional_and_pair(run, tmp_path):
    d, unc_cfg, cond_cfg = run
    outs = []
    for extra in (["--checkpoint", str(d / "cond" / "best.ocf"), "--beam", "2"],
                  ["--checkpoint", str(d / "unc" / "best.ocf"), "--pair-checkpoint", str(d / "unc" / "best.ocf")],
                  ["--checkpoint", str(d / "unc" / "best.ocf"), "--cond-checkpoint", str(d / "cond" / "best.ocf")]):
        path = tmp_path / f"o{len(outs)}.txt"
        assert cli.main(["decode", "--config", unc_cfg, "--out", str(path)] + extra) == 0
        outs.append(path.read_text())
    # an equal-weight pair of one model is that model
    plain = tmp_path / "plain.txt"
    cli.main(["decode", "--config", unc_cfg, "--checkpoint", str(d / "unc" / "best.ocf"), "--out", str(plain)])
    assert outs[1] == plain.read_text()
    # decoding twice gives identical output
    again = tmp_path / "again.txt"
    cli.main(["decode", "--config", unc_cfg, "--out", str(again), "--checkpoint", str(d / "unc" / "best.ocf"),
              "--cond-checkpoint", str(d / "cond" / "best.ocf")])
    assert again.read_text() == outs[2]


def test_decode_input_file(run, tmp_path, capsys):
    d, _, _ = run
    raw = np.zeros((1, 700, 57), np.float32)
    raw[0, :5, 3] = 1
    raw[0, 5:, 21] = 1
    raw[0, :5, 24] = 1
    raw[0, 5:, 30] = 1
    write_npy(tmp_path / "one.npy", raw.reshape(1, -1))
    assert cli.main(["decode", "--checkpoint", str(d / "unc" / "best.ocf"), "--input", str(tmp_path / "one.npy")]) == 0
    ident, digits = capsys.readouterr().out.strip().split("\t")
    assert ident == "protein0" and len(digits) == 5


def test_exit_codes(run, tmp_path, capsys):
    d, unc_cfg, _ = run
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"architecture": dict(ARCH, fc_window=4), "data": {"toy": {}}}))
    assert cli.main(["train", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["decode", "--checkpoint", str(d / "unc" / "best.ocf"), "--config", unc_cfg,
                     "--blend", "1.5"]) == 2
    junk = tmp_path / "junk.ocf"
    junk.write_bytes(b"nope")
    assert cli.main(["decode", "--checkpoint", str(junk), "--config", unc_cfg]) == 4
    diverge = write_config(tmp_path / "div.json")
    cfg = json.loads(open(diverge).read())
    cfg["train"]["base_lr"] = 1e37
    (tmp_path / "div.json").write_text(json.dumps(cfg))
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--config", diverge, "--out", str(tmp_path / "div")]) == 7
    with pytest.raises(SystemExit) as info:
        cli.main(["bogus"])
    assert info.value.code == 2
    assert "error[" in capsys.readouterr().err


def test_inspect(tmp_path, capsys):
    raw = np.zeros((2, 700, 57), np.float32)
    raw[:, :, 21] = 1
    raw[:, :, 30] = 1
    raw[0, :3, 21] = 0
    raw[0, :3, 30] = 0
    raw[0, :3, 5] = 1
    raw[0, :3, 22 + 2] = 1
    write_npy(tmp_path / "d.npy", raw.reshape(2, -1))
    assert cli.main(["inspect", str(tmp_path / "d.npy")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["records"] == 2 and summary["residues"] == 3 and summary["raw_shape"] == [2, 700, 57]
    assert summary["label_counts"]["E"] == 3


def test_inspect_bad_file(tmp_path):
    (tmp_path / "x.npy").write_bytes(b"garbage!")
    assert cli.main(["inspect", str(tmp_path / "x.npy")]) == 4
    assert cli.main(["inspect", str(tmp_path / "absent.npy")]) == 3


def test_gradcheck_table(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "conv1d[w=9]" in out and "FAIL" not in out and "checks passed" in out


# fetch

@pytest.fixture
def mirror(tmp_path):
    src = tmp_path / "mirror"
    src.mkdir()
    files = {"a.npy.gz": b"first file", "b.npy.gz": b"second file"}
    for name, body in files.items():
        (src / name).write_bytes(body)
    manifest = {"url": src.as_uri(), "files": {n: hashlib.sha256(b).hexdigest() for n, b in files.items()}}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path


def test_fetch_good_then_noop(mirror, capsys):
    args = ["fetch", "--manifest", str(mirror / "manifest.json"), "--out", str(mirror / "data")]
    assert cli.main(args) == 0
    assert (mirror / "data" / "a.npy.gz").read_bytes() == b"first file"
    capsys.readouterr()
    assert cli.main(args) == 0
    assert capsys.readouterr().out.count("present, skipping") == 2


def test_fetch_corrupted_byte(mirror):
    (mirror / "mirror" / "b.npy.gz").write_bytes(b"second filf")
    assert cli.main(["fetch", "--manifest", str(mirror / "manifest.json"), "--out", str(mirror / "data")]) == 5
    assert not (mirror / "data" / "b.npy.gz").exists()


def test_fetch_offline(mirror, capsys):
    args = ["fetch", "--manifest", str(mirror / "manifest.json"), "--out", str(mirror / "data"),
            "--url", (mirror / "nowhere").as_uri()]
    assert cli.main(args) == 6
    assert "by hand" in capsys.readouterr().err


def test_data_dir_env(mirror, monkeypatch):
    monkeypatch.setenv("PSSP_DATA_DIR", str(mirror / "envdata"))
    assert cli.main(["fetch", "--manifest", str(mirror / "manifest.json")]) == 0
    assert (mirror / "envdata" / "a.npy.gz").exists()
