import csv
import hashlib
import json

import pytest

from pfmce.cli import main
from pfmce.dataset import read_dataset
from pfmce.numeric import load_weights

SMALL = """\
[channel]
n_t = 1
k = 12
n_slots = 4
n_trajectories = 6
calibration_trajectories = 4
speeds_kmh = 30, 90

[pfm]
n_layers = 1
d_model = 16
n_heads = 2
patch_len = 8

[vit]
n_layers = 1
d_model = 16
n_heads = 2
d_ffn = 16
dec_channels = 4

[train]
epochs = 2
batch_size = 6
lr_adapt = 1e-3
lr_phase1 = 1e-3

[eval]
snrs_db = 10
speeds_kmh = 30
patterns = 2P
n_trajectories = 2
"""


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.ini").write_text(SMALL)
    ini = str(d / "small.ini")
    assert main(["gen", "--config", ini, "--out", str(d / "data.chds"), "--seed", "4"]) == 0
    for stage in ("adapt", "phase1", "phase2"):
        assert main(["train", "--config", ini, "--data", str(d / "data.chds"), "--stage", stage, "--out", str(d / f"{stage}.pfmw")]) == 0
    return d, ini


def test_gen_writes_dataset_bank_and_config(run, capsys):
    d, _ = run
    ds = read_dataset(d / "data.chds")
    assert len(ds) == 6 * 3
    assert (d / "data.chds.bank").exists() and (d / "data.chds.ini").exists()
    assert "seed = 4" in (d / "data.chds.ini").read_text()


def test_gen_record_count_flags(tmp_path, capsys):
    out = tmp_path / "g.chds"
    assert main(["gen", "--out", str(out), "--slots", "10", "--trajectories", "100", "--set", "channel.n_t=1", "--set", "channel.k=12", "--set", "channel.calibration_trajectories=2"]) == 0
    assert "records 900" in capsys.readouterr().out
    assert len(read_dataset(out)) == 900


def test_gen_is_deterministic(run, tmp_path):
    d, ini = run
    again = tmp_path / "again.chds"
    assert main(["gen", "--config", ini, "--out", str(again), "--seed", "4"]) == 0
    assert sha(again) == sha(d / "data.chds")
    assert sha(str(again) + ".bank") == sha(str(d / "data.chds") + ".bank")


def test_train_outputs(run):
    d, _ = run
    for stage in ("adapt", "phase1", "phase2"):
        w = load_weights(d / f"{stage}.pfmw")
        assert any(n.startswith("fusion/") for n in w) and any(n.startswith("vit/") for n in w)
        rows = list(csv.reader(open(d / f"{stage}.loss.csv")))
        assert len(rows) == 1 + 2
        assert (d / f"{stage}.ini").read_text().startswith("# digest ")
    assert open(d / "adapt.pfmw", "rb").read(5) == b"PFMW1"


def test_train_is_deterministic(run, tmp_path):
    d, ini = run
    out = tmp_path / "adapt.pfmw"
    assert main(["train", "--config", ini, "--data", str(d / "data.chds"), "--stage", "adapt", "--out", str(out)]) == 0
    assert sha(out) == sha(d / "adapt.pfmw")


def test_missing_predecessor_exits_3(run, tmp_path):
    d, ini = run
    code = main(["train", "--config", ini, "--data", str(d / "data.chds"), "--stage", "phase1", "--out", str(tmp_path / "phase1.pfmw")])
    assert code == 3
    code = main(["train", "--config", ini, "--data", str(tmp_path / "none.chds"), "--stage", "adapt", "--out", str(tmp_path / "a.pfmw")])
    assert code == 3


def test_config_errors_exit_2(run, tmp_path):
    d, ini = run
    assert main(["gen", "--config", ini, "--out", str(tmp_path / "x.chds"), "--set", "channel.bogus=1"]) == 2
    assert main(["eval", "--config", ini, "--out", str(tmp_path / "e.csv"), "--methods", "lmmse,magic"]) == 2
    assert main(["train", "--config", ini, "--data", str(d / "data.chds"), "--stage", "adapt", "--out", str(tmp_path / "a.pfmw"), "--set", "channel.k=24"]) == 2
    with pytest.raises(SystemExit) as info:
        main(["train", "--stage", "phase9"])
    assert info.value.code == 2


def test_eval_classical_needs_no_weights(run, tmp_path, capsys):
    d, ini = run
    out = tmp_path / "e.csv"
    assert main(["eval", "--config", ini, "--out", str(out), "--methods", "lmmse,linear", "--bank", str(d / "data.chds.bank")]) == 0
    rows = list(csv.DictReader(open(out)))
    assert {r["method"] for r in rows} == {"lmmse", "linear"}
    assert json.loads(out.with_suffix(".json").read_text())["config_digest"]
    assert main(["eval", "--config", ini, "--out", str(out), "--methods", "pfm-ce"]) == 3


def test_eval_neural_and_report(run, tmp_path):
    d, ini = run
    out = tmp_path / "all.csv"
    assert main(["eval", "--config", ini, "--out", str(out), "--weights", str(d / "phase2.pfmw"), "--bank", str(d / "data.chds.bank")]) == 0
    methods = {r["method"] for r in csv.DictReader(open(out))}
    assert methods == {"lmmse", "linear", "vit", "pfm-ce"}
    rep = tmp_path / "report"
    assert main(["report", str(out), "--out", str(rep)]) == 0
    snr = list(csv.reader(open(rep / "snr_table.csv")))
    assert snr[0][-1] == "snr_10" and len(snr) == 1 + 4
    slots = list(csv.reader(open(rep / "slot_table.csv")))
    assert slots[0][-1] == "slot_4" and len(slots) == 1 + 4
    assert main(["report", str(tmp_path / "missing.csv"), "--out", str(rep)]) == 3
