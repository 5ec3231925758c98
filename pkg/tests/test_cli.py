import csv
import hashlib
import json

import numpy as np
import pytest

from ntlprofile.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, MANIFEST_NAME, main
from ntlprofile.ingest import HOUR, CustomerMeta, CustomerSeries, Label, parse_timestamp, write_meta, write_telemetry
from ntlprofile.profile import load_super_image

SMALL_SYNTH = "n_normal=3\nn_ntl=3\nn_unlabeled=2\ndays=20\n"
TINY_TRAIN = "iterations=2\nbatch_size=8\nvalidate_every=1\ncalibration_samples=8\n"


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.cfg").write_text(SMALL_SYNTH)
    (root / "train.cfg").write_text(TINY_TRAIN)
    assert main(["synth", "--config", str(root / "synth.cfg"), "--out", str(root / "fleet"), "--seed", "5"]) == 0
    fleet = root / "fleet"
    args = ["render", "--telemetry", str(fleet / "telemetry.csv"), "--meta", str(fleet / "meta.csv"), "--out", str(root / "r")]
    assert main(args + ["--png", "--png-limit", "2"]) == 0
    train = ["train", "--rendered", str(root / "r"), "--truth", str(fleet / "truth.csv"), "--config", str(root / "train.cfg")]
    assert main(train + ["--out", str(root / "m"), "--train-fraction", "0.5", "--no-figures"]) == 0
    return root


def test_synth_writes_csvs_and_manifest(workspace):
    fleet = workspace / "fleet"
    assert {p.name for p in fleet.iterdir()} == {"telemetry.csv", "meta.csv", "truth.csv", MANIFEST_NAME}
    manifest = json.loads((fleet / MANIFEST_NAME).read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 5 and manifest["config"]["n_ntl"] == 3
    assert {"version", "duration_s", "inputs", "outputs"} <= set(manifest)


def test_synth_same_seed_same_hashes_and_force(workspace, tmp_path):
    cfg = str(workspace / "synth.cfg")
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    for name in ("telemetry.csv", "meta.csv", "truth.csv"):
        assert _digest(tmp_path / "a" / name) == _digest(workspace / "fleet" / name)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"]) == EXIT_IO
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5", "--force"]) == 0


def test_bad_config_key_exits_2_with_key_name(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("n_normal=3\nwibble=1\n")
    assert main(["synth", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "wibble" in capsys.readouterr().err
    (tmp_path / "bad2.cfg").write_text("batch_size=30\n")
    code = main(["train", "--rendered", str(tmp_path), "--truth", str(tmp_path / "t.csv"), "--config", str(tmp_path / "bad2.cfg"), "--out", str(tmp_path / "m")])
    assert code == EXIT_CONFIG


def test_render_writes_one_file_per_window_and_pngs(workspace):
    rendered = workspace / "r"
    files = sorted(rendered.glob("*.ntlp"))
    manifest = json.loads((rendered / MANIFEST_NAME).read_text())
    assert len(files) == manifest["config"]["windows"] > 0
    # 20 days with a 5-day stride give 3 windows per customer, minus incomplete ones
    assert len(files) <= 8 * 3
    assert all(f.read_bytes()[:5] == b"NTLP1" for f in files)
    assert len(list((rendered / "png").glob("*_ch*.png"))) == 2 * 7
    assert len(list((rendered / "png").glob("*_panel.png"))) == 2
    im = load_super_image(files[0])
    assert im.channels.shape == (7, 50, 50)


def test_render_missing_input_exits_1(tmp_path):
    args = ["render", "--telemetry", str(tmp_path / "none.csv"), "--meta", str(tmp_path / "m.csv"), "--out", str(tmp_path / "r")]
    assert main(args) == EXIT_IO
    assert main(args[:-2] + ["--out", str(tmp_path / "r"), "--sigma", "0"]) == EXIT_CONFIG


def test_train_outputs(workspace):
    out = workspace / "m"
    for name in ("model.manifest", "model.bin", "loss.csv", "val.csv", "split.csv", MANIFEST_NAME):
        assert (out / name).exists(), name
    loss = (out / "loss.csv").read_text().splitlines()
    assert loss[0] == "step,xent,consistency,contrastive,wu,lr" and len(loss) == 3
    assert (out / "val.csv").read_text().splitlines()[0] == "step,precision_ntl,recall_ntl,f1_ntl,auc"
    roles = {row["role"] for row in csv.DictReader(open(out / "split.csv"))}
    assert roles == {"train", "validation", "unlabeled"}
    manifest = json.loads((out / MANIFEST_NAME).read_text())
    assert manifest["config"]["iterations"] == 2 and manifest["config"]["labeled_count"] > 0


def test_train_is_deterministic_and_ablation_flags_compose(workspace, tmp_path):
    fleet = workspace / "fleet"
    base = ["train", "--rendered", str(workspace / "r"), "--truth", str(fleet / "truth.csv"), "--config", str(workspace / "train.cfg"), "--train-fraction", "0.5", "--no-figures"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    for name in ("loss.csv", "val.csv", "model.bin", "model.manifest", "split.csv"):
        assert _digest(tmp_path / "a" / name) == _digest(workspace / "m" / name), name
    assert main(base + ["--out", str(tmp_path / "b"), "--no-semi", "--no-triplet", "--no-roi", "--labeled-count", "4"]) == 0
    manifest = json.loads((tmp_path / "b" / MANIFEST_NAME).read_text())
    assert manifest["config"]["labeled_count"] == 4
    assert not manifest["config"]["semi_supervised"] and not manifest["config"]["roi_pooling"]
    rows = list(csv.DictReader(open(tmp_path / "b" / "loss.csv")))
    assert all(float(r["consistency"]) == 0 and float(r["contrastive"]) == 0 for r in rows)


def test_train_missing_truth_exits_1(workspace, tmp_path):
    args = ["train", "--rendered", str(workspace / "r"), "--truth", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "m")]
    assert main(args) == EXIT_IO


def test_evaluate_report_and_curves(workspace, tmp_path):
    fleet = workspace / "fleet"
    args = ["evaluate", "--checkpoint", str(workspace / "m" / "model"), "--rendered", str(workspace / "r"), "--truth", str(fleet / "truth.csv"), "--out", str(tmp_path)]
    assert main(args + ["--per-customer"]) == 0
    assert main(args + ["--split", str(workspace / "m" / "split.csv"), "--no-figures"]) == 0
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert {"counts", "ntl", "normal", "auc", "config_hash"} <= set(first) and "per_customer" in first
    assert (tmp_path / "roc.csv").read_text().startswith("threshold,fpr,tpr\n")
    assert (tmp_path / "pr.csv").read_text().startswith("threshold,precision,recall\n")
    assert (tmp_path / "roc.png").read_bytes()[:4] == b"\x89PNG"
    assert main(args[:-2] + ["--out", str(tmp_path), "--threshold", "2"]) == EXIT_CONFIG


def _one_customer(tmp_path, days):
    n = days * 24
    ts = parse_timestamp("2024-02-01T00:00:00Z") + HOUR * np.arange(n)
    rng = np.random.default_rng(0)
    values = np.column_stack([220 + rng.normal(0, 1, (n, 3)), 5 + rng.random((n, 3)), 3 + rng.random(n), 0.9 + 0.05 * rng.random(n)])
    series = CustomerSeries(CustomerMeta("solo", 220.0, 10.0, Label.UNLABELED), ts, values)
    with open(tmp_path / "t.csv", "w", newline="") as fh:
        write_telemetry([series], fh)
    with open(tmp_path / "m.csv", "w", newline="") as fh:
        write_meta([series.meta], fh)


def test_detect_ten_days_gives_one_row(workspace, tmp_path):
    _one_customer(tmp_path, 10)
    out = tmp_path / "scores.csv"
    args = ["detect", "--checkpoint", str(workspace / "m" / "model"), "--telemetry", str(tmp_path / "t.csv"), "--meta", str(tmp_path / "m.csv"), "--out", str(out)]
    assert main(args) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["customer_id", "window_start", "ntl_score"]
    assert len(rows) == 2 and rows[1][:2] == ["solo", "2024-02-01T00:00:00Z"] and 0 <= float(rows[1][2]) <= 1
    assert (tmp_path / "scores.csv.manifest.json").exists()


def test_detect_empty_telemetry(workspace, tmp_path):
    (tmp_path / "t.csv").write_text("")
    (tmp_path / "m.csv").write_text("customer_id,rated_voltage,contracted_power,label\nA,220,10,unlabeled\n")
    out = tmp_path / "scores.csv"
    args = ["detect", "--checkpoint", str(workspace / "m" / "model"), "--telemetry", str(tmp_path / "t.csv"), "--meta", str(tmp_path / "m.csv"), "--out", str(out)]
    assert main(args) == 0
    assert out.read_text() == "customer_id,window_start,ntl_score\n"


def test_export_embeddings(workspace, tmp_path):
    out = tmp_path / "emb.csv"
    args = ["export-embeddings", "--checkpoint", str(workspace / "m" / "model"), "--rendered", str(workspace / "r"), "--out", str(out)]
    assert main(args) == 0
    rows = list(csv.reader(open(out)))
    header = rows[0]
    assert header[:2] == ["customer_id", "window_start"] and header[-1] == "label" and len(header) == 4032 + 3
    assert len(rows) - 1 == len(list((workspace / "r").glob("*.ntlp")))
    assert {r[-1] for r in rows[1:]} <= {"normal", "ntl", "unlabeled"} and "unlabeled" in {r[-1] for r in rows[1:]}
    assert main(args[:-2] + ["--truth", str(workspace / "fleet" / "truth.csv"), "--out", str(out)]) == 0
    labels = {r[-1] for r in list(csv.reader(open(out)))[1:]}
    assert "unlabeled" not in labels


def test_missing_checkpoint_exits_1(tmp_path):
    args = ["export-embeddings", "--checkpoint", str(tmp_path / "none"), "--rendered", str(tmp_path), "--out", str(tmp_path / "e.csv")]
    assert main(args) == EXIT_IO


def test_help_lists_formats(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    assert "exit codes" in text.lower() and "telemetry CSV" in text
