"""Acceptance criteria, one verdict line each (see the summary at the end of the run).

The training benchmarks are marked ``slow``; deselect them with ``-m "not slow"``.
"""

import json
import time

import numpy as np
import pytest

import test_evaluate as evaluate_checks
import test_features as feature_checks
import test_netcore as netcore_checks
from ntlprofile.cli import main
from ntlprofile.evaluate import evaluate_scores
from ntlprofile.ingest import Label, slide_windows
from ntlprofile.netcore import InferenceNet, NetConfig, ParamSet
from ntlprofile.netcore.model import build_convnet, shape_trace
from ntlprofile.pipeline import render_series
from ntlprofile.profile import ChannelSpec, render_channel
from ntlprofile.synth import SynthConfig, generate_fleet
from ntlprofile.trainer import SampleSet, TrainConfig, ema_update, labeled_subset, predict, split_by_customer, train_loop
from test_ingest import hourly_series
from verdicts import record


def _verdict(name, fn):
    """Run ``fn`` (which asserts and returns a detail string) and record the outcome."""
    try:
        detail = fn()
    except AssertionError as exc:
        record(name, False, str(exc).splitlines()[0] if str(exc) else "assertion failed")
        raise
    record(name, True, detail or "")


# -- KDE -----------------------------------------------------------------------------

def _kde_oracle(points, spec, sigma):
    """Per-pixel sum of Gaussian kernels over all points, one pixel at a time."""
    px = (np.clip(points[:, 0], *spec.x_range) - spec.x_range[0]) / (spec.x_range[1] - spec.x_range[0]) * 49
    py = (np.clip(points[:, 1], *spec.y_range) - spec.y_range[0]) / (spec.y_range[1] - spec.y_range[0]) * 49
    out = np.zeros((50, 50))
    for r in range(50):
        for c in range(50):
            out[r, c] = np.exp(-((c - px) ** 2 + (r - py) ** 2) / (2 * sigma * sigma)).sum()
    return out


def test_kde_oracle_criterion():
    def check():
        rng = np.random.default_rng(2024)
        spec = ChannelSpec(0, "x", "y", (0.0, 1.2), (0.0, 1.0))
        worst, spent = 0.0, 0.0
        for _ in range(100):
            n = int(rng.integers(1, 501))
            pts = np.column_stack([rng.uniform(-0.2, 1.4, n), rng.uniform(-0.2, 1.2, n)])
            sigma = float(rng.uniform(0.5, 3.0))
            t = time.perf_counter()
            grid = render_channel(pts, spec, sigma)
            spent += time.perf_counter() - t
            worst = max(worst, float(np.abs(grid - _kde_oracle(pts, spec, sigma)).max()))
        assert worst <= 1e-9, f"max abs error {worst:.3g}"
        assert spent < 10, f"render time {spent:.2f}s"
        return f"max abs error {worst:.2e}, render time {spent:.2f}s for 100 sets"

    _verdict("KDE oracle (100 sets, 1-500 points, 1e-9, < 10 s)", check)


# -- gradients ---------------------------------------------------------------------------

def test_gradient_integrity_criterion():
    def check():
        t = time.perf_counter()
        seeds = range(5)
        for kind in sorted(netcore_checks.LAYER_CASES):
            for seed in seeds:
                netcore_checks.test_layer_gradients_match_finite_differences(kind, seed)
        for seed in seeds:
            netcore_checks.test_roi_pool_gradient(seed)
            netcore_checks.test_l2_normalize_and_cross_entropy_gradients(seed)
            netcore_checks.test_reduced_network_end_to_end_gradient(seed)
        spent = time.perf_counter() - t
        assert spent < 120, f"runtime {spent:.1f}s"
        kinds = len(netcore_checks.LAYER_CASES) + 2
        return f"{kinds} layer kinds + reduced net x 5 seeds, rel. error <= 1e-4, {spent:.1f}s"

    _verdict("Gradient integrity (float64 finite differences, >= 5 seeds, < 2 min)", check)


# -- features ----------------------------------------------------------------------------

def test_feature_properties_criterion():
    def check():
        feature_checks.test_ud_scale_invariance_10k()
        feature_checks.test_vd_zero_above_rated_10k()
        feature_checks.test_balanced_phases_give_zero_ud_10k()
        feature_checks.test_resistive_balanced_load_gives_unit_calc_pf_10k()
        return "UD scale invariance 1e-12, VD = 0 above rated, balanced UD = 0, resistive calc_pf = 1 (1e-9); 10k cases each"

    _verdict("Feature formula properties (10k random cases)", check)


# -- metrics --------------------------------------------------------------------------------

def test_metric_oracles_criterion():
    def check():
        evaluate_checks.test_metric_oracles_on_1000_sets()
        evaluate_checks.test_separable_and_constant_auc()
        return "1000 sets match recount; trapezoid = rank AUC within 1e-9; separable 1.0; constant 0.5"

    _verdict("Metric oracles", check)


# -- EMA --------------------------------------------------------------------------------------

def test_ema_closed_form_criterion():
    def check():
        rng = np.random.default_rng(5)
        worst = 0.0
        for alpha in (0.0, 0.5, 0.9, 0.99, 0.999):
            for steps in (1, 10, 100, 1000):
                theta = rng.normal(size=20)
                start = rng.normal(size=20)
                student, teacher = ParamSet(), ParamSet()
                student.add("w", theta)
                teacher.add("w", start.copy())
                for _ in range(steps):
                    ema_update(teacher, student, alpha)
                expected = alpha**steps * start + (1 - alpha**steps) * theta
                worst = max(worst, float(np.abs(teacher["w"] - expected).max()))
        assert worst <= 1e-6, f"max deviation {worst:.3g}"
        return f"max deviation {worst:.2e} over 20 (alpha, t) pairs"

    _verdict("EMA closed form (1e-6)", check)


# -- shapes --------------------------------------------------------------------------------

def test_shape_and_window_criterion():
    def check():
        trace = shape_trace(build_convnet(NetConfig()), (1, 50, 50))
        sizes = []
        for s in trace:
            if not sizes or sizes[-1] != s[1]:
                sizes.append(s[1])
        assert sizes == [50, 25, 12, 6], sizes
        assert InferenceNet().cfg.embedding_dim == 4032
        windows = slide_windows(hourly_series(30))
        assert [len(w) for w in windows] == [240] * 5
        return "spatial trace 50->25->12->6; 30 days hourly -> 5 windows of 240"

    _verdict("Shape trace and windowing", check)


# -- determinism --------------------------------------------------------------------------

def test_determinism_criterion(tmp_path):
    def check():
        (tmp_path / "s.cfg").write_text("n_normal=3\nn_ntl=3\nn_unlabeled=3\ndays=20\n")
        (tmp_path / "t.cfg").write_text("iterations=4\nbatch_size=8\nvalidate_every=2\ncalibration_samples=16\n")
        assert main(["synth", "--config", str(tmp_path / "s.cfg"), "--out", str(tmp_path / "f"), "--seed", "3"]) == 0
        f = tmp_path / "f"
        assert main(["render", "--telemetry", str(f / "telemetry.csv"), "--meta", str(f / "meta.csv"), "--out", str(tmp_path / "r")]) == 0
        outs = []
        for name in ("a", "b"):
            args = ["train", "--rendered", str(tmp_path / "r"), "--truth", str(f / "truth.csv"), "--config", str(tmp_path / "t.cfg")]
            assert main(args + ["--out", str(tmp_path / name), "--seed", "3", "--train-fraction", "0.5", "--no-figures"]) == 0
            outs.append(tmp_path / name)
        files = ("loss.csv", "val.csv", "model.bin", "model.manifest")
        for fname in files:
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), f"{fname} differs"
        return "loss log, validation log and checkpoint bit-identical across two runs"

    _verdict("Determinism (bit-identical logs and checkpoints)", check)


# -- end to end ----------------------------------------------------------------------------

E2E_TRAIN = "iterations=200\nbatch_size=16\nvalidate_every=200\n"
E2E_BUDGET_S = 15 * 60


@pytest.mark.slow
def test_end_to_end_criterion(tmp_path):
    def check():
        t = time.perf_counter()
        fleet, rendered, model, report = (tmp_path / n for n in ("fleet", "r", "m", "eval"))
        assert main(["synth", "--out", str(fleet), "--seed", "0"]) == 0
        assert main(["render", "--telemetry", str(fleet / "telemetry.csv"), "--meta", str(fleet / "meta.csv"), "--out", str(rendered)]) == 0
        (tmp_path / "train.cfg").write_text(E2E_TRAIN)
        train = ["train", "--rendered", str(rendered), "--truth", str(fleet / "truth.csv"), "--config", str(tmp_path / "train.cfg")]
        assert main(train + ["--out", str(model), "--seed", "0", "--no-figures"]) == 0
        ev = ["evaluate", "--checkpoint", str(model / "model"), "--rendered", str(rendered), "--truth", str(fleet / "truth.csv")]
        assert main(ev + ["--out", str(report), "--split", str(model / "split.csv"), "--role", "validation", "--no-figures"]) == 0
        spent = time.perf_counter() - t
        rep = json.loads((report / "report.jsonl").read_text().splitlines()[-1])
        windows = json.loads((rendered / "run_manifest.json").read_text())["config"]["windows"]
        labeled = json.loads((model / "run_manifest.json").read_text())["config"]["labeled_count"]
        f1, auc = rep["ntl"]["f1"], rep["auc"]
        detail = (
            f"{windows} windows, {labeled} labeled ({labeled / windows:.1%}), {rep['n_samples']} held-out; "
            f"NTL F1 {f1:.3f}, AUC {auc:.4f}, {spent / 60:.1f} min"
        )
        assert f1 >= 0.80 and auc >= 0.90 and spent < E2E_BUDGET_S, detail
        return detail

    _verdict("End-to-end synthetic benchmark (F1 >= 0.80, AUC >= 0.90, < 15 min)", check)


# -- ablation and label budget ------------------------------------------------------------------
# Both sweeps share one larger fleet: the largest budget needs 1600 labeled training windows,
# more than the default fleet holds.

SWEEP_FLEET = SynthConfig(seed=11, n_normal=150, n_ntl=70, n_unlabeled=150)
SWEEP_ITERATIONS = 120
SWEEP_SEEDS = (0, 1, 2)
ABLATION_LABELS = 100
BUDGETS = (100, 400, 1600)


@pytest.fixture(scope="module")
def sweep():
    fleet = generate_fleet(SWEEP_FLEET)
    labels = {c.series.meta.customer_id: (-1 if c.series.meta.label is Label.UNLABELED else c.truth.code) for c in fleet}
    images = render_series([c.series for c in fleet])
    samples = SampleSet.from_images(images, [labels[im.customer_id] for im in images])
    lab = np.flatnonzero(samples.labels >= 0)
    unl = np.flatnonzero(samples.labels < 0)
    tr, te = split_by_customer(samples.subset(lab), 0.7, seed=0)
    train = samples.subset(lab[tr])
    assert len(train) >= max(BUDGETS)
    return {"train": train, "test": samples.subset(lab[te]), "unlabeled": samples.subset(unl), "runs": {}}


def _run(sweep, count, seed, **flags):
    key = (count, seed, tuple(sorted(flags.items())))
    if key not in sweep["runs"]:
        cfg = TrainConfig(iterations=SWEEP_ITERATIONS, batch_size=16, seed=seed, **flags)
        net = InferenceNet()
        labeled = labeled_subset(sweep["train"], count, seed)
        result = train_loop(labeled, sweep["unlabeled"], None, cfg, net)
        scores, _ = predict(net, result.teacher, sweep["test"], cfg.roi_pooling)
        sweep["runs"][key] = evaluate_scores(scores, sweep["test"].labels)
    return sweep["runs"][key]


@pytest.mark.slow
def test_ablation_direction_criterion(sweep):
    def check():
        recall_ok, f1_ok, notes = 0, 0, []
        for seed in SWEEP_SEEDS:
            sup = _run(sweep, ABLATION_LABELS, seed, semi_supervised=False, triplet_loss=False)
            no_trip = _run(sweep, ABLATION_LABELS, seed, triplet_loss=False)
            full = _run(sweep, ABLATION_LABELS, seed)
            recall_ok += sup.ntl.recall <= full.ntl.recall
            f1_ok += full.ntl.f1 >= no_trip.ntl.f1
            notes.append(
                f"seed {seed}: recall sup {sup.ntl.recall:.3f} / semi {full.ntl.recall:.3f}, "
                f"F1 no-triplet {no_trip.ntl.f1:.3f} / full {full.ntl.f1:.3f}"
            )
        detail = f"{ABLATION_LABELS} labeled; " + "; ".join(notes)
        majority = len(SWEEP_SEEDS) // 2 + 1
        assert recall_ok >= majority and f1_ok >= majority, detail
        return detail

    _verdict("Ablation direction (<= 200 labeled, 3-seed majority)", check)


@pytest.mark.slow
def test_label_budget_criterion(sweep):
    def check():
        ok, notes = 0, []
        for seed in SWEEP_SEEDS:
            f1 = [_run(sweep, n, seed).ntl.f1 for n in BUDGETS]
            ok += all(a <= b for a, b in zip(f1, f1[1:]))
            notes.append(f"seed {seed}: " + " / ".join(f"{v:.3f}" for v in f1))
        detail = f"F1 at {BUDGETS} labeled; " + "; ".join(notes)
        assert ok >= len(SWEEP_SEEDS) // 2 + 1, detail
        return detail

    _verdict("Label-budget trend (non-decreasing F1, seed majority)", check)
