import numpy as np
import pytest

from ntlprofile.config import ConfigError
from ntlprofile.evaluate import roc_auc
from ntlprofile.features import featurize_window
from ntlprofile.ingest import Label, parse_fleet, slide_windows
from ntlprofile.synth import AnomalyKind, SynthConfig, generate_fleet, read_truth, regime_mask, write_fleet


@pytest.fixture(scope="module")
def fleet():
    return generate_fleet(SynthConfig(seed=3, n_normal=12, n_ntl=18, n_unlabeled=10, days=30))


def _tables(customer):
    return [featurize_window(w, customer.series.meta) for w in slide_windows(customer.series)]


def test_fleet_counts_and_labels(fleet):
    metas = [c.series.meta.label for c in fleet]
    assert metas.count(Label.NORMAL) == 12 and metas.count(Label.NTL) == 18 and metas.count(Label.UNLABELED) == 10
    for c in fleet:
        assert (c.kind is AnomalyKind.NONE) == (c.truth is Label.NORMAL)
        if c.series.meta.label is not Label.UNLABELED:
            assert c.series.meta.label is c.truth
    assert len({c.series.meta.customer_id for c in fleet}) == len(fleet)


def test_normal_windows_are_balanced(fleet):
    for c in fleet:
        if c.truth is Label.NORMAL:
            for t in _tables(c):
                assert np.nanmedian(t["current_ud"]) < 0.1
                assert np.nanmedian(t["voltage_deviation"]) < 0.05


def test_normal_power_is_self_consistent(fleet):
    for c in fleet:
        if c.truth is not Label.NORMAL:
            continue
        v = c.series.values
        expected = (v[:, 0:3] * v[:, 3:6]).sum(axis=1) * v[:, 7] / 1000
        ok = np.abs(v[:, 6] - expected) <= 0.1 * np.abs(expected)
        valid = ~np.isnan(expected) & ~np.isnan(v[:, 6])
        assert ok[valid].mean() >= 0.9


def test_theft_windows_show_unit_pf_and_no_power():
    cfg = SynthConfig(seed=1, n_normal=0, n_ntl=6, n_unlabeled=0, days=30, mix_phase_voltage_drop=0, mix_persistent_unbalance=0)
    for c in generate_fleet(cfg):
        assert c.kind is AnomalyKind.THEFT_ZERO_POWER
        for w in slide_windows(c.series):
            t = featurize_window(w, c.series.meta)
            in_regime = c.regime[np.searchsorted(c.series.timestamps, w.timestamps)]
            hit = (t["power_factor"] > 0.95) & (t["p_norm"] < 0.05)
            # rows inside the anomaly regime carry the signature
            assert hit[in_regime].mean() >= 0.6


def test_regimes_last_at_least_two_days():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(24 * 10, 24 * 90))
        mask = regime_mask(n, rng)
        edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
        starts, ends = edges[::2], edges[1::2]
        for s, e in zip(starts, ends):
            if s > 0 and e < n:  # blocks cut by the series boundary are partial views
                assert e - s >= 48
        assert mask.mean() > 0.5


def _hand_score(table):
    vd = np.nanmedian(table["voltage_deviation"]) / 0.1
    ud = np.nanmedian(table["current_ud"]) / 0.1
    theft = np.nanmean((table["power_factor"] > 0.95) & (table["p_norm"] < 0.05)) * 4
    return max(vd, ud, theft)


def test_hand_rule_separates_classes(fleet):
    scores, truth = [], []
    for c in fleet:
        for t in _tables(c):
            scores.append(_hand_score(t))
            truth.append(int(c.truth is Label.NTL))
    assert roc_auc(scores, truth).auc >= 0.95


def test_regeneration_is_byte_identical(tmp_path):
    cfg = SynthConfig(seed=9, n_normal=2, n_ntl=2, n_unlabeled=2, days=12)
    a = write_fleet(generate_fleet(cfg), tmp_path / "a")
    b = write_fleet(generate_fleet(cfg), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    other = write_fleet(generate_fleet(SynthConfig(seed=10, n_normal=2, n_ntl=2, n_unlabeled=2, days=12)), tmp_path / "c")
    assert other["telemetry"].read_bytes() != a["telemetry"].read_bytes()


def test_written_fleet_parses_back(tmp_path):
    fleet = generate_fleet(SynthConfig(seed=2, n_normal=2, n_ntl=1, n_unlabeled=1, days=12))
    paths = write_fleet(fleet, tmp_path)
    parsed = parse_fleet(paths["telemetry"], paths["meta"])
    assert [s.meta.customer_id for s in parsed] == [c.series.meta.customer_id for c in fleet]
    for s, c in zip(parsed, fleet):
        assert np.array_equal(s.values, c.series.values, equal_nan=True)
    truth = read_truth(paths["truth"])
    assert truth == {c.series.meta.customer_id: c.truth for c in fleet}
    header = paths["truth"].read_text().splitlines()[0]
    assert header == "customer_id,label,anomaly_kind"


def test_config_validation_and_text_roundtrip():
    cfg = SynthConfig(seed=4, days=20)
    assert SynthConfig.from_text(cfg.to_text()) == cfg
    for bad in (dict(n_ntl=-1), dict(dropout=1.5), dict(mix_phase_voltage_drop=0, mix_theft_zero_power=0, mix_persistent_unbalance=0)):
        with pytest.raises(ConfigError):
            SynthConfig(**bad)
    with pytest.raises(ConfigError):
        SynthConfig.from_text("colour=blue\n")
