import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmlens import ecg
from mmlens.ecg import (LabeledDataset, PipelineConfig, RawRecording, RecordingLoadError, Template,
                        detect_r_peaks, extract_templates, filter_labels, load_recordings, load_templates,
                        normalize_peak, process_recordings, save_templates, split_train_test,
                        synth_generate, synth_recording)


def rec(label, n=3000, rid="r"):
    return RawRecording(rid, np.zeros(n), 300.0, label)


# ---------------------------------------------------------------------------
# loading


def write_dataset(tmp_path, rows):
    rng = np.random.default_rng(0)
    for rid, _ in rows:
        np.savetxt(tmp_path / f"{rid}.txt", rng.standard_normal(900))
    (tmp_path / "REFERENCE.csv").write_text("".join(f"{r},{l}\n" for r, l in rows))
    return tmp_path / "REFERENCE.csv"


def test_load_text_binary_and_mat(tmp_path):
    from scipy.io import savemat

    rows = [("A0001", "N"), ("A0002", "O"), ("A0003", "A")]
    manifest = write_dataset(tmp_path, rows[:1])
    (tmp_path / "A0002.bin").write_bytes(np.arange(-5, 5, dtype="<i2").tobytes())
    (tmp_path / "A0002.fs").write_text("500\n")
    savemat(tmp_path / "A0003.mat", {"val": np.arange(12, dtype=np.int16)[None, :]})
    manifest.write_text("id,label\n" + "".join(f"{r},{l}\n" for r, l in rows))
    recs = load_recordings(tmp_path, manifest)
    assert [r.id for r in recs] == ["A0001", "A0002", "A0003"]
    assert len(recs[0].samples) == 900 and recs[0].sampling_rate == 300.0
    assert recs[1].samples.tolist() == list(range(-5, 5)) and recs[1].sampling_rate == 500.0
    assert recs[2].samples.tolist() == list(range(12))


def test_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("")
    assert load_recordings(tmp_path, tmp_path / "m.csv") == []


def test_unknown_label_and_missing_file_itemized(tmp_path):
    manifest = write_dataset(tmp_path, [("A0001", "N"), ("A0002", "X")])
    manifest.write_text("A0001,N\nA0002,X\nA0009,O\n")
    with pytest.raises(RecordingLoadError) as e:
        load_recordings(tmp_path, manifest)
    assert len(e.value.errors) == 2
    assert "row 2 (A0002)" in e.value.errors[0] and "'X'" in e.value.errors[0]
    assert "A0009" in e.value.errors[1]


def test_filter_labels():
    recs = [rec(l, rid=str(i)) for i, l in enumerate("NOA~NOA")]
    out = filter_labels(recs)
    assert [r.label for r in out] == ["N", "O", "N", "O"]
    assert len(out) == len(recs) - 2 - 1


def test_filter_all_af_warns():
    with pytest.warns(UserWarning):
        assert filter_labels([rec("A"), rec("A")]) == []


# ---------------------------------------------------------------------------
# peaks and templates


def test_impulse_train_peaks_exact():
    x = np.zeros(3000)
    where = np.array([100, 400, 730, 1000, 1500, 2900])
    x[where] = 1.0
    peaks = detect_r_peaks(RawRecording("imp", x, 300.0, "N"))
    assert peaks.tolist() == where.tolist()


def test_flat_signal_has_no_peaks():
    with pytest.warns(UserWarning, match="no peaks"):
        assert len(detect_r_peaks(rec("N"))) == 0


def test_peaks_respect_refractory_gap():
    r, _ = synth_recording(30, "N", seed=1, heart_rate=150)
    peaks = detect_r_peaks(r)
    assert np.all(np.diff(peaks) >= 0.2 * 300)


@pytest.mark.parametrize("label", ["N", "O"])
def test_detector_finds_true_r_waves(label):
    r, true = synth_recording(30, label, seed=2)
    found = detect_r_peaks(r)
    assert len(found) == len(true)
    assert np.abs(found - true).max() <= 2


def test_inverted_beat_locks_onto_q_or_s_leg():
    r, true = synth_recording(30, "N", seed=3, inverted=True)
    off = detect_r_peaks(r)
    offsets = off - true[np.argmin(np.abs(true[:, None] - off[None, :]), axis=0)]
    # the upward S leg of the flipped beat sits ~35 ms after R
    assert np.all(np.abs(offsets) >= 5) and np.all(np.abs(offsets) <= 30)
    fixed = detect_r_peaks(r, PipelineConfig(polarity_correction=True))
    assert len(fixed) == len(true) and np.abs(fixed - true).max() <= 2


def test_extract_templates_counts_and_labels():
    r, true = synth_recording(30, "O", seed=4, heart_rate=50)
    assert len(true) == 25
    ts = extract_templates(r, true)
    assert len(ts) <= 25
    assert all(len(t.samples) == 216 and t.r_index == 75 for t in ts)
    assert all(t.label == 0 for t in ts)


def test_window_crossing_bounds_dropped():
    r, _ = synth_recording(5, "N", seed=5)
    with pytest.warns(UserWarning, match="bounds"):
        assert extract_templates(r, [3]) == []
    assert len(extract_templates(r, [3, 700])) == 1


def test_window_longer_than_recording_warns():
    with pytest.warns(UserWarning, match="bounds"):
        assert extract_templates(rec("N", n=100), [50]) == []


def test_normalize_peak():
    t = Template("s", np.array([0.5, 2.0, -1.0]), 1, 1)
    assert normalize_peak(t).samples.tolist() == [0.25, 1.0, -0.5]
    n = normalize_peak(t)
    assert np.array_equal(normalize_peak(n).samples, n.samples)
    inv = normalize_peak(Template("s", np.array([0.5, -4.0, 1.0]), 0, 1))
    assert inv.samples[1] == -1.0 and np.max(np.abs(inv.samples)) == 1.0
    with pytest.raises(ValueError):
        normalize_peak(Template("s", np.zeros(4), 1, 1))


def test_process_recordings_report():
    recs = [synth_recording(20, l, seed=i)[0] for i, l in enumerate("NOA")]
    recs = [RawRecording(f"r{i}", r.samples, r.sampling_rate, r.label) for i, r in enumerate(recs)]
    data, report = process_recordings(recs)
    assert report["recordings_in"] == 3 and report["recordings_kept"] == 2
    assert report["templates"] == len(data) > 0
    for t in data.templates:
        assert len(t.samples) == 216 and np.isfinite(t.samples).all()
        assert np.max(np.abs(t.samples)) == pytest.approx(1.0, abs=0)
        assert t.label == {"r0": 1, "r1": 0}[t.source_id]


# ---------------------------------------------------------------------------
# split


def toy_dataset(n):
    return LabeledDataset([Template(f"r{i // 3}", np.full(4, i + 1.0), i % 2, 1, beat=i % 3) for i in range(n)])


def test_split_80_20_and_deterministic():
    tr, te = split_train_test(toy_dataset(100), seed=0)
    assert (len(tr), len(te)) == (80, 20)
    tr2, _ = split_train_test(toy_dataset(100), seed=0)
    assert tr.ids == tr2.ids
    tr3, te3 = split_train_test(toy_dataset(100), seed=1)
    assert (len(tr3), len(te3)) == (80, 20) and tr3.ids != tr.ids


@given(st.integers(1, 500), st.integers(0, 10_000))
def test_split_ratio_within_one(n, seed):
    tr, te = split_train_test(toy_dataset(n), seed)
    assert len(tr) + len(te) == n
    assert abs(len(tr) - 0.8 * n) <= 1
    assert set(tr.ids).isdisjoint(te.ids)


def test_split_empty_rejected():
    with pytest.raises(ValueError):
        split_train_test(LabeledDataset([]))


# ---------------------------------------------------------------------------
# template files


def test_template_file_round_trip(tmp_path):
    data = synth_generate(20, 0.5, seed=1)
    save_templates(data, tmp_path / "t.csv")
    back = load_templates(tmp_path / "t.csv")
    assert back.ids == data.ids
    assert back.X.tobytes() == data.X.tobytes()
    assert back.y.tolist() == data.y.tolist()
    assert back.groups == data.groups


def test_template_file_bad_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,label,s0,s1\nx#0,1,0.5,oops\n")
    with pytest.raises(ValueError, match=":2:"):
        load_templates(p)


# ---------------------------------------------------------------------------
# synthetic data


def test_synthetic_upright_peaks_are_positive():
    data = synth_generate(200, 0.5, seed=2, inversion_fraction=0.0)
    X = data.X
    assert np.all(X[:, 75] == 1.0)
    assert np.all(np.abs(X).max(axis=1) == 1.0)


def test_synthetic_is_seeded():
    a, b = synth_generate(100, ecg.RICH_MIX, seed=3), synth_generate(100, ecg.RICH_MIX, seed=3)
    assert a.X.tobytes() == b.X.tobytes() and a.ids == b.ids
    c = synth_generate(100, ecg.RICH_MIX, seed=4)
    assert a.X.tobytes() != c.X.tobytes()


def test_synthetic_labels_follow_morphology():
    data = synth_generate(400, {"normal": 1.0}, seed=5)
    assert set(data.y.tolist()) == {1}
    data = synth_generate(400, 0.0, seed=5)
    assert set(data.y.tolist()) == {0}
    mixed = synth_generate(2000, ecg.RICH_MIX, seed=5)
    assert 0.25 < mixed.y.mean() < 0.5  # 3 of 8 morphologies are Normal


def test_synthetic_inversion_moves_alignment():
    data = synth_generate(400, 0.5, seed=6, inversion_fraction=1.0)
    # aligned on the flipped Q/S leg: the R wave now shows up as a deep trough near the centre
    X = data.X
    assert np.all(X[:, 75] > 0)
    assert np.all(X[:, 50:100].min(axis=1) < -0.5)
    fixed = synth_generate(400, 0.5, seed=6, inversion_fraction=1.0, cfg=PipelineConfig(polarity_correction=True))
    assert np.all(fixed.X[:, 75] == 1.0)


def test_synthetic_rejects_nonpositive_n():
    with pytest.raises(ValueError):
        synth_generate(0)
