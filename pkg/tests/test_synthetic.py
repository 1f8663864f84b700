import numpy as np
import pytest
from scipy import ndimage

from gaitcnn.ingest import (PipelineConfig, build_cuboids, estimate_flow, load_sequence,
                            read_manifest, read_pgm)
from gaitcnn.synthetic import (SyntheticSpec, directory_hash, generate_sequence,
                               generate_synthetic, subject_params)


def _sequence(seed=4, frames=12, scenario="nm"):
    rng = np.random.default_rng(seed)
    return generate_sequence(subject_params(1, rng)[0], frames, rng, scenario)


def test_generation_is_deterministic(tmp_path):
    spec = SyntheticSpec(subjects=2, sequences=3, frames=8, seed=11)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert directory_hash(tmp_path / "a") == directory_hash(tmp_path / "b")
    generate_synthetic(SyntheticSpec(subjects=2, sequences=3, frames=8, seed=12), tmp_path / "c")
    assert directory_hash(tmp_path / "a") != directory_hash(tmp_path / "c")


def test_sequence_shapes_and_ranges():
    gray, depth, flow = _sequence()
    assert gray.shape == (12, 60, 80) and depth.shape == (12, 60, 80)
    assert flow.shape == (12, 60, 80, 2)
    assert 0 <= gray.min() and gray.max() <= 255
    assert np.abs(flow[..., 0]).mean() > np.abs(flow[..., 1]).mean()


def test_forty_frames_give_four_cuboids(tmp_path):
    spec = SyntheticSpec(subjects=1, sequences=3, frames=40, seed=1)
    entry = read_manifest(generate_synthetic(spec, tmp_path))[0]
    for modality in ("gray", "of", "depth"):
        cubes = build_cuboids(load_sequence(entry, modality), PipelineConfig())
        assert [c.start for c in cubes] == [0, 5, 10, 15]


def test_ground_truth_flow_explains_the_next_frame():
    gray, _, flow = _sequence(frames=6)
    y, x = np.mgrid[0:60, 0:80].astype(np.float64)
    for t in range(5):
        u, v = flow[t, ..., 0], flow[t, ..., 1]
        moving = np.hypot(u, v) > 0.5
        # frame t+1 sampled at the displaced positions should reproduce frame t
        warped = ndimage.map_coordinates(gray[t + 1], [y + v, x + u], order=1, mode="nearest")
        err_flow = np.abs(warped - gray[t])[moving].mean()
        err_static = np.abs(gray[t + 1] - gray[t])[moving].mean()
        assert err_flow < 0.5 * err_static


def test_estimated_flow_endpoint_error():
    gray, _, flow = _sequence(seed=9, frames=6)
    epe = [np.hypot(*(estimate_flow(gray[t], gray[t + 1]) - flow[t]).transpose(2, 0, 1)).mean()
           for t in range(5)]
    assert np.mean(epe) < 1.0


def test_classification_splits(tmp_path):
    spec = SyntheticSpec(subjects=2, sequences=6, frames=4)
    entries = read_manifest(generate_synthetic(spec, tmp_path))
    per_subject = [e.split for e in entries if e.subject == "p000"]
    assert per_subject == ["train"] * 3 + ["val"] + ["test"] * 2
    assert len({e.seq_id for e in entries}) == 12


def test_transfer_splits_hold_out_subjects(tmp_path):
    spec = SyntheticSpec(subjects=4, sequences=4, frames=4, protocol="transfer")
    entries = read_manifest(generate_synthetic(spec, tmp_path))
    train_subj = {e.subject for e in entries if e.split in ("train", "val")}
    test_subj = {e.subject for e in entries if e.split in ("test", "test-gallery")}
    assert train_subj == {"p000", "p001"} and test_subj == {"p002", "p003"}
    gallery = [e.split for e in entries if e.subject == "p003"]
    assert gallery == ["test-gallery"] * 2 + ["test"] * 2


def test_scenario_toggles_change_appearance():
    nm, _, _ = _sequence(seed=5, frames=3, scenario="nm")
    bg, _, _ = _sequence(seed=5, frames=3, scenario="bg")
    assert not np.allclose(nm, bg)


def test_depth_holes_are_filled_on_load(tiny_corpus):
    manifest, _ = tiny_corpus
    entry = read_manifest(manifest)[0]
    raw = read_pgm(entry.path / "depth" / "000.pgm")
    assert (raw == 0).any()
    assert load_sequence(entry, "depth").frames.min() > 0


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(subjects=0)
    with pytest.raises(ValueError):
        SyntheticSpec(scenarios=("nm", "run"))
    with pytest.raises(ValueError):
        SyntheticSpec(sequences=2)
    with pytest.raises(ValueError):
        SyntheticSpec(protocol="verification")
