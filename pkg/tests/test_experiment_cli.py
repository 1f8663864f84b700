import subprocess
import sys

import numpy as np
import pytest

from gaitcnn import classify, cli, experiment as ex, train
from gaitcnn.synthetic import SyntheticSpec, generate_synthetic

TINY_TRAIN = train.TrainConfig(width=0.125, batch=4, max_epochs=2, joint_epochs=1,
                               stages=((1.0, 0.1, 0.9),))


def _cfg(manifest, out, **kw):
    base = dict(manifest=str(manifest), modalities=("gray",), out=str(out), train=TINY_TRAIN,
                pipeline=ex.cub.PipelineConfig(gray_range=1.0, depth_range=1.0, augment=False),
                baseline_permutations=20)
    base.update(kw)
    return ex._sync_seed(ex.ExperimentConfig(**base))


# ---------------------------------------------------------------- config
def test_config_ini_round_trip_preserves_hash(tmp_path):
    cfg = _cfg("m.txt", tmp_path, modalities=("gray", "of"), fusion="weighted-sum",
               beta=(0.7, 0.3), arch={"of": "3dcnn"})
    text = cfg.to_ini()
    back = ex.load_config(text=text)
    assert back.hash() == cfg.hash()
    assert back.arch == {"gray": "2dcnn", "of": "3dcnn"} and back.beta == (0.7, 0.3)
    assert back.train.stages == TINY_TRAIN.stages


def test_config_hash_ignores_output_dir_only():
    a, b = _cfg("m.txt", "x"), _cfg("m.txt", "y")
    assert a.hash() == b.hash()
    c = _cfg("m.txt", "x", seed=3)
    assert c.hash() != a.hash() and c.train.seed == 3


def test_config_validation():
    with pytest.raises(ValueError, match="needs >= 2"):
        ex.ExperimentConfig(modalities=("gray",), fusion="sm-prod")
    with pytest.raises(ValueError):
        ex.ExperimentConfig(modalities=("rgb",))
    with pytest.raises(ValueError):
        ex.ExperimentConfig(modalities=("gray", "of"), fusion="weighted-sum", beta=(0.5, 0.6))
    with pytest.raises(ValueError, match="unknown experiment key"):
        ex.load_config(text="[experiment]\ncolour = red\n")
    with pytest.raises(ValueError, match="unknown TrainConfig key"):
        ex.load_config(text="[train]\nlearning_rate = 1\n")


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "exp.ini").write_text("[experiment]\nmanifest = data/m.txt\nout = run\n")
    cfg = ex.load_config(tmp_path / "exp.ini")
    assert cfg.manifest == str(tmp_path / "data" / "m.txt")
    assert cfg.out == str(tmp_path / "run")


def test_protocol_guard():
    ex.protocol_guard({"mean": {"train", "val"}})
    with pytest.raises(ValueError, match="held-out"):
        ex.protocol_guard({"beta search": {"val", "test"}})


def test_early_p5_graph_has_fc_head():
    cfg = _cfg("m.txt", "x", modalities=("gray", "depth"), fusion="early:P5")
    meta = ex.graph_meta(cfg, "early", ["a", "b", "c"])
    g = ex.build_graph(meta, 0.25, 0.4)
    names = {l.name for l in g.root.layers}
    assert {"full7", "full8", "full9"} <= names and g.output_shape == (3,)


# ---------------------------------------------------------------- pipeline
def test_single_modality_run(tiny_corpus, tmp_path):
    manifest, _ = tiny_corpus
    report = ex.run_experiment(_cfg(manifest, tmp_path))
    groups = {s.split("/")[0] for s in report.scenarios}
    assert groups == {"gray", "baseline"}
    assert report.check_monotone()
    for name in ("cuboids/gray.npz", "labels.json", "checkpoints/gray.ckpt",
                 "scores/gray.test.txt", "scores/gray.val.txt", "report.csv", "config.ini"):
        assert (tmp_path / name).is_file(), name
    with np.load(tmp_path / "cuboids" / "gray.npz") as z:
        assert set(z["mean_splits"].tolist()) <= {"train", "val"}
        assert z["data"].shape[1:] == (60, 60, 25)


def test_product_fusion_with_uniform_modality_is_neutral(tiny_corpus, tmp_path):
    manifest, _ = tiny_corpus
    cfg = _cfg(manifest, tmp_path, modalities=("gray", "of"), fusion="sm-prod")
    ex.run_experiment(cfg, ("ingest", "train", "extract"))
    path = tmp_path / "scores" / "of.test.txt"
    of = classify.read_scores(path)["of"]
    classify.write_scores(path, [(v, "of", np.full(len(p), 1 / len(p))) for v, p in of.items()])
    report = ex.run_experiment(cfg, ("fuse", "eval"))
    gray = classify.read_scores(tmp_path / "scores" / "gray.test.txt")["gray"]
    fused = classify.read_scores(tmp_path / "scores" / "fusion.test.txt")["fusion"]
    for v in gray:
        assert np.array_equal(np.argsort(fused[v], kind="stable"),
                              np.argsort(gray[v], kind="stable"))
    assert report.get("fusion/AVG", "R1") >= max(report.get("gray/AVG", "R1"),
                                                 report.get("of/AVG", "R1"))


def test_weighted_sum_with_auto_beta(tiny_corpus, tmp_path):
    manifest, _ = tiny_corpus
    cfg = _cfg(manifest, tmp_path, modalities=("gray", "depth"), fusion="weighted-sum",
               beta="auto")
    ex.run_experiment(cfg, ("ingest", "train", "extract"))
    beta = ex.run_experiment(cfg, ("fuse",))
    assert beta in classify.beta_grid(2)


def test_knn_transfer_protocol(tmp_path):
    spec = SyntheticSpec(subjects=4, sequences=4, frames=30, seed=5, protocol="transfer")
    manifest = generate_synthetic(spec, tmp_path / "corpus")
    cfg = _cfg(manifest, tmp_path / "run", modalities=("gray", "depth"), fusion="knn-prod")
    report = ex.run_experiment(cfg)
    assert ("fusion-knn/AVG", "R1") in report.cells
    assert (tmp_path / "run" / "signatures" / "knn-gray.npz").is_file()
    with pytest.raises(ex.StageError, match="no class"):
        ex.run_experiment(_cfg(manifest, tmp_path / "run2"))


def test_stage_error_names_stage_and_hash(tmp_path):
    cfg = _cfg(tmp_path / "missing.txt", tmp_path)
    with pytest.raises(ex.StageError) as info:
        ex.run_experiment(cfg)
    assert "ingest" in str(info.value) and cfg.hash() in str(info.value)


# ---------------------------------------------------------------- command line
def test_cli_grad_check(capsys):
    assert cli.main(["grad-check", "--instances", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 11


def test_cli_gen_synth_and_run(tmp_path, capsys):
    ini = tmp_path / "exp.ini"
    ini.write_text(
        "[experiment]\nmanifest = corpus/manifest.txt\nout = run\nbaseline_permutations = 10\n"
        "[train]\nwidth = 0.125\nbatch = 4\nmax_epochs = 1\njoint_epochs = 0\n"
        "stages = 1.0:0.1:0.9\n"
        "[pipeline]\naugment = false\ngray_range = 1\n"
        "[synth]\nsubjects = 2\nsequences = 3\nframes = 25\n")
    assert cli.main(["gen-synth", "--config", str(ini), "--out", str(tmp_path / "corpus")]) == 0
    assert "hash" in capsys.readouterr().out
    for verb in ("ingest", "train", "extract-signatures", "fuse", "eval"):
        assert cli.main([verb, "--config", str(ini), "--strict"]) == 0, verb
    assert "gray/nm" in capsys.readouterr().out
    assert (tmp_path / "run" / "report.csv").is_file()


def test_cli_reports_errors_with_exit_code(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[experiment]\nmanifest = nowhere.txt\n")
    assert cli.main(["run", "--config", str(tmp_path / "bad.ini"),
                     "--out", str(tmp_path / "o")]) == 2
    assert "stage 'ingest' failed" in capsys.readouterr().err


def test_module_entry_point_lists_verbs():
    out = subprocess.run([sys.executable, "-m", "gaitcnn", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for verb in cli.VERBS:
        assert verb in out
