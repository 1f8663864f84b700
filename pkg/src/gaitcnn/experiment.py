"""Experiment configuration and the ingest -> train -> score -> fuse -> eval pipeline.

Every stage reads its inputs from and writes its outputs to the run
directory, so each can be invoked on its own::

    <out>/cuboids/<modality>.npz     normalised cuboids + provenance
    <out>/labels.json                subject/class tables, per-video metadata
    <out>/checkpoints/<group>.ckpt   trained models
    <out>/scores/<group>.<split>.txt video-level score files
    <out>/signatures/<group>.npz     gait signatures (k-NN groups)
    <out>/report.csv, report.txt     evaluation
"""
from __future__ import annotations

import configparser
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import classify, evaluation, train, zoo
from .ingest import cuboids as cub
from .ingest.flow import sequence_flow
from .ingest.frames import FrameSequence, _atomic_write, load_sequence, read_manifest
from .synthetic import SyntheticSpec

log = logging.getLogger(__name__)

FUSIONS = ("none", "sm-prod", "weighted-sum", "knn-prod") + tuple(f"early:{p}" for p in zoo.POSITIONS)


class StageError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    manifest: str = ""
    modalities: tuple = ("gray",)
    arch: dict = field(default_factory=dict)  # modality -> architecture
    fusion: str = "none"
    beta: object = None  # None: defaults per modality count, "auto": grid search on val
    aggregation: str = "prod"  # video-level aggregation: "prod" or "vote"
    flow_source: str = "file"  # "file" (flow/*.flo) or "estimate" (from gray)
    knn_k: int = 7
    baseline_permutations: int = 200
    out: str = "run"
    seed: int = 0
    strict: bool = False
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    pipeline: cub.PipelineConfig = field(default_factory=cub.PipelineConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        self.modalities = tuple(m.lower() for m in self.modalities)
        bad = set(self.modalities) - {"gray", "of", "depth"}
        if bad or not self.modalities:
            raise ValueError(f"unknown or empty modalities {sorted(bad)}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion in ("sm-prod", "weighted-sum") or self.fusion.startswith("early"):
            if len(self.modalities) < 2:
                raise ValueError(f"fusion {self.fusion} needs >= 2 modalities")
        if self.aggregation not in ("prod", "vote"):
            raise ValueError("aggregation must be 'prod' or 'vote'")
        if self.flow_source not in ("file", "estimate"):
            raise ValueError("flow_source must be 'file' or 'estimate'")
        if isinstance(self.beta, (list, tuple)):
            self.beta = tuple(float(b) for b in self.beta)
            classify.check_beta(self.beta, len(self.modalities))
        self.arch = {m: self.arch.get(m, self.arch.get("*", "2dcnn")) for m in self.modalities}

    # ------------------------------------------------------------ serialisation
    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)
             if f.name not in ("train", "pipeline", "synth")}
        d["modalities"] = list(self.modalities)
        d["train"] = asdict(self.train)
        d["pipeline"] = asdict(self.pipeline)
        d["synth"] = asdict(self.synth)
        return json.loads(json.dumps(d, default=list))

    def hash(self):
        """Canonical hash of everything that affects results (not the output path)."""
        d = self.to_dict()
        d.pop("out")
        return train.config_hash(d)

    def to_ini(self):
        cp = configparser.ConfigParser()
        d = self.to_dict()
        exp = {}
        for k, v in d.items():
            if k in ("train", "pipeline", "synth", "arch"):
                continue
            exp[k] = _fmt(v)
        for m, a in self.arch.items():
            exp[f"arch.{m}"] = a
        cp["experiment"] = dict(sorted(exp.items()))
        for sec in ("train", "pipeline", "synth"):
            cp[sec] = {k: _fmt(v) for k, v in sorted(d[sec].items())}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)

    @property
    def out_dir(self):
        return Path(self.out)

    @property
    def groups(self):
        """Score groups produced by training/extraction."""
        if self.fusion.startswith("early"):
            return ["early"]
        if self.fusion == "knn-prod":
            return [f"knn-{m}" for m in self.modalities]
        return list(self.modalities)


def _fmt(v):
    if isinstance(v, (list, tuple)):
        if v and isinstance(v[0], (list, tuple)):
            return "; ".join(":".join(str(x) for x in s) for s in v)
        return ", ".join(str(x) for x in v)
    return "none" if v is None else str(v)


def _parse_value(text, default):
    text = text.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple) or ":" in text:
            return tuple(tuple(float(x) for x in s.split(":")) for s in text.split(";") if s.strip())
        return tuple(s.strip() for s in text.split(",") if s.strip())
    return text


def _section(cls, items):
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    kw = {}
    for k, v in items:
        if k not in defaults:
            raise ValueError(f"unknown {cls.__name__} key {k!r}")
        kw[k] = _parse_value(v, defaults[k])
    return cls(**kw)


def load_config(path=None, text=None, **overrides):
    """Parse an INI experiment config. Relative paths are resolved against the
    config file's directory."""
    cp = configparser.ConfigParser()
    if path is not None:
        text = Path(path).read_text()
    cp.read_string(text or "")
    base = Path(path).parent if path is not None else Path(".")
    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    arch = {k.split(".", 1)[1]: v.strip() for k, v in exp.items() if k.startswith("arch.")}
    if "arch" in exp:
        arch["*"] = exp["arch"].strip()
    kw = dict(arch=arch)
    simple = {f.name: f for f in fields(ExperimentConfig)}
    for k, v in exp.items():
        if k.startswith("arch"):
            continue
        if k not in simple:
            raise ValueError(f"unknown experiment key {k!r}")
        if k == "modalities":
            kw[k] = tuple(s.strip() for s in v.split(",") if s.strip())
        elif k == "beta":
            v = v.strip().lower()
            kw[k] = None if v == "none" else "auto" if v == "auto" else \
                tuple(float(x) for x in v.split(","))
        elif k in ("knn_k", "baseline_permutations", "seed"):
            kw[k] = int(v)
        elif k == "strict":
            kw[k] = v.strip().lower() in ("1", "true", "yes", "on")
        else:
            kw[k] = v.strip()
    for key in ("manifest", "out"):
        if kw.get(key) and not Path(kw[key]).is_absolute():
            kw[key] = str(base / kw[key])
    if cp.has_section("train"):
        kw["train"] = _section(train.TrainConfig, cp.items("train"))
    if cp.has_section("pipeline"):
        kw["pipeline"] = _section(cub.PipelineConfig, cp.items("pipeline"))
    if cp.has_section("synth"):
        kw["synth"] = _section(SyntheticSpec, cp.items("synth"))
    kw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig(**kw)
    return _sync_seed(cfg)


def _sync_seed(cfg):
    """One seed drives training; strict mode is shared with the trainer."""
    cfg.train.seed = cfg.seed
    cfg.train.strict = cfg.train.strict or cfg.strict
    return cfg


# ---------------------------------------------------------------- helpers
def _stage(name):
    def deco(fn):
        def wrapper(cfg, *a, **kw):
            t0 = time.perf_counter()
            try:
                out = fn(cfg, *a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(f"stage '{name}' failed (config {cfg.hash()}): "
                                 f"{type(exc).__name__}: {exc}") from exc
            log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
            return out
        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper
    return deco


def _write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _save_npz(path, **arrays):
    import io
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write(path, buf.getvalue())


def _labels(cfg):
    return json.loads((cfg.out_dir / "labels.json").read_text())


def protocol_guard(split_sets):
    """``split_sets``: mapping of purpose -> splits it consumed. Statistics,
    beta search and validation may only touch train/val."""
    for purpose, splits in split_sets.items():
        leak = set(splits) - cub.TRAIN_SPLITS
        if leak:
            raise ValueError(f"{purpose} touches held-out splits {sorted(leak)}")


# ---------------------------------------------------------------- ingest
def _sequence(entry, modality, flow_source):
    if modality == "of":
        if flow_source == "file" and (entry.path / "flow").is_dir():
            return load_sequence(entry, "of")
        gray = load_sequence(entry, "gray")
        return FrameSequence(sequence_flow(gray.frames), "of", entry.seq_id, entry.subject,
                             entry.scenario, entry.viewpoint, entry.split)
    return load_sequence(entry, modality)


@_stage("ingest")
def stage_ingest(cfg: ExperimentConfig):
    """Manifest -> normalised cuboids per modality (+ optional augmentation)."""
    if not Path(cfg.manifest).is_file():
        raise FileNotFoundError(f"manifest {cfg.manifest} not found")
    entries = read_manifest(cfg.manifest)
    pcfg = cfg.pipeline
    subjects = sorted({e.subject for e in entries})
    classes = sorted({e.subject for e in entries if e.split in cub.TRAIN_SPLITS})
    videos = {e.seq_id: dict(subject=e.subject, scenario=e.scenario, split=e.split,
                             viewpoint=e.viewpoint) for e in entries}
    tracks = {}
    for e in entries:
        try:
            tracks[e.seq_id] = cub.localize(load_sequence(e, "gray").frames, pcfg.fg_threshold)
        except FileNotFoundError:
            tracks[e.seq_id] = None
    for m in cfg.modalities:
        cubs = []
        for e in entries:
            seq = _sequence(e, m, cfg.flow_source)
            track = tracks[e.seq_id]
            if track is not None and len(track) > len(seq):
                track = track[:len(seq)]
            cubs += cub.build_cuboids(seq, pcfg, track)
        train_cubs = [c for c in cubs if c.split in cub.TRAIN_SPLITS]
        mean = cub.compute_mean(train_cubs, pcfg)
        protocol_guard({"mean subtraction": mean.splits})
        cubs = [cub.normalize(c, mean, pcfg) for c in cubs]
        _save_npz(cfg.out_dir / "cuboids" / f"{m}.npz",
                  data=np.stack([c.data for c in cubs]).astype(np.float32),
                  seq_id=np.array([c.seq_id for c in cubs]),
                  start=np.array([c.start for c in cubs]),
                  subject=np.array([c.subject for c in cubs]),
                  scenario=np.array([c.scenario for c in cubs]),
                  split=np.array([c.split for c in cubs]),
                  mean=mean.mean, mean_splits=np.array(sorted(mean.splits)))
    _write_json(cfg.out_dir / "labels.json",
                dict(subjects=subjects, classes=classes, videos=videos,
                     protocol="transfer" if any(e.split == "test-gallery" for e in entries)
                     else "classification"))


PER_CUBOID = ("data", "seq_id", "start", "subject", "scenario", "split")


def load_cuboids(cfg, modality):
    with np.load(cfg.out_dir / "cuboids" / f"{modality}.npz") as z:
        return {k: z[k] for k in z.files}


def _aligned(cfg):
    """Per-modality cuboid tables restricted to (seq_id, start) keys common to all."""
    tables = {m: load_cuboids(cfg, m) for m in cfg.modalities}
    keys = None
    for t in tables.values():
        k = set(zip(t["seq_id"].tolist(), t["start"].tolist()))
        keys = k if keys is None else keys & k
    order = sorted(keys)
    out = {}
    for m, t in tables.items():
        pos = {k: i for i, k in enumerate(zip(t["seq_id"].tolist(), t["start"].tolist()))}
        idx = np.array([pos[k] for k in order], dtype=np.int64)
        out[m] = {k: v[idx] if k in PER_CUBOID else v for k, v in t.items()}
    return out


def _augmented(table, modality, mask, enabled, amount):
    data = table["data"][mask]
    if not enabled:
        return data
    out = []
    for x in data:
        c = cub.ModalityCuboid(modality, x)
        out.append(x)
        out += [a.data for a in cub.augment(c, amount)]
    return np.stack(out)


def _datasets(cfg, modalities, classes):
    """Train/val datasets (tuple inputs when several modalities are fused early)."""
    tables = _aligned(cfg) if len(modalities) > 1 else {modalities[0]: load_cuboids(cfg, modalities[0])}
    ref = tables[modalities[0]]
    cls_index = {s: i for i, s in enumerate(classes)}
    splits = ref["split"]
    pc = cfg.pipeline
    rep = 9 if pc.augment else 1
    out = {}
    for name, sel in (("train", splits == "train"), ("val", splits == "val")):
        if not sel.any():
            out[name] = None
            continue
        y = np.array([cls_index[s] for s in ref["subject"][sel]])
        aug = pc.augment and name == "train"
        xs = [_augmented(tables[m], m, sel, aug, pc.shift) for m in modalities]
        y = np.repeat(y, rep) if aug else y
        out[name] = train.Dataset(xs[0] if len(xs) == 1 else tuple(xs), y)
    if out["train"] is None:
        raise ValueError("no training cuboids")
    protocol_guard({"curriculum validation": {"val"} if out["val"] is not None else set()})
    return out["train"], out["val"]


# ---------------------------------------------------------------- train
def _graph_kwargs(cfg, group):
    if group == "early":
        return dict(kind="fusion", modalities=list(cfg.modalities),
                    archs=[cfg.arch[m] for m in cfg.modalities],
                    position=cfg.fusion.split(":")[1])
    m = group.removeprefix("knn-")
    return dict(kind="single", modality=m, arch=cfg.arch[m])


def build_graph(meta, width, dropout):
    """Rebuild an architecture from checkpoint metadata."""
    shapes = {m: tuple(s) for m, s in meta.get("input_shapes", {}).items()}
    if meta["kind"] == "fusion":
        spec = zoo.FusionSpec(list(zip(meta["archs"], meta["modalities"])), meta["position"],
                              meta.get("head", "fc"), width, dropout, shapes)
        return zoo.build_fusion_net(spec, meta["classes"])
    return zoo.build(meta["arch"], meta["classes"], meta["modality"], width, dropout,
                     shapes.get(meta["modality"]))


def graph_meta(cfg, group, classes):
    meta = _graph_kwargs(cfg, group)
    n, L = cfg.pipeline.n, cfg.pipeline.length
    mods = meta.get("modalities", [meta.get("modality")])
    meta.update(classes=len(classes), class_names=list(classes),
                input_shapes={m: list(zoo.input_shape_for(m, n, L)) for m in mods},
                stages=[list(s) for s in cfg.train.stages], width=cfg.train.width)
    return meta


@_stage("train")
def stage_train(cfg: ExperimentConfig):
    labels = _labels(cfg)
    classes = labels["classes"]
    hashes = {}
    for group in cfg.groups:
        meta = graph_meta(cfg, group, classes)
        mods = meta.get("modalities", [meta.get("modality")])
        tr, va = _datasets(cfg, mods, classes)
        arch = meta.get("arch", meta.get("archs", ["2dcnn"])[0])
        tcfg = cfg.train
        if arch.startswith("resnet") and len(tcfg.stages) > 1:
            log.warning("%s trains in one stage; using the final curriculum stage only", arch)
            tcfg = train.TrainConfig(**{**asdict(tcfg), "stages": (tcfg.stages[-1],)})
        graph, state = train.curriculum_train(
            arch, tr, va, tcfg, len(classes),
            builder=lambda width, dropout: build_graph(meta, width, dropout))
        meta["final_width"] = graph.width
        meta["dropout"] = graph.meta.get("dropout", tcfg.dropout)
        hashes[group] = train.save_checkpoint(cfg.out_dir / "checkpoints" / f"{group}.ckpt",
                                              state, cfg.hash(), meta)
    return hashes


def load_model(cfg, group):
    state, _, meta = train.load_checkpoint(cfg.out_dir / "checkpoints" / f"{group}.ckpt")
    graph = build_graph(meta, meta["final_width"], meta["dropout"])
    graph.init_params(np.random.default_rng(0))
    train.attach(graph, state)
    return graph, meta


# ---------------------------------------------------------------- scores
def _inputs(cfg, group, meta):
    mods = meta.get("modalities", [meta.get("modality")])
    tables = _aligned(cfg) if len(mods) > 1 else {mods[0]: load_cuboids(cfg, mods[0])}
    ref = tables[mods[0]]
    x = tuple(tables[m]["data"] for m in mods)
    return (x[0] if len(x) == 1 else x), ref


def _video_scores(scores, seq_ids, mask, method):
    return classify.aggregate_videos(scores[mask], seq_ids[mask], method)


@_stage("extract-signatures")
def stage_extract(cfg: ExperimentConfig):
    """Per-subsequence softmax scores (or k-NN fractions over gait signatures),
    aggregated per video and written as score files."""
    labels = _labels(cfg)
    subjects = labels["subjects"]
    subj_index = {s: i for i, s in enumerate(subjects)}
    for group in cfg.groups:
        graph, meta = load_model(cfg, group)
        x, ref = _inputs(cfg, group, meta)
        seq_ids, splits = ref["seq_id"], ref["split"]
        if group.startswith("knn-"):
            sig = graph.signatures(x, cfg.train.eval_batch)
            gallery_split = "test-gallery" if labels["protocol"] == "transfer" else "train"
            gal = splits == gallery_split
            gal_y = np.array([subj_index[s] for s in ref["subject"][gal]])
            k = min(cfg.knn_k, int(gal.sum()))
            scores = np.zeros((len(sig), len(subjects)))
            for i in np.flatnonzero(~gal):
                _, scores[i] = classify.knn_classify(sig[i], sig[gal], gal_y, k, len(subjects))
            _save_npz(cfg.out_dir / "signatures" / f"{group}.npz", signatures=sig,
                      seq_id=seq_ids, split=splits, subject=ref["subject"])
        else:
            scores = graph.predict(x, cfg.train.eval_batch).astype(np.float64)
        for split in ("val", "test"):
            mask = splits == split
            if not mask.any():
                continue
            ids, vs = _video_scores(scores, seq_ids, mask, cfg.aggregation)
            classify.write_scores(cfg.out_dir / "scores" / f"{group}.{split}.txt",
                                  [(v, group, p) for v, p in zip(ids, vs)])


def _read_group(cfg, group, split):
    path = cfg.out_dir / "scores" / f"{group}.{split}.txt"
    if not path.is_file():
        return None
    return classify.read_scores(path)[group]


def _truth(labels, group, ids):
    space = labels["subjects"] if group.startswith("knn") or group == "fusion-knn" \
        else labels["classes"]
    index = {s: i for i, s in enumerate(space)}
    subj = [labels["videos"][v]["subject"] for v in ids]
    missing = sorted({s for s in subj if s not in index})
    if missing:
        raise ValueError(f"{group}: test subjects {missing} have no class (use knn-prod "
                         "for identities unseen in training)")
    return np.array([index[s] for s in subj])


@_stage("fuse")
def stage_fuse(cfg: ExperimentConfig):
    """Late fusion of per-modality video scores; returns the weights used."""
    if cfg.fusion in ("none",) or cfg.fusion.startswith("early"):
        return None
    labels = _labels(cfg)
    groups = cfg.groups
    tests = [_read_group(cfg, g, "test") for g in groups]
    ids = sorted(set.intersection(*(set(t) for t in tests)))
    beta = None
    if cfg.fusion in ("sm-prod", "knn-prod"):
        fused = [classify.fuse_product([t[v] for t in tests]) for v in ids]
    else:
        beta = cfg.beta
        if beta == "auto":
            vals = [_read_group(cfg, g, "val") for g in groups]
            if any(v is None for v in vals):
                raise ValueError("beta=auto needs validation scores for every modality")
            vids = sorted(set.intersection(*(set(v) for v in vals)))
            protocol_guard({"beta search": {labels["videos"][v]["split"] for v in vids}})
            stacked = np.stack([[v[i] for i in vids] for v in vals])
            beta, _ = classify.grid_search_beta(stacked, _truth(labels, groups[0], vids))
        elif beta is None:
            beta = {2: (0.6, 0.4), 3: (0.4, 0.3, 0.3)}.get(len(groups),
                                                          (1 / len(groups),) * len(groups))
        fused = [classify.fuse_weighted_sum([t[v] for t in tests], beta) for v in ids]
    name = "fusion-knn" if cfg.fusion == "knn-prod" else "fusion"
    classify.write_scores(cfg.out_dir / "scores" / f"{name}.test.txt",
                          [(v, name, p) for v, p in zip(ids, fused)])
    return beta


def shuffled_baseline(scores, truth, permutations, rng):
    """Mean R1 of the scores against randomly permuted truth labels."""
    return float(np.mean([evaluation.rank_k_accuracy(scores, rng.permutation(truth), 1)
                          for _ in range(permutations)]))


@_stage("eval")
def stage_eval(cfg: ExperimentConfig):
    labels = _labels(cfg)
    report = evaluation.EvalReport(meta=dict(config_hash=cfg.hash(), seed=cfg.seed))
    groups = list(cfg.groups)
    if cfg.fusion not in ("none",) and not cfg.fusion.startswith("early"):
        groups.append("fusion-knn" if cfg.fusion == "knn-prod" else "fusion")
    first = None
    for group in groups:
        scores = _read_group(cfg, group, "test")
        if not scores:
            raise ValueError(f"no test scores for {group}")
        ids = sorted(scores)
        mat = np.stack([scores[v] for v in ids])
        truth = _truth(labels, group, ids)
        scen = [labels["videos"][v]["scenario"] for v in ids]
        evaluation.evaluate_scores(mat, truth, scen, report, prefix=f"{group}/")
        subj_per_scen = {s: len({labels["videos"][v]["subject"] for v, sc in zip(ids, scen)
                                 if sc == s}) for s in dict.fromkeys(scen)}
        report.add_average(f"{group}/AVG", [f"{group}/{s}" for s in subj_per_scen],
                           list(subj_per_scen.values()))
        if first is None:
            first = (mat, truth)
    if cfg.baseline_permutations and first is not None:
        rng = np.random.default_rng([cfg.seed, 7])
        report.add("baseline/shuffled", "R1",
                   shuffled_baseline(*first, cfg.baseline_permutations, rng), len(first[1]))
    report.check_monotone()
    evaluation.emit_report(report, cfg.out_dir / "report.csv", "csv")
    evaluation.emit_report(report, cfg.out_dir / "report.txt", "text")
    return report


STAGES = ("ingest", "train", "extract", "fuse", "eval")


def run_experiment(cfg: ExperimentConfig, stages=STAGES):
    """Run the selected stages in order; returns the evaluation report."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(cfg.out_dir / "config.ini", cfg.to_ini().encode())
    table = dict(ingest=stage_ingest, train=stage_train, extract=stage_extract,
                 fuse=stage_fuse, eval=stage_eval)
    result = None
    with train.strict_mode(cfg.strict):
        for name in stages:
            result = table[name](cfg)
    return result
