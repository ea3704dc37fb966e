"""Experiment orchestration: config files, stage pipeline, manifests.

Config is an INI-style file; CLI flags override file values. Every output
file is digest-listed in a manifest so a run can be re-verified later.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import aggkit, fedsim, models, pairs, ssl
from .datasets import LabeledDataset, ToyDatasetSpec, load_cifar10_binary, make_toy_dataset
from .ifs import build_code_pool
from .nn import init_weights, load_checkpoint, save_checkpoint
from .seeding import make_rng, mix64

FORMAT_VERSIONS = {"FPSA": 1, "FEDW": 1, "manifest": 1}


@dataclass
class PretrainStage:
    mode: str = "none"          # none | fps | checkpoint
    checkpoint: str = ""
    archive: str = ""           # optional pre-generated archive
    pool_size: int = 256
    n_pairs: int = 1000
    epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05
    loss: str = "simsiam"


@dataclass
class AnalysisStage:
    decomposition: bool = True
    lambda_star: bool = False
    surface: bool = False
    segment: bool = False
    surface_samples: int = 300
    segment_steps: int = 11
    analysis_seed: int = 0


@dataclass
class ExperimentConfig:
    source: str = "toy"         # toy | cifar10 | archive path handled upstream
    cifar_dir: str = ""
    toy: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)
    toy_test_per_class: int = 50
    pretrain: PretrainStage = field(default_factory=PretrainStage)
    federation: fedsim.FederationConfig = field(default_factory=fedsim.FederationConfig)
    analysis: AnalysisStage = field(default_factory=AnalysisStage)
    output_dir: str = "out"
    master_seed: int = 7


_BOOLS = {"decomposition", "lambda_star", "surface", "segment"}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cfg = ExperimentConfig()

    def fill(obj, section):
        if section not in cp:
            return
        for key, value in cp[section].items():
            if not hasattr(obj, key):
                raise ValueError(f"unknown config key [{section}] {key}")
            current = getattr(obj, key)
            if isinstance(current, bool):
                setattr(obj, key, cp[section].getboolean(key))
            elif isinstance(current, int):
                setattr(obj, key, int(value))
            elif isinstance(current, float):
                setattr(obj, key, float(value))
            elif isinstance(current, tuple):
                setattr(obj, key, tuple(float(v) for v in value.split(",")))
            else:
                setattr(obj, key, value)

    fill(cfg, "experiment")
    fill(cfg.toy, "dataset")
    fill(cfg.pretrain, "pretrain")
    fill(cfg.federation, "federation")
    fill(cfg.analysis, "analysis")
    cfg.federation.__post_init__()
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical (sorted-key) INI form; parse -> serialize is stable."""
    sections = {
        "experiment": {"source": cfg.source, "cifar_dir": cfg.cifar_dir,
                       "toy_test_per_class": cfg.toy_test_per_class,
                       "output_dir": cfg.output_dir,
                       "master_seed": cfg.master_seed},
        "dataset": asdict(cfg.toy),
        "pretrain": asdict(cfg.pretrain),
        "federation": asdict(cfg.federation),
        "analysis": asdict(cfg.analysis),
    }
    out = io.StringIO()
    for name in sorted(sections):
        out.write(f"[{name}]\n")
        for key in sorted(sections[name]):
            value = sections[name][key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_datasets(cfg: ExperimentConfig):
    if cfg.source == "toy":
        train = make_toy_dataset(cfg.toy, cfg.master_seed, stream=0)
        test_spec = ToyDatasetSpec(**{**asdict(cfg.toy),
                                      "per_class": cfg.toy_test_per_class})
        test = make_toy_dataset(test_spec, cfg.master_seed, stream=1)
        return train, test
    if cfg.source == "cifar10":
        return load_cifar10_binary(cfg.cifar_dir)
    raise ValueError(f"unknown dataset source {cfg.source!r}")


def run_pretrain_stage(cfg: ExperimentConfig, input_shape, out_dir):
    """Returns (encoder weights or None, list of produced files)."""
    stage = cfg.pretrain
    produced = []
    if stage.mode == "none":
        return None, produced
    if stage.mode == "checkpoint":
        return load_checkpoint(stage.checkpoint), produced
    if stage.mode != "fps":
        raise ValueError(f"unknown pretrain mode {stage.mode!r}")
    archive = stage.archive
    if not archive:
        pool = build_code_pool(stage.pool_size, mix64(cfg.master_seed, 0xA001))
        archive = os.path.join(out_dir, "pairs.fpsa")
        params = pairs.PairParams(width=input_shape[2], height=input_shape[1])
        pairs.generate_archive(pool, stage.n_pairs, params,
                               mix64(cfg.master_seed, 0xA002), archive,
                               n_workers=int(os.environ.get("FEDFRAC_THREADS", "1")))
        produced.append(archive)
    pcfg = ssl.PretrainConfig(epochs=stage.epochs, batch_size=stage.batch_size,
                              lr=stage.lr, loss=stage.loss,
                              seed=mix64(cfg.master_seed, 0xA003))
    encoder, _ = ssl.pretrain(archive, input_shape, pcfg)
    ckpt = os.path.join(out_dir, "encoder.fedw")
    save_checkpoint(encoder, ckpt)
    produced.append(ckpt)
    return encoder, produced


def run_experiment(cfg: ExperimentConfig):
    """Execute requested stages; returns the artifact directory path."""
    out_dir = os.environ.get("FEDFRAC_OUTPUT_DIR", cfg.output_dir)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"format_versions": FORMAT_VERSIONS,
                "master_seed": cfg.master_seed,
                "config": serialize_config(cfg),
                "config_sha256": hashlib.sha256(
                    serialize_config(cfg).encode()).hexdigest(),
                "files": {}, "status": "running"}
    manifest_path = os.path.join(out_dir, "manifest.json")
    produced: list[str] = []

    def finish(status):
        manifest["status"] = status
        for path in produced:
            manifest["files"][os.path.relpath(path, out_dir)] = sha256_file(path)
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    try:
        train, test = load_datasets(cfg)
        input_shape = train.images.shape[1:]
        spec = models.classifier_spec(input_shape, train.n_classes)

        encoder, files = run_pretrain_stage(cfg, input_shape, out_dir)
        produced += files

        init = init_weights(spec, make_rng(cfg.master_seed, 0x1417))
        if encoder is not None:
            init = models.transplant(init, encoder)

        final, metrics = fedsim.run_federation(
            cfg.federation, spec, init, train.images, train.labels,
            test.images, test.labels)
        csv_path = os.path.join(out_dir, "metrics.csv")
        fedsim.metrics_to_csv(metrics, csv_path)
        produced.append(csv_path)
        ckpt_path = os.path.join(out_dir, "final.fedw")
        save_checkpoint(final, ckpt_path)
        produced.append(ckpt_path)

        produced += run_analysis_stage(cfg, spec, final, train, test, out_dir)
    except Exception as exc:
        manifest["failure"] = repr(exc)
        finish("failed")
        raise
    finish("ok")
    return out_dir


def run_analysis_stage(cfg: ExperimentConfig, spec, final_weights,
                       train: LabeledDataset, test: LabeledDataset, out_dir):
    """Post-hoc analyses on one extra round of local models."""
    stage = cfg.analysis
    produced = []
    if not (stage.lambda_star or stage.surface or stage.segment):
        return produced
    fed = cfg.federation
    shards = fedsim.dirichlet_partition(train.labels, fed.n_clients, fed.alpha,
                                        make_rng(fed.seed, 0xD1B1))
    shards = [s for s in shards if s.size > 0]
    lr = fed.schedule().lr(fed.rounds)
    local = []
    for shard in shards:
        w = fedsim.local_train(train.images[shard.indices],
                               train.labels[shard.indices], final_weights,
                               spec, fed, lr,
                               seed=mix64(fed.seed, fedsim.LOCAL_TAG,
                                          fed.rounds, shard.client_id),
                               anchor=final_weights)
        local.append((w, shard.size))
    weight_sets = [w for w, _ in local]
    sizes = [s for _, s in local]
    if stage.lambda_star and len(weight_sets) >= 2:
        lam, _, report = aggkit.optimal_convex_aggregation(
            weight_sets, sizes, spec, test.images, test.labels)
        path = os.path.join(out_dir, "lambda_star.json")
        with open(path, "w") as f:
            json.dump({"lambda": list(lam), "note": report.note,
                       "candidates": [{"label": c.label,
                                       "lambda": list(c.lam),
                                       "accuracy": c.accuracy,
                                       "loss": c.loss}
                                      for c in report.candidates]}, f, indent=2)
        produced.append(path)
    if stage.surface and len(weight_sets) >= 2:
        samples, mean, ci = aggkit.sample_surface(
            weight_sets, spec, test.images, test.labels,
            n=stage.surface_samples,
            rng=make_rng(stage.analysis_seed, 0x5A3F))
        path = os.path.join(out_dir, "surface.csv")
        aggkit.surface_to_csv(samples, path)
        produced.append(path)
    if stage.segment and len(weight_sets) >= 2:
        losses = aggkit.segment_loss(weight_sets[0], weight_sets[1],
                                     stage.segment_steps, spec,
                                     test.images, test.labels)
        path = os.path.join(out_dir, "segment.csv")
        with open(path, "w") as f:
            f.write("t,loss\n")
            for t, loss in zip(np.linspace(0, 1, stage.segment_steps), losses):
                f.write(f"{t!r},{loss!r}\n")
        produced.append(path)
    return produced


def verify_manifest(directory) -> list[str]:
    """Re-hash every listed file; returns a list of problems (empty = ok)."""
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    problems = []
    for rel, digest in manifest.get("files", {}).items():
        path = os.path.join(directory, rel)
        if not os.path.exists(path):
            problems.append(f"missing: {rel}")
        elif sha256_file(path) != digest:
            problems.append(f"digest mismatch: {rel}")
    return problems
