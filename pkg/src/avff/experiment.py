"""End-to-end synthetic experiment: corpus, both training stages, ablations,
frozen-backbone probe, embedding alignment and noise robustness.

Run as ``python -m avff.experiment OUT_DIR`` to print a JSON summary.
"""
from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, preset
from .data.manifest import Manifest, load_manifest
from .data.sampling import ClipStore, split_by_source, crop_media, normalize
from .data.synthetic import generate_synthetic_corpus
from .evaluation import TEST_FRACTION, perturbation_sweep
from .inference import infer_manifest, summarize
from .model import AVFF
from .training import AblationFlags, run_training

log = logging.getLogger(__name__)

VARIANTS = {
    "full": AblationFlags(),
    "contrastive_only": AblationFlags(contrastive_only=True),
    "random_masking": AblationFlags(random_masking=True),
}


@dataclass(frozen=True)
class ExperimentSetup:
    n_real: int = 512
    n_fake: int = 256
    corpus_seed: int = 0
    split_seed: int = 0
    stage1_epochs: int = 30
    stage2_epochs: int = 4
    probe_epochs: int = 4
    seeds: tuple[int, ...] = (0, 1, 2)

    def config(self, seed: int) -> ModelConfig:
        return preset("tiny", stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs,
                      seed=seed, stage2_restart_epochs=self.stage2_epochs)


def corpus(setup: ExperimentSetup, root: Path) -> Manifest:
    path = root / "corpus" / "manifest.tsv"
    if not path.exists():
        generate_synthetic_corpus(setup.n_real, setup.n_fake, setup.config(0),
                                  np.random.default_rng(setup.corpus_seed), path.parent)
    return load_manifest(path)


@torch.no_grad()
def alignment_gap(model: AVFF, manifest: Manifest, cfg: ModelConfig, store: ClipStore) -> float:
    """Mean cosine of matched (same clip) minus mismatched token-mean audio/visual embeddings."""
    model.eval()
    audio, visual = [], []
    for rec in sorted(manifest, key=lambda r: r.clip_id):
        mel, frames = normalize(*crop_media(store.get(rec), 0.0, cfg), store.stats)
        audio.append(mel)
        visual.append(frames)
    x_a, x_v = model.tokenize(torch.from_numpy(np.stack(audio)), torch.from_numpy(np.stack(visual)))
    a = F.normalize(model.encode(x_a, "a").mean(1), dim=-1)
    v = F.normalize(model.encode(x_v, "v").mean(1), dim=-1)
    sim = (a @ v.T).double()
    n = sim.shape[0]
    matched = sim.diagonal().mean()
    mismatched = (sim.sum() - sim.diagonal().sum()) / (n * (n - 1))
    return float(matched - mismatched)


def run_variant(name: str, seed: int, setup: ExperimentSetup, train: Manifest, test: Manifest,
                store: ClipStore, root: Path, extras: bool = False) -> dict:
    cfg = setup.config(seed)
    flags = VARIANTS[name]
    run_dir = root / f"{name}_s{seed}"
    t0 = time.perf_counter()
    s1 = run_training(cfg, train.subset(lambda r: not r.is_fake), 1, flags, run_dir / "stage1", store=store)
    s2 = run_training(cfg, train, 2, flags, run_dir / "stage2", init_checkpoint=s1.final, store=store)
    out = {"variant": name, "seed": seed, **summarize(infer_manifest(test, s2.model, cfg, store))}
    if extras:
        reals = test.subset(lambda r: not r.is_fake)
        out["alignment_gap"] = alignment_gap(s1.model, reals, cfg, store)
        probe_cfg = cfg.replace(stage2_epochs=setup.probe_epochs)
        probe = run_training(probe_cfg, train, 2, AblationFlags(frozen_backbone=True), run_dir / "probe",
                             init_checkpoint=s1.final, store=store)
        out["probe_auc"] = summarize(infer_manifest(test, probe.model, cfg, store))["auc"]
        sweep = perturbation_sweep(test, s2.model, cfg, ("gaussian_noise",), (1,), seed=seed)
        out["noise1_auc"] = sweep[1].metrics["auc"]
    out["seconds"] = time.perf_counter() - t0
    log.info("%s", out)
    return out


def run_experiment(root: str | Path, setup: ExperimentSetup = ExperimentSetup(),
                   variants: tuple[str, ...] = tuple(VARIANTS)) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    manifest = corpus(setup, root)
    train, test = split_by_source(manifest, TEST_FRACTION, setup.split_seed)
    store = ClipStore(manifest, setup.config(0))
    runs = [run_variant(name, seed, setup, train, test, store, root, extras=(name == "full"))
            for name in variants for seed in setup.seeds]
    return {"runs": runs, "n_train": len(train), "n_test": len(test),
            "train_sources": sorted(train.sources()), "test_sources": sorted(test.sources()),
            "seconds": time.perf_counter() - t0}


if __name__ == "__main__":  # pragma: no cover
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    result = run_experiment(sys.argv[1])
    result.pop("train_sources"), result.pop("test_sources")
    print(json.dumps(result, indent=1))
