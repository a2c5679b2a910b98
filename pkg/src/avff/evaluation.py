"""Evaluation protocols, result tables, embedding export and robustness sweeps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .data.manifest import VISUAL_FAKE, Manifest
from .data.sampling import ClipStore, split_by_source
from .inference import ClipResult, clip_blocks, infer_manifest, summarize
from .model import AVFF
from .perturb import AUDIO_KINDS, audio_transform
from .training import AblationFlags, MetricsWriter, run_training

PROTOCOLS = ("intra", "leave-one-category-out", "cross-corpus")
RESULT_COLUMNS = ("clip_id", "logit_real", "logit_fake", "score", "prediction", "label", "category", "n_blocks")
TEST_FRACTION = 0.3


class ProtocolError(ValueError):
    pass


@dataclass
class EvalResult:
    protocol: str
    name: str
    rows: list[ClipResult]
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.metrics:
            self.metrics = summarize(self.rows)


def write_results_table(rows: list[ClipResult], path: str | Path, split: str | None = None) -> None:
    """Per-clip rows (sorted by clip id), tab-separated with a header line."""
    cols = (("split",) if split else ()) + RESULT_COLUMNS
    lines = ["\t".join(cols)]
    for r in sorted(rows, key=lambda r: r.clip_id):
        vals = [r.clip_id, f"{r.mean_logits[0]:.6g}", f"{r.mean_logits[1]:.6g}", f"{r.score:.6g}",
                str(r.prediction), str(r.label), r.category, str(r.n_blocks)]
        lines.append("\t".join(([split] if split else []) + vals))
    Path(path).write_text("\n".join(lines) + "\n")


def write_results(results: list[EvalResult], out_dir: str | Path) -> None:
    """Aggregate metrics in the metrics-stream format plus one per-clip table per result."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = MetricsWriter(out_dir / "eval_metrics.tsv")
    for res in results:
        m = res.metrics
        stream.add(step=0, epoch=0, split=f"{res.protocol}:{res.name}", acc=m.get("acc"),
                   auc=m.get("auc"), ap=m.get("ap"))
        if res.rows:
            write_results_table(res.rows, out_dir / f"clips_{res.protocol}_{res.name}.tsv")
    stream.flush()


def _finetune(cfg: ModelConfig, train: Manifest, flags: AblationFlags, out_dir: Path,
              stage1_checkpoint, store: ClipStore) -> AVFF:
    result = run_training(cfg, train, 2, flags, out_dir, init_checkpoint=stage1_checkpoint, store=store)
    return result.model


def intra_split(manifest: Manifest, seed: int) -> tuple[Manifest, Manifest]:
    """70/30 split by source id: ``(train, test)``."""
    return split_by_source(manifest, TEST_FRACTION, seed)


def run_protocol(manifest: Manifest, cfg: ModelConfig, protocol: str, out_dir: str | Path,
                 stage1_checkpoint: str | Path | None = None, model: AVFF | None = None,
                 flags: AblationFlags = AblationFlags(), store: ClipStore | None = None) -> list[EvalResult]:
    """Run one evaluation protocol.

    ``intra`` and ``leave-one-category-out`` finetune a classifier (from
    ``stage1_checkpoint`` when given) on the training part and score the
    held-out part. ``cross-corpus`` scores every clip of ``manifest`` with an
    already trained ``model``.
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    out_dir = Path(out_dir)
    store = store or ClipStore(manifest, cfg)
    if protocol == "cross-corpus":
        if model is None:
            raise ProtocolError("cross-corpus evaluation needs a trained model")
        return [EvalResult(protocol, "all", infer_manifest(manifest, model, cfg, store))]

    train, test = intra_split(manifest, cfg.seed)
    if protocol == "intra":
        model = _finetune(cfg, train, flags, out_dir / "intra", stage1_checkpoint, store)
        return [EvalResult(protocol, "test", infer_manifest(test, model, cfg, store))]

    fakes = [c for c in manifest.categories if c != "REAL"]
    if len(fakes) < 2:
        raise ProtocolError(f"leave-one-category-out needs >= 2 fake categories, found {fakes}")
    results = []
    for held in fakes:
        fold_train = train.subset(lambda r: r.category != held)
        fold_test = test.subset(lambda r: r.category in ("REAL", held))
        model = _finetune(cfg, fold_train, flags, out_dir / f"loco_{held}", stage1_checkpoint, store)
        results.append(EvalResult(protocol, held, infer_manifest(fold_test, model, cfg, store)))
    visual = [r for r in results if r.name in VISUAL_FAKE]
    if visual:
        avg = {k: float(np.mean([r.metrics[k] for r in visual])) for k in ("acc", "auc", "ap")}
        results.append(EvalResult(protocol, "AVG-FV", [], {"n": sum(len(r.rows) for r in visual), **avg}))
    return results


@torch.no_grad()
def clip_embedding(media, model: AVFF, cfg: ModelConfig, stats) -> np.ndarray:
    """Mean over blocks and tokens of ``f_a`` and ``f_v``, concatenated (4 x encoder width)."""
    audio, visual = clip_blocks(media, cfg, stats)
    was_training = model.training
    model.eval()
    bundle = model.embed(audio, visual)
    model.train(was_training)
    emb = torch.cat([bundle.f_a.mean(dim=1), bundle.f_v.mean(dim=1)], dim=-1).mean(dim=0)
    return emb.double().numpy()


def export_embeddings(manifest: Manifest, model: AVFF, cfg: ModelConfig, out_path: str | Path,
                      store: ClipStore | None = None) -> np.ndarray:
    store = store or ClipStore(manifest, cfg)
    records = sorted(manifest, key=lambda r: r.clip_id)
    embs = np.stack([clip_embedding(store.get(r), model, cfg, store.stats) for r in records])
    header = ["clip_id", "label", "category"] + [f"e{i}" for i in range(embs.shape[1])]
    lines = ["\t".join(header)]
    for rec, e in zip(records, embs):
        lines.append("\t".join([rec.clip_id, rec.label, rec.category] + [f"{x:.7g}" for x in e]))
    Path(out_path).write_text("\n".join(lines) + "\n")
    return embs


def perturbation_sweep(manifest: Manifest, model: AVFF, cfg: ModelConfig,
                       kinds: tuple[str, ...] = AUDIO_KINDS[1:], levels: tuple[int, ...] = (1, 2, 3, 4, 5),
                       seed: int = 0) -> list[EvalResult]:
    """Score ``manifest`` clean and under each audio perturbation/level."""
    results = [EvalResult("perturb", "clean", infer_manifest(manifest, model, cfg, ClipStore(manifest, cfg)))]
    for kind in kinds:
        for level in levels:
            store = ClipStore(manifest, cfg, audio_transform(kind, level, seed, cfg.audio_sample_rate))
            results.append(EvalResult("perturb", f"{kind}-{level}", infer_manifest(manifest, model, cfg, store)))
    return results


def auc_drop(results: list[EvalResult], name: str) -> float:
    clean = next(r for r in results if r.name == "clean").metrics["auc"]
    other = next(r for r in results if r.name == name).metrics["auc"]
    return clean - other if not (math.isnan(clean) or math.isnan(other)) else float("nan")
