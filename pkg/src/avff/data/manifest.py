"""Line-delimited clip manifests.

File layout::

    #avff-manifest v1
    #stats <mean_a> <std_a> <mean_v> <std_v>
    clip_id<TAB>audio_path<TAB>frames_path<TAB>label<TAB>category<TAB>source_id<TAB>duration_s

Paths are resolved relative to the manifest's directory.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

HEADER = "#avff-manifest v1"
LABELS = ("real", "fake")

FAKEAVCELEB_CATEGORIES = (
    "REAL", "RVFA", "FVRA-WL", "FVFA-FS", "FVFA-GAN", "FVFA-WL", "FVRA-FS", "FVRA-GAN",
)
SYNTH_CATEGORIES = ("SYNTH-FA", "SYNTH-FV", "SYNTH-FAV", "SYNTH-SWAP")
# categories whose visual stream was manipulated
VISUAL_FAKE = {"FVRA-WL", "FVFA-FS", "FVFA-GAN", "FVFA-WL", "FVRA-FS", "FVRA-GAN",
               "SYNTH-FV", "SYNTH-FAV"}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    clip_id: str
    audio_path: str
    frames_path: str
    label: str
    category: str
    source_id: str
    duration_s: float

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"

    @property
    def target(self) -> int:
        return LABELS.index(self.label)


@dataclass
class Stats:
    mean_a: float = 0.0
    std_a: float = 1.0
    mean_v: float = 0.0
    std_v: float = 1.0


@dataclass
class Manifest:
    records: list[Record]
    stats: Stats = field(default_factory=Stats)
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        seen = set()
        for rec in self.records:
            if rec.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {rec.clip_id!r}")
            seen.add(rec.clip_id)
            if rec.label not in LABELS:
                raise ManifestError(f"{rec.clip_id}: label must be one of {LABELS}, got {rec.label!r}")
            if not rec.duration_s > 0:
                raise ManifestError(f"{rec.clip_id}: duration_s must be > 0")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def subset(self, keep: Callable[[Record], bool] | Iterable[str]) -> "Manifest":
        if callable(keep):
            records = [r for r in self.records if keep(r)]
        else:
            ids = set(keep)
            records = [r for r in self.records if r.clip_id in ids]
        return dataclasses.replace(self, records=records)

    @property
    def labels(self) -> set[str]:
        return {r.label for r in self.records}

    @property
    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records})

    def sources(self) -> dict[str, list[Record]]:
        out: dict[str, list[Record]] = {}
        for rec in self.records:
            out.setdefault(rec.source_id, []).append(rec)
        return out

    def save(self, path: str | Path) -> None:
        s = self.stats
        lines = [HEADER, f"#stats {s.mean_a!r} {s.std_a!r} {s.mean_v!r} {s.std_v!r}"]
        for r in self.records:
            lines.append("\t".join([r.clip_id, r.audio_path, r.frames_path, r.label,
                                    r.category, r.source_id, repr(float(r.duration_s))]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, check_paths: bool = True) -> Manifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ManifestError(f"{path}: missing '{HEADER}' header")
    stats = Stats()
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        if line.startswith("#stats"):
            try:
                stats = Stats(*(float(x) for x in line.split()[1:5]))
            except (TypeError, ValueError):
                raise ManifestError(f"{path}:{lineno}: malformed stats line") from None
            continue
        if line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise ManifestError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(fields)}")
        try:
            duration = float(fields[6])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: bad duration {fields[6]!r}") from None
        records.append(Record(*fields[:6], duration_s=duration))
    if stats.std_a <= 0 or stats.std_v <= 0:
        raise ManifestError(f"{path}: stats standard deviations must be > 0")
    manifest = Manifest(records, stats, path.parent)
    if check_paths:
        for rec in manifest:
            for p in (rec.audio_path, rec.frames_path):
                if not manifest.resolve(p).exists():
                    raise ManifestError(f"{rec.clip_id}: unresolvable path {p}")
    return manifest
