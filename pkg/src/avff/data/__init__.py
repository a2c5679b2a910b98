from .audio import AudioInputError, fit_frames, log_mel, mel_filterbank
from .manifest import Manifest, ManifestError, Record, Stats, load_manifest
from .sampling import (
    Batch, ClipSample, ClipStore, IngestionError, collate, compute_stats, make_stage1_batch,
    make_stage2_batch, sample_clip, split_by_source,
)
from .synthetic import driver_correlation, generate_synthetic_corpus
from .tensorio import read_tensor, write_tensor
