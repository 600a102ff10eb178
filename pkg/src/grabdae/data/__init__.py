"""Dataset ingestion, image codecs, synthetic domains and checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import (
    FormatError,
    decode_pgm,
    decode_ppm,
    encode_pgm,
    encode_ppm,
    read_mask,
    read_ppm,
    write_mask,
    write_ppm,
)
from .dataset import DomainDataset, EmptyDatasetError, Sample, load_dataset
from .synth import SynthSpec, mask_path_for, synth_generate

__all__ = [
    "CheckpointError", "DomainDataset", "EmptyDatasetError", "FormatError", "Sample", "SynthSpec",
    "decode_pgm", "decode_ppm", "encode_pgm", "encode_ppm", "load_checkpoint", "load_dataset",
    "mask_path_for", "read_mask", "read_ppm", "save_checkpoint", "synth_generate", "write_mask",
    "write_ppm",
]
