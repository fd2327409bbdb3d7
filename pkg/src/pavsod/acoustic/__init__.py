from .bformat import AmbisonicClip, add_noise, doa_oracle, encode_bformat, random_directions, spatial_energy
from .features import stft_features
from .seld import (
    AcousticEmbeddings,
    SeldConfig,
    SeldEncoder,
    SeldOutput,
    evaluate_seld,
    extract_embeddings,
    make_seld_dataset,
    pretrain_seld,
    sed_decision,
)

__all__ = [
    "AcousticEmbeddings",
    "AmbisonicClip",
    "SeldConfig",
    "SeldEncoder",
    "SeldOutput",
    "add_noise",
    "doa_oracle",
    "encode_bformat",
    "evaluate_seld",
    "extract_embeddings",
    "make_seld_dataset",
    "pretrain_seld",
    "random_directions",
    "sed_decision",
    "spatial_energy",
    "stft_features",
]
