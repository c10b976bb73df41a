"""Few-shot audio classification with masked frequency-concept prototypes."""
from .audio import SpectrogramConfig, Waveform, decode_wav, log_mel, mel_filterbank, peak_crop, resample
from .backbone import BackboneSpec, embed, init_backbone, param_count
from .fewshot import (ExtractorBank, MaskSet, apply_mask, compute_prototypes, concept_only_score, episode_loss,
                      euclidean_distance, make_frequency_masks, make_time_masks, score)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec", "ExtractorBank", "KERNEL_BACKEND", "MaskSet", "SpectrogramConfig", "Waveform", "apply_mask",
    "compute_prototypes", "concept_only_score", "decode_wav", "embed", "episode_loss", "euclidean_distance",
    "init_backbone", "log_mel", "make_frequency_masks", "make_time_masks", "mel_filterbank", "param_count",
    "peak_crop", "resample", "score",
]
