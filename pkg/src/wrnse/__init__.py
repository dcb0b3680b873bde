"""Speech enhancement with a 1-D wide residual network.

Modules: ``frontend`` (features), ``autodiff`` (reverse-mode engine and
AdamW), ``model`` (network and checkpoints), ``room`` (image-source RIRs and
mixing), ``trainer``, ``reconstruct`` (noisy-phase overlap-add), ``metrics``
(CD, LLR, FWsegSNR, SRMR) and ``cli``.
"""

from .audio import SAMPLE_RATE, Waveform, load_waveform, write_waveform
from .estimator import FeatureExtractor, WRNEnhancer
from .frontend import FeatureBlock, extract_features
from .model import WRN, WrnConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "SAMPLE_RATE",
    "Waveform",
    "load_waveform",
    "write_waveform",
    "FeatureExtractor",
    "WRNEnhancer",
    "FeatureBlock",
    "extract_features",
    "WRN",
    "WrnConfig",
    "load_checkpoint",
    "save_checkpoint",
]
