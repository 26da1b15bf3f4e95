"""Output-length inflation attacks against a toy encoder-decoder speech recogniser."""

__version__ = "0.1.0"

from .attacks import AttackConfig, run_attack  # noqa: E402
from .corpus import CorpusSpec, generate_corpus  # noqa: E402
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint, transcribe  # noqa: E402
from .signal import FrontendConfig, Waveform  # noqa: E402

__all__ = ["AttackConfig", "run_attack", "CorpusSpec", "generate_corpus", "ModelConfig", "init_model",
           "load_checkpoint", "save_checkpoint", "transcribe", "FrontendConfig", "Waveform", "__version__"]
