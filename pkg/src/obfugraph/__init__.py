"""Obfuscation detection on attributed control-flow graphs."""

__version__ = "0.1.0"

from obfugraph.cfg_model import FunctionSample, read_corpus  # noqa: E402
from obfugraph.config import GeneratorConfig  # noqa: E402
from obfugraph.pipeline import run_benchmark  # noqa: E402

__all__ = ["FunctionSample", "GeneratorConfig", "__version__", "read_corpus", "run_benchmark"]
