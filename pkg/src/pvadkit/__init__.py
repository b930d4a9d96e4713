"""Personalized voice activity detection toolkit.

A small, CPU-friendly stack for framewise classification of audio into
non-speech (ns), target-speaker speech (tss) and non-target-speaker
speech (ntss):

- log-mel feature frontend (``features``)
- numpy LSTM / conv / loss / Adam core with hand-rolled BPTT (``nncore``)
- autoregressive predictive-coding pretraining and its denoising
  variant (``apc``)
- frozen speaker embedder, enrollment and cosine scoring (``speaker``)
- the personalized VAD model itself (``pvad``)
- synthetic corpus construction, noise mixing and multistyle
  augmentation (``data``)
- average-precision evaluation and reporting (``metrics``)
- checkpoint container and command-line pipeline (``container``, ``cli``)
"""

__version__ = "0.1.0"


class PvadkitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PvadkitError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class FormatError(PvadkitError):
    """Malformed file, audio or container data (CLI exit code 3)."""


class DivergenceError(PvadkitError):
    """Training produced non-finite values (CLI exit code 4)."""
