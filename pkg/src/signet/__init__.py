"""Spatiotemporal neural-network engine and CLI for sign-language clips.

Four architectures (cnn_lstm, cnn3d, cnn_rnn_lstm, cnn_td) built on a
self-contained float32 tensor engine with reverse-mode autodiff, plus a
deterministic data pipeline, training loop, evaluation reports, and a
bit-exact model file format.
"""

from . import cli, data, metrics, models, modelio, nn, tensor, train

__version__ = "0.1.0"

__all__ = ["cli", "data", "metrics", "models", "modelio", "nn", "tensor", "train", "__version__"]
