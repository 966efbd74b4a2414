"""Desk-scale end-to-end signal-to-concept spoken language understanding.

A convolutional + bidirectional-recurrent CTC model whose first recurrent
layer is conditioned on a dialog-history embedding extracted from the
previous system prompt, plus the training schedules, synthetic corpus,
and concept-level scoring needed to evaluate the mechanism end to end.
"""

from .autodiff import (
    Tensor,
    Tape,
    OptimizerState,
    apply_primitive,
    backward,
    optimizer_step,
    clip_gradients,
    conv2d_forward,
)
from .codec import OutputAlphabet, ConceptTaggedTranscript
from .history import HistoryVector, zero_history_vector

__all__ = [
    "Tensor",
    "Tape",
    "OptimizerState",
    "apply_primitive",
    "backward",
    "optimizer_step",
    "clip_gradients",
    "conv2d_forward",
    "OutputAlphabet",
    "ConceptTaggedTranscript",
    "HistoryVector",
    "zero_history_vector",
]
