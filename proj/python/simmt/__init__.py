"""Simultaneous multimodal translation: wait-k decoding, region-attentive
transformers, and attention supervision, backed by a C++ core.

The heavy lifting lives in the compiled ``simmt._core`` extension; this
package re-exports its public surface.
"""

from simmt._core import (
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
    Vocabulary,
    attention_dump,
    bleu,
    evaluate,
    g_waitk,
    generate_synthetic_corpus,
    ground_eval,
    iou,
    prefix_accuracy,
    token_f1,
    train,
    translate,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "NumericError",
    "Vocabulary",
    "attention_dump",
    "bleu",
    "evaluate",
    "g_waitk",
    "generate_synthetic_corpus",
    "ground_eval",
    "iou",
    "prefix_accuracy",
    "token_f1",
    "train",
    "translate",
]
