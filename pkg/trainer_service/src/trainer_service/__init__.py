"""HTTP fine-tuning and inference service for a small causal language model.

The service exposes a six-endpoint wire protocol (/infer, /train, /checkpoint,
/restore, /embed, /analyze) backed by a byte-level causal language model whose
trainable state lives entirely in low-rank adapter matrices.  Checkpoints are
content-addressed snapshots of those adapters, so restoring one reproduces the
model's observable behaviour exactly.
"""

from trainer_service.model import GenerationSettings, TrainerEngine, completion_text
from trainer_service.service import build_trainer_app
from trainer_service.tokenizer import ByteTokenizer

__all__ = [
    "ByteTokenizer",
    "GenerationSettings",
    "TrainerEngine",
    "build_trainer_app",
    "completion_text",
]
