"""Small causal language model with trainable low-rank adapters.

The base network is a compact GPT-2 style transformer over a byte-level
vocabulary, built deterministically from a seed.  All base weights are frozen;
the only trainable state is a set of low-rank adapter matrices injected into
the attention projections.  That keeps checkpoints tiny (adapter tensors only)
and makes them content-addressable: two checkpoints with the same id are the
same weights, and restoring one reproduces observable behaviour exactly.

Embeddings intentionally bypass the adapters so that /embed is a pure function
of the input text, unaffected by any amount of fine-tuning.
"""

from __future__ import annotations

import hashlib
import json
import random
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from transformers import GPT2Config, GPT2LMHeadModel

from trainer_service.tokenizer import ByteTokenizer

IGNORE_LABEL = -100
FALLBACK_COMPLETION = "(no completion)"


def completion_text(target: str) -> str:
    """Render the completion string the model is trained to emit for a target."""
    return json.dumps({"relation": target})


@dataclass(frozen=True)
class GenerationSettings:
    """Decoding configuration; greedy decoding keeps replies deterministic."""

    strategy: str = "greedy"
    max_new_tokens: int = 32


class LoRAConv1D(nn.Module):
    """Low-rank adapter wrapped around a GPT-2 Conv1D projection.

    The wrapped layer computes ``base(x) + (x @ A @ B) * scale``.  ``B`` starts
    at zero, so a freshly wrapped model is bit-identical to the base model.
    Setting ``enabled`` to False drops the adapter term entirely, which the
    engine uses to keep text embeddings independent of training.
    """

    def __init__(self, base: nn.Module, rank: int, alpha: float, generator: torch.Generator):
        super().__init__()
        self.base = base
        in_features, out_features = base.weight.shape
        seed_a = torch.empty(in_features, rank)
        seed_a.normal_(mean=0.0, std=0.02, generator=generator)
        self.lora_a = nn.Parameter(seed_a)
        self.lora_b = nn.Parameter(torch.zeros(rank, out_features))
        self.scale = alpha / rank
        self.enabled = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if self.enabled:
            out = out + (x @ self.lora_a @ self.lora_b) * self.scale
        return out


class TrainerEngine:
    """Deterministic fine-tuning engine around the adapter-wrapped model.

    Not thread-safe: the HTTP layer serialises access with a lock.
    """

    def __init__(
        self,
        seed: int = 7,
        embedding_size: int = 64,
        num_layers: int = 2,
        num_heads: int = 2,
        context_length: int = 1024,
        lora_rank: int = 8,
        lora_alpha: float = 16.0,
        max_new_tokens: int = 32,
    ):
        self.tokenizer = ByteTokenizer()
        self.context_length = context_length
        self.generation = GenerationSettings(max_new_tokens=max_new_tokens)
        config = GPT2Config(
            vocab_size=self.tokenizer.vocab_size,
            n_positions=context_length,
            n_embd=embedding_size,
            n_layer=num_layers,
            n_head=num_heads,
            resid_pdrop=0.0,
            embd_pdrop=0.0,
            attn_pdrop=0.0,
            bos_token_id=self.tokenizer.bos_id,
            eos_token_id=self.tokenizer.eos_id,
            pad_token_id=self.tokenizer.pad_id,
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.model = GPT2LMHeadModel(config)
        self.model.eval()
        for param in self.model.parameters():
            param.requires_grad_(False)
        generator = torch.Generator().manual_seed(seed)
        self._adapters: List[LoRAConv1D] = []
        for block in self.model.transformer.h:
            block.attn.c_attn = LoRAConv1D(block.attn.c_attn, lora_rank, lora_alpha, generator)
            block.attn.c_proj = LoRAConv1D(block.attn.c_proj, lora_rank, lora_alpha, generator)
            self._adapters.extend([block.attn.c_attn, block.attn.c_proj])
        self.base_model_id = (
            f"byte-gpt2-L{num_layers}-H{num_heads}-E{embedding_size}-seed{seed}"
        )
        self.encoder_model_id = f"{self.base_model_id}-meanpool"
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self._checkpoints: Dict[str, Dict[str, torch.Tensor]] = {}

    # -- adapter state ----------------------------------------------------

    def adapter_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        """Trainable (name, parameter) pairs in stable name order."""
        pairs = [
            (name, param)
            for name, param in self.model.named_parameters()
            if param.requires_grad
        ]
        pairs.sort(key=lambda pair: pair[0])
        return pairs

    def adapter_state(self) -> Dict[str, torch.Tensor]:
        return {name: param.detach().clone() for name, param in self.adapter_parameters()}

    def state_fingerprint(self) -> str:
        """Content address of the current adapter state."""
        digest = hashlib.sha256()
        for name, param in self.adapter_parameters():
            digest.update(name.encode("utf-8"))
            digest.update(str(tuple(param.shape)).encode("utf-8"))
            digest.update(param.detach().to(torch.float32).contiguous().numpy().tobytes())
        return digest.hexdigest()

    def checkpoint(self) -> str:
        """Snapshot the adapter weights; the id is derived from their content."""
        checkpoint_id = self.state_fingerprint()
        if checkpoint_id not in self._checkpoints:
            self._checkpoints[checkpoint_id] = self.adapter_state()
        return checkpoint_id

    def restore(self, checkpoint_id: str) -> None:
        """Load a snapshot back into the adapters; KeyError if unknown."""
        if checkpoint_id not in self._checkpoints:
            raise KeyError(f"unknown checkpoint id {checkpoint_id!r}")
        snapshot = self._checkpoints[checkpoint_id]
        with torch.no_grad():
            for name, param in self.adapter_parameters():
                param.copy_(snapshot[name])

    @property
    def checkpoint_count(self) -> int:
        return len(self._checkpoints)

    @contextmanager
    def adapters_disabled(self) -> Iterator[None]:
        previous = [adapter.enabled for adapter in self._adapters]
        for adapter in self._adapters:
            adapter.enabled = False
        try:
            yield
        finally:
            for adapter, state in zip(self._adapters, previous):
                adapter.enabled = state

    # -- encoding ----------------------------------------------------------

    def _prompt_ids(self, text: str) -> List[int]:
        return [self.tokenizer.bos_id] + self.tokenizer.encode(text + "\n")

    def _training_example(self, instruction_text: str, target: str) -> Tuple[List[int], List[int]]:
        """Token ids and labels for one example; loss applies to the completion only."""
        prompt = self._prompt_ids(instruction_text)
        completion = self.tokenizer.encode(completion_text(target)) + [self.tokenizer.eos_id]
        completion = completion[: self.context_length]
        keep = self.context_length - len(completion)
        prompt = prompt[-keep:] if keep > 0 else []
        input_ids = prompt + completion
        labels = [IGNORE_LABEL] * len(prompt) + list(completion)
        return input_ids, labels

    # -- training ----------------------------------------------------------

    def train(
        self,
        items: Sequence[Tuple[str, str]],
        epochs: int,
        learning_rate: float,
        batch_size: int,
        seed: int,
    ) -> Tuple[int, float]:
        """Fine-tune the adapters on (instruction, target) pairs.

        Returns (items_seen, loss) where items_seen counts every pass over
        every item (epochs * len(items)) and loss is the mean training loss
        over the final epoch.  A fresh optimiser is created per call, so the
        adapter tensors remain the complete trainable state.
        """
        examples = [self._training_example(text, target) for text, target in items]
        parameters = [param for _, param in self.adapter_parameters()]
        optimizer = torch.optim.AdamW(parameters, lr=learning_rate)
        self.model.train()
        final_epoch_losses: List[float] = []
        try:
            for epoch in range(epochs):
                order = list(range(len(examples)))
                random.Random(f"{seed}:{epoch}").shuffle(order)
                epoch_losses: List[float] = []
                for start in range(0, len(order), batch_size):
                    batch = [examples[i] for i in order[start : start + batch_size]]
                    input_ids, labels, attention_mask = self._collate(batch)
                    optimizer.zero_grad()
                    output = self.model(
                        input_ids=input_ids,
                        attention_mask=attention_mask,
                        labels=labels,
                    )
                    output.loss.backward()
                    optimizer.step()
                    epoch_losses.append(float(output.loss.detach()))
                final_epoch_losses = epoch_losses
        finally:
            self.model.eval()
        items_seen = epochs * len(items)
        loss = sum(final_epoch_losses) / len(final_epoch_losses) if final_epoch_losses else 0.0
        return items_seen, loss

    def _collate(
        self, batch: Sequence[Tuple[List[int], List[int]]]
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        width = max(len(input_ids) for input_ids, _ in batch)
        pad = self.tokenizer.pad_id
        input_rows, label_rows, mask_rows = [], [], []
        for input_ids, labels in batch:
            fill = width - len(input_ids)
            input_rows.append(input_ids + [pad] * fill)
            label_rows.append(labels + [IGNORE_LABEL] * fill)
            mask_rows.append([1] * len(input_ids) + [0] * fill)
        return (
            torch.tensor(input_rows, dtype=torch.long),
            torch.tensor(label_rows, dtype=torch.long),
            torch.tensor(mask_rows, dtype=torch.long),
        )

    # -- inference ---------------------------------------------------------

    def generate(self, text: str) -> str:
        """Greedy completion for a prompt; never returns an empty string."""
        prompt = self._prompt_ids(text)
        limit = max(1, self.context_length - self.generation.max_new_tokens)
        prompt = prompt[-limit:]
        input_ids = torch.tensor([prompt], dtype=torch.long)
        with torch.no_grad():
            output = self.model.generate(
                input_ids,
                do_sample=False,
                max_new_tokens=self.generation.max_new_tokens,
                eos_token_id=self.tokenizer.eos_id,
                pad_token_id=self.tokenizer.pad_id,
            )
        completion = self.tokenizer.decode(output[0, input_ids.shape[1] :].tolist())
        return completion if completion else FALLBACK_COMPLETION

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Unit-norm mean-pooled encodings from the frozen base network.

        Adapters are disabled for the forward pass, so the result depends only
        on the input text, never on training history.
        """
        encoded = [
            ([self.tokenizer.bos_id] + self.tokenizer.encode(text))[-self.context_length :]
            for text in texts
        ]
        width = max(len(ids) for ids in encoded)
        pad = self.tokenizer.pad_id
        input_ids = torch.tensor(
            [ids + [pad] * (width - len(ids)) for ids in encoded], dtype=torch.long
        )
        attention_mask = torch.tensor(
            [[1] * len(ids) + [0] * (width - len(ids)) for ids in encoded], dtype=torch.long
        )
        with self.adapters_disabled(), torch.no_grad():
            hidden = self.model.transformer(
                input_ids=input_ids, attention_mask=attention_mask
            ).last_hidden_state
        mask = attention_mask.unsqueeze(-1).to(hidden.dtype)
        pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        vectors = pooled.numpy().astype(np.float32)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        return vectors / np.maximum(norms, 1e-12)

    def analyze(self, prompt_text: str) -> str:
        """Free-form completion used for error analysis prompts."""
        return self.generate(prompt_text)

    # -- introspection -----------------------------------------------------

    def describe(self) -> Dict[str, object]:
        """Service state summary for health reporting."""
        tensor_count = len(self.adapter_parameters())
        parameter_count = sum(param.numel() for _, param in self.adapter_parameters())
        return {
            "base_model_id": self.base_model_id,
            "encoder_model_id": self.encoder_model_id,
            "generation": {
                "strategy": self.generation.strategy,
                "max_new_tokens": self.generation.max_new_tokens,
            },
            "adapters": {
                "rank": self.lora_rank,
                "alpha": self.lora_alpha,
                "tensors": tensor_count,
                "parameters": parameter_count,
            },
            "checkpoints_stored": self.checkpoint_count,
        }
