"""Structured prompt parameter store: per-identity specific tokens and a
single set of shared tokens reused across every domain of the lifelong run.

Specific tokens are keyed by (domain step, identity) and freshly initialized
per domain since identity sets are disjoint; shared tokens are allocated once
and keep training at every step. Retired steps keep their tokens for
checkpoint analysis but receive no further gradients.
"""

from __future__ import annotations

import torch
from torch import nn

from .encoders import PromptSequence, TextEncoder, seeded_trunc_normal_
from .errors import AlreadyInitialized

SHARED_NAME = "prompts.shared"


def specific_name(domain_step: int) -> str:
    return f"prompts.step{domain_step}.specific"


class StructuredPromptStore(nn.Module):
    def __init__(self, num_pairs: int = 16, token_width: int = 32):
        super().__init__()
        self.num_pairs = num_pairs
        self.token_width = token_width
        self.shared: nn.Parameter | None = None
        self.specific = nn.ParameterDict()

    def steps(self) -> list[int]:
        return sorted(int(k) for k in self.specific.keys())

    def has_step(self, domain_step: int) -> bool:
        return str(domain_step) in self.specific

    def num_identities(self, domain_step: int) -> int:
        return self._specific(domain_step).shape[0]

    def _specific(self, domain_step: int) -> nn.Parameter:
        key = str(domain_step)
        if key not in self.specific:
            raise KeyError(f"prompts not initialized for domain step {domain_step}")
        return self.specific[key]

    def init_domain_prompts(self, domain_step: int, num_identities: int, seed: int) -> None:
        """Allocate specific tokens for a new domain; allocate shared tokens
        only the first time any domain is initialized."""
        if self.has_step(domain_step):
            raise AlreadyInitialized(f"domain step {domain_step} already has prompts")
        if self.shared is None:
            self.shared = nn.Parameter(
                seeded_trunc_normal_(
                    torch.empty(self.num_pairs, self.token_width), std=0.02, seed=seed * 2 + 1
                )
            )
        self.specific[str(domain_step)] = nn.Parameter(
            seeded_trunc_normal_(
                torch.empty(num_identities, self.num_pairs, self.token_width),
                std=0.02,
                seed=seed * 2,
            )
        )

    def compose(self, domain_step: int, identity: int) -> PromptSequence:
        """Interleave specific and shared tokens: X1, Y1, ..., XM, YM."""
        spec = self._specific(domain_step)
        if not 0 <= identity < spec.shape[0]:
            raise KeyError(f"identity {identity} out of range for step {domain_step}")
        slots = torch.stack((spec[identity], self.shared), dim=1)
        return PromptSequence(slots=slots.reshape(2 * self.num_pairs, self.token_width))

    def compose_all(self, domain_step: int) -> torch.Tensor:
        """Slot tensors for every identity of a step: (N, 2M, d_tok)."""
        spec = self._specific(domain_step)
        shared = self.shared.unsqueeze(0).expand_as(spec)
        slots = torch.stack((spec, shared), dim=2)
        return slots.reshape(spec.shape[0], 2 * self.num_pairs, self.token_width)

    def text_table(self, text_encoder: TextEncoder, domain_step: int) -> torch.Tensor:
        """Per-identity text embeddings (N, d) through the text encoder."""
        return text_encoder.encode_slots(self.compose_all(domain_step))

    def stage1_parameters(self, domain_step: int) -> list[nn.Parameter]:
        return [self._specific(domain_step), self.shared]

    def parameters_for_tuning(self, domain_step: int, which: str = "both") -> list[nn.Parameter]:
        if which == "specific":
            return [self._specific(domain_step)]
        if which == "shared":
            return [self.shared]
        if which == "both":
            return [self._specific(domain_step), self.shared]
        raise KeyError(f"unknown prompt-token selector {which!r}")

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        if self.shared is not None:
            out[SHARED_NAME] = self.shared
        for step in self.steps():
            out[specific_name(step)] = self._specific(step)
        return out
