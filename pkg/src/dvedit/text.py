"""Closed toy vocabulary and token-sequence text conditions."""

from __future__ import annotations

from dataclasses import dataclass

import torch

NULL_TOKEN = "<null>"
SHAPES = ("square", "disk", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
BACKGROUNDS = ("dark", "light")
VOCAB: tuple[str, ...] = (NULL_TOKEN,) + SHAPES + COLORS + BACKGROUNDS
TOKEN_IDS = {word: i for i, word in enumerate(VOCAB)}

# Every prompt is (shape, color, background).
PROMPT_LENGTH = 3


@dataclass(frozen=True)
class TextCondition:
    token_ids: tuple[int, ...]

    def __post_init__(self):
        for i in self.token_ids:
            if not 0 <= i < len(VOCAB):
                raise ValueError(f"token id {i} outside vocabulary of size {len(VOCAB)}")
        if len(self.token_ids) != PROMPT_LENGTH:
            raise ValueError(f"expected {PROMPT_LENGTH} tokens, got {len(self.token_ids)}")

    @classmethod
    def from_prompt(cls, prompt: str) -> TextCondition:
        """Parse ``"red disk on dark"`` style prompts; word order is free."""
        words = [w for w in prompt.lower().replace(",", " ").split() if w in TOKEN_IDS]
        shape = [w for w in words if w in SHAPES]
        color = [w for w in words if w in COLORS]
        background = [w for w in words if w in BACKGROUNDS]
        if len(shape) != 1 or len(color) != 1 or len(background) != 1:
            raise ValueError(f"prompt {prompt!r} must name one shape, one color and one background")
        return cls.from_words(shape[0], color[0], background[0])

    @classmethod
    def from_words(cls, shape: str, color: str, background: str) -> TextCondition:
        return cls((TOKEN_IDS[shape], TOKEN_IDS[color], TOKEN_IDS[background]))

    @classmethod
    def null(cls) -> TextCondition:
        return cls((TOKEN_IDS[NULL_TOKEN],) * PROMPT_LENGTH)

    @property
    def is_null(self) -> bool:
        return all(i == TOKEN_IDS[NULL_TOKEN] for i in self.token_ids)

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(VOCAB[i] for i in self.token_ids)

    def __str__(self) -> str:
        shape, color, background = self.words
        return f"{color} {shape} on {background}"

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.token_ids, dtype=torch.long)
