"""Toy word-level tokenizer over the label corpus."""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError, FormatError

logger = logging.getLogger(__name__)

PAD = "<pad>"
SOS = "<sos>"
EOS = "<eos>"
MASK = "<mask>"
UNK = "<unk>"
SPECIAL_TOKENS: Tuple[str, ...] = (PAD, SOS, EOS, MASK, UNK)

PROMPT_TEMPLATE = "a video of {}"

_WORD = re.compile(r"[a-z0-9]+")


def normalize(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation"""
    return _WORD.findall(text.lower())


def prompt_for(label: str) -> str:
    return PROMPT_TEMPLATE.format(label)


@dataclass
class TokenSequence:
    """Framed token ids ``[SOS, w1 .. wn, EOS, PAD ...]``.

    ``mask_positions`` is set only on CMLM inputs, where those positions
    hold the MASK id.
    """

    ids: List[int]
    mask_positions: Optional[List[int]] = None

    def __len__(self) -> int:
        return len(self.ids)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


@dataclass
class Vocabulary:
    """Token table; line index of ``vocab.txt`` equals the id"""

    tokens: List[str]
    index: Dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise FormatError(f"Vocabulary must start with {SPECIAL_TOKENS}")
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise FormatError("Vocabulary contains duplicate tokens")

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(normalize(text))
        words.update(normalize(PROMPT_TEMPLATE.format("")))
        return cls(list(SPECIAL_TOKENS) + sorted(words - set(SPECIAL_TOKENS)))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        logger.debug("Wrote %d tokens to %s", len(self.tokens), path)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def sos_id(self) -> int:
        return self.index[SOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def special_ids(self) -> Tuple[int, ...]:
        return tuple(self.index[t] for t in SPECIAL_TOKENS)

    def id_of(self, word: str) -> int:
        return self.index.get(word, self.unk_id)


def tokenize(text: str, vocab: Vocabulary, max_len: int = 12) -> TokenSequence:
    """Frame ``text`` with SOS/EOS and pad to ``max_len``.

    Words that do not fit between SOS and EOS are dropped so EOS is always
    present. Unknown words map to UNK.
    """
    if max_len < 2:
        raise ContractError(f"max_len must leave room for SOS and EOS, got {max_len}")
    words = normalize(text)[: max_len - 2]
    ids = [vocab.sos_id] + [vocab.id_of(w) for w in words] + [vocab.eos_id]
    ids += [vocab.pad_id] * (max_len - len(ids))
    return TokenSequence(ids=ids)


def detokenize(sequence: TokenSequence, vocab: Vocabulary) -> str:
    words = []
    for token_id in sequence.ids:
        if token_id == vocab.eos_id:
            break
        if token_id in (vocab.sos_id, vocab.pad_id):
            continue
        words.append(vocab.tokens[token_id])
    return " ".join(words)


def batch_ids(sequences: Sequence[TokenSequence]) -> np.ndarray:
    return np.stack([s.as_array() for s in sequences])


def mask_tokens(
    sequence: TokenSequence,
    vocab: Vocabulary,
    rng: np.random.Generator,
    ratio: float = 0.15,
    maskable: Optional[Sequence[int]] = None,
) -> TokenSequence:
    """Replace ``max(1, round(ratio * n))`` of the ``n`` maskable positions by MASK.

    By default every non-special position is maskable. A sequence with no
    maskable position comes back unmasked with ``mask_positions == []``.
    """
    if maskable is None:
        special = set(vocab.special_ids)
        maskable = [i for i, t in enumerate(sequence.ids) if t not in special]
    maskable = list(maskable)
    if not maskable:
        return TokenSequence(ids=list(sequence.ids), mask_positions=[])

    count = min(len(maskable), max(1, int(round(ratio * len(maskable)))))
    chosen = sorted(int(i) for i in rng.choice(maskable, size=count, replace=False))
    ids = list(sequence.ids)
    for position in chosen:
        ids[position] = vocab.mask_id
    return TokenSequence(ids=ids, mask_positions=chosen)
