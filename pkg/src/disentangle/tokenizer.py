"""Closed-vocabulary tokenizer built from a world's surface strings.

Text is chunked into words (with their leading space) and single punctuation
marks. Chunks seen in templates or attribute values are whole tokens; any
other chunk (entity names) is split into two-letter pieces, the leading space
riding on the first piece.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .world import PLACEHOLDER, World

CHUNK = re.compile(r" ?[A-Za-z]+| ?[^ A-Za-z]")
PAD, BOS, SEP = "<pad>", "<bos>", "<sep>"
SPECIALS = (PAD, BOS, SEP)


class TokenizerError(ValueError):
    pass


def chunks(text: str) -> list[tuple[str, int]]:
    out, pos = [], 0
    for m in CHUNK.finditer(text):
        if m.start() != pos:
            raise TokenizerError(f"cannot tokenize {text!r} at offset {pos}")
        out.append((m.group(), m.start()))
        pos = m.end()
    if pos != len(text):
        raise TokenizerError(f"cannot tokenize {text!r} at offset {pos}")
    return out


def split_name(chunk: str) -> list[str]:
    lead = " " if chunk.startswith(" ") else ""
    body = chunk[len(lead) :]
    pieces = [body[i : i + 2] for i in range(0, len(body), 2)]
    pieces[0] = lead + pieces[0]
    return pieces


@dataclass(frozen=True)
class Prompt:
    """A tokenized prompt with the half-open token range of its entity."""

    ids: tuple[int, ...]
    span: tuple[int, int]
    text: str

    @property
    def entity_last(self) -> int:
        return last_entity_token(self.ids, self.span)


def last_entity_token(tokens, span: tuple[int, int]) -> int:
    start, stop = span
    if not 0 <= start < stop <= len(tokens):
        raise IndexError(f"entity span {span} out of bounds for {len(tokens)} tokens")
    return stop - 1


class Tokenizer:
    """Closed vocabulary; the last ``n_pieces`` entries are entity-name pieces."""

    def __init__(self, vocab: list[str], n_pieces: int = 0):
        if tuple(vocab[:3]) != SPECIALS:
            raise TokenizerError("vocabulary must start with the special tokens")
        if not 0 <= n_pieces <= len(vocab) - len(SPECIALS):
            raise TokenizerError(f"bad piece count {n_pieces}")
        self.vocab = list(vocab)
        self.n_pieces = n_pieces
        self.index = {t: i for i, t in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise TokenizerError("duplicate vocabulary entries")
        self.bos = self.index[BOS]
        self.pad = self.index[PAD]
        self.sep = self.index[SEP]

    @classmethod
    def from_world(cls, world: World) -> "Tokenizer":
        words: set[str] = set()
        for t in world.templates:
            lo = t.text.index(PLACEHOLDER)
            for c, start in chunks(t.fill("Zz")):
                if not (start < lo + 2 and start + len(c) > lo):
                    words.add(c)
        for a in world.attributes:
            for v in world.values[a]:
                words.update(c for c, _ in chunks(" " + v))
        words.add(".")  # joins few-shot demonstrations
        pieces: set[str] = set()
        for e in world.entities:
            for form in (e, " " + e):
                for c, _ in chunks(form):
                    if c not in words:
                        pieces.update(split_name(c))
        pieces -= words
        return cls(list(SPECIALS) + sorted(words) + sorted(pieces), len(pieces))

    def __len__(self) -> int:
        return len(self.vocab)

    def _encode_offsets(self, text: str) -> list[tuple[int, int, int]]:
        out = []
        for c, start in chunks(text):
            if c in self.index:
                out.append((self.index[c], start, start + len(c)))
                continue
            pos = start
            for p in split_name(c):
                if p not in self.index:
                    raise TokenizerError(f"unknown piece {p!r} in {text!r}")
                out.append((self.index[p], pos, pos + len(p)))
                pos += len(p)
        return out

    def encode(self, text: str) -> list[int]:
        return [i for i, _, _ in self._encode_offsets(text)]

    def decode(self, ids) -> str:
        return "".join(self.vocab[int(i)] for i in ids if int(i) not in (self.pad, self.bos))

    def value_token(self, value: str) -> int:
        """First token of an attribute value as it follows a prompt."""
        return self.encode(" " + value)[0]

    def value_tokens(self, value: str) -> list[int]:
        return self.encode(" " + value)

    def render(self, template_text: str, entity: str, prefix: str = "") -> Prompt:
        head, tail = template_text.split(PLACEHOLDER)
        text = prefix + head + entity + tail
        lo = len(prefix) + len(head)
        hi = lo + len(entity)
        enc = self._encode_offsets(text)
        span = [k for k, (_, s, e) in enumerate(enc) if s < hi and e > lo]
        if not span:
            raise TokenizerError(f"entity {entity!r} not found in {text!r}")
        ids = (self.bos,) + tuple(i for i, _, _ in enc)
        return Prompt(ids, (span[0] + 1, span[-1] + 2), text)

    def to_json(self) -> dict:
        return {"vocab": self.vocab, "n_pieces": self.n_pieces}

    @classmethod
    def from_json(cls, d: dict) -> "Tokenizer":
        return cls(d["vocab"], d.get("n_pieces", 0))

    def piece_ids(self) -> list[int]:
        """Ids that only ever occur inside entity names."""
        return list(range(len(self.vocab) - self.n_pieces, len(self.vocab)))
