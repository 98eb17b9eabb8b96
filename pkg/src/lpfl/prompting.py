"""Cloze patterns, verbalizers, label scoring and per-pattern loss/accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import MASK, Tokenizer, tokenize
from .model import Batch, MicroMLM
from .numerics import Tensor

X_SLOT = "{x}"


@dataclass(frozen=True)
class Pattern:
    id: str
    template: str

    def __post_init__(self) -> None:
        if self.template.count(MASK) != 1 or self.template.count(X_SLOT) != 1:
            raise ValueError(f"pattern {self.id!r} needs exactly one {MASK} and one {X_SLOT}")

    @property
    def before(self) -> str:
        return self.template.split(X_SLOT)[0]

    @property
    def after(self) -> str:
        return self.template.split(X_SLOT)[1]

    @property
    def placement(self) -> str:
        """``prefix`` when the cloze phrase precedes the text, else ``suffix``."""
        return "prefix" if MASK in self.before else "suffix"

    def words(self) -> list[str]:
        return [t for t in tokenize(self.template.replace(X_SLOT, " ")) if t != MASK]


@dataclass(frozen=True)
class Verbalizer:
    words: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for label, ws in enumerate(self.words):
            if not ws:
                raise ValueError(f"label {label} has no verbalizer words")
            for w in ws:
                if w in seen:
                    raise ValueError(f"verbalizer word {w!r} maps to more than one label")
                seen.add(w)

    @classmethod
    def from_mapping(cls, mapping: dict) -> Verbalizer:
        by_label = {int(k): tuple(v) for k, v in mapping.items()}
        if sorted(by_label) != list(range(len(by_label))):
            raise ValueError("verbalizer labels must be 0..L-1")
        return cls(tuple(by_label[k] for k in range(len(by_label))))

    @property
    def num_labels(self) -> int:
        return len(self.words)

    def all_words(self) -> list[str]:
        return [w for ws in self.words for w in ws]

    def token_ids(self, tokenizer: Tokenizer) -> list[list[int]]:
        out = []
        for ws in self.words:
            ids = []
            for w in ws:
                if w not in tokenizer:
                    raise KeyError(f"verbalizer word {w!r} is not in the vocabulary")
                ids.append(tokenizer.index[w])
            out.append(ids)
        return out


@dataclass(frozen=True)
class PatternSet:
    name: str
    patterns: tuple[Pattern, ...]
    verbalizer: Verbalizer

    @classmethod
    def from_json(cls, obj: dict) -> PatternSet:
        pats = tuple(Pattern(p["id"], p["template"]) for p in obj["patterns"])
        if len({p.id for p in pats}) != len(pats):
            raise ValueError("pattern ids must be unique")
        return cls(obj.get("name", "patterns"), pats, Verbalizer.from_mapping(obj["verbalizer"]))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "patterns": [{"id": p.id, "template": p.template} for p in self.patterns],
            "verbalizer": {str(i): list(ws) for i, ws in enumerate(self.verbalizer.words)},
        }

    def pattern_words(self) -> list[str]:
        out: list[str] = []
        for p in self.patterns:
            out += [w for w in p.words() if w not in out]
        return out


def load_patterns(path: str | Path) -> PatternSet:
    with open(path, encoding="utf-8") as fh:
        return PatternSet.from_json(json.load(fh))


def bundled_patterns(name: str) -> PatternSet:
    """``imdb`` or ``yelp`` pattern sets shipped with the package."""
    text = resources.files("lpfl.fixtures").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return PatternSet.from_json(json.loads(text))


# pattern application --------------------------------------------------------


def apply_pattern(p: Pattern, text: str, tokenizer: Tokenizer, max_len: int) -> tuple[list[int], int]:
    """Token ids of ``P(text)`` and the mask index; only the text is ever truncated.

    Prefix patterns drop the tail of the text, suffix patterns its head, so
    the words next to the cloze phrase survive.
    """
    pre = tokenizer.encode(p.before)
    post = tokenizer.encode(p.after)
    room = max_len - len(pre) - len(post)
    if room < 0:
        raise ValueError(f"pattern {p.id!r} alone exceeds max_len={max_len}")
    x = tokenizer.encode(text)
    if len(x) > room:
        x = x[:room] if p.placement == "prefix" else x[len(x) - room :]
    ids = pre + x + post
    if p.placement == "prefix":
        pos = pre.index(tokenizer.mask_id)
    else:
        pos = len(pre) + len(x) + post.index(tokenizer.mask_id)
    return ids, pos


def verbalizer_scores(logits: Tensor, word_ids: Sequence[Sequence[int]]) -> Tensor:
    """Per-label sum of mask logits over that label's words, ``(N, V) -> (N, L)``.

    Words are accumulated left to right in verbalizer order.
    """
    flat = [i for ids in word_ids for i in ids]
    picked = logits[:, np.asarray(flat, dtype=np.intp)]
    cols, j = [], 0
    for ids in word_ids:
        acc = picked[:, j : j + 1]
        for c in range(j + 1, j + len(ids)):
            acc = acc + picked[:, c : c + 1]
        cols.append(acc)
        j += len(ids)
    return nx.concat(cols, axis=1)


@dataclass
class PromptTask:
    """Everything needed to turn texts into label scores with one model."""

    tokenizer: Tokenizer
    patterns: tuple[Pattern, ...]
    verbalizer: Verbalizer
    max_len: int
    word_ids: list[list[int]] = field(init=False)
    _cache: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.patterns = tuple(self.patterns)
        if not self.patterns:
            raise ValueError("at least one pattern is required")
        self.word_ids = self.verbalizer.token_ids(self.tokenizer)

    @classmethod
    def from_set(cls, ps: PatternSet, tokenizer: Tokenizer, max_len: int) -> PromptTask:
        return cls(tokenizer, ps.patterns, ps.verbalizer, max_len)

    @property
    def num_labels(self) -> int:
        return self.verbalizer.num_labels

    def encode(self, p: Pattern, text: str) -> tuple[list[int], int]:
        key = (p.id, text)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = apply_pattern(p, text, self.tokenizer, self.max_len)
        return hit

    def scores(self, model: MicroMLM, texts: Sequence[str], patterns: Sequence[Pattern] | None = None) -> Tensor:
        """Label scores ``(P * N, L)``, pattern-major, in one forward pass."""
        pats = self.patterns if patterns is None else patterns
        enc = [self.encode(p, t) for p in pats for t in texts]
        batch = Batch.pad([ids for ids, _ in enc], self.tokenizer.pad_id)
        logits = model.mask_logits(batch, [pos for _, pos in enc])
        return verbalizer_scores(logits, self.word_ids)

    def loss(self, model: MicroMLM, texts: Sequence[str], targets: np.ndarray, patterns: Sequence[Pattern] | None = None) -> Tensor:
        """Soft cross-entropy averaged over examples and patterns."""
        if not len(texts):
            raise ValueError("empty batch")
        pats = self.patterns if patterns is None else patterns
        tiled = np.tile(np.asarray(targets, dtype=np.float64), (len(pats), 1))
        return nx.mean(nx.cross_entropy_soft(self.scores(model, texts, pats), tiled))

    def distributions(self, model: MicroMLM, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        """Per-pattern label distributions, shape ``(P, N, L)``."""
        out = np.empty((len(self.patterns), len(texts), self.num_labels))
        with nx.no_grad():
            for start in range(0, len(texts), batch_size):
                chunk = texts[start : start + batch_size]
                s = nx.softmax(self.scores(model, chunk), axis=-1).data
                out[:, start : start + len(chunk)] = s.reshape(len(self.patterns), len(chunk), -1)
        return out

    def raw_scores(self, model: MicroMLM, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        out = np.empty((len(self.patterns), len(texts), self.num_labels))
        with nx.no_grad():
            for start in range(0, len(texts), batch_size):
                chunk = texts[start : start + batch_size]
                s = self.scores(model, chunk).data
                out[:, start : start + len(chunk)] = s.reshape(len(self.patterns), len(chunk), -1)
        return out


# single-pattern operations ---------------------------------------------------


def label_scores(model: MicroMLM, p: Pattern, verb: Verbalizer, text: str, tokenizer: Tokenizer) -> Tensor:
    """Scores ``s_P(l|x)`` for one text, shape ``(L,)``."""
    ids, pos = apply_pattern(p, text, tokenizer, model.config.max_len)
    logits = model.forward_mask_logits(ids, pos)
    return verbalizer_scores(nx.reshape(logits, (1, -1)), verb.token_ids(tokenizer))[0]


def pattern_loss(
    model: MicroMLM,
    p: Pattern,
    verb: Verbalizer,
    batch: Sequence[tuple[str, np.ndarray]],
    tokenizer: Tokenizer,
) -> Tensor:
    """Mean soft cross-entropy of one pattern over ``(text, target)`` pairs."""
    if not batch:
        raise ValueError("empty batch")
    task = PromptTask(tokenizer, (p,), verb, model.config.max_len)
    texts = [t for t, _ in batch]
    return task.loss(model, texts, np.stack([np.asarray(y, dtype=np.float64) for _, y in batch]))


def accuracy_from_scores(scores: np.ndarray, labels: Sequence[int]) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    return float(np.mean(np.argmax(scores, axis=-1) == np.asarray(labels)))


def pattern_accuracy(model: MicroMLM, p: Pattern, verb: Verbalizer, val_set: Sequence, tokenizer: Tokenizer) -> float:
    """Validation accuracy ``a_P`` of one pattern on hard-labeled examples."""
    if not val_set:
        raise ValueError("empty validation set")
    task = PromptTask(tokenizer, (p,), verb, model.config.max_len)
    scores = task.raw_scores(model, [e.text for e in val_set])[0]
    return accuracy_from_scores(scores, [e.label for e in val_set])
