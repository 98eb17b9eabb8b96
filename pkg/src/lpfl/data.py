"""Corpus ingestion, word-level tokenizer, client partitioning and synthetic corpora."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
SPECIALS = (PAD, UNK, MASK)

_WORD_RE = re.compile(r"\[MASK\]|\w+|[^\w\s]")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    """One text.  ``label`` is set for hard labels, ``soft`` for annotated ones.

    Unlabeled examples carry neither; their true label lives only in
    :attr:`DatasetSplit.hidden_labels`.
    """

    id: int
    text: str
    label: int | None = None
    soft: tuple[float, ...] | None = None
    origin: str = "seed"
    annotated_round: int | None = None

    def __post_init__(self) -> None:
        if self.label is not None and self.soft is not None:
            raise ValueError("an example is either hard- or soft-labeled, not both")
        if self.soft is not None:
            s = np.asarray(self.soft)
            if np.any(s < 0) or abs(s.sum() - 1.0) > 1e-9:
                raise ValueError(f"soft label of example {self.id} is not a distribution")
        if self.origin == "annotated" and self.soft is None:
            raise ValueError("annotated examples must carry a soft label")

    @property
    def is_labeled(self) -> bool:
        return self.label is not None or self.soft is not None

    def target(self, num_labels: int) -> np.ndarray:
        if self.soft is not None:
            return np.asarray(self.soft, dtype=np.float64)
        if self.label is None:
            raise ValueError(f"example {self.id} is unlabeled")
        t = np.zeros(num_labels)
        t[self.label] = 1.0
        return t

    def unlabeled(self) -> Example:
        return Example(self.id, self.text)

    def annotate(self, dist: Sequence[float], round_: int) -> Example:
        return Example(self.id, self.text, soft=tuple(float(p) for p in dist), origin="annotated", annotated_round=round_)


# corpus files ---------------------------------------------------------------


def load_corpus(path: str | Path, labels: Iterable[int] = (0, 1)) -> list[Example]:
    """Read line-delimited JSON records ``{"text": str, "label": int?}``."""
    allowed = set(labels)
    out: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                raise CorpusError(f"{path}:{lineno}: record needs a string 'text' field")
            label = rec.get("label")
            if label is not None and (isinstance(label, bool) or label not in allowed):
                raise CorpusError(f"{path}:{lineno}: unknown label {label!r}")
            out.append(Example(len(out), rec["text"], label))
    return out


def write_corpus(path: str | Path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"text": ex.text}
            if ex.label is not None:
                rec["label"] = ex.label
            fh.write(json.dumps(rec) + "\n")


def corpus_fingerprint(examples: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(f"{ex.id}\t{ex.label}\t{ex.text}\n".encode())
    return h.hexdigest()[:16]


# tokenizer ------------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    """Lowercased words and single punctuation marks; ``[MASK]`` stays whole."""
    return [t if t == MASK else t.lower() for t in _WORD_RE.findall(text)]


@dataclass
class Tokenizer:
    vocab: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.vocab[:3]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate vocabulary entries")

    pad_id = 0
    unk_id = 1
    mask_id = 2

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def word(self, idx: int) -> str:
        return self.vocab[idx]

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def to_json(self) -> dict:
        return {"vocab": self.vocab}

    @classmethod
    def from_json(cls, obj: dict) -> Tokenizer:
        return cls(list(obj["vocab"]))


def build_tokenizer(
    texts: Iterable[str],
    cap: int,
    verbalizer_words: Iterable[str] = (),
    pattern_words: Iterable[str] = (),
) -> Tokenizer:
    """Keep the ``cap`` most useful words: specials, forced words, then by frequency."""
    forced: list[str] = []
    for w in list(verbalizer_words) + list(pattern_words):
        for t in tokenize(w):
            if t not in SPECIALS and t not in forced:
                forced.append(t)
    if cap <= len(SPECIALS) + len(forced):
        raise ValueError(f"vocabulary cap {cap} leaves no room beyond {len(SPECIALS) + len(forced)} reserved words")
    counts = Counter(t for text in texts for t in tokenize(text) if t not in SPECIALS)
    for w in forced:
        counts.pop(w, None)
    room = cap - len(SPECIALS) - len(forced)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:room]
    return Tokenizer(list(SPECIALS) + forced + [w for w, _ in ranked])


# partitioning ---------------------------------------------------------------


@dataclass
class DatasetSplit:
    labeled: list[list[Example]]
    unlabeled: list[list[Example]]
    validation: list[Example]
    test: list[Example]
    hidden_labels: dict[int, int]
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.labeled)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "clients": [
                {"labeled": [e.id for e in t], "unlabeled": [e.id for e in u]}
                for t, u in zip(self.labeled, self.unlabeled)
            ],
            "validation": [e.id for e in self.validation],
            "test": [e.id for e in self.test],
        }


def _even_chunks(items: Sequence, k: int) -> list[list]:
    base, extra = divmod(len(items), k)
    out, start = [], 0
    for i in range(k):
        n = base + (1 if i < extra else 0)
        out.append(list(items[start : start + n]))
        start += n
    return out


def partition(
    examples: Sequence[Example],
    num_clients: int,
    labeled_fraction: float,
    val_size: int,
    seed: int,
    test_size: int = 0,
) -> DatasetSplit:
    """Seeded IID split into per-client labeled/unlabeled shards, validation and test.

    After shuffling, the last ``test_size`` examples become the test set; of
    the rest, the first ``labeled_fraction`` are seed-labeled, the next
    ``val_size`` form the validation set and the remainder loses its labels.
    """
    if num_clients < 1:
        raise ValueError("need at least one client")
    if not 0 < labeled_fraction < 1:
        raise ValueError("labeled_fraction must lie in (0, 1)")
    if any(e.label is None for e in examples):
        raise CorpusError("partition needs a fully labeled corpus")
    ordered = sorted(examples, key=lambda e: e.id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    if test_size:
        shuffled, test = shuffled[:-test_size], shuffled[-test_size:]
    else:
        test = []
    n_lab = int(round(labeled_fraction * len(shuffled)))
    if n_lab < num_clients or n_lab + val_size >= len(shuffled) or len(shuffled) - n_lab - val_size < num_clients:
        raise CorpusError(
            f"insufficient data: {len(shuffled)} training examples for {num_clients} clients, "
            f"{n_lab} labeled and {val_size} validation"
        )
    labeled = shuffled[:n_lab]
    validation = shuffled[n_lab : n_lab + val_size]
    rest = shuffled[n_lab + val_size :]
    hidden = {e.id: e.label for e in rest}
    return DatasetSplit(
        labeled=_even_chunks(labeled, num_clients),
        unlabeled=[[e.unlabeled() for e in chunk] for chunk in _even_chunks(rest, num_clients)],
        validation=list(validation),
        test=list(test),
        hidden_labels=hidden,
        seed=seed,
    )


# synthetic corpora -------------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def pseudo_words(n: int, exclude: Iterable[str] = ()) -> list[str]:
    """Deterministic pronounceable non-words, e.g. ``bako``, ``dimure``."""
    banned = set(exclude)
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    out: list[str] = []
    length = 2
    while len(out) < n:
        for idx in range(len(syllables) ** length):
            parts = []
            for _ in range(length):
                idx, r = divmod(idx, len(syllables))
                parts.append(syllables[r])
            w = "".join(parts)
            if w not in banned:
                out.append(w)
                if len(out) == n:
                    break
        length += 1
    return out


@dataclass(frozen=True)
class SyntheticLanguage:
    """Word inventory shared by the task corpus and the pretraining corpus."""

    fillers: tuple[str, ...]
    signal: tuple[tuple[str, ...], ...]
    filler_weights: tuple[float, ...]

    @classmethod
    def make(cls, vocab_size: int, signal_words_per_label: int, num_labels: int = 2, exclude: Iterable[str] = ()) -> SyntheticLanguage:
        n_signal = signal_words_per_label * num_labels
        if signal_words_per_label < 1 or vocab_size <= n_signal:
            raise ValueError("vocab_size must exceed the number of signal words")
        words = pseudo_words(vocab_size, exclude)
        signal = tuple(tuple(words[i * signal_words_per_label : (i + 1) * signal_words_per_label]) for i in range(num_labels))
        fillers = tuple(words[n_signal:])
        ranks = np.arange(1, len(fillers) + 1, dtype=np.float64)
        w = 1.0 / ranks
        return cls(fillers, signal, tuple(w / w.sum()))

    def review(self, label: int, rng: np.random.Generator, min_len: int = 4, max_len: int = 9) -> list[str]:
        n = int(rng.integers(min_len, max_len + 1))
        words = list(rng.choice(len(self.fillers), size=n, p=self.filler_weights))
        body = [self.fillers[i] for i in words]
        for _ in range(int(rng.integers(1, 3))):
            pos = int(rng.integers(0, len(body) + 1))
            body.insert(pos, self.signal[label][int(rng.integers(len(self.signal[label])))])
        return body


def synth_sentiment(
    n: int,
    vocab_size: int = 2000,
    signal_words_per_label: int = 20,
    noise_rate: float = 0.05,
    seed: int = 0,
    exclude: Iterable[str] = (),
) -> list[Example]:
    """Balanced binary reviews: Zipfian filler words plus 1-2 label signal words.

    With probability ``noise_rate`` the stored label is flipped, so the Bayes
    accuracy is ``1 - noise_rate``.
    """
    if not 0 <= noise_rate < 0.5:
        raise ValueError("noise_rate must lie in [0, 0.5)")
    if n < 1:
        raise ValueError("n must be positive")
    lang = SyntheticLanguage.make(vocab_size, signal_words_per_label, exclude=exclude)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        true = int(rng.integers(2))
        body = lang.review(true, rng)
        label = 1 - true if rng.random() < noise_rate else true
        out.append(Example(i, " ".join(body), label))
    return out


def synth_pretraining_corpus(
    n: int,
    vocab_size: int,
    signal_words_per_label: int,
    sentiment_words: Sequence[Sequence[str]],
    carriers: Sequence[str],
    cue_rate: float = 0.5,
    seed: int = 0,
    exclude: Iterable[str] = (),
    known_fraction: float = 1.0,
) -> list[str]:
    """Unlabeled text in the synthetic language, for base-model pretraining.

    A ``cue_rate`` share of documents wrap the review in one of the
    ``carriers`` (templates with ``[MASK]`` and ``{x}`` slots) whose mask slot
    holds a sentiment word of the review's polarity.  This is the world
    knowledge a pretrained model brings to prompt-based classification.

    Only the first ``known_fraction`` of each label's signal words keep their
    polarity here; the others still occur, but in reviews of either label, so
    the base model knows them as words without knowing what they signal.
    """
    if not 0 <= known_fraction <= 1:
        raise ValueError("known_fraction must lie in [0, 1]")
    lang = SyntheticLanguage.make(vocab_size, signal_words_per_label, exclude=exclude)
    n_known = int(round(known_fraction * signal_words_per_label))
    unknown = [w for ws in lang.signal for w in ws[n_known:]]
    hidden = set(unknown)
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n):
        label = int(rng.integers(2))
        words = lang.review(label, rng)
        if hidden:
            words = [unknown[int(rng.integers(len(unknown)))] if w in hidden else w for w in words]
        body = " ".join(words)
        if carriers and rng.random() < cue_rate:
            tmpl = carriers[int(rng.integers(len(carriers)))]
            words = sentiment_words[label]
            body = tmpl.replace("[MASK]", words[int(rng.integers(len(words)))]).replace("{x}", body)
        docs.append(body)
    return docs


def label_balance(examples: Sequence[Example]) -> float:
    return float(np.mean([e.label for e in examples]))
