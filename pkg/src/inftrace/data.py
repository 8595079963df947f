"""Corpora, vocabularies, lexicons and the synthetic sentiment corpus."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

UNK = "<unk>"
UNK_ID = 0


class CorpusFormatError(ValueError):
    pass


class LexiconFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "label", int(self.label))

    def __len__(self):
        return len(self.tokens)

    def substitute(self, position: int, token: int) -> "Example":
        tokens = list(self.tokens)
        tokens[position] = token
        return Example(tuple(tokens), self.label)


class Vocab:
    """Token string <-> id bijection with ``<unk>`` fixed at id 0."""

    def __init__(self, words=()):
        self.words: list[str] = [UNK]
        self.ids: dict[str, int] = {UNK: UNK_ID}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.ids:
            self.ids[word] = len(self.words)
            self.words.append(word)
        return self.ids[word]

    def id(self, word: str) -> int:
        return self.ids.get(word, UNK_ID)

    def word(self, idx: int) -> str:
        return self.words[idx]

    def encode(self, words) -> tuple[int, ...]:
        return tuple(self.id(w) for w in words)

    def decode(self, ids) -> list[str]:
        return [self.words[i] for i in ids]

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.ids

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.words == other.words


@dataclass
class Dataset:
    """Ordered examples; an example's id is its list position."""

    examples: list[Example]
    vocab: Vocab
    split: str = "train"

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i) -> Example:
        return self.examples[i]

    def __iter__(self):
        return iter(self.examples)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.split == other.split
                and self.vocab == other.vocab and self.examples == other.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([z.label for z in self.examples], dtype=np.int_)

    def with_examples(self, examples) -> "Dataset":
        return Dataset(list(examples), self.vocab, self.split)

    def text(self, z: Example) -> list[str]:
        return self.vocab.decode(z.tokens)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"text": self.text(z), "label": z.label}, separators=(",", ":"))
                 for z in self.examples]
        return "".join(line + "\n" for line in lines)

    def fingerprint(self) -> int:
        return fnv1a_64(self.to_jsonl().encode("utf-8"))


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def atomic_write(path, data) -> None:
    """Write bytes or text to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_records(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                text, label = rec["text"], rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(text, list) or not text or not all(isinstance(w, str) for w in text):
                raise CorpusFormatError(f"{path}:{lineno}: 'text' must be a non-empty array of strings")
            if isinstance(label, bool) or not isinstance(label, int) or label < 0:
                raise CorpusFormatError(f"{path}:{lineno}: unknown label value {label!r}")
            records.append((lineno, text, label))
    return records


def load_corpus(path, vocab: Vocab | None = None, split: str | None = None,
                num_classes: int | None = None) -> Dataset:
    """Load a line-delimited corpus.

    Without ``vocab`` the file is treated as the training split and the
    vocabulary is built from it in first-appearance order.  With ``vocab``
    (dev/test splits) out-of-vocabulary tokens map to ``<unk>``.
    """
    records = _parse_records(path)
    if vocab is None:
        vocab = Vocab()
        for _, text, _ in records:
            for w in text:
                vocab.add(w)
        split = split or "train"
    examples = []
    for lineno, text, label in records:
        if num_classes is not None and label >= num_classes:
            raise CorpusFormatError(f"{path}:{lineno}: unknown label value {label} (expected < {num_classes})")
        examples.append(Example(vocab.encode(text), label))
    return Dataset(examples, vocab, split or "test")


def save_corpus(dataset: Dataset, path) -> None:
    atomic_write(path, dataset.to_jsonl())


# --------------------------------------------------------------------------
# lexicon


@dataclass
class Lexicon:
    """Word -> (synonyms, antonyms)."""

    entries: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = field(default_factory=dict)

    def synonyms(self, word) -> tuple[str, ...]:
        return self.entries.get(word, ((), ()))[0]

    def antonyms(self, word) -> tuple[str, ...]:
        return self.entries.get(word, ((), ()))[1]

    def to_tsv(self) -> str:
        lines = []
        for head, (syn, ant) in self.entries.items():
            line = f"{head}\t{','.join(syn)}"
            if ant:
                line += f"\t{','.join(ant)}"
            lines.append(line + "\n")
        return "".join(lines)

    def resolve(self, vocab: Vocab, antonyms: bool = False) -> "ResolvedLexicon":
        """Map entries to vocabulary ids, dropping words the vocabulary lacks."""
        table, dropped = {}, 0
        for head, (syn, ant) in self.entries.items():
            if head not in vocab:
                dropped += 1
                continue
            words = list(syn) + (list(ant) if antonyms else [])
            ids = []
            for w in words:
                if w in vocab and w != head:
                    if vocab.id(w) not in ids:
                        ids.append(vocab.id(w))
                else:
                    dropped += 1
            if ids:
                table[vocab.id(head)] = tuple(ids)
        if dropped:
            log.warning("lexicon: %d words not in vocabulary were dropped", dropped)
        return ResolvedLexicon(table, dropped)


@dataclass
class ResolvedLexicon:
    table: dict[int, tuple[int, ...]]
    dropped: int = 0

    def candidates(self, token: int) -> tuple[int, ...]:
        return self.table.get(token, ())

    def covered(self, z: Example) -> list[int]:
        return [i for i, t in enumerate(z.tokens) if t in self.table]


def _split_words(field_text):
    return tuple(w.strip() for w in field_text.split(",") if w.strip())


def load_lexicon(path) -> Lexicon:
    """Parse ``headword<TAB>syn,syn[<TAB>ant,ant]`` lines."""
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2 or len(parts) > 3 or not parts[0].strip():
                raise LexiconFormatError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            head = parts[0].strip()
            if head in entries:
                raise LexiconFormatError(f"{path}:{lineno}: duplicate headword {head!r}")
            syn = tuple(w for w in _split_words(parts[1]) if w != head)
            ant = tuple(w for w in _split_words(parts[2]) if w != head) if len(parts) == 3 else ()
            entries[head] = (syn, ant)
    return Lexicon(entries)


def save_lexicon(lexicon: Lexicon, path) -> None:
    atomic_write(path, lexicon.to_tsv())


# --------------------------------------------------------------------------
# synthetic corpus

POSITIVE = ("good", "great", "fine", "nice", "excellent", "superb", "lovely", "wonderful")
NEGATIVE = ("bad", "awful", "poor", "terrible", "horrible", "dreadful", "lousy", "nasty")
FILLERS = (
    "movie", "film", "picture", "feature",
    "plot", "story", "script", "narrative",
    "actor", "actress", "performer", "cast",
    "scene", "sequence", "shot", "moment",
    "director", "filmmaker", "auteur", "helmer",
    "music", "score", "soundtrack", "song",
    "ending", "finale", "conclusion", "climax",
    "dialogue", "lines", "conversation", "talk",
    "camera", "lens", "frame", "angle",
    "the", "a", "this", "that",
)
_CLUSTER = 4


def synth_lexicon() -> Lexicon:
    entries = {}
    for words, opposite in ((POSITIVE, NEGATIVE), (NEGATIVE, POSITIVE)):
        for i, w in enumerate(words):
            syn = tuple(words[(i + k) % len(words)] for k in (1, 2, 3))
            ant = tuple(opposite[(i + k) % len(opposite)] for k in (0, 1))
            entries[w] = (syn, ant)
    for c in range(0, len(FILLERS), _CLUSTER):
        group = FILLERS[c:c + _CLUSTER]
        for w in group:
            entries[w] = (tuple(x for x in group if x != w), ())
    return Lexicon(entries)


def synth_corpus(seed: int, n_train: int, n_dev: int, n_test: int, noise: float = 0.0):
    """Planted-rule two-class corpus.

    Each example holds 5-15 filler tokens plus exactly one polarity word at
    a random position; the label equals the word's polarity with
    probability ``1 - noise``.

    Returns:
        (train, dev, test, lexicon); dev/test share the train vocabulary.
    """
    if min(n_train, n_dev, n_test) < 1:
        raise ValueError("split sizes must be >= 1")
    if not 0.0 <= noise < 0.5:
        raise ValueError("noise must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)

    def draw(n):
        rows = []
        for _ in range(n):
            polarity = int(rng.integers(2))
            words = list(rng.choice(FILLERS, size=int(rng.integers(5, 16))))
            pool = POSITIVE if polarity == 1 else NEGATIVE
            words.insert(int(rng.integers(len(words) + 1)), pool[int(rng.integers(len(pool)))])
            label = polarity if rng.random() >= noise else 1 - polarity
            rows.append(([str(w) for w in words], label))
        return rows

    train_rows, dev_rows, test_rows = draw(n_train), draw(n_dev), draw(n_test)
    vocab = Vocab()
    for words, _ in train_rows:
        for w in words:
            vocab.add(w)

    def build(rows, split):
        return Dataset([Example(vocab.encode(words), label) for words, label in rows], vocab, split)

    return build(train_rows, "train"), build(dev_rows, "dev"), build(test_rows, "test"), synth_lexicon()


def planted_rule(dataset: Dataset) -> np.ndarray:
    """Bag-of-words rule: label 1 iff the example holds a positive word."""
    pos = {dataset.vocab.id(w) for w in POSITIVE if w in dataset.vocab}
    return np.array([int(any(t in pos for t in z.tokens)) for z in dataset], dtype=np.int_)
