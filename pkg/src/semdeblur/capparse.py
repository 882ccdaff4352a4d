"""Caption parsing: POS tagging, seven-node tree labels, and vocabularies.

Captions are reduced to a fixed three-layer binary tree with seven slots:

    1=Subj1  2=sRel1  3=Obj1  4=rRel  5=Subj2  6=sRel2  7=Obj2

Nouns fill the entity slots (1, 3, 5, 7) in reading order; the relation
words found between two consecutive nouns fill the relation slot that
joins them (2, 4, 6). A verb immediately followed by a preposition is
merged into a single relation item "<verb>_P". Unfilled slots and
out-of-vocabulary words map to the "null" id.

Tagging is driven by a bundled word->POS lexicon plus a small rule
lemmatizer, so the whole pipeline is deterministic.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import EmptyInput, LabelError

NOUN = "NOUN"
VERB = "VERB"
PREP = "PREP"
CONJ = "CONJ"
OTHER = "OTHER"
POS_TAGS = (NOUN, VERB, PREP, CONJ, OTHER)
RELATION_TAGS = frozenset({VERB, PREP, CONJ})

ENTITY_NODES = (1, 3, 5, 7)
RELATION_NODES = (2, 4, 6)
NULL_WORD = "null"

_WORD_RE = re.compile(r"[a-z0-9']+")


@dataclass(frozen=True)
class TaggedToken:
    surface: str
    lemma: str
    pos: str

    def __post_init__(self):
        if not self.surface or not self.lemma:
            raise ValueError("token surface and lemma must be non-empty")
        if self.pos not in POS_TAGS:
            raise ValueError(f"unknown POS tag {self.pos!r}")


class Lexicon:
    """Word -> (tag, lemma) lookup with rule-based inflection stripping."""

    def __init__(self, entries: Mapping[str, tuple[str, str]]):
        self.entries = dict(entries)

    @classmethod
    def bundled(cls) -> "Lexicon":
        path = resources.files("semdeblur.data") / "pos_lexicon.tsv"
        return cls.parse(path.read_text(encoding="utf-8"))

    @classmethod
    def parse(cls, text: str) -> "Lexicon":
        entries: dict[str, tuple[str, str]] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            word, tag = parts[0], parts[1]
            lemma = parts[2] if len(parts) > 2 else word
            entries[word] = (tag, lemma)
        return cls(entries)

    def lookup(self, word: str) -> tuple[str, str]:
        """Return (tag, lemma) for a lowercase word; OTHER for unknowns."""
        hit = self.entries.get(word)
        if hit is not None:
            return hit
        for stem in _inflection_stems(word):
            hit = self.entries.get(stem)
            if hit is not None:
                return hit[0], hit[1]
        return OTHER, word


def _inflection_stems(word: str) -> list[str]:
    """Candidate base forms for a regularly inflected word, best-guess first."""
    stems: list[str] = []

    def add(s: str):
        if len(s) >= 2 and s not in stems:
            stems.append(s)

    if word.endswith("ies"):
        add(word[:-3] + "y")
    if word.endswith(("sses", "shes", "ches", "xes", "zes", "oes")):
        add(word[:-2])
    if word.endswith("es"):
        add(word[:-1])  # e.g. "rides" handled below, "horses" -> "horse"
        add(word[:-2])
    if word.endswith("s") and not word.endswith("ss"):
        add(word[:-1])
    if word.endswith("ing"):
        stem = word[:-3]
        add(stem)
        add(stem + "e")  # riding -> ride
        if len(stem) >= 2 and stem[-1] == stem[-2]:
            add(stem[:-1])  # running -> run
    if word.endswith("ed"):
        stem = word[:-2]
        add(stem)
        add(word[:-1])  # raced -> race
        if len(stem) >= 2 and stem[-1] == stem[-2]:
            add(stem[:-1])  # stopped -> stop
    return stems


_BUNDLED: Lexicon | None = None


def bundled_lexicon() -> Lexicon:
    global _BUNDLED
    if _BUNDLED is None:
        _BUNDLED = Lexicon.bundled()
    return _BUNDLED


def tag_caption(caption: str, lexicon: Lexicon | None = None) -> list[TaggedToken]:
    """Tokenize and tag a caption. Raises EmptyInput on empty/blank text."""
    if not caption or not caption.strip():
        raise EmptyInput("caption is empty")
    lexicon = lexicon or bundled_lexicon()
    tokens = []
    for word in _WORD_RE.findall(caption.lower()):
        tag, lemma = lexicon.lookup(word)
        tokens.append(TaggedToken(surface=word, lemma=lemma, pos=tag))
    return tokens


class Vocab:
    """Ordered word list with a reserved "null" entry at id 0."""

    ENTITY = "ENTITY"
    RELATION = "RELATION"

    def __init__(self, kind: str, words: Sequence[str]):
        if kind not in (self.ENTITY, self.RELATION):
            raise ValueError(f"unknown vocab kind {kind!r}")
        words = list(words)
        if words.count(NULL_WORD) != 1 or words[0] != NULL_WORD:
            raise ValueError('vocab must contain "null" exactly once, at id 0')
        if len(set(words)) != len(words):
            raise ValueError("vocab words must be unique")
        self.kind = kind
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        self.null_id = self.index[NULL_WORD]

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        """Id of a word, falling back to the null id for OOV words."""
        return self.index.get(word, self.null_id)

    def word_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.words):
            raise LabelError(f"id {idx} out of range for {self.kind} vocab")
        return self.words[idx]

    @classmethod
    def from_counts(cls, kind: str, counts: Mapping[str, int], min_freq: int,
                    synonyms: Mapping[str, str] | None = None) -> "Vocab":
        """Frequency-filtered vocab: descending count, ties alphabetical."""
        merged: Counter = Counter()
        for word, n in counts.items():
            if synonyms:
                word = synonyms.get(word, word)
            if word != NULL_WORD:
                merged[word] += n
        kept = sorted((w for w, n in merged.items() if n >= min_freq),
                      key=lambda w: (-merged[w], w))
        return cls(kind, [NULL_WORD] + kept)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for word in self.words:
                f.write(word + "\n")

    @classmethod
    def load(cls, path, kind: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            words = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(kind, words)


@dataclass(frozen=True)
class CaptionTreeLabels:
    """Category id per tree node, indexed by node id 1..7."""

    node_labels: tuple[int, int, int, int, int, int, int]

    def __getitem__(self, node_id: int) -> int:
        return self.node_labels[node_id - 1]

    def validate(self, ent_vocab: Vocab, rel_vocab: Vocab) -> None:
        for node_id in ENTITY_NODES:
            if not 0 <= self[node_id] < len(ent_vocab):
                raise LabelError(f"node {node_id} label {self[node_id]} outside entity vocab")
        for node_id in RELATION_NODES:
            if not 0 <= self[node_id] < len(rel_vocab):
                raise LabelError(f"node {node_id} label {self[node_id]} outside relation vocab")


def caption_items(tokens: Iterable[TaggedToken]) -> list[tuple[str, str]]:
    """Reduce tagged tokens to an alternating (kind, lemma) item stream.

    Produces ("E", lemma) for nouns and ("R", lemma) for relation words,
    dropping OTHER tokens and merging VERB+PREP pairs that are adjacent
    after the drop into "<verb>_P".
    """
    kept = [t for t in tokens if t.pos == NOUN or t.pos in RELATION_TAGS]
    items: list[tuple[str, str]] = []
    i = 0
    while i < len(kept):
        tok = kept[i]
        if tok.pos == NOUN:
            items.append(("E", tok.lemma))
            i += 1
        elif tok.pos == VERB and i + 1 < len(kept) and kept[i + 1].pos == PREP:
            items.append(("R", tok.lemma + "_P"))
            i += 2
        else:
            items.append(("R", tok.lemma))
            i += 1
    return items


def prune_to_tree(tokens: Sequence[TaggedToken], ent_vocab: Vocab,
                  rel_vocab: Vocab) -> CaptionTreeLabels:
    """Fill the seven tree slots from a tagged token sequence.

    Total function: any token list yields seven in-range ids; missing or
    out-of-vocabulary words become the null id.
    """
    ent_lemmas: list[str | None] = [None] * 4
    rel_lemmas: list[str | None] = [None] * 3
    n_nouns = 0
    pending: list[str] = []
    for kind, lemma in caption_items(tokens):
        if kind == "E":
            if n_nouns >= 4:
                break
            ent_lemmas[n_nouns] = lemma
            if n_nouns >= 1 and pending:
                rel_lemmas[n_nouns - 1] = pending[0]
            pending = []
            n_nouns += 1
        else:
            pending.append(lemma)

    labels = [0] * 7
    for slot, node_id in enumerate(ENTITY_NODES):
        lemma = ent_lemmas[slot]
        labels[node_id - 1] = ent_vocab.id_of(lemma) if lemma is not None else ent_vocab.null_id
    for slot, node_id in enumerate(RELATION_NODES):
        lemma = rel_lemmas[slot]
        labels[node_id - 1] = rel_vocab.id_of(lemma) if lemma is not None else rel_vocab.null_id
    return CaptionTreeLabels(tuple(labels))


def load_synonym_map(path) -> dict[str, str]:
    """Optional "word<TAB>canonical" merge table applied during vocab builds."""
    table: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            word, canonical = line.split("\t")[:2]
            table[word] = canonical
    return table


def build_vocabs(captions: Iterable[str], min_freq: int,
                 lexicon: Lexicon | None = None,
                 synonyms: Mapping[str, str] | None = None) -> tuple[Vocab, Vocab]:
    """Entity and relation vocabularies from a caption corpus."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    ent_counts: Counter = Counter()
    rel_counts: Counter = Counter()
    n = 0
    for caption in captions:
        n += 1
        for kind, lemma in caption_items(tag_caption(caption, lexicon)):
            (ent_counts if kind == "E" else rel_counts)[lemma] += 1
    if n == 0:
        raise EmptyInput("caption corpus is empty")
    ent = Vocab.from_counts(Vocab.ENTITY, ent_counts, min_freq, synonyms)
    rel = Vocab.from_counts(Vocab.RELATION, rel_counts, min_freq, synonyms)
    return ent, rel
