"""Tokenization, match features, vocabulary, embeddings and dataset I/O."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .stemmer import porter_stem

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
FEATURE_NAMES = ("ee", "es", "es-fuzzy")

_PUNCT = ".,!?;:'\""
_TOKEN_RE = re.compile(r"[" + re.escape(_PUNCT) + r"]|[^\s" + re.escape(_PUNCT) + r"]+")


class DataError(ValueError):
    """Malformed dataset, embedding or feature file."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and split off ``.,!?;:'"``."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class StoryInstance:
    id: str
    sentences: list[list[str]]
    ending1: list[str]
    ending2: list[str]
    label: int

    @property
    def story_tokens(self) -> list[str]:
        return [tok for sent in self.sentences for tok in sent]

    def endings(self) -> tuple[list[str], list[str]]:
        return self.ending1, self.ending2

    def swapped(self) -> "StoryInstance":
        return replace(self, ending1=self.ending2, ending2=self.ending1, label=3 - self.label)


def validate_instance(inst: StoryInstance, n_sentences: int | None = 4) -> None:
    if n_sentences is not None and len(inst.sentences) != n_sentences:
        raise DataError(f"instance {inst.id!r}: expected {n_sentences} sentences, got {len(inst.sentences)}")
    if not inst.ending1 or not inst.ending2:
        raise DataError(f"instance {inst.id!r}: empty ending")
    if inst.label not in (1, 2):
        raise DataError(f"instance {inst.id!r}: label must be 1 or 2, got {inst.label!r}")


# ------------------------------------------------------------------ features


@dataclass(frozen=True)
class FeatureAnnotation:
    ee: tuple[int, ...]
    es: tuple[int, ...]
    es_fuzzy: tuple[int, ...]

    def __len__(self):
        return len(self.ee)

    def matrix(self, enabled: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
        cols = {"ee": self.ee, "es": self.es, "es-fuzzy": self.es_fuzzy}
        if not enabled:
            return np.zeros((len(self), 0))
        return np.array([cols[name] for name in enabled], dtype=np.float64).T.reshape(len(self), len(enabled))


def compute_features(ending: Sequence[str], other_ending: Sequence[str], story: Sequence[str]) -> FeatureAnnotation:
    other = set(other_ending)
    story_set = set(story)
    story_stems = {porter_stem(w) for w in story_set}
    return FeatureAnnotation(
        ee=tuple(int(t in other) for t in ending),
        es=tuple(int(t in story_set) for t in ending),
        es_fuzzy=tuple(int(porter_stem(t) in story_stems) for t in ending),
    )


def instance_features(inst: StoryInstance) -> tuple[FeatureAnnotation, FeatureAnnotation]:
    story = inst.story_tokens
    return (compute_features(inst.ending1, inst.ending2, story),
            compute_features(inst.ending2, inst.ending1, story))


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    itos: list[str] = field(default_factory=lambda: [PAD_TOKEN, UNK_TOKEN])
    stoi: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.itos[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("ids 0 and 1 are reserved for PAD and UNK")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    @classmethod
    def build(cls, instances: Iterable[StoryInstance]) -> "Vocabulary":
        vocab = cls()
        for inst in instances:
            for tok in inst.story_tokens + inst.ending1 + inst.ending2:
                vocab.add(tok)
        return vocab


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    trainable: bool = True
    found: int = 0
    oov: int = 0

    @property
    def coverage(self) -> float:
        total = self.found + self.oov
        return self.found / total if total else 0.0


def init_embeddings(vocab_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    values = rng.uniform(-0.05, 0.05, size=(vocab_size, dim))
    values[PAD] = 0.0
    return values


def load_embeddings(path, vocab: Vocabulary, rng: np.random.Generator, dim: int | None = None) -> EmbeddingMatrix:
    """Read a GloVe-format text file; OOV rows are uniform(-0.05, 0.05)."""
    rows: dict[int, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").split()
            if not fields:
                continue
            if len(fields) < 2:
                raise DataError(f"{path}:{lineno}: expected a token followed by numbers")
            if dim is None:
                dim = len(fields) - 1
            elif len(fields) - 1 != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(fields) - 1}")
            try:
                vec = np.array([float(x) for x in fields[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
            idx = vocab.stoi.get(fields[0])
            if idx is not None and idx > UNK:
                rows[idx] = vec
    if dim is None:
        raise DataError(f"{path}: empty embedding file and no dimension given")
    values = init_embeddings(len(vocab), dim, rng)
    for idx, vec in rows.items():
        values[idx] = vec
    return EmbeddingMatrix(values=values, found=len(rows), oov=len(vocab) - 2 - len(rows))


# -------------------------------------------------------------- dataset I/O


def instance_from_json(obj: dict, where: str = "") -> StoryInstance:
    ident = str(obj.get("id", where))
    sentences = obj.get("sentences")
    if not isinstance(sentences, list) or len(sentences) != 4:
        n = len(sentences) if isinstance(sentences, list) else "no"
        raise DataError(f"instance {ident!r}: expected 4 sentences, got {n}")
    inst = StoryInstance(
        id=ident,
        sentences=[tokenize(s) for s in sentences],
        ending1=tokenize(obj.get("ending1", "")),
        ending2=tokenize(obj.get("ending2", "")),
        label=obj.get("label"),
    )
    validate_instance(inst)
    return inst


def instance_to_json(inst: StoryInstance) -> dict:
    return {
        "id": inst.id,
        "sentences": [" ".join(s) for s in inst.sentences],
        "ending1": " ".join(inst.ending1),
        "ending2": " ".join(inst.ending2),
        "label": inst.label,
    }


def load_dataset(path) -> list[StoryInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            out.append(instance_from_json(obj, where=f"line {lineno}"))
    return out


def save_dataset(instances: Iterable[StoryInstance], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_json(inst)) + "\n")


def load_external_features(path, dim: int) -> dict[tuple[str, int], np.ndarray]:
    """Per-ending vectors keyed by ``(instance id, ending index)``."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            vec = np.asarray(obj["vector"], dtype=np.float64)
            if vec.shape != (dim,):
                raise DataError(f"{path}:{lineno}: vector width {vec.size} != external_feature_dim {dim}")
            ending = int(obj["ending"])
            if ending not in (1, 2):
                raise DataError(f"{path}:{lineno}: ending index must be 1 or 2")
            table[(str(obj["id"]), ending)] = vec
    return table


# ---------------------------------------------------------------- transforms

TRANSFORM_MODES = ("identity", "drop-1", "drop-2", "drop-3", "drop-4", "ending-only", "reverse", "random-order")


def transform_instance(inst: StoryInstance, mode: str, rng: np.random.Generator | None = None) -> StoryInstance:
    sents = [list(s) for s in inst.sentences]
    m = re.fullmatch(r"drop(?:-sentence)?-(\d)", mode)
    if mode == "identity":
        new = sents
    elif m:
        k = int(m.group(1))
        if not 1 <= k <= len(sents):
            raise ValueError(f"cannot drop sentence {k} from a {len(sents)}-sentence story")
        new = sents[: k - 1] + sents[k:]
    elif mode == "ending-only":
        new = []
    elif mode == "reverse":
        new = sents[::-1]
    elif mode == "random-order":
        if rng is None:
            raise ValueError("random-order needs an rng")
        new = [sents[i] for i in rng.permutation(len(sents))]
    else:
        raise ValueError(f"unknown transform mode {mode!r}; expected one of {TRANSFORM_MODES}")
    return replace(inst, sentences=new)


def transform_dataset(instances: Sequence[StoryInstance], mode: str, seed: int = 0) -> list[StoryInstance]:
    rng = np.random.default_rng(seed)
    return [transform_instance(inst, mode, rng) for inst in instances]


# ----------------------------------------------------------------- synthetic

NAMES = ["anna", "ben", "carla", "dave", "emma", "frank", "gina", "hugo", "iris", "jack"]
POSITIVE = ["happy", "glad", "proud", "cheerful", "delighted", "thrilled"]
NEGATIVE = ["sad", "angry", "upset", "gloomy", "furious", "miserable"]
FILLERS = [
    "{name} went to the market on monday .",
    "{name} wanted to buy a new bike .",
    "the weather was cold that morning .",
    "{name} called a friend after lunch .",
    "there was a long line at the store .",
    "{name} walked home along the river .",
    "the bus arrived a little late .",
    "{name} had saved money for weeks .",
    "a neighbor stopped by to say hello .",
    "{name} read the newspaper at breakfast .",
    "the town was busy with visitors .",
    "{name} cleaned the kitchen before dinner .",
]
CUES = [
    "in the end {name} felt {word} about it .",
    "afterwards {name} was {word} with the result .",
    "the whole day left {name} {word} .",
]
ENDINGS = [
    "{name} was very {word} .",
    "{name} went to bed feeling {word} .",
    "{name} told everyone how {word} the day was .",
]


def generate_synthetic(n: int, seed: int, cue_position_prob: float = 1.0) -> list[StoryInstance]:
    """Stories whose only signal is one sentiment cue sentence.

    The real ending repeats the cue's sentiment word; the fake ending carries
    a word of the opposite polarity and is otherwise identical.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 <= cue_position_prob <= 1.0:
        raise ValueError("cue_position_prob must be a probability")
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (n // 2) + [2] * (n - n // 2))
    rng.shuffle(labels)
    out = []
    for i in range(n):
        name = NAMES[rng.integers(len(NAMES))]
        positive = bool(rng.integers(2))
        real_pool, fake_pool = (POSITIVE, NEGATIVE) if positive else (NEGATIVE, POSITIVE)
        word = real_pool[rng.integers(len(real_pool))]
        cue = CUES[rng.integers(len(CUES))].format(name=name, word=word)
        fillers = [FILLERS[j].format(name=name) for j in rng.choice(len(FILLERS), size=3, replace=False)]
        pos = 3 if rng.random() < cue_position_prob else int(rng.integers(3))
        sentences = fillers[:pos] + [cue] + fillers[pos:]
        template = ENDINGS[rng.integers(len(ENDINGS))]
        real = template.format(name=name, word=word)
        fake = template.format(name=name, word=fake_pool[rng.integers(len(fake_pool))])
        label = int(labels[i])
        e1, e2 = (real, fake) if label == 1 else (fake, real)
        out.append(StoryInstance(
            id=f"syn{seed}-{i:05d}",
            sentences=[tokenize(s) for s in sentences],
            ending1=tokenize(e1),
            ending2=tokenize(e2),
            label=label,
        ))
    return out
