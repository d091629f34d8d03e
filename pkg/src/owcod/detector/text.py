"""Word-level tokenizer and the dot-joined class sentence."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import DataError

SEPARATOR = "."
CLASS_JOIN = ". "


def words_of(name: str) -> list[str]:
    return name.replace(SEPARATOR, " ").split()


def build_vocab(class_names) -> tuple[str, ...]:
    """Sorted word table over ``class_names`` with the separator first."""
    words = {w for n in class_names for w in words_of(n)}
    return (SEPARATOR,) + tuple(sorted(words))


@dataclass(frozen=True)
class ClassSentence:
    names: tuple
    text: str
    token_ids: tuple
    spans: tuple  # per class: (start, stop) token range

    def __len__(self) -> int:
        return len(self.token_ids)


def build_class_sentence(names, vocab) -> ClassSentence:
    names = tuple(names)
    if not names:
        raise DataError("class sentence needs at least one class name")
    if len(set(names)) != len(names):
        raise DataError(f"duplicate class names in {list(names)}")
    index = {w: i for i, w in enumerate(vocab)}
    ids, spans = [], []
    for k, name in enumerate(names):
        if k:
            ids.append(index[SEPARATOR])
        words = words_of(name)
        if not words:
            raise DataError(f"class name {name!r} has no tokens")
        start = len(ids)
        for w in words:
            if w not in index:
                raise DataError(f"token {w!r} not in vocabulary")
            ids.append(index[w])
        spans.append((start, len(ids)))
    return ClassSentence(names, CLASS_JOIN.join(names), tuple(ids), tuple(spans))
