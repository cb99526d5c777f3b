"""Unified token format for multi-modal user histories.

An item becomes ``[IMG] k1 v1 ... km vm [EOC]`` (``[IMG]`` only when the item
has an image); a user sentence is ``[CLS]`` followed by the flattened chunks
of the most recent items. Task prompts append an instruction (which may embed
further item chunks) terminated by ``[BOS]``; the response follows.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, UNK, CLS, IMG, EOC, BOS = "[PAD]", "[UNK]", "[CLS]", "[IMG]", "[EOC]", "[BOS]"
SPECIALS = (PAD, UNK, CLS, IMG, EOC, BOS)

CONTEXT, INSTRUCTION, RESPONSE, PADDING = 0, 1, 2, 3
SEGMENT_NAMES = ("context", "instruction", "response", "padding")

TASKS = ("rec", "pref", "expl", "select", "search", "imgen")
RATING_WORDS = ("1", "2", "3", "4", "5")

# {item}, {items}, {query}, {retrieved} are placeholders filled at build time.
TEMPLATES = {
    "rec": "which item would this user want next ?",
    "pref": "for {item} what rating from 1 to 5 would this user give the product ?",
    "expl": "for {item} tell the user why the product does or does not fit them .",
    "select": "among {items} pick every item this user would choose .",
    "search": "query : {query} . find items matching this query and the user history .",
    "imgen": "retrieved : {retrieved} query : {query} . draw a product image this user would like .",
}

_WORD_RE = re.compile(r"\w+|[^\w\s]")
_PLACEHOLDER_RE = re.compile(r"(\{item\}|\{items\}|\{query\}|\{retrieved\})")


class CodecError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lower-cased word/punctuation tokens."""
    return _WORD_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


def template_digest() -> str:
    blob = "\n".join(f"{k}\t{TEMPLATES[k]}" for k in TASKS)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    attributes: tuple[tuple[str, str], ...] = ()
    image_ref: str | None = None

    def __post_init__(self):
        if not self.item_id:
            raise CodecError("item_id must be non-empty")
        object.__setattr__(self, "attributes", tuple((str(k), str(v)) for k, v in self.attributes))
        for k, _ in self.attributes:
            if not k.strip():
                raise CodecError(f"item {self.item_id}: empty attribute key")

    def attr(self, key: str, default: str = "") -> str:
        for k, v in self.attributes:
            if k == key:
                return v
        return default


class Vocabulary:
    """Specials, then sorted words, then one token per item, then image codes."""

    def __init__(self, words: Iterable[str], item_ids: Sequence[str], num_codes: int):
        words = sorted(set(words) - set(SPECIALS))
        for w in words:
            if w.startswith("<item:") or re.fullmatch(r"<v\d+>", w):
                raise CodecError(f"word token {w!r} collides with reserved token forms")
        self.item_ids = list(item_ids)
        if len(set(self.item_ids)) != len(self.item_ids):
            raise CodecError("duplicate item ids")
        self.num_codes = num_codes
        self.tokens: list[str] = list(SPECIALS) + words
        self.item_offset = len(self.tokens)
        self.tokens += [f"<item:{i}>" for i in self.item_ids]
        self.code_offset = len(self.tokens)
        self.tokens += [f"<v{k}>" for k in range(num_codes)]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CodecError("vocabulary is not bijective")
        self._item_index = {iid: self.item_offset + n for n, iid in enumerate(self.item_ids)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def word_ids(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def item_token(self, item_id: str) -> int:
        try:
            return self._item_index[item_id]
        except KeyError:
            raise CodecError(f"unknown item id {item_id!r}") from None

    def code_token(self, k: int) -> int:
        if not 0 <= k < self.num_codes:
            raise CodecError(f"image code {k} outside [0, {self.num_codes})")
        return self.code_offset + k

    def is_item(self, tid: int) -> bool:
        return self.item_offset <= tid < self.code_offset

    def is_code(self, tid: int) -> bool:
        return self.code_offset <= tid < len(self.tokens)

    def item_of(self, tid: int) -> str:
        if not self.is_item(tid):
            raise CodecError(f"token {tid} is not an item token")
        return self.item_ids[tid - self.item_offset]

    def item_token_range(self) -> range:
        return range(self.item_offset, self.code_offset)

    def code_token_range(self) -> range:
        return range(self.code_offset, len(self.tokens))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def build_vocabulary(
    items: Sequence[ItemRecord], extra_texts: Iterable[str] = (), num_codes: int = 64
) -> Vocabulary:
    words: set[str] = set(RATING_WORDS)
    for tmpl in TEMPLATES.values():
        words.update(tokenize(_PLACEHOLDER_RE.sub(" ", tmpl)))
    for it in items:
        for k, v in it.attributes:
            words.update(tokenize(k))
            words.update(tokenize(v))
    for text in extra_texts:
        words.update(tokenize(text))
    return Vocabulary(words, [it.item_id for it in items], num_codes)


@dataclass
class EncodedSequence:
    token_ids: list[int] = field(default_factory=list)
    image_slots: list[tuple[int, str]] = field(default_factory=list)
    item_spans: list[tuple[int, int, int | None]] = field(default_factory=list)
    segment_labels: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)

    def copy(self) -> "EncodedSequence":
        return EncodedSequence(
            list(self.token_ids), list(self.image_slots), list(self.item_spans), list(self.segment_labels)
        )

    def append_tokens(self, ids: Sequence[int], label: int) -> None:
        self.token_ids.extend(ids)
        self.segment_labels.extend([label] * len(ids))

    def append_item(self, item: ItemRecord, vocab: Vocabulary, c: int, label: int) -> None:
        start = len(self.token_ids)
        toks = flatten_item(item, c)
        slot = None
        if item.image_ref is not None:
            slot = len(self.image_slots)
            self.image_slots.append((start, item.image_ref))
        self.append_tokens([vocab.id(t) for t in toks], label)
        self.item_spans.append((start, len(self.token_ids), slot))

    def validate(self, vocab: Vocabulary | None = None) -> None:
        if len(self.segment_labels) != len(self.token_ids):
            raise CodecError("segment_labels length differs from token count")
        prev_end = 0
        for start, end, _ in self.item_spans:
            if start < prev_end or end <= start:
                raise CodecError(f"item spans overlap or are unordered at ({start}, {end})")
            prev_end = end
        for j, (pos, _) in enumerate(self.image_slots):
            owners = [s for s in self.item_spans if s[2] == j]
            if len(owners) != 1 or not owners[0][0] <= pos < owners[0][1]:
                raise CodecError(f"image slot {j} at {pos} is not inside exactly one item span")
        if vocab is not None:
            img = vocab.index[IMG]
            if sum(1 for t in self.token_ids if t == img) != len(self.image_slots):
                raise CodecError("[IMG] count differs from image slot count")
            if any(self.token_ids[p] != img for p, _ in self.image_slots):
                raise CodecError("image slot does not point at an [IMG] token")


@dataclass
class TaskInstance:
    task: str
    input: EncodedSequence
    target: list[int]
    weight: float = 1.0
    user_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise CodecError(f"unknown task tag {self.task!r}")
        if not self.target:
            raise CodecError(f"{self.task} instance has an empty target")

    def training_sequence(self, vocab: Vocabulary) -> EncodedSequence:
        """Prompt followed by the response ``target + [EOC]``."""
        seq = self.input.copy()
        seq.append_tokens(list(self.target) + [vocab.index[EOC]], RESPONSE)
        return seq


def flatten_item(item: ItemRecord, c: int) -> list[str]:
    """``[IMG]? k1 v1 ... km vm [EOC]`` with each value cut to ``c`` word tokens."""
    if c < 1:
        raise CodecError(f"value truncation must be >= 1, got {c}")
    out = [IMG] if item.image_ref is not None else []
    for k, v in item.attributes:
        out.extend(tokenize(k))
        out.extend(tokenize(v)[:c])
    out.append(EOC)
    return out


def build_user_sentence(
    history: Sequence[ItemRecord], vocab: Vocabulary, max_items: int = 5, c: int = 8
) -> EncodedSequence:
    if not history:
        raise CodecError("history must be non-empty")
    seq = EncodedSequence()
    seq.append_tokens([vocab.index[CLS]], CONTEXT)
    for item in list(history)[-max_items:]:
        seq.append_item(item, vocab, c, CONTEXT)
    return seq


@dataclass
class Payload:
    """Task-specific inputs; which fields are required depends on the tag."""

    target_item: ItemRecord | None = None
    probe: ItemRecord | None = None
    rating: int | None = None
    explanation: str | None = None
    candidates: Sequence[ItemRecord] = ()
    positives: Sequence[str] = ()
    query: str | None = None
    retrieved: Sequence[ItemRecord] = ()
    code_grid: Sequence[int] = ()


_REQUIRED = {
    "rec": ("target_item",),
    "pref": ("probe", "rating"),
    "expl": ("probe", "explanation"),
    "select": ("candidates", "positives"),
    "search": ("query", "target_item"),
    "imgen": ("query", "retrieved", "code_grid"),
}


def build_instruction(
    seq: EncodedSequence, task: str, payload: Payload, vocab: Vocabulary, c: int
) -> None:
    """Append the task instruction (and closing ``[BOS]``) to ``seq`` in place."""
    for part in _PLACEHOLDER_RE.split(TEMPLATES[task]):
        if part == "{item}":
            seq.append_item(payload.probe, vocab, c, INSTRUCTION)
        elif part == "{items}":
            for n, cand in enumerate(payload.candidates):
                if n:
                    seq.append_tokens([vocab.id(",")], INSTRUCTION)
                seq.append_item(cand, vocab, c, INSTRUCTION)
        elif part == "{retrieved}":
            for it in payload.retrieved:
                seq.append_item(it, vocab, c, INSTRUCTION)
        elif part == "{query}":
            seq.append_tokens(vocab.word_ids(payload.query), INSTRUCTION)
        elif part.strip():
            seq.append_tokens(vocab.word_ids(part), INSTRUCTION)
    seq.append_tokens([vocab.index[BOS]], INSTRUCTION)


def build_task_instance(
    history: EncodedSequence,
    task: str,
    payload: Payload,
    vocab: Vocabulary,
    c: int = 8,
    weight: float = 1.0,
    user_id: str = "",
) -> TaskInstance:
    if task not in TASKS:
        raise CodecError(f"unknown task tag {task!r}")
    for name in _REQUIRED[task]:
        val = getattr(payload, name)
        if val is None or (isinstance(val, (list, tuple)) and not val and name != "positives"):
            raise CodecError(f"{task} payload needs {name!r}")
    if task == "select":
        cand_ids = {x.item_id for x in payload.candidates}
        if not set(payload.positives) <= cand_ids:
            raise CodecError("select positives must be among the candidates")
    seq = history.copy()
    build_instruction(seq, task, payload, vocab, c)
    if task in ("rec", "search"):
        target = [vocab.item_token(payload.target_item.item_id)]
    elif task == "pref":
        if payload.rating not in (1, 2, 3, 4, 5):
            raise CodecError(f"rating must be 1..5, got {payload.rating!r}")
        target = [vocab.id(str(payload.rating))]
    elif task == "expl":
        target = vocab.word_ids(payload.explanation)
    elif task == "select":
        target = sorted(vocab.item_token(i) for i in payload.positives)
    else:
        target = [vocab.code_token(int(k)) for k in payload.code_grid]
    return TaskInstance(task, seq, target, weight, user_id)


def decode_tokens(ids: Sequence[int], vocab: Vocabulary) -> str:
    out = []
    for tid in ids:
        tid = int(tid)
        if not 0 <= tid < len(vocab):
            raise IndexError(f"token id {tid} outside vocabulary of size {len(vocab)}")
        out.append(vocab.item_of(tid) if vocab.is_item(tid) else vocab.tokens[tid])
    return " ".join(out)
