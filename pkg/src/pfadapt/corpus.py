"""Synthetic multilingual parallel data.

English is a Zipf-distributed stream over the content vocabulary. Every
other language is English passed through a seeded token cipher and a
windowed position permutation. In the default conflict mode all languages
share one content vocabulary, so the model has to work out the source
language from token statistics alone. That ambiguity is what creates
negative interference between pairs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import BOS, EOS, PAD

NUM_SPECIALS = 3
PIVOT = "en"
# Paper language codes ordered high to low resource.
DEFAULT_LANGS = ("ar", "he", "it", "de", "sk", "gl", "az", "be")
DEFAULT_SIZES = (8000, 6000, 4000, 3000, 2000, 1000, 700, 400)


def substream(seed: int, *names: str | int) -> int:
    """Deterministic 63-bit seed for a named sub-stream of ``seed``."""
    key = ":".join([str(seed), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def rng(seed: int, *names: str | int) -> np.random.Generator:
    return np.random.default_rng(substream(seed, *names))


@dataclass(frozen=True)
class LanguageSpec:
    code: str
    cipher: tuple[int, ...]
    window_perm: tuple[int, ...]
    pair_count: int

    def __post_init__(self):
        n = len(self.cipher)
        if sorted(self.cipher) != list(range(n)):
            raise ValueError(f"{self.code}: cipher is not a bijection over {n} content tokens")
        if sorted(self.window_perm) != list(range(len(self.window_perm))) or not self.window_perm:
            raise ValueError(f"{self.code}: window permutation is not a permutation")
        if self.pair_count < 1:
            raise ValueError(f"{self.code}: pair_count must be positive")

    @property
    def window(self) -> int:
        return len(self.window_perm)

    def inverse_cipher(self) -> tuple[int, ...]:
        inv = [0] * len(self.cipher)
        for i, c in enumerate(self.cipher):
            inv[c] = i
        return tuple(inv)

    def reorder(self, seq: Sequence[int]) -> list[int]:
        """Permute positions inside each full window; a short tail is kept."""
        w = self.window
        out = list(seq)
        for start in range(0, len(seq) - w + 1, w):
            for j, src in enumerate(self.window_perm):
                out[start + j] = seq[start + src]
        return out

    def unreorder(self, seq: Sequence[int]) -> list[int]:
        w = self.window
        out = list(seq)
        for start in range(0, len(seq) - w + 1, w):
            for j, src in enumerate(self.window_perm):
                out[start + src] = seq[start + j]
        return out

    def render(self, content: Sequence[int]) -> list[int]:
        """English content indices to this language's content indices."""
        return self.reorder([self.cipher[t] for t in content])

    def unrender(self, content: Sequence[int]) -> list[int]:
        inv = self.inverse_cipher()
        return [inv[t] for t in self.unreorder(content)]


def identity_language(code: str, n_content: int, pair_count: int = 1) -> LanguageSpec:
    return LanguageSpec(code, tuple(range(n_content)), (0,), pair_count)


@dataclass(frozen=True)
class CorpusSpec:
    languages: tuple[str, ...] = DEFAULT_LANGS
    sizes: tuple[int, ...] = DEFAULT_SIZES
    n_content: int = 68
    conflict: bool = True
    windows: tuple[int, ...] = (1, 2, 3)
    min_len: int = 4
    max_len: int = 16
    zipf_exponent: float = 1.0
    dev_size: int = 100
    test_size: int = 100
    zero_shot_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if len(self.languages) != len(self.sizes):
            raise ValueError("languages and sizes must have equal length")
        if len(set(self.languages)) != len(self.languages) or PIVOT in self.languages:
            raise ValueError(f"language codes must be unique and differ from {PIVOT!r}")
        if any(s < 1 for s in self.sizes):
            raise ValueError("pair sizes must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class Vocabulary:
    """Token id layout: specials, content blocks, then one control token per
    language in a contiguous range above all content."""

    def __init__(self, languages: Sequence[str], n_content: int, conflict: bool = True):
        self.languages = [PIVOT, *languages]
        self.n_content = n_content
        self.conflict = conflict
        blocks = 1 if conflict else len(self.languages)
        self.content_start = NUM_SPECIALS
        self.content_end = NUM_SPECIALS + blocks * n_content
        self.control_start = self.content_end
        self.size = self.control_start + len(self.languages)

    def block_offset(self, lang: str) -> int:
        if self.conflict:
            return self.content_start
        return self.content_start + self.languages.index(lang) * self.n_content

    def control_id(self, lang: str) -> int:
        if lang not in self.languages:
            raise KeyError(f"unknown language {lang!r}")
        return self.control_start + self.languages.index(lang)

    def content_ids(self, content: Sequence[int], lang: str) -> list[int]:
        off = self.block_offset(lang)
        return [off + t for t in content]

    def token_str(self, tid: int) -> str:
        if tid < NUM_SPECIALS:
            return ("<pad>", "<s>", "</s>")[tid]
        if tid >= self.control_start:
            return f"<2{self.languages[tid - self.control_start]}>"
        if self.conflict:
            return f"w{tid - self.content_start}"
        b, i = divmod(tid - self.content_start, self.n_content)
        return f"{self.languages[b]}:{i}"

    def token_id(self, tok: str) -> int:
        if tok.startswith("<2") and tok.endswith(">"):
            return self.control_id(tok[2:-1])
        try:
            if self.conflict:
                if not tok.startswith("w"):
                    raise ValueError
                i = int(tok[1:])
                off = self.content_start
            else:
                lang, num = tok.split(":")
                i = int(num)
                off = self.block_offset(lang)
        except (ValueError, KeyError):
            raise KeyError(f"unknown token {tok!r}") from None
        if not 0 <= i < self.n_content:
            raise KeyError(f"unknown token {tok!r}")
        return off + i

    def encode(self, tokens: Sequence[str], target_language: str) -> list[int]:
        return [self.control_id(target_language)] + [self.token_id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [
            self.token_str(t)
            for t in ids
            if NUM_SPECIALS <= t < self.control_start
        ]

    def to_dict(self) -> dict:
        return {
            "languages": self.languages,
            "n_content": self.n_content,
            "conflict": self.conflict,
            "size": self.size,
            "specials": {"pad": PAD, "bos": BOS, "eos": EOS},
            "content_range": [self.content_start, self.content_end],
            "control_range": [self.control_start, self.size],
        }


@dataclass
class Example:
    src: list[int]
    tgt: list[int]
    direction: str  # "en-xx", "xx-en" or "xx-yy"


@dataclass
class ParallelCorpus:
    spec: CorpusSpec
    vocab: Vocabulary
    langs: dict[str, LanguageSpec]
    # base[pair][split] -> English content sentences (indices into the content block)
    base: dict[str, dict[str, list[list[int]]]]
    zero_shot_base: list[list[int]] = field(default_factory=list)

    @property
    def pairs(self) -> list[str]:
        return list(self.spec.languages)

    def size(self, pair: str) -> int:
        return len(self.base[pair]["train"])

    def render(self, content: Sequence[int], lang: str) -> list[int]:
        if lang != PIVOT:
            content = self.langs[lang].render(content)
        return self.vocab.content_ids(content, lang)

    def example(self, content: Sequence[int], src_lang: str, tgt_lang: str) -> Example:
        src = [self.vocab.control_id(tgt_lang)] + self.render(content, src_lang)
        tgt = self.render(content, tgt_lang)
        if src_lang == PIVOT:
            direction = "en-xx"
        elif tgt_lang == PIVOT:
            direction = "xx-en"
        else:
            direction = "xx-yy"
        return Example(src, tgt, direction)

    def examples(self, pair: str, split: str, directions: Sequence[str] = ("en-xx", "xx-en")) -> list[Example]:
        if split not in self.base[pair]:
            raise KeyError(f"no split {split!r} for pair {pair!r}")
        out = []
        for content in self.base[pair][split]:
            if "en-xx" in directions:
                out.append(self.example(content, PIVOT, pair))
            if "xx-en" in directions:
                out.append(self.example(content, pair, PIVOT))
        return out

    def zero_shot_examples(self, src_lang: str, tgt_lang: str) -> list[Example]:
        for lang in (src_lang, tgt_lang):
            if lang not in self.langs:
                raise KeyError(f"unknown language {lang!r}")
        if src_lang == tgt_lang:
            raise ValueError("zero-shot direction needs two different languages")
        return [self.example(c, src_lang, tgt_lang) for c in self.zero_shot_base]

    def zero_shot_directions(self) -> list[tuple[str, str]]:
        return [(a, b) for a in self.pairs for b in self.pairs if a != b]

    # -- persistence ------------------------------------------------------

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for pair in self.pairs:
            for split in ("train", "dev", "test"):
                name = f"{pair}.{split}.tsv"
                lines = []
                for ex in self.examples(pair, split):
                    lines.append(" ".join(map(str, ex.src)) + "\t" + " ".join(map(str, ex.tgt)) + "\n")
                (d / name).write_text("".join(lines))
                files[f"{pair}.{split}"] = name
        zs = "".join(" ".join(map(str, c)) + "\n" for c in self.zero_shot_base)
        (d / "zero_shot.base.txt").write_text(zs)
        manifest = {
            "format": "pfadapt-corpus",
            "version": 1,
            "spec": self.spec.to_dict(),
            "vocab": self.vocab.to_dict(),
            "languages": {
                code: {"cipher": list(l.cipher), "window_perm": list(l.window_perm), "pair_count": l.pair_count}
                for code, l in self.langs.items()
            },
            "sizes": {p: self.size(p) for p in self.pairs},
            "seeds": {"corpus": substream(self.spec.seed, "corpus")},
            "files": files,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def make_languages(spec: CorpusSpec) -> dict[str, LanguageSpec]:
    langs = {}
    for i, (code, size) in enumerate(zip(spec.languages, spec.sizes)):
        g = rng(spec.seed, "language", code)
        cipher = tuple(int(x) for x in g.permutation(spec.n_content))
        w = spec.windows[i % len(spec.windows)]
        perm = tuple(range(w))[::-1] if w > 1 else (0,)
        langs[code] = LanguageSpec(code, cipher, perm, size)
    return langs


def gen_language(lang: LanguageSpec, base_sentences: Sequence[Sequence[int]]) -> list[tuple[list[int], list[int]]]:
    """(English content, rendered content) for every base sentence."""
    return [(list(s), lang.render(s)) for s in base_sentences]


def build_corpus(spec: CorpusSpec) -> ParallelCorpus:
    vocab = Vocabulary(spec.languages, spec.n_content, spec.conflict)
    langs = make_languages(spec)
    probs = _zipf_probs(spec.n_content, spec.zipf_exponent)
    g = rng(spec.seed, "corpus")
    seen: set[tuple[int, ...]] = set()

    def draw(count: int) -> list[list[int]]:
        out = []
        while len(out) < count:
            n = int(g.integers(spec.min_len, spec.max_len + 1))
            s = tuple(int(t) for t in g.choice(spec.n_content, size=n, p=probs))
            if s in seen:
                continue
            seen.add(s)
            out.append(list(s))
        return out

    base = {}
    for code, size in zip(spec.languages, spec.sizes):
        base[code] = {"train": draw(size), "dev": draw(spec.dev_size), "test": draw(spec.test_size)}
    zero_shot = draw(spec.zero_shot_size)
    return ParallelCorpus(spec, vocab, langs, base, zero_shot)


def temperature_weights(sizes: Sequence[int], T: float) -> np.ndarray:
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if len(sizes) == 0:
        raise ValueError("need at least one dataset")
    n = np.asarray(sizes, dtype=np.float64)
    w = (n / n.sum()) ** (1.0 / T)
    return w / w.sum()


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 5.0
    max_tokens: int = 3050
    seed: int = 0


@dataclass
class Batch:
    src: np.ndarray  # [B, S] int64, PAD-filled
    tgt_in: np.ndarray  # [B, T] BOS-prefixed
    tgt_out: np.ndarray  # [B, T] EOS-suffixed
    datasets: list[int]

    @property
    def num_sentences(self) -> int:
        return self.src.shape[0]


def example_cost(ex: Example) -> int:
    return max(len(ex.src), len(ex.tgt) + 1)


def collate(examples: Sequence[Example], datasets: Sequence[int] | None = None) -> Batch:
    B = len(examples)
    S = max(len(e.src) for e in examples)
    T = max(len(e.tgt) for e in examples) + 1
    src = np.full((B, S), PAD, dtype=np.int64)
    tin = np.full((B, T), PAD, dtype=np.int64)
    tout = np.full((B, T), PAD, dtype=np.int64)
    for i, e in enumerate(examples):
        src[i, : len(e.src)] = e.src
        tin[i, : len(e.tgt) + 1] = [BOS, *e.tgt]
        tout[i, : len(e.tgt) + 1] = [*e.tgt, EOS]
    return Batch(src, tin, tout, list(datasets) if datasets is not None else [0] * B)


def make_batches(
    datasets: Sequence[Sequence[Example]],
    sampler: SamplerConfig,
    num_examples: int,
    stream: str | int = 0,
) -> Iterator[Batch]:
    """Yield batches covering ``num_examples`` sampled sentence pairs.

    Each draw picks a dataset by temperature weight, then the next example
    of that dataset's own shuffled cycle. A batch is closed when adding the
    next example would push ``batch_size * padded_length`` over
    ``max_tokens``.
    """
    if not datasets or any(len(d) == 0 for d in datasets):
        raise ValueError("every dataset must be non-empty")
    longest = max(example_cost(e) for d in datasets for e in d)
    if longest > sampler.max_tokens:
        raise ValueError(f"sequence of cost {longest} exceeds the batch budget {sampler.max_tokens}")
    g = rng(sampler.seed, "batches", stream)
    weights = temperature_weights([len(d) for d in datasets], sampler.temperature)
    picks = g.choice(len(datasets), size=num_examples, p=weights)
    orders = [g.permutation(len(d)) for d in datasets]
    cursors = [0] * len(datasets)

    batch: list[Example] = []
    tags: list[int] = []
    width = 0
    for di in picks.tolist():
        if cursors[di] == len(datasets[di]):
            orders[di] = g.permutation(len(datasets[di]))
            cursors[di] = 0
        ex = datasets[di][int(orders[di][cursors[di]])]
        cursors[di] += 1
        cost = example_cost(ex)
        if batch and (len(batch) + 1) * max(width, cost) > sampler.max_tokens:
            yield collate(batch, tags)
            batch, tags, width = [], [], 0
        batch.append(ex)
        tags.append(di)
        width = max(width, cost)
    if batch:
        yield collate(batch, tags)
