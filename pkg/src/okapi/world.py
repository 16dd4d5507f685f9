"""Deterministic synthetic multilingual test-bed.

Languages are bijections on printable ASCII (32..126), so every corpus in a
synthetic language carries exactly the statistics of its English source. The
instruction data are small word-list tasks whose outputs optionally mark words
with a marker character; judges and oracle rewards key off that marker so
reward-model and PPO behaviour has a computable ground truth.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .protocol import Language, categorize_language, ranks_from_scores
from .records import InstructionExample, T_RESPONSES, save_corpus, write_jsonl

PRINTABLE = list(range(32, 127))
MARKER = "*"

CATEGORIES = {
    "fruits": ["apple", "pear", "plum", "kiwi", "mango", "lime", "fig", "grape"],
    "animals": ["cat", "dog", "horse", "mouse", "goat", "sheep", "tiger", "bear"],
    "colors": ["red", "blue", "green", "pink", "gray", "black", "white", "gold"],
    "tools": ["saw", "drill", "hammer", "rake", "spade", "wrench", "knife", "file"],
    "birds": ["crow", "owl", "swan", "duck", "hawk", "robin", "wren", "gull"],
    "trees": ["oak", "pine", "elm", "ash", "birch", "maple", "yew", "fir"],
}
VERBS = ["list", "name", "give", "write", "suggest", "pick", "choose", "recall", "mention", "offer"]
COUNTS = {"two": 2, "three": 3, "four": 4}
MODIFIERS = ["small", "common", "rare", "favorite", "simple", "bright", "quiet", "good"]
SUFFIXES = ["", " please", " for me", " now", " quickly"]
INPUTS = ["", "", "", "short answer", "one line", "no repeats"]


def vocabulary() -> set[str]:
    words = set(VERBS) | set(COUNTS) | set(MODIFIERS) | set(CATEGORIES)
    for ws in CATEGORIES.values():
        words |= set(ws)
    for s in SUFFIXES + INPUTS:
        words |= set(s.split())
    return words


@dataclass(frozen=True)
class SyntheticLanguage:
    code: str
    name: str
    cc_ratio_percent: float
    byte_permutation: tuple

    def __post_init__(self):
        if sorted(self.byte_permutation) != PRINTABLE:
            raise ValueError(f"{self.code}: byte_permutation must be a bijection on 32..126")

    @property
    def category(self) -> str:
        return categorize_language(self.cc_ratio_percent)

    @property
    def language(self) -> Language:
        return Language(self.code, self.name, self.cc_ratio_percent)

    def _tables(self):
        fwd = {i: self.byte_permutation[i - 32] for i in PRINTABLE}
        inv = {v: k for k, v in fwd.items()}
        return fwd, inv

    def encode(self, text: str) -> str:
        fwd, _ = self._tables()
        return text.translate({k: chr(v) for k, v in fwd.items()})

    def decode(self, text: str) -> str:
        _, inv = self._tables()
        return text.translate({k: chr(v) for k, v in inv.items()})

    @property
    def marker(self) -> str:
        return self.encode(MARKER)

    def encode_record(self, rec: InstructionExample) -> InstructionExample:
        return InstructionExample(rec.id, self.code, self.encode(rec.instruction), self.encode(rec.input),
                                  self.encode(rec.output), "translated")

    def decode_record(self, rec: InstructionExample, lang: str = "en", origin: str = "generated") -> InstructionExample:
        return InstructionExample(rec.id, lang, self.decode(rec.instruction), self.decode(rec.input),
                                  self.decode(rec.output), origin)

    def to_json(self) -> dict:
        return {"code": self.code, "name": self.name, "cc_ratio_percent": self.cc_ratio_percent,
                "category": self.category, "byte_permutation": list(self.byte_permutation)}

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticLanguage":
        return cls(d["code"], d["name"], float(d["cc_ratio_percent"]), tuple(d["byte_permutation"]))


ENGLISH = SyntheticLanguage("en", "English", 45.8786, tuple(PRINTABLE))


def _ratio_ladder(n: int) -> list[float]:
    base = [2.0, 0.5, 0.05]
    return [round(base[i % 3] * (0.9 ** (i // 3)), 6) for i in range(n)]


def make_language(code: str, name: str, ratio: float, rng: np.random.Generator) -> SyntheticLanguage:
    perm = rng.permutation(PRINTABLE)
    return SyntheticLanguage(code, name, ratio, tuple(int(x) for x in perm))


# ----------------------------------------------------------- instructions

def sample_task(rng: np.random.Generator, marker_rate: float = 0.3) -> dict:
    verb = VERBS[rng.integers(len(VERBS))]
    count_word = list(COUNTS)[rng.integers(len(COUNTS))]
    mod = MODIFIERS[rng.integers(len(MODIFIERS))]
    cat = list(CATEGORIES)[rng.integers(len(CATEGORIES))]
    suffix = SUFFIXES[rng.integers(len(SUFFIXES))]
    inp = INPUTS[rng.integers(len(INPUTS))]
    return {"instruction": f"{verb} {count_word} {mod} {cat}{suffix}", "input": inp,
            "output": task_output(cat, COUNTS[count_word], rng, marker_rate)}


def task_output(cat: str, n: int, rng: np.random.Generator, marker_rate: float) -> str:
    words = rng.choice(CATEGORIES[cat], size=n, replace=False)
    return " ".join(w + (MARKER if rng.random() < marker_rate else "") for w in words)


def _unique_tasks(rng, n: int, marker_rate: float, taken: set) -> list[dict]:
    out = []
    while len(out) < n:
        t = sample_task(rng, marker_rate)
        if t["instruction"] in taken:
            continue
        taken.add(t["instruction"])
        out.append(t)
    return out


@dataclass
class World:
    seed: int
    languages: list
    base_corpus: list
    seeds: dict
    corpora: dict
    marker_rate: float = 0.3
    meta: dict = field(default_factory=dict)

    @property
    def registry(self) -> list[Language]:
        return [l.language for l in self.languages]

    def language(self, code: str) -> SyntheticLanguage:
        if code == "en":
            return ENGLISH
        for l in self.languages:
            if l.code == code:
                return l
        raise KeyError(code)


def make_world(n_languages: int, seed: int, ratios=None, corpus_size: int = 158,
               seeds_per_language: int = 20, marker_rate: float = 0.3,
               resource_scale: dict | None = None) -> World:
    """Languages, an English base corpus, remapped corpora and seed pools.

    ``resource_scale`` (category -> fraction) shrinks the corpora of lower-resource
    languages; by default every language gets the full corpus.
    """
    if n_languages < 2:
        raise ValueError("a world needs at least two languages")
    ratios = list(ratios) if ratios is not None else _ratio_ladder(n_languages)
    if len(ratios) != n_languages:
        raise ValueError("one ratio per language is required")
    rng = np.random.default_rng(seed)
    letters = string.ascii_lowercase
    langs = [make_language(f"x{letters[i // 26]}{letters[i % 26]}" if i >= 26 else f"x{letters[i]}",
                           f"Synthian-{i + 1}", float(r), rng) for i, r in enumerate(ratios)]
    taken: set = set()
    seed_tasks = _unique_tasks(rng, seeds_per_language, marker_rate, taken)
    base_tasks = _unique_tasks(rng, corpus_size, marker_rate, taken)
    seeds_en = [InstructionExample(f"seed-{i:04d}", "en", t["instruction"], t["input"], t["output"], "seed")
                for i, t in enumerate(seed_tasks)]
    base = [InstructionExample(f"en-{i:06d}", "en", t["instruction"], t["input"], t["output"], "generated")
            for i, t in enumerate(base_tasks)]
    scale = resource_scale or {}
    corpora, seeds = {"en": base}, {"en": seeds_en}
    for lang in langs:
        keep = int(round(len(base) * scale.get(lang.category, 1.0)))
        corpora[lang.code] = [lang.encode_record(r) for r in base[:keep]]
        seeds[lang.code] = [InstructionExample(r.id, lang.code, lang.encode(r.instruction), lang.encode(r.input),
                                               lang.encode(r.output), "seed") for r in seeds_en]
    return World(seed, langs, base, seeds, corpora, marker_rate,
                 {"n_languages": n_languages, "corpus_size": corpus_size, "ratios": ratios})


def write_world(world: World, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "registry.jsonl", [l.to_json() for l in world.languages])
    for code, corpus in world.corpora.items():
        save_corpus(out / f"corpus_{code}.jsonl", corpus)
    for code, seeds in world.seeds.items():
        save_corpus(out / f"seeds_{code}.jsonl", seeds)
    (out / "world.json").write_text(json.dumps({"seed": world.seed, "marker": MARKER,
                                                "marker_rate": world.marker_rate, **world.meta},
                                               sort_keys=True) + "\n")
    return out


def read_registry(path) -> list[SyntheticLanguage]:
    from .records import read_jsonl

    return [SyntheticLanguage.from_json(d) for d in read_jsonl(path)]


# ------------------------------------------------------- judges & rewards

def _hash_unit(*parts) -> float:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big") / 2 ** 64


def length_judge(instruction: str, input: str, responses) -> list[int]:
    """Longer response ranks better."""
    return ranks_from_scores([len(r) for r in responses])


def marker_judge(marker: str = MARKER):
    def judge(instruction, input, responses):
        return ranks_from_scores([r.count(marker) for r in responses])

    judge.__name__ = "marker_judge"
    return judge


def random_judge(seed: int = 0):
    def judge(instruction, input, responses):
        return ranks_from_scores([_hash_unit(seed, instruction, input, i, r) for i, r in enumerate(responses)])

    judge.__name__ = "random_judge"
    return judge


JUDGES = {"length": lambda **kw: length_judge, "marker": lambda marker=MARKER, **kw: marker_judge(marker),
          "random": lambda seed=0, **kw: random_judge(seed)}


def make_judge(kind: str, **params):
    if kind not in JUDGES:
        raise ValueError(f"unknown judge {kind!r}")
    return JUDGES[kind](**params)


def oracle_reward(kind: str, prompt: str, response: str, marker: str = MARKER, band=(5, 10),
                  judge=None, references=()) -> float:
    """Ground-truth reward: marker count, length-band indicator, or agreement with a judge.

    ``judge_agreement`` places ``response`` among ``references`` and maps its judged
    rank to [0, 1] (1 = ranked first).
    """
    if kind == "marker_count":
        return float(response.count(marker))
    if kind == "length_band":
        lo, hi = band
        return 1.0 if lo <= len(response) <= hi else 0.0
    if kind == "judge_agreement":
        if judge is None or not references:
            raise ValueError("judge_agreement needs a judge and reference responses")
        pool = [response] + list(references)
        ranks = judge(prompt, "", pool)
        return (len(pool) - ranks[0]) / (len(pool) - 1)
    raise ValueError(f"unknown oracle reward kind {kind!r}")


# --------------------------------------------------------------- eval sets

def marker_eval_items(world: World, lang_code: str, n_items: int, seed: int, fmt=None) -> list:
    """Multiple-choice items whose gold answer is the variant with the most markers.

    Each item's context is a rendered prompt; the four choices are the same word
    list carrying 0..3 markers.
    """
    from .eval import EvalItem
    from .sft import DEFAULT_FORMAT

    fmt = fmt or DEFAULT_FORMAT
    lang = world.language(lang_code)
    rng = np.random.default_rng([seed, 7])
    items = []
    for i in range(n_items):
        cat = list(CATEGORIES)[rng.integers(len(CATEGORIES))]
        n = int(rng.choice([3, 4]))
        count_word = {v: k for k, v in COUNTS.items()}[n]
        verb = VERBS[rng.integers(len(VERBS))]
        mod = MODIFIERS[rng.integers(len(MODIFIERS))]
        instruction = f"{verb} {count_word} {mod} {cat}"
        words = list(rng.choice(CATEGORIES[cat], size=n, replace=False))
        order = list(rng.permutation(n))
        choices = []
        for k in range(T_RESPONSES):
            marked = set(order[:k])
            choices.append(" ".join(w + (MARKER if j in marked else "") for j, w in enumerate(words)))
        perm = list(rng.permutation(T_RESPONSES))
        shuffled = [choices[j] for j in perm]
        gold = perm.index(T_RESPONSES - 1)
        ctx = fmt.prompt(lang.encode(instruction), "")
        items.append(EvalItem(f"{lang_code}-mk-{i:04d}", lang_code, "custom", ctx,
                              tuple(lang.encode(c) for c in shuffled), gold))
    return items


def synthetic_ranked_sets(world: World, lang_code: str, n_sets: int, seed: int, length: int = 4):
    """Ranked sets for a separable preference task: responses carry 0..3 markers, judged by marker count."""
    from .records import RankedResponseSet

    lang = world.language(lang_code)
    judge = marker_judge(MARKER)
    rng = np.random.default_rng([seed, 11])
    out = []
    for i in range(n_sets):
        t = sample_task(rng, 0.0)
        cat = t["instruction"].split()[3]
        words = list(rng.choice(CATEGORIES[cat], size=length, replace=False))
        counts = rng.permutation(T_RESPONSES)
        responses = []
        for c in counts:
            pos = set(rng.choice(length, size=int(c), replace=False).tolist())
            responses.append(" ".join(w + (MARKER if j in pos else "") for j, w in enumerate(words)))
        ranks = judge(t["instruction"], t["input"], responses)
        base = InstructionExample(f"{lang_code}-rk-{i:05d}", lang_code, lang.encode(t["instruction"]),
                                  lang.encode(t["input"]), "", "translated")
        out.append(RankedResponseSet(base, tuple(lang.encode(r) for r in responses), tuple(ranks)))
    return out


def pretraining_text(world: World, n_per_language: int, seed: int,
                     resource_scale: dict | None = None) -> list[str]:
    """Raw "instruction: output" lines in every language, for pre-training a base model.

    Drawn independently of the instruction corpora. ``resource_scale`` shrinks the
    amount of text for lower-resource languages.
    """
    scale = resource_scale or {}
    rng = np.random.default_rng([seed, 13])
    out = []
    for lang in [ENGLISH] + list(world.languages):
        n = int(round(n_per_language * scale.get(lang.category, 1.0)))
        for _ in range(n):
            t = sample_task(rng, world.marker_rate)
            line = f"{t['instruction']}: {t['output']}"
            out.append(lang.encode(line))
    return out
