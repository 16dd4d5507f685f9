"""Instruction and ranked-response records and their newline-delimited JSON files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

EMPTY_INPUT = "<empty>"
ORIGINS = ("seed", "generated", "translated")
T_RESPONSES = 4


@dataclass(frozen=True)
class InstructionExample:
    id: str
    lang: str
    instruction: str
    input: str = ""
    output: str = ""
    origin: str = "generated"

    def __post_init__(self):
        if not self.instruction:
            raise ValueError(f"record {self.id!r}: instruction must be non-empty")
        if self.origin not in ORIGINS:
            raise ValueError(f"record {self.id!r}: unknown origin {self.origin!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["input"] = self.input if self.input else EMPTY_INPUT
        return d

    @classmethod
    def from_json(cls, d: dict) -> "InstructionExample":
        inp = d.get("input", "")
        return cls(id=str(d["id"]), lang=d["lang"], instruction=d["instruction"],
                   input="" if inp in (None, EMPTY_INPUT) else inp,
                   output=d.get("output", "") or "", origin=d.get("origin", "generated"))


def check_permutation(ranks, t: int = T_RESPONSES) -> list[int]:
    ranks = [int(r) for r in ranks]
    if sorted(ranks) != list(range(1, t + 1)):
        raise ValueError(f"ranks {ranks} are not a permutation of 1..{t}")
    return ranks


@dataclass(frozen=True)
class RankedResponseSet:
    base: InstructionExample
    responses: tuple
    ranks: tuple
    judge_transcript: tuple = field(default_factory=tuple)
    ties_possible: bool = False

    def __post_init__(self):
        if len(self.responses) != T_RESPONSES:
            raise ValueError(f"expected {T_RESPONSES} responses, got {len(self.responses)}")
        check_permutation(self.ranks)

    def to_json(self) -> dict:
        d = {"id": self.base.id, "lang": self.base.lang, "instruction": self.base.instruction,
             "input": self.base.input or EMPTY_INPUT, "responses": list(self.responses),
             "ranks": list(self.ranks)}
        if self.judge_transcript:
            d["judge_transcript"] = list(self.judge_transcript)
        if self.ties_possible:
            d["ties_possible"] = True
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RankedResponseSet":
        inp = d.get("input", "")
        base = InstructionExample(id=str(d["id"]), lang=d["lang"], instruction=d["instruction"],
                                  input="" if inp == EMPTY_INPUT else inp, origin="translated")
        return cls(base, tuple(d["responses"]), tuple(check_permutation(d["ranks"])),
                   tuple(d.get("judge_transcript", ())), bool(d.get("ties_possible", False)))


def write_jsonl(path, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def save_corpus(path, corpus: Iterable[InstructionExample]) -> Path:
    return write_jsonl(path, (r.to_json() for r in corpus))


def load_corpus(path) -> list[InstructionExample]:
    corpus = [InstructionExample.from_json(d) for d in read_jsonl(path)]
    ids = [r.id for r in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate record ids")
    return corpus


def save_ranked(path, sets: Iterable[RankedResponseSet]) -> Path:
    return write_jsonl(path, (s.to_json() for s in sets))


def load_ranked(path) -> list[RankedResponseSet]:
    # from_json re-validates the permutation on every load
    return [RankedResponseSet.from_json(d) for d in read_jsonl(path)]


def corpus_fingerprint(corpus: Iterable[InstructionExample]) -> str:
    h = hashlib.sha256()
    for r in corpus:
        h.update(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False).encode())
        h.update(b"\n")
    return h.hexdigest()


def with_lang(rec: InstructionExample, lang: str, **changes) -> InstructionExample:
    return replace(rec, lang=lang, **changes)
