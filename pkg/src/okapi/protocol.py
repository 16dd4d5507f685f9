"""Teacher interface, language registry, and the translation / two-turn ranking protocols."""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import lm
from .records import EMPTY_INPUT, T_RESPONSES, InstructionExample, RankedResponseSet, check_permutation

# ------------------------------------------------------------------ errors


class TeacherError(RuntimeError):
    """Transport failure talking to the teacher (retry budget exhausted, bad status...)."""


class ProtocolError(ValueError):
    """Teacher reply did not follow the expected structure."""

    def __init__(self, message: str, transcript=None):
        super().__init__(message)
        self.transcript = transcript or []


class ParseError(ValueError):
    def __init__(self, message: str, line: str | None = None):
        super().__init__(message if line is None else f"{message}: {line!r}")
        self.line = line


class TeacherOracle(Protocol):
    def chat(self, messages: list[dict]) -> str:
        ...


# ------------------------------------------------------------- languages

CATEGORY_ORDER = {"H": 0, "M": 1, "L": 2}


def categorize_language(cc_ratio_percent: float) -> str:
    """Resource category from the CommonCrawl share in percent."""
    r = float(cc_ratio_percent)
    if r <= 0:
        raise ValueError(f"data ratio must be positive, got {r}")
    if r > 1.0:
        return "H"
    if r > 0.1:
        return "M"
    if r > 0.01:
        return "L"
    raise ValueError(f"data ratio {r}% is below the low-resource floor of 0.01%")


@dataclass(frozen=True)
class Language:
    code: str
    name: str
    cc_ratio_percent: float
    category: str = ""

    def __post_init__(self):
        cat = categorize_language(self.cc_ratio_percent)
        if not self.category:
            object.__setattr__(self, "category", cat)
        elif self.category != cat:
            raise ValueError(f"{self.code}: category {self.category} disagrees with ratio {self.cc_ratio_percent}")


_TABLE1 = [
    ("en", "English", 45.8786), ("ru", "Russian", 5.9692), ("de", "German", 5.8811),
    ("zh", "Chinese", 4.8747), ("fr", "French", 4.7254), ("es", "Spanish", 4.4690),
    ("it", "Italian", 2.5712), ("nl", "Dutch", 2.0585), ("vi", "Vietnamese", 1.0299),
    ("id", "Indonesian", 0.7991), ("ar", "Arabic", 0.6658), ("hu", "Hungarian", 0.6093),
    ("ro", "Romanian", 0.5637), ("da", "Danish", 0.4301), ("sk", "Slovak", 0.3777),
    ("uk", "Ukrainian", 0.3304), ("ca", "Catalan", 0.2314), ("sr", "Serbian", 0.2205),
    ("hr", "Croatian", 0.1979), ("hi", "Hindi", 0.1588), ("bn", "Bengali", 0.0930),
    ("ta", "Tamil", 0.0446), ("ne", "Nepali", 0.0304), ("ml", "Malayalam", 0.0222),
    ("mr", "Marathi", 0.0213), ("te", "Telugu", 0.0183), ("kn", "Kannada", 0.0122),
]

OKAPI_LANGUAGES = {code: Language(code, name, r) for code, name, r in _TABLE1}


def registry_lookup(registry, code: str) -> Language:
    reg = registry if isinstance(registry, dict) else {l.code: l for l in registry}
    if code not in reg:
        raise KeyError(f"unknown language code {code!r}")
    return reg[code]


# ----------------------------------------------------------- translation

TRANSLATION_TEMPLATE = (
    "Translate the values in the following JSON object into <target language> language. "
    "You must keep the keys in the JSON object in English. If a value contains programming code, "
    "only translate the comments while preserving the code. Your translations must convey all the "
    "content in the original text and cannot involve explanations or other unnecessary information. "
    "Please ensure that the translated text is natural for native speakers with correct grammar and "
    "proper word choices. Your translation must also use exact terminology to provide accurate "
    "information even for the experts in the related fields. Your output must only contain a JSON "
    "object with translated text and cannot include explanations or other information."
)
TRANSLATION_KEYS = ("instruction", "input", "output")


def build_translation_prompt(target_lang: Language, record: InstructionExample, registry=None) -> str:
    registry_lookup(OKAPI_LANGUAGES if registry is None else registry, target_lang.code)
    obj = {"instruction": record.instruction, "input": record.input, "output": record.output}
    return (TRANSLATION_TEMPLATE.replace("<target language>", target_lang.name)
            + "\n\n" + json.dumps(obj, ensure_ascii=False, indent=2))


def extract_json_object(text: str) -> dict:
    """First top-level JSON object in ``text`` (tolerates code fences and chatter)."""
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object in text")
    obj, _ = json.JSONDecoder().raw_decode(text[start:])
    if not isinstance(obj, dict):
        raise ValueError("JSON value is not an object")
    return obj


def translate_record(teacher: TeacherOracle, target: Language, record: InstructionExample,
                     registry=None) -> InstructionExample:
    prompt = build_translation_prompt(target, record, registry)
    messages = [{"role": "user", "content": prompt}]
    reply = teacher.chat(messages)
    transcript = messages + [{"role": "assistant", "content": reply}]
    try:
        obj = extract_json_object(reply)
    except ValueError as exc:
        raise ProtocolError(f"record {record.id}: {exc}", transcript) from None
    missing = [k for k in TRANSLATION_KEYS if obj.get(k) is None]
    if missing:
        raise ProtocolError(f"record {record.id}: translation lacks keys {missing}", transcript)
    if not all(isinstance(obj[k], str) for k in TRANSLATION_KEYS):
        raise ProtocolError(f"record {record.id}: translated values must be strings", transcript)
    return InstructionExample(id=record.id, lang=target.code, instruction=obj["instruction"],
                              input=obj["input"], output=obj["output"], origin="translated")


def translate_corpus(teacher: TeacherOracle, target: Language, records, workers: int = 1,
                     registry=None) -> list[InstructionExample]:
    """Translate with bounded concurrency; output order matches input order."""
    records = list(records)
    if workers <= 1:
        return [translate_record(teacher, target, r, registry) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: translate_record(teacher, target, r, registry), records))


# --------------------------------------------------------------- ranking

RANK_TRANSLATE_TEMPLATE = (
    "You will be given an instruction, an input for the instruction, and four possible responses "
    "for the instruction. The input can be empty, shown as <empty>. You need to translate the "
    "provided instruction, input, and responses into English."
)
RANKING_TEMPLATE = (
    "Given the translated instruction, input, and responses, you will need to rank the responses "
    "according to three factors: correctness with respect to the instruction and input, coherence, "
    "and naturalness.\n"
    "You will need to provide an overall rank for each response when all the three factors are "
    "considered. The overall rank for a response must be an integer between 1 and 4 where 1 is for "
    "the best response and 4 is the worst response. You cannot assign the same rank for two "
    "different responses.\n"
    'The format of your output must be: for each response: "<Response r>: overall rank: <1/2/3/4>". '
    "The responses must be in original order. Do not include explanation in your output."
)


def render_fields(instruction: str, input: str, responses) -> str:
    lines = [f"Instruction: {instruction}", f"Input: {input if input else EMPTY_INPUT}"]
    lines += [f"Response {i}: {r}" for i, r in enumerate(responses, 1)]
    return "\n".join(lines)


def parse_fields(text: str) -> tuple[str, str, list[str]]:
    """Inverse of :func:`render_fields` (also used to read a teacher's English rendering)."""
    m = re.search(r"Instruction: (.*?)\nInput: (.*?)\n(Response 1: .*)\Z", text, re.S)
    if not m:
        raise ProtocolError("could not locate Instruction/Input/Response fields")
    instruction, inp, rest = m.group(1), m.group(2), m.group(3)
    parts = re.split(r"(?:^|\n)Response (\d+): ", rest)
    responses, expect = [], 1
    for num, body in zip(parts[1::2], parts[2::2]):
        if int(num) != expect:
            raise ProtocolError(f"response {num} out of order")
        responses.append(body)
        expect += 1
    return instruction, ("" if inp == EMPTY_INPUT else inp), responses


def build_ranking_dialog(base: InstructionExample, responses, source_lang: Language | None = None) -> tuple[str, str]:
    if len(responses) != T_RESPONSES:
        raise ValueError(f"ranking needs exactly {T_RESPONSES} responses, got {len(responses)}")
    turn1 = RANK_TRANSLATE_TEMPLATE + "\n\n" + render_fields(base.instruction, base.input, responses)
    return turn1, RANKING_TEMPLATE


_RANK_LINE = re.compile(
    r"^\s*<?\s*response\s*(\d+)\s*>?\s*:\s*(?:overall\s+rank\s*:\s*)?<?\s*(-?\d+)\s*>?\s*\.?\s*$", re.I)


def parse_rank_output(text: str, t: int = T_RESPONSES) -> list[int]:
    """Ranks from lines like ``Response 1: 3`` or ``Response 1: overall rank: 3``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    rank_lines = [ln for ln in lines if re.search(r"response", ln, re.I)]
    ranks, seen = [], set()
    for pos, line in enumerate(rank_lines, 1):
        m = _RANK_LINE.match(line)
        if not m:
            raise ParseError("malformed rank line", line)
        idx, rank = int(m.group(1)), int(m.group(2))
        if idx != pos:
            raise ParseError(f"expected Response {pos} (responses out of order)", line)
        if not 1 <= rank <= t:
            raise ParseError(f"rank out of range 1..{t}", line)
        if rank in seen:
            raise ParseError("duplicate rank", line)
        seen.add(rank)
        ranks.append(rank)
    if len(ranks) != t:
        raise ParseError(f"expected {t} rank lines, found {len(ranks)}",
                         rank_lines[-1] if rank_lines else None)
    return ranks


def render_ranks(ranks, form: str = "short") -> str:
    if form == "long":
        return "\n".join(f"Response {i}: overall rank: {r}" for i, r in enumerate(ranks, 1))
    return "\n".join(f"Response {i}: {r}" for i, r in enumerate(ranks, 1))


def ranks_from_scores(scores) -> list[int]:
    """Rank 1 to the highest score; ties go to the earlier response."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranks = [0] * len(scores)
    for r, i in enumerate(order, 1):
        ranks[i] = r
    return ranks


def run_ranking_dialog(teacher: TeacherOracle, base: InstructionExample, responses,
                       source_lang: Language | None = None, reasks: int = 1) -> tuple[list[int], list[dict]]:
    """Two-turn dialog; re-asks the ranking turn up to ``reasks`` times on a parse failure."""
    turn1, turn2 = build_ranking_dialog(base, responses, source_lang)
    messages = [{"role": "user", "content": turn1}]
    messages.append({"role": "assistant", "content": teacher.chat(list(messages))})
    messages.append({"role": "user", "content": turn2})
    last_error = None
    for _ in range(reasks + 1):
        reply = teacher.chat(list(messages))
        messages.append({"role": "assistant", "content": reply})
        try:
            return parse_rank_output(reply), messages
        except ParseError as exc:
            last_error = exc
            messages.append({"role": "user", "content": turn2})
    raise ProtocolError(f"rank output unparseable after {reasks} re-ask(s): {last_error}", messages)


@dataclass
class RankingReport:
    sets: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    @property
    def drop_rate(self) -> float:
        n = len(self.sets) + len(self.dropped)
        return len(self.dropped) / n if n else 0.0


def _subseed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def sample_responses(policy: lm.PolicyCheckpoint, base: InstructionExample, seed: int, fmt=None,
                     t: int = T_RESPONSES, max_new: int = 32, temperature: float = 1.0) -> list[str]:
    from .sft import DEFAULT_FORMAT

    fmt = fmt or DEFAULT_FORMAT
    prompt = fmt.prompt_tokens(base.instruction, base.input)
    return [lm.tokenizer.decode(lm.generate(policy, prompt, max_new, temperature, _subseed(seed, k)))
            for k in range(t)]


def produce_ranked_set(teacher: TeacherOracle, base: InstructionExample, policy: lm.PolicyCheckpoint,
                       t: int = T_RESPONSES, seed: int = 0, source_lang: Language | None = None,
                       fmt=None, max_new: int = 32, temperature: float = 1.0) -> RankedResponseSet:
    if t != T_RESPONSES:
        raise ValueError(f"T is fixed at {T_RESPONSES}")
    if policy.role != "sft":
        raise ValueError(f"ranked responses come from an sft policy, got {policy.role!r}")
    responses = sample_responses(policy, base, seed, fmt, t, max_new, temperature)
    ranks, transcript = run_ranking_dialog(teacher, base, responses, source_lang)
    check_permutation(ranks)
    return RankedResponseSet(base, tuple(responses), tuple(ranks), tuple(transcript),
                             ties_possible=len(set(responses)) < len(responses))


def produce_ranked_sets(teacher: TeacherOracle, records, policy: lm.PolicyCheckpoint, seed: int = 0,
                        source_lang: Language | None = None, fmt=None, max_new: int = 32,
                        temperature: float = 1.0, log=None) -> RankingReport:
    report = RankingReport()
    for i, rec in enumerate(records):
        try:
            report.sets.append(produce_ranked_set(teacher, rec, policy, T_RESPONSES, _subseed(seed, i),
                                                  source_lang, fmt, max_new, temperature))
        except ProtocolError as exc:
            report.dropped.append({"id": rec.id, "error": str(exc)})
            if log is not None:
                log.append({"id": rec.id, "dropped": True, "error": str(exc)})
    return report
