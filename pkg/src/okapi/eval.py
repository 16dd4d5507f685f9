"""Multiple-choice evaluation by likelihood scoring, plus resource-group aggregation."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lm
from .protocol import CATEGORY_ORDER, registry_lookup

DATASETS = ("arc", "hellaswag", "mmlu", "custom")
NORMS = ("none", "per_token")


class DatasetError(ValueError):
    def __init__(self, message: str, errors=()):
        super().__init__(message)
        self.errors = list(errors)


@dataclass(frozen=True)
class EvalItem:
    id: str
    lang: str
    dataset: str
    context: str
    choices: tuple
    gold_index: int

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if not 2 <= len(self.choices) <= 5:
            raise ValueError(f"expected 2-5 choices, got {len(self.choices)}")
        if any(not c for c in self.choices):
            raise ValueError("choices must be non-empty")
        if len(set(self.choices)) != len(self.choices):
            raise ValueError("choices must be distinct")
        if not 0 <= self.gold_index < len(self.choices):
            raise ValueError(f"gold_index {self.gold_index} outside 0..{len(self.choices) - 1}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["choices"] = list(self.choices)
        return d


class OverLength(ValueError):
    pass


def _fit_context(ctx: list[int], longest: int, limit: int) -> list[int]:
    room = limit - longest
    if room < 1:
        raise OverLength("choice alone exceeds context_len")
    return ctx[-room:] if len(ctx) > room else ctx


def choice_scores(model: lm.PolicyCheckpoint, item: EvalItem, prefix: str = "") -> list[tuple[float, int]]:
    """(sum log-prob, token count) per choice; context is left-truncated to fit."""
    tok = lm.tokenizer
    ctx = [lm.BOS] + tok.encode(prefix + item.context)
    conts = [tok.encode(c) for c in item.choices]
    ctx = _fit_context(ctx, max(len(c) for c in conts), model.config.context_len)
    return [lm.sequence_logprob(model, ctx, c) for c in conts]


def pick(scores, norm: str) -> int:
    """Argmax with lowest-index tie-break."""
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    vals = [s if norm == "none" else s / n for s, n in scores]
    best = 0
    for i, v in enumerate(vals):
        if v > vals[best]:
            best = i
    return best


def score_item(model: lm.PolicyCheckpoint, item: EvalItem, norm: str = "none", prefix: str = "") -> int:
    return pick(choice_scores(model, item, prefix), norm)


def few_shot_prefix(item: EvalItem, pool, n_shot: int, seed: int = 0) -> str:
    """Deterministic demonstrations drawn from a held-out pool (never the item itself)."""
    if n_shot <= 0:
        return ""
    cands = sorted((x for x in pool if x.id != item.id and x.lang == item.lang), key=lambda x: x.id)
    if not cands:
        return ""
    rng = np.random.default_rng([seed, int.from_bytes(item.id.encode()[:8].ljust(8, b"\0"), "big") % 2**32])
    idx = rng.choice(len(cands), size=min(n_shot, len(cands)), replace=False)
    return "".join(cands[i].context + cands[i].choices[cands[i].gold_index] + "\n\n" for i in sorted(idx))


@dataclass
class EvalResult:
    per_item: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def accuracy(self, norm: str = "none", lang: str | None = None) -> float:
        rows = [r for r in self.per_item if lang is None or r["lang"] == lang]
        if not rows:
            return float("nan")
        return sum(r[f"chosen_{norm}"] == r["gold_index"] for r in rows) / len(rows)

    def per_language(self, norm: str = "none") -> dict[str, float]:
        langs = sorted({r["lang"] for r in self.per_item})
        return {l: self.accuracy(norm, l) for l in langs}

    def to_json(self) -> dict:
        return {"per_item": self.per_item, "skipped": self.skipped,
                "accuracy": {n: self.per_language(n) for n in NORMS}}


def evaluate(model: lm.PolicyCheckpoint, items, n_shot: int = 0, shot_pool=(), seed: int = 0,
             workers: int = 1) -> EvalResult:
    """Score every item under both normalisations. Output order follows ``items``."""
    items = list(items)

    def one(item):
        prefix = few_shot_prefix(item, shot_pool, n_shot, seed)
        try:
            sc = choice_scores(model, item, prefix)
        except (OverLength, ValueError) as exc:
            return None, {"id": item.id, "lang": item.lang, "reason": str(exc)}
        return {"id": item.id, "lang": item.lang, "gold_index": item.gold_index,
                "scores": [s for s, _ in sc], "lengths": [n for _, n in sc],
                "chosen_none": pick(sc, "none"), "chosen_per_token": pick(sc, "per_token")}, None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(one, items))
    else:
        outs = [one(i) for i in items]
    res = EvalResult()
    for row, skip in outs:
        (res.per_item if row is not None else res.skipped).append(row if row is not None else skip)
    return res


# -------------------------------------------------------------- aggregation

@dataclass
class EvalReport:
    per_language: dict
    per_group: dict
    overall: float
    categories: dict = field(default_factory=dict)

    def rounded(self, ndigits: int = 1) -> dict:
        return {"per_language": {k: round(v, ndigits) for k, v in self.per_language.items()},
                "per_group": {k: round(v, ndigits) for k, v in self.per_group.items()},
                "overall": round(self.overall, ndigits)}


def aggregate(results: dict[str, float], registry) -> EvalReport:
    """Group means over member languages and the unweighted mean over all languages."""
    cats = {}
    for code in results:
        cats[code] = registry_lookup(registry, code).category
    groups = {}
    for g in ("H", "M", "L"):
        members = [results[c] for c in results if cats[c] == g]
        if members:
            groups[g] = math.fsum(members) / len(members)
    # fsum is exactly rounded, so the result does not depend on input order
    overall = math.fsum(results.values()) / len(results) if results else float("nan")
    return EvalReport(dict(results), groups, overall, cats)


GROUP_LABEL = {"H": "High-Resource", "M": "Medium-Resource", "L": "Low-Resource"}


def render_table(reports: dict[str, EvalReport], registry, fmt: str = "md", scale: float = 100.0,
                 names: dict | None = None) -> str:
    """Language rows grouped by resource category with Ave Group rows and a final Average row."""
    cols = list(reports)
    langs = sorted({c for r in reports.values() for c in r.per_language},
                   key=lambda c: (CATEGORY_ORDER[registry_lookup(registry, c).category], c))
    names = names or {}

    def cell(v):
        return "" if v is None or v != v else f"{v * scale:.1f}"

    rows = []
    for g in ("H", "M", "L"):
        members = [c for c in langs if registry_lookup(registry, c).category == g]
        if not members:
            continue
        for c in members:
            rows.append([GROUP_LABEL[g], names.get(c, c)] + [cell(reports[m].per_language.get(c)) for m in cols])
        rows.append([GROUP_LABEL[g], "Ave Group"] + [cell(reports[m].per_group.get(g)) for m in cols])
    rows.append(["", "Average"] + [cell(reports[m].overall) for m in cols])
    header = ["Group", "Language"] + cols
    if fmt == "tsv":
        return "\n".join("\t".join(r) for r in [header] + rows) + "\n"
    if fmt != "md":
        raise ValueError(f"unknown table format {fmt!r}")
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ loading

_LETTERS = "ABCDEFGHIJ"


def _from_canonical(d: dict) -> EvalItem:
    return EvalItem(str(d["id"]), d["lang"], d.get("dataset", "custom"), d["context"],
                    tuple(d["choices"]), int(d["gold_index"]))


def _key_index(key, labels) -> int:
    key = str(key).strip()
    if key in labels:
        return labels.index(key)
    if key.isdigit() and not any(l.isdigit() for l in labels):
        return int(key) - 1
    if key.upper() in _LETTERS and len(labels) == 0:
        return _LETTERS.index(key.upper())
    raise ValueError(f"answer key {key!r} not among labels {labels}")


def _from_arc(d: dict, lang: str, lineno: int) -> EvalItem:
    q = d["question"]
    if isinstance(q, dict):  # original AI2 layout
        stem, chs = q["stem"], q["choices"]
        texts, labels = [c["text"] for c in chs], [str(c["label"]) for c in chs]
    else:  # flattened layout: choices = {"text": [...], "label": [...]}
        stem, texts, labels = q, list(d["choices"]["text"]), [str(l) for l in d["choices"]["label"]]
    return EvalItem(str(d.get("id", f"arc-{lineno}")), d.get("lang", lang), "arc",
                    f"Question: {stem}\nAnswer:", tuple(" " + t for t in texts), _key_index(d["answerKey"], labels))


def _from_hellaswag(d: dict, lang: str, lineno: int) -> EvalItem:
    ctx = d.get("ctx") or (d.get("ctx_a", "") + " " + d.get("ctx_b", "")).strip()
    return EvalItem(str(d.get("ind", d.get("id", f"hellaswag-{lineno}"))), d.get("lang", lang), "hellaswag",
                    ctx, tuple(" " + e for e in d["endings"]), int(d["label"]))


def _from_mmlu(d: dict, lang: str, lineno: int) -> EvalItem:
    if "choices" in d:
        texts = list(d["choices"])
    else:
        texts = [d[k] for k in "ABCD"]
    ans = d["answer"]
    gold = int(ans) if isinstance(ans, int) or str(ans).isdigit() else _LETTERS.index(str(ans).strip().upper())
    return EvalItem(str(d.get("id", f"mmlu-{lineno}")), d.get("lang", lang), "mmlu",
                    f"Question: {d['question']}\nAnswer:", tuple(" " + t for t in texts), gold)


_CONVERTERS = {"canonical": lambda d, lang, n: _from_canonical(d), "arc": _from_arc,
               "hellaswag": _from_hellaswag, "mmlu": _from_mmlu}


def load_dataset(path, expected_format: str = "canonical", lang: str = "en",
                 max_error_rate: float = 0.01, errors: list | None = None) -> list[EvalItem]:
    """Validated items; malformed lines are reported with line numbers.

    More than ``max_error_rate`` malformed lines is a hard failure.
    """
    if expected_format not in _CONVERTERS:
        raise ValueError(f"unknown format {expected_format!r}")
    conv = _CONVERTERS[expected_format]
    items, bad, total = [], [], 0
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            total += 1
            try:
                items.append(conv(json.loads(line), lang, lineno))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                bad.append({"line": lineno, "error": f"{type(exc).__name__}: {exc}"})
    if errors is not None:
        errors.extend(bad)
    if total and len(bad) / total > max_error_rate:
        lines = ", ".join(str(b["line"]) for b in bad[:10])
        raise DatasetError(f"{path}: {len(bad)}/{total} malformed lines (lines {lines})", bad)
    return items


def save_items(path, items) -> Path:
    from .records import write_jsonl

    return write_jsonl(path, (i.to_json() for i in items))
