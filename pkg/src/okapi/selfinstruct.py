"""Self-Instruct generation with a ROUGE-L novelty filter against an existing pool."""

from __future__ import annotations

import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .protocol import TeacherError
from .records import EMPTY_INPUT, InstructionExample, save_corpus

log = logging.getLogger(__name__)


def rouge_tokens(text: str) -> list[str]:
    return text.lower().split()


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_tokens(cand: list[str], ref: list[str]) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F1 over case-folded whitespace tokens."""
    return rouge_l_tokens(rouge_tokens(candidate), rouge_tokens(reference))


def max_similarity(candidate: str, pool) -> tuple[float, str]:
    """Highest ROUGE-L against ``pool`` (records or (id, text) pairs); ties -> smallest id."""
    items = [(r.id, r.instruction) if isinstance(r, InstructionExample) else tuple(r) for r in pool]
    if not items:
        raise ValueError("empty comparison pool")
    ct = rouge_tokens(candidate)
    best, best_id = -1.0, None
    for rid, text in items:
        s = rouge_l_tokens(ct, rouge_tokens(text))
        if s > best or (s == best and rid < best_id):
            best, best_id = s, rid
    return best, best_id


class _TokenPool:
    """Incrementally growing pool with cached tokenisations."""

    def __init__(self, records=()):
        self.ids: list[str] = []
        self.toks: list[list[str]] = []
        for r in records:
            self.add(r.id, r.instruction)

    def add(self, rid: str, text: str) -> None:
        self.ids.append(rid)
        self.toks.append(rouge_tokens(text))

    def best(self, text: str) -> tuple[float, str | None]:
        ct = rouge_tokens(text)
        best, best_id = -1.0, None
        for rid, toks in zip(self.ids, self.toks):
            s = rouge_l_tokens(ct, toks)
            if s > best or (s == best and rid < best_id):
                best, best_id = s, rid
        return (best, best_id) if best_id is not None else (0.0, None)


@dataclass(frozen=True)
class SeedPool:
    """Human-written seed tasks that start the generation loop."""
    seeds: tuple

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not self.seeds:
            raise ValueError("seed pool must contain at least one instruction")
        bad = [r.id for r in self.seeds if r.origin != "seed"]
        if bad:
            raise ValueError(f"seed pool records must have origin=seed: {bad[:3]}")

    def __iter__(self):
        return iter(self.seeds)

    def __len__(self):
        return len(self.seeds)


@dataclass
class GenBatchConfig:
    n_incontext: int = 3
    rouge_threshold: float = 0.7
    target_count: int = 100
    conditioning_pool: list = field(default_factory=list)
    seed: int = 0
    retain_when: str = "below"
    max_rounds: int = 1000
    patience: int = 50
    workers: int = 1
    lang: str = "en"
    id_prefix: str = "gen"

    def __post_init__(self):
        if not 0 < self.rouge_threshold <= 1:
            raise ValueError("rouge_threshold must lie in (0, 1]")
        if self.retain_when not in ("below", "above"):
            raise ValueError("retain_when must be 'below' or 'above'")


GEN_HEADER = (
    "Come up with a series of new, diverse tasks. Each task has an instruction, an input "
    "(write <empty> when the task needs none) and an appropriate output. Continue the numbered "
    "list with new tasks that differ from the examples."
)


def build_generation_prompt(examples) -> str:
    lines = [GEN_HEADER, ""]
    for i, ex in enumerate(examples, 1):
        lines.append(f"{i}. Instruction: {ex.instruction}")
        lines.append(f"{i}. Input: {ex.input or EMPTY_INPUT}")
        lines.append(f"{i}. Output: {ex.output}")
    lines.append(f"{len(examples) + 1}. Instruction:")
    return "\n".join(lines)


_TASK = re.compile(r"^\s*(\d+)\.\s*(Instruction|Input|Output):\s?(.*)$")


def parse_generated_tasks(prompt_tail_index: int, reply: str) -> tuple[list[dict], list[str]]:
    """Tasks in a continuation that starts right after ``N. Instruction:``.

    Returns (tasks, problems) where problems are human-readable skip reasons.
    """
    text = f"{prompt_tail_index}. Instruction:" + reply
    tasks: dict[int, dict] = {}
    order: list[int] = []
    for line in text.splitlines():
        m = _TASK.match(line)
        if not m:
            continue
        n, key, val = int(m.group(1)), m.group(2).lower(), m.group(3).strip()
        if n not in tasks:
            tasks[n] = {}
            order.append(n)
        tasks[n][key] = val
    out, problems = [], []
    for n in order:
        t = tasks[n]
        if not t.get("instruction") or "output" not in t:
            problems.append(f"task {n}: missing instruction or output")
            continue
        inp = t.get("input", "")
        out.append({"instruction": t["instruction"], "input": "" if inp == EMPTY_INPUT else inp,
                    "output": t["output"]})
    return out, problems


def _passes(score: float, cfg: GenBatchConfig) -> bool:
    if cfg.retain_when == "below":
        return score < cfg.rouge_threshold
    return score > cfg.rouge_threshold


def generate_instructions(teacher, seeds, cfg: GenBatchConfig, decisions: list | None = None,
                          partial_path=None, max_retries: int = 2) -> list[InstructionExample]:
    """Self-Instruct loop. Every accept/reject is appended to ``decisions``.

    Raises TeacherError after ``max_retries`` consecutive teacher failures, after
    writing the accepted records so far to ``partial_path`` if given.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("seed pool must contain at least one instruction")
    if cfg.target_count <= 0:
        raise ValueError("target_count must be positive")
    rng = np.random.default_rng(cfg.seed)
    pool = _TokenPool(cfg.conditioning_pool)
    accepted: list[InstructionExample] = []
    decisions = decisions if decisions is not None else []
    stale = 0
    workers = max(1, cfg.workers)
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for rnd in range(cfg.max_rounds):
            if len(accepted) >= cfg.target_count or stale >= cfg.patience:
                break
            prompts = []
            for _ in range(workers):
                source = seeds + accepted
                k = min(cfg.n_incontext, len(source))
                idx = rng.choice(len(source), size=k, replace=False)
                examples = [source[i] for i in sorted(idx)]
                prompts.append((build_generation_prompt(examples), len(examples) + 1))
            replies = _ask_all(teacher, [p for p, _ in prompts], executor, max_retries, accepted, partial_path)
            before = len(accepted)
            for (prompt, tail), reply in zip(prompts, replies):
                tasks, problems = parse_generated_tasks(tail, reply)
                for prob in problems:
                    decisions.append({"round": rnd, "decision": "skip", "reason": prob})
                    log.info("skipping unparseable task: %s", prob)
                for t in tasks:
                    if len(accepted) >= cfg.target_count:
                        break
                    score, block = pool.best(t["instruction"])
                    ok = block is None or _passes(score, cfg)
                    row = {"round": rnd, "instruction": t["instruction"], "score": score,
                           "blocking_id": block, "decision": "accept" if ok else "reject"}
                    decisions.append(row)
                    if ok:
                        rid = f"{cfg.id_prefix}-{len(accepted):06d}"
                        rec = InstructionExample(rid, cfg.lang, t["instruction"], t["input"], t["output"], "generated")
                        accepted.append(rec)
                        pool.add(rid, rec.instruction)
            stale = 0 if len(accepted) > before else stale + 1
    finally:
        if executor is not None:
            executor.shutdown()
    return accepted


def _ask_all(teacher, prompts, executor, max_retries, accepted, partial_path):
    def ask(prompt):
        err = None
        for _ in range(max_retries + 1):
            try:
                return teacher.chat([{"role": "user", "content": prompt}])
            except TeacherError as exc:
                err = exc
        raise err

    try:
        if executor is None:
            return [ask(p) for p in prompts]
        return list(executor.map(ask, prompts))
    except TeacherError:
        if partial_path is not None:
            save_corpus(Path(partial_path), accepted)
        raise


def pairwise_max_similarity(records) -> float:
    """Exhaustive all-pairs maximum ROUGE-L (novelty post-scan)."""
    toks = [rouge_tokens(r.instruction) for r in records]
    best = 0.0
    for i in range(len(toks)):
        for j in range(i + 1, len(toks)):
            best = max(best, rouge_l_tokens(toks[i], toks[j]))
    return best


_STOP = {"a", "an", "the", "of", "to", "for", "in", "on", "and", "some", "me", "your", "my", "this", "that"}


def verb_object_stats(records, top_verbs: int = 10, top_objects: int = 4) -> dict:
    """Approximate root-verb / direct-object counts: first token as verb, next content word as object.

    This is a token heuristic, not a dependency parse.
    """
    verbs: Counter = Counter()
    objects: dict[str, Counter] = {}
    for r in records:
        toks = [t.strip(".,:;!?\"'") for t in r.instruction.lower().split()]
        toks = [t for t in toks if t]
        if not toks:
            continue
        v = toks[0]
        verbs[v] += 1
        obj = next((t for t in toks[1:] if t not in _STOP and not t.isdigit()), None)
        if obj:
            objects.setdefault(v, Counter())[obj] += 1
    out = {"approximate": True, "verbs": []}
    for v, n in verbs.most_common(top_verbs):
        out["verbs"].append({"verb": v, "count": n,
                             "objects": objects.get(v, Counter()).most_common(top_objects)})
    return out


def length_stats(records, encode) -> dict:
    """Mean prompt (instruction + input) and response lengths in tokens under ``encode``."""
    if not records:
        return {"prompt": 0.0, "response": 0.0, "n": 0}
    p = [len(encode(r.instruction)) + len(encode(r.input)) for r in records]
    o = [len(encode(r.output)) for r in records]
    return {"prompt": float(np.mean(p)), "response": float(np.mean(o)), "n": len(records)}
