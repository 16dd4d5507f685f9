"""Teacher implementations: a deterministic synthetic oracle and an HTTP chat client."""

from __future__ import annotations

import hashlib
import json
import re
import time
from pathlib import Path

import httpx
import numpy as np

from .protocol import (RANK_TRANSLATE_TEMPLATE, RANKING_TEMPLATE, TRANSLATION_TEMPLATE, TeacherError,
                       extract_json_object, parse_fields, render_fields, render_ranks)
from .selfinstruct import GEN_HEADER
from .world import ENGLISH, MARKER, SyntheticLanguage, marker_judge, sample_task, vocabulary

_TRANSLATE_PREFIX = TRANSLATION_TEMPLATE.split("<target language>")[0]


def _rng_for(text: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}\x1f{text}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


class SyntheticTeacher:
    """Pure function of (conversation text, seed).

    * translation prompts: byte-permutation of every value into the named language;
    * ranking turn 1: inverse permutation back to English (the source language is
      detected as the one whose inverse yields the most known words);
    * ranking turn 2: ranks from ``judge(instruction, input, english_responses)``;
    * generation prompts: new word-list tasks, a fraction of them near-duplicates.
    """

    kind = "synthetic"

    def __init__(self, languages=(), judge=None, seed: int = 0, rank_form: str = "short",
                 tasks_per_reply: int = 4, near_dup_rate: float = 0.3, copy_rate: float = 0.0,
                 marker_rate: float = 0.3, vocab=None, garble_rate: float = 0.0):
        self.languages = {l.code: l for l in languages}
        self.languages.setdefault("en", ENGLISH)
        self.by_name = {l.name: l for l in self.languages.values()}
        self.judge = judge or marker_judge(MARKER)
        self.seed = seed
        self.rank_form = rank_form
        self.tasks_per_reply = tasks_per_reply
        self.near_dup_rate = near_dup_rate
        self.copy_rate = copy_rate
        self.marker_rate = marker_rate
        self.vocab = set(vocab) if vocab is not None else vocabulary()
        self.garble_rate = garble_rate

    def chat(self, messages: list[dict]) -> str:
        last = messages[-1]["content"]
        if last.startswith(_TRANSLATE_PREFIX):
            return self._translate(last)
        if last.startswith(RANK_TRANSLATE_TEMPLATE):
            return self._to_english(last)
        if last.startswith(RANKING_TEMPLATE):
            return self._rank(messages)
        if last.startswith(GEN_HEADER):
            return self._generate(last)
        raise TeacherError("synthetic teacher does not recognise this prompt")

    # -- translation
    def _translate(self, prompt: str) -> str:
        m = re.match(re.escape(_TRANSLATE_PREFIX) + r"(.+?) language\.", prompt)
        if not m or m.group(1) not in self.by_name:
            raise TeacherError("unknown target language in translation prompt")
        lang = self.by_name[m.group(1)]
        obj = extract_json_object(prompt)
        return json.dumps({k: lang.encode(v) if isinstance(v, str) else v for k, v in obj.items()},
                          ensure_ascii=False)

    # -- ranking
    def detect_language(self, text: str) -> SyntheticLanguage:
        best, best_score = ENGLISH, -1.0
        for code in sorted(self.languages):
            lang = self.languages[code]
            toks = lang.decode(text).split()
            score = sum(t in self.vocab for t in toks) / max(1, len(toks))
            if score > best_score:
                best, best_score = lang, score
        return best

    def _to_english(self, prompt: str) -> str:
        body = prompt[len(RANK_TRANSLATE_TEMPLATE):].lstrip("\n")
        instruction, inp, responses = parse_fields(body)
        lang = self.detect_language(instruction + " " + inp)
        return render_fields(lang.decode(instruction), lang.decode(inp), [lang.decode(r) for r in responses])

    def _rank(self, messages) -> str:
        english = next(m["content"] for m in reversed(messages[:-1]) if m["role"] == "assistant"
                       and m["content"].startswith("Instruction: "))
        instruction, inp, responses = parse_fields(english)
        ranks = self.judge(instruction, inp, responses)
        transcript = "\n".join(m["content"] for m in messages)
        if self.garble_rate and _rng_for(transcript, self.seed).random() < self.garble_rate:
            return "Response 1: 1\nResponse 2: 1\nResponse 3: 2\nResponse 4: 3"
        return render_ranks(ranks, self.rank_form)

    # -- generation
    def _generate(self, prompt: str) -> str:
        rng = _rng_for(prompt, self.seed)
        examples = re.findall(r"^\d+\. Instruction: (.*)$", prompt, re.M)
        start = int(re.findall(r"^(\d+)\. Instruction:$", prompt, re.M)[-1])
        lines = []
        for k in range(self.tasks_per_reply):
            n = start + k
            u = rng.random()
            if examples and u < self.copy_rate:
                t = {"instruction": examples[rng.integers(len(examples))], "input": "", "output": "ok"}
            elif examples and u < self.copy_rate + self.near_dup_rate:
                toks = examples[rng.integers(len(examples))].split()
                toks[-1] = toks[-1] + "s" if not toks[-1].endswith("s") else toks[-1][:-1]
                t = {"instruction": " ".join(toks), "input": "", "output": "ok"}
            else:
                t = sample_task(rng, self.marker_rate)
            head = " " if k == 0 else f"{n}. Instruction: "
            lines.append(head + t["instruction"])
            lines.append(f"{n}. Input: {t['input'] or '<empty>'}")
            lines.append(f"{n}. Output: {t['output']}")
        return "\n".join(lines)


def read_credentials(path) -> dict[str, str]:
    from .config import read_kv

    return read_kv(Path(path))


class ExternalTeacher:
    """Chat-completions style HTTP client with bounded retries.

    Retries on timeouts, connection errors, 429 and 5xx; any other non-2xx
    status fails immediately.
    """

    kind = "external"
    RETRYABLE = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout_ms: int = 60000,
                 max_retries: int = 3, backoff=(1.0, 2.0, 4.0), transport=None, sleep=time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout_ms = timeout_ms
        self.max_retries = max_retries
        self.backoff = tuple(backoff)
        self.sleep = sleep
        self.client = httpx.Client(timeout=timeout_ms / 1000.0, transport=transport)
        self.calls = 0

    def _delay(self, attempt: int) -> float:
        if not self.backoff:
            return 0.0
        return self.backoff[min(attempt, len(self.backoff) - 1)]

    def chat(self, messages: list[dict]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model, "messages": messages, "temperature": 0}
        last = None
        for attempt in range(self.max_retries + 1):
            self.calls += 1
            try:
                resp = self.client.post(self.endpoint, json=body, headers=headers)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code // 100 == 2:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise TeacherError(f"malformed teacher response: {exc}") from None
                if resp.status_code not in self.RETRYABLE:
                    raise TeacherError(f"teacher returned non-retryable status {resp.status_code}")
                last = f"status {resp.status_code}"
            if attempt < self.max_retries:
                self.sleep(self._delay(attempt))
        raise TeacherError(f"teacher failed after {self.max_retries} retries ({last})")

    def close(self) -> None:
        self.client.close()
