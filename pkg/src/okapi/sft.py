"""Supervised instruction fine-tuning with a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import lm
from .optim import AdamW, clip_grad_norm, value_and_grad
from .records import InstructionExample, corpus_fingerprint


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 3
    peak_lr: float = 2e-5
    warmup_steps: int = 200
    batch_size: int = 128
    weight_decay: float = 0.05
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_mask_policy: str = "response_only"
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.loss_mask_policy not in ("full_sequence", "response_only"):
            raise ValueError(f"unknown loss_mask_policy {self.loss_mask_policy!r}")


@dataclass(frozen=True)
class PromptFormat:
    template: str = "Instruction: {instruction}\nInput: {input}\nResponse: {output}"
    no_input_template: str = "Instruction: {instruction}\nResponse: {output}"
    response_marker: str = "\nResponse: "
    loss_mask_policy: str = "response_only"

    def prompt(self, instruction: str, input: str = "") -> str:
        for part in (instruction, input):
            if self.response_marker in part:
                raise ValueError("instruction/input must not contain the response marker")
        tpl = self.template if input else self.no_input_template
        return tpl.format(instruction=instruction, input=input, output="")

    def render(self, rec: InstructionExample) -> str:
        return self.prompt(rec.instruction, rec.input) + rec.output

    def split(self, text: str) -> tuple[str, str]:
        """Inverse of :meth:`render`: (prompt, response)."""
        i = text.index(self.response_marker) + len(self.response_marker)
        return text[:i], text[i:]

    def prompt_tokens(self, instruction: str, input: str = "") -> list[int]:
        return lm.tokenizer.encode(self.prompt(instruction, input), bos=True)

    def encode(self, rec: InstructionExample, policy: str | None = None) -> tuple[list[int], list[int]]:
        """Token ids (BOS ... EOS) and a loss mask over the same positions."""
        policy = policy or self.loss_mask_policy
        p = self.prompt_tokens(rec.instruction, rec.input)
        r = lm.tokenizer.encode(rec.output, eos=True)
        if policy == "full_sequence":
            mask = [0] + [1] * (len(p) - 1 + len(r))
        else:
            mask = [0] * len(p) + [1] * len(r)
        return p + r, mask


DEFAULT_FORMAT = PromptFormat()


def lr_at(step: int, total_steps: int, cfg: SftConfig) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to zero at ``total_steps``."""
    w = cfg.warmup_steps
    if total_steps <= w:
        raise ValueError(f"total_steps ({total_steps}) must exceed warmup_steps ({w})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < w:
        return cfg.peak_lr * step / w
    progress = (step - w) / (total_steps - w)
    return max(0.0, cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def run_sft(base: lm.PolicyCheckpoint, corpus: list[InstructionExample], cfg: SftConfig,
            fmt: PromptFormat = DEFAULT_FORMAT, history: list | None = None,
            published_defaults: dict | None = None) -> lm.PolicyCheckpoint:
    if base.role != "base":
        raise ValueError(f"run_sft expects a base checkpoint, got role {base.role!r}")
    if not corpus:
        raise ValueError("empty SFT corpus")
    encoded = [fmt.encode(r, cfg.loss_mask_policy) for r in corpus]
    for rec, (toks, _) in zip(corpus, encoded):
        if len(toks) > base.config.context_len:
            raise ValueError(f"record {rec.id} encodes to {len(toks)} tokens > context_len")
    params = {k: v.copy() for k, v in base.params.items()}
    opt = AdamW(params, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batches(len(corpus), cfg.batch_size, rng):
            seqs = [encoded[i][0] for i in idx]
            masks = [encoded[i][1] for i in idx]
            loss, _, grads = value_and_grad(
                params, lambda p: lm.lm_loss_tensor(p, base.config, seqs, masks))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite SFT loss at step {step}")
            if cfg.grad_clip:
                clip_grad_norm(grads, cfg.grad_clip)
            step += 1
            lr = lr_at(step, total, cfg)
            opt.step(params, grads, lr)
            if history is not None:
                history.append({"epoch": epoch, "step": step, "loss": loss, "lr": lr})
    record = {"stage": "sft", "config": asdict(cfg), "corpus_fingerprint": corpus_fingerprint(corpus),
              "n_examples": len(corpus), "steps": total}
    if published_defaults is not None:
        record["published_defaults"] = published_defaults
    return base.derive("sft", params, record)


def train_lm(model: lm.PolicyCheckpoint, sequences, steps: int, lr: float = 3e-3,
             batch_size: int = 8, seed: int = 0, weight_decay: float = 0.0,
             history: list | None = None) -> lm.PolicyCheckpoint:
    """Plain next-token training on raw token sequences; keeps the role unchanged.

    Used to give the synthetic base model a little pre-training before SFT.
    """
    params = {k: v.copy() for k, v in model.params.items()}
    opt = AdamW(params, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    cfg = model.config
    for step in range(steps):
        idx = rng.choice(len(sequences), size=min(batch_size, len(sequences)), replace=False)
        batch = [sequences[i] for i in idx]
        loss, _, grads = value_and_grad(params, lambda p: lm.lm_loss_tensor(p, cfg, batch))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.step(params, grads, lr)
        if history is not None:
            history.append({"step": step, "loss": loss})
    rec = {"stage": "pretrain", "steps": steps, "lr": lr, "batch_size": batch_size, "seed": seed,
           "n_sequences": len(sequences)}
    return lm.PolicyCheckpoint(cfg, params, model.role, model.provenance + (rec,))
