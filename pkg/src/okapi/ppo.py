"""Token-level PPO against a reward model with a KL penalty toward the frozen SFT policy.

The KL term is folded into per-token shaped rewards; the reward model's score
is added at the final token. Only the top ``trainable_top_layers`` blocks, the
final layer norm and the value head are updated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import lm
from .optim import AdamW, clip_grad_norm, value_and_grad
from .records import InstructionExample
from .reward import join, reward_scores
from .sft import DEFAULT_FORMAT, PromptFormat

VALUE_W, VALUE_B = "value.w", "value.b"


@dataclass(frozen=True)
class PpoConfig:
    epochs: int = 5
    kl_beta: float = 0.05
    clip_eps: float = 0.2
    batch_size: int = 32
    lr: float = 1e-6
    weight_decay: float = 0.1
    adam_betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    trainable_top_layers: int = 4
    gae_lambda: float = 0.95
    gae_gamma: float = 1.0
    seed: int = 0
    max_new_tokens: int = 32
    temperature: float = 1.0
    value_coef: float = 0.5
    value_clip: float = 0.2
    minibatch_size: int = 0
    grad_clip: float = 0.0

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.trainable_top_layers < 0:
            raise ValueError("trainable_top_layers must be >= 0")


@dataclass
class Rollout:
    prompt: list
    response: list
    per_token_logp_policy: np.ndarray
    per_token_logp_ref: np.ndarray
    reward_final: float
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))


def kl_term(rollout: Rollout) -> float:
    """Sampled estimate of KL(policy || ref): sum of per-token log-ratio."""
    lp, lr = np.asarray(rollout.per_token_logp_policy), np.asarray(rollout.per_token_logp_ref)
    if lp.shape != lr.shape or lp.shape[0] != len(rollout.response):
        raise ValueError(f"per-token arrays disagree: {lp.shape}, {lr.shape}, |y|={len(rollout.response)}")
    return float(np.sum(lp - lr))


def shaped_rewards(rollout: Rollout, beta: float) -> np.ndarray:
    lp, lr = np.asarray(rollout.per_token_logp_policy), np.asarray(rollout.per_token_logp_ref)
    r = -beta * (lp - lr)
    if len(r):
        r[-1] += rollout.reward_final
    return r


def gae_advantages(rollout: Rollout, cfg: PpoConfig, rewards=None) -> tuple[np.ndarray, np.ndarray]:
    """Raw (un-whitened) GAE advantages and returns; ``values`` has a trailing terminal 0."""
    n = len(rollout.response)
    if n == 0:
        raise ValueError("empty response")
    v = np.asarray(rollout.values, dtype=np.float64)
    if v.shape != (n + 1,):
        raise ValueError(f"values must have length |y|+1 = {n + 1}, got {v.shape}")
    r = shaped_rewards(rollout, cfg.kl_beta) if rewards is None else np.asarray(rewards, dtype=np.float64)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        delta = r[t] + cfg.gae_gamma * v[t + 1] - v[t]
        last = delta + cfg.gae_gamma * cfg.gae_lambda * last
        adv[t] = last
    return adv, adv + v[:-1]


def whiten(chunks: list[np.ndarray]) -> list[np.ndarray]:
    """Whiten advantages jointly over a batch; zero variance gives zeros."""
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    if flat.size == 0:
        return chunks
    mu, sd = flat.mean(), flat.std()
    if sd < 1e-12:
        return [np.zeros_like(c) for c in chunks]
    return [(c - mu) / (sd + 1e-8) for c in chunks]


def ppo_policy_loss(ratio, advantages, clip_eps: float) -> float:
    ratio, advantages = np.asarray(ratio, dtype=np.float64), np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * advantages
    return float(np.mean(-np.minimum(unclipped, clipped)))


def trainable_names(params: dict, n_layers: int, k: int) -> list[str]:
    first = n_layers - k
    out = []
    for name in params:
        bi = lm.block_index(name)
        if (bi is not None and bi >= first) or name.startswith(("ln_f.", "value.")):
            out.append(name)
    return sorted(out)


def with_value_head(sft: lm.PolicyCheckpoint) -> dict:
    params = {k: v.copy() for k, v in sft.params.items() if not k.startswith(("reward.", "value."))}
    params[VALUE_W] = np.zeros(sft.config.d_model)
    params[VALUE_B] = np.zeros(1)
    return params


def _gather_positions(prompts, responses):
    rows, cols, targets = [], [], []
    for i, (p, y) in enumerate(zip(prompts, responses)):
        for t, tok in enumerate(y):
            rows.append(i)
            cols.append(len(p) - 1 + t)
            targets.append(tok)
    return np.array(rows), np.array(cols), np.array(targets)


def policy_forward(p: dict, cfg: lm.ModelConfig, prompts, responses, frozen_blocks: int = 0):
    """Per-token log-probs of the responses and per-state values, flattened in rollout order."""
    seqs = [list(x) + list(y) for x, y in zip(prompts, responses)]
    toks = lm.pad_batch(seqs)
    h = lm.trunk(p, cfg, toks, frozen_blocks)
    rows, cols, targets = _gather_positions(prompts, responses)
    B, T, d = h.shape
    # hidden state of every action's preceding position, (n_actions, d)
    hs = ad.embedding(ad.reshape(h, (B * T, d)), rows * T + cols)
    logp = ad.gather_last(ad.log_softmax(ad.matmul(hs, p["lm_head"]), axis=-1), targets)
    values = None
    if VALUE_W in p:
        v = ad.add(ad.matmul(hs, ad.reshape(p[VALUE_W], (d, 1))), p[VALUE_B])
        values = ad.reshape(v, (len(rows),))
    return logp, values


def _split(flat: np.ndarray, lengths) -> list[np.ndarray]:
    return np.split(np.asarray(flat), np.cumsum(lengths)[:-1]) if len(lengths) else []


def sample_response(model: lm.PolicyCheckpoint, prompt, max_new: int, temperature: float, seed: int) -> list[int]:
    """Sampled action tokens, including the terminating EOS when one is drawn."""
    room = model.config.context_len - len(prompt)
    n = max(0, min(max_new, room))
    out = lm.generate(model, prompt, n, temperature, seed)
    if len(out) < n:
        out = out + [lm.EOS]
    return out


def response_text(actions) -> str:
    return lm.tokenizer.decode([t for t in actions if t != lm.EOS])


def _subseed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_reward_fn(rm: lm.PolicyCheckpoint):
    if rm.role != "reward":
        raise ValueError(f"run_ppo expects a reward checkpoint, got {rm.role!r}")

    def score(prompts, responses):
        pairs = []
        for x, y in zip(prompts, responses):
            y = [t for t in y if t != lm.EOS]
            if len(join(x, y)) > rm.config.context_len:
                raise ValueError("rollout longer than the reward model context")
            pairs.append((x, y))
        return reward_scores(rm, pairs)

    return score


def collect_rollouts(params, ref: lm.PolicyCheckpoint, cfg: PpoConfig, prompts, reward_fn,
                     seeds) -> list[Rollout]:
    policy = lm.PolicyCheckpoint(ref.config, params, "ppo")
    responses = [sample_response(policy, x, cfg.max_new_tokens, cfg.temperature, s)
                 for x, s in zip(prompts, seeds)]
    keep = [i for i, y in enumerate(responses) if y]
    prompts = [prompts[i] for i in keep]
    responses = [responses[i] for i in keep]
    if not prompts:
        return []
    lengths = [len(y) for y in responses]
    with ad.no_grad():
        lp, vals = policy_forward(lm.as_tensors(params), ref.config, prompts, responses)
        lp_ref, _ = policy_forward(lm.as_tensors(ref.params), ref.config, prompts, responses)
    rewards = np.asarray(reward_fn(prompts, responses), dtype=np.float64)
    out = []
    for x, y, a, b, v, r in zip(prompts, responses, _split(lp.data, lengths), _split(lp_ref.data, lengths),
                                _split(vals.data, lengths), rewards):
        out.append(Rollout(list(x), list(y), a.copy(), b.copy(), float(r), np.append(v, 0.0)))
    return out


def ppo_step(params, opt, cfg: PpoConfig, model_cfg: lm.ModelConfig, rollouts: list[Rollout],
             names: list[str]) -> dict:
    advs = []
    for ro in rollouts:
        a, ret = gae_advantages(ro, cfg)
        ro.advantages, ro.returns = a, ret
        advs.append(a)
    for ro, a in zip(rollouts, whiten(advs)):
        ro.advantages = a
    mb = cfg.minibatch_size or len(rollouts)
    frozen = model_cfg.n_layers - min(cfg.trainable_top_layers, model_cfg.n_layers)
    stats = {"policy_loss": [], "value_loss": []}
    for i in range(0, len(rollouts), mb):
        part = rollouts[i:i + mb]
        old_lp = np.concatenate([r.per_token_logp_policy for r in part])
        old_v = np.concatenate([r.values[:-1] for r in part])
        adv = np.concatenate([r.advantages for r in part])
        ret = np.concatenate([r.returns for r in part])

        def loss_fn(p):
            lp, v = policy_forward(p, model_cfg, [r.prompt for r in part], [r.response for r in part], frozen)
            ratio = ad.exp(ad.sub(lp, ad.constant(old_lp)))
            surr1 = ad.mul(ratio, ad.constant(adv))
            surr2 = ad.mul(ad.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps), ad.constant(adv))
            pg = ad.scale(ad.mean(ad.minimum(surr1, surr2)), -1.0)
            v_clip = ad.add(ad.constant(old_v), ad.clip(ad.sub(v, ad.constant(old_v)), -cfg.value_clip, cfg.value_clip))
            e1 = ad.sub(v, ad.constant(ret))
            e2 = ad.sub(v_clip, ad.constant(ret))
            vl = ad.scale(ad.mean(ad.maximum(ad.mul(e1, e1), ad.mul(e2, e2))), 0.5)
            total = ad.add(pg, ad.scale(vl, cfg.value_coef))
            return total, (pg.item(), vl.item())

        loss, (pg, vl), grads = value_and_grad(params, loss_fn, names)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite PPO loss")
        if cfg.grad_clip:
            clip_grad_norm(grads, cfg.grad_clip)
        opt.step(params, grads, cfg.lr)
        stats["policy_loss"].append(pg)
        stats["value_loss"].append(vl)
    return {k: float(np.mean(v)) for k, v in stats.items()}


def run_ppo(sft: lm.PolicyCheckpoint, rm: lm.PolicyCheckpoint | None, prompts: list[InstructionExample],
            cfg: PpoConfig, fmt: PromptFormat = DEFAULT_FORMAT, reward_fn=None,
            history: list | None = None, published_defaults: dict | None = None) -> lm.PolicyCheckpoint:
    """Optimise the SFT policy. ``reward_fn(prompt_tokens_list, action_tokens_list)`` overrides ``rm``."""
    if sft.role != "sft":
        raise ValueError(f"run_ppo expects an sft checkpoint, got {sft.role!r}")
    if reward_fn is None:
        if rm is None:
            raise ValueError("either a reward checkpoint or reward_fn is required")
        reward_fn = make_reward_fn(rm)
    mcfg = sft.config
    if cfg.trainable_top_layers > mcfg.n_layers:
        raise ValueError("trainable_top_layers exceeds n_layers")
    ref = lm.PolicyCheckpoint(mcfg, {k: v for k, v in sft.params.items()}, "sft")
    params = with_value_head(sft)
    names = trainable_names(params, mcfg.n_layers, cfg.trainable_top_layers)
    opt = AdamW({k: params[k] for k in names}, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
    prompt_toks = [fmt.prompt_tokens(r.instruction, r.input) for r in prompts]
    rng = np.random.default_rng(cfg.seed)
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prompt_toks))
        rewards, kls, pls, vls = [], [], [], []
        for bi in range(0, len(order), cfg.batch_size):
            idx = order[bi:bi + cfg.batch_size]
            seeds = [_subseed(cfg.seed, epoch, i) for i in idx]
            ros = collect_rollouts(params, ref, cfg, [prompt_toks[i] for i in idx], reward_fn, seeds)
            if not ros:
                continue
            rewards += [r.reward_final for r in ros]
            kls += [kl_term(r) for r in ros]
            st = ppo_step(params, opt, cfg, mcfg, ros, names)
            pls.append(st["policy_loss"])
            vls.append(st["value_loss"])
        row = {"epoch": epoch, "mean_reward": float(np.mean(rewards)) if rewards else None,
               "mean_kl": float(np.mean(kls)) if kls else None,
               "policy_loss": float(np.mean(pls)) if pls else None,
               "value_loss": float(np.mean(vls)) if vls else None}
        log.append(row)
        if history is not None:
            history.append(row)
    record = {"stage": "ppo", "config": asdict(cfg), "n_prompts": len(prompts),
              "trainable": names, "log": log}
    if published_defaults is not None:
        record["published_defaults"] = published_defaults
    return sft.derive("ppo", params, record)


def mean_kl_to(policy: lm.PolicyCheckpoint, ref: lm.PolicyCheckpoint, prompts, max_new: int,
               seed: int = 0, temperature: float = 1.0) -> float:
    """Average sampled KL(policy || ref) over fresh rollouts from ``policy``."""
    kls = []
    for i, x in enumerate(prompts):
        y = sample_response(policy, x, max_new, temperature, _subseed(seed, 7919, i))
        if not y:
            continue
        seq = list(x) + y
        a = lm.token_logprobs(policy, seq, len(x))
        b = lm.token_logprobs(ref, seq, len(x))
        kls.append(float(np.sum(a - b)))
    return float(np.mean(kls)) if kls else 0.0
