"""Scalar reward head on the LM trunk, trained with the pairwise ranking loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from . import lm
from .optim import AdamW, clip_grad_norm, value_and_grad
from .records import RankedResponseSet, check_permutation
from .sft import DEFAULT_FORMAT, PromptFormat

HEAD_W, HEAD_B = "reward.w", "reward.b"


@dataclass(frozen=True)
class PreferencePair:
    x: tuple
    y_c: tuple
    y_r: tuple
    source_ranks: tuple

    def __post_init__(self):
        a, b = self.source_ranks
        if a == b or min(a, b) < 1:
            raise ValueError(f"bad source ranks {self.source_ranks}")
        if not a < b:
            raise ValueError("preferred response must have the better (smaller) rank")


@dataclass(frozen=True)
class RewardConfig:
    epochs: int = 2
    batch_size: int = 64
    lr: float = 1e-5
    seed: int = 0
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    holdout_fraction: float = 0.1
    grad_clip: float = 0.0


def ranking_loss(score_c: float, score_r: float) -> float:
    """-log sigmoid(score_c - score_r), as softplus(-(score_c - score_r))."""
    return float(np.logaddexp(0.0, -(score_c - score_r)))


def pair_indices(ranks) -> list[tuple[int, int]]:
    """0-based (chosen, rejected) response positions for every pair, better rank first."""
    ranks = check_permutation(ranks, len(ranks))
    out = []
    for i, j in combinations(range(len(ranks)), 2):
        out.append((i, j) if ranks[i] < ranks[j] else (j, i))
    return out


def pairs_from_ranked(rset: RankedResponseSet, fmt: PromptFormat = DEFAULT_FORMAT) -> list[PreferencePair]:
    x = tuple(fmt.prompt_tokens(rset.base.instruction, rset.base.input))
    ys = [tuple(lm.tokenizer.encode(r)) for r in rset.responses]
    return [PreferencePair(x, ys[c], ys[r], (rset.ranks[c], rset.ranks[r]))
            for c, r in pair_indices(rset.ranks)]


def with_reward_head(sft: lm.PolicyCheckpoint) -> dict:
    params = {k: v.copy() for k, v in sft.params.items() if not k.startswith(("reward.", "value."))}
    params[HEAD_W] = np.zeros(sft.config.d_model)
    params[HEAD_B] = np.zeros(1)
    return params


def join(x, y) -> list[int]:
    return list(x) + [lm.SEP] + list(y)


def final_positions(seqs) -> np.ndarray:
    return np.array([len(s) - 1 for s in seqs])


def scores_tensor(p: dict, cfg: lm.ModelConfig, seqs) -> ad.Tensor:
    """Reward for each (already joined) sequence, shape (B,)."""
    for s in seqs:
        if len(s) > cfg.context_len:
            raise ValueError(f"sequence length {len(s)} exceeds context_len {cfg.context_len}")
    toks = lm.pad_batch(seqs)
    h = lm.trunk(p, cfg, toks)
    B, T, d = h.shape
    sel = np.zeros((B, T, d))
    sel[np.arange(B), final_positions(seqs)] = 1.0
    last = ad.sum_(ad.mul(h, ad.constant(sel)), axis=1)
    out = ad.add(ad.matmul(last, ad.reshape(p[HEAD_W], (d, 1))), p[HEAD_B])
    return ad.reshape(out, (B,))


def reward_score(rm: lm.PolicyCheckpoint, x, y) -> float:
    if rm.role != "reward":
        raise ValueError(f"reward_score expects a reward checkpoint, got {rm.role!r}")
    return float(reward_scores(rm, [(x, y)])[0])


def reward_scores(rm: lm.PolicyCheckpoint, pairs) -> np.ndarray:
    seqs = [join(x, y) for x, y in pairs]
    with ad.no_grad():
        return scores_tensor(lm.as_tensors(rm.params), rm.config, seqs).data.copy()


def final_states(rm: lm.PolicyCheckpoint, x, y) -> np.ndarray:
    """Trunk state the head reads for (x, y); exposed for inspection."""
    seq = join(x, y)
    with ad.no_grad():
        h = lm.trunk(lm.as_tensors(rm.params), rm.config, np.asarray(seq)[None, :]).data
    return h[0, -1].copy()


def _set_batches(n_sets: int, sets_per_batch: int, rng):
    order = rng.permutation(n_sets)
    for i in range(0, n_sets, sets_per_batch):
        yield order[i:i + sets_per_batch]


def _batch_loss(p, cfg, set_pairs):
    """Mean ranking loss over all pairs of the given sets; unique sequences scored once."""
    seqs, index = [], {}
    ci, ri = [], []
    for pairs in set_pairs:
        for pr in pairs:
            for y, bucket in ((pr.y_c, ci), (pr.y_r, ri)):
                key = (pr.x, y)
                if key not in index:
                    index[key] = len(seqs)
                    seqs.append(join(pr.x, y))
                bucket.append(index[key])
    s = scores_tensor(p, cfg, seqs)
    n = len(ci)
    pick_c = np.zeros((len(seqs), n))
    pick_c[ci, np.arange(n)] = 1.0
    pick_r = np.zeros((len(seqs), n))
    pick_r[ri, np.arange(n)] = 1.0
    s_row = ad.reshape(s, (1, len(seqs)))
    delta = ad.sub(ad.matmul(s_row, ad.constant(pick_c)), ad.matmul(s_row, ad.constant(pick_r)))
    loss = ad.mean(ad.softplus(ad.scale(delta, -1.0)))
    return loss, delta.data.reshape(-1)


def pairwise_accuracy(rm: lm.PolicyCheckpoint, pairs: list[PreferencePair], chunk: int = 64) -> float:
    if not pairs:
        return float("nan")
    wins = 0
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        sc = reward_scores(rm, [(p.x, p.y_c) for p in part])
        sr = reward_scores(rm, [(p.x, p.y_r) for p in part])
        wins += int((sc > sr).sum())
    return wins / len(pairs)


def split_sets(data, holdout_fraction: float, seed: int):
    n = len(data)
    n_hold = int(round(n * holdout_fraction)) if n > 1 else 0
    n_hold = min(max(n_hold, 1 if holdout_fraction > 0 and n > 1 else 0), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    hold = sorted(order[:n_hold].tolist())
    train = sorted(order[n_hold:].tolist())
    return [data[i] for i in train], [data[i] for i in hold]


def train_reward(sft: lm.PolicyCheckpoint, data: list[RankedResponseSet], cfg: RewardConfig,
                 fmt: PromptFormat = DEFAULT_FORMAT, history: list | None = None,
                 published_defaults: dict | None = None) -> lm.PolicyCheckpoint:
    if sft.role != "sft":
        raise ValueError(f"train_reward expects an sft checkpoint, got {sft.role!r}")
    if not data:
        raise ValueError("no ranked response sets")
    train_sets, hold_sets = split_sets(list(data), cfg.holdout_fraction, cfg.seed)
    train_pairs = [pairs_from_ranked(s, fmt) for s in train_sets]
    hold_pairs = [pr for s in hold_sets for pr in pairs_from_ranked(s, fmt)]
    params = with_reward_head(sft)
    opt = AdamW(params, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    per_set = max(1, len(train_pairs[0]) if train_pairs else 1)
    sets_per_batch = max(1, math.ceil(cfg.batch_size / per_set))
    metrics = []
    for epoch in range(cfg.epochs):
        losses, wins, count = [], 0, 0
        for idx in _set_batches(len(train_pairs), sets_per_batch, rng):
            batch = [train_pairs[i] for i in idx]
            loss, delta, grads = value_and_grad(params, lambda p: _batch_loss(p, sft.config, batch))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite reward loss in epoch {epoch}")
            if cfg.grad_clip:
                clip_grad_norm(grads, cfg.grad_clip)
            opt.step(params, grads, cfg.lr)
            losses.append(loss)
            wins += int((delta > 0).sum())
            count += len(delta)
        snapshot = lm.PolicyCheckpoint(sft.config, params, "reward")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
               "train_accuracy": wins / count if count else None,
               "heldout_accuracy": pairwise_accuracy(snapshot, hold_pairs) if hold_pairs else None}
        metrics.append(row)
        if history is not None:
            history.append(row)
    record = {"stage": "reward", "config": asdict(cfg), "n_sets": len(data),
              "n_train_sets": len(train_sets), "n_heldout_sets": len(hold_sets), "metrics": metrics}
    if published_defaults is not None:
        record["published_defaults"] = published_defaults
    return sft.derive("reward", params, record)


def heldout_pairs(data, cfg: RewardConfig, fmt: PromptFormat = DEFAULT_FORMAT) -> list[PreferencePair]:
    _, hold = split_sets(list(data), cfg.holdout_fraction, cfg.seed)
    return [pr for s in hold for pr in pairs_from_ranked(s, fmt)]
