import numpy as np
import pytest

from okapi import lm


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.fixture
def tiny_cfg():
    return lm.ModelConfig(n_layers=2, d_model=16, n_heads=2, context_len=64, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return lm.new_base(tiny_cfg)


def uniform_model(vocab: int = 256, context_len: int = 64) -> lm.ScriptedModel:
    cfg = lm.ModelConfig(n_layers=1, d_model=16, n_heads=2, context_len=context_len, vocab_size=vocab)
    return lm.ScriptedModel(cfg, lambda t: np.zeros(t.shape + (vocab,)))


# smallest settings under which the whole stage plan runs in a few seconds
TINY = {"model.n_layers": "2", "model.d_model": "16", "model.n_heads": "2", "model.context_len": "128",
        "world.n_languages": "2", "world.corpus_size": "12", "world.seeds_per_language": "4",
        "world.pretrain_per_language": "10", "world.pretrain_steps": "5", "world.eval_items": "6",
        "generate.count": "10", "sft.epochs": "1", "sft.batch_size": "8", "sft.warmup_steps": "1",
        "reward.epochs": "1", "reward.batch_size": "8", "ppo.epochs": "1", "ppo.batch_size": "4",
        "ppo.max_new_tokens": "6", "ppo.trainable_top_layers": "1", "rank.max_new_tokens": "6",
        "eval.max_new_tokens": "6", "eval.oracle_samples": "1"}


# one summary line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
