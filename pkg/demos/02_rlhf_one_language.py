"""SFT, reward model and PPO for one synthetic language, step by step.

The preference signal is the number of marker characters in a response, so
each stage has a ground truth to check against.
"""

import dataclasses

from okapi import eval as ev
from okapi import lm, pipeline, ppo, reward, sft, world

settings = pipeline.load_settings("desk", {"model.n_layers": "2", "model.d_model": "24"})
w = world.make_world(3, seed=0)
lang = w.languages[0]
corpus = w.corpora[lang.code]
sft_pool, rank_pool, ppo_pool = pipeline.split_corpus(corpus, seed=0)
print(f"{lang.name} ({lang.category}): sft {len(sft_pool)}, rank {len(rank_pool)}, ppo {len(ppo_pool)}")

hist = []
base = lm.new_base(settings.model)
sft_model = sft.run_sft(base, sft_pool, dataclasses.replace(settings.sft, epochs=3), history=hist)
print(f"SFT loss {hist[0]['loss']:.3f} -> {hist[-1]['loss']:.3f}")

sets = world.synthetic_ranked_sets(w, lang.code, 200, seed=0)
hist = []
rm = reward.train_reward(sft_model, sets, settings.reward, history=hist)
print(f"reward model held-out pairwise accuracy {hist[-1]['heldout_accuracy']:.3f}")

hist = []
policy = ppo.run_ppo(sft_model, None, ppo_pool, dataclasses.replace(settings.ppo, epochs=2, trainable_top_layers=2),
                     reward_fn=pipeline.oracle_reward_fn(lang), history=hist)
for row in hist:
    print(f"PPO epoch {row['epoch']}: mean reward {row['mean_reward']:.2f}, mean KL {row['mean_kl']:.3f}")

items = world.marker_eval_items(w, lang.code, 30, seed=0)
for name, model in (("SFT", sft_model), ("RLHF", policy)):
    r = ev.evaluate(model, items)
    mean_reward = pipeline.mean_oracle_reward(model, lang, items, 1, 24, 1.0, 0)
    print(f"{name}: marker accuracy {r.accuracy('per_token'):.2f}, mean oracle reward {mean_reward:.2f}")
