"""Walk through the teacher protocol on a synthetic world.

Generates a few novel English instructions, translates them into a synthetic
language, then runs the two-turn ranking dialog on four candidate responses.
"""

from okapi import protocol, selfinstruct, world
from okapi.records import InstructionExample
from okapi.teacher import SyntheticTeacher

w = world.make_world(3, seed=0, corpus_size=20, seeds_per_language=8)
print("languages:", [(l.code, l.name, l.category) for l in w.languages])

teacher = SyntheticTeacher(w.languages, world.make_judge("marker"), seed=0, near_dup_rate=0.3)
seeds = selfinstruct.SeedPool(w.seeds["en"])
decisions = []
cfg = selfinstruct.GenBatchConfig(target_count=6, conditioning_pool=list(seeds), seed=0)
generated = selfinstruct.generate_instructions(teacher, seeds, cfg, decisions)
print(f"\ngenerated {len(generated)} instructions, rejected {sum(d['decision'] == 'reject' for d in decisions)}:")
for r in generated:
    print("  ", r.instruction)

lang = w.languages[1]
rec = generated[0]
print("\ntranslation prompt:\n" + protocol.build_translation_prompt(lang.language, rec, w.registry))
out = protocol.translate_record(teacher, lang.language, rec, w.registry)
print("translated:", out.instruction, "| decoded back:", lang.decode(out.instruction))

responses = [lang.encode(s) for s in ("apple pear", "apple* pear*", "apple* pear", "fig* kiwi* lime*")]
base = InstructionExample("demo", lang.code, out.instruction, out.input, "", "translated")
turn1, turn2 = protocol.build_ranking_dialog(base, responses, lang.language)
print("\nranking turn 1:\n" + turn1)
print("\nranking turn 2:\n" + turn2)
ranks, transcript = protocol.run_ranking_dialog(teacher, base, responses, lang.language)
print("\nteacher reply:\n" + transcript[-1]["content"])
print("ranks:", ranks)
