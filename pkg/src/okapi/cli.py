"""``okapi`` command line: one subcommand per pipeline stage plus ``run``.

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import eval as ev
from . import lm, pipeline, ppo, protocol, reward, selfinstruct, sft, world
from .config import ConfigError, read_kv
from .protocol import TeacherError
from .records import load_corpus, load_ranked, save_corpus, save_ranked, write_jsonl
from .teacher import ExternalTeacher, SyntheticTeacher, read_credentials

log = logging.getLogger("okapi")


def _settings(args) -> pipeline.Settings:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    return pipeline.load_settings(args.config, overrides)


def _teacher(args, languages=()):
    if args.teacher == "synthetic":
        return SyntheticTeacher(languages, seed=args.seed)
    if not args.endpoint or not args.model:
        raise ConfigError("--teacher external needs --endpoint and --model")
    key = None
    if args.credentials:
        key = read_credentials(args.credentials).get("api_key")
    return ExternalTeacher(args.endpoint, args.model, key, args.timeout_ms, args.max_retries)


def _registry(args):
    """Synthetic world registry if given, else the published language table."""
    if getattr(args, "registry", None):
        return world.read_registry(args.registry)
    return []


def _lang(code: str, synth):
    for l in synth:
        if l.code == code:
            return l.language
    return protocol.registry_lookup(protocol.OKAPI_LANGUAGES, code)


def cmd_world(args):
    s = _settings(args)
    plan = pipeline.RunPlan(Path(args.out), seed=args.seed,
                            settings=dataclasses.replace(s, world=dataclasses.replace(s.world, n_languages=args.n_langs)),
                            stages=("world",), resume=False)
    pipeline.run_plan(plan)
    print(Path(args.out) / "world")


def cmd_generate(args):
    seeds = load_corpus(args.seeds)
    pool = load_corpus(args.pool) if args.pool else []
    cfg = selfinstruct.GenBatchConfig(target_count=args.count, rouge_threshold=args.threshold,
                                      conditioning_pool=pool, seed=args.seed, retain_when=args.retain_when)
    decisions: list = []
    out = Path(args.out)
    recs = selfinstruct.generate_instructions(_teacher(args), seeds, cfg, decisions,
                                              partial_path=out.with_suffix(".partial.jsonl"))
    save_corpus(out, recs)
    write_jsonl(out.with_suffix(".decisions.jsonl"), decisions)
    print(f"{len(recs)} instructions -> {out}")


def cmd_translate(args):
    synth = _registry(args)
    target = _lang(args.lang, synth)
    registry = [l.language for l in synth] if synth else None
    recs = protocol.translate_corpus(_teacher(args, synth), target, load_corpus(args.data),
                                     workers=args.workers, registry=registry)
    save_corpus(args.out, recs)
    print(f"{len(recs)} records -> {args.out}")


def cmd_sample_rank(args):
    synth = _registry(args)
    policy = lm.load_checkpoint(args.sft)
    src = _lang(args.lang, synth) if args.lang else None
    s = _settings(args)
    rep = protocol.produce_ranked_sets(_teacher(args, synth), load_corpus(args.data), policy, seed=args.seed,
                                       source_lang=src, max_new=s.rank.max_new_tokens,
                                       temperature=s.rank.temperature)
    out = Path(args.out)
    save_ranked(out, rep.sets)
    write_jsonl(out.with_suffix(".dropped.jsonl"), rep.dropped)
    print(f"{len(rep.sets)} ranked sets ({len(rep.dropped)} dropped) -> {out}")


def cmd_sft(args):
    s = _settings(args)
    cfg = dataclasses.replace(s.sft, seed=args.seed)
    hist: list = []
    ck = sft.run_sft(lm.load_checkpoint(args.base), load_corpus(args.data), cfg, history=hist,
                     published_defaults=dataclasses.asdict(pipeline.PUBLISHED.sft))
    lm.save_checkpoint(ck, args.out)
    write_jsonl(Path(args.out) / "history.jsonl", hist)
    print(args.out)


def cmd_reward(args):
    s = _settings(args)
    cfg = dataclasses.replace(s.reward, seed=args.seed)
    hist: list = []
    rm = reward.train_reward(lm.load_checkpoint(args.sft), load_ranked(args.ranked), cfg, history=hist,
                             published_defaults=dataclasses.asdict(pipeline.PUBLISHED.reward))
    lm.save_checkpoint(rm, args.out)
    write_jsonl(Path(args.out) / "metrics.jsonl", hist)
    print(json.dumps(hist[-1] if hist else {}))


def cmd_ppo(args):
    s = _settings(args)
    cfg = dataclasses.replace(s.ppo, seed=args.seed)
    hist: list = []
    pol = ppo.run_ppo(lm.load_checkpoint(args.sft), lm.load_checkpoint(args.reward), load_corpus(args.prompts),
                      cfg, history=hist, published_defaults=dataclasses.asdict(pipeline.PUBLISHED.ppo))
    lm.save_checkpoint(pol, args.out)
    log_path = Path(args.log) if args.log else Path(args.out) / "ppo_log.jsonl"
    with log_path.open("a") as f:
        for row in hist:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(args.out)


def cmd_eval(args):
    model = lm.load_checkpoint(args.model_path)
    items = ev.load_dataset(args.data, args.format, lang=args.lang)
    shots = ev.load_dataset(args.shots, args.format, lang=args.lang) if args.shots else ()
    res = ev.evaluate(model, items, n_shot=args.n_shot, shot_pool=shots, seed=args.seed, workers=args.workers)
    synth = _registry(args)
    reg = {}
    for code in sorted({i.lang for i in items}):
        try:
            l = _lang(code, synth)
        except KeyError:
            continue
        reg[code] = {"name": l.name, "cc_ratio_percent": l.cc_ratio_percent, "category": l.category}
    rep = {"model": args.name or Path(args.model_path).name, "registry": reg, "skipped": len(res.skipped),
           "accuracy": {n: res.per_language(n) for n in ev.NORMS}, "per_item": res.per_item}
    Path(args.out).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(json.dumps(rep["accuracy"]))


def cmd_report(args):
    reports = [json.loads(Path(p).read_text()) for p in args.inputs]
    oracle = [r for r in reports if "per_language" in r]
    reports = [r for r in reports if "accuracy" in r]
    text = pipeline.render_report(reports, oracle, args.format)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_run(args):
    s = _settings(args)
    stages = tuple(args.stages.split(",")) if args.stages else pipeline.STAGES
    spec = tuple(float(x) for x in s.split.spec.split(","))
    teacher = None if args.teacher == "synthetic" else _teacher(args)
    plan = pipeline.RunPlan(Path(args.out_dir), seed=args.seed, stages=stages,
                            languages=tuple(args.langs.split(",")) if args.langs else (),
                            settings=s, split_spec=spec, resume=not args.no_resume, teacher=teacher)
    res = pipeline.run_plan(plan)
    print(f"executed: {', '.join(res.executed) or '-'}; up to date: {', '.join(res.skipped) or '-'}")
    report = Path(args.out_dir) / "report" / "report.md"
    if report.exists() and "report" in res.executed:
        print(report.read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="key=value file or preset name (desk, published)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--out-dir", default="runs/default")
    common.add_argument("--teacher", choices=("synthetic", "external"), default="synthetic")
    common.add_argument("--endpoint")
    common.add_argument("--model-name", dest="model", help="teacher model name for --teacher external")
    common.add_argument("--credentials", help="key=value file holding api_key")
    common.add_argument("--timeout-ms", type=int, default=60000)
    common.add_argument("--max-retries", type=int, default=3)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="okapi", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, parents=[common], **kw)
        sp.set_defaults(func=fn)
        return sp

    sp = add("world", cmd_world, help="write a synthetic world")
    sp.add_argument("--n-langs", type=int, default=3)
    sp.add_argument("--out", required=True)

    sp = add("generate", cmd_generate, help="self-instruct generation")
    sp.add_argument("--seeds", required=True)
    sp.add_argument("--pool")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--threshold", type=float, default=0.7)
    sp.add_argument("--retain-when", choices=("below", "above"), default="below")
    sp.add_argument("--out", required=True)

    sp = add("translate", cmd_translate, help="translate a corpus through the teacher")
    sp.add_argument("--data", required=True)
    sp.add_argument("--lang", required=True)
    sp.add_argument("--registry", help="synthetic registry.jsonl (default: published language table)")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)

    for name in ("sample-rank", "rank"):
        sp = add(name, cmd_sample_rank, help="sample 4 responses and rank them with the teacher")
        sp.add_argument("--sft", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--lang")
        sp.add_argument("--registry")
        sp.add_argument("--out", required=True)

    sp = add("sft", cmd_sft, help="supervised fine-tuning")
    sp.add_argument("--base", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("reward", cmd_reward, help="reward model training")
    sp.add_argument("--sft", required=True)
    sp.add_argument("--ranked", required=True)
    sp.add_argument("--out", required=True)

    sp = add("ppo", cmd_ppo, help="PPO fine-tuning")
    sp.add_argument("--sft", required=True)
    sp.add_argument("--reward", required=True)
    sp.add_argument("--prompts", required=True)
    sp.add_argument("--log")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, help="multiple-choice evaluation")
    sp.add_argument("--model", dest="model_path", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--format", default="canonical", choices=("canonical", "arc", "hellaswag", "mmlu"))
    sp.add_argument("--lang", default="en")
    sp.add_argument("--shots")
    sp.add_argument("--n-shot", type=int, default=0)
    sp.add_argument("--name")
    sp.add_argument("--registry")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, help="render result tables")
    sp.add_argument("--in", dest="inputs", nargs="+", required=True)
    sp.add_argument("--format", choices=("md", "tsv"), default="md")
    sp.add_argument("--out")

    sp = add("run", cmd_run, help="run the full stage plan")
    sp.add_argument("--stages", help="comma-separated subset of " + ",".join(pipeline.STAGES))
    sp.add_argument("--langs", help="comma-separated language codes (default: all)")
    sp.add_argument("--no-resume", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (pipeline.StageError, TeacherError, protocol.ProtocolError, FloatingPointError,
            ValueError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
