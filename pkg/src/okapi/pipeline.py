"""Stage orchestration: world -> generate -> translate -> sft -> sample_rank -> reward -> ppo -> eval -> report.

Every stage writes its artifacts plus a ``manifest.json`` holding the stage config,
the seed and sha256 hashes of its inputs and outputs. A rerun skips stages whose
manifest still matches; once one stage re-executes, every later stage does too.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import eval as ev
from . import lm, ppo, protocol, reward, selfinstruct, sft, world
from .config import ConfigError, apply_overrides, read_kv
from .records import load_corpus, load_ranked, save_corpus, save_ranked, write_jsonl
from .teacher import SyntheticTeacher

log = logging.getLogger(__name__)

STAGES = ("world", "generate", "translate", "sft", "sample_rank", "reward", "ppo", "eval", "report")
DEPENDS = {"generate": ("world",), "translate": ("world", "generate"), "sft": ("world", "translate"),
           "sample_rank": ("sft",), "reward": ("sample_rank", "sft"), "ppo": ("reward", "sft"),
           "eval": ("ppo", "sft", "world"), "report": ("eval",)}
PRESET_DIR = Path(__file__).parent / "presets"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


# ------------------------------------------------------------------ splits

def split_counts(n: int, spec=(52, 42, 64)) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items over ``spec``; ties go to the earlier pool."""
    spec = [float(s) for s in spec]
    if any(s <= 0 for s in spec):
        raise ValueError(f"split spec components must be positive, got {spec}")
    total = sum(spec)
    quotas = [n * s / total for s in spec]
    counts = [int(np.floor(q)) for q in quotas]
    left = n - sum(counts)
    order = sorted(range(len(spec)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return tuple(counts)


def split_pools(items, spec, seed: int = 0) -> tuple[list, ...]:
    """Seeded disjoint partition; each pool keeps the original item order."""
    items = list(items)
    counts = split_counts(len(items), spec)
    order = np.random.default_rng(seed).permutation(len(items))
    pools, start = [], 0
    for c in counts:
        idx = sorted(order[start:start + c].tolist())
        pools.append([items[i] for i in idx])
        start += c
    return tuple(pools)


def split_corpus(corpus, spec=(52, 42, 64), seed: int = 0):
    """(sft_pool, rank_pool, ppo_pool)."""
    corpus = list(corpus)
    if len(corpus) < 3:
        raise ValueError("corpus must hold at least 3 records")
    if len(spec) != 3:
        raise ValueError("split spec has three components (sft, rank, ppo)")
    return split_pools(corpus, spec, seed)


# ---------------------------------------------------------------- settings

@dataclass(frozen=True)
class WorldSettings:
    n_languages: int = 3
    corpus_size: int = 52
    seeds_per_language: int = 20
    marker_rate: float = 0.3
    resource_scale: str = ""
    pretrain_per_language: int = 200
    pretrain_steps: int = 150
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 8
    eval_items: int = 60


@dataclass(frozen=True)
class GenerateSettings:
    count: int = 106
    threshold: float = 0.7
    n_incontext: int = 3
    tasks_per_reply: int = 4
    near_dup_rate: float = 0.3
    retain_when: str = "below"


@dataclass(frozen=True)
class SplitSettings:
    spec: str = "52,42,64"
    sft_pool: str = "alpaca-analog"
    matched_data: bool = False

    def parts(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.spec.split(","))


@dataclass(frozen=True)
class RankSettings:
    judge: str = "marker"
    max_new_tokens: int = 32
    temperature: float = 1.0


@dataclass(frozen=True)
class RlhfSettings:
    reward_source: str = "model"


@dataclass(frozen=True)
class EvalSettings:
    n_shot: int = 0
    oracle_samples: int = 2
    max_new_tokens: int = 32
    temperature: float = 1.0


SECTIONS = {"world": WorldSettings, "generate": GenerateSettings, "split": SplitSettings,
            "rank": RankSettings, "rlhf": RlhfSettings, "eval": EvalSettings,
            "model": lm.ModelConfig, "sft": sft.SftConfig, "reward": reward.RewardConfig,
            "ppo": ppo.PpoConfig}


@dataclass(frozen=True)
class Settings:
    world: WorldSettings = WorldSettings()
    generate: GenerateSettings = GenerateSettings()
    split: SplitSettings = SplitSettings()
    rank: RankSettings = RankSettings()
    rlhf: RlhfSettings = RlhfSettings()
    eval: EvalSettings = EvalSettings()
    model: lm.ModelConfig = lm.ModelConfig()
    sft: sft.SftConfig = sft.SftConfig()
    reward: reward.RewardConfig = reward.RewardConfig()
    ppo: ppo.PpoConfig = ppo.PpoConfig()

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "Settings":
        grouped: dict[str, dict] = {}
        for key, val in values.items():
            if "." not in key:
                raise ConfigError(f"config key {key!r} needs a section prefix (e.g. sft.peak_lr)")
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section {sec!r}")
            grouped.setdefault(sec, {})[name] = val
        out = cls()
        try:
            for sec, vals in grouped.items():
                out = dataclasses.replace(out, **{sec: apply_overrides(getattr(out, sec), vals)})
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return out

    def section(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))

    def with_seed(self, seed: int) -> "Settings":
        return dataclasses.replace(
            self, model=dataclasses.replace(self.model, seed=seed),
            sft=dataclasses.replace(self.sft, seed=seed), reward=dataclasses.replace(self.reward, seed=seed),
            ppo=dataclasses.replace(self.ppo, seed=seed))


def load_settings(path=None, overrides: dict | None = None) -> Settings:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists() and (PRESET_DIR / f"{path}.cfg").exists():
            p = PRESET_DIR / f"{path}.cfg"
        values.update(read_kv(p))
    values.update(overrides or {})
    return Settings.from_kv(values)


def _scale_map(text: str) -> dict:
    out = {}
    for part in filter(None, (s.strip() for s in text.split(","))):
        k, v = part.split("=")
        out[k.strip()] = float(v)
    return out


PUBLISHED = Settings()


# ----------------------------------------------------------------- hashing

def sha256_path(path) -> str:
    """Content hash of a file, or of a directory's files (relative names included)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    if not path.is_dir():
        raise FileNotFoundError(path)
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode() + b"\0")
        h.update(f.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


# -------------------------------------------------------------------- plan

@dataclass
class RunPlan:
    out_dir: Path
    seed: int = 0
    stages: tuple = STAGES
    languages: tuple = ()
    settings: Settings = field(default_factory=Settings)
    split_spec: tuple = (52, 42, 64)
    resume: bool = True
    teacher: object = None

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}")
        pos = [STAGES.index(s) for s in self.stages]
        if pos != sorted(pos):
            raise ConfigError("stages must follow world, generate, translate, sft, sample_rank, reward, ppo, eval, report")
        if any(s <= 0 for s in self.split_spec):
            raise ConfigError("split proportions must be positive")


class Context:
    """Paths and lazily loaded artifacts of one run directory."""

    def __init__(self, plan: RunPlan):
        self.plan = plan
        self.root = plan.out_dir
        self.s = plan.settings.with_seed(plan.seed)
        self._world = None

    def d(self, stage: str) -> Path:
        return self.root / stage

    def world(self) -> world.World:
        if self._world is None:
            ws = self.s.world
            self._world = world.make_world(ws.n_languages, self.plan.seed, corpus_size=ws.corpus_size,
                                           seeds_per_language=ws.seeds_per_language,
                                           marker_rate=ws.marker_rate)
        return self._world

    def languages(self) -> list:
        w = self.world()
        codes = self.plan.languages or tuple(l.code for l in w.languages)
        return [w.language(c) for c in codes]

    def teacher(self):
        if self.plan.teacher is not None:
            return self.plan.teacher
        w = self.world()
        g = self.s.generate
        return SyntheticTeacher(w.languages, world.make_judge(self.s.rank.judge, seed=self.plan.seed),
                                seed=self.plan.seed, tasks_per_reply=g.tasks_per_reply,
                                near_dup_rate=g.near_dup_rate, marker_rate=w.marker_rate)

    def pools(self, code: str):
        """(sft_pool, rank_pool, ppo_pool, full_pool) for one language."""
        recs = load_corpus(self.d("translate") / f"{code}.jsonl")
        sp = self.s.split
        if sp.sft_pool == "alpaca-analog":
            alpaca = [r for r in recs if not r.id.startswith("gen-")]
            generated = [r for r in recs if r.id.startswith("gen-")]
            rank_pool, ppo_pool = split_pools(generated, self.plan.split_spec[1:], self.plan.seed)
            return alpaca, rank_pool, ppo_pool, recs
        if sp.sft_pool != "split":
            raise ConfigError(f"split.sft_pool must be alpaca-analog or split, got {sp.sft_pool!r}")
        a, b, c = split_corpus(recs, self.plan.split_spec, self.plan.seed)
        return a, b, c, recs


def _manifest_path(ctx: Context, stage: str) -> Path:
    return ctx.d(stage) / "manifest.json"


def _rel(ctx: Context, p: Path) -> str:
    return Path(p).relative_to(ctx.root).as_posix()


def _hashes(ctx: Context, paths) -> dict:
    return {_rel(ctx, p): sha256_path(p) for p in sorted(paths, key=lambda p: _rel(ctx, p))}


def _stage_config(ctx: Context, stage: str) -> dict:
    s = ctx.s
    secs = {"world": ("world", "model"), "generate": ("generate",), "translate": (),
            "sft": ("sft", "split"), "sample_rank": ("rank", "split"), "reward": ("reward",),
            "ppo": ("ppo", "rlhf", "split"), "eval": ("eval",), "report": ()}[stage]
    cfg = {sec: s.section(sec) for sec in secs}
    cfg["languages"] = [l.code for l in ctx.languages()] if stage != "world" else list(ctx.plan.languages)
    if stage in ("sample_rank", "ppo", "sft"):
        cfg["split_spec"] = list(ctx.plan.split_spec)
    return cfg


def _is_current(ctx: Context, stage: str) -> bool:
    mp = _manifest_path(ctx, stage)
    if not mp.exists():
        return False
    try:
        m = json.loads(mp.read_text())
        if m.get("seed") != ctx.plan.seed or m.get("config") != json.loads(json.dumps(_stage_config(ctx, stage))):
            return False
        for group in ("inputs", "outputs"):
            for rel, h in m[group].items():
                p = ctx.root / rel
                if not p.exists() or sha256_path(p) != h:
                    return False
    except (ValueError, KeyError, FileNotFoundError):
        return False
    return True


def _write_manifest(ctx: Context, stage: str, inputs, outputs) -> dict:
    m = {"stage": stage, "seed": ctx.plan.seed, "config": _stage_config(ctx, stage),
         "inputs": _hashes(ctx, inputs), "outputs": _hashes(ctx, outputs)}
    path = _manifest_path(ctx, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return m


# ------------------------------------------------------------------ stages

def stage_world(ctx: Context):
    w = ctx.world()
    out = ctx.d("world")
    world.write_world(w, out)
    ws = ctx.s.world
    scale = _scale_map(ws.resource_scale)
    text = world.pretraining_text(w, ws.pretrain_per_language, ctx.plan.seed, scale)
    seqs = [lm.tokenizer.encode(t, bos=True, eos=True) for t in text]
    base = lm.new_base(ctx.s.model)
    if ws.pretrain_steps:
        base = sft.train_lm(base, seqs, ws.pretrain_steps, ws.pretrain_lr, ws.pretrain_batch, ctx.plan.seed)
    lm.save_checkpoint(base, out / "base")
    outputs = [out / "registry.jsonl", out / "world.json", out / "base"]
    for code in w.corpora:
        outputs += [out / f"corpus_{code}.jsonl", out / f"seeds_{code}.jsonl"]
    for lang in w.languages:
        items = world.marker_eval_items(w, lang.code, ws.eval_items, ctx.plan.seed)
        ev.save_items(out / f"eval_{lang.code}.jsonl", items)
        outputs.append(out / f"eval_{lang.code}.jsonl")
    return [], outputs


def stage_generate(ctx: Context):
    wd, out = ctx.d("world"), ctx.d("generate")
    seeds = load_corpus(wd / "seeds_en.jsonl")
    pool = load_corpus(wd / "corpus_en.jsonl")
    g = ctx.s.generate
    cfg = selfinstruct.GenBatchConfig(n_incontext=g.n_incontext, rouge_threshold=g.threshold,
                                      target_count=g.count, conditioning_pool=pool, seed=ctx.plan.seed,
                                      retain_when=g.retain_when)
    decisions: list = []
    recs = selfinstruct.generate_instructions(ctx.teacher(), seeds, cfg, decisions,
                                              partial_path=out / "generated_en.partial.jsonl")
    if len(recs) < g.count:
        raise StageError("generate", f"only {len(recs)} of {g.count} instructions passed the novelty filter")
    save_corpus(out / "generated_en.jsonl", recs)
    write_jsonl(out / "decisions.jsonl", decisions)
    return ([wd / "seeds_en.jsonl", wd / "corpus_en.jsonl"],
            [out / "generated_en.jsonl", out / "decisions.jsonl"])


def stage_translate(ctx: Context):
    wd, gd, out = ctx.d("world"), ctx.d("generate"), ctx.d("translate")
    english = load_corpus(wd / "corpus_en.jsonl") + load_corpus(gd / "generated_en.jsonl")
    registry = ctx.world().registry
    outputs = []
    for lang in ctx.languages():
        recs = protocol.translate_corpus(ctx.teacher(), lang.language, english, registry=registry)
        outputs.append(save_corpus(out / f"{lang.code}.jsonl", recs))
    return [wd / "corpus_en.jsonl", gd / "generated_en.jsonl", wd / "registry.jsonl"], outputs


def stage_sft(ctx: Context):
    base_path, out = ctx.d("world") / "base", ctx.d("sft")
    base = lm.load_checkpoint(base_path)
    cfg, published = ctx.s.sft, dataclasses.asdict(PUBLISHED.sft)
    inputs, outputs = [base_path], []
    for lang in ctx.languages():
        sft_pool, _, _, full = ctx.pools(lang.code)
        inputs.append(ctx.d("translate") / f"{lang.code}.jsonl")
        init = sft.run_sft(base, sft_pool, cfg, published_defaults=published)
        outputs.append(lm.save_checkpoint(init, out / f"rlhf_{lang.code}"))
        # SFT comparison arm: the full pool, or the same pool under the matched-data ablation
        arm = init if ctx.s.split.matched_data else sft.run_sft(base, full, cfg, published_defaults=published)
        outputs.append(lm.save_checkpoint(arm, out / f"full_{lang.code}"))
    return inputs, outputs


def stage_sample_rank(ctx: Context):
    out = ctx.d("sample_rank")
    r = ctx.s.rank
    inputs, outputs = [], []
    for i, lang in enumerate(ctx.languages()):
        ck = ctx.d("sft") / f"rlhf_{lang.code}"
        _, rank_pool, _, _ = ctx.pools(lang.code)
        inputs += [ck, ctx.d("translate") / f"{lang.code}.jsonl"]
        policy = lm.load_checkpoint(ck)
        rep = protocol.produce_ranked_sets(ctx.teacher(), rank_pool, policy, seed=ctx.plan.seed * 1000 + i,
                                           source_lang=lang.language, max_new=r.max_new_tokens,
                                           temperature=r.temperature)
        if not rep.sets:
            raise StageError("sample_rank", f"{lang.code}: every ranking dialog was dropped")
        outputs.append(save_ranked(out / f"{lang.code}.jsonl", rep.sets))
        outputs.append(write_jsonl(out / f"dropped_{lang.code}.jsonl", rep.dropped))
    return inputs, outputs


def stage_reward(ctx: Context):
    out = ctx.d("reward")
    inputs, outputs = [], []
    for lang in ctx.languages():
        ck, data = ctx.d("sft") / f"rlhf_{lang.code}", ctx.d("sample_rank") / f"{lang.code}.jsonl"
        inputs += [ck, data]
        hist: list = []
        rm = reward.train_reward(lm.load_checkpoint(ck), load_ranked(data), ctx.s.reward, history=hist,
                                 published_defaults=dataclasses.asdict(PUBLISHED.reward))
        outputs.append(lm.save_checkpoint(rm, out / lang.code))
        outputs.append(write_jsonl(out / f"metrics_{lang.code}.jsonl", hist))
    return inputs, outputs


def oracle_reward_fn(lang: world.SyntheticLanguage):
    """Marker count of each sampled response (counted in the target script)."""
    def score(prompts, responses):
        return [world.oracle_reward("marker_count", "", lang.decode(ppo.response_text(y))) for y in responses]

    return score


def stage_ppo(ctx: Context):
    out = ctx.d("ppo")
    source = ctx.s.rlhf.reward_source
    if source not in ("model", "oracle"):
        raise ConfigError(f"rlhf.reward_source must be model or oracle, got {source!r}")
    inputs, outputs = [], []
    for lang in ctx.languages():
        ck, rk = ctx.d("sft") / f"rlhf_{lang.code}", ctx.d("reward") / lang.code
        _, _, ppo_pool, _ = ctx.pools(lang.code)
        inputs += [ck, ctx.d("translate") / f"{lang.code}.jsonl"]
        init = lm.load_checkpoint(ck)
        if source == "model":
            inputs.append(rk)
            rm, fn = lm.load_checkpoint(rk), None
        else:
            rm, fn = None, oracle_reward_fn(lang)
        hist: list = []
        pol = ppo.run_ppo(init, rm, ppo_pool, ctx.s.ppo, reward_fn=fn, history=hist,
                          published_defaults=dataclasses.asdict(PUBLISHED.ppo))
        outputs.append(lm.save_checkpoint(pol, out / lang.code))
        outputs.append(write_jsonl(out / f"log_{lang.code}.jsonl", hist))
    return inputs, outputs


MODEL_COLUMNS = (("base", "Base"), ("sft", "SFT"), ("sft_init", "SFT-init"), ("rlhf", "RLHF"))


def mean_oracle_reward(model: lm.PolicyCheckpoint, lang: world.SyntheticLanguage, items, samples: int,
                       max_new: int, temperature: float, seed: int) -> float:
    """Average marker count over ``samples`` sampled responses per item context."""
    vals = []
    for i, item in enumerate(items):
        prompt = lm.tokenizer.encode(item.context, bos=True)
        for k in range(samples):
            y = ppo.sample_response(model, prompt, max_new, temperature, ppo._subseed(seed, i, k))
            vals.append(world.oracle_reward("marker_count", item.context, lang.decode(ppo.response_text(y))))
    return float(np.mean(vals)) if vals else float("nan")


def stage_eval(ctx: Context):
    out, wd = ctx.d("eval"), ctx.d("world")
    e = ctx.s.eval
    langs = ctx.languages()
    reports = {m: {"model": label, "accuracy": {"none": {}, "per_token": {}}, "skipped": 0,
                   "registry": {}} for m, label in MODEL_COLUMNS}
    oracle = {"model": "oracle_marker_count", "per_language": {}}
    inputs = [wd / "base"]
    for lang in langs:
        items = ev.load_dataset(wd / f"eval_{lang.code}.jsonl")
        paths = {"base": wd / "base", "sft": ctx.d("sft") / f"full_{lang.code}",
                 "sft_init": ctx.d("sft") / f"rlhf_{lang.code}", "rlhf": ctx.d("ppo") / lang.code}
        inputs += [wd / f"eval_{lang.code}.jsonl", paths["sft"], paths["sft_init"], paths["rlhf"]]
        models = {m: lm.load_checkpoint(p) for m, p in paths.items()}
        for m, model in models.items():
            res = ev.evaluate(model, items, n_shot=e.n_shot, shot_pool=(), seed=ctx.plan.seed)
            rep = reports[m]
            for norm in ev.NORMS:
                rep["accuracy"][norm][lang.code] = res.accuracy(norm)
            rep["skipped"] += len(res.skipped)
            rep["registry"][lang.code] = {"name": lang.name, "cc_ratio_percent": lang.cc_ratio_percent,
                                          "category": lang.category}
        oracle["per_language"][lang.code] = {
            m: mean_oracle_reward(models[m], lang, items, e.oracle_samples, e.max_new_tokens,
                                  e.temperature, ctx.plan.seed)
            for m in ("sft_init", "rlhf")}
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for m, rep in reports.items():
        outputs.append(out / f"{m}.json")
        (out / f"{m}.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    (out / "oracle.json").write_text(json.dumps(oracle, indent=2, sort_keys=True) + "\n")
    outputs.append(out / "oracle.json")
    return inputs, outputs


def registry_from_reports(reports) -> list[protocol.Language]:
    seen = {}
    for rep in reports:
        for code, d in rep.get("registry", {}).items():
            seen[code] = protocol.Language(code, d["name"], d["cc_ratio_percent"])
    return list(seen.values())


def combine_reports(reports, norm: str = "per_token") -> tuple[dict, list]:
    """Average same-named model reports (e.g. over seeds) into EvalReports keyed by model label."""
    registry = registry_from_reports(reports)
    by_model: dict[str, list] = {}
    for rep in reports:
        by_model.setdefault(rep["model"], []).append(rep["accuracy"][norm])
    out = {}
    for name, accs in by_model.items():
        langs = sorted(set().union(*accs))
        mean = {c: float(np.mean([a[c] for a in accs if c in a])) for c in langs}
        out[name] = ev.aggregate(mean, registry)
    return out, registry


def render_report(reports, oracle=(), fmt: str = "md") -> str:
    parts = []
    names = {}
    for rep in reports:
        names.update({c: d["name"] for c, d in rep.get("registry", {}).items()})
    for norm in ev.NORMS:
        combined, registry = combine_reports(reports, norm)
        title = f"Accuracy (%), scoring={norm}"
        parts.append(f"## {title}\n" if fmt == "md" else f"# {title}\n")
        parts.append(ev.render_table(combined, registry, fmt, names=names))
    if oracle:
        codes = sorted(set().union(*(o["per_language"] for o in oracle)))
        parts.append("## Mean oracle reward (marker count)\n" if fmt == "md" else "# Mean oracle reward\n")
        rows = [["Language", "SFT-init", "RLHF"]]
        for c in codes:
            vals = [o["per_language"][c] for o in oracle if c in o["per_language"]]
            rows.append([names.get(c, c)] + [f"{np.mean([v[m] for v in vals]):.3f}" for m in ("sft_init", "rlhf")])
        if fmt == "tsv":
            parts.append("\n".join("\t".join(r) for r in rows) + "\n")
        else:
            lines = ["| " + " | ".join(rows[0]) + " |", "|---|---|---|"]
            lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
            parts.append("\n".join(lines) + "\n")
    return "\n".join(parts)


def stage_report(ctx: Context):
    ed, out = ctx.d("eval"), ctx.d("report")
    files = [ed / f"{m}.json" for m, _ in MODEL_COLUMNS]
    reports = [json.loads(p.read_text()) for p in files]
    oracle = [json.loads((ed / "oracle.json").read_text())]
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(render_report(reports, oracle, "md"))
    (out / "report.tsv").write_text(render_report(reports, oracle, "tsv"))
    return files + [ed / "oracle.json"], [out / "report.md", out / "report.tsv"]


STAGE_FUNCS = {"world": stage_world, "generate": stage_generate, "translate": stage_translate,
               "sft": stage_sft, "sample_rank": stage_sample_rank, "reward": stage_reward,
               "ppo": stage_ppo, "eval": stage_eval, "report": stage_report}


@dataclass
class RunResult:
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    manifests: dict = field(default_factory=dict)


def run_plan(plan: RunPlan, only_stages=None) -> RunResult:
    """Execute the plan's stages in order, resuming where manifests still match."""
    ctx = Context(plan)
    ctx.root.mkdir(parents=True, exist_ok=True)
    result = RunResult()
    dirty = False
    for stage in plan.stages:
        if only_stages is not None and stage not in only_stages:
            continue
        if plan.resume and not dirty and _is_current(ctx, stage):
            log.info("stage %s is up to date", stage)
            result.skipped.append(stage)
            result.manifests[stage] = json.loads(_manifest_path(ctx, stage).read_text())
            continue
        dirty = True
        log.info("running stage %s", stage)
        try:
            inputs, outputs = STAGE_FUNCS[stage](ctx)
        except (StageError, ConfigError):
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        result.manifests[stage] = _write_manifest(ctx, stage, inputs, outputs)
        result.executed.append(stage)
    return result
