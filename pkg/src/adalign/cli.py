"""Command-line entry point: ``adalign <subcommand> [flags]``.

Exit codes: 0 ok, 2 config error, 3 runtime error, 4 acceptance check failed.
Errors print one line ``error: <kind>: <reason>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import align_tasks, command_labeler, disalign_metrics, scene_sim, text_metrics
from . import token_mixer as tm
from .config import RunConfig
from .decoder.checkpoint import CheckpointError
from .decoder.model import DecoderConfig
from .decoder.schedule import make_schedule
from .decoder.training import AlignedModel, TrainConfig, TrainingAborted, train_stage1, train_stage2
from .numerics.rng import Rng
from .numerics.tensor import ConfigError

log = logging.getLogger("adalign")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPT = 0, 2, 3, 4
STRATEGY_CHOICES = ("barbell", "early", "pyramid", "hammer")
METRICS = ("cd", "pd", "md", "pld")


class AcceptanceFailure(RuntimeError):
    pass


# --- context -------------------------------------------------------------------------
class Run:
    def __init__(self, args):
        self.args = args
        self.cfg = RunConfig.load(args.config)
        if args.seed is not None:
            self.cfg.set("run", "seed", args.seed)
        if args.workers is not None:
            self.cfg.set("run", "workers", args.workers)
        if getattr(args, "strategy", None):
            self.cfg.set("schedule", "strategy", args.strategy)
        self.seed = self.cfg["run"]["seed"]
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.cfg.hash, "seed": self.seed}

    @property
    def rng(self) -> Rng:
        return Rng(self.seed)

    def scene_config(self) -> scene_sim.SceneConfig:
        s = self.cfg["scene"]
        return scene_sim.SceneConfig(min_objects=s["min_objects"], max_objects=s["max_objects"],
                                     x_range=(s["x_min"], s["x_max"]), y_range=(s["y_min"], s["y_max"]))

    def noise(self) -> scene_sim.NoiseConfig:
        return scene_sim.NoiseConfig(**self.cfg["noise"])

    def scenes(self, split: str, n: int | None = None) -> list[scene_sim.Scene]:
        n = self.cfg["run"]["n_train" if split == "train" else "n_eval"] if n is None else n
        rng = self.rng.child(split)
        cfg = self.scene_config()
        start = 0 if split == "train" else 10 ** 6
        workers = self.cfg["run"]["workers"]
        if workers <= 1 or n < 2 * workers:
            return scene_sim.generate_scenes(rng, n, cfg, start)
        chunks = np.array_split(np.arange(n), workers)
        with ThreadPoolExecutor(workers) as pool:
            parts = pool.map(lambda c: [scene_sim.generate_scene(rng.child(start + int(i)), cfg, start + int(i))
                                        for i in c], chunks)
        return [s for part in parts for s in part]

    def eval_tokens(self, scenes):
        rng = self.rng.child("eval-ad")
        noise = self.noise()
        return [scene_sim.mock_ad_inference(s, rng.child(i), noise) for i, s in enumerate(scenes)]

    def train_config(self) -> TrainConfig:
        t = dict(self.cfg["train"])
        t.pop("dtype")
        return TrainConfig(**t, max_rank=self.cfg["run"]["max_rank"], ratios=dict(self.cfg["mix"]),
                           warmup_ratios=dict(self.cfg["warmup_mix"]), noise=self.noise())

    def new_model(self, mode: str, strategy: str | None = None) -> AlignedModel:
        m, d, s = self.cfg["mixer"], self.cfg["decoder"], self.cfg["schedule"]
        mixer_cfg = tm.MixerConfig(embed_dim=m["embed_dim"], n_bev_blocks=m["n_bev_blocks"],
                                   n_instance_blocks=m["n_instance_blocks"], n_heads=m["n_heads"],
                                   mlp_hidden=m["mlp_hidden"])
        dec_cfg = DecoderConfig(n_layers=d["n_layers"], dim=d["dim"], n_heads=d["n_heads"],
                                mlp_hidden=d["mlp_hidden"], max_len=d["max_len"],
                                n_adapter_tokens=d["n_adapter_tokens"], context_dim=m["embed_dim"])
        sched = make_schedule(strategy or s["strategy"], d["n_layers"], s["n_front"], s["n_end"])
        return AlignedModel(mixer_cfg, dec_cfg, sched, mode, self.seed, np.dtype(self.cfg["train"]["dtype"]))

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        log.info("wrote %s", path)
        return path


# --- training helpers -------------------------------------------------------------------
def _stage1(run: Run) -> AlignedModel:
    model = run.new_model("aligned")
    train_stage1(model, run.scenes("train"), run.train_config(), run.rng)
    return model


def _stage2(run: Run, base: AlignedModel, mode: str, strategy: str | None = None):
    model = run.new_model(mode, strategy)
    model.load_base(base)
    model.history = [h for h in base.history if h["stage"] == 1]
    audit = train_stage2(model, run.scenes("train"), run.train_config(), run.rng)
    return model, audit


def _save(run: Run, model: AlignedModel, name: str, **extra) -> Path:
    path = run.out / name
    model.save(path, dict(run.provenance, config=run.cfg.values, **extra))
    log.info("wrote %s", path)
    return path


def _evaluate(run: Run, model: AlignedModel) -> disalign_metrics.DisalignmentReport:
    tokens = run.eval_tokens(run.scenes("eval"))
    max_len = run.cfg["run"]["max_answer_len"]
    fn = lambda samples, toks: model.answer(samples, toks, max_len)  # noqa: E731
    return disalign_metrics.evaluate(fn, tokens, run.rng.child("eval-q"), run.cfg["run"]["max_rank"])


def _kv_header(run: Run, **extra) -> str:
    items = dict(run.provenance, **extra)
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _load(path) -> AlignedModel:
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return AlignedModel.load(path)


# --- subcommands ------------------------------------------------------------------------
def cmd_simulate(run: Run) -> int:
    n = run.args.n if run.args.n is not None else run.cfg["run"]["n_train"]
    scenes = run.scenes("train", n)
    path = run.out / "scenes.jsonl"
    scene_sim.save_scenes(path, scenes, meta=run.provenance)
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_gen(run: Run) -> int:
    n = run.args.n if run.args.n is not None else run.cfg["run"]["n_train"]
    scenes = run.scenes("train", n)
    rng = run.rng.child("gen")
    noise = run.noise()
    frames = [(s, scene_sim.mock_ad_inference(s, rng.child(i), noise)) for i, s in enumerate(scenes)]
    ratios = align_tasks.MixRatios(**run.cfg["mix"])
    samples = align_tasks.build_batch(frames, ratios, rng.child("tasks"), run.cfg["run"]["max_rank"])
    align_tasks.dump_samples(run.out / "samples.jsonl", samples,
                             meta=dict(run.provenance, template_hash=align_tasks.template_hash()))
    return EXIT_OK


def cmd_train(run: Run) -> int:
    mode = run.args.mode
    if run.args.stage == 1:
        model = _stage1(run)
        _save(run, model, "stage1.ckpt")
        return EXIT_OK
    base_path = Path(run.args.base) if run.args.base else run.out / "stage1.ckpt"
    if not base_path.exists():
        raise ConfigError(f"stage 2 needs a stage-1 checkpoint; {base_path} not found")
    base = _load(base_path)
    model, audit = _stage2(run, base, mode)
    _save(run, model, f"stage2_{mode}.ckpt", audit=audit)
    run.write(f"audit_{mode}.json", json.dumps(audit, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_eval_align(run: Run) -> int:
    path = run.args.checkpoint or run.out / f"stage2_{run.args.mode}.ckpt"
    model = _load(path)
    rep = _evaluate(run, model)
    run.write(f"eval_{model.mode}.txt", _kv_header(run, mode=model.mode) + rep.to_kv())
    run.write(f"eval_{model.mode}.json", disalign_metrics.report_json(rep))
    return EXIT_OK


def cmd_eval_captions(run: Run) -> int:
    if run.args.predictions:
        cands, refs = [], []
        for line in Path(run.args.predictions).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                cands.append(rec["candidate"])
                refs.append(rec["references"])
    else:
        path = run.args.checkpoint or run.out / f"stage2_{run.args.mode}.ckpt"
        model = _load(path)
        scenes = run.scenes("eval")
        tokens = run.eval_tokens(scenes)
        rng = run.rng.child("eval-captions")
        samples = [align_tasks.gen_explanation(s, rng.child(i)) for i, s in enumerate(scenes)]
        cands = model.answer(samples, tokens, run.cfg["run"]["max_answer_len"])
        refs = [s.references for s in samples]
    if not cands:
        raise ConfigError("no captions to score")
    scores = text_metrics.score_corpus(cands, refs)
    rec = dict(run.provenance, mean=scores["mean"], per_sample=scores["per_sample"], n=len(cands),
               samples=[{"candidate": c, "references": r} for c, r in zip(cands, refs)])
    run.write("captions.json", json.dumps(rec, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_label_commands(run: Run) -> int:
    if run.args.input:
        n = command_labeler.label_file(run.args.input, run.out / "commands.txt")
        log.info("labelled %d trajectories", n)
        return EXIT_OK
    scenes = run.scenes("train", run.args.n)
    lines = [f"{s.scene_id}\t{command_labeler.label(s.trajectory())}" for s in scenes]
    run.write("commands.txt", "".join(line + "\n" for line in lines))
    return EXIT_OK


def _table(rows: list[tuple[str, dict]], title: str) -> str:
    out = [f"| {title} | CD | PD | MD | PLD |", "|---|---|---|---|---|"]
    for name, m in rows:
        out.append(f"| {name} | " + " | ".join(f"{m[k]:.3f}" for k in METRICS) + " |")
    return "\n".join(out) + "\n"


def cmd_ablate_schedule(run: Run) -> int:
    base = _stage1(run)
    _save(run, base, "stage1.ckpt")
    rows, kv = [], []
    for strategy in ("barbell", "early_fusion", "pyramid", "hammer"):
        model, _ = _stage2(run, base, "aligned", strategy)
        rep = _evaluate(run, model)
        rows.append((f"{strategy} {model.schedule.sorted_layers}", rep.metrics()))
        kv += [f"{strategy}.{k}={v:.6f}" for k, v in rep.metrics().items()]
    run.write("ablation.md", _table(rows, "strategy (adapter layers)"))
    run.write("ablation.txt", _kv_header(run) + "".join(line + "\n" for line in kv))
    return EXIT_OK


def paradigm_verdict(aligned: dict, declarative: dict) -> tuple[bool, str]:
    better = [k for k in METRICS if aligned[k] < declarative[k]]
    pd_gain = 1.0 - aligned["pd"] / declarative["pd"] if declarative["pd"] > 0 else 0.0
    md_gain = 1.0 - aligned["md"] / declarative["md"] if declarative["md"] > 0 else 0.0
    ok = len(better) >= 3 and pd_gain >= 0.30 and md_gain >= 0.30
    reason = (f"aligned lower on {len(better)}/4 ({','.join(better) or 'none'}); "
              f"pd {pd_gain:+.1%}, md {md_gain:+.1%}")
    return ok, reason


def cmd_compare_paradigms(run: Run) -> int:
    base = _stage1(run)
    _save(run, base, "stage1.ckpt")
    reports = {}
    for mode in ("aligned", "declarative"):
        model, audit = _stage2(run, base, mode)
        _save(run, model, f"stage2_{mode}.ckpt", audit=audit)
        reports[mode] = _evaluate(run, model)
        run.write(f"eval_{mode}.txt", _kv_header(run, mode=mode) + reports[mode].to_kv())
    a, d = reports["aligned"].metrics(), reports["declarative"].metrics()
    ok, reason = paradigm_verdict(a, d)
    run.write("compare.md", _table([("aligned", a), ("declarative", d)], "paradigm"))
    kv = [f"{mode}.{k}={v:.6f}" for mode, m in (("aligned", a), ("declarative", d)) for k, v in m.items()]
    kv += [f"verdict={'pass' if ok else 'fail'}", f"reason={reason}"]
    run.write("compare.txt", _kv_header(run) + "".join(line + "\n" for line in kv))
    if run.args.assert_ and not ok:
        raise AcceptanceFailure(reason)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", metavar="DIR", default="runs", help="artifact directory (default: runs)")
    common.add_argument("--workers", type=int, help="threads for scene generation")
    common.add_argument("--mode", choices=("aligned", "declarative"), default="aligned",
                        help="context given to the decoder")
    common.add_argument("--strategy", choices=STRATEGY_CHOICES, help="adapter schedule override")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="adalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="generate scenes to scenes.jsonl")
    s.add_argument("--n", type=int, help="number of scenes (default: run.n_train)")
    s = sub.add_parser("gen", parents=[common], help="generate task samples to samples.jsonl")
    s.add_argument("--n", type=int, help="number of samples (default: run.n_train)")
    s = sub.add_parser("train", parents=[common], help="run training stage 1 or 2")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--base", metavar="PATH", help="stage-1 checkpoint (default: OUT/stage1.ckpt)")
    for name, helptext in (("eval-align", "disalignment report for a checkpoint"),
                           ("eval-captions", "BLEU/ROUGE-L/CIDEr of explanation captions")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", metavar="PATH", help="default: OUT/stage2_<mode>.ckpt")
        if name == "eval-captions":
            s.add_argument("--predictions", metavar="PATH",
                           help='JSON lines {"candidate": ..., "references": [...]} to score instead')
    s = sub.add_parser("label-commands", parents=[common], help="driving-command labels")
    s.add_argument("--input", metavar="PATH", help="trajectory JSON lines (default: simulated ego plans)")
    s.add_argument("--n", type=int, default=100, help="simulated scenes when no --input (default: 100)")
    sub.add_parser("ablate-schedule", parents=[common], help="train and compare all adapter strategies")
    s = sub.add_parser("compare-paradigms", parents=[common], help="aligned vs declarative comparison")
    s.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit 4 unless aligned beats declarative on the acceptance rule")
    return p


COMMANDS = {"simulate": cmd_simulate, "gen": cmd_gen, "train": cmd_train, "eval-align": cmd_eval_align,
            "eval-captions": cmd_eval_captions, "label-commands": cmd_label_commands,
            "ablate-schedule": cmd_ablate_schedule, "compare-paradigms": cmd_compare_paradigms}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        run = Run(args)
        return COMMANDS[args.command](run)
    except AcceptanceFailure as exc:
        return _fail("acceptance", exc, EXIT_ACCEPT)
    except (ConfigError, CheckpointError) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except TrainingAborted as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)
    except (OSError, ValueError, RuntimeError) as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
