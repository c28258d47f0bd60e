"""Command-line entry point and pipeline orchestration.

Config precedence: built-in defaults < --config JSON file < flags.
Every run writes its fully-resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import datakit, decomposition, diffusion, evalkit, persist, preference, reward
from .encoders import TextEncoder, prompt_conditioning, uncond_conditioning
from .errors import SegAlignError
from .segmentation import RawPrompt, SegmentationPolicy

COMMANDS = {}


def _command(name, defaults):
    def wrap(fn):
        COMMANDS[name] = (fn, defaults)
        return fn

    return wrap


def _resolve(defaults: dict, cfg_file: str | None, flags: dict) -> dict:
    cfg = dict(defaults)
    if cfg_file:
        cfg.update(json.loads(Path(cfg_file).read_text()))
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def _run_dir(cfg: dict, command: str) -> Path:
    if cfg.get("run_dir"):
        d = Path(cfg["run_dir"])
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = Path(cfg.get("out_root", "runs")) / f"{command}-{stamp}-s{cfg['seed']}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _load_records(data_dir: str, split: str) -> list[datakit.DatasetRecord]:
    return datakit.read_manifest(Path(data_dir) / f"manifest_{split}.jsonl")


def _record_images(records, image_size: int) -> list[np.ndarray]:
    return [datakit.render_scene(r.scene, image_size) for r in records]


# ---------------------------------------------------------------------------


@_command(
    "gen-data",
    {
        "n": 1000,
        "seed": 0,
        "split": [0.8, 0.1, 0.1],
        "image_size": 24,
        "min_objects": 1,
        "corruption": "attribute-swap",
    },
)
def cmd_gen_data(cfg: dict, run_dir: Path) -> int:
    vocab = datakit.build_vocabulary()
    vocab.save(run_dir / "vocab.txt")
    splits = datakit.generate_dataset(
        cfg["n"], cfg["seed"], tuple(cfg["split"]), min_objects=cfg["min_objects"]
    )
    img_dir = run_dir / "images"
    counts = {}
    for name, records in zip(("train", "val", "test"), splits):
        stored = []
        for rec in records:
            path = datakit.save_image(
                datakit.render_scene(rec.scene, cfg["image_size"]), img_dir
            )
            stored.append(
                datakit.DatasetRecord(
                    scene=rec.scene,
                    caption_long=rec.caption_long,
                    caption_short=rec.caption_short,
                    image_path=str(path.relative_to(run_dir)),
                )
            )
        datakit.write_manifest(stored, run_dir / f"manifest_{name}.jsonl")
        pairs, skipped = datakit.derive_preference_pairs(
            stored, cfg["seed"], cfg["corruption"]
        )
        datakit.write_pairs(pairs, run_dir / f"pairs_{name}.jsonl")
        counts[name] = {"records": len(stored), "pairs": len(pairs), "skipped": skipped}
    _write_json(run_dir / "metrics.json", counts)
    print(f"gen-data: {counts}")
    return 0


@_command(
    "train-pref",
    {
        "data": None,
        "seed": 0,
        "steps": 500,
        "batch_size": 256,
        "lr": 3e-3,
        "variant": "seg-o",
        "tau": 10.0,
        "d": 32,
        "d_e": 16,
        "l_seg": 12,
        "image_size": 24,
    },
)
def cmd_train_pref(cfg: dict, run_dir: Path) -> int:
    data_dir = Path(cfg["data"])
    vocab = datakit.build_vocabulary()
    pairs = datakit.read_pairs(data_dir / "pairs_train.jsonl")
    tcfg = preference.PreferenceTrainConfig(
        seed=cfg["seed"],
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        variant=preference.LossVariant(cfg["variant"]),
        tau=cfg["tau"],
        d=cfg["d"],
        d_e=cfg["d_e"],
        l_seg=cfg["l_seg"],
        image_size=cfg["image_size"],
    )
    result = preference.train_preference_model(pairs, tcfg, vocab)
    persist.save_preference_model(run_dir / "pref.ckpt", result.model)
    metrics = {
        "holdout_nll_init": result.holdout_nll_init,
        "holdout_nll_final": result.holdout_nll_final,
        "holdout_accuracy": result.holdout_accuracy,
        "final_train_loss": result.losses[-1] if result.losses else None,
    }
    _write_json(run_dir / "metrics.json", metrics)
    _write_jsonl(
        run_dir / "losses.jsonl",
        ({"step": i, "loss": l} for i, l in enumerate(result.losses)),
    )
    print(f"train-pref: {metrics}")
    return 0


@_command(
    "fit-direction",
    {"data": None, "model": None, "seed": 0, "mode": "segment_avg", "split": "train"},
)
def cmd_fit_direction(cfg: dict, run_dir: Path) -> int:
    vocab = datakit.build_vocabulary()
    m = persist.load_preference_model(cfg["model"], vocab)
    records = _load_records(cfg["data"], cfg["split"])
    corpus = decomposition.PromptCorpus.from_texts(
        (r.caption_long for r in records), source=cfg["split"]
    )
    direction = decomposition.estimate_common_direction(corpus, m, cfg["mode"])
    persist.save_direction(run_dir / "direction.json", direction)
    stats = decomposition.eta_statistics(corpus, m, direction, mode=cfg["mode"])
    _write_json(run_dir / "metrics.json", {"eta": stats, "corpus_size": direction.corpus_size})
    print(f"fit-direction: corpus={direction.corpus_size} eta_mean={stats['mean']:.4f}")
    return 0


@_command(
    "train-sft",
    {
        "data": None,
        "seed": 0,
        "steps": 500,
        "batch_size": 16,
        "lr": 1e-3,
        "cond_dropout": 0.1,
        "T": 50,
        "d": 32,
        "d_e": 16,
        "l_seg": 12,
        "n_cond": 36,
        "width": 32,
        "image_size": 24,
    },
)
def cmd_train_sft(cfg: dict, run_dir: Path) -> int:
    vocab = datakit.build_vocabulary()
    records = _load_records(cfg["data"], "train")
    text = TextEncoder(
        vocab.size, d=cfg["d"], d_e=cfg["d_e"], l_seg=cfg["l_seg"], seed=cfg["seed"] + 100
    )
    with torch.no_grad():
        cond = torch.stack(
            [
                prompt_conditioning(r.caption_long, text, vocab, cfg["n_cond"]).embeddings
                for r in records
            ]
        )
        uncond = uncond_conditioning(text, vocab, cfg["n_cond"])
    x0 = torch.tensor(
        np.stack(_record_images(records, cfg["image_size"])), dtype=torch.float64
    )
    sched = diffusion.DiffusionSchedule.cosine(cfg["T"])
    model = diffusion.Denoiser(
        image_size=cfg["image_size"],
        width=cfg["width"],
        d_cond=cfg["d"],
        T=cfg["T"],
        seed=cfg["seed"] + 200,
    )
    scfg = diffusion.SFTConfig(
        seed=cfg["seed"],
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        cond_dropout=cfg["cond_dropout"],
    )
    result = diffusion.train_sft(x0, cond, uncond, model, sched, scfg)
    persist.save_denoiser(run_dir / "denoiser.ckpt", model)
    persist.save_text_encoder(run_dir / "text_encoder.ckpt", text, vocab.size)
    _write_jsonl(
        run_dir / "losses.jsonl",
        ({"step": i, "loss": l} for i, l in enumerate(result.losses)),
    )
    metrics = {
        "final_loss": result.losses[-1] if result.losses else None,
        "mean_last_50": float(np.mean(result.losses[-50:])) if result.losses else None,
    }
    _write_json(run_dir / "metrics.json", metrics)
    print(f"train-sft: {metrics}")
    return 0


@_command(
    "train-rft",
    {
        "data": None,
        "sft": None,
        "pref": None,
        "direction": None,
        "seed": 0,
        "omega": 0.3,
        "total_updates": 100,
        "batch_size": 4,
        "lr": 1e-4,
        "sample_steps": 8,
        "steps_subset_size": 4,
        "n_cond": 36,
        "max_prompts": 200,
    },
)
def cmd_train_rft(cfg: dict, run_dir: Path) -> int:
    vocab = datakit.build_vocabulary()
    sft_dir = Path(cfg["sft"])
    model, man = persist.load_denoiser(sft_dir / "denoiser.ckpt")
    text = persist.load_text_encoder(sft_dir / "text_encoder.ckpt")
    pref = persist.load_preference_model(cfg["pref"], vocab)
    direction = persist.load_direction(cfg["direction"])
    records = _load_records(cfg["data"], "train")[: cfg["max_prompts"]]
    sched = diffusion.DiffusionSchedule.cosine(man["T"])
    rcfg = reward.RewardConfig(
        omega=cfg["omega"],
        sample_steps=cfg["sample_steps"],
        steps_subset_size=cfg["steps_subset_size"],
        seed=cfg["seed"],
        lr=cfg["lr"],
        total_updates=cfg["total_updates"],
        batch_size=cfg["batch_size"],
    )
    result = reward.train_rft(
        model,
        [r.caption_long for r in records],
        pref,
        direction,
        sched,
        rcfg,
        text,
        vocab,
        cfg["n_cond"],
    )
    persist.save_denoiser(run_dir / "denoiser.ckpt", model)
    persist.save_text_encoder(run_dir / "text_encoder.ckpt", text, vocab.size)
    _write_jsonl(run_dir / "metrics.jsonl", result.metrics)
    last = result.metrics[-1] if result.metrics else {}
    _write_json(run_dir / "metrics.json", last)
    print(f"train-rft: final {last}")
    return 0


@_command(
    "sample",
    {
        "model": None,
        "prompt": None,
        "seed": 0,
        "steps": 10,
        "guidance": 1.0,
        "n_cond": 36,
    },
)
def cmd_sample(cfg: dict, run_dir: Path) -> int:
    vocab = datakit.build_vocabulary()
    model_dir = Path(cfg["model"])
    model, man = persist.load_denoiser(model_dir / "denoiser.ckpt")
    text = persist.load_text_encoder(model_dir / "text_encoder.ckpt")
    sched = diffusion.DiffusionSchedule.cosine(man["T"])
    cond = prompt_conditioning(cfg["prompt"], text, vocab, cfg["n_cond"]).embeddings
    uncond = uncond_conditioning(text, vocab, cfg["n_cond"])
    ts = diffusion.sample_timesteps(sched.T, cfg["steps"])
    gen = torch.Generator().manual_seed(cfg["seed"])
    x = torch.randn(
        (model.image_size, model.image_size, model.channels),
        dtype=torch.float64,
        generator=gen,
    )
    with torch.no_grad():
        for t, t_next in zip(ts[:-1], ts[1:]):
            tic = time.perf_counter()
            tb = torch.tensor([t], dtype=torch.long)
            eps_c = model(x[None], tb, cond[None])[0]
            if cfg["guidance"] != 1.0:
                eps_u = model(x[None], tb, uncond[None])[0]
                eps_hat = eps_u + cfg["guidance"] * (eps_c - eps_u)
            else:
                eps_hat = eps_c
            x, _ = diffusion.ddim_step(
                diffusion.NoisyState(x, t), model, cond[None], sched, t_next, eps_hat=eps_hat
            )
            print(f"step t={t}->{t_next}: {(time.perf_counter() - tic) * 1e3:.1f} ms")
    out = datakit.save_image(x.clamp(0, 1).numpy(), run_dir)
    print(f"sample written to {out}")
    _write_json(run_dir / "metrics.json", {"output": str(out), "steps": cfg["steps"]})
    return 0


def _eval_pairs(cfg: dict, vocab) -> tuple[list, preference.PreferenceModel]:
    m = persist.load_preference_model(cfg["pref"], vocab)
    records = _load_records(cfg["data"], cfg.get("split", "test"))
    if cfg.get("max_pairs"):
        records = records[: int(cfg["max_pairs"])]
    pairs = [
        (datakit.render_scene(r.scene, m.image.image_size), RawPrompt(r.caption_long))
        for r in records
    ]
    return pairs, m


@_command(
    "eval-retrieval",
    {
        "data": None,
        "pref": None,
        "direction": None,
        "seed": 0,
        "split": "test",
        "max_pairs": None,
    },
)
def cmd_eval_retrieval(cfg: dict, run_dir: Path) -> int:
    vocab = datakit.build_vocabulary()
    pairs, m = _eval_pairs(cfg, vocab)
    direction = persist.load_direction(cfg["direction"]) if cfg["direction"] else None
    out = {}
    for mode in ("single", "segment_avg"):
        for embedding in ("full", "relevant") if direction else ("full",):
            rep = evalkit.retrieval_r_at_1(pairs, m, direction, mode, embedding)
            out[f"{mode}/{embedding}"] = asdict(rep)
    _write_json(run_dir / "metrics.json", out)
    for key, rep in out.items():
        print(f"eval-retrieval {key}: R@1 = {rep['r_at_1']:.4f} (N={rep['N']})")
    return 0


@_command(
    "eval-scores",
    {
        "data": None,
        "pref": None,
        "direction": None,
        "seed": 0,
        "split": "test",
        "max_pairs": 64,
    },
)
def cmd_eval_scores(cfg: dict, run_dir: Path) -> int:
    vocab = datakit.build_vocabulary()
    pairs, m = _eval_pairs(cfg, vocab)
    direction = persist.load_direction(cfg["direction"])
    images = [img for img, _ in pairs]
    prompts = [p for _, p in pairs]
    table = decomposition.score_table(images, prompts, m, direction)
    decomposition.export_score_table(table, run_dir)
    _write_json(run_dir / "metrics.json", table.summary())
    print(f"eval-scores: {json.dumps(table.summary())}")
    return 0


@_command(
    "align-report",
    {"prompt": None, "pref": None, "data": None, "seed": 0, "split": "test", "n_images": 4},
)
def cmd_align_report(cfg: dict, run_dir: Path) -> int:
    vocab = datakit.build_vocabulary()
    m = persist.load_preference_model(cfg["pref"], vocab)
    records = _load_records(cfg["data"], cfg["split"])[: cfg["n_images"]]
    candidates = [datakit.render_scene(r.scene, m.image.image_size) for r in records]
    prompt = RawPrompt(cfg["prompt"] or records[0].caption_long)
    report = evalkit.segment_alignment_report(prompt, candidates, m)
    _write_json(
        run_dir / "metrics.json",
        {"scores": report.scores.tolist(), "best": report.best},
    )
    print(f"align-report: best image per segment = {report.best}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segalign",
        description="Segment-level encoding, preference decomposition, and "
        "reward fine-tuning on synthetic shape scenes.",
    )
    sub = parser.add_subparsers(dest="command")
    for name, (_, defaults) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--run-dir", dest="run_dir", default=None)
        p.add_argument("--out-root", dest="out_root", default=None)
        for key, value in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(value, bool):
                p.add_argument(flag, type=lambda s: s.lower() in ("1", "true"), default=None)
            elif isinstance(value, int):
                p.add_argument(flag, type=int, default=None)
            elif isinstance(value, float):
                p.add_argument(flag, type=float, default=None)
            elif isinstance(value, list):
                p.add_argument(flag, type=float, nargs=len(value), default=None)
            else:
                p.add_argument(flag, default=None)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    fn, defaults = COMMANDS[args.command]
    flags = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "config", "run_dir", "out_root")
    }
    cfg = _resolve(defaults, args.config, flags)
    cfg["run_dir"] = args.run_dir
    if args.out_root:
        cfg["out_root"] = args.out_root
    run_dir = _run_dir(cfg, args.command)
    resolved = dict(cfg)
    resolved["run_dir"] = str(run_dir)
    _write_json(run_dir / "resolved_config.json", resolved)
    try:
        return fn(cfg, run_dir)
    except SegAlignError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
