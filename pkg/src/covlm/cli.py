"""Command-line surface: data generation, grounding, training, decoding,
evaluation, and checkpoint inspection.

Exit codes: 0 success, 1 runtime failure (structured JSON error on stderr),
2 usage or invalid configuration. `--seed` falls back to the COVLM_SEED
environment variable, then 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint
from . import grammar as G
from .decoder import DecodeConfig, communicative_decode
from .evals import (eval_aro, eval_cola, eval_hoi, eval_refexp, eval_vqa,
                    hoi_train_counts, make_aro_items, make_cola_pairs,
                    make_hoi_items, make_refexp_items, make_vqa_items)
from .grounding import (OracleGrounder, TemplateParser, ToyGrounder,
                        build_corpus, build_training_corpus)
from .scenes import generate_scene, read_ppm, render_scene, sample_holdout
from .train import RunConfig, load_corpus, load_model, train
from .util import rng_for


class UsageError(ValueError):
    pass


def _default_seed() -> int:
    return int(os.environ.get("COVLM_SEED", "0"))


def _seed_of(args) -> int:
    return _default_seed() if args.seed is None else args.seed


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _grounder(name: str):
    if name == "oracle":
        return OracleGrounder()
    if name == "toy":
        return ToyGrounder()
    raise UsageError(f"unknown grounder {name!r}")


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = _seed_of(args)
    os.makedirs(args.out, exist_ok=True)
    holdout = sorted(sample_holdout(seed, args.holdout_n))
    scene_seeds = rng_for(seed, "scene-seeds").integers(0, 2**31, size=args.n + args.eval_n)

    train_scenes = []
    for i in range(args.n):
        scene = generate_scene(int(scene_seeds[i]), holdout=holdout)
        scene["id"] = f"s{i:06d}"
        train_scenes.append(scene)
    eval_scenes = []
    for j in range(args.eval_n):
        tup = holdout[j % len(holdout)]
        scene = generate_scene(int(scene_seeds[args.n + j]), force_tuple=tup)
        scene["id"] = f"e{j:06d}"
        eval_scenes.append(scene)

    records, stats, skipped = build_training_corpus(
        train_scenes, _grounder(args.grounder), TemplateParser(), seed,
        holdout=holdout, qa_fraction=args.qa_fraction, neg_fraction=args.neg_fraction)

    _write_jsonl(os.path.join(args.out, "corpus.jsonl"), records)
    _write_jsonl(os.path.join(args.out, "scenes.jsonl"), train_scenes)
    _write_jsonl(os.path.join(args.out, "eval_scenes.jsonl"), eval_scenes)
    with open(os.path.join(args.out, "holdout.json"), "w", encoding="utf-8") as fh:
        json.dump([list(t) for t in holdout], fh, indent=1)
    stats = dict(stats, skipped_ids=skipped, holdout_size=len(holdout),
                 eval_scenes=len(eval_scenes))
    with open(os.path.join(args.out, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=1)
    print(json.dumps({"out": args.out, "records": len(records),
                      "skipped": len(skipped), "eval_scenes": len(eval_scenes)}))
    return 0


def cmd_ground(args) -> int:
    seed = _seed_of(args)
    scenes = _read_jsonl(args.scenes)
    builder = build_training_corpus if args.training else build_corpus
    kw = {"holdout": [], "qa_fraction": args.qa_fraction,
          "neg_fraction": args.neg_fraction} if args.training else {}
    records, stats, skipped = builder(scenes, _grounder(args.grounder),
                                      TemplateParser(), seed, **kw)
    _write_jsonl(args.out, records)
    print(json.dumps({"out": args.out, "stats": stats, "skipped": len(skipped)}))
    return 0


def _run_config(args) -> RunConfig:
    base = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
        if not isinstance(base, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
    overrides = {
        "train_data": args.train_data, "val_data": args.val_data,
        "out_dir": args.out_dir, "steps": args.steps,
        "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed,
        "lambda_det": args.lambda_det, "eval_every": args.eval_every,
        "d_model": args.d_model, "n_layers": args.n_layers,
        "n_heads": args.n_heads, "d_ffn": args.d_ffn,
    }
    for key, val in overrides.items():
        if val is not None:
            base[key] = val
    if args.no_comm:
        base["no_comm"] = True
    base.setdefault("seed", _default_seed())
    try:
        return RunConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None


def cmd_train(args) -> int:
    cfg = _run_config(args)
    result = train(cfg, resume=not args.fresh, quiet=args.quiet)
    last = result.rows[-1] if result.rows else {}
    print(json.dumps({"final_checkpoint": result.final_checkpoint,
                      "log": result.log_path, "steps": cfg.steps,
                      "last_lm_loss": last.get("lm_loss"),
                      "val": result.val_losses[-1] if result.val_losses else None}))
    return 0


def _load_image(args):
    if args.image:
        return read_ppm(args.image)
    if args.scenes is None:
        raise UsageError("provide --image PPM or --scenes JSONL with --index")
    scenes = _read_jsonl(args.scenes)
    if not (0 <= args.index < len(scenes)):
        raise UsageError(f"--index {args.index} outside 0..{len(scenes) - 1}")
    return render_scene(scenes[args.index])


def cmd_decode(args) -> int:
    model, run_cfg, _ = load_model(args.ckpt)
    image = _load_image(args)
    prompt = G.from_text(args.prompt) if args.prompt else []
    if any(el.kind == G.ROI for el in prompt):
        raise UsageError("prompt roi slots are not supported on the command line")
    cfg = DecodeConfig(max_tokens=args.max_tokens, greedy=not args.sample,
                       temperature=args.temperature, seed=_seed_of(args),
                       m_box=run_cfg.m_box, m_prebox=run_cfg.m_prebox,
                       nms_iou=run_cfg.nms_iou, score_floor=run_cfg.score_floor)
    res = communicative_decode(model, image, prompt, cfg)
    print(json.dumps({
        "text": res.text,
        "boxes": {str(i): [[round(float(c), 6) for c in p.box], float(p.score)]
                  for i, props in sorted(res.boxes.items()) for p in props[:1]},
        "nll_sum": float(np.sum(res.per_token_nll)),
        "no_detection": res.no_detection,
    }))
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.ckpt):
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    model, run_cfg, _ = load_model(args.ckpt)
    seed = _seed_of(args)
    scenes = _read_jsonl(args.data)
    cfg = DecodeConfig(seed=seed, m_box=run_cfg.m_box, m_prebox=run_cfg.m_prebox,
                       nms_iou=run_cfg.nms_iou, score_floor=run_cfg.score_floor)
    comm = not (args.no_comm or run_cfg.no_comm)
    if args.task == "aro":
        items = make_aro_items(scenes, seed, n_candidates=args.n_candidates)
        report = eval_aro(model, items, cfg, comm=comm)
    elif args.task == "cola":
        report = eval_cola(model, make_cola_pairs(scenes), cfg)
    elif args.task == "hoi":
        counts = {}
        if args.train_corpus:
            counts = hoi_train_counts(load_corpus(args.train_corpus))
        report = eval_hoi(model, make_hoi_items(scenes), train_counts=counts, cfg=cfg)
    elif args.task == "refexp":
        report = eval_refexp(model, make_refexp_items(scenes), cfg)
    elif args.task == "vqa":
        holdout = []
        if args.holdout:
            with open(args.holdout, "r", encoding="utf-8") as fh:
                holdout = [tuple(t) for t in json.load(fh)]
        report = eval_vqa(model, make_vqa_items(scenes, seed, holdout), cfg)
    else:
        raise UsageError(f"unknown task {args.task!r}")
    if not report.audit():
        raise RuntimeError("metric audit failed: aggregates do not match item records")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh)
    print(json.dumps({"task": report.task, "metrics": report.metrics,
                      "items": len(report.items)}))
    return 0


def cmd_inspect_ckpt(args) -> int:
    meta = checkpoint.load_meta(args.ckpt)
    rows = checkpoint.describe(args.ckpt)
    print(json.dumps({
        "meta": meta,
        "arrays": len(rows),
        "total_values": int(sum(n for _, _, n in rows)),
        "largest": [{"name": n, "shape": list(s)} for n, s, _ in
                    sorted(rows, key=lambda r: -r[2])[:5]],
    }, indent=1))
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="covlm",
                                 description="communicative vision-language toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None,
                       help="rng seed (default: $COVLM_SEED or 0)")

    p = sub.add_parser("gen-data", help="synthesize scenes and a grounded corpus")
    p.add_argument("--n", type=int, default=2000, help="training scenes")
    p.add_argument("--eval-n", type=int, default=200, help="held-out composition scenes")
    p.add_argument("--holdout-n", type=int, default=40, help="held-out caption tuples")
    p.add_argument("--out", required=True)
    p.add_argument("--grounder", choices=("oracle", "toy"), default="oracle")
    p.add_argument("--qa-fraction", type=float, default=0.15)
    p.add_argument("--neg-fraction", type=float, default=0.10)
    add_seed(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("ground", help="run the grounding pipeline on scene JSONL")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grounder", choices=("oracle", "toy"), default="oracle")
    p.add_argument("--training", action="store_true",
                   help="emit the training mix (QA and negated slices)")
    p.add_argument("--qa-fraction", type=float, default=0.15)
    p.add_argument("--neg-fraction", type=float, default=0.10)
    add_seed(p)
    p.set_defaults(fn=cmd_ground)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON run config; flags override")
    p.add_argument("--train-data")
    p.add_argument("--val-data")
    p.add_argument("--out-dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-det", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--d-ffn", type=int)
    p.add_argument("--no-comm", action="store_true",
                   help="ablation: strip communication tokens, never detect")
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    p.add_argument("--quiet", action="store_true")
    add_seed(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="generate from a prompt over an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", help="PPM file")
    p.add_argument("--scenes", help="scene JSONL (use with --index)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--prompt", default="")
    p.add_argument("--max-tokens", type=int, default=48)
    p.add_argument("--sample", action="store_true")
    p.add_argument("--temperature", type=float, default=1.0)
    add_seed(p)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--task", required=True,
                   choices=("aro", "cola", "hoi", "refexp", "vqa"))
    p.add_argument("--data", required=True, help="scene JSONL")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", help="write the full MetricReport JSON here")
    p.add_argument("--n-candidates", type=int, default=6)
    p.add_argument("--train-corpus", help="training corpus for the rare split (hoi)")
    p.add_argument("--holdout", help="holdout tuples JSON (vqa)")
    p.add_argument("--no-comm", action="store_true",
                   help="score without communication tokens (aro)")
    add_seed(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint manifest summary")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_inspect_ckpt)

    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
