"""Command-line entry point: ``qpm <command> ...``.

Exit status is 0 on success, 2 for configuration or usage errors and 1 for
runtime failures such as a diverged run.
"""
import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .data import SynthConfig, denormalize, load_reid_dir, save_dataset, synth_generate, to_tensor
from .errors import ConfigError, SamplingError
from .retrieval import DEFAULT_GAMMA, DEFAULT_N, GalleryIndex, evaluate, index_gallery, search
from .training import LOSS_TERMS, TrainConfig, load_checkpoint, load_config, train

log = logging.getLogger("qpm")


# ----------------------------------------------------------------- helpers

def _parse_toggle(text):
    name, _, state = text.partition("=")
    if name not in LOSS_TERMS or state not in ("on", "off"):
        raise ConfigError(f"--toggle expects LOSS=on|off with LOSS in {LOSS_TERMS}, got {text!r}")
    return name, state == "on"


def resolve_config(args) -> TrainConfig:
    """Config file (or defaults) with command-line overrides applied on top."""
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    over = {}
    for key in ("seed", "K", "d", "epochs", "momentum"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "input_size", None):
        over["input_size"] = tuple(args.input_size)
    if getattr(args, "toggle", None):
        toggles = dict(cfg.loss_toggles)
        toggles.update(_parse_toggle(t) for t in args.toggle)
        over["loss_toggles"] = toggles
    return dataclasses.replace(cfg, **over) if over else cfg


def _check_model_overrides(model, args):
    if getattr(args, "K", None) is not None and args.K != model.cfg.K:
        raise ConfigError(f"--K {args.K} disagrees with the checkpoint (K={model.cfg.K})")
    if getattr(args, "d", None) is not None and args.d != model.cfg.d:
        raise ConfigError(f"--d {args.d} disagrees with the checkpoint (d={model.cfg.d})")


def _load_split(args, split):
    ds = load_reid_dir(args.data, args.protocol, required=(split,))
    return getattr(ds, split)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = SynthConfig(num_identities=args.identities, images_per_identity=args.per_identity,
                      num_test_identities=args.test_identities, test_images_per_identity=args.test_per_identity,
                      image_size=tuple(args.image_size), occlusion_prob=args.occlusion_prob,
                      occluder_kinds=tuple(args.occluders), seed=args.seed or 0)
    root = save_dataset(synth_generate(cfg), args.out)
    print(f"wrote synthetic dataset to {root}")


def cmd_train(args):
    cfg = resolve_config(args)
    ds = load_reid_dir(args.data, args.protocol, required=("train",))
    images = to_tensor(ds.train, cfg.input_size)
    res = train(cfg, images, [s.pid for s in ds.train], out_dir=args.out, log_every=args.log_every)
    _write_json(Path(args.out) / "config.json", cfg.to_dict())
    print(f"checkpoint: {res.checkpoint_path}")


def cmd_index(args):
    model, _ = load_checkpoint(args.checkpoint)
    _check_model_overrides(model, args)
    samples = _load_split(args, args.split)
    path = index_gallery(samples, model).save(args.out)
    print(f"indexed {len(samples)} images into {path}")


def cmd_search(args):
    model, _ = load_checkpoint(args.checkpoint)
    _check_model_overrides(model, args)
    gallery = GalleryIndex.load(args.index)
    from .data import ReidSample, parse_name

    parsed = parse_name(Path(args.image).name) or (0, -1)
    query = index_gallery([ReidSample(pid=max(parsed[0], 0), camid=parsed[1], path=args.image)], model)[0]
    result = search(query, gallery, n=args.n, gamma=args.gamma)
    top = [{"rank": r + 1, "gallery_index": int(i), "pid": int(gallery.pids[i]), "camid": int(gallery.camids[i]),
            "distance": float(result.final[r] if r < result.n else result.stage1[i]),
            "stage": 2 if r < result.n else 1}
           for r, i in enumerate(result.order[:args.top])]
    print(json.dumps({"n": result.n, "gamma": result.gamma, "global_evaluations": result.global_evals,
                      "results": top}, indent=2))


def _query_gallery_indices(args):
    if args.query_index and args.gallery_index:
        return GalleryIndex.load(args.query_index), GalleryIndex.load(args.gallery_index), None
    if not (args.checkpoint and args.data):
        raise ConfigError("eval needs --checkpoint and --data, or --query-index and --gallery-index")
    model, blob = load_checkpoint(args.checkpoint)
    _check_model_overrides(model, args)
    ds = load_reid_dir(args.data, args.protocol, required=("query", "gallery"))
    return index_gallery(ds.query, model), index_gallery(ds.gallery, model), blob


def cmd_eval(args):
    queries, gallery, blob = _query_gallery_indices(args)
    report = evaluate(queries, gallery, n=args.n, gamma=args.gamma, protocol=args.protocol,
                      max_rank=args.max_rank, workers=args.workers)
    out = Path(args.out)
    payload = report.to_dict()
    payload["config"]["train_config"] = blob.get("train_config") if blob else None
    payload["config"]["model_config"] = blob.get("model_config") if blob else None
    _write_json(out / "report.json", payload)
    with open(out / "cmc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "accuracy"])
        for k, v in enumerate(report.cmc, 1):
            w.writerow([k, f"{v:.6f}"])
    print(json.dumps({k: payload[k] for k in ("rank1", "rank5", "rank10", "mAP")}))


def _score_color(q):
    return (int(255 * (1 - q)), int(255 * q), 0)


def quality_overlay(image: np.ndarray, q: np.ndarray, scale: int = 4):
    """Image with each horizontal stripe tinted by its score (red low, green high) and labeled."""
    from PIL import Image, ImageDraw

    H, W = image.shape[:2]
    base = Image.fromarray(image).resize((W * scale, H * scale), Image.NEAREST).convert("RGBA")
    layer = Image.new("RGBA", base.size)
    draw = ImageDraw.Draw(layer)
    K = len(q)
    for k, score in enumerate(q):
        top, bottom = base.size[1] * k // K, base.size[1] * (k + 1) // K
        draw.rectangle([0, top, base.size[0] - 1, bottom - 1], fill=_score_color(float(score)) + (90,),
                       outline=(255, 255, 255, 200))
        draw.text((2, top + 1), f"{score:.2f}", fill=(255, 255, 255, 255))
    return Image.alpha_composite(base, layer).convert("RGB")


def attention_heatmap(image: np.ndarray, M: np.ndarray, scale: int = 4):
    """Attention map upsampled to the image and blended over it."""
    from PIL import Image

    H, W = image.shape[:2]
    m = (M - M.min()) / max(float(M.max() - M.min()), 1e-8)
    heat = np.stack([m, np.zeros_like(m), 1 - m], -1)
    heat = Image.fromarray((heat * 255).astype(np.uint8)).resize((W * scale, H * scale), Image.BILINEAR)
    base = Image.fromarray(image).resize((W * scale, H * scale), Image.NEAREST)
    return Image.blend(base, heat, 0.5)


def cmd_viz_quality(args):
    from PIL import Image

    model, _ = load_checkpoint(args.checkpoint)
    samples = _load_split(args, args.split)[: args.count]
    x = to_tensor(samples, model.cfg.backbone.input_size)
    with torch.no_grad():
        out = model(x)
    images = denormalize(x)
    q = out["q"].numpy()
    M = out["M"].numpy() if "M" in out else None
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        panels = [quality_overlay(images[i], q[i])]
        if M is not None:
            panels.append(attention_heatmap(images[i], M[i]))
        sheet = Image.new("RGB", (sum(p.width for p in panels), panels[0].height))
        x0 = 0
        for p in panels:
            sheet.paste(p, (x0, 0))
            x0 += p.width
        name = f"{i:03d}_pid{s.pid}.png"
        sheet.save(dest / name)
        rows.append({"file": name, "pid": s.pid, "camid": s.camid, "q": q[i].round(4).tolist()})
    _write_json(dest / "scores.json", rows)
    print(f"wrote {len(rows)} visualizations to {dest}")


def cmd_ablate(args):
    from .experiments import ABLATIONS, ABLATION_TABLE, ExperimentRunner, median_by_row

    base = resolve_config(args)
    if args.data:
        ds = load_reid_dir(args.data, args.protocol)
    else:
        ds = synth_generate(SynthConfig(image_size=base.input_size, seed=args.data_seed))
    rows = args.rows.split(",") if args.rows else list(ABLATION_TABLE)
    unknown = [r for r in rows if r not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {sorted(ABLATIONS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    runner = ExperimentRunner(ds, base, n=args.n, gamma=args.gamma)
    results = runner.run(rows, seeds)
    med = {k: median_by_row(results, k) for k in ("rank1", "rank5", "rank10", "mAP")}
    table = [{"row": r, "label": ABLATIONS[r].label, **{k: med[k][r] for k in med}} for r in rows]
    out = Path(args.out)
    _write_json(out / "ablation_runs.json", results)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["row", "label", "rank1", "rank5", "rank10", "mAP"])
        w.writeheader()
        w.writerows(table)
    for t in table:
        print(f"{t['label']:<22} R1 {t['rank1']:.3f}  R5 {t['rank5']:.3f}  R10 {t['rank10']:.3f}  mAP {t['mAP']:.3f}")


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="qpm", description="Quality-aware part models for occluded person re-id.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=False, model=False):
        sp.add_argument("--config", help="YAML or JSON training config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--protocol", choices=("standard", "partial"), default="standard")
        sp.add_argument("--K", type=int, help="number of parts")
        sp.add_argument("--d", type=int, help="part embedding width")
        if training:
            sp.add_argument("--toggle", action="append", metavar="LOSS=on|off",
                            help=f"enable or disable a loss term ({', '.join(LOSS_TERMS)})")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--momentum", type=float)
            sp.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
        if model:
            sp.add_argument("--n", type=int, default=DEFAULT_N, help="candidates re-ranked by the global distance")
            sp.add_argument("--gamma", type=float, default=DEFAULT_GAMMA, help="weight of the part distance")

    sp = sub.add_parser("synth", help="render a synthetic occluded re-id dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--identities", type=int, default=50)
    sp.add_argument("--per-identity", type=int, default=20)
    sp.add_argument("--test-identities", type=int, default=50)
    sp.add_argument("--test-per-identity", type=int, default=10)
    sp.add_argument("--image-size", type=int, nargs=2, default=(64, 32), metavar=("H", "W"))
    sp.add_argument("--occlusion-prob", type=float, default=0.5)
    sp.add_argument("--occluders", nargs="+", default=["object"], choices=("object", "pedestrian"))
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a re-id directory")
    common(sp, training=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("index", help="cache gallery features to a binary index")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("query", "gallery"), default="gallery")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_index)

    sp = sub.add_parser("search", help="rank a gallery index for one query image")
    common(sp, model=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--index", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--top", type=int, default=10)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("eval", help="CMC and mAP over a query and gallery split")
    common(sp, model=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--query-index")
    sp.add_argument("--gallery-index")
    sp.add_argument("--max-rank", type=int, default=50)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("viz-quality", help="render part-score overlays and attention maps")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_viz_quality)

    sp = sub.add_parser("ablate", help="train and score ablation rows")
    common(sp, training=True, model=True)
    sp.add_argument("--data", help="re-id directory; a synthetic set is rendered when omitted")
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--rows", help="comma-separated row names (default: the full table)")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, SamplingError, FileNotFoundError) as e:
        print(f"qpm: error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as e:
        print(f"qpm: failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
