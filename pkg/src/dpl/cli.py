"""``dpl`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every subcommand also accepts ``--config FILE.json`` whose keys are option
names (dashes or underscores); options given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from dpl import evaluate, head, network, proposals, synthdata, train
from dpl.proposals import ProposalError, ProposalSet
from dpl.synthdata import DataError, GeneratorConfig
from dpl.tensor import NumericalError

log = logging.getLogger("dpl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
DEFAULT_SCALES = (64, 96, 128)
ABLATION_HEADER = ("mode", "scales", "proposals", "mAP", "CorLoc", "test_s_per_image")
# Ten trainings (five cells, two seeds) have to fit in an hour on one core.
ABLATION_LR_SCHEDULE = ((3000, 0.001), (500, 0.0001))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        out = [int(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _mode(text: str) -> str:
    try:
        return head.canonical_mode(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _pair(text: str) -> tuple[int, int]:
    v = _int_list(text)
    if len(v) != 2:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}")
    return v[0], v[1]


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------


def load_proposal_source(source: str, dataset: synthdata.Dataset) -> dict[str, ProposalSet]:
    """``sw`` for sliding windows, otherwise a proposal CSV path."""
    if source == "sw":
        return {r.id: proposals.sliding_window(r.width, r.height, image_id=r.id) for r in dataset.images}
    path = Path(source)
    if not path.exists():
        raise DataError(f"proposal file {path} not found")
    sets = proposals.load_proposals(path, image_sizes=dataset.sizes(), required_ids=[r.id for r in dataset.images])
    return {r.id: sets[r.id] for r in dataset.images}


def random_proposal_sets(dataset: synthdata.Dataset, per_image: int, seed: int) -> dict[str, ProposalSet]:
    """Seeded random boxes for every image, one independent stream per image."""
    return {
        r.id: proposals.random_proposals(r.width, r.height, per_image, np.random.default_rng([seed, i]), image_id=r.id)
        for i, r in enumerate(dataset.images)
    }


def _load_ckpt(path: str):
    p = Path(path)
    if not (p / "manifest.json").exists() and (p / "checkpoint" / "manifest.json").exists():
        p = p / "checkpoint"
    if not (p / "manifest.json").exists():
        raise DataError(f"no checkpoint at {path}")
    return network.load_checkpoint(p, dtype=np.float32)


def _checkpoint_mode(manifest: dict, override: str | None) -> str:
    if override:
        return override
    return head.canonical_mode(manifest.get("train_config", {}).get("mode", "multi-task"))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = GeneratorConfig(
        num_images=args.num,
        num_classes=args.classes,
        image_size=tuple(args.image_size),
        objects=tuple(args.objects),
        object_size=tuple(args.object_size),
        clutter=args.clutter,
        seed=args.seed,
    )
    ds = synthdata.generate_dataset(args.out, cfg)
    freq = ds.labels().mean(axis=0)
    print(f"wrote {len(ds)} images to {args.out}")
    for name, f in zip(ds.classes, freq):
        print(f"  {name:<10} in {100 * f:5.1f}% of images")
    return EXIT_OK


def cmd_gen_proposals(args) -> int:
    ds = synthdata.load_dataset(args.data)
    sets = random_proposal_sets(ds, args.per_image, args.seed)
    proposals.save_proposals(args.out, sets)
    print(f"wrote {sum(len(s) for s in sets.values())} proposals for {len(sets)} images to {args.out}")
    return EXIT_OK


def _train_config(args) -> train.TrainConfig:
    return train.TrainConfig(
        batch_size=args.batch,
        lr_schedule=train.parse_lr_schedule(args.lr_schedule),
        momentum=args.momentum,
        weight_decay=args.wd,
        mode=args.mode,
        train_scales=args.scales,
        flip=not args.no_flip,
        seed=args.seed,
        loss_weights=tuple(args.loss_weights),
    )


def cmd_train(args) -> int:
    ds = synthdata.load_dataset(args.data)
    props = load_proposal_source(args.proposals, ds)
    cfg = _train_config(args)
    t0 = time.perf_counter()
    res = train.train(ds, props, cfg, out_dir=args.out)
    last = res.losses[-1]
    print(
        f"trained {cfg.iterations} iterations in {time.perf_counter() - t0:.1f} s; "
        f"final loss {last[1]:.4f}; checkpoint {res.checkpoint}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    params, config, manifest = _load_ckpt(args.checkpoint)
    ds = synthdata.load_dataset(args.data)
    props = load_proposal_source(args.proposals, ds)
    gt = None if args.no_gt else synthdata.load_ground_truth(args.data)
    mode = _checkpoint_mode(manifest, args.mode)
    report, _ = evaluate.evaluate(
        params, config, ds, props, gt, args.scales, mode,
        echo={"checkpoint": str(args.checkpoint), "proposals": args.proposals},
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(report.to_table())
    print(report.to_table(), end="")
    return EXIT_OK


def discovery_rows(
    preds: Sequence[evaluate.Prediction],
    dataset: synthdata.Dataset,
    topk: int = 1,
    nms_threshold: float | None = None,
    all_classes: bool = False,
) -> list[tuple]:
    """``(image_id, class, score, lx, ly, rx, ry)`` rows, best box first."""
    labels = {r.id: r.labels for r in dataset.images}
    rows = []
    for p in preds:
        for c, name in enumerate(dataset.classes):
            if not all_classes and not labels[p.image_id][c]:
                continue
            scores = p.patch_scores[:, c]
            if nms_threshold is None:
                keep = list(np.argsort(-scores, kind="stable"))
            else:
                keep = proposals.nms(p.boxes, scores, nms_threshold)
            for j in keep[:topk]:
                rows.append((p.image_id, name, float(scores[j]), *(float(v) for v in p.boxes[j])))
    return rows


def cmd_discover(args) -> int:
    params, config, manifest = _load_ckpt(args.checkpoint)
    ds = synthdata.load_dataset(args.data)
    props = load_proposal_source(args.proposals, ds)
    preds = evaluate.predict(params, config, ds, props, args.scales, _checkpoint_mode(manifest, args.mode))
    rows = discovery_rows(preds, ds, args.topk, args.nms, args.all_classes)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("image_id", "class", "score", "lx", "ly", "rx", "ry"))
        for r in rows:
            w.writerow((r[0], r[1], repr(r[2])) + tuple(repr(v) for v in r[3:]))
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.out:
        print(f"wrote {len(rows)} boxes to {args.out}")
    return EXIT_OK


def run_gradcheck(
    mode: str = "multi-task",
    tolerance: float = 1e-4,
    epsilon: float = 1e-5,
    models: int = 5,
    seed: int = 0,
    backbone_coords: int = 200,
) -> list[train.GradCheckReport]:
    """Grad-check ``models`` seeded toy models (J <= 12, K <= 32, N <= 16, C <= 4)."""
    reports = []
    for i in range(models):
        rng = np.random.default_rng([seed, i])
        C = int(rng.integers(2, 5))
        cfg = train.toy_model_config(num_classes=C, K=int(rng.choice([8, 16, 32])), N=int(rng.choice([4, 8, 16])))
        params = network.init_params(cfg, seed=seed * 1000 + i)
        image, boxes, y = train.toy_sample(seed * 1000 + i, num_classes=C, num_patches=int(rng.integers(3, 13)))
        reports.append(
            train.grad_check(
                params, cfg, image, boxes, y, mode=mode, epsilon=epsilon, tolerance=tolerance,
                backbone_coords=backbone_coords, seed=i,
            )
        )
    return reports


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(args.mode, args.tolerance, args.epsilon, args.models, args.seed)
    ok = True
    for i, r in enumerate(reports):
        print(f"toy model {i} ({args.mode})")
        print(r.format())
        ok &= r.passed
    print("gradient check", "PASSED" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_NUMERICAL


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------


def _scale_tag(scales: Sequence[int]) -> str:
    return "+".join(str(s) for s in scales)


def ablation_grid(modes, scale_sets, sources) -> list[tuple[str, tuple[int, ...], str]]:
    return [(m, tuple(s), p) for m in modes for s in scale_sets for p in sources]


def table_grid(default_scales: Sequence[int], single_scale: int) -> list[tuple[str, tuple[int, ...], str]]:
    """Three comparisons sharing the multi-task, multi-scale, sliding-window run:
    loss mode, scale set and proposal source."""
    full = tuple(default_scales)
    cells = [("multi-task", full, "sw"), ("cls-only", full, "sw"), ("dis-only", full, "sw")]
    cells.append(("multi-task", (single_scale,), "sw"))
    cells.append(("multi-task", full, "random"))
    return cells


def _run_proposals(source: str, ds: synthdata.Dataset, seed: int, per_image: int) -> dict[str, ProposalSet]:
    if source == "random":
        return random_proposal_sets(ds, per_image, seed)
    return load_proposal_source(source, ds)


def train_cached(
    run_dir: Path, ds, props, cfg: train.TrainConfig
) -> tuple[network.ModelParams, network.ModelConfig]:
    """Train into ``run_dir`` unless it already holds a checkpoint made with
    the same training config."""
    manifest = run_dir / "checkpoint" / "manifest.json"
    if manifest.exists():
        saved = json.loads(manifest.read_text()).get("train_config")
        if saved == json.loads(json.dumps(cfg.to_dict())):
            params, config, _ = network.load_checkpoint(run_dir / "checkpoint", dtype=np.float32)
            log.info("reusing %s", run_dir)
            return params, config
    res = train.train(ds, props, cfg, out_dir=run_dir)
    return res.params, res.config


def run_ablation(
    train_root: str | Path,
    test_root: str | Path,
    out_dir: str | Path,
    cells: Sequence[tuple[str, tuple[int, ...], str]],
    seeds: Sequence[int] = (0,),
    lr_schedule: Sequence[tuple[int, float]] | None = None,
    per_image: int = 90,
    echo=print,
) -> tuple[list[dict], list[dict]]:
    """Train and evaluate every cell for every seed.

    Returns per-run rows and per-cell rows (means over seeds, plus standard
    deviations). Writes ``ablation.csv``, ``ablation_runs.csv`` and
    ``ablation.txt`` into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, te = synthdata.load_dataset(train_root), synthdata.load_dataset(test_root)
    gt = synthdata.load_ground_truth(test_root)
    runs = []
    for seed in seeds:
        for mode, scales, source in cells:
            kw = {"mode": mode, "train_scales": list(scales), "seed": seed}
            if lr_schedule is not None:
                kw["lr_schedule"] = list(lr_schedule)
            cfg = train.TrainConfig(**kw)
            tag = f"{mode}_{_scale_tag(scales)}_{Path(source).stem}_seed{seed}"
            t0 = time.perf_counter()
            params, config = train_cached(out / "runs" / tag, tr, _run_proposals(source, tr, seed, per_image), cfg)
            report, _ = evaluate.evaluate(
                params, config, te, _run_proposals(source, te, seed + 1, per_image), gt, scales, mode
            )
            row = {
                "mode": mode,
                "scales": _scale_tag(scales),
                "proposals": source,
                "seed": seed,
                "mAP": report.mAP,
                "CorLoc": report.mean_corloc,
                "test_s_per_image": report.mean_seconds_per_image,
            }
            runs.append(row)
            cl = "-" if row["CorLoc"] is None else f"{row['CorLoc']:.4f}"
            echo(f"{tag}: mAP {row['mAP']:.4f} CorLoc {cl} ({time.perf_counter() - t0:.0f} s)")

    cells_out = []
    for mode, scales, source in cells:
        rs = [r for r in runs if (r["mode"], r["scales"], r["proposals"]) == (mode, _scale_tag(scales), source)]
        maps = [r["mAP"] for r in rs]
        cls = [r["CorLoc"] for r in rs if r["CorLoc"] is not None]
        cells_out.append(
            {
                "mode": mode,
                "scales": _scale_tag(scales),
                "proposals": source,
                "mAP": float(np.mean(maps)),
                "CorLoc": float(np.mean(cls)) if cls else None,
                "test_s_per_image": float(np.mean([r["test_s_per_image"] for r in rs])),
                "mAP_std": float(np.std(maps)),
                "CorLoc_std": float(np.std(cls)) if cls else None,
                "seeds": len(rs),
            }
        )
    _write_rows(out / "ablation.csv", ABLATION_HEADER, cells_out)
    _write_rows(out / "ablation_runs.csv", ABLATION_HEADER[:3] + ("seed",) + ABLATION_HEADER[3:], runs)
    table = format_ablation(cells_out)
    (out / "ablation.txt").write_text(table)
    echo(table, end="")
    return runs, cells_out


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in header])


def format_ablation(cells: Sequence[dict]) -> str:
    lines = [f"{'mode':<11} {'scales':<10} {'proposals':<10} {'mAP':>15} {'CorLoc':>15} {'s/image':>8}"]
    for c in cells:
        m = f"{100 * c['mAP']:.2f}+-{100 * c['mAP_std']:.2f}"
        cl = "-" if c["CorLoc"] is None else f"{100 * c['CorLoc']:.2f}+-{100 * c['CorLoc_std']:.2f}"
        lines.append(
            f"{c['mode']:<11} {c['scales']:<10} {c['proposals']:<10} {m:>15} {cl:>15} {c['test_s_per_image']:>8.4f}"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    if args.modes or args.scale_sets or args.proposal_sources:
        cells = ablation_grid(
            args.modes or ["multi-task"],
            args.scale_sets or [list(DEFAULT_SCALES)],
            args.proposal_sources or ["sw"],
        )
    else:
        cells = table_grid(DEFAULT_SCALES, args.single_scale)
    schedule = train.parse_lr_schedule(args.lr_schedule)
    run_ablation(args.train_data, args.test_data, args.out, cells, args.seeds, schedule, args.per_image)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _scale_sets(text: str) -> list[list[int]]:
    return [_int_list(part) for part in text.split(";") if part.strip()]


def _modes(text: str) -> list[str]:
    return [_mode(m) for m in text.split(",") if m.strip()]


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; command-line flags win")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = _Parser(prog="dpl", description="Deep patch learning on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=200)
    p.add_argument("--classes", type=int, default=3, choices=range(1, len(synthdata.SHAPE_KINDS) + 1),
                   metavar=f"1..{len(synthdata.SHAPE_KINDS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=_pair, default=GeneratorConfig.image_size, metavar="MIN,MAX")
    p.add_argument("--objects", type=_pair, default=GeneratorConfig.objects, metavar="MIN,MAX")
    p.add_argument("--object-size", type=_pair, default=GeneratorConfig.object_size, metavar="MIN,MAX")
    p.add_argument("--clutter", type=int, default=GeneratorConfig.clutter)
    p.set_defaults(func=cmd_gen_data)
    subs["gen-data"] = p

    p = sub.add_parser("gen-proposals", parents=[common], help="write a random-box proposal CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-image", type=int, default=90)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_proposals)
    subs["gen-proposals"] = p

    defaults = train.TrainConfig()
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--proposals", default="sw", help="'sw' or a proposal CSV")
    p.add_argument("--batch", type=int, default=defaults.batch_size)
    p.add_argument("--momentum", type=float, default=defaults.momentum)
    p.add_argument("--wd", type=float, default=defaults.weight_decay)
    p.add_argument("--mode", type=_mode, default=defaults.mode, help="multi-task | cls | dis")
    p.add_argument("--lr-schedule", default=",".join(f"{n}:{lr:g}" for n, lr in defaults.lr_schedule),
                   help="ITERS:LR phases, e.g. 30000:0.001,10000:0.0001")
    p.add_argument("--scales", type=_int_list, default=list(defaults.train_scales))
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--loss-weights", type=lambda t: [float(v) for v in t.split(",")],
                   default=list(defaults.loss_weights), metavar="CLS,DIS")
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("eval", parents=[common], help="compute AP / CorLoc")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--proposals", default="sw")
    p.add_argument("--scales", type=_int_list, default=list(DEFAULT_SCALES))
    p.add_argument("--mode", type=_mode, default=None, help="defaults to the checkpoint's training mode")
    p.add_argument("--out", help="directory for report.json and report.txt")
    p.add_argument("--no-gt", action="store_true", help="classification only")
    p.set_defaults(func=cmd_eval)
    subs["eval"] = p

    p = sub.add_parser("discover", parents=[common], help="dump top-scoring boxes")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--proposals", default="sw")
    p.add_argument("--scales", type=_int_list, default=list(DEFAULT_SCALES))
    p.add_argument("--mode", type=_mode, default=None)
    p.add_argument("--topk", type=int, default=1)
    p.add_argument("--nms", type=float, default=None, metavar="IOU")
    p.add_argument("--all-classes", action="store_true", help="emit boxes for unlabelled classes too")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_discover)
    subs["discover"] = p

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--mode", type=_mode, default="multi-task")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--models", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    subs["gradcheck"] = p

    p = sub.add_parser("ablate", parents=[common], help="train/evaluate a comparison grid")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", type=_modes, default=None, help="comma list; with the next two, a full grid")
    p.add_argument("--scale-sets", type=_scale_sets, default=None, help="e.g. '64,96,128;96'")
    p.add_argument("--proposal-sources", type=lambda t: [s for s in t.split(";") if s], default=None,
                   help="';'-separated: sw, random or a CSV path")
    p.add_argument("--single-scale", type=int, default=96)
    p.add_argument("--seeds", type=_int_list, default=[0, 1])
    p.add_argument("--lr-schedule", default=",".join(f"{n}:{lr:g}" for n, lr in ABLATION_LR_SCHEDULE))
    p.add_argument("--per-image", type=int, default=90, help="boxes per image for random proposals")
    p.set_defaults(func=cmd_ablate)
    subs["ablate"] = p
    return parser, subs


def _config_path(argv: Sequence[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if a in subs), None)
    if path and command:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config {path}: {e}")
        sp = subs[command]
        actions = {a.dest: a for a in sp._actions}
        converted = {}
        for k, v in cfg.items():
            action = actions.get(k.replace("-", "_"))
            if action is None:
                parser.error(f"unknown key {k!r} in {path}")
            if action.type is not None and isinstance(v, str):
                v = action.type(v)
            converted[action.dest] = v
            # a required option may now come from the config
            action.required = False
        sp.set_defaults(**converted)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ProposalError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
