"""Command line entry point: ``minktrack {gen,train,track,eval,gradcheck,ablate}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .ablation import ablation_run
from .dataio import FormatError, config_from_mapping, config_to_mapping, read_config
from .metrics import evaluate
from .model import TrackerNet
from .nn import CheckpointError, ConfigurationError
from .pipeline import TrackerParams, Timing, gt_eval_boxes, load_tracks, run_pipeline, save_tracks
from .sim import SceneConfig, gen_dataset, load_dataset, save_dataset
from .train import TrainConfig, train

log = logging.getLogger("minktrack")


def _load_config(cls, path: Optional[str]):
    return cls() if path is None else config_from_mapping(cls, read_config(path))


def cmd_gen(args) -> int:
    cfg = _load_config(SceneConfig, args.config)
    ds = gen_dataset(cfg)
    n = save_dataset(args.out, ds)
    log.info("wrote %d frames in %d scenes to %s", n, len(ds.scenes), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(TrainConfig, args.config)
    datasets = [load_dataset(p) for p in args.data]
    net = None
    if args.resume:
        net, meta = TrackerNet.load(args.resume)
        log.info("resuming from %s at step %d", args.resume, net.store.step)
    net, _ = train(datasets, cfg, net=net)
    net.save(args.out, extra={"lambda_track": cfg.lambda_track, "train": _plain(cfg)})
    log.info("saved %s at step %d", args.out, net.store.step)
    return 0


def _plain(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in config_to_mapping(cfg).items()}


def cmd_track(args) -> int:
    ds = load_dataset(args.data)
    net, _ = TrackerNet.load(args.ckpt)
    params = TrackerParams(args.lambda_d, args.lambda_s, score_thresh=args.score_thresh)
    timing = Timing()
    tracks, _ = run_pipeline(ds, net, params, timing=timing)
    save_tracks(args.out, tracks, meta={"lambda_d": args.lambda_d, "lambda_s": args.lambda_s,
                                        "score_thresh": args.score_thresh})
    # timings are informational and never enter an output file
    per = 1e3 / max(timing.frames, 1)
    print(f"frames={timing.frames}  network={timing.network * per:.1f} ms/frame  "
          f"tracker={timing.tracker * per:.2f} ms/frame", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.gt)
    pred = load_tracks(args.tracks)
    rep = evaluate(gt_eval_boxes(ds), pred, ds.class_names)
    Path(args.report).write_text(rep.to_json() + "\n", encoding="utf-8")
    print(rep.table())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    results = run_all(seed=args.seed, only=args.only)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


def cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    rep = ablation_run(ds, args.ckpts, TrackerParams(score_thresh=args.score_thresh))
    Path(args.report).write_text(rep.to_json() + "\n", encoding="utf-8")
    for note in rep.notices:
        log.warning("%s", note)
    print(rep.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minktrack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene dataset")
    g.add_argument("--config", help="key=value scene config (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train detector and association classifier")
    t.add_argument("--data", required=True, nargs="+")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="run the online tracker")
    k.add_argument("--data", required=True)
    k.add_argument("--ckpt", required=True)
    k.add_argument("--lambda-d", type=float, default=TrackerParams.lambda_d)
    k.add_argument("--lambda-s", type=float, default=TrackerParams.lambda_s)
    k.add_argument("--score-thresh", type=float, default=TrackerParams.score_thresh)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score a track dump against ground truth")
    e.add_argument("--tracks", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--only", nargs="*")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="component ladder and lambda sweeps")
    a.add_argument("--data", required=True)
    a.add_argument("--ckpts", required=True, nargs="+")
    a.add_argument("--score-thresh", type=float, default=TrackerParams.score_thresh)
    a.add_argument("--report", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigurationError, FormatError, CheckpointError, OSError, KeyError) as e:
        print(f"minktrack {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
