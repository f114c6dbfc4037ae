"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 data error, 3 check failure.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import labels as labelmod
from .config import RunConfig
from .dataset import Dataset, load_predictions
from .decoder import init_model, load_model, run_clip, save_model
from .errors import InfeasibleClipError, ProtocolError, StableVSSError
from .features import load_tensor, save_tensor
from .metrics import MetricReport, accumulate_confusion, miou, mvc, vc_approx, vc_dense
from .mtc import finite_diff_check, mtc_loss
from .sampling import make_rng, partition_video, sample_clip
from .synth import generate
from .train import TrainingDiverged, pixel_features, toy_mvc, train_toy

log = logging.getLogger("stablevss")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def dump_json(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(
        seed=args.seed,
        protocol=getattr(args, "protocol", None),
        theta=getattr(args, "theta", None),
        tau=getattr(args, "tau", None),
        alpha=getattr(args, "alpha", None),
        lambda_mtc=getattr(args, "lambda_mtc", None),
        strides=getattr(args, "strides", None),
        clip_len=getattr(args, "clip_len", None),
        windows=getattr(args, "windows", None),
        num_scales=getattr(args, "num_scales", None),
        steps=getattr(args, "steps", None),
    )


# commands -------------------------------------------------------------------


def cmd_gen(cfg, out, **synth_overrides):
    synth = replace(cfg.synth, **{k: v for k, v in synth_overrides.items() if v is not None},
                    num_classes=cfg.num_classes)
    return generate(out, cfg.seed, cfg.spec, cfg.resolved_frame_size, synth)


def _model_for(cfg, ds, params=None):
    if params:
        model = load_model(params)
        if model.spec != ds.spec:
            raise UsageError("parameter scales do not match the dataset")
        return model
    return init_model(cfg.seed, ds.spec, num_queries=cfg.num_queries, dim=cfg.dim,
                      num_classes=ds.num_classes, n_dec=cfg.num_blocks, heads=cfg.heads,
                      d_ff=cfg.d_ff, t_max=max(16, cfg.clip_len))


def cmd_infer(cfg, data, out, params=None, save_params=None):
    ds = Dataset(data)
    model = _model_for(cfg, ds, params)
    if save_params:
        save_model(save_params, model)
    out = Path(out)
    videos = []
    for v in ds.videos:
        name = v["name"]
        (out / name).mkdir(parents=True, exist_ok=True)
        clips, logit_files, label_files = [], [], []
        for i, clip in enumerate(partition_video(v["num_frames"], cfg.clip_len)):
            frames = [ds.frame_grids(v, t) for t in clip.indices]
            logits = run_clip(frames, model, out_size=ds.frame_size)
            rel = f"{name}/logits_c{i:04d}.t2g"
            save_tensor(out / rel, logits.astype(np.float32))
            logit_files.append(rel)
            clips.append(clip.to_dict())
            for t, y in zip(clip.indices, logits.argmax(axis=1)):
                rel = f"{name}/f{t:04d}.t2g"
                save_tensor(out / rel, y.astype(np.uint8))
                label_files.append(rel)
        videos.append({"name": name, "num_frames": v["num_frames"], "clips": clips,
                       "logits": logit_files, "labels": label_files})
    manifest = {"format": "stablevss-predictions", "version": 1, "num_classes": ds.num_classes,
                "clip_len": cfg.clip_len, "videos": videos}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _load_pair(logits_path, labels_path):
    x = load_tensor(logits_path).astype(np.float64)
    y = load_tensor(labels_path).astype(np.int64)
    return x, y


def cmd_loss(cfg, logits, labels):
    x, y = _load_pair(logits, labels)
    res = mtc_loss(x, y, cfg.mtc)
    out = res.to_dict()
    out["weighted_loss"] = cfg.lambda_mtc * res.loss
    return out


def cmd_gradcheck(cfg, logits, labels, eps=1e-6, coords=200):
    x, y = _load_pair(logits, labels)
    report = finite_diff_check(x, y, cfg.mtc, eps=eps, num_coords=coords, rng=make_rng(cfg.seed))
    return report.to_dict()


def choose_protocol(sparse, requested=None):
    """Sparse-labeled corpora are evaluated with the approx protocol."""
    if sparse:
        if requested == "dense":
            raise UsageError("dataset has sparse labels; the dense protocol needs every frame labeled")
        return "approx"
    return requested or "dense"


def cmd_eval(cfg, data, pred, gt_mapping=None, pred_mapping=None, csv_path=None):
    ds = Dataset(data)
    preds = load_predictions(pred)
    protocol = choose_protocol(ds.sparse, cfg.protocol)
    gt_map = labelmod.resolve_mapping(gt_mapping)
    pred_map = labelmod.resolve_mapping(pred_mapping)
    aligned = gt_map is not None or pred_map is not None
    k = labelmod.NUM_OVERLAP if aligned else ds.num_classes
    ignore = ds.ignore

    def align(arr, table):
        return labelmod.remap(arr, table, ignore=ignore) if table is not None else arr

    conf = None
    vc = {n: {} for n in cfg.windows}
    skipped = {n: {} for n in cfg.windows}
    for v in ds.videos:
        name = v["name"]
        if name not in preds:
            raise StableVSSError(f"no predictions for video {name}")
        o = align(preds[name], pred_map)
        if o.shape[0] != v["num_frames"]:
            raise StableVSSError(f"{name}: {o.shape[0]} predicted frames, expected {v['num_frames']}")
        refs = {t: align(m, gt_map) for t, m in ds.labels(v).items()}
        if protocol == "dense":
            gt = np.stack([refs[t] for t in range(v["num_frames"])]) if len(refs) == v["num_frames"] else None
            if gt is None:
                raise UsageError(f"{name}: dense protocol needs labels on every frame")
            conf = accumulate_confusion(o, gt, k, ignore, conf)
        else:
            gray = ds.gray(v)
            for t, m in sorted(refs.items()):
                conf = accumulate_confusion(o[t], m, k, ignore, conf)
        for n in cfg.windows:
            try:
                if protocol == "dense":
                    vc[n][name] = vc_dense(o, gt, n, ignore, strict=cfg.strict_vc)
                else:
                    vc[n][name] = vc_approx(o, refs, gray, n, cfg.theta, ignore, strict=cfg.strict_vc)
            except ProtocolError as e:
                skipped[n][name] = str(e)
                log.warning("%s, window %d skipped: %s", name, n, e)
    iou, mean_iou = miou(conf)
    report = MetricReport(
        per_class_iou=list(iou), miou=mean_iou, vc=vc,
        mvc={n: (mvc(vc[n].values()) if vc[n] else None) for n in cfg.windows},
        skipped=skipped, pixels=int(conf.sum()), protocol=protocol,
    )
    if csv_path:
        names = labelmod.OVERLAP_CLASSES if aligned else [str(i) for i in range(k)]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "class", "iou"])
            for i, (cname, val) in enumerate(zip(names, iou)):
                w.writerow([i, cname, "" if np.isnan(val) else repr(float(val))])
    return report.to_dict()


def toy_videos(cfg, data):
    ds = Dataset(data)
    model = _model_for(cfg, ds)
    videos = []
    for v in ds.videos:
        frames = [ds.frame_grids(v, t) for t in range(v["num_frames"])]
        videos.append((pixel_features(model, frames, ds.frame_size), ds.dense_labels(v)))
    return ds, videos


def cmd_train_toy(cfg, data, videos=None):
    if videos is None:
        ds, videos = toy_videos(cfg, data)
        k, ignore = ds.num_classes, ds.ignore
    else:
        k, ignore = cfg.num_classes, 255
    state = train_toy(videos, k, cfg.mtc, lambda_mtc=cfg.lambda_mtc, steps=cfg.steps, lr=cfg.lr,
                      momentum=cfg.momentum, clip_len=cfg.clip_len, strides=cfg.toy_strides,
                      clips_per_step=cfg.clips_per_step, seed=cfg.seed, ignore=ignore)
    out = state.to_dict()
    out["lambda_mtc"] = cfg.lambda_mtc
    out["mvc2"] = toy_mvc(state, videos, 2, ignore)
    return out, state


def cmd_sample_clips(cfg, video_len, count):
    rng = make_rng(cfg.seed)
    return [sample_clip(video_len, cfg.clip_len, cfg.strides, rng).to_dict() for _ in range(count)]


# argument parsing -------------------------------------------------------------


def build_parser():
    p = _Parser(prog="stablevss", description="Video segmentation consistency toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")
    mtc = argparse.ArgumentParser(add_help=False)
    mtc.add_argument("--tau", type=float)
    mtc.add_argument("--alpha", type=float)
    mtc.add_argument("--lambda-mtc", type=float)
    mtc.add_argument("--num-scales", type=int)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    g.add_argument("--num-videos", type=int)
    g.add_argument("--num-frames", type=int)
    g.add_argument("--stable-fraction", type=float)
    g.add_argument("--labeled-every", type=int)

    i = sub.add_parser("infer", parents=[common], help="sequential clip inference")
    i.add_argument("--data", required=True)
    i.add_argument("--params", help="parameter directory (default: initialise from --seed)")
    i.add_argument("--save-params")
    i.add_argument("--clip-len", type=int)

    for name in ("loss", "grad-check"):
        s = sub.add_parser(name, parents=[common, mtc])
        s.add_argument("--logits", required=True)
        s.add_argument("--labels", required=True)
        if name == "grad-check":
            s.add_argument("--eps", type=float, default=1e-6)
            s.add_argument("--coords", type=int, default=200)

    e = sub.add_parser("eval", parents=[common], help="mIoU and mVC")
    e.add_argument("--data", required=True, help="dataset directory (ground truth)")
    e.add_argument("--pred", required=True, help="prediction directory from infer")
    e.add_argument("--protocol", choices=["dense", "approx"])
    e.add_argument("--theta", type=float)
    e.add_argument("--windows", type=_ints)
    e.add_argument("--gt-mapping")
    e.add_argument("--pred-mapping")
    e.add_argument("--strict", action="store_true", help="also require predicted label == GT label")
    e.add_argument("--csv")

    t = sub.add_parser("train-toy", parents=[common, mtc], help="train a linear head on frozen features")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--clip-len", type=int)

    c = sub.add_parser("sample-clips", parents=[common])
    c.add_argument("--video-len", type=int, required=True)
    c.add_argument("--clip-len", type=int)
    c.add_argument("--strides", type=_ints)
    c.add_argument("--count", type=int, default=1)
    return p


def run(args):
    cfg = load_config(args)
    if args.command == "gen":
        if not args.out:
            raise UsageError("gen needs --out")
        m = cmd_gen(cfg, args.out, num_videos=args.num_videos, num_frames=args.num_frames,
                    stable_fraction=args.stable_fraction, labeled_every=args.labeled_every)
        dump_json({"videos": len(m["videos"]), "out": str(args.out)})
    elif args.command == "infer":
        if not args.out:
            raise UsageError("infer needs --out")
        m = cmd_infer(cfg, args.data, args.out, args.params, args.save_params)
        dump_json({"videos": len(m["videos"]), "out": str(args.out)})
    elif args.command == "loss":
        dump_json(cmd_loss(cfg, args.logits, args.labels), args.out)
    elif args.command == "grad-check":
        rep = cmd_gradcheck(cfg, args.logits, args.labels, args.eps, args.coords)
        dump_json(rep, args.out)
        if not rep["passed"]:
            raise CheckFailed(f"gradient check failed: max relative deviation {rep['max_rel']:.3g}")
    elif args.command == "eval":
        if args.strict:
            cfg = cfg.override(strict_vc=True)
        dump_json(cmd_eval(cfg, args.data, args.pred, args.gt_mapping, args.pred_mapping, args.csv), args.out)
    elif args.command == "train-toy":
        out, _ = cmd_train_toy(cfg, args.data)
        dump_json(out, args.out)
    elif args.command == "sample-clips":
        dump_json(cmd_sample_clips(cfg, args.video_len, args.count), args.out)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (UsageError, InfeasibleClipError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (CheckFailed, TrainingDiverged) as e:
        log.error("%s", e)
        return EXIT_CHECK
    except (StableVSSError, OSError, KeyError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except ValueError as e:
        log.error("%s", e)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
