"""Command-line surface: the whole pipeline as subcommands of one tool.

Every run is reproducible from its config and seed; training and
fine-tuning runs copy the effective configuration into their output
directory next to the fingerprint, split, logs, and checkpoints they
produce. Exit codes: 0 success, 1 validation problem (bad flags, config,
manifest, or input files), 2 runtime failure.
"""

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .checkpoint import CheckpointError, load_network
from .config import ConfigError, RunConfig, load_config, save_config
from .gradcheck import standard_suite
from .losses import AFPConfig, afp_feature_distance
from .network import build
from .patching import predict_volume
from .preprocess import (
    compute_fingerprint,
    invert_to_hu,
    load_fingerprint,
    load_split,
    normalize_ct,
    save_fingerprint,
    save_split,
    split_dataset,
    zscore_per_case,
)
from .synth import PhantomSpec, generate_dataset
from .training import (
    CasePair,
    TrainConfig,
    network_forward_fn,
    train,
)
from .volume import ManifestError, Volume, VolumeError, load_manifest, read_volume, write_volume

VALIDATION_ERRORS = (
    ConfigError, ManifestError, VolumeError, CheckpointError,
    ValueError, FileNotFoundError, IsADirectoryError,
)


def _fail(msg):
    raise ValueError(msg)


def _apply_overrides(cfg, args):
    """Fold command-line flags over the loaded (or default) config."""
    run_over = {}
    for key in ("task", "region", "arch", "loss", "upsample"):
        v = getattr(args, key, None)
        if v is not None:
            run_over[key] = v
    if getattr(args, "patch", None) is not None:
        run_over["patch_dims"] = tuple(args.patch)
    if getattr(args, "step", None) is not None:
        run_over["step_fraction"] = args.step
    train_over = {}
    for flag, field in (("seed", "seed"), ("epochs", "max_epochs"),
                        ("iters", "iters_per_epoch"), ("batch", "batch"),
                        ("lr0", "lr0")):
        v = getattr(args, flag, None)
        if v is not None:
            train_over[field] = v
    if run_over or train_over:
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, **train_over),
            **run_over,
        )
    return cfg


def _prepare_out_dir(args, cfg):
    out = Path(args.out)
    if (out / "config.json").exists():
        _fail(f"{out} already holds a run (config.json present); pick a fresh directory")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    if getattr(args, "config", None):
        shutil.copyfile(args.config, out / "config_source.json")
    return out


def _split_ids(manifest, args, out=None):
    if getattr(args, "split", None):
        split = load_split(args.split)
    else:
        split = split_dataset(manifest, getattr(args, "seed", None) or 0)
    known = {e.case_id for e in manifest.entries}
    for cid in split.train_ids + split.val_ids:
        if cid not in known:
            _fail(f"split references unknown case {cid!r}")
    if out is not None:
        save_split(split, out / "split.json")
    return split


def _fingerprints(manifest, train_ids, cfg, args, out=None):
    """(target fingerprint, input fingerprint or None for z-scored tasks)."""
    by_id = {e.case_id: e for e in manifest.entries}
    if getattr(args, "fingerprint", None):
        fp = load_fingerprint(args.fingerprint)
    else:
        fp = compute_fingerprint(
            read_volume(manifest.resolve(by_id[cid].target_path)) for cid in train_ids
        )
    fp_in = None
    if cfg.task == 2:
        if getattr(args, "fingerprint_input", None):
            fp_in = load_fingerprint(args.fingerprint_input)
        else:
            fp_in = compute_fingerprint(
                read_volume(manifest.resolve(by_id[cid].input_path)) for cid in train_ids
            )
    if out is not None:
        save_fingerprint(fp, out / "fingerprint.json")
        if fp_in is not None:
            save_fingerprint(fp_in, out / "fingerprint_input.json")
    return fp, fp_in


def _normalized_input(entry, manifest, task, fp_in):
    v = read_volume(manifest.resolve(entry.input_path))
    if task == 1:
        normed, _, _ = zscore_per_case(v)
    else:
        normed = normalize_ct(v, fp_in)
    return normed.data.astype(np.float32), v


def _load_pairs(manifest, ids, task, fp, fp_in, seg_input=False, need_labels=False):
    by_id = {e.case_id: e for e in manifest.entries}
    pairs = []
    for cid in ids:
        e = by_id[cid]
        target = normalize_ct(read_volume(manifest.resolve(e.target_path)), fp)
        t32 = target.data.astype(np.float32)
        labels = None
        if e.label_path is not None:
            labels = read_volume(manifest.resolve(e.label_path)).data
        elif need_labels:
            _fail(f"case {cid} has no label volume")
        if seg_input:
            x = t32
        else:
            x, _ = _normalized_input(e, manifest, task, fp_in)
        pairs.append(CasePair(cid, x, t32, labels))
    return pairs


def _train_command(args, head, mode, finetune=False):
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)
    manifest = load_manifest(args.manifest)
    if manifest.task != cfg.task_name:
        _fail(f"manifest task {manifest.task!r} does not match configured task {cfg.task_name!r}")
    out = _prepare_out_dir(args, cfg)
    split = _split_ids(manifest, args, out)
    fp, fp_in = _fingerprints(manifest, split.train_ids, cfg, args, out)
    patch = cfg.resolved_patch()
    train_pairs = _load_pairs(manifest, split.train_ids, cfg.task, fp, fp_in,
                              seg_input=(mode == "seg"), need_labels=(mode == "seg"))
    val_pairs = _load_pairs(manifest, split.val_ids, cfg.task, fp, fp_in,
                            seg_input=(mode == "seg"), need_labels=(mode == "seg"))

    afp_cfg = None
    if mode == "l1" and cfg.loss == "l1afp":
        mode = "afp"
    if mode == "afp":
        if not args.extractor:
            _fail("the combined loss needs --extractor (a segmentation checkpoint)")
        extractor, _ = load_network(args.extractor)
        afp_cfg = AFPConfig(extractor=extractor, tap_indices=cfg.tap_indices,
                            lambda_l1=cfg.lambda_l1)

    if getattr(args, "checkpoint", None):
        net, _ = load_network(args.checkpoint)
        if net.spec.head != head:
            _fail(f"checkpoint head {net.spec.head!r} does not fit this command")
    else:
        net = build(cfg.network_spec(head=head), seed=cfg.train.seed)

    log_name = "finetune_log.tsv" if finetune else "train_log.tsv"
    ckpt_prefix = "model_afp" if finetune else "model"
    history = train(net, train_pairs, val_pairs, cfg.train, patch, out,
                    mode=mode, afp_cfg=afp_cfg, log_name=log_name,
                    ckpt_prefix=ckpt_prefix)
    last = history[-1]
    print(f"trained {len(history)} epochs; final val {last['val_loss']:.6g}; "
          f"artifacts in {out}")
    if mode == "afp":
        dists = []
        for p in val_pairs:
            pred = predict_volume(network_forward_fn(net), p.input, patch, cfg.step_fraction)
            try:
                dists.append(afp_feature_distance(pred[None], p.target[None, None], afp_cfg))
            except ValueError:
                break
        if len(dists) == len(val_pairs):
            print(f"mean validation feature distance {float(np.mean(dists)):.6g}")
    return 0


def cmd_gen_synth(args):
    spec = PhantomSpec(dims=tuple(args.dims), task=("mr2ct" if args.task != 2 else "cbct2ct"),
                       n_blobs=args.blobs, noise=args.noise)
    manifest = generate_dataset(args.out, args.cases, spec=spec, seed=args.seed or 0,
                                lesion_fraction=args.lesion_fraction)
    print(f"wrote {len(manifest.entries)} cases to {args.out}")
    return 0


def cmd_fingerprint(args):
    manifest = load_manifest(args.manifest)
    ids = [e.case_id for e in manifest.entries]
    if args.split:
        ids = load_split(args.split).train_ids
    by_id = {e.case_id: e for e in manifest.entries}
    for cid in ids:
        if cid not in by_id:
            _fail(f"split references unknown case {cid!r}")
    side = "input_path" if args.input_side else "target_path"
    fp = compute_fingerprint(
        read_volume(manifest.resolve(getattr(by_id[cid], side))) for cid in ids
    )
    save_fingerprint(fp, args.out)
    print(f"fingerprint over {len(ids)} volumes: mean {fp.mean_hu:.3f}, "
          f"std {fp.std_hu:.3f} -> {args.out}")
    return 0


def cmd_preprocess(args):
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = split_dataset(manifest, args.seed or 0)
    save_split(split, out / "split.json")
    by_id = {e.case_id: e for e in manifest.entries}
    fp = compute_fingerprint(
        read_volume(manifest.resolve(by_id[cid].target_path)) for cid in split.train_ids
    )
    save_fingerprint(fp, out / "fingerprint.json")
    if manifest.task == "cbct2ct":
        fp_in = compute_fingerprint(
            read_volume(manifest.resolve(by_id[cid].input_path)) for cid in split.train_ids
        )
        save_fingerprint(fp_in, out / "fingerprint_input.json")
    print(f"split {len(split.train_ids)} train / {len(split.val_ids)} val; "
          f"fingerprint mean {fp.mean_hu:.3f} std {fp.std_hu:.3f} -> {out}")
    return 0


def cmd_train(args):
    return _train_command(args, head="regression_1ch", mode="l1")


def cmd_seg_train(args):
    return _train_command(args, head="segmentation_7ch", mode="seg")


def cmd_finetune_afp(args):
    if not args.checkpoint:
        _fail("finetune-afp needs --checkpoint")
    if args.lr0 is None:
        args.lr0 = 0.001
    if args.batch is None:
        args.batch = 2
    args.loss = "l1afp"
    return _train_command(args, head="regression_1ch", mode="afp", finetune=True)


def _selected_ids(manifest, args):
    ids = [e.case_id for e in manifest.entries]
    if getattr(args, "split", None):
        split = load_split(args.split)
        ids = split.val_ids if args.subset == "val" else split.train_ids
    if getattr(args, "ids", None):
        wanted = args.ids.split(",")
        known = set(ids)
        for cid in wanted:
            if cid not in known:
                _fail(f"case {cid!r} not in the manifest (or not in the chosen subset)")
        ids = wanted
    return ids


def cmd_infer(args):
    net, meta = load_network(args.checkpoint)
    if net.spec.head != "regression_1ch":
        _fail("infer needs a translation checkpoint, not a segmentation one")
    manifest = load_manifest(args.manifest)
    task = 1 if manifest.task == "mr2ct" else 2
    fp = load_fingerprint(args.fingerprint)
    fp_in = load_fingerprint(args.fingerprint_input) if args.fingerprint_input else None
    if task == 2 and fp_in is None:
        _fail("cbct2ct inference needs --fingerprint-input")
    patch = tuple(args.patch) if args.patch else tuple(meta["extra"].get("patch_dims", ()))
    if not patch:
        _fail("checkpoint does not record patch dims; pass --patch Z Y X")
    step = args.step if args.step is not None else 0.3
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {e.case_id: e for e in manifest.entries}
    fn = network_forward_fn(net)
    for cid in _selected_ids(manifest, args):
        e = by_id[cid]
        x, raw = _normalized_input(e, manifest, task, fp_in)
        pred = predict_volume(fn, x, patch, step)[0]
        hu = invert_to_hu(Volume(pred, raw.spacing_mm, raw.origin_mm), fp)
        write_volume(hu, out / f"{cid}_pred.vox")
        print(f"{cid}: wrote {out / f'{cid}_pred.vox'}")
    return 0


def cmd_evaluate(args):
    manifest = load_manifest(args.manifest)
    pred_dir = Path(args.pred)
    seg = None
    if args.seg_checkpoint:
        if not args.fingerprint:
            _fail("--seg-checkpoint needs --fingerprint for normalization")
        seg_net, seg_meta = load_network(args.seg_checkpoint)
        patch = tuple(args.patch) if args.patch else tuple(seg_meta["extra"].get("patch_dims", ()))
        if not patch:
            _fail("segmentation checkpoint does not record patch dims; pass --patch")
        seg = metrics_mod.SegEvaluator(
            net=seg_net, fingerprint=load_fingerprint(args.fingerprint),
            patch_dims=patch, step_fraction=args.step if args.step is not None else 0.3,
        )
    by_id = {e.case_id: e for e in manifest.entries}
    results = []
    for cid in _selected_ids(manifest, args):
        e = by_id[cid]
        pred_path = pred_dir / f"{cid}_pred.vox"
        if not pred_path.exists():
            _fail(f"no prediction for case {cid} at {pred_path}")
        pred = read_volume(pred_path)
        target = read_volume(manifest.resolve(e.target_path))
        if pred.dims != target.dims:
            _fail(f"case {cid}: prediction dims {pred.dims} vs target {target.dims}")
        res = metrics_mod.evaluate_case(cid, pred.data, target.data,
                                        target.spacing_mm, seg=seg)
        results.append(res)
        shown = ", ".join(f"{k} {res[k]:.4g}" for k in metrics_mod.SCALAR_COLUMNS if k in res)
        print(f"{cid}: {shown}")
    json_path, tsv_path = metrics_mod.write_reports(args.out, results)
    print(f"summary -> {json_path}, {tsv_path}")
    return 0


def cmd_gradcheck(args):
    tol = args.tolerance
    failed = 0
    for name, rep in standard_suite(seed=args.seed or 0):
        status = "ok" if rep.ok(tol) else "FAIL"
        print(f"{status:4s} {name:40s} max rel err {rep.max_rel_err:.3e} "
              f"({rep.n_coords} coords)")
        failed += 0 if rep.ok(tol) else 1
    if failed:
        print(f"{failed} checks exceeded tolerance {tol}", file=sys.stderr)
        return 2
    print(f"all checks below {tol}")
    return 0


def _add_common(p, *flags):
    if "config" in flags:
        p.add_argument("--config", help="JSON run config; flags override its values")
    if "seed" in flags:
        p.add_argument("--seed", type=int, help="master seed")
    if "out" in flags:
        p.add_argument("--out", required=True, help="output directory or file")
    if "manifest" in flags:
        p.add_argument("--manifest", required=True, help="dataset manifest.json")
    if "step" in flags:
        p.add_argument("--step", type=float, help="tile step fraction (default 0.3)")
    if "model" in flags:
        p.add_argument("--region", choices=["HN", "AB", "TH"])
        p.add_argument("--task", type=int, choices=[1, 2],
                       help="1: mr2ct, 2: cbct2ct")
        p.add_argument("--arch", choices=["unet", "resunet"])
        p.add_argument("--loss", choices=["l1", "l1afp"])
        p.add_argument("--upsample", choices=["tconv", "trilinear"])
        p.add_argument("--patch", type=int, nargs=3, metavar=("Z", "Y", "X"))
    if "trainflags" in flags:
        p.add_argument("--epochs", type=int, help="override epoch budget")
        p.add_argument("--iters", type=int, help="override iterations per epoch")
        p.add_argument("--batch", type=int, help="override batch size")
        p.add_argument("--lr0", type=float, help="override initial learning rate")
        p.add_argument("--split", help="existing split.json to reuse")
        p.add_argument("--fingerprint", help="existing fingerprint.json to reuse")
        p.add_argument("--fingerprint-input", dest="fingerprint_input",
                       help="input-side fingerprint (cbct2ct only)")
        p.add_argument("--extractor", help="frozen segmentation checkpoint for the combined loss")
        p.add_argument("--checkpoint", help="warm-start weights from this checkpoint")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="voxsynth",
        description="CT synthesis pipeline: data, training, inference, evaluation.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic paired dataset")
    _add_common(p, "out", "seed")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32], metavar=("Z", "Y", "X"))
    p.add_argument("--task", type=int, choices=[1, 2], default=1)
    p.add_argument("--blobs", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--lesion-fraction", dest="lesion_fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("fingerprint", help="dataset intensity statistics")
    _add_common(p, "manifest", "out")
    p.add_argument("--split", help="restrict to the split's training cases")
    p.add_argument("--input-side", dest="input_side", action="store_true",
                   help="use input volumes instead of targets")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("preprocess", help="compute split and fingerprint(s)")
    _add_common(p, "manifest", "out", "seed")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="phase-1 training (L1, or combined with --loss l1afp)")
    _add_common(p, "manifest", "out", "config", "seed", "model", "trainflags", "step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune-afp", help="continue a checkpoint with the combined loss")
    _add_common(p, "manifest", "out", "config", "seed", "model", "trainflags", "step")
    p.set_defaults(func=cmd_finetune_afp)

    p = sub.add_parser("seg-train", help="train the segmentation network on CT + labels")
    _add_common(p, "manifest", "out", "config", "seed", "model", "trainflags", "step")
    p.set_defaults(func=cmd_seg_train)

    p = sub.add_parser("infer", help="synthesize CT volumes from a checkpoint")
    _add_common(p, "manifest", "out", "step")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fingerprint", required=True, help="target-side fingerprint.json")
    p.add_argument("--fingerprint-input", dest="fingerprint_input")
    p.add_argument("--patch", type=int, nargs=3, metavar=("Z", "Y", "X"))
    p.add_argument("--split", help="restrict cases via a split.json")
    p.add_argument("--subset", choices=["train", "val"], default="val")
    p.add_argument("--ids", help="comma-separated case ids")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against reference CT")
    _add_common(p, "manifest", "out", "step")
    p.add_argument("--pred", required=True, help="directory holding <case>_pred.vox files")
    p.add_argument("--seg-checkpoint", dest="seg_checkpoint",
                   help="segmentation checkpoint for Dice/HD95")
    p.add_argument("--fingerprint", help="fingerprint for the segmentation input")
    p.add_argument("--patch", type=int, nargs=3, metavar=("Z", "Y", "X"))
    p.add_argument("--split", help="restrict cases via a split.json")
    p.add_argument("--subset", choices=["train", "val"], default="val")
    p.add_argument("--ids", help="comma-separated case ids")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    _add_common(p, "seed")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        rc = args.func(args)
        return 0 if rc is None else rc
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
