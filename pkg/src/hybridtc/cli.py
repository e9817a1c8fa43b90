"""Command-line entry point: ``hybridtc <subcommand> ...``.

Subcommands write only to the paths they are given. Usage errors exit with
status 2, any other failure with status 1.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("hybridtc")

QC_HEADER = ["tc_id", "time", "mean", "std", "local_hour", "verdict"]
QC_CSV_VERSION = "# hybridtc qc v1"


def _epochs(n):
    def parse(text):
        try:
            vals = tuple(int(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers") from None
        if len(vals) != n or min(vals) < 0:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated nonnegative integers")
        return vals
    return parse


def _label_path(text):
    label, sep, path = text.partition("=")
    if not sep or not label or not path:
        raise argparse.ArgumentTypeError("expected LABEL=PATH")
    return label, path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="seed for every RNG (overrides the config)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="hybridtc", description="Hybrid GAN tropical cyclone intensity estimation")
    sub = p.add_subparsers(dest="command", required=True, metavar="{synth,qc,train3,train5,estimate,eval,plot}")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic TCIR-format dataset")
    s.add_argument("--out", required=True, help="HDF5 container to write")
    s.add_argument("--meta", required=True, help="metadata CSV to write")
    s.add_argument("--n-frames", type=int)
    s.add_argument("--image-size", type=int)
    s.add_argument("--drop-channels", default="", help="comma list of vis,pmw to write as absent")

    s = sub.add_parser("qc", parents=[common], help="VIS quality-control report")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--meta", required=True)
    s.add_argument("--out", required=True)

    for name, n, helptext in (("train3", 3, "three-stage training"), ("train5", 5, "five-stage training")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--in", dest="inp")
        s.add_argument("--meta")
        s.add_argument("--out-dir")
        s.add_argument("--epochs", type=_epochs(n), help=f"{n} comma-separated max epochs")
        s.add_argument("--width", type=float, help="channel-width multiplier")
        s.add_argument("--batch-size", type=int)
        s.add_argument("--resume", action="store_true", help="continue from OUT_DIR/train_state.pt")
        s.add_argument("--dry-run", action="store_true", help="print the schedule and exit")

    s = sub.add_parser("estimate", parents=[common], help="estimate intensity from IR1 and WV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--meta", required=True)
    s.add_argument("--model", required=True, help="model bundle directory")
    s.add_argument("--out", required=True)
    s.add_argument("--no-blend", action="store_true")
    s.add_argument("--reducer", choices=["mean", "median"])
    s.add_argument("--smooth-window", type=int)

    s = sub.add_parser("eval", parents=[common], help="RMSE report for an estimate CSV")
    s.add_argument("--estimates", required=True)
    s.add_argument("--meta", required=True, help="metadata CSV holding best-track intensity")
    s.add_argument("--out", required=True, help="JSON report to write")
    s.add_argument("--split", default="all", choices=["all", "train", "valid", "test"])

    s = sub.add_parser("plot", parents=[common], help="learning curves or generation grid")
    kinds = s.add_subparsers(dest="kind", required=True)
    c = kinds.add_parser("curves", parents=[common])
    c.add_argument("--log", type=_label_path, action="append", required=True, help="LABEL=epochs.csv")
    c.add_argument("--out", required=True)
    c.add_argument("--epochs", type=int, help="truncate curves to this many epochs")
    g = kinds.add_parser("grid", parents=[common])
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--meta", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=4, help="number of frames")
    return p


def _config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


# -- subcommands -------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    from .dataset import generate_synthetic, with_channels, write_tcir

    drop = {c.strip() for c in args.drop_channels.split(",") if c.strip()}
    if drop - {"vis", "pmw"}:
        raise ValueError("--drop-channels accepts only vis and pmw")
    syn = cfg.synthetic
    if args.n_frames is not None:
        syn = replace(syn, n_frames=args.n_frames)
    if args.image_size is not None:
        syn = replace(syn, image_size=args.image_size)
    ds = generate_synthetic(syn)
    if drop:
        flags = {f"{c}_present": False for c in drop}
        ds = replace(ds, frames=tuple(with_channels(fr, **flags) for fr in ds.frames))
    write_tcir(ds, args.out, args.meta)
    log.info("wrote %d frames to %s", len(ds), args.out)
    return 0


def cmd_qc(args, cfg) -> int:
    from .dataset import format_time, load_tcir
    from .qc import vis_qc

    ds = load_tcir(args.inp, args.meta)
    good = 0
    with open(args.out, "w", newline="") as fh:
        fh.write(QC_CSV_VERSION + "\n")
        w = csv.writer(fh)
        w.writerow(QC_HEADER)
        for fr in ds.frames:
            st = vis_qc(fr, cfg.train.qc)
            good += st.good
            w.writerow([fr.meta.tc_id, format_time(fr.meta.utc_time), repr(st.mean), repr(st.std),
                        st.local_hour, st.verdict])
    log.info("%d of %d frames pass VIS quality control", good, len(ds))
    return 0


def _load_training_data(args, cfg):
    from .dataset import center_crop, load_tcir, split_by_year
    from .qc import fit_channel_stats, normalize_dataset

    ds = center_crop(load_tcir(args.inp, args.meta), cfg.train.image_size)
    train_raw, valid_raw, _ = split_by_year(ds)
    if not len(train_raw):
        raise ValueError("no frames fall in the training years")
    stats = fit_channel_stats(train_raw)
    valid = normalize_dataset(valid_raw, stats) if len(valid_raw) else None
    return normalize_dataset(train_raw, stats), valid, stats


def cmd_train(args, cfg, stages: int) -> int:
    from . import training as T
    from .inference import ModelBundle

    tcfg = cfg.train
    if args.width is not None:
        tcfg = replace(tcfg, width=args.width)
    if args.batch_size is not None:
        tcfg = replace(tcfg, batch_size=args.batch_size)
    if stages == 5:
        epochs = args.epochs or cfg.five_stage_epochs
        schedule = T.five_stage_schedule(epochs)
    else:
        epochs = args.epochs or cfg.three_stage_epochs
        schedule = T.three_stage_schedule(epochs)
    if args.dry_run:
        print(T.format_schedule(schedule))
        return 0
    if not (args.inp and args.meta and args.out_dir):
        raise _UsageError("--in, --meta and --out-dir are required unless --dry-run is given")
    train, valid, stats = _load_training_data(args, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "train_state.pt"
    if args.resume:
        trainer = T.Trainer.from_state(T.resume(state_path), T.TensorData.from_dataset(train, tcfg.qc),
                                       T.TensorData.from_dataset(valid, tcfg.qc) if valid else None,
                                       log_dir=out / "logs")
        trainer.run(checkpoint_path=state_path)
        nets = trainer.nets
    else:
        train_fn = T.five_stage_train if stages == 5 else T.three_stage_train
        nets = train_fn(train, valid, tcfg, epochs=epochs, log_dir=out / "logs", checkpoint_path=state_path).nets
    ModelBundle.from_nets(nets, stats).save(out / "model")
    log.info("model written to %s", out / "model")
    return 0


def cmd_estimate(args, cfg) -> int:
    from .dataset import center_crop, load_tcir
    from .inference import ModelBundle, estimate_dataset
    from .metrics import write_estimates_csv

    est = cfg.estimate
    bundle = ModelBundle.load(args.model)
    ds = center_crop(load_tcir(args.inp, args.meta), bundle.image_size)
    window = args.smooth_window if args.smooth_window is not None else est.smooth_window
    records = estimate_dataset(bundle, ds, blend=est.blend and not args.no_blend,
                               smooth_window=window or None, reducer=args.reducer or est.reducer)
    write_estimates_csv(args.out, records)
    log.info("wrote %d estimates to %s", len(records), args.out)
    return 0


def cmd_eval(args, cfg) -> int:
    from .dataset import TEST_YEARS, TRAIN_YEARS, VALID_YEARS, read_meta_csv
    from .metrics import evaluate, match_truths, read_estimates_csv

    records = read_estimates_csv(args.estimates)
    years = {"train": TRAIN_YEARS, "valid": VALID_YEARS, "test": TEST_YEARS}.get(args.split)
    if years is not None:
        records = [r for r in records if r.utc_time.year in years]
    report = evaluate(records, match_truths(records, read_meta_csv(args.meta)), split=args.split)
    Path(args.out).write_text(report.to_json() + "\n")
    print(f"{args.split}: n={report.n_samples} rmse_raw={report.rmse_raw:.3f}"
          + (f" rmse_blend={report.rmse_blend:.3f}" if report.rmse_blend is not None else "")
          + (f" rmse_smooth={report.rmse_smooth:.3f}" if report.rmse_smooth is not None else ""))
    return 0


def cmd_plot(args, cfg) -> int:
    from . import plots

    if args.kind == "curves":
        labels = [lab for lab, _ in args.log]
        if len(set(labels)) != len(labels):
            raise _UsageError("duplicate --log labels")
        res = plots.learning_curve_plot(dict(args.log), args.out, epochs=args.epochs)
    else:
        args.qc = cfg.train.qc
        res = _grid(args)
    log.info("wrote %s and %s", res.png, res.sidecar)
    return 0


def _grid(args):
    import torch

    from . import nets as N
    from . import plots
    from .dataset import center_crop, frame_m2n, load_tcir
    from .inference import ModelBundle, _normalize

    bundle = ModelBundle.load(args.model).eval()
    ds = center_crop(load_tcir(args.inp, args.meta), bundle.image_size)
    from .qc import vis_qc

    paired = [fr for fr in ds.frames if fr.vis_present and fr.pmw_present]
    good = [fr for fr in paired if vis_qc(fr, args.qc).good]
    frames = (good + [fr for fr in paired if fr not in good])[: args.n]
    if not frames:
        raise ValueError("no frame carries both VIS and PMW")
    st = bundle.stats
    x = _normalize(bundle, np.stack([f.ir1 for f in frames]), np.stack([f.wv for f in frames]))
    m2n = torch.tensor([min(frame_m2n(f.meta), 300.0) for f in frames])
    with torch.no_grad():
        vis = N.generator_forward(bundle.gen_vis, x[:, 0], x[:, 1], m2n).double() * st.std[2] + st.mean[2]
        pmw = N.generator_forward(bundle.gen_pmw, x[:, 0], x[:, 1]).double() * st.std[3] + st.mean[3]
    real = np.stack([[f.vis, f.pmw] for f in frames])
    gen = np.stack([vis.numpy(), pmw.numpy()], axis=1)
    names = [f"{f.meta.tc_id}@{f.meta.utc_time:%Y%m%d%H%M}" for f in frames]
    return plots.generation_grid_plot(real, gen, args.out, names=names)


class _UsageError(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "synth":
            return cmd_synth(args, cfg)
        if args.command == "qc":
            return cmd_qc(args, cfg)
        if args.command in ("train3", "train5"):
            return cmd_train(args, cfg, 5 if args.command == "train5" else 3)
        if args.command == "estimate":
            return cmd_estimate(args, cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg)
        return cmd_plot(args, cfg)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hybridtc: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # reported, not raised: the exit status carries the failure
        log.debug("failure", exc_info=True)
        print(f"hybridtc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
