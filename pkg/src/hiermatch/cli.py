"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, with_overrides
from .core import read_pnm, write_pnm
from .errors import ConfigError, HiermatchError
from .evaluation import epe, fl_outlier_rate, pck, read_mask, synth_pair, write_pck_csv
from .features import export_feature_map, extract_hierarchy, init_heads
from .flow import read_flo, write_flo
from .learn import (
    read_correspondences,
    read_heads,
    train,
    training_pair_from_images,
    write_correspondences,
    write_heads,
)
from .match import hierarchical_match, write_matches, dense_match, dense_to_results
from .match3d import SubvolumeDescriptor, VoxelGrid, match_3d
from .pipeline import estimate_flow

log = logging.getLogger("hiermatch")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(_existing(args.config)) if args.config else RunConfig()
    return with_overrides(cfg, seed=args.seed)


def _heads(cfg: RunConfig, args):
    path = getattr(args, "heads", None) or cfg.heads
    if path:
        return read_heads(_existing(path))
    log.warning("no heads file given; using untrained Xavier heads (seed %d)", cfg.seed)
    return init_heads(cfg.level_configs(), cfg.seed)


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else base / p


def _triple(text: str) -> np.ndarray:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3:
        raise UsageError(f"expected z,y,x triple, got {text!r}")
    return np.array(vals)


def _points(path) -> np.ndarray:
    """Point list from a correspondence file (target points), a matches file, or x y rows."""
    path = _existing(path)
    text = path.read_text()
    if text.startswith("PAIR"):
        return read_correspondences(path).xp
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (2, 7):
        raise ValueError(f"{path}: expected 2 or 7 columns per line")
    return arr[:, 2:4] if arr.shape[1] == 7 else arr


# --- commands ----------------------------------------------------------------

def cmd_train(args) -> None:
    cfg = _config(args)
    cfgs = cfg.level_configs()
    pairs = []
    for corr_path in args.correspondences:
        corr_path = _existing(corr_path)
        cs = read_correspondences(corr_path)
        ref = read_pnm(_existing(_resolve(corr_path.parent, cs.ref)))
        tgt = read_pnm(_existing(_resolve(corr_path.parent, cs.tgt)))
        pairs.append(training_pair_from_images(ref, tgt, cs, cfgs))
    result = train(pairs, cfgs, cfg.train_config())
    write_heads(result.heads, args.out)
    loss_out = Path(args.loss_out) if args.loss_out else Path(args.out).with_suffix(".loss.csv")
    with open(loss_out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"])
        for i, loss in enumerate(result.losses):
            w.writerow([i, repr(loss)])
    log.info("trained %d iterations; heads -> %s, losses -> %s", len(result.losses), args.out, loss_out)


def _hierarchies(cfg: RunConfig, args):
    ref = read_pnm(_existing(args.ref))
    tgt = read_pnm(_existing(args.tgt))
    heads = _heads(cfg, args)
    cfgs = cfg.level_configs()
    return ref, tgt, extract_hierarchy(ref, cfgs, heads), extract_hierarchy(tgt, cfgs, heads)


def cmd_match(args) -> None:
    cfg = _config(args)
    ref, _, h_ref, h_tgt = _hierarchies(cfg, args)
    if args.queries:
        qpath = _existing(args.queries)
        text = qpath.read_text()
        if text.startswith("PAIR"):
            queries = read_correspondences(qpath).x
        else:
            queries = np.array([ln.split()[:2] for ln in text.splitlines() if ln.strip()], dtype=np.float64)
        results = hierarchical_match(h_ref, h_tgt, queries, cfg.match_config())
    else:
        dm = dense_match(h_ref, h_tgt, cfg.match_config(), size=(ref.width, ref.height))
        results = dense_to_results(dm)
    write_matches(results, args.out)
    log.info("wrote %d matches to %s", len(results), args.out)


def cmd_flow(args) -> None:
    cfg = _config(args)
    ref = read_pnm(_existing(args.ref))
    tgt = read_pnm(_existing(args.tgt))
    heads = _heads(cfg, args)
    flow = estimate_flow(ref, tgt, cfg.level_configs(), heads, cfg.match_config(), cfg.flow_config())
    write_flo(flow, args.out)
    log.info("wrote %dx%d flow to %s", flow.width, flow.height, args.out)


def cmd_eval_pck(args) -> None:
    cfg = _config(args)
    curve = pck(_points(args.pred), _points(args.gt), cfg.pck_thresholds)
    write_pck_csv(curve, args.out)
    for t, v in zip(curve.thresholds, curve.values):
        log.info("PCK@%g = %.4f", t, v)


def cmd_eval_flow(args) -> None:
    _config(args)
    flow = read_flo(_existing(args.flow))
    gt = read_flo(_existing(args.gt))
    rows = [("all", fl_outlier_rate(flow, gt), epe(flow, gt))]
    if args.fg_mask:
        fg = read_mask(_existing(args.fg_mask))
        rows.insert(0, ("fg", fl_outlier_rate(flow, gt, fg), epe(flow, gt, fg)))
        rows.insert(0, ("bg", fl_outlier_rate(flow, gt, ~fg), epe(flow, gt, ~fg)))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "fl", "epe"])
        for name, fl, e in rows:
            w.writerow([name, repr(fl), repr(e)])
            log.info("Fl-%s = %.4f, EPE = %.4f", name, fl, e)


def cmd_synth(args) -> None:
    cfg = _config(args)
    img = read_pnm(_existing(args.image))
    pair = synth_pair(img, cfg.synth_spec())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if img.channels == 1 else ".ppm"
    write_pnm(pair.source, out / f"source{ext}")
    write_pnm(pair.target, out / f"target{ext}")
    cs = pair.correspondences
    cs.ref, cs.tgt = f"source{ext}", f"target{ext}"
    write_correspondences(cs, out / "pairs.corr")
    write_flo(pair.gt_flow, out / "gt.flo")
    tf = pair.transform
    log.info(
        "synthesized pair: scale %.4f, angle %.4f rad, t=(%.3f, %.3f); %d correspondences",
        tf.scale, tf.angle, tf.tx, tf.ty, len(cs),
    )


def cmd_match3d(args) -> None:
    cfg = _config(args)
    ref = VoxelGrid(np.load(_existing(args.ref_volume)), cfg.voxel_size)
    tgt = VoxelGrid(np.load(_existing(args.tgt_volume)), cfg.voxel_size)
    m3 = cfg.match3d_config()
    ref_point = _triple(args.ref_point)
    center = _triple(args.region_center)
    deep_ref = SubvolumeDescriptor(ref, m3.subvolume_edge, cfg.deep_pool)(ref_point)
    shallow_ref = SubvolumeDescriptor(ref, m3.subvolume_edge, cfg.shallow_pool)(ref_point)
    res = match_3d(
        deep_ref,
        shallow_ref,
        SubvolumeDescriptor(tgt, m3.subvolume_edge, cfg.deep_pool),
        SubvolumeDescriptor(tgt, m3.subvolume_edge, cfg.shallow_pool),
        center,
        m3,
    )
    log.info("coarse candidates: %d", res.n_coarse_candidates)
    log.info("fine candidates: %d", res.n_fine_candidates)
    fmt = lambda v: " ".join(repr(float(a)) for a in v)  # noqa: E731
    Path(args.out).write_text(
        f"coarse_candidates {res.n_coarse_candidates}\n"
        f"fine_candidates {res.n_fine_candidates}\n"
        f"coarse_center {fmt(res.coarse_center)}\n"
        f"refined_center {fmt(res.refined_center)}\n"
        f"offset {fmt(res.offset)}\n"
        f"d_coarse {res.d_coarse!r}\n"
        f"d_fine {res.d_fine!r}\n"
    )


def cmd_export_features(args) -> None:
    cfg = _config(args)
    img = read_pnm(_existing(args.image))
    hier = extract_hierarchy(img, cfg.level_configs(), _heads(cfg, args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmap in hier.maps:
        export_feature_map(fmap, out / f"level{fmap.level_id}.hfm")
    log.info("exported %d levels to %s", len(hier.maps), out)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiermatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train embedding heads from correspondence files")
    p.add_argument("correspondences", nargs="+")
    p.add_argument("--loss-out", help="loss CSV (default: <out>.loss.csv)")

    for name, func, help in (
        ("match", cmd_match, "hierarchical matching"),
        ("flow", cmd_flow, "dense optical flow to a .flo file"),
    ):
        p = add(name, func, help)
        p.add_argument("ref")
        p.add_argument("tgt")
        p.add_argument("--heads")
        if name == "match":
            p.add_argument("--queries", help="correspondence file or 'x y' rows; default is dense")

    p = add("eval-pck", cmd_eval_pck, "PCK curve of predicted vs ground-truth points")
    p.add_argument("pred")
    p.add_argument("gt")

    p = add("eval-flow", cmd_eval_flow, "Fl outlier rates and EPE of a flow field")
    p.add_argument("flow")
    p.add_argument("gt")
    p.add_argument("--fg-mask", help="PGM foreground mask (nonzero = foreground)")

    p = add("synth", cmd_synth, "synthesize a warped pair with ground truth into a directory")
    p.add_argument("image")

    p = add("match3d", cmd_match3d, "two-stage subvolume search between .npy voxel grids")
    p.add_argument("ref_volume")
    p.add_argument("tgt_volume")
    p.add_argument("--ref-point", required=True, help="z,y,x")
    p.add_argument("--region-center", required=True, help="z,y,x")

    p = add("export-features", cmd_export_features, "write each hierarchy level as an HFM1 file")
    p.add_argument("image")
    p.add_argument("--heads")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"hiermatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HiermatchError, ConfigError, OSError, ValueError) as exc:
        print(f"hiermatch: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
