"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as sio
from .ply import PlyError

logger = logging.getLogger("splatwild")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    iterations: int = 7000
    t_max: Optional[int] = None          # defaults to iterations
    activation_iter: int = 500
    lambda_local: float = 0.4
    lambda_global: float = 2.8
    lambda_dssim: float = 0.2
    stats_mode: str = "pixel"
    spread: str = "variance"
    masking: bool = True
    use_global: bool = True
    n: int = 80
    k: int = 3
    k_neighbors: int = 10
    guide: bool = False
    tau: float = 3.5
    gamma1: float = 0.003
    gamma2: int = 2
    gamma3: float = 0.075
    beta: float = 1.0
    densify_interval: int = 100
    lr_centers: float = 0.004
    lr_log_scales: float = 0.005
    lr_quats: float = 0.001
    lr_opacity_logits: float = 0.05
    lr_colors: float = 0.01
    init_spacing: float = 0.25
    init_scale: float = 0.12
    init_opacity: float = 0.5
    init_depth: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    data: str = ""                       # directory written by synth

    def resolved(self) -> "RunConfig":
        if self.t_max is None:
            return dataclasses.replace(self, t_max=self.iterations)
        return self

    def lines(self) -> list[str]:
        return [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def _coerce(name: str, raw: str, current):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if "bool" in str(ftype):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "tuple" in str(ftype):
            return sio.floats(raw)
        if "int" in str(ftype):
            if raw.strip().lower() in ("none", ""):
                return None
            return int(raw)
        if "float" in str(ftype):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise sio.DataError(f"bad value for {name}: {raw!r}") from None


def load_run_config(path: Optional[str], overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    names = {f.name for f in fields(RunConfig)}
    values: dict[str, str] = {}
    if path:
        parsed = sio.read_config(path)
        for section, kv in parsed.items():
            for k, v in kv.items():
                if k not in names:
                    raise sio.DataError(f"{path}: unknown config key {k!r}" + (f" in [{section}]" if section else ""))
                values[k] = v
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (p.strip() for p in item.split("=", 1))
        if k not in names:
            raise UsageError(f"unknown config key {k!r}")
        values[k] = v
    for k, v in values.items():
        setattr(cfg, k, _coerce(k, v, getattr(cfg, k)))
    return cfg


def _print_config(cfg, out=None, title="config"):
    out = out or sys.stderr
    print(f"# resolved {title}", file=out)
    lines = cfg.lines() if hasattr(cfg, "lines") else [f"{k} = {v}" for k, v in cfg.items()]
    for ln in lines:
        print(f"#   {ln}", file=out)
    seed = cfg.seed if hasattr(cfg, "seed") else cfg.get("seed")
    print(f"# seed = {seed}", file=out)


def _threads() -> int:
    raw = os.environ.get("SPLATWILD_THREADS")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPLATWILD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SPLATWILD_THREADS must be a positive integer, got {raw!r}")
    return n


# ---- scene configs ----

def sequence_params_from_config(parsed: dict[str, dict[str, str]], seed: Optional[int] = None):
    from .fixtures import DistractorParams, SequenceParams

    p = SequenceParams()
    top = dict(parsed.get("", {}))
    top.pop("preset", None)
    names = {f.name: f for f in fields(SequenceParams) if f.name != "distractors"}
    for k, v in top.items():
        if k not in names:
            raise sio.DataError(f"unknown scene key {k!r}")
        cur = getattr(p, k)
        try:
            if isinstance(cur, bool):
                val = v.lower() in ("1", "true", "yes", "on")
            elif isinstance(cur, int):
                val = int(v)
            else:
                val = float(v)
        except ValueError:
            raise sio.DataError(f"bad value for scene key {k}: {v!r}") from None
        setattr(p, k, val)
    for section, kv in parsed.items():
        if not section:
            continue
        kind, _, name = section.partition(" ")
        if kind != "distractor" or not name:
            raise sio.DataError(f"unknown scene section [{section}]")
        try:
            d = DistractorParams(
                name=name,
                color=sio.floats(kv["color"]),
                start=sio.floats(kv["start"]),
                end=sio.floats(kv["end"]),
                length=float(kv.get("length", 0.55)),
                width=float(kv.get("width", 0.3)),
                park_frame=int(kv["park_frame"]) if "park_frame" in kv else None,
            )
        except KeyError as exc:
            raise sio.DataError(f"[{section}] is missing {exc.args[0]!r}") from None
        except ValueError as exc:
            raise sio.DataError(f"[{section}]: {exc}") from None
        p.distractors.append(d)
    if seed is not None:
        p.seed = seed
    return p


# ---- subcommands ----

def cmd_synth(args) -> int:
    from .fixtures import SequenceParams
    from .scene import generate_synthetic_sequence, static_only_frames, track_store_from_sequence
    from .fixtures import dynamic_sequence

    if args.config:
        p = sequence_params_from_config(sio.read_config(args.config), args.seed)
    else:
        p = SequenceParams(seed=args.seed if args.seed is not None else 0)
    if args.stationary:
        p.stationary_half = True
    _print_config({k: v for k, v in dataclasses.asdict(p).items()}, title="scene")
    spec = dynamic_sequence(p)
    frames = generate_synthetic_sequence(spec)
    out = Path(args.out)
    sio.write_frames(out, frames)
    store = track_store_from_sequence(frames)
    sio.write_track_store(out / "tracks", store.tracks, len(frames))
    clean = out / "clean"
    clean.mkdir(exist_ok=True)
    for f, img in zip(frames, static_only_frames(spec)):
        sio.write_png8(clean / f"frame_{f.index:04d}.png", img)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_sample_points(args) -> int:
    from .pointcloud import SamplingConfig, read_ply, sample, write_ply

    cfg = SamplingConfig(n=args.n, k=args.k, k_neighbors=args.neighbors, normalization=args.normalization,
                         workers=_threads())
    _print_config({**dataclasses.asdict(cfg), "seed": "n/a"}, title="sampling")
    cloud = read_ply(args.input)
    res = sample(cloud, cfg)
    write_ply(args.output, res.cloud)
    print(f"kept {len(res.indices)} of {len(cloud)} points "
          f"(grid {res.grid.dims[0]}x{res.grid.dims[1]}x{res.grid.dims[2]}, voxel {res.grid.voxel_length:.6g})")
    return 0


def _init_gaussians(cfg: RunConfig, frames):
    """Lattice of gray Gaussians covering every camera footprint at ``init_depth``."""
    from .scene import GaussianSet, logit

    lo = np.full(2, np.inf)
    hi = np.full(2, -np.inf)
    for f in frames:
        cam = f.camera
        half = np.array([cam.width, cam.height]) / cam.pixels_per_unit / 2.0
        # camera-space footprint corners back to world
        for sx in (-1, 1):
            for sy in (-1, 1):
                pc = np.array([sx * half[0], sy * half[1], cfg.init_depth])
                w = cam.rotation.T @ (pc - cam.translation)
                lo = np.minimum(lo, w[:2])
                hi = np.maximum(hi, w[:2])
    s = cfg.init_spacing
    xs = np.arange(lo[0] + s / 2, hi[0], s)
    ys = np.arange(lo[1] + s / 2, hi[1], s)
    gx, gy = np.meshgrid(xs, ys)
    n = gx.size
    rng = np.random.default_rng(cfg.seed)
    centers = np.c_[gx.ravel(), gy.ravel(), np.full(n, cfg.init_depth)]
    centers[:, :2] += rng.uniform(-0.08 * s, 0.08 * s, (n, 2))
    return GaussianSet(centers, np.tile(np.log([cfg.init_scale, cfg.init_scale, cfg.init_scale / 2]), (n, 1)),
                       np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), np.full(n, float(logit(cfg.init_opacity))),
                       np.full((n, 3), 0.5))


def _build_masker(cfg: RunConfig, frames, data_dir: Path, keep_history=False):
    from .masking import AdaptiveMasker, MaskingConfig

    mcfg = MaskingConfig(lambda_dssim=cfg.lambda_dssim, lambda_local=cfg.lambda_local,
                         lambda_global=cfg.lambda_global, t_max=cfg.t_max, activation_iter=cfg.activation_iter,
                         stats_mode=cfg.stats_mode, spread=cfg.spread, use_global=cfg.use_global)
    try:
        mcfg.validate()
    except ValueError as exc:
        raise sio.DataError(str(exc)) from None
    store = None
    if cfg.use_global and (data_dir / "tracks" / "manifest.txt").exists():
        store = sio.read_track_store(data_dir / "tracks")
    elif cfg.use_global:
        logger.warning("no track store under %s; global masking disabled", data_dir)
    return AdaptiveMasker(frames, mcfg, store, keep_history=keep_history)


def _train_config(cfg: RunConfig):
    from .train import TrainConfig

    return TrainConfig(iterations=cfg.iterations, lr_centers=cfg.lr_centers, lr_log_scales=cfg.lr_log_scales,
                       lr_quats=cfg.lr_quats, lr_opacity_logits=cfg.lr_opacity_logits, lr_colors=cfg.lr_colors,
                       lambda_dssim=cfg.lambda_dssim, background=tuple(cfg.background), seed=cfg.seed)


def cmd_train(args) -> int:
    from . import voxelguide as vg
    from .pointcloud import build_grid
    from .train import render_all, train

    cfg = load_run_config(args.config, args.set)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.seed is not None:
        cfg.seed = args.seed
    if args.guide:
        cfg.guide = True
    if args.no_mask:
        cfg.masking = False
    if args.data:
        cfg.data = args.data
    if not cfg.data:
        raise UsageError("train needs --data or a data key in the config")
    cfg = cfg.resolved()
    _print_config(cfg)
    data = Path(cfg.data)
    frames = sio.read_frames(data)
    if not frames:
        raise sio.DataError(f"{data}: no frames")
    init = sio.read_gaussians(args.init) if args.init else _init_gaussians(cfg, frames)
    masker = _build_masker(cfg, frames, data) if cfg.masking else None
    guide = gcfg = None
    if cfg.guide:
        gcfg = vg.GuideConfig(tau=cfg.tau, gamma1=cfg.gamma1, gamma2=cfg.gamma2, gamma3=cfg.gamma3,
                              beta=cfg.beta, densify_interval=cfg.densify_interval)
        grid = build_grid(init.centers, cfg.n)
        guide = vg.assign_initial(init, grid)
    res = train(init, frames, _train_config(cfg), mask_provider=masker, guide=guide, guide_config=gcfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write_log(out / "log.csv")
    sio.write_gaussians(out / "gaussians.ply", res.gaussians)
    renders = render_all(res.gaussians, frames, np.asarray(cfg.background))
    (out / "renders").mkdir(exist_ok=True)
    for f, img in zip(frames, renders):
        sio.write_png8(out / "renders" / f"frame_{f.index:04d}.png", img)
    if masker is not None:
        (out / "masks").mkdir(exist_ok=True)
        for f, m in zip(frames, masker.final_masks(cfg.iterations, renders)):
            sio.write_png8(out / "masks" / f"mask_{f.index:04d}.png", m)
    if args.dump_guide:
        if guide is None:
            raise UsageError("--dump-guide needs the voxel guide (--guide or guide = true)")
        with open(args.dump_guide, "w") as fh:
            fh.write("i\tj\tk\tmembers\tmean_opacity\talive\n")
            for ijk, count, mean_op, alive in guide.snapshot(res.gaussians):
                fh.write(f"{ijk[0]}\t{ijk[1]}\t{ijk[2]}\t{count}\t{mean_op!r}\t{int(alive)}\n")
    last = res.log[-1] if res.log else None
    if last:
        print(f"done: {cfg.iterations} iterations, {len(res.gaussians)} Gaussians, last l1 {last.l1:.6f}")
    else:
        print(f"done: 0 iterations, {len(res.gaussians)} Gaussians")
    return 0


def cmd_mask_debug(args) -> int:
    from .masking import local_masks
    from .renderer import render_set

    cfg = load_run_config(args.config, args.set)
    if args.iteration is not None:
        cfg.iterations = max(cfg.iterations, args.iteration)
    cfg = cfg.resolved()
    _print_config(cfg)
    data = Path(args.data)
    frames = sio.read_frames(data)
    gs = sio.read_gaussians(args.gaussians) if args.gaussians else _init_gaussians(cfg, frames)
    masker = _build_masker(cfg, frames, data)
    it = args.iteration if args.iteration is not None else cfg.activation_iter
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for f in frames:
        img = render_set(gs, f.camera, np.asarray(cfg.background)).image
        resid, table, st, t_local, t_global = masker.analyze(it, f.index, img)
        sel = local_masks(table, t_local)
        sio.write_rmap(out / f"residual_{f.index:04d}.rmap", resid.values)
        with open(out / f"objects_{f.index:04d}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["object_id", "mean_residual", "area", "local", "global_candidate"])
            for oid, r, a in zip(table.ids, table.mean_residual, table.area):
                w.writerow([int(oid), repr(float(r)), int(a), int(int(oid) in sel), int(r > t_global and oid != 0)])
        masker.state.local_sets[f.index] = sel
        from .masking import final_mask
        sio.write_png8(out / f"mask_{f.index:04d}.png", final_mask(masker.state, f.index, f.seg))
        rows.append([it, f.index, repr(st.expectation), repr(st.variance), repr(t_local), repr(t_global), len(sel)])
    with open(out / "thresholds.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "frame", "expectation", "variance", "t_local", "t_global", "n_local"])
        w.writerows(rows)
    print(f"wrote mask debug for {len(frames)} frames to {out}")
    return 0


def cmd_align_plan(args) -> int:
    from .align import plan_windows

    _print_config({"frames": args.frames, "batch": args.batch, "seed": "n/a"}, title="alignment plan")
    try:
        windows = plan_windows(args.frames, args.batch)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print("start\tindices\tfixed_prefix")
    for w in windows:
        print(f"{w.start}\t{','.join(map(str, w.frame_indices))}\t{w.fixed_prefix}")
    return 0


def cmd_align_run(args) -> int:
    from .align import random_truth, run_alignment, synthetic_predictor, write_trajectory

    _print_config({"frames": args.frames, "batch": args.batch, "seed": args.seed}, title="alignment")
    truth = random_truth(args.frames, seed=args.seed)
    try:
        res = run_alignment(list(range(args.frames)), args.batch, synthetic_predictor(truth))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_trajectory(args.out, res.poses)
    print(f"aligned {len(res.poses)} frames, {len(res.points)} points")
    return 0


def cmd_metrics(args) -> int:
    from .metrics import mask_iou, psnr, ssim_mean

    _print_config({"pred": args.pred, "gt": args.gt, "seed": "n/a"}, title="metrics")
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(str(d))
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    if not names:
        raise sio.DataError(f"{pred_dir}: no PNG files")
    w = csv.writer(sys.stdout, lineterminator="\n")
    header = ["frame", "psnr", "ssim"]
    if args.pred_masks:
        header.append("mask_iou")
    w.writerow(header)
    ps, ss, ious = [], [], []
    for name in names:
        a = sio.read_png8(pred_dir / name)
        b = sio.read_png8(gt_dir / name)
        p, s = psnr(a, b), ssim_mean(a, b)
        row = [name, "inf" if math.isinf(p) else repr(p), repr(s)]
        ps.append(p)
        ss.append(s)
        if args.pred_masks:
            stem = name.split("_", 1)[-1]
            iou = mask_iou(sio.read_mask_png(Path(args.pred_masks) / f"mask_{stem}"),
                           sio.read_mask_png(Path(args.gt_masks or args.gt) / f"gt_{stem}"))
            ious.append(iou)
            row.append(repr(iou))
        w.writerow(row)
    finite = [p for p in ps if not math.isinf(p)]
    mean_p = float(np.mean(finite)) if finite else math.inf
    agg = ["mean", "inf" if math.isinf(mean_p) else repr(mean_p), repr(float(np.mean(ss)))]
    if args.pred_masks:
        agg.append(repr(float(np.mean(ious))))
    w.writerow(agg)
    return 0


def cmd_render(args) -> int:
    from .renderer import render_set

    _print_config({"gaussians": args.gaussians, "data": args.data, "seed": "n/a"}, title="render")
    gs = sio.read_gaussians(args.gaussians)
    frames = sio.read_frames(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bg = np.asarray(sio.floats(args.background)) if args.background else np.zeros(3)
    for f in frames:
        sio.write_png8(out / f"frame_{f.index:04d}.png", render_set(gs, f.camera, bg).image)
    print(f"rendered {len(frames)} frames to {out}")
    return 0


# ---- parser ----

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="splatwild", description="Distractor-robust Gaussian splatting on synthetic aerial scenes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dynamic sequence")
    p.add_argument("--config", help="scene config (key = value, [distractor NAME] sections)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--stationary", action="store_true", help="first distractor parks halfway through")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample-points", help="FPFH-scored voxel sampling of a PLY cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--n", type=int, default=80)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--neighbors", type=int, default=10)
    p.add_argument("--normalization", choices=["l1", "minmax"], default="l1")
    p.set_defaults(func=cmd_sample_points)

    p = sub.add_parser("train", help="masked training with optional voxel guide")
    p.add_argument("--config")
    p.add_argument("--data", help="directory written by synth (overrides the config's data key)")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="initial Gaussians PLY")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--guide", action="store_true")
    p.add_argument("--no-mask", action="store_true")
    p.add_argument("--dump-guide", metavar="PATH", help="write the final voxel guide state as TSV")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mask-debug", help="dump residuals, thresholds and masks for one iteration")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gaussians", help="Gaussians PLY to render (default: initial lattice)")
    p.add_argument("--iteration", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_mask_debug)

    p = sub.add_parser("align-plan", help="print the alignment window table")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.set_defaults(func=cmd_align_plan)

    p = sub.add_parser("align-run", help="progressive alignment with the synthetic oracle")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align_run)

    p = sub.add_parser("metrics", help="PSNR / SSIM per frame plus the mean")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-masks")
    p.add_argument("--gt-masks")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("render", help="render a Gaussians PLY from the cameras of a data directory")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--background")
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(_threads()):
            return args.func(args)
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: missing file {exc.filename or exc}", file=sys.stderr)
        return 2
    except (sio.DataError, PlyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
