"""Command-line interface: generate, train, render, relight, eval, inspect, diagnose.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .camera import Camera
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import DatasetError, load_dataset, manifest_cameras, read_manifest
from .eikonal import FIELDS, eikonal_residual_oracle, shell_samples
from .gaussians import unsigned_distance_median
from .images import ImageError, atomic_write_bytes, load_environment, read_image, write_hdr, write_png
from .losses import tonemap
from .metrics import channel_rescale, mask_iou, metric_ssim, normal_mae, psnr
from .projection import projection_residuals
from .raster import rasterize
from .shading import EnvironmentLight, shade_deferred
from .trainer import TrainConfig, View, desk_config, train

log = logging.getLogger("sdfsplat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PRESETS = {"paper": TrainConfig, "desk": desk_config}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


# --- shared helpers ---------------------------------------------------------------

def render_view(ck: Checkpoint, cam: Camera, env: EnvironmentLight | None = None):
    """Linear radiance over black, display image and the G-buffer for one camera."""
    gb = rasterize(ck.cloud, cam, distortion=ck.config.distortion_form)
    lin = shade_deferred(gb, env or ck.env, cam, printed_form=ck.config.printed_split_sum)
    return lin, tonemap(lin), gb


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _cameras(manifest: str, width, height) -> list[tuple[str, Camera]]:
    return manifest_cameras(_existing(manifest, "camera manifest"), width, height)


def _write_float(path: Path, img: np.ndarray) -> None:
    write_hdr(path.with_suffix(".pfm"), img)


def _write_csv(path: Path | None, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        atomic_write_bytes(path, text.encode())
    return text


def _fmt(x) -> str:
    return x if isinstance(x, str) else f"{x:.6g}"


# --- subcommands -----------------------------------------------------------------------

def cmd_generate(a) -> int:
    from .synthetic import generate_synthetic_scene
    out = generate_synthetic_scene(a.out, a.kind, a.views, a.resolution, a.roughness, a.metallic,
                                   tuple(a.albedo), a.env, a.relight_env, a.test_views, a.samples,
                                   a.env_resolution, a.fov, a.distance, a.radius, a.seed)
    print(f"wrote {out}")
    return EXIT_OK


def _train_config(a, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else PRESETS[a.preset]()
    if a.config:
        cfg = TrainConfig.from_file(_existing(a.config, "config file"), cfg)
    overrides = {k: v for k, v in vars(a).items() if k.startswith("cfg_") and v is not None}
    if overrides:
        cfg = TrainConfig.from_mapping({k[4:]: v for k, v in overrides.items()}, cfg)
    return cfg


def cmd_train(a) -> int:
    out = Path(a.out)
    resume = load_checkpoint(_existing(a.resume, "checkpoint")) if a.resume else None
    cfg = _train_config(a, resume.config if resume else None)
    views = [View(v.rgb, v.mask, v.camera, v.name) for v in load_dataset(_existing(a.data, "dataset"), a.split)]
    env_init = None
    if a.env:
        env_init = load_environment(_existing(a.env, "environment map"), cfg.env_resolution)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "config.txt", cfg.to_text().encode())

    def checkpoint(cloud, env, state, final):
        ck = Checkpoint(cloud, env, state, cfg)
        name = "final.ckpt" if final else f"ckpt_{state.iteration:06d}.ckpt"
        save_checkpoint(out / name, ck)
        log.info("wrote %s", out / name)

    def progress(row):
        if row["iteration"] % a.log_every == 0:
            log.info("iter %d  loss %.5g  primitives %d  gamma %.4g  |s|_m %.4g", row["iteration"],
                     row["total"], row["primitives"], row["gamma"], row["s_median"])

    start = (resume.cloud, resume.env, resume.state) if resume else None
    train(views, cfg, env_init, out / "loss.csv", checkpoint, progress, start)
    from .report import plot_loss_curves, read_loss_csv
    plot_loss_curves(read_loss_csv(out / "loss.csv"), out / "loss_curves.png")
    print(f"wrote {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_render(a) -> int:
    ck = load_checkpoint(_existing(a.ckpt, "checkpoint"))
    out = Path(a.out)
    for name, cam in _cameras(a.camera, a.width, a.height):
        lin, img, _ = render_view(ck, cam)
        write_png(out / f"{name}.png", img)
        if a.float:
            _write_float(out / name, lin)
    print(f"wrote renders to {out}")
    return EXIT_OK


def cmd_relight(a) -> int:
    ck = load_checkpoint(_existing(a.ckpt, "checkpoint"))
    env = EnvironmentLight(load_environment(_existing(a.env, "environment map"), ck.env.resolution),
                           ck.env.levels, ck.env.samples, ck.env.seed).prefilter()
    out = Path(a.out)
    refs = {}
    if a.reference:
        ref_manifest = _existing(a.reference, "reference manifest")
        meta = read_manifest(ref_manifest)
        for fr in meta["frames"]:
            p = ref_manifest.parent / fr["file_path"]
            p = p if p.suffix else p.with_suffix(".png")
            refs[Path(fr["file_path"]).stem] = read_image(p)
    if a.camera:
        cams = _cameras(a.camera, a.width, a.height)
    elif a.reference:
        cams = _cameras(a.reference, a.width, a.height)
    else:
        raise UsageError("relight: give --camera, --reference, or both")
    rows = []
    for name, cam in cams:
        lin, img, _ = render_view(ck, cam, env)
        row = [name]
        ref = refs.get(name)
        if ref is not None:
            mask = ref[..., 3] if ref.shape[2] == 4 else np.ones(ref.shape[:2])
            ref_rgb = ref[..., :3] * mask[..., None]
            # rescale in linear space, per image and channel
            k = channel_rescale(lin, ref_rgb ** 2.2, mask)
            lin = lin * k
            img = tonemap(lin)
            row += [*k, psnr(img, ref_rgb)]
        write_png(out / f"{name}.png", img)
        if a.float:
            _write_float(out / name, lin)
        rows.append(row)
    if refs:
        text = _write_csv(out / "relight.csv", ["view", "scale_r", "scale_g", "scale_b", "psnr"],
                          [[r[0]] + [_fmt(x) for x in r[1:]] for r in rows])
        print(text, end="")
    print(f"wrote relit renders to {out}")
    return EXIT_OK


def _find_normals(root: Path, split: str, name: str) -> Path | None:
    for cand in (root / f"{split}_{name}.npy", root / f"{name}.npy"):
        if cand.exists():
            return cand
    return None


def cmd_eval(a) -> int:
    ck = load_checkpoint(_existing(a.ckpt, "checkpoint"))
    views = load_dataset(_existing(a.data, "dataset"), a.split)
    nroot = _existing(a.gt_normals, "normal directory") if a.gt_normals else None
    rows = []
    for v in views:
        _, img, gb = render_view(ck, v.camera)
        gt = v.rgb * v.mask[..., None]
        row = [v.name, psnr(img, gt), metric_ssim(img, gt), mask_iou(gb.alpha, v.mask)]
        if nroot is not None:
            f = _find_normals(nroot, a.split, v.name)
            if f is None:
                raise DatasetError(f"no ground-truth normals for view {v.name} in {nroot}")
            n_gt = np.load(f)
            sel = (v.mask > 0.5) & (gb.alpha > 0.5)
            row.append(normal_mae(gb.normal, n_gt, sel) if sel.any() else float("nan"))
        rows.append(row)
    header = ["view", "psnr", "ssim", "iou"] + (["normal_mae"] if nroot is not None else [])
    means = ["mean"] + [float(np.nanmean([r[i] for r in rows])) for i in range(1, len(header))]
    text = _write_csv(Path(a.out) if a.out else None, header,
                      [[_fmt(x) for x in r] for r in rows + [means]])
    print(text, end="")
    return EXIT_OK


MAPS = ("albedo", "roughness", "metallic", "normal", "depth", "alpha")


def cmd_inspect(a) -> int:
    from .report import plot_decomposition
    ck = load_checkpoint(_existing(a.ckpt, "checkpoint"))
    out = Path(a.out)
    for name, cam in _cameras(a.camera, a.width, a.height):
        _, img, gb = render_view(ck, cam)
        covered = gb.alpha > 0.5
        d = gb.depth[covered]
        lo, hi = (float(d.min()), float(d.max())) if d.size else (0.0, 1.0)
        maps = {
            "albedo": gb.albedo,
            "roughness": gb.roughness,
            "metallic": gb.metallic,
            "normal": np.where(covered[..., None], (gb.normal + 1.0) * 0.5, 0.0),
            "depth": np.where(covered, (gb.depth - lo) / max(hi - lo, 1e-12), 0.0),
            "alpha": gb.alpha,
        }
        for key in MAPS:
            write_png(out / f"{name}_{key}.png", maps[key])
            if a.float:
                m = maps[key] if maps[key].ndim == 3 else np.repeat(maps[key][..., None], 3, -1)
                _write_float(out / f"{name}_{key}", m)
        plot_decomposition(gb, out / f"{name}_decomposition.png", render=img)
    print(f"wrote maps to {out}")
    return EXIT_OK


def _histogram_lines(values, bins=10, lo=0.0, hi=1.0, width=40) -> list[str]:
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    top = max(int(counts.max()), 1)
    return [f"  [{edges[i]:.2f}, {edges[i + 1]:.2f}) {counts[i]:8d} "
            + "#" * int(round(width * counts[i] / top)) for i in range(bins)]


def cmd_diagnose(a) -> int:
    ck = load_checkpoint(_existing(a.ckpt, "checkpoint"))
    c = ck.cloud
    lines = ["SDF statistics",
             f"  primitives        {len(c)}",
             f"  iteration         {ck.state.iteration}",
             f"  gamma             {c.gamma:.6g}",
             f"  |s| median        {unsigned_distance_median(c.sdf_values):.6g}",
             f"  s mean / std      {c.sdf_values.mean():.6g} / {c.sdf_values.std():.6g}",
             f"  median loss gate  {'active' if ck.state.median_active else 'closed'}",
             f"  projection gate   {'active' if ck.state.projection_active else 'waiting'}",
             "opacity histogram"] + _histogram_lines(c.opacity)
    if a.data:
        lines += ["projection residuals (per view)",
                  f"  {'view':<16}{'primitives':>11}{'inliers':>9}{'mean':>11}{'median':>11}"]
        for v in load_dataset(_existing(a.data, "dataset"), a.split):
            gb = rasterize(c, v.camera)
            b = projection_residuals(c, gb, v.camera)
            r = b.residual
            inl = b.inliers(ck.config.epsilon)
            lines.append(f"  {v.name:<16}{len(b):>11d}{inl.mean() if len(b) else 0:>9.3f}"
                         f"{r.mean() if len(b) else 0:>11.4g}{np.median(r) if len(b) else 0:>11.4g}")
    lines += [f"projection oracle on analytic fields (mu_proj = mu - f grad f/|grad f|, "
              f"{a.samples} samples)",
              f"  {'field':<18}{'mean|grad f|':>13}{'mean|f(mu)|':>13}{'mean|f(proj)|':>15}"
              f"{'max|f(proj)|':>14}{'slope':>8}"]
    pts = shell_samples(a.samples, 0.6, 1.4, seed=0)
    for name, f in FIELDS.items():
        st = eikonal_residual_oracle(f, pts)
        t = dict(st.table())
        lines.append(f"  {name:<18}{t['mean |grad f|']:>13.4g}{t['mean |f(mu)|']:>13.4g}"
                     f"{t['mean |f(mu_proj)|']:>15.4g}{t['max |f(mu_proj)|']:>14.4g}"
                     f"{st.loglog_slope():>8.3f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if a.out:
        from .report import plot_opacity_histogram
        out = Path(a.out)
        atomic_write_bytes(out / "diagnose.txt", text.encode())
        plot_opacity_histogram(c, out / "opacity_histogram.png")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def _add_camera_size(p):
    p.add_argument("--width", type=int, help="image width when the manifest has no 'w' key")
    p.add_argument("--height", type=int, help="image height when the manifest has no 'h' key")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sdfsplat", description="Discretized-SDF Gaussian splatting for "
                 "inverse rendering.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("generate", help="write a ray-traced synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("sphere", "two-spheres"), default="sphere")
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--test-views", type=int, default=4)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--roughness", type=float, default=0.6)
    p.add_argument("--metallic", type=float, default=0.0)
    p.add_argument("--albedo", type=float, nargs=3, default=(0.80, 0.45, 0.25))
    p.add_argument("--env", choices=("gradient", "side"), default="gradient")
    p.add_argument("--relight-env", choices=("gradient", "side"), default="side")
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--env-resolution", type=int, default=64)
    p.add_argument("--fov", type=float, default=0.7, help="horizontal field of view (radians)")
    p.add_argument("--distance", type=float, default=4.5)
    p.add_argument("--radius", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="optimise a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory (transforms_<split>.json)")
    p.add_argument("--env", help="initial environment (equirect .hdr/.pfm or face directory); "
                   "default: constant env_init")
    p.add_argument("--config", help="key = value file with TrainConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper",
                   help="base schedule the config file and flags are applied to "
                   "(ignored with --resume, which starts from the checkpoint's config)")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--log-every", type=int, default=100)
    g = p.add_argument_group("config overrides (any TrainConfig field)")
    for name, typ in TrainConfig.field_types().items():
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar=typ.__name__.upper())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render novel views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--camera", required=True, help="camera manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--float", action="store_true", help="also write linear float32 .pfm images")
    _add_camera_size(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", help="render under a new environment")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--camera", help="camera manifest (default: the reference manifest)")
    p.add_argument("--reference", help="manifest of reference images; enables per-channel rescale")
    p.add_argument("--float", action="store_true")
    _add_camera_size(p)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("eval", help="PSNR / SSIM / IoU / normal MAE table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--gt-normals", help="directory of <split>_<view>.npy world normal maps")
    p.add_argument("--out", help="CSV file to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="write decomposed G-buffer maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--float", action="store_true")
    _add_camera_size(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("diagnose", help="SDF statistics and projection tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset for per-view projection residuals")
    p.add_argument("--split", default="train")
    p.add_argument("--samples", type=int, default=2000, help="samples for the analytic oracle")
    p.add_argument("--out", help="directory for diagnose.txt and the opacity histogram")
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
        if a.command is None:
            raise UsageError(ap.format_help())
        logging.basicConfig(level=logging.DEBUG if a.verbose else logging.INFO,
                            format="%(levelname)s %(message)s")
        return a.func(a)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError) as e:
        if isinstance(e, (DatasetError, CheckpointError)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DATA
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ImageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
