"""Command-line entry point: cluster, sample-uv, render, fit, stats."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from ..mesh_binding import TriangleFrame, load_frames, load_obj, mesh_frames
from ..splat_core import DeformedParams, GaussianSet
from ..splatter import Camera, render, save_png
from ..temporal_clustering import DEFAULT_WEIGHTS, cluster_frames
from ..uv_atlas import load_mask_png, rasterize_uv, sample_uv
from .training import ExperimentConfig, ExperimentReport, fit

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _read_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        raise ValidationError("--config is required for this subcommand")
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text()), p.parent
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {p} is not valid JSON: {exc}") from exc


def _path(value: str, base: Path) -> Path:
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ValidationError(f"file not found: {p}")
    return p


def _emit(payload: dict, out: str | None, name: str) -> None:
    text = json.dumps(payload, indent=2)
    if out is None:
        print(text)
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(text)
    print(d / name)


def cmd_cluster(args) -> int:
    cfg, base = _read_config(args.config)
    frames = load_frames(_path(cfg["frames"], base))
    plan = cluster_frames(frames, tuple(cfg.get("weights", DEFAULT_WEIGHTS)), float(cfg.get("var_keep", 0.95)),
                          int(cfg.get("k_min", 5)), int(cfg.get("k_max", 12)),
                          args.seed if args.seed is not None else int(cfg.get("seed", 0)))
    _emit(plan.to_dict(), args.out, "plan.json")
    return EXIT_OK


def cmd_sample_uv(args) -> int:
    cfg, base = _read_config(args.config)
    mesh = load_obj(_path(cfg["mesh"], base))
    bindings = cfg["bindings"]
    if isinstance(bindings, str):
        bindings = json.loads(_path(bindings, base).read_text())
    masks = {k: load_mask_png(_path(v, base)) for k, v in cfg.get("masks", {}).items()}
    atlas = rasterize_uv(mesh, int(cfg.get("resolution", 256)), masks)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    uv = sample_uv(np.asarray(bindings, dtype=np.int64), atlas, mesh, rng_seed=seed)
    _emit({"face_id": list(map(int, bindings)), "uv": uv.tolist(), "overlap_count": atlas.overlap_count},
          args.out, "uv.json")
    return EXIT_OK


def cmd_render(args) -> int:
    """Render Gaussians (world space, or bound to a mesh frame) to a PNG."""
    cfg, base = _read_config(args.config)
    cam_spec = cfg["camera"]
    cam = Camera.from_dict(cam_spec if isinstance(cam_spec, dict) else json.loads(_path(cam_spec, base).read_text()))
    gs = cfg.get("gaussians", [])
    if isinstance(gs, str):
        gs = json.loads(_path(gs, base).read_text())
    g = GaussianSet.from_dict(gs) if gs and len(gs.get("mu", [])) else GaussianSet.empty()
    if "mesh" in cfg and len(g):
        mesh = load_obj(_path(cfg["mesh"], base))
        verts = None
        if "frames" in cfg:
            fid = int(cfg.get("frame_id", 0))
            match = [f for f in load_frames(_path(cfg["frames"], base)) if f.frame_id == fid]
            if not match:
                raise ValidationError(f"frame {fid} not in frames file")
            verts = match[0].vertex_positions
        from ..mesh_binding import lbs_deform

        params = lbs_deform(g, mesh_frames(mesh, verts))
    else:
        params = DeformedParams(g.mu, g.scale, g.rot, g.opacity, g.color)
    image = render(params, cam, retain=False).image
    out = Path(args.out) if args.out else Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    save_png(image, out / cfg.get("output", "render.png"))
    print(out / cfg.get("output", "render.png"))
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    if cfg is None:
        raise ValidationError("--config is required for fit")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    rep = fit(cfg)
    print(f"final PSNR {rep.final_psnr:.3f} dB, {rep.final_total} Gaussians, {len(rep.events)} densify events")
    return EXIT_OK


def cmd_stats(args) -> int:
    paths = list(args.reports)
    if args.config:
        cfg, base = _read_config(args.config)
        paths += [str(_path(p, base)) for p in cfg.get("reports", [])]
    if not paths:
        raise ValidationError("stats needs at least one report")
    reports = []
    for p in paths:
        rp = Path(p)
        if rp.is_dir():
            rp = rp / "report.json"
        if not rp.exists():
            raise ValidationError(f"report not found: {rp}")
        reports.append((str(p), ExperimentReport.from_dict(json.loads(rp.read_text()))))
    regions = sorted({k for _, r in reports for k in r.final_region_counts})
    header = ["report", "schedule", "total", *regions, "psnr"]
    rows = [[name, str(r.config.get("schedule", "")), str(r.final_total),
             *(str(r.final_region_counts.get(k, 0)) for k in regions), f"{r.final_psnr:.2f}"]
            for name, r in reports]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    for row in [header, *rows]:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return EXIT_OK


COMMANDS = {"cluster": cmd_cluster, "sample-uv": cmd_sample_uv, "render": cmd_render, "fit": cmd_fit,
            "stats": cmd_stats}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    parser = argparse.ArgumentParser(prog="splatbind", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    sub.add_parser("cluster", parents=[common], help="cluster frame descriptors into a plan JSON")
    sub.add_parser("sample-uv", parents=[common], help="sample UV coordinates for face bindings")
    sub.add_parser("render", parents=[common], help="render Gaussians to a PNG")
    sub.add_parser("fit", parents=[common], help="run a fitting experiment")
    st = sub.add_parser("stats", parents=[common], help="region-count table of fit reports")
    st.add_argument("reports", nargs="*", help="report.json files or run directories")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
