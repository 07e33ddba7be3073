#!/usr/bin/env python3
"""Render exported CSV artifacts into figures.

A pure view over the files described in FORMATS.md: density/energy heatmaps,
train/test ELBO curves, and q-trajectories over the potential surface. Never
recomputes model quantities; deleting this directory does not affect the
numeric package or its tests.

Usage:
  python plotviz/render.py heatmap GRID_CSV OUT_PNG [--title T]
  python plotviz/render.py curves METRICS_CSV[,LABEL] [...] OUT_PNG [--column test_elbo]
  python plotviz/render.py trajectories TRAJ_CSV POTENTIAL_GRID_CSV OUT_PNG
"""

from __future__ import annotations

import argparse
import csv
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class RenderError(Exception):
    pass


def read_grid(path):
    xs, ys, vals = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RenderError(f"{path}: empty file")
        required = ["x", "y", "value"]
        missing = [c for c in required if c not in header]
        if missing:
            raise RenderError(f"{path}: missing column '{missing[0]}'")
        ix, iy, iv = (header.index(c) for c in required)
        for lineno, row in enumerate(reader, start=2):
            try:
                xs.append(float(row[ix]))
                ys.append(float(row[iy]))
                vals.append(float(row[iv]))
            except (ValueError, IndexError):
                raise RenderError(f"{path}: malformed row {lineno}")
    if not vals:
        raise RenderError(f"{path}: no data rows")
    uxs, uys = np.unique(xs), np.unique(ys)
    if uxs.size * uys.size != len(vals):
        raise RenderError(f"{path}: x,y do not form a complete lattice")
    grid = np.full((uys.size, uxs.size), np.nan)
    xi = np.searchsorted(uxs, xs)
    yi = np.searchsorted(uys, ys)
    grid[yi, xi] = vals
    if not np.all(np.isfinite(grid)):
        raise RenderError(f"{path}: non-finite values in grid")
    return uxs, uys, grid


def cmd_heatmap(args) -> None:
    xs, ys, grid = read_grid(args.grid)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.pcolormesh(xs, ys, grid, shading="auto", cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal")
    if args.title:
        ax.set_title(args.title)
    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    plt.close(fig)


def _read_metrics(path, column):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise RenderError(f"{path}: empty metrics file")
        if column not in reader.fieldnames or "step" not in reader.fieldnames:
            raise RenderError(f"{path}: missing column '{column}'")
        steps, vals = [], []
        for row in reader:
            steps.append(int(row["step"]))
            vals.append(float(row[column]))
    if not steps:
        raise RenderError(f"{path}: no data rows")
    return np.array(steps), np.array(vals)


def cmd_curves(args) -> None:
    if not args.metrics:
        raise RenderError("need at least one metrics file")
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for spec in args.metrics:
        path, _, label = spec.partition(",")
        label = label or path
        steps, vals = _read_metrics(path, args.column)
        ax.plot(steps, vals, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(args.column)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    plt.close(fig)


def cmd_trajectories(args) -> None:
    with open(args.traj, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        qcols = sorted(c for c in cols if c.startswith("q") and c[1:].isdigit())
        if {"traj", "step"} - set(cols) or not qcols:
            raise RenderError(f"{args.traj}: not a trajectory file (traj,step,q*,p* needed)")
        if len(qcols) != 2:
            raise RenderError(f"{args.traj}: trajectory rendering supports d=2 only")
        paths: dict[str, list] = {}
        for row in reader:
            paths.setdefault(row["traj"], []).append(
                (int(row["step"]), float(row["q1"]), float(row["q2"])))
    if not paths:
        raise RenderError(f"{args.traj}: no trajectories")
    xs, ys, grid = read_grid(args.potential)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.pcolormesh(xs, ys, grid, shading="auto", cmap="cividis", alpha=0.85)
    fig.colorbar(im, ax=ax, label="U(q)")
    for rows in paths.values():
        rows.sort()
        q1 = [r[1] for r in rows]
        q2 = [r[2] for r in rows]
        ax.plot(q1, q2, lw=0.8, color="white", alpha=0.8)
        ax.annotate("", xy=(q1[-1], q2[-1]), xytext=(q1[-2] if len(q1) > 1 else q1[-1],
                                                     q2[-2] if len(q2) > 1 else q2[-1]),
                    arrowprops=dict(arrowstyle="->", color="red", lw=0.9))
    ax.set_xlim(xs[0], xs[-1])
    ax.set_ylim(ys[0], ys[-1])
    ax.set_xlabel("q1")
    ax.set_ylabel("q2")
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    plt.close(fig)


def build_parser():
    parser = argparse.ArgumentParser(prog="render", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("heatmap")
    p.add_argument("grid")
    p.add_argument("out")
    p.add_argument("--title", default="")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("curves")
    p.add_argument("metrics", nargs="+", help="metrics CSV path, optionally PATH,LABEL")
    p.add_argument("out")
    p.add_argument("--column", default="test_elbo")
    p.set_defaults(fn=cmd_curves)

    p = sub.add_parser("trajectories")
    p.add_argument("traj")
    p.add_argument("potential")
    p.add_argument("out")
    p.set_defaults(fn=cmd_trajectories)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except RenderError as err:
        print(f"render error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"render error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
