#!/usr/bin/env python3
"""Render a learned weight map as a heatmap PNG, optionally with the AOI.

Usage: python scripts/plot_weight_map.py WMAP_FILE OUT_PNG [--aoi AOI_PGM]
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from crowdcalib.calibration import PoolMode, pool, read_weight_map
from crowdcalib.ingest import read_mask_pgm


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("wmap")
    ap.add_argument("out")
    ap.add_argument("--aoi", help="camera AOI PGM to outline pooled platform cells")
    opts = ap.parse_args()

    wm = read_weight_map(Path(opts.wmap).read_text())
    fig, ax = plt.subplots(figsize=(8, 5))
    im = ax.imshow(wm.values, cmap="viridis")
    fig.colorbar(im, ax=ax, label="weight")
    title = f"{wm.camera}  {wm.prows}x{wm.pcols} blocks ({wm.p}x{wm.q} px, {wm.pool_mode})"
    if opts.aoi:
        aoi = read_mask_pgm(Path(opts.aoi).read_bytes())
        pooled = pool(aoi, wm.p, wm.q, PoolMode.MEAN).values
        ax.contour(pooled, levels=[0.999], colors="white", linewidths=0.8)
        title += ", AOI outlined"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(opts.out, dpi=150)
    print(f"wrote {opts.out}")


if __name__ == "__main__":
    main()
