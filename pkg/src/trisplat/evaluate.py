"""Evaluation: geometric fidelity (Chamfer), plane counts per LoD, and
held-out photometric quality."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import MissingGroundTruth
from .losses import psnr
from .planes import LodSchedule, chamfer_distance, extract_lod_planes, sample_oriented_points
from .renderer import RenderSettings
from .sceneio import SceneBundle
from .soup import TriangleSoup
from .surfels import render_appearance, spawn_gaussians


def evaluate(
    bundle: SceneBundle,
    soup: TriangleSoup,
    settings: RenderSettings | None = None,
    sample_density: float = 2000.0,
    schedule: LodSchedule | None = None,
    seed: int = 0,
    extract: bool = True,
) -> dict:
    """Full evaluation report for an optimized soup against a bundle.

    Chamfer distance (reported in scene units and cm) compares oriented
    samples of the soup with the bundle's ground-truth cloud; plane counts
    come from the LoD extraction on the sampled cloud; PSNR averages the
    appearance render over held-out views.

    Raises:
        MissingGroundTruth: when the bundle has no ground-truth cloud.
    """
    if bundle.gt_points is None:
        raise MissingGroundTruth("bundle carries no ground-truth point cloud")
    settings = settings or RenderSettings()
    schedule = schedule or LodSchedule()
    cloud = sample_oriented_points(soup, sample_density, rng=seed)
    report: dict = {
        "triangles": len(soup),
        "soup_samples": len(cloud),
        "gt_samples": int(bundle.gt_points.shape[0]),
    }
    cd = chamfer_distance(cloud.points, bundle.gt_points)
    report["chamfer"] = cd
    report["chamfer_cm"] = cd * 100.0

    if extract:
        extraction = extract_lod_planes(cloud, schedule)
        report["plane_counts"] = extraction.counts()
        report["lod_schedule"] = schedule.describe()

    test_cams = bundle.test_cameras()
    if test_cams:
        surfels = spawn_gaussians(soup)
        vals = []
        for cam in test_cams:
            target = render_appearance(surfels, cam, settings)
            vals.append(psnr(target.color, bundle.images[cam.id]))
        report["psnr_heldout"] = float(np.mean(vals))
        report["psnr_per_view"] = {c.id: v for c, v in zip(test_cams, vals)}
    return report


def report_text(report: dict) -> str:
    lines = [f"triangles: {report['triangles']}"]
    lines.append(
        f"chamfer: {report['chamfer']:.6f} units ({report['chamfer_cm']:.3f} cm) "
        f"[{report['soup_samples']} vs {report['gt_samples']} samples]"
    )
    if "plane_counts" in report:
        counts = report["plane_counts"]
        lines.append(
            "planes: "
            + ", ".join(f"LoD{i}={counts[f'lod{i}']}" for i in range(3))
        )
        lines.append("lod schedule (pass: eps_frac / min_inliers / normal_thresh):")
        for row in report["lod_schedule"]:
            lines.append(
                f"  pass {row['pass']} (LoD{row['lod']}): "
                f"{row['epsilon_frac']} / {row['min_inliers']} / {row['normal_threshold']}"
            )
    if "psnr_heldout" in report:
        lines.append(f"held-out PSNR: {report['psnr_heldout']:.2f} dB")
    return "\n".join(lines)


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, default=float) + "\n")
