"""Two-stage coarse-to-fine training of the triangle soup.

The coarse stage fits triangle geometry to calibrated depth/normal priors.
The fine stage renders appearance surfels alongside the triangles and
optimizes both: high-frequency image regions supervise the triangles with
the surfel-rendered maps, the rest stays on the priors, the photometric term
trains the surfels, and density control (split / prune / entropy) runs on
its configured cadences. Normal orientation runs once at the end of the
fine stage.

Training state (parameters, optimizer moments, RNG, permutation cursor) can
be checkpointed and resumed bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .calibration import calibrate_depth_ransac
from .control import (
    ContributionStats,
    DensityConfig,
    orient_normals,
    prune_pass,
    split_pass,
)
from .errors import InsufficientPoints
from .losses import (
    LossWeights,
    detail_loss,
    geometric_loss,
    opacity_entropy_loss,
    wavelet_weight_map,
)
from .optim import Adam, exponential_lr
from .renderer import RenderSettings, backward, cull_and_prepare, render
from .sceneio import SceneBundle
from .soup import AppearanceModel, TriangleSoup
from .surfels import _bin_surfels, backward_appearance, render_appearance, spawn_gaussians


@dataclass
class TrainConfig:
    coarse_iters: int = 10000
    fine_iters: int = 10000
    lambda_d: float = 10.0
    lambda_rgb: float = 10.0
    lambda_c: float = 0.2
    lambda_s: float = 0.01
    grad_threshold: float = 1e-5
    prune_alpha: float = 0.5
    prune_gamma: float = 2.0
    prune_interval: int = 2000
    entropy_window: int = 5000
    entropy_weight: float = 0.1
    lr_vertices: float = 1.6e-4        # scaled by scene extent, decays to...
    lr_vertices_final: float = 1.6e-6  # ...this (also scaled) over the stage
    lr_opacity: float = 5e-2
    lr_sharpness: float = 5e-2
    lr_smoothness: float = 5e-2
    lr_color: float = 2.5e-3
    lr_offsets: float = 1e-2
    lr_scaling: float = 7e-3
    lr_gauss_opacity: float = 5e-2
    lr_rotation: float = 1e-3
    split_interval: int = 500
    lr_decay_horizon: int = 30000
    k_offsets: int = 10
    radius_factor: float = 0.5
    seed: int = 0
    tile_size: int = 16
    edge_threshold: float = 0.0  # 0 = automatic (soup bbox diagonal / 64)
    near: float = 0.01
    guard_band: float = 0.2
    transmittance_cutoff: float = 1e-4
    subdivision_cap: int = 8
    test_modulus: int = 8
    disable_prune: bool = False
    disable_split: bool = False

    def __post_init__(self):
        if self.coarse_iters < 0 or self.fine_iters < 0:
            raise ValueError("iteration counts must be non-negative")

    def render_settings(self) -> RenderSettings:
        return RenderSettings(
            tile_size=self.tile_size,
            edge_threshold=self.edge_threshold if self.edge_threshold > 0 else None,
            near=self.near,
            guard_band=self.guard_band,
            transmittance_cutoff=self.transmittance_cutoff,
            subdivision_cap=self.subdivision_cap,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_d=self.lambda_d, lambda_rgb=self.lambda_rgb,
            lambda_c=self.lambda_c, lambda_s=self.lambda_s,
        )

    def density(self) -> DensityConfig:
        return DensityConfig(
            grad_threshold=self.grad_threshold,
            prune_alpha=self.prune_alpha,
            prune_gamma=self.prune_gamma,
            prune_interval=self.prune_interval,
            entropy_window=self.entropy_window,
        )

    def to_text(self) -> str:
        lines = []
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        text = Path(path).read_text()
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dc_fields(cls)}
        defaults = cls()
        kwargs = {}
        for ln, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {ln}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {ln}: unknown key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


def init_from_points(
    points: np.ndarray,
    rng: np.random.Generator | int | None = None,
    radius_factor: float = 0.5,
    k_offsets: int = 10,
) -> TriangleSoup:
    """One triangle per sparse point: three vertices on a randomly oriented
    circle (radius = radius_factor x mean nearest-neighbor distance) with
    pairwise angular separation >= 60 degrees, so no initial triangle is
    degenerate. Opacity starts at 0.5, sharpness at 20, smoothness at 5.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n < 1:
        raise InsufficientPoints("need at least one point to initialize")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if n > 1:
        from scipy.spatial import cKDTree

        d, _ = cKDTree(points).query(points, k=2)
        mean_nn = float(d[:, 1].mean())
    else:
        mean_nn = 1.0
    radius = radius_factor * max(mean_nn, 1e-9)

    # Random circle basis per point.
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    helper = np.where(np.abs(axis[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    b1 = np.cross(axis, helper)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(axis, b1)

    # Three angles with pairwise gaps >= 60 degrees.
    gaps = np.deg2rad(60.0) + np.deg2rad(180.0) * rng.dirichlet(np.ones(3), size=n)
    start = rng.uniform(0.0, 2 * np.pi, size=n)
    angles = start[:, None] + np.cumsum(gaps, axis=1) - gaps[:, :1] * 0.0
    angles = np.stack([start, start + gaps[:, 0], start + gaps[:, 0] + gaps[:, 1]], axis=1)

    offsets = (
        np.cos(angles)[..., None] * b1[:, None, :]
        + np.sin(angles)[..., None] * b2[:, None, :]
    )
    vertices = points[:, None, :] + radius * offsets
    return TriangleSoup(
        vertices=vertices,
        opacity_logit=np.zeros(n),
        sharpness_log=np.full(n, np.log(20.0)),
        smoothness_log=np.full(n, np.log(5.0)),
        ids=np.arange(n, dtype=np.int64),
        parent_ids=np.full(n, -1, dtype=np.int64),
        appearance=AppearanceModel.initialize(vertices, k=k_offsets),
    )


def calibrate_bundle(bundle: SceneBundle, seed: int = 0) -> dict[int, dict]:
    """Per-view RANSAC calibration of the stored depth against SfM points.

    For each camera, sparse points tracked in that view are projected; the
    stored depth at the projected pixel is paired with the point's metric
    ray depth. Returns {camera id: {scale, shift, inliers}}.
    """
    out = {}
    point_cams = bundle.tracks
    for cam in bundle.cameras:
        m_vals, z_vals = [], []
        for i, track in enumerate(point_cams):
            if cam.id not in track:
                continue
            p = bundle.points[i]
            camp = cam.R @ p + cam.t
            if camp[2] <= 0:
                continue
            sx = cam.fx * camp[0] / camp[2] + cam.cx
            sy = cam.fy * camp[1] / camp[2] + cam.cy
            px = int(np.clip(np.floor(sx), 0, cam.width - 1))
            py = int(np.clip(np.floor(sy), 0, cam.height - 1))
            m = bundle.depths[cam.id][py, px]
            if m <= 0:
                continue
            m_vals.append(m)
            z_vals.append(float(np.linalg.norm(p - cam.center)))
        if len(m_vals) < 2:
            raise InsufficientPoints(
                f"camera {cam.id}: {len(m_vals)} usable SfM depth pairs (need >= 2)"
            )
        model = calibrate_depth_ransac(
            np.array(m_vals), np.array(z_vals), seed=seed + cam.id
        )
        out[cam.id] = {
            "scale": model.scale, "shift": model.shift, "inliers": model.inlier_count,
        }
    return out


@dataclass
class StageState:
    """Resumable snapshot of one training stage between iterations."""

    stage: str
    iteration: int
    soup: TriangleSoup
    adam: Adam
    stats: ContributionStats
    rng_state: dict
    perm: np.ndarray
    perm_pos: int


class Trainer:
    def __init__(self, bundle: SceneBundle, config: TrainConfig | None = None):
        self.bundle = bundle
        self.config = config or TrainConfig()
        self.settings = self.config.render_settings()
        self.weights = self.config.loss_weights()
        self.density = self.config.density()
        self.train_cams = bundle.train_cameras()
        if not self.train_cams:
            raise ValueError("no training cameras after hold-out split")
        extent = bundle.points.max(axis=0) - bundle.points.min(axis=0)
        self.scene_extent = float(np.linalg.norm(extent)) or 1.0
        self.calibrations = calibrate_bundle(bundle, seed=self.config.seed)
        self.depth_cal = {}
        self.masks = {}
        for cam in bundle.cameras:
            c = self.calibrations[cam.id]
            self.depth_cal[cam.id] = c["scale"] * bundle.depths[cam.id] + c["shift"]
            self.masks[cam.id] = bundle.depths[cam.id] > 0
        self.w_hf = {
            cam.id: wavelet_weight_map(bundle.images[cam.id]) for cam in self.train_cams
        }
        self.manifest: dict = {
            "config": {f.name: getattr(self.config, f.name) for f in dc_fields(TrainConfig)},
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "scene_extent": self.scene_extent,
            "calibration": self.calibrations,
            "stages": {},
        }

    # -- parameter plumbing -------------------------------------------------

    def _params(self, soup: TriangleSoup, stage: str) -> dict[str, np.ndarray]:
        params = {
            "vertices": soup.vertices,
            "opacity_logit": soup.opacity_logit,
            "sharpness_log": soup.sharpness_log,
            "smoothness_log": soup.smoothness_log,
        }
        if stage == "fine":
            app = soup.appearance
            params.update(
                offsets=app.offsets,
                offset_scale=app.offset_scale,
                color_logit=app.color_logit,
                gauss_opacity_logit=app.opacity_logit,
                gauss_scale_log=app.scale_log,
                gauss_rotation=app.rotation,
            )
        return params

    def _make_adam(self, soup: TriangleSoup, stage: str, total_iters: int) -> Adam:
        # Vertex lr decays over a fixed horizon (not the possibly short
        # configured stage), so truncated desk-scale runs keep refining.
        cfg = self.config
        params = self._params(soup, stage)
        lrs: dict = {
            "vertices": exponential_lr(
                cfg.lr_vertices * self.scene_extent,
                cfg.lr_vertices_final * self.scene_extent,
                max(cfg.lr_decay_horizon, 1),
            ),
            "opacity_logit": cfg.lr_opacity,
            "sharpness_log": cfg.lr_sharpness,
            "smoothness_log": cfg.lr_smoothness,
        }
        if stage == "fine":
            lrs.update(
                offsets=cfg.lr_offsets,
                offset_scale=cfg.lr_scaling,
                color_logit=cfg.lr_color,
                gauss_opacity_logit=cfg.lr_gauss_opacity,
                gauss_scale_log=cfg.lr_scaling,
                gauss_rotation=cfg.lr_rotation,
            )
        return Adam({k: v.shape for k, v in params.items()}, lrs)

    # -- stages -------------------------------------------------------------

    def train_coarse(self, soup: TriangleSoup, state: StageState | None = None):
        return self._run_stage("coarse", soup, self.config.coarse_iters, state)

    def train_fine(self, soup: TriangleSoup, state: StageState | None = None):
        return self._run_stage("fine", soup, self.config.fine_iters, state)

    def _run_stage(self, stage: str, soup: TriangleSoup, total: int,
                   state: StageState | None = None):
        cfg = self.config
        if state is not None:
            soup = state.soup
            adam = state.adam
            stats = state.stats
            rng = np.random.default_rng()
            rng.bit_generator.state = state.rng_state
            perm = state.perm.copy()
            pos = int(state.perm_pos)
            start = state.iteration
        else:
            soup = soup.copy()
            adam = self._make_adam(soup, stage, total)
            stats = ContributionStats.zeros(len(soup))
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 0 if stage == "coarse" else 1])
            )
            perm = rng.permutation(len(self.train_cams))
            pos = 0
            start = 0
        params = self._params(soup, stage)
        log: list[tuple[int, float]] = []
        events: list[dict] = []
        entropy_start = max(total - cfg.entropy_window, 0)

        for it in range(start, total):
            if pos >= len(perm):
                perm = rng.permutation(len(self.train_cams))
                pos = 0
            cam = self.train_cams[perm[pos]]
            pos += 1

            prep = cull_and_prepare(soup, cam, self.settings)
            target = render(soup, cam, self.settings, prepared=prep)
            if stage == "coarse":
                value, g_depth, g_normal = geometric_loss(
                    target.depth, target.normal,
                    self.depth_cal[cam.id], self.bundle.normals[cam.id],
                    self.masks[cam.id], cfg.lambda_d,
                )
                grads = backward(
                    soup, cam, self.settings,
                    grad_depth=g_depth, grad_normal=g_normal, prepared=prep,
                )
                grad_dict = {
                    "vertices": grads.vertices,
                    "opacity_logit": grads.opacity_logit,
                    "sharpness_log": grads.sharpness_log,
                    "smoothness_log": grads.smoothness_log,
                }
            else:
                surfels = spawn_gaussians(soup)
                plan = _bin_surfels(surfels, cam, self.settings)
                app_target = render_appearance(surfels, cam, self.settings, plan=plan)
                scales = np.stack([surfels.s_u, surfels.s_v], axis=1)
                value, dgrads = detail_loss(
                    target.depth, target.normal,
                    app_target.depth, app_target.normal,
                    self.depth_cal[cam.id], self.bundle.normals[cam.id],
                    self.bundle.images[cam.id], app_target.color,
                    self.w_hf[cam.id], self.weights, scales,
                    self.masks[cam.id],
                )
                grads = backward(
                    soup, cam, self.settings,
                    grad_depth=dgrads.depth, grad_normal=dgrads.normal, prepared=prep,
                )
                app_grads = backward_appearance(
                    soup, surfels, cam, self.settings,
                    grad_color=dgrads.color_gs, plan=plan,
                )
                # Volume regularizer acts on the spawned extents directly.
                k = soup.appearance.k
                g_scale_log = app_grads.scale_log
                if dgrads.scales.size:
                    per = dgrads.scales.reshape(-1, k, 2) * np.exp(
                        soup.appearance.scale_log[surfels.spawn_rows]
                    )
                    g_scale_log[surfels.spawn_rows] += per
                grad_opacity = grads.opacity_logit
                if it >= entropy_start and cfg.entropy_weight > 0:
                    alphas = soup.alphas
                    ent_val, g_ent = opacity_entropy_loss(alphas)
                    value += cfg.entropy_weight * ent_val
                    grad_opacity = grad_opacity + cfg.entropy_weight * g_ent * alphas * (1 - alphas)
                grad_dict = {
                    "vertices": grads.vertices + app_grads.vertices,
                    "opacity_logit": grad_opacity,
                    "sharpness_log": grads.sharpness_log,
                    "smoothness_log": grads.smoothness_log,
                    "offsets": app_grads.offsets,
                    "offset_scale": app_grads.offset_scale,
                    "color_logit": app_grads.color_logit,
                    "gauss_opacity_logit": app_grads.opacity_logit,
                    "gauss_scale_log": g_scale_log,
                    "gauss_rotation": app_grads.rotation,
                }
                stats.accumulate(target.gamma_partial, target.visible)

            adam.step(params, grad_dict)
            if it % 100 == 0 or it == total - 1:
                log.append((it, float(value)))

            if stage == "fine":
                done = it + 1
                if (not cfg.disable_prune) and done % cfg.prune_interval == 0:
                    soup, keep, report = prune_pass(soup, stats, self.density)
                    index_map = keep
                    adam.remap(index_map)
                    stats = ContributionStats.zeros(len(soup))
                    params = self._params(soup, stage)
                    events.append({"iter": done, "prune": report.__dict__})
                if (not cfg.disable_split) and done % cfg.split_interval == 0:
                    surfels = spawn_gaussians(soup)
                    soup, index_map, report = split_pass(soup, surfels, self.density)
                    adam.remap(index_map)
                    stats.remap(index_map)
                    params = self._params(soup, stage)
                    events.append({"iter": done, "split": report.__dict__})

        if stage == "fine" and total > 0:
            soup, orient_report = self._orient(soup)
            events.append({"iter": total, "orient": orient_report.__dict__})

        self.manifest["stages"][stage] = {
            "iterations": total,
            "loss_log": log,
            "events": events,
            "triangles": len(soup),
        }
        final_state = StageState(
            stage=stage, iteration=total, soup=soup, adam=adam, stats=stats,
            rng_state=rng.bit_generator.state, perm=perm, perm_pos=pos,
        )
        return soup, final_state

    def _orient(self, soup: TriangleSoup):
        visible = np.zeros((len(soup), len(self.train_cams)), dtype=bool)
        for ci, cam in enumerate(self.train_cams):
            prep = cull_and_prepare(soup, cam, self.settings)
            visible[prep.rows, ci] = True
        centers = np.stack([c.center for c in self.train_cams])
        return orient_normals(soup, centers, visible)


# ---------------------------------------------------------------------------
# Resumable state serialization
# ---------------------------------------------------------------------------


def save_train_state(path, state: StageState) -> None:
    soup = state.soup
    app = soup.appearance
    arrays = {
        "vertices": soup.vertices,
        "opacity_logit": soup.opacity_logit,
        "sharpness_log": soup.sharpness_log,
        "smoothness_log": soup.smoothness_log,
        "ids": soup.ids,
        "parent_ids": soup.parent_ids,
        "app.features": app.features,
        "app.offset_scale": app.offset_scale,
        "app.offsets": app.offsets,
        "app.color_logit": app.color_logit,
        "app.opacity_logit": app.opacity_logit,
        "app.scale_log": app.scale_log,
        "app.rotation": app.rotation,
        "stats.gamma_sum": state.stats.gamma_sum,
        "stats.seen": state.stats.seen,
        "perm": state.perm,
    }
    for k, v in state.adam.state_arrays().items():
        arrays[f"adam.{k}"] = v
    meta = {
        "stage": state.stage,
        "iteration": state.iteration,
        "perm_pos": state.perm_pos,
        "adam_t": state.adam.t,
        "rng_state": state.rng_state,
        "lr_names": sorted(state.adam.lrs.keys()),
    }
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta, default=int).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_train_state(path, trainer: Trainer) -> StageState:
    data = np.load(path)
    meta = json.loads(bytes(data["meta_json"]).decode())
    stage = meta["stage"]
    soup = TriangleSoup(
        vertices=np.array(data["vertices"]),
        opacity_logit=np.array(data["opacity_logit"]),
        sharpness_log=np.array(data["sharpness_log"]),
        smoothness_log=np.array(data["smoothness_log"]),
        ids=np.array(data["ids"]),
        parent_ids=np.array(data["parent_ids"]),
        appearance=AppearanceModel(
            features=np.array(data["app.features"]),
            offset_scale=np.array(data["app.offset_scale"]),
            offsets=np.array(data["app.offsets"]),
            color_logit=np.array(data["app.color_logit"]),
            opacity_logit=np.array(data["app.opacity_logit"]),
            scale_log=np.array(data["app.scale_log"]),
            rotation=np.array(data["app.rotation"]),
        ),
    )
    total = trainer.config.coarse_iters if stage == "coarse" else trainer.config.fine_iters
    adam = trainer._make_adam(soup, stage, total)
    adam.load_state_arrays(
        {k[len("adam."):]: np.array(data[k]) for k in data.files if k.startswith("adam.")},
        t=meta["adam_t"],
    )
    stats = ContributionStats(
        gamma_sum=np.array(data["stats.gamma_sum"]),
        seen=np.array(data["stats.seen"]),
    )
    rng_state = meta["rng_state"]
    # JSON round-trips the PCG64 ints as plain ints; restore structure.
    return StageState(
        stage=stage, iteration=int(meta["iteration"]), soup=soup, adam=adam,
        stats=stats, rng_state=rng_state, perm=np.array(data["perm"]),
        perm_pos=int(meta["perm_pos"]),
    )


class TriangleSoupReconstructor(BaseEstimator):
    """scikit-learn style facade over the two-stage trainer.

    fit(bundle) initializes the soup from the bundle's sparse points, runs
    the configured stages and exposes ``soup_`` and ``manifest_``.
    """

    def __init__(self, config: TrainConfig | None = None, stage: str = "both"):
        self.config = config
        self.stage = stage

    def fit(self, bundle: SceneBundle, y=None):
        cfg = self.config or TrainConfig()
        trainer = Trainer(bundle, cfg)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 42]))
        soup = init_from_points(
            bundle.points, rng, radius_factor=cfg.radius_factor,
            k_offsets=cfg.k_offsets,
        )
        if self.stage in ("coarse", "both"):
            soup, _ = trainer.train_coarse(soup)
        if self.stage in ("fine", "both"):
            soup, _ = trainer.train_fine(soup)
        self.soup_ = soup
        self.manifest_ = trainer.manifest
        self.trainer_ = trainer
        return self
