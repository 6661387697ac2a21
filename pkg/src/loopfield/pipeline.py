"""Staged pipeline with content-hash caching.

Stages run in a fixed order (features -> cluster -> field -> animate ->
render); each one hashes its input files plus the config subset it
depends on, and is skipped when the recorded key and output hashes still
match. Every stage reads its upstream artifacts back from disk, so a
full pipeline run and stage-by-stage runs produce bit-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import animate as animate_mod
from . import cloud_io, features, motionfield, renderer, supergaussian
from .neural import TrainConfig

STAGES = ("features", "cluster", "field", "animate", "render")


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


class MissingPrerequisite(StageFailure):
    def __init__(self, stage, prerequisite):
        RuntimeError.__init__(
            self,
            f"stage '{stage}' needs artifacts from stage '{prerequisite}'; "
            f"run that stage first",
        )
        self.stage = stage
        self.prerequisite = prerequisite


@dataclass
class PipelineConfig:
    """Run parameters; numeric defaults follow the reference settings
    (lambda 0.04, mu 0.5, omega 1.2, 48 frames, 128/64 hidden units,
    900x900 output)."""

    input_ply: str = ""
    mask_path: str = ""
    cameras_path: str = ""
    output_dir: str = ""
    lambda_res: float = 0.04
    mu: float = 0.5
    omega: float = 1.2
    frames: int = 48
    feature_backend: str = "autoencoder"
    feature_dim: int = 16
    pe_frequencies: int = 6
    mlp_hidden: tuple = (128, 64)
    variogram_bins: int = 12
    knn_k: int = 12
    cluster_iterations: int = 1
    seeds: dict = field(default_factory=lambda: {"features": 0, "cluster": 1, "field": 2})
    learning_rate: float = 1e-3
    autoencoder_epochs: int = 400
    field_epochs: int = 400
    batch_size: int = 0
    sh_degree_render: int = 3
    resolution: tuple = (900, 900)
    background: tuple = (0.0, 0.0, 0.0)
    psi_override: tuple | None = None

    _KEYMAP = {"lambda": "lambda_res", "T": "frames"}

    def validate(self):
        if self.lambda_res <= 0:
            raise ConfigError("lambda must be positive")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if self.omega <= 0:
            raise ConfigError("omega must be positive")
        if self.frames < 2:
            raise ConfigError("frames must be >= 2")
        if self.feature_backend not in ("autoencoder", "handcrafted"):
            raise ConfigError(f"unknown feature backend {self.feature_backend!r}")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.pe_frequencies < 0:
            raise ConfigError("pe_frequencies must be >= 0")
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ConfigError("resolution must be two positive integers")
        if self.psi_override is not None and len(self.psi_override) != 3:
            raise ConfigError("psi_override must have three components")
        if not 0 <= self.sh_degree_render <= 3:
            raise ConfigError("sh_degree_render must be in 0..3")
        return self

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lambda_res")
        d["T"] = d.pop("frames")
        for k in ("mlp_hidden", "resolution", "background"):
            d[k] = list(d[k])
        if d["psi_override"] is not None:
            d["psi_override"] = list(d["psi_override"])
        return d

    @classmethod
    def from_dict(cls, doc):
        kwargs = {}
        for key, value in doc.items():
            attr = cls._KEYMAP.get(key, key)
            if attr not in cls.__dataclass_fields__ or attr.startswith("_"):
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[attr] = value
        cfg = cls(**kwargs)
        for name in ("mlp_hidden", "resolution", "background"):
            setattr(cfg, name, tuple(getattr(cfg, name)))
        if cfg.psi_override is not None:
            cfg.psi_override = tuple(cfg.psi_override)
        return cfg.validate()

    @classmethod
    def load(cls, path):
        """Read a JSON config; relative paths resolve against its directory."""
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls.from_dict(doc)
        base = os.path.dirname(os.path.abspath(path))
        for name in ("input_ply", "mask_path", "cameras_path", "output_dir"):
            value = getattr(cfg, name)
            if value and not os.path.isabs(value):
                setattr(cfg, name, os.path.join(base, value))
        return cfg

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def train_config(self, seed, epochs):
        return TrainConfig(learning_rate=self.learning_rate, epochs=epochs,
                           batch_size=self.batch_size, seed=seed)


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _key_of(inputs: dict, params: dict) -> str:
    blob = json.dumps({"inputs": inputs, "params": params}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


class Pipeline:
    """Owns the output directory layout and the per-stage cache logic."""

    def __init__(self, cfg: PipelineConfig, log=print):
        cfg.validate()
        if not cfg.input_ply:
            raise ConfigError("input_ply is required")
        if not cfg.mask_path:
            raise ConfigError("mask required: set mask_path")
        if not cfg.output_dir:
            raise ConfigError("output_dir is required")
        self.cfg = cfg
        self.log = log
        self.cache_dir = os.path.join(cfg.output_dir, "cache")
        self.frames_dir = os.path.join(cfg.output_dir, "frames")
        self.renders_dir = os.path.join(cfg.output_dir, "renders")
        self.features_path = os.path.join(self.cache_dir, "features.bin")
        self.clusters_path = os.path.join(self.cache_dir, "clusters.bin")
        self.sparse_path = os.path.join(self.cache_dir, "sparse.bin")
        self.dense_path = os.path.join(self.cache_dir, "dense.bin")
        self.field_path = os.path.join(self.cache_dir, "field.bin")

    # -- cache plumbing ----------------------------------------------

    def _meta_path(self, stage):
        return os.path.join(self.cache_dir, f"{stage}.meta.json")

    def _is_cached(self, stage, key, outputs):
        try:
            with open(self._meta_path(stage), "r", encoding="utf-8") as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError):
            return False
        if meta.get("key") != key:
            return False
        recorded = meta.get("outputs", {})
        if sorted(recorded) != sorted(outputs):
            return False
        for path, digest in recorded.items():
            if not os.path.exists(path) or file_hash(path) != digest:
                return False
        return True

    def _write_meta(self, stage, key, outputs):
        os.makedirs(self.cache_dir, exist_ok=True)
        meta = {"key": key, "outputs": {p: file_hash(p) for p in outputs}}
        with open(self._meta_path(stage), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)

    def _run_stage(self, stage, inputs, params, outputs, work):
        key = _key_of(inputs, params)
        if self._is_cached(stage, key, outputs):
            self.log(f"[cached] {stage}")
            return False
        self.log(f"[run]    {stage}")
        try:
            work()
        except StageFailure:
            raise
        except Exception as e:
            raise StageFailure(stage, e) from e
        for path in outputs:
            if not os.path.exists(path):
                raise StageFailure(stage, f"expected output {path} was not written")
        self._write_meta(stage, key, outputs)
        return True

    def _require(self, stage, path, prerequisite):
        if not os.path.exists(path):
            raise MissingPrerequisite(stage, prerequisite)

    def _input_hashes(self, stage, *paths):
        out = {}
        for p in paths:
            if not os.path.exists(p):
                raise StageFailure(stage, f"missing input file {p}")
            out[p] = file_hash(p)
        return out

    # -- shared loading ----------------------------------------------

    def _load_scene(self):
        cloud = cloud_io.load_ply(self.cfg.input_ply)
        mask = cloud_io.load_mask(self.cfg.mask_path, len(cloud))
        dynamic, static, index_map = cloud_io.split(cloud, mask)
        if len(dynamic) == 0:
            raise ValueError("mask selects no dynamic points")
        return cloud, mask, dynamic, static, index_map

    def _scene_resolution(self, cloud):
        return self.cfg.lambda_res * float(cloud_io.bbox(cloud).h.max())

    # -- stages -------------------------------------------------------

    def stage_features(self):
        cfg = self.cfg
        inputs = self._input_hashes("features", cfg.input_ply, cfg.mask_path)
        params = {
            "backend": cfg.feature_backend,
            "feature_dim": cfg.feature_dim,
            "seed": cfg.seeds.get("features", 0),
            "learning_rate": cfg.learning_rate,
            "epochs": cfg.autoencoder_epochs,
            "batch_size": cfg.batch_size,
        }

        def work():
            _, _, dynamic, _, _ = self._load_scene()
            if cfg.feature_backend == "handcrafted":
                fs = features.handcrafted_features(dynamic)
            else:
                ae = features.train_autoencoder(
                    dynamic, cfg.feature_dim,
                    cfg.train_config(params["seed"], cfg.autoencoder_epochs),
                )
                fs = features.encode(ae, dynamic)
            os.makedirs(self.cache_dir, exist_ok=True)
            features.save_features(fs, self.features_path)

        return self._run_stage("features", inputs, params,
                               [self.features_path], work)

    def stage_cluster(self):
        cfg = self.cfg
        self._require("cluster", self.features_path, "features")
        inputs = self._input_hashes("cluster", cfg.input_ply, cfg.mask_path,
                                    self.features_path)
        params = {
            "lambda": cfg.lambda_res,
            "mu": cfg.mu,
            "knn_k": cfg.knn_k,
            "iterations": cfg.cluster_iterations,
            "seed": cfg.seeds.get("cluster", 0),
        }

        def work():
            cloud, _, dynamic, _, _ = self._load_scene()
            fs = features.load_features(self.features_path)
            clustering = supergaussian.cluster(
                dynamic, fs, self._scene_resolution(cloud), cfg.mu,
                iterations=cfg.cluster_iterations,
                seed=params["seed"], knn_k=cfg.knn_k,
            )
            supergaussian.save_clustering(clustering, self.clusters_path)

        return self._run_stage("cluster", inputs, params,
                               [self.clusters_path], work)

    def stage_field(self):
        cfg = self.cfg
        self._require("field", self.features_path, "features")
        self._require("field", self.clusters_path, "cluster")
        inputs = self._input_hashes("field", cfg.input_ply, cfg.mask_path,
                                    self.features_path, self.clusters_path)
        params = {
            "variogram_bins": cfg.variogram_bins,
            "pe_frequencies": cfg.pe_frequencies,
            "hidden": list(cfg.mlp_hidden),
            "seed": cfg.seeds.get("field", 0),
            "learning_rate": cfg.learning_rate,
            "epochs": cfg.field_epochs,
            "batch_size": cfg.batch_size,
        }

        def work():
            _, _, dynamic, _, _ = self._load_scene()
            fs = features.load_features(self.features_path)
            clustering = supergaussian.load_clustering(self.clusters_path)
            summary = supergaussian.cluster_summary(dynamic, fs, clustering)
            sim = motionfield.similarity_matrix(summary.features)
            sparse = motionfield.sparse_velocity(summary.centers, sim)
            vario = motionfield.fit_variogram(sparse, bins=cfg.variogram_bins)
            dense = motionfield.krige(sparse, dynamic.positions, vario)
            field_model, _ = motionfield.train_field_mlp(
                sparse, dense, cloud_io.bbox(dynamic),
                cfg.train_config(params["seed"], cfg.field_epochs),
                pe_frequencies=cfg.pe_frequencies,
                hidden_sizes=tuple(cfg.mlp_hidden),
            )
            motionfield.save_velocity_field(sparse, self.sparse_path)
            motionfield.save_velocity_field(dense, self.dense_path)
            motionfield.save_motion_field(field_model, self.field_path)

        return self._run_stage(
            "field", inputs, params,
            [self.sparse_path, self.dense_path, self.field_path], work,
        )

    def stage_animate(self):
        cfg = self.cfg
        self._require("animate", self.field_path, "field")
        inputs = self._input_hashes("animate", cfg.input_ply, cfg.mask_path,
                                    self.field_path)
        params = {
            "omega": cfg.omega,
            "frames": cfg.frames,
            "psi_override": list(cfg.psi_override) if cfg.psi_override else None,
        }
        frame_paths = [
            os.path.join(self.frames_dir, f"frame_{t:04d}.ply")
            for t in range(cfg.frames)
        ]

        def work():
            cloud, _, dynamic, static, index_map = self._load_scene()
            field_model = motionfield.load_motion_field(self.field_path)
            h = cloud_io.bbox(cloud).h
            if cfg.psi_override is not None:
                psi_vec = np.asarray(cfg.psi_override, dtype=np.float64)
                self.log(
                    "WARNING: psi_override in effect; the amplitude rule "
                    f"(omega/T)*exp(-h) is bypassed, using psi={psi_vec.tolist()}"
                )
                loop_cfg = animate_mod.LoopConfig(cfg.omega, cfg.frames, psi_vec)
            else:
                loop_cfg = animate_mod.LoopConfig.for_scene(cfg.omega, cfg.frames, h)
            seq = animate_mod.loop_frames(dynamic, static, index_map,
                                          field_model, loop_cfg)
            os.makedirs(self.frames_dir, exist_ok=True)
            for path, frame in zip(frame_paths, seq.frames):
                cloud_io.save_ply(frame, path)

        return self._run_stage("animate", inputs, params, frame_paths, work)

    def stage_render(self):
        cfg = self.cfg
        if not cfg.cameras_path:
            raise ConfigError("cameras_path is required for rendering")
        frame_paths = [
            os.path.join(self.frames_dir, f"frame_{t:04d}.ply")
            for t in range(cfg.frames)
        ]
        for p in frame_paths:
            self._require("render", p, "animate")
        inputs = self._input_hashes("render", cfg.cameras_path, *frame_paths)
        params = {
            "resolution": list(cfg.resolution),
            "sh_degree_render": cfg.sh_degree_render,
            "background": list(cfg.background),
        }
        try:
            cameras = renderer.load_cameras(
                cfg.cameras_path, width=cfg.resolution[0], height=cfg.resolution[1]
            )
        except (OSError, ValueError) as e:
            raise StageFailure("render", e) from e
        render_paths = [
            os.path.join(self.renders_dir, f"view{v}_frame_{t:04d}.png")
            for v in range(len(cameras))
            for t in range(cfg.frames)
        ]

        def work():
            os.makedirs(self.renders_dir, exist_ok=True)
            for t, frame_path in enumerate(frame_paths):
                frame = cloud_io.load_ply(frame_path)
                for v, cam in enumerate(cameras):
                    img = renderer.render(frame, cam,
                                          sh_degree=cfg.sh_degree_render,
                                          background=cfg.background)
                    out = os.path.join(self.renders_dir,
                                       f"view{v}_frame_{t:04d}.png")
                    renderer.write_image(img, out)

        return self._run_stage("render", inputs, params, render_paths, work)

    # -- entry points --------------------------------------------------

    def run_stage(self, name):
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}")
        return getattr(self, f"stage_{name}")()

    def run_all(self):
        for name in STAGES:
            self.run_stage(name)


def check_report(cfg: PipelineConfig) -> dict:
    """Quick diagnostics: counts, extents, eccentricity, mask coverage,
    and how many voxels the clustering stage would seed."""
    if not cfg.input_ply:
        raise ConfigError("input_ply is required")
    if not cfg.mask_path:
        raise ConfigError("mask required: set mask_path")
    cloud = cloud_io.load_ply(cfg.input_ply)
    mask = cloud_io.load_mask(cfg.mask_path, len(cloud))
    box = cloud_io.bbox(cloud)
    resolution = cfg.lambda_res * float(box.h.max())
    dynamic, _, _ = cloud_io.split(cloud, mask)
    if len(dynamic):
        grid = supergaussian.voxelize(dynamic, resolution)
        n_voxels = len(grid.cells)
    else:
        n_voxels = 0
    return {
        "points": len(cloud),
        "bbox_h": [float(v) for v in box.h],
        "eccentricity_loss": cloud_io.eccentricity_loss(cloud),
        "mask_coverage": mask.coverage,
        "voxel_resolution": resolution,
        "non_empty_voxels": n_voxels,
    }
