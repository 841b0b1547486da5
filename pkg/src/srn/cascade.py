"""Cascaded shape regression: iterative residual refinement from a mean-shape
initialization, the summed per-iteration squared-error objective, and the
image-mode trainer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInput, TrainingDiverged
from .geometry import (
    FaceShape,
    OcclusionSpec,
    default_occlusion_half_extent,
    extract_patches,
    insert_occlusion,
    mean_shape,
)
from .network import SrnConfig, SrnModel
from .params import Adam, ParamStore, derive_seed

logger = logging.getLogger(__name__)

AUGMENT_MODES = ("none", "random_occlusion")


@dataclass(frozen=True)
class CascadeConfig:
    """Refinement-loop constants."""

    num_iterations: int = 3
    patch_size: int | None = None  # None -> the model's patch size
    initial_shape_mode: str = "mean_shape"  # or "provided"
    detach_between_iterations: bool = False

    def __post_init__(self):
        if self.num_iterations < 1:
            raise InvalidInput("num_iterations must be >= 1")
        if self.initial_shape_mode not in ("mean_shape", "provided"):
            raise InvalidInput(f"unknown initial_shape_mode {self.initial_shape_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        return cls(**d)


@dataclass(frozen=True)
class ShapeTrajectory:
    """Shapes L^0..L^I and residuals dL^1..dL^I; L^i == L^{i-1} + dL^i
    holds exactly because each shape is constructed by that addition."""

    shapes: tuple[FaceShape, ...]
    residuals: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.shapes) != len(self.residuals) + 1:
            raise InvalidInput("trajectory must hold one more shape than residuals")

    @property
    def final(self) -> FaceShape:
        return self.shapes[-1]


def patch_batch(images, shapes: np.ndarray, patch_size: int, dtype) -> np.ndarray:
    """Extract per-landmark crops for a batch: returns (B, N, C, P, P)."""
    stacks = []
    for img, pts in zip(images, shapes):
        ps = extract_patches(img, FaceShape(pts), patch_size).patches  # (N, P, P, C)
        stacks.append(ps.transpose(0, 3, 1, 2))
    return np.stack(stacks).astype(dtype)


def run_cascade(model: SrnModel, images, inits: np.ndarray, config: CascadeConfig,
                h0: Tensor | None = None, temporal: bool = False):
    """Run the refinement loop over a batch of images.

    Per iteration: re-extract patches at the current estimate, compute
    features, update the hidden state (image mode only; video mode keeps the
    frame-level state fixed), predict the residual and add it.  Patch
    extraction is not differentiable in the coordinates, so gradients flow
    through the additive shape chain and the hidden state only.

    Returns (shape tensors L^0..L^I, residual tensors, h, last features).
    """
    patch_size = config.patch_size or model.cfg.patch_size
    batch = inits.shape[0]
    h = h0 if h0 is not None else model.zero_hidden(batch)
    level = Tensor(np.asarray(inits, dtype=model.cfg.np_dtype))
    levels = [level]
    deltas = []
    x = None
    for _ in range(config.num_iterations):
        patches = patch_batch(images, levels[-1].data, patch_size, model.cfg.np_dtype)
        x = model.features(patches)
        if not temporal:
            h = model.hidden_step(x, h)
        r = model.relation(x)
        delta = model.shape_residual(r, h)
        prev = levels[-1]
        if config.detach_between_iterations:
            prev = prev.detach()
        levels.append(prev + delta)
        deltas.append(delta)
    return levels, deltas, h, x


def predict(image: np.ndarray, init: FaceShape, model: SrnModel,
            config: CascadeConfig) -> ShapeTrajectory:
    """Single-image cascade; returns the full trajectory."""
    if init.n != model.cfg.num_landmarks:
        raise InvalidInput("initial shape landmark count does not match the model")
    levels, deltas, _, _ = run_cascade(model, [image], init.points[None], config)
    shapes = tuple(FaceShape(lv.data[0]) for lv in levels)
    residuals = tuple(d.data[0].copy() for d in deltas)
    return ShapeTrajectory(shapes=shapes, residuals=residuals)


def loss(traj: ShapeTrajectory, gt: FaceShape) -> float:
    """Sum over iterations of the squared coordinate error to ground truth."""
    if gt.n != traj.shapes[0].n:
        raise InvalidInput("ground truth landmark count does not match trajectory")
    total = 0.0
    for level in traj.shapes[1:]:
        diff = gt.points - level.points
        total += float(np.sum(diff * diff))
    return total


@dataclass(frozen=True)
class TrainConfig:
    """Optimization constants for the image-mode trainer."""

    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    augment: str = "none"
    occlusion_scale: float = 0.15
    log_every: int = 200

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidInput("steps must be >= 0 and batch_size >= 1")
        if self.augment not in AUGMENT_MODES:
            raise InvalidInput(f"augment must be one of {AUGMENT_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Predictor:
    """A trained model frozen together with its initialization shape."""

    model: SrnModel
    init_shape: FaceShape
    cascade: CascadeConfig

    def trajectory(self, image: np.ndarray, init: FaceShape | None = None) -> ShapeTrajectory:
        start = init if init is not None else self.init_shape
        return predict(image, start, self.model, self.cascade)

    def predict(self, image: np.ndarray, init: FaceShape | None = None) -> FaceShape:
        return self.trajectory(image, init).final

    def to_store(self) -> ParamStore:
        arrays = self.model.arrays()
        arrays["mean_shape"] = self.init_shape.points.copy()
        return ParamStore(
            arrays=arrays,
            rng_seed=0,
            config={
                "kind": "srn",
                "model": self.model.cfg.to_dict(),
                "cascade": self.cascade.to_dict(),
            },
        )

    def save(self, path) -> None:
        self.to_store().save(path)

    @classmethod
    def load(cls, path) -> "Predictor":
        store = ParamStore.load(path)
        if store.config.get("kind") != "srn":
            raise InvalidInput(f"{path}: not a landmark-model checkpoint")
        init_pts = store.arrays.pop("mean_shape")
        model = SrnModel.from_store(store)
        return cls(model=model, init_shape=FaceShape(init_pts),
                   cascade=CascadeConfig.from_dict(store.config["cascade"]))


def train(samples, model_cfg: SrnConfig, cascade_cfg: CascadeConfig,
          train_cfg: TrainConfig, model: SrnModel | None = None) -> Predictor:
    """Minimize the summed per-iteration squared error with Adam.

    Deterministic for a fixed seed: model init, batch order and occlusion
    noise all derive from ``train_cfg.seed``.
    """
    samples = list(samples)
    if not samples:
        raise InvalidInput("training requires a non-empty dataset")
    n = samples[0].gt.n
    if any(s.gt.n != n for s in samples):
        raise InvalidInput("training shapes must share a landmark count")
    init = mean_shape([s.gt for s in samples])
    if model is None:
        model = SrnModel(model_cfg, seed=derive_seed(train_cfg.seed, 1))
    rng = np.random.default_rng(derive_seed(train_cfg.seed, 2))
    adam = Adam(model.params, lr=train_cfg.learning_rate)
    inits = np.repeat(init.points[None], train_cfg.batch_size, axis=0)
    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(samples), size=train_cfg.batch_size)
        images = []
        for slot, i in enumerate(idx):
            img = samples[i].image
            if train_cfg.augment == "random_occlusion":
                landmark = int(rng.integers(0, n))
                spec = OcclusionSpec(
                    center_landmark=landmark,
                    half_extent=default_occlusion_half_extent(samples[i].gt,
                                                              train_cfg.occlusion_scale),
                    noise_seed=derive_seed(train_cfg.seed, 3, step, slot),
                )
                img = insert_occlusion(img, spec, samples[i].gt)
            images.append(img)
        gts = np.stack([samples[i].gt.points for i in idx]).astype(model.cfg.np_dtype)
        try:
            levels, _, _, _ = run_cascade(model, images, inits, cascade_cfg)
        except InvalidInput as exc:
            raise TrainingDiverged(f"step {step}: non-finite shapes ({exc})") from exc
        gt_t = Tensor(gts)
        total = None
        for level in levels[1:]:
            term = ad.sum_squares(level - gt_t)
            total = term if total is None else total + term
        loss_t = ad.scale(total, 1.0 / train_cfg.batch_size)
        value = loss_t.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"step {step}: loss became {value}")
        adam.zero_grad()
        loss_t.backward()
        adam.step()
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            logger.info("step %d loss %.6f", step, value)
    return Predictor(model=model, init_shape=init, cascade=cascade_cfg)
