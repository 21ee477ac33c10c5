"""Optimization loop: render, embed noise, fire spikes, compare, back-propagate, update."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError, ValidationError
from .gaussian_field import (
    CameraView,
    GaussianScene,
    SH_C0,
    logit,
    num_sh_coeffs,
    quat_to_rotmat,
    rgb_to_sh_dc,
    sigmoid,
)
from .loss_metrics import LossConfig, SsimReference, psnr, rendering_loss, ssim_image
from .rasterizer import backward_scene, render_scene
from .spike_core import (
    A0_MODES,
    NonUniformityMap,
    SpikeStream,
    Surrogate,
    estimate_phase,
    initial_accumulator,
    snl_backward,
    snl_forward,
    tfp_reconstruct,
)

log = logging.getLogger(__name__)

PARAM_GROUPS = ("mean", "rot", "scale", "opacity", "sh")
# "stream-phase" fixes each pixel's initial accumulator to the phase fitted from
# that view's ground-truth stream; the other modes draw a fresh A0 every step
TRAIN_A0_MODES = A0_MODES + ("stream-phase",)
LUMINANCE = {
    "uniform": (1 / 3, 1 / 3, 1 / 3),
    "bt601": (0.299, 0.587, 0.114),
}


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_mean: float = 1.6e-4
    lr_mean_final: float = 1.6e-6
    lr_rot: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 5e-3
    densify_until_iter: Optional[int] = None
    percent_dense: float = 0.01
    max_gaussians: int = 20000
    loss: LossConfig = field(default_factory=LossConfig)
    threshold: float = 1.0
    window: int = 256
    a0_mode: str = "stream-phase"
    surrogate: str = "rectangular"
    surrogate_width: Optional[float] = None
    # the detached-reset surrogate has a biased fixed point for spike L1; see notes
    reset_grad: bool = True
    seed: int = 0
    luminance_weights: Tuple[float, float, float] = LUMINANCE["uniform"]
    sh_degree: int = 1
    channels: int = 1
    dilation: float = 0.3
    tile_size: int = 16
    deterministic: bool = True
    init_count: int = 200

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.luminance_weights = tuple(float(w) for w in self.luminance_weights)
        if self.iterations <= 0:
            raise ValidationError("iterations must be > 0")
        for name in ("lr_mean", "lr_mean_final", "lr_rot", "lr_scale", "lr_opacity", "lr_sh"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        for name in ("densify_grad_threshold", "prune_opacity_threshold", "percent_dense"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.densify_interval <= 0:
            raise ValidationError("densify_interval must be > 0")
        if self.a0_mode not in TRAIN_A0_MODES:
            raise ValidationError(f"a0_mode must be one of {TRAIN_A0_MODES}")
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        if len(self.luminance_weights) != 3:
            raise ValidationError("luminance_weights needs three entries")
        num_sh_coeffs(self.sh_degree)
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ValidationError("invalid Adam hyper-parameters")

    @property
    def densify_until(self) -> int:
        return self.iterations // 2 if self.densify_until_iter is None else self.densify_until_iter

    def group_lr(self, group: str, iteration: int) -> float:
        if group == "mean":
            r = min(max(iteration / self.iterations, 0.0), 1.0)
            return float(np.exp((1 - r) * np.log(self.lr_mean) + r * np.log(self.lr_mean_final)))
        return {"rot": self.lr_rot, "scale": self.lr_scale, "opacity": self.lr_opacity,
                "sh": self.lr_sh}[group]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneDataset:
    """Training pairs plus optional initialization and evaluation data."""

    views: List[CameraView]
    streams: List[SpikeStream]
    points: Optional[np.ndarray] = None
    point_colors: Optional[np.ndarray] = None
    gt_images: Optional[List[np.ndarray]] = None
    rnu: Optional[NonUniformityMap] = None
    test_views: List[CameraView] = field(default_factory=list)
    test_images: List[np.ndarray] = field(default_factory=list)
    bbox: Optional[np.ndarray] = None
    true_rnu: Optional[NonUniformityMap] = None

    def __post_init__(self):
        if len(self.views) != len(self.streams) or not self.views:
            raise ValidationError("need one stream per view and at least one view")
        s0 = self.streams[0]
        for v, s in zip(self.views, self.streams):
            if (s.height, s.width, s.window, s.threshold) != (s0.height, s0.width, s0.window, s0.threshold):
                raise ValidationError("all streams must share H, W, N and threshold")
            if (v.height, v.width) != (s.height, s.width):
                raise ValidationError("view size does not match its stream")
        if self.rnu is not None and self.rnu.shape != (s0.height, s0.width):
            raise ValidationError("non-uniformity map does not match the stream size")

    @property
    def height(self) -> int:
        return self.streams[0].height

    @property
    def width(self) -> int:
        return self.streams[0].width

    @property
    def window(self) -> int:
        return self.streams[0].window

    @property
    def threshold(self) -> float:
        return self.streams[0].threshold

    def scene_extent(self) -> float:
        centers = np.array([v.center for v in self.views])
        return float(1.1 * np.linalg.norm(centers - centers.mean(0), axis=1).max())


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_gaussians(points: Optional[np.ndarray] = None, colors: Optional[np.ndarray] = None, *,
                   count: int = 0, bbox=None, sh_degree: int = 1, channels: int = 1,
                   rng=0) -> GaussianScene:
    """Seed Gaussians from a point cloud or uniformly inside a bounding box.

    Cloud mode: scale is the mean distance to the (up to) three nearest
    neighbours. Random mode: every Gaussian gets half the mean spacing
    ``(volume / count) ** (1/3)``. Opacity starts at 0.1; color comes from the
    point colors (RGB in [0, 1]) or mid-gray.
    """
    rng = np.random.default_rng(rng)
    if points is not None:
        means = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if means.shape[0] == 0:
            raise InvalidParameterError("point cloud is empty")
        n = means.shape[0]
        if n > 1:
            k = min(3, n - 1)
            dist, _ = cKDTree(means).query(means, k=k + 1)
            spacing = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
        else:
            spacing = np.full(1, 0.1)
    else:
        if count <= 0:
            raise InvalidParameterError("random init needs count > 0")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in
                  (bbox if bbox is not None else ([-1.0] * 3, [1.0] * 3)))
        means = rng.uniform(lo, hi, size=(count, 3))
        n = count
        spacing = np.full(n, 0.5 * (np.prod(hi - lo) / count) ** (1 / 3))
    k = num_sh_coeffs(sh_degree)
    sh = np.zeros((n, k, channels))
    if colors is not None:
        cols = np.asarray(colors, dtype=np.float64).reshape(n, -1)
        if channels == 1 and cols.shape[1] == 3:
            cols = cols.mean(axis=1, keepdims=True)
        sh[:, 0, :] = rgb_to_sh_dc(cols)
    rots = np.zeros((n, 4))
    rots[:, 0] = 1.0
    return GaussianScene(means, rots, np.repeat(np.log(spacing)[:, None], 3, axis=1),
                         np.full(n, float(logit(0.1))), sh)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def select(self, index) -> "AdamState":
        return AdamState({k: a[index] for k, a in self.m.items()},
                         {k: a[index] for k, a in self.v.items()}, self.step, self.skipped)

    def extend(self, count: int) -> "AdamState":
        pad = lambda a: np.concatenate([a, np.zeros((count,) + a.shape[1:])])
        return AdamState({k: pad(a) for k, a in self.m.items()},
                         {k: pad(a) for k, a in self.v.items()}, self.step, self.skipped)


def adam_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                state: AdamState, lrs: Dict[str, float], beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-15) -> AdamState:
    """One bias-corrected Adam step, in place on ``params`` and ``state``.

    Rows (Gaussians) whose gradient is non-finite are left untouched and
    counted in ``state.skipped``. Quaternions are renormalized afterwards.
    """
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidParameterError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        finite = np.isfinite(g).reshape(g.shape[0], -1).all(axis=1)
        bad = ~finite
        if bad.any():
            state.skipped += int(bad.sum())
            g = np.where(finite.reshape((-1,) + (1,) * (g.ndim - 1)), g, 0.0)
        m, v = state.m[name], state.v[name]
        m_new = beta1 * m + (1 - beta1) * g
        v_new = beta2 * v + (1 - beta2) * g * g
        step = lrs[name] * (m_new / bc1) / (np.sqrt(v_new / bc2) + eps)
        keep = finite.reshape((-1,) + (1,) * (g.ndim - 1))
        p -= np.where(keep, step, 0.0)
        m[...] = np.where(keep, m_new, m)
        v[...] = np.where(keep, v_new, v)
    if "rot" in params:
        params["rot"] /= np.linalg.norm(params["rot"], axis=1, keepdims=True)
    return state


# ---------------------------------------------------------------------------
# Densification
# ---------------------------------------------------------------------------

@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, d_mean2d: np.ndarray, visible: np.ndarray, width: int, height: int):
        # screen-space gradient in normalized device units (pixel gradient x half extent)
        g = np.hypot(d_mean2d[:, 0] * 0.5 * width, d_mean2d[:, 1] * 0.5 * height)
        self.grad_accum += np.where(visible, g, 0.0)
        self.denom += visible

    def mean_grad(self) -> np.ndarray:
        return np.where(self.denom > 0, self.grad_accum / np.maximum(self.denom, 1), 0.0)


def densify_and_prune(scene: GaussianScene, stats: DensifyStats, cfg: TrainConfig,
                      extent: float, rng, adam: Optional[AdamState] = None):
    """Clone small / split large high-gradient Gaussians, then prune transparent ones.

    Returns ``(scene, adam)``; new Gaussians start with zero Adam moments.
    """
    rng = np.random.default_rng(rng)
    n = len(scene)
    grads = stats.mean_grad()
    hot = grads >= cfg.densify_grad_threshold
    hot &= stats.denom > 0
    budget = max(cfg.max_gaussians - n, 0)
    max_scale = np.exp(scene.log_scales).max(axis=1)
    large = max_scale > cfg.percent_dense * extent
    clone_idx = np.flatnonzero(hot & ~large)
    split_idx = np.flatnonzero(hot & large)
    # the cap applies to net growth: a clone adds one, a split adds one
    if clone_idx.size + split_idx.size > budget:
        order = np.argsort(-grads[np.concatenate([clone_idx, split_idx])], kind="stable")
        chosen = np.concatenate([clone_idx, split_idx])[order[:budget]]
        clone_idx = np.sort(chosen[~large[chosen]])
        split_idx = np.sort(chosen[large[chosen]])

    parts = [scene]
    if clone_idx.size:
        parts.append(scene.select(clone_idx))
    if split_idx.size:
        parent = scene.select(split_idx)
        rot = quat_to_rotmat(parent.rots)
        s = np.exp(parent.log_scales)
        children = []
        for _ in range(2):
            offset = np.einsum("gij,gj->gi", rot, rng.standard_normal(s.shape) * s)
            child = parent.copy()
            child.means = parent.means + offset
            child.log_scales = np.log(s / 1.6)
            children.append(child)
        parts += children
    new_scene = parts[0]
    for p in parts[1:]:
        new_scene = new_scene.concat(p)
    added = len(new_scene) - n
    if adam is not None and added:
        adam = adam.extend(added)

    keep = np.ones(len(new_scene), bool)
    keep[split_idx] = False
    keep &= sigmoid(new_scene.opacity_logits) >= cfg.prune_opacity_threshold
    if not keep.all():
        new_scene = new_scene.select(keep)
        if adam is not None:
            adam = adam.select(keep)
    return new_scene, adam


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def luminance(image: np.ndarray, weights) -> np.ndarray:
    if image.shape[2] == 1:
        return image[:, :, 0]
    return image @ np.asarray(weights, dtype=np.float64)


def _lum_grad(dl_dy: np.ndarray, channels: int, weights) -> np.ndarray:
    if channels == 1:
        return dl_dy[:, :, None]
    return dl_dy[:, :, None] * np.asarray(weights, dtype=np.float64)


@dataclass
class StepResult:
    loss: float
    l1: float
    dssim: float
    spike_accuracy: float
    gaussian_count: int
    view_index: int


class Trainer:
    """Owns the scene, optimizer state and per-view caches between steps."""

    def __init__(self, dataset: SceneDataset, cfg: TrainConfig,
                 scene: Optional[GaussianScene] = None):
        self.data = dataset
        self.cfg = cfg
        if cfg.window != dataset.window or cfg.threshold != dataset.threshold:
            raise ValidationError(
                f"config window/threshold ({cfg.window}, {cfg.threshold}) do not match the data "
                f"({dataset.window}, {dataset.threshold})")
        if scene is None:
            if dataset.points is not None and len(dataset.points):
                scene = init_gaussians(dataset.points, dataset.point_colors,
                                       sh_degree=cfg.sh_degree, channels=cfg.channels,
                                       rng=np.random.default_rng([cfg.seed, 0, 3]))
            else:
                scene = init_gaussians(count=cfg.init_count, bbox=dataset.bbox,
                                       sh_degree=cfg.sh_degree, channels=cfg.channels,
                                       rng=np.random.default_rng([cfg.seed, 0, 3]))
        self.scene = scene
        self.adam = AdamState.zeros_like(scene.params())
        self.stats = DensifyStats.zeros(len(scene))
        self.iteration = 0
        self.extent = dataset.scene_extent()
        if cfg.loss.mode == "no_noise_embed" or dataset.rnu is None:
            self.rnu = NonUniformityMap.uniform(dataset.height, dataset.width)
        else:
            self.rnu = dataset.rnu
        self.surrogate = Surrogate(cfg.surrogate, cfg.surrogate_width, cfg.reset_grad)
        self._frames: Dict[int, np.ndarray] = {}
        self._refs: Dict[int, SsimReference] = {}
        self._phases: Dict[int, np.ndarray] = {}

    # -- data caches -------------------------------------------------------
    def _gt_frames(self, i: int) -> np.ndarray:
        if i not in self._frames:
            self._frames[i] = self.data.streams[i].frames().astype(np.float64)
        return self._frames[i]

    def _reference(self, i: int) -> SsimReference:
        if i not in self._refs:
            if self.cfg.loss.mode == "intensity":
                target = tfp_reconstruct(self.data.streams[i])[None]
            else:
                target = self._gt_frames(i)
            self._refs[i] = SsimReference.build(target, self.cfg.loss.ssim_window)
        return self._refs[i]

    def _a0(self, i: int, iteration: int) -> np.ndarray:
        cfg = self.cfg
        if cfg.a0_mode == "stream-phase":
            if i not in self._phases:
                self._phases[i] = estimate_phase(self.data.streams[i])
            return self._phases[i]
        return initial_accumulator((self.data.height, self.data.width), cfg.threshold, cfg.a0_mode,
                                   np.random.default_rng([cfg.seed, iteration, 1]))

    def view_for(self, iteration: int) -> int:
        n = len(self.data.views)
        epoch, k = divmod(iteration, n)
        perm = np.random.default_rng([self.cfg.seed, epoch, 0]).permutation(n)
        return int(perm[k])

    # -- one optimization step --------------------------------------------
    def compute_gradients(self, view_index: int, iteration: int):
        cfg = self.cfg
        view = self.data.views[view_index]
        render = render_scene(self.scene, view, cfg.dilation, cfg.tile_size)
        ihat = luminance(render.image, cfg.luminance_weights)
        if cfg.loss.mode == "intensity":
            ref = self._reference(view_index)
            loss, dl_di, terms = rendering_loss(ihat, ref.y[0], cfg.loss, reference=ref,
                                                return_terms=True)
            acc = float("nan")
        else:
            a0 = self._a0(view_index, iteration)
            _, tape = snl_forward(ihat, self.rnu, cfg.threshold, cfg.window, a0)
            gt = self._gt_frames(view_index)
            pred = tape.spikes.astype(np.float64)
            ref = self._reference(view_index) if cfg.loss.effective_lam > 0 else None
            loss, dl_ds, terms = rendering_loss(pred, gt, cfg.loss, time_major=True,
                                                reference=ref, return_terms=True)
            dl_di = snl_backward(tape, dl_ds, self.surrogate, time_major=True)
            acc = float(np.mean(pred == gt))
        g3, g2 = backward_scene(render, _lum_grad(dl_di, self.scene.channels, cfg.luminance_weights),
                                cfg.deterministic)
        return loss, terms, acc, g3, g2, render

    def step(self) -> StepResult:
        cfg = self.cfg
        it = self.iteration
        vi = self.view_for(it)
        loss, terms, acc, g3, g2, render = self.compute_gradients(vi, it)
        params = self.scene.params()
        lrs = {g: cfg.group_lr(g, it) for g in PARAM_GROUPS}
        adam_update(params, g3.as_dict(), self.adam, lrs, cfg.beta1, cfg.beta2, cfg.eps)
        view = self.data.views[vi]
        if it < cfg.densify_until:
            self.stats.add(g2.d_mean2d, render.proj.visible, view.width, view.height)
        self.iteration = it + 1
        if self.iteration % cfg.densify_interval == 0 and self.iteration <= cfg.densify_until:
            self.densify()
        return StepResult(loss, terms["l1"], terms["dssim"], acc, len(self.scene), vi)

    def densify(self):
        rng = np.random.default_rng([self.cfg.seed, self.iteration, 2])
        self.scene, self.adam = densify_and_prune(self.scene, self.stats, self.cfg, self.extent,
                                                  rng, self.adam)
        self.stats = DensifyStats.zeros(len(self.scene))

    def train(self, iterations: Optional[int] = None,
              callback: Optional[Callable[[int, StepResult], None]] = None) -> List[StepResult]:
        end = self.cfg.iterations if iterations is None else self.iteration + iterations
        history = []
        while self.iteration < end:
            res = self.step()
            history.append(res)
            if callback is not None:
                callback(self.iteration, res)
        return history

    # -- evaluation --------------------------------------------------------
    def render_intensity(self, view: CameraView) -> np.ndarray:
        img = render_scene(self.scene, view, self.cfg.dilation, self.cfg.tile_size).image
        return luminance(img, self.cfg.luminance_weights)

    def evaluate(self, views: Optional[Sequence[CameraView]] = None,
                 images: Optional[Sequence[np.ndarray]] = None) -> dict:
        views = self.data.test_views if views is None else views
        images = self.data.test_images if images is None else images
        scores = []
        for v, gt in zip(views, images):
            pred = self.render_intensity(v)
            gt = luminance(gt[:, :, None] if gt.ndim == 2 else gt, self.cfg.luminance_weights)
            scores.append((psnr(pred, gt), ssim_image(pred, gt)))
        arr = np.array(scores) if scores else np.zeros((0, 2))
        return {"psnr": arr[:, 0].tolist(), "ssim": arr[:, 1].tolist(),
                "mean_psnr": float(arr[:, 0].mean()) if scores else float("nan"),
                "mean_ssim": float(arr[:, 1].mean()) if scores else float("nan")}


CHECKPOINT_KIND = "spikesplat-trainer"


def trainer_checkpoint(trainer: "Trainer", dtype=np.float64):
    """Everything needed to resume: parameters, Adam moments, densify statistics, counters."""
    from .io_dataset import Checkpoint

    arrays = {f"param/{k}": v for k, v in trainer.scene.params().items()}
    arrays.update({f"adam_m/{k}": v for k, v in trainer.adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in trainer.adam.v.items()})
    arrays["densify/grad_accum"] = trainer.stats.grad_accum
    arrays["densify/denom"] = trainer.stats.denom
    meta = {"kind": CHECKPOINT_KIND, "iteration": trainer.iteration, "adam_step": trainer.adam.step,
            "adam_skipped": trainer.adam.skipped, "config": trainer.cfg.to_dict()}
    return Checkpoint(arrays, meta, np.dtype(dtype))


def scene_from_checkpoint(ckpt) -> GaussianScene:
    try:
        params = {k: ckpt.arrays[f"param/{k}"] for k in PARAM_GROUPS}
    except KeyError as exc:
        raise ValidationError(f"checkpoint lacks parameter block {exc}") from exc
    return GaussianScene.from_params(params)


def config_from_checkpoint(ckpt) -> TrainConfig:
    if ckpt.meta.get("kind") != CHECKPOINT_KIND:
        raise ValidationError("not a trainer checkpoint")
    return TrainConfig(**ckpt.meta["config"])


def restore_trainer(trainer: "Trainer", ckpt) -> "Trainer":
    """Load checkpoint state into a trainer built for the same dataset."""
    if ckpt.meta.get("kind") != CHECKPOINT_KIND:
        raise ValidationError("not a trainer checkpoint")
    trainer.scene = scene_from_checkpoint(ckpt)
    trainer.adam = AdamState({k: ckpt.arrays[f"adam_m/{k}"].copy() for k in PARAM_GROUPS},
                             {k: ckpt.arrays[f"adam_v/{k}"].copy() for k in PARAM_GROUPS},
                             int(ckpt.meta["adam_step"]), int(ckpt.meta["adam_skipped"]))
    trainer.stats = DensifyStats(ckpt.arrays["densify/grad_accum"].copy(),
                                 ckpt.arrays["densify/denom"].copy())
    trainer.iteration = int(ckpt.meta["iteration"])
    return trainer


def train_step(trainer: Trainer) -> StepResult:
    """Functional alias for :meth:`Trainer.step`."""
    return trainer.step()
