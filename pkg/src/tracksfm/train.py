"""Training: Adam with warmup/decay schedule, subsequence sampling, camera
rotation augmentation, artificial outlier injection, validation tracking,
and bit-exact checkpointing.

Every random decision inside the loop draws from a generator derived from
(seed, iteration), so training is a pure function of (data, config, seed)
and resuming from a checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .network import ModelParams, NetConfig, forward, init_params, param_shapes
from .objective import loss, normalize_param_grads
from .rotations import axis_angle_to_matrix, matrix_to_quat, quat_to_matrix
from .scene import EUCLIDEAN, Scene, SceneError, subsample_views


class InfeasibleOutlierRateError(SceneError):
    """Coverage lower bounds leave too few selectable observations."""


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    alpha_range_deg: tuple = (-15.0, 15.0)
    gamma_range_deg: tuple = (-20.0, 20.0)


@dataclass(frozen=True)
class OutlierConfig:
    enabled: bool = False
    rate: float = 0.10


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and data-handling settings for train_loop.

    The learning rate warms up linearly from 0 over warmup_iters
    iterations, then decays exponentially by decay_factor every
    decay_every iterations. constant_lr switches to a flat base_lr, the
    fine-tuning regime.
    """

    net: NetConfig = field(default_factory=NetConfig)
    base_lr: float = 1e-4
    warmup_iters: int = 2500
    decay_factor: float = 10.0
    decay_every: int = 250000
    epochs: int = 1000
    validate_every: int = 250
    subseq_min: int = 10
    subseq_max: int = 20
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    outliers: OutlierConfig = field(default_factory=OutlierConfig)
    seed: int = 0
    constant_lr: bool = False

    def __post_init__(self):
        if self.warmup_iters < 0 or self.base_lr < 0:
            raise ValueError("warmup_iters and base_lr must be non-negative")
        if not 0 <= self.outliers.rate < 1:
            raise ValueError("outlier rate must lie in [0, 1)")
        if self.subseq_min > self.subseq_max or self.subseq_min < 2:
            raise ValueError("bad subsequence range")
        a, g = self.aug.alpha_range_deg, self.aug.gamma_range_deg
        if a[0] > a[1] or g[0] > g[1]:
            raise ValueError("augmentation angle ranges must be ordered")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["net"] = NetConfig(**d.get("net", {}))
        d["aug"] = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in d.get("aug", {}).items()})
        d["outliers"] = OutlierConfig(**d.get("outliers", {}))
        return cls(**d)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Learning rate at a 0-based iteration index.

    Linear warmup from 0 to base_lr over the first warmup_iters
    iterations, then base_lr * decay_factor**(-(it - warmup)/decay_every).
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if cfg.constant_lr:
        return cfg.base_lr
    if iteration <= cfg.warmup_iters:
        if cfg.warmup_iters == 0:
            return cfg.base_lr
        return cfg.base_lr * iteration / cfg.warmup_iters
    return cfg.base_lr * cfg.decay_factor ** (-(iteration - cfg.warmup_iters) / cfg.decay_every)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(m={k: np.zeros_like(p.values) for k, p in params.tensors.items()},
                   v={k: np.zeros_like(p.values) for k, p in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Standard Adam update with bias correction, in place on the params."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        p = params[name]
        if g.shape != p.values.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != param shape {p.values.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# -- data augmentation -----------------------------------------------------

@dataclass
class AugmentDraws:
    alphas_deg: np.ndarray
    gammas_deg: np.ndarray
    axis_angles: np.ndarray   # direction of the in-plane gamma axis, radians


def augment(scene: Scene, rng: np.random.Generator,
            alpha_range_deg=(-15.0, 15.0), gamma_range_deg=(-20.0, 20.0),
            return_draws: bool = False):
    """Rotate every camera about its own center and re-render observations.

    First a rotation by alpha about the principal (viewing) axis, then by
    gamma about a uniformly random axis orthogonal to it. Scene points stay
    fixed; image points are replaced by exact reprojections under the
    perturbed poses, and gt_poses are updated to match. Requires a
    normalized euclidean scene with ground-truth poses and points.
    """
    if scene.mode != EUCLIDEAN:
        raise SceneError("augmentation is defined for euclidean scenes")
    if scene.gt_quats is None or scene.gt_points is None:
        raise SceneError("augmentation requires ground-truth poses and points")
    if scene.intrinsics is not None and not np.allclose(
            scene.intrinsics, np.eye(3), atol=1e-12):
        raise SceneError("augmentation expects normalized (identity-K) observations")

    m = scene.num_views
    alphas = rng.uniform(*alpha_range_deg, size=m)
    thetas = rng.uniform(0.0, 2.0 * np.pi, size=m)
    gammas = rng.uniform(*gamma_range_deg, size=m)

    new_quats = np.empty_like(scene.gt_quats)
    R_new = np.empty((m, 3, 3))
    for i in range(m):
        R = quat_to_matrix(scene.gt_quats[i])
        Rz = axis_angle_to_matrix(np.array([0.0, 0.0, 1.0]), np.deg2rad(alphas[i]))
        axis = np.array([np.cos(thetas[i]), np.sin(thetas[i]), 0.0])
        Rg = axis_angle_to_matrix(axis, np.deg2rad(gammas[i]))
        R_new[i] = Rg @ Rz @ R
        new_quats[i] = matrix_to_quat(R_new[i])

    z = np.einsum("kab,kb->ka", R_new[scene.view_idx],
                  scene.gt_points[scene.point_idx] - scene.gt_centers[scene.view_idx])
    if np.any(z[:, 2] <= 0):
        raise NumericError("augmentation rotated a point behind its camera")
    xy = z[:, :2] / z[:, 2:3]
    out = replace(scene, xy=xy, gt_quats=new_quats)
    if return_draws:
        return out, AugmentDraws(alphas, gammas, thetas)
    return out


# -- artificial outlier injection -------------------------------------------

def inject_outliers(scene: Scene, rate: float, rng: np.random.Generator,
                    max_rounds: int = 50) -> tuple[Scene, np.ndarray]:
    """Replace a fraction of the measurements with per-view bivariate
    normal draws fit to the surviving inliers.

    Selection protects coverage: observations in views with <= 8 visible
    points, and of points visible in <= 2 views, are fixed as inliers up
    front. Candidates are oversampled at the harmonic mean of the needed
    fraction and 1, any candidate whose selection would push a view below
    8 or a point below 2 inliers is demoted (fixing that whole view/point),
    and the cycle repeats until exactly round(rate * N) outliers are
    selectable. Returns the corrupted scene and the outlier mask in
    canonical observation order; the caller keeps the original scene as
    the learning target.
    """
    if not 0 <= rate < 1:
        raise ValueError("rate must lie in [0, 1)")
    N = scene.num_observations
    mask = np.zeros(N, dtype=bool)
    target = int(round(rate * N))
    if target == 0:
        return scene, mask

    m, n = scene.num_views, scene.num_points
    vi, pi = scene.view_idx, scene.point_idx
    points_per_view = np.bincount(vi, minlength=m)
    views_per_point = np.bincount(pi, minlength=n)
    fixed = (points_per_view[vi] <= 8) | (views_per_point[pi] <= 2)

    chosen = None
    for _ in range(max_rounds):
        pool = np.flatnonzero(~fixed)
        if pool.size < target:
            raise InfeasibleOutlierRateError(
                f"only {pool.size} selectable observations for {target} outliers")
        nu = target / pool.size
        frac = 1.0 / (0.5 / nu + 0.5)
        k = min(pool.size, max(target, int(round(frac * pool.size))))
        cand = np.zeros(N, dtype=bool)
        cand[rng.choice(pool, size=k, replace=False)] = True

        inlier_pv = np.bincount(vi[~cand], minlength=m)
        inlier_vp = np.bincount(pi[~cand], minlength=n)
        bad = (inlier_pv < 8)[vi] | (inlier_vp < 2)[pi]
        if bad.any():
            fixed |= bad
            cand &= ~bad
        remaining = np.flatnonzero(cand)
        if remaining.size >= target:
            chosen = rng.choice(remaining, size=target, replace=False)
            break
    if chosen is None:
        raise InfeasibleOutlierRateError("selection did not converge")
    mask[chosen] = True

    xy = scene.xy.copy()
    for i in range(m):
        out_here = np.flatnonzero(mask & (vi == i))
        if out_here.size == 0:
            continue
        inl = scene.xy[(vi == i) & ~mask]
        mean = inl.mean(axis=0)
        cov = np.cov(inl, rowvar=False, ddof=1)
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            lam = float(np.max(np.linalg.eigvalsh(cov)))
            L = np.sqrt(max(lam, 0.0)) * np.eye(2)
        draws = rng.standard_normal((out_here.size, 2))
        xy[out_here] = mean + draws @ L.T
    return replace(scene, xy=xy), mask


# -- checkpointing -----------------------------------------------------------

_MAGIC = b"TSFMCKP1"


@dataclass
class Checkpoint:
    """Everything needed to continue training bit-exactly."""

    train_config: TrainConfig
    param_values: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    iteration: int
    epoch: int
    val_history: list
    best_val: float | None = None

    @classmethod
    def snapshot(cls, cfg: TrainConfig, params: ModelParams, state: AdamState,
                 iteration: int, epoch: int, val_history, best_val) -> "Checkpoint":
        return cls(
            train_config=cfg,
            param_values={k: p.values.copy() for k, p in params.tensors.items()},
            adam_m={k: v.copy() for k, v in state.m.items()},
            adam_v={k: v.copy() for k, v in state.v.items()},
            adam_t=state.t,
            iteration=iteration,
            epoch=epoch,
            val_history=list(val_history),
            best_val=best_val,
        )

    def restore_params(self) -> ModelParams:
        params = init_params(self.train_config.net, seed=0)
        for name, values in self.param_values.items():
            params[name].values = values.copy()
        return params

    def restore_adam(self) -> AdamState:
        return AdamState(m={k: v.copy() for k, v in self.adam_m.items()},
                         v={k: v.copy() for k, v in self.adam_v.items()},
                         t=self.adam_t)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary container: magic, u64 header length, JSON header, then raw
    little-endian float64 buffers (params, Adam m, Adam v) in canonical
    parameter order."""
    names = list(param_shapes(ckpt.train_config.net).keys())
    header = {
        "format_version": 1,
        "train_config": ckpt.train_config.to_dict(),
        "adam_t": ckpt.adam_t,
        "iteration": ckpt.iteration,
        "epoch": ckpt.epoch,
        "val_history": ckpt.val_history,
        "best_val": ckpt.best_val,
        "params": [[name, list(ckpt.param_values[name].shape)] for name in names],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for group in (ckpt.param_values, ckpt.adam_m, ckpt.adam_v):
            for name in names:
                f.write(np.ascontiguousarray(group[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg = TrainConfig.from_dict(header["train_config"])
        groups = []
        for _ in range(3):
            buffers = {}
            for name, shape in header["params"]:
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
                buffers[name] = data.astype(np.float64)
            groups.append(buffers)
    return Checkpoint(
        train_config=cfg,
        param_values=groups[0], adam_m=groups[1], adam_v=groups[2],
        adam_t=header["adam_t"], iteration=header["iteration"],
        epoch=header["epoch"],
        val_history=[tuple(x) for x in header["val_history"]],
        best_val=header["best_val"],
    )


# -- the loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint | None
    loss_history: np.ndarray
    val_history: list
    aborted: bool = False
    abort_reason: str | None = None


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration]))


def sample_subsequence(scene: Scene, rng: np.random.Generator,
                       lo: int, hi: int) -> Scene:
    """Contiguous window of views, length uniform in [min(lo, m),
    min(hi, m)], uniform start; scenes are capture-ordered."""
    m = scene.num_views
    w_hi = min(hi, m)
    w_lo = min(lo, m)
    for _ in range(8):
        w = int(rng.integers(w_lo, w_hi + 1))
        start = int(rng.integers(0, m - w + 1))
        try:
            sub, _ = subsample_views(scene, np.arange(start, start + w))
            return sub
        except SceneError:
            continue
    return scene


def validation_error(scenes, params: ModelParams) -> float:
    """Mean reprojection over full validation scenes."""
    values = []
    for scene in scenes:
        out = forward(scene, params)
        _, rep = loss(scene, out)
        values.append(rep.mean_reprojection)
    return float(np.mean(values))


def train_loop(scenes, val_scenes, cfg: TrainConfig,
               resume_from: Checkpoint | None = None,
               iteration_callback=None) -> TrainResult:
    """Run the full schedule over the training scenes.

    One epoch samples one subsequence per training scene, in list order.
    Per iteration: subsample views, optionally augment, optionally inject
    outliers (the network sees the corrupted scene, the loss targets the
    clean one), forward, backward, global gradient normalization, Adam at
    the scheduled rate. Validation runs every validate_every epochs and the
    best-validation checkpoint is retained. On a numeric failure the loop
    aborts and returns the last good state.
    """
    if not scenes:
        raise ValueError("no training scenes")
    if resume_from is not None:
        params = resume_from.restore_params()
        state = resume_from.restore_adam()
        iteration = resume_from.iteration
        start_epoch = resume_from.epoch
        val_history = list(resume_from.val_history)
        best_val = resume_from.best_val
    else:
        params = init_params(cfg.net, cfg.seed)
        state = AdamState.zeros(params)
        iteration = 0
        start_epoch = 0
        val_history = []
        best_val = None
    best = None
    losses = []

    for epoch in range(start_epoch, cfg.epochs):
        for scene in scenes:
            rng = _iteration_rng(cfg.seed, iteration)
            try:
                sub = sample_subsequence(scene, rng, cfg.subseq_min, cfg.subseq_max)
                if cfg.aug.enabled:
                    sub = augment(sub, rng, cfg.aug.alpha_range_deg,
                                  cfg.aug.gamma_range_deg)
                target = sub
                if cfg.outliers.enabled:
                    net_input, _ = inject_outliers(sub, cfg.outliers.rate, rng)
                else:
                    net_input = sub
                ad.zero_grads(params.tensors.values())
                out = forward(net_input, params)
                total, report = loss(target, out)
                ad.backward(total, params=params.tensors.values())
                normalize_param_grads(params)
                grads = {k: p.grad for k, p in params.tensors.items()}
                adam_step(params, grads, state, lr_at(iteration, cfg))
            except NumericError as e:
                ckpt = Checkpoint.snapshot(cfg, params, state, iteration, epoch,
                                           val_history, best_val)
                return TrainResult(checkpoint=ckpt, best=best,
                                   loss_history=np.asarray(losses),
                                   val_history=val_history,
                                   aborted=True, abort_reason=str(e))
            losses.append(report.mean_reprojection)
            if iteration_callback is not None:
                iteration_callback(iteration=iteration, net_input=net_input,
                                   target=target, report=report)
            iteration += 1
        if val_scenes and (epoch + 1) % cfg.validate_every == 0:
            val = validation_error(val_scenes, params)
            val_history.append((epoch + 1, val))
            if best_val is None or val < best_val:
                best_val = val
                best = Checkpoint.snapshot(cfg, params, state, iteration,
                                           epoch + 1, val_history, best_val)

    final = Checkpoint.snapshot(cfg, params, state, iteration, cfg.epochs,
                                val_history, best_val)
    return TrainResult(checkpoint=final, best=best,
                       loss_history=np.asarray(losses), val_history=val_history)
