"""Permutation-equivariant attention network mapping sparse point tracks to
camera parameters and 3D points.

Four feature collections flow through the network: one vector per observed
projection (sparse, keyed by observation), one per view, one per scene
point, and a single global vector. Attention-based aggregation moves
information from projections to views/points, from views/points to the
global vector, and a pointwise update distributes it back to the
projections. After L rounds, regression heads read cameras off the view
features and 3D coordinates off the scene point features.

All computation runs on the autodiff Tensors, so the output is
differentiable with respect to every parameter.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scene import EUCLIDEAN, PROJECTIVE, Scene

LEAKY_SLOPE = 0.2    # GATv2 convention
LN_EPS = 1e-5
NUM_HEADS = 4


class IsolatedNodeError(ValueError):
    """An attention target has no incoming edge."""


class LayerNumericError(ad.NumericError):
    """Non-finite feature values, tagged with the layer that produced them."""

    def __init__(self, stage: str, layer: int | None = None):
        where = stage if layer is None else f"{stage}, layer {layer}"
        super().__init__("non-finite feature values", context=where)
        self.layer = layer
        self.stage = stage


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters. The full-scale configuration is
    layers=12, d_p=32, d_v=1024, d_s=64, d_g=2048."""

    layers: int = 12
    d_p: int = 32
    d_v: int = 1024
    d_s: int = 64
    d_g: int = 2048
    mode: str = EUCLIDEAN

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if min(self.d_p, self.d_v, self.d_s, self.d_g) < 4:
            raise ValueError("feature dimensions must be >= 4")
        if self.mode not in (EUCLIDEAN, PROJECTIVE):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def camera_outputs(self) -> int:
        return 7 if self.mode == EUCLIDEAN else 12


def _att_dim(d1: int) -> int:
    """Total attention output width: 4 heads of ceil(d1/4) each.

    Equals d1 whenever d1 is a multiple of 4; the rounding only matters for
    the dim-2 initial embeddings, where each head gets width 1.
    """
    return NUM_HEADS * ((d1 + NUM_HEADS - 1) // NUM_HEADS)


# -- parameter registry ----------------------------------------------------

def _gca_shapes(prefix: str, d1: int, d2: int, has_tgt: bool):
    yield f"{prefix}.ln_src.g", (d1,)
    yield f"{prefix}.ln_src.b", (d1,)
    if has_tgt:
        yield f"{prefix}.ln_tgt.g", (d2,)
        yield f"{prefix}.ln_tgt.b", (d2,)
        if d1 != d2:
            yield f"{prefix}.proj_in.w", (d2, d1)
            yield f"{prefix}.proj_in.b", (d1,)
    da = _att_dim(d1)
    yield f"{prefix}.att.w", (2 * d1, da)
    yield f"{prefix}.att.a", (da,)
    if da != d2:
        yield f"{prefix}.proj_out.w", (da, d2)
        yield f"{prefix}.proj_out.b", (d2,)


def _node_update_shapes(prefix: str, d_src: int, d: int, has_tgt: bool):
    yield from _gca_shapes(f"{prefix}.gca", d_src, d, has_tgt)
    yield f"{prefix}.ln.g", (d,)
    yield f"{prefix}.ln.b", (d,)
    yield f"{prefix}.ffn.w", (d, d)
    yield f"{prefix}.ffn.b", (d,)


def _global_update_shapes(prefix: str, cfg: NetConfig, has_tgt: bool):
    yield from _gca_shapes(f"{prefix}.gca_v", cfg.d_v, cfg.d_g, has_tgt)
    yield from _gca_shapes(f"{prefix}.gca_s", cfg.d_s, cfg.d_g, has_tgt)
    yield f"{prefix}.ln.g", (cfg.d_g,)
    yield f"{prefix}.ln.b", (cfg.d_g,)
    yield f"{prefix}.ffn.w", (cfg.d_g, cfg.d_g)
    yield f"{prefix}.ffn.b", (cfg.d_g,)


def _proj_update_shapes(prefix: str, cfg: NetConfig, d_p_in: int):
    yield f"{prefix}.ln_v.g", (cfg.d_v,)
    yield f"{prefix}.ln_v.b", (cfg.d_v,)
    yield f"{prefix}.ln_s.g", (cfg.d_s,)
    yield f"{prefix}.ln_s.b", (cfg.d_s,)
    yield f"{prefix}.ln_g.g", (cfg.d_g,)
    yield f"{prefix}.ln_g.b", (cfg.d_g,)
    yield f"{prefix}.ln_p.g", (d_p_in,)
    yield f"{prefix}.ln_p.b", (d_p_in,)
    yield f"{prefix}.ffn.w", (cfg.d_v + cfg.d_s + cfg.d_g + d_p_in, cfg.d_p)
    yield f"{prefix}.ffn.b", (cfg.d_p,)


def _head_shapes(prefix: str, d: int, out: int):
    yield f"{prefix}.l0.w", (d, d)
    yield f"{prefix}.l0.b", (d,)
    yield f"{prefix}.l1.w", (d, d)
    yield f"{prefix}.l1.b", (d,)
    yield f"{prefix}.l2.w", (d, out)
    yield f"{prefix}.l2.b", (out,)


def param_shapes(cfg: NetConfig) -> "OrderedDict[str, tuple]":
    """Canonical parameter enumeration; the order here fixes the layout of
    checkpoints and the draw order of initialization."""
    shapes: OrderedDict[str, tuple] = OrderedDict()

    def put(gen):
        for name, shape in gen:
            shapes[name] = shape

    put([("embed.w", (2, 2)), ("embed.b", (2,))])
    put(_node_update_shapes("init_view", 2, cfg.d_v, has_tgt=False))
    put(_node_update_shapes("init_point", 2, cfg.d_s, has_tgt=False))
    put(_global_update_shapes("init_global", cfg, has_tgt=False))
    for layer in range(cfg.layers):
        d_p_in = 2 if layer == 0 else cfg.d_p + 2
        put(_proj_update_shapes(f"layer{layer}.proj", cfg, d_p_in))
        put(_node_update_shapes(f"layer{layer}.view", cfg.d_p, cfg.d_v, has_tgt=True))
        put(_node_update_shapes(f"layer{layer}.point", cfg.d_p, cfg.d_s, has_tgt=True))
        if layer < cfg.layers - 1:
            put(_global_update_shapes(f"layer{layer}.global", cfg, has_tgt=True))
    put(_head_shapes("cam_head", cfg.d_v, cfg.camera_outputs))
    put(_head_shapes("point_head", cfg.d_s, 3))
    return shapes


def parameter_count(cfg: NetConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


class ModelParams:
    """All learned weights, addressable by canonical name."""

    def __init__(self, cfg: NetConfig, tensors: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def view(self, prefix: str) -> "_ParamView":
        return _ParamView(self.tensors, prefix)

    def count(self) -> int:
        return sum(t.values.size for t in self.tensors.values())


class _ParamView:
    def __init__(self, tensors, prefix: str):
        self._tensors = tensors
        self._prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[f"{self._prefix}.{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self._prefix}.{name}" in self._tensors

    def sub(self, name: str) -> "_ParamView":
        return _ParamView(self._tensors, f"{self._prefix}.{name}")


def init_params(cfg: NetConfig, seed: int) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN gains.

    For attention score vectors fan_in is the per-head width; for matrices
    it is the input dimension. Drawing follows canonical parameter order,
    so a seed fully determines the result.
    """
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "b" or name.endswith("ln.b"):
            values = np.zeros(shape)
        elif leaf == "g":
            values = np.ones(shape)
        elif leaf == "a":
            bound = 1.0 / np.sqrt(shape[0] // NUM_HEADS)
            values = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            values = rng.uniform(-bound, bound, size=shape)
        tensors[name] = ad.parameter(values)
    return ModelParams(cfg, tensors)


# -- building blocks -------------------------------------------------------

def _ln_affine(x: Tensor, pv, name: str) -> Tensor:
    sub = pv.sub(name)
    return ad.layer_norm(x, LN_EPS) * sub["g"] + sub["b"]


def _linear(x: Tensor, pv, name: str) -> Tensor:
    sub = pv.sub(name)
    return ad.matmul(x, sub["w"]) + sub["b"]


def gatv2_attention(src: Tensor, tgt: Tensor, edge_src: np.ndarray,
                    edge_tgt: np.ndarray, n_tgt: int, pv,
                    return_weights: bool = False):
    """Attention aggregation over a directed bipartite edge set.

    Per head, the edge score is a . leaky_relu(W [h_tgt || h_src]); scores
    are softmax-normalized over each target's in-edges and weight the
    source-side linear projections. Head outputs are concatenated. With
    return_weights, also returns the (E, heads) attention distribution.
    """
    d1 = src.shape[1]
    if tgt.shape[1] != d1:
        raise ad.ShapeError(f"gatv2: target dim {tgt.shape[1]} != source dim {d1}")
    if np.bincount(edge_tgt, minlength=n_tgt).min() == 0:
        raise IsolatedNodeError("attention target without incoming edges")
    da = _att_dim(d1)
    hd = da // NUM_HEADS
    w = pv["att.w"]
    w_tgt = ad.narrow(w, 0, 0, d1)
    w_src = ad.narrow(w, 0, d1, d1)
    s_proj = ad.matmul(src, w_src)                      # (n_src, da)
    t_proj = ad.matmul(tgt, w_tgt)                      # (n_tgt, da)
    pre = ad.gather(t_proj, edge_tgt) + ad.gather(s_proj, edge_src)
    act = ad.leaky_relu(pre, LEAKY_SLOPE)
    heads = ad.reshape(act, (-1, NUM_HEADS, hd))
    a = ad.reshape(pv["att.a"], (1, NUM_HEADS, hd))
    scores = ad.tsum(heads * a, axis=2)                 # (E, heads)
    alpha = ad.segment_softmax(scores, edge_tgt, n_tgt)
    msg = ad.reshape(ad.gather(s_proj, edge_src), (-1, NUM_HEADS, hd))
    weighted = msg * ad.reshape(alpha, (-1, NUM_HEADS, 1))
    out = ad.segment_sum(ad.reshape(weighted, (-1, da)), edge_tgt, n_tgt)
    if return_weights:
        return out, alpha
    return out


def graph_cross_attention(h1: Tensor, h2: Tensor | None, edge_src: np.ndarray,
                          edge_tgt: np.ndarray, n_tgt: int,
                          d1: int, d2: int, pv) -> Tensor:
    """Cross-attention wrapper: normalize sources (and targets, when the
    previous target features exist), project across mismatched dimensions,
    attend, and project the result back to the target dimension."""
    h1n = ad.relu(_ln_affine(h1, pv, "ln_src"))
    if h2 is not None:
        h2n = ad.relu(_ln_affine(h2, pv, "ln_tgt"))
        queries = _linear(h2n, pv, "proj_in") if d1 != d2 else h2n
    else:
        queries = ad.constant(np.zeros((n_tgt, d1)))
    out = gatv2_attention(h1n, queries, edge_src, edge_tgt, n_tgt, pv)
    if _att_dim(d1) != d2:
        out = _linear(out, pv, "proj_out")
    return out


def _node_update(p: Tensor, edge_tgt: np.ndarray, n_tgt: int,
                 prev: Tensor | None, d_src: int, d: int, pv) -> Tensor:
    edge_src = np.arange(p.shape[0])
    att = graph_cross_attention(p, prev, edge_src, edge_tgt, n_tgt, d_src, d, pv.sub("gca"))
    h = prev + att if prev is not None else att
    return h + _linear(ad.relu(_ln_affine(h, pv, "ln")), pv, "ffn")


def update_view_feats(p: Tensor, view_idx: np.ndarray, num_views: int,
                      v_prev: Tensor | None, d_src: int, d_v: int, pv) -> Tensor:
    """Aggregate each view's projection features into its view feature
    (residual), then apply a residual feed-forward update."""
    return _node_update(p, view_idx, num_views, v_prev, d_src, d_v, pv)


def update_point_feats(p: Tensor, point_idx: np.ndarray, num_points: int,
                       s_prev: Tensor | None, d_src: int, d_s: int, pv) -> Tensor:
    """Mirror image of update_view_feats over the track columns."""
    return _node_update(p, point_idx, num_points, s_prev, d_src, d_s, pv)


def update_global_feat(v: Tensor, s: Tensor, g_prev: Tensor | None,
                       cfg: NetConfig, pv) -> Tensor:
    """Two independent aggregations (views and points) summed into the
    global vector, followed by a residual feed-forward update."""
    m, n = v.shape[0], s.shape[0]
    gv = graph_cross_attention(v, g_prev, np.arange(m), np.zeros(m, dtype=np.int64),
                               1, cfg.d_v, cfg.d_g, pv.sub("gca_v"))
    gs = graph_cross_attention(s, g_prev, np.arange(n), np.zeros(n, dtype=np.int64),
                               1, cfg.d_s, cfg.d_g, pv.sub("gca_s"))
    g = g_prev + gv + gs if g_prev is not None else gv + gs
    return g + _linear(ad.relu(_ln_affine(g, pv, "ln")), pv, "ffn")


def update_proj_feats(p_prev: Tensor | None, p_in: Tensor, v: Tensor, s: Tensor,
                      g: Tensor, view_idx: np.ndarray, point_idx: np.ndarray,
                      pv) -> Tensor:
    """Pointwise update: each projection collects its view, point, and the
    global features (no aggregation), and a shared feed-forward layer maps
    the concatenation back to the projection width. The previous projection
    features act as the residual; at the first layer there are none."""
    vn = ad.relu(_ln_affine(v, pv, "ln_v"))
    sn = ad.relu(_ln_affine(s, pv, "ln_s"))
    gn = ad.relu(_ln_affine(g, pv, "ln_g"))
    pn = ad.relu(_ln_affine(p_in, pv, "ln_p"))
    n_obs = p_in.shape[0]
    z = ad.concat([
        ad.gather(vn, view_idx),
        ad.gather(sn, point_idx),
        ad.gather(gn, np.zeros(n_obs, dtype=np.int64)),
        pn,
    ], axis=1)
    delta = _linear(z, pv, "ffn")
    return p_prev + delta if p_prev is not None else delta


def _head(x: Tensor, pv) -> Tensor:
    h = ad.relu(_linear(x, pv, "l0"))
    h = ad.relu(_linear(h, pv, "l1"))
    return _linear(h, pv, "l2")


@dataclass
class FeatureState:
    """The four feature collections threaded through the layers, plus the
    immutable initial projection embedding."""

    proj: Tensor | None
    view: Tensor
    point: Tensor
    global_: Tensor
    proj_init: Tensor


@dataclass
class ForwardResult:
    """Differentiable network output.

    Euclidean mode: unit quaternions (m, 4) and centers (m, 3).
    Projective mode: row-major camera matrices (m, 12), unit Frobenius
    norm, sign fixed so the largest-magnitude entry is positive.
    """

    mode: str
    points: Tensor
    quats: Tensor | None = None
    centers: Tensor | None = None
    matrices: Tensor | None = None

    def reconstruction(self) -> "Reconstruction":
        if self.mode == EUCLIDEAN:
            return Reconstruction(mode=self.mode, quats=self.quats.values.copy(),
                                  centers=self.centers.values.copy(),
                                  points=self.points.values.copy())
        return Reconstruction(mode=self.mode,
                              matrices=self.matrices.values.reshape(-1, 3, 4).copy(),
                              points=self.points.values.copy())


@dataclass
class Reconstruction:
    """Plain-array reconstruction: per-view cameras plus 3D points."""

    mode: str
    points: np.ndarray
    quats: np.ndarray | None = None      # (m, 4) unit, euclidean mode
    centers: np.ndarray | None = None    # (m, 3)
    matrices: np.ndarray | None = None   # (m, 3, 4) projective mode

    @property
    def num_views(self) -> int:
        arr = self.quats if self.mode == EUCLIDEAN else self.matrices
        return len(arr)


def _check_finite(t: Tensor, stage: str, layer: int | None = None) -> None:
    if not np.isfinite(t.values).all():
        raise LayerNumericError(stage, layer)


def normalize_quaternions(q: Tensor) -> Tensor:
    norm = ad.sqrt(ad.tsum(q * q, axis=1, keepdims=True))
    return q / (norm + 1e-12)


def normalize_camera_matrices(p: Tensor) -> Tensor:
    """Scale each 12-vector to unit Frobenius norm; fix the sign so the
    entry of largest magnitude is positive (sign treated as constant)."""
    fro = ad.sqrt(ad.tsum(p * p, axis=1, keepdims=True))
    scaled = p / (fro + 1e-12)
    idx = np.argmax(np.abs(scaled.values), axis=1)
    lead = scaled.values[np.arange(len(idx)), idx]
    sign = np.where(lead < 0, -1.0, 1.0).reshape(-1, 1)
    return scaled * sign


def forward(scene: Scene, params: ModelParams) -> ForwardResult:
    """Run the full network on a (normalized) scene.

    Layer schedule: embed the image points, bootstrap view/point/global
    features from the embedding, then L rounds of projection, view, point,
    and global updates -- the global update is skipped on the last round --
    and finally the two regression heads.
    """
    cfg = params.cfg
    if scene.mode != cfg.mode:
        raise ValueError(f"scene mode {scene.mode!r} != model mode {cfg.mode!r}")
    m, n = scene.num_views, scene.num_points
    view_idx, point_idx = scene.view_idx, scene.point_idx

    pv = params.view
    p0 = ad.matmul(ad.constant(scene.xy), params["embed.w"]) + params["embed.b"]
    _check_finite(p0, "embedding")

    v = update_view_feats(p0, view_idx, m, None, 2, cfg.d_v, pv("init_view"))
    s = update_point_feats(p0, point_idx, n, None, 2, cfg.d_s, pv("init_point"))
    g = update_global_feat(v, s, None, cfg, pv("init_global"))
    _check_finite(g, "initial updates")

    state = FeatureState(proj=None, view=v, point=s, global_=g, proj_init=p0)
    for layer in range(cfg.layers):
        if layer == 0:
            p_in = state.proj_init
        else:
            p_in = ad.concat([state.proj, state.proj_init], axis=1)
        state.proj = update_proj_feats(state.proj, p_in, state.view, state.point,
                                       state.global_, view_idx, point_idx,
                                       pv(f"layer{layer}.proj"))
        state.view = update_view_feats(state.proj, view_idx, m, state.view,
                                       cfg.d_p, cfg.d_v, pv(f"layer{layer}.view"))
        state.point = update_point_feats(state.proj, point_idx, n, state.point,
                                         cfg.d_p, cfg.d_s, pv(f"layer{layer}.point"))
        if layer < cfg.layers - 1:
            state.global_ = update_global_feat(state.view, state.point, state.global_,
                                               cfg, pv(f"layer{layer}.global"))
        _check_finite(state.view, "layer update", layer)
        _check_finite(state.point, "layer update", layer)

    cams_raw = _head(ad.relu(state.view), pv("cam_head"))
    points = _head(ad.relu(state.point), pv("point_head"))
    _check_finite(cams_raw, "camera head")
    _check_finite(points, "point head")

    if cfg.mode == EUCLIDEAN:
        centers = ad.narrow(cams_raw, 1, 0, 3)
        quats = normalize_quaternions(ad.narrow(cams_raw, 1, 3, 4))
        return ForwardResult(mode=EUCLIDEAN, points=points, quats=quats, centers=centers)
    matrices = normalize_camera_matrices(cams_raw)
    return ForwardResult(mode=PROJECTIVE, points=points, matrices=matrices)
