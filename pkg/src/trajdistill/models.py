"""Desk-scale teacher (agent-centric) and student (scene-centric) models.

The teacher re-encodes the whole scene in each predicted agent's frame:
road polylines through a shared point MLP with max-pooling, traffic signals
and motion histories through small LSTMs, neighbor encodings max-pooled into
one interaction vector, everything concatenated and decoded by an MLP into a
Gaussian-mixture trajectory distribution. Because every input is expressed
relative to the agent, the output is invariant to rigid transforms of the
scene.

The student rasterizes the scene once into a pillar grid, runs a small
convolutional backbone, and decodes each agent from a feature patch cropped
at the agent's cell. Scene encoding cost is independent of the number of
agents; per-agent work is only the patch decode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import gmm as gm
from .diffcore import Tensor
from .geom import Pose2, world_to_agent
from .scenegen import Scene

PARAMS_SCHEMA_VERSION = 1

ROAD_KINDS = ("lane_center", "boundary", "crosswalk")
SIGNAL_STATES = ("red", "yellow", "green", "unknown")

# rasterized point categories for the student grid
RASTER_KINDS = ("lane_center", "boundary", "crosswalk", "agent", "agent_history") + tuple(
    f"signal_{s}" for s in SIGNAL_STATES
)
# in-cell offset + one-hot + velocity + history-age (0 = current frame)
RASTER_FEATURES = 2 + len(RASTER_KINDS) + 2 + 1


class OutOfExtentError(ValueError):
    pass


@dataclass
class TeacherConfig:
    history_len: int = 10
    horizon: int = 16
    num_modes: int = 6
    hidden: int = 64
    neighbor_radius: float = 50.0
    max_neighbors: int = 16
    max_polylines: int = 32
    points_per_polyline: int = 10
    future_dt: float = 0.2
    log_sigma_floor: float = -1.0

    def __post_init__(self):
        if self.num_modes < 1 or self.horizon < 1 or self.hidden < 1:
            raise ValueError("num_modes, horizon and hidden must be positive")


@dataclass
class StudentConfig:
    grid_h: int = 64
    grid_w: int = 64
    cell_size: float = 2.0
    pillar_embed: int = 32
    conv_channels: tuple = (32, 32)
    patch: int = 5
    num_modes: int = 6
    horizon: int = 16
    hidden: int = 64
    history_len: int = 10
    future_dt: float = 0.2
    log_sigma_floor: float = 0.0

    def __post_init__(self):
        if self.grid_h * self.grid_w < self.patch**2:
            raise ValueError("grid smaller than decode patch")
        if self.num_modes < 1 or self.horizon < 1:
            raise ValueError("num_modes and horizon must be positive")


@dataclass
class ModelParams:
    kind: str  # teacher | student
    config: TeacherConfig | StudentConfig
    buffers: dict[str, Tensor]
    schema_version: int = PARAMS_SCHEMA_VERSION
    stats: dict = field(default_factory=dict)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.buffers.items()}

    def num_params(self) -> int:
        return sum(t.data.size for t in self.buffers.values())


# ---------------------------------------------------------------------------
# parameter initialization


def _shapes_mlp(prefix: str, dims: list[int]) -> list[tuple[str, tuple]]:
    out = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out.append((f"{prefix}.w{i}", (a, b)))
        out.append((f"{prefix}.b{i}", (1, b)))
    return out


def _shapes_lstm(prefix: str, in_dim: int, hidden: int) -> list[tuple[str, tuple]]:
    return [
        (f"{prefix}.wx", (in_dim, 4 * hidden)),
        (f"{prefix}.wh", (hidden, 4 * hidden)),
        (f"{prefix}.b", (1, 4 * hidden)),
        (f"{prefix}.h0", (1, hidden)),
        (f"{prefix}.c0", (1, hidden)),
    ]


ROAD_POINT_FEATURES = 2 + len(ROAD_KINDS) + 1
SIGNAL_STEP_FEATURES = 2 + len(SIGNAL_STATES)
TRACK_STEP_FEATURES = 7  # x, y, cos/sin of relative heading, vx, vy, valid


def _teacher_shapes(cfg: TeacherConfig) -> list[tuple[str, tuple]]:
    h = cfg.hidden
    out_dim = cfg.num_modes * (cfg.horizon * 5 + 1)
    shapes = []
    shapes += _shapes_mlp("road", [ROAD_POINT_FEATURES, h, h])
    shapes += [("road.empty", (1, h))]
    shapes += _shapes_lstm("signal", SIGNAL_STEP_FEATURES, h)
    shapes += [("signal.empty", (1, h))]
    shapes += _shapes_lstm("history", TRACK_STEP_FEATURES, h)
    shapes += _shapes_lstm("neighbor", TRACK_STEP_FEATURES, h)
    shapes += [("neighbor.empty", (1, h))]
    shapes += _shapes_mlp("decoder", [4 * h, h, h, out_dim])
    return shapes


def _student_shapes(cfg: StudentConfig) -> list[tuple[str, tuple]]:
    e = cfg.pillar_embed
    out_dim = cfg.num_modes * (cfg.horizon * 5 + 1)
    shapes = []
    shapes += _shapes_mlp("pillar", [RASTER_FEATURES, e, e])
    chans = [e] + list(cfg.conv_channels)
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        shapes.append((f"conv{i}.w", (3, 3, cin, cout)))
        shapes.append((f"conv{i}.b", (cout,)))
    decode_in = cfg.patch * cfg.patch * chans[-1] + 3  # + heading cos/sin + speed
    shapes += _shapes_mlp("decoder", [decode_in, cfg.hidden, cfg.hidden, out_dim])
    return shapes


def init_params(config: TeacherConfig | StudentConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in-scaled uniform initialization; deterministic per rng state."""
    kind = "teacher" if isinstance(config, TeacherConfig) else "student"
    shapes = _teacher_shapes(config) if kind == "teacher" else _student_shapes(config)
    buffers: dict[str, Tensor] = {}
    for name, shape in shapes:
        leaf = name.split(".")[-1]
        if leaf in ("h0", "c0") or leaf.startswith("b"):
            buffers[name] = Tensor(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            buffers[name] = Tensor(rng.uniform(-bound, bound, shape))
    return ModelParams(kind=kind, config=config, buffers=buffers)


def param_count(config: TeacherConfig | StudentConfig) -> int:
    shapes = _teacher_shapes(config) if isinstance(config, TeacherConfig) else _student_shapes(config)
    return sum(int(np.prod(s)) for _, s in shapes)


# ---------------------------------------------------------------------------
# shared network building blocks


def _rows(b: int) -> Tensor:
    return Tensor(np.ones((b, 1)))


def _mlp(params: ModelParams, prefix: str, x, n_layers: int, final_relu: bool = False):
    bufs = params.buffers
    ones = _rows(x.data.shape[0] if isinstance(x, Tensor) else np.asarray(x).shape[0])
    h = x
    for i in range(n_layers):
        h = dc.matmul(h, bufs[f"{prefix}.w{i}"]) + dc.matmul(ones, bufs[f"{prefix}.b{i}"])
        if i < n_layers - 1 or final_relu:
            h = dc.relu(h)
    return h


def _lstm_last(params: ModelParams, prefix: str, xs: np.ndarray) -> Tensor:
    """Run an LSTM over xs (B, L, F); return the last hidden state (B, H)."""
    bufs = params.buffers
    b = xs.shape[0]
    hidden = bufs[f"{prefix}.h0"].data.shape[1]
    ones = _rows(b)
    h = dc.matmul(ones, bufs[f"{prefix}.h0"])
    c = dc.matmul(ones, bufs[f"{prefix}.c0"])
    bias = dc.matmul(ones, bufs[f"{prefix}.b"])
    for t in range(xs.shape[1]):
        z = dc.matmul(xs[:, t, :], bufs[f"{prefix}.wx"]) + dc.matmul(h, bufs[f"{prefix}.wh"]) + bias
        i = dc.sigmoid(dc.slice_cols(z, 0, hidden))
        f = dc.sigmoid(dc.slice_cols(z, hidden, 2 * hidden))
        g = dc.tanh(dc.slice_cols(z, 2 * hidden, 3 * hidden))
        o = dc.sigmoid(dc.slice_cols(z, 3 * hidden, 4 * hidden))
        c = f * c + i * g
        h = o * dc.tanh(c)
    return h


def _decode_gmm(
    raw: Tensor,
    k: int,
    horizon: int,
    anchor: Pose2 | None,
    cv_anchor: np.ndarray | None = None,
    log_sigma_floor: float = -1.0,
) -> gm.TrajectoryGMM:
    """Split a (1, K*(T*5+1)) decoder output into a TrajectoryGMM.

    With ``cv_anchor`` (T, 2), the decoded means are residuals on a
    constant-velocity rollout, which conditions training far better than
    predicting absolute displacements from scratch.
    """
    body = dc.slice_cols(raw, 0, k * horizon * 5)
    logits = dc.reshape(dc.slice_cols(raw, k * horizon * 5, k * horizon * 5 + k), (k,))
    body = dc.reshape(body, (k, horizon, 5))
    flat = dc.reshape(body, (k * horizon, 5))
    means = dc.reshape(dc.slice_cols(flat, 0, 2), (k, horizon, 2))
    if cv_anchor is not None:
        means = means + Tensor(np.tile(cv_anchor, (k, 1, 1)))
    # the decode head keeps sigma away from the global clamp's lower bound:
    # fully collapsed sigmas turn the likelihood terms of well-fit steps into
    # high-magnitude noise on the shared weights, which stalls training
    log_sig = dc.clamp(dc.slice_cols(flat, 2, 4), log_sigma_floor, 4.0)
    rho_raw = dc.slice_cols(flat, 4, 5)
    covs = gm.clamp_cov_params(dc.reshape(dc.concat([log_sig, rho_raw], axis=1), (k, horizon, 3)))
    return gm.TrajectoryGMM(means=means, cov_params=covs, logits=logits, anchor=anchor)


def _cv_rollout(scene: Scene, agent_id: str, anchor: Pose2, horizon: int, dt: float) -> np.ndarray:
    agent = scene.agent_by_id(agent_id)
    v = world_to_agent(Pose2(0.0, 0.0, anchor.heading), agent.history[-1, 3:5])
    t = (np.arange(horizon) + 1.0) * dt
    return np.outer(t, v)


# ---------------------------------------------------------------------------
# teacher


def _agent_anchor(scene: Scene, agent_id: str) -> Pose2:
    agent = scene.agent_by_id(agent_id)
    if not agent.history[-1, 5]:
        raise ValueError(f"agent {agent_id}: no valid current state")
    x, y, heading = agent.current_pose()
    return Pose2(x, y, heading)


def _track_features(history: np.ndarray, anchor: Pose2) -> np.ndarray:
    """History rows in the anchor frame: position, relative heading, velocity."""
    out = np.zeros((history.shape[0], TRACK_STEP_FEATURES))
    pos = world_to_agent(anchor, history[:, :2])
    vel = world_to_agent(Pose2(0.0, 0.0, anchor.heading), history[:, 3:5])
    out[:, :2] = pos
    out[:, 2] = np.cos(history[:, 2] - anchor.heading)
    out[:, 3] = np.sin(history[:, 2] - anchor.heading)
    out[:, 4:6] = vel
    out[:, 6] = history[:, 5]
    # zero out invalid rows except the flag, so padding carries no position signal
    invalid = history[:, 5] == 0.0
    out[invalid, :6] = 0.0
    return out


def _resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], n)
    out = np.empty((n, 2))
    out[:, 0] = np.interp(target, s, points[:, 0])
    out[:, 1] = np.interp(target, s, points[:, 1])
    return out


def teacher_forward(scene: Scene, agent_id: str, params: ModelParams) -> gm.TrajectoryGMM:
    """Predict a TrajectoryGMM for one agent, everything in the agent's frame."""
    cfg: TeacherConfig = params.config
    anchor = _agent_anchor(scene, agent_id)
    agent = scene.agent_by_id(agent_id)
    bufs = params.buffers
    h = cfg.hidden

    # road polylines: nearest max_polylines by closest-point distance
    if scene.roadgraph:
        dists = [
            float(np.min(np.linalg.norm(p.points - [anchor.x, anchor.y], axis=1)))
            for p in scene.roadgraph
        ]
        order = np.argsort(dists, kind="stable")[: cfg.max_polylines]
    else:
        order = []
    if len(order) > 0:
        per_poly = []
        for idx in order:
            poly = scene.roadgraph[idx]
            pts = world_to_agent(anchor, _resample_polyline(poly.points, cfg.points_per_polyline))
            feats = np.zeros((cfg.points_per_polyline, ROAD_POINT_FEATURES))
            feats[:, :2] = pts
            feats[:, 2 + ROAD_KINDS.index(poly.kind)] = 1.0
            feats[:, -1] = poly.speed_limit_mps / 10.0
            per_poly.append(feats)
        road_pts = np.concatenate(per_poly, axis=0)
        enc = _mlp(params, "road", Tensor(road_pts), 2, final_relu=True)
        enc = dc.reshape(enc, (len(order), cfg.points_per_polyline, h))
        per_poly_vec = dc.reduce_max_over_set(enc, axis=1)
        road_emb = dc.reshape(dc.reduce_max_over_set(per_poly_vec, axis=0), (1, h))
    else:
        road_emb = dc.matmul(_rows(1), bufs["road.empty"])

    # traffic signals: shared LSTM over per-step (position, state one-hot)
    if scene.signals:
        sig_feats = np.zeros((len(scene.signals), scene.history_len, SIGNAL_STEP_FEATURES))
        for i, sig in enumerate(scene.signals):
            pos = world_to_agent(anchor, sig.position)
            sig_feats[i, :, :2] = pos
            for t, state in enumerate(sig.states):
                sig_feats[i, t, 2 + SIGNAL_STATES.index(state)] = 1.0
        sig_h = _lstm_last(params, "signal", sig_feats)
        signal_emb = dc.reshape(dc.reduce_max_over_set(sig_h, axis=0), (1, h))
    else:
        signal_emb = dc.matmul(_rows(1), bufs["signal.empty"])

    # own motion history
    hist_feats = _track_features(agent.history, anchor)[None]
    history_emb = _lstm_last(params, "history", hist_feats)

    # neighbors: nearest-first within radius, capped
    others = [a for a in scene.agents if a.id != agent_id and a.history[-1, 5]]
    dists = [float(np.linalg.norm(a.history[-1, :2] - [anchor.x, anchor.y])) for a in others]
    keep = [
        others[i]
        for i in np.argsort(dists, kind="stable")
        if dists[i] <= cfg.neighbor_radius
    ][: cfg.max_neighbors]
    if keep:
        nb_feats = np.stack([_track_features(a.history, anchor) for a in keep])
        nb_h = _lstm_last(params, "neighbor", nb_feats)
        neighbor_emb = dc.reshape(dc.reduce_max_over_set(nb_h, axis=0), (1, h))
    else:
        neighbor_emb = dc.matmul(_rows(1), bufs["neighbor.empty"])

    emb = dc.concat([road_emb, signal_emb, history_emb, neighbor_emb], axis=1)
    raw = _mlp(params, "decoder", emb, 3)
    cv = _cv_rollout(scene, agent_id, anchor, cfg.horizon, cfg.future_dt)
    return _decode_gmm(
        raw, cfg.num_modes, cfg.horizon, anchor, cv_anchor=cv,
        log_sigma_floor=cfg.log_sigma_floor,
    )


# ---------------------------------------------------------------------------
# student


@dataclass
class SceneEncoding:
    grid: Tensor  # (H, W, C)
    scene_id: str


def _raster_points(scene: Scene, cfg: StudentConfig) -> tuple[np.ndarray, np.ndarray]:
    """All raster points with features; returns (features (N, F), cell ids (N,)).

    Points outside the grid extent are dropped.
    """
    feats = []
    coords = []

    def add(xy: np.ndarray, kind: str, vel=(0.0, 0.0), age: float = 0.0):
        f = np.zeros(RASTER_FEATURES)
        f[2 + RASTER_KINDS.index(kind)] = 1.0
        f[-3:-1] = vel
        f[-1] = age
        coords.append(xy)
        feats.append(f)

    for poly in scene.roadgraph:
        seg = np.linalg.norm(np.diff(poly.points, axis=0), axis=1).sum()
        n = max(2, int(seg / cfg.cell_size) + 1)
        for p in _resample_polyline(poly.points, n):
            add(p, poly.kind)
    for sig in scene.signals:
        add(sig.position, f"signal_{sig.states[-1]}")
    coords = np.array(coords) if coords else np.zeros((0, 2))
    feats = np.array(feats) if feats else np.zeros((0, RASTER_FEATURES))

    active = [a for a in scene.agents if a.history[-1, 5]]
    if active:
        # current boxes: 5 sample points each, vectorized over agents
        poses = np.array([a.current_pose() for a in active])
        lw = np.array([[a.length, a.width] for a in active])
        vel = np.array([a.history[-1, 3:5] for a in active]) / 10.0
        c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
        rot = np.stack(
            [np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=1
        )  # (n, 2, 2)
        base = np.array(
            [[0.0, 0.0], [0.5, 0.5], [0.5, -0.5], [-0.5, 0.5], [-0.5, -0.5]]
        )
        offs = base[None, :, :] * lw[:, None, :]  # (n, 5, 2)
        box_xy = np.einsum("nij,nkj->nki", rot, offs) + poses[:, None, :2]
        n_box = len(active) * 5
        f = np.zeros((n_box, RASTER_FEATURES))
        f[:, 2 + RASTER_KINDS.index("agent")] = 1.0
        f[:, -3:-1] = np.repeat(vel, 5, axis=0)
        coords = np.concatenate([coords, box_xy.reshape(n_box, 2)])
        feats = np.concatenate([feats, f])

        # past poses as single points so the grid carries motion history
        hist = np.stack([a.history for a in active])  # (n, H, 6)
        last = hist.shape[1] - 1
        valid = hist[:, :last, 5] > 0
        if valid.any():
            h_xy = hist[:, :last, :2][valid]
            h_vel = hist[:, :last, 3:5][valid] / 10.0
            age = np.broadcast_to(
                (last - np.arange(last))[None, :] / 10.0, valid.shape
            )[valid]
            f = np.zeros((len(h_xy), RASTER_FEATURES))
            f[:, 2 + RASTER_KINDS.index("agent_history")] = 1.0
            f[:, -3:-1] = h_vel
            f[:, -1] = age
            coords = np.concatenate([coords, h_xy])
            feats = np.concatenate([feats, f])
    half_w = cfg.grid_w * cfg.cell_size / 2.0
    half_h = cfg.grid_h * cfg.cell_size / 2.0
    ix = np.floor((coords[:, 0] + half_w) / cfg.cell_size).astype(int) if len(coords) else np.zeros(0, int)
    iy = np.floor((coords[:, 1] + half_h) / cfg.cell_size).astype(int) if len(coords) else np.zeros(0, int)
    inside = (ix >= 0) & (ix < cfg.grid_w) & (iy >= 0) & (iy < cfg.grid_h)
    ix, iy = ix[inside], iy[inside]
    coords, feats = coords[inside], feats[inside]
    # in-cell offsets in [0, 1)
    feats[:, 0] = (coords[:, 0] + half_w) / cfg.cell_size - ix
    feats[:, 1] = (coords[:, 1] + half_h) / cfg.cell_size - iy
    return feats, iy * cfg.grid_w + ix


def student_forward_scene(scene: Scene, params: ModelParams) -> SceneEncoding:
    """Rasterize and encode the whole scene once (agent-count independent)."""
    cfg: StudentConfig = params.config
    params.stats["scene_encodes"] = params.stats.get("scene_encodes", 0) + 1
    feats, cells = _raster_points(scene, cfg)
    num_cells = cfg.grid_h * cfg.grid_w
    if len(feats):
        emb = _mlp(params, "pillar", Tensor(feats), 2, final_relu=True)
        grid_flat = dc.scatter_max_pool(emb, cells, num_cells)
    else:
        grid_flat = Tensor(np.zeros((num_cells, cfg.pillar_embed)))
    grid = dc.reshape(grid_flat, (cfg.grid_h, cfg.grid_w, cfg.pillar_embed))
    for i in range(len(cfg.conv_channels)):
        grid = dc.relu(dc.conv2d(grid, params.buffers[f"conv{i}.w"], params.buffers[f"conv{i}.b"]))
    return SceneEncoding(grid=grid, scene_id=scene.scene_id)


def _patch_indices(cfg: StudentConfig, anchor: Pose2, agent_id: str) -> np.ndarray:
    """Flat grid indices of the patch centered on the agent's cell."""
    half_w = cfg.grid_w * cfg.cell_size / 2.0
    half_h = cfg.grid_h * cfg.cell_size / 2.0
    ix = int(math.floor((anchor.x + half_w) / cfg.cell_size))
    iy = int(math.floor((anchor.y + half_h) / cfg.cell_size))
    if not (0 <= ix < cfg.grid_w and 0 <= iy < cfg.grid_h):
        raise OutOfExtentError(
            f"agent {agent_id} at ({anchor.x:.1f}, {anchor.y:.1f}) outside grid extent"
        )
    p = cfg.patch
    xs = np.clip(np.arange(ix - (p // 2), ix - (p // 2) + p), 0, cfg.grid_w - 1)
    ys = np.clip(np.arange(iy - (p // 2), iy - (p // 2) + p), 0, cfg.grid_h - 1)
    return (ys[:, None] * cfg.grid_w + xs[None, :]).ravel()


def _decode_extra(agent, anchor: Pose2) -> list[float]:
    speed = float(np.linalg.norm(agent.history[-1, 3:5]))
    return [math.cos(anchor.heading), math.sin(anchor.heading), speed / 10.0]


def _finish_decode(
    raw: Tensor, cfg: StudentConfig, scene: Scene, agent_id: str, anchor: Pose2
) -> gm.TrajectoryGMM:
    """Turn one decoder output row into an agent-frame GMM.

    Decoded offsets are scene-frame displacements from the agent position;
    they are rotated by -heading and added to the constant-velocity rollout.
    """
    out = _decode_gmm(
        raw, cfg.num_modes, cfg.horizon, anchor, log_sigma_floor=cfg.log_sigma_floor
    )
    cos_h, sin_h = math.cos(anchor.heading), math.sin(anchor.heading)
    rot = np.array([[cos_h, -sin_h], [sin_h, cos_h]])  # transpose applied below
    means_flat = dc.reshape(out.means, (cfg.num_modes * cfg.horizon, 2))
    means_agent = dc.matmul(means_flat, rot)  # == (R(-h) @ m^T)^T
    cv = _cv_rollout(scene, agent_id, anchor, cfg.horizon, cfg.future_dt)
    out.means = dc.reshape(means_agent, (cfg.num_modes, cfg.horizon, 2)) + Tensor(
        np.tile(cv, (cfg.num_modes, 1, 1))
    )
    return out


def student_decode_agent(
    encoding: SceneEncoding, scene: Scene, agent_id: str, params: ModelParams
) -> gm.TrajectoryGMM:
    """Crop a patch at the agent's cell and decode an agent-frame GMM."""
    cfg: StudentConfig = params.config
    anchor = _agent_anchor(scene, agent_id)
    agent = scene.agent_by_id(agent_id)
    flat_idx = _patch_indices(cfg, anchor, agent_id)
    p = cfg.patch
    c = encoding.grid.data.shape[-1]
    flat = dc.reshape(encoding.grid, (cfg.grid_h * cfg.grid_w, c))
    patch = dc.reshape(dc.gather(flat, flat_idx, axis=0), (1, p * p * c))
    extra = np.array([_decode_extra(agent, anchor)])
    raw = _mlp(params, "decoder", dc.concat([patch, Tensor(extra)], axis=1), 3)
    return _finish_decode(raw, cfg, scene, agent_id, anchor)


def student_predict(scene: Scene, agent_ids: list[str], params: ModelParams) -> dict[str, gm.TrajectoryGMM]:
    """Encode once, then decode all requested agents in one batched pass.

    The patch gathers and the decoder MLP run as single batched ops so that
    per-agent inference cost stays close to its flop count.
    """
    enc = student_forward_scene(scene, params)
    if not agent_ids:
        return {}
    cfg: StudentConfig = params.config
    anchors, idx_rows, extras, vels = [], [], [], []
    for aid in agent_ids:
        agent = scene.agent_by_id(aid)
        if not agent.history[-1, 5]:
            raise ValueError(f"agent {aid}: no valid current state")
        x, y, heading = agent.current_pose()
        anchor = Pose2(x, y, heading)
        anchors.append(anchor)
        idx_rows.append(_patch_indices(cfg, anchor, aid))
        extras.append(_decode_extra(agent, anchor))
        vels.append(agent.history[-1, 3:5])
    n = len(agent_ids)
    p = cfg.patch
    c = enc.grid.data.shape[-1]
    flat = dc.reshape(enc.grid, (cfg.grid_h * cfg.grid_w, c))
    patches = dc.reshape(
        dc.gather(flat, np.concatenate(idx_rows), axis=0), (n, p * p * c)
    )
    raw = _mlp(params, "decoder", dc.concat([patches, Tensor(np.array(extras))], axis=1), 3)

    # inference needs no gradients: assemble the GMMs in plain numpy, exactly
    # mirroring _finish_decode / _decode_gmm
    k, t = cfg.num_modes, cfg.horizon
    data = raw.data
    body = data[:, : k * t * 5].reshape(n, k, t, 5)
    logits = data[:, k * t * 5 : k * t * 5 + k]
    log_sig = np.clip(body[..., 2:4], max(cfg.log_sigma_floor, -6.0), 4.0)
    covs = np.concatenate([log_sig, body[..., 4:5]], axis=-1)
    headings = np.array([a.heading for a in anchors])
    cos_h, sin_h = np.cos(headings), np.sin(headings)
    rots = np.stack(
        [np.stack([cos_h, -sin_h], -1), np.stack([sin_h, cos_h], -1)], axis=-2
    )  # (n, 2, 2); row-vector right-multiply == rotation by -heading
    means = np.einsum("nmj,njl->nml", body[..., :2].reshape(n, k * t, 2), rots)
    v_agent = np.einsum("nj,njl->nl", np.array(vels), rots)
    times = (np.arange(t) + 1.0) * cfg.future_dt
    cv = times[None, :, None] * v_agent[:, None, :]  # (n, t, 2)
    means = means.reshape(n, k, t, 2) + cv[:, None, :, :]
    out = {}
    for i, aid in enumerate(agent_ids):
        out[aid] = gm.TrajectoryGMM(
            means=means[i], cov_params=covs[i], logits=logits[i].copy(), anchor=anchors[i]
        )
    return out


# ---------------------------------------------------------------------------
# analytic multiply-add estimates


def _lstm_flops(in_dim: int, hidden: int, steps: int) -> int:
    return steps * (in_dim * 4 * hidden + hidden * 4 * hidden)


def count_flops(kind: str, n_agents: int, m_road: int, config) -> int:
    """Analytic multiply-add count of full-scene inference from shape algebra."""
    if kind == "teacher":
        cfg: TeacherConfig = config
        h = cfg.hidden
        out_dim = cfg.num_modes * (cfg.horizon * 5 + 1)
        road = min(m_road, cfg.max_polylines) * cfg.points_per_polyline * (
            ROAD_POINT_FEATURES * h + h * h
        )
        signals = 4 * _lstm_flops(SIGNAL_STEP_FEATURES, h, cfg.history_len)
        history = _lstm_flops(TRACK_STEP_FEATURES, h, cfg.history_len)
        neighbors = min(max(n_agents - 1, 0), cfg.max_neighbors) * _lstm_flops(
            TRACK_STEP_FEATURES, h, cfg.history_len
        )
        decoder = 4 * h * h + h * h + h * out_dim
        return n_agents * (road + signals + history + neighbors + decoder)
    if kind == "student":
        cfg: StudentConfig = config
        e = cfg.pillar_embed
        out_dim = cfg.num_modes * (cfg.horizon * 5 + 1)
        # ~12 raster points per polyline; per agent: 5 box points + past poses
        n_points = m_road * 12 + 4 + n_agents * (5 + cfg.history_len - 1)
        pillar = n_points * (RASTER_FEATURES * e + e * e)
        chans = [e] + list(cfg.conv_channels)
        conv = sum(
            cfg.grid_h * cfg.grid_w * 9 * cin * cout for cin, cout in zip(chans[:-1], chans[1:])
        )
        decode_in = cfg.patch * cfg.patch * chans[-1] + 3
        decode = decode_in * cfg.hidden + cfg.hidden * cfg.hidden + cfg.hidden * out_dim
        return pillar + conv + n_agents * decode
    raise ValueError(f"unknown model kind: {kind!r}")
