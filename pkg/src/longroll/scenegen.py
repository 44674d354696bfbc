"""Procedural video world with exact depth and point tracks.

Shapes translate at constant velocity; each sits on its own depth layer. RGB
is shaded by depth (nearer is brighter) so that the dense control carries
appearance information, not just silhouettes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .numerics import ContractError, Rng, as_generator, read_all, write_tensor

FORMAT_VERSION = 1
GRID_SIDE = 7
BACKGROUND_DEPTH = 1.0
SUPERSAMPLE = 2


@dataclass(frozen=True)
class Shape:
    kind: str  # "circle" | "rect"
    depth_layer: float
    velocity: tuple[float, float]
    size: float  # radius for circles, half side for rects
    color: tuple[float, float, float]
    center: tuple[float, float]

    def position(self, t: float) -> tuple[float, float]:
        return (self.center[0] + t * self.velocity[0], self.center[1] + t * self.velocity[1])

    def covers(self, xs: np.ndarray, ys: np.ndarray, t: float) -> np.ndarray:
        cx, cy = self.position(t)
        if self.kind == "circle":
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= self.size**2
        return (np.abs(xs - cx) <= self.size) & (np.abs(ys - cy) <= self.size)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_frames: int
    height: int
    width: int
    shapes: tuple[Shape, ...]
    background: tuple[float, float, float] = (0.35, 0.4, 0.5)
    start_frame: int = 0

    def validate(self) -> None:
        layers = [s.depth_layer for s in self.shapes]
        if len(set(layers)) != len(layers):
            raise ContractError("two shapes share a depth layer")
        for s in self.shapes:
            if not 0.0 < s.depth_layer <= 1.0:
                raise ContractError(f"depth layer {s.depth_layer} outside (0, 1]")
            if s.kind not in ("circle", "rect"):
                raise ContractError(f"unknown shape kind {s.kind!r}")
        if self.num_frames < 1 or self.height < 1 or self.width < 1:
            raise ContractError("scene dimensions must be positive")

    def shifted(self, start_frame: int, num_frames: int) -> "SceneSpec":
        """Same world observed over a different frame interval."""
        return SceneSpec(self.seed, num_frames, self.height, self.width, self.shapes, self.background, start_frame)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        shapes = tuple(
            Shape(s["kind"], float(s["depth_layer"]), tuple(s["velocity"]), float(s["size"]), tuple(s["color"]), tuple(s["center"]))
            for s in d["shapes"]
        )
        return cls(int(d["seed"]), int(d["num_frames"]), int(d["height"]), int(d["width"]), shapes,
                   tuple(d["background"]), int(d.get("start_frame", 0)))


@dataclass
class Track:
    """One tracked point; ``frames`` rows are (frame, x, y, depth, visible)."""

    surface: int  # index into spec.shapes, or -1 for background
    frames: list[tuple[int, float, float, float, bool]] = field(default_factory=list)


@dataclass
class SceneClip:
    rgb: torch.Tensor  # F x 3 x H x W
    depth: torch.Tensor  # F x 1 x H x W
    tracks: list[Track]
    spec: SceneSpec


def shade(color: np.ndarray, depth: np.ndarray) -> np.ndarray:
    return np.clip(color * (1.15 - 0.75 * depth), 0.0, 1.0)


def _pixel_grid(h: int, w: int, dx: float = 0.5, dy: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h) + dy, np.arange(w) + dx, indexing="ij")
    return xs, ys


def _paint(spec: SceneSpec, t: int, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    depth = np.full(xs.shape, BACKGROUND_DEPTH)
    owner = np.full(xs.shape, -1, dtype=np.int64)
    # paint far to near so the front-most shape wins
    order = sorted(range(len(spec.shapes)), key=lambda i: -spec.shapes[i].depth_layer)
    for i in order:
        mask = spec.shapes[i].covers(xs, ys, t)
        depth[mask] = spec.shapes[i].depth_layer
        owner[mask] = i
    colors = np.empty((*xs.shape, 3))
    colors[...] = spec.background
    for i, s in enumerate(spec.shapes):
        colors[owner == i] = s.color
    return shade(colors, depth[..., None]).transpose(2, 0, 1), depth, owner


def render_frame(spec: SceneSpec, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rgb[3,H,W], depth[H,W], owner[H,W]) at absolute frame ``t``.

    Depth and owner are point-sampled at pixel centres; rgb averages
    SUPERSAMPLE x SUPERSAMPLE sub-pixel samples, which softens shape edges.
    """
    _, depth, owner = _paint(spec, t, *_pixel_grid(spec.height, spec.width))
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    rgb = np.mean([_paint(spec, t, *_pixel_grid(spec.height, spec.width, dx, dy))[0]
                   for dy in offsets for dx in offsets], axis=0)
    return rgb, depth, owner


def seed_points(h: int, w: int, side: int = GRID_SIDE) -> list[tuple[float, float]]:
    step_x, step_y = w / side, h / side
    return [((i + 0.5) * step_x, (j + 0.5) * step_y) for j in range(side) for i in range(side)]


def track_points(spec: SceneSpec, start: int, num_frames: int, seeds=None) -> list[Track]:
    """Seed points at absolute frame ``start`` and follow the owning surface."""
    seeds = seeds if seeds is not None else seed_points(spec.height, spec.width)
    _, _, owner = render_frame(spec, start)
    tracks = []
    for x0, y0 in seeds:
        surf = int(owner[min(int(y0), spec.height - 1), min(int(x0), spec.width - 1)])
        tr = Track(surf)
        for k in range(num_frames):
            t = start + k
            if surf < 0:
                x, y, d = x0, y0, BACKGROUND_DEPTH
            else:
                s = spec.shapes[surf]
                x, y = x0 + k * s.velocity[0], y0 + k * s.velocity[1]
                d = s.depth_layer
            tr.frames.append((t, x, y, d, _visible(spec, surf, x, y, t)))
        tracks.append(tr)
    return tracks


def _visible(spec: SceneSpec, surf: int, x: float, y: float, t: int) -> bool:
    if not (0.0 <= x < spec.width and 0.0 <= y < spec.height):
        return False
    my_depth = BACKGROUND_DEPTH if surf < 0 else spec.shapes[surf].depth_layer
    px, py = np.array([math.floor(x) + 0.5]), np.array([math.floor(y) + 0.5])
    for i, s in enumerate(spec.shapes):
        if i != surf and s.depth_layer < my_depth and s.covers(px, py, t)[0]:
            return False
    return True


def gen_scene(spec: SceneSpec) -> SceneClip:
    spec.validate()
    rgbs, depths = [], []
    any_visible = np.zeros(len(spec.shapes), dtype=bool)
    for k in range(spec.num_frames):
        rgb, depth, owner = render_frame(spec, spec.start_frame + k)
        rgbs.append(rgb)
        depths.append(depth)
        for i in range(len(spec.shapes)):
            any_visible[i] |= bool((owner == i).any())
    if spec.shapes and not any_visible.any():
        raise ContractError("every shape is off-screen for the whole clip")
    return SceneClip(
        rgb=torch.from_numpy(np.stack(rgbs).astype(np.float32)),
        depth=torch.from_numpy(np.stack(depths)[:, None].astype(np.float32)),
        tracks=track_points(spec, spec.start_frame, spec.num_frames),
        spec=spec,
    )


def depth_colormap(d: np.ndarray | float) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return np.stack([d, 1.0 - d, np.full_like(d, 0.5)], axis=-1)


def rasterize_tracks(tracks: list[Track], num_frames: int, h: int, w: int, depth: torch.Tensor | None = None) -> torch.Tensor:
    """Draw visible track points into F x 3 x H x W frames.

    With ``depth`` given (F x 1 x H x W, typically normalized), the colour is
    read from that map at the point's pixel instead of the track's own depth.
    """
    out = np.zeros((num_frames, 3, h, w), dtype=np.float32)
    dnp = depth.detach().numpy() if depth is not None else None
    for tr in tracks:
        for k, (_, x, y, d, vis) in enumerate(tr.frames[:num_frames]):
            if not vis:
                continue
            px, py = int(math.floor(x)), int(math.floor(y))
            value = dnp[k, 0, py, px] if dnp is not None else d
            out[k, :, py, px] = depth_colormap(value)
    return torch.from_numpy(out)


def render_pointmap(clip: SceneClip, num_points: int, rng, depth: torch.Tensor | None = None) -> torch.Tensor:
    if num_points <= 0:
        raise ContractError("num_points must be positive")
    if num_points > len(clip.tracks):
        raise ContractError(f"asked for {num_points} points, only {len(clip.tracks)} tracked")
    if num_points == len(clip.tracks):
        chosen = clip.tracks
    else:
        idx = np.sort(as_generator(rng, "points").choice(len(clip.tracks), num_points, replace=False))
        chosen = [clip.tracks[i] for i in idx]
    F_, _, h, w = clip.rgb.shape
    return rasterize_tracks(chosen, F_, h, w, depth)


# ---------------------------------------------------------------------------
# random specs

def _random_shape(g: np.random.Generator, layer: float, h: int, w: int, max_speed: float, frames: int) -> Shape:
    kind = "circle" if g.random() < 0.5 else "rect"
    size = float(g.uniform(3.0, 7.0))
    speed = float(g.uniform(0.0, max_speed))
    ang = float(g.uniform(0, 2 * np.pi))
    vel = (round(speed * np.cos(ang), 3), round(speed * np.sin(ang), 3))
    # centre the trajectory midpoint inside the frame
    mid = (float(g.uniform(0.2 * w, 0.8 * w)), float(g.uniform(0.2 * h, 0.8 * h)))
    half = (frames - 1) / 2
    center = (round(mid[0] - half * vel[0], 3), round(mid[1] - half * vel[1], 3))
    color = tuple(float(c) for c in np.round(g.uniform(0.15, 1.0, 3), 3))
    return Shape(kind, layer, vel, size, color, center)


def random_spec(seed: int, num_frames: int = 9, height: int = 32, width: int = 32, max_speed: float = 1.5) -> SceneSpec:
    g = np.random.Generator(np.random.Philox(key=int(seed) + 1))
    n = int(g.integers(2, 5))
    layers = np.sort(g.choice(np.arange(10, 91), n, replace=False)) / 100.0
    shapes = tuple(_random_shape(g, float(l), height, width, max_speed, num_frames) for l in layers)
    bg = tuple(float(c) for c in np.round(g.uniform(0.2, 0.8, 3), 3))
    return SceneSpec(int(seed), num_frames, height, width, shapes, bg)


def long_spec(seed: int, num_frames: int, height: int = 32, width: int = 32) -> SceneSpec:
    """A long scene: one slow anchor shape always in view plus shapes that
    cross the frame at staggered times, so the depth range shifts over time."""
    g = np.random.Generator(np.random.Philox(key=int(seed) + 7919))
    n_cross = max(2, num_frames // 24)
    layers = np.sort(g.choice(np.arange(10, 91), n_cross + 1, replace=False)) / 100.0
    anchor_layer = float(layers[-1])
    drift = float(g.uniform(-4.0, 4.0)) / max(num_frames, 1)
    anchor = Shape("rect", anchor_layer, (round(drift, 4), 0.0), 9.0,
                   tuple(float(c) for c in np.round(g.uniform(0.2, 1.0, 3), 3)),
                   (width / 2 - drift * num_frames / 2, height * 0.62))
    shapes = [anchor]
    for k, layer in enumerate(layers[:-1]):
        speed = float(g.uniform(0.35, 0.8))
        size = float(g.uniform(4.0, 7.0))
        direction = 1.0 if g.random() < 0.5 else -1.0
        enter = float(g.uniform(0, max(1.0, num_frames - (width + 2 * size) / speed)))
        start_x = -size if direction > 0 else width + size
        cx = start_x - direction * speed * enter
        cy = float(g.uniform(0.25 * height, 0.75 * height))
        color = tuple(float(c) for c in np.round(g.uniform(0.2, 1.0, 3), 3))
        shapes.append(Shape("circle" if k % 2 == 0 else "rect", float(layer), (round(direction * speed, 4), 0.0),
                            size, color, (round(cx, 4), round(cy, 4))))
    bg = tuple(float(c) for c in np.round(g.uniform(0.2, 0.8, 3), 3))
    return SceneSpec(int(seed), num_frames, height, width, tuple(shapes), bg)


# ---------------------------------------------------------------------------
# corpus I/O

def save_clip(clip: SceneClip, pointmap: torch.Tensor, out_dir: Path, index: int) -> None:
    out_dir = Path(out_dir)
    tmp = out_dir / f"clip_{index}.lvt.tmp"
    with open(tmp, "wb") as fh:
        for t in (clip.rgb, clip.depth, pointmap):
            write_tensor(fh, t)
    tmp.replace(out_dir / f"clip_{index}.lvt")
    tracks = [{"surface": tr.surface, "frames": [list(r) for r in tr.frames]} for tr in clip.tracks]
    (out_dir / f"clip_{index}.tracks.json").write_text(json.dumps(tracks))


def load_clip(data_dir: Path, index: int, spec: SceneSpec) -> tuple[SceneClip, torch.Tensor]:
    data_dir = Path(data_dir)
    rgb, depth, pointmap = read_all(data_dir / f"clip_{index}.lvt")
    raw = json.loads((data_dir / f"clip_{index}.tracks.json").read_text())
    tracks = [Track(r["surface"], [(int(f[0]), f[1], f[2], f[3], bool(f[4])) for f in r["frames"]]) for r in raw]
    return SceneClip(rgb, depth, tracks, spec), pointmap


def make_corpus(count: int, base_seed: int, out_dir, num_frames: int = 9, size: int = 32, num_points: int = 49) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = []
    for i in range(count):
        spec = random_spec(base_seed + i, num_frames, size, size)
        clip = gen_scene(spec)
        pm = render_pointmap(clip, num_points, Rng(base_seed + i))
        save_clip(clip, pm, out_dir, i)
        clips.append({"index": i, "file": f"clip_{i}.lvt", "tracks": f"clip_{i}.tracks.json", "spec": spec.to_dict()})
    manifest = {"format_version": FORMAT_VERSION, "base_seed": base_seed, "count": count,
                "num_frames": num_frames, "height": size, "width": size, "num_points": num_points, "clips": clips}
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(out_dir / "manifest.json")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ContractError(f"missing prerequisite: no corpus manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported corpus format {manifest.get('format_version')}")
    return manifest


def load_corpus(data_dir) -> list[tuple[SceneClip, torch.Tensor]]:
    manifest = load_manifest(data_dir)
    return [load_clip(data_dir, c["index"], SceneSpec.from_dict(c["spec"])) for c in manifest["clips"]]
