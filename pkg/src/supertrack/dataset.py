"""Dataset directory layout and readers.

A dataset directory holds::

    manifest.json            intrinsics, frame count, file patterns, nominal hand-eye
    chain.json               kinematic chain description
    depth/%06d.raw           float32 little-endian, row-major, meters, NaN = invalid
    color/%06d.ppm           binary P6 color image (optional)
    features/%06d.json       {"markers": [[u, v]...], "lines": [[rho, phi]...],
                              "correspondences": [[m_u, m_v, c_u, c_v]...], "phase": int}
    joints/%06d.txt          whitespace separated joint values
    ground_truth.json        simulator truth (optional)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, MissingGroundTruth
from .geometry import CameraIntrinsics, RigidTransform
from .kinematics import ImageLine, KinematicChain


@dataclass
class FrameFeatures:
    markers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    lines: list[ImageLine] = field(default_factory=list)
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    phase: int = 0


def write_depth(path, depth: np.ndarray) -> None:
    np.asarray(depth, dtype="<f4").tofile(path)


def read_depth(path, width: int, height: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise DatasetError(f"{path}: expected {width * height} depth values, found {data.size}")
    return data.reshape(height, width).astype(float)


def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 image as floats in [0, 1] with shape ``(H, W, 3)``."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise DatasetError(f"{path}: truncated image data")
    return pixels.reshape(h, w, 3).astype(float) / maxval


def write_features(path, feats: FrameFeatures, frame: int) -> None:
    data = {"frame": frame, "markers": np.asarray(feats.markers).tolist(),
            "lines": [[ln.rho, ln.phi] for ln in feats.lines],
            "correspondences": np.asarray(feats.pairs).tolist(), "phase": int(feats.phase)}
    Path(path).write_text(json.dumps(data))


def read_features(path) -> FrameFeatures:
    data = json.loads(Path(path).read_text())
    markers = np.asarray(data.get("markers", []), dtype=float).reshape(-1, 2)
    lines = [ImageLine(float(r), float(p)) for r, p in data.get("lines", [])]
    pairs = np.asarray(data.get("correspondences", []), dtype=float).reshape(-1, 4)
    return FrameFeatures(markers, lines, pairs, int(data.get("phase", 0)))


class Dataset:
    """Read-only view of a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise DatasetError(f"{self.root}: manifest.json missing")
        self.manifest = json.loads(path.read_text())
        self.k = CameraIntrinsics.from_dict(self.manifest["intrinsics"])
        self.n_frames = int(self.manifest["frames"])
        self.chain = KinematicChain.load(self.root / self.manifest.get("chain", "chain.json"))
        self.nominal = RigidTransform.from_matrix(np.asarray(self.manifest["nominal_hand_eye"]).reshape(4, 4))
        self.fps = float(self.manifest.get("fps", 30.0))

    def _path(self, key: str, frame: int) -> Path:
        return self.root / (self.manifest[key] % frame)

    def validate(self) -> None:
        for key in ("depth", "features", "joints"):
            for f in range(self.n_frames):
                if not self._path(key, f).exists():
                    raise DatasetError(f"missing {key} file for frame {f}")
        expected = self.k.width * self.k.height * 4
        size = self._path("depth", 0).stat().st_size
        if size != expected:
            raise DatasetError(f"depth frame 0 has {size} bytes, expected {expected}")

    def depth(self, frame: int) -> np.ndarray:
        return read_depth(self._path("depth", frame), self.k.width, self.k.height)

    def color(self, frame: int) -> np.ndarray | None:
        if "color" not in self.manifest:
            return None
        path = self._path("color", frame)
        return read_ppm(path) if path.exists() else None

    def features(self, frame: int) -> FrameFeatures:
        return read_features(self._path("features", frame))

    def joints(self, frame: int) -> np.ndarray:
        return np.array([float(t) for t in self._path("joints", frame).read_text().split()])

    @property
    def track_pixels(self) -> np.ndarray:
        return np.asarray(self.manifest.get("track_pixels", []), dtype=float).reshape(-1, 2)

    def has_ground_truth(self) -> bool:
        name = self.manifest.get("ground_truth")
        return bool(name) and (self.root / name).exists()

    def ground_truth(self) -> dict:
        if not self.has_ground_truth():
            raise MissingGroundTruth(f"{self.root}: no ground truth file")
        return json.loads((self.root / self.manifest["ground_truth"]).read_text())
