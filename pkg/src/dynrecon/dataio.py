"""Dataset layout and prior file formats.

Layout of a dataset directory::

    frames/%05d.png       8-bit RGB
    flow_fwd/%05d.flo     flow i -> i+1, for i in [0, N-2]
    flow_bwd/%05d.flo     flow i -> i-1, for i in [1, N-1]
    disp/%05d.pfm         monocular disparity prior
    mask/%05d.png         motion mask, 255 = dynamic
    instance/%05d.png     optional instance masks
    gt/poses.txt          optional, 12 reals per line: row-major 3x4 camera-to-world
    gt/intrinsics.txt     optional, "focal cx cy"
    gt/depth/%05d.pfm     optional camera-space z depth
    gt/mask/%05d.png      optional exact motion masks
    gt/sceneflow_fwd/%05d.npy, gt/sceneflow_bwd/%05d.npy   optional
    times.txt             optional normalized timestamps (default i / (N-1))
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25


class FormatError(ValueError):
    pass


class DatasetError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid dataset:\n  " + "\n  ".join(problems))


# ---------------------------------------------------------------------------
# .flo

def write_flow(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(flow.tobytes(order="C"))


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header at byte {len(data)} (need 12)")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid size {w}x{h} at byte 4")
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FormatError(f"{path}: truncated payload, file ends at byte {len(data)}, expected {need}")
    return np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2).copy()


# ---------------------------------------------------------------------------
# .pfm (grayscale)

def write_disparity(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise FormatError(f"disparity must be (H, W), got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(image).tobytes(order="C"))


def read_disparity(path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines = []
    pos = 0
    for _ in range(3):
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        lines.append(data[pos:end].decode("ascii", "replace").strip())
        pos = end + 1
    if lines[0] != "Pf":
        raise FormatError(f"{path}: expected grayscale 'Pf' header at byte 0, got {lines[0]!r}")
    m = re.fullmatch(r"(\d+)\s+(\d+)", lines[1])
    if not m:
        raise FormatError(f"{path}: malformed size line {lines[1]!r}")
    w, h = int(m.group(1)), int(m.group(2))
    try:
        scale = float(lines[2])
    except ValueError:
        raise FormatError(f"{path}: malformed scale line {lines[2]!r}") from None
    if scale == 0:
        raise FormatError(f"{path}: zero scale")
    dtype = "<f4" if scale < 0 else ">f4"
    need = pos + 4 * w * h
    if len(data) < need:
        raise FormatError(f"{path}: truncated payload, file ends at byte {len(data)}, expected {need}")
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return np.flipud(img).astype(np.float32)


# ---------------------------------------------------------------------------
# images

def write_image(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def write_poses(path, c2w: np.ndarray) -> None:
    c2w = np.asarray(c2w, dtype=np.float64)
    with open(path, "w") as f:
        for P in c2w:
            f.write(" ".join(repr(float(x)) for x in P[:3, :4].reshape(-1)) + "\n")


def read_poses(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        P = np.eye(4)
        P[:3, :4] = np.array([float(v) for v in vals]).reshape(3, 4)
        rows.append(P)
    return np.stack(rows) if rows else np.zeros((0, 4, 4))


# ---------------------------------------------------------------------------
# dataset

@dataclass
class Dataset:
    frames: np.ndarray  # (N, H, W, 3) in [0, 1]
    flow_fwd: list[np.ndarray]  # N-1 fields, i -> i+1
    flow_bwd: list[np.ndarray]  # N-1 fields, i -> i-1 (index k is frame k+1)
    disparity: np.ndarray  # (N, H, W)
    mask: np.ndarray  # (N, H, W) bool, True = dynamic
    times: np.ndarray  # (N,)
    instance: np.ndarray | None = None
    gt_poses: np.ndarray | None = None  # (N, 4, 4) camera-to-world
    gt_focal: float | None = None
    gt_depth: np.ndarray | None = None
    gt_mask: np.ndarray | None = None
    gt_sceneflow_fwd: list[np.ndarray] | None = None
    gt_sceneflow_bwd: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def flow(self, i: int, j: int) -> np.ndarray:
        if j == i + 1:
            return self.flow_fwd[i]
        if j == i - 1:
            return self.flow_bwd[i - 1]
        raise KeyError(f"no flow between frames {i} and {j}")

    def validate(self) -> list[str]:
        problems = []
        n, h, w = self.frames.shape[:3]
        if n < 2:
            problems.append(f"need >= 2 frames, got {n}")
        for name, flows in (("flow_fwd", self.flow_fwd), ("flow_bwd", self.flow_bwd)):
            if len(flows) != n - 1:
                problems.append(f"{name}: expected {n - 1} fields, got {len(flows)}")
            for k, fl in enumerate(flows):
                if fl.shape != (h, w, 2):
                    problems.append(f"{name}[{k}]: shape {fl.shape} != {(h, w, 2)}")
        for name in ("disparity", "mask", "instance", "gt_depth", "gt_mask"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n, h, w):
                problems.append(f"{name}: shape {arr.shape} != {(n, h, w)}")
        if self.gt_poses is not None and self.gt_poses.shape != (n, 4, 4):
            problems.append(f"gt poses: shape {self.gt_poses.shape} != {(n, 4, 4)}")
        if len(self.times) != n:
            problems.append(f"times: {len(self.times)} entries for {n} frames")
        return problems


def _indexed(dirpath: Path, suffix: str) -> dict[int, Path]:
    out = {}
    if not dirpath.is_dir():
        return out
    for p in sorted(dirpath.iterdir()):
        m = re.fullmatch(r"(\d{5})" + re.escape(suffix), p.name)
        if m:
            out[int(m.group(1))] = p
    return out


def load_dataset(root, require_mask: bool = True) -> Dataset:
    root = Path(root)
    problems: list[str] = []
    frame_files = _indexed(root / "frames", ".png")
    if not frame_files:
        raise DatasetError([f"{root / 'frames'}: no %05d.png frames found"])
    n = len(frame_files)
    if sorted(frame_files) != list(range(n)):
        problems.append(f"frames/: indices are not contiguous from 0: {sorted(frame_files)}")
    frames = [read_image(frame_files[k]) for k in sorted(frame_files)]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        problems.append(f"frames/: mixed resolutions {sorted(shapes)}")
    h, w = frames[0].shape[:2]

    def series(sub, suffix, indices, reader, label):
        files = _indexed(root / sub, suffix)
        out = []
        for i in indices:
            if i not in files:
                problems.append(f"{sub}/{i:05d}{suffix}: missing ({label})")
                out.append(None)
                continue
            try:
                out.append(reader(files[i]))
            except (FormatError, OSError) as exc:
                problems.append(f"{sub}/{i:05d}{suffix}: {exc}")
                out.append(None)
        return out

    flow_fwd = series("flow_fwd", ".flo", range(n - 1), read_flow, "forward flow")
    flow_bwd = series("flow_bwd", ".flo", range(1, n), read_flow, "backward flow")
    disp = series("disp", ".pfm", range(n), read_disparity, "disparity")
    if require_mask or _indexed(root / "mask", ".png"):
        mask = series("mask", ".png", range(n), read_mask, "motion mask")
    else:
        # masks are about to be computed; start from all-static
        mask = [np.zeros((h, w), dtype=bool) for _ in range(n)]
    for name, arrs, shape in (("flow_fwd", flow_fwd, (h, w, 2)), ("flow_bwd", flow_bwd, (h, w, 2)),
                              ("disp", disp, (h, w)), ("mask", mask, (h, w))):
        for k, a in enumerate(arrs):
            if a is not None and a.shape != shape:
                problems.append(f"{name}[{k}]: resolution {a.shape} != {shape}")

    instance = None
    if (root / "instance").is_dir():
        inst = series("instance", ".png", range(n), read_mask, "instance mask")
        instance = inst

    gt_poses = gt_focal = gt_depth = gt_mask = sf_f = sf_b = None
    gt = root / "gt"
    if (gt / "poses.txt").exists():
        try:
            gt_poses = read_poses(gt / "poses.txt")
            if len(gt_poses) != n:
                problems.append(f"gt/poses.txt: {len(gt_poses)} poses for {n} frames")
        except FormatError as exc:
            problems.append(str(exc))
    if (gt / "intrinsics.txt").exists():
        gt_focal = float((gt / "intrinsics.txt").read_text().split()[0])
    if (gt / "depth").is_dir():
        gt_depth = series("gt/depth", ".pfm", range(n), read_disparity, "gt depth")
    if (gt / "mask").is_dir():
        gt_mask = series("gt/mask", ".png", range(n), read_mask, "gt mask")
    if (gt / "sceneflow_fwd").is_dir():
        sf_f = [np.load(p) for _, p in sorted(_indexed(gt / "sceneflow_fwd", ".npy").items())]
        sf_b = [np.load(p) for _, p in sorted(_indexed(gt / "sceneflow_bwd", ".npy").items())]
    times = np.arange(n) / max(n - 1, 1)
    if (root / "times.txt").exists():
        times = np.array([float(x) for x in (root / "times.txt").read_text().split()])
        if len(times) != n:
            problems.append(f"times.txt: {len(times)} entries for {n} frames")

    if problems:
        raise DatasetError(problems)

    stack = lambda xs: None if xs is None else np.stack(xs)
    ds = Dataset(
        frames=np.stack(frames), flow_fwd=flow_fwd, flow_bwd=flow_bwd, disparity=np.stack(disp),
        mask=np.stack(mask), times=times, instance=stack(instance), gt_poses=gt_poses, gt_focal=gt_focal,
        gt_depth=stack(gt_depth), gt_mask=stack(gt_mask), gt_sceneflow_fwd=sf_f, gt_sceneflow_bwd=sf_b,
    )
    extra = ds.validate()
    if extra:
        raise DatasetError(extra)
    return ds


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    for sub in ("frames", "flow_fwd", "flow_bwd", "disp", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(ds.n_frames):
        write_image(root / "frames" / f"{i:05d}.png", ds.frames[i])
        write_disparity(root / "disp" / f"{i:05d}.pfm", ds.disparity[i])
        write_mask(root / "mask" / f"{i:05d}.png", ds.mask[i])
    for i, fl in enumerate(ds.flow_fwd):
        write_flow(root / "flow_fwd" / f"{i:05d}.flo", fl)
    for i, fl in enumerate(ds.flow_bwd, start=1):
        write_flow(root / "flow_bwd" / f"{i:05d}.flo", fl)
    if ds.instance is not None:
        (root / "instance").mkdir(exist_ok=True)
        for i in range(ds.n_frames):
            write_mask(root / "instance" / f"{i:05d}.png", ds.instance[i])
    (root / "times.txt").write_text(" ".join(repr(float(t)) for t in ds.times) + "\n")
    gt = root / "gt"
    if ds.gt_poses is not None:
        gt.mkdir(exist_ok=True)
        write_poses(gt / "poses.txt", ds.gt_poses)
    if ds.gt_focal is not None:
        gt.mkdir(exist_ok=True)
        w, h = ds.width, ds.height
        (gt / "intrinsics.txt").write_text(f"{ds.gt_focal!r} {w / 2!r} {h / 2!r}\n")
    if ds.gt_depth is not None:
        (gt / "depth").mkdir(parents=True, exist_ok=True)
        for i in range(ds.n_frames):
            write_disparity(gt / "depth" / f"{i:05d}.pfm", ds.gt_depth[i])
    if ds.gt_mask is not None:
        (gt / "mask").mkdir(parents=True, exist_ok=True)
        for i in range(ds.n_frames):
            write_mask(gt / "mask" / f"{i:05d}.png", ds.gt_mask[i])
    if ds.gt_sceneflow_fwd is not None:
        (gt / "sceneflow_fwd").mkdir(parents=True, exist_ok=True)
        (gt / "sceneflow_bwd").mkdir(parents=True, exist_ok=True)
        for i, sf in enumerate(ds.gt_sceneflow_fwd):
            np.save(gt / "sceneflow_fwd" / f"{i:05d}.npy", sf)
        for i, sf in enumerate(ds.gt_sceneflow_bwd, start=1):
            np.save(gt / "sceneflow_bwd" / f"{i:05d}.npy", sf)
