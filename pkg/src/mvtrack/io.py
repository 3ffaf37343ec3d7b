"""Readers and writers for every on-disk format.

Dataset directory::

    scene.json                 scene config echo
    calib.txt                  camera blocks (K / R / T / SIZE lines)
    frames/<t>/cam<i>.ppm      binary P6 images
    annotations.csv            frame,person_id,x_m,y_m,cam,u,v,visible
                               (cam = -1 rows carry the ground position)
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import re
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingFrame
from .geometry import format_calibrations, parse_calibrations
from .simulator import AnnotationFrame, Frame, PersonAnnotation, SceneConfig, Sequence

ANNOTATION_HEADER = ["frame", "person_id", "x_m", "y_m", "cam", "u", "v", "visible"]
TRAJECTORY_HEADER = ["frame", "track_id", "x_m", "y_m"]
LOSS_LOG_HEADER = ["step", "l_ground", "l_track", "l_img", "sigma_c", "sigma_t", "total"]


def fmt(x: float) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(x))


# --- netpbm -------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise FormatError("PPM image must be uint8 [H, W, 3]", path)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise FormatError("PGM image must be uint8 [H, W]", path)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


_PNM_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PNM_HEADER.match(data)
    if not m:
        raise FormatError("not a binary PPM/PGM file", path)
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", path)
    channels = 3 if magic == b"P6" else 1
    body = data[m.end() :]
    if len(body) != w * h * channels:
        raise FormatError(f"expected {w * h * channels} pixel bytes, found {len(body)}", path)
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return arr.copy() if channels == 3 else arr[..., 0].copy()


def heatmap_to_pgm(path, heatmap) -> None:
    h = np.asarray(heatmap, dtype=np.float64)
    write_pgm(path, np.clip(np.rint(h * 255.0), 0, 255).astype(np.uint8))


def write_raw_f32(path, array) -> None:
    """Text line "H W" followed by row-major little-endian float32 data."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 2:
        raise FormatError("raw dump needs a 2-D array", path)
    Path(path).write_bytes(f"{a.shape[0]} {a.shape[1]}\n".encode("ascii") + a.tobytes())


def read_raw_f32(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    try:
        h, w = (int(x) for x in data[:nl].split())
    except ValueError as exc:
        raise FormatError("bad raw header", path, 1) from exc
    body = data[nl + 1 :]
    if len(body) != 4 * h * w:
        raise FormatError("raw dump size does not match header", path)
    return np.frombuffer(body, dtype="<f4").reshape(h, w).copy()


# --- json configs -------------------------------------------------------------

def dump_json(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from exc
    if not isinstance(data, dict):
        raise FormatError("top-level JSON value must be an object", path)
    return data


# --- annotations --------------------------------------------------------------

def format_annotations(frames) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANNOTATION_HEADER)
    for ann in frames:
        for p in ann.persons:
            w.writerow([ann.frame, p.person_id, fmt(p.x), fmt(p.y), -1, "", "", ""])
            for cam, (u, v, vis) in enumerate(p.views):
                w.writerow([ann.frame, p.person_id, fmt(p.x), fmt(p.y), cam, fmt(u), fmt(v), int(vis)])
    return buf.getvalue()


def parse_annotations(text: str, num_cameras: int, path=None) -> list:
    lines = text.splitlines()
    if not lines or lines[0].strip().split(",") != ANNOTATION_HEADER:
        raise FormatError(f"header must be {','.join(ANNOTATION_HEADER)}", path, 1)
    frames: list = []
    current = None
    person = None
    for line_no, row in enumerate(csv.reader(lines[1:]), start=2):
        if len(row) != len(ANNOTATION_HEADER):
            raise FormatError(f"expected {len(ANNOTATION_HEADER)} fields, got {len(row)}", path, line_no)
        try:
            frame, pid, cam = int(row[0]), int(row[1]), int(row[4])
            x, y = float(row[2]), float(row[3])
        except ValueError as exc:
            raise FormatError(f"malformed field ({exc})", path, line_no) from exc
        if not (math.isfinite(x) and math.isfinite(y)):
            raise FormatError("non-finite ground position", path, line_no)
        if current is None or frame != current.frame:
            if current is not None and frame < current.frame:
                raise FormatError(f"frame {frame} after frame {current.frame}: frames must be non-decreasing", path, line_no)
            current = AnnotationFrame(frame, [])
            frames.append(current)
            person = None
        if cam == -1:
            if any(p.person_id == pid for p in current.persons):
                raise FormatError(f"duplicate person {pid} in frame {frame}", path, line_no)
            if any(row[k] for k in (5, 6, 7)):
                raise FormatError("ground rows (cam=-1) must leave u,v,visible empty", path, line_no)
            person = PersonAnnotation(pid, x, y, [])
            current.persons.append(person)
            continue
        if person is None or person.person_id != pid or (x, y) != (person.x, person.y):
            raise FormatError("camera row does not follow its person's ground row", path, line_no)
        if cam != len(person.views) or cam >= num_cameras:
            raise FormatError(f"unexpected camera index {cam}", path, line_no)
        try:
            u, v, vis = float(row[5]), float(row[6]), int(row[7])
        except ValueError as exc:
            raise FormatError(f"malformed field ({exc})", path, line_no) from exc
        if vis not in (0, 1):
            raise FormatError("visible must be 0 or 1", path, line_no)
        person.views.append((u, v, bool(vis)))
    for ann in frames:
        for p in ann.persons:
            if len(p.views) != num_cameras:
                raise FormatError(f"frame {ann.frame} person {p.person_id}: {len(p.views)} camera rows, need {num_cameras}", path)
    return frames


# --- trajectories / logs ------------------------------------------------------

def format_trajectories(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for frame, tid, x, y in sorted(rows, key=lambda r: (int(r[0]), int(r[1]))):
        w.writerow([int(frame), int(tid), fmt(x), fmt(y)])
    return buf.getvalue()


def write_trajectories(path, rows) -> None:
    Path(path).write_text(format_trajectories(rows))


def read_trajectories(path) -> list:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip().split(",") != TRAJECTORY_HEADER:
        raise FormatError(f"header must be {','.join(TRAJECTORY_HEADER)}", path, 1)
    rows = []
    for line_no, row in enumerate(csv.reader(lines[1:]), start=2):
        if len(row) != 4:
            raise FormatError(f"expected 4 fields, got {len(row)}", path, line_no)
        try:
            rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
        except ValueError as exc:
            raise FormatError(f"malformed field ({exc})", path, line_no) from exc
        if not (math.isfinite(rows[-1][2]) and math.isfinite(rows[-1][3])):
            raise FormatError("non-finite position", path, line_no)
    return rows


def annotation_rows(frames) -> list:
    """Ground-truth (frame, person_id, x_m, y_m) rows from annotation frames."""
    return [(a.frame, p.person_id, p.x, p.y) for a in frames for p in a.persons]


def read_ground_truth(path) -> list:
    """(frame, id, x_m, y_m) rows from a trajectory CSV or an annotations.csv."""
    text = Path(path).read_text()
    header = text.split("\n", 1)[0].strip().split(",")
    if header != ANNOTATION_HEADER:
        return read_trajectories(path)
    cams = [int(row[4]) for row in csv.reader(text.splitlines()[1:]) if len(row) > 4 and row[4].lstrip("-").isdigit()]
    return annotation_rows(parse_annotations(text, max(cams, default=-1) + 1, path))


def append_loss_log(path, rows, header: bool) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(LOSS_LOG_HEADER)
        for r in rows:
            w.writerow([int(r[0])] + [fmt(v) for v in r[1:]])


def read_loss_log(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split(",") != LOSS_LOG_HEADER:
        raise FormatError("bad loss log header", path, 1)
    out = []
    for line_no, row in enumerate(csv.reader(lines[1:]), start=2):
        try:
            out.append([int(row[0])] + [float(v) for v in row[1:]])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"malformed loss row ({exc})", path, line_no) from exc
    return out


# --- datasets -----------------------------------------------------------------

def write_dataset(seq: Sequence, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    if seq.config is not None:
        dump_json(out / "scene.json", seq.config.to_dict())
    (out / "calib.txt").write_text(format_calibrations(seq.calibs))
    for frame in seq.frames:
        d = out / "frames" / str(frame.index)
        d.mkdir(exist_ok=True)
        for i, img in enumerate(frame.images):
            write_ppm(d / f"cam{i}.ppm", img)
    (out / "annotations.csv").write_text(format_annotations([f.annotation for f in seq.frames]))
    return out


def load_dataset(data_dir) -> Sequence:
    """Strictly parse a dataset directory written by :func:`write_dataset`."""
    root = Path(data_dir)
    for name in ("calib.txt", "annotations.csv", "frames"):
        if not (root / name).exists():
            raise FormatError(f"missing {name}", root)
    calib_path = root / "calib.txt"
    calibs = parse_calibrations(calib_path.read_text(), calib_path)
    config = None
    if (root / "scene.json").exists():
        config = SceneConfig.from_dict(load_json(root / "scene.json"))
    ann_path = root / "annotations.csv"
    annotations = parse_annotations(ann_path.read_text(), len(calibs), ann_path)
    frame_dirs = {}
    for d in (root / "frames").iterdir():
        if not d.is_dir() or not d.name.isdigit():
            raise FormatError(f"unexpected entry {d.name!r} in frames/", root)
        frame_dirs[int(d.name)] = d
    indices = sorted(frame_dirs)
    if not indices:
        raise MissingFrame(f"{root}: no frames")
    expected = list(range(indices[0], indices[-1] + 1))
    if indices != expected:
        gap = sorted(set(expected) - set(indices))[0]
        raise MissingFrame(f"{root}: frame {gap} missing")
    by_frame = {a.frame: a for a in annotations}
    extra = sorted(set(by_frame) - set(indices))
    if extra:
        raise FormatError(f"annotations reference frame {extra[0]} with no images", ann_path)
    frames = []
    for t in indices:
        images = []
        for i, calib in enumerate(calibs):
            p = frame_dirs[t] / f"cam{i}.ppm"
            if not p.exists():
                raise MissingFrame(f"{p} missing")
            img = read_pnm(p)
            if img.shape != (calib.image_height, calib.image_width, 3):
                raise FormatError(f"image size {img.shape[1]}x{img.shape[0]} does not match calibration", p)
            images.append(img)
        frames.append(Frame(t, images, by_frame.get(t, AnnotationFrame(t, []))))
    grid = config.grid() if config is not None else None
    if grid is None:
        raise FormatError("scene.json is required to recover the ground grid", root)
    return Sequence(calibs, grid, frames, config)
