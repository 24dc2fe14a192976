"""Per-subject scoring against the dictionary baseline, and report files."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .dictionary import DictionaryModel, select_target, supervised_dict_learn
from .metrics import DEFAULT_THRESHOLD, jaccard, temporal_similarity
from .volume import Volume4D

FAILURE_FLOOR = 0.02
NAN = float("nan")


@dataclass
class EvalRow:
    subject: str
    jaccard_stcnn: float = NAN           # ST-CNN map vs template
    jaccard_baseline: float = NAN        # best dictionary map vs template
    temporal_pearson: float = NAN        # ST-CNN series vs baseline atom
    supervised_sr_jaccard: float = NAN   # supervised map vs ST-CNN map
    jaccard_stcnn_truth: float = NAN     # ST-CNN map vs planted map
    jaccard_baseline_truth: float = NAN  # dictionary map vs planted map
    pearson_truth: float = NAN           # ST-CNN series vs planted course
    baseline_failed: int = 0


COLUMNS = tuple(f.name for f in fields(EvalRow))
SCORE_COLUMNS = COLUMNS[1:]


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def means(self) -> dict[str, float]:
        out = {}
        for col in SCORE_COLUMNS:
            vals = np.array([getattr(r, col) for r in self.rows], dtype=float)
            vals = vals[~np.isnan(vals)]
            out[col] = float(vals.mean()) if vals.size else NAN
        return out

    def check(self) -> None:
        for r in self.rows:
            for col in ("jaccard_stcnn", "jaccard_baseline", "supervised_sr_jaccard",
                        "jaccard_stcnn_truth", "jaccard_baseline_truth"):
                v = getattr(r, col)
                if not (math.isnan(v) or 0.0 <= v <= 1.0):
                    raise ValueError(f"{r.subject}: {col}={v} outside [0, 1]")
            for col in ("temporal_pearson", "pearson_truth"):
                v = getattr(r, col)
                if not (math.isnan(v) or -1.0 - 1e-9 <= v <= 1.0 + 1e-9):
                    raise ValueError(f"{r.subject}: {col}={v} outside [-1, 1]")


def compare_baseline(subject: str, stcnn_map, stcnn_series, model: DictionaryModel,
                     template, planted=None, floor: float = FAILURE_FLOOR,
                     threshold: float = DEFAULT_THRESHOLD) -> EvalRow:
    """Score the ST-CNN output and the dictionary baseline on one subject.

    ``planted`` is an optional ``(map, course)`` pair of ground truth. The
    baseline is marked failed when no atom reaches ``floor`` template overlap.
    """
    match = select_target(model, template, threshold)
    base_map = model.maps[match.best_index]
    base_series = model.atoms[match.best_index]
    row = EvalRow(subject,
                  jaccard_stcnn=jaccard(stcnn_map, template, threshold),
                  jaccard_baseline=match.jaccard,
                  temporal_pearson=temporal_similarity(stcnn_series, base_series),
                  baseline_failed=int(match.jaccard < floor))
    if planted is not None:
        p_map, p_course = planted
        row.jaccard_stcnn_truth = jaccard(stcnn_map, p_map, threshold)
        row.jaccard_baseline_truth = jaccard(base_map, p_map, threshold)
        row.pearson_truth = temporal_similarity(stcnn_series, p_course)
    return row


def validate_supervised(stcnn_series, stcnn_map, volume: Volume4D, lam: float = 0.15,
                        k: int = 20, iters: int = 30, seed: int = 0,
                        threshold: float = DEFAULT_THRESHOLD) -> float:
    """Overlap between the ST-CNN map and the map recovered by dictionary
    learning with the ST-CNN series held fixed as the first atom."""
    model = supervised_dict_learn(volume, [stcnn_series], k, lam, iters, seed)
    return jaccard(model.maps[0], stcnn_map, threshold)


# ---------------------------------------------------------------- files


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else repr(float(v))


def write_report_csv(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    means = report.means()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in report.rows:
            w.writerow([_fmt(v) for v in astuple(r)])
        w.writerow(["mean"] + [_fmt(means[c]) for c in SCORE_COLUMNS])


def read_report_csv(path) -> tuple[EvalReport, dict[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != COLUMNS:
        raise ValueError(f"{path}: unexpected columns {rows[0]}")
    out = []
    for row in rows[1:-1]:
        if len(row) != len(COLUMNS):
            raise ValueError(f"{path}: row has {len(row)} fields, expected {len(COLUMNS)}")
        vals = [float(v) for v in row[1:]]
        out.append(EvalRow(row[0], *vals[:-1], baseline_failed=int(vals[-1])))
    means = {c: float(v) for c, v in zip(SCORE_COLUMNS, rows[-1][1:])}
    return EvalReport(out), means


def map_mosaic(values: np.ndarray, columns: int | None = None) -> np.ndarray:
    """Tile the slices along axis 0 of a 3D map into one 8-bit image."""
    values = np.asarray(values, dtype=float)
    n, h, w = values.shape
    columns = columns or int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / columns))
    lo, hi = values.min(), values.max()
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    img = np.zeros((rows * h, columns * w), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        img[r * h:(r + 1) * h, c * w:(c + 1) * w] = np.round(255 * scaled[i]).astype(np.uint8)
    return img


def write_pgm(image: np.ndarray, path) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, w, h, maxval, rest = blob.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w))


def emit_report(report: EvalReport, csv_path, plots: dict | None = None) -> Path:
    """Write the report CSV and optional plot data; verify the written means.

    ``plots`` maps subject name to a dict with any of ``map``, ``series``,
    ``truth_series`` and ``truth_map``; files go to ``plots/`` next to the CSV.
    """
    report.check()
    csv_path = Path(csv_path)
    write_report_csv(report, csv_path)
    back, written = read_report_csv(csv_path)
    for col, v in back.means().items():
        w = written[col]
        if not (math.isnan(v) and math.isnan(w)) and v != w:
            raise RuntimeError(f"report mean for {col} does not round-trip ({v} vs {w})")
    pdir = csv_path.parent / "plots"
    for subject, data in (plots or {}).items():
        pdir.mkdir(exist_ok=True)
        if "series" in data:
            truth = data.get("truth_series")
            with open(pdir / f"{subject}.series.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["frame", "stcnn", "truth"])
                for t, v in enumerate(np.ravel(data["series"])):
                    w.writerow([t, repr(float(v)), "" if truth is None else repr(float(truth[t]))])
        for key in ("map", "truth_map"):
            if key in data:
                write_pgm(map_mosaic(data[key]), pdir / f"{subject}.{key}.pgm")
    return csv_path
