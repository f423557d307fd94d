"""Disparity error metrics, speed and memory probes, the SOMER score and report tables."""

import csv
import ctypes
import ctypes.util
import gc
import io
import math
import re
import time
import warnings
from dataclasses import dataclass
from decimal import Decimal
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError, FormatError, UnsupportedError, ValidationError

CSV_HEADER = ["dataset", "model", "epe", "d1", "fps_min", "fps_avg", "fps_max", "mem_mib", "somer"]
ALL_DATASETS = "All datasets"
MIB = 1024 * 1024


@dataclass
class DisparityMap:
    values: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.valid is None:
            self.valid = np.isfinite(self.values)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValidationError("valid mask shape does not match the disparity shape")

    @property
    def shape(self):
        return self.values.shape


def _as_map(x):
    return x if isinstance(x, DisparityMap) else DisparityMap(x)


def _abs_errors(pred, gt):
    pred, gt = _as_map(pred), _as_map(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not gt.valid.any():
        raise DomainError("ground truth has no valid pixels")
    return np.abs(pred.values[gt.valid].astype(np.float64) - gt.values[gt.valid])


def epe(pred, gt):
    """Mean absolute disparity error over valid ground-truth pixels."""
    return float(_abs_errors(pred, gt).mean())


def d1(pred, gt, threshold=3.0):
    """Fraction of valid pixels whose absolute error is strictly greater than ``threshold``."""
    return float((_abs_errors(pred, gt) > threshold).mean())


class FpsStats(NamedTuple):
    min: float
    avg: float
    max: float
    times: tuple


def measure_fps(model_fn, frames, clock=time.perf_counter):
    """Frames per second with the clock read immediately around each ``model_fn(frame)`` call.

    ``frames`` may be a lazy iterable; time spent producing a frame or
    consuming the result is not counted. The average is frame count over
    total in-call time.
    """
    resolution = time.get_clock_info("perf_counter").resolution or 1e-9
    times = []
    for frame in frames:
        start = clock()
        model_fn(frame)
        elapsed = clock() - start
        if elapsed <= 0:
            warnings.warn("measured zero inference time; clamping to clock resolution")
            elapsed = resolution
        times.append(elapsed)
    return _fps_stats(times)


def _fps_stats(times):
    if not times:
        raise ValidationError("measure_fps needs at least one frame")
    per_frame = [1.0 / t for t in times]
    return FpsStats(min(per_frame), len(times) / sum(times), max(per_frame), tuple(times))


def best_of_rounds(rounds):
    """Merge repeated :func:`measure_fps` passes over the same frames.

    Each frame keeps its fastest time across the passes. Interference from
    other processes (or a hypervisor) only ever adds time, so the minimum is
    the least disturbed estimate.
    """
    rounds = list(rounds)
    if not rounds:
        raise ValidationError("best_of_rounds needs at least one pass")
    if len({len(r.times) for r in rounds}) != 1:
        raise ValidationError("passes timed different numbers of frames")
    return _fps_stats([min(ts) for ts in zip(*(r.times for r in rounds))])


def _status_kib(*names):
    with open("/proc/self/status") as fh:
        text = fh.read()
    total = 0
    for name in names:
        m = re.search(rf"^{name}:\s+(\d+) kB", text, re.M)
        if not m:
            raise UnsupportedError(f"/proc/self/status has no {name} field")
        total += int(m.group(1))
    return total


def _reset_peak_rss():
    try:
        with open("/proc/self/clear_refs", "w") as fh:
            fh.write("5")
    except OSError as exc:
        raise UnsupportedError(f"cannot reset the peak RSS counter: {exc}") from exc


def _trim_heap():
    # hand freed heap pages back to the OS so the next call starts from a clean resident set
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name) if name else None
        if libc is not None and hasattr(libc, "malloc_trim"):
            libc.malloc_trim(0)
    except OSError:
        pass


def measure_memory(model_fn, frame, device=None):
    """Peak memory in MiB attributable to one ``model_fn(frame)`` call.

    On CUDA devices this is the peak allocator footprint. Otherwise it is the
    rise of the process's peak anonymous resident memory over its level at
    entry, read from Linux ``/proc`` (file-backed pages are excluded because
    the kernel may reclaim them mid-call).
    """
    if device is not None and str(device).startswith("cuda"):
        import torch

        if not torch.cuda.is_available():
            raise UnsupportedError("CUDA requested but not available")
        torch.cuda.synchronize(device)
        torch.cuda.reset_peak_memory_stats(device)
        base = torch.cuda.memory_allocated(device)
        model_fn(frame)
        torch.cuda.synchronize(device)
        return (torch.cuda.max_memory_allocated(device) - base) / MIB

    gc.collect()
    _trim_heap()
    try:
        _reset_peak_rss()
        base = _status_kib("RssAnon")
        # the output stays alive until the probe is read: freeing it first would
        # let the kernel fold the peak from its approximate per-CPU counters
        out = model_fn(frame)
        peak = _status_kib("VmHWM") - _status_kib("RssFile", "RssShmem")
    except FileNotFoundError as exc:
        raise UnsupportedError("resident-set probe needs Linux /proc") from exc
    del out
    return max(peak - base, 0) / 1024.0


def somer(fps, epe, mem):
    """Speed over memory and error ratio: ``fps / (epe * ln(mem))``."""
    if epe <= 0:
        raise DomainError("SOMER is undefined for EPE <= 0")
    if mem <= 1:
        raise DomainError("SOMER is undefined for memory <= 1 MiB")
    if fps < 0:
        raise DomainError("FPS must be non-negative")
    return fps / (epe * math.log(mem))


def _try_somer(fps, epe, mem):
    if fps is None or epe is None or mem is None:
        return None
    try:
        return somer(fps, epe, mem)
    except DomainError:
        return None


@dataclass
class BenchRecord:
    dataset: str
    model: str
    epe: Optional[float] = None
    d1: Optional[float] = None
    fps_min: Optional[float] = None
    fps_avg: Optional[float] = None
    fps_max: Optional[float] = None
    mem_mib: Optional[float] = None
    somer: Optional[float] = None

    def __post_init__(self):
        if self.epe is not None and self.epe < 0:
            raise ValidationError("epe must be non-negative")
        if self.d1 is not None and not 0 <= self.d1 <= 1:
            raise ValidationError("d1 must be a fraction in [0, 1]")
        fps = [v for v in (self.fps_min, self.fps_avg, self.fps_max) if v is not None]
        if len(fps) == 3 and not (self.fps_min <= self.fps_avg * (1 + 1e-9) and self.fps_avg <= self.fps_max * (1 + 1e-9)):
            raise ValidationError("expected fps_min <= fps_avg <= fps_max")

    def with_somer(self):
        self.somer = _try_somer(self.fps_avg, self.epe, self.mem_mib)
        return self


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _merge(rows, dataset, model):
    return BenchRecord(
        dataset,
        model,
        epe=_mean(r.epe for r in rows),
        d1=_mean(r.d1 for r in rows),
        fps_min=_mean(r.fps_min for r in rows),
        fps_avg=_mean(r.fps_avg for r in rows),
        fps_max=_mean(r.fps_max for r in rows),
        mem_mib=_mean(r.mem_mib for r in rows),
    )


def aggregate(records):
    """Per-(model, dataset) rows followed by one ``All datasets`` row per model.

    Components are averaged and SOMER is recomputed from the averages. A
    single record comes back unchanged.
    """
    records = list(records)
    if not records:
        raise ValidationError("aggregate needs at least one record")
    models = list(dict.fromkeys(r.model for r in records))
    out = []
    for model in models:
        mine = [r for r in records if r.model == model]
        per_dataset = []
        for ds in dict.fromkeys(r.dataset for r in mine):
            group = [r for r in mine if r.dataset == ds]
            row = group[0] if len(group) == 1 else _merge(group, ds, model).with_somer()
            per_dataset.append(row)
        out.extend(per_dataset)
        if len(per_dataset) == 1:
            only = per_dataset[0]
            out.append(BenchRecord(**{**vars(only), "dataset": ALL_DATASETS}))
        else:
            out.append(_merge(per_dataset, ALL_DATASETS, model).with_somer())
    return out


def _fmt(v):
    return "" if v is None else f"{v:.4g}"


def _parse(s):
    s = s.strip()
    return None if s in ("", "n/a") else float(s)


def records_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.dataset, r.model] + [_fmt(getattr(r, k)) for k in CSV_HEADER[2:]])
    return buf.getvalue()


def records_from_csv(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise FormatError(f"unexpected CSV header {header}")
    return [BenchRecord(row[0], row[1], *[_parse(v) for v in row[2:]]) for row in reader if row]


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(records))


def read_csv(path):
    with open(path, newline="") as fh:
        return records_from_csv(fh.read())


def _pct(v):
    return "n/a" if v is None else f"{Decimal(f'{v:.4g}') * 100:f}%"


def _unpct(s):
    s = s.strip()
    return None if s == "n/a" else float(Decimal(s.rstrip("%")) / 100)


_METRIC_ROWS = [("EPE", "epe"), ("D1", "d1"), ("FPS", "fps_avg"), ("MEM", "mem_mib"), ("SOMER", "somer")]
_FPS_ROWS = [("min", "fps_min"), ("avg", "fps_avg"), ("max", "fps_max")]


def _grid(records):
    models = list(dict.fromkeys(r.model for r in records))
    datasets = list(dict.fromkeys(r.dataset for r in records))
    table = {(r.dataset, r.model): r for r in records}
    return models, datasets, table


def records_to_markdown(records):
    """Comparison table (EPE, D1, FPS, MEM, SOMER per dataset) and an FPS min/avg/max table."""
    models, datasets, table = _grid(records)
    head = "| " + " | ".join(models) + " |"
    sep = "|---|---|" + "---|" * len(models)
    lines = ["## Comparative performance", "", "| Dataset | Metric " + head, sep]
    for ds in datasets:
        for i, (label, key) in enumerate(_METRIC_ROWS):
            cells = []
            for m in models:
                r = table.get((ds, m))
                v = None if r is None else getattr(r, key)
                cells.append(_pct(v) if key == "d1" else (_fmt(v) or "n/a"))
            lines.append(f"| {ds if i == 0 else ''} | {label} | " + " | ".join(cells) + " |")
    lines += ["", "## Speed statistics (FPS)", "", "| Dataset | Stat " + head, sep]
    for ds in datasets:
        for i, (label, key) in enumerate(_FPS_ROWS):
            cells = [_fmt(getattr(table[(ds, m)], key)) if (ds, m) in table else "n/a" for m in models]
            cells = [c or "n/a" for c in cells]
            lines.append(f"| {ds if i == 0 else ''} | {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def records_from_markdown(text):
    """Inverse of :func:`records_to_markdown`."""
    values = {}
    models = None
    current = None
    for line in text.splitlines():
        if not line.startswith("|") or line.startswith("|---"):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if cells[0] == "Dataset":
            models = cells[2:]
            continue
        if models is None:
            raise FormatError("table row before header")
        if cells[0]:
            current = cells[0]
        label = cells[1]
        key = dict(_METRIC_ROWS + _FPS_ROWS).get(label)
        if key is None:
            raise FormatError(f"unknown row label {label!r}")
        for m, cell in zip(models, cells[2:]):
            if cell == "n/a" and (current, m) not in values:
                continue
            rec = values.setdefault((current, m), {})
            rec[key] = _unpct(cell) if key == "d1" else _parse(cell)
    return [BenchRecord(ds, m, **kw) for (ds, m), kw in values.items()]
