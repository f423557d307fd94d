"""Benchmark harness: model adapters, per-dataset measurement and the three-way ablation."""

import importlib
import os
import tempfile
import time
from dataclasses import replace

import numpy as np
import torch
from filelock import FileLock

from . import metrics
from .data_io import desk_suite, iterate
from .errors import UnsupportedError, ValidationError
from .model import ModelConfig, ViMDisparity

ABLATIONS = [
    ("Model w 1-pass w SA", dict(passes=1, self_attention=True)),
    ("Model w 2-pass w/o SA", dict(passes=2, self_attention=False)),
    ("Proposed model", dict(passes=1, self_attention=False)),
]


class ModelAdapter:
    """Uniform interface for anything that maps a stereo pair to disparity.

    ``prepare`` and ``finish`` run outside the timed region; only
    ``__call__`` is measured.
    """

    name = "model"

    def prepare(self, sample):
        return sample.left, sample.right

    def __call__(self, frame):
        raise NotImplementedError

    def finish(self, output):
        return np.asarray(output)


class ViMAdapter(ModelAdapter):
    def __init__(self, model, name="Proposed", device="cpu"):
        self.model = model.to(device).eval()
        self.name = name
        self.device = device

    def prepare(self, sample):
        def t(img):
            return torch.as_tensor(np.ascontiguousarray(img)).permute(2, 0, 1)[None].to(self.device)

        return t(sample.left), t(sample.right)

    @torch.no_grad()
    def __call__(self, frame):
        out = self.model(*frame)["disparity"]
        if self.device.startswith("cuda"):
            torch.cuda.synchronize()
        return out

    def finish(self, output):
        return output[0, 0].cpu().numpy()


class SleepAdapter(ModelAdapter):
    """Stub that sleeps a fixed time and predicts zero disparity."""

    def __init__(self, seconds):
        self.seconds = float(seconds)
        self.name = f"sleep{self.seconds:g}"

    def prepare(self, sample):
        return sample.left.shape[:2]

    def __call__(self, frame):
        time.sleep(self.seconds)
        return np.zeros(frame, dtype=np.float32)


def load_adapter(spec="vim", model=None, device="cpu"):
    """``vim`` (uses ``model``), ``sleep:SECONDS`` or ``package.module:factory``."""
    if spec == "vim":
        if model is None:
            raise ValidationError("the vim adapter needs a model")
        return ViMAdapter(model, device=device)
    if spec.startswith("sleep:"):
        return SleepAdapter(spec.split(":", 1)[1])
    if ":" in spec:
        mod, attr = spec.split(":", 1)
        return getattr(importlib.import_module(mod), attr)()
    raise ValidationError(f"unknown adapter {spec!r}")


def _frames(adapter, samples, loader_delay, sink):
    for sample in samples:
        if loader_delay:
            time.sleep(loader_delay)
        sink.append(sample)
        yield adapter.prepare(sample)


def _timed_pass(adapter, samples, loader_delay=0.0):
    seen, outputs = [], []

    def timed(frame):
        outputs.append(adapter(frame))

    stats = metrics.measure_fps(timed, _frames(adapter, samples, loader_delay, seen))
    return stats, seen, outputs


def _score(adapter, seen, outputs):
    """Per-frame mean EPE and D1 over frames with ground truth, or ``None``."""
    epes, d1s = [], []
    for sample, out in zip(seen, outputs):
        if sample.gt is None or not sample.gt.valid.any():
            continue
        pred = adapter.finish(out)
        epes.append(metrics.epe(pred, sample.gt))
        d1s.append(metrics.d1(pred, sample.gt))
    if not epes:
        return None, None
    return float(np.mean(epes)), float(np.mean(d1s))


def bench_dataset(adapter, name, samples, loader_delay=0.0, warmup=1, memory=True, device="cpu", rounds=1):
    """One :class:`~vimdisp.metrics.BenchRecord` for ``adapter`` on a sample iterable.

    FPS covers only the adapter call. With ``rounds > 1`` the whole pass,
    loading included, is repeated and each frame keeps its fastest time.
    EPE/D1 come from the first pass and stay ``None`` when no frame has
    ground truth.
    """
    if rounds < 1:
        raise ValidationError("rounds must be >= 1")
    samples = iter(samples)
    first = next(samples, None)
    if first is None:
        raise ValidationError(f"dataset {name!r} yielded no samples")
    first_frame = adapter.prepare(first)
    for _ in range(warmup):
        adapter(first_frame)
    mem = None
    if memory:
        try:
            mem = metrics.measure_memory(adapter, first_frame, device=device)
        except UnsupportedError:
            mem = None
    rest = list(samples) if rounds > 1 else samples

    def source():
        yield first
        yield from rest

    stats, seen, outputs = _timed_pass(adapter, source(), loader_delay)
    passes = [stats] + [_timed_pass(adapter, source(), loader_delay)[0] for _ in range(rounds - 1)]
    stats = metrics.best_of_rounds(passes)
    e, d = _score(adapter, seen, outputs)
    rec = metrics.BenchRecord(
        name,
        adapter.name,
        epe=e,
        d1=d,
        fps_min=stats.min,
        fps_avg=stats.avg,
        fps_max=stats.max,
        mem_mib=mem,
    )
    return rec.with_somer()


def device_lock(device="cpu", timeout=-1):
    """Advisory inter-process lock so only one benchmark runs per device."""
    path = os.path.join(tempfile.gettempdir(), f"vimdisp-bench-{device.replace(':', '_')}.lock")
    return FileLock(path, timeout=timeout)


def dataset_sources(manifests, strict=False, synthetic_size=(128, 64), seed=0):
    """``{name: callable returning a fresh sample iterable}``; ``synthetic`` names the built-in suite."""
    sources = {}
    for m in manifests or ["synthetic"]:
        if m == "synthetic":
            w, h = synthetic_size
            sources["synthetic"] = lambda w=w, h=h: iter(desk_suite(w, h, seed))
        else:
            from .data_io import read_manifest

            man = read_manifest(m)

            def stream(man=man):
                for batch in iterate(man, batch=1, strict=strict):
                    yield from batch

            sources[man.name] = stream
    return sources


def run_bench(adapter, sources, loader_delay=0.0, device="cpu", memory=True, rounds=1):
    with device_lock(device):
        return [
            bench_dataset(adapter, name, make(), loader_delay, memory=memory, device=device, rounds=rounds)
            for name, make in sources.items()
        ]


def ablation_models(base_cfg, state_dict=None, seed=0):
    """The three ablation variants of ``base_cfg``, sharing weights where shapes allow."""
    models = {}
    for label, overrides in ABLATIONS:
        torch.manual_seed(seed)
        model = ViMDisparity(replace(base_cfg, **overrides))
        if state_dict is not None:
            model.load_state_dict(state_dict, strict=False)
        models[label] = model.eval()
    return models


def run_ablation(models, sources, rounds=3, device="cpu"):
    """Measure every variant on every dataset.

    Rounds are interleaved across variants so slow drift in the machine
    affects all of them alike; each frame keeps its fastest time over the
    rounds. Returns ``{label: [BenchRecord per dataset]}``.
    """
    if rounds < 1:
        raise ValidationError("rounds must be >= 1")
    adapters = {label: ViMAdapter(m, name=label, device=device) for label, m in models.items()}
    out = {label: [] for label in models}
    with device_lock(device):
        for name, make in sources.items():
            samples = list(make())
            for adapter in adapters.values():
                adapter(adapter.prepare(samples[0]))
            passes = {label: [] for label in adapters}
            scores = {}
            for r in range(rounds):
                for label, adapter in adapters.items():
                    stats, seen, outputs = _timed_pass(adapter, samples)
                    passes[label].append(stats)
                    if r == 0:
                        scores[label] = _score(adapter, seen, outputs)
            for label in adapters:
                st = metrics.best_of_rounds(passes[label])
                e, d = scores[label]
                out[label].append(metrics.BenchRecord(name, label, e, d, st.min, st.avg, st.max))
    return out


def ablation_markdown(results):
    labels = list(results)
    datasets = [r.dataset for r in results[labels[0]]]
    lines = ["| Datasets | Metrics | " + " | ".join(labels) + " |", "|---|---|" + "---|" * len(labels)]
    for i, ds in enumerate(datasets):
        for j, (label, key) in enumerate([("EPE", "epe"), ("D1", "d1"), ("FPS", "fps_avg")]):
            cells = []
            for lab in labels:
                v = getattr(results[lab][i], key)
                cells.append("n/a" if v is None else f"{v:.4g}")
            lines.append(f"| {ds if j == 0 else ''} | {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def default_model(cfg=None, seed=0):
    torch.manual_seed(seed)
    return ViMDisparity(cfg or ModelConfig()).eval()
