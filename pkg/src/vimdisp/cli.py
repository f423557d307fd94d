"""Command-line entry point: ``vimdisp {train,eval,bench,ablate,render}``."""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from . import bench, metrics
from .data_io import desk_suite, load_disparity, read_manifest
from .errors import ValidationError
from .model import desk_config, load_checkpoint
from .render import render_heatmap
from .train import evaluate_samples, seed_everything, train

log = logging.getLogger("vimdisp")

COMMANDS = ("train", "eval", "bench", "ablate", "render")


@dataclass
class RunConfig:
    command: str = "bench"
    manifest: list = field(default_factory=list)
    checkpoint: str = ""
    iters: int = 2000
    lr: float = 1e-5
    batch: int = 2
    seed: int = 0
    passes: int = 1
    self_attention: bool = False
    model_dim: int = 64
    schedule: str = "constant"
    warmup: int = 0
    ckpt_every: int = 500
    out: str = "runs"
    device: str = "cpu"
    strict_io: bool = False
    adapter: str = "vim"
    loader_delay: float = 0.0
    records: str = ""
    input: str = ""
    rounds: int = 3
    width: int = 128
    height: int = 64
    deterministic: bool = True

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValidationError(f"unknown command {self.command!r}")
        if self.command == "train" and self.iters <= 0:
            raise ValidationError("iters must be positive for training")

    def model_config(self):
        return desk_config(model_dim=self.model_dim, passes=self.passes, self_attention=self.self_attention)


def _coerce(name, value):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if kind in ("bool", bool):
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    if kind in ("list", list):
        return value if isinstance(value, list) else [v.strip() for v in str(value).split(",") if v.strip()]
    return str(value)


def read_config_file(path):
    """Flat ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":"
            if sep not in line:
                raise ValidationError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split(sep, 1))
            key = key.replace("-", "_")
            if key not in {f.name for f in fields(RunConfig)}:
                raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def _on_off(s):
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return s == "on"


def build_parser():
    p = argparse.ArgumentParser(prog="vimdisp", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--manifest", action="append", help="dataset manifest (repeatable) or 'synthetic'")
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--passes", type=int, choices=(1, 2))
    p.add_argument("--self-attention", type=_on_off, dest="self_attention")
    p.add_argument("--model-dim", type=int, dest="model_dim")
    p.add_argument("--schedule", choices=("constant", "cosine"))
    p.add_argument("--warmup", type=int)
    p.add_argument("--ckpt-every", type=int, dest="ckpt_every")
    p.add_argument("--out")
    p.add_argument("--device")
    p.add_argument("--strict-io", action="store_const", const=True, dest="strict_io")
    p.add_argument("--adapter", help="vim | sleep:SECONDS | package.module:factory")
    p.add_argument("--loader-delay", type=float, dest="loader_delay", help="artificial per-frame loading delay (s)")
    p.add_argument("--records", help="bench: report-only mode from an existing records CSV")
    p.add_argument("--input", help="render: disparity file (.pfm or KITTI .png)")
    p.add_argument("--rounds", type=int, help="bench/ablate: timed passes per dataset; each frame keeps its fastest")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    """Defaults < config file < command-line flags."""
    merged = {}
    if args.config:
        merged.update(read_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            merged[f.name] = v
    merged["command"] = args.command
    return RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})


def echo_config(cfg, out_dir):
    with open(out_dir / "effective_config.txt", "w") as fh:
        for k, v in asdict(cfg).items():
            fh.write(f"{k} = {','.join(v) if isinstance(v, list) else v}\n")


def _load_model(cfg):
    if cfg.checkpoint:
        model = load_checkpoint(cfg.checkpoint, map_location=cfg.device)
        # command-line overrides of the ablation knobs
        model.cfg.passes = cfg.passes
        if cfg.self_attention and model.attention is None:
            raise ValidationError("checkpoint has no self-attention weights")
        return model.eval()
    log.warning("no checkpoint given; using randomly initialised weights")
    return bench.default_model(cfg.model_config(), cfg.seed).to(cfg.device)


def _samples(cfg):
    if not cfg.manifest or cfg.manifest == ["synthetic"]:
        return desk_suite(cfg.width, cfg.height, cfg.seed)
    from .data_io import iterate

    samples = []
    for m in cfg.manifest:
        stream = iterate(read_manifest(m, split="train"), batch=1, strict=cfg.strict_io)
        for batch in stream:
            samples.extend(batch)
        for entry_id, exc in stream.errors:
            log.error("skipping %s: %s", entry_id, exc)
    return samples


def cmd_train(cfg, out_dir):
    seed_everything(cfg.seed)
    model = _load_model(cfg) if cfg.checkpoint else bench.default_model(cfg.model_config(), cfg.seed)
    rows = train(
        model.to(cfg.device),
        _samples(cfg),
        cfg.iters,
        lr=cfg.lr,
        batch=cfg.batch,
        seed=cfg.seed,
        schedule=cfg.schedule,
        warmup=cfg.warmup,
        ckpt_every=cfg.ckpt_every,
        out_dir=str(out_dir),
        log_path=str(out_dir / "loss_log.csv"),
    )
    print(f"trained {len(rows)} iterations; final loss {rows[-1][1]:.4f}")


def cmd_eval(cfg, out_dir):
    model = _load_model(cfg)
    records = []
    for name, make in bench.dataset_sources(cfg.manifest, cfg.strict_io, (cfg.width, cfg.height), cfg.seed).items():
        samples = [s for s in make() if s.gt is not None]
        if not samples:
            records.append(metrics.BenchRecord(name, "Proposed"))
            continue
        e, d, _ = evaluate_samples(model, samples)
        records.append(metrics.BenchRecord(name, "Proposed", epe=e, d1=d))
    metrics.write_csv(records, out_dir / "eval.csv")
    print(metrics.records_to_csv(records), end="")


def _write_report(records, out_dir, stem="bench"):
    metrics.write_csv(records, out_dir / f"{stem}.csv")
    md = metrics.records_to_markdown(records)
    (out_dir / f"{stem}.md").write_text(md)
    print(md, end="")


def cmd_bench(cfg, out_dir):
    if cfg.records:
        records = [r.with_somer() for r in metrics.read_csv(cfg.records)]
        _write_report(records, out_dir)
        return
    model = _load_model(cfg) if cfg.adapter == "vim" else None
    adapter = bench.load_adapter(cfg.adapter, model, cfg.device)
    sources = bench.dataset_sources(cfg.manifest, cfg.strict_io, (cfg.width, cfg.height), cfg.seed)
    records = bench.run_bench(adapter, sources, cfg.loader_delay, cfg.device, rounds=cfg.rounds)
    _write_report(records, out_dir)


def cmd_ablate(cfg, out_dir):
    state = None
    if cfg.checkpoint:
        base = load_checkpoint(cfg.checkpoint)
        state, base_cfg = base.state_dict(), base.cfg
    else:
        base_cfg = cfg.model_config()
    models = bench.ablation_models(base_cfg, state, cfg.seed)
    sources = bench.dataset_sources(cfg.manifest, cfg.strict_io, (cfg.width, cfg.height), cfg.seed)
    results = bench.run_ablation(models, sources, rounds=cfg.rounds, device=cfg.device)
    flat = [r for recs in results.values() for r in recs]
    metrics.write_csv(flat, out_dir / "ablation.csv")
    md = bench.ablation_markdown(results)
    (out_dir / "ablation.md").write_text(md)
    print(md, end="")


def cmd_render(cfg, out_dir):
    if cfg.input:
        dmap = load_disparity(cfg.input)
        target = out_dir / (Path(cfg.input).stem + "_heat.png")
        render_heatmap(dmap, target)
        print(target)
        return
    model = _load_model(cfg)
    for i, sample in enumerate(_samples(cfg)):
        pred = model.predict(sample.left, sample.right)
        target = out_dir / f"{sample.meta.get('id', i)}_heat.png"
        render_heatmap(pred, target)
        print(target)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = resolve_config(args)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    handler = globals()[f"cmd_{cfg.command}"]
    handler(cfg, out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
